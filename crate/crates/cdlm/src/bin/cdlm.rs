//! Command-line front end: dataset generation, training, evaluation, and
//! ablation grids. Every run writes a manifest recording its inputs and a
//! content hash of its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use cdlm::checkpoint::load_checkpoint;
use cdlm::data::{
    gen_synthetic_pair, load_domain_dir, write_domain_dir, DatasetSpec, DomainBatch,
};
use cdlm::error::{CdlmError, Result};
use cdlm::eval::{
    evaluate, export_embeddings, run_ablations, train_source_classifier, AblationRow,
    AblationSpec,
};
use cdlm::model::{CdlmModel, ConvSpec, NetConfig};
use cdlm::trainer::{fit, DomainPair, FitOptions, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "cdlm", about = "Cross-domain latent modulation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic dataset on disk.
    GenData(GenDataArgs),
    /// Train an adaptation model on a paired dataset.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (four split subdirectories are created inside).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training images per domain.
    #[arg(long, default_value_t = 2000)]
    train: usize,
    /// Test images per domain.
    #[arg(long, default_value_t = 500)]
    test: usize,
    /// Square image extent.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (defaults to $CDLM_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; omitted keys use published defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from an existing checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Source-classifier training steps.
    #[arg(long, default_value_t = 400)]
    clf_steps: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Which grid to run: gamma, consistency, or depth.
    #[arg(long, default_value = "gamma")]
    grid: String,
    #[arg(long, default_value_t = 2)]
    jobs: usize,
    /// Steps per grid cell.
    #[arg(long, default_value_t = 600)]
    steps: u64,
    /// Source-classifier training steps.
    #[arg(long, default_value_t = 400)]
    clf_steps: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CdlmError::Usage(_) | CdlmError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve_data_dir(arg: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = arg {
        return Ok(p);
    }
    std::env::var_os("CDLM_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| {
            CdlmError::Usage("no --data directory given and CDLM_DATA_DIR is unset".into())
        })
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| CdlmError::io(out.display().to_string(), e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CdlmError::Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CdlmError::io(out.display().to_string(), e))
}

/// SHA-256 over the named files' bytes, in the given (sorted) order.
fn content_hash(files: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut sorted: Vec<&PathBuf> = files.iter().collect();
    sorted.sort();
    for f in sorted {
        let bytes = fs::read(f).map_err(|e| CdlmError::io(f.display().to_string(), e))?;
        hasher.update(f.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| CdlmError::io(d.display().to_string(), e))? {
            let entry = entry.map_err(|e| CdlmError::io(d.display().to_string(), e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.txt") {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn write_manifest(out: &Path, command: &str, fields: &[(&str, String)]) -> Result<()> {
    let files = collect_files(out)?;
    let hash = content_hash(&files)?;
    let mut text = String::new();
    text.push_str(&format!("command={command}\n"));
    for (k, v) in fields {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("files={}\n", files.len()));
    text.push_str(&format!("content_sha256={hash}\n"));
    let path = out.join("manifest.txt");
    fs::write(&path, text).map_err(|e| CdlmError::io(path.display().to_string(), e))
}

const SPLITS: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

fn load_pair(dir: &Path) -> Result<DomainPair<f32>> {
    let load = |name: &str| -> Result<DomainBatch<f32>> { load_domain_dir(dir.join(name)) };
    Ok(DomainPair {
        source_train: load(SPLITS[0])?,
        source_test: load(SPLITS[1])?,
        target_train: load(SPLITS[2])?,
        target_test: load(SPLITS[3])?,
    })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    prepare_out_dir(&a.out, a.force)?;
    let spec = DatasetSpec {
        classes: a.classes,
        height: a.size,
        width: a.size,
        train_per_domain: a.train,
        test_per_domain: a.test,
        seed: a.seed,
        ..DatasetSpec::default()
    };
    let pair = gen_synthetic_pair::<f32>(&spec)?;
    write_domain_dir(a.out.join(SPLITS[0]), &pair.source_train)?;
    write_domain_dir(a.out.join(SPLITS[1]), &pair.source_test)?;
    write_domain_dir(a.out.join(SPLITS[2]), &pair.target_train)?;
    write_domain_dir(a.out.join(SPLITS[3]), &pair.target_test)?;
    write_manifest(
        &a.out,
        "gen-data",
        &[
            ("seed", a.seed.to_string()),
            ("train_per_domain", a.train.to_string()),
            ("test_per_domain", a.test.to_string()),
            ("size", a.size.to_string()),
            ("classes", a.classes.to_string()),
        ],
    )?;
    println!(
        "wrote {} train + {} test images per domain to {}",
        a.train,
        a.test,
        a.out.display()
    );
    Ok(())
}

/// Derive a mirror-compatible architecture from the dataset extents.
fn net_config_for(data: &DomainBatch<f32>) -> Result<NetConfig> {
    let mut layers = 0usize;
    let (mut h, mut w) = (data.height, data.width);
    let widths = [16usize, 32, 64];
    while layers < 3 && h % 2 == 0 && w % 2 == 0 && h / 2 >= 2 && w / 2 >= 2 {
        h /= 2;
        w /= 2;
        layers += 1;
    }
    if layers == 0 {
        return Err(CdlmError::Config(format!(
            "images of {}x{} cannot support the halving encoder",
            data.height, data.width
        )));
    }
    let conv = (0..layers)
        .map(|i| ConvSpec {
            out_channels: widths[i],
            kernel: 3,
            stride: 2,
            pad: 1,
        })
        .collect();
    Ok(NetConfig {
        in_channels: data.channels,
        height: data.height,
        width: data.width,
        conv,
        z_dim: 64,
        disc_hidden: 256,
        leaky_slope: 0.2,
        h_tap: layers,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data_dir = resolve_data_dir(a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let data = load_pair(&data_dir)?;

    let mut state: TrainState<f32> = if let Some(resume) = &a.resume {
        let mut s = load_checkpoint(resume)?;
        if let Some(steps) = a.steps {
            s.config.steps = steps;
        }
        s
    } else {
        let mut config = match &a.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CdlmError::io(p.display().to_string(), e))?;
                TrainConfig::from_text(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(steps) = a.steps {
            config.steps = steps;
        }
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        config.validate()?;
        let net = net_config_for(&data.source_train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CdlmModel::new(net, &mut rng)?;
        TrainState::new(model, config)
    };

    let config_path = a.out.join("config.txt");
    fs::write(&config_path, state.config.to_text())
        .map_err(|e| CdlmError::io(config_path.display().to_string(), e))?;

    let trace = a.out.join("trace.csv");
    let ck_dir = a.out.join("checkpoints");
    let start_step = state.step;
    fit(
        &mut state,
        &data,
        FitOptions {
            trace_path: Some(&trace),
            checkpoint_dir: Some(&ck_dir),
            ..FitOptions::default()
        },
    )?;
    write_manifest(
        &a.out,
        "train",
        &[
            ("data", data_dir.display().to_string()),
            ("seed", state.config.seed.to_string()),
            ("start_step", start_step.to_string()),
            ("end_step", state.step.to_string()),
            ("resumed", a.resume.is_some().to_string()),
        ],
    )?;
    println!(
        "trained to step {} ({} this run); final checkpoint at {}",
        state.step,
        state.step - start_step,
        ck_dir.join("checkpoint_final.cdlm").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data_dir = resolve_data_dir(a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let data = load_pair(&data_dir)?;
    let state: TrainState<f32> = load_checkpoint(&a.checkpoint)?;

    let classes = class_count(&data.source_train)?;
    let clf = train_source_classifier(&data.source_train, classes, a.clf_steps, a.seed)?;
    let report = evaluate(
        &state.model,
        &clf,
        &data,
        state.config.gamma1,
        state.config.gamma2,
        a.seed,
    )?;

    let eval_path = a.out.join("eval.csv");
    let text = format!("{}\n{}\n", cdlm::eval::EvalReport::csv_header(), report.csv_row());
    fs::write(&eval_path, text).map_err(|e| CdlmError::io(eval_path.display().to_string(), e))?;
    export_embeddings(
        &a.out.join("embeddings.csv"),
        &state.model,
        &data.source_test,
        &data.target_test,
    )?;
    write_manifest(
        &a.out,
        "eval",
        &[
            ("data", data_dir.display().to_string()),
            ("checkpoint", a.checkpoint.display().to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    println!(
        "source_acc={:.4} target_direct_acc={:.4} adaptation_acc={:.4} a_distance={:.4}",
        report.source_acc, report.target_direct_acc, report.adaptation_acc, report.a_distance
    );
    Ok(())
}

fn class_count(data: &DomainBatch<f32>) -> Result<usize> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| CdlmError::Usage("source training data must be labeled".into()))?;
    Ok(*labels.iter().max().unwrap_or(&0) as usize + 1)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let data_dir = resolve_data_dir(a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let data = load_pair(&data_dir)?;

    let base_train = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    base_train.validate()?;
    let base_net = net_config_for(&data.source_train)?;

    let grid: Vec<AblationSpec> = match a.grid.as_str() {
        "gamma" => [(1.0, 0.1), (0.5, 0.5), (0.1, 1.0), (1.0, 0.0)]
            .iter()
            .map(|&(g1, g2)| AblationSpec {
                gamma1: g1,
                gamma2: g2,
                ..AblationSpec::from_base(&format!("gamma_{g1}_{g2}"), &base_train, &base_net)
            })
            .collect(),
        "consistency" => [
            ("cons_none", 0.0, 0.0),
            ("cons_source_only", base_train.beta1, 0.0),
            ("cons_both", base_train.beta1, base_train.beta2),
        ]
        .iter()
        .map(|&(name, b1, b2)| AblationSpec {
            beta1: b1,
            beta2: b2,
            ..AblationSpec::from_base(name, &base_train, &base_net)
        })
        .collect(),
        "depth" => (1..=base_net.conv.len())
            .map(|tap| AblationSpec {
                h_tap: tap,
                ..AblationSpec::from_base(&format!("tap_{tap}"), &base_train, &base_net)
            })
            .collect(),
        other => {
            return Err(CdlmError::Usage(format!(
                "unknown grid {other:?} (expected gamma, consistency, or depth)"
            )))
        }
    };

    let classes = class_count(&data.source_train)?;
    let clf = train_source_classifier(&data.source_train, classes, a.clf_steps, a.seed)?;
    let rows = run_ablations(&grid, &base_train, &base_net, &data, &clf, a.jobs);

    let path = a.out.join("ablations.csv");
    let mut text = String::from(AblationRow::csv_header());
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| CdlmError::io(path.display().to_string(), e))?;
    write_manifest(
        &a.out,
        "ablate",
        &[
            ("data", data_dir.display().to_string()),
            ("grid", a.grid.clone()),
            ("steps", a.steps.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    for r in &rows {
        match (r.adaptation_acc, &r.error) {
            (Some(acc), _) => println!("{}: adaptation_acc={acc:.4}", r.spec.name),
            (None, Some(e)) => println!("{}: failed: {e}", r.spec.name),
            _ => {}
        }
    }
    Ok(())
}
