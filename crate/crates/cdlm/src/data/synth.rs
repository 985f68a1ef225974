//! Procedural glyph generator and the noisy-background compositor.
//!
//! The source domain is clean parameterized strokes; the target is the same
//! glyph generator composited over random colored-noise backgrounds with the
//! MNISTM-style |background − foreground| blend.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetSpec, DomainBatch};
use crate::error::{CdlmError, Result};
use crate::num::Scalar;

/// The four splits of a paired synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticPair<T> {
    pub source_train: DomainBatch<T>,
    pub source_test: DomainBatch<T>,
    pub target_train: DomainBatch<T>,
    pub target_test: DomainBatch<T>,
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            px: vec![0.0; h * w],
        }
    }

    fn set(&mut self, y: i64, x: i64, v: f64) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            let p = &mut self.px[y as usize * self.w + x as usize];
            *p = p.max(v);
        }
    }

    fn thick_point(&mut self, y: i64, x: i64, t: i64, v: f64) {
        for dy in 0..t {
            for dx in 0..t {
                self.set(y + dy, x + dx, v);
            }
        }
    }

    fn line(&mut self, y0: i64, x0: i64, y1: i64, x1: i64, t: i64, v: f64) {
        let steps = (y1 - y0).abs().max((x1 - x0).abs()).max(1);
        for s in 0..=steps {
            let y = y0 + (y1 - y0) * s / steps;
            let x = x0 + (x1 - x0) * s / steps;
            self.thick_point(y, x, t, v);
        }
    }
}

/// Render one glyph. Classes are stroke families; jitter moves the centre,
/// length, thickness, and intensity without crossing class boundaries.
fn render_glyph(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut c = Canvas::new(h, w);
    let cy = h as i64 / 2 + rng.gen_range(-2..=2);
    let cx = w as i64 / 2 + rng.gen_range(-2..=2);
    let ext = (h.min(w) as i64) / 2 - 2 + rng.gen_range(-1..=1);
    let t = rng.gen_range(1..=2);
    let v = rng.gen_range(0.7..1.0);
    match class % 8 {
        0 => c.line(cy, cx - ext, cy, cx + ext, t, v),
        1 => c.line(cy - ext, cx, cy + ext, cx, t, v),
        2 => c.line(cy - ext, cx - ext, cy + ext, cx + ext, t, v),
        3 => c.line(cy - ext, cx + ext, cy + ext, cx - ext, t, v),
        4 => {
            c.line(cy, cx - ext, cy, cx + ext, t, v);
            c.line(cy - ext, cx, cy + ext, cx, t, v);
        }
        5 => {
            c.line(cy - ext, cx - ext, cy + ext, cx + ext, t, v);
            c.line(cy - ext, cx + ext, cy + ext, cx - ext, t, v);
        }
        6 => {
            c.line(cy - ext, cx - ext, cy - ext, cx + ext, t, v);
            c.line(cy + ext, cx - ext, cy + ext, cx + ext, t, v);
            c.line(cy - ext, cx - ext, cy + ext, cx - ext, t, v);
            c.line(cy - ext, cx + ext, cy + ext, cx + ext, t, v);
        }
        _ => {
            // disc outline
            let r = ext as f64 - 0.5;
            let n = 40;
            for i in 0..n {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let y = cy as f64 + r * a.sin();
                let x = cx as f64 + r * a.cos();
                c.thick_point(y.round() as i64, x.round() as i64, t, v);
            }
        }
    }
    c.px
}

fn render_split<T: Scalar>(
    n: usize,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DomainBatch<T>> {
    let plane = spec.height * spec.width;
    let mut images = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let px = render_glyph(class, spec.height, spec.width, rng);
        images.extend(px.into_iter().map(T::from_f64_c));
        labels.push(class as u8);
    }
    DomainBatch::new(images, n, 1, spec.height, spec.width, Some(labels))
}

/// Smooth colored noise: a coarse random grid bilinearly upsampled, plus a
/// little per-pixel grain.
fn render_background(h: usize, w: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const COARSE: usize = 4;
    let mut bg = vec![0.0; channels * h * w];
    for c in 0..channels {
        // Background values stay below the glyph intensity range (0.7..1.0)
        // so strokes keep positive contrast after the |bg - fg| blend.
        let grid: Vec<f64> = (0..COARSE * COARSE)
            .map(|_| rng.gen_range(0.0..0.6))
            .collect();
        for y in 0..h {
            for x in 0..w {
                let fy = y as f64 / h as f64 * (COARSE - 1) as f64;
                let fx = x as f64 / w as f64 * (COARSE - 1) as f64;
                let (y0, x0) = (fy as usize, fx as usize);
                let (y1, x1) = ((y0 + 1).min(COARSE - 1), (x0 + 1).min(COARSE - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let top = grid[y0 * COARSE + x0] * (1.0 - tx) + grid[y0 * COARSE + x1] * tx;
                let bot = grid[y1 * COARSE + x0] * (1.0 - tx) + grid[y1 * COARSE + x1] * tx;
                let grain = rng.gen_range(-0.05..0.05);
                bg[(c * h + y) * w + x] = (top * (1.0 - ty) + bot * ty + grain).clamp(0.0, 1.0);
            }
        }
    }
    bg
}

/// MNISTM-style compositor: per-image random colored background, foreground
/// blended as |background − foreground| per channel. Labels pass through.
pub fn composite_background<T: Scalar>(x: &DomainBatch<T>, seed: u64) -> Result<DomainBatch<T>> {
    if x.channels != 1 {
        return Err(CdlmError::Usage(
            "composite_background expects grayscale input".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut images = Vec::with_capacity(x.n * 3 * plane);
    for i in 0..x.n {
        let fg = x.image(i);
        let bg = render_background(h, w, 3, &mut rng);
        for c in 0..3 {
            for p in 0..plane {
                let v = (bg[c * plane + p] - fg[p].to_f64_c()).abs();
                images.push(T::from_f64_c(v));
            }
        }
    }
    DomainBatch::new(images, x.n, 3, h, w, x.labels.clone())
}

/// Nearest-neighbor resize; pixel range preserved exactly.
pub fn resize_nearest<T: Scalar>(x: &DomainBatch<T>, h: usize, w: usize) -> Result<DomainBatch<T>> {
    if h == 0 || w == 0 {
        return Err(CdlmError::Config("resize target extents must be positive".into()));
    }
    let mut images = Vec::with_capacity(x.n * x.channels * h * w);
    for i in 0..x.n {
        let img = x.image(i);
        for c in 0..x.channels {
            let plane = &img[c * x.height * x.width..(c + 1) * x.height * x.width];
            for y in 0..h {
                let sy = y * x.height / h;
                for xx in 0..w {
                    let sx = xx * x.width / w;
                    images.push(plane[sy * x.width + sx]);
                }
            }
        }
    }
    DomainBatch::new(images, x.n, x.channels, h, w, x.labels.clone())
}

/// Build the desk-scale paired dataset: clean glyphs (3-channel replicated)
/// vs. the same generator over noisy backgrounds. Deterministic given the
/// spec seed; train/test draws are disjoint by construction (fresh glyphs).
pub fn gen_synthetic_pair<T: Scalar>(spec: &DatasetSpec) -> Result<SyntheticPair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source_train = render_split::<T>(spec.train_per_domain, spec, &mut rng)?
        .replicate_channels(3)?;
    let source_test = render_split::<T>(spec.test_per_domain, spec, &mut rng)?
        .replicate_channels(3)?;
    let target_train_gray = render_split::<T>(spec.train_per_domain, spec, &mut rng)?;
    let target_test_gray = render_split::<T>(spec.test_per_domain, spec, &mut rng)?;
    let target_train = composite_background(&target_train_gray, spec.seed ^ 0x9e3779b97f4a7c15)?;
    let target_test = composite_background(&target_test_gray, spec.seed ^ 0x517cc1b727220a95)?;
    Ok(SyntheticPair {
        source_train,
        source_test,
        target_train,
        target_test,
    })
}
