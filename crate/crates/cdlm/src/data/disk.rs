//! Dataset directory export/import: one PGM (grayscale) or PPM (3-channel)
//! file per image plus a labels CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::DomainBatch;
use crate::error::{CdlmError, Result};
use crate::num::Scalar;

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_c() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write a batch as `img_#####.pgm|ppm` plus `labels.csv` under `dir`.
pub fn write_domain_dir<T: Scalar>(dir: impl AsRef<Path>, batch: &DomainBatch<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CdlmError::io(dir.display().to_string(), e))?;
    if batch.channels != 1 && batch.channels != 3 {
        return Err(CdlmError::Usage(format!(
            "image export supports 1 or 3 channels, got {}",
            batch.channels
        )));
    }
    let ext = if batch.channels == 1 { "pgm" } else { "ppm" };
    let plane = batch.height * batch.width;
    for i in 0..batch.n {
        let path = dir.join(format!("img_{i:05}.{ext}"));
        let img = batch.image(i);
        let mut bytes = Vec::with_capacity(32 + img.len());
        let tag = if batch.channels == 1 { "P5" } else { "P6" };
        bytes.extend_from_slice(
            format!("{tag}\n{} {}\n255\n", batch.width, batch.height).as_bytes(),
        );
        // planar NCHW -> interleaved scanlines
        for p in 0..plane {
            for c in 0..batch.channels {
                bytes.push(quantize(img[c * plane + p]));
            }
        }
        fs::write(&path, bytes).map_err(|e| CdlmError::io(path.display().to_string(), e))?;
    }
    let labels_path = dir.join("labels.csv");
    let mut f = fs::File::create(&labels_path)
        .map_err(|e| CdlmError::io(labels_path.display().to_string(), e))?;
    writeln!(f, "index,filename,label")
        .map_err(|e| CdlmError::io(labels_path.display().to_string(), e))?;
    for i in 0..batch.n {
        let label = batch
            .labels
            .as_ref()
            .map(|l| l[i].to_string())
            .unwrap_or_else(|| "-1".into());
        writeln!(f, "{i},img_{i:05}.{ext},{label}")
            .map_err(|e| CdlmError::io(labels_path.display().to_string(), e))?;
    }
    Ok(())
}

fn parse_pnm_header(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, usize)> {
    // Tokenize the four header fields bytewise: the binary pixel payload
    // starts right after the maxval's trailing whitespace and need not be
    // valid UTF-8, so no text decoding of the whole prefix is allowed.
    let mut pos = 0usize;
    let mut next_token = |what: &str| -> Result<(String, usize)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(CdlmError::Format {
                path: path.to_string(),
                offset: start as u64,
                detail: format!("missing {what} in PNM header"),
            });
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        // skip exactly the single whitespace byte terminating this token
        pos += 1;
        Ok((tok, pos))
    };
    let (tag, _) = next_token("tag")?;
    let channels = match tag.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(CdlmError::Format {
                path: path.to_string(),
                offset: 0,
                detail: format!("unsupported PNM tag {tag:?}"),
            })
        }
    };
    let mut next_num = |what: &str| -> Result<(usize, usize)> {
        let (tok, end) = next_token(what)?;
        let v = tok.parse().map_err(|_| CdlmError::Format {
            path: path.to_string(),
            offset: end as u64,
            detail: format!("malformed {what} in PNM header: {tok:?}"),
        })?;
        Ok((v, end))
    };
    let (w, _) = next_num("width")?;
    let (h, _) = next_num("height")?;
    let (maxval, offset) = next_num("maxval")?;
    if maxval != 255 {
        return Err(CdlmError::Format {
            path: path.to_string(),
            offset: 0,
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    Ok((channels, h, w, offset))
}

/// Load a directory produced by `write_domain_dir`.
pub fn load_domain_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<DomainBatch<T>> {
    let dir = dir.as_ref();
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| CdlmError::io(labels_path.display().to_string(), e))?;
    let mut files = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split(',');
        let (_, file, label) = (
            cols.next(),
            cols.next().ok_or_else(|| CdlmError::Format {
                path: labels_path.display().to_string(),
                offset: lineno as u64,
                detail: "missing filename column".into(),
            })?,
            cols.next().ok_or_else(|| CdlmError::Format {
                path: labels_path.display().to_string(),
                offset: lineno as u64,
                detail: "missing label column".into(),
            })?,
        );
        let label: i32 = label.parse().map_err(|_| CdlmError::Format {
            path: labels_path.display().to_string(),
            offset: lineno as u64,
            detail: format!("bad label {label:?}"),
        })?;
        files.push((file.to_string(), label));
    }
    if files.is_empty() {
        return Err(CdlmError::Format {
            path: labels_path.display().to_string(),
            offset: 0,
            detail: "empty dataset".into(),
        });
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    let has_labels = files.iter().all(|(_, l)| *l >= 0);
    for (file, label) in &files {
        let path = dir.join(file);
        let pstr = path.display().to_string();
        let bytes = fs::read(&path).map_err(|e| CdlmError::io(&pstr, e))?;
        let (c, h, w, offset) = parse_pnm_header(&bytes, &pstr)?;
        match shape {
            None => shape = Some((c, h, w)),
            Some(s) if s != (c, h, w) => {
                return Err(CdlmError::Format {
                    path: pstr,
                    offset: 0,
                    detail: "inconsistent image shapes in dataset".into(),
                })
            }
            _ => {}
        }
        let need = offset + c * h * w;
        if bytes.len() < need {
            return Err(CdlmError::Format {
                path: pstr,
                offset: bytes.len() as u64,
                detail: format!("truncated image data: have {}, need {need}", bytes.len()),
            });
        }
        // interleaved -> planar
        let plane = h * w;
        for ch in 0..c {
            for p in 0..plane {
                let b = bytes[offset + p * c + ch];
                images.push(T::from_f64_c(b as f64 / 255.0));
            }
        }
        labels.push(*label as u8);
    }
    let (c, h, w) = shape.unwrap();
    DomainBatch::new(
        images,
        files.len(),
        c,
        h,
        w,
        if has_labels { Some(labels) } else { None },
    )
}
