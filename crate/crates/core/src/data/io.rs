//! Dataset file formats, all codec-free and bit-exact:
//!
//! - raw plane: one text line `W H`, then W*H little-endian i16 values
//! - preprocessed plane: binary PGM (P5, maxval 255)
//! - labels: one `class cx cy w h` line per box, 6-decimal fixed point
//! - manifest: one `image_path<TAB>label_path` line per sample

use std::fs;
use std::path::{Path, PathBuf};

use super::{Plane, Sample};
use crate::error::{CoreError, Result};
use crate::metrics::{BBox, GroundTruth};

pub fn write_raw(path: &Path, plane: &Plane<i16>) -> Result<()> {
    let mut bytes = format!("{} {}\n", plane.width, plane.height).into_bytes();
    for &v in &plane.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Plane<i16>> {
    let bytes = fs::read(path)?;
    let ctx = || path.display().to_string();
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::parse(ctx(), "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| CoreError::parse(ctx(), "header is not UTF-8"))?;
    let mut it = header.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CoreError::parse(ctx(), "bad width"))?;
    let height: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| CoreError::parse(ctx(), "bad height"))?;
    if it.next().is_some() {
        return Err(CoreError::parse(ctx(), "trailing tokens in header"));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != width * height * 2 {
        return Err(CoreError::parse(
            ctx(),
            format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                width * height * 2
            ),
        ));
    }
    let data = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(Plane { width, height, data })
}

pub fn write_pgm(path: &Path, plane: &Plane<u8>) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    bytes.extend_from_slice(&plane.data);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Plane<u8>> {
    let bytes = fs::read(path)?;
    let ctx = || path.display().to_string();
    // header: "P5" ws W ws H ws MAXVAL single-ws payload
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(CoreError::parse(ctx(), "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(CoreError::parse(ctx(), format!("bad magic {magic:?}, expected P5")));
    }
    let width: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CoreError::parse(ctx(), "bad width"))?;
    let height: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CoreError::parse(ctx(), "bad height"))?;
    let maxval: usize = token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CoreError::parse(ctx(), "bad maxval"))?;
    if maxval != 255 {
        return Err(CoreError::parse(ctx(), format!("unsupported maxval {maxval}")));
    }
    pos += 1; // the single whitespace byte after maxval
    if bytes.len() - pos.min(bytes.len()) != width * height {
        return Err(CoreError::parse(
            ctx(),
            format!(
                "payload is {} bytes, expected {}",
                bytes.len().saturating_sub(pos),
                width * height
            ),
        ));
    }
    Ok(Plane {
        width,
        height,
        data: bytes[pos..].to_vec(),
    })
}

pub fn write_labels(path: &Path, boxes: &[GroundTruth]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path)?;
    parse_labels(&text, &path.display().to_string())
}

pub fn parse_labels(text: &str, source: &str) -> Result<Vec<GroundTruth>> {
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ctx = format!("{source}:{}", lineno + 1);
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(CoreError::parse(
                ctx,
                format!("expected 5 fields `class cx cy w h`, got {}", tokens.len()),
            ));
        }
        let class: usize = tokens[0]
            .parse()
            .map_err(|_| CoreError::parse(ctx.clone(), format!("bad class {:?}", tokens[0])))?;
        let mut vals = [0.0f64; 4];
        for (slot, tok) in vals.iter_mut().zip(&tokens[1..]) {
            *slot = tok
                .parse()
                .map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {tok:?}")))?;
        }
        let [cx, cy, w, h] = vals;
        if !(w > 0.0 && h > 0.0) {
            return Err(CoreError::parse(
                ctx,
                format!("box must have positive size, got w={w} h={h}"),
            ));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) || w > 1.0 || h > 1.0 {
            return Err(CoreError::parse(
                ctx,
                format!("box out of normalized range: {cx} {cy} {w} {h}"),
            ));
        }
        boxes.push(GroundTruth {
            bbox: BBox::new(cx, cy, w, h)?,
            class,
        });
    }
    Ok(boxes)
}

/// Write `{stem}.raw`, `{stem}.pgm`, `{stem}.txt` under `dir`, returning the
/// (image, label) paths.
pub fn write_sample(dir: &Path, stem: &str, sample: &Sample) -> Result<(PathBuf, PathBuf)> {
    let raw = dir.join(format!("{stem}.raw"));
    let pgm = dir.join(format!("{stem}.pgm"));
    let txt = dir.join(format!("{stem}.txt"));
    write_raw(&raw, &sample.raw)?;
    write_pgm(&pgm, &sample.image)?;
    write_labels(&txt, &sample.boxes)?;
    Ok((pgm, txt))
}

pub fn read_sample(dir: &Path, stem: &str) -> Result<Sample> {
    Ok(Sample {
        raw: read_raw(&dir.join(format!("{stem}.raw")))?,
        image: read_pgm(&dir.join(format!("{stem}.pgm")))?,
        boxes: read_labels(&dir.join(format!("{stem}.txt")))?,
    })
}

/// Manifest lines are `image_path<TAB>label_path`.
pub fn write_manifest(path: &Path, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut out = String::new();
    for (img, label) in entries {
        out.push_str(&format!("{}\t{}\n", img.display(), label.display()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        let img = it.next().unwrap_or("");
        let label = it.next().ok_or_else(|| {
            CoreError::parse(
                format!("{}:{}", path.display(), lineno + 1),
                "expected image_path<TAB>label_path",
            )
        })?;
        entries.push((PathBuf::from(img), PathBuf::from(label)));
    }
    Ok(entries)
}

/// Load every (image, boxes) pair a manifest points to. Relative paths are
/// resolved against the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(Plane<u8>, Vec<GroundTruth>)>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    read_manifest(manifest)?
        .iter()
        .map(|(img, label)| Ok((read_pgm(&resolve(img))?, read_labels(&resolve(label))?)))
        .collect()
}
