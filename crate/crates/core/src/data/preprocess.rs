//! HU clipping, 8-bit normalization, and the morphological lung-mask chain.

use super::Plane;
use crate::error::{CoreError, Result};

pub const HU_MIN: i16 = -1200;
pub const HU_MAX: i16 = 600;

/// Clip to [-1200, 600]. Monotone and idempotent.
pub fn hu_clip(x: &Plane<i16>) -> Plane<i16> {
    Plane {
        width: x.width,
        height: x.height,
        data: x.data.iter().map(|&v| v.clamp(HU_MIN, HU_MAX)).collect(),
    }
}

/// Affine map of a clipped plane onto 0..=255 (-1200 -> 0, 600 -> 255),
/// rounding to nearest with ties away from zero. Errors on out-of-range
/// input; callers clip first.
pub fn normalize_255(x: &Plane<i16>) -> Result<Plane<u8>> {
    let mut data = Vec::with_capacity(x.data.len());
    for (i, &v) in x.data.iter().enumerate() {
        if !(HU_MIN..=HU_MAX).contains(&v) {
            return Err(CoreError::InvalidArgument(format!(
                "normalize_255: value {v} at index {i} outside [{HU_MIN}, {HU_MAX}]; clip first"
            )));
        }
        let scaled = (v as f64 - HU_MIN as f64) / (HU_MAX as f64 - HU_MIN as f64) * 255.0;
        data.push(scaled.round() as u8);
    }
    Ok(Plane {
        width: x.width,
        height: x.height,
        data,
    })
}

/// Binary mask plane; 1 = foreground.
pub type Mask = Plane<u8>;

/// Foreground = pixels strictly below the threshold (air-like regions of an
/// 8-bit CT plane).
pub fn threshold_below(x: &Plane<u8>, threshold: u8) -> Mask {
    Plane {
        width: x.width,
        height: x.height,
        data: x.data.iter().map(|&v| u8::from(v < threshold)).collect(),
    }
}

/// 3x3 erosion with zero-padded borders: a pixel survives iff all nine
/// neighbors are foreground.
pub fn erode(m: &Mask) -> Mask {
    let mut out = Plane::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut keep = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    let v = if nx < 0 || ny < 0 || nx >= m.width as i64 || ny >= m.height as i64 {
                        0
                    } else {
                        m.at(nx as usize, ny as usize)
                    };
                    if v == 0 {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            out.set(x, y, u8::from(keep));
        }
    }
    out
}

/// 3x3 dilation: a pixel becomes foreground iff any neighbor is.
pub fn dilate(m: &Mask) -> Mask {
    let mut out = Plane::new(m.width, m.height);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut hit = false;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < m.width as i64
                        && ny < m.height as i64
                        && m.at(nx as usize, ny as usize) != 0
                    {
                        hit = true;
                        break 'scan;
                    }
                }
            }
            out.set(x, y, u8::from(hit));
        }
    }
    out
}

/// Keep only the largest 4-connected foreground component (ties broken by
/// the component discovered first in scan order). Errors when the mask is
/// empty.
pub fn largest_component(m: &Mask) -> Result<Mask> {
    let mut label = vec![0u32; m.data.len()];
    let mut sizes = vec![0usize]; // sizes[0] unused (background)
    let mut stack = Vec::new();
    for start in 0..m.data.len() {
        if m.data[start] == 0 || label[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        stack.push(start);
        label[start] = id;
        while let Some(i) = stack.pop() {
            sizes[id as usize] += 1;
            let (x, y) = (i % m.width, i / m.width);
            let mut push = |nx: i64, ny: i64| {
                if nx >= 0 && ny >= 0 && nx < m.width as i64 && ny < m.height as i64 {
                    let j = ny as usize * m.width + nx as usize;
                    if m.data[j] != 0 && label[j] == 0 {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            };
            push(x as i64 - 1, y as i64);
            push(x as i64 + 1, y as i64);
            push(x as i64, y as i64 - 1);
            push(x as i64, y as i64 + 1);
        }
    }
    if sizes.len() == 1 {
        return Err(CoreError::Infeasible("largest_component: empty mask".into()));
    }
    let best = (1..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).unwrap() as u32;
    Ok(Plane {
        width: m.width,
        height: m.height,
        data: label.iter().map(|&l| u8::from(l == best)).collect(),
    })
}

/// The full masking chain: threshold -> `erosions` erosions -> largest
/// 4-connected component -> `dilations` dilations. Deterministic; errors if
/// no foreground survives.
pub fn lung_mask(x: &Plane<u8>, threshold: u8, erosions: usize, dilations: usize) -> Result<Mask> {
    let mut m = threshold_below(x, threshold);
    for _ in 0..erosions {
        m = erode(&m);
    }
    let mut m = largest_component(&m)?;
    for _ in 0..dilations {
        m = dilate(&m);
    }
    Ok(m)
}
