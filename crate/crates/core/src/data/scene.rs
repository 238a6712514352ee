//! Synthetic tiny-nodule scene generator: dark parenchyma background,
//! elongated vessel occluders, bright disk nodules with exact bounding
//! boxes, additive noise. Fully determined by the spec's seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{hu_clip, normalize_255};
use super::{Plane, Sample};
use crate::error::{CoreError, Result};
use crate::metrics::{BBox, GroundTruth};

/// Everything that determines one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    /// Inclusive nodule count range.
    pub nodule_count: (usize, usize),
    /// Nodule radius range in pixels.
    pub nodule_radius: (f64, f64),
    /// HU-like intensity ranges.
    pub background_hu: (i16, i16),
    pub vessel_hu: (i16, i16),
    pub nodule_hu: (i16, i16),
    /// Inclusive vessel (occluder) count range.
    pub vessel_count: (usize, usize),
    /// Additive uniform noise amplitude in HU.
    pub noise_hu: i16,
    pub seed: u64,
}

impl SceneSpec {
    /// Desk-scale defaults: 96 px scenes, radius 2-6 px nodules, vessels
    /// that occlude some of them.
    pub fn desk(seed: u64) -> Self {
        SceneSpec {
            size: 96,
            nodule_count: (2, 5),
            nodule_radius: (2.0, 6.0),
            background_hu: (-950, -750),
            vessel_hu: (-350, -150),
            nodule_hu: (-80, 80),
            vessel_count: (3, 8),
            noise_hu: 40,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn serialize(&self) -> String {
        format!(
            "size {}\nnodule_count {},{}\nnodule_radius {},{}\nbackground_hu {},{}\nvessel_hu {},{}\nnodule_hu {},{}\nvessel_count {},{}\nnoise_hu {}\nseed {}\n",
            self.size,
            self.nodule_count.0,
            self.nodule_count.1,
            self.nodule_radius.0,
            self.nodule_radius.1,
            self.background_hu.0,
            self.background_hu.1,
            self.vessel_hu.0,
            self.vessel_hu.1,
            self.nodule_hu.0,
            self.nodule_hu.1,
            self.vessel_count.0,
            self.vessel_count.1,
            self.noise_hu,
            self.seed,
        )
    }

    /// Parse the scene config text format: `key value` lines with `#`
    /// comments; pair values are comma-separated. Unknown keys are rejected.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut spec = Self::desk(0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = format!("{source}:{}", lineno + 1);
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                CoreError::parse(ctx.clone(), format!("expected `key value`, got {line:?}"))
            })?;
            let value = value.trim();
            let pair = |v: &str| -> Result<(f64, f64)> {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| CoreError::parse(ctx.clone(), format!("expected `lo,hi`, got {v:?}")))?;
                let lo = a.trim().parse().map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {a:?}")))?;
                let hi = b.trim().parse().map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {b:?}")))?;
                Ok((lo, hi))
            };
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| CoreError::parse(ctx.clone(), format!("bad number {v:?}")))
            };
            match key {
                "size" => spec.size = num(value)? as usize,
                "nodule_count" => {
                    let (a, b) = pair(value)?;
                    spec.nodule_count = (a as usize, b as usize);
                }
                "nodule_radius" => spec.nodule_radius = pair(value)?,
                "background_hu" => {
                    let (a, b) = pair(value)?;
                    spec.background_hu = (a as i16, b as i16);
                }
                "vessel_hu" => {
                    let (a, b) = pair(value)?;
                    spec.vessel_hu = (a as i16, b as i16);
                }
                "nodule_hu" => {
                    let (a, b) = pair(value)?;
                    spec.nodule_hu = (a as i16, b as i16);
                }
                "vessel_count" => {
                    let (a, b) = pair(value)?;
                    spec.vessel_count = (a as usize, b as usize);
                }
                "noise_hu" => spec.noise_hu = num(value)? as i16,
                "seed" => spec.seed = num(value)? as u64,
                other => return Err(CoreError::parse(ctx, format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::InvalidArgument(msg));
        if self.size < 16 {
            return bad(format!("scene size {} too small", self.size));
        }
        if self.nodule_radius.0 < 1.0 || self.nodule_radius.1 < self.nodule_radius.0 {
            return bad(format!("bad radius range {:?}", self.nodule_radius));
        }
        if self.nodule_count.1 < self.nodule_count.0 || self.vessel_count.1 < self.vessel_count.0 {
            return bad("count range reversed".into());
        }
        let max_margin = self.nodule_radius.1.ceil() as usize + 1;
        if 2 * max_margin >= self.size {
            return bad(format!(
                "radius {} does not fit a {} px scene",
                self.nodule_radius.1, self.size
            ));
        }
        for (lo, hi) in [self.background_hu, self.vessel_hu, self.nodule_hu] {
            if hi < lo {
                return bad(format!("intensity range ({lo}, {hi}) reversed"));
            }
        }
        Ok(())
    }
}

struct Disk {
    x: f64,
    y: f64,
    r: f64,
}

/// 6-decimal quantization, matching the label file precision so that
/// write -> read round-trips bit-exactly.
pub(crate) fn quantize6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;

    // Nodule placement first, so vessels can be routed through some of them.
    let count = rng.gen_range(spec.nodule_count.0..=spec.nodule_count.1);
    let mut disks: Vec<Disk> = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen_range(spec.nodule_radius.0..=spec.nodule_radius.1);
        let margin = r.ceil() + 1.0;
        let mut placed = false;
        for _attempt in 0..100 {
            let x = rng.gen_range(margin..(s as f64 - margin));
            let y = rng.gen_range(margin..(s as f64 - margin));
            let clear = disks
                .iter()
                .all(|d| ((d.x - x).powi(2) + (d.y - y).powi(2)).sqrt() >= d.r + r + 1.0);
            if clear {
                disks.push(Disk { x, y, r });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::Infeasible(format!(
                "could not place nodule {} of {count} after 100 attempts",
                disks.len() + 1
            )));
        }
    }

    // Smooth background: bilinear blend of four random corner intensities.
    let (bg_lo, bg_hi) = (spec.background_hu.0 as f64, spec.background_hu.1 as f64);
    let corners: Vec<f64> = (0..4).map(|_| rng.gen_range(bg_lo..=bg_hi)).collect();
    let mut hu: Vec<f64> = Vec::with_capacity(s * s);
    for y in 0..s {
        let fy = y as f64 / (s - 1) as f64;
        for x in 0..s {
            let fx = x as f64 / (s - 1) as f64;
            let top = corners[0] * (1.0 - fx) + corners[1] * fx;
            let bottom = corners[2] * (1.0 - fx) + corners[3] * fx;
            hu.push(top * (1.0 - fy) + bottom * fy);
        }
    }

    // Vessels: thick segments; about half run through a nodule center so
    // occlusion actually happens.
    let vessel_n = rng.gen_range(spec.vessel_count.0..=spec.vessel_count.1);
    for _ in 0..vessel_n {
        let value = rng.gen_range(spec.vessel_hu.0 as f64..=spec.vessel_hu.1 as f64);
        let thickness = rng.gen_range(0.7..1.6);
        let through_nodule = !disks.is_empty() && rng.gen_bool(0.5);
        let (x0, y0, x1, y1) = if through_nodule {
            let d = &disks[rng.gen_range(0..disks.len())];
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let len = rng.gen_range(s as f64 / 3.0..s as f64);
            let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            (d.x - dx, d.y - dy, d.x + dx, d.y + dy)
        } else {
            (
                rng.gen_range(0.0..s as f64),
                rng.gen_range(0.0..s as f64),
                rng.gen_range(0.0..s as f64),
                rng.gen_range(0.0..s as f64),
            )
        };
        stamp_segment(&mut hu, s, x0, y0, x1, y1, thickness, value);
    }

    // Nodules on top: hard disks, stamped with max so vessels never darken
    // a nodule interior.
    for d in &disks {
        let value = rng.gen_range(spec.nodule_hu.0 as f64..=spec.nodule_hu.1 as f64);
        let (xa, xb) = ((d.x - d.r).floor() as i64, (d.x + d.r).ceil() as i64);
        let (ya, yb) = ((d.y - d.r).floor() as i64, (d.y + d.r).ceil() as i64);
        for y in ya.max(0)..=yb.min(s as i64 - 1) {
            for x in xa.max(0)..=xb.min(s as i64 - 1) {
                let dist = ((x as f64 + 0.5 - d.x).powi(2) + (y as f64 + 0.5 - d.y).powi(2)).sqrt();
                if dist <= d.r {
                    let i = y as usize * s + x as usize;
                    hu[i] = hu[i].max(value);
                }
            }
        }
    }

    // Additive uniform noise, then clamp into i16.
    let amp = spec.noise_hu as f64;
    let raw_data: Vec<i16> = hu
        .iter()
        .map(|&v| {
            let noisy = v + rng.gen_range(-amp..=amp);
            noisy.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    let raw = Plane {
        width: s,
        height: s,
        data: raw_data,
    };

    let boxes = disks
        .iter()
        .map(|d| {
            let bbox = BBox::new(
                quantize6(d.x / s as f64),
                quantize6(d.y / s as f64),
                quantize6(2.0 * d.r / s as f64),
                quantize6(2.0 * d.r / s as f64),
            )?;
            Ok(GroundTruth { bbox, class: 0 })
        })
        .collect::<Result<Vec<_>>>()?;

    let image = normalize_255(&hu_clip(&raw))?;
    Ok(Sample { raw, image, boxes })
}

#[allow(clippy::too_many_arguments)]
fn stamp_segment(hu: &mut [f64], s: usize, x0: f64, y0: f64, x1: f64, y1: f64, thickness: f64, value: f64) {
    let (minx, maxx) = (x0.min(x1) - thickness, x0.max(x1) + thickness);
    let (miny, maxy) = (y0.min(y1) - thickness, y0.max(y1) + thickness);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    for y in (miny.floor().max(0.0) as usize)..=(maxy.ceil().min(s as f64 - 1.0) as usize) {
        for x in (minx.floor().max(0.0) as usize)..=(maxx.ceil().min(s as f64 - 1.0) as usize) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if dist <= thickness {
                let i = y * s + x;
                hu[i] = hu[i].max(value);
            }
        }
    }
}
