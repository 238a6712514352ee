//! Training-time augmentations: flips, quarter-turn rotations,
//! brightness/contrast jitter, salt-and-pepper noise. Every transform maps
//! ground-truth boxes to valid in-bounds boxes.

use rand::Rng;

use super::Plane;
use crate::error::{CoreError, Result};
use crate::metrics::{BBox, GroundTruth};

#[derive(Debug, Clone, PartialEq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    /// Clockwise quarter turns, 0..=3. Square images only.
    pub rot_quarters: u8,
    /// Added to every pixel after contrast, in 8-bit units.
    pub brightness: f64,
    /// Contrast factor around mid-gray.
    pub contrast: f64,
    /// Fraction of pixels replaced by 0 or 255.
    pub salt_pepper: f64,
}

impl Augment {
    pub fn identity() -> Self {
        Augment {
            hflip: false,
            vflip: false,
            rot_quarters: 0,
            brightness: 0.0,
            contrast: 1.0,
            salt_pepper: 0.0,
        }
    }

    /// Draw one augmentation. Consumes a fixed number of RNG values so the
    /// training stream stays reproducible.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Augment {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            rot_quarters: rng.gen_range(0..4),
            brightness: rng.gen_range(-20.0..=20.0),
            contrast: rng.gen_range(0.85..=1.2),
            salt_pepper: rng.gen_range(0.0..=0.005),
        }
    }

    /// Apply to an image and its boxes. `rng` drives the salt-and-pepper
    /// positions.
    pub fn apply<R: Rng>(
        &self,
        image: &Plane<u8>,
        boxes: &[GroundTruth],
        rng: &mut R,
    ) -> Result<(Plane<u8>, Vec<GroundTruth>)> {
        if !self.rot_quarters.is_multiple_of(4) && image.width != image.height {
            return Err(CoreError::InvalidArgument(
                "quarter-turn rotation needs a square image".into(),
            ));
        }
        let mut img = image.clone();
        let mut boxes: Vec<GroundTruth> = boxes.to_vec();

        if self.hflip {
            let mut out = Plane::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.at(img.width - 1 - x, y));
                }
            }
            img = out;
            for b in &mut boxes {
                b.bbox.cx = 1.0 - b.bbox.cx;
            }
        }
        if self.vflip {
            let mut out = Plane::new(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set(x, y, img.at(x, img.height - 1 - y));
                }
            }
            img = out;
            for b in &mut boxes {
                b.bbox.cy = 1.0 - b.bbox.cy;
            }
        }
        for _ in 0..self.rot_quarters % 4 {
            // 90 degrees clockwise: (x, y) <- (y, H-1-x) of the source.
            let n = img.width;
            let mut out = Plane::new(n, n);
            for y in 0..n {
                for x in 0..n {
                    out.set(x, y, img.at(y, n - 1 - x));
                }
            }
            img = out;
            for b in &mut boxes {
                let BBox { cx, cy, w, h } = b.bbox;
                b.bbox = BBox { cx: 1.0 - cy, cy: cx, w: h, h: w };
            }
        }

        for v in img.data.iter_mut() {
            let adjusted = (*v as f64 - 128.0) * self.contrast + 128.0 + self.brightness;
            *v = adjusted.round().clamp(0.0, 255.0) as u8;
        }

        if self.salt_pepper > 0.0 {
            let n = ((img.data.len() as f64) * self.salt_pepper).round() as usize;
            for _ in 0..n {
                let i = rng.gen_range(0..img.data.len());
                img.data[i] = if rng.gen_bool(0.5) { 0 } else { 255 };
            }
        }

        Ok((img, boxes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image() -> (Plane<u8>, Vec<GroundTruth>) {
        let mut p: Plane<u8> = Plane::new(8, 8);
        p.set(1, 2, 200);
        let b = GroundTruth {
            bbox: BBox::new(0.1875, 0.3125, 0.25, 0.125).unwrap(),
            class: 0,
        };
        (p, vec![b])
    }

    #[test]
    fn hflip_mirrors_pixels_and_boxes() {
        let (img, boxes) = sample_image();
        let mut aug = Augment::identity();
        aug.hflip = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ob) = aug.apply(&img, &boxes, &mut rng).unwrap();
        assert_eq!(out.at(6, 2), 200);
        assert!((ob[0].bbox.cx - (1.0 - 0.1875)).abs() < 1e-12);
        assert_eq!(ob[0].bbox.w, 0.25);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let (img, boxes) = sample_image();
        let mut aug = Augment::identity();
        aug.rot_quarters = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ob) = aug.apply(&img, &boxes, &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(ob[0].bbox, boxes[0].bbox);
    }

    #[test]
    fn rotation_swaps_box_extents() {
        let (img, boxes) = sample_image();
        let mut aug = Augment::identity();
        aug.rot_quarters = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, ob) = aug.apply(&img, &boxes, &mut rng).unwrap();
        // pixel (1,2) moves to (W-1-2, 1) = (5,1)
        assert_eq!(out.at(5, 1), 200);
        assert_eq!(ob[0].bbox.w, 0.125);
        assert_eq!(ob[0].bbox.h, 0.25);
        assert!((ob[0].bbox.cx - (1.0 - 0.3125)).abs() < 1e-12);
        assert!((ob[0].bbox.cy - 0.1875).abs() < 1e-12);
    }

    #[test]
    fn boxes_stay_valid_under_random_augments() {
        let (img, boxes) = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let aug = Augment::sample(&mut rng);
            let (_, ob) = aug.apply(&img, &boxes, &mut rng).unwrap();
            for b in &ob {
                let (x1, y1, x2, y2) = b.bbox.corners();
                assert!(b.bbox.w > 0.0 && b.bbox.h > 0.0);
                assert!(x1 >= -1e-12 && y1 >= -1e-12 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
            }
        }
    }
}
