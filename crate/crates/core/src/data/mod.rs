//! Synthetic CT-like scenes, the HU preprocessing chain, augmentations, and
//! dataset file I/O.

pub mod augment;
pub mod io;
pub mod preprocess;
mod scene;

pub use scene::{generate_scene, SceneSpec};

use crate::metrics::GroundTruth;

/// Single-channel image plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }
}

/// One generated scene: the raw HU-like plane, its preprocessed 8-bit
/// counterpart, and exact ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raw: Plane<i16>,
    pub image: Plane<u8>,
    pub boxes: Vec<GroundTruth>,
}
