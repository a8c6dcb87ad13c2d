//! Binary masks and 8-bit RGB images shared by the data generator, the
//! metrics, and the model front-end.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Binary segmentation map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(y, x);
            }
        }
        m
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground coordinates as (y, x).
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.w;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// 1.0/0.0 single-channel tensor.
    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        Tensor::new(
            Shape::new(1, 1, self.h, self.w),
            self.data.iter().map(|&v| if v { E::ONE } else { E::ZERO }).collect(),
        )
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }
}

/// Interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// r, g, b per pixel, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Image {
        Image {
            h,
            w,
            data: vec![0; h * w * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar float tensor [1, 3, H, W] scaled to [0, 1].
    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        let mut t = Tensor::zeros(Shape::new(1, 3, self.h, self.w));
        let hw = self.h * self.w;
        for p in 0..hw {
            for c in 0..3 {
                t.data[c * hw + p] = E::from_f64(self.data[p * 3 + c] as f64 / 255.0);
            }
        }
        t
    }
}
