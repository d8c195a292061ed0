//! Synthetic segmentation task: anti-aliased ellipses and rectangles on a
//! noisy background, with exact per-pixel labels.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::rng::{rng, Rng};
use crate::numerics::{Scalar, Tensor};

pub const MIN_SIZE: usize = 16;
/// Standard deviation of the additive background noise.
pub const NOISE_STD: f64 = 0.1;
/// Samples per pixel side used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Images `B x H x W x C` with integer masks `B x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch<T> {
    pub images: Tensor<T>,
    pub masks: Vec<u32>,
    pub batch: usize,
    pub size: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl<T: Scalar> SegBatch<T> {
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// Image `i` as an `H x W x C` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let n = self.size * self.size * self.channels;
        let data = self.images.data()[i * n..(i + 1) * n].to_vec();
        Tensor::new(vec![self.size, self.size, self.channels], data).expect("slice of a valid batch")
    }

    /// Row-major labels of image `i`.
    pub fn mask(&self, i: usize) -> &[u32] {
        let n = self.size * self.size;
        &self.masks[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }

    fn random(r: &mut Rng, size: f64) -> Self {
        let (lo, hi) = (0.12 * size, 0.3 * size);
        let cy = r.random_range(0.2 * size..0.8 * size);
        let cx = r.random_range(0.2 * size..0.8 * size);
        let ry = r.random_range(lo..hi);
        let rx = r.random_range(lo..hi);
        if r.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        }
    }
}

/// Mean intensity of pixels carrying `class`; the background sits at 0.
pub fn class_intensity(class: u32, num_classes: usize) -> f64 {
    if class == 0 {
        0.0
    } else {
        0.3 + 0.7 * (class as f64) / ((num_classes - 1) as f64)
    }
}

/// Draws one image: pixel labels come from the last shape covering the
/// pixel centre, intensities from the coverage of a 4x4 subsample grid.
fn draw(r: &mut Rng, size: usize, num_shapes: usize, num_classes: usize, image: &mut [f64], mask: &mut [u32]) {
    let shapes: Vec<(Shape, u32)> = (0..num_shapes)
        .map(|_| (Shape::random(r, size as f64), r.random_range(1..num_classes as u32)))
        .collect();
    let top = |y: f64, x: f64| shapes.iter().rev().find(|(s, _)| s.contains(y, x)).map_or(0, |&(_, c)| c);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    acc += class_intensity(top(y, x), num_classes);
                }
            }
            let i = py * size + px;
            mask[i] = top(py as f64 + 0.5, px as f64 + 0.5);
            image[i] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64 + noise.sample(r);
        }
    }
}

/// A deterministic batch of `batch` single-channel `size x size` images.
pub fn synth_task<T: Scalar>(seed: u64, batch: usize, size: usize, num_shapes: usize, num_classes: usize) -> Result<SegBatch<T>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!("synth_task: size {size} is below {MIN_SIZE}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("synth_task: need at least 2 classes, got {num_classes}")));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("synth_task: empty batch".into()));
    }
    let mut r = rng(seed);
    let px = size * size;
    let mut image = vec![0.0; batch * px];
    let mut masks = vec![0u32; batch * px];
    for b in 0..batch {
        let range = b * px..(b + 1) * px;
        draw(&mut r, size, num_shapes, num_classes, &mut image[range.clone()], &mut masks[range]);
    }
    let images = Tensor::new(vec![batch, size, size, 1], image.into_iter().map(T::c).collect())?;
    Ok(SegBatch { images, masks, batch, size, channels: 1, num_classes })
}
