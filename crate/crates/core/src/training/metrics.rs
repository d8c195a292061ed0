//! Overlap and boundary metrics for label maps: DSC, sensitivity,
//! specificity, accuracy and Hausdorff distance.

use crate::error::{Error, Result};

/// Metrics of one class, or their macro average.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// `None` when no image contains the class in both prediction and truth.
    pub hausdorff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Indexed by class; `None` for classes absent from both prediction
    /// and truth.
    pub per_class: Vec<Option<ClassMetrics>>,
    /// Macro average over the classes that are present.
    pub mean: ClassMetrics,
}

impl MetricReport {
    pub fn dsc(&self) -> f64 {
        self.mean.dsc
    }

    /// Macro DSC over the non-background classes that are present.
    pub fn foreground_dsc(&self) -> f64 {
        let v: Vec<f64> = self.per_class.iter().skip(1).flatten().map(|m| m.dsc).collect();
        if v.is_empty() {
            1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Confusion {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // an empty denominator means there was nothing to get wrong
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Pixels of the set with an in-bounds 4-neighbour outside it. A set
/// with no such pixel (it fills the image) is its own boundary.
pub fn boundary(set: &[bool], height: usize, width: usize) -> Vec<(usize, usize)> {
    let inside = |y: usize, x: usize| set[y * width + x];
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !inside(y, x) {
                continue;
            }
            let edge = (y > 0 && !inside(y - 1, x))
                || (y + 1 < height && !inside(y + 1, x))
                || (x > 0 && !inside(y, x - 1))
                || (x + 1 < width && !inside(y, x + 1));
            if edge {
                out.push((y, x));
            }
        }
    }
    if out.is_empty() {
        (0..height * width).filter(|&i| set[i]).map(|i| (i / width, i % width)).collect()
    } else {
        out
    }
}

fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    a.iter()
        .map(|&(ay, ax)| {
            b.iter()
                .map(|&(by, bx)| {
                    let (dy, dx) = (ay as f64 - by as f64, ax as f64 - bx as f64);
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance in pixels between two non-empty sets.
pub fn hausdorff(pred: &[bool], truth: &[bool], height: usize, width: usize) -> f64 {
    let (a, b) = (boundary(pred, height, width), boundary(truth, height, width));
    directed(&a, &b).max(directed(&b, &a))
}

/// Metrics of `images` label maps of `height x width`, stored back to back.
/// Confusion counts are pooled over images; the Hausdorff distance is
/// averaged over images where the class occurs in both maps.
pub fn compute_metrics(pred: &[u32], truth: &[u32], height: usize, width: usize, num_classes: usize) -> Result<MetricReport> {
    let px = height * width;
    if pred.len() != truth.len() || px == 0 || pred.len() % px != 0 {
        return Err(Error::dim(
            "evaluate",
            format!("{} predicted and {} true labels for {height}x{width} images", pred.len(), truth.len()),
        ));
    }
    if let Some(&l) = pred.iter().chain(truth).find(|&&l| l as usize >= num_classes) {
        return Err(Error::InvalidArgument(format!("evaluate: label {l} outside 0..{num_classes}")));
    }
    let images = pred.len() / px;
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes as u32 {
        let mut c = Confusion::default();
        let (mut hd_sum, mut hd_count) = (0.0, 0usize);
        for i in 0..images {
            let p: Vec<bool> = pred[i * px..(i + 1) * px].iter().map(|&l| l == class).collect();
            let t: Vec<bool> = truth[i * px..(i + 1) * px].iter().map(|&l| l == class).collect();
            for (&p, &t) in p.iter().zip(&t) {
                match (p, t) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            if p.iter().any(|&v| v) && t.iter().any(|&v| v) {
                hd_sum += hausdorff(&p, &t, height, width);
                hd_count += 1;
            }
        }
        if c.tp + c.fp + c.fn_ == 0 {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(ClassMetrics {
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
            hausdorff: (hd_count > 0).then(|| hd_sum / hd_count as f64),
        }));
    }
    let mean = macro_average(&per_class);
    Ok(MetricReport { per_class, mean })
}

fn macro_average(per_class: &[Option<ClassMetrics>]) -> ClassMetrics {
    let present: Vec<&ClassMetrics> = per_class.iter().flatten().collect();
    let k = present.len().max(1) as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / k;
    let hds: Vec<f64> = present.iter().filter_map(|m| m.hausdorff).collect();
    ClassMetrics {
        dsc: avg(|m| m.dsc),
        sensitivity: avg(|m| m.sensitivity),
        specificity: avg(|m| m.specificity),
        accuracy: avg(|m| m.accuracy),
        hausdorff: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
    }
}
