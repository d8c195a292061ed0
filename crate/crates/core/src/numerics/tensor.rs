//! Dense row-major tensors and the plain-text fixture format.
//!
//! A fixture file holds two lines: the space separated shape, then the
//! space separated values in row-major order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;

/// Dense n-dimensional array. Every extent is positive and every stored
/// value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values already known to be finite and sized.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("positive extents");
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect())
    }

    /// Convenience constructor for small hand-written matrices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| T::c(v))).collect();
        Self::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Mutable access for in-place parameter updates. Callers keep the
    /// values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim("tensor", format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_fixture_string(&self) -> String {
        let mut s = String::new();
        let shape: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        s.push_str(&shape.join(" "));
        s.push('\n');
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            // `{:?}` prints the shortest representation that round-trips.
            let _ = write!(s, "{:?}", v.as_f64());
        }
        s.push('\n');
        s
    }

    pub fn parse_fixture(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let shape_line = lines.next().ok_or_else(|| Error::Parse("missing shape line".into()))?;
        let values_line = lines.next().unwrap_or("");
        if lines.next().is_some() {
            return Err(Error::Parse("fixture has more than two lines".into()));
        }
        let shape = shape_line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("shape `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let data = values_line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map(T::c)
                    .map_err(|e| Error::Parse(format!("value `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, data)
    }

    pub fn read_fixture(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_fixture(&std::fs::read_to_string(path)?)
    }

    pub fn write_fixture(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_fixture_string())?;
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim("tensor", format!("extents must be positive, got {shape:?}")));
    }
    Ok(())
}
