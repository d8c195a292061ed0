//! Shared layer building blocks and the token/grid pairing.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};
use crate::params::{Bound, InitKind, Initializer, ParamId, PROJECTION_STD};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// Token matrix `n x d` together with the `height x width` grid it was
/// flattened from (row-major, `n == height * width`).
#[derive(Clone, Copy, Debug)]
pub struct TokenMap<'t, T: Scalar> {
    tokens: Var<'t, T>,
    height: usize,
    width: usize,
}

impl<'t, T: Scalar> TokenMap<'t, T> {
    pub fn new(tokens: Var<'t, T>, height: usize, width: usize) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != height * width {
            return Err(Error::Grid { tokens: n, height, width });
        }
        Ok(Self { tokens, height, width })
    }

    pub fn tokens(&self) -> Var<'t, T> {
        self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims2().expect("token matrix").1
    }

    /// Same grid, new token matrix.
    pub fn with_tokens(&self, tokens: Var<'t, T>) -> Result<Self> {
        Self::new(tokens, self.height, self.width)
    }
}

/// Fully connected layer `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        init.scoped(name, |init| {
            let weight = init.param("weight", &[in_dim, out_dim], InitKind::TruncNormal(PROJECTION_STD))?;
            let bias = if bias { Some(init.param("bias", &[out_dim], InitKind::Zeros)?) } else { None };
            Ok(Self { weight, bias, in_dim, out_dim })
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p[self.weight])?;
        match self.bias {
            Some(b) => y.add_bias(p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                gamma: init.param("gamma", &[dim], InitKind::Ones)?,
                beta: init.param("beta", &[dim], InitKind::Zeros)?,
            })
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p[self.gamma], p[self.beta], T::c(LN_EPS))
    }
}
