//! Attention kernels: dot-product, efficient (linear in tokens),
//! transpose (channel) and skip-connection cross attention.
//!
//! Inputs are token matrices with tokens as rows. None of the linear
//! kernels ever forms an `n x n` matrix; the global context they build is
//! `d x d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Scalar, Var};
use crate::params::{Bound, InitKind, Initializer, ParamId, PROJECTION_STD};

/// Guard for zero channel vectors in transpose attention.
pub const L2_EPS: f64 = 1e-12;

fn check_qkv<T: Scalar>(op: &'static str, q: Var<'_, T>, k: Var<'_, T>, v: Var<'_, T>) -> Result<(usize, usize, usize)> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if nq != nk || nk != nv {
        return Err(Error::dim(op, format!("token counts {nq}/{nk}/{nv} differ")));
    }
    if dq != dk {
        return Err(Error::dim(op, format!("query width {dq} vs key width {dk}")));
    }
    Ok((nq, dk, dv))
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn standard_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    check_qkv("standard_attention", q, k, v)?;
    standard_attention_weights(q, k)?.matmul(v)
}

/// The `n x n` row-stochastic matrix `softmax(Q K^T / sqrt(d_k))`.
pub fn standard_attention_weights<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>) -> Result<Var<'t, T>> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if nq != nk || dq != dk {
        return Err(Error::dim("standard_attention", format!("queries {nq}x{dq} vs keys {nk}x{dk}")));
    }
    let scale = T::one() / T::c(dk as f64).sqrt();
    q.matmul_t(k, false, true)?.scale(scale)?.softmax(1)
}

/// `rho_q(Q) (rho_k(K)^T V)`: queries softmaxed over channels, keys over
/// tokens, and the `d_k x d_v` context is formed before touching queries.
pub fn efficient_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    check_qkv("efficient_attention", q, k, v)?;
    let context = k.softmax(0)?.matmul_t(v, true, false)?;
    q.softmax(1)?.matmul(context)
}

/// Materializes `rho_q(Q) rho_k(K)^T`, the `n x n` mixing matrix that
/// [`efficient_attention`] applies implicitly. Test and analysis use only.
pub fn efficient_attention_weights<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>) -> Result<Var<'t, T>> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    if nq != nk || dq != dk {
        return Err(Error::dim("efficient_attention", format!("queries {nq}x{dq} vs keys {nk}x{dk}")));
    }
    q.softmax(1)?.matmul_t(k.softmax(0)?, false, true)
}

/// `V softmax(K^T Q / tau)` with `Q`, `K` l2-normalized along the token
/// axis and the softmax taken over each column of the `d x d` matrix.
pub fn transpose_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, tau: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, dk, dv) = check_qkv("transpose_attention", q, k, v)?;
    if dk != dv {
        return Err(Error::dim("transpose_attention", format!("key width {dk} vs value width {dv}")));
    }
    let t = tau.item();
    if !(t > T::zero()) {
        return Err(Error::InvalidArgument(format!("transpose_attention: temperature must be positive, got {t}")));
    }
    let eps = T::c(L2_EPS);
    let qn = q.l2_normalize(0, eps)?;
    let kn = k.l2_normalize(0, eps)?;
    let weights = kn.matmul_t(qn, true, false)?.div_scalar(tau)?.softmax(0)?;
    v.matmul(weights)
}

/// Operand order used by the cross attention in the skip path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SccaOrder {
    /// `rho_v(V) (rho_k(K^T) Q)`: values softmaxed over channels, keys over tokens.
    #[default]
    AsPrinted,
    /// `rho_q(Q) (rho_k(K)^T V)`, the ordering of [`efficient_attention`].
    EfficientOrder,
}

/// Cross attention core: queries come from the skip feature, keys and
/// values from the decoder feature.
pub fn scca_attend<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, order: SccaOrder) -> Result<Var<'t, T>> {
    match order {
        SccaOrder::AsPrinted => {
            let (_, dk, dv) = check_qkv("scca", q, k, v)?;
            let dq = q.dims2()?.1;
            if dv != dk || dq != dk {
                return Err(Error::dim("scca", format!("widths q={dq} k={dk} v={dv} must agree")));
            }
            let context = k.softmax(0)?.matmul_t(q, true, false)?;
            v.softmax(1)?.matmul(context)
        }
        SccaOrder::EfficientOrder => efficient_attention(q, k, v),
    }
}

/// Projections of one attention instance. `tau` exists only for transpose
/// attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub tau: Option<ParamId>,
    pub d_in: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl AttentionParams {
    /// Efficient attention with the usual widths `d_k = d / 2`, `d_v = d`.
    pub fn efficient<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, d: usize) -> Result<Self> {
        Self::build(init, name, d, (d / 2).max(1), d, false)
    }

    /// Transpose attention: square projections plus a temperature
    /// initialized to one.
    pub fn transpose<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, d: usize) -> Result<Self> {
        Self::build(init, name, d, d, d, true)
    }

    pub fn build<T: Scalar>(
        init: &mut Initializer<'_, T>,
        name: &str,
        d_in: usize,
        d_k: usize,
        d_v: usize,
        with_tau: bool,
    ) -> Result<Self> {
        init.scoped(name, |init| {
            let std = InitKind::TruncNormal(PROJECTION_STD);
            let w_q = init.param("w_q", &[d_in, d_k], std)?;
            let w_k = init.param("w_k", &[d_in, d_k], std)?;
            let w_v = init.param("w_v", &[d_in, d_v], std)?;
            let tau = if with_tau { Some(init.param("tau", &[1], InitKind::Ones)?) } else { None };
            Ok(Self { w_q, w_k, w_v, tau, d_in, d_k, d_v })
        })
    }

    pub fn param_count(&self) -> usize {
        self.d_in * (2 * self.d_k + self.d_v) + usize::from(self.tau.is_some())
    }

    fn project<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        Ok((x.matmul(p[self.w_q])?, x.matmul(p[self.w_k])?, x.matmul(p[self.w_v])?))
    }

    pub fn efficient_forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (q, k, v) = self.project(p, x)?;
        efficient_attention(q, k, v)
    }

    pub fn transpose_forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tau = self
            .tau
            .ok_or_else(|| Error::InvalidArgument("transpose attention needs a temperature parameter".into()))?;
        let (q, k, v) = self.project(p, x)?;
        transpose_attention(q, k, v, p[tau])
    }
}

/// Parameters of skip-connection cross attention.
#[derive(Clone, Debug)]
pub struct SccaParams {
    /// Brings the decoder feature to the skip width.
    pub fc: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_skip: usize,
}

impl SccaParams {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, d_decoder: usize, d_skip: usize) -> Result<Self> {
        init.scoped(name, |init| {
            let fc = Linear::new(init, "fc", d_decoder, d_skip, true)?;
            let std = InitKind::TruncNormal(PROJECTION_STD);
            let w_q = init.param("w_q", &[d_skip, d_skip], std)?;
            let w_k = init.param("w_k", &[d_skip, d_skip], std)?;
            let w_v = init.param("w_v", &[d_skip, d_skip], std)?;
            Ok(Self { fc, w_q, w_k, w_v, d_skip })
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + 3 * self.d_skip * self.d_skip
    }

    /// Fuses decoder feature `x1` (`n x d1`) with skip feature `x2`
    /// (`n x d2`); the result is `n x 2*d2`, the attended feature followed
    /// by `x2` itself.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x1: Var<'t, T>, x2: Var<'t, T>, order: SccaOrder) -> Result<Var<'t, T>> {
        let (n1, _) = x1.dims2()?;
        let (n2, _) = x2.dims2()?;
        if n1 != n2 {
            return Err(Error::dim("scca", format!("decoder has {n1} tokens, skip has {n2}")));
        }
        scca(self.fc.forward(p, x1)?, x2, (p[self.w_q], p[self.w_k], p[self.w_v]), order)
    }
}

/// Cross attention given the already width-matched decoder feature
/// `x1_proj` and the projection matrices `(w_q, w_k, w_v)`.
pub fn scca<'t, T: Scalar>(
    x1_proj: Var<'t, T>,
    x2: Var<'t, T>,
    (w_q, w_k, w_v): (Var<'t, T>, Var<'t, T>, Var<'t, T>),
    order: SccaOrder,
) -> Result<Var<'t, T>> {
    let (n1, _) = x1_proj.dims2()?;
    let (n2, _) = x2.dims2()?;
    if n1 != n2 {
        return Err(Error::dim("scca", format!("decoder has {n1} tokens, skip has {n2}")));
    }
    let k = x1_proj.matmul(w_k)?;
    let v = x1_proj.matmul(w_v)?;
    let q = x2.matmul(w_q)?;
    scca_attend(q, k, v, order)?.concat_cols(x2)
}
