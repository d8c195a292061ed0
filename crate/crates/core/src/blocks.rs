//! Mix-FFN and the dual (spatial + channel) attention block with its
//! fusion variants.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TokenMap};
use crate::numerics::{Scalar, Var};
use crate::params::{Bound, InitKind, Initializer, ParamId, PROJECTION_STD};

/// How the efficient (spatial) and transpose (channel) branches combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualStrategy {
    /// Channel attention applied to the output of spatial attention.
    #[default]
    Sequential,
    /// `E(x) + T(x) + x` with no normalization between the branches.
    SimpleAdditive,
    /// Each branch normalized and passed through its own FFN before the sum.
    ComplexAdditive,
    /// Normalized branches concatenated, contracted back to `d`, normalized.
    Concatenation,
}

impl DualStrategy {
    pub const ALL: [DualStrategy; 4] = [
        DualStrategy::Sequential,
        DualStrategy::SimpleAdditive,
        DualStrategy::ComplexAdditive,
        DualStrategy::Concatenation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DualStrategy::Sequential => "sequential",
            DualStrategy::SimpleAdditive => "simple_additive",
            DualStrategy::ComplexAdditive => "complex_additive",
            DualStrategy::Concatenation => "concatenation",
        }
    }
}

/// Which tensor is added back after the transpose attention in the
/// sequential block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelResidual {
    /// The attention input, `MLP1(E) + E`.
    #[default]
    AttentionInput,
    /// Only `MLP1(E)`.
    MlpOutput,
}

/// `FC(GELU(DWConv3x3(FC(x))))` on a token grid.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub fc2: Linear,
    pub hidden: usize,
}

impl MixFfn {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            let fc1 = Linear::new(init, "fc1", in_dim, hidden, true)?;
            let dw_weight = init.param("dw.weight", &[3, 3, hidden], InitKind::TruncNormal(PROJECTION_STD))?;
            let dw_bias = init.param("dw.bias", &[hidden], InitKind::Zeros)?;
            let fc2 = Linear::new(init, "fc2", hidden, out_dim, true)?;
            Ok(Self { fc1, dw_weight, dw_bias, fc2, hidden })
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + 10 * self.hidden + self.fc2.param_count()
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, grid: (usize, usize)) -> Result<Var<'t, T>> {
        let (n, _) = x.dims2()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Grid { tokens: n, height: grid.0, width: grid.1 });
        }
        let h = self.fc1.forward(p, x)?;
        let h = h.dwconv3x3(p[self.dw_weight], p[self.dw_bias], grid.0, grid.1)?;
        self.fc2.forward(p, h.gelu()?)
    }

    pub fn forward_map<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: TokenMap<'t, T>) -> Result<TokenMap<'t, T>> {
        x.with_tokens(self.forward(p, x.tokens(), x.grid())?)
    }
}

/// Extra parameters of the parallel fusion variants.
#[derive(Clone, Debug)]
pub enum Fusion {
    ComplexAdditive { norm_e: LayerNorm, ffn_e: MixFfn, norm_t: LayerNorm, ffn_t: MixFfn },
    Concatenation { norm_e: LayerNorm, norm_t: LayerNorm, contract: MixFfn, norm_out: LayerNorm },
}

/// One dual attention block.
///
/// Every strategy owns both attention instances and two norm + Mix-FFN
/// pairs; the parallel strategies may add [`Fusion`] parameters.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub strategy: DualStrategy,
    pub dim: usize,
    pub efficient: AttentionParams,
    pub transpose: AttentionParams,
    pub norm1: LayerNorm,
    pub mlp1: MixFfn,
    pub norm2: LayerNorm,
    pub mlp2: MixFfn,
    pub fusion: Option<Fusion>,
    pub channel_residual: ChannelResidual,
}

impl BlockParams {
    pub fn new<T: Scalar>(
        init: &mut Initializer<'_, T>,
        name: &str,
        dim: usize,
        expansion: usize,
        strategy: DualStrategy,
    ) -> Result<Self> {
        let hidden = expansion * dim;
        init.scoped(name, |init| {
            let efficient = AttentionParams::efficient(init, "efficient", dim)?;
            let transpose = AttentionParams::transpose(init, "transpose", dim)?;
            let norm1 = LayerNorm::new(init, "norm1", dim)?;
            let mlp1 = MixFfn::new(init, "mlp1", dim, hidden, dim)?;
            let norm2 = LayerNorm::new(init, "norm2", dim)?;
            let mlp2 = MixFfn::new(init, "mlp2", dim, hidden, dim)?;
            let fusion = match strategy {
                DualStrategy::Sequential | DualStrategy::SimpleAdditive => None,
                DualStrategy::ComplexAdditive => Some(Fusion::ComplexAdditive {
                    norm_e: LayerNorm::new(init, "fuse.norm_e", dim)?,
                    ffn_e: MixFfn::new(init, "fuse.ffn_e", dim, hidden, dim)?,
                    norm_t: LayerNorm::new(init, "fuse.norm_t", dim)?,
                    ffn_t: MixFfn::new(init, "fuse.ffn_t", dim, hidden, dim)?,
                }),
                DualStrategy::Concatenation => Some(Fusion::Concatenation {
                    norm_e: LayerNorm::new(init, "fuse.norm_e", dim)?,
                    norm_t: LayerNorm::new(init, "fuse.norm_t", dim)?,
                    contract: MixFfn::new(init, "fuse.contract", 2 * dim, expansion * 2 * dim, dim)?,
                    norm_out: LayerNorm::new(init, "fuse.norm_out", dim)?,
                }),
            };
            Ok(Self {
                strategy,
                dim,
                efficient,
                transpose,
                norm1,
                mlp1,
                norm2,
                mlp2,
                fusion,
                channel_residual: ChannelResidual::default(),
            })
        })
    }

    pub fn param_count(&self) -> usize {
        let norm = 2 * self.dim;
        let base = self.efficient.param_count()
            + self.transpose.param_count()
            + 2 * norm
            + self.mlp1.param_count()
            + self.mlp2.param_count();
        base + match &self.fusion {
            None => 0,
            Some(Fusion::ComplexAdditive { ffn_e, ffn_t, .. }) => 2 * norm + ffn_e.param_count() + ffn_t.param_count(),
            Some(Fusion::Concatenation { contract, .. }) => 3 * norm + contract.param_count(),
        }
    }

    /// Runs the block with its own strategy.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: TokenMap<'t, T>) -> Result<TokenMap<'t, T>> {
        self.forward_as(p, x, self.strategy)
    }

    /// Runs the block as `strategy`, failing if the fusion parameters that
    /// strategy needs are absent.
    pub fn forward_as<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: TokenMap<'t, T>, strategy: DualStrategy) -> Result<TokenMap<'t, T>> {
        if x.dim() != self.dim {
            return Err(Error::dim("dual_block", format!("block width {} vs input width {}", self.dim, x.dim())));
        }
        let grid = x.grid();
        let xt = x.tokens();
        // norm -> Mix-FFN with residual
        let ffn_residual = |norm: &LayerNorm, mlp: &MixFfn, h: Var<'t, T>| -> Result<Var<'t, T>> {
            mlp.forward(p, norm.forward(p, h)?, grid)?.add(h)
        };
        let out = match (strategy, &self.fusion) {
            (DualStrategy::Sequential, _) => {
                let e_block = self.efficient.efficient_forward(p, xt)?.add(xt)?;
                let m1 = self.mlp1.forward(p, self.norm1.forward(p, e_block)?, grid)?;
                let t_in = m1.add(e_block)?;
                let residual = match self.channel_residual {
                    ChannelResidual::AttentionInput => t_in,
                    ChannelResidual::MlpOutput => m1,
                };
                let t_block = self.transpose.transpose_forward(p, t_in)?.add(residual)?;
                ffn_residual(&self.norm2, &self.mlp2, t_block)?
            }
            (DualStrategy::SimpleAdditive, _) => {
                let e = self.efficient.efficient_forward(p, xt)?;
                let t = self.transpose.transpose_forward(p, xt)?;
                let sum = e.add(t)?.add(xt)?;
                let h = ffn_residual(&self.norm1, &self.mlp1, sum)?;
                ffn_residual(&self.norm2, &self.mlp2, h)?
            }
            (DualStrategy::ComplexAdditive, Some(Fusion::ComplexAdditive { norm_e, ffn_e, norm_t, ffn_t })) => {
                let e = self.efficient.efficient_forward(p, xt)?;
                let t = self.transpose.transpose_forward(p, xt)?;
                let e = ffn_e.forward(p, norm_e.forward(p, e)?, grid)?;
                let t = ffn_t.forward(p, norm_t.forward(p, t)?, grid)?;
                let sum = e.add(t)?.add(xt)?;
                let h = ffn_residual(&self.norm1, &self.mlp1, sum)?;
                ffn_residual(&self.norm2, &self.mlp2, h)?
            }
            (DualStrategy::Concatenation, Some(Fusion::Concatenation { norm_e, norm_t, contract, norm_out })) => {
                let e = norm_e.forward(p, self.efficient.efficient_forward(p, xt)?)?;
                let t = norm_t.forward(p, self.transpose.transpose_forward(p, xt)?)?;
                let fused = norm_out.forward(p, contract.forward(p, e.concat_cols(t)?, grid)?)?;
                let sum = fused.add(xt)?;
                let h = ffn_residual(&self.norm1, &self.mlp1, sum)?;
                ffn_residual(&self.norm2, &self.mlp2, h)?
            }
            (s, _) => return Err(Error::MissingFusionParams(s)),
        };
        x.with_tokens(out)
    }
}
