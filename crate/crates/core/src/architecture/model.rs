//! The hierarchical encoder/decoder segmentation transformer.
//!
//! Encoder: patch embedding, then three stages of dual blocks with a patch
//! merge between stages. Decoder: three stages from the bottleneck up;
//! every stage except the lowest may fuse the parallel encoder output by
//! skip cross attention (output `2d`) and a `2d -> d` linear layer, runs
//! its dual blocks, and expands the grid. The top stage expands by 4 and a
//! per-token linear layer produces the class logits.

use std::collections::BTreeMap;

use crate::attention::SccaParams;
use crate::blocks::BlockParams;
use crate::error::{Error, Result};
use crate::nn::{Linear, TokenMap};
use crate::numerics::rng::rng;
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Bound, Initializer, ParamStore};

use super::config::{ModelConfig, STAGES};
use super::patches::{PatchEmbed, PatchExpand, PatchMerge};

#[derive(Clone, Debug)]
pub struct EncoderStage {
    /// Absent on the first stage, which follows the patch embedding.
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct SkipFusion {
    pub scca: SccaParams,
    /// Projects the `2d` cross-attention output back to `d`.
    pub project: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Encoder stage whose output this stage receives as its skip input.
    pub level: usize,
    pub fusion: Option<SkipFusion>,
    pub blocks: Vec<BlockParams>,
    pub expand: PatchExpand,
}

/// Layer structure of the model; the learnable values live in a
/// [`ParamStore`] built alongside it.
#[derive(Clone, Debug)]
pub struct DaeFormer {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub encoder: Vec<EncoderStage>,
    /// Ordered from the bottleneck (level 2) to the top (level 0).
    pub decoder: Vec<DecoderStage>,
    pub head: Linear,
}

fn blocks<T: Scalar>(init: &mut Initializer<'_, T>, config: &ModelConfig, dim: usize) -> Result<Vec<BlockParams>> {
    (0..config.blocks_per_stage)
        .map(|j| {
            let mut b = BlockParams::new(init, &format!("block{j}"), dim, config.expansion_ratio, config.strategy)?;
            b.channel_residual = config.channel_residual;
            Ok(b)
        })
        .collect()
}

impl DaeFormer {
    /// Builds the layer structure and freshly initialized parameters from
    /// `config.seed`.
    pub fn build<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng(config.seed);
        let mut init = Initializer::new(&mut store, &mut r);
        let dims = &config.embed_dims;

        let embed = PatchEmbed::new(&mut init, "embed", config.in_channels, dims[0])?;
        let mut encoder = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            encoder.push(init.scoped(&format!("encoder.{s}"), |init| {
                let merge = if s == 0 { None } else { Some(PatchMerge::new(init, "merge", dims[s - 1])?) };
                Ok(EncoderStage { merge, blocks: blocks(init, config, dims[s])? })
            })?);
        }

        let mut decoder = Vec::with_capacity(STAGES);
        for level in (0..STAGES).rev() {
            decoder.push(init.scoped(&format!("decoder.{level}"), |init| {
                let d = dims[level];
                // level 0 is the top; skip_connections counts from the top
                // and never reaches the bottleneck.
                let fused = level < STAGES - 1 && level < config.skip_connections;
                let fusion = if fused {
                    Some(SkipFusion {
                        scca: SccaParams::new(init, "scca", d, d)?,
                        project: Linear::new(init, "scca_proj", 2 * d, d, true)?,
                    })
                } else {
                    None
                };
                let blocks = blocks(init, config, d)?;
                let factor = if level == 0 { 4 } else { 2 };
                let expand = PatchExpand::new(init, "expand", d, factor)?;
                Ok(DecoderStage { level, fusion, blocks, expand })
            })?);
        }
        let head = Linear::new(&mut init, "head", dims[0] / 4, config.num_classes, true)?;
        Ok((Self { config: config.clone(), embed, encoder, decoder, head }, store))
    }

    /// Class logits `H x W x num_classes` for one `H x W x C` image.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let shape = image.shape();
        let expected = [cfg.image_size, cfg.image_size, cfg.in_channels];
        if shape != expected {
            return Err(Error::dim("model_forward", format!("image {shape:?} vs configured {expected:?}")));
        }

        let mut x = self.embed.forward(p, image)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (s, stage) in self.encoder.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                x = merge.forward(p, x)?;
            }
            for b in &stage.blocks {
                x = b.forward(p, x)?;
            }
            check_stage(x, cfg.base_grid() >> s, cfg.embed_dims[s])?;
            skips.push(x);
        }

        for stage in &self.decoder {
            if let Some(f) = &stage.fusion {
                let skip = skips[stage.level];
                let fused = f.scca.forward(p, x.tokens(), skip.tokens(), cfg.scca_order())?;
                x = x.with_tokens(f.project.forward(p, fused)?)?;
            }
            for b in &stage.blocks {
                x = b.forward(p, x)?;
            }
            check_stage(x, cfg.base_grid() >> stage.level, cfg.embed_dims[stage.level])?;
            x = stage.expand.forward(p, x)?;
        }

        let logits = self.head.forward(p, x.tokens())?;
        logits.reshape(vec![cfg.image_size, cfg.image_size, cfg.num_classes])
    }

    /// Inference on a frozen store.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = crate::numerics::Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(image.clone());
        Ok(self.forward(&p, x)?.value())
    }

    /// Per-module learnable scalar counts, keyed by name prefix
    /// (`embed`, `encoder.0`, `decoder.1.scca`, ...).
    pub fn param_breakdown<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, param) in store.iter() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts.as_slice() {
                ["encoder" | "decoder", stage, module, ..] => {
                    let module = if module.starts_with("block") { "blocks" } else { module };
                    format!("{}.{stage}.{module}", parts[0])
                }
                [first, ..] => first.to_string(),
                [] => unreachable!("names are non-empty"),
            };
            *out.entry(key).or_insert(0) += param.value.numel();
        }
        out
    }
}

fn check_stage<T: Scalar>(x: TokenMap<'_, T>, side: usize, dim: usize) -> Result<()> {
    let side = side.max(1);
    if x.grid() != (side, side) || x.dim() != dim {
        return Err(Error::dim(
            "model_forward",
            format!("stage produced grid {:?} width {}, expected {side}x{side} width {dim}", x.grid(), x.dim()),
        ));
    }
    Ok(())
}

/// Exact number of learnable scalars of a freshly built model.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    let (_, store) = DaeFormer::build::<f64>(config)?;
    Ok(store.scalar_count())
}
