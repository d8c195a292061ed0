//! Tokenization and resolution changes: overlapping patch embedding,
//! 2x2 patch merging and patch expanding.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TokenMap};
use crate::numerics::tape::GATHER_ZERO;
use crate::numerics::{Scalar, Var};
use crate::params::{Bound, Initializer};

/// Window, stride and zero padding of the overlapping patch embedding.
pub const EMBED_WINDOW: usize = 7;
pub const EMBED_STRIDE: usize = 4;
pub const EMBED_PADDING: usize = 3;

/// Gather indices that turn an `H x W x C` image into one row per output
/// token holding its `7 x 7 x C` window, ordered `[ky][kx][channel]`.
pub fn embed_window_indices(height: usize, width: usize, channels: usize) -> Result<(Rc<[u32]>, usize, usize)> {
    if height % EMBED_STRIDE != 0 || width % EMBED_STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch_embed: image {height}x{width} is not divisible by {EMBED_STRIDE}"
        )));
    }
    let (gh, gw) = (height / EMBED_STRIDE, width / EMBED_STRIDE);
    let mut idx = Vec::with_capacity(gh * gw * EMBED_WINDOW * EMBED_WINDOW * channels);
    for r in 0..gh {
        for c in 0..gw {
            for ky in 0..EMBED_WINDOW {
                for kx in 0..EMBED_WINDOW {
                    let y = (r * EMBED_STRIDE + ky) as isize - EMBED_PADDING as isize;
                    let x = (c * EMBED_STRIDE + kx) as isize - EMBED_PADDING as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width;
                    for ch in 0..channels {
                        idx.push(if inside {
                            ((y as usize * width + x as usize) * channels + ch) as u32
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    Ok((idx.into(), gh, gw))
}

/// Extracts the embedding windows of an `H x W x C` image: one row of
/// `49 * C` values per token.
pub fn extract_windows<'t, T: Scalar>(image: Var<'t, T>) -> Result<TokenMap<'t, T>> {
    let shape = image.shape();
    let &[h, w, c] = shape.as_slice() else {
        return Err(Error::dim("patch_embed", format!("expected an HxWxC image, got {shape:?}")));
    };
    let (idx, gh, gw) = embed_window_indices(h, w, c)?;
    let rows = image.gather(idx, vec![gh * gw, EMBED_WINDOW * EMBED_WINDOW * c])?;
    TokenMap::new(rows, gh, gw)
}

/// Overlapping convolutional embedding followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, in_channels: usize, dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                proj: Linear::new(init, "proj", EMBED_WINDOW * EMBED_WINDOW * in_channels, dim, true)?,
                norm: LayerNorm::new(init, "norm", dim)?,
            })
        })
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + 2 * self.proj.out_dim
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, image: Var<'t, T>) -> Result<TokenMap<'t, T>> {
        let windows = extract_windows(image)?;
        let tokens = self.norm.forward(p, self.proj.forward(p, windows.tokens())?)?;
        windows.with_tokens(tokens)
    }
}

/// Gather indices placing each 2x2 neighbourhood of a `height x width x
/// dim` token grid into one row of `4 * dim`, neighbours in row-major order.
pub fn merge_indices(height: usize, width: usize, dim: usize) -> Result<Rc<[u32]>> {
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::InvalidArgument(format!("patch_merge: grid {height}x{width} has an odd side")));
    }
    let mut idx = Vec::with_capacity(height * width * dim);
    for r in (0..height).step_by(2) {
        for c in (0..width).step_by(2) {
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = (r + dr) * width + (c + dc);
                idx.extend((0..dim).map(|ch| (src * dim + ch) as u32));
            }
        }
    }
    Ok(idx.into())
}

/// Concatenates each 2x2 neighbourhood (`4d`) without projecting it.
pub fn gather_neighbourhoods<'t, T: Scalar>(x: TokenMap<'t, T>) -> Result<TokenMap<'t, T>> {
    let (h, w) = x.grid();
    let d = x.dim();
    let idx = merge_indices(h, w, d)?;
    let rows = x.tokens().gather(idx, vec![(h / 2) * (w / 2), 4 * d])?;
    TokenMap::new(rows, h / 2, w / 2)
}

/// Halves the grid and doubles the width: each concatenated 2x2
/// neighbourhood is layer-normalized and reduced `4d -> 2d` without bias.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                norm: LayerNorm::new(init, "norm", 4 * dim)?,
                reduce: Linear::new(init, "reduce", 4 * dim, 2 * dim, false)?,
            })
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.reduce.in_dim + self.reduce.param_count()
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: TokenMap<'t, T>) -> Result<TokenMap<'t, T>> {
        if x.dim() * 4 != self.reduce.in_dim {
            return Err(Error::dim("patch_merge", format!("width {} vs expected {}", x.dim(), self.reduce.in_dim / 4)));
        }
        let merged = gather_neighbourhoods(x)?;
        merged.with_tokens(self.reduce.forward(p, self.norm.forward(p, merged.tokens())?)?)
    }
}

/// Gather indices that spread each token's `factor^2 * width` channels
/// over a `factor x factor` block of output tokens; chunk `p1 * factor + p2`
/// lands at offset `(p1, p2)`.
pub fn expand_indices(height: usize, width: usize, factor: usize, out_dim: usize) -> Rc<[u32]> {
    let (oh, ow) = (height * factor, width * factor);
    let in_dim = factor * factor * out_dim;
    let mut idx = Vec::with_capacity(oh * ow * out_dim);
    for orow in 0..oh {
        for ocol in 0..ow {
            let (r, p1) = (orow / factor, orow % factor);
            let (c, p2) = (ocol / factor, ocol % factor);
            let base = (r * width + c) * in_dim + (p1 * factor + p2) * out_dim;
            idx.extend((0..out_dim).map(|ch| (base + ch) as u32));
        }
    }
    idx.into()
}

/// Rearranges an already projected `n x factor^2*w` map into a grid
/// `factor` times larger with width `w`.
pub fn rearrange_expand<'t, T: Scalar>(x: TokenMap<'t, T>, factor: usize) -> Result<TokenMap<'t, T>> {
    let d = x.dim();
    if factor == 0 || d % (factor * factor) != 0 {
        return Err(Error::dim("patch_expand", format!("width {d} not divisible by {}", factor * factor)));
    }
    let (h, w) = x.grid();
    let out_dim = d / (factor * factor);
    let idx = expand_indices(h, w, factor, out_dim);
    let tokens = x.tokens().gather(idx, vec![h * w * factor * factor, out_dim])?;
    TokenMap::new(tokens, h * factor, w * factor)
}

/// Multiplies the grid by `factor` and divides the width by it: bias-free
/// projection `d -> factor * d`, rearrangement, then layer norm over the
/// `d / factor` output channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
}

impl PatchExpand {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 || dim % factor != 0 {
            return Err(Error::InvalidArgument(format!("patch_expand: width {dim} not divisible by factor {factor}")));
        }
        init.scoped(name, |init| {
            Ok(Self {
                proj: Linear::new(init, "proj", dim, factor * dim, false)?,
                norm: LayerNorm::new(init, "norm", dim / factor)?,
                factor,
            })
        })
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + 2 * (self.proj.in_dim / self.factor)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: TokenMap<'t, T>) -> Result<TokenMap<'t, T>> {
        let projected = x.with_tokens(self.proj.forward(p, x.tokens())?)?;
        let expanded = rearrange_expand(projected, self.factor)?;
        expanded.with_tokens(self.norm.forward(p, expanded.tokens())?)
    }
}
