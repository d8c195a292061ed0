//! Soft dice, binary cross-entropy and their weighted sum.
//!
//! Both losses take `pixels x classes` matrices (any other rank is read as
//! a single class) and average over classes.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, Var};

/// Lower bound applied to every logarithm argument.
pub const CE_CLAMP: f64 = 1e-7;
pub const DICE_WEIGHT: f64 = 0.6;
pub const CE_WEIGHT: f64 = 0.4;

fn as_matrix<'t, T: Scalar>(v: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = v.shape();
    if shape.len() >= 2 {
        let c = *shape.last().expect("rank >= 2");
        v.reshape(vec![shape.iter().product::<usize>() / c, c])
    } else {
        v.reshape(vec![shape[0], 1])
    }
}

fn check_pair<T: Scalar>(op: &'static str, y: Var<'_, T>, p: Var<'_, T>) -> Result<()> {
    if y.shape() != p.shape() {
        return Err(Error::dim(op, format!("labels {:?} vs predictions {:?}", y.shape(), p.shape())));
    }
    Ok(())
}

/// `1 - (2 sum(y p) + 1) / (sum(y) + sum(p) + 1)` per class, averaged.
pub fn dice_loss<'t, T: Scalar>(y: Var<'t, T>, p: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair("dice_loss", y, p)?;
    if p.value_ref().data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(Error::InvalidArgument("dice_loss: probabilities must lie in [0, 1]".into()));
    }
    let (y, p) = (as_matrix(y)?, as_matrix(p)?);
    let overlap = y.mul(p)?.sum_axis(0)?;
    let num = overlap.scale(T::c(2.0))?.add_scalar(T::one())?;
    let den = y.sum_axis(0)?.add(p.sum_axis(0)?)?.add_scalar(T::one())?;
    num.div(den)?.scale(-T::one())?.add_scalar(T::one())?.mean()
}

/// Mean of `-(y ln p + (1 - y) ln(1 - p))` over pixels and classes, with
/// each logarithm argument clamped below at [`CE_CLAMP`].
pub fn ce_loss<'t, T: Scalar>(y: Var<'t, T>, p: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair("ce_loss", y, p)?;
    let lo = T::c(CE_CLAMP);
    let not_y = {
        let yv = y.value_ref();
        Tensor::from_fn(yv.shape().to_vec(), |i| T::one() - yv.data()[i])?
    };
    let not_y = y.tape().constant(not_y);
    let pos = y.mul(p.clamp(lo, T::one())?.log()?)?;
    let one_minus_p = p.scale(-T::one())?.add_scalar(T::one())?;
    let neg = not_y.mul(one_minus_p.clamp(lo, T::one())?.log()?)?;
    pos.add(neg)?.mean()?.scale(-T::one())
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub dice: Var<'t, T>,
    pub ce: Var<'t, T>,
}

/// `0.6 * dice + 0.4 * ce`.
pub fn total_loss<'t, T: Scalar>(y: Var<'t, T>, p: Var<'t, T>) -> Result<LossParts<'t, T>> {
    let dice = dice_loss(y, p)?;
    let ce = ce_loss(y, p)?;
    let total = dice.scale(T::c(DICE_WEIGHT))?.add(ce.scale(T::c(CE_WEIGHT))?)?;
    Ok(LossParts { total, dice, ce })
}

/// One-hot `pixels x classes` matrix for integer labels.
pub fn one_hot<T: Scalar>(labels: &[u32], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{num_classes}")));
        }
        data[i * num_classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Loss of `H x W x C` logits against integer labels (softmax over classes).
pub fn segmentation_loss<'t, T: Scalar>(logits: Var<'t, T>, labels: &[u32]) -> Result<LossParts<'t, T>> {
    let shape = logits.shape();
    let classes = *shape.last().expect("rank >= 1");
    let pixels = shape.iter().product::<usize>() / classes;
    if pixels != labels.len() {
        return Err(Error::dim("segmentation_loss", format!("{pixels} pixels vs {} labels", labels.len())));
    }
    let probs = logits.reshape(vec![pixels, classes])?.softmax(1)?;
    let y = logits.tape().constant(one_hot(labels, classes)?);
    total_loss(y, probs)
}
