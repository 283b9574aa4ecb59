//! Reconstruction, hint and Wasserstein losses with their gradients.
//!
//! Normal tensors are `[n, 3, h, w]` in decoded [−1, 1] units; masks are
//! `[n, 1, h, w]` with hint pixels set to 1. Gradients of `|Δ|` use
//! `sign(0) = 0`.

use super::{CompositeScope, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Discriminator, Grads};
use crate::tensor::{Real, Tensor};

fn check_mask<T: Real>(y: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = y.shape();
    if mask.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs normals {:?}", mask.shape(), y.shape())));
    }
    Ok(())
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean over pixels of the per-pixel sum of absolute channel differences.
pub fn l1_loss<T: Real>(y: &Tensor<T>, y_gen: &Tensor<T>) -> Result<T> {
    Ok(l1_loss_grad(y, y_gen)?.0)
}

/// [`l1_loss`] and its gradient with respect to `y_gen`.
pub fn l1_loss_grad<T: Real>(y: &Tensor<T>, y_gen: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    y.ensure_same_shape(y_gen, "l1_loss")?;
    let pixels = T::from_usize(y.batch() * y.plane()).unwrap();
    let mut sum = T::zero();
    let mut grad = Tensor::zeros(y.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(y.data()).zip(y_gen.data()) {
        let d = b - a;
        sum = sum + d.abs();
        *g = sign(d) / pixels;
    }
    Ok((sum / pixels, grad))
}

/// Masked L1 normalized by the number of hint pixels; 0 for an empty mask.
pub fn mask_loss<T: Real>(y: &Tensor<T>, y_gen: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    Ok(mask_loss_grad(y, y_gen, mask)?.0)
}

pub fn mask_loss_grad<T: Real>(y: &Tensor<T>, y_gen: &Tensor<T>, mask: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    y.ensure_same_shape(y_gen, "mask_loss")?;
    check_mask(y, mask)?;
    let mut grad = Tensor::zeros(y.shape());
    let count = mask.data().iter().copied().sum::<T>();
    if count == T::zero() {
        return Ok((T::zero(), grad));
    }
    let plane = y.plane();
    let mut sum = T::zero();
    for s in 0..y.batch() {
        let m = mask.sample(s);
        let (a, b) = (y.sample(s), y_gen.sample(s));
        let g = grad.sample_mut(s);
        for c in 0..y.channels() {
            for (p, &mp) in m.iter().enumerate() {
                if mp == T::zero() {
                    continue;
                }
                let i = c * plane + p;
                let d = b[i] - a[i];
                sum = sum + mp * d.abs();
                g[i] = mp * sign(d) / count;
            }
        }
    }
    Ok((sum / count, grad))
}

/// `y` at hint pixels, `y_gen` elsewhere.
pub fn composite_hints<T: Real>(y_gen: &Tensor<T>, y: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    y.ensure_same_shape(y_gen, "composite_hints")?;
    check_mask(y, mask)?;
    let mut out = y_gen.clone();
    let plane = y.plane();
    for s in 0..y.batch() {
        let m = mask.sample(s);
        let src = y.sample(s);
        let dst = out.sample_mut(s);
        for c in 0..y.channels() {
            for (p, &mp) in m.iter().enumerate() {
                if mp != T::zero() {
                    dst[c * plane + p] = src[c * plane + p];
                }
            }
        }
    }
    Ok(out)
}

/// Zeroes a gradient at hint pixels, the backward pass of [`composite_hints`]
/// with respect to `y_gen`.
fn mask_out_hints<T: Real>(grad: &mut Tensor<T>, mask: &Tensor<T>) {
    let plane = grad.plane();
    for s in 0..grad.batch() {
        let m = mask.sample(s).to_vec();
        let g = grad.sample_mut(s);
        for c in 0..g.len() / plane {
            for (p, &mp) in m.iter().enumerate() {
                if mp != T::zero() {
                    g[c * plane + p] = T::zero();
                }
            }
        }
    }
}

/// The 7-channel critic input: generator input (sketch + mask) then normals.
pub fn critic_input<T: Real>(x: &Tensor<T>, normals: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat_channels(&[x, normals])
}

/// `−(E[D(y|x)] − E[D(ỹ|x)])` with `ỹ` the hint-composited generator output.
pub fn critic_loss<T: Real>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    y_gen: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<T> {
    let fake = composite_hints(y_gen, y, mask)?;
    let real = d.forward(&critic_input(x, y)?)?.mean_combined();
    let fake = d.forward(&critic_input(x, &fake)?)?.mean_combined();
    Ok(fake - real)
}

/// [`critic_loss`] and its gradient with respect to the critic parameters.
/// `y_fake` is already composited.
pub fn critic_loss_grad<T: Real>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    y_fake: &Tensor<T>,
) -> Result<(T, Grads<T>)> {
    let n = x.batch();
    let inv = T::one() / T::from_usize(n).unwrap();
    let (real, real_cache) = d.forward_train(&critic_input(x, y)?)?;
    let (mut grads, _) = d.backward_combined(&real_cache, real.map.shape(), &vec![-inv; n], false);
    drop(real_cache);
    let (fake, fake_cache) = d.forward_train(&critic_input(x, y_fake)?)?;
    let (fake_grads, _) = d.backward_combined(&fake_cache, fake.map.shape(), &vec![inv; n], false);
    grads.add_assign(&fake_grads);
    Ok((fake.mean_combined() - real.mean_combined(), grads))
}

/// The generator objective and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLoss<T> {
    pub total: T,
    /// `−E[D(ỹ|x)]`.
    pub adv: T,
    pub l1: T,
    pub mask: T,
}

/// `−E[D(ỹ|x)] + λ_L1·L1 + λ_mask·L_mask`.
///
/// The critic always sees the composited `ỹ`; the reconstruction terms see
/// the raw output unless `composite_scope = everywhere`.
pub fn generator_loss<T: Real>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    y_gen: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss<T>> {
    let fake = composite_hints(y_gen, y, mask)?;
    let adv = -d.forward(&critic_input(x, &fake)?)?.mean_combined();
    let recon = match cfg.composite_scope {
        CompositeScope::CriticOnly => y_gen,
        CompositeScope::Everywhere => &fake,
    };
    let l1 = l1_loss(y, recon)?;
    let ml = mask_loss(y, recon, mask)?;
    Ok(assemble(adv, l1, ml, cfg))
}

fn assemble<T: Real>(adv: T, l1: T, mask: T, cfg: &TrainConfig) -> GeneratorLoss<T> {
    let total = adv + T::lit(cfg.lambda_l1) * l1 + T::lit(cfg.lambda_mask) * mask;
    GeneratorLoss { total, adv, l1, mask }
}

/// [`generator_loss`] and its gradient with respect to `y_gen`.
pub fn generator_loss_grad<T: Real>(
    d: &Discriminator<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    y_gen: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &TrainConfig,
) -> Result<(GeneratorLoss<T>, Tensor<T>)> {
    let n = x.batch();
    let fake = composite_hints(y_gen, y, mask)?;
    let (out, cache) = d.forward_train(&critic_input(x, &fake)?)?;
    let adv = -out.mean_combined();
    let weights = vec![-T::one() / T::from_usize(n).unwrap(); n];
    let (_, gin) = d.backward_combined(&cache, out.map.shape(), &weights, true);
    let gin = gin.expect("input gradient requested");
    let mut adv_grad = gin.channel_range(x.channels(), gin.channels());

    let everywhere = cfg.composite_scope == CompositeScope::Everywhere;
    let recon = if everywhere { &fake } else { y_gen };
    let (l1, l1_grad) = l1_loss_grad(y, recon)?;
    let (ml, ml_grad) = mask_loss_grad(y, recon, mask)?;
    let (la, lm) = (T::lit(cfg.lambda_l1), T::lit(cfg.lambda_mask));
    let mut recon_grad = Tensor::zeros(y.shape());
    for ((g, &a), &b) in recon_grad.data_mut().iter_mut().zip(l1_grad.data()).zip(ml_grad.data()) {
        *g = la * a + lm * b;
    }
    mask_out_hints(&mut adv_grad, mask);
    if everywhere {
        mask_out_hints(&mut recon_grad, mask);
    }
    for (g, &r) in adv_grad.data_mut().iter_mut().zip(recon_grad.data()) {
        *g = *g + r;
    }
    Ok((assemble(adv, l1, ml, cfg), adv_grad))
}
