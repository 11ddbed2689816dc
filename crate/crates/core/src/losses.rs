//! Adversarial objectives of the per-pixel (C+1)-class discriminator and
//! the LabelMix consistency regularizer.
//!
//! Logits are `[N, C + 1, H, W]` with the fake class in the last channel.
//! All losses sum over pixels and average over the batch, except the
//! consistency term which averages over every logit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labelspace::SemanticMap;
use crate::params::Binder;
use crate::tensor::Tensor;

/// Weight of the consistency term in the discriminator objective.
pub const LAMBDA_LM: f64 = 5.0;

/// Anything producing per-pixel logits from an image batch.
pub trait PixelClassifier {
    fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var>;
}

impl PixelClassifier for crate::netblocks::DiscriminatorModel {
    fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        crate::netblocks::DiscriminatorModel::forward(self, tape, binder, x)
    }
}

/// `alpha_c * onehot` broadcast into `[N, C, H, W]`.
fn weighted_target(onehot: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = onehot.dims4()?;
    if alpha.len() != c {
        return Err(Error::shape(
            "class weights",
            &[alpha.len()],
            onehot.shape(),
        ));
    }
    let hw = h * w;
    let mut data = onehot.data().to_vec();
    for s in 0..n {
        for (ch, &a) in alpha.iter().enumerate() {
            let off = (s * c + ch) * hw;
            for v in &mut data[off..off + hw] {
                *v *= a;
            }
        }
    }
    Tensor::new(onehot.shape(), data)
}

/// `-(1/N) * sum_{c,i,j} alpha_c * S_{c,i,j} * log p_{c,i,j}` over the real-class channels.
fn weighted_class_ce(tape: &mut Tape, logits: Var, onehot: &Tensor, alpha: &[f64]) -> Result<Var> {
    let (n, c1, h, w) = tape.value(logits).dims4()?;
    let (on, oc, oh, ow) = onehot.dims4()?;
    if (on, oc + 1, oh, ow) != (n, c1, h, w) {
        return Err(Error::shape(
            "class loss",
            tape.value(logits).shape(),
            onehot.shape(),
        ));
    }
    let lsm = tape.log_softmax_channels(logits)?;
    let real = tape.slice_channels(lsm, 0, oc)?;
    let target = tape.constant(weighted_target(onehot, alpha)?);
    let prod = tape.mul(real, target)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Generator objective on discriminator logits of generated images.
pub fn generator_loss(tape: &mut Tape, d_fake: Var, onehot: &Tensor, alpha: &[f64]) -> Result<Var> {
    weighted_class_ce(tape, d_fake, onehot, alpha)
}

/// Weighted class cross-entropy on real images plus the fake-channel term
/// on generated ones.
pub fn discriminator_loss(
    tape: &mut Tape,
    d_real: Var,
    d_fake: Var,
    onehot: &Tensor,
    alpha: &[f64],
) -> Result<Var> {
    let real = weighted_class_ce(tape, d_real, onehot, alpha)?;
    let (n, c1, ..) = tape.value(d_fake).dims4()?;
    if tape.value(d_fake).shape() != tape.value(d_real).shape() {
        return Err(Error::shape(
            "discriminator_loss",
            tape.value(d_real).shape(),
            tape.value(d_fake).shape(),
        ));
    }
    let lsm = tape.log_softmax_channels(d_fake)?;
    let fake_ch = tape.slice_channels(lsm, c1 - 1, 1)?;
    let s = tape.sum(fake_ch)?;
    let fake = tape.scale(s, -1.0 / n as f64)?;
    tape.add(real, fake)
}

pub fn generator_loss_value(d_fake: &Tensor, onehot: &Tensor, alpha: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(d_fake.clone());
    let v = generator_loss(&mut tape, l, onehot, alpha)?;
    tape.value(v).item()
}

pub fn discriminator_loss_value(
    d_real: &Tensor,
    d_fake: &Tensor,
    onehot: &Tensor,
    alpha: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(d_real.clone());
    let f = tape.constant(d_fake.clone());
    let v = discriminator_loss(&mut tape, r, f, onehot, alpha)?;
    tape.value(v).item()
}

/// A binary `[1, 1, H, W]` mask, constant on every class region of the map it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMixMask {
    pub mask: Tensor,
    pub seed: u64,
}

/// Assigns every class present in `map` an independent fair bit.
pub fn sample_labelmix_mask(map: &SemanticMap, seed: u64) -> LabelMixMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: BTreeMap<u16, f64> = map
        .distinct()
        .into_iter()
        .map(|c| (c, if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
        .collect();
    let data = map.labels.iter().map(|l| bits[l]).collect();
    LabelMixMask {
        mask: Tensor::new(&[1, 1, map.height, map.width], data).expect("mask shape"),
        seed,
    }
}

/// `M * a + (1 - M) * b` with `M` broadcast over channels.
pub fn labelmix(x_real: &Tensor, x_fake: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::shape("labelmix", x_real.shape(), x_fake.shape()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(x_real.clone());
    let b = tape.constant(x_fake.clone());
    let v = labelmix_var(&mut tape, a, b, mask)?;
    Ok(tape.into_value(v))
}

/// Differentiable [`labelmix`] on tape values.
pub fn labelmix_var(tape: &mut Tape, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "labelmix",
            tape.value(a).shape(),
            tape.value(b).shape(),
        ));
    }
    let inv: Vec<f64> = mask.data().iter().map(|m| 1.0 - m).collect();
    let inv = tape.constant(Tensor::new(mask.shape(), inv)?);
    let m = tape.constant(mask.clone());
    let am = tape.mul_mask(a, m)?;
    let bm = tape.mul_mask(b, inv)?;
    tape.add(am, bm)
}

/// Mean squared difference between `d_mixed` and the mask-mix of
/// `d_real` and `d_fake`.
pub fn consistency_from_logits(
    tape: &mut Tape,
    d_mixed: Var,
    d_real: Var,
    d_fake: Var,
    mask: &Tensor,
) -> Result<Var> {
    let target = labelmix_var(tape, d_real, d_fake, mask)?;
    let diff = tape.sub(d_mixed, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Full consistency term: runs `d` on the real, fake and mixed batches.
pub fn labelmix_consistency(
    tape: &mut Tape,
    binder: &mut Binder,
    d: &dyn PixelClassifier,
    x_real: &Tensor,
    x_fake: &Tensor,
    mask: &Tensor,
) -> Result<Var> {
    let mixed = tape.constant(labelmix(x_real, x_fake, mask)?);
    let xr = tape.constant(x_real.clone());
    let xf = tape.constant(x_fake.clone());
    let dm = d.forward(tape, binder, mixed)?;
    let dr = d.forward(tape, binder, xr)?;
    let df = d.forward(tape, binder, xf)?;
    consistency_from_logits(tape, dm, dr, df, mask)
}
