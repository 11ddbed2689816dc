mod common;

use common::{randn, rng};
use csg0_core::autodiff::{Tape, Var};
use csg0_core::labelspace::{class_frequencies, one_hot, SemanticMap};
use csg0_core::losses::{
    discriminator_loss_value, generator_loss_value, labelmix, labelmix_consistency,
    sample_labelmix_mask, PixelClassifier, LAMBDA_LM,
};
use csg0_core::netblocks::{DiscriminatorConfig, DiscriminatorModel};
use csg0_core::params::Binder;
use csg0_core::{Result, Tensor};
use rand::Rng;

const TOL: f64 = 1e-12;

fn random_case(seed: u64) -> (Vec<SemanticMap>, Tensor, Tensor, Tensor, Vec<f64>) {
    let mut r = rng(seed);
    let maps: Vec<SemanticMap> = (0..2)
        .map(|_| SemanticMap::new(4, 4, (0..16).map(|_| r.gen_range(0..2)).collect()).unwrap())
        .collect();
    let onehot = Tensor::stack_batch(
        &maps
            .iter()
            .map(|m| one_hot(m, 2).unwrap())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let alpha = vec![r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)];
    (
        maps,
        onehot,
        randn(&[2, 3, 4, 4], seed ^ 1),
        randn(&[2, 3, 4, 4], seed ^ 2),
        alpha,
    )
}

fn at(t: &Tensor, n: usize, c: usize, i: usize, j: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]
}

fn log_softmax_at(t: &Tensor, n: usize, c: usize, i: usize, j: usize) -> f64 {
    let ch = t.shape()[1];
    let lse = (0..ch).map(|k| at(t, n, k, i, j).exp()).sum::<f64>().ln();
    at(t, n, c, i, j) - lse
}

fn brute_class_term(d: &Tensor, maps: &[SemanticMap], alpha: &[f64]) -> f64 {
    let mut s = 0.0;
    for (n, m) in maps.iter().enumerate() {
        for i in 0..4 {
            for j in 0..4 {
                let c = m.get(i, j) as usize;
                s += alpha[c] * log_softmax_at(d, n, c, i, j);
            }
        }
    }
    -s / maps.len() as f64
}

fn brute_fake_term(d: &Tensor) -> f64 {
    let n = d.shape()[0];
    let last = d.shape()[1] - 1;
    let mut s = 0.0;
    for b in 0..n {
        for i in 0..4 {
            for j in 0..4 {
                s += log_softmax_at(d, b, last, i, j);
            }
        }
    }
    -s / n as f64
}

#[test]
fn generator_loss_matches_per_pixel_sum() {
    for seed in 0..20 {
        let (maps, onehot, d_fake, _, alpha) = random_case(seed);
        let got = generator_loss_value(&d_fake, &onehot, &alpha).unwrap();
        let want = brute_class_term(&d_fake, &maps, &alpha);
        assert!((got - want).abs() < TOL, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn discriminator_loss_matches_per_pixel_sum() {
    for seed in 0..20 {
        let (maps, onehot, d_real, d_fake, alpha) = random_case(seed);
        let got = discriminator_loss_value(&d_real, &d_fake, &onehot, &alpha).unwrap();
        let want = brute_class_term(&d_real, &maps, &alpha) + brute_fake_term(&d_fake);
        assert!((got - want).abs() < TOL, "seed {seed}: {got} vs {want}");
    }
}

/// Logits that put all mass on `target(n, i, j)`.
fn confident(channels: usize, target: impl Fn(usize, usize, usize) -> usize) -> Tensor {
    let mut t = Tensor::full(&[2, channels, 4, 4], -1000.0);
    for n in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let c = target(n, i, j);
                t.data_mut()[((n * channels + c) * 4 + i) * 4 + j] = 0.0;
            }
        }
    }
    t
}

#[test]
fn perfect_discriminator_gives_zero_losses() {
    let (maps, onehot, _, _, alpha) = random_case(5);
    let d_real = confident(3, |n, i, j| maps[n].get(i, j) as usize);
    let d_fake = confident(3, |_, _, _| 2);
    assert_eq!(
        discriminator_loss_value(&d_real, &d_fake, &onehot, &alpha).unwrap(),
        0.0
    );
    // A generator that fools D into the true class everywhere.
    assert_eq!(generator_loss_value(&d_real, &onehot, &alpha).unwrap(), 0.0);
}

#[test]
fn loss_shape_mismatch_is_rejected() {
    let (_, onehot, d, _, alpha) = random_case(1);
    assert!(generator_loss_value(&d, &onehot, &alpha[..1]).is_err());
    let two = randn(&[2, 2, 4, 4], 3);
    assert!(generator_loss_value(&two, &onehot, &alpha).is_err());
}

#[test]
fn inverse_frequency_weights() {
    let m = SemanticMap::new(2, 2, vec![0, 0, 0, 1]).unwrap();
    let a = class_frequencies([&m], 3).unwrap();
    assert_eq!(a, vec![4.0 / (3.0 * 3.0), 4.0 / 3.0, 0.0]);
}

/// A 1x1 convolution: logits are affine in each pixel's colour.
struct LinearD {
    w: Tensor,
    b: Tensor,
}

impl PixelClassifier for LinearD {
    fn forward(&self, tape: &mut Tape, _: &mut Binder, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        tape.conv2d(x, w, Some(b), 0)
    }
}

#[test]
fn labelmix_consistency_vanishes_for_per_pixel_linear_discriminators() {
    for seed in 0..10 {
        let d = LinearD {
            w: randn(&[5, 3, 1, 1], seed),
            b: randn(&[5], seed ^ 9),
        };
        let map = SemanticMap::new(4, 4, (0..16).map(|p| (p % 3) as u16).collect()).unwrap();
        let mask = sample_labelmix_mask(&map, seed).mask;
        let (real, fake) = (
            randn(&[1, 3, 4, 4], seed ^ 3),
            randn(&[1, 3, 4, 4], seed ^ 4),
        );
        let mut tape = Tape::new();
        let v = labelmix_consistency(&mut tape, &mut Binder::new(false), &d, &real, &fake, &mask)
            .unwrap();
        assert!(tape.value(v).item().unwrap().abs() < TOL);
    }
}

#[test]
fn labelmix_consistency_is_positive_for_a_spatial_discriminator() {
    let d = DiscriminatorModel::new(
        DiscriminatorConfig {
            channels: [4, 4, 4],
        },
        3,
        0,
    )
    .unwrap();
    let map = SemanticMap::new(4, 4, (0..16).map(|p| (p / 8) as u16).collect()).unwrap();
    let mask = Tensor::new(
        &[1, 1, 4, 4],
        map.labels.iter().map(|&l| l as f64).collect(),
    )
    .unwrap();
    let (real, fake) = (randn(&[1, 3, 4, 4], 1), randn(&[1, 3, 4, 4], 2));
    let mut tape = Tape::new();
    let v =
        labelmix_consistency(&mut tape, &mut Binder::new(false), &d, &real, &fake, &mask).unwrap();
    assert!(tape.value(v).item().unwrap() > 0.0);
}

#[test]
fn labelmix_mask_is_constant_per_class() {
    let map = SemanticMap::new(4, 4, (0..16).map(|p| (p % 4) as u16).collect()).unwrap();
    for seed in 0..20 {
        let m = sample_labelmix_mask(&map, seed);
        for c in 0..4u16 {
            let vals: Vec<f64> = (0..16)
                .filter(|&p| map.labels[p] == c)
                .map(|p| m.mask.data()[p])
                .collect();
            assert!(vals.iter().all(|&v| v == vals[0] && (v == 0.0 || v == 1.0)));
        }
        assert_eq!(sample_labelmix_mask(&map, seed), m);
    }
}

#[test]
fn labelmix_selects_per_pixel() {
    let a = Tensor::full(&[1, 2, 1, 2], 1.0);
    let b = Tensor::full(&[1, 2, 1, 2], -1.0);
    let mask = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
    assert_eq!(
        labelmix(&a, &b, &mask).unwrap().data(),
        &[1.0, -1.0, 1.0, -1.0]
    );
}

#[test]
fn labelmix_weight() {
    assert_eq!(LAMBDA_LM, 5.0);
}

#[test]
fn one_small_discriminator_step_lowers_its_loss() {
    use csg0_core::trainer::{AdamConfig, OptimState};
    let mut d = DiscriminatorModel::new(
        DiscriminatorConfig {
            channels: [4, 4, 4],
        },
        3,
        1,
    )
    .unwrap();
    let (_, onehot, _, _, alpha) = random_case(3);
    let real = randn(&[2, 3, 4, 4], 10);
    let fake = randn(&[2, 3, 4, 4], 11);
    let loss = |d: &DiscriminatorModel| {
        discriminator_loss_value(
            &d.logits(&real).unwrap(),
            &d.logits(&fake).unwrap(),
            &onehot,
            &alpha,
        )
        .unwrap()
    };
    let before = loss(&d);
    let mut tape = Tape::new();
    let mut b = Binder::new(true);
    let (xr, xf) = (tape.constant(real.clone()), tape.constant(fake.clone()));
    let dr = d.forward(&mut tape, &mut b, xr).unwrap();
    let df = d.forward(&mut tape, &mut b, xf).unwrap();
    let l = csg0_core::losses::discriminator_loss(&mut tape, dr, df, &onehot, &alpha).unwrap();
    tape.backward(l).unwrap();
    b.collect_grads(&tape, d.params_mut());
    let mut opt = OptimState::new(
        AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        },
        d.params(),
    );
    opt.step(d.params_mut()).unwrap();
    assert!(loss(&d) < before);
}
