#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use csg0_core::autodiff::{Tape, Var};
use csg0_core::labelspace::SemanticMap;
use csg0_core::netblocks::{DiscriminatorConfig, GeneratorConfig, GeneratorModel};
use csg0_core::params::{Binder, ParamSet};
use csg0_core::{LabelRegistry, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Smaller step for the full generator, whose many ReLUs sit close to their kinks.
pub const E2E_FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Scalarizes `f` as `sum(f(inputs) * R)` with a fixed random `R`, then
/// compares reverse-mode gradients with central differences on every input
/// entry. Returns the largest relative error.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let loss = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = f(tape, vars).expect("forward");
        let shape = tape.value(out).shape().to_vec();
        let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xABCD)));
        let p = tape.mul(out, r).expect("weights");
        tape.sum(p).expect("sum")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let l = loss(&mut tape, &vars);
    tape.backward(l).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("grad").to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = loss(&mut t, &vs);
        t.value(l).item().expect("scalar")
    };
    let mut worst: f64 = 0.0;
    for (i, inp) in inputs.iter().enumerate() {
        for j in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], num));
        }
    }
    worst
}

/// A two-step registry: 3 base classes, 2 added.
pub fn tiny_registry() -> LabelRegistry {
    LabelRegistry::load_mapping(
        "domain,name,orig_id,cont_id\n\
         base,a,0,0\nbase,b,1,1\nbase,c,2,2\n\
         next,a,0,0\nnext,b,1,1\nnext,c,2,2\nnext,d,3,3\nnext,e,4,4\n",
    )
    .unwrap()
}

pub fn tiny_gen_config(h: usize, w: usize) -> GeneratorConfig {
    GeneratorConfig {
        channels: vec![6, 4],
        z_dim: 2,
        hidden: 4,
        height: h,
        width: w,
    }
}

pub fn tiny_disc_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: [4, 4, 4],
    }
}

/// Blocky random map with ids in `0..classes`.
pub fn random_map(h: usize, w: usize, classes: u16, block: usize, seed: u64) -> SemanticMap {
    let mut r = rng(seed);
    let mut m = SemanticMap::filled(h, w, 0);
    for bi in (0..h).step_by(block) {
        for bj in (0..w).step_by(block) {
            let c = r.gen_range(0..classes);
            for i in bi..(bi + block).min(h) {
                for j in bj..(bj + block).min(w) {
                    m.set(i, j, c);
                }
            }
        }
    }
    m
}

/// Adds `N(0, std)` noise to every parameter of `set`.
pub fn jitter(set: &mut ParamSet, std: f64, seed: u64) {
    let mut r = rng(seed);
    for p in set.iter_mut() {
        for v in p.tensor.data_mut() {
            let n: f64 = r.sample(rand_distr::StandardNormal);
            *v += std * n;
        }
    }
}

/// Generator output for a batch without gradient recording.
pub fn generate(
    model: &GeneratorModel,
    z: &[Vec<f64>],
    maps: &[SemanticMap],
    step: usize,
) -> Tensor {
    model.generate_batch(z, maps, step).unwrap()
}

pub fn forward_with(
    model: &GeneratorModel,
    tape: &mut Tape,
    z: &[Vec<f64>],
    maps: &[SemanticMap],
    step: usize,
) -> (Var, Binder) {
    let mut b = Binder::new(true);
    let v = model.forward(tape, &mut b, z, maps, step).unwrap();
    (v, b)
}

/// Largest relative gradient error of every differentiable op for `seed`.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use csg0_core::netblocks::weight_stats;
    let s = |k: u64| seed.wrapping_mul(1000) + k;
    let mut out = Vec::new();
    out.push((
        "conv2d",
        gradcheck(
            &[
                randn(&[1, 2, 4, 4], s(1)),
                randn(&[3, 2, 3, 3], s(2)),
                randn(&[3], s(3)),
            ],
            seed,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1),
        ),
    ));
    out.push((
        "conv2d_1x1_nopad",
        gradcheck(
            &[randn(&[2, 3, 3, 2], s(4)), randn(&[2, 3, 1, 1], s(5))],
            seed,
            |t, v| t.conv2d(v[0], v[1], None, 0),
        ),
    ));
    out.push((
        "instance_norm",
        gradcheck(
            &[
                randn(&[2, 3, 4, 4], s(6)),
                randn(&[3], s(7)),
                randn(&[3], s(8)),
            ],
            seed,
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
    ));
    out.push((
        "log_softmax_channels",
        gradcheck(&[randn(&[1, 5, 2, 2], s(9))], seed, |t, v| {
            t.log_softmax_channels(v[0])
        }),
    ));
    out.push((
        "upsample_nearest",
        gradcheck(&[randn(&[1, 2, 2, 3], s(10))], seed, |t, v| {
            t.upsample_nearest(v[0], 2)
        }),
    ));
    out.push((
        "avg_pool2",
        gradcheck(&[randn(&[1, 2, 4, 4], s(11))], seed, |t, v| {
            t.avg_pool2(v[0])
        }),
    ));
    out.push((
        "relu",
        gradcheck(&[randn(&[1, 2, 3, 3], s(12))], seed, |t, v| t.relu(v[0])),
    ));
    out.push((
        "leaky_relu",
        gradcheck(&[randn(&[1, 2, 3, 3], s(13))], seed, |t, v| {
            t.leaky_relu(v[0], 0.2)
        }),
    ));
    out.push((
        "tanh",
        gradcheck(&[randn(&[1, 2, 3, 3], s(14))], seed, |t, v| t.tanh(v[0])),
    ));
    out.push((
        "add_scalar",
        gradcheck(&[randn(&[1, 1, 2, 2], s(15))], seed, |t, v| {
            t.add_scalar(v[0], 0.7)
        }),
    ));
    out.push((
        "scale",
        gradcheck(&[randn(&[1, 1, 2, 2], s(16))], seed, |t, v| {
            t.scale(v[0], -1.3)
        }),
    ));
    let pair = [randn(&[1, 2, 3, 3], s(17)), randn(&[1, 2, 3, 3], s(18))];
    out.push(("add", gradcheck(&pair, seed, |t, v| t.add(v[0], v[1]))));
    out.push(("sub", gradcheck(&pair, seed, |t, v| t.sub(v[0], v[1]))));
    out.push(("hadamard", gradcheck(&pair, seed, |t, v| t.mul(v[0], v[1]))));
    out.push((
        "mul_mask",
        gradcheck(
            &[randn(&[2, 3, 2, 2], s(19)), randn(&[2, 1, 2, 2], s(20))],
            seed,
            |t, v| t.mul_mask(v[0], v[1]),
        ),
    ));
    out.push((
        "concat_channels",
        gradcheck(
            &[randn(&[1, 2, 2, 2], s(21)), randn(&[1, 3, 2, 2], s(22))],
            seed,
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
    ));
    out.push((
        "slice_channels",
        gradcheck(&[randn(&[2, 4, 2, 2], s(23))], seed, |t, v| {
            t.slice_channels(v[0], 1, 2)
        }),
    ));
    out.push((
        "sum",
        gradcheck(&[randn(&[1, 2, 2, 2], s(24))], seed, |t, v| t.sum(v[0])),
    ));
    out.push((
        "mean",
        gradcheck(&[randn(&[1, 2, 2, 2], s(25))], seed, |t, v| t.mean(v[0])),
    ));
    let w = randn(&[2, 2, 3, 3], s(26));
    let (m, sd) = weight_stats(&w).unwrap();
    out.push((
        "modulate",
        gradcheck(
            &[randn(&[2, 2], s(27)), randn(&[2, 2], s(28))],
            seed,
            |t, v| t.modulate(&w, &m, &sd, v[0], v[1]),
        ),
    ));
    out
}

/// Finite-difference check of the generator loss with respect to every
/// trainable parameter of a continual step on a 16x16 instance.
pub fn end_to_end_gradcheck(seed: u64) -> f64 {
    use csg0_core::labelspace::{class_frequencies, one_hot};
    use csg0_core::losses::{generator_loss, generator_loss_value};
    use csg0_core::netblocks::DiscriminatorModel;

    let reg = tiny_registry();
    let mut model = GeneratorModel::new(tiny_gen_config(16, 16), reg, seed).unwrap();
    model.init_continual(1).unwrap();
    jitter(model.trainable_section_mut(), 0.1, seed ^ 0x77);
    let disc = DiscriminatorModel::new(tiny_disc_config(), 6, seed ^ 0x99).unwrap();
    let maps = vec![
        random_map(16, 16, 5, 4, seed),
        random_map(16, 16, 5, 4, seed + 1),
    ];
    let mut r = rng(seed ^ 0x55);
    let z: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..2)
                .map(|_| r.sample(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    let alpha = class_frequencies(maps.iter(), 5).unwrap();
    let onehot = Tensor::stack_batch(
        &maps
            .iter()
            .map(|m| one_hot(m, 5).unwrap())
            .collect::<Vec<_>>(),
    )
    .unwrap();

    let mut tape = Tape::new();
    let (fake, binder) = forward_with(&model, &mut tape, &z, &maps, 1);
    let mut frozen = Binder::new(false);
    let d = disc.forward(&mut tape, &mut frozen, fake).unwrap();
    let l = generator_loss(&mut tape, d, &onehot, &alpha).unwrap();
    tape.backward(l).unwrap();
    let mut grads = model.trainable_section().clone();
    grads.zero_grads();
    binder.collect_grads(&tape, &mut grads);

    let loss_of = |m: &GeneratorModel| -> f64 {
        let img = m.generate_batch(&z, &maps, 1).unwrap();
        generator_loss_value(&disc.logits(&img).unwrap(), &onehot, &alpha).unwrap()
    };
    let names: Vec<String> = grads.iter().map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = grads.get(&name).unwrap().tensor.numel();
        let analytic = grads
            .get(&name)
            .unwrap()
            .tensor
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; n]);
        for j in 0..n {
            let mut plus = model.clone();
            plus.trainable_section_mut()
                .get_mut(&name)
                .unwrap()
                .tensor
                .data_mut()[j] += E2E_FD_STEP;
            let mut minus = model.clone();
            minus
                .trainable_section_mut()
                .get_mut(&name)
                .unwrap()
                .tensor
                .data_mut()[j] -= E2E_FD_STEP;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * E2E_FD_STEP);
            if std::env::var("GC_DEBUG").is_ok() && rel_err(analytic[j], num) > 1e-4 {
                eprintln!("{name}[{j}] analytic {} numeric {num}", analytic[j]);
            }
            worst = worst.max(rel_err(analytic[j], num));
        }
    }
    worst
}
