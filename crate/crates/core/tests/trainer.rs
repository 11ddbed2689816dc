mod common;

use common::tiny_disc_config;
use csg0_core::autodiff::Tape;
use csg0_core::netblocks::{GeneratorConfig, GeneratorModel};
use csg0_core::params::{Binder, DomainTag, ParamSet, Parameter};
use csg0_core::toyscenes::{make_dataset, toy_registry, DomainSpec};
use csg0_core::trainer::{
    continue_domain, log_to_jsonl, pretrain, random_probes, verify_zero_forgetting, AdamConfig,
    Checkpoint, LogRecord, OptimState, TaskConfig,
};
use csg0_core::{Error, Scene, Tensor};

fn small_gen() -> GeneratorConfig {
    GeneratorConfig {
        channels: vec![8, 4],
        z_dim: 2,
        hidden: 4,
        height: 32,
        width: 48,
    }
}

fn data(domain: &str, n: usize) -> Vec<Scene> {
    make_dataset(&DomainSpec::builtin(domain).unwrap(), n, 0).unwrap()
}

fn task(iterations: usize, seed: u64) -> TaskConfig {
    TaskConfig {
        iterations,
        batch_size: 1,
        seed,
        ..TaskConfig::default()
    }
}

fn base_model(iters: usize) -> GeneratorModel {
    pretrain(
        small_gen(),
        &tiny_disc_config(),
        toy_registry(),
        &data("domain_a", 8),
        &task(iters, 1),
        None,
    )
    .unwrap()
    .model
}

/// Puts `g` into the gradient slot of parameter `name` via a tape.
fn set_grad(set: &mut ParamSet, name: &str, g: &[f64]) {
    let mut tape = Tape::new();
    let mut b = Binder::new(true);
    let x = b.bind_name(&mut tape, set, name).unwrap();
    let shape = tape.value(x).shape().to_vec();
    let c = tape.constant(Tensor::new(&shape, g.to_vec()).unwrap());
    let p = tape.mul(x, c).unwrap();
    let l = tape.sum(p).unwrap();
    tape.backward(l).unwrap();
    b.collect_grads(&tape, set);
}

fn one_param(name: &str, values: Vec<f64>) -> ParamSet {
    let mut s = ParamSet::new();
    let n = values.len();
    s.insert(Parameter::new(
        name,
        Tensor::new(&[n], values).unwrap(),
        DomainTag::Base,
    ));
    s
}

#[test]
fn adam_matches_hand_computation() {
    let mut set = one_param("x", vec![1.0, -2.0]);
    let mut opt = OptimState::new(AdamConfig::default(), &set);
    set_grad(&mut set, "x", &[0.5, -0.25]);
    opt.step(&mut set).unwrap();
    // t=1, beta1=0: m = g, v_hat = g^2.
    let x1 = [
        1.0 - 2e-4 * 0.5 / (0.5 + 1e-8),
        -2.0 + 2e-4 * 0.25 / (0.25 + 1e-8),
    ];
    assert_eq!(set.get("x").unwrap().tensor.data(), &x1);
    set_grad(&mut set, "x", &[-0.25, 0.0]);
    opt.step(&mut set).unwrap();
    let v0 = (0.999 * 0.001 * 0.25 + 0.001 * 0.0625) / (1.0 - 0.999f64 * 0.999);
    let v1 = (0.999 * 0.001 * 0.0625) / (1.0 - 0.999f64 * 0.999);
    let x2 = [
        x1[0] + 2e-4 * 0.25 / (v0.sqrt() + 1e-8),
        x1[1] - 2e-4 * 0.0 / (v1.sqrt() + 1e-8),
    ];
    let got = set.get("x").unwrap().tensor.data();
    assert!(
        (got[0] - x2[0]).abs() < 1e-15 && (got[1] - x2[1]).abs() < 1e-15,
        "{got:?} vs {x2:?}"
    );
    assert!(set.get("x").unwrap().tensor.grad().is_none());
}

#[test]
fn frozen_parameters_are_untouched_by_the_optimizer() {
    let mut set = one_param("a", vec![1.0, 2.0]);
    set.insert(Parameter::new(
        "b",
        Tensor::new(&[1], vec![3.0]).unwrap(),
        DomainTag::Base,
    ));
    set.get_mut("b").unwrap().trainable = false;
    let mut opt = OptimState::new(AdamConfig::default(), &set);
    assert!(opt.tracks("a") && !opt.tracks("b"));
    let before = set.get("b").unwrap().tensor.to_le_bytes();
    for _ in 0..5 {
        set_grad(&mut set, "a", &[1.0, 1.0]);
        opt.step(&mut set).unwrap();
    }
    assert_eq!(set.get("b").unwrap().tensor.to_le_bytes(), before);
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut set = one_param("w", vec![1.0]);
    let mut opt = OptimState::new(AdamConfig::default(), &set);
    set_grad(&mut set, "w", &[f64::NAN]);
    match opt.step(&mut set) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
        other => panic!("expected NonFiniteGradient, got {other:?}"),
    }
    assert_eq!(set.get("w").unwrap().tensor.data(), &[1.0]);
}

#[test]
fn training_is_deterministic() {
    let a = Checkpoint::from_model(&base_model(3)).unwrap().to_bytes();
    let b = Checkpoint::from_model(&base_model(3)).unwrap().to_bytes();
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_return_the_initialized_delta() {
    let base = base_model(2);
    let out = continue_domain(
        base.clone(),
        1,
        &tiny_disc_config(),
        &data("domain_b", 4),
        &task(0, 2),
        None,
    )
    .unwrap();
    let mut expected = base;
    expected.init_continual(1).unwrap();
    assert_eq!(out.model, expected);
    assert!(out.log.is_empty());
}

#[test]
fn extension_of_a_trained_base_is_exact() {
    let base = base_model(4);
    let mut ext = base.clone();
    ext.init_continual(1).unwrap();
    let spec = DomainSpec::builtin("domain_a").unwrap();
    for seed in 0..3 {
        let map = csg0_core::toyscenes::generate_layout(&spec, seed);
        let z = vec![vec![0.3, -1.1]];
        let a = base
            .generate_batch(&z, std::slice::from_ref(&map), 0)
            .unwrap();
        let b = ext
            .generate_batch(&z, std::slice::from_ref(&map), 1)
            .unwrap();
        assert!(a.bit_eq(&b), "seed {seed}");
    }
}

#[test]
fn continual_training_freezes_everything_else() {
    let base = base_model(2);
    let base_bytes = Checkpoint::from_model(&base).unwrap();
    let mut init = base.clone();
    init.init_continual(1).unwrap();
    let out = continue_domain(
        base,
        1,
        &tiny_disc_config(),
        &data("domain_b", 4),
        &task(5, 2),
        None,
    )
    .unwrap();
    let after = Checkpoint::from_model(&out.model).unwrap();
    for name in ["CONFIG", "REGISTRY", "BASE"] {
        assert_eq!(
            after.section(name).unwrap(),
            base_bytes.section(name).unwrap()
        );
    }
    assert_ne!(out.model.deltas()[0], init.deltas()[0]);
    assert_eq!(out.log.len(), 5);
    assert!(out
        .log
        .iter()
        .all(|r| r.loss_g.is_finite() && r.loss_d.is_finite() && r.loss_lm.is_finite()));
}

#[test]
fn step_mismatch_is_rejected() {
    let base = base_model(1);
    let r = continue_domain(
        base,
        2,
        &tiny_disc_config(),
        &data("domain_c", 4),
        &task(1, 0),
        None,
    );
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn new_class_masks_are_rejected_at_the_base_step() {
    let r = pretrain(
        small_gen(),
        &tiny_disc_config(),
        toy_registry(),
        &data("domain_b", 8),
        &task(1, 0),
        None,
    );
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn task_validation() {
    let d = data("domain_a", 3);
    let bad = |t: TaskConfig| {
        pretrain(
            small_gen(),
            &tiny_disc_config(),
            toy_registry(),
            &d,
            &t,
            None,
        )
        .is_err()
    };
    assert!(bad(TaskConfig {
        subset_size: Some(4),
        ..task(1, 0)
    }));
    assert!(bad(TaskConfig {
        subset_size: Some(0),
        ..task(1, 0)
    }));
    assert!(bad(TaskConfig {
        batch_size: 0,
        ..task(1, 0)
    }));
    assert!(bad(TaskConfig {
        lr: -1.0,
        ..task(1, 0)
    }));
    assert!(pretrain(
        small_gen(),
        &tiny_disc_config(),
        toy_registry(),
        &[],
        &task(1, 0),
        None
    )
    .is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = continue_domain(
        base_model(2),
        1,
        &tiny_disc_config(),
        &data("domain_b", 4),
        &task(2, 0),
        None,
    )
    .unwrap()
    .model;
    let p1 = dir.path().join("a.csg0");
    let p2 = dir.path().join("b.csg0");
    csg0_core::trainer::save_model(&model, &p1).unwrap();
    let loaded = csg0_core::trainer::load_model(&p1).unwrap();
    assert_eq!(loaded, model);
    csg0_core::trainer::save_model(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let names: Vec<String> = Checkpoint::load(&p1)
        .unwrap()
        .sections
        .iter()
        .map(|s| s.name.clone())
        .collect();
    assert_eq!(names, ["CONFIG", "REGISTRY", "BASE", "DELTA:domain_b"]);
}

#[test]
fn damaged_checkpoints_are_corrupt() {
    let bytes = Checkpoint::from_model(&base_model(0)).unwrap().to_bytes();
    let mut flipped = bytes.clone();
    let at = bytes.len() - 20;
    flipped[at] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Corrupt(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Corrupt(_))
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic),
        Err(Error::Corrupt(_))
    ));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&version),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn verifier_passes_after_a_continual_step() {
    let base = base_model(2);
    let before = Checkpoint::from_model(&base).unwrap();
    let out = continue_domain(
        base.clone(),
        1,
        &tiny_disc_config(),
        &data("domain_b", 4),
        &task(5, 3),
        None,
    )
    .unwrap();
    let after = Checkpoint::from_model(&out.model).unwrap();
    let probes = random_probes(&base, 10, 0).unwrap();
    let report = verify_zero_forgetting(&before, &after, &probes).unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.probes.iter().all(|p| p.max_abs_diff == 0.0));
}

#[test]
fn verifier_fails_on_a_perturbed_base_weight() {
    let base = base_model(2);
    let before = Checkpoint::from_model(&base).unwrap();
    let mut bad = base.clone();
    bad.base_mut()
        .get_mut("out.weight")
        .unwrap()
        .tensor
        .data_mut()[0] += 1e-9;
    let after = Checkpoint::from_model(&bad).unwrap();
    let report =
        verify_zero_forgetting(&before, &after, &random_probes(&base, 4, 0).unwrap()).unwrap();
    assert!(!report.pass);
    assert_eq!(report.digest_mismatches.len(), 1);
    assert_eq!(report.digest_mismatches[0].section, "BASE");
    assert!(report.probes.iter().any(|p| !p.bit_identical));
}

#[test]
fn verifier_rejects_probes_for_untrained_domains() {
    let base = base_model(0);
    let mut ext = base.clone();
    ext.init_continual(1).unwrap();
    let probes = random_probes(&ext, 2, 0).unwrap();
    let ck = Checkpoint::from_model(&base).unwrap();
    assert!(matches!(
        verify_zero_forgetting(&ck, &ck, &probes),
        Err(Error::Validation(_))
    ));
}

#[test]
fn log_lines_are_json() {
    let log = vec![
        LogRecord {
            iter: 1,
            loss_g: 1.5,
            loss_d: 2.0,
            loss_lm: 0.25,
        },
        LogRecord {
            iter: 2,
            loss_g: 1.0,
            loss_d: 1.5,
            loss_lm: 0.0,
        },
    ];
    let text = log_to_jsonl(&log).unwrap();
    let back: Vec<LogRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, log);
}
