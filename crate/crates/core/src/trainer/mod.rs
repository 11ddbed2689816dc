//! Pretraining, continual steps, delta checkpoints and the zero-forgetting verifier.

pub mod checkpoint;
pub mod optim;
pub mod verify;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::labelspace::{class_frequencies, one_hot, LabelRegistry, SemanticMap};
use crate::losses::{
    consistency_from_logits, discriminator_loss, generator_loss, labelmix, sample_labelmix_mask,
    LAMBDA_LM,
};
use crate::netblocks::{DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel};
use crate::params::Binder;
use crate::tensor::Tensor;
use crate::toyscenes::Scene;

pub use checkpoint::{load_model, save_model, Checkpoint, Section};
pub use optim::{AdamConfig, OptimState};
pub use verify::{random_probes, verify_zero_forgetting, Probe, ProbeResult, VerifyReport};

const DISC_SEED_SALT: u64 = 0xD15C_0000;

/// Budget and seeds of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub seed: u64,
    /// Train on the first `k` scenes only.
    #[serde(default)]
    pub subset_size: Option<usize>,
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 2,
            lr: default_lr(),
            seed: 0,
            subset_size: None,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if dataset_len == 0 {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate {} is not positive",
                self.lr
            )));
        }
        match self.subset_size {
            Some(0) => Err(Error::Validation("subset_size must be >= 1".into())),
            Some(k) if k > dataset_len => Err(Error::Validation(format!(
                "subset_size {k} exceeds dataset size {dataset_len}"
            ))),
            _ => Ok(()),
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_lm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GeneratorModel,
    pub log: Vec<LogRecord>,
}

/// Called after every iteration with the 1-based iteration index.
pub type IterHook<'a> = dyn FnMut(usize, &GeneratorModel) -> Result<()> + 'a;

fn no_hook(_: usize, _: &GeneratorModel) -> Result<()> {
    Ok(())
}

/// Trains a fresh base model on the first domain of `registry`.
pub fn pretrain(
    gen: GeneratorConfig,
    disc: &DiscriminatorConfig,
    registry: LabelRegistry,
    dataset: &[Scene],
    task: &TaskConfig,
    hook: Option<&mut IterHook<'_>>,
) -> Result<TrainOutcome> {
    task.validate(dataset.len())?;
    let model = GeneratorModel::new(gen, registry, task.seed)?;
    train(model, 0, disc, dataset, task, hook)
}

/// Adds and trains the delta for `step`; everything else stays frozen.
pub fn continue_domain(
    mut model: GeneratorModel,
    step: usize,
    disc: &DiscriminatorConfig,
    dataset: &[Scene],
    task: &TaskConfig,
    hook: Option<&mut IterHook<'_>>,
) -> Result<TrainOutcome> {
    task.validate(dataset.len())?;
    if step != model.latest_step() + 1 {
        return Err(Error::Validation(format!(
            "checkpoint is trained through step {}, so the next step is {}, not {step}",
            model.latest_step(),
            model.latest_step() + 1
        )));
    }
    model.init_continual(step)?;
    train(model, step, disc, dataset, task, hook)
}

fn sample_noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn train(
    mut model: GeneratorModel,
    step: usize,
    disc_cfg: &DiscriminatorConfig,
    dataset: &[Scene],
    task: &TaskConfig,
    hook: Option<&mut IterHook<'_>>,
) -> Result<TrainOutcome> {
    let mut default_hook = no_hook;
    let hook: &mut IterHook<'_> = match hook {
        Some(h) => h,
        None => &mut default_hook,
    };
    let data = &dataset[..task.subset_size.unwrap_or(dataset.len())];
    let cfg = model.config().clone();
    let classes = model.registry().total_classes(step)?;
    for sc in data {
        if (sc.mask.height, sc.mask.width) != (cfg.height, cfg.width)
            || sc.image.shape() != [1, 3, cfg.height, cfg.width]
        {
            return Err(Error::Validation(format!(
                "scene {} is not {}x{}",
                sc.seed, cfg.height, cfg.width
            )));
        }
        model.registry().validate_map(&sc.mask, step)?;
    }
    let alpha = class_frequencies(data.iter().map(|s| &s.mask), classes)?;
    let onehots: Vec<Tensor> = data
        .iter()
        .map(|s| one_hot(&s.mask, classes))
        .collect::<Result<_>>()?;

    let mut disc =
        DiscriminatorModel::new(disc_cfg.clone(), classes + 1, task.seed ^ DISC_SEED_SALT)?;
    let adam = AdamConfig {
        lr: task.lr,
        ..AdamConfig::default()
    };
    let mut opt_g = OptimState::new(adam, model.trainable_section());
    let mut opt_d = OptimState::new(adam, disc.params());
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut log = Vec::with_capacity(task.iterations);

    for iter in 1..=task.iterations {
        let idx: Vec<usize> = (0..task.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let maps: Vec<SemanticMap> = idx.iter().map(|&i| data[i].mask.clone()).collect();
        let real = Tensor::stack_batch(
            &idx.iter()
                .map(|&i| data[i].image.clone())
                .collect::<Vec<_>>(),
        )?;
        let onehot =
            Tensor::stack_batch(&idx.iter().map(|&i| onehots[i].clone()).collect::<Vec<_>>())?;
        let z: Vec<Vec<f64>> = idx
            .iter()
            .map(|_| sample_noise(&mut rng, cfg.z_dim))
            .collect();
        let mix_masks: Vec<Tensor> = maps
            .iter()
            .map(|m| sample_labelmix_mask(m, rng.gen()).mask)
            .collect();
        let mix_mask = Tensor::stack_batch(&mix_masks)?;

        let mut gtape = Tape::new();
        let mut gbind = Binder::new(true);
        let fake_var = model.forward(&mut gtape, &mut gbind, &z, &maps, step)?;
        let fake = gtape.value(fake_var).clone();

        // Discriminator step on the detached fakes.
        let mut dtape = Tape::new();
        let mut dbind = Binder::new(true);
        let xr = dtape.constant(real.clone());
        let xf = dtape.constant(fake.clone());
        let xm = dtape.constant(labelmix(&real, &fake, &mix_mask)?);
        let dr = disc.forward(&mut dtape, &mut dbind, xr)?;
        let df = disc.forward(&mut dtape, &mut dbind, xf)?;
        let dm = disc.forward(&mut dtape, &mut dbind, xm)?;
        let ld = discriminator_loss(&mut dtape, dr, df, &onehot, &alpha)?;
        let lm = consistency_from_logits(&mut dtape, dm, dr, df, &mix_mask)?;
        let lm_scaled = dtape.scale(lm, LAMBDA_LM)?;
        let total_d = dtape.add(ld, lm_scaled)?;
        dtape.backward(total_d)?;
        dbind.collect_grads(&dtape, disc.params_mut());
        opt_d.step(disc.params_mut())?;
        let loss_d = dtape.value(ld).item()?;
        let loss_lm = dtape.value(lm).item()?;
        drop(dtape);

        // Generator step through the updated, frozen discriminator.
        let mut frozen = Binder::new(false);
        let dg = disc.forward(&mut gtape, &mut frozen, fake_var)?;
        let lg = generator_loss(&mut gtape, dg, &onehot, &alpha)?;
        gtape.backward(lg)?;
        gbind.collect_grads(&gtape, model.trainable_section_mut());
        opt_g.step(model.trainable_section_mut())?;
        let loss_g = gtape.value(lg).item()?;

        log.push(LogRecord {
            iter,
            loss_g,
            loss_d,
            loss_lm,
        });
        hook(iter, &model)?;
    }
    Ok(TrainOutcome { model, log })
}

/// JSON-lines rendering of a training log.
pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
