//! Run configuration: a JSON document describing the domain stream, model
//! sizes and per-step training budgets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csg0_core::netblocks::{DiscriminatorConfig, GeneratorConfig};
use csg0_core::toyscenes::{make_dataset, toy_registry, DomainSpec, Scene};
use csg0_core::{LabelRegistry, TaskConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mapping CSV; the shipped toy stream when absent.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    /// Domain order; must match the registry's stream prefix.
    pub stream: Vec<String>,
    /// Domain spec JSON per domain; built-in toy specs otherwise.
    #[serde(default)]
    pub domain_specs: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    #[serde(default)]
    pub dataset_seed: u64,
    /// One task per stream entry; missing entries use defaults.
    #[serde(default)]
    pub steps: Vec<TaskConfig>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_dataset_size() -> usize {
    300
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registry: None,
            stream: vec!["domain_a".into(), "domain_b".into(), "domain_c".into()],
            domain_specs: BTreeMap::new(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            dataset_size: default_dataset_size(),
            dataset_seed: 0,
            steps: Vec::new(),
            out_dir: default_out_dir(),
        }
    }
}

/// Task-level flags; each one overrides the config value when given.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct TaskOverrides {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the first K scenes only (low-data regime).
    #[arg(long)]
    pub subset_size: Option<usize>,
}

impl RunConfig {
    /// Reads and validates a config; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(r) = cfg.registry.as_mut() {
            rebase(r);
        }
        for p in cfg.domain_specs.values_mut() {
            rebase(p);
        }
        rebase(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stream.is_empty() {
            bail!("config `stream` must name at least one domain");
        }
        if self.dataset_size == 0 {
            bail!("config `dataset_size` must be >= 1");
        }
        if self.steps.len() > self.stream.len() {
            bail!(
                "{} step configs for a stream of {} domains",
                self.steps.len(),
                self.stream.len()
            );
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        for d in self.domain_specs.keys() {
            if !self.stream.contains(d) {
                bail!("domain_specs names `{d}`, which is not in the stream");
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<LabelRegistry> {
        let reg = match &self.registry {
            Some(p) => LabelRegistry::from_path(p)?,
            None => toy_registry(),
        };
        for (k, d) in self.stream.iter().enumerate() {
            let found = reg.step(k).map(|s| s.domain.clone()).ok();
            if found.as_deref() != Some(d.as_str()) {
                bail!("stream entry {k} is `{d}` but the registry has {found:?} at that step");
            }
        }
        Ok(reg)
    }

    pub fn domain_spec(&self, domain: &str) -> Result<DomainSpec> {
        Ok(match self.domain_specs.get(domain) {
            Some(p) => DomainSpec::from_path(p)?,
            None => DomainSpec::builtin(domain)?,
        })
    }

    pub fn dataset(&self, domain: &str, registry: &LabelRegistry) -> Result<Vec<Scene>> {
        let spec = self.domain_spec(domain)?;
        spec.check_registry(registry)?;
        if (spec.height, spec.width) != (self.generator.height, self.generator.width) {
            bail!(
                "domain `{domain}` renders {}x{} scenes but the generator is {}x{}",
                spec.height,
                spec.width,
                self.generator.height,
                self.generator.width
            );
        }
        Ok(make_dataset(&spec, self.dataset_size, self.dataset_seed)?)
    }

    pub fn task(&self, step: usize, o: &TaskOverrides) -> TaskConfig {
        let mut t = self.steps.get(step).cloned().unwrap_or_default();
        if let Some(v) = o.iterations {
            t.iterations = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if o.subset_size.is_some() {
            t.subset_size = o.subset_size;
        }
        t
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.out_dir.join(format!("ckpt_step{step}.csg0"))
    }

    pub fn log_path(&self, step: usize) -> PathBuf {
        self.out_dir.join(format!("train_step{step}.jsonl"))
    }
}
