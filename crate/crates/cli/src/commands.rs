use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use csg0_core::metrics::{
    gan_test, generate_images, proxy_fid, summarize, write_metrics_csv, FeatureExtractor,
    MetricRow, Segmenter, SegmenterConfig,
};
use csg0_core::netblocks::GeneratorModel;
use csg0_core::pnm;
use csg0_core::toyscenes::{generate_layout, make_dataset, DomainSpec};
use csg0_core::trainer::{
    continue_domain, log_to_jsonl, pretrain as train_base, random_probes, save_model,
    verify_zero_forgetting, Checkpoint, TrainOutcome,
};
use csg0_core::{Error, SemanticMap};

use crate::config::{RunConfig, TaskOverrides};

/// Seed offset separating held-out evaluation scenes from training scenes.
const HELD_OUT_OFFSET: u64 = 1_000_000;

fn finish_step(cfg: &RunConfig, step: usize, out: &TrainOutcome) -> Result<Checkpoint> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let ckpt_path = cfg.checkpoint_path(step);
    let ck = save_model(&out.model, &ckpt_path)?;
    let log_path = cfg.log_path(step);
    fs::write(&log_path, log_to_jsonl(&out.log)?)
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!("checkpoint {}", ckpt_path.display());
    println!("log        {}", log_path.display());
    for (name, digest) in ck.digests() {
        println!("  {name:<24} {digest:016x}");
    }
    let (new, total) = out.model.count_params(step)?;
    println!(
        "step {step} ({}): new params {new} / total params {total} ({:.1}%)",
        out.model.registry().step(step)?.domain,
        100.0 * new as f64 / total as f64
    );
    Ok(ck)
}

fn load_config(path: &Path, out_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    Ok(cfg)
}

pub fn pretrain(config: &Path, out_dir: Option<PathBuf>, o: &TaskOverrides) -> Result<ExitCode> {
    let cfg = load_config(config, out_dir)?;
    let registry = cfg.registry()?;
    let data = cfg.dataset(&cfg.stream[0], &registry)?;
    let task = cfg.task(0, o);
    let out = train_base(
        cfg.generator.clone(),
        &cfg.discriminator,
        registry,
        &data,
        &task,
        None,
    )?;
    finish_step(&cfg, 0, &out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn continue_step(
    config: &Path,
    step: usize,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    o: &TaskOverrides,
) -> Result<ExitCode> {
    let cfg = load_config(config, out_dir)?;
    if step == 0 || step >= cfg.stream.len() {
        bail!(Error::Validation(format!(
            "step must be in 1..{} for this stream",
            cfg.stream.len()
        )));
    }
    let registry = cfg.registry()?;
    let input = checkpoint.unwrap_or_else(|| cfg.checkpoint_path(step - 1));
    let model = Checkpoint::load(&input)?.to_model()?;
    if model.registry() != &registry {
        bail!(Error::Validation(format!(
            "{} was trained with a different registry",
            input.display()
        )));
    }
    let data = cfg.dataset(&cfg.stream[step], &registry)?;
    let task = cfg.task(step, o);
    let out = continue_domain(model, step, &cfg.discriminator, &data, &task, None)?;
    finish_step(&cfg, step, &out)?;
    Ok(ExitCode::SUCCESS)
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub domain: String,
    pub mask_domain: Option<String>,
    pub masks: Option<PathBuf>,
    pub mask_spec: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn read_mask_dir(dir: &Path, n: usize) -> Result<Vec<SemanticMap>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::Validation(format!(
            "no .pgm masks in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .take(n)
        .map(|p| Ok(pnm::read_pgm(p)?))
        .collect()
}

pub fn sample(a: &SampleArgs) -> Result<ExitCode> {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    model.step_of(&a.domain)?;
    let masks = match &a.masks {
        Some(dir) => read_mask_dir(dir, a.n)?,
        None => {
            let spec = match (&a.mask_spec, &a.mask_domain) {
                (Some(p), _) => DomainSpec::from_path(p)?,
                (None, Some(d)) => DomainSpec::builtin(d)?,
                (None, None) => DomainSpec::builtin(&a.domain)?,
            };
            (0..a.n as u64)
                .map(|i| generate_layout(&spec, a.seed + i))
                .collect()
        }
    };
    let images = generate_images(&model, &a.domain, &masks, a.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (i, (img, m)) in images.iter().zip(&masks).enumerate() {
        pnm::write_ppm(a.out_dir.join(format!("sample_{i:03}.ppm")), img)?;
        pnm::write_pgm(a.out_dir.join(format!("mask_{i:03}.pgm")), m)?;
    }
    println!(
        "wrote {} samples for {} to {}",
        images.len(),
        a.domain,
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn verify(before: &Path, after: &Path, n_probes: usize, seed: u64) -> Result<ExitCode> {
    let ck_before = Checkpoint::load(before)?;
    let ck_after = match Checkpoint::load(after) {
        Ok(c) => c,
        Err(e @ Error::Corrupt(_)) => {
            println!("FAIL {}: {e}", after.display());
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    let model = ck_before.to_model()?;
    let probes = random_probes(&model, n_probes, seed)?;
    let report = verify_zero_forgetting(&ck_before, &ck_after, &probes)?;
    for (i, p) in report.probes.iter().enumerate() {
        println!(
            "probe {i:>3} {:<16} max|diff| = {:e}{}",
            p.domain,
            p.max_abs_diff,
            if p.bit_identical { "" } else { "  MISMATCH" }
        );
    }
    for m in &report.digest_mismatches {
        match m.after {
            Some(d) => println!(
                "digest {:<20} before {:016x} after {d:016x}",
                m.section, m.before
            ),
            None => println!(
                "digest {:<20} before {:016x} after <missing>",
                m.section, m.before
            ),
        }
    }
    if report.pass {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(1))
    }
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub domain: String,
    pub config: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub compare_scratch: bool,
    pub out: Option<PathBuf>,
    pub run_id: String,
    pub task: TaskOverrides,
}

fn metric_rows(
    run_id: &str,
    model: &GeneratorModel,
    step: usize,
    domain: &str,
    ctx: &EvalContext,
) -> Result<Vec<MetricRow>> {
    let fe = FeatureExtractor::new();
    let images = generate_images(model, domain, &ctx.masks, ctx.seed)?;
    let fid = proxy_fid(&summarize(&images, &fe)?, &ctx.real)?;
    let miou = gan_test(model, domain, &ctx.segmenter, &ctx.masks, ctx.seed)?;
    let (new, total) = model.count_params(model.step_of(domain)?)?;
    let row = |metric: &str, value: f64| MetricRow {
        run_id: run_id.to_string(),
        step,
        metric: metric.to_string(),
        value,
    };
    Ok(vec![
        row("proxy_fid", fid),
        row("gan_test_miou", miou),
        row("new_params", new as f64),
        row("total_params", total as f64),
    ])
}

struct EvalContext {
    masks: Vec<SemanticMap>,
    real: csg0_core::metrics::GaussianSummary,
    segmenter: Segmenter,
    seed: u64,
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let model = Checkpoint::load(&a.checkpoint)?.to_model()?;
    let step = model.step_of(&a.domain)?;
    let cfg = match &a.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    if a.n < 2 {
        bail!(Error::Validation("--n must be at least 2".into()));
    }
    let spec = match &cfg {
        Some(c) => c.domain_spec(&a.domain)?,
        None => DomainSpec::builtin(&a.domain)?,
    };
    spec.check_registry(model.registry())?;
    let classes = model.registry().total_classes(step)?;
    let held = make_dataset(&spec, a.n, HELD_OUT_OFFSET + a.seed)?;
    let fe = FeatureExtractor::new();
    let real = summarize(
        &held.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
        &fe,
    )?;
    let (train_size, train_seed) = cfg
        .as_ref()
        .map_or((300, 0), |c| (c.dataset_size, c.dataset_seed));
    let train = make_dataset(&spec, train_size, train_seed)?;
    let segmenter = Segmenter::train(
        &train,
        classes,
        &SegmenterConfig {
            seed: a.seed,
            ..SegmenterConfig::default()
        },
    )?;
    let ctx = EvalContext {
        masks: held.iter().map(|s| s.mask.clone()).collect(),
        real,
        segmenter,
        seed: a.seed,
    };
    let mut rows = metric_rows(&a.run_id, &model, step, &a.domain, &ctx)?;

    if a.compare_scratch {
        let Some(cfg) = &cfg else {
            bail!(Error::Validation(
                "--compare scratch needs --config for the training budget".into()
            ));
        };
        let registry = model.registry().single_domain(&a.domain)?;
        let data = cfg.dataset(&a.domain, model.registry())?;
        let task = cfg.task(step, &a.task);
        let scratch = train_base(
            cfg.generator.clone(),
            &cfg.discriminator,
            registry,
            &data,
            &task,
            None,
        )?;
        rows.extend(metric_rows(
            "scratch",
            &scratch.model,
            step,
            &a.domain,
            &ctx,
        )?);
    }

    match &a.out {
        Some(p) => {
            write_metrics_csv(p, &rows)?;
            println!("wrote {}", p.display());
        }
        None => {
            println!("run_id,step,metric,value");
            for r in &rows {
                println!("{},{},{},{}", r.run_id, r.step, r.metric, r.value);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
