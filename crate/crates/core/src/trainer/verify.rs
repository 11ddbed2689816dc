use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::labelspace::SemanticMap;
use crate::netblocks::GeneratorModel;

const PROBE_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub z: Vec<f64>,
    pub map: SemanticMap,
    pub domain: String,
}

/// Blocky random maps over each domain's own classes, cycling through the
/// domains the model has been trained on.
pub fn random_probes(model: &GeneratorModel, n: usize, seed: u64) -> Result<Vec<Probe>> {
    let reg = model.registry();
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let step = i % (model.latest_step() + 1);
        let domain = reg.step(step)?.domain.clone();
        let ids: Vec<u16> = reg
            .sampleable_ids(&domain)
            .into_iter()
            .map(|c| c as u16)
            .collect();
        if ids.is_empty() {
            return Err(Error::Validation(format!(
                "domain `{domain}` has no sampleable classes"
            )));
        }
        let mut map = SemanticMap::filled(cfg.height, cfg.width, ids[0]);
        for bi in (0..cfg.height).step_by(PROBE_BLOCK) {
            for bj in (0..cfg.width).step_by(PROBE_BLOCK) {
                let c = ids[rng.gen_range(0..ids.len())];
                for y in bi..(bi + PROBE_BLOCK).min(cfg.height) {
                    for x in bj..(bj + PROBE_BLOCK).min(cfg.width) {
                        map.set(y, x, c);
                    }
                }
            }
        }
        let z = (0..cfg.z_dim).map(|_| rng.sample(StandardNormal)).collect();
        out.push(Probe { z, map, domain });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub domain: String,
    pub max_abs_diff: f64,
    pub bit_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DigestMismatch {
    pub section: String,
    pub before: u64,
    /// `None` when the section is missing afterwards.
    pub after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub probes: Vec<ProbeResult>,
    pub digest_mismatches: Vec<DigestMismatch>,
    pub pass: bool,
}

/// Compares every section of `before` with `after` and regenerates each
/// probe from both checkpoints.
pub fn verify_zero_forgetting(
    before: &Checkpoint,
    after: &Checkpoint,
    probes: &[Probe],
) -> Result<VerifyReport> {
    let mb = before.to_model()?;
    let ma = after.to_model()?;
    let mut digest_mismatches = Vec::new();
    for s in &before.sections {
        let other = after
            .sections
            .iter()
            .find(|o| o.name == s.name)
            .map(|o| o.digest);
        if other != Some(s.digest) {
            digest_mismatches.push(DigestMismatch {
                section: s.name.clone(),
                before: s.digest,
                after: other,
            });
        }
    }
    let mut results = Vec::with_capacity(probes.len());
    for p in probes {
        let img_b = mb.generate(&p.z, &p.map, &p.domain).map_err(|e| match e {
            Error::Lookup(m) => {
                Error::Validation(format!("probe references a missing domain: {m}"))
            }
            other => other,
        })?;
        let (max_abs_diff, bit_identical) = match ma.generate(&p.z, &p.map, &p.domain) {
            Ok(img_a) => (img_b.max_abs_diff(&img_a)?, img_b.bit_eq(&img_a)),
            Err(Error::Lookup(_)) => (f64::INFINITY, false),
            Err(e) => return Err(e),
        };
        results.push(ProbeResult {
            domain: p.domain.clone(),
            max_abs_diff,
            bit_identical,
        });
    }
    let pass = digest_mismatches.is_empty() && results.iter().all(|r| r.bit_identical);
    Ok(VerifyReport {
        probes: results,
        digest_mismatches,
        pass,
    })
}
