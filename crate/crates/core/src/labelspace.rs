//! Continual label space: class remapping across a domain stream, one-hot
//! encoding, old/new splitting and new-class masks.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER: [&str; 4] = ["domain", "name", "orig_id", "cont_id"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub domain: String,
    pub name: String,
    /// `-1` marks a class that exists in the continual space but not in
    /// this domain's own annotation; such rows are never sampled.
    pub orig_id: i64,
    pub cont_id: usize,
}

impl ClassDef {
    pub fn sampleable(&self) -> bool {
        self.orig_id >= 0
    }
}

/// Per-step label accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepInfo {
    pub domain: String,
    /// Classes known before this step.
    pub c_old: usize,
    /// Classes introduced at this step (the full class set at step 0).
    pub c_new: usize,
    pub new_ids: BTreeSet<usize>,
}

impl StepInfo {
    pub fn total(&self) -> usize {
        self.c_old + self.c_new
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRegistry {
    domains: Vec<String>,
    defs: Vec<ClassDef>,
    steps: Vec<StepInfo>,
    lookup: HashMap<(usize, i64), usize>,
}

impl LabelRegistry {
    /// Parses a mapping table (`domain,name,orig_id,cont_id`, rows grouped
    /// by domain in stream order).
    pub fn load_mapping(table_text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(table_text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?;
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Parse {
                row: 1,
                msg: format!("expected header `{}`", HEADER.join(",")),
            });
        }

        let mut domains: Vec<String> = Vec::new();
        let mut defs = Vec::new();
        let mut lookup = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                row: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let row = rec.position().map_or(0, |p| p.line() as usize);
            let perr = |msg: String| Error::Parse { row, msg };
            let domain = rec[0].to_string();
            if domain.is_empty() {
                return Err(perr("empty domain".into()));
            }
            let name = rec[1].to_string();
            let orig_id: i64 = rec[2]
                .parse()
                .map_err(|_| perr(format!("bad orig_id `{}`", &rec[2])))?;
            if orig_id < -1 {
                return Err(perr(format!("orig_id {orig_id} < -1")));
            }
            let cont_id: usize = rec[3]
                .parse()
                .map_err(|_| perr(format!("bad cont_id `{}`", &rec[3])))?;

            let dix = match domains.iter().position(|d| *d == domain) {
                Some(i) if i + 1 == domains.len() => i,
                Some(_) => {
                    return Err(perr(format!(
                        "rows of domain `{domain}` are not contiguous"
                    )))
                }
                None => {
                    domains.push(domain.clone());
                    domains.len() - 1
                }
            };
            if orig_id >= 0 {
                match lookup.get(&(dix, orig_id)) {
                    Some(&prev) if prev != cont_id => {
                        return Err(perr(format!(
                            "({domain}, {orig_id}) mapped to both {prev} and {cont_id}"
                        )))
                    }
                    _ => {
                        lookup.insert((dix, orig_id), cont_id);
                    }
                }
            }
            defs.push(ClassDef {
                domain,
                name,
                orig_id,
                cont_id,
            });
        }
        if domains.is_empty() {
            return Err(Error::Validation("mapping table has no rows".into()));
        }

        let mut steps = Vec::with_capacity(domains.len());
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (k, d) in domains.iter().enumerate() {
            let ids: BTreeSet<usize> = defs
                .iter()
                .filter(|c| c.domain == *d)
                .map(|c| c.cont_id)
                .collect();
            let new_ids: BTreeSet<usize> = ids.difference(&seen).copied().collect();
            let c_old = seen.len();
            let c_new = new_ids.len();
            let expected: BTreeSet<usize> = (c_old..c_old + c_new).collect();
            if new_ids != expected {
                return Err(Error::Validation(format!(
                    "step {k} ({d}): new continual ids {:?} are not the contiguous range {}..{}",
                    new_ids,
                    c_old,
                    c_old + c_new
                )));
            }
            seen.extend(new_ids.iter().copied());
            steps.push(StepInfo {
                domain: d.clone(),
                c_old,
                c_new,
                new_ids,
            });
        }
        Ok(Self {
            domains,
            defs,
            steps,
            lookup,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::load_mapping(&text)
    }

    /// Canonical CSV serialization; `load_mapping(to_csv())` reproduces `self`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for d in &self.defs {
            w.write_record([
                d.domain.as_str(),
                d.name.as_str(),
                &d.orig_id.to_string(),
                &d.cont_id.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    /// A one-step registry holding only `domain`'s rows, for training a
    /// model from scratch on that domain's full label space.
    pub fn single_domain(&self, domain: &str) -> Result<Self> {
        self.domain_index(domain)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for d in self.classes_of(domain) {
            w.write_record([
                d.domain.as_str(),
                d.name.as_str(),
                &d.orig_id.to_string(),
                &d.cont_id.to_string(),
            ])
            .expect("in-memory write");
        }
        let text = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv");
        Self::load_mapping(&text)
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn defs(&self) -> &[ClassDef] {
        &self.defs
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn domain_index(&self, domain: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Lookup(format!("unknown domain `{domain}`")))
    }

    pub fn step(&self, k: usize) -> Result<&StepInfo> {
        self.steps
            .get(k)
            .ok_or_else(|| Error::Lookup(format!("no step {k} (stream has {})", self.steps.len())))
    }

    pub fn steps(&self) -> &[StepInfo] {
        &self.steps
    }

    /// Size of the step-0 label space.
    pub fn base_classes(&self) -> usize {
        self.steps[0].c_new
    }

    /// Continual class count after step `k`.
    pub fn total_classes(&self, k: usize) -> Result<usize> {
        Ok(self.step(k)?.total())
    }

    pub fn remap(&self, domain: &str, orig_id: i64) -> Result<usize> {
        let dix = self.domain_index(domain)?;
        self.lookup.get(&(dix, orig_id)).copied().ok_or_else(|| {
            Error::Lookup(format!("({domain}, {orig_id}) is not a registered class"))
        })
    }

    pub fn classes_of<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a ClassDef> + 'a {
        self.defs.iter().filter(move |d| d.domain == domain)
    }

    /// Continual ids that may appear in masks of `domain`.
    pub fn sampleable_ids(&self, domain: &str) -> BTreeSet<usize> {
        self.classes_of(domain)
            .filter(|c| c.sampleable())
            .map(|c| c.cont_id)
            .collect()
    }

    /// Checks that every label of `map` exists in the label space at `step`.
    pub fn validate_map(&self, map: &SemanticMap, step: usize) -> Result<()> {
        let total = self.total_classes(step)?;
        if let Some(&bad) = map.labels.iter().find(|&&l| l as usize >= total) {
            return Err(Error::Validation(format!(
                "class id {bad} is not available at step {step} ({total} classes)"
            )));
        }
        Ok(())
    }
}

/// A per-pixel map of continual class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "SemanticMap::new",
                &[height, width],
                &[labels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        Self {
            height,
            width,
            labels: vec![id; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u16 {
        self.labels[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, id: u16) {
        self.labels[i * self.width + j] = id;
    }

    /// Nearest-neighbour downsampling: keeps pixel `(i*f, j*f)`.
    pub fn downsample(&self, factor: usize) -> Result<SemanticMap> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::shape(
                "SemanticMap::downsample",
                &[self.height, self.width],
                &[factor],
            ));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let labels = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i * factor, j * factor))
            .collect();
        SemanticMap::new(h, w, labels)
    }

    pub fn distinct(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().collect()
    }

    pub fn count(&self, id: u16) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }
}

/// One-hot encoding over `classes` channels: `[1, classes, H, W]`.
pub fn one_hot(map: &SemanticMap, classes: usize) -> Result<Tensor> {
    let hw = map.height * map.width;
    let mut data = vec![0.0; classes * hw];
    for (p, &l) in map.labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Validation(format!(
                "class id {l} out of range for {classes} channels"
            )));
        }
        data[l * hw + p] = 1.0;
    }
    Tensor::new(&[1, classes, map.height, map.width], data)
}

/// The one-hot tensor split at channel `C_o` plus the binary new-class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotSplit {
    pub old: Tensor,
    pub new: Tensor,
    pub new_mask: Tensor,
}

/// Splits a one-hot encoding over `c_total` channels into `[0, c_old)` and
/// `[c_old, c_total)`; `new_mask` marks pixels whose class is `>= c_old`.
pub fn split_at(map: &SemanticMap, c_old: usize, c_total: usize) -> Result<OneHotSplit> {
    if c_old > c_total {
        return Err(Error::Contract(format!("split point {c_old} > {c_total}")));
    }
    let hw = map.height * map.width;
    let c_new = c_total - c_old;
    let mut old = vec![0.0; c_old * hw];
    let mut new = vec![0.0; c_new * hw];
    let mut mask = vec![0.0; hw];
    for (p, &l) in map.labels.iter().enumerate() {
        let l = l as usize;
        if l >= c_total {
            return Err(Error::Validation(format!(
                "class id {l} belongs to a later step (only {c_total} classes known)"
            )));
        }
        if l < c_old {
            old[l * hw + p] = 1.0;
        } else {
            new[(l - c_old) * hw + p] = 1.0;
            mask[p] = 1.0;
        }
    }
    let (h, w) = (map.height, map.width);
    Ok(OneHotSplit {
        old: Tensor::new(&[1, c_old, h, w], old)?,
        new: Tensor::new(&[1, c_new, h, w], new)?,
        new_mask: Tensor::new(&[1, 1, h, w], mask)?,
    })
}

/// Split for a continual step (`step >= 1`) at that step's `C_o`.
pub fn encode_split(
    map: &SemanticMap,
    registry: &LabelRegistry,
    step: usize,
) -> Result<OneHotSplit> {
    if step == 0 {
        return Err(Error::Validation(
            "encode_split needs a continual step (>= 1)".into(),
        ));
    }
    let info = registry.step(step)?;
    split_at(map, info.c_old, info.total())
}

/// Inverse-frequency class weights `total / (C * count_c)`; absent classes get 0.
pub fn class_frequencies<'a>(
    maps: impl IntoIterator<Item = &'a SemanticMap>,
    classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for m in maps {
        for &l in &m.labels {
            let l = l as usize;
            if l >= classes {
                return Err(Error::Validation(format!(
                    "class id {l} out of range for {classes} classes"
                )));
            }
            counts[l] += 1;
        }
        total += m.labels.len();
    }
    if total == 0 {
        return Err(Error::Validation(
            "class_frequencies on an empty dataset".into(),
        ));
    }
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total as f64 / (classes as f64 * c as f64)
            }
        })
        .collect())
}
