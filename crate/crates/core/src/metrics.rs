//! Proxy-FID on fixed random features, mIoU, and GAN-test with a toy segmenter.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labelspace::{one_hot, SemanticMap};
use crate::netblocks::{DiscriminatorConfig, DiscriminatorModel, GeneratorModel};
use crate::params::Binder;
use crate::tensor::Tensor;
use crate::toyscenes::Scene;
use crate::trainer::{AdamConfig, OptimState};

pub const FEATURE_SEED: u64 = 0xC5900;
pub const FEATURE_DIM: usize = 64;
const HIDDEN: usize = 32;

/// Two frozen random convolutions, ReLU and global average pooling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let w1 = Tensor::randn(&[HIDDEN, 3, 3, 3], (1.0f64 / 27.0).sqrt(), &mut rng);
        let b1 = Tensor::randn(&[HIDDEN], 0.1, &mut rng);
        let w2 = Tensor::randn(
            &[FEATURE_DIM, HIDDEN, 3, 3],
            (1.0 / (HIDDEN as f64 * 9.0)).sqrt(),
            &mut rng,
        );
        let b2 = Tensor::randn(&[FEATURE_DIM], 0.1, &mut rng);
        Self { w1, b1, w2, b2 }
    }

    /// One feature row per image of a `[N, 3, H, W]` batch.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, ..) = images.dims4()?;
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let h = tape.conv2d(x, w1, Some(b1), 1)?;
        let h = tape.relu(h)?;
        let h = tape.avg_pool2(h)?;
        let h = tape.conv2d(h, w2, Some(b2), 1)?;
        let h = tape.relu(h)?;
        let t = tape.into_value(h);
        let (_, c, hh, ww) = t.dims4()?;
        let hw = hh * ww;
        Ok((0..n)
            .map(|s| {
                (0..c)
                    .map(|ch| {
                        let off = (s * c + ch) * hw;
                        t.data()[off..off + hw].iter().sum::<f64>() / hw as f64
                    })
                    .collect()
            })
            .collect())
    }
}

/// Per-dimension Gaussian fit of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variances.
    pub var: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Validation(format!(
                "a summary needs at least 2 samples, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Validation("feature rows differ in length".into()));
        }
        let n = rows.len() as f64;
        let mut sorted: Vec<&Vec<f64>> = rows.iter().collect();
        // A fixed reduction order makes the summary independent of input order.
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mean: Vec<f64> = (0..d)
            .map(|j| sorted.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let var = (0..d)
            .map(|j| sorted.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
            .collect();
        Ok(Self {
            mean,
            var,
            count: rows.len(),
        })
    }
}

/// Summary of `images` (each `[1, 3, H, W]` or batched).
pub fn summarize(images: &[Tensor], fe: &FeatureExtractor) -> Result<GaussianSummary> {
    let mut rows = Vec::new();
    for img in images {
        rows.extend(fe.features(img)?);
    }
    GaussianSummary::from_features(&rows)
}

/// Fréchet distance between diagonal Gaussians.
pub fn proxy_fid(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.var.len() != b.var.len() || a.mean.len() != a.var.len() {
        return Err(Error::shape("proxy_fid", &[a.mean.len()], &[b.mean.len()]));
    }
    let mut d = 0.0;
    for i in 0..a.mean.len() {
        let dm = a.mean[i] - b.mean[i];
        let (va, vb) = (a.var[i].max(0.0), b.var[i].max(0.0));
        // (sqrt(va) - sqrt(vb))^2 equals va + vb - 2 sqrt(va vb) and cannot go negative.
        let ds = va.sqrt() - vb.sqrt();
        d += dm * dm + ds * ds;
    }
    Ok(d)
}

/// Mean IoU over the classes present in `gt`.
pub fn miou(pred: &SemanticMap, gt: &SemanticMap, classes: usize) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "miou",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Validation(format!(
                "class id out of range for {classes} classes"
            )));
        }
        present[g] = true;
        if p == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| present[c])
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Per-pixel classifier trained on real scenes of one domain.
#[derive(Clone, Debug)]
pub struct Segmenter {
    model: DiscriminatorModel,
    classes: usize,
    trained_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub net: DiscriminatorConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            net: DiscriminatorConfig::default(),
            iterations: 300,
            batch_size: 2,
            lr: 2e-3,
            seed: 0,
        }
    }
}

fn mean_cross_entropy(tape: &mut Tape, logits: Var, onehot: &Tensor) -> Result<Var> {
    let (n, _, h, w) = onehot.dims4()?;
    let lsm = tape.log_softmax_channels(logits)?;
    let t = tape.constant(onehot.clone());
    let prod = tape.mul(lsm, t)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / (n * h * w) as f64)
}

impl Segmenter {
    pub fn untrained(net: DiscriminatorConfig, classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            model: DiscriminatorModel::new(net, classes, seed)?,
            classes,
            trained_iterations: 0,
        })
    }

    pub fn train(scenes: &[Scene], classes: usize, cfg: &SegmenterConfig) -> Result<Self> {
        if scenes.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Validation(
                "segmenter needs scenes and batch_size >= 1".into(),
            ));
        }
        let mut seg = Self::untrained(cfg.net.clone(), classes, cfg.seed)?;
        let onehots: Vec<Tensor> = scenes
            .iter()
            .map(|s| one_hot(&s.mask, classes))
            .collect::<Result<_>>()?;
        let adam = AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        };
        let mut opt = OptimState::new(adam, seg.model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.iterations {
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.gen_range(0..scenes.len()))
                .collect();
            let x = Tensor::stack_batch(
                &idx.iter()
                    .map(|&i| scenes[i].image.clone())
                    .collect::<Vec<_>>(),
            )?;
            let y =
                Tensor::stack_batch(&idx.iter().map(|&i| onehots[i].clone()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(true);
            let xv = tape.constant(x);
            let logits = seg.model.forward(&mut tape, &mut binder, xv)?;
            let loss = mean_cross_entropy(&mut tape, logits, &y)?;
            tape.backward(loss)?;
            binder.collect_grads(&tape, seg.model.params_mut());
            opt.step(seg.model.params_mut())?;
        }
        seg.trained_iterations = cfg.iterations;
        Ok(seg)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_trained(&self) -> bool {
        self.trained_iterations > 0
    }

    /// Arg-max label map of one `[1, 3, H, W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<SemanticMap> {
        if !self.is_trained() {
            return Err(Error::Validation("segmenter has not been trained".into()));
        }
        let logits = self.model.logits(image)?;
        let (_, c, h, w) = logits.dims4()?;
        let hw = h * w;
        let d = logits.data();
        let labels = (0..hw)
            .map(|p| {
                (0..c)
                    .max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p]).then(b.cmp(&a)))
                    .expect("at least one class") as u16
            })
            .collect();
        SemanticMap::new(h, w, labels)
    }

    /// Mean mIoU of predictions on `images` against `masks`.
    pub fn score(&self, images: &[Tensor], masks: &[SemanticMap]) -> Result<f64> {
        if images.len() != masks.len() || images.is_empty() {
            return Err(Error::Validation("need one mask per image".into()));
        }
        let mut total = 0.0;
        for (img, m) in images.iter().zip(masks) {
            total += miou(&self.predict(img)?, m, self.classes)?;
        }
        Ok(total / images.len() as f64)
    }
}

/// GAN-test: segments images generated for `domain` from `masks` and
/// reports the mean mIoU against the conditioning masks.
pub fn gan_test(
    generator: &GeneratorModel,
    domain: &str,
    segmenter: &Segmenter,
    masks: &[SemanticMap],
    seed: u64,
) -> Result<f64> {
    if !segmenter.is_trained() {
        return Err(Error::Validation("segmenter has not been trained".into()));
    }
    let images = generate_images(generator, domain, masks, seed)?;
    segmenter.score(&images, masks)
}

/// One generated image per mask with noise drawn from `seed`.
pub fn generate_images(
    generator: &GeneratorModel,
    domain: &str,
    masks: &[SemanticMap],
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_dim = generator.config().z_dim;
    masks
        .iter()
        .map(|m| {
            let z: Vec<f64> = (0..z_dim)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            generator.generate(&z, m, domain)
        })
        .collect()
}

/// Mean mIoU of predicting the most frequent class of each mask everywhere.
pub fn majority_baseline(masks: &[SemanticMap], classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for m in masks {
        let top = m
            .distinct()
            .into_iter()
            .max_by_key(|&c| (m.count(c), std::cmp::Reverse(c)))
            .ok_or_else(|| Error::Validation("empty mask".into()))?;
        total += miou(&SemanticMap::filled(m.height, m.width, top), m, classes)?;
    }
    Ok(total / masks.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_miou_case() {
        // class 0: inter 4, union 8 -> 0.5; class 1: inter 2, union 8 -> 0.25
        let gt =
            SemanticMap::new(4, 4, vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]).unwrap();
        let pred =
            SemanticMap::new(4, 4, vec![0, 0, 0, 0, 2, 2, 2, 2, 1, 1, 2, 2, 2, 2, 2, 2]).unwrap();
        assert_eq!(miou(&pred, &gt, 3).unwrap(), 0.375);
    }

    #[test]
    fn closed_form_fid() {
        let a = GaussianSummary {
            mean: vec![0.0],
            var: vec![2.0],
            count: 2,
        };
        let b = GaussianSummary {
            mean: vec![3.0],
            var: vec![2.0],
            count: 2,
        };
        assert_eq!(proxy_fid(&a, &b).unwrap(), 9.0);
        assert_eq!(proxy_fid(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn untrained_segmenter_is_rejected() {
        let seg = Segmenter::untrained(DiscriminatorConfig::default(), 3, 0).unwrap();
        assert!(matches!(
            seg.predict(&Tensor::zeros(&[1, 3, 4, 4])),
            Err(Error::Validation(_))
        ));
    }
}
