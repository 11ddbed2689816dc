//! Residual cSPADE generator with frozen base parameters and per-domain deltas.
//!
//! Base parameter names (no prefix):
//!
//! ```text
//! stem.{weight,bias}
//! block{i}.spade{j}.mlp_shared.{weight,bias}   first conv over (base one-hot ++ noise)
//! block{i}.spade{j}.mlp_gamma.{weight,bias}
//! block{i}.spade{j}.mlp_beta.{weight,bias}
//! block{i}.spade{j}.norm.{weight,bias}         instance-norm affine of the base domain
//! block{i}.conv{j}.{weight,bias}
//! block{i}.shortcut.{weight,bias}              only when channel count changes
//! out.{weight,bias}
//! ```
//!
//! A domain introduced at step `k >= 1` owns a delta whose names carry the
//! prefix `<domain>/`:
//!
//! ```text
//! block{i}.spade{j}.el.{weight,bias}           extended-label conv
//! block{i}.spade{j}.norm.{weight,bias}
//! block{i}.conv{j}.{alpha,beta,bias_delta}
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::modconv::{weight_stats, ModulatedConv, Modulation};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labelspace::{one_hot, split_at, LabelRegistry, SemanticMap};
use crate::params::{Binder, DomainTag, ParamSet, Parameter};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const LRELU_SLOPE: f64 = 0.2;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Output channels of each residual block.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    /// Channels of the hidden map inside every cSPADE block.
    pub hidden: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 32, 16],
            z_dim: 8,
            hidden: 32,
            height: 32,
            width: 48,
        }
    }
}

impl GeneratorConfig {
    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "generator needs >= 1 block of non-zero width".into(),
            ));
        }
        if self.z_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("z_dim and hidden must be positive".into()));
        }
        let f = 1usize << (self.n_blocks() - 1);
        if !self.height.is_multiple_of(f)
            || !self.width.is_multiple_of(f)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Config(format!(
                "{}x{} output is not divisible by {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(in, out)` channels of block `i`.
    pub fn block_io(&self, i: usize) -> (usize, usize) {
        let fin = self.channels[i.saturating_sub(1)];
        (fin, self.channels[i])
    }

    /// Downsampling factor of block `i` relative to the output.
    pub fn block_factor(&self, i: usize) -> usize {
        1 << (self.n_blocks() - 1 - i)
    }

    /// Trainable scalars a continual step adds when its extended-label convs
    /// see `c_ext` input channels.
    pub fn delta_numel(&self, c_ext: usize) -> usize {
        let k2 = KERNEL * KERNEL;
        (0..self.n_blocks())
            .map(|i| {
                let (fin, fout) = self.block_io(i);
                let modulated = (2 * fout * fin + fout) + (2 * fout * fout + fout);
                let el = 2 * (self.hidden * c_ext * k2 + self.hidden);
                let affine = 2 * fin + 2 * fout;
                modulated + el + affine
            })
            .sum()
    }
}

fn conv_param(
    set: &mut ParamSet,
    name: &str,
    shape: [usize; 4],
    rng: &mut ChaCha8Rng,
    tag: DomainTag,
) {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let w = Tensor::randn(&shape, 1.0 / fan_in.sqrt(), rng);
    set.insert(Parameter::new(format!("{name}.weight"), w, tag));
    set.insert(Parameter::new(
        format!("{name}.bias"),
        Tensor::zeros(&[shape[0]]),
        tag,
    ));
}

/// Conditioning tensors for one block resolution.
struct Conditioning {
    /// Base-class one-hot concatenated with the replicated noise.
    old_in: Tensor,
    /// Extended-class one-hot; present for continual steps only.
    new_in: Option<Tensor>,
    new_mask: Option<Tensor>,
    keep_mask: Option<Tensor>,
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = parts.iter().map(|t| tape.constant((*t).clone())).collect();
    let v = tape.concat_channels(&vars)?;
    Ok(tape.into_value(v))
}

fn noise_plane(z: &[f64], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(z.len() * h * w);
    for &v in z {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(&[1, z.len(), h, w], data).expect("noise plane")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    registry: LabelRegistry,
    base: ParamSet,
    /// `deltas[k - 1]` belongs to the domain introduced at step `k`.
    deltas: Vec<ParamSet>,
}

impl GeneratorModel {
    /// A freshly initialized base model for step 0 of `registry`.
    pub fn new(config: GeneratorConfig, registry: LabelRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tag = DomainTag::Base;
        let c_base = registry.base_classes();
        let (z, hid) = (config.z_dim, config.hidden);
        let mut base = ParamSet::new();
        conv_param(
            &mut base,
            "stem",
            [config.channels[0], z, 3, 3],
            &mut rng,
            tag,
        );
        for i in 0..config.n_blocks() {
            let (fin, fout) = config.block_io(i);
            for (j, f) in [(0, fin), (1, fout)] {
                let p = format!("block{i}.spade{j}");
                conv_param(
                    &mut base,
                    &format!("{p}.mlp_shared"),
                    [hid, c_base + z, 3, 3],
                    &mut rng,
                    tag,
                );
                conv_param(
                    &mut base,
                    &format!("{p}.mlp_gamma"),
                    [f, hid, 3, 3],
                    &mut rng,
                    tag,
                );
                conv_param(
                    &mut base,
                    &format!("{p}.mlp_beta"),
                    [f, hid, 3, 3],
                    &mut rng,
                    tag,
                );
                base.insert(Parameter::new(
                    format!("{p}.norm.weight"),
                    Tensor::full(&[f], 1.0),
                    tag,
                ));
                base.insert(Parameter::new(
                    format!("{p}.norm.bias"),
                    Tensor::zeros(&[f]),
                    tag,
                ));
            }
            conv_param(
                &mut base,
                &format!("block{i}.conv0"),
                [fout, fin, 3, 3],
                &mut rng,
                tag,
            );
            conv_param(
                &mut base,
                &format!("block{i}.conv1"),
                [fout, fout, 3, 3],
                &mut rng,
                tag,
            );
            if fin != fout {
                conv_param(
                    &mut base,
                    &format!("block{i}.shortcut"),
                    [fout, fin, 1, 1],
                    &mut rng,
                    tag,
                );
            }
        }
        let last = *config.channels.last().expect("validated");
        conv_param(&mut base, "out", [3, last, 3, 3], &mut rng, tag);
        Self::from_parts(config, registry, base, Vec::new())
    }

    /// Reassembles a model from persisted parameter sections.
    pub fn from_parts(
        config: GeneratorConfig,
        registry: LabelRegistry,
        base: ParamSet,
        deltas: Vec<ParamSet>,
    ) -> Result<Self> {
        config.validate()?;
        if deltas.len() >= registry.num_steps() {
            return Err(Error::Validation(format!(
                "{} delta sections but the stream has only {} steps",
                deltas.len(),
                registry.num_steps()
            )));
        }
        let mut model = Self {
            config,
            registry,
            base,
            deltas,
        };
        model.apply_partition();
        Ok(model)
    }

    /// Only the newest section is trainable.
    fn apply_partition(&mut self) {
        let newest = self.deltas.len();
        self.base.set_trainable(newest == 0);
        for (k, d) in self.deltas.iter_mut().enumerate() {
            d.set_trainable(k + 1 == newest);
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn registry(&self) -> &LabelRegistry {
        &self.registry
    }

    pub fn base(&self) -> &ParamSet {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut ParamSet {
        &mut self.base
    }

    pub fn deltas(&self) -> &[ParamSet] {
        &self.deltas
    }

    /// Index of the most recent step this model can generate for.
    pub fn latest_step(&self) -> usize {
        self.deltas.len()
    }

    pub fn delta(&self, step: usize) -> Result<&ParamSet> {
        step.checked_sub(1)
            .and_then(|k| self.deltas.get(k))
            .ok_or_else(|| Error::Lookup(format!("no delta section for step {step}")))
    }

    /// The parameter section being trained at the latest step.
    pub fn trainable_section_mut(&mut self) -> &mut ParamSet {
        match self.deltas.last_mut() {
            Some(d) => d,
            None => &mut self.base,
        }
    }

    pub fn trainable_section(&self) -> &ParamSet {
        self.deltas.last().unwrap_or(&self.base)
    }

    pub fn step_of(&self, domain: &str) -> Result<usize> {
        let k = self.registry.domain_index(domain)?;
        if k > self.latest_step() {
            return Err(Error::Lookup(format!(
                "domain `{domain}` (step {k}) has not been trained into this model"
            )));
        }
        Ok(k)
    }

    /// Input channels of the extended-label convs at `step`: every class
    /// outside the base label space known at that step.
    pub fn extended_classes(&self, step: usize) -> Result<usize> {
        Ok(self.registry.total_classes(step)? - self.registry.base_classes())
    }

    /// Trainable scalars expected in the delta of `step` (closed form).
    pub fn expected_delta_numel(&self, step: usize) -> Result<usize> {
        Ok(self.config.delta_numel(self.extended_classes(step)?))
    }

    fn domain_prefix(&self, step: usize) -> Result<String> {
        Ok(format!("{}/", self.registry.step(step)?.domain))
    }

    /// Adds the delta section for `step`, initialized so that the new domain
    /// reproduces the previous one on maps without newly added classes:
    /// zero extended-label convs, identity modulation, affine copied from the
    /// previous domain. Freezes everything else.
    pub fn init_continual(&mut self, step: usize) -> Result<()> {
        if step == 0 || step != self.deltas.len() + 1 {
            return Err(Error::Validation(format!(
                "model is trained through step {}, cannot initialize step {step}",
                self.deltas.len()
            )));
        }
        self.registry.step(step)?;
        let prefix = self.domain_prefix(step)?;
        let prev_prefix = if step == 1 {
            String::new()
        } else {
            self.domain_prefix(step - 1)?
        };
        let prev: &ParamSet = if step == 1 {
            &self.base
        } else {
            &self.deltas[step - 2]
        };
        let tag = DomainTag::Domain(step);
        let c_ext = self.extended_classes(step)?;
        let c_ext_prev = if step == 1 {
            0
        } else {
            self.extended_classes(step - 1)?
        };
        let hid = self.config.hidden;
        let mut delta = ParamSet::new();
        for i in 0..self.config.n_blocks() {
            for j in 0..2 {
                let p = format!("block{i}.spade{j}");
                let mut el_w = Tensor::zeros(&[hid, c_ext, 3, 3]);
                let mut el_b = Tensor::zeros(&[hid]);
                if step > 1 {
                    let pw = &prev.get(&format!("{prev_prefix}{p}.el.weight"))?.tensor;
                    let pb = &prev.get(&format!("{prev_prefix}{p}.el.bias"))?.tensor;
                    let dst = el_w.data_mut();
                    for o in 0..hid {
                        let src = &pw.data()[o * c_ext_prev * 9..(o + 1) * c_ext_prev * 9];
                        dst[o * c_ext * 9..o * c_ext * 9 + c_ext_prev * 9].copy_from_slice(src);
                    }
                    el_b = pb.clone();
                }
                delta.insert(Parameter::new(format!("{prefix}{p}.el.weight"), el_w, tag));
                delta.insert(Parameter::new(format!("{prefix}{p}.el.bias"), el_b, tag));
                for leaf in ["weight", "bias"] {
                    let src = &prev.get(&format!("{prev_prefix}{p}.norm.{leaf}"))?.tensor;
                    let mut t = src.clone();
                    t.zero_grad();
                    delta.insert(Parameter::new(format!("{prefix}{p}.norm.{leaf}"), t, tag));
                }
            }
            for j in 0..2 {
                let c = format!("block{i}.conv{j}");
                let m = if step == 1 {
                    self.modulated_conv(&c)?.identity_modulation()
                } else {
                    Modulation {
                        alpha: prev.get(&format!("{prev_prefix}{c}.alpha"))?.tensor.clone(),
                        beta: prev.get(&format!("{prev_prefix}{c}.beta"))?.tensor.clone(),
                        bias_delta: prev
                            .get(&format!("{prev_prefix}{c}.bias_delta"))?
                            .tensor
                            .clone(),
                    }
                };
                delta.insert(Parameter::new(format!("{prefix}{c}.alpha"), m.alpha, tag));
                delta.insert(Parameter::new(format!("{prefix}{c}.beta"), m.beta, tag));
                delta.insert(Parameter::new(
                    format!("{prefix}{c}.bias_delta"),
                    m.bias_delta,
                    tag,
                ));
            }
        }
        for p in delta.iter_mut() {
            p.tensor.zero_grad();
        }
        self.deltas.push(delta);
        self.apply_partition();
        Ok(())
    }

    /// The frozen conv `block{i}.conv{j}` with every registered domain's modulation.
    pub fn modulated_conv(&self, conv: &str) -> Result<ModulatedConv> {
        let w = self.base.get(&format!("{conv}.weight"))?.tensor.clone();
        let b = self.base.get(&format!("{conv}.bias"))?.tensor.clone();
        let mut mc = ModulatedConv::new(w.with_requires_grad(false), b.with_requires_grad(false))?;
        for step in 1..=self.deltas.len() {
            let d = &self.deltas[step - 1];
            let pre = self.domain_prefix(step)?;
            mc.register(
                step,
                Modulation {
                    alpha: d.get(&format!("{pre}{conv}.alpha"))?.tensor.clone(),
                    beta: d.get(&format!("{pre}{conv}.beta"))?.tensor.clone(),
                    bias_delta: d.get(&format!("{pre}{conv}.bias_delta"))?.tensor.clone(),
                },
            )?;
        }
        Ok(mc)
    }

    fn conditioning(
        &self,
        z: &[Vec<f64>],
        maps: &[SemanticMap],
        step: usize,
    ) -> Result<Vec<Conditioning>> {
        let c_base = self.registry.base_classes();
        let c_total = self.registry.total_classes(step)?;
        let mut out = Vec::with_capacity(self.config.n_blocks());
        for i in 0..self.config.n_blocks() {
            let f = self.config.block_factor(i);
            let (mut olds, mut news, mut masks, mut keeps) = (vec![], vec![], vec![], vec![]);
            for (zi, map) in z.iter().zip(maps) {
                let small = map.downsample(f)?;
                let noise = noise_plane(zi, small.height, small.width);
                if step == 0 {
                    let oh = one_hot(&small, c_base)?;
                    olds.push(concat_channels(&[&oh, &noise])?);
                } else {
                    let s = split_at(&small, c_base, c_total)?;
                    olds.push(concat_channels(&[&s.old, &noise])?);
                    let keep: Vec<f64> = s.new_mask.data().iter().map(|m| 1.0 - m).collect();
                    keeps.push(Tensor::new(s.new_mask.shape(), keep)?);
                    news.push(s.new);
                    masks.push(s.new_mask);
                }
            }
            out.push(Conditioning {
                old_in: Tensor::stack_batch(&olds)?,
                new_in: (step > 0).then(|| Tensor::stack_batch(&news)).transpose()?,
                new_mask: (step > 0)
                    .then(|| Tensor::stack_batch(&masks))
                    .transpose()?,
                keep_mask: (step > 0)
                    .then(|| Tensor::stack_batch(&keeps))
                    .transpose()?,
            });
        }
        Ok(out)
    }

    fn bind_base(&self, tape: &mut Tape, binder: &mut Binder, name: &str) -> Result<Var> {
        binder.bind_name(tape, &self.base, name)
    }

    fn bind_delta(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        step: usize,
        name: &str,
    ) -> Result<Var> {
        let pre = self.domain_prefix(step)?;
        binder.bind_name(tape, self.delta(step)?, &format!("{pre}{name}"))
    }

    /// First-layer activations of a cSPADE block before the ReLU: the base
    /// conv over (base one-hot ++ noise), and at continual steps the masked
    /// sum with the extended-label conv.
    pub(crate) fn spade_first_layer(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        cond_old: Var,
        ext: Option<(Var, Var, Var)>,
        step: usize,
    ) -> Result<Var> {
        let w = self.bind_base(tape, binder, &format!("{prefix}.mlp_shared.weight"))?;
        let b = self.bind_base(tape, binder, &format!("{prefix}.mlp_shared.bias"))?;
        let base = tape.conv2d(cond_old, w, Some(b), 1)?;
        match ext {
            None => Ok(base),
            Some((new_in, new_mask, keep_mask)) => {
                let ew = self.bind_delta(tape, binder, step, &format!("{prefix}.el.weight"))?;
                let eb = self.bind_delta(tape, binder, step, &format!("{prefix}.el.bias"))?;
                let el = tape.conv2d(new_in, ew, Some(eb), 1)?;
                let base_m = tape.mul_mask(base, keep_mask)?;
                let el_m = tape.mul_mask(el, new_mask)?;
                tape.add(base_m, el_m)
            }
        }
    }

    /// Pre-ReLU first-layer activations of `block{block}.spade{j}` for one
    /// map, at the block's resolution.
    pub fn spade_first_layer_activations(
        &self,
        z: &[f64],
        map: &SemanticMap,
        step: usize,
        block: usize,
        j: usize,
    ) -> Result<Tensor> {
        if block >= self.config.n_blocks() || j > 1 {
            return Err(Error::Lookup(format!("no block{block}.spade{j}")));
        }
        if step > self.latest_step() {
            return Err(Error::Lookup(format!("no step {step} in model")));
        }
        self.registry.validate_map(map, step)?;
        let c = self
            .conditioning(&[z.to_vec()], std::slice::from_ref(map), step)?
            .swap_remove(block);
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let old = tape.constant(c.old_in);
        let ext = match (c.new_in, c.new_mask, c.keep_mask) {
            (Some(n), Some(m), Some(k)) => {
                Some((tape.constant(n), tape.constant(m), tape.constant(k)))
            }
            _ => None,
        };
        let v = self.spade_first_layer(
            &mut tape,
            &mut binder,
            &format!("block{block}.spade{j}"),
            old,
            ext,
            step,
        )?;
        Ok(tape.into_value(v))
    }

    #[allow(clippy::too_many_arguments)]
    fn spade(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        prefix: &str,
        cond_old: Var,
        ext: Option<(Var, Var, Var)>,
        step: usize,
    ) -> Result<Var> {
        let (g, b) = if step == 0 {
            (
                self.bind_base(tape, binder, &format!("{prefix}.norm.weight"))?,
                self.bind_base(tape, binder, &format!("{prefix}.norm.bias"))?,
            )
        } else {
            (
                self.bind_delta(tape, binder, step, &format!("{prefix}.norm.weight"))?,
                self.bind_delta(tape, binder, step, &format!("{prefix}.norm.bias"))?,
            )
        };
        let normed = tape.instance_norm(x, g, b, NORM_EPS)?;
        let first = self.spade_first_layer(tape, binder, prefix, cond_old, ext, step)?;
        let actv = tape.relu(first)?;
        let gw = self.bind_base(tape, binder, &format!("{prefix}.mlp_gamma.weight"))?;
        let gb = self.bind_base(tape, binder, &format!("{prefix}.mlp_gamma.bias"))?;
        let bw = self.bind_base(tape, binder, &format!("{prefix}.mlp_beta.weight"))?;
        let bb = self.bind_base(tape, binder, &format!("{prefix}.mlp_beta.bias"))?;
        let scale = tape.conv2d(actv, gw, Some(gb), 1)?;
        let shift = tape.conv2d(actv, bw, Some(bb), 1)?;
        let one_plus = tape.add_scalar(scale, 1.0)?;
        let prod = tape.mul(normed, one_plus)?;
        tape.add(prod, shift)
    }

    fn res_conv(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        conv: &str,
        step: usize,
    ) -> Result<Var> {
        if step == 0 {
            let w = self.bind_base(tape, binder, &format!("{conv}.weight"))?;
            let b = self.bind_base(tape, binder, &format!("{conv}.bias"))?;
            return tape.conv2d(x, w, Some(b), 1);
        }
        let wt = &self.base.get(&format!("{conv}.weight"))?.tensor;
        let (mstat, sstat) = weight_stats(wt)?;
        let alpha = self.bind_delta(tape, binder, step, &format!("{conv}.alpha"))?;
        let beta = self.bind_delta(tape, binder, step, &format!("{conv}.beta"))?;
        let w_eff = tape.modulate(wt, &mstat, &sstat, alpha, beta)?;
        let b = self.bind_base(tape, binder, &format!("{conv}.bias"))?;
        let db = self.bind_delta(tape, binder, step, &format!("{conv}.bias_delta"))?;
        let b_eff = tape.add(b, db)?;
        tape.conv2d(x, w_eff, Some(b_eff), 1)
    }

    /// Records a batched forward pass for `step` and returns images
    /// `[N, 3, H, W]` in `[-1, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        z: &[Vec<f64>],
        maps: &[SemanticMap],
        step: usize,
    ) -> Result<Var> {
        if z.len() != maps.len() || z.is_empty() {
            return Err(Error::Contract(format!(
                "{} noise vectors for {} maps",
                z.len(),
                maps.len()
            )));
        }
        if step > self.latest_step() {
            return Err(Error::Lookup(format!(
                "step {step} not available (model trained through step {})",
                self.latest_step()
            )));
        }
        let cfg = &self.config;
        for (zi, map) in z.iter().zip(maps) {
            if zi.len() != cfg.z_dim || zi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "noise must be {} finite values",
                    cfg.z_dim
                )));
            }
            if (map.height, map.width) != (cfg.height, cfg.width) {
                return Err(Error::shape(
                    "generator map",
                    &[map.height, map.width],
                    &[cfg.height, cfg.width],
                ));
            }
            self.registry.validate_map(map, step)?;
        }
        let cond = self.conditioning(z, maps, step)?;
        let f0 = cfg.block_factor(0);
        let (h0, w0) = (cfg.height / f0, cfg.width / f0);
        let noise: Vec<Tensor> = z.iter().map(|zi| noise_plane(zi, h0, w0)).collect();
        let noise = tape.constant(Tensor::stack_batch(&noise)?);
        let sw = self.bind_base(tape, binder, "stem.weight")?;
        let sb = self.bind_base(tape, binder, "stem.bias")?;
        let mut x = tape.conv2d(noise, sw, Some(sb), 1)?;
        for (i, c) in cond.into_iter().enumerate() {
            let old = tape.constant(c.old_in);
            let ext = match (c.new_in, c.new_mask, c.keep_mask) {
                (Some(n), Some(m), Some(k)) => {
                    Some((tape.constant(n), tape.constant(m), tape.constant(k)))
                }
                _ => None,
            };
            let (fin, fout) = cfg.block_io(i);
            let skip = if fin != fout {
                let w = self.bind_base(tape, binder, &format!("block{i}.shortcut.weight"))?;
                let b = self.bind_base(tape, binder, &format!("block{i}.shortcut.bias"))?;
                tape.conv2d(x, w, Some(b), 0)?
            } else {
                x
            };
            let h = self.spade(tape, binder, x, &format!("block{i}.spade0"), old, ext, step)?;
            let h = tape.leaky_relu(h, LRELU_SLOPE)?;
            let h = self.res_conv(tape, binder, h, &format!("block{i}.conv0"), step)?;
            let h = self.spade(tape, binder, h, &format!("block{i}.spade1"), old, ext, step)?;
            let h = tape.leaky_relu(h, LRELU_SLOPE)?;
            let h = self.res_conv(tape, binder, h, &format!("block{i}.conv1"), step)?;
            x = tape.add(skip, h)?;
            if i + 1 < cfg.n_blocks() {
                x = tape.upsample_nearest(x, 2)?;
            }
        }
        let x = tape.leaky_relu(x, LRELU_SLOPE)?;
        let ow = self.bind_base(tape, binder, "out.weight")?;
        let ob = self.bind_base(tape, binder, "out.bias")?;
        let x = tape.conv2d(x, ow, Some(ob), 1)?;
        tape.tanh(x)
    }

    /// Inference for a batch at `step` without recording gradients.
    pub fn generate_batch(
        &self,
        z: &[Vec<f64>],
        maps: &[SemanticMap],
        step: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let v = self.forward(&mut tape, &mut binder, z, maps, step)?;
        Ok(tape.into_value(v))
    }

    /// One image `[1, 3, H, W]` for `domain`.
    pub fn generate(&self, z: &[f64], map: &SemanticMap, domain: &str) -> Result<Tensor> {
        let step = self.step_of(domain)?;
        self.generate_batch(&[z.to_vec()], std::slice::from_ref(map), step)
    }

    /// Checks that every section holds exactly the parameter names and
    /// shapes this config and registry call for.
    pub fn check_structure(&self) -> Result<()> {
        fn same(label: &str, got: &ParamSet, want: &ParamSet) -> Result<()> {
            let g: Vec<(&str, &[usize])> = got
                .iter()
                .map(|p| (p.name.as_str(), p.tensor.shape()))
                .collect();
            let w: Vec<(&str, &[usize])> = want
                .iter()
                .map(|p| (p.name.as_str(), p.tensor.shape()))
                .collect();
            if g != w {
                let diff = w
                    .iter()
                    .find(|e| !g.contains(e))
                    .or_else(|| g.iter().find(|e| !w.contains(e)))
                    .map_or_else(String::new, |(n, s)| {
                        format!(" (first difference at `{n}` {s:?})")
                    });
                return Err(Error::Validation(format!(
                    "section {label} has the wrong layout{diff}"
                )));
            }
            Ok(())
        }
        let mut reference = Self::new(self.config.clone(), self.registry.clone(), 0)?;
        same("BASE", &self.base, &reference.base)?;
        for step in 1..=self.deltas.len() {
            reference.init_continual(step)?;
            same(
                &self.registry.step(step)?.domain,
                &self.deltas[step - 1],
                &reference.deltas[step - 1],
            )?;
        }
        Ok(())
    }

    /// `(new_params, total_params)` through `step`.
    pub fn count_params(&self, step: usize) -> Result<(usize, usize)> {
        if step > self.latest_step() {
            return Err(Error::Lookup(format!("no step {step} in model")));
        }
        let base = self.base.numel();
        if step == 0 {
            return Ok((base, base));
        }
        let new = self.deltas[step - 1].numel();
        let total = base
            + self.deltas[..step]
                .iter()
                .map(ParamSet::numel)
                .sum::<usize>();
        Ok((new, total))
    }
}
