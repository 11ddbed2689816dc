//! U-Net style per-pixel classifier: the OASIS discriminator (C+1 outputs)
//! and, with a C-channel head, the toy segmenter used for GAN-test.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, DomainTag, ParamSet, Parameter};
use crate::tensor::Tensor;

use super::generator::LRELU_SLOPE;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Widths of the three encoder levels.
    pub channels: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    config: DiscriminatorConfig,
    out_channels: usize,
    params: ParamSet,
}

impl DiscriminatorModel {
    pub fn new(config: DiscriminatorConfig, out_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if out_channels == 0 {
            return Err(Error::Config(
                "discriminator needs at least one output".into(),
            ));
        }
        let [c0, c1, c2] = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers: [(&str, usize, usize, usize); 6] = [
            ("enc0", 3, c0, 3),
            ("enc1", c0, c1, 3),
            ("enc2", c1, c2, 3),
            ("dec1", c2 + c1, c1, 3),
            ("dec0", c1 + c0, c0, 3),
            ("head", c0, out_channels, 1),
        ];
        for (name, cin, cout, k) in layers {
            let fan_in = (cin * k * k) as f64;
            let w = Tensor::randn(&[cout, cin, k, k], 1.0 / fan_in.sqrt(), &mut rng);
            params.insert(Parameter::new(format!("{name}.weight"), w, DomainTag::Base));
            params.insert(Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                DomainTag::Base,
            ));
        }
        Ok(Self {
            config,
            out_channels,
            params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        name: &str,
        pad: usize,
    ) -> Result<Var> {
        let w = binder.bind_name(tape, &self.params, &format!("{name}.weight"))?;
        let b = binder.bind_name(tape, &self.params, &format!("{name}.bias"))?;
        tape.conv2d(x, w, Some(b), pad)
    }

    fn conv_act(&self, tape: &mut Tape, binder: &mut Binder, x: Var, name: &str) -> Result<Var> {
        let y = self.conv(tape, binder, x, name, 1)?;
        tape.leaky_relu(y, LRELU_SLOPE)
    }

    /// Logits `[N, out_channels, H, W]` for images `[N, 3, H, W]`; `H` and
    /// `W` must be multiples of 4.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "discriminator input",
                tape.value(x).shape(),
                &[1, 3, 4, 4],
            ));
        }
        let e0 = self.conv_act(tape, binder, x, "enc0")?;
        let p0 = tape.avg_pool2(e0)?;
        let e1 = self.conv_act(tape, binder, p0, "enc1")?;
        let p1 = tape.avg_pool2(e1)?;
        let e2 = self.conv_act(tape, binder, p1, "enc2")?;
        let u1 = tape.upsample_nearest(e2, 2)?;
        let c1 = tape.concat_channels(&[u1, e1])?;
        let d1 = self.conv_act(tape, binder, c1, "dec1")?;
        let u0 = tape.upsample_nearest(d1, 2)?;
        let c0 = tape.concat_channels(&[u0, e0])?;
        let d0 = self.conv_act(tape, binder, c0, "dec0")?;
        self.conv(tape, binder, d0, "head", 0)
    }

    /// Inference without gradient recording.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(false);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &mut binder, x)?;
        Ok(tape.into_value(y))
    }
}
