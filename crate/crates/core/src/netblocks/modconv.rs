//! Weight-modulated convolution: a frozen kernel bank re-styled per domain
//! through per-(out, in) scale/shift and a bias offset.

use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to per-kernel standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// Per-kernel mean and floored population standard deviation of a
/// `[Cout, Cin, K, K]` weight, each returned as a flat `Cout * Cin` vector.
pub fn weight_stats(weight: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (cout, cin, k, k2) = weight.dims4()?;
    if k == 0 || k2 == 0 {
        return Err(Error::shape(
            "weight_stats",
            weight.shape(),
            &[cout, cin, 1, 1],
        ));
    }
    let kk = k * k2;
    let mut mean = Vec::with_capacity(cout * cin);
    let mut std = Vec::with_capacity(cout * cin);
    for kernel in weight.data().chunks(kk) {
        let m = kernel.iter().sum::<f64>() / kk as f64;
        let var = kernel.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / kk as f64;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok((mean, std))
}

/// Domain-specific modulation parameters for one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    /// `[Cout, Cin]`
    pub alpha: Tensor,
    /// `[Cout, Cin]`
    pub beta: Tensor,
    /// `[Cout]`
    pub bias_delta: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModulatedConv {
    weight: Tensor,
    bias: Tensor,
    mstat: Vec<f64>,
    sstat: Vec<f64>,
    domains: BTreeMap<usize, Modulation>,
}

impl ModulatedConv {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (cout, ..) = weight.dims4()?;
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "ModulatedConv::new",
                weight.shape(),
                bias.shape(),
            ));
        }
        let (mstat, sstat) = weight_stats(&weight)?;
        Ok(Self {
            weight,
            bias,
            mstat,
            sstat,
            domains: BTreeMap::new(),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn mstat(&self) -> &[f64] {
        &self.mstat
    }

    pub fn sstat(&self) -> &[f64] {
        &self.sstat
    }

    /// `alpha = S, beta = M, bias_delta = 0`.
    pub fn identity_modulation(&self) -> Modulation {
        let (cout, cin, ..) = self.weight.dims4().expect("checked in new");
        Modulation {
            alpha: Tensor::new(&[cout, cin], self.sstat.clone()).expect("stat length"),
            beta: Tensor::new(&[cout, cin], self.mstat.clone()).expect("stat length"),
            bias_delta: Tensor::zeros(&[cout]),
        }
    }

    pub fn register(&mut self, domain: usize, m: Modulation) -> Result<()> {
        let (cout, cin, ..) = self.weight.dims4()?;
        if m.alpha.shape() != [cout, cin]
            || m.beta.shape() != [cout, cin]
            || m.bias_delta.shape() != [cout]
        {
            return Err(Error::shape(
                "ModulatedConv::register",
                &[cout, cin],
                m.alpha.shape(),
            ));
        }
        self.domains.insert(domain, m);
        Ok(())
    }

    pub fn modulation(&self, domain: usize) -> Result<&Modulation> {
        self.domains
            .get(&domain)
            .ok_or_else(|| Error::Lookup(format!("no modulation registered for domain {domain}")))
    }

    /// Effective `(W_eff, b_eff)` for `domain`.
    pub fn modulate_weights(&self, domain: usize) -> Result<(Tensor, Tensor)> {
        let m = self.modulation(domain)?;
        let mut tape = Tape::new();
        let a = tape.constant(m.alpha.clone());
        let b = tape.constant(m.beta.clone());
        let w = tape.modulate(&self.weight, &self.mstat, &self.sstat, a, b)?;
        let bias = self
            .bias
            .data()
            .iter()
            .zip(m.bias_delta.data())
            .map(|(x, y)| x + y)
            .collect();
        let bias = Tensor::new(self.bias.shape(), bias)?;
        Ok((tape.into_value(w), bias))
    }
}
