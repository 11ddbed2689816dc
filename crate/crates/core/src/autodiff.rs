//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! cached state to run its vector-Jacobian product. `backward` walks the
//! tape in reverse and accumulates gradients into leaf tensors that were
//! created with `requires_grad`. Nodes whose inputs need no gradient skip
//! caching and are never visited on the way back.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        k: usize,
        cols: Vec<f64>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool2 {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulMask {
        x: Var,
        mask: Var,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Modulate {
        alpha: Var,
        beta: Var,
        centered: Vec<f64>,
        sstat: Vec<f64>,
        kk: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A linear record of forward operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an input tensor; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        let mut t = std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]));
        t.set_requires_grad(false);
        t
    }

    // ----- forward ops -------------------------------------------------

    /// Zero-padded cross-correlation, stride 1.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, cin, h, wd) = x.dims4()?;
        let (cout, wcin, k, k2) = w.dims4()?;
        if wcin != cin || k != k2 || k == 0 {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::shape("conv2d bias", w.shape(), bs));
            }
        }
        let ho = h + 2 * padding - k + 1;
        let wo = wd + 2 * padding - k + 1;
        let rows = cin * k * k;
        let npix = ho * wo;
        let mut out = vec![0.0; n * cout * npix];
        let mut cols = vec![0.0; n * rows * npix];
        let wmat = ArrayView2::from_shape((cout, rows), w.data()).expect("weight view");
        for s in 0..n {
            let src = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let col = &mut cols[s * rows * npix..(s + 1) * rows * npix];
            im2col(src, cin, h, wd, k, padding, ho, wo, col);
            let cmat = ArrayView2::from_shape((rows, npix), &*col).expect("cols view");
            let dst = &mut out[s * cout * npix..(s + 1) * cout * npix];
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (o, chunk) in dst.chunks_mut(npix).enumerate() {
                    chunk.fill(bv[o]);
                }
            }
            let mut omat = ArrayViewMut2::from_shape((cout, npix), dst).expect("out view");
            general_mat_mul(1.0, &wmat, &cmat, 1.0, &mut omat);
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        if !self.rg(weight) {
            cols = Vec::new();
        }
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                k,
                cols,
            },
            rg,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes followed
    /// by a per-channel affine map. Variance uses the population convention.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let gs = self.value(gamma).shape();
        let bs = self.value(beta).shape();
        if gs != [c] || bs != [c] {
            return Err(Error::shape("instance_norm", xt.shape(), gs));
        }
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("instance_norm", xt.shape(), &[1]));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xt.numel()];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; xt.numel()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let src = &xt.data()[off..off + hw];
                let mean = src.iter().sum::<f64>() / hw as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[s * c + ch] = is;
                for i in 0..hw {
                    let xh = (src[i] - mean) * is;
                    xhat[off + i] = xh;
                    out[off + i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(xt.shape(), out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Log-softmax over the channel axis at every pixel.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let hw = h * w;
        let d = xt.data();
        let mut out = vec![0.0; d.len()];
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(d[base + ch * hw + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    z += (d[base + ch * hw + p] - m).exp();
                }
                let lse = m + z.ln();
                for ch in 0..c {
                    out[base + ch * hw + p] = d[base + ch * hw + p] - lse;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(xt.shape(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be >= 1".into()));
        }
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let d = xt.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &d[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                xt.shape(),
                &[n, c, h / 2 * 2, w / 2 * 2],
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = xt.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            let src = &d[nc * h * w..(nc + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    out[nc * ho * wo + y * wo + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2 { x }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xt = self.value(x);
        let out = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, move |v| v + c, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, move |v| v * c, Op::Scale { x, c })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(name, at, bt)?;
        let out = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(at.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |p, q| p * q, Op::Mul { a, b })
    }

    /// Multiplies `[N, C, H, W]` by a `[N, 1, H, W]` mask broadcast over channels.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (xt, mt) = (self.value(x), self.value(mask));
        let (n, c, h, w) = xt.dims4()?;
        let (mn, mc, mh, mw) = mt.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::shape("mul_mask", xt.shape(), mt.shape()));
        }
        let hw = h * w;
        let (xd, md) = (xt.data(), mt.data());
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            let m = &md[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] = xd[off + p] * m[p];
                }
            }
        }
        let rg = self.rg(x) || self.rg(mask);
        let value = Tensor::new(xt.shape(), out)?;
        Ok(self.push(value, Op::MulMask { x, mask }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        let (n, _, h, w) = dims4_of(&first)?;
        let mut ctot = 0;
        for &p in parts {
            let t = self.value(p);
            let (pn, pc, ph, pw) = t.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", &first, t.shape()));
            }
            ctot += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(&[n, ctot, h, w], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        if start + len > c {
            return Err(Error::shape("slice_channels", xt.shape(), &[start + len]));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let off = (s * c + start) * hw;
            out.extend_from_slice(&xt.data()[off..off + len * hw]);
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(value, Op::Slice { x, start, len }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, rg))
    }

    /// Weight modulation for a frozen kernel bank `weight` with per-kernel
    /// statistics `(mstat, sstat)`:
    /// `W_eff = alpha * (W - M) / S + beta`, evaluated as
    /// `W * r + (beta - M * r)` with `r = alpha / S`, so that `alpha = S,
    /// beta = M` reproduces `W` bit for bit and `alpha = beta = 0` gives 0.
    /// Gradients reach `alpha` and `beta` only.
    pub fn modulate(
        &mut self,
        weight: &Tensor,
        mstat: &[f64],
        sstat: &[f64],
        alpha: Var,
        beta: Var,
    ) -> Result<Var> {
        let (cout, cin, k, k2) = weight.dims4()?;
        let kk = k * k2;
        let pairs = cout * cin;
        let (at, bt) = (self.value(alpha), self.value(beta));
        if at.numel() != pairs
            || bt.numel() != pairs
            || mstat.len() != pairs
            || sstat.len() != pairs
        {
            return Err(Error::shape("modulate", weight.shape(), at.shape()));
        }
        let wd = weight.data();
        let (ad, bd) = (at.data(), bt.data());
        let mut out = vec![0.0; wd.len()];
        let mut centered = vec![0.0; wd.len()];
        for ij in 0..pairs {
            let ratio = ad[ij] / sstat[ij];
            let shift = bd[ij] - mstat[ij] * ratio;
            for p in 0..kk {
                let idx = ij * kk + p;
                centered[idx] = wd[idx] - mstat[ij];
                out[idx] = wd[idx] * ratio + shift;
            }
        }
        let rg = self.rg(alpha) || self.rg(beta);
        let value = Tensor::new(weight.shape(), out)?;
        Ok(self.push(
            value,
            Op::Modulate {
                alpha,
                beta,
                centered,
                sstat: sstat.to_vec(),
                kk,
            },
            rg,
        ))
    }

    // ----- reverse pass ------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            self.node_backward(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn node_backward(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
                k,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, cin, h, wd) = x.dims4().expect("conv input");
                let (_, cout, ho, wo) = out.dims4().expect("conv output");
                let rows = cin * k * k;
                let npix = ho * wo;
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut gb = vec![0.0; cout];
                    for s in 0..n {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            let off = (s * cout + o) * npix;
                            *gbo += g[off..off + npix].iter().sum::<f64>();
                        }
                    }
                    add_into(&mut grads[b.0], gb);
                }
                if self.rg(*weight) {
                    let mut gw = vec![0.0; cout * rows];
                    {
                        let mut gwm =
                            ArrayViewMut2::from_shape((cout, rows), &mut gw[..]).expect("gw view");
                        for s in 0..n {
                            let gm = ArrayView2::from_shape(
                                (cout, npix),
                                &g[s * cout * npix..(s + 1) * cout * npix],
                            )
                            .expect("g view");
                            let cm = ArrayView2::from_shape(
                                (rows, npix),
                                &cols[s * rows * npix..(s + 1) * rows * npix],
                            )
                            .expect("cols view");
                            general_mat_mul(1.0, &gm, &cm.t(), 1.0, &mut gwm);
                        }
                    }
                    add_into(&mut grads[weight.0], gw);
                }
                if self.rg(*input) {
                    let wm = ArrayView2::from_shape((cout, rows), w.data()).expect("w view");
                    let mut gx = vec![0.0; x.numel()];
                    let mut dcol = vec![0.0; rows * npix];
                    for s in 0..n {
                        let gm = ArrayView2::from_shape(
                            (cout, npix),
                            &g[s * cout * npix..(s + 1) * cout * npix],
                        )
                        .expect("g view");
                        {
                            let mut dm = ArrayViewMut2::from_shape((rows, npix), &mut dcol[..])
                                .expect("dcol view");
                            general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut dm);
                        }
                        col2im(
                            &dcol,
                            cin,
                            h,
                            wd,
                            *k,
                            *padding,
                            ho,
                            wo,
                            &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd],
                        );
                    }
                    add_into(&mut grads[input.0], gx);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = out.dims4().expect("in output");
                let hw = h * w;
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbt = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                gg[ch] += g[off + p] * xhat[off + p];
                                gbt[ch] += g[off + p];
                            }
                        }
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], gg);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], gbt);
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let m = hw as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for p in 0..hw {
                                sum_g += g[off + p];
                                sum_gx += g[off + p] * xhat[off + p];
                            }
                            let coef = gam[ch] * inv_std[s * c + ch] / m;
                            for p in 0..hw {
                                gx[off + p] =
                                    coef * (m * g[off + p] - sum_g - xhat[off + p] * sum_gx);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::LogSoftmax { x } => {
                let (n, c, h, w) = out.dims4().expect("lsm output");
                let hw = h * w;
                let y = out.data();
                let mut gx = vec![0.0; g.len()];
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let mut gs = 0.0;
                        for ch in 0..c {
                            gs += g[base + ch * hw + p];
                        }
                        for ch in 0..c {
                            let idx = base + ch * hw + p;
                            gx[idx] = g[idx] - y[idx].exp() * gs;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("up input");
                let (ho, wo) = (h * factor, w * factor);
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[nc * h * w + (y / factor) * w + xx / factor] +=
                                g[nc * ho * wo + y * wo + xx];
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("pool input");
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let gv = 0.25 * g[nc * ho * wo + y * wo + xx];
                            let i = nc * h * w + 2 * y * w + 2 * xx;
                            gx[i] += gv;
                            gx[i + 1] += gv;
                            gx[i + w] += gv;
                            gx[i + w + 1] += gv;
                        }
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::Tanh { x } => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            Op::AddScalar { x } => add_into(&mut grads[x.0], g),
            Op::Scale { x, c } => add_into(&mut grads[x.0], g.iter().map(|v| v * c).collect()),
            Op::Add { a, b } => {
                if self.rg(*a) && self.rg(*b) {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g);
                } else if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                } else {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    add_into(
                        &mut grads[a.0],
                        g.iter().zip(bd).map(|(x, y)| x * y).collect(),
                    );
                }
                if self.rg(*b) {
                    add_into(
                        &mut grads[b.0],
                        g.iter().zip(ad).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            Op::MulMask { x, mask } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("mask input");
                let hw = h * w;
                let md = self.value(*mask).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                gx[off + p] = g[off + p] * md[s * hw + p];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*mask) {
                    let xd = xt.data();
                    let mut gm = vec![0.0; n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in 0..hw {
                                gm[s * hw + p] += g[off + p] * xd[off + p];
                            }
                        }
                    }
                    add_into(&mut grads[mask.0], gm);
                }
            }
            Op::Concat { parts } => {
                let (n, ctot, h, w) = out.dims4().expect("concat output");
                let hw = h * w;
                let mut coff = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let off = (s * ctot + coff) * hw;
                            gp.extend_from_slice(&g[off..off + pc * hw]);
                        }
                        add_into(&mut grads[p.0], gp);
                    }
                    coff += pc;
                }
            }
            Op::Slice { x, start, len } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("slice input");
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for s in 0..n {
                    let off = (s * c + start) * hw;
                    gx[off..off + len * hw].copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Modulate {
                alpha,
                beta,
                centered,
                sstat,
                kk,
            } => {
                let pairs = sstat.len();
                if self.rg(*alpha) {
                    let ga = (0..pairs)
                        .map(|ij| {
                            let s: f64 = (0..*kk)
                                .map(|p| g[ij * kk + p] * centered[ij * kk + p])
                                .sum();
                            s / sstat[ij]
                        })
                        .collect();
                    add_into(&mut grads[alpha.0], ga);
                }
                if self.rg(*beta) {
                    let gb = (0..pairs)
                        .map(|ij| g[ij * kk..(ij + 1) * kk].iter().sum())
                        .collect();
                    add_into(&mut grads[beta.0], gb);
                }
            }
        }
    }
}

fn dims4_of(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape("dims4", shape, &[0, 0, 0, 0])),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let npix = ho * wo;
    for c in 0..cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                // valid output columns: 0 <= ox + kx - pad < w
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(wo);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || x0 >= x1 {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = iy - pad;
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    let ix0 = x0 + kx - pad;
                    line[x0..x1].copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let npix = ho * wo;
    for c in 0..cin {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(wo);
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix0 = x0 + kx - pad;
                    let line = &src[oy * wo + x0..oy * wo + x1];
                    for (d, s) in plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)]
                        .iter_mut()
                        .zip(line)
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}
