use super::kernels::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, maxpool2_forward, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{invalid_config, invalid_input, invalid_state, Result};
use crate::geometry::SegMask;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    PadEdge {
        input: Var,
        pad: usize,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    CropAdd {
        coarse: Var,
        skip: Var,
        offset: (usize, usize),
    },
    SigmoidCe {
        logits: Var,
        targets: Tensor<T>,
        factor: T,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of tensor operations supporting a single reverse sweep.
///
/// Values are appended in evaluation order, so reverse index order is a
/// valid topological order for backpropagation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node (a loss).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].widen()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of a `C_in × H × W` input with `C_out × C_in × k × k`
    /// weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.value(input).dims3()?;
        let geom = match self.value(weight).shape()[..] {
            [cout, wcin, k, k2] if wcin == cin && k == k2 => ConvGeom::new(cin, h, w, cout, k, stride, pad)?,
            ref s => {
                return Err(invalid_config(format!(
                    "conv weight shape {s:?} incompatible with {cin}-channel input"
                )))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.cout] {
                return Err(invalid_config(format!(
                    "bias shape {:?} does not match {} output channels",
                    self.value(b).shape(),
                    geom.cout
                )));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[geom.cout, geom.oh, geom.ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Transposed convolution (fractionally strided upsampling). Weights are
    /// `C_in × C_out × k × k`; the output is `C_out × (stride·(H−1)+k−2·crop)²`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize, crop: usize) -> Result<Var> {
        let (cin, h, w) = self.value(input).dims3()?;
        let (cout, k) = match self.value(weight).shape()[..] {
            [wcin, cout, k, k2] if wcin == cin && k == k2 => (cout, k),
            ref s => {
                return Err(invalid_config(format!(
                    "transposed conv weight shape {s:?} incompatible with {cin}-channel input"
                )))
            }
        };
        if stride == 0 {
            return Err(invalid_config("stride must be positive"));
        }
        let size = |n: usize| (stride * (n - 1) + k) as isize - 2 * crop as isize;
        let (oh, ow) = (size(h), size(w));
        if oh <= 0 || ow <= 0 {
            return Err(invalid_config(format!(
                "transposed conv output size {oh}x{ow} is not positive"
            )));
        }
        // the adjoint convolution maps the upsampled map back to the input
        let geom = ConvGeom::new(cout, oh as usize, ow as usize, cin, k, stride, crop)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        let out = conv2d_backward_input(&geom, self.value(input).data(), self.value(weight).data());
        let value = Tensor::from_vec(&[cout, geom.h, geom.w], out)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(value, rg, Op::ConvTranspose2d { input, weight, geom }))
    }

    /// Pads each channel by `pad` pixels on every side, repeating the
    /// nearest edge value.
    pub fn pad_edge(&mut self, input: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if h == 0 || w == 0 {
            return Err(invalid_input("cannot edge-pad an empty map"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let x = self.value(input).data();
        let value = Tensor::from_fn(&[c, ph, pw], |i| {
            let (ch, y, xx) = (i / (ph * pw), i / pw % ph, i % pw);
            let sy = y.saturating_sub(pad).min(h - 1);
            let sx = xx.saturating_sub(pad).min(w - 1);
            x[(ch * h + sy) * w + sx]
        });
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::PadEdge { input, pad }))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let (out, argmax, oh, ow) = maxpool2_forward(c, h, w, self.value(input).data());
        let value = Tensor::from_vec(&[c, oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(stable_sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Sigmoid { input })
    }

    /// Centre-crops `skip` to the spatial size of `coarse` and adds it.
    pub fn crop_add(&mut self, coarse: Var, skip: Var) -> Result<Var> {
        let (c, h, w) = self.value(coarse).dims3()?;
        let (sc, sh, sw) = self.value(skip).dims3()?;
        if sc != c {
            return Err(invalid_config(format!("crop_add channel mismatch: {c} vs {sc}")));
        }
        if sh < h || sw < w {
            return Err(invalid_config(format!("skip {sh}x{sw} smaller than coarse {h}x{w}")));
        }
        let offset = ((sh - h) / 2, (sw - w) / 2);
        let mut value = self.value(coarse).clone();
        {
            let skip_data = self.value(skip).data().to_vec();
            let out = value.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    let src = (ch * sh + y + offset.0) * sw + offset.1;
                    let dst = (ch * h + y) * w;
                    for x in 0..w {
                        out[dst + x] += skip_data[src + x];
                    }
                }
            }
        }
        let rg = self.any_grad(&[coarse, skip]);
        Ok(self.push(value, rg, Op::CropAdd { coarse, skip, offset }))
    }

    /// Sigmoid cross-entropy summed over pixels, averaged over channels and
    /// multiplied by `scale`:
    /// `scale/N · Σ max(z,0) − z·t + log(1 + e^{−|z|})`.
    pub fn sigmoid_ce_loss(&mut self, logits: Var, targets: &Tensor<T>, scale: T) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(invalid_input(format!(
                "logit shape {:?} does not match target shape {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        if let Some(bad) = targets.data().iter().find(|t| !(t.widen() >= 0.0 && t.widen() <= 1.0)) {
            return Err(invalid_input(format!("sigmoid target {bad} outside [0, 1]")));
        }
        let channels = z.shape().first().copied().unwrap_or(1).max(1);
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.widen(), t.widen());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let factor = scale / T::cast(channels as f64);
        let loss = factor.widen() * total;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::cast(loss)),
            rg,
            Op::SigmoidCe {
                logits,
                targets: targets.clone(),
                factor,
            },
        ))
    }

    /// Per-pixel softmax cross-entropy averaged over the `H × W` pixels of a
    /// `C × H × W` score map.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &SegMask) -> Result<Var> {
        let (c, h, w) = self.value(logits).dims3()?;
        if (labels.height(), labels.width()) != (h, w) {
            return Err(invalid_input(format!(
                "label mask {}x{} does not match score map {h}x{w}",
                labels.height(),
                labels.width()
            )));
        }
        if let Some(&bad) = labels.labels().iter().find(|&&l| l as usize >= c) {
            return Err(invalid_input(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let plane = h * w;
        let mut probs = vec![T::zero(); c * plane];
        let mut total = 0.0f64;
        for (p, &label) in labels.labels().iter().enumerate() {
            let m = (0..c)
                .map(|k| z[k * plane + p].widen())
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..c).map(|k| (z[k * plane + p].widen() - m).exp()).sum();
            let lse = m + denom.ln();
            total += lse - z[label as usize * plane + p].widen();
            for k in 0..c {
                probs[k * plane + p] = T::cast((z[k * plane + p].widen() - lse).exp());
            }
        }
        let loss = total / plane as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::cast(loss)),
            rg,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.labels().to_vec(),
            },
        ))
    }

    /// `Σ input ⊙ weights` for a constant weight tensor.
    pub fn dot(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(input).shape() != weights.shape() {
            return Err(invalid_input(format!(
                "dot shape mismatch {:?} vs {:?}",
                self.value(input).shape(),
                weights.shape()
            )));
        }
        let value = self.value(input).dot(weights);
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::scalar(T::cast(value)),
            rg,
            Op::Dot {
                input,
                weights: weights.clone(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                node.grad = Some(Tensor::from_vec(node.value.shape(), delta).expect("gradient shape matches value"));
            }
        }
    }

    /// Backpropagates from a one-element node. Gradients are retained on
    /// leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid_state(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backward_op(&op, id, grad.data());
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, id: usize, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.requires_grad(*input) {
                    let gi = conv2d_backward_input(geom, g, self.value(*weight).data());
                    self.accumulate(*input, gi);
                }
                if self.requires_grad(*weight) {
                    let gw = conv2d_backward_weight(geom, g, self.value(*input).data());
                    self.accumulate(*weight, gw);
                }
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let plane = geom.oh * geom.ow;
                        let gb = g.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                        self.accumulate(*b, gb);
                    }
                }
            }
            Op::ConvTranspose2d { input, weight, geom } => {
                if self.requires_grad(*input) {
                    let gi = conv2d_forward(geom, g, self.value(*weight).data(), None);
                    self.accumulate(*input, gi);
                }
                if self.requires_grad(*weight) {
                    let gw = conv2d_backward_weight(geom, self.value(*input).data(), g);
                    self.accumulate(*weight, gw);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![T::zero(); self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gi[idx] += gv;
                }
                self.accumulate(*input, gi);
            }
            Op::PadEdge { input, pad } => {
                let (c, h, w) = self.value(*input).dims3().expect("3-d");
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut gi = vec![T::zero(); c * h * w];
                for (i, &gv) in g.iter().enumerate() {
                    let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
                    let sy = y.saturating_sub(*pad).min(h - 1);
                    let sx = x.saturating_sub(*pad).min(w - 1);
                    gi[(ch * h + sy) * w + sx] += gv;
                }
                self.accumulate(*input, gi);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let gi = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(*input, gi);
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[id].value.data();
                let gi = y.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.accumulate(*input, gi);
            }
            Op::CropAdd { coarse, skip, offset } => {
                self.accumulate(*coarse, g.to_vec());
                if self.requires_grad(*skip) {
                    let (c, h, w) = self.nodes[id].value.dims3().expect("3-d");
                    let (_, sh, sw) = self.value(*skip).dims3().expect("3-d");
                    let mut gs = vec![T::zero(); c * sh * sw];
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * sh + y + offset.0) * sw + offset.1;
                            let src = (ch * h + y) * w;
                            gs[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                    self.accumulate(*skip, gs);
                }
            }
            Op::SigmoidCe {
                logits,
                targets,
                factor,
            } => {
                let scale = g[0] * *factor;
                let z = self.value(*logits).data();
                let gi = z
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| scale * (stable_sigmoid(z) - t))
                    .collect();
                self.accumulate(*logits, gi);
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let plane = labels.len();
                let scale = g[0] / T::cast(plane as f64);
                let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (p, &l) in labels.iter().enumerate() {
                    gi[l as usize * plane + p] -= scale;
                }
                self.accumulate(*logits, gi);
            }
            Op::Dot { input, weights } => {
                let gi = weights.data().iter().map(|&w| w * g[0]).collect();
                self.accumulate(*input, gi);
            }
        }
    }
}

/// Logistic function evaluated without overflow for large `|x|`.
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
