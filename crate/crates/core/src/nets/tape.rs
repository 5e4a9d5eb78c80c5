//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op records its inputs and whatever its adjoint needs; `backward`
//! walks the node list in reverse. Leaves created by [`Tape::param`] are tied
//! to a `(net tag, parameter index)` pair so [`NetState`](super::NetState) can
//! collect its gradients afterwards.

use crate::error::{Error, Result};
use crate::spectrogram::{SpecShape, Spectrogram};
use crate::transform::{apply_inverse, apply_inverse_adjoint, ContextBounds, ContextParams};

use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization with frozen statistics.
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Squash {
        raw: Var,
        bounds: ContextBounds,
    },
    Canonicalize {
        m: Var,
        ctx: Var,
    },
    MeanAbsDiff(Var, Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MatMulT(Var, Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Softplus(Var),
    GaussianSample {
        mean: Var,
        var: Var,
        noise: Vec<f64>,
    },
    ContextPenalty(Var),
    Mean(Var),
    SumSquares(Var),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    AppendCoords(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Identifies a trainable parameter: the owning net's tag and its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub net: u32,
    pub index: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamRef, Var)>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn params(&self) -> &[(ParamRef, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no parameter gradient bookkeeping.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A constant copy of `v`'s current value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, p: ParamRef, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((p, v));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let geo = ConvGeometry::new(&xs, &ws, stride, pad)?;
        let out = conv_forward(self.value(x), self.value(w), self.value(b), &geo);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Per-channel normalization over batch and spatial positions.
    /// Returns the output and the batch mean / biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, c, hw) = nchw(xv);
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..n {
            for ch in 0..c {
                let s = &xv.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize_with(x, gamma, beta, &mean, &inv_std);
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        (node, mean, var)
    }

    /// Normalization using fixed running statistics.
    pub fn frozen_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.normalize_with(x, gamma, beta, mean, &inv_std);
        self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    fn normalize_with(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let (n, c, hw) = nchw(xv);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in base..base + hw {
                    let h = (xv.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + b[ch];
                }
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), out).expect("same shape"),
            xhat,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * k).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, k))
    }

    /// `a + k * b` for tensors of equal shape.
    pub fn add_scaled(&mut self, a: Var, b: Var, k: f64) -> Result<Var> {
        let sb = self.scale(b, k);
        self.add(a, sb)
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, hw) = nchw(v);
        let mut out = vec![0.0; n * c];
        for (k, o) in out.iter_mut().enumerate() {
            *o = v.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(vec![n, c], out).expect("pool shape");
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `x [N, I] * w[O, I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, i) = (xv.rows(), xv.row_len());
        let (o, wi) = (wv.shape()[0], wv.row_len());
        if wi != i || bv.len() != o {
            return Err(Error::Shape(format!(
                "linear x {:?} w {:?} b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(bv.data());
        }
        gemm(n, i, o, xv.data(), (i, 1), wv.data(), (1, i), &mut out, 1.0);
        let out = Tensor::new(vec![n, o], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Map raw head outputs `[N, 4]` into `bounds`: tanh for delta, an affine
    /// sigmoid for tau, and for bias and tilt a soft clamp
    /// `m tanh(x / m)` (unit slope at zero, never flat).
    pub fn squash_context(&mut self, raw: Var, bounds: ContextBounds) -> Result<Var> {
        let v = self.value(raw);
        if v.row_len() != 4 {
            return Err(Error::Shape(format!("context head {:?}", v.shape())));
        }
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let x = v.row(r);
            out.push(bounds.delta_max * x[0].tanh());
            out.push(bounds.tau_min + (bounds.tau_max - bounds.tau_min) * sigmoid(x[1]));
            out.push(soft_clamp(x[2], bounds.bias_max));
            out.push(soft_clamp(x[3], bounds.tilt_max));
        }
        let out = Tensor::new(vec![v.rows(), 4], out)?;
        Ok(self.push(out, Op::Squash { raw, bounds }))
    }

    /// Per-sample inverse context transform of `m [N, C, F, T]` by `ctx [N, 4]`.
    pub fn canonicalize(&mut self, m: Var, ctx: Var) -> Result<Var> {
        let (mv, cv) = (self.value(m), self.value(ctx));
        let shape = spec_shape(mv)?;
        if cv.rows() != mv.rows() || cv.row_len() != 4 {
            return Err(Error::Shape(format!(
                "canonicalize m {:?} ctx {:?}",
                mv.shape(),
                cv.shape()
            )));
        }
        let mut out = Vec::with_capacity(mv.len());
        for i in 0..mv.rows() {
            let spec = Spectrogram::new(shape, mv.row(i).to_vec())?;
            let c = ContextParams::from(row4(cv.row(i)));
            out.extend(apply_inverse(&spec, &c)?.into_values());
        }
        let out = Tensor::new(mv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Canonicalize { m, ctx }))
    }

    /// Scalar mean of `|a - b|` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "l1 {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / va.len() as f64);
        Ok(self.push(out, Op::MeanAbsDiff(a, b)))
    }

    /// Rows scaled to unit l2 norm. Errors on a zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let k = v.row_len();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for r in 0..v.rows() {
            let row = v.row(r);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "cannot normalize row {r} with norm {n}"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|a| a / n));
        }
        let out = Tensor::new(vec![v.rows(), k], out)?;
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }

    /// `a [N, D] * b [K, D]^T -> [N, K]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = (va.rows(), va.row_len());
        let (k, db) = (vb.rows(), vb.row_len());
        if d != db {
            return Err(Error::Shape(format!(
                "matmul_t {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; n * k];
        gemm(n, d, k, va.data(), (d, 1), vb.data(), (1, d), &mut out, 0.0);
        let out = Tensor::new(vec![n, k], out)?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (n, k) = (v.rows(), v.row_len());
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} outside {k} classes"
                )));
            }
            let p = softmax(v.row(r));
            loss -= p[y].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| softplus(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softplus(x))
    }

    /// Reparameterized draw `mean[k] + sqrt(var[k]) * noise[k]` with one
    /// variance per row.
    pub fn gaussian_sample(&mut self, mean: Var, var: Var, noise: Vec<f64>) -> Result<Var> {
        let (vm, vv) = (self.value(mean), self.value(var));
        if vv.len() != vm.rows() || noise.len() != vm.len() {
            return Err(Error::Shape(format!(
                "gaussian_sample mean {:?} var {:?} noise {}",
                vm.shape(),
                vv.shape(),
                noise.len()
            )));
        }
        let d = vm.row_len();
        let mut out = vm.data().to_vec();
        for r in 0..vm.rows() {
            let sd = vv.data()[r].max(0.0).sqrt();
            for j in 0..d {
                out[r * d + j] += sd * noise[r * d + j];
            }
        }
        let out = Tensor::new(vm.shape().to_vec(), out)?;
        Ok(self.push(out, Op::GaussianSample { mean, var, noise }))
    }

    /// Batch mean of `delta^2 + ln(tau)^2 + b^2 + s^2` over rows of `[N, 4]`.
    pub fn context_penalty(&mut self, ctx: Var) -> Var {
        let v = self.value(ctx);
        let s: f64 = (0..v.rows())
            .map(|r| {
                let c = v.row(r);
                c[0] * c[0] + c[1].ln().powi(2) + c[2] * c[2] + c[3] * c[3]
            })
            .sum();
        let out = Tensor::scalar(s / v.rows() as f64);
        self.push(out, Op::ContextPenalty(ctx))
    }

    /// Append coordinate channels: the normalized frequency coordinate `r_f`
    /// (constant along time) and/or the normalized time coordinate
    /// (constant along frequency). Returns `x` itself when both are off.
    pub fn append_coords(&mut self, x: Var, freq: bool, time: bool) -> Result<Var> {
        if !freq && !time {
            return Ok(x);
        }
        let v = self.value(x);
        let s = spec_shape(v)?;
        let mut planes = Vec::new();
        if freq {
            let r = crate::transform::freq_coords(s.mel_bins)?;
            planes.push(r.iter().flat_map(|&rf| std::iter::repeat(rf).take(s.frames)).collect::<Vec<f64>>());
        }
        if time {
            let r = crate::transform::freq_coords(s.frames)?;
            planes.push((0..s.mel_bins).flat_map(|_| r.iter().copied()).collect());
        }
        let mut out = Vec::with_capacity(v.rows() * (s.len() + planes.len() * s.mel_bins * s.frames));
        for i in 0..v.rows() {
            out.extend_from_slice(v.row(i));
            for p in &planes {
                out.extend_from_slice(p);
            }
        }
        let out = Tensor::new(vec![v.rows(), s.channels + planes.len(), s.mel_bins, s.frames], out)?;
        Ok(self.push(out, Op::AppendCoords(x)))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(out, Op::Mean(x))
    }

    /// Sum of squared elements.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data().iter().map(|a| a * a).sum());
        self.push(out, Op::SumSquares(x))
    }

    /// Rows `rows` of `x` (first dimension), in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&r) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(Error::InvalidArgument(format!("row {r} of {}", v.rows())));
        }
        let picked: Vec<&[f64]> = rows.iter().map(|&r| v.row(r)).collect();
        let out = Tensor::stack(&picked, &v.shape()[1..])?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Reverse sweep from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad)?;
                let (gx, gw, gb) = conv_backward(xv, wv, g, &geo);
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (n, c, hw) = nchw(xv);
                let gm = self.value(*gamma).data();
                let count = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            dbeta[ch] += g.data()[k];
                            dgamma[ch] += g.data()[k] * xhat[k];
                        }
                    }
                }
                let mut gx = vec![0.0; xv.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let k1 = gm[ch] * inv_std[ch];
                        for k in base..base + hw {
                            gx[k] = k1
                                * (g.data()[k]
                                    - dbeta[ch] / count
                                    - xhat[k] * dgamma[ch] / count);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (n, c, hw) = nchw(xv);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut gx = vec![0.0; xv.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            dbeta[ch] += g.data()[k];
                            dgamma[ch] += g.data()[k] * xhat[k];
                            gx[k] = g.data()[k] * gm[ch] * inv_std[ch];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, k) => {
                let data = g.data().iter().map(|d| d * k).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, _, hw) = nchw(xv);
                let mut gx = vec![0.0; xv.len()];
                for (k, d) in g.data().iter().enumerate() {
                    let v = d / hw as f64;
                    for o in &mut gx[k * hw..(k + 1) * hw] {
                        *o = v;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.rows(), xv.row_len());
                let o = wv.shape()[0];
                let mut gx = vec![0.0; n * i];
                gemm(n, o, i, g.data(), (o, 1), wv.data(), (i, 1), &mut gx, 0.0);
                let mut gw = vec![0.0; o * i];
                gemm(o, n, i, g.data(), (1, o), xv.data(), (i, 1), &mut gw, 0.0);
                let mut gb = vec![0.0; o];
                for r in 0..n {
                    for (j, v) in gb.iter_mut().enumerate() {
                        *v += g.data()[r * o + j];
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?);
                accumulate(grads, *b, Tensor::new(vec![o], gb)?);
            }
            Op::Squash { raw, bounds } => {
                let rv = self.value(*raw);
                let mut gr = vec![0.0; rv.len()];
                for r in 0..rv.rows() {
                    let x = rv.row(r);
                    let d = &g.data()[r * 4..r * 4 + 4];
                    let th = x[0].tanh();
                    gr[r * 4] = d[0] * bounds.delta_max * (1.0 - th * th);
                    let sg = sigmoid(x[1]);
                    gr[r * 4 + 1] = d[1] * (bounds.tau_max - bounds.tau_min) * sg * (1.0 - sg);
                    gr[r * 4 + 2] = d[2] * soft_clamp_grad(x[2], bounds.bias_max);
                    gr[r * 4 + 3] = d[3] * soft_clamp_grad(x[3], bounds.tilt_max);
                }
                accumulate(grads, *raw, Tensor::new(rv.shape().to_vec(), gr)?);
            }
            Op::Canonicalize { m, ctx } => {
                let (mv, cv) = (self.value(*m), self.value(*ctx));
                let shape = spec_shape(mv)?;
                let mut gm = Vec::with_capacity(mv.len());
                let mut gc = Vec::with_capacity(cv.len());
                for i in 0..mv.rows() {
                    let spec = Spectrogram::new(shape, mv.row(i).to_vec())?;
                    let go = Spectrogram::new(shape, g.row(i).to_vec())?;
                    let c = ContextParams::from(row4(cv.row(i)));
                    let (gin, gctx) = apply_inverse_adjoint(&spec, &c, &go)?;
                    gm.extend(gin.into_values());
                    gc.extend(gctx);
                }
                accumulate(grads, *m, Tensor::new(mv.shape().to_vec(), gm)?);
                accumulate(grads, *ctx, Tensor::new(cv.shape().to_vec(), gc)?);
            }
            Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = g.item() / va.len() as f64;
                let ga: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| k * sign(x - y))
                    .collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::NormalizeRows { x, norms } => {
                let xv = self.value(*x);
                let out = &node.value;
                let k = xv.row_len();
                let mut gx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let y = out.row(r);
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        gx[r * k + j] = (gr[j] - y[j] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, d) = (va.rows(), va.row_len());
                let k = vb.rows();
                let mut ga = vec![0.0; n * d];
                gemm(n, k, d, g.data(), (k, 1), vb.data(), (d, 1), &mut ga, 0.0);
                let mut gb = vec![0.0; k * d];
                gemm(k, n, d, g.data(), (1, k), va.data(), (d, 1), &mut gb, 0.0);
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.rows(), lv.row_len());
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| d * sigmoid(a))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::GaussianSample { mean, var, noise } => {
                let (vm, vv) = (self.value(*mean), self.value(*var));
                let d = vm.row_len();
                let mut gv = vec![0.0; vv.len()];
                for (r, out) in gv.iter_mut().enumerate() {
                    let s = vv.data()[r];
                    if s > 0.0 {
                        let dot: f64 = (0..d).map(|j| g.data()[r * d + j] * noise[r * d + j]).sum();
                        *out = dot * 0.5 / s.sqrt();
                    }
                }
                accumulate(grads, *mean, g.clone());
                accumulate(grads, *var, Tensor::new(vv.shape().to_vec(), gv)?);
            }
            Op::ContextPenalty(ctx) => {
                let cv = self.value(*ctx);
                let n = cv.rows() as f64;
                let k = g.item() / n;
                let mut gc = vec![0.0; cv.len()];
                for r in 0..cv.rows() {
                    let c = cv.row(r);
                    gc[r * 4] = k * 2.0 * c[0];
                    gc[r * 4 + 1] = k * 2.0 * c[1].ln() / c[1];
                    gc[r * 4 + 2] = k * 2.0 * c[2];
                    gc[r * 4 + 3] = k * 2.0 * c[3];
                }
                accumulate(grads, *ctx, Tensor::new(cv.shape().to_vec(), gc)?);
            }
            Op::AppendCoords(x) => {
                let xv = self.value(*x);
                let per = xv.row_len();
                let full = g.row_len();
                let mut gx = Vec::with_capacity(xv.len());
                for i in 0..xv.rows() {
                    gx.extend_from_slice(&g.data()[i * full..i * full + per]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.len() as f64;
                accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let k = xv.row_len();
                let mut gx = Tensor::zeros(xv.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..k {
                        gx.data_mut()[r * k + j] += g.data()[i * k + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                let k = 2.0 * g.item();
                let data = xv.data().iter().map(|a| k * a).collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn nchw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    let hw = s[2..].iter().product();
    (s[0], s[1], hw)
}

fn spec_shape(t: &Tensor) -> Result<SpecShape> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [N, C, F, T], got {s:?}")));
    }
    Ok(SpecShape::new(s[1], s[2], s[3]))
}

fn row4(r: &[f64]) -> [f64; 4] {
    [r[0], r[1], r[2], r[3]]
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
/// `m tanh(x / m)`; zero when `m` is zero.
pub fn soft_clamp(x: f64, m: f64) -> f64 {
    if m > 0.0 {
        m * (x / m).tanh()
    } else {
        0.0
    }
}

pub fn soft_clamp_grad(x: f64, m: f64) -> f64 {
    if m > 0.0 {
        1.0 - (x / m).tanh().powi(2)
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `c = a [m x k] * b [k x n] + beta * c`, with `(row, col)` strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given slices,
    // which the callers guarantee by construction of the shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv geometry input {xs:?} kernel {ws:?} stride {stride} pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let p = geo.positions();
    for ci in 0..geo.cin {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * geo.h + iy as usize) * geo.w..];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= geo.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: &ConvGeometry, x: &mut [f64]) {
    let p = geo.positions();
    for ci in 0..geo.cin {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (ci * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let base = (ci * geo.h + iy as usize) * geo.w;
                    for ox in 0..geo.wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            x[base + ix as usize] += src[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, geo: &ConvGeometry) -> Tensor {
    let (k, p) = (geo.patch(), geo.positions());
    let in_len = geo.cin * geo.h * geo.w;
    let out_len = geo.cout * p;
    let mut out = vec![0.0; geo.n * out_len];
    let mut cols = vec![0.0; k * p];
    for i in 0..geo.n {
        im2col(&x.data()[i * in_len..(i + 1) * in_len], geo, &mut cols);
        let o = &mut out[i * out_len..(i + 1) * out_len];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[co]);
        }
        gemm(geo.cout, k, p, w.data(), (k, 1), &cols, (p, 1), o, 1.0);
    }
    Tensor::new(vec![geo.n, geo.cout, geo.ho, geo.wo], out).expect("conv output shape")
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, geo: &ConvGeometry) -> (Tensor, Tensor, Tensor) {
    let (k, p) = (geo.patch(), geo.positions());
    let in_len = geo.cin * geo.h * geo.w;
    let out_len = geo.cout * p;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; geo.cout];
    let mut cols = vec![0.0; k * p];
    let mut gcols = vec![0.0; k * p];
    for i in 0..geo.n {
        let gi = &g.data()[i * out_len..(i + 1) * out_len];
        for (co, chunk) in gi.chunks(p).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(&x.data()[i * in_len..(i + 1) * in_len], geo, &mut cols);
        // gw += g_i [cout x p] * cols^T [p x k]
        gemm(geo.cout, p, k, gi, (p, 1), &cols, (1, p), &mut gw, 1.0);
        // gcols = w^T [k x cout] * g_i [cout x p]
        gemm(k, geo.cout, p, w.data(), (1, k), gi, (p, 1), &mut gcols, 0.0);
        col2im(&gcols, geo, &mut gx[i * in_len..(i + 1) * in_len]);
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![geo.cout], gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let x = tape.constant(t(&[2, 2, 5, 4], &xd));
        let w = tape.constant(t(&[3, 2, 3, 3], &wd));
        let b = tape.constant(t(&[3], &[0.5, -1.0, 0.25]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let out = tape.value(y).clone();
        assert_eq!(out.shape(), &[2, 3, 3, 2]);
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut s = [0.5, -1.0, 0.25][co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                        continue;
                                    }
                                    let xv = xd[((n * 2 + ci) * 5 + iy as usize) * 4 + ix as usize];
                                    s += xv * wd[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out.data()[((n * 3 + co) * 3 + oy) * 2 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_ce_uniform_is_log_k() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 5]));
        let loss = tape.softmax_ce(l, &[0, 2, 4]).unwrap();
        assert!((tape.value(loss).item() - 5f64.ln()).abs() < 1e-12);
        assert!(tape.softmax_ce(l, &[0, 1, 5]).is_err());
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(tape.normalize_rows(z).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, -2.0]));
        let d = tape.detach(a);
        let s = tape.add(a, d).unwrap();
        let m = tape.mean(s);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(g.wrt(d).unwrap().data(), &[0.5, 0.5]);
    }
}
