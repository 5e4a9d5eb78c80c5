//! Building blocks shared by the estimator and the embedder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::Var;
use super::{BnStats, Fwd, Mode, NetState, Tensor};
use crate::error::Result;

pub(crate) struct LayerBuilder<'a, R: Rng> {
    state: &'a mut NetState,
    rng: &'a mut R,
}

impl<'a, R: Rng> LayerBuilder<'a, R> {
    pub fn new(state: &'a mut NetState, rng: &'a mut R) -> Self {
        Self { state, rng }
    }

    fn gaussian(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let sd = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let w = self.gaussian(&[cout, cin, k, k], cin * k * k);
        let w = self.state.add_param(format!("{name}.conv.weight"), w);
        let b = self
            .state
            .add_param(format!("{name}.conv.bias"), Tensor::zeros(&[cout]));
        let gamma = self
            .state
            .add_param(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self
            .state
            .add_param(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        let mean = self
            .state
            .add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
        let var = self
            .state
            .add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0));
        ConvBn {
            w,
            b,
            gamma,
            beta,
            mean,
            var,
            stride,
            pad: k / 2,
        }
    }

    pub fn res_block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ResBlock {
        let a = self.conv_bn(&format!("{name}.a"), cin, cout, 3, stride);
        let b = self.conv_bn(&format!("{name}.b"), cout, cout, 3, 1);
        let shortcut = (stride != 1 || cin != cout)
            .then(|| self.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride));
        ResBlock { a, b, shortcut }
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let w = self.gaussian(&[cout, cin], cin);
        let w = self.state.add_param(format!("{name}.weight"), w);
        let b = self
            .state
            .add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Linear { w, b }
    }

    /// Linear layer with all-zero weights and bias.
    pub fn linear_zero(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let w = self
            .state
            .add_param(format!("{name}.weight"), Tensor::zeros(&[cout, cin]));
        let b = self
            .state
            .add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Linear { w, b }
    }
}

/// Convolution followed by per-channel normalization.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    pub fn forward(&self, s: &NetState, fwd: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let w = s.leaf(fwd.tape, self.w);
        let b = s.leaf(fwd.tape, self.b);
        let h = fwd.tape.conv2d(x, w, b, self.stride, self.pad)?;
        let gamma = s.leaf(fwd.tape, self.gamma);
        let beta = s.leaf(fwd.tape, self.beta);
        match fwd.mode {
            Mode::Train => {
                let hs = fwd.tape.value(h).shape();
                let count = hs[0] * hs[2..].iter().product::<usize>();
                let (out, mean, var) = fwd.tape.batch_norm(h, gamma, beta);
                fwd.stats.push(BnStats {
                    mean_buffer: self.mean,
                    var_buffer: self.var,
                    mean,
                    var,
                    count,
                });
                Ok(out)
            }
            Mode::Eval => {
                let buf = s.buffers();
                Ok(fwd.tape.frozen_norm(
                    h,
                    gamma,
                    beta,
                    buf[self.mean].data(),
                    buf[self.var].data(),
                ))
            }
        }
    }
}

/// Two 3x3 conv-norm layers with an identity or projected shortcut.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    pub fn forward(&self, s: &NetState, fwd: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let h = self.a.forward(s, fwd, x)?;
        let h = fwd.tape.relu(h);
        let h = self.b.forward(s, fwd, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(s, fwd, x)?,
            None => x,
        };
        let sum = fwd.tape.add(h, skip)?;
        Ok(fwd.tape.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward(&self, s: &NetState, tape: &mut super::Tape, x: Var) -> Result<Var> {
        let w = s.leaf(tape, self.w);
        let b = s.leaf(tape, self.b);
        tape.linear(x, w, b)
    }
}
