//! Parameter storage, basic layers and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::util::Fnv1a::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.write(n.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }

    /// Replace all tensors with `other`'s after checking names and shapes agree.
    pub fn load_from(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || tensors.len() != self.tensors.len() {
            return Err(Error::Checkpoint("parameter layout does not match the model".into()));
        }
        for (dst, src) in self.tensors.iter().zip(&tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Square-kernel 2-D convolution. Weights are stored at unit scale and
/// multiplied by `1/√fan_in` at run time, so Adam's step size is relative to
/// the effective weight scale in every layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// Run-time weight multiplier.
    pub gain: f32,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Effective weights He-normal, zero bias; "same" padding for odd kernels.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[spec.cout, spec.cin, spec.kernel, spec.kernel], 1.0, rng),
        );
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.cout])));
        Conv2d {
            weight,
            bias,
            gain: (2.0 / fan_in as f32).sqrt(),
            stride: spec.stride,
            pad: spec.dilation * (spec.kernel - 1) / 2,
            dilation: spec.dilation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let w = tape.scale(w, self.gain);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

/// Fully connected layer `y = x·(cW)ᵀ + b` with run-time multiplier `c = 1/√fan_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gain: f32,
}

impl Linear {
    /// Effective weights `N(0, gain²/fan_in)`, bias filled with `bias_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        gain: f32,
        bias_init: f32,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[dout, din], gain, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[dout], bias_init));
        Linear {
            weight,
            bias,
            gain: 1.0 / (din as f32).sqrt(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let w = tape.scale(w, self.gain);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Adam with bias correction (`β2 = 0.999`, `ε = 1e-8` unless overridden).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(beta1: f32) -> Self {
        Adam {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, shapes: impl Iterator<Item = Vec<usize>>) {
        if self.m.is_empty() {
            for s in shapes {
                self.m.push(Tensor::zeros(&s));
                self.v.push(Tensor::zeros(&s));
            }
        }
    }

    /// One update of every tensor in `params` that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        self.ensure_state(params.tensors().iter().map(|t| t.shape().to_vec()));
        let mut values: Vec<&mut Tensor> = params.tensors.iter_mut().collect();
        self.apply(&mut values, grads, lr);
    }

    /// One update of free-standing tensors (e.g. latents under refinement).
    pub fn step_tensors(&mut self, values: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f32) {
        self.ensure_state(values.iter().map(|t| t.shape().to_vec()));
        self.apply(values, grads, lr);
    }

    fn apply(&mut self, values: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, value) in values.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
