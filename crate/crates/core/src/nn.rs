//! Small fully connected networks with manual backpropagation.
//!
//! Hidden layers use rectified-linear activations; the output layer is
//! linear. Dropout, when requested, is applied after every hidden activation
//! using inverted scaling so the deterministic pass needs no correction.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// He-uniform initialization.
    pub fn init(inputs: usize, outputs: usize, rng: &mut seed::Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    pub fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.inputs);
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.biases).map(
            |(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>(),
        ));
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

fn relu(x: f64) -> f64 {
    // NaN passes through so non-finite weights surface in the output.
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations recorded by a forward pass, needed for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the (post-dropout) output of layer `i`.
    pub acts: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit (`0` or `1 / (1 - p)`), one vector per hidden layer.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Parameter gradients with the same layout as [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.biases.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.biases.iter_mut().for_each(|b| *b *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

impl Mlp {
    /// Network with the given layer widths, `dims[0]` inputs and
    /// `dims[last]` outputs.
    pub fn new(dims: &[usize], rng: &mut seed::Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: dims
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .all(|w| w.is_finite())
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|x| *x = relu(*x));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward pass that records activations. With `dropout = Some((p, rng))`
    /// each hidden unit is zeroed with probability `p`.
    pub fn forward_trace(&self, input: &[f64], mut dropout: Option<(f64, &mut seed::Rng)>) -> Trace {
        let mut trace = Trace {
            acts: vec![input.to_vec()],
            masks: Vec::with_capacity(self.layers.len() - 1),
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward_into(trace.output(), &mut out);
            if i < last {
                out.iter_mut().for_each(|x| *x = relu(*x));
                let mask = dropout.as_mut().map(|(p, rng)| dropout_mask(out.len(), *p, rng));
                if let Some(mask) = &mask {
                    out.iter_mut().zip(mask).for_each(|(x, m)| *x *= m);
                }
                trace.masks.push(mask);
            }
            trace.acts.push(out);
        }
        trace
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/doutput`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grads: &mut Gradients) {
        let mut delta = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.acts[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // Through dropout and ReLU of hidden layer i - 1. The recorded
            // activation is zero exactly where either gate is closed.
            let act = &trace.acts[i];
            let mask = trace.masks[i - 1].as_deref();
            for (j, p) in prev.iter_mut().enumerate() {
                if act[j] <= 0.0 {
                    *p = 0.0;
                } else if let Some(m) = mask {
                    *p *= m[j];
                }
            }
            delta = prev;
        }
    }

    /// Visits every parameter mutably in a fixed order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }
}

pub fn dropout_mask(len: usize, p: f64, rng: &mut seed::Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Adam optimizer over the flattened parameters of one [`Mlp`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let n = net.param_count();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        let flat_grads = grads
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()));
        for (((w, g), m), v) in net
            .params_mut()
            .zip(flat_grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Binary network container: magic, version, layer dims, optional extra
/// `f64` header fields, then per layer the row-major weights followed by
/// the biases, all little-endian.
pub(crate) struct Container {
    pub magic: [u8; 4],
    pub version: u32,
}

impl Container {
    pub fn write(&self, out: &mut impl Write, net: &Mlp, extra: &[f64]) -> std::io::Result<()> {
        out.write_all(&self.magic)?;
        out.write_all(&self.version.to_le_bytes())?;
        let dims = net.dims();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&(extra.len() as u32).to_le_bytes())?;
        for x in extra {
            out.write_all(&x.to_le_bytes())?;
        }
        for layer in &net.layers {
            for w in layer.weights.iter().chain(&layer.biases) {
                out.write_all(&w.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Returns the network and the extra header fields.
    pub fn read(&self, what: &'static str, bytes: &[u8]) -> Result<(Mlp, Vec<f64>), String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "file is empty or truncated".to_string())?;
        if magic != self.magic {
            return Err(format!("bad magic bytes {magic:?}, not a {what} file"));
        }
        let version = read_u32(&mut r)?;
        if version != self.version {
            return Err(Error::Version {
                what,
                found: version,
                expected: self.version,
            }
            .to_string());
        }
        let n_dims = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(format!("implausible layer count {}", n_dims.saturating_sub(1)));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = read_u32(&mut r)? as usize;
            if d == 0 || d > 1 << 16 {
                return Err(format!("implausible layer width {d}"));
            }
            dims.push(d);
        }
        let n_extra = read_u32(&mut r)? as usize;
        if n_extra > 64 {
            return Err(format!("implausible header field count {n_extra}"));
        }
        let extra = (0..n_extra)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let mut net = Mlp::zeros(&dims);
        for w in net.params_mut() {
            *w = read_f64(&mut r)?;
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok((net, extra))
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "file is truncated".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64, String> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| "file is truncated".to_string())?;
    Ok(f64::from_le_bytes(b))
}

/// Relative error used by the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
