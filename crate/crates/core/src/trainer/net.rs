//! One-hidden-layer ReLU classifier with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;
const CHECKPOINT_HEADER: usize = 24;

/// Parameters live in one flat vector laid out as `w1 (hidden x input)`,
/// `b1`, `w2 (classes x hidden)`, `b2`. The first two form the backbone, the
/// last two the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallNet {
    input: usize,
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
    pub frozen_backbone: bool,
    pub frozen_head: bool,
}

impl SmallNet {
    /// Every weight and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 || classes == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let mut net = SmallNet {
            input,
            hidden,
            classes,
            params: vec![0.0; hidden * input + hidden + classes * hidden + classes],
            frozen_backbone: false,
            frozen_head: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let split = net.head_start();
        for (i, p) in net.params.iter_mut().enumerate() {
            let a = if i < split { a1 } else { a2 };
            *p = rng.random_range(-a..a);
        }
        Ok(net)
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn head_start(&self) -> usize {
        self.hidden * self.input + self.hidden
    }

    pub fn backbone(&self) -> &[f64] {
        &self.params[..self.head_start()]
    }

    pub fn head(&self) -> &[f64] {
        &self.params[self.head_start()..]
    }

    /// Writes the post-ReLU hidden activations and the logits.
    pub fn forward_into(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (ni, nh) = (self.input, self.hidden);
        let w1 = &self.params[..nh * ni];
        let b1 = &self.params[nh * ni..nh * ni + nh];
        let off = nh * ni + nh;
        let w2 = &self.params[off..off + self.classes * nh];
        let b2 = &self.params[off + self.classes * nh..];
        for h in 0..nh {
            let row = &w1[h * ni..(h + 1) * ni];
            let z = b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            hidden[h] = z.max(0.0);
        }
        for k in 0..self.classes {
            let row = &w2[k * nh..(k + 1) * nh];
            logits[k] = b2[k] + row.iter().zip(hidden.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.classes];
        self.forward_into(x, &mut h, &mut out);
        out
    }

    /// Adds the parameter gradient for one example to `grad`, given the
    /// forward activations and the loss gradient w.r.t. the logits.
    pub fn backward_into(&self, x: &[f64], hidden: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let (ni, nh) = (self.input, self.hidden);
        let off = nh * ni + nh;
        let w2 = &self.params[off..off + self.classes * nh];
        let (gb, gh) = grad.split_at_mut(off);
        let (gw2, gb2) = gh.split_at_mut(self.classes * nh);
        let mut dh = vec![0.0; nh];
        for k in 0..self.classes {
            let d = dlogits[k];
            gb2[k] += d;
            let row = &w2[k * nh..(k + 1) * nh];
            let grow = &mut gw2[k * nh..(k + 1) * nh];
            for h in 0..nh {
                grow[h] += d * hidden[h];
                dh[h] += d * row[h];
            }
        }
        let (gw1, gb1) = gb.split_at_mut(nh * ni);
        for h in 0..nh {
            if hidden[h] <= 0.0 {
                continue;
            }
            gb1[h] += dh[h];
            let grow = &mut gw1[h * ni..(h + 1) * ni];
            for (g, v) in grow.iter_mut().zip(x) {
                *g += dh[h] * v;
            }
        }
    }

    /// `input u64`, `hidden u64`, `classes u64`, then the flat parameters as
    /// little-endian f64.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER + self.params.len() * 8);
        for d in [self.input, self.hidden, self.classes] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_HEADER {
            return Err(Error::format(0, "truncated network header"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes")) as usize;
        let (input, hidden, classes) = (word(0), word(1), word(2));
        let mut net = SmallNet::new(input, hidden, classes, 0)?;
        if bytes.len() != CHECKPOINT_HEADER + net.params.len() * 8 {
            return Err(Error::format(
                0,
                format!("shape {input}x{hidden}x{classes} disagrees with {} bytes", bytes.len()),
            ));
        }
        for (p, b) in net.params.iter_mut().zip(bytes[CHECKPOINT_HEADER..].chunks_exact(8)) {
            *p = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        Ok(net)
    }
}

/// SGD with momentum and coupled weight decay: `g += wd * p`,
/// `v = mu * v + g`, `p -= lr * v`. Frozen groups are skipped entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(net: &SmallNet, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; net.params.len()],
        }
    }

    pub fn step(&mut self, net: &mut SmallNet, grad: &[f64], lr: f64) {
        let split = net.head_start();
        let n = net.params.len();
        let mut ranges = Vec::with_capacity(2);
        if !net.frozen_backbone {
            ranges.push(0..split);
        }
        if !net.frozen_head {
            ranges.push(split..n);
        }
        for r in ranges {
            for i in r {
                let g = grad[i] + self.weight_decay * net.params[i];
                self.velocity[i] = self.momentum * self.velocity[i] + g;
                net.params[i] -= lr * self.velocity[i];
            }
        }
    }
}
