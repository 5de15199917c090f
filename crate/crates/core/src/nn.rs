//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Weights are stored row-major as `out x in`. Hidden layers use ReLU and the
//! last layer is linear.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("layer {0}: input size does not match the previous layer's output")]
    Chain(usize),
    #[error("non-finite parameter in layer {0}")]
    NonFinite(usize),
    #[error("network needs at least one layer")]
    Empty,
    #[error("unsupported checkpoint schema {0}")]
    Schema(u32),
}

fn check_dim(expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::Dim { expected, got })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`; ReLU uses 0 at the kink.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self { n_in, n_out, weights: vec![0.0; n_in * n_out], bias: vec![0.0; n_out], activation }
    }

    /// Uniform in `[-1/sqrt(n_in), 1/sqrt(n_in)]` for weights and biases.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, activation: Activation, rng: &mut R) -> Self {
        let a = 1.0 / (n_in as f64).sqrt();
        let mut d = Self::zeros(n_in, n_out, activation);
        d.weights.iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        d.bias.iter_mut().for_each(|b| *b = rng.gen_range(-a..a));
        d
    }

    fn affine(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            let mut s = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                s += w * xi;
            }
            z.push(s);
        }
    }
}

/// A feed-forward network; the parameter set shared by every caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Gradients with the same shapes as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NnError> {
        let m = Self { layers };
        m.validate()?;
        Ok(m)
    }

    /// ReLU on every layer except the last, which is linear.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Linear } else { Activation::Relu };
                Dense::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Empty);
        }
        for (i, l) in self.layers.iter().enumerate() {
            check_dim(l.n_in * l.n_out, l.weights.len())?;
            check_dim(l.n_out, l.bias.len())?;
            if i > 0 && self.layers[i - 1].n_out != l.n_in {
                return Err(NnError::Chain(i));
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(NnError::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        check_dim(self.n_in(), x.len())?;
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for l in &self.layers {
            l.affine(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|&v| l.activation.apply(v)));
        }
        Ok(a)
    }

    /// Forward pass that keeps what [`Mlp::backward_trace`] needs.
    pub fn forward_trace(&self, x: &[f64]) -> Result<(Vec<f64>, Trace), NnError> {
        check_dim(self.n_in(), x.len())?;
        let mut tr = Trace { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(self.layers.len()) };
        let mut a = x.to_vec();
        for l in &self.layers {
            let mut z = Vec::with_capacity(l.n_out);
            l.affine(&a, &mut z);
            let next = z.iter().map(|&v| l.activation.apply(v)).collect();
            tr.inputs.push(std::mem::replace(&mut a, next));
            tr.pre.push(z);
        }
        Ok((a, tr))
    }

    /// Adds the parameter gradients of `upstream . f(x)` into `grads` and
    /// returns the input gradient.
    pub fn backward_trace(&self, tr: &Trace, upstream: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>, NnError> {
        check_dim(self.n_out(), upstream.len())?;
        check_dim(self.layers.len(), tr.pre.len())?;
        let mut delta: Vec<f64> = upstream.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            for (d, &z) in delta.iter_mut().zip(&tr.pre[i]) {
                *d *= l.activation.slope(z);
            }
            let x = &tr.inputs[i];
            let (gw, gb) = &mut grads.layers[i];
            let mut dx = vec![0.0; l.n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &l.weights[o * l.n_in..(o + 1) * l.n_in];
                let grow = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                for j in 0..l.n_in {
                    grow[j] += d * x[j];
                    dx[j] += d * row[j];
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads { layers: self.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect() }
    }

    /// Flat views of every parameter tensor, weights before bias per layer.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }
}

/// Gradients of `upstream . f(x)` with respect to parameters and input.
pub fn backward(p: &Mlp, x: &[f64], upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>), NnError> {
    let (_, tr) = p.forward_trace(x)?;
    let mut g = p.zero_grads();
    let dx = p.backward_trace(&tr, upstream, &mut g)?;
    Ok((g, dx))
}

impl MlpGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()]).collect()
    }

    pub fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Euclidean norm over a set of tensors.
pub fn global_norm(tensors: &[&[f64]]) -> f64 {
    tensors.iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales tensors in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(tensors: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = tensors.iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was written.
    SkippedNonFinite,
}

/// Adam moments for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub skipped: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `shapes` lists tensor lengths in the order `update` will see them.
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            skipped: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(cfg: AdamConfig, p: &Mlp) -> Self {
        let shapes: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
        Self::new(cfg, &shapes)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<UpdateOutcome, NnError> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            check_dim(m.len(), p.len())?;
            check_dim(m.len(), g.len())?;
        }
        if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            self.skipped += 1;
            log::warn!("adam step {} skipped: non-finite gradient", self.step + 1);
            return Ok(UpdateOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(UpdateOutcome::Applied)
    }

    pub fn update_mlp(&mut self, p: &mut Mlp, g: &MlpGrads) -> Result<UpdateOutcome, NnError> {
        let mut params = p.tensors_mut();
        self.update(&mut params, &g.tensors())
    }
}

/// Serialized network: shapes, flat row-major weights and activation tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub layers: Vec<Dense>,
}

impl MlpCheckpoint {
    pub fn new(p: &Mlp, seed: u64) -> Result<Self, NnError> {
        p.check_finite()?;
        Ok(Self { schema_version: CHECKPOINT_SCHEMA, seed, layers: p.layers.clone() })
    }

    pub fn into_mlp(self) -> Result<Mlp, NnError> {
        if self.schema_version != CHECKPOINT_SCHEMA {
            return Err(NnError::Schema(self.schema_version));
        }
        Mlp::new(self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central-difference gradients of `upstream . f(x)`.
    fn numeric_grads(p: &Mlp, x: &[f64], up: &[f64], h: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let obj = |q: &Mlp, x: &[f64]| -> f64 { q.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum() };
        let mut q = p.clone();
        let mut out = Vec::new();
        let n_tensors = q.tensors().len();
        for t in 0..n_tensors {
            let len = q.tensors()[t].len();
            let mut g = vec![0.0; len];
            for i in 0..len {
                let orig = q.tensors()[t][i];
                q.tensors_mut()[t][i] = orig + h;
                let fp = obj(&q, x);
                q.tensors_mut()[t][i] = orig - h;
                let fm = obj(&q, x);
                q.tensors_mut()[t][i] = orig;
                g[i] = (fp - fm) / (2.0 * h);
            }
            out.push(g);
        }
        let mut dx = vec![0.0; x.len()];
        let mut xx = x.to_vec();
        for i in 0..x.len() {
            xx[i] = x[i] + h;
            let fp = obj(p, &xx);
            xx[i] = x[i] - h;
            let fm = obj(p, &xx);
            xx[i] = x[i];
            dx[i] = (fp - fm) / (2.0 * h);
        }
        (out, dx)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(3);
        for dims in [[9usize, 24, 24], [24, 24, 120]] {
            for _ in 0..5 {
                let p = Mlp::init(&dims, &mut r);
                let x: Vec<f64> = (0..dims[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
                let up: Vec<f64> = (0..dims[2]).map(|_| r.gen_range(-1.0..1.0)).collect();
                let (g, dx) = backward(&p, &x, &up).unwrap();
                let (ng, ndx) = numeric_grads(&p, &x, &up, 1e-5);
                for (a, b) in g.tensors().iter().zip(&ng) {
                    for (u, v) in a.iter().zip(b) {
                        assert!(rel_err(*u, *v) < 1e-4, "{u} vs {v}");
                    }
                }
                for (u, v) in dx.iter().zip(&ndx) {
                    assert!(rel_err(*u, *v) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let p = Mlp::new(vec![Dense::zeros(3, 4, Activation::Relu), Dense::zeros(4, 2, Activation::Linear)]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut d = Dense::zeros(3, 3, Activation::Linear);
        for i in 0..3 {
            d.weights[i * 3 + i] = 1.0;
        }
        let p = Mlp::new(vec![d]).unwrap();
        assert_eq!(p.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_is_pure() {
        let p = Mlp::init(&[9, 24, 24], &mut rng(1));
        let x = [0.1; 9];
        assert_eq!(p.forward(&x).unwrap(), p.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = Mlp::init(&[9, 24, 24], &mut rng(1));
        assert_eq!(p.forward(&[0.0; 8]), Err(NnError::Dim { expected: 9, got: 8 }));
        assert!(backward(&p, &[0.0; 9], &[0.0; 3]).is_err());
        let bad = Mlp::new(vec![Dense::zeros(3, 4, Activation::Relu), Dense::zeros(5, 2, Activation::Linear)]);
        assert_eq!(bad, Err(NnError::Chain(1)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = Mlp::init(&[9, 24, 24], &mut rng(2));
        let (g, dx) = backward(&p, &[0.3; 9], &[0.0; 24]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transposed_weights() {
        let p = Mlp::init(&[4, 3], &mut rng(5));
        let up = [0.5, -1.0, 2.0];
        let (_, dx) = backward(&p, &[1.0, 2.0, 3.0, 4.0], &up).unwrap();
        let l = &p.layers[0];
        for j in 0..4 {
            let expect: f64 = (0..3).map(|o| l.weights[o * 4 + j] * up[o]).sum();
            assert_eq!(dx[j], expect);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Mlp::init(&[3, 4, 2], &mut rng(7));
        let before = p.clone();
        let mut opt = Adam::for_mlp(AdamConfig::default(), &p);
        let g = p.zero_grads();
        opt.update_mlp(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn single_adam_step_matches_hand_calculation() {
        // one parameter, g = 0.5: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        // update = lr * 0.5 / (0.5 + eps)
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &[1]);
        let mut w = [1.0];
        opt.update(&mut [&mut w[..]], &[&[0.5][..]]).unwrap();
        let expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((w[0] - expect).abs() < 1e-15);
        // second step, g = -1: m = 0.9*0.05 - 0.1 = -0.055, v = 0.999*0.00025 + 0.001
        opt.update(&mut [&mut w[..]], &[&[-1.0][..]]).unwrap();
        let m = -0.055 / (1.0 - 0.81);
        let v = (0.999 * 0.00025 + 0.001) / (1.0 - 0.999f64.powi(2));
        let expect2 = expect - 0.1 * m / (v.sqrt() + 1e-8);
        assert!((w[0] - expect2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = Mlp::init(&[2, 2], &mut rng(9));
        let before = p.clone();
        let mut opt = Adam::for_mlp(AdamConfig::default(), &p);
        let mut g = p.zero_grads();
        g.layers[0].0[1] = f64::NAN;
        assert_eq!(opt.update_mlp(&mut p, &g).unwrap(), UpdateOutcome::SkippedNonFinite);
        assert_eq!(p, before);
        assert_eq!((opt.step, opt.skipped), (0, 1));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(w) = 3 w0^2 + 0.5 w1^2
        let mut opt = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() }, &[2]);
        let mut w = [2.0, -3.0];
        let f = |w: &[f64; 2]| 3.0 * w[0] * w[0] + 0.5 * w[1] * w[1];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let g = [6.0 * w[0], w[1]];
            opt.update(&mut [&mut w[..]], &[&g[..]]).unwrap();
            losses.push(f(&w));
        }
        let warm = 10;
        assert!(losses[warm..].windows(2).all(|p| p[1] < p[0]));
        assert!(losses[199] < 0.5 * losses[0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut a = vec![3.0, 4.0];
        let n = clip_global_norm(&mut [a.as_mut_slice()], 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&[&a]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let p = Mlp::init(&[9, 24, 24], &mut rng(11));
        let ck = MlpCheckpoint::new(&p, 11).unwrap();
        let s = serde_json::to_string(&ck).unwrap();
        let back: MlpCheckpoint = serde_json::from_str(&s).unwrap();
        assert_eq!(back.into_mlp().unwrap(), p);
        let mut bad = p.clone();
        bad.layers[1].bias[0] = f64::INFINITY;
        assert!(MlpCheckpoint::new(&bad, 0).is_err());
    }
}
