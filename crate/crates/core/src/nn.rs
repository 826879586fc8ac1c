//! Fully connected networks with hand-written reverse mode, optimizers and a
//! versioned checkpoint format.
//!
//! Batches are stored column-wise: an input batch is `in x B`, so layer `l`
//! computes `z = W_l a + b_l` with `W_l` of shape `out x in`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Parameters of a multi-layer perceptron. Cloning yields an independent copy.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Per-parameter derivatives, shaped like the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    pub activations: Vec<DMatrix<f64>>,
    pub pre_activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("at least the input")
    }
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases. Hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output widths");
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Layer {
                    weights: DMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng)),
                    bias: DVector::zeros(fan_out),
                    activation: if l + 1 == n { output } else { hidden },
                }
            })
            .collect();
        MlpParams { layer_sizes: layer_sizes.to_vec(), layers }
    }

    pub fn zeros(layer_sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|l| Layer {
                weights: DMatrix::zeros(layer_sizes[l + 1], layer_sizes[l]),
                bias: DVector::zeros(layer_sizes[l + 1]),
                activation: if l + 1 == n { output } else { hidden },
            })
            .collect();
        MlpParams { layer_sizes: layer_sizes.to_vec(), layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.forward_batch(&x)?.column(0).iter().copied().collect())
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.nrows() });
        }
        let mut a = x.clone();
        for layer in &self.layers {
            let mut z = &layer.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            z.apply(|v| *v = layer.activation.apply(*v));
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cache(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.nrows() });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let mut z = &layer.weights * activations.last().expect("pushed above");
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let y = z.map(|v| layer.activation.apply(v));
            pre_activations.push(z);
            activations.push(y);
        }
        Ok(ForwardCache { activations, pre_activations })
    }

    /// Reverse pass. `upstream` is `dL/d(output)`, shaped like the output
    /// batch. Parameter gradients are summed over the batch; the second value
    /// is `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> Result<(GradientSet, DMatrix<f64>)> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::DimensionMismatch { expected: out.len(), got: upstream.len() });
        }
        let n = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut bias = vec![DVector::zeros(0); n];
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let z = &cache.pre_activations[l];
            let y = &cache.activations[l + 1];
            delta.zip_zip_apply(z, y, |d, z, y| *d *= layer.activation.derivative(z, y));
            weights[l] = &delta * cache.activations[l].transpose();
            bias[l] = delta.column_sum();
            delta = layer.weights.transpose() * &delta;
        }
        Ok((GradientSet { weights, bias }, delta))
    }

    /// Flattened parameters, layer by layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                v.extend(l.weights.row(r).iter());
            }
            v.extend(l.bias.iter());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = it.next().expect("length checked");
                }
            }
            for b in l.bias.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParams) -> Self {
        GradientSet {
            weights: params.layers.iter().map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
            bias: params.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.bias.iter_mut().for_each(|b| *b *= s);
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.bias.iter().map(|b| b.norm_squared()).sum::<f64>();
        sq.sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            for r in 0..w.nrows() {
                v.extend(w.row(r).iter());
            }
            v.extend(b.iter());
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)) && self.bias.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

/// Plain gradient step `p <- p - lr * g`.
pub fn sgd_step(params: &mut MlpParams, grads: &GradientSet, lr: f64) {
    for ((l, gw), gb) in params.layers.iter_mut().zip(&grads.weights).zip(&grads.bias) {
        l.weights.zip_apply(gw, |p, g| *p -= lr * g);
        l.bias.zip_apply(gb, |p, g| *p -= lr * g);
    }
}

/// Adaptive-moment optimizer with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: GradientSet,
    v: GradientSet,
}

impl Adam {
    pub fn new(params: &MlpParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &GradientSet, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let (gw, gb) = (&grads.weights[l], &grads.bias[l]);
            for i in 0..gw.len() {
                update(&mut layer.weights[i], &mut self.m.weights[l][i], &mut self.v.weights[l][i], gw[i]);
            }
            for i in 0..gb.len() {
                update(&mut layer.bias[i], &mut self.m.bias[l][i], &mut self.v.bias[l][i], gb[i]);
            }
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut MlpParams, grads: &GradientSet, lr: f64) {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(a) => a.step(params, grads, lr),
        }
    }
}

/// `target <- (1 - rho) target + rho online`.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, rho: f64) -> Result<()> {
    if !target.same_shape(online) {
        return Err(Error::DimensionMismatch { expected: target.n_params(), got: online.n_params() });
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        t.weights.zip_apply(&o.weights, |a, b| *a = (1.0 - rho) * *a + rho * b);
        t.bias.zip_apply(&o.bias, |a, b| *a = (1.0 - rho) * *a + rho * b);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    activation: Activation,
    /// Row-major, `out x in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk form of one or more named networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    networks: Vec<(String, Vec<usize>, Vec<LayerRecord>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, networks: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, params: &MlpParams) {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerRecord {
                activation: l.activation,
                weights: (0..l.weights.nrows()).flat_map(|r| l.weights.row(r).iter().copied().collect::<Vec<_>>()).collect(),
                bias: l.bias.iter().copied().collect(),
            })
            .collect();
        self.networks.push((name.to_string(), params.layer_sizes.clone(), layers));
    }

    pub fn get(&self, name: &str) -> Result<MlpParams> {
        let (_, sizes, records) = self
            .networks
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::config("checkpoint", format!("no network named {name}")))?;
        if records.len() + 1 != sizes.len() {
            return Err(Error::config("checkpoint", "layer count does not match layer_sizes"));
        }
        let layers = records
            .iter()
            .enumerate()
            .map(|(l, r)| {
                let (rows, cols) = (sizes[l + 1], sizes[l]);
                if r.weights.len() != rows * cols || r.bias.len() != rows {
                    return Err(Error::DimensionMismatch { expected: rows * cols, got: r.weights.len() });
                }
                Ok(Layer {
                    weights: DMatrix::from_row_slice(rows, cols, &r.weights),
                    bias: DVector::from_column_slice(&r.bias),
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpParams { layer_sizes: sizes.clone(), layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: ck.format_version, expected: CHECKPOINT_VERSION });
        }
        Ok(ck)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(w: f64, b: f64) -> MlpParams {
        let mut p = MlpParams::zeros(&[1, 1], Activation::Identity, Activation::Identity);
        p.layers[0].weights[(0, 0)] = w;
        p.layers[0].bias[0] = b;
        p
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(&[3, 5, 2], Activation::Relu, Activation::Identity);
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_net() {
        let p = scalar_net(2.5, -0.5);
        assert_eq!(p.forward(&[2.0]).unwrap(), vec![4.5]);
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::new(&[4, 6, 5, 3], Activation::Relu, Activation::Tanh, &mut rng);
        let x = [0.3, -1.2, 0.8, 2.0];
        let got = p.forward(&x).unwrap();
        let mut a: Vec<f64> = x.to_vec();
        for layer in &p.layers {
            let mut next = vec![0.0; layer.weights.nrows()];
            for (i, n) in next.iter_mut().enumerate() {
                let mut s = layer.bias[i];
                for (j, aj) in a.iter().enumerate() {
                    s += layer.weights[(i, j)] * aj;
                }
                *n = match layer.activation {
                    Activation::Relu => s.max(0.0),
                    Activation::Tanh => s.tanh(),
                    Activation::Identity => s,
                };
            }
            a = next;
        }
        for (g, e) in got.iter().zip(&a) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = scalar_net(1.0, 0.0);
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { expected: 1, got: 2 })));
    }

    #[test]
    fn hand_derivative_half_square() {
        let (w, b, x) = (1.5, 0.25, -2.0);
        let p = scalar_net(w, b);
        let xb = DMatrix::from_element(1, 1, x);
        let cache = p.forward_cache(&xb).unwrap();
        let up = cache.output().clone(); // d(y²/2)/dy = y
        let (g, gin) = p.backward(&cache, &up).unwrap();
        let y = w * x + b;
        assert_abs_diff_eq!(g.weights[0][(0, 0)], x * y, epsilon = 1e-15);
        assert_abs_diff_eq!(g.bias[0][0], y, epsilon = 1e-15);
        assert_abs_diff_eq!(gin[(0, 0)], w * y, epsilon = 1e-15);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MlpParams::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let x = DMatrix::from_element(3, 2, 0.7);
        let cache = p.forward_cache(&x).unwrap();
        let (g, gin) = p.backward(&cache, &DMatrix::zeros(2, 2)).unwrap();
        assert!(g.is_zero());
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_net(1.0, 0.0);
        let mut g = GradientSet::zeros_like(&p);
        sgd_step(&mut p, &g, 0.1);
        assert_eq!(p, scalar_net(1.0, 0.0));
        g.weights[0][(0, 0)] = 0.5;
        sgd_step(&mut p, &g, 0.1);
        assert_abs_diff_eq!(p.layers[0].weights[(0, 0)], 0.95, epsilon = 1e-15);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let mut p = scalar_net(0.0, 0.0);
        let mut g = GradientSet::zeros_like(&p);
        for _ in 0..100 {
            let w = p.layers[0].weights[(0, 0)];
            g.weights[0][(0, 0)] = 2.0 * (w - 3.0);
            sgd_step(&mut p, &g, 0.1);
        }
        assert!((p.layers[0].weights[(0, 0)] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = scalar_net(0.0, 0.0);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let w = p.layers[0].weights[(0, 0)];
            let mut g = GradientSet::zeros_like(&p);
            g.weights[0][(0, 0)] = 2.0 * (w - 3.0);
            opt.step(&mut p, &g, 0.01);
        }
        assert!((p.layers[0].weights[(0, 0)] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn soft_update_examples() {
        let mut t = scalar_net(0.0, 0.0);
        let o = scalar_net(1.0, 1.0);
        soft_update(&mut t, &o, 0.005).unwrap();
        assert_abs_diff_eq!(t.layers[0].weights[(0, 0)], 0.005, epsilon = 1e-15);
        soft_update(&mut t, &o, 1.0).unwrap();
        assert_eq!(t, o);

        let mut t = scalar_net(0.0, 0.0);
        let mut gap = 1.0;
        for _ in 0..50 {
            soft_update(&mut t, &o, 0.1).unwrap();
            let new_gap = 1.0 - t.layers[0].weights[(0, 0)];
            assert_abs_diff_eq!(new_gap / gap, 0.9, epsilon = 1e-9);
            gap = new_gap;
        }
        let other = MlpParams::zeros(&[2, 1], Activation::Identity, Activation::Identity);
        assert!(soft_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = MlpParams::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng);
        let mut b = a.clone();
        b.layers[0].weights[(0, 0)] += 1.0;
        assert_ne!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MlpParams::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let mut ck = Checkpoint::new();
        ck.insert("actor", &a);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().get("actor").unwrap();
        assert_eq!(a, back);

        let mut bad: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        bad["format_version"] = 99.into();
        std::fs::write(&path, bad.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointVersion { found: 99, .. })));
    }
}
