//! Dense layers, batch normalization and the hidden-layer stacks used by the
//! encoder, decoder and classifier, with hand-written backward passes.
//!
//! A hidden layer computes `dropout(act(batchnorm(W·x + b)))`. The output
//! layer of every stack is a plain affine map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Selu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Affine map `y = W·x + b`, `W` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Fan-in scaled uniform weights on `±sqrt(3 / fan_in)` (unit-variance
    /// preserving for SELU), zero biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (3.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.inputs, "dense input width");
        let mut y = Matrix::zeros(x.rows(), self.outputs);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let yr = y.row_mut(b);
            for (o, out) in yr.iter_mut().enumerate() {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                *out = self.bias[o] + dot(w, xr);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        let mut dx = Matrix::zeros(x.rows(), self.inputs);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let dyr = dy.row(b);
            let dxr = dx.row_mut(b);
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let gw = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    gw[i] += g * xr[i];
                    dxr[i] += g * w[i];
                }
            }
        }
        dx
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            gamma: vec![0.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for j in 0..self.width() {
            self.running_mean[j] = BN_MOMENTUM * self.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
            self.running_var[j] = BN_MOMENTUM * self.running_var[j] + (1.0 - BN_MOMENTUM) * var[j];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenLayer {
    pub dense: Dense,
    pub norm: BatchNorm,
}

/// A stack of hidden layers followed by an affine output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Vec<HiddenLayer>,
    pub output: Dense,
    pub activation: Activation,
    pub dropout: f64,
}

/// Dropout masks for one forward pass, one per hidden layer; each entry is
/// `0` or `1 / (1 - rate)`.
pub type DropoutMasks = Vec<Option<Matrix>>;

struct HiddenCache {
    input: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    pre_act: Matrix,
}

/// Intermediate values of a training-mode pass.
pub struct MlpCache {
    hidden: Vec<HiddenCache>,
    last_hidden: Matrix,
    /// `(batch mean, batch variance)` of every normalized layer.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpCache {
    /// Which hidden pre-activations were positive, in layer/row/unit order.
    pub fn activation_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden
            .iter()
            .flat_map(|c| c.pre_act.data().iter().map(|&v| v > 0.0))
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        widths: &[usize],
        output: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            hidden.push(HiddenLayer {
                dense: Dense::init(fan_in, w, rng),
                norm: BatchNorm::new(w),
            });
            fan_in = w;
        }
        Self {
            hidden,
            output: Dense::init(fan_in, output, rng),
            activation,
            dropout,
        }
    }

    /// Same shapes, every value zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    dense: Dense::zeros(h.dense.inputs, h.dense.outputs),
                    norm: BatchNorm::zeros(h.norm.width()),
                })
                .collect(),
            output: Dense::zeros(self.output.inputs, self.output.outputs),
            activation: self.activation,
            dropout: self.dropout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.output.inputs, |h| h.dense.inputs)
    }

    pub fn output_width(&self) -> usize {
        self.output.outputs
    }

    /// Draws dropout masks for a batch of `rows` samples. Layers get no mask
    /// when the rate is zero.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DropoutMasks {
        self.hidden
            .iter()
            .map(|h| {
                if self.dropout <= 0.0 {
                    return None;
                }
                let keep = 1.0 - self.dropout;
                let scale = 1.0 / keep;
                let data = (0..rows * h.dense.outputs)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                Some(Matrix::from_vec(rows, h.dense.outputs, data))
            })
            .collect()
    }

    /// Deterministic pass using running normalization statistics and no
    /// dropout.
    pub fn forward_inference(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for layer in &self.hidden {
            let mut a = layer.dense.forward(&h);
            let n = &layer.norm;
            for b in 0..a.rows() {
                for (j, v) in a.row_mut(b).iter_mut().enumerate() {
                    let xhat = (*v - n.running_mean[j]) / (n.running_var[j] + BN_EPS).sqrt();
                    *v = self.activation.apply(n.gamma[j] * xhat + n.beta[j]);
                }
            }
            h = a;
        }
        self.output.forward(&h)
    }

    /// Training pass: batch statistics and the supplied dropout masks.
    pub fn forward_train(&self, x: &Matrix, masks: &DropoutMasks) -> (Matrix, MlpCache) {
        assert_eq!(masks.len(), self.hidden.len(), "one mask slot per hidden layer");
        let rows = x.rows() as f64;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut batch_stats = Vec::with_capacity(self.hidden.len());
        for (layer, mask) in self.hidden.iter().zip(masks) {
            let a = layer.dense.forward(&h);
            let width = a.cols();
            let mut mean = vec![0.0; width];
            for b in 0..a.rows() {
                for (m, v) in mean.iter_mut().zip(a.row(b)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows);
            let mut var = vec![0.0; width];
            for b in 0..a.rows() {
                for ((s, v), m) in var.iter_mut().zip(a.row(b)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

            let mut xhat = Matrix::zeros(a.rows(), width);
            let mut pre_act = Matrix::zeros(a.rows(), width);
            let mut out = Matrix::zeros(a.rows(), width);
            for b in 0..a.rows() {
                for j in 0..width {
                    let xh = (a.get(b, j) - mean[j]) * inv_std[j];
                    let y = layer.norm.gamma[j] * xh + layer.norm.beta[j];
                    let mut o = self.activation.apply(y);
                    if let Some(m) = mask {
                        o *= m.get(b, j);
                    }
                    xhat.set(b, j, xh);
                    pre_act.set(b, j, y);
                    out.set(b, j, o);
                }
            }
            caches.push(HiddenCache {
                input: h,
                xhat,
                inv_std,
                pre_act,
            });
            batch_stats.push((mean, var));
            h = out;
        }
        let y = self.output.forward(&h);
        (
            y,
            MlpCache {
                hidden: caches,
                last_hidden: h,
                batch_stats,
            },
        )
    }

    /// Backpropagates `dy` through a cached training pass, accumulating
    /// parameter gradients into `grad`. Returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, masks: &DropoutMasks, dy: &Matrix, grad: &mut Mlp) -> Matrix {
        let mut d = self.output.backward(&cache.last_hidden, dy, &mut grad.output);
        for (k, layer) in self.hidden.iter().enumerate().rev() {
            let c = &cache.hidden[k];
            let g = &mut grad.hidden[k];
            let rows = d.rows();
            let width = d.cols();
            // through dropout and activation
            let mut dy_norm = Matrix::zeros(rows, width);
            for b in 0..rows {
                for j in 0..width {
                    let mut v = d.get(b, j);
                    if let Some(m) = &masks[k] {
                        v *= m.get(b, j);
                    }
                    dy_norm.set(b, j, v * self.activation.derivative(c.pre_act.get(b, j)));
                }
            }
            // through batch normalization with batch statistics
            let mut sum_dxhat = vec![0.0; width];
            let mut sum_dxhat_xhat = vec![0.0; width];
            let mut dxhat = Matrix::zeros(rows, width);
            for b in 0..rows {
                for j in 0..width {
                    let dyv = dy_norm.get(b, j);
                    let xh = c.xhat.get(b, j);
                    g.norm.gamma[j] += dyv * xh;
                    g.norm.beta[j] += dyv;
                    let dx = dyv * layer.norm.gamma[j];
                    dxhat.set(b, j, dx);
                    sum_dxhat[j] += dx;
                    sum_dxhat_xhat[j] += dx * xh;
                }
            }
            let n = rows as f64;
            let mut da = Matrix::zeros(rows, width);
            for b in 0..rows {
                for j in 0..width {
                    let v = c.inv_std[j] / n
                        * (n * dxhat.get(b, j) - sum_dxhat[j] - c.xhat.get(b, j) * sum_dxhat_xhat[j]);
                    da.set(b, j, v);
                }
            }
            d = layer.dense.backward(&c.input, &da, &mut g.dense);
        }
        d
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &MlpCache) {
        for (layer, (mean, var)) in self.hidden.iter_mut().zip(&cache.batch_stats) {
            layer.norm.update_running(mean, var);
        }
    }

    /// Trainable tensors in checkpoint order.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for h in &self.hidden {
            out.push(&h.dense.weight);
            out.push(&h.dense.bias);
            out.push(&h.norm.gamma);
            out.push(&h.norm.beta);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for h in &mut self.hidden {
            out.push(&mut h.dense.weight);
            out.push(&mut h.dense.bias);
            out.push(&mut h.norm.gamma);
            out.push(&mut h.norm.beta);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    /// Every stored tensor (trainable and running statistics) with a name,
    /// in checkpoint order.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, h) in self.hidden.iter().enumerate() {
            out.push((format!("{prefix}.hidden{i}.weight"), &h.dense.weight));
            out.push((format!("{prefix}.hidden{i}.bias"), &h.dense.bias));
            out.push((format!("{prefix}.hidden{i}.gamma"), &h.norm.gamma));
            out.push((format!("{prefix}.hidden{i}.beta"), &h.norm.beta));
            out.push((format!("{prefix}.hidden{i}.running_mean"), &h.norm.running_mean));
            out.push((format!("{prefix}.hidden{i}.running_var"), &h.norm.running_var));
        }
        out.push((format!("{prefix}.output.weight"), &self.output.weight));
        out.push((format!("{prefix}.output.bias"), &self.output.bias));
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for h in &mut self.hidden {
            out.push(&mut h.dense.weight);
            out.push(&mut h.dense.bias);
            out.push(&mut h.norm.gamma);
            out.push(&mut h.norm.beta);
            out.push(&mut h.norm.running_mean);
            out.push(&mut h.norm.running_var);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selu_is_continuous_at_zero() {
        let f = Activation::Selu;
        assert!((f.apply(1e-12) - f.apply(-1e-12)).abs() < 1e-11);
        assert_eq!(f.apply(0.0), 0.0);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Selu, Activation::LeakyRelu { slope: 0.01 }] {
            for &x in &[-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn dropout_keep_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(3, &[16], 2, Activation::Selu, 0.2, &mut rng);
        let passes = 10_000;
        let mut kept = vec![0usize; 16];
        for _ in 0..passes {
            let masks = mlp.sample_masks(1, &mut rng);
            let m = masks[0].as_ref().unwrap();
            for (k, &v) in kept.iter_mut().zip(m.row(0)) {
                if v != 0.0 {
                    *k += 1;
                    assert!((v - 1.25).abs() < 1e-12);
                }
            }
        }
        for k in kept {
            let freq = k as f64 / passes as f64;
            assert!((freq - 0.8).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn running_stats_track_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(2, &[4], 1, Activation::Selu, 0.0, &mut rng);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let masks = mlp.sample_masks(3, &mut rng);
        let (_, cache) = mlp.forward_train(&x, &masks);
        mlp.update_running_stats(&cache);
        let (mean, var) = &cache.batch_stats[0];
        for j in 0..4 {
            assert!((mlp.hidden[0].norm.running_mean[j] - 0.1 * mean[j]).abs() < 1e-12);
            assert!((mlp.hidden[0].norm.running_var[j] - (0.9 + 0.1 * var[j])).abs() < 1e-12);
            assert!(mlp.hidden[0].norm.running_var[j] >= 0.0);
        }
    }
}
