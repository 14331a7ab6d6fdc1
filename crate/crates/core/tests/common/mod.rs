#![allow(dead_code)]

pub mod oracles;

use photon_vae::vae::{ClassifierInput, LossWeights, Matrix, NetworkSpec, TrainNoise, Vae};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest gradient magnitude used as the relative-error denominator;
/// below it the finite-difference rounding error is no longer negligible.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Outcome of a finite-difference sweep over every trainable parameter.
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Parameters checked with a reduced step because `±step` crossed an
    /// activation kink.
    pub refined: usize,
    /// Parameters still next to a kink at a thousandth of the step; skipped.
    pub kinks: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.kinks * 100 < self.checked
    }
}

/// Random batch of bin-like inputs: five normalized probabilities plus, for
/// six inputs, a mean click count. Every fifth row is unlabeled.
pub fn random_batch(input_dim: usize, num_classes: usize, rows: usize, rng: &mut ChaCha8Rng) -> (Matrix, Vec<Option<usize>>) {
    let mut data = Vec::with_capacity(rows * input_dim);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
        if input_dim == 6 {
            data.push(rng.random_range(0.5..2.5));
        }
    }
    let labels = (0..rows)
        .map(|i| if i % 5 == 4 { None } else { Some(rng.random_range(0..num_classes)) })
        .collect();
    (Matrix::from_vec(rows, input_dim, data), labels)
}

/// Compares analytic gradients with central differences of the
/// training-mode loss (dropout off, fixed reparameterization noise, live
/// batch statistics).
pub fn gradient_check(input_dim: usize, num_classes: usize, seed: u64, step: f64) -> GradCheck {
    gradient_check_with(input_dim, num_classes, ClassifierInput::Mean, seed, step)
}

pub fn gradient_check_with(input_dim: usize, num_classes: usize, classifier_input: ClassifierInput, seed: u64, step: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec {
        classifier_input,
        ..NetworkSpec::new(input_dim, num_classes)
    };
    let vae = Vae::new(spec, seed).unwrap();
    let (x, labels) = random_batch(input_dim, num_classes, 10, &mut rng);
    let noise = TrainNoise::without_dropout(&vae, x.rows(), &mut rng);
    let w = LossWeights::default();
    let analytic = vae.forward_backward(&x, &labels, &noise, &w).unwrap().grads;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| !n.contains("running_"))
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let (_, base_pattern) = vae.train_loss_with_pattern(&x, &labels, &noise, &w).unwrap();
    let mut probe = vae.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        refined: 0,
        kinks: 0,
    };
    for (t_idx, (name, grad)) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = probe.params.trainable()[t_idx][i];
            out.checked += 1;
            // Shrink the step until neither side crosses an activation kink.
            let mut numeric = None;
            let mut h = step;
            for _ in 0..3 {
                let mut central = |h: f64| {
                    probe.params.trainable_mut()[t_idx][i] = original + h;
                    let (up, up_pattern) = probe.train_loss_with_pattern(&x, &labels, &noise, &w).unwrap();
                    probe.params.trainable_mut()[t_idx][i] = original - h;
                    let (down, down_pattern) = probe.train_loss_with_pattern(&x, &labels, &noise, &w).unwrap();
                    probe.params.trainable_mut()[t_idx][i] = original;
                    (up_pattern == base_pattern && down_pattern == base_pattern).then_some((up.total - down.total) / (2.0 * h))
                };
                // Richardson extrapolation cancels the h² truncation term.
                if let (Some(full), Some(half)) = (central(h), central(h / 2.0)) {
                    numeric = Some((4.0 * half - full) / 3.0);
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                out.kinks += 1;
                continue;
            };
            if h < step {
                out.refined += 1;
            }
            let scale = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (a - numeric).abs() / scale;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = format!("{name}[{i}] analytic={a:e} numeric={numeric:e}");
            }
        }
    }
    out
}
