use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, DropoutMasks, Mlp, MlpCache};
use super::loss::{
    loss_bce, loss_categorical, loss_kl, loss_recon, sigmoid, softmax, LossBreakdown, LossWeights,
    PROB_CLAMP,
};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Layer layout and regularization of the autoencoder and its classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    /// Hidden widths; the decoder's output layer always has `input_dim` units.
    pub decoder_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
}

/// What the classifier reads during training. Inference always uses `mu`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The latent mean.
    #[default]
    Mean,
    /// The reparameterized sample `z`. Under the unweighted loss this
    /// tends to collapse: the KL price of carrying the label through `z`
    /// matches what the cross-entropy gains.
    Sample,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            latent_dim: 3,
            encoder_widths: vec![16, 32, 64, 32, 16],
            decoder_widths: vec![8, 16, 32, 16],
            classifier_widths: vec![16, 8],
            num_classes,
            dropout_rate: 0.2,
            leaky_slope: 0.01,
            classifier_input: ClassifierInput::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidPlan(format!("network spec: {msg}")));
        if self.input_dim == 0 || self.latent_dim == 0 {
            return bad("input and latent dimensions must be positive");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must be in [0, 1)");
        }
        if self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain(&self.classifier_widths)
            .any(|&w| w == 0)
        {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Binary problems use a single sigmoid unit, larger ones a softmax.
    pub fn head_width(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes == 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout; deterministic.
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
}

impl VaeParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.trainable();
        v.extend(self.decoder.trainable());
        v.extend(self.classifier.trainable());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.trainable_mut();
        v.extend(self.decoder.trainable_mut());
        v.extend(self.classifier.trainable_mut());
        v
    }

    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = self.encoder.named_tensors("encoder");
        v.extend(self.decoder.named_tensors("decoder"));
        v.extend(self.classifier.named_tensors("classifier"));
        v
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.encoder.all_tensors_mut();
        v.extend(self.decoder.all_tensors_mut());
        v.extend(self.classifier.all_tensors_mut());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Random quantities of one training pass, drawn up front so the pass is a
/// deterministic function of parameters and batch.
#[derive(Clone, Debug)]
pub struct TrainNoise {
    pub encoder: DropoutMasks,
    pub decoder: DropoutMasks,
    pub classifier: DropoutMasks,
    /// Standard-normal draws for the reparameterization, `rows × latent_dim`.
    pub eps: Matrix,
}

impl TrainNoise {
    pub fn sample<R: Rng + ?Sized>(vae: &Vae, rows: usize, rng: &mut R) -> Self {
        let encoder = vae.params.encoder.sample_masks(rows, rng);
        let decoder = vae.params.decoder.sample_masks(rows, rng);
        let classifier = vae.params.classifier.sample_masks(rows, rng);
        let eps = standard_normal(rows, vae.spec.latent_dim, rng);
        Self {
            encoder,
            decoder,
            classifier,
            eps,
        }
    }

    /// Reparameterization noise only; every dropout mask disabled.
    pub fn without_dropout<R: Rng + ?Sized>(vae: &Vae, rows: usize, rng: &mut R) -> Self {
        Self {
            encoder: vec![None; vae.params.encoder.hidden.len()],
            decoder: vec![None; vae.params.decoder.hidden.len()],
            classifier: vec![None; vae.params.classifier.hidden.len()],
            eps: standard_normal(rows, vae.spec.latent_dim, rng),
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `z = mu + exp(logvar / 2) · eps`.
pub fn reparameterize(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Matrix {
    assert_eq!((mu.rows(), mu.cols()), (logvar.rows(), logvar.cols()));
    assert_eq!((mu.rows(), mu.cols()), (eps.rows(), eps.cols()));
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Matrix::from_vec(mu.rows(), mu.cols(), data)
}

/// Result of a training-mode forward and backward pass.
pub struct TrainStep {
    pub loss: LossBreakdown,
    pub grads: VaeParams,
    caches: [MlpCache; 3],
}

/// Variational autoencoder with a classifier reading the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub spec: NetworkSpec,
    pub params: VaeParams,
}

impl Vae {
    /// Fresh network; `seed` fixes the weight initialization.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selu = Activation::Selu;
        let leaky = Activation::LeakyRelu {
            slope: spec.leaky_slope,
        };
        let p = spec.dropout_rate;
        let encoder = Mlp::new(spec.input_dim, &spec.encoder_widths, 2 * spec.latent_dim, selu, p, &mut rng);
        let decoder = Mlp::new(spec.latent_dim, &spec.decoder_widths, spec.input_dim, selu, p, &mut rng);
        let classifier = Mlp::new(spec.latent_dim, &spec.classifier_widths, spec.head_width(), leaky, p, &mut rng);
        Ok(Self {
            spec,
            params: VaeParams {
                encoder,
                decoder,
                classifier,
            },
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.latent_dim,
                got: z.cols(),
            });
        }
        Ok(())
    }

    fn run<R: Rng + ?Sized>(net: &Mlp, x: &Matrix, mode: Mode, rng: &mut R) -> Matrix {
        match mode {
            Mode::Inference => net.forward_inference(x),
            Mode::Train => {
                let masks = net.sample_masks(x.rows(), rng);
                net.forward_train(x, &masks).0
            }
        }
    }

    /// Latent mean and log-variance of each row of `x`.
    pub fn encode<R: Rng + ?Sized>(&self, x: &Matrix, mode: Mode, rng: &mut R) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let out = Self::run(&self.params.encoder, x, mode, rng);
        let l = self.spec.latent_dim;
        Ok((out.columns(0, l), out.columns(l, 2 * l)))
    }

    pub fn decode<R: Rng + ?Sized>(&self, z: &Matrix, mode: Mode, rng: &mut R) -> Result<Matrix> {
        self.check_latent(z)?;
        Ok(Self::run(&self.params.decoder, z, mode, rng))
    }

    /// Class probabilities: one column (probability of class 1) for binary
    /// problems, `num_classes` columns otherwise.
    pub fn classify<R: Rng + ?Sized>(&self, z: &Matrix, mode: Mode, rng: &mut R) -> Result<Matrix> {
        self.check_latent(z)?;
        let logits = Self::run(&self.params.classifier, z, mode, rng);
        Ok(self.head_probs(&logits))
    }

    fn head_probs(&self, logits: &Matrix) -> Matrix {
        if self.spec.is_binary() {
            let data = logits.data().iter().map(|&l| sigmoid(l)).collect();
            Matrix::from_vec(logits.rows(), 1, data)
        } else {
            let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|i| softmax(logits.row(i))).collect();
            Matrix::from_rows(&rows)
        }
    }

    /// Latent means in inference mode.
    pub fn latent_means(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let out = self.params.encoder.forward_inference(x);
        Ok(out.columns(0, self.spec.latent_dim))
    }

    /// Inference-mode class probabilities with `z = mu`.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mu = self.latent_means(x)?;
        let logits = self.params.classifier.forward_inference(&mu);
        Ok(self.head_probs(&logits))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let probs = self.predict_proba(x)?;
        Ok((0..probs.rows())
            .map(|i| {
                let row = probs.row(i);
                if self.spec.is_binary() {
                    usize::from(row[0] > 0.5)
                } else {
                    argmax(row)
                }
            })
            .collect())
    }

    /// Deterministic loss with `z = mu` and running statistics; used for
    /// validation and early stopping.
    pub fn evaluate_loss(&self, x: &Matrix, labels: &[Option<usize>], weights: &LossWeights) -> Result<LossBreakdown> {
        self.check_input(x)?;
        let enc = self.params.encoder.forward_inference(x);
        let l = self.spec.latent_dim;
        let (mu, logvar) = (enc.columns(0, l), enc.columns(l, 2 * l));
        let x_hat = self.params.decoder.forward_inference(&mu);
        let logits = self.params.classifier.forward_inference(&mu);
        let class = self.class_loss(&self.head_probs(&logits), labels);
        Ok(LossBreakdown::new(loss_recon(x, &x_hat), loss_kl(&mu, &logvar), class, weights))
    }

    fn class_loss(&self, probs: &Matrix, labels: &[Option<usize>]) -> f64 {
        let labeled: Vec<(usize, usize)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (i, c)))
            .collect();
        if self.spec.is_binary() {
            let y: Vec<f64> = labeled.iter().map(|&(_, c)| c as f64).collect();
            let p: Vec<f64> = labeled.iter().map(|&(i, _)| probs.get(i, 0)).collect();
            loss_bce(&y, &p)
        } else {
            let cs: Vec<usize> = labeled.iter().map(|&(_, c)| c).collect();
            let ps: Vec<&[f64]> = labeled.iter().map(|&(i, _)| probs.row(i)).collect();
            loss_categorical(&cs, &ps)
        }
    }

    fn check_batch(&self, x: &Matrix, labels: &[Option<usize>], noise: &TrainNoise) -> Result<()> {
        self.check_input(x)?;
        if labels.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: labels.len(),
            });
        }
        if let Some(&c) = labels.iter().flatten().find(|&&c| c >= self.spec.num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {c} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        if noise.eps.rows() != x.rows() || noise.eps.cols() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: x.rows() * self.spec.latent_dim,
                got: noise.eps.rows() * noise.eps.cols(),
            });
        }
        Ok(())
    }

    /// Training-mode loss for fixed noise, without gradients.
    pub fn train_loss(&self, x: &Matrix, labels: &[Option<usize>], noise: &TrainNoise, weights: &LossWeights) -> Result<LossBreakdown> {
        Ok(self.train_loss_with_pattern(x, labels, noise, weights)?.0)
    }

    /// [`Vae::train_loss`] together with the sign of every hidden
    /// pre-activation. Two parameter settings with the same pattern lie on
    /// the same smooth piece of the loss.
    pub fn train_loss_with_pattern(
        &self,
        x: &Matrix,
        labels: &[Option<usize>],
        noise: &TrainNoise,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Vec<bool>)> {
        self.check_batch(x, labels, noise)?;
        let l = self.spec.latent_dim;
        let (enc, enc_cache) = self.params.encoder.forward_train(x, &noise.encoder);
        let (mu, logvar) = (enc.columns(0, l), enc.columns(l, 2 * l));
        let z = reparameterize(&mu, &logvar, &noise.eps);
        let (x_hat, dec_cache) = self.params.decoder.forward_train(&z, &noise.decoder);
        let cls_in = self.classifier_train_input(&mu, &z);
        let (logits, cls_cache) = self.params.classifier.forward_train(cls_in, &noise.classifier);
        let class = self.class_loss(&self.head_probs(&logits), labels);
        let pattern = enc_cache
            .activation_pattern()
            .chain(dec_cache.activation_pattern())
            .chain(cls_cache.activation_pattern())
            .collect();
        Ok((LossBreakdown::new(loss_recon(x, &x_hat), loss_kl(&mu, &logvar), class, weights), pattern))
    }

    /// Training-mode loss and its exact gradient with respect to every
    /// trainable tensor. Gradients flow through `mu` and `logvar`, not
    /// through the noise.
    pub fn forward_backward(&self, x: &Matrix, labels: &[Option<usize>], noise: &TrainNoise, weights: &LossWeights) -> Result<TrainStep> {
        self.check_batch(x, labels, noise)?;
        let rows = x.rows();
        let n = rows as f64;
        let l = self.spec.latent_dim;
        let p = &self.params;

        let (enc, enc_cache) = p.encoder.forward_train(x, &noise.encoder);
        let (mu, logvar) = (enc.columns(0, l), enc.columns(l, 2 * l));
        let z = reparameterize(&mu, &logvar, &noise.eps);
        let (x_hat, dec_cache) = p.decoder.forward_train(&z, &noise.decoder);
        let cls_in = self.classifier_train_input(&mu, &z);
        let (logits, cls_cache) = p.classifier.forward_train(cls_in, &noise.classifier);
        let probs = self.head_probs(&logits);

        let recon = loss_recon(x, &x_hat);
        let kl = loss_kl(&mu, &logvar);
        let class = self.class_loss(&probs, labels);
        let loss = LossBreakdown::new(recon, kl, class, weights);

        let mut grads = p.zeros_like();

        let scale = 2.0 * weights.recon / (rows * self.spec.input_dim) as f64;
        let d_xhat_data = x_hat
            .data()
            .iter()
            .zip(x.data())
            .map(|(xh, xv)| scale * (xh - xv))
            .collect();
        let d_xhat = Matrix::from_vec(rows, self.spec.input_dim, d_xhat_data);
        let dz_dec = p.decoder.backward(&dec_cache, &noise.decoder, &d_xhat, &mut grads.decoder);

        let d_logits = self.class_logit_grad(&probs, labels, weights.class);
        let dz_cls = p.classifier.backward(&cls_cache, &noise.classifier, &d_logits, &mut grads.classifier);

        let mut d_enc = Matrix::zeros(rows, 2 * l);
        for b in 0..rows {
            for j in 0..l {
                let m = mu.get(b, j);
                let lv = logvar.get(b, j);
                let (dz, dm) = match self.spec.classifier_input {
                    ClassifierInput::Sample => (dz_dec.get(b, j) + dz_cls.get(b, j), 0.0),
                    ClassifierInput::Mean => (dz_dec.get(b, j), dz_cls.get(b, j)),
                };
                let sigma = (0.5 * lv).exp();
                let d_mu = dz + dm + weights.kl * m / n;
                let d_lv = dz * noise.eps.get(b, j) * 0.5 * sigma + weights.kl * (lv.exp() - 1.0) / (2.0 * n);
                d_enc.set(b, j, d_mu);
                d_enc.set(b, l + j, d_lv);
            }
        }
        p.encoder.backward(&enc_cache, &noise.encoder, &d_enc, &mut grads.encoder);

        for (name, t) in grads.named_tensors() {
            if let Some(v) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} ({v}); loss terms recon={recon} kl={kl} class={class}"
                )));
            }
        }
        Ok(TrainStep {
            loss,
            grads,
            caches: [enc_cache, dec_cache, cls_cache],
        })
    }

    fn classifier_train_input<'a>(&self, mu: &'a Matrix, z: &'a Matrix) -> &'a Matrix {
        match self.spec.classifier_input {
            ClassifierInput::Mean => mu,
            ClassifierInput::Sample => z,
        }
    }

    fn class_logit_grad(&self, probs: &Matrix, labels: &[Option<usize>], weight: f64) -> Matrix {
        let width = self.spec.head_width();
        let mut d = Matrix::zeros(probs.rows(), width);
        let n_labeled = labels.iter().flatten().count();
        if n_labeled == 0 {
            return d;
        }
        let scale = weight / n_labeled as f64;
        let inside = |p: f64| p > PROB_CLAMP.0 && p < PROB_CLAMP.1;
        for (i, label) in labels.iter().enumerate() {
            let Some(c) = *label else { continue };
            if self.spec.is_binary() {
                let p = probs.get(i, 0);
                if inside(p) {
                    d.set(i, 0, scale * (p - c as f64));
                }
            } else if inside(probs.get(i, c)) {
                for k in 0..width {
                    let target = if k == c { 1.0 } else { 0.0 };
                    d.set(i, k, scale * (probs.get(i, k) - target));
                }
            }
        }
        d
    }

    /// Folds a step's batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, step: &TrainStep) {
        self.params.encoder.update_running_stats(&step.caches[0]);
        self.params.decoder.update_running_stats(&step.caches[1]);
        self.params.classifier.update_running_stats(&step.caches[2]);
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
