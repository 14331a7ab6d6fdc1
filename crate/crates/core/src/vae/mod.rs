//! Variational autoencoder with a latent-space classifier, implemented
//! directly on `f64` buffers with analytic backpropagation.
//!
//! The encoder maps bin statistics to a Gaussian posterior `(mu, logvar)`,
//! a sample `z = mu + σ·ε` feeds both the decoder (reconstruction) and the
//! classifier, and training minimizes reconstruction + KL + classification
//! loss jointly.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{Activation, BatchNorm, Dense, Mlp};
pub use loss::{loss_bce, loss_categorical, loss_kl, loss_recon, loss_total, LossBreakdown, LossWeights};
pub use matrix::Matrix;
pub use model::{reparameterize, ClassifierInput, Mode, NetworkSpec, TrainNoise, TrainStep, Vae, VaeParams};
pub use optim::{Adam, AdamConfig};
pub use train::{fit, train_step, EpochRecord, InputFeatures, TrainConfig, TrainHistory, TrainingData};
