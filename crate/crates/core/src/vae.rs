//! Variational autoencoder over concentration profiles.
//!
//! The encoder trunk feeds two linear heads producing the posterior mean and
//! log-variance; the decoder maps a latent sample back to a scaled profile.
//! Profiles are scaled by a single constant (the training-set maximum
//! concentration) so the network works on values in `[0, 1]`.

use std::slice;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    self, backward, flatten_grads, forward, Activation, AdamConfig, AdamState, DenseLayer, Matrix, NnError,
    Parameters,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// True concentrations at or below this value (mg/L) are excluded from MAPE.
pub const MAPE_EXCLUSION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: reconstruction={reconstruction}, kl={kl}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        reconstruction: f64,
        kl: f64,
    },
    #[error("profile scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("invalid training config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 97,
            encoder_hidden: vec![64, 32],
            latent_dim: 8,
            decoder_hidden: vec![32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub format_version: u32,
    pub encoder_trunk: Vec<DenseLayer>,
    pub mu_head: DenseLayer,
    pub logvar_head: DenseLayer,
    pub decoder: Vec<DenseLayer>,
    pub latent_dim: usize,
    /// Concentration (mg/L) that maps to 1.0 in network space.
    pub profile_scale: f64,
    pub profile_transform: ProfileTransform,
}

/// Map from concentrations (mg/L) to network space. Both variants send 0 to
/// 0 and `profile_scale` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileTransform {
    /// `c / scale`.
    Linear,
    /// `ln(1 + c/floor) / ln(1 + scale/floor)`: relative resolution down to `floor`.
    Log { floor: f64 },
}

impl Default for ProfileTransform {
    fn default() -> Self {
        ProfileTransform::Log { floor: 1e-4 }
    }
}

impl ProfileTransform {
    pub fn validate(&self) -> Result<(), VaeError> {
        match *self {
            ProfileTransform::Linear => Ok(()),
            ProfileTransform::Log { floor } if floor > 0.0 && floor.is_finite() => Ok(()),
            ProfileTransform::Log { .. } => Err(VaeError::InvalidConfig {
                field: "training.profile_transform.floor",
                reason: "must be positive".into(),
            }),
        }
    }

    #[inline]
    pub fn forward(&self, c: f64, scale: f64) -> f64 {
        match *self {
            ProfileTransform::Linear => c / scale,
            ProfileTransform::Log { floor } => (c / floor).ln_1p() / (scale / floor).ln_1p(),
        }
    }

    #[inline]
    pub fn inverse(&self, s: f64, scale: f64) -> f64 {
        match *self {
            ProfileTransform::Linear => s * scale,
            ProfileTransform::Log { floor } => floor * (s * (scale / floor).ln_1p()).exp_m1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentCode {
    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl VaeModel {
    /// Glorot-initialized model. Hidden layers use relu; the heads and the
    /// decoder output are linear.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self, VaeError> {
        if arch.input_dim == 0 || arch.latent_dim == 0 || arch.encoder_hidden.is_empty() {
            return Err(VaeError::InvalidConfig {
                field: "architecture",
                reason: "input_dim, latent_dim and encoder_hidden must be non-empty".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder_trunk = Vec::new();
        let mut width = arch.input_dim;
        for &h in &arch.encoder_hidden {
            encoder_trunk.push(DenseLayer::glorot(width, h, Activation::Relu, &mut rng));
            width = h;
        }
        let mu_head = DenseLayer::glorot(width, arch.latent_dim, Activation::Linear, &mut rng);
        let logvar_head = DenseLayer::glorot(width, arch.latent_dim, Activation::Linear, &mut rng);
        let mut decoder = Vec::new();
        let mut width = arch.latent_dim;
        for &h in &arch.decoder_hidden {
            decoder.push(DenseLayer::glorot(width, h, Activation::Relu, &mut rng));
            width = h;
        }
        decoder.push(DenseLayer::glorot(width, arch.input_dim, Activation::Linear, &mut rng));
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            encoder_trunk,
            mu_head,
            logvar_head,
            decoder,
            latent_dim: arch.latent_dim,
            profile_scale: 1.0,
            profile_transform: ProfileTransform::Linear,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_trunk[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.last().map_or(0, DenseLayer::outputs)
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(VaeError::FormatVersion(self.format_version));
        }
        if self.encoder_trunk.is_empty() || self.decoder.is_empty() {
            return Err(VaeError::Empty("encoder or decoder"));
        }
        nn::validate_chain(&self.encoder_trunk)?;
        nn::validate_chain(&self.decoder)?;
        let trunk_out = self.encoder_trunk.last().unwrap().outputs();
        for head in [&self.mu_head, &self.logvar_head] {
            head.validate()?;
            if head.inputs() != trunk_out || head.outputs() != self.latent_dim {
                return Err(NnError::Shape {
                    context: "latent head",
                    expected: format!("{trunk_out}->{}", self.latent_dim),
                    actual: format!("{}->{}", head.inputs(), head.outputs()),
                }
                .into());
            }
        }
        if self.decoder[0].inputs() != self.latent_dim || self.output_dim() != self.input_dim() {
            return Err(NnError::Shape {
                context: "decoder",
                expected: format!("{}->{}", self.latent_dim, self.input_dim()),
                actual: format!("{}->{}", self.decoder[0].inputs(), self.output_dim()),
            }
            .into());
        }
        if !(self.profile_scale > 0.0 && self.profile_scale.is_finite()) {
            return Err(VaeError::BadScale(self.profile_scale));
        }
        self.profile_transform.validate()
    }

    pub fn scale_profile(&self, concentrations: &[f64]) -> Vec<f64> {
        concentrations.iter().map(|&c| self.to_network(c)).collect()
    }

    #[inline]
    pub fn to_network(&self, concentration: f64) -> f64 {
        self.profile_transform.forward(concentration, self.profile_scale)
    }

    /// Inverse of [`Self::to_network`], clamped at 0 mg/L.
    #[inline]
    pub fn from_network(&self, value: f64) -> f64 {
        self.profile_transform.inverse(value, self.profile_scale).max(0.0)
    }

    /// Posterior means and log-variances for a batch of scaled profiles.
    pub fn encode_batch(&self, scaled: &Matrix) -> Result<(Matrix, Matrix), VaeError> {
        let trunk = forward(&self.encoder_trunk, scaled)?;
        let (_, mu) = self.mu_head.forward(trunk.output())?;
        let (_, logvar) = self.logvar_head.forward(trunk.output())?;
        Ok((mu, logvar))
    }

    /// Encodes one profile already mapped to network space (see [`Self::scale_profile`]).
    pub fn encode(&self, scaled_profile: &[f64]) -> Result<LatentCode, VaeError> {
        let x = Matrix::from_vec(1, scaled_profile.len(), scaled_profile.to_vec())?;
        let (mu, logvar) = self.encode_batch(&x)?;
        Ok(LatentCode {
            mu: mu.into_vec(),
            logvar: logvar.into_vec(),
        })
    }

    /// Raw decoder output in scaled space (no clamp).
    pub fn decode_scaled_batch(&self, z: &Matrix) -> Result<Matrix, VaeError> {
        Ok(forward(&self.decoder, z)?.output().clone())
    }

    /// Decodes a latent vector to a concentration profile in mg/L, clamped at zero.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, VaeError> {
        if z.len() != self.latent_dim {
            return Err(NnError::Shape {
                context: "decode latent width",
                expected: self.latent_dim.to_string(),
                actual: z.len().to_string(),
            }
            .into());
        }
        let out = self.decode_scaled_batch(&Matrix::from_vec(1, z.len(), z.to_vec())?)?;
        Ok(out.as_slice().iter().map(|&v| self.from_network(v)).collect())
    }

    /// Posterior-mean reconstructions (mg/L) for a batch of unscaled profiles.
    pub fn reconstruct_batch(&self, profiles: &Matrix) -> Result<Matrix, VaeError> {
        let scaled = profiles.map(|c| self.to_network(c));
        let (mu, _) = self.encode_batch(&scaled)?;
        let out = self.decode_scaled_batch(&mu)?;
        Ok(out.map(|v| self.from_network(v)))
    }

    /// Loss and flattened parameter gradient for scaled batch `x` with
    /// reparameterization noise `noise` (`batch × latent_dim`) held fixed.
    /// Gradient order follows `Parameters::parameter_slices`.
    pub fn loss_and_grad(&self, x: &Matrix, noise: &Matrix, beta: f64) -> Result<(LossTerms, Vec<f64>), VaeError> {
        let batch = x.rows();
        if noise.shape() != (batch, self.latent_dim) {
            return Err(NnError::Shape {
                context: "reparameterization noise",
                expected: format!("{:?}", (batch, self.latent_dim)),
                actual: format!("{:?}", noise.shape()),
            }
            .into());
        }
        let trunk = forward(&self.encoder_trunk, x)?;
        let h = trunk.output();
        let mu_pass = forward(slice::from_ref(&self.mu_head), h)?;
        let lv_pass = forward(slice::from_ref(&self.logvar_head), h)?;
        let mu = mu_pass.output();
        let logvar = lv_pass.output();

        let mut z = Matrix::zeros(batch, self.latent_dim);
        for ((zi, (&m, &lv)), &e) in z
            .as_mut_slice()
            .iter_mut()
            .zip(mu.as_slice().iter().zip(logvar.as_slice()))
            .zip(noise.as_slice())
        {
            *zi = m + (0.5 * lv).exp() * e;
        }
        let dec = forward(&self.decoder, &z)?;
        let x_hat = dec.output();
        if x_hat.shape() != x.shape() {
            return Err(NnError::Shape {
                context: "reconstruction",
                expected: format!("{:?}", x.shape()),
                actual: format!("{:?}", x_hat.shape()),
            }
            .into());
        }

        let bn = batch as f64;
        let count = x.as_slice().len() as f64;
        let mut recon = 0.0;
        let mut d_xhat = Matrix::zeros(batch, x.cols());
        for ((g, &xh), &xv) in d_xhat.as_mut_slice().iter_mut().zip(x_hat.as_slice()).zip(x.as_slice()) {
            let diff = xh - xv;
            recon += diff.abs();
            *g = if diff > 0.0 {
                1.0 / count
            } else if diff < 0.0 {
                -1.0 / count
            } else {
                0.0
            };
        }
        recon /= count;
        let mut kl = 0.0;
        for (&m, &lv) in mu.as_slice().iter().zip(logvar.as_slice()) {
            kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        }
        kl /= bn;

        let (dec_grads, dz) = backward(&self.decoder, &dec, &d_xhat)?;
        let mut dmu = Matrix::zeros(batch, self.latent_dim);
        let mut dlv = Matrix::zeros(batch, self.latent_dim);
        for i in 0..dz.as_slice().len() {
            let m = mu.as_slice()[i];
            let lv = logvar.as_slice()[i];
            let e = noise.as_slice()[i];
            let g = dz.as_slice()[i];
            let sigma = (0.5 * lv).exp();
            dmu.as_mut_slice()[i] = g + beta * m / bn;
            dlv.as_mut_slice()[i] = g * e * 0.5 * sigma + beta * 0.5 * (lv.exp() - 1.0) / bn;
        }
        let (mu_grads, dh_mu) = backward(slice::from_ref(&self.mu_head), &mu_pass, &dmu)?;
        let (lv_grads, dh_lv) = backward(slice::from_ref(&self.logvar_head), &lv_pass, &dlv)?;
        let mut dh = dh_mu;
        for (a, b) in dh.as_mut_slice().iter_mut().zip(dh_lv.as_slice()) {
            *a += b;
        }
        let (trunk_grads, _) = backward(&self.encoder_trunk, &trunk, &dh)?;

        let mut grad = flatten_grads(&trunk_grads);
        grad.extend(flatten_grads(&mu_grads));
        grad.extend(flatten_grads(&lv_grads));
        grad.extend(flatten_grads(&dec_grads));
        let terms = LossTerms {
            total: recon + beta * kl,
            reconstruction: recon,
            kl,
        };
        Ok((terms, grad))
    }
}

impl Parameters for VaeModel {
    fn parameter_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self
            .encoder_trunk
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(self.decoder.iter())
        {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out
    }

    fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self
            .encoder_trunk
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(self.decoder.iter_mut())
        {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

/// `z = mu + exp(logvar / 2) * eps` for a given noise vector.
pub fn reparameterize_with_noise(code: &LatentCode, noise: &[f64]) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn reparameterize<R: Rng + ?Sized>(code: &LatentCode, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..code.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with_noise(code, &noise)
}

/// KL divergence of a diagonal Gaussian from the standard normal.
pub fn kl_divergence(code: &LatentCode) -> f64 {
    code.mu
        .iter()
        .zip(&code.logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Single-profile loss: mean absolute error over grid points plus `beta` times KL.
pub fn vae_loss(x: &[f64], x_hat: &[f64], code: &LatentCode, beta: f64) -> Result<LossTerms, VaeError> {
    if x.len() != x_hat.len() {
        return Err(NnError::Shape {
            context: "vae_loss",
            expected: x.len().to_string(),
            actual: x_hat.len().to_string(),
        }
        .into());
    }
    if x.is_empty() {
        return Err(VaeError::Empty("profile"));
    }
    let reconstruction = x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    let kl = kl_divergence(code);
    Ok(LossTerms {
        total: reconstruction + beta * kl,
        reconstruction,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Final KL weight after warm-up.
    pub kl_weight: f64,
    pub kl_warmup_fraction: f64,
    pub seed: u64,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch; the rate decays
    /// geometrically from `learning_rate`. Equal to `learning_rate` for a
    /// constant schedule.
    pub final_learning_rate: f64,
    pub profile_transform: ProfileTransform,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            kl_weight: 1e-3,
            kl_warmup_fraction: 0.1,
            seed: 0,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            profile_transform: ProfileTransform::default(),
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |field: &'static str, reason: &str| {
            Err(VaeError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.epochs == 0 {
            return bad("training.epochs", "must be > 0");
        }
        if self.batch_size == 0 {
            return bad("training.batch_size", "must be > 0");
        }
        if !(self.kl_weight > 0.0 && self.kl_weight.is_finite()) {
            return bad("training.kl_weight", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return bad("training.kl_warmup_fraction", "must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("training.learning_rate", "must be positive");
        }
        if !(self.final_learning_rate > 0.0 && self.final_learning_rate <= self.learning_rate) {
            return bad("training.final_learning_rate", "must lie in (0, learning_rate]");
        }
        self.profile_transform.validate()?;
        if self.architecture.latent_dim == 0 || self.architecture.encoder_hidden.is_empty() {
            return bad("training.architecture", "latent_dim and encoder_hidden must be non-empty");
        }
        Ok(())
    }

    /// KL weight for a zero-based epoch: linear ramp from 0 over the warm-up epochs.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let warmup = self.kl_warmup_fraction * self.epochs as f64;
        if warmup <= 0.0 {
            return self.kl_weight;
        }
        self.kl_weight * (epoch as f64 / warmup).min(1.0)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
}

/// Largest concentration in the training profiles.
pub fn fit_profile_scale(profiles: &Matrix) -> Result<f64, VaeError> {
    if profiles.rows() == 0 {
        return Err(VaeError::Empty("training set"));
    }
    let max = profiles.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(VaeError::BadScale(max));
    }
    Ok(max)
}

/// Minibatch Adam on the MAE + beta*KL objective. `profiles` holds one
/// unscaled profile (mg/L) per row. The scale constant is fit here, before
/// the first epoch.
pub fn train(
    mut model: VaeModel,
    profiles: &Matrix,
    config: &TrainConfig,
) -> Result<(VaeModel, Vec<EpochRecord>), VaeError> {
    config.validate()?;
    if profiles.cols() != model.input_dim() {
        return Err(NnError::Shape {
            context: "training profile width",
            expected: model.input_dim().to_string(),
            actual: profiles.cols().to_string(),
        }
        .into());
    }
    model.profile_scale = fit_profile_scale(profiles)?;
    model.profile_transform = config.profile_transform;
    let scaled = profiles.map(|c| model.to_network(c));
    let n = scaled.rows();
    let width = scaled.cols();
    let latent = model.latent_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Stream 0 of the same seed initializes weights in `VaeModel::new`.
    rng.set_stream(1);
    let hyper = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.parameter_slices(), hyper);
    let lens: Vec<usize> = model.parameter_slices().iter().map(|s| s.len()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let beta = config.beta_at(epoch);
        adam.hyper.learning_rate = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut x = Matrix::zeros(chunk.len(), width);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(scaled.row(i));
            }
            let noise_values = (0..chunk.len() * latent).map(|_| rng.sample(StandardNormal)).collect();
            let noise = Matrix::from_vec(chunk.len(), latent, noise_values)?;
            let (terms, grad) = model.loss_and_grad(&x, &noise, beta)?;
            if !terms.total.is_finite() {
                return Err(VaeError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    reconstruction: terms.reconstruction,
                    kl: terms.kl,
                });
            }
            recon_sum += terms.reconstruction * chunk.len() as f64;
            kl_sum += terms.kl * chunk.len() as f64;
            let grad_slices = split_by_lengths(&grad, &lens);
            nn::adam_step(&mut model.parameter_slices_mut(), &grad_slices, &mut adam)?;
        }
        let record = EpochRecord {
            epoch,
            reconstruction: recon_sum / n as f64,
            kl: kl_sum / n as f64,
            beta,
        };
        debug!(
            "epoch {epoch}: recon {:.6e} kl {:.4} beta {:.2e}",
            record.reconstruction, record.kl, beta
        );
        if epoch % 10 == 0 || epoch + 1 == config.epochs {
            info!(
                "epoch {}/{}: reconstruction {:.6e}, kl {:.4}",
                epoch + 1,
                config.epochs,
                record.reconstruction,
                record.kl
            );
        }
        history.push(record);
    }
    Ok((model, history))
}

fn split_by_lengths<'a>(flat: &'a [f64], lens: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(lens.len());
    let mut rest = flat;
    for &l in lens {
        let (head, tail) = rest.split_at(l);
        out.push(head);
        rest = tail;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    /// mg/L over every grid point.
    pub mae: f64,
    /// Percent, over points whose true value exceeds the exclusion threshold.
    pub mape: f64,
    pub mape_threshold: f64,
    pub mape_points: usize,
    pub excluded_points: usize,
    pub profiles: usize,
}

/// MAE and MAPE between true profiles and their reconstructions (both mg/L, one per row).
pub fn reconstruction_metrics(truth: &Matrix, reconstructed: &Matrix) -> Result<ReconstructionMetrics, VaeError> {
    if truth.rows() == 0 {
        return Err(VaeError::Empty("test set"));
    }
    if truth.shape() != reconstructed.shape() {
        return Err(NnError::Shape {
            context: "reconstruction metrics",
            expected: format!("{:?}", truth.shape()),
            actual: format!("{:?}", reconstructed.shape()),
        }
        .into());
    }
    let mut abs_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_count = 0usize;
    for (&t, &r) in truth.as_slice().iter().zip(reconstructed.as_slice()) {
        let err = (t - r).abs();
        abs_sum += err;
        if t > MAPE_EXCLUSION_THRESHOLD {
            pct_sum += err / t;
            pct_count += 1;
        }
    }
    let total = truth.as_slice().len();
    Ok(ReconstructionMetrics {
        mae: abs_sum / total as f64,
        mape: if pct_count > 0 { 100.0 * pct_sum / pct_count as f64 } else { 0.0 },
        mape_threshold: MAPE_EXCLUSION_THRESHOLD,
        mape_points: pct_count,
        excluded_points: total - pct_count,
        profiles: truth.rows(),
    })
}

/// Reconstructs each test profile from its posterior mean and scores it.
pub fn evaluate(model: &VaeModel, test_profiles: &Matrix) -> Result<ReconstructionMetrics, VaeError> {
    if test_profiles.rows() == 0 {
        return Err(VaeError::Empty("test set"));
    }
    let recon = model.reconstruct_batch(test_profiles)?;
    reconstruction_metrics(test_profiles, &recon)
}
