//! β-VAE between token sequences and continuous latents.
//!
//! The encoder maps a flattened one-hot sequence to `mean ‖ raw_log_var`;
//! the log-variance is squashed into `[-LOG_VAR_BOUND, LOG_VAR_BOUND]` with a
//! scaled tanh. The decoder emits per-position logits (`d x |V|`).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{meta_entry, Checkpoint, NamedNet};
use crate::error::{Error, Result};
use crate::net::{softmax_groups, Adam, AdamConfig, Layer, Net};
use crate::seq::{one_hot_batch, Sequence};

pub const LOG_VAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Convolution channels in both encoder and decoder.
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            beta: 0.01,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 64,
            channels: 32,
            kernel: 5,
            hidden: 256,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.latent_dim == 0 {
            problems.push("latent_dim must be >= 1".to_string());
        }
        if !(self.beta > 0.0) {
            problems.push(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be > 0".into());
        }
        if self.batch_size == 0 || self.channels == 0 || self.hidden == 0 {
            problems.push("batch_size, channels and hidden must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            problems.push("kernel must be odd".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder: Net,
    pub decoder: Net,
    pub config: VaeConfig,
    pub length: usize,
    pub vocab_size: usize,
}

impl VaeModel {
    pub fn new(length: usize, vocab_size: usize, config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.latent_dim >= length * vocab_size {
            return Err(Error::config("latent_dim must be far below d*|V|"));
        }
        let (c, k, h, l) = (config.channels, config.kernel, config.hidden, config.latent_dim);
        let encoder = Net::new(
            length * vocab_size,
            vec![
                Layer::Conv1d { length, in_channels: vocab_size, out_channels: c, kernel: k },
                Layer::Silu,
                Layer::Dense { input: length * c, output: h },
                Layer::Silu,
                Layer::Dense { input: h, output: 2 * l },
            ],
            seed,
        )?;
        let decoder = Net::new(
            l,
            vec![
                Layer::Dense { input: l, output: h },
                Layer::Silu,
                Layer::Dense { input: h, output: length * c },
                Layer::Silu,
                Layer::Conv1d { length, in_channels: c, out_channels: vocab_size, kernel: k },
            ],
            seed.wrapping_add(1),
        )?;
        Ok(Self { encoder, decoder, config, length, vocab_size })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_seqs(&self, seqs: &[Sequence]) -> Result<()> {
        for s in seqs {
            if s.len() != self.length {
                return Err(Error::LengthMismatch { expected: self.length, got: s.len() });
            }
            if s.tokens().iter().any(|&t| t as usize >= self.vocab_size) {
                return Err(Error::shape("token index outside the vocabulary"));
            }
        }
        Ok(())
    }

    /// Posterior means and (bounded) log-variances, one row per sequence.
    pub fn encode_batch(&self, seqs: &[Sequence]) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_seqs(seqs)?;
        let raw = self.encoder.forward(one_hot_batch(seqs, self.vocab_size).view())?;
        Ok(split_encoder_output(raw.view(), self.latent_dim()))
    }

    pub fn encode(&self, seq: &Sequence) -> Result<EncoderOutput> {
        let (m, lv) = self.encode_batch(std::slice::from_ref(seq))?;
        Ok(EncoderOutput { mean: m.row(0).to_vec(), log_variance: lv.row(0).to_vec() })
    }

    /// Logits for a batch of latents, `n x (d*|V|)`.
    pub fn decode_logits_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::LengthMismatch { expected: self.latent_dim(), got: z.ncols() });
        }
        self.decoder.forward(z)
    }

    /// `d x |V|` logits for one latent.
    pub fn decode_logits(&self, z: &[f64]) -> Result<Array2<f64>> {
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("1 x l");
        let logits = self.decode_logits_batch(z.view())?;
        Ok(logits.into_shape_with_order((self.length, self.vocab_size)).expect("d*|V| logits"))
    }

    pub fn decode_tokens_batch(&self, z: ArrayView2<'_, f64>) -> Result<Vec<Sequence>> {
        let logits = self.decode_logits_batch(z)?;
        Ok(logits.rows().into_iter().map(|r| argmax_tokens(&r.to_vec(), self.vocab_size)).collect())
    }

    pub fn decode_tokens(&self, z: &[f64]) -> Result<Sequence> {
        let z = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("1 x l");
        Ok(self.decode_tokens_batch(z.view())?.remove(0))
    }

    /// Loss with parameter gradients for encoder and decoder.
    fn loss_and_grads(
        &self,
        seqs: &[Sequence],
        noise: ArrayView2<'_, f64>,
        want_grads: bool,
    ) -> Result<(VaeLoss, Option<(crate::net::Gradients, crate::net::Gradients)>)> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset("vae_loss needs a nonempty batch".into()));
        }
        self.check_seqs(seqs)?;
        let (b, l, d, v) = (seqs.len(), self.latent_dim(), self.length, self.vocab_size);
        if noise.dim() != (b, l) {
            return Err(Error::shape(format!("noise {:?}, expected ({b}, {l})", noise.dim())));
        }
        let x = one_hot_batch(seqs, v);
        let enc_tape = self.encoder.forward_tape(x.view())?;
        let raw = enc_tape.output();
        let (mean, log_var) = split_encoder_output(raw.view(), l);
        let std = log_var.mapv(|lv| (0.5 * lv).exp());
        let z = &mean + &(&std * &noise);

        let dec_tape = self.decoder.forward_tape(z.view())?;
        let logits = dec_tape.output();
        let probs = softmax_groups(logits.view(), v);

        let mut recon = 0.0;
        for (i, s) in seqs.iter().enumerate() {
            for (p, &t) in s.tokens().iter().enumerate() {
                recon -= probs[[i, p * v + t as usize]].max(f64::MIN_POSITIVE).ln();
            }
        }
        recon /= (b * d) as f64;
        let kl = (0..b)
            .map(|i| kl_divergence(mean.row(i).as_slice().unwrap(), log_var.row(i).as_slice().unwrap()))
            .sum::<f64>()
            / b as f64;
        let beta = self.config.beta;
        let loss = VaeLoss { total: recon + beta * kl, reconstruction: recon, kl };
        if !want_grads {
            return Ok((loss, None));
        }

        let mut dlogits = probs;
        for (i, s) in seqs.iter().enumerate() {
            for (p, &t) in s.tokens().iter().enumerate() {
                dlogits[[i, p * v + t as usize]] -= 1.0;
            }
        }
        dlogits /= (b * d) as f64;
        let (dec_grads, dz) = self.decoder.backward(&dec_tape, dlogits.view())?;

        let kl_scale = beta / b as f64;
        let mut draw = Array2::zeros((b, 2 * l));
        for i in 0..b {
            for j in 0..l {
                let m = mean[[i, j]];
                let lv = log_var[[i, j]];
                let dmean = dz[[i, j]] + kl_scale * m;
                let dlv = dz[[i, j]] * 0.5 * std[[i, j]] * noise[[i, j]] + kl_scale * 0.5 * (lv.exp() - 1.0);
                let th = lv / LOG_VAR_BOUND;
                draw[[i, j]] = dmean;
                draw[[i, l + j]] = dlv * (1.0 - th * th);
            }
        }
        let (enc_grads, _) = self.encoder.backward(&enc_tape, draw.view())?;
        Ok((loss, Some((enc_grads, dec_grads))))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "vae",
            BTreeMap::from([
                meta_entry("config", &self.config),
                meta_entry("length", self.length),
                meta_entry("vocab_size", self.vocab_size),
            ]),
            vec![NamedNet::new("encoder", &self.encoder), NamedNet::new("decoder", &self.decoder)],
        )
    }

    pub fn checksum(&self) -> String {
        self.checkpoint().checksum
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("vae")?;
        let model = Self {
            encoder: ck.network("encoder")?,
            decoder: ck.network("decoder")?,
            config: ck.meta("config")?,
            length: ck.meta("length")?,
            vocab_size: ck.meta("vocab_size")?,
        };
        let (l, dv) = (model.latent_dim(), model.length * model.vocab_size);
        if model.encoder.input_dim != dv
            || model.encoder.output_dim() != 2 * l
            || model.decoder.input_dim != l
            || model.decoder.output_dim() != dv
        {
            return Err(Error::shape("vae checkpoint networks disagree with its metadata"));
        }
        Ok(model)
    }
}

fn split_encoder_output(raw: ArrayView2<'_, f64>, l: usize) -> (Array2<f64>, Array2<f64>) {
    let mean = raw.slice(s![.., ..l]).to_owned();
    let log_var = raw.slice(s![.., l..]).mapv(|r| LOG_VAR_BOUND * (r / LOG_VAR_BOUND).tanh());
    (mean, log_var)
}

/// Per-row argmax over groups of `vocab_size`; ties go to the lowest index.
pub fn argmax_tokens(logits: &[f64], vocab_size: usize) -> Sequence {
    Sequence::new(
        logits
            .chunks(vocab_size)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect(),
    )
}

/// `KL(N(mean, exp(log_var)) || N(0, I))`, summed over dimensions.
pub fn kl_divergence(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_var).map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparameterize(out: &EncoderOutput, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != out.mean.len() {
        return Err(Error::LengthMismatch { expected: out.mean.len(), got: noise.len() });
    }
    Ok(out.mean.iter().zip(&out.log_variance).zip(noise).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect())
}

/// Mean cross-entropy per position plus β times the mean KL per record.
pub fn vae_loss(model: &VaeModel, batch: &[Sequence], noise: ArrayView2<'_, f64>) -> Result<VaeLoss> {
    model.loss_and_grads(batch, noise, false).map(|(l, _)| l)
}

/// Parameter gradients of [`vae_loss`] (encoder, decoder).
pub fn vae_loss_grads(
    model: &VaeModel,
    batch: &[Sequence],
    noise: ArrayView2<'_, f64>,
) -> Result<(VaeLoss, crate::net::Gradients, crate::net::Gradients)> {
    let (l, g) = model.loss_and_grads(batch, noise, true)?;
    let (ge, gd) = g.expect("requested");
    Ok((l, ge, gd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Reconstruction accuracy on the training records after the last epoch.
    pub final_accuracy: f64,
}

pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

pub fn train_vae(
    seqs: &[Sequence],
    length: usize,
    vocab_size: usize,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(VaeModel, VaeTrainReport)> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("train_vae needs records".into()));
    }
    let mut model = VaeModel::new(length, vocab_size, cfg.clone(), seed)?;
    model.check_seqs(seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fae);
    let mut enc_opt = Adam::new(AdamConfig::new(cfg.learning_rate), &model.encoder.params)?;
    let mut dec_opt = Adam::new(AdamConfig::new(cfg.learning_rate), &model.decoder.params)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let noise = standard_normal(&mut rng, batch.len(), cfg.latent_dim);
            let (loss, ge, gd) = vae_loss_grads(&model, &batch, noise.view()).map_err(|e| divergence(e, epoch))?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch, loss: loss.total });
            }
            enc_opt.step(&mut model.encoder.params, &ge)?;
            dec_opt.step(&mut model.decoder.params, &gd)?;
            let w = batch.len() as f64;
            tot += loss.total * w;
            rec += loss.reconstruction * w;
            kl += loss.kl * w;
        }
        let n = seqs.len() as f64;
        epochs.push(EpochLoss { epoch, total: tot / n, reconstruction: rec / n, kl: kl / n });
    }
    let final_accuracy = reconstruction_accuracy(&model, seqs)?;
    Ok((model, VaeTrainReport { epochs, final_accuracy }))
}

pub(crate) fn divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Fraction of positions recovered by decoding the posterior mean.
pub fn reconstruction_accuracy(model: &VaeModel, seqs: &[Sequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("reconstruction_accuracy needs records".into()));
    }
    let mut hits = 0usize;
    for chunk in seqs.chunks(256) {
        let (mean, _) = model.encode_batch(chunk)?;
        let decoded = model.decode_tokens_batch(mean.view())?;
        for (a, b) in chunk.iter().zip(&decoded) {
            hits += a.tokens().iter().zip(b.tokens()).filter(|(x, y)| x == y).count();
        }
    }
    Ok(hits as f64 / (seqs.len() * model.length) as f64)
}

/// Decodes `count` draws from the latent prior `N(0, I)`.
pub fn sample_vae_prior(model: &VaeModel, count: usize, seed: u64) -> Result<Vec<Sequence>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(&mut rng, count, model.latent_dim());
    model.decode_tokens_batch(z.view())
}

/// Sampled latents `z = mean + sigma * eps` for each sequence.
pub fn sample_latents(model: &VaeModel, seqs: &[Sequence], seed: u64) -> Result<Array2<f64>> {
    let (mean, log_var) = model.encode_batch(seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, mean.nrows(), mean.ncols());
    Ok(&mean + &(log_var.mapv(|lv| (0.5 * lv).exp()) * eps))
}

/// Mean of each latent coordinate over a batch (diagnostics).
pub fn latent_mean(z: ArrayView2<'_, f64>) -> Vec<f64> {
    z.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeModel {
        let cfg = VaeConfig { latent_dim: 3, channels: 4, hidden: 8, kernel: 3, ..Default::default() };
        VaeModel::new(5, 4, cfg, 7).unwrap()
    }

    #[test]
    fn shapes() {
        let cfg = VaeConfig { latent_dim: 16, ..Default::default() };
        let m = VaeModel::new(28, 20, cfg, 0).unwrap();
        let out = m.encode(&Sequence::new(vec![3; 28])).unwrap();
        assert_eq!(out.mean.len(), 16);
        assert_eq!(m.decode_logits(&[0.0; 16]).unwrap().dim(), (28, 20));
        assert!(m.encode(&Sequence::new(vec![3; 27])).is_err());
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl_divergence(&[1.0], &[0.0]), 0.5);
        assert!(kl_divergence(&[0.3, -2.0], &[0.5, -1.0]) > 0.0);
    }

    #[test]
    fn reparameterize_cases() {
        let out = EncoderOutput { mean: vec![1.0, -2.0], log_variance: vec![0.0, 0.0] };
        assert_eq!(reparameterize(&out, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(reparameterize(&out, &[1.0, 0.0]).unwrap(), vec![2.0, -2.0]);
        assert!(reparameterize(&out, &[1.0]).is_err());
    }

    #[test]
    fn reparameterize_variance_matches() {
        let out = EncoderOutput { mean: vec![0.5], log_variance: vec![-0.7] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                reparameterize(&out, &[e]).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / (-0.7f64).exp() - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn argmax_tie_goes_low() {
        let s = argmax_tokens(&[0.1, 0.9, 0.2, 0.5, 0.5, 0.0], 3);
        assert_eq!(s.tokens(), &[1, 0]);
    }

    #[test]
    fn decode_tokens_is_row_argmax() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = standard_normal(&mut rng, 8, 3);
        let toks = m.decode_tokens_batch(z.view()).unwrap();
        for (i, s) in toks.iter().enumerate() {
            let logits = m.decode_logits(z.row(i).as_slice().unwrap()).unwrap();
            for (p, r) in logits.rows().into_iter().enumerate() {
                let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let first = r.iter().position(|&x| x == max).unwrap();
                assert_eq!(s.tokens()[p] as usize, first);
            }
        }
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let mut m = VaeModel::new(
            6,
            20,
            VaeConfig { latent_dim: 2, channels: 3, hidden: 4, kernel: 3, ..Default::default() },
            0,
        )
        .unwrap();
        // zero the last conv -> all logits equal
        let n = m.decoder.params.len();
        for p in &mut m.decoder.params.params[n - 2..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = vec![Sequence::new(vec![1, 2, 3, 4, 5, 6]), Sequence::new(vec![0; 6])];
        let loss = vae_loss(&m, &batch, Array2::zeros((2, 2)).view()).unwrap();
        assert!((loss.reconstruction - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_when_encoder_outputs_prior() {
        let mut m = tiny();
        let n = m.encoder.params.len();
        for p in &mut m.encoder.params.params[n - 2..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = vec![Sequence::new(vec![0, 1, 2, 3, 0])];
        let loss = vae_loss(&m, &batch, Array2::ones((1, 3)).view()).unwrap();
        assert_eq!(loss.kl, 0.0);
    }

    #[test]
    fn prior_samples_deterministic() {
        let m = tiny();
        assert!(sample_vae_prior(&m, 0, 1).unwrap().is_empty());
        assert_eq!(sample_vae_prior(&m, 10, 4).unwrap(), sample_vae_prior(&m, 10, 4).unwrap());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let seqs: Vec<Sequence> = (0..20u8).map(|i| Sequence::new(vec![i % 4; 5])).collect();
        let cfg = VaeConfig { latent_dim: 3, channels: 4, hidden: 8, kernel: 3, epochs: 0, ..Default::default() };
        let (m, report) = train_vae(&seqs, 5, 4, &cfg, 7).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m, VaeModel::new(5, 4, cfg, 7).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vae.json");
        m.save(&p).unwrap();
        assert_eq!(VaeModel::load(&p).unwrap(), m);
    }
}
