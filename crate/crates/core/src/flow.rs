//! Flow-matching prior over latents: linear interpolant, conditional
//! flow-matching loss, Euler integration, and the fitness-conditioned
//! variant.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{meta_entry, Checkpoint, NamedNet};
use crate::error::{Error, Result};
use crate::net::{Adam, AdamConfig, Gradients, Layer, Net, Tape};
use crate::vae::{divergence, standard_normal};

/// Network shape and conditioning scheme. Time (and fitness, when
/// conditional) enter through a sinusoidal embedding concatenated to the
/// latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Even number of sinusoidal features per embedded scalar.
    pub embedding_dim: usize,
    /// Scalars are multiplied by this before embedding.
    pub embedding_scale: f64,
    pub max_period: f64,
    pub conditional: bool,
}

impl FlowArch {
    pub fn new(latent_dim: usize, conditional: bool) -> Self {
        Self {
            latent_dim,
            hidden: 128,
            depth: 3,
            embedding_dim: 16,
            embedding_scale: 100.0,
            max_period: 10_000.0,
            conditional,
        }
    }

    fn input_dim(&self) -> usize {
        self.latent_dim + self.embedding_dim * (1 + usize::from(self.conditional))
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::config("flow latent_dim, hidden and depth must be positive"));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(2) {
            return Err(Error::config("flow embedding_dim must be even and positive"));
        }
        Ok(())
    }

    /// `[sin(scale*x*w_k), cos(scale*x*w_k)]`, `w_k = max_period^(-k/half)`.
    pub fn embed(&self, x: f64, out: &mut [f64]) {
        let half = self.embedding_dim / 2;
        for k in 0..half {
            let w = (-(self.max_period.ln()) * k as f64 / half as f64).exp();
            let a = self.embedding_scale * x * w;
            out[k] = a.sin();
            out[half + k] = a.cos();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-3, batch_size: 256, epochs: 600, seed: 0 }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::config("flow learning_rate and batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub net: Net,
    pub arch: FlowArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Anything that can supply `v(z, t)` for a batch of latents.
pub trait VelocityField {
    fn latent_dim(&self) -> usize;
    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>>;
}

/// Closure-backed field, mainly for analytic checks.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(ArrayView2<'_, f64>, f64) -> Array2<f64>,
{
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        Ok((self.f)(z, t))
    }
}

/// A conditional model with its fitness label fixed.
pub struct Conditioned<'a> {
    pub model: &'a FlowModel,
    pub y: f64,
}

impl VelocityField for Conditioned<'_> {
    fn latent_dim(&self) -> usize {
        self.model.arch.latent_dim
    }

    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        self.model.velocity(z, t, Some(self.y))
    }
}

impl VelocityField for FlowModel {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn velocity(&self, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        FlowModel::velocity(self, z, t, None)
    }
}

impl FlowModel {
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let h = arch.hidden;
        let mut layers = vec![Layer::Dense { input: arch.input_dim(), output: h }, Layer::Silu];
        for _ in 1..arch.depth {
            layers.push(Layer::Dense { input: h, output: h });
            layers.push(Layer::Silu);
        }
        layers.push(Layer::Dense { input: h, output: arch.latent_dim });
        let net = Net::new(arch.input_dim(), layers, seed)?;
        Ok(Self { net, arch })
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.conditional
    }

    fn build_input(&self, z: ArrayView2<'_, f64>, t: &[f64], y: Option<&[f64]>) -> Result<Array2<f64>> {
        let l = self.arch.latent_dim;
        let e = self.arch.embedding_dim;
        if z.ncols() != l {
            return Err(Error::LengthMismatch { expected: l, got: z.ncols() });
        }
        match (self.arch.conditional, y) {
            (true, None) => return Err(Error::config("conditional flow model needs a fitness label")),
            (false, Some(_)) => return Err(Error::config("unconditional flow model takes no fitness label")),
            _ => {}
        }
        let mut x = Array2::zeros((z.nrows(), self.arch.input_dim()));
        x.slice_mut(s![.., ..l]).assign(&z);
        let mut buf = vec![0.0; e];
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            let r = row.as_slice_mut().expect("contiguous");
            self.arch.embed(t[i], &mut buf);
            r[l..l + e].copy_from_slice(&buf);
            if let Some(y) = y {
                self.arch.embed(y[i], &mut buf);
                r[l + e..].copy_from_slice(&buf);
            }
        }
        Ok(x)
    }

    /// Velocity at a shared time (and label) for every row of `z`.
    pub fn velocity(&self, z: ArrayView2<'_, f64>, t: f64, y: Option<f64>) -> Result<Array2<f64>> {
        let n = z.nrows();
        let ts = vec![t; n];
        let ys = y.map(|y| vec![y; n]);
        let x = self.build_input(z, &ts, ys.as_deref())?;
        self.net.forward(x.view())
    }

    /// Forward pass recording intermediates for [`FlowModel::tape_vjp`].
    pub fn forward_tape(&self, z: ArrayView2<'_, f64>, t: f64, y: Option<f64>) -> Result<Tape> {
        let n = z.nrows();
        let ts = vec![t; n];
        let ys = y.map(|y| vec![y; n]);
        let x = self.build_input(z, &ts, ys.as_deref())?;
        self.net.forward_tape(x.view())
    }

    /// `adjoint^T dv/dz` for a recorded pass (time and label held fixed).
    pub fn tape_vjp(&self, tape: &Tape, adjoint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let dx = self.net.input_grad(tape, adjoint)?;
        Ok(dx.slice(s![.., ..self.arch.latent_dim]).to_owned())
    }

    /// Velocity plus `adjoint^T dv/dz`.
    pub fn velocity_vjp(
        &self,
        z: ArrayView2<'_, f64>,
        t: f64,
        y: Option<f64>,
        adjoint: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let tape = self.forward_tape(z, t, y)?;
        let dz = self.tape_vjp(&tape, adjoint)?;
        Ok((tape.output().clone(), dz))
    }

    fn loss_impl(
        &self,
        z1: ArrayView2<'_, f64>,
        z0: ArrayView2<'_, f64>,
        t: &[f64],
        y: Option<&[f64]>,
        want_grads: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        let n = z1.nrows();
        if n == 0 || z0.dim() != z1.dim() || t.len() != n || y.is_some_and(|y| y.len() != n) {
            return Err(Error::shape("cfm_loss needs matching nonempty z1, z0, t (and y) batches"));
        }
        if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("flow time must lie in [0, 1]".into()));
        }
        let mut zt = z0.to_owned();
        for (i, mut row) in zt.rows_mut().into_iter().enumerate() {
            row *= 1.0 - t[i];
            row.scaled_add(t[i], &z1.row(i));
        }
        let target = &z1 - &z0;
        let x = self.build_input(zt.view(), t, y)?;
        let tape = self.net.forward_tape(x.view())?;
        let resid = tape.output() - &target;
        let loss = 0.5 * resid.mapv(|r| r * r).sum() / n as f64;
        if !want_grads {
            return Ok((loss, None));
        }
        let (grads, _) = self.net.backward(&tape, (resid / n as f64).view())?;
        Ok((loss, Some(grads)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "flow",
            BTreeMap::from([meta_entry("arch", &self.arch), meta_entry("conditional", self.arch.conditional)]),
            vec![NamedNet::new("velocity", &self.net)],
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
        ck.expect_kind("flow")?;
        let arch: FlowArch = ck.meta("arch")?;
        let net = ck.network("velocity")?;
        if net.input_dim != arch.input_dim() || net.output_dim() != arch.latent_dim {
            return Err(Error::shape("flow network disagrees with its descriptor"));
        }
        Ok(Self { net, arch })
    }
}

/// `(1 - t) z0 + t z1`.
pub fn interpolant(z0: &[f64], z1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolant time {t} outside [0, 1]")));
    }
    if z0.len() != z1.len() {
        return Err(Error::LengthMismatch { expected: z0.len(), got: z1.len() });
    }
    Ok(z0.iter().zip(z1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Batch mean of `½‖v(Ψ_t(z0), t[, y]) − (z1 − z0)‖²`.
pub fn cfm_loss(
    model: &FlowModel,
    z1: ArrayView2<'_, f64>,
    z0: ArrayView2<'_, f64>,
    t: &[f64],
    y: Option<&[f64]>,
) -> Result<f64> {
    model.loss_impl(z1, z0, t, y, false).map(|(l, _)| l)
}

pub fn cfm_loss_grads(
    model: &FlowModel,
    z1: ArrayView2<'_, f64>,
    z0: ArrayView2<'_, f64>,
    t: &[f64],
    y: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    model.loss_impl(z1, z0, t, y, true).map(|(l, g)| (l, g.expect("requested")))
}

/// Trains on data latents with fresh noise and times drawn every epoch.
pub fn train_flow(
    latents: ArrayView2<'_, f64>,
    labels: Option<&[f64]>,
    cfg: &FlowTrainConfig,
    arch: FlowArch,
) -> Result<(FlowModel, FlowTrainReport)> {
    cfg.validate()?;
    if latents.nrows() == 0 {
        return Err(Error::EmptyDataset("train_flow needs latents".into()));
    }
    if latents.ncols() != arch.latent_dim {
        return Err(Error::LengthMismatch { expected: arch.latent_dim, got: latents.ncols() });
    }
    match (arch.conditional, labels) {
        (true, None) => return Err(Error::config("conditional flow training needs fitness labels")),
        (true, Some(y)) if y.len() != latents.nrows() => {
            return Err(Error::shape("one fitness label per latent required"))
        }
        (false, Some(_)) => return Err(Error::config("unconditional flow takes no labels")),
        _ => {}
    }
    let mut model = FlowModel::new(arch, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate), &model.net.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf10f_10f1);
    let mut order: Vec<usize> = (0..latents.nrows()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let z1 = latents.select(ndarray::Axis(0), chunk);
            let z0 = standard_normal(&mut rng, chunk.len(), model.arch.latent_dim);
            let t: Vec<f64> = (0..chunk.len()).map(|_| rng.random::<f64>()).collect();
            let y: Option<Vec<f64>> = labels.map(|y| chunk.iter().map(|&i| y[i]).collect());
            let (loss, grads) =
                cfm_loss_grads(&model, z1.view(), z0.view(), &t, y.as_deref()).map_err(|e| divergence(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            opt.step(&mut model.net.params, &grads)?;
            total += loss * chunk.len() as f64;
        }
        epoch_losses.push(total / latents.nrows() as f64);
    }
    Ok((model, FlowTrainReport { epoch_losses }))
}

/// One explicit Euler step `z + dt * v(z, t)`.
pub fn euler_step<F: VelocityField + ?Sized>(
    field: &F,
    z: ArrayView2<'_, f64>,
    t: f64,
    dt: f64,
) -> Result<Array2<f64>> {
    let v = field.velocity(z, t)?;
    let mut out = z.to_owned();
    out.scaled_add(dt, &v);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `steps + 1` states, from `z0` to `z1`.
    pub states: Vec<Array2<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("nonempty")
    }
}

/// Integrates from `t = 0` to `t = 1` with `steps` Euler steps on the grid
/// `t = k / steps`.
pub fn euler_integrate<F: VelocityField + ?Sized>(
    field: &F,
    z0: ArrayView2<'_, f64>,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Euler integration needs at least one step".into()));
    }
    if z0.ncols() != field.latent_dim() {
        return Err(Error::LengthMismatch { expected: field.latent_dim(), got: z0.ncols() });
    }
    let dt = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.to_owned());
    for k in 0..steps {
        let t = k as f64 * dt;
        let next = euler_step(field, states[k].view(), t, dt).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite { context: format!("Euler step {k}: {context}") },
            other => other,
        })?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("Euler state after step {k}") });
        }
        states.push(next);
    }
    Ok(Trajectory { states })
}
