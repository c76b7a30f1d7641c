//! Finite-difference oracles shared by the gradient suite and the acceptance
//! gate.
#![allow(dead_code)]

use flowguide::flow::{cfm_loss, cfm_loss_grads, FlowArch, FlowModel};
use flowguide::net::{Layer, Net};
use flowguide::predictor::{PredictorConfig, PredictorModel, Role};
use flowguide::sampler::{Guide, Objective};
use flowguide::seq::Sequence;
use flowguide::vae::{vae_loss, vae_loss_grads, VaeConfig, VaeModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Inputs kept away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Worst relative error over parameter and input gradients of
/// `Σ w ⊙ net(x)` for a network made of `layers`.
pub fn net_grad_error(input_dim: usize, layers: Vec<Layer>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net::new(input_dim, layers, seed).unwrap();
    let x = away_from_zero(&mut rng, 3, input_dim);
    let w = uniform(&mut rng, 3, net.output_dim(), -1.0, 1.0);
    let objective = |net: &Net, x: &Array2<f64>| (net.forward(x.view()).unwrap() * &w).sum();

    let tape = net.forward_tape(x.view()).unwrap();
    let (grads, dx) = net.backward(&tape, w.view()).unwrap();

    let mut worst: f64 = 0.0;
    for p in 0..net.params.len() {
        let n = net.params.params[p].values.len();
        let mut fd = vec![0.0; n];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = net.params.params[p].values[j];
            *slot = central(
                |v| {
                    net.params.params[p].values[j] = v;
                    objective(&net, &x)
                },
                orig,
            );
            net.params.params[p].values[j] = orig;
        }
        worst = worst.max(rel_err(&grads.0[p], &fd));
    }
    let mut fd = vec![0.0; x.len()];
    let mut xp = x.clone();
    for (k, slot) in fd.iter_mut().enumerate() {
        let (i, j) = (k / input_dim, k % input_dim);
        let orig = xp[[i, j]];
        *slot = central(
            |v| {
                xp[[i, j]] = v;
                objective(&net, &xp)
            },
            orig,
        );
        xp[[i, j]] = orig;
    }
    worst.max(rel_err(dx.as_standard_layout().as_slice().unwrap(), &fd))
}

/// Every layer type, each between two dense layers so both sides of its
/// backward pass are exercised.
pub fn layer_suite() -> Vec<(&'static str, f64)> {
    let (d, c) = (5, 3);
    let wrap = |mid: Layer, width: usize| {
        vec![Layer::Dense { input: 6, output: width }, mid, Layer::Dense { input: width, output: 2 }]
    };
    vec![
        ("dense", net_grad_error(6, vec![Layer::Dense { input: 6, output: 4 }], 1)),
        ("relu", net_grad_error(6, vec![Layer::Relu, Layer::Dense { input: 6, output: 2 }], 2)),
        ("silu", net_grad_error(6, wrap(Layer::Silu, 7), 3)),
        ("tanh", net_grad_error(6, wrap(Layer::Tanh, 7), 4)),
        ("softmax", net_grad_error(6, wrap(Layer::Softmax { width: 4 }, 8), 5)),
        (
            "conv1d",
            net_grad_error(
                d * c,
                vec![
                    Layer::Conv1d { length: d, in_channels: c, out_channels: 4, kernel: 3 },
                    Layer::Silu,
                    Layer::Conv1d { length: d, in_channels: 4, out_channels: 2, kernel: 5 },
                ],
                6,
            ),
        ),
        (
            "mean_pool",
            net_grad_error(
                d * c,
                vec![
                    Layer::Conv1d { length: d, in_channels: c, out_channels: 4, kernel: 3 },
                    Layer::MeanPool { length: d, channels: 4 },
                ],
                7,
            ),
        ),
    ]
}

fn small_vae(length: usize, vocab: usize, seed: u64) -> VaeModel {
    let cfg = VaeConfig { latent_dim: 4, channels: 3, kernel: 3, hidden: 8, beta: 0.3, ..VaeConfig::default() };
    VaeModel::new(length, vocab, cfg, seed).unwrap()
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize, length: usize, vocab: usize) -> Vec<Sequence> {
    (0..n).map(|_| Sequence::new((0..length).map(|_| rng.random_range(0..vocab as u8)).collect())).collect()
}

/// Encoder and decoder parameter gradients of the VAE objective with the
/// reparameterization noise held fixed.
pub fn vae_loss_grad_error(seed: u64) -> f64 {
    let (length, vocab) = (6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = small_vae(length, vocab, seed);
    let batch = random_seqs(&mut rng, 4, length, vocab);
    let noise = uniform(&mut rng, 4, 4, -1.5, 1.5);
    let (_, ge, gd) = vae_loss_grads(&model, &batch, noise.view()).unwrap();
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let n_params = if which == 0 { model.encoder.params.len() } else { model.decoder.params.len() };
        for p in 0..n_params {
            let len = if which == 0 {
                model.encoder.params.params[p].values.len()
            } else {
                model.decoder.params.params[p].values.len()
            };
            let mut fd = vec![0.0; len];
            for (j, slot) in fd.iter_mut().enumerate() {
                let orig = *vae_param(&mut model, which, p, j);
                *slot = central(
                    |v| {
                        *vae_param(&mut model, which, p, j) = v;
                        vae_loss(&model, &batch, noise.view()).unwrap().total
                    },
                    orig,
                );
                *vae_param(&mut model, which, p, j) = orig;
            }
            let analytic = if which == 0 { &ge.0[p] } else { &gd.0[p] };
            worst = worst.max(rel_err(analytic, &fd));
        }
    }
    worst
}

fn vae_param(m: &mut VaeModel, which: usize, p: usize, j: usize) -> &mut f64 {
    let net = if which == 0 { &mut m.encoder } else { &mut m.decoder };
    &mut net.params.params[p].values[j]
}

/// Parameter gradients of the flow-matching loss, optionally conditional.
pub fn cfm_loss_grad_error(seed: u64, conditional: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = FlowArch { hidden: 8, depth: 2, embedding_dim: 4, ..FlowArch::new(3, conditional) };
    let mut model = FlowModel::new(arch, seed).unwrap();
    let z1 = uniform(&mut rng, 5, 3, -2.0, 2.0);
    let z0 = uniform(&mut rng, 5, 3, -2.0, 2.0);
    let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Option<Vec<f64>> = conditional.then(|| (0..5).map(|_| rng.random_range(0.0..1.0)).collect());
    let (_, grads) = cfm_loss_grads(&model, z1.view(), z0.view(), &t, y.as_deref()).unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..model.net.params.len() {
        let mut fd = vec![0.0; model.net.params.params[p].values.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let orig = model.net.params.params[p].values[j];
            *slot = central(
                |v| {
                    model.net.params.params[p].values[j] = v;
                    cfm_loss(&model, z1.view(), z0.view(), &t, y.as_deref()).unwrap()
                },
                orig,
            );
            model.net.params.params[p].values[j] = orig;
        }
        worst = worst.max(rel_err(&grads.0[p], &fd));
    }
    worst
}

pub struct ChainModels {
    pub flow: FlowModel,
    pub vae: VaeModel,
    pub predictor: PredictorModel,
}

pub fn chain_models(seed: u64) -> ChainModels {
    let (length, vocab) = (6, 5);
    let arch = FlowArch { hidden: 10, depth: 2, embedding_dim: 4, ..FlowArch::new(4, false) };
    let pcfg = PredictorConfig { channels: 3, kernel: 3, hidden: 6, ..PredictorConfig::default() };
    ChainModels {
        flow: FlowModel::new(arch, seed).unwrap(),
        vae: small_vae(length, vocab, seed + 10),
        predictor: PredictorModel::new(length, vocab, &pcfg, Role::Predictor, seed + 20).unwrap(),
    }
}

/// Gradient of the guidance objective with respect to the latent, through
/// predictor, relaxed decoder and endpoint extrapolation.
pub fn chain_grad_error(seed: u64, extrapolation: f64, objective: Objective, temperature: f64) -> f64 {
    let m = chain_models(seed);
    let guide = Guide { objective, temperature, ..Guide::new(&m.flow, &m.vae, &m.predictor, 0.9) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    let z = uniform(&mut rng, 3, 4, -1.5, 1.5);
    let t = 0.4;
    let (_, grad) = guide.objective_and_grad(z.view(), t, extrapolation).unwrap();
    let total =
        |z: &Array2<f64>| -> f64 { guide.objective_and_grad(z.view(), t, extrapolation).unwrap().0.iter().sum() };
    let mut zp = z.clone();
    let mut fd = Vec::with_capacity(z.len());
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let orig = zp[[i, j]];
            fd.push(central(
                |v| {
                    zp[[i, j]] = v;
                    total(&zp)
                },
                orig,
            ));
            zp[[i, j]] = orig;
        }
    }
    rel_err(grad.as_standard_layout().as_slice().unwrap(), &fd)
}

pub mod oracles;

/// Random sequences over `vocab` symbols with lengths in `min_len..=max_len`.
pub fn random_set(rng: &mut ChaCha8Rng, n: usize, min_len: usize, max_len: usize, vocab: u8) -> Vec<Sequence> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            Sequence::new((0..len).map(|_| rng.random_range(0..vocab)).collect())
        })
        .collect()
}
