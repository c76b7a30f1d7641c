//! Small feed-forward networks over batches of flat feature rows, with exact
//! reverse-mode gradients for both parameters and inputs.
//!
//! Every tensor is a `batch x features` matrix. Sequence-shaped data is laid
//! out position-major: feature `p * channels + c` holds channel `c` at
//! position `p`, so a flattened `d x |V|` one-hot feeds a [`Layer::Conv1d`]
//! with `in_channels = |V|` directly.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    /// Same-padded 1-D convolution; `kernel` must be odd.
    Conv1d {
        length: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Silu,
    Tanh,
    /// Softmax over consecutive groups of `width` features.
    Softmax {
        width: usize,
    },
    /// Mean over positions, `length x channels -> channels`.
    MeanPool {
        length: usize,
        channels: usize,
    },
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv1d { .. } => "conv1d",
            Layer::Relu => "relu",
            Layer::Silu => "silu",
            Layer::Tanh => "tanh",
            Layer::Softmax { .. } => "softmax",
            Layer::MeanPool { .. } => "mean_pool",
        }
    }

    fn output_width(&self, input: usize) -> Result<usize> {
        let bad = |want: usize| {
            Err(Error::shape(format!("{} layer expects {want} input features, got {input}", self.name())))
        };
        match *self {
            Layer::Dense { input: i, output } => {
                if i != input {
                    return bad(i);
                }
                Ok(output)
            }
            Layer::Conv1d { length, in_channels, out_channels, kernel } => {
                if kernel % 2 == 0 {
                    return Err(Error::shape("conv1d kernel must be odd"));
                }
                if length * in_channels != input {
                    return bad(length * in_channels);
                }
                Ok(length * out_channels)
            }
            Layer::Relu | Layer::Silu | Layer::Tanh => Ok(input),
            Layer::Softmax { width } => {
                if width == 0 || !input.is_multiple_of(width) {
                    return Err(Error::shape(format!("softmax width {width} does not divide {input}")));
                }
                Ok(input)
            }
            Layer::MeanPool { length, channels } => {
                if length * channels != input {
                    return bad(length * channels);
                }
                Ok(channels)
            }
        }
    }

    /// `(weight shape, bias len, fan_in)` for parameterised layers.
    fn param_shapes(&self) -> Option<([usize; 2], usize, usize)> {
        match *self {
            Layer::Dense { input, output } => Some(([input, output], output, input)),
            Layer::Conv1d { in_channels, out_channels, kernel, .. } => {
                Some(([kernel * in_channels, out_channels], out_channels, kernel * in_channels))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub seed: u64,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| vec![0.0; p.values.len()]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }
}

/// Gradients aligned one-to-one with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&x| x == 0.0)
    }
}

/// A network: an architecture descriptor plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

/// Intermediate values recorded by [`Net::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[i]` is the input of layer `i`; the last entry is the output.
    values: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("tape holds at least the input")
    }
}

impl Net {
    /// Validates the descriptor and draws parameters uniformly in
    /// `+-1/sqrt(fan_in)` from a seeded stream.
    pub fn new(input_dim: usize, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        Self::output_dim_of(input_dim, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((wshape, blen, fan_in)) = layer.param_shapes() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..wshape[0] * wshape[1]).map(|_| rng.random_range(-bound..bound)).collect();
                let b = (0..blen).map(|_| rng.random_range(-bound..bound)).collect();
                params.push(Param { name: format!("{i}.{}.weight", layer.name()), shape: wshape.to_vec(), values: w });
                params.push(Param { name: format!("{i}.{}.bias", layer.name()), shape: vec![blen], values: b });
            }
        }
        Ok(Self { input_dim, layers, params: ParamStore { params, seed } })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(input_dim: usize, layers: Vec<Layer>, params: ParamStore) -> Result<Self> {
        let template = Self::new(input_dim, layers, params.seed)?;
        if template.params.len() != params.len() {
            return Err(Error::shape(format!(
                "descriptor needs {} parameter arrays, checkpoint has {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.params.iter().zip(&params.params) {
            if want.name != got.name || want.shape != got.shape || got.values.len() != want.values.len() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match descriptor {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite { context: "stored parameters".into() });
        }
        Ok(Self { input_dim, layers: template.layers, params })
    }

    fn output_dim_of(input_dim: usize, layers: &[Layer]) -> Result<usize> {
        layers
            .iter()
            .enumerate()
            .try_fold(input_dim, |w, (i, l)| l.output_width(w).map_err(|e| Error::shape(format!("layer {i}: {e}"))))
    }

    pub fn output_dim(&self) -> usize {
        Self::output_dim_of(self.input_dim, &self.layers).expect("validated at construction")
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        let mut slot = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.layer_forward(layer, &mut slot, x.view());
            check_finite(&x, || format!("forward output of layer {i} ({})", layer.name()))?;
        }
        Ok(x)
    }

    pub fn forward_tape(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_owned());
        let mut slot = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = self.layer_forward(layer, &mut slot, values[i].view());
            check_finite(&y, || format!("forward output of layer {i} ({})", layer.name()))?;
            values.push(y);
        }
        Ok(Tape { values })
    }

    /// Reverse pass: parameter gradients and the input gradient for the
    /// output adjoint `grad_out`. Gradients are summed over the batch.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backward_impl(tape, grad_out, true).map(|(g, dx)| (g.expect("requested"), dx))
    }

    /// Input gradient only.
    pub fn input_grad(&self, tape: &Tape, grad_out: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.backward_impl(tape, grad_out, false).map(|(_, dx)| dx)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_out: ArrayView2<'_, f64>,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        if grad_out.dim() != tape.output().dim() {
            return Err(Error::shape(format!(
                "output adjoint {:?} vs output {:?}",
                grad_out.dim(),
                tape.output().dim()
            )));
        }
        let mut grads = want_params.then(|| self.params.zeros_like());
        let mut slot = self.params.len();
        let mut dy = grad_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.values[i];
            let y = &tape.values[i + 1];
            dy = match *layer {
                Layer::Dense { input, output } => {
                    slot -= 2;
                    let w = self.weight(slot, input, output);
                    if let Some(g) = grads.as_mut() {
                        let dw = x.t().dot(&dy);
                        fill(&mut g.0[slot], &dw);
                        fill(&mut g.0[slot + 1], &dy.sum_axis(Axis(0)));
                    }
                    standard(dy.dot(&w.t()))
                }
                Layer::Conv1d { length, in_channels, out_channels, kernel } => {
                    slot -= 2;
                    let w = self.weight(slot, kernel * in_channels, out_channels);
                    let batch = dy.nrows();
                    let dy_rows = standard(dy)
                        .into_shape_with_order((batch * length, out_channels))
                        .map_err(|e| Error::shape(e.to_string()))?;
                    if let Some(g) = grads.as_mut() {
                        let cols = im2col(x.view(), length, in_channels, kernel);
                        let dw = cols.t().dot(&dy_rows);
                        fill(&mut g.0[slot], &dw);
                        fill(&mut g.0[slot + 1], &dy_rows.sum_axis(Axis(0)));
                    }
                    let dcols = dy_rows.dot(&w.t());
                    col2im(dcols.view(), batch, length, in_channels, kernel)
                }
                Layer::Relu => {
                    Zip::from(&mut dy).and(x).for_each(|d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0
                        }
                    });
                    dy
                }
                Layer::Silu => {
                    Zip::from(&mut dy).and(x).for_each(|d, &xv| {
                        let s = sigmoid(xv);
                        *d *= s * (1.0 + xv * (1.0 - s));
                    });
                    dy
                }
                Layer::Tanh => {
                    Zip::from(&mut dy).and(y).for_each(|d, &yv| *d *= 1.0 - yv * yv);
                    dy
                }
                Layer::Softmax { width } => {
                    let mut dx = dy;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        for (mut dg, yg) in drow.exact_chunks_mut(width).into_iter().zip(yrow.exact_chunks(width)) {
                            let dot: f64 = dg.iter().zip(yg.iter()).map(|(a, b)| a * b).sum();
                            Zip::from(&mut dg).and(&yg).for_each(|d, &s| *d = s * (*d - dot));
                        }
                    }
                    dx
                }
                Layer::MeanPool { length, channels } => {
                    let batch = dy.nrows();
                    let mut dx = Array2::zeros((batch, length * channels));
                    let inv = 1.0 / length as f64;
                    for (mut drow, grow) in dx.rows_mut().into_iter().zip(dy.rows()) {
                        for p in 0..length {
                            drow.slice_mut(s![p * channels..(p + 1) * channels]).scaled_add(inv, &grow);
                        }
                    }
                    dx
                }
            };
            check_finite(&dy, || format!("gradient entering layer {i} ({})", layer.name()))?;
        }
        Ok((grads, dy))
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "network expects {} input features, got {}",
                self.input_dim,
                input.ncols()
            )));
        }
        Ok(())
    }

    fn weight(&self, slot: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params.params[slot].values).expect("shape validated at construction")
    }

    fn bias(&self, slot: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.params[slot + 1].values)
    }

    fn layer_forward(&self, layer: &Layer, slot: &mut usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        match *layer {
            Layer::Dense { input, output } => {
                let w = self.weight(*slot, input, output);
                let b = self.bias(*slot);
                *slot += 2;
                standard(x.dot(&w) + b)
            }
            Layer::Conv1d { length, in_channels, out_channels, kernel } => {
                let w = self.weight(*slot, kernel * in_channels, out_channels);
                let b = self.bias(*slot);
                *slot += 2;
                let batch = x.nrows();
                let cols = im2col(x, length, in_channels, kernel);
                let y = standard(cols.dot(&w) + b);
                y.into_shape_with_order((batch, length * out_channels)).expect("contiguous product")
            }
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::Silu => x.mapv(|v| v * sigmoid(v)),
            Layer::Tanh => x.mapv(f64::tanh),
            Layer::Softmax { width } => softmax_groups(x, width),
            Layer::MeanPool { length, channels } => {
                let mut out = Array2::zeros((x.nrows(), channels));
                for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
                    for p in 0..length {
                        orow += &xrow.slice(s![p * channels..(p + 1) * channels]);
                    }
                    orow /= length as f64;
                }
                out
            }
        }
    }
}

/// Row-major copy unless already row-major.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn fill<D: ndarray::Dimension>(dst: &mut [f64], src: &ndarray::Array<f64, D>) {
    dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d = *s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over consecutive groups of `width` columns.
pub fn softmax_groups(x: ArrayView2<'_, f64>, width: usize) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for mut g in row.exact_chunks_mut(width) {
            let m = g.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            g.mapv_inplace(|v| (v - m).exp());
            let z = g.sum();
            g /= z;
        }
    }
    out
}

/// Rows `b*length + p`, columns `k*in_channels + c`, holding input position
/// `p + k - kernel/2` (zero outside the sequence).
fn im2col(x: ArrayView2<'_, f64>, length: usize, channels: usize, kernel: usize) -> Array2<f64> {
    let batch = x.nrows();
    let pad = kernel / 2;
    let mut cols = Array2::zeros((batch * length, kernel * channels));
    for b in 0..batch {
        let row = x.row(b);
        for p in 0..length {
            let mut dst = cols.row_mut(b * length + p);
            for k in 0..kernel {
                let src = p + k;
                if src < pad || src - pad >= length {
                    continue;
                }
                let src = src - pad;
                dst.slice_mut(s![k * channels..(k + 1) * channels])
                    .assign(&row.slice(s![src * channels..(src + 1) * channels]));
            }
        }
    }
    cols
}

fn col2im(cols: ArrayView2<'_, f64>, batch: usize, length: usize, channels: usize, kernel: usize) -> Array2<f64> {
    let pad = kernel / 2;
    let mut x = Array2::zeros((batch, length * channels));
    for b in 0..batch {
        let mut row = x.row_mut(b);
        for p in 0..length {
            let src_row = cols.row(b * length + p);
            for k in 0..kernel {
                let src = p + k;
                if src < pad || src - pad >= length {
                    continue;
                }
                let src = src - pad;
                let mut dst = row.slice_mut(s![src * channels..(src + 1) * channels]);
                dst += &src_row.slice(s![k * channels..(k + 1) * channels]);
            }
        }
    }
    x
}

fn check_finite(a: &Array2<f64>, context: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step_count: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Ok(Self { config, first: zeros.clone(), second: zeros })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.0.len() != params.len() || grads.0.iter().zip(&params.params).any(|(g, p)| g.len() != p.values.len()) {
            return Err(Error::shape("gradient layout does not match parameters"));
        }
        let c = &mut self.config;
        c.step_count += 1;
        let t = c.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.params.iter_mut().zip(&grads.0).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Convenience: one row as a `1 x n` matrix.
pub fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("1 x n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_dense_passes_input() {
        let mut net = Net::new(2, vec![Layer::Dense { input: 2, output: 2 }], 0).unwrap();
        net.params.params[0].values = vec![1.0, 0.0, 0.0, 1.0];
        net.params.params[1].values = vec![0.0, 0.0];
        let x = array![[0.3, -1.2], [5.0, 2.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut net = Net::new(3, vec![Layer::Dense { input: 3, output: 2 }], 0).unwrap();
        net.params.params[0].values = vec![0.0; 6];
        net.params.params[1].values = vec![0.5, -2.0];
        let y = net.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert_eq!(y, array![[0.5, -2.0]]);
    }

    #[test]
    fn two_layer_matches_hand_computation() {
        let mut net = Net::new(
            2,
            vec![Layer::Dense { input: 2, output: 2 }, Layer::Relu, Layer::Dense { input: 2, output: 2 }],
            0,
        )
        .unwrap();
        // W1 = [[1, 2], [3, 4]], b1 = [0.5, -10]; W2 = [[1, -1], [2, 0.5]], b2 = [0, 1]
        net.params.params[0].values = vec![1.0, 2.0, 3.0, 4.0];
        net.params.params[1].values = vec![0.5, -10.0];
        net.params.params[2].values = vec![1.0, -1.0, 2.0, 0.5];
        net.params.params[3].values = vec![0.0, 1.0];
        // x = [1, 1]: h = [1+3+0.5, 2+4-10] = [4.5, -4] -> relu [4.5, 0]
        // y = [4.5*1 + 0, 4.5*-1 + 0 + 1] = [4.5, -3.5]
        let y = net.forward(array![[1.0, 1.0]].view()).unwrap();
        assert_eq!(y, array![[4.5, -3.5]]);
    }

    #[test]
    fn linear_weight_gradient_is_input_broadcast() {
        let net = Net::new(3, vec![Layer::Dense { input: 3, output: 2 }], 4).unwrap();
        let x = array![[0.2, -0.7, 1.5]];
        let tape = net.forward_tape(x.view()).unwrap();
        let (g, _) = net.backward(&tape, Array2::ones((1, 2)).view()).unwrap();
        // d sum(y) / dW[i][j] = x[i]
        assert_eq!(g.0[0], vec![0.2, 0.2, -0.7, -0.7, 1.5, 1.5]);
        assert_eq!(g.0[1], vec![1.0, 1.0]);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let net = Net::new(
            4,
            vec![
                Layer::Conv1d { length: 2, in_channels: 2, out_channels: 3, kernel: 3 },
                Layer::Silu,
                Layer::Dense { input: 6, output: 1 },
            ],
            1,
        )
        .unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let tape = net.forward_tape(x.view()).unwrap();
        let (g, dx) = net.backward(&tape, Array2::zeros((1, 1)).view()).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(Net::new(3, vec![Layer::Dense { input: 4, output: 1 }], 0).is_err());
        let net = Net::new(3, vec![Layer::Dense { input: 3, output: 1 }], 0).unwrap();
        assert!(net.forward(Array2::zeros((1, 2)).view()).is_err());
    }

    #[test]
    fn non_finite_names_layer() {
        let mut net = Net::new(1, vec![Layer::Dense { input: 1, output: 1 }, Layer::Tanh], 0).unwrap();
        net.params.params[0].values = vec![f64::INFINITY];
        let err = net.forward(array![[-1.0]].view()).unwrap_err();
        assert!(err.to_string().contains("layer 0 (dense)"), "{err}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let net = Net::new(2, vec![Layer::Dense { input: 2, output: 1 }], 0).unwrap();
        let mut params = net.params.clone();
        let mut adam = Adam::new(AdamConfig::new(0.1), &params).unwrap();
        let zero = params.zeros_like();
        for _ in 0..5 {
            adam.step(&mut params, &zero).unwrap();
        }
        assert_eq!(params, net.params);
        assert_eq!(adam.config.step_count, 5);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        for g in [1e-4, 0.3, 250.0] {
            let mut params =
                ParamStore { params: vec![Param { name: "x".into(), shape: vec![1], values: vec![1.0] }], seed: 0 };
            let mut adam = Adam::new(AdamConfig::new(0.01), &params).unwrap();
            adam.step(&mut params, &Gradients(vec![vec![g]])).unwrap();
            // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((params.params[0].values[0] - expected).abs() < 1e-15);
            assert!((1.0 - params.params[0].values[0] - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut params =
            ParamStore { params: vec![Param { name: "x".into(), shape: vec![1], values: vec![0.0] }], seed: 0 };
        let mut adam = Adam::new(AdamConfig::new(0.05), &params).unwrap();
        let mut prev = 0.0;
        for _ in 0..200 {
            adam.step(&mut params, &Gradients(vec![vec![-2.0]])).unwrap();
            let x = params.params[0].values[0];
            assert!(x > prev);
            prev = x;
        }
        // constant gradient: bias-corrected ratio stays exactly 1 -> lr per step
        assert!((prev - 200.0 * 0.05).abs() < 1e-6);
    }

    #[test]
    fn invalid_adam_config_rejected() {
        let p = ParamStore { params: vec![], seed: 0 };
        let mut c = AdamConfig::new(0.1);
        c.beta1 = 1.0;
        assert!(Adam::new(c, &p).is_err());
        assert!(Adam::new(AdamConfig::new(0.0), &p).is_err());
    }
}
