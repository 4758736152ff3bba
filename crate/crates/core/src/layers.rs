//! Parameterised building blocks: linear, convolution, LSTM, batch norm and
//! dropout. Every layer registers its parameters in a [`ParamStore`] and
//! runs its forward pass on a caller-provided [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{ChannelStats, Tape, Tensor, Var};

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`. Biases start at zero.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: ChannelStats,
}

/// Per-pass state: train/eval mode, the dropout RNG and pending
/// batch-norm statistic updates.
#[derive(Debug)]
pub struct Context {
    pub mode: Mode,
    rng: ChaCha8Rng,
    pub stat_updates: Vec<StatUpdate>,
}

impl Context {
    pub fn eval() -> Self {
        Context {
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(0),
            stat_updates: Vec::new(),
        }
    }

    pub fn train(seed: u64) -> Self {
        Context {
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout(tape: &mut Tape, ctx: &mut Context, x: Var, p: f64) -> Result<Var> {
    if !ctx.is_train() || p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout probability {p} must be below 1")));
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let n = tape.value(x).numel();
    let mask = (0..n)
        .map(|_| if ctx.rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(&[in_features, out_features], in_features, out_features, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }

    /// `x: [B, in] -> [B, out]`
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.get(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bias(y, bound.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_uniform(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
                rng,
            ),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound.get(self.weight), Some(bound.get(self.bias)), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ctx: &mut Context, x: Var) -> Result<Var> {
        let (gamma, beta) = (bound.get(self.gamma), bound.get(self.beta));
        if ctx.is_train() {
            let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps)?;
            ctx.stat_updates.push(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
            return Ok(y);
        }
        let mean = tape.value(bound.get(self.running_mean)).data().to_vec();
        let inv_std: Vec<f64> = tape
            .value(bound.get(self.running_var))
            .data()
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let c = inv_std.len();
        let inv_std = tape.constant(Tensor::new(vec![c], inv_std)?);
        let mean = tape.constant(Tensor::new(vec![c], mean)?);
        let scale = tape.mul(gamma, inv_std)?;
        let offset = tape.mul(scale, mean)?;
        let shift = tape.sub(beta, offset)?;
        tape.channel_affine(x, scale, shift)
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_update(store: &mut ParamStore, update: &StatUpdate, momentum: f64) {
        let blend = |t: &mut Tensor, v: &[f64]| {
            for (r, s) in t.data_mut().iter_mut().zip(v) {
                *r = (1.0 - momentum) * *r + momentum * s;
            }
        };
        blend(store.get_mut(update.running_mean), &update.stats.mean);
        blend(store.get_mut(update.running_var), &update.stats.var);
    }
}

/// Parameters of one LSTM direction in one layer. Gate order is
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_size: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    /// `layers[l][d]`, `d = 0` forward, `d = 1` backward.
    pub layers: Vec<Vec<LstmDirection>>,
}

/// Per-layer forward-direction recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(layers: usize, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![Tensor::zeros(&[batch, hidden]); layers],
            c: vec![Tensor::zeros(&[batch, hidden]); layers],
        }
    }
}

pub struct LstmOutput {
    /// `[T, B, dirs * hidden]`, forward half first.
    pub sequence: Var,
    /// Final hidden state of every `(layer, direction)`, each `[B, hidden]`.
    pub final_h: Vec<Vec<Var>>,
    pub final_c: Vec<Vec<Var>>,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden: usize,
        num_layers: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dirs = if bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_size = if l == 0 { input_size } else { dirs * hidden };
            let mut per_dir = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let tag = if d == 0 { "fwd" } else { "bwd" };
                let prefix = format!("{name}.l{l}.{tag}");
                per_dir.push(LstmDirection {
                    w_ih: store.add(
                        format!("{prefix}.w_ih"),
                        glorot_uniform(&[in_size, 4 * hidden], in_size, 4 * hidden, rng),
                        true,
                    ),
                    w_hh: store.add(
                        format!("{prefix}.w_hh"),
                        glorot_uniform(&[hidden, 4 * hidden], hidden, 4 * hidden, rng),
                        true,
                    ),
                    bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[4 * hidden]), true),
                });
            }
            layers.push(per_dir);
        }
        Lstm {
            input_size,
            hidden,
            bidirectional,
            layers,
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_width(&self) -> usize {
        self.directions() * self.hidden
    }

    pub fn num_params(&self) -> usize {
        let dirs = self.directions();
        let h = self.hidden;
        (0..self.layers.len())
            .map(|l| {
                let in_size = if l == 0 { self.input_size } else { dirs * h };
                dirs * (in_size * 4 * h + h * 4 * h + 4 * h)
            })
            .sum()
    }

    /// One recurrence step: `x_proj` is the input projection `x W_ih` for
    /// this step, `[B, 4H]`.
    fn cell(&self, tape: &mut Tape, bound: &Bound, dir: &LstmDirection, x_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hh = tape.matmul(h, bound.get(dir.w_hh))?;
        let pre = tape.add(x_proj, hh)?;
        let gates = tape.add_bias(pre, bound.get(dir.bias))?;
        let n = self.hidden;
        let i = tape.slice(gates, 1, 0, n)?;
        let f = tape.slice(gates, 1, n, n)?;
        let g = tape.slice(gates, 1, 2 * n, n)?;
        let o = tape.slice(gates, 1, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs the stack over `x: [T, B, input]`. `init` seeds the forward
    /// direction of every layer; backward directions always start from zero.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, init: Option<&LstmState>) -> Result<LstmOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size {
            return Err(Error::dim("lstm input", &shape, &[0, 0, self.input_size]));
        }
        let (steps, batch) = (shape[0], shape[1]);
        if steps == 0 {
            return Err(Error::Contract("lstm over an empty sequence".into()));
        }
        let hidden = self.hidden;
        if let Some(s) = init {
            let ok = s.h.len() == self.layers.len()
                && s.c.len() == self.layers.len()
                && s.h.iter().chain(&s.c).all(|t| t.shape() == [batch, hidden]);
            if !ok {
                return Err(Error::dim("lstm state", &[self.layers.len(), batch, hidden], &[s.h.len()]));
            }
        }
        let mut input = x;
        let mut final_h = Vec::new();
        let mut final_c = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let in_size = tape.shape(input)[2];
            let flat = tape.reshape(input, &[steps * batch, in_size])?;
            let mut outputs: Vec<Vec<Var>> = Vec::new();
            let mut layer_h = Vec::new();
            let mut layer_c = Vec::new();
            for (d, dir) in layer.iter().enumerate() {
                let proj = tape.matmul(flat, bound.get(dir.w_ih))?;
                let proj = tape.reshape(proj, &[steps, batch, 4 * hidden])?;
                let (mut h, mut c) = match (d, init) {
                    (0, Some(s)) => (tape.constant(s.h[l].clone()), tape.constant(s.c[l].clone())),
                    _ => (
                        tape.constant(Tensor::zeros(&[batch, hidden])),
                        tape.constant(Tensor::zeros(&[batch, hidden])),
                    ),
                };
                let mut seq = vec![h; steps];
                let order: Vec<usize> = if d == 0 { (0..steps).collect() } else { (0..steps).rev().collect() };
                for t in order {
                    let xp = tape.slice(proj, 0, t, 1)?;
                    let xp = tape.reshape(xp, &[batch, 4 * hidden])?;
                    let (hn, cn) = self.cell(tape, bound, dir, xp, h, c)?;
                    h = hn;
                    c = cn;
                    seq[t] = h;
                }
                outputs.push(seq);
                layer_h.push(h);
                layer_c.push(c);
            }
            let mut per_step = Vec::with_capacity(steps);
            for t in 0..steps {
                let parts: Vec<Var> = outputs.iter().map(|o| o[t]).collect();
                let step = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
                per_step.push(tape.reshape(step, &[1, batch, self.directions() * hidden])?);
            }
            input = tape.concat(&per_step, 0)?;
            final_h.push(layer_h);
            final_c.push(layer_c);
        }
        Ok(LstmOutput {
            sequence: input,
            final_h,
            final_c,
        })
    }
}
