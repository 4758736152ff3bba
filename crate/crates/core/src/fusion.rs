//! Fusion of visual and inertial features: multi-head self-attention and the
//! two additive baselines (linear over the concatenation, and a sigmoid
//! soft mask followed by a linear layer).
//!
//! For attention, `concat(b_v, b_i)` of width `D` is cut into `tokens`
//! equal tokens of width `N = D / tokens` (by default one visual-leading and
//! one inertial-trailing token). There is no positional encoding. Every
//! strategy emits a `[B, D]` tensor.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Mha,
    Concat,
    Soft,
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(FusionKind::Mha),
            "concat" => Ok(FusionKind::Concat),
            "soft" => Ok(FusionKind::Soft),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}; expected mha, concat or soft"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    pub visual_width: usize,
    pub inertial_width: usize,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Bias terms on the attention projections.
    #[serde(default)]
    pub bias: bool,
}

fn default_tokens() -> usize {
    2
}

impl FusionConfig {
    /// Two tokens; for attention `heads * head_dim` equals the token width.
    /// `heads` is ignored by the additive strategies.
    pub fn new(kind: FusionKind, visual_width: usize, inertial_width: usize, heads: usize) -> Result<Self> {
        let d = visual_width + inertial_width;
        let heads = heads.max(1);
        if kind == FusionKind::Mha && (d % 2 != 0 || (d / 2) % heads != 0) {
            return Err(Error::Config(format!(
                "feature width {d} does not split into 2 tokens of {heads} equal heads"
            )));
        }
        let cfg = FusionConfig {
            kind,
            visual_width,
            inertial_width,
            tokens: 2,
            heads,
            head_dim: (d / 2 / heads).max(1),
            bias: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Widths of the full-scale encoders (480 visual, 30 inertial), eight
    /// heads of width 128.
    pub fn full_scale(kind: FusionKind) -> Self {
        FusionConfig {
            kind,
            visual_width: 480,
            inertial_width: 30,
            tokens: 2,
            heads: 8,
            head_dim: 128,
            bias: false,
        }
    }

    pub fn input_width(&self) -> usize {
        self.visual_width + self.inertial_width
    }

    pub fn output_width(&self) -> usize {
        self.input_width()
    }

    /// Token (model) width `N`.
    pub fn token_width(&self) -> usize {
        self.input_width() / self.tokens.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_width();
        if self.visual_width == 0 || self.inertial_width == 0 {
            return Err(Error::Config("fusion input widths must be positive".into()));
        }
        if self.kind == FusionKind::Mha {
            if self.tokens == 0 || d % self.tokens != 0 {
                return Err(Error::Config(format!("feature width {d} is not divisible into {} tokens", self.tokens)));
            }
            if self.heads == 0 || self.head_dim == 0 {
                return Err(Error::Config("attention needs at least one head of positive width".into()));
            }
        }
        Ok(())
    }
}

/// Exact learned-parameter count of a fusion block.
pub fn count_fusion_params(cfg: &FusionConfig) -> usize {
    let d = cfg.input_width();
    match cfg.kind {
        FusionKind::Concat => d * d + d,
        FusionKind::Soft => 2 * (d * d + d),
        FusionKind::Mha => {
            let (n, dk, w) = (cfg.heads, cfg.head_dim, cfg.token_width());
            let bias = if cfg.bias { 3 * n * dk + w } else { 0 };
            n * 3 * w * dk + n * dk * w + bias
        }
    }
}

/// `softmax(q k^T / sqrt(d_k)) v` for `q, k, v: [B, T, d_k]`. Returns the
/// output `[B, T, d_k]` and the weights `[B, T, T]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sq != sk || sk[..2] != sv[..2] || sv.len() != 3 {
        return Err(Error::dim("attention", &sq, &sk));
    }
    let dk = sq[2];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
struct Head {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    b: Option<[ParamId; 3]>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    width: usize,
    head_dim: usize,
    heads: Vec<Head>,
    w_o: ParamId,
    b_o: Option<ParamId>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, head_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut proj = |p: &str| store.add(format!("{name}.w_{p}{h}"), glorot_uniform(&[width, head_dim], width, head_dim, rng), true);
            let (w_q, w_k, w_v) = (proj("q"), proj("k"), proj("v"));
            let b = bias.then(|| ["q", "k", "v"].map(|p| store.add(format!("{name}.b_{p}{h}"), Tensor::zeros(&[head_dim]), true)));
            hs.push(Head { w_q, w_k, w_v, b });
        }
        let w_o = store.add(
            format!("{name}.w_h"),
            glorot_uniform(&[heads * head_dim, width], heads * head_dim, width, rng),
            true,
        );
        let b_o = bias.then(|| store.add(format!("{name}.b_h"), Tensor::zeros(&[width]), true));
        MultiHeadAttention {
            width,
            head_dim,
            heads: hs,
            w_o,
            b_o,
        }
    }

    fn project(&self, tape: &mut Tape, bound: &Bound, flat: Var, w: ParamId, b: Option<ParamId>, bt: [usize; 2]) -> Result<Var> {
        let mut y = tape.matmul(flat, bound.get(w))?;
        if let Some(b) = b {
            y = tape.add_bias(y, bound.get(b))?;
        }
        tape.reshape(y, &[bt[0], bt[1], self.head_dim])
    }

    /// Self-attention over `x: [B, T, N]`; returns `[B, T, N]` and the
    /// per-head attention weights.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::dim("multi-head attention", &s, &[0, 0, self.width]));
        }
        let (b, t) = (s[0], s[1]);
        let flat = tape.reshape(x, &[b * t, self.width])?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let bias = |i: usize| h.b.map(|b| b[i]);
            let q = self.project(tape, bound, flat, h.w_q, bias(0), [b, t])?;
            let k = self.project(tape, bound, flat, h.w_k, bias(1), [b, t])?;
            let v = self.project(tape, bound, flat, h.w_v, bias(2), [b, t])?;
            let (o, w) = attention(tape, q, k, v)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        let cat = tape.reshape(cat, &[b * t, self.heads.len() * self.head_dim])?;
        let mut y = tape.matmul(cat, bound.get(self.w_o))?;
        if let Some(bo) = self.b_o {
            y = tape.add_bias(y, bound.get(bo))?;
        }
        Ok((tape.reshape(y, &[b, t, self.width])?, weights))
    }
}

#[derive(Clone, Debug)]
enum Strategy {
    Mha(MultiHeadAttention),
    Concat(Linear),
    Soft { gate: Linear, out: Linear },
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub config: FusionConfig,
    strategy: Strategy,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_width();
        let strategy = match config.kind {
            FusionKind::Mha => Strategy::Mha(MultiHeadAttention::new(
                store,
                &format!("{name}.mha"),
                config.token_width(),
                config.heads,
                config.head_dim,
                config.bias,
                rng,
            )),
            FusionKind::Concat => Strategy::Concat(Linear::new(store, &format!("{name}.fc"), d, d, true, rng)),
            FusionKind::Soft => Strategy::Soft {
                gate: Linear::new(store, &format!("{name}.gate"), d, d, true, rng),
                out: Linear::new(store, &format!("{name}.fc"), d, d, true, rng),
            },
        };
        Ok(FusionBlock { config, strategy })
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width()
    }

    /// `b_v: [B, Fv]`, `b_i: [B, Fi]` to `[B, D]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, b_v: Var, b_i: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, bound, b_v, b_i)?.0)
    }

    /// As [`FusionBlock::forward`], also returning attention weights
    /// (`[B, T, T]` per head; empty for the additive strategies).
    pub fn forward_with_weights(&self, tape: &mut Tape, bound: &Bound, b_v: Var, b_i: Var) -> Result<(Var, Vec<Var>)> {
        let (sv, si) = (tape.shape(b_v).to_vec(), tape.shape(b_i).to_vec());
        let ok = sv.len() == 2 && si.len() == 2 && sv[0] == si[0];
        if !ok || sv[1] != self.config.visual_width || si[1] != self.config.inertial_width {
            return Err(Error::dim("fusion inputs", &sv, &si));
        }
        let batch = sv[0];
        let x = tape.concat(&[b_v, b_i], 1)?;
        match &self.strategy {
            Strategy::Concat(fc) => Ok((fc.forward(tape, bound, x)?, Vec::new())),
            Strategy::Soft { gate, out } => {
                let s = gate.forward(tape, bound, x)?;
                let s = tape.sigmoid(s);
                let masked = tape.mul(s, x)?;
                Ok((out.forward(tape, bound, masked)?, Vec::new()))
            }
            Strategy::Mha(mha) => {
                let (t, n) = (self.config.tokens, self.config.token_width());
                let tokens = tape.reshape(x, &[batch, t, n])?;
                let (y, w) = mha.forward(tape, bound, tokens)?;
                Ok((tape.reshape(y, &[batch, t * n])?, w))
            }
        }
    }
}
