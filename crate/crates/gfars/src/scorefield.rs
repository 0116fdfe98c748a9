//! Selection score networks.
//!
//! All variants consume the same per-node input, the concatenation of
//! `feats[i]`, the noisy selection value `c_i(t)`, and a Gaussian Fourier
//! embedding of `t`:
//!
//! * [`score_gnn`]: edge convolution over the complete part graph including
//!   self-edges. Each round computes messages `m_ij = relu(linear(concat(h_i,
//!   h_j - h_i)))` and pools `h_i <- max_j m_ij`, so information flows
//!   between every pair of parts.
//! * [`score_mlp`]: the same stack without message passing, applied to each
//!   part row independently (the "no graph" ablation).
//! * [`bce_head`]: the GNN trunk evaluated at `t = 0`, `c = 0` with a sigmoid
//!   head, a deterministic per-part selection probability (the
//!   "no gradient field" ablation).
//!
//! The score variants divide the head output by `marginal_std(t)`, the
//! standard parameterization that keeps the regression target `-z / sigma_t`
//! of order one across the whole time range.

use crate::error::{Error, Result};
use crate::ndcore::{ModelParams, NdError, NdResult, ParamVars, Tape, Tensor, Var};
use crate::sde::SdeSchedule;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which selection network a run trains and samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    Gnn,
    Mlp,
    Bce,
}

impl ScoreVariant {
    /// Score-based variants train with denoising score matching; `bce`
    /// trains with binary cross entropy instead.
    pub fn is_score_based(self) -> bool {
        !matches!(self, ScoreVariant::Bce)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreVariant::Gnn => "gnn",
            ScoreVariant::Mlp => "mlp",
            ScoreVariant::Bce => "bce",
        }
    }
}

/// Architecture hyperparameters shared by all variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreNetConfig {
    pub variant: ScoreVariant,
    /// Edge-convolution rounds (gnn/bce) or hidden layers (mlp).
    pub layers: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
    pub fourier_scale: f64,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            variant: ScoreVariant::Gnn,
            layers: 3,
            hidden: 128,
            time_embed_dim: 32,
            fourier_scale: 16.0,
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "score net needs layers >= 1 and hidden >= 1, got layers={} hidden={}",
                self.layers, self.hidden
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if !(self.fourier_scale > 0.0) {
            return Err(Error::Config(format!(
                "fourier_scale must be positive, got {}",
                self.fourier_scale
            )));
        }
        Ok(())
    }
}

/// Reconstruct architecture hyperparameters from checkpointed parameters.
///
/// The stored tensors pin every dimension. What they cannot pin: the
/// `gnn`-vs-`bce` distinction (same trunk, different readout), which the
/// caller supplies, and `fourier_scale`, which only matters at init because
/// the drawn frequencies are stored; its default is reported.
pub fn infer_net_config(params: &ModelParams, variant: ScoreVariant) -> Result<ScoreNetConfig> {
    let time_embed_dim = 2 * params.get("score.time_w")?.numel();
    let (prefix, first_weight) = match variant {
        ScoreVariant::Gnn | ScoreVariant::Bce => ("score.gnn.e", "score.gnn.e0.w_self"),
        ScoreVariant::Mlp => ("score.mlp.l", "score.mlp.l0.w"),
    };
    if !params.contains(first_weight) {
        return Err(Error::Config(format!(
            "checkpoint has no {} trunk (missing {first_weight})",
            variant.as_str()
        )));
    }
    let hidden = params.get(first_weight)?.shape()[1];
    let mut layers = 1;
    while params.contains(&format!(
        "{prefix}{layers}.{}",
        if variant == ScoreVariant::Mlp { "w" } else { "w_self" }
    )) {
        layers += 1;
    }
    let cfg = ScoreNetConfig {
        variant,
        layers,
        hidden,
        time_embed_dim,
        fourier_scale: ScoreNetConfig::default().fourier_scale,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Gaussian Fourier features of a scalar time: `[sin(2 pi w_i t)...,
/// cos(2 pi w_i t)...]` for frozen frequencies `w`. The frequencies are
/// drawn once at init and checkpointed, so the embedding is a fixed function
/// of `t` for the lifetime of a model.
pub fn time_embed(freqs: &Tensor, t: f64) -> NdResult<Tensor> {
    let half = freqs.numel();
    let mut out = Vec::with_capacity(2 * half);
    for &w in freqs.data() {
        out.push((2.0 * std::f64::consts::PI * w * t).sin());
    }
    for &w in freqs.data() {
        out.push((2.0 * std::f64::consts::PI * w * t).cos());
    }
    Tensor::vector(out)
}

/// Register freshly initialized score-network parameters for `cfg` on top of
/// encoder features of width `feature_dim`.
///
/// Layout: `score.time_w` (frozen Fourier frequencies), trunk weights under
/// `score.gnn.e{l}.*` or `score.mlp.l{l}.*`, and a zero-initialized linear
/// head under `score.head.*` so an untrained score is exactly zero (and an
/// untrained BCE probability exactly 0.5).
pub fn init_score_params(
    params: &mut ModelParams,
    cfg: &ScoreNetConfig,
    feature_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let half = cfg.time_embed_dim / 2;
    let freq_dist = Normal::new(0.0, cfg.fourier_scale).expect("finite scale");
    let freqs: Vec<f64> = (0..half).map(|_| freq_dist.sample(rng)).collect();
    params.insert("score.time_w", Tensor::vector(freqs)?)?;

    let node_in = feature_dim + 1 + cfg.time_embed_dim;
    match cfg.variant {
        ScoreVariant::Gnn | ScoreVariant::Bce => {
            for l in 0..cfg.layers {
                let fan_in = if l == 0 { node_in } else { cfg.hidden };
                // the edge input is a concat of two fan_in-wide halves
                let std = (1.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                for half_name in ["w_self", "w_diff"] {
                    let w: Vec<f64> = (0..fan_in * cfg.hidden).map(|_| dist.sample(rng)).collect();
                    params.insert(
                        format!("score.gnn.e{l}.{half_name}"),
                        Tensor::matrix(fan_in, cfg.hidden, w)?,
                    )?;
                }
                params.insert(
                    format!("score.gnn.e{l}.b"),
                    Tensor::vector(vec![0.0; cfg.hidden])?,
                )?;
            }
        }
        ScoreVariant::Mlp => {
            for l in 0..cfg.layers {
                let fan_in = if l == 0 { node_in } else { cfg.hidden };
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let w: Vec<f64> = (0..fan_in * cfg.hidden).map(|_| dist.sample(rng)).collect();
                params.insert(
                    format!("score.mlp.l{l}.w"),
                    Tensor::matrix(fan_in, cfg.hidden, w)?,
                )?;
                params.insert(
                    format!("score.mlp.l{l}.b"),
                    Tensor::vector(vec![0.0; cfg.hidden])?,
                )?;
            }
        }
    }
    params.insert(
        "score.head.w",
        Tensor::matrix(cfg.hidden, 1, vec![0.0; cfg.hidden])?,
    )?;
    params.insert("score.head.b", Tensor::vector(vec![0.0])?)?;
    Ok(())
}

/// Per-node network input `[K x (D + 1 + TE)]`: features, noisy selection
/// channel, broadcast time embedding.
fn node_inputs(
    tape: &Tape,
    vars: &ParamVars,
    feats: Var,
    c: &Tensor,
    t: f64,
) -> NdResult<Var> {
    let shape = tape.shape_of(feats);
    if shape.len() != 2 {
        return Err(NdError::Dimension {
            op: "node_inputs",
            detail: format!("feats must be rank-2, got {shape:?}"),
        });
    }
    let k = shape[0];
    if c.rank() != 1 || c.numel() != k {
        return Err(NdError::Dimension {
            op: "node_inputs",
            detail: format!("selection len {:?} vs {k} parts", c.shape()),
        });
    }
    let c_col = tape.reshape(tape.leaf(c.clone()), vec![k, 1])?;
    let freqs = tape.value(vars.get("score.time_w")?);
    let emb = tape.leaf(time_embed(&freqs, t)?);
    let emb_rows = tape.broadcast_rows(emb, k)?;
    tape.concat_cols(&[feats, c_col, emb_rows])
}

/// Edge-convolution trunk over the complete graph with self-edges.
///
/// The edge message `linear(concat(h_i, h_j - h_i))` is computed as
/// `h_i (w_self - w_diff) + h_j w_diff`, two K-row matmuls plus an all-pairs
/// row sum, instead of materializing the K^2 concatenated edge inputs.
fn gnn_trunk(tape: &Tape, vars: &ParamVars, cfg: &ScoreNetConfig, x: Var) -> NdResult<Var> {
    let k = tape.shape_of(x)[0];
    let mut h = x;
    for l in 0..cfg.layers {
        let w_self = vars.get(&format!("score.gnn.e{l}.w_self"))?;
        let w_diff = vars.get(&format!("score.gnn.e{l}.w_diff"))?;
        let b = vars.get(&format!("score.gnn.e{l}.b"))?;
        let a = tape.matmul(h, tape.sub(w_self, w_diff)?)?;
        let bb = tape.broadcast_rows(b, k)?;
        let other = tape.add(tape.matmul(h, w_diff)?, bb)?;
        let messages = tape.relu(tape.pairwise_add_rows(a, other)?)?;
        h = tape.group_max_rows(messages, k)?;
    }
    Ok(h)
}

/// Per-part MLP trunk: the same widths as the GNN, no cross-part edges.
fn mlp_trunk(tape: &Tape, vars: &ParamVars, cfg: &ScoreNetConfig, x: Var) -> NdResult<Var> {
    let k = tape.shape_of(x)[0];
    let mut h = x;
    for l in 0..cfg.layers {
        let w = vars.get(&format!("score.mlp.l{l}.w"))?;
        let b = vars.get(&format!("score.mlp.l{l}.b"))?;
        let bb = tape.broadcast_rows(b, k)?;
        h = tape.relu(tape.add(tape.matmul(h, w)?, bb)?)?;
    }
    Ok(h)
}

/// Linear head: `[K x H] -> [K]`.
fn head(tape: &Tape, vars: &ParamVars, h: Var) -> NdResult<Var> {
    let k = tape.shape_of(h)[0];
    let w = vars.get("score.head.w")?;
    let b = vars.get("score.head.b")?;
    let out = tape.add(tape.matmul(h, w)?, b)?;
    tape.reshape(out, vec![k])
}

fn check_time(op: &'static str, t: f64, sched: &SdeSchedule) -> Result<()> {
    if !(sched.t_min..=sched.t_max).contains(&t) {
        return Err(Error::domain(
            op,
            format!("t {t} outside [{}, {}]", sched.t_min, sched.t_max),
        ));
    }
    Ok(())
}

/// GNN estimate of the selection score `grad_c log p_t(c | feats)`.
pub fn score_gnn(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ScoreNetConfig,
    feats: Var,
    c_t: &Tensor,
    t: f64,
    sched: &SdeSchedule,
) -> Result<Var> {
    check_time("score_gnn", t, sched)?;
    let x = node_inputs(tape, vars, feats, c_t, t)?;
    let h = gnn_trunk(tape, vars, cfg, x)?;
    let raw = head(tape, vars, h)?;
    Ok(tape.scale(raw, 1.0 / sched.marginal_std(t)?)?)
}

/// Per-part MLP estimate of the selection score (no message passing).
pub fn score_mlp(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ScoreNetConfig,
    feats: Var,
    c_t: &Tensor,
    t: f64,
    sched: &SdeSchedule,
) -> Result<Var> {
    check_time("score_mlp", t, sched)?;
    let x = node_inputs(tape, vars, feats, c_t, t)?;
    let h = mlp_trunk(tape, vars, cfg, x)?;
    let raw = head(tape, vars, h)?;
    Ok(tape.scale(raw, 1.0 / sched.marginal_std(t)?)?)
}

/// Variant dispatch for the score-based networks. `bce` has no score
/// function and is rejected at config validation time.
pub fn selection_score(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ScoreNetConfig,
    feats: Var,
    c_t: &Tensor,
    t: f64,
    sched: &SdeSchedule,
) -> Result<Var> {
    match cfg.variant {
        ScoreVariant::Gnn => score_gnn(tape, vars, cfg, feats, c_t, t, sched),
        ScoreVariant::Mlp => score_mlp(tape, vars, cfg, feats, c_t, t, sched),
        ScoreVariant::Bce => Err(Error::Config(
            "bce variant is deterministic; it has no selection score".into(),
        )),
    }
}

/// Pre-sigmoid membership logits of the deterministic selection head: the
/// GNN trunk evaluated at `t = 0` with a zero selection channel. Training
/// consumes the logits (stable binary cross entropy); inference squashes
/// them via [`bce_head`].
pub fn bce_logits(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ScoreNetConfig,
    feats: Var,
) -> Result<Var> {
    let k = tape.shape_of(feats)[0];
    let zeros = Tensor::vector(vec![0.0; k])?;
    let x = node_inputs(tape, vars, feats, &zeros, 0.0)?;
    let h = gnn_trunk(tape, vars, cfg, x)?;
    Ok(head(tape, vars, h)?)
}

/// Deterministic per-part selection probabilities: sigmoid of
/// [`bce_logits`].
pub fn bce_head(
    tape: &Tape,
    vars: &ParamVars,
    cfg: &ScoreNetConfig,
    feats: Var,
) -> Result<Var> {
    let raw = bce_logits(tape, vars, cfg, feats)?;
    Ok(tape.sigmoid(raw)?)
}
