//! Score-matching training loop over mixed part sets, plus the BCE
//! ablation loop.
//!
//! Each labeled set expands into its auto-regressive teacher trajectory:
//! groups are emitted in a uniformly random order, and pair n is (parts not
//! yet emitted, indicator of the n-th group). Random order is deliberate;
//! a canonical order would let the network key on emission position instead
//! of geometry. Training shuffles all pairs, batches them, and takes one
//! Adam step per batch; the score variants minimize the denoising
//! score-matching loss at t ~ U(t_min, t_max), the deterministic variant
//! minimizes binary cross entropy on its logits.
//!
//! All randomness inside epoch e comes from streams derived as
//! (seed, "pairs"/"noise"/"val", e), so a run is bit-reproducible and a
//! checkpoint written at an epoch boundary resumes to bit-identical
//! subsequent losses.

use crate::error::{Error, Result};
use crate::evalkit::{metrics, set_counts, AveragingMode, Counts};
use crate::grouping::{group_parts, BceSelector, ModelScorer, SelectionPolicy, DEFAULT_MAX_ITER};
use crate::ndcore::{
    load_checkpoint, save_checkpoint, Gradients, ModelParams, NdError, ParamVars, Tape, Tensor,
    Var,
};
use crate::partenc::{encode_set, init_encoder_params, PartCloud};
use crate::sampler::SamplerConfig;
use crate::scorefield::{bce_logits, init_score_params, selection_score, ScoreNetConfig, ScoreVariant};
use crate::sde::{dsm_loss, SdeSchedule};
use crate::seeding::{derive_rng, derive_seed};
use crate::synthdata::MixedPartSet;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Validation runs the full grouping pipeline with this many sampling
/// steps as a cheap proxy; final evaluation uses the sampler default.
pub const VALIDATION_STEPS: usize = 100;

/// Training objective. `dsm` fits a score network through the denoising
/// score-matching residual; `bce` fits the deterministic selection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dsm,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs between validation passes (each also writes a checkpoint).
    pub eval_every: usize,
    /// Cosine-decay floor as a fraction of `learning_rate`; 1 keeps the
    /// rate constant. Decay runs over the epoch index, so resumed runs
    /// continue on the same curve.
    pub lr_min_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossKind::Dsm,
            eval_every: 5,
            lr_min_frac: 1.0,
        }
    }
}

/// Learning rate applied during `epoch`: cosine from `learning_rate` down
/// to `learning_rate * lr_min_frac` across `cfg.epochs`.
pub fn effective_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.lr_min_frac >= 1.0 || cfg.epochs <= 1 {
        return cfg.learning_rate;
    }
    let floor = cfg.learning_rate * cfg.lr_min_frac;
    let progress = (epoch.min(cfg.epochs - 1)) as f64 / (cfg.epochs - 1) as f64;
    floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

impl TrainConfig {
    /// `learning_rate` may be zero: a zero-step run is the standard probe
    /// that the optimizer, not some side channel, moves the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_min_frac) {
            return Err(Error::Config(format!(
                "lr_min_frac must be in [0, 1], got {}",
                self.lr_min_frac
            )));
        }
        Ok(())
    }
}

/// One teacher step: the parts still on the table and the {0,1} indicator
/// of the group emitted next.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub parts: Vec<PartCloud>,
    pub target: Tensor,
}

/// Expand a labeled set into its teacher trajectory under a uniformly
/// random group order. A set with N groups yields N pairs; the last pair's
/// target is all-true because only one group remains.
pub fn make_training_pairs(
    set: &MixedPartSet,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingPair>> {
    set.validate()?;
    let groups = set.gt_groups().ok_or_else(|| {
        Error::Dataset(format!(
            "set {}: training needs gt_group labels on every part",
            set.set_id
        ))
    })?;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);

    let mut remaining: Vec<PartCloud> = set.parts.clone();
    let mut pairs = Vec::with_capacity(order.len());
    for &g in &order {
        let members: BTreeSet<u32> = groups[g].iter().copied().collect();
        let target: Vec<f64> = remaining
            .iter()
            .map(|p| if members.contains(&p.part_id) { 1.0 } else { 0.0 })
            .collect();
        pairs.push(TrainingPair {
            parts: remaining.clone(),
            target: Tensor::vector(target)?,
        });
        remaining.retain(|p| !members.contains(&p.part_id));
    }
    Ok(pairs)
}

/// Adam moments keyed by parameter name. Parameters that never receive a
/// gradient (the frozen Fourier frequencies) never grow moments and are
/// never stepped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    /// One Adam update over every parameter that received a gradient.
    /// `vars` must be the binding that produced `grads`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        vars: &ParamVars,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, var) in vars.iter() {
            let Some(g) = grads.get(var) else { continue };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.map(|_| 0.0)?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.map(|_| 0.0)?,
            };
            let m_new = m_prev.zip_map(g, |m, gi| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * gi)?;
            let v_new =
                v_prev.zip_map(g, |v, gi| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * gi * gi)?;
            let update = m_new.zip_map(&v_new, |m, v| {
                lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS)
            })?;
            let p_new = params.get(name)?.zip_map(&update, |p, u| p - u)?;
            params.set(name, p_new)?;
            self.m.insert(name.to_string(), m_new);
            self.v.insert(name.to_string(), v_new);
        }
        Ok(())
    }
}

/// Everything a resumable run carries: parameters, optimizer moments, and
/// progress counters. Snapshots round-trip through the ordinary checkpoint
/// format with moments stored as `opt.m.<name>` / `opt.v.<name>` entries
/// and counters packed into `opt.meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    adam: AdamState,
    next_epoch: usize,
    global_step: u64,
    best_f1: f64,
    best_epoch: i64,
}

const META_NAME: &str = "opt.meta";
const META_LEN: usize = 5;

impl TrainState {
    /// Fresh parameters for `net` over encoder features of width
    /// `feature_dim`, initialized from the (seed, "init", 0) stream.
    pub fn init(feature_dim: usize, net: &ScoreNetConfig, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, "init", 0);
        let mut params = ModelParams::new();
        init_encoder_params(&mut params, feature_dim, &mut rng)?;
        init_score_params(&mut params, net, feature_dim, &mut rng)?;
        Ok(Self::fresh(params))
    }

    /// Wrap already-initialized parameters with empty optimizer state.
    pub fn fresh(params: ModelParams) -> Self {
        Self {
            params,
            adam: AdamState::default(),
            next_epoch: 0,
            global_step: 0,
            best_f1: -1.0,
            best_epoch: -1,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// Best validation F1 seen so far, with the epoch that produced it.
    pub fn best(&self) -> Option<(usize, f64)> {
        (self.best_epoch >= 0).then_some((self.best_epoch as usize, self.best_f1))
    }

    /// Flatten into the named-tensor checkpoint layout.
    pub fn to_snapshot(&self) -> Result<ModelParams> {
        let mut out = ModelParams::new();
        for (name, tensor) in self.params.iter() {
            out.insert(name, tensor.clone())?;
        }
        for name in self.params.names() {
            if let Some(m) = self.adam.m.get(name) {
                out.insert(format!("opt.m.{name}"), m.clone())?;
            }
            if let Some(v) = self.adam.v.get(name) {
                out.insert(format!("opt.v.{name}"), v.clone())?;
            }
        }
        out.insert(
            META_NAME,
            Tensor::vector(vec![
                self.next_epoch as f64,
                self.global_step as f64,
                self.adam.t as f64,
                self.best_f1,
                self.best_epoch as f64,
            ])?,
        )?;
        Ok(out)
    }

    pub fn from_snapshot(snapshot: &ModelParams) -> Result<Self> {
        let meta = snapshot
            .get(META_NAME)
            .map_err(|_| Error::Dataset("checkpoint has no optimizer state".into()))?;
        if meta.numel() != META_LEN {
            return Err(Error::Dataset(format!(
                "malformed {META_NAME}: expected {META_LEN} entries, got {}",
                meta.numel()
            )));
        }
        let meta = meta.data();
        let mut params = ModelParams::new();
        let mut adam = AdamState {
            t: meta[2] as u64,
            ..AdamState::default()
        };
        for (name, tensor) in snapshot.iter() {
            if name == META_NAME {
                continue;
            } else if let Some(rest) = name.strip_prefix("opt.m.") {
                adam.m.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                adam.v.insert(rest.to_string(), tensor.clone());
            } else {
                params.insert(name, tensor.clone())?;
            }
        }
        Ok(Self {
            params,
            adam,
            next_epoch: meta[0] as usize,
            global_step: meta[1] as u64,
            best_f1: meta[3],
            best_epoch: meta[4] as i64,
        })
    }
}

/// Write a resumable training checkpoint.
pub fn save_training_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    Ok(save_checkpoint(&state.to_snapshot()?, path)?)
}

/// Load a resumable training checkpoint.
pub fn load_training_state(path: impl AsRef<Path>) -> Result<TrainState> {
    TrainState::from_snapshot(&load_checkpoint(path)?)
}

/// Load parameters for inference, accepting either a plain parameter
/// checkpoint or a training snapshot (whose `opt.*` entries are dropped).
pub fn load_inference_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let raw = load_checkpoint(path)?;
    let mut out = ModelParams::new();
    for (name, tensor) in raw.iter() {
        if !name.starts_with("opt.") {
            out.insert(name, tensor.clone())?;
        }
    }
    Ok(out)
}

/// One row of the loss history. `val_f1` is present on the final batch of
/// epochs where a validation pass ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
}

/// Render history as CSV (`step,epoch,loss,val_f1`; empty cell when no
/// validation ran at that step).
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,loss,val_f1\n");
    for r in rows {
        let val = r.val_f1.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.loss, val));
    }
    out
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, history_csv(rows))?)
}

/// Overall-average F1 of the full grouping pipeline on `val_sets`, using
/// the policy matching `net.variant` at [`VALIDATION_STEPS`] sampler steps.
pub fn validation_f1(
    params: &ModelParams,
    net: &ScoreNetConfig,
    sched: &SdeSchedule,
    val_sets: &[MixedPartSet],
    seed: u64,
) -> Result<f64> {
    let sampler = SamplerConfig {
        steps: VALIDATION_STEPS,
        seed,
        ..SamplerConfig::default()
    };
    let policy: Box<dyn SelectionPolicy> = if net.variant == ScoreVariant::Bce {
        Box::new(BceSelector::new(params.clone(), *net)?)
    } else {
        Box::new(ModelScorer::new(params.clone(), *net, *sched)?)
    };
    let mut per_set: Vec<(String, Counts)> = Vec::with_capacity(val_sets.len());
    for set in val_sets {
        let gt = set.gt_groups().ok_or_else(|| {
            Error::Dataset(format!("set {}: validation needs gt_group labels", set.set_id))
        })?;
        let out = group_parts(policy.as_ref(), set, sched, &sampler, DEFAULT_MAX_ITER)?;
        per_set.push((
            set.set_id.clone(),
            set_counts(&out.groups, &out.residual, &gt)?,
        ));
    }
    Ok(metrics(&per_set, AveragingMode::Overall)?.f1)
}

fn loss_matches_variant(loss: LossKind, variant: ScoreVariant) -> bool {
    match loss {
        LossKind::Dsm => variant.is_score_based(),
        LossKind::Bce => variant == ScoreVariant::Bce,
    }
}

/// One optimizer step over `batch`. Builds a single tape, accumulates the
/// per-pair losses, and backpropagates their mean.
fn train_step(
    state: &mut TrainState,
    batch: &[TrainingPair],
    net: &ScoreNetConfig,
    sched: &SdeSchedule,
    cfg: &TrainConfig,
    epoch: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = state.params.bind(&tape);
    let mut total: Option<Var> = None;
    for pair in batch {
        let feats = encode_set(&tape, &vars, &pair.parts)?;
        let (pair_loss, t_used) = match cfg.loss {
            LossKind::Dsm => {
                let t = noise_rng.gen_range(sched.t_min..sched.t_max);
                let z = Tensor::vector(
                    (0..pair.parts.len())
                        .map(|_| noise_rng.sample(StandardNormal))
                        .collect(),
                )?;
                let loss = dsm_loss(
                    &tape,
                    |tape, c_t, t| {
                        selection_score(tape, &vars, net, feats, c_t, t, sched)
                            .map_err(|e| NdError::Eval(e.to_string()))
                    },
                    &pair.target,
                    t,
                    &z,
                    sched,
                )?;
                (loss, t)
            }
            LossKind::Bce => {
                // softplus(x) - x*y is binary cross entropy on logits,
                // stable for large |x|; the trunk runs at its native t = 0
                let logits = bce_logits(&tape, &vars, net, feats)?;
                let sp = tape.softplus(logits)?;
                let xy = tape.mul(logits, tape.leaf(pair.target.clone()))?;
                let diff = tape.sub(sp, xy)?;
                (tape.sum(diff)?, 0.0)
            }
        };
        let value = tape.value(pair_loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {value} at step {}, epoch {epoch}, t {t_used:.6}",
                state.global_step + 1
            )));
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, pair_loss)?,
            None => pair_loss,
        });
    }
    let total = total.ok_or_else(|| Error::domain("train_step", "empty batch".to_string()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(mean).data()[0];
    let grads = tape.backward(mean)?;
    state
        .adam
        .step(&mut state.params, &vars, &grads, effective_lr(cfg, epoch))?;
    state.global_step += 1;
    Ok(loss_value)
}

/// Run (or resume) training until `cfg.epochs` epochs are done.
///
/// Per epoch: expand every training set into teacher pairs, shuffle,
/// mini-batch, one Adam step per batch. When `val_sets` is non-empty, every
/// `eval_every`-th epoch (and the final one) runs a validation grouping
/// pass, tags the epoch's last history row with its F1, and, under
/// `ckpt_dir`, writes `epoch-NNNN.ckpt` (resumable) plus `best.ckpt`
/// (parameters only) whenever the F1 improves on the best so far.
pub fn run(
    state: &mut TrainState,
    train_sets: &[MixedPartSet],
    val_sets: &[MixedPartSet],
    net: &ScoreNetConfig,
    sched: &SdeSchedule,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    net.validate()?;
    sched.validate()?;
    if train_sets.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    if !loss_matches_variant(cfg.loss, net.variant) {
        return Err(Error::Config(format!(
            "loss {:?} cannot train variant {}",
            cfg.loss,
            net.variant.as_str()
        )));
    }
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut history = Vec::new();
    for epoch in state.next_epoch..cfg.epochs {
        let mut pairs_rng = derive_rng(cfg.seed, "pairs", epoch as u64);
        let mut noise_rng = derive_rng(cfg.seed, "noise", epoch as u64);
        let mut pairs = Vec::new();
        for set in train_sets {
            pairs.extend(make_training_pairs(set, &mut pairs_rng)?);
        }
        pairs.shuffle(&mut pairs_rng);

        for batch in pairs.chunks(cfg.batch_size) {
            let loss = train_step(state, batch, net, sched, cfg, epoch, &mut noise_rng)?;
            history.push(HistoryRow {
                step: state.global_step,
                epoch,
                loss,
                val_f1: None,
            });
        }
        state.next_epoch = epoch + 1;

        let due = !val_sets.is_empty()
            && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        if due {
            let f1 = validation_f1(
                &state.params,
                net,
                sched,
                val_sets,
                derive_seed(cfg.seed, "val", epoch as u64),
            )?;
            if let Some(last) = history.last_mut() {
                last.val_f1 = Some(f1);
            }
            if f1 > state.best_f1 {
                state.best_f1 = f1;
                state.best_epoch = epoch as i64;
                if let Some(dir) = ckpt_dir {
                    save_checkpoint(&state.params, dir.join("best.ckpt"))?;
                }
            }
            if let Some(dir) = ckpt_dir {
                save_training_state(state, dir.join(format!("epoch-{epoch:04}.ckpt")))?;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, DatasetManifest};
    use rand::SeedableRng;

    fn tiny_net(variant: ScoreVariant) -> ScoreNetConfig {
        ScoreNetConfig {
            variant,
            layers: 2,
            hidden: 8,
            time_embed_dim: 4,
            fourier_scale: 16.0,
        }
    }

    fn tiny_sets(n: usize, seed: u64) -> Vec<MixedPartSet> {
        let manifest = DatasetManifest {
            sets: n,
            points_per_part: 6,
            seed,
            ..DatasetManifest::default()
        };
        build_dataset(&manifest).unwrap()
    }

    fn three_group_set() -> MixedPartSet {
        let manifest = DatasetManifest {
            sets: 1,
            points_per_part: 4,
            mix2_prob: 0.0,
            seed: 3,
            ..DatasetManifest::default()
        };
        build_dataset(&manifest).unwrap().remove(0)
    }

    #[test]
    fn two_group_set_gives_two_pairs_last_all_true() {
        let manifest = DatasetManifest {
            sets: 1,
            points_per_part: 4,
            mix2_prob: 1.0,
            seed: 1,
            ..DatasetManifest::default()
        };
        let set = build_dataset(&manifest).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = make_training_pairs(&set, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].parts.len(), set.num_parts());
        assert!(pairs[1].target.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn targets_are_exact_group_indicators() {
        let set = three_group_set();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pairs = make_training_pairs(&set, &mut rng).unwrap();
            assert_eq!(pairs.len(), 3);
            let mut emitted: Vec<u32> = Vec::new();
            for pair in &pairs {
                let labels: BTreeSet<u32> = pair
                    .parts
                    .iter()
                    .zip(pair.target.data())
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(p, _)| p.gt_group.unwrap())
                    .collect();
                assert_eq!(labels.len(), 1, "selected parts span one group");
                let g = *labels.first().unwrap();
                for (p, &v) in pair.parts.iter().zip(pair.target.data()) {
                    assert_eq!(v == 1.0, p.gt_group == Some(g));
                }
                emitted.extend(
                    pair.parts
                        .iter()
                        .zip(pair.target.data())
                        .filter(|(_, &v)| v == 1.0)
                        .map(|(p, _)| p.part_id),
                );
            }
            emitted.sort_unstable();
            assert_eq!(emitted, set.part_ids());
        }
    }

    #[test]
    fn first_group_is_uniform_over_draws() {
        let set = three_group_set();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let mut first = [0usize; 3];
        for _ in 0..draws {
            let pairs = make_training_pairs(&set, &mut rng).unwrap();
            let g = pairs[0]
                .parts
                .iter()
                .zip(pairs[0].target.data())
                .find(|(_, &v)| v == 1.0)
                .map(|(p, _)| p.gt_group.unwrap())
                .unwrap();
            first[g as usize] += 1;
        }
        // binomial: 3 sigma = 3 sqrt(n p (1-p)) ~ 141 around n/3
        let expected = draws as f64 / 3.0;
        let band = 3.0 * (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (g, &count) in first.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() <= band,
                "group {g} first {count} times, expected {expected:.0} +- {band:.0}"
            );
        }
    }

    #[test]
    fn unlabeled_set_rejected() {
        let set = tiny_sets(1, 11).remove(0);
        let unlabeled = MixedPartSet::new(
            "u".into(),
            set.parts
                .iter()
                .map(|p| PartCloud::new(p.part_id, p.points.clone(), None).unwrap())
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_training_pairs(&unlabeled, &mut rng),
            Err(Error::Dataset(_))
        ));
    }

    /// Two parts in one whole-set group: the only possible teacher pair,
    /// so every epoch is that single pair and one optimizer step.
    fn toy_single_pair_set() -> MixedPartSet {
        let points = crate::synthdata::build_noisy_set(
            "toy".into(),
            crate::synthdata::ShapeKind::Lamplike,
            0,
            6,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        MixedPartSet::new(
            "toy".into(),
            points
                .parts
                .into_iter()
                .take(2)
                .map(|p| PartCloud::new(p.part_id, p.points, Some(0)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Expected dsm loss of `params` on the set's single pair, Monte Carlo
    /// over 300 fresh (t, z) draws (a zero-lr run leaves params untouched).
    fn frozen_loss(
        params: &ModelParams,
        set: &MixedPartSet,
        net: &ScoreNetConfig,
        sched: &SdeSchedule,
    ) -> f64 {
        let mut frozen = TrainState::fresh(params.clone());
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 0.0,
            seed: 999,
            ..TrainConfig::default()
        };
        let h = run(
            &mut frozen,
            std::slice::from_ref(set),
            &[],
            net,
            sched,
            &cfg,
            None,
        )
        .unwrap();
        h.iter().map(|r| r.loss).sum::<f64>() / h.len() as f64
    }

    /// 500 optimizer steps on the one teacher pair must cut the expected
    /// dsm loss below 10% of its starting level. Each step averages the
    /// residual over 8 independent (t, z) draws of that pair; single-draw
    /// gradients are too noisy to converge this far this fast.
    #[test]
    fn single_pair_overfit() {
        let set = toy_single_pair_set();
        let net = ScoreNetConfig {
            variant: ScoreVariant::Gnn,
            layers: 2,
            hidden: 16,
            time_embed_dim: 8,
            fourier_scale: 1.0,
        };
        let sched = SdeSchedule::default();
        let cfg = TrainConfig {
            epochs: 500,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        };
        let replicated = vec![set.clone(); 8];
        let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
        let start = frozen_loss(&state.params, &set, &net, &sched);
        let history = run(&mut state, &replicated, &[], &net, &sched, &cfg, None).unwrap();
        assert_eq!(history.len(), 500);
        let end = frozen_loss(&state.params, &set, &net, &sched);
        assert!(
            end < 0.1 * start,
            "loss {end:.4} not below 10% of initial {start:.4}"
        );
    }

    #[test]
    fn fixed_seed_gives_bit_identical_history() {
        let sets = tiny_sets(4, 21);
        let net = tiny_net(ScoreVariant::Gnn);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 13,
            ..TrainConfig::default()
        };
        let sched = SdeSchedule::default();
        let run_once = || {
            let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
            run(&mut state, &sets, &[], &net, &sched, &cfg, None).unwrap()
        };
        let a = run_once();
        let b = run_once();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_freezes_params_and_loss() {
        // one-group set: its sole teacher pair is identical every epoch,
        // so with bce (no noise draws) the loss must repeat exactly
        let set = toy_single_pair_set();
        let net = tiny_net(ScoreVariant::Bce);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            loss: LossKind::Bce,
            seed: 17,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
        let before = state.params.clone();
        let history = run(
            &mut state,
            std::slice::from_ref(&set),
            &[],
            &net,
            &SdeSchedule::default(),
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(state.params, before);
        assert_eq!(history.len(), 3);
        assert_eq!(history[0].loss, history[1].loss);
        assert_eq!(history[0].loss, history[2].loss);
    }

    #[test]
    fn loss_trend_is_downward() {
        let sets = tiny_sets(20, 23);
        let net = tiny_net(ScoreVariant::Gnn);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 19,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
        let history = run(
            &mut state,
            &sets,
            &[],
            &net,
            &SdeSchedule::default(),
            &cfg,
            None,
        )
        .unwrap();
        let median = |rows: &[HistoryRow]| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let tenth = (history.len() / 10).max(1);
        let head = median(&history[..tenth]);
        let tail = median(&history[history.len() - tenth..]);
        assert!(tail < head, "median loss {tail:.4} vs initial {head:.4}");
    }

    #[test]
    fn resume_from_checkpoint_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let sets = tiny_sets(3, 24);
        let net = tiny_net(ScoreVariant::Gnn);
        let sched = SdeSchedule::default();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 29,
            ..TrainConfig::default()
        };

        let mut straight = TrainState::init(8, &net, cfg.seed).unwrap();
        let full = run(&mut straight, &sets, &[], &net, &sched, &cfg, None).unwrap();

        let half_cfg = TrainConfig { epochs: 2, ..cfg };
        let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
        let mut first = run(&mut state, &sets, &[], &net, &sched, &half_cfg, None).unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        save_training_state(&state, &ckpt).unwrap();

        let mut resumed = load_training_state(&ckpt).unwrap();
        assert_eq!(resumed, state);
        let rest = run(&mut resumed, &sets, &[], &net, &sched, &cfg, None).unwrap();
        first.extend(rest);
        assert_eq!(first, full);
        assert_eq!(resumed.params, straight.params);
    }

    #[test]
    fn validation_tags_history_and_writes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let sets = tiny_sets(2, 25);
        let val = tiny_sets(2, 26);
        let net = tiny_net(ScoreVariant::Gnn);
        let cfg = TrainConfig {
            epochs: 1,
            eval_every: 1,
            seed: 31,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(8, &net, cfg.seed).unwrap();
        let history = run(
            &mut state,
            &sets,
            &val,
            &net,
            &SdeSchedule::default(),
            &cfg,
            Some(dir.path()),
        )
        .unwrap();
        let f1 = history.last().unwrap().val_f1.expect("validation ran");
        assert!((0.0..=1.0).contains(&f1));
        assert_eq!(state.best(), Some((0, f1)));

        let best = load_inference_params(dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best, state.params);
        let resumable = load_training_state(dir.path().join("epoch-0000.ckpt")).unwrap();
        assert_eq!(resumable, state);
        assert!(resumable.params.names().all(|n| !n.starts_with("opt.")));
    }

    #[test]
    fn mismatched_loss_and_variant_rejected() {
        let sets = tiny_sets(1, 27);
        let sched = SdeSchedule::default();
        let mut state = TrainState::init(8, &tiny_net(ScoreVariant::Gnn), 0).unwrap();
        let bad = TrainConfig {
            loss: LossKind::Bce,
            ..TrainConfig::default()
        };
        assert!(matches!(
            run(&mut state, &sets, &[], &tiny_net(ScoreVariant::Gnn), &sched, &bad, None),
            Err(Error::Config(_))
        ));
        let mut state = TrainState::init(8, &tiny_net(ScoreVariant::Bce), 0).unwrap();
        assert!(matches!(
            run(
                &mut state,
                &sets,
                &[],
                &tiny_net(ScoreVariant::Bce),
                &sched,
                &TrainConfig::default(),
                None
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn history_csv_layout() {
        let rows = vec![
            HistoryRow {
                step: 1,
                epoch: 0,
                loss: 2.5,
                val_f1: None,
            },
            HistoryRow {
                step: 2,
                epoch: 0,
                loss: 1.25,
                val_f1: Some(0.5),
            },
        ];
        let csv = history_csv(&rows);
        assert_eq!(csv, "step,epoch,loss,val_f1\n1,0,2.5,\n2,0,1.25,0.5\n");
    }
}
