//! Auto-regressive group extraction and zero-shot noisy-part removal.
//!
//! One episode repeatedly: encodes the remaining parts, draws a selection
//! mask from the active policy (reverse-SDE sampling for score models, a
//! thresholded forward pass for the deterministic ablation), emits the
//! selected parts as a group, and recurses on the complement. It stops when
//! the set is empty or `max_iter` is reached. An all-false mask is retried
//! up to three times with fresh noise; if it persists, the remaining parts
//! become the residual, which guarantees termination and flags the failure
//! instead of looping. Every call asserts the partition property: emitted
//! groups plus residual exactly partition the input part_ids.

use crate::error::{Error, Result};
use crate::ndcore::{ModelParams, Tape, Tensor};
use crate::partenc::{encode_set_value, PartCloud};
use crate::sampler::{binarize, sample, SamplerConfig};
use crate::scorefield::{bce_head, selection_score, ScoreNetConfig, ScoreVariant};
use crate::sde::SdeSchedule;
use crate::seeding::derive_rng;
use crate::synthdata::MixedPartSet;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Attempts per iteration after the first all-false selection.
const ALL_FALSE_RETRIES: usize = 3;

/// Iteration cap used by callers that have no reason to override it; mixed
/// sets top out at three groups, so eight leaves generous slack.
pub const DEFAULT_MAX_ITER: usize = 8;

/// Output of one grouping episode. `residual` holds parts the loop could
/// not assign; it is not model output and is accounted as error mass by the
/// evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingResult {
    pub set_id: String,
    pub groups: Vec<Vec<u32>>,
    pub residual: Vec<u32>,
    pub iterations_used: usize,
}

impl GroupingResult {
    /// Validate the partition property against the input id set.
    pub fn validate(&self, input_ids: &[u32]) -> Result<()> {
        if self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::domain(
                "GroupingResult",
                format!("set {}: empty group emitted", self.set_id),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in self.groups.iter().flatten().chain(self.residual.iter()) {
            if !seen.insert(*id) {
                return Err(Error::domain(
                    "GroupingResult",
                    format!("set {}: part {id} assigned twice", self.set_id),
                ));
            }
        }
        let expected: BTreeSet<u32> = input_ids.iter().copied().collect();
        if seen != expected {
            return Err(Error::domain(
                "GroupingResult",
                format!("set {}: output ids do not partition the input", self.set_id),
            ));
        }
        Ok(())
    }
}

/// One selection draw over the current remaining parts. Policies backed by
/// the reverse-SDE sampler consume `rng`; deterministic policies ignore it.
pub trait SelectionPolicy {
    fn select(
        &self,
        parts: &[PartCloud],
        sched: &SdeSchedule,
        cfg: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<bool>>;
}

/// Sample the reverse SDE under `score_fn` and threshold the result.
pub fn sampled_selection<F>(
    score_fn: F,
    k: usize,
    sched: &SdeSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let c = sample(score_fn, k, sched, cfg, rng)?;
    Ok(binarize(&c, cfg.threshold))
}

/// Trained score-network policy: encodes parts once per selection, then
/// evaluates the network on a rolled-back tape per (c, t) query.
pub struct ModelScorer {
    pub params: ModelParams,
    pub net: ScoreNetConfig,
    pub sched: SdeSchedule,
}

impl ModelScorer {
    pub fn new(params: ModelParams, net: ScoreNetConfig, sched: SdeSchedule) -> Result<Self> {
        net.validate()?;
        if !net.variant.is_score_based() {
            return Err(Error::Config(format!(
                "variant {} has no selection score; it cannot drive the sampler",
                net.variant.as_str()
            )));
        }
        Ok(Self { params, net, sched })
    }

    /// Score closure over fixed conditioning; reused across sampler steps.
    pub fn score_closure(
        &self,
        parts: &[PartCloud],
    ) -> Result<Box<dyn FnMut(&Tensor, f64) -> Result<Tensor>>> {
        let feats = encode_set_value(&self.params, parts)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let feats_var = tape.leaf(feats.tensor().clone());
        let base = tape.len();
        let net = self.net;
        let sched = self.sched;
        Ok(Box::new(move |c: &Tensor, t: f64| {
            tape.truncate(base);
            let out = selection_score(&tape, &vars, &net, feats_var, c, t, &sched)?;
            Ok(tape.value(out))
        }))
    }
}

impl SelectionPolicy for ModelScorer {
    fn select(
        &self,
        parts: &[PartCloud],
        sched: &SdeSchedule,
        cfg: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<bool>> {
        let score_fn = self.score_closure(parts)?;
        sampled_selection(score_fn, parts.len(), sched, cfg, rng)
    }
}

/// Deterministic ablation policy: per-part membership probabilities from
/// the trunk's zero-time forward pass, thresholded directly. No diffusion,
/// no randomness.
pub struct BceSelector {
    pub params: ModelParams,
    pub net: ScoreNetConfig,
}

impl BceSelector {
    pub fn new(params: ModelParams, net: ScoreNetConfig) -> Result<Self> {
        net.validate()?;
        if net.variant != ScoreVariant::Bce {
            return Err(Error::Config(format!(
                "BceSelector requires the bce variant, got {}",
                net.variant.as_str()
            )));
        }
        Ok(Self { params, net })
    }
}

impl SelectionPolicy for BceSelector {
    fn select(
        &self,
        parts: &[PartCloud],
        _sched: &SdeSchedule,
        cfg: &SamplerConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<bool>> {
        let feats = encode_set_value(&self.params, parts)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let feats_var = tape.leaf(feats.tensor().clone());
        let probs = bce_head(&tape, &vars, &self.net, feats_var)?;
        Ok(binarize(&tape.value(probs), cfg.threshold))
    }
}

/// Ground-truth plug-in policy: score +5 for parts sharing the gt_group of
/// the lowest-part_id remaining part, -5 otherwise, constant in t, pushed
/// through the real sampler. Validates the loop, complement, and metric
/// plumbing with learning switched off.
pub struct TeacherScorer;

impl TeacherScorer {
    fn target_scores(parts: &[PartCloud]) -> Result<Tensor> {
        let anchor = parts
            .iter()
            .min_by_key(|p| p.part_id)
            .ok_or_else(|| Error::domain("TeacherScorer", "no parts".to_string()))?;
        let target_group = anchor.gt_group.ok_or_else(|| {
            Error::Dataset("teacher scorer needs gt_group labels".to_string())
        })?;
        let scores: Vec<f64> = parts
            .iter()
            .map(|p| match p.gt_group {
                Some(g) if g == target_group => 5.0,
                _ => -5.0,
            })
            .collect();
        Ok(Tensor::vector(scores)?)
    }
}

impl SelectionPolicy for TeacherScorer {
    fn select(
        &self,
        parts: &[PartCloud],
        sched: &SdeSchedule,
        cfg: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<bool>> {
        let scores = Self::target_scores(parts)?;
        sampled_selection(
            move |_c, _t| Ok(scores.clone()),
            parts.len(),
            sched,
            cfg,
            rng,
        )
    }
}

fn select_with_retries(
    policy: &dyn SelectionPolicy,
    parts: &[PartCloud],
    sched: &SdeSchedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<bool>>> {
    for _ in 0..=ALL_FALSE_RETRIES {
        let mask = policy.select(parts, sched, cfg, rng)?;
        if mask.len() != parts.len() {
            return Err(Error::domain(
                "group_parts",
                format!(
                    "policy returned {} entries for {} parts",
                    mask.len(),
                    parts.len()
                ),
            ));
        }
        if mask.iter().any(|&b| b) {
            return Ok(Some(mask));
        }
    }
    Ok(None)
}

/// Extract groups auto-regressively until the set empties or `max_iter` is
/// reached. Deterministic in (policy, set, cfg.seed).
pub fn group_parts(
    policy: &dyn SelectionPolicy,
    set: &MixedPartSet,
    sched: &SdeSchedule,
    cfg: &SamplerConfig,
    max_iter: usize,
) -> Result<GroupingResult> {
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    cfg.validate()?;
    set.validate()?;
    let mut result = GroupingResult {
        set_id: set.set_id.clone(),
        groups: Vec::new(),
        residual: Vec::new(),
        iterations_used: 0,
    };
    if set.parts.is_empty() {
        return Ok(result);
    }
    let mut rng = derive_rng(cfg.seed, &format!("group:{}", set.set_id), 0);
    let mut remaining: Vec<PartCloud> = set.parts.clone();

    while !remaining.is_empty() && result.iterations_used < max_iter {
        result.iterations_used += 1;
        match select_with_retries(policy, &remaining, sched, cfg, &mut rng)? {
            Some(mask) => {
                let mut group = Vec::new();
                let mut rest = Vec::new();
                for (part, selected) in remaining.into_iter().zip(&mask) {
                    if *selected {
                        group.push(part.part_id);
                    } else {
                        rest.push(part);
                    }
                }
                result.groups.push(group);
                remaining = rest;
            }
            None => break, // persistent all-false: flag the remainder
        }
    }
    result
        .residual
        .extend(remaining.iter().map(|p| p.part_id));
    result.validate(&set.part_ids())?;
    Ok(result)
}

/// Zero-shot noisy-part removal: one selection pass, no iteration. Entry i
/// is true when part i belongs to the kept shape.
pub fn remove_noisy_parts(
    policy: &dyn SelectionPolicy,
    set: &MixedPartSet,
    sched: &SdeSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<bool>> {
    if set.parts.is_empty() {
        return Err(Error::domain(
            "remove_noisy_parts",
            "input set is empty".to_string(),
        ));
    }
    cfg.validate()?;
    set.validate()?;
    let mut rng = derive_rng(cfg.seed, &format!("denoise:{}", set.set_id), 0);
    policy.select(&set.parts, sched, cfg, &mut rng)
}
