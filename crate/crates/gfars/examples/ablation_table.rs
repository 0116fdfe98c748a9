//! Compare selection policies and samplers on one dataset.
//!
//! Trains three small heads on the same trunk layout: the score-based GNN
//! (message passing over the part graph), a per-part MLP score (no message
//! passing), and a deterministic per-part BCE classifier (no gradient
//! field, no sampler). The GNN is then run under both the
//! predictor-corrector and plain Euler-Maruyama samplers. Expect the
//! orderings gnn > mlp and pc >= em; exact numbers vary with this demo's
//! tiny budget. Run with:
//!
//! ```text
//! cargo run --release --example ablation_table
//! ```

use gfars::evalkit::{metrics, set_counts, AveragingMode, Counts};
use gfars::grouping::{
    group_parts, BceSelector, ModelScorer, SelectionPolicy, DEFAULT_MAX_ITER,
};
use gfars::sampler::{SamplerConfig, SamplerKind};
use gfars::scorefield::{ScoreNetConfig, ScoreVariant};
use gfars::sde::SdeSchedule;
use gfars::synthdata::{build_dataset, DatasetManifest, MixedPartSet, Split};
use gfars::train::{run, LossKind, TrainConfig, TrainState};

fn train_variant(
    variant: ScoreVariant,
    sets: &[MixedPartSet],
    sched: &SdeSchedule,
) -> gfars::Result<(gfars::ModelParams, ScoreNetConfig)> {
    let net = ScoreNetConfig {
        variant,
        layers: 2,
        hidden: 32,
        time_embed_dim: 8,
        fourier_scale: 1.0,
    };
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 8,
        learning_rate: 3e-3,
        loss: match variant {
            ScoreVariant::Bce => LossKind::Bce,
            _ => LossKind::Dsm,
        },
        ..TrainConfig::default()
    };
    let mut state = TrainState::init(16, &net, cfg.seed)?;
    run(&mut state, sets, &[], &net, sched, &cfg, None)?;
    Ok((state.params, net))
}

fn evaluate(
    policy: &dyn SelectionPolicy,
    sets: &[MixedPartSet],
    sched: &SdeSchedule,
    sampler: &SamplerConfig,
) -> gfars::Result<(f64, f64, f64)> {
    let mut scored: Vec<(String, Counts)> = Vec::new();
    for set in sets {
        let result = group_parts(policy, set, sched, sampler, DEFAULT_MAX_ITER)?;
        scored.push((
            set.set_id.clone(),
            set_counts(&result.groups, &result.residual, &set.gt_groups().unwrap())?,
        ));
    }
    let report = metrics(&scored, AveragingMode::SingleSetAvg)?;
    Ok((report.precision, report.recall, report.f1))
}

fn main() -> gfars::Result<()> {
    let sched = SdeSchedule::default();
    let train_sets = build_dataset(&DatasetManifest {
        sets: 30,
        points_per_part: 16,
        seed: 100,
        ..DatasetManifest::default()
    })?;
    let test_sets = build_dataset(&DatasetManifest {
        split: Split::Test,
        sets: 15,
        points_per_part: 16,
        seed: 100,
        ..DatasetManifest::default()
    })?;
    let sampler = SamplerConfig {
        steps: 100,
        seed: 5,
        ..SamplerConfig::default()
    };

    println!("training gnn / mlp / bce variants...\n");
    let (gnn_params, gnn_net) = train_variant(ScoreVariant::Gnn, &train_sets, &sched)?;
    let (mlp_params, mlp_net) = train_variant(ScoreVariant::Mlp, &train_sets, &sched)?;
    let (bce_params, bce_net) = train_variant(ScoreVariant::Bce, &train_sets, &sched)?;

    println!(
        "{:<22} {:>9} {:>9} {:>9}",
        "policy", "precision", "recall", "f1"
    );
    let gnn = ModelScorer::new(gnn_params, gnn_net, sched)?;
    for (label, kind) in [("gnn + pc sampler", SamplerKind::Pc), ("gnn + em sampler", SamplerKind::Em)] {
        let cfg = SamplerConfig { kind, ..sampler };
        let (p, r, f1) = evaluate(&gnn, &test_sets, &sched, &cfg)?;
        println!("{label:<22} {p:>9.3} {r:>9.3} {f1:>9.3}");
    }
    let mlp = ModelScorer::new(mlp_params, mlp_net, sched)?;
    let (p, r, f1) = evaluate(&mlp, &test_sets, &sched, &sampler)?;
    println!("{:<22} {p:>9.3} {r:>9.3} {f1:>9.3}", "mlp + pc sampler");
    let bce = BceSelector::new(bce_params, bce_net)?;
    let (p, r, f1) = evaluate(&bce, &test_sets, &sched, &sampler)?;
    println!("{:<22} {p:>9.3} {r:>9.3} {f1:>9.3}", "bce (deterministic)");
    Ok(())
}
