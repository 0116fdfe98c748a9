//! Train a small selection network end to end and watch the loss fall.
//!
//! Every labeled set expands into teacher pairs (remaining parts, indicator
//! of one group). Training perturbs each indicator with the forward SDE at
//! a random time and regresses the network's score against the noise that
//! was injected. Validation runs the full auto-regressive grouping loop on
//! held-out sets. This demo uses a deliberately small network and dataset
//! so it finishes in well under a minute; see the README for a full-size
//! recipe. Run with:
//!
//! ```text
//! cargo run --release --example train_model
//! ```

use gfars::scorefield::ScoreNetConfig;
use gfars::sde::SdeSchedule;
use gfars::synthdata::{build_dataset, DatasetManifest, Split};
use gfars::train::{run, LossKind, TrainConfig, TrainState};

fn main() -> gfars::Result<()> {
    let train_sets = build_dataset(&DatasetManifest {
        sets: 30,
        points_per_part: 16,
        seed: 100,
        ..DatasetManifest::default()
    })?;
    let val_sets = build_dataset(&DatasetManifest {
        split: Split::Test,
        sets: 10,
        points_per_part: 16,
        seed: 100,
        ..DatasetManifest::default()
    })?;

    let feature_dim = 16;
    let net = ScoreNetConfig {
        layers: 2,
        hidden: 32,
        time_embed_dim: 8,
        fourier_scale: 1.0,
        ..ScoreNetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 0,
        loss: LossKind::Dsm,
        eval_every: 10,
    };
    let sched = SdeSchedule::default();

    let mut state = TrainState::init(feature_dim, &net, cfg.seed)?;
    println!(
        "training {} params on {} sets ({} val sets held out)\n",
        state.params.numel(),
        train_sets.len(),
        val_sets.len()
    );
    let history = run(&mut state, &train_sets, &val_sets, &net, &sched, &cfg, None)?;

    let tenth = (history.len() / 10).max(1);
    let mean = |rows: &[gfars::train::HistoryRow]| {
        rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
    };
    println!(
        "denoising loss: first tenth {:.3}  last tenth {:.3}",
        mean(&history[..tenth]),
        mean(&history[history.len() - tenth..])
    );
    for row in history.iter().filter(|r| r.val_f1.is_some()) {
        println!(
            "  epoch {:>3}  val f1 {:.3}",
            row.epoch,
            row.val_f1.unwrap()
        );
    }
    if let Some((epoch, f1)) = state.best() {
        println!("\nbest validation f1 {f1:.3} at epoch {epoch}");
    }
    Ok(())
}
