//! Scratch benchmark probe: measures per-epoch walltime and validation F1
//! trajectory at candidate benchmark dimensions. Knobs via env vars.

use gfars::evalkit::{metrics, set_counts, AveragingMode, Counts};
use gfars::grouping::{group_parts, BceSelector, ModelScorer, SelectionPolicy, DEFAULT_MAX_ITER};
use gfars::ndcore::{ModelParams, Tape};
use gfars::partenc::encode_set_value;
use gfars::sampler::{sample, SamplerConfig};
use gfars::scorefield::{selection_score, ScoreNetConfig, ScoreVariant};
use gfars::sde::SdeSchedule;
use gfars::seeding::derive_rng;
use gfars::synthdata::{build_dataset, DatasetManifest, MixedPartSet, Split};
use gfars::train::{run, LossKind, TrainConfig, TrainState};
use std::time::Instant;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn eval_f1(
    policy: &dyn SelectionPolicy,
    sets: &[MixedPartSet],
    sched: &SdeSchedule,
    steps: usize,
) -> (f64, f64, f64) {
    let cfg = SamplerConfig { steps, seed: 999, ..SamplerConfig::default() };
    let mut scored: Vec<(String, Counts)> = Vec::new();
    for set in sets {
        let r = group_parts(policy, set, sched, &cfg, DEFAULT_MAX_ITER).unwrap();
        scored.push((
            set.set_id.clone(),
            set_counts(&r.groups, &r.residual, &set.gt_groups().unwrap()).unwrap(),
        ));
    }
    let m = metrics(&scored, AveragingMode::Overall).unwrap();
    (m.precision, m.recall, m.f1)
}

fn main() {
    let n_train = env_usize("N_TRAIN", 400);
    let n_val = env_usize("N_VAL", 50);
    let ppp = env_usize("PPP", 64);
    let d = env_usize("D", 32);
    let hidden = env_usize("HIDDEN", 64);
    let te = env_usize("TE", 16);
    let layers = env_usize("LAYERS", 3);
    let fs = env_f64("FS", 16.0);
    let lr = env_f64("LR", 1e-3);
    let batch = env_usize("BATCH", 16);
    let epochs = env_usize("EPOCHS", 3);
    let eval_steps = env_usize("EVAL_STEPS", 100);
    let variant = match std::env::var("VARIANT").as_deref() {
        Ok("mlp") => ScoreVariant::Mlp,
        Ok("bce") => ScoreVariant::Bce,
        _ => ScoreVariant::Gnn,
    };
    println!(
        "probe: {n_train} sets ppp={ppp} D={d} h={hidden} te={te} L={layers} fs={fs} lr={lr} b={batch} {variant:?}"
    );

    let t0 = Instant::now();
    let train_sets = build_dataset(&DatasetManifest {
        sets: n_train,
        points_per_part: ppp,
        seed: 1000,
        ..DatasetManifest::default()
    })
    .unwrap();
    let val_sets = build_dataset(&DatasetManifest {
        split: Split::Test,
        sets: n_val,
        points_per_part: ppp,
        seed: 1000,
        ..DatasetManifest::default()
    })
    .unwrap();
    println!("gen: {:.1}s", t0.elapsed().as_secs_f64());

    let net = ScoreNetConfig { variant, layers, hidden, time_embed_dim: te, fourier_scale: fs };
    let lr_min_frac = env_f64("LR_MIN_FRAC", 1.0);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: batch,
        learning_rate: lr,
        seed: 0,
        loss: if variant == ScoreVariant::Bce { LossKind::Bce } else { LossKind::Dsm },
        eval_every: 1,
        lr_min_frac: 1.0,
    };
    // mirror the full-run cosine schedule across the resumed single-epoch calls
    let sched_cfg = TrainConfig { epochs, lr_min_frac, ..cfg };
    let sched = SdeSchedule::default();
    let mut state = TrainState::init(d, &net, 0).unwrap();
    println!("params: {}", state.params.numel());

    for epoch in 0..epochs {
        let te0 = Instant::now();
        let mut c = cfg.clone();
        c.epochs = epoch + 1; // run resumes from state.next_epoch
        c.learning_rate = gfars::train::effective_lr(&sched_cfg, epoch);
        let hist = run(&mut state, &train_sets, &[], &net, &sched, &c, None).unwrap();
        let train_time = te0.elapsed().as_secs_f64();
        let mean_loss: f64 =
            hist.iter().map(|r| r.loss).sum::<f64>() / hist.len().max(1) as f64;

        let tv0 = Instant::now();
        let (p, r, f1) = if variant == ScoreVariant::Bce {
            let pol = BceSelector::new(state.params.clone(), net).unwrap();
            eval_f1(&pol, &val_sets, &sched, eval_steps)
        } else {
            let pol = ModelScorer::new(state.params.clone(), net, sched).unwrap();
            eval_f1(&pol, &val_sets, &sched, eval_steps)
        };
        println!(
            "epoch {epoch}: train {train_time:.1}s loss {mean_loss:.3} | val({n_val}@{eval_steps}) {:.1}s P {p:.3} R {r:.3} F1 {f1:.3}",
            tv0.elapsed().as_secs_f64()
        );
    }

    if std::env::var("VERBOSE").is_ok() && variant != ScoreVariant::Bce {
        let cfg = SamplerConfig { steps: eval_steps, seed: 999, ..SamplerConfig::default() };
        for set in val_sets.iter().take(4) {
            println!("\n{} gt={:?}", set.set_id, set.gt_groups().unwrap());
            for draw in 0..3 {
                let c = raw_selection(&state.params, &net, set, &sched, &cfg, draw);
                let s: Vec<String> = c.iter().map(|v| format!("{v:+.2}")).collect();
                println!("  draw {draw}: [{}]", s.join(" "));
            }
        }
    }
}

/// One continuous selection sample (pre-binarize) over the full set.
fn raw_selection(
    params: &ModelParams,
    net: &ScoreNetConfig,
    set: &MixedPartSet,
    sched: &SdeSchedule,
    cfg: &SamplerConfig,
    draw: u64,
) -> Vec<f64> {
    let feats = encode_set_value(params, &set.parts).unwrap();
    let mut rng = derive_rng(cfg.seed, "probe-raw", draw);
    let out = sample(
        |c, t| {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let f = tape.leaf(feats.tensor().clone());
            let s = selection_score(&tape, &vars, net, f, c, t, sched)
                .map_err(|e| gfars::Error::Config(e.to_string()))?;
            Ok(tape.value(s))
        },
        set.parts.len(),
        sched,
        cfg,
        &mut rng,
    )
    .unwrap();
    out.data().to_vec()
}
