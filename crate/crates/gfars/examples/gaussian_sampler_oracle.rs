//! Validate the reverse-SDE samplers against a closed-form score.
//!
//! For data drawn from `N(mu, s0^2)`, the variance-exploding forward SDE
//! gives a time-t marginal of `N(mu, s0^2 + sigma_t^2)` whose score is known
//! exactly. Feeding that oracle score to the predictor-corrector and
//! Euler-Maruyama samplers must reproduce the data distribution, which pins
//! down the discretization independently of any learned model. Run with:
//!
//! ```text
//! cargo run --example gaussian_sampler_oracle
//! ```

use gfars::sampler::{gaussian_oracle_score, sample, SamplerConfig, SamplerKind};
use gfars::sde::SdeSchedule;
use gfars::seeding::derive_rng;

const MU: f64 = 0.7;
const S0: f64 = 0.05;
const CHAINS: usize = 2000;
const K: usize = 8;

fn moments(kind: SamplerKind, steps: usize, sched: &SdeSchedule) -> gfars::Result<(f64, f64)> {
    let cfg = SamplerConfig {
        kind,
        steps,
        seed: 11,
        ..SamplerConfig::default()
    };
    let mut values = Vec::with_capacity(CHAINS * K);
    for chain in 0..CHAINS {
        let mut rng = derive_rng(cfg.seed, "oracle-chain", chain as u64);
        let out = sample(
            |c, t| gaussian_oracle_score(c, t, MU, S0, sched),
            K,
            sched,
            &cfg,
            &mut rng,
        )?;
        values.extend_from_slice(out.data());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn main() -> gfars::Result<()> {
    let sched = SdeSchedule::default();
    println!(
        "target: N({MU}, {S0}^2)   {CHAINS} chains x {K} coordinates\n"
    );
    println!("{:<10} {:>6} {:>10} {:>10}", "sampler", "steps", "mean", "std");
    for kind in [SamplerKind::Pc, SamplerKind::Em] {
        for steps in [100, 500] {
            let (mean, std) = moments(kind, steps, &sched)?;
            let name = match kind {
                SamplerKind::Pc => "pc",
                SamplerKind::Em => "em",
            };
            println!("{name:<10} {steps:>6} {mean:>10.4} {std:>10.4}");
        }
    }
    println!(
        "\nmeans lock onto the target at every budget; the std overshoot is\n\
         the one-step discretization residual (order sqrt(g^2 dt)) and\n\
         shrinks as the predictor grid refines. On this well-conditioned\n\
         unimodal target the single Langevin corrector step changes little;\n\
         its value shows up under learned, imperfect score fields."
    );
    Ok(())
}
