//! Variance-exploding diffusion schedule and the denoising score-matching loss.
//!
//! The forward process is `dc = sigma^t dw`: pure diffusion, no drift, with
//! exponentially growing diffusion coefficient. Its transition kernel is
//! Gaussian around the data point with standard deviation
//! [`SdeSchedule::marginal_std`] = `sqrt(int_0^t g(s)^2 ds)`, which explodes
//! from 0 at `t = 0` to roughly `sigma^t_max / sqrt(2 ln sigma)` at the
//! horizon, wide enough that the terminal marginal forgets the data.

use crate::error::{Error, Result};
use crate::ndcore::{NdResult, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Schedule of the variance-exploding SDE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeSchedule {
    /// Noise growth base; must exceed 1.
    pub sigma: f64,
    /// Terminal time of the forward process.
    pub t_max: f64,
    /// Smallest usable time: the score target `-z / marginal_std(t)`
    /// diverges as t approaches 0.
    pub t_min: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            sigma: 25.0,
            t_max: 1.0,
            t_min: 1e-5,
        }
    }
}

impl SdeSchedule {
    pub fn new(sigma: f64, t_max: f64, t_min: f64) -> Result<Self> {
        if !(sigma > 1.0) || !sigma.is_finite() {
            return Err(Error::domain("SdeSchedule", format!("sigma {sigma} must be > 1")));
        }
        if !(t_min > 0.0 && t_min < t_max) || !t_max.is_finite() {
            return Err(Error::domain(
                "SdeSchedule",
                format!("need 0 < t_min < t_max, got t_min {t_min}, t_max {t_max}"),
            ));
        }
        Ok(Self { sigma, t_max, t_min })
    }

    /// Re-check the constructor invariants on a schedule assembled from
    /// plain fields (deserialized configs bypass [`SdeSchedule::new`]).
    pub fn validate(&self) -> Result<()> {
        Self::new(self.sigma, self.t_max, self.t_min).map(|_| ())
    }

    /// Standard deviation of the transition kernel at time `t`:
    /// `sqrt((sigma^{2t} - 1) / (2 ln sigma))`. Strictly increasing, 0 at t=0.
    pub fn marginal_std(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::domain(
                "marginal_std",
                format!("t {t} outside [0, {}]", self.t_max),
            ));
        }
        let two_ln = 2.0 * self.sigma.ln();
        Ok(((self.sigma.powf(2.0 * t) - 1.0) / two_ln).sqrt())
    }

    /// Diffusion coefficient `g(t) = sigma^t`, the derivative pair of
    /// [`SdeSchedule::marginal_std`]: `g(t)^2 = d/dt marginal_std(t)^2`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::domain(
                "diffusion",
                format!("t {t} outside [0, {}]", self.t_max),
            ));
        }
        Ok(self.sigma.powf(t))
    }

    /// Kernel std at the horizon; the reverse process starts from
    /// `N(0, prior_std()^2 I)`.
    pub fn prior_std(&self) -> f64 {
        self.marginal_std(self.t_max).expect("t_max is in range")
    }

    /// Diffuse a data point to time `t`: `c0 + marginal_std(t) * z` where `z`
    /// holds unit normals. Linear in `c0`, so the kernel is shift-equivariant.
    pub fn perturb(&self, c0: &Tensor, t: f64, z: &Tensor) -> Result<Tensor> {
        if t < self.t_min {
            return Err(Error::domain(
                "perturb",
                format!("t {t} below t_min {}", self.t_min),
            ));
        }
        let std = self.marginal_std(t)?;
        Ok(c0.zip_map(z, |c, zi| c + std * zi)?)
    }
}

/// Conditional denoising score-matching loss for one trajectory step.
///
/// With `c_t = c0 + sigma_t z` and target score `-z / sigma_t`, the
/// `lambda(t) = sigma_t^2` weighted residual collapses to
/// `|| sigma_t * score + z ||^2`, which keeps every term O(1) in t. The
/// returned var is differentiable through whatever parameters `score_fn`
/// bound on the tape.
///
/// `score_fn` receives the perturbed selection and the time; conditioning
/// features travel inside the closure.
pub fn dsm_loss<F>(
    tape: &Tape,
    score_fn: F,
    c0: &Tensor,
    t: f64,
    z: &Tensor,
    sched: &SdeSchedule,
) -> Result<Var>
where
    F: FnOnce(&Tape, &Tensor, f64) -> NdResult<Var>,
{
    if c0.shape() != z.shape() {
        return Err(Error::domain(
            "dsm_loss",
            format!("c0 shape {:?} vs z shape {:?}", c0.shape(), z.shape()),
        ));
    }
    let sigma_t = self_std(sched, t)?;
    let c_t = sched.perturb(c0, t, z)?;
    let score = score_fn(tape, &c_t, t)?;
    let scaled = tape.scale(score, sigma_t)?;
    let residual = tape.add(scaled, tape.leaf(z.clone()))?;
    let sq = tape.mul(residual, residual)?;
    Ok(tape.sum(sq)?)
}

fn self_std(sched: &SdeSchedule, t: f64) -> Result<f64> {
    if t < sched.t_min {
        return Err(Error::domain(
            "dsm_loss",
            format!("t {t} below t_min {}", sched.t_min),
        ));
    }
    sched.marginal_std(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{grad_check, ModelParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn std_is_zero_at_time_zero() {
        let s = SdeSchedule::default();
        assert_eq!(s.marginal_std(0.0).unwrap(), 0.0);
    }

    #[test]
    fn std_matches_closed_form_at_horizon() {
        let s = SdeSchedule::default();
        // sqrt(624 / (2 ln 25))
        assert!((s.marginal_std(1.0).unwrap() - 9.8452).abs() < 1e-4);
        assert!((s.prior_std() - 9.8452).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_time_is_domain_error() {
        let s = SdeSchedule::default();
        assert!(s.marginal_std(-0.1).is_err());
        assert!(s.marginal_std(1.5).is_err());
        let c0 = Tensor::vector(vec![0.0]).unwrap();
        let z = Tensor::vector(vec![1.0]).unwrap();
        assert!(s.perturb(&c0, 1e-7, &z).is_err());
    }

    #[test]
    fn bad_schedule_rejected() {
        assert!(SdeSchedule::new(1.0, 1.0, 1e-5).is_err());
        assert!(SdeSchedule::new(25.0, 1.0, 0.0).is_err());
        assert!(SdeSchedule::new(25.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn zero_noise_leaves_data_unchanged() {
        let s = SdeSchedule::default();
        let c0 = Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap();
        let z = Tensor::vector(vec![0.0; 3]).unwrap();
        assert_eq!(s.perturb(&c0, 0.5, &z).unwrap(), c0);
    }

    proptest! {
        #[test]
        fn std_strictly_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let s = SdeSchedule::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.marginal_std(lo).unwrap() < s.marginal_std(hi).unwrap());
        }

        #[test]
        fn perturb_is_additive_in_data(
            c in prop::collection::vec(-2.0f64..2.0, 4),
            d in prop::collection::vec(-2.0f64..2.0, 4),
            z in prop::collection::vec(-3.0f64..3.0, 4),
            t in 0.01f64..1.0,
        ) {
            let s = SdeSchedule::default();
            let ct = Tensor::vector(c.clone()).unwrap();
            let dt = Tensor::vector(d.clone()).unwrap();
            let zt = Tensor::vector(z).unwrap();
            let shifted = Tensor::vector(
                c.iter().zip(&d).map(|(a, b)| a + b).collect()
            ).unwrap();
            let lhs = s.perturb(&shifted, t, &zt).unwrap();
            let base = s.perturb(&ct, t, &zt).unwrap();
            let rhs = base.zip_map(&dt, |x, y| x + y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }

    #[test]
    fn diffusion_squared_is_variance_rate() {
        // the sampler's g^2 must be the time derivative of the kernel
        // variance, or reverse integration lands on the wrong marginal
        let s = SdeSchedule::default();
        let h = 1e-6;
        for i in 1..=9 {
            let t = i as f64 / 10.0;
            let var = |t: f64| s.marginal_std(t).unwrap().powi(2);
            let rate = (var(t + h) - var(t - h)) / (2.0 * h);
            let g2 = s.diffusion(t).unwrap().powi(2);
            assert!((rate - g2).abs() / g2 < 1e-8, "t={t}: {rate} vs {g2}");
        }
    }

    #[test]
    fn monte_carlo_std_matches_kernel_on_grid() {
        let s = SdeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = 100_000;
        for i in 1..=10 {
            let t = i as f64 / 10.0;
            let expected = s.marginal_std(t).unwrap();
            let c0 = Tensor::vector(vec![0.7]).unwrap();
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let z = Tensor::vector(normals(&mut rng, 1)).unwrap();
                let c_t = s.perturb(&c0, t, &z).unwrap();
                let d = c_t.data()[0] - 0.7;
                sum_sq += d * d;
            }
            let mc_std = (sum_sq / n as f64).sqrt();
            let rel = (mc_std - expected).abs() / expected;
            assert!(rel < 0.02, "t={t}: mc {mc_std} vs kernel {expected}");
        }
    }

    #[test]
    fn weighted_and_collapsed_loss_forms_agree() {
        let s = SdeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = 6;
            let score_vals = normals(&mut rng, k);
            let z_vals = normals(&mut rng, k);
            let t = 0.05 + 0.9 * rand::Rng::gen::<f64>(&mut rng);
            let sigma_t = s.marginal_std(t).unwrap();

            // weighted form: sigma_t^2 * ||score - (-z/sigma_t)||^2
            let weighted: f64 = sigma_t.powi(2)
                * score_vals
                    .iter()
                    .zip(&z_vals)
                    .map(|(sv, zv)| (sv + zv / sigma_t).powi(2))
                    .sum::<f64>();

            // collapsed form as dsm_loss computes it
            let tape = Tape::new();
            let score = Tensor::vector(score_vals.clone()).unwrap();
            let loss = dsm_loss(
                &tape,
                |tape, _c_t, _t| Ok(tape.leaf(score.clone())),
                &Tensor::vector(vec![0.0; k]).unwrap(),
                t,
                &Tensor::vector(z_vals.clone()).unwrap(),
                &s,
            )
            .unwrap();
            let collapsed = tape.value(loss).scalar_value().unwrap();
            assert!(
                (weighted - collapsed).abs() <= 1e-10 * weighted.abs().max(1.0),
                "forms differ: {weighted} vs {collapsed}"
            );
        }
    }

    #[test]
    fn exact_score_gives_zero_loss() {
        let s = SdeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::vector(normals(&mut rng, 5)).unwrap();
        let t = 0.4;
        let sigma_t = s.marginal_std(t).unwrap();
        let exact = z.map(|zi| -zi / sigma_t).unwrap();

        let tape = Tape::new();
        let loss = dsm_loss(
            &tape,
            |tape, _c, _t| Ok(tape.leaf(exact.clone())),
            &Tensor::vector(vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            t,
            &z,
            &s,
        )
        .unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-24);
    }

    #[test]
    fn zero_score_loss_expects_dimension() {
        // with score == 0 the loss is ||z||^2; its expectation over z is K
        let s = SdeSchedule::default();
        let k = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 20_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let z = Tensor::vector(normals(&mut rng, k)).unwrap();
            let tape = Tape::new();
            let loss = dsm_loss(
                &tape,
                |tape, c_t, _t| Ok(tape.scale(tape.leaf(c_t.clone()), 0.0)?),
                &Tensor::vector(vec![0.0; k]).unwrap(),
                0.6,
                &z,
                &s,
            )
            .unwrap();
            total += tape.value(loss).scalar_value().unwrap();
        }
        let mean = total / draws as f64;
        let rel = (mean - k as f64).abs() / k as f64;
        assert!(rel < 0.03, "mean loss {mean} vs K={k}");
    }

    #[test]
    fn loss_invariant_under_joint_permutation() {
        // elementwise score function, so permuting (c0, z) jointly permutes
        // every intermediate and the summed loss is unchanged
        let s = SdeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c0 = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let z = normals(&mut rng, 5);
        let perm = [3usize, 0, 4, 1, 2];
        let t = 0.3;

        let run = |c0: &[f64], z: &[f64]| {
            let tape = Tape::new();
            let loss = dsm_loss(
                &tape,
                |tape, c_t, _t| tape.softplus(tape.leaf(c_t.clone())),
                &Tensor::vector(c0.to_vec()).unwrap(),
                t,
                &Tensor::vector(z.to_vec()).unwrap(),
                &s,
            )
            .unwrap();
            tape.value(loss).scalar_value().unwrap()
        };

        let base = run(&c0, &z);
        let c0_p: Vec<f64> = perm.iter().map(|&i| c0[i]).collect();
        let z_p: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        assert!((run(&c0_p, &z_p) - base).abs() < 1e-12);
    }

    #[test]
    fn dsm_gradient_passes_grad_check() {
        let s = SdeSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = 4;
        let mut params = ModelParams::new();
        params
            .insert("w", Tensor::matrix(k, k, normals(&mut rng, k * k)).unwrap())
            .unwrap();
        params
            .insert("b", Tensor::vector(normals(&mut rng, k)).unwrap())
            .unwrap();
        let c0 = Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::vector(normals(&mut rng, k)).unwrap();

        let report = grad_check(
            |tape, vars| {
                let w = vars.get("w")?;
                let b = vars.get("b")?;
                let loss = dsm_loss(
                    tape,
                    |tape, c_t, _t| {
                        let x = tape.leaf(c_t.clone());
                        let xr = tape.reshape(x, vec![1, k])?;
                        let h = tape.matmul(xr, w)?;
                        let hb = tape.add(h, tape.reshape(b, vec![1, k])?)?;
                        let a = tape.softplus(hb)?;
                        tape.reshape(a, vec![k])
                    },
                    &c0,
                    0.7,
                    &z,
                    &s,
                )
                .map_err(|e| match e {
                    crate::error::Error::Nd(nd) => nd,
                    other => crate::ndcore::NdError::Eval(other.to_string()),
                })?;
                Ok(loss)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }
}
