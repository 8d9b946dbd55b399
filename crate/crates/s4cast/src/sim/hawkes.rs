//! Self-exciting observation times via Ogata thinning.
//!
//! Intensity: `λ(t) = λ₀ · κ^((stage(t) − 1)/3) + Σ_{t_j < t} α · e^{−β(t − t_j)}`.
//! The stage path modulates the base rate — sicker patients are observed more
//! often — and each observation transiently excites further observations.

use super::{HawkesParams, SimError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Base intensity at time `t` given a stage path sampled on a uniform grid.
fn base_intensity(params: &HawkesParams, kappa: f64, stages: &[u8], dt_grid: f64, t: f64) -> f64 {
    let idx = ((t / dt_grid).floor() as usize).min(stages.len() - 1);
    let stage = stages[idx] as f64;
    params.base_rate * kappa.powf((stage - 1.0) / 3.0)
}

/// Sample observation times on `[0, horizon]`.
///
/// The first observation is forced at t = 0 (every patient is seen at entry)
/// and does not excite the process; thinning runs on the open interval
/// `(0, horizon]`. Rejects kernels with branching ratio `α/β ≥ 1`, which
/// would allow runaway cascades.
pub fn hawkes_sample(
    stages: &[u8],
    dt_grid: f64,
    kappa: f64,
    horizon: f64,
    params: &HawkesParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, SimError> {
    if params.alpha < 0.0 || params.beta <= 0.0 || params.base_rate <= 0.0 {
        return Err(SimError::InvalidConfig(
            "observation-process rates must be positive".into(),
        ));
    }
    let ratio = params.alpha / params.beta;
    if ratio >= 1.0 {
        return Err(SimError::BranchingRatio { ratio });
    }
    assert!(!stages.is_empty(), "empty stage path");
    assert!(dt_grid > 0.0 && horizon > 0.0 && kappa >= 1.0);

    let mut events = vec![0.0];
    // kappa >= 1 and stage <= 4 make this a valid ceiling for the base part.
    let base_bound = params.base_rate * kappa;
    let mut excitation = 0.0; // sum of alpha * exp(-beta (t - t_j)) at current t
    let mut t = 0.0;
    loop {
        let bound = base_bound + excitation;
        let u: f64 = rng.gen();
        let wait = -(1.0 - u).ln() / bound;
        let candidate = t + wait;
        if candidate > horizon {
            break;
        }
        excitation *= (-params.beta * wait).exp();
        t = candidate;
        let intensity = base_intensity(params, kappa, stages, dt_grid, t) + excitation;
        let accept: f64 = rng.gen();
        if accept * bound < intensity {
            events.push(t);
            excitation += params.alpha;
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(alpha: f64) -> HawkesParams {
        HawkesParams {
            base_rate: 0.5,
            alpha,
            beta: 1.0,
        }
    }

    #[test]
    fn rejects_supercritical_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = hawkes_sample(&[1], 0.25, 1.0, 10.0, &params(1.0), &mut rng);
        assert!(matches!(err, Err(SimError::BranchingRatio { .. })));
    }

    #[test]
    fn first_observation_forced_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times = hawkes_sample(&[1], 0.25, 1.0, 5.0, &params(0.2), &mut rng).unwrap();
        assert_eq!(times[0], 0.0);
        for w in times.windows(2) {
            assert!(w[1] > w[0], "times must strictly increase");
        }
        assert!(*times.last().unwrap() <= 5.0);
    }

    #[test]
    fn same_seed_same_times() {
        let stages = vec![2u8; 240];
        let a = hawkes_sample(
            &stages,
            0.25,
            5.0,
            60.0,
            &params(0.2),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = hawkes_sample(
            &stages,
            0.25,
            5.0,
            60.0,
            &params(0.2),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_excitation_unit_kappa_matches_poisson_mean() {
        // alpha = 0, kappa = 1, constant stage: homogeneous Poisson with rate
        // 0.5/day over 60 days -> mean 30 events on (0, 60]. Monte Carlo mean
        // over 1000 runs must sit within 3 standard errors.
        let stages = vec![1u8; 241];
        let mut total = 0usize;
        let runs = 1000;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let times =
                hawkes_sample(&stages, 0.25, 1.0, 60.0, &params(0.0), &mut rng).unwrap();
            total += times.len() - 1; // exclude the forced entry observation
        }
        let mean = total as f64 / runs as f64;
        let se = (30.0 / runs as f64).sqrt();
        assert!(
            (mean - 30.0).abs() <= 3.0 * se,
            "mean {mean} outside 30 +/- {:.3}",
            3.0 * se
        );
    }

    #[test]
    fn stage_four_counts_increase_with_kappa() {
        let stages = vec![4u8; 241];
        let mean_count = |kappa: f64| -> f64 {
            let runs = 500;
            let mut total = 0usize;
            for seed in 0..runs {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let times =
                    hawkes_sample(&stages, 0.25, kappa, 60.0, &params(0.2), &mut rng).unwrap();
                total += times.len();
            }
            total as f64 / runs as f64
        };
        let c1 = mean_count(1.0);
        let c20 = mean_count(20.0);
        assert!(
            c20 > c1,
            "kappa=20 mean {c20} not larger than kappa=1 mean {c1}"
        );
        // The base rate scales by kappa a factor of 20; demand a big gap, not
        // merely a nominal one.
        assert!(c20 > 5.0 * c1);
    }

    #[test]
    fn unit_kappa_stage_invariant() {
        // With kappa = 1 the stage exponent cancels: stage-1 and stage-4
        // paths are statistically identical, and with the same seed the draw
        // sequence is identical too.
        let s1 = vec![1u8; 241];
        let s4 = vec![4u8; 241];
        let a = hawkes_sample(&s1, 0.25, 1.0, 60.0, &params(0.2), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = hawkes_sample(&s4, 0.25, 1.0, 60.0, &params(0.2), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn excitation_increases_event_count() {
        let stages = vec![2u8; 241];
        let mean_count = |alpha: f64| -> f64 {
            let runs = 500;
            let mut total = 0usize;
            for seed in 0..runs {
                let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
                let times =
                    hawkes_sample(&stages, 0.25, 1.0, 60.0, &params(alpha), &mut rng).unwrap();
                total += times.len();
            }
            total as f64 / runs as f64
        };
        // Branching ratio 0.2 inflates the count by ~1/(1-0.2) = 1.25.
        let plain = mean_count(0.0);
        let excited = mean_count(0.2);
        assert!(excited > plain * 1.1, "excited {excited} vs plain {plain}");
    }
}
