//! Synthetic stand-in for recorded throws: a lift from the ball pedestal to
//! a user-specific apex, a throw to a release pose, and a follow-through,
//! each segment a minimum-jerk interpolation, plus Gaussian sensor noise.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Day, Session, N_FEATURES, SESSIONS_PER_DAY, SESSION_LEN};
use crate::error::{CoreError, Result};
use crate::seed;

const PEDESTAL: [f64; 3] = [0.30, 1.00, 0.30];
const APEX_BASE: [f64; 3] = [0.30, 1.55, -0.15];
/// Per-session apex wobble, in multiples of the noise sigma.
const APEX_JITTER: f64 = 3.0;
/// Per-session timing wobble, in multiples of the mean noise sigma.
const TIMING_JITTER: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserParams {
    pub rng_seed: u64,
    /// Top of the wind-up, meters.
    pub apex: [f64; 3],
    /// Stretches the wind-up and follow-through phases.
    pub duration_scale: f64,
    /// Fraction of the session at which the ball leaves the hand.
    pub release_fraction: f64,
    pub noise_sigma: [f64; 3],
    pub trigger_on: f64,
    pub trigger_off: f64,
}

impl SyntheticUserParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.noise_sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(CoreError::Config("noise sigma must be finite and non-negative".into()));
        }
        if !in_unit(self.release_fraction) || !in_unit(self.trigger_on) || !in_unit(self.trigger_off) {
            return Err(CoreError::Config("release and trigger fractions must be in (0, 1)".into()));
        }
        if self.trigger_on >= self.trigger_off {
            return Err(CoreError::Config("trigger_on must precede trigger_off".into()));
        }
        if !(self.duration_scale > 0.0 && self.duration_scale.is_finite()) {
            return Err(CoreError::Config("duration scale must be positive".into()));
        }
        if self.apex.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("apex must be finite".into()));
        }
        Ok(())
    }

    /// Plausible random user, reproducible from `(master_seed, index)`.
    pub fn sample(master_seed: u64, index: usize) -> Self {
        let user_seed = seed::derive(master_seed, &[seed::stream::SYNTH, index as u64]);
        let mut rng = seed::rng(user_seed);
        let apex = [
            APEX_BASE[0] + rng.gen_range(-0.15..0.15),
            APEX_BASE[1] + rng.gen_range(-0.15..0.15),
            APEX_BASE[2] + rng.gen_range(-0.15..0.15),
        ];
        let release_fraction = rng.gen_range(0.50..0.65);
        SyntheticUserParams {
            rng_seed: user_seed,
            apex,
            duration_scale: rng.gen_range(0.85..1.15),
            release_fraction,
            noise_sigma: [rng.gen_range(0.004..0.01), rng.gen_range(0.004..0.01), rng.gen_range(0.004..0.01)],
            trigger_on: rng.gen_range(0.01..0.05),
            trigger_off: release_fraction + rng.gen_range(-0.03..0.03),
        }
    }
}

pub fn user_id(index: usize) -> String {
    format!("u{index:02}")
}

/// `10u^3 - 15u^4 + 6u^5`.
fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

fn lerp(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn trajectory(apex: [f64; 3], release_fraction: f64, duration_scale: f64, len: usize) -> Vec<[f64; 3]> {
    let release = [apex[0] * 0.8, apex[1] - 0.15, 0.55];
    let follow = [release[0], release[1] - 0.35, release[2] + 0.25];
    let k2 = release_fraction.clamp(0.2, 0.9);
    let k1 = (k2 * 0.6 * duration_scale).clamp(0.1, k2 - 0.05);
    let k3 = (k2 + 0.2 * duration_scale).clamp(k2 + 0.05, 0.98);
    let knots = [(0.0, PEDESTAL), (k1, apex), (k2, release), (k3, follow)];
    (0..len)
        .map(|t| {
            let f = t as f64 / (len - 1) as f64;
            match knots.windows(2).find(|w| f <= w[1].0) {
                Some(w) => lerp(w[0].1, w[1].1, min_jerk((f - w[0].0) / (w[1].0 - w[0].0))),
                None => follow,
            }
        })
        .collect()
}

fn session<R: Rng>(params: &SyntheticUserParams, rng: &mut R) -> Array2<f64> {
    let mean_sigma = params.noise_sigma.iter().sum::<f64>() / 3.0;
    let gauss =
        |rng: &mut R, sd: f64| if sd > 0.0 { Normal::new(0.0, sd).expect("positive sd").sample(rng) } else { 0.0 };
    let mut apex = params.apex;
    for (a, s) in apex.iter_mut().zip(params.noise_sigma) {
        *a += gauss(rng, APEX_JITTER * s);
    }
    let dt = TIMING_JITTER * mean_sigma;
    let release = params.release_fraction + gauss(rng, dt);
    let on = (params.trigger_on + gauss(rng, dt)).clamp(0.0, 0.5);
    let off = params.trigger_off + gauss(rng, dt);

    let len = SESSION_LEN;
    let path = trajectory(apex, release, params.duration_scale, len);
    let on_idx = (on * (len - 1) as f64).round() as usize;
    let off_idx = ((off * (len - 1) as f64).round() as usize).clamp(on_idx + 1, len);
    let mut out = Array2::zeros((len, N_FEATURES));
    for (t, p) in path.iter().enumerate() {
        for c in 0..3 {
            out[[t, c]] = p[c] + gauss(rng, params.noise_sigma[c]);
        }
        out[[t, 3]] = if (on_idx..off_idx).contains(&t) { 1.0 } else { 0.0 };
    }
    out
}

/// Two days of ten sessions for every user, ids `u00, u01, ...`.
pub fn generate_synthetic_dataset(params: &[SyntheticUserParams]) -> Result<Vec<Session>> {
    if params.len() < 2 {
        return Err(CoreError::Config(format!("synthetic corpus needs at least 2 users, got {}", params.len())));
    }
    let mut out = Vec::with_capacity(params.len() * 2 * SESSIONS_PER_DAY);
    for (u, p) in params.iter().enumerate() {
        p.validate()?;
        for day in [Day::One, Day::Two] {
            for index in 0..SESSIONS_PER_DAY {
                let mut rng = seed::rng(seed::derive(p.rng_seed, &[day.number() as u64, index as u64]));
                out.push(Session::new(user_id(u), day, index, session(p, &mut rng))?);
            }
        }
    }
    Ok(out)
}
