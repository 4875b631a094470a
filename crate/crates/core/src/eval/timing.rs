use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::authenticator::{classify_window, concat_forecast, AuthModel};
use crate::data::SAMPLE_INTERVAL_MS;
use crate::error::{CoreError, Result};
use crate::forecaster::{ForecastSpec, Forecaster};

const WARMUP: usize = 10;
pub const MIN_REPETITIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    /// Time between two recorded timestamps.
    pub budget_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Result<Self> {
        if ms.is_empty() {
            return Err(CoreError::Evaluation("no latency samples".into()));
        }
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let rank = |q: f64| ms[((q * (n - 1) as f64).round() as usize).min(n - 1)];
        Ok(LatencyStats {
            repetitions: n,
            min_ms: ms[0],
            median_ms: if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) },
            p95_ms: rank(0.95),
            max_ms: ms[n - 1],
            mean_ms: ms.iter().sum::<f64>() / n as f64,
            budget_ms: SAMPLE_INTERVAL_MS,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "forecast+classify latency over {} runs: median {:.3} ms, p95 {:.3} ms, min {:.3} ms, max {:.3} ms (budget {:.2} ms per timestamp)\n",
            self.repetitions, self.median_ms, self.p95_ms, self.min_ms, self.max_ms, self.budget_ms
        )
    }
}

/// Wall-clock time of forecast + classify for a single window.
pub fn timing_benchmark(
    forecaster: Option<(&Forecaster<f32>, &ForecastSpec)>,
    model: &AuthModel,
    window: ArrayView2<'_, f64>,
    start: usize,
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions < MIN_REPETITIONS {
        return Err(CoreError::Config(format!(
            "timing needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let once = || -> Result<()> {
        let input = match forecaster {
            Some((f, spec)) => concat_forecast(window, &f.forecast(window, start, spec)?)?,
            None => window.to_owned(),
        };
        std::hint::black_box(classify_window(model, input.view())?);
        Ok(())
    };
    for _ in 0..WARMUP {
        once()?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        once()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(samples)
}
