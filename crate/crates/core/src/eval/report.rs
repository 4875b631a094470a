//! Report files:
//!
//! | file | content |
//! |---|---|
//! | `eer_no_forecast.csv/.txt` | mean EER by window size, no forecasting |
//! | `eer_forecast.csv/.txt` | mean EER by window size and horizon (`+0` = no forecasting) |
//! | `mse_forecast.csv/.txt` | mean day-2 forecaster position MSE |
//! | `reduction.txt` | per-row best reduction against `+0`, max and both means |
//! | `overlap_ws{W}_h{F}.csv` | `l_overlap,mse` series |
//! | `timing.txt` | latency statistics |
//! | `summary.json` | everything above plus seeds, config and tool version |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{ReductionStats, SweepGrid};
use super::sweep::{CellRecord, OverlapSeries};
use super::timing::LatencyStats;
use crate::error::{CoreError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub no_forecast_eer: Option<SweepGrid>,
    pub forecast_eer: Option<SweepGrid>,
    pub forecast_mse: Option<SweepGrid>,
    pub overlap: Vec<OverlapSeries>,
    pub timing: Option<LatencyStats>,
    pub master_seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub cells: Vec<CellRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    pub report: Report,
    pub reduction: Option<ReductionStats>,
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Drops the `+0` column (MSE is undefined without forecasting).
fn without_zero(grid: &SweepGrid) -> SweepGrid {
    let keep: Vec<usize> = (0..grid.horizons.len()).filter(|&c| grid.horizons[c] > 0).collect();
    SweepGrid {
        window_sizes: grid.window_sizes.clone(),
        horizons: keep.iter().map(|&c| grid.horizons[c]).collect(),
        cells: grid.cells.iter().map(|row| keep.iter().map(|&c| row[c]).collect()).collect(),
    }
}

pub fn emit_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut written = Vec::new();
    if let Some(g) = &report.no_forecast_eer {
        write(dir.join("eer_no_forecast.csv"), &g.to_csv(), &mut written)?;
        write(dir.join("eer_no_forecast.txt"), &g.to_text("Mean EER, no forecasting", 3), &mut written)?;
    }
    let mut reduction = None;
    if let Some(g) = &report.forecast_eer {
        write(dir.join("eer_forecast.csv"), &g.to_csv(), &mut written)?;
        write(dir.join("eer_forecast.txt"), &g.to_text("Mean EER by horizon", 3), &mut written)?;
        if g.horizons.contains(&0) {
            let r = ReductionStats::from_grid(g)?;
            write(dir.join("reduction.txt"), &r.to_text(), &mut written)?;
            reduction = Some(r);
        }
    }
    if let Some(g) = &report.forecast_mse {
        let g = without_zero(g);
        write(dir.join("mse_forecast.csv"), &g.to_csv(), &mut written)?;
        write(dir.join("mse_forecast.txt"), &g.to_text("Mean forecast position MSE", 4), &mut written)?;
    }
    for s in &report.overlap {
        write(dir.join(format!("overlap_ws{}_h{}.csv", s.l_window, s.l_forecasting)), &s.to_csv(), &mut written)?;
    }
    if let Some(t) = &report.timing {
        write(dir.join("timing.txt"), &t.to_text(), &mut written)?;
    }
    let summary = Summary { tool_version: TOOL_VERSION.to_string(), report: report.clone(), reduction };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(dir.join("summary.json"), &json, &mut written)?;
    Ok(written)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}
