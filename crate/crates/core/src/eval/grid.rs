//! Window-size x horizon result tables.
//!
//! CSV layout: header `window_size,+h1,+h2,...`, then one row per window
//! size. Absent cells (outside the envelope or not computed) are `--`.

use serde::{Deserialize, Serialize};

use super::metrics::{mean, reduction_percentage};
use crate::error::{CoreError, Result};
use crate::forecaster::WINDOW_ENVELOPE;

pub const ABSENT: &str = "--";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepDefinition {
    pub window_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    pub envelope: usize,
}

impl SweepDefinition {
    /// Window sizes 25..=95 step 5, no forecasting.
    pub fn no_forecast() -> Self {
        SweepDefinition { window_sizes: (25..=95).step_by(5).collect(), horizons: vec![0], envelope: WINDOW_ENVELOPE }
    }

    /// Window sizes 25..=85 step 10 against horizons 0 and 10..=70 step 10.
    pub fn forecast() -> Self {
        let mut horizons = vec![0];
        horizons.extend((10..=70).step_by(10));
        SweepDefinition { window_sizes: (25..=85).step_by(10).collect(), horizons, envelope: WINDOW_ENVELOPE }
    }

    pub fn in_envelope(&self, window_size: usize, horizon: usize) -> bool {
        window_size + horizon <= self.envelope
    }

    /// Cells inside the envelope, row-major.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &w in &self.window_sizes {
            for &h in &self.horizons {
                if self.in_envelope(w, h) {
                    out.push((w, h));
                }
            }
        }
        out
    }

    pub fn empty_grid(&self) -> SweepGrid {
        SweepGrid::new(self.window_sizes.clone(), self.horizons.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub window_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    /// `cells[row][col]`, rows follow `window_sizes`, columns `horizons`.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl SweepGrid {
    pub fn new(window_sizes: Vec<usize>, horizons: Vec<usize>) -> Self {
        let cells = vec![vec![None; horizons.len()]; window_sizes.len()];
        SweepGrid { window_sizes, horizons, cells }
    }

    pub fn get(&self, window_size: usize, horizon: usize) -> Option<f64> {
        let r = self.window_sizes.iter().position(|&w| w == window_size)?;
        let c = self.horizons.iter().position(|&h| h == horizon)?;
        self.cells[r][c]
    }

    pub fn set(&mut self, window_size: usize, horizon: usize, value: f64) -> Result<()> {
        let r = self.window_sizes.iter().position(|&w| w == window_size);
        let c = self.horizons.iter().position(|&h| h == horizon);
        match (r, c) {
            (Some(r), Some(c)) => {
                self.cells[r][c] = Some(value);
                Ok(())
            }
            _ => Err(CoreError::Evaluation(format!("cell ({window_size}, +{horizon}) is not on the grid"))),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_size");
        for h in &self.horizons {
            out.push_str(&format!(",+{h}"));
        }
        out.push('\n');
        for (w, row) in self.window_sizes.iter().zip(&self.cells) {
            out.push_str(&w.to_string());
            for c in row {
                out.push(',');
                match c {
                    Some(v) => out.push_str(&v.to_string()),
                    None => out.push_str(ABSENT),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| CoreError::Evaluation(format!("grid csv: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("window_size") {
            return Err(bad("header must start with window_size".into()));
        }
        let horizons = cols
            .map(|c| {
                c.strip_prefix('+').and_then(|h| h.parse().ok()).ok_or_else(|| bad(format!("bad horizon column {c:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut grid = SweepGrid::new(Vec::new(), horizons);
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let w = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("row {}: bad window size", i + 2)))?;
            let row = fields
                .map(|f| {
                    if f == ABSENT {
                        Ok(None)
                    } else {
                        f.parse().map(Some).map_err(|_| bad(format!("row {}: bad cell {f:?}", i + 2)))
                    }
                })
                .collect::<Result<Vec<Option<f64>>>>()?;
            if row.len() != grid.horizons.len() {
                return Err(bad(format!("row {} has {} cells, expected {}", i + 2, row.len(), grid.horizons.len())));
            }
            grid.window_sizes.push(w);
            grid.cells.push(row);
        }
        Ok(grid)
    }

    /// Aligned plain-text table with `decimals` digits.
    pub fn to_text(&self, title: &str, decimals: usize) -> String {
        let width = (decimals + 3).max(6);
        let mut out = format!("{title}\n{:>6}", "WS");
        for h in &self.horizons {
            out.push_str(&format!(" {:>width$}", format!("+{h}")));
        }
        out.push('\n');
        for (w, row) in self.window_sizes.iter().zip(&self.cells) {
            out.push_str(&format!("{w:>6}"));
            for c in row {
                let cell = c.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.decimals$}"));
                out.push_str(&format!(" {cell:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReduction {
    pub window_size: usize,
    pub no_forecast_eer: f64,
    pub best_forecast_eer: f64,
    pub best_horizon: usize,
    pub reduction: f64,
}

/// EER reductions relative to the `+0` column of a forecast grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionStats {
    pub rows: Vec<RowReduction>,
    pub max_reduction: Option<f64>,
    /// Mean over window sizes of the best-horizon reduction.
    pub mean_per_ws_best: Option<f64>,
    /// Mean over every forecasting cell of its reduction against `+0`.
    pub mean_all_cells: Option<f64>,
}

impl ReductionStats {
    pub fn from_grid(grid: &SweepGrid) -> Result<Self> {
        let base_col = grid
            .horizons
            .iter()
            .position(|&h| h == 0)
            .ok_or_else(|| CoreError::Evaluation("reduction needs a +0 column".into()))?;
        let mut rows = Vec::new();
        let mut all = Vec::new();
        for (w, row) in grid.window_sizes.iter().zip(&grid.cells) {
            let Some(base) = row[base_col] else { continue };
            let mut best: Option<(f64, usize)> = None;
            for (&h, c) in grid.horizons.iter().zip(row) {
                let (Some(v), true) = (c, h > 0) else { continue };
                all.push(reduction_percentage(base, *v)?);
                if best.is_none_or(|(b, _)| *v < b) {
                    best = Some((*v, h));
                }
            }
            if let Some((b, h)) = best {
                rows.push(RowReduction {
                    window_size: *w,
                    no_forecast_eer: base,
                    best_forecast_eer: b,
                    best_horizon: h,
                    reduction: reduction_percentage(base, b)?,
                });
            }
        }
        let per_ws: Vec<f64> = rows.iter().map(|r| r.reduction).collect();
        Ok(ReductionStats {
            max_reduction: per_ws.iter().copied().reduce(f64::max),
            mean_per_ws_best: mean(&per_ws),
            mean_all_cells: mean(&all),
            rows,
        })
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.2}%"));
        let mut out = String::from("EER reduction against +0\n    WS     +0   best  horizon  reduction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>6.3} {:>6.3} {:>8} {:>9.2}%\n",
                r.window_size,
                r.no_forecast_eer,
                r.best_forecast_eer,
                format!("+{}", r.best_horizon),
                r.reduction
            ));
        }
        out.push_str(&format!("max reduction: {}\n", fmt(self.max_reduction)));
        out.push_str(&format!("mean reduction (best horizon per window size): {}\n", fmt(self.mean_per_ws_best)));
        out.push_str(&format!("mean reduction (all forecasting cells): {}\n", fmt(self.mean_all_cells)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(SweepDefinition::no_forecast().cells().len(), 15);
        let f = SweepDefinition::forecast();
        let row65: Vec<usize> = f.cells().into_iter().filter(|&(w, h)| w == 65 && h > 0).map(|(_, h)| h).collect();
        assert_eq!(row65, vec![10, 20, 30]);
        let row25 = f.cells().into_iter().filter(|&(w, h)| w == 25 && h > 0).count();
        assert_eq!(row25, 7);
        let row85: Vec<usize> = f.cells().into_iter().filter(|&(w, _)| w == 85).map(|(_, h)| h).collect();
        assert_eq!(row85, vec![0, 10]);
    }

    #[test]
    fn empty_grid_is_header_only() {
        let g = SweepGrid::new(vec![], vec![10, 20]);
        assert_eq!(g.to_csv(), "window_size,+10,+20\n");
        assert_eq!(SweepGrid::from_csv(&g.to_csv()).unwrap(), g);
    }

    #[test]
    fn staircase_markers() {
        let def = SweepDefinition { window_sizes: vec![75, 85], horizons: vec![10, 20], envelope: 95 };
        let mut g = def.empty_grid();
        for (w, h) in def.cells() {
            g.set(w, h, 0.1).unwrap();
        }
        assert_eq!(g.to_csv(), "window_size,+10,+20\n75,0.1,0.1\n85,0.1,--\n");
        assert!(g.to_text("t", 3).lines().nth(3).unwrap().ends_with("--"));
    }

    #[test]
    fn reduction_stats() {
        let mut g = SweepGrid::new(vec![25, 45], vec![0, 10, 20]);
        for (w, h, v) in [(25, 0, 0.121), (25, 10, 0.1), (25, 20, 0.082), (45, 0, 0.083), (45, 10, 0.053)] {
            g.set(w, h, v).unwrap();
        }
        let r = ReductionStats::from_grid(&g).unwrap();
        assert!((r.max_reduction.unwrap() - 36.1446).abs() < 1e-3);
        assert_eq!(r.rows[0].best_horizon, 20);
        let expect_best =
            (reduction_percentage(0.121, 0.082).unwrap() + reduction_percentage(0.083, 0.053).unwrap()) / 2.0;
        assert!((r.mean_per_ws_best.unwrap() - expect_best).abs() < 1e-12);
        assert_eq!(r.rows.len(), 2);
    }
}
