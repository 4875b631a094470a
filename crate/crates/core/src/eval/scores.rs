//! Scores file: `user,window_id,label,genuine_probability`, label 1 for
//! genuine and 0 for impostor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::ScoreSet;
use crate::data::Label;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub user: String,
    pub window_id: usize,
    pub label: u8,
    pub genuine_probability: f64,
}

impl ScoreRow {
    pub fn label(&self) -> Result<Label> {
        match self.label {
            1 => Ok(Label::Genuine),
            0 => Ok(Label::Impostor),
            l => Err(CoreError::Data(format!("score row label must be 0 or 1, got {l}"))),
        }
    }
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let err = |e: csv::Error| CoreError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    if rows.is_empty() {
        w.write_record(["user", "window_id", "label", "genuine_probability"]).map_err(err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let row: ScoreRow =
            row.map_err(|e| CoreError::File { file: path.to_path_buf(), row: i + 2, message: e.to_string() })?;
        row.label()?;
        out.push(row);
    }
    Ok(out)
}

pub fn score_sets_by_user(rows: &[ScoreRow]) -> Result<BTreeMap<String, ScoreSet>> {
    let mut out: BTreeMap<String, ScoreSet> = BTreeMap::new();
    for r in rows {
        let set = out.entry(r.user.clone()).or_default();
        match r.label()? {
            Label::Genuine => set.genuine.push(r.genuine_probability),
            Label::Impostor => set.impostor.push(r.genuine_probability),
        }
    }
    Ok(out)
}
