//! Sessions, sliding windows, impostor pairing and day-based splits.

mod io;
mod split;
mod synth;

use std::fmt;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use io::{
    load_sessions, read_manifest, read_session_csv, session_path, write_dataset, write_session_csv, Manifest,
    SessionFormat, HEADER, MANIFEST_FILE, SCHEMA_VERSION,
};
pub use split::{build_split, sample_impostors, DatasetSplit, SplitOptions};
pub use synth::{generate_synthetic_dataset, SyntheticUserParams};

/// Timestamps per recorded session.
pub const SESSION_LEN: usize = 135;
/// x, y, z, trigger.
pub const N_FEATURES: usize = 4;
/// Number of position channels (the leading columns).
pub const N_POSITION: usize = 3;
/// Spacing between timestamps in milliseconds.
pub const SAMPLE_INTERVAL_MS: f64 = 22.22;
pub const SESSIONS_PER_DAY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Day {
    One,
    Two,
}

impl Day {
    pub fn number(self) -> u8 {
        match self {
            Day::One => 1,
            Day::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Day> {
        match n {
            1 => Some(Day::One),
            2 => Some(Day::Two),
            _ => None,
        }
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "day{}", self.number())
    }
}

/// One recorded throw: `T x 4` samples, rows in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user_id: String,
    pub day: Day,
    pub session_index: usize,
    pub samples: Array2<f64>,
}

impl Session {
    pub fn new(user_id: impl Into<String>, day: Day, session_index: usize, samples: Array2<f64>) -> Result<Self> {
        let user_id = user_id.into();
        if samples.ncols() != N_FEATURES {
            return Err(CoreError::Data(format!(
                "session {user_id}/{day}/{session_index}: expected {N_FEATURES} columns, got {}",
                samples.ncols()
            )));
        }
        if let Some((row, v)) = samples.column(3).iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Data(format!(
                "session {user_id}/{day}/{session_index}: trigger {v} at row {row} outside [0, 1]"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data(format!("session {user_id}/{day}/{session_index}: non-finite sample")));
        }
        Ok(Session { user_id, day, session_index, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub const DEFAULT_STRIDE: usize = 5;

    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(CoreError::Config(format!("window size ({size}) and stride ({stride}) must be positive")));
        }
        Ok(WindowSpec { size, stride })
    }

    /// Number of windows in a series of `len` rows.
    pub fn count(&self, len: usize) -> usize {
        if self.size > len {
            0
        } else {
            (len - self.size) / self.stride + 1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Impostor,
    Genuine,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Genuine => 1.0,
            Label::Impostor => 0.0,
        }
    }

    pub fn is_genuine(self) -> bool {
        self == Label::Genuine
    }
}

/// A window cut from a session, plus the rows that follow it in the same
/// session (the teacher signal for forecasting).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub values: Array2<f64>,
    pub label: Label,
    pub source_user: String,
    pub source_day: Day,
    pub source_session: usize,
    pub start_timestamp: usize,
    /// Genuine windows and their impostor share a pair id.
    pub pair_id: usize,
    /// Rows `[start + n, T)` of the source session.
    pub continuation: Array2<f64>,
}

impl LabeledWindow {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// The genuine window an impostor mirrors.
    pub fn matched_to(&self) -> Option<usize> {
        (self.label == Label::Impostor).then_some(self.pair_id)
    }

    /// True when the source session holds `horizon` more rows after the window.
    pub fn has_tail_room(&self, horizon: usize) -> bool {
        self.continuation.nrows() >= horizon
    }

    /// First `horizon` rows after the window, if the session has them.
    pub fn future(&self, horizon: usize) -> Option<ArrayView2<'_, f64>> {
        self.has_tail_room(horizon).then(|| self.continuation.slice(s![..horizon, ..]))
    }

    /// Window `[start, start + size)` of `session`.
    pub fn from_session(session: &Session, start: usize, size: usize, label: Label, pair_id: usize) -> Result<Self> {
        if size == 0 || start + size > session.len() {
            return Err(CoreError::Config(format!(
                "window [{start}, {}) does not fit a session of {} rows",
                start + size,
                session.len()
            )));
        }
        Ok(Self::cut(session, start, size, label, pair_id))
    }

    pub(crate) fn cut(session: &Session, start: usize, size: usize, label: Label, pair_id: usize) -> Self {
        LabeledWindow {
            values: session.samples.slice(s![start..start + size, ..]).to_owned(),
            label,
            source_user: session.user_id.clone(),
            source_day: session.day,
            source_session: session.session_index,
            start_timestamp: start,
            pair_id,
            continuation: session.samples.slice(s![start + size.., ..]).to_owned(),
        }
    }
}

/// Windows at starts `0, l, 2l, ...` as `(start, view)` pairs.
pub fn slide_windows(session: &Session, spec: WindowSpec) -> Result<Vec<(usize, ArrayView2<'_, f64>)>> {
    if spec.size > session.len() {
        return Err(CoreError::Config(format!("window size {} exceeds session length {}", spec.size, session.len())));
    }
    if spec.stride == 0 {
        return Err(CoreError::Config("stride must be positive".into()));
    }
    Ok((0..spec.count(session.len()))
        .map(|i| {
            let start = i * spec.stride;
            (start, session.samples.slice(s![start..start + spec.size, ..]))
        })
        .collect())
}

/// Sorted, de-duplicated user ids.
pub fn users(sessions: &[Session]) -> Vec<String> {
    let mut ids: Vec<String> = sessions.iter().map(|s| s.user_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Optional per-channel z-score over the position channels. Trigger is left
/// alone so it stays a probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; N_POSITION],
    pub std: [f64; N_POSITION],
}

impl FeatureScaler {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut sum = [0.0; N_POSITION];
        let mut sq = [0.0; N_POSITION];
        let mut n = 0usize;
        for w in windows {
            for row in w.rows() {
                for c in 0..N_POSITION {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(CoreError::Data("feature scaler needs at least two rows".into()));
        }
        let mut mean = [0.0; N_POSITION];
        let mut std = [0.0; N_POSITION];
        for c in 0..N_POSITION {
            mean[c] = sum[c] / n as f64;
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-8);
        }
        Ok(FeatureScaler { mean, std })
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for c in 0..N_POSITION {
                row[c] = (row[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize) -> Session {
        let samples = Array2::from_shape_fn((len, N_FEATURES), |(t, c)| if c == 3 { 0.5 } else { (t * 10 + c) as f64 });
        Session::new("u", Day::One, 0, samples).unwrap()
    }

    #[test]
    fn window_counts() {
        let s = ramp(SESSION_LEN);
        assert_eq!(slide_windows(&s, WindowSpec::new(135, 7).unwrap()).unwrap().len(), 1);
        assert_eq!(slide_windows(&s, WindowSpec::new(25, 5).unwrap()).unwrap().len(), 23);
        assert_eq!(slide_windows(&s, WindowSpec::new(95, 5).unwrap()).unwrap().len(), 9);
        assert!(matches!(slide_windows(&s, WindowSpec::new(136, 1).unwrap()), Err(CoreError::Config(_))));
    }

    #[test]
    fn windows_are_contiguous_slices() {
        let s = ramp(40);
        for (start, w) in slide_windows(&s, WindowSpec::new(10, 3).unwrap()).unwrap() {
            assert_eq!(w, s.samples.slice(s![start..start + 10, ..]));
        }
    }

    #[test]
    fn session_validation() {
        let mut bad = Array2::zeros((5, 4));
        bad[[2, 3]] = 1.5;
        assert!(Session::new("u", Day::Two, 0, bad).is_err());
        assert!(Session::new("u", Day::Two, 0, Array2::zeros((5, 3))).is_err());
    }

    #[test]
    fn cut_keeps_continuation() {
        let s = ramp(30);
        let w = LabeledWindow::cut(&s, 5, 10, Label::Genuine, 0);
        assert_eq!(w.continuation.nrows(), 15);
        assert_eq!(w.continuation.row(0), s.samples.row(15));
        assert!(w.has_tail_room(15) && !w.has_tail_room(16));
        assert_eq!(w.matched_to(), None);
    }

    #[test]
    fn scaler_leaves_trigger() {
        let s = ramp(20);
        let scaler = FeatureScaler::fit([&s.samples]).unwrap();
        let mut x = s.samples.clone();
        scaler.apply(&mut x);
        assert!(x.column(3).iter().all(|&v| v == 0.5));
        assert!(x.column(0).sum().abs() < 1e-9);
    }
}
