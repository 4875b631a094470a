use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{slide_windows, Day, Label, LabeledWindow, Session, WindowSpec};
use crate::error::{CoreError, Result};
use crate::seed::{self, stream};

/// Draws one impostor per genuine window: a uniformly random other user,
/// then a uniformly random session of that user on the same day, sliced at
/// the same start with the same length. Resampled for every window.
pub fn sample_impostors<R: Rng>(
    genuine: &[LabeledWindow],
    sessions: &[Session],
    target_user: &str,
    rng: &mut R,
) -> Result<Vec<LabeledWindow>> {
    let mut by_day: BTreeMap<Day, BTreeMap<&str, Vec<&Session>>> = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.user_id != target_user) {
        by_day.entry(s.day).or_default().entry(s.user_id.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(genuine.len());
    for g in genuine {
        let others = by_day.get(&g.source_day).filter(|m| !m.is_empty()).ok_or_else(|| {
            CoreError::Data(format!(
                "cannot sample impostors for {target_user}: no other user has {} sessions",
                g.source_day
            ))
        })?;
        let users: Vec<&&str> = others.keys().collect();
        let user = users[rng.gen_range(0..users.len())];
        let pool = &others[*user];
        let session = pool[rng.gen_range(0..pool.len())];
        let end = g.start_timestamp + g.len();
        if end > session.len() {
            return Err(CoreError::Data(format!(
                "impostor session {}/{}/{} has {} rows, window needs {end}",
                session.user_id,
                session.day,
                session.session_index,
                session.len()
            )));
        }
        out.push(LabeledWindow::cut(session, g.start_timestamp, g.len(), Label::Impostor, g.pair_id));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { validation_fraction: 0.2, seed: 0 }
    }
}

/// Per-user windows: day 1 split into train and validation, day 2 as test.
/// Every list alternates genuine, impostor for each pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub user_id: String,
    pub spec: WindowSpec,
    pub train: Vec<LabeledWindow>,
    pub validation: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
    pub rng_seed: u64,
}

impl DatasetSplit {
    /// Stable digest of the split layout, stored with trained models.
    pub fn fingerprint(&self) -> u64 {
        let mut h =
            seed::derive(self.rng_seed, &[seed::label(&self.user_id), self.spec.size as u64, self.spec.stride as u64]);
        for w in self.train.iter().chain(&self.validation).chain(&self.test) {
            h = seed::derive(
                h,
                &[
                    seed::label(&w.source_user),
                    w.source_day.number() as u64,
                    w.source_session as u64,
                    w.start_timestamp as u64,
                ],
            );
        }
        h
    }

    pub fn genuine_train(&self) -> impl Iterator<Item = &LabeledWindow> {
        self.train.iter().filter(|w| w.label.is_genuine())
    }
}

fn genuine_windows(sessions: &[Session], user: &str, day: Day, spec: WindowSpec) -> Result<Vec<LabeledWindow>> {
    let mut own: Vec<&Session> = sessions.iter().filter(|s| s.user_id == user && s.day == day).collect();
    if own.is_empty() {
        return Err(CoreError::Data(format!("user {user} has no {day} sessions")));
    }
    own.sort_by_key(|s| s.session_index);
    let mut out = Vec::new();
    for s in own {
        for (start, _) in slide_windows(s, spec)? {
            let id = out.len();
            out.push(LabeledWindow::cut(s, start, spec.size, Label::Genuine, id));
        }
    }
    Ok(out)
}

fn interleave(genuine: Vec<LabeledWindow>, impostors: Vec<LabeledWindow>) -> Vec<LabeledWindow> {
    genuine.into_iter().zip(impostors).flat_map(|(g, i)| [g, i]).collect()
}

/// Pure function of (corpus, spec, target user, options).
pub fn build_split(
    sessions: &[Session],
    spec: WindowSpec,
    target_user: &str,
    options: SplitOptions,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&options.validation_fraction) {
        return Err(CoreError::Config(format!(
            "validation fraction must be in [0, 1), got {}",
            options.validation_fraction
        )));
    }
    let seed = options.seed;
    let day1 = genuine_windows(sessions, target_user, Day::One, spec)?;
    let day2 = genuine_windows(sessions, target_user, Day::Two, spec)?;
    let imp1 =
        sample_impostors(&day1, sessions, target_user, &mut seed::rng(seed::derive(seed, &[stream::TRAIN_IMPOSTORS])))?;
    let imp2 =
        sample_impostors(&day2, sessions, target_user, &mut seed::rng(seed::derive(seed, &[stream::TEST_IMPOSTORS])))?;

    let n_pairs = day1.len();
    let mut n_val = (options.validation_fraction * n_pairs as f64).round() as usize;
    if options.validation_fraction > 0.0 && n_pairs >= 2 {
        n_val = n_val.clamp(1, n_pairs - 1);
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[stream::VALIDATION])));
    let mut is_val = vec![false; n_pairs];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (g, i) in day1.into_iter().zip(imp1) {
        let dest = if is_val[g.pair_id] { &mut validation } else { &mut train };
        dest.push(g);
        dest.push(i);
    }
    Ok(DatasetSplit {
        user_id: target_user.to_string(),
        spec,
        train,
        validation,
        test: interleave(day2, imp2),
        rng_seed: seed,
    })
}
