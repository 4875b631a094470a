//! CSV session files and the dataset manifest.
//!
//! Layout: `<root>/<user>/day<1|2>/session<NN>.csv`, each file with header
//! `t,x,y,z,trigger` and one row per timestamp. `<root>/manifest.txt` holds
//! `key=value` lines (`schema_version`, `root`, `users`, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{users, Day, Session, N_FEATURES, SESSION_LEN};
use crate::error::{CoreError, Result};

pub const HEADER: [&str; 5] = ["t", "x", "y", "z", "trigger"];
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionFormat {
    /// Rows every file must have.
    pub timestamps: usize,
}

impl Default for SessionFormat {
    fn default() -> Self {
        SessionFormat { timestamps: SESSION_LEN }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub schema_version: u32,
    pub root: String,
    pub users: Vec<String>,
    pub timestamps: usize,
    /// Free-form extra keys (generator seed and so on).
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = format!(
            "schema_version={}\nroot={}\nusers={}\ntimestamps={}\n",
            self.schema_version,
            self.root,
            self.users.join(","),
            self.timestamps
        );
        for (k, v) in &self.extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Data(format!("manifest line {}: expected key=value", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| CoreError::Data(format!("manifest: missing key {k}")));
        let schema_version =
            take("schema_version")?.parse().map_err(|_| CoreError::Data("manifest: bad schema_version".into()))?;
        let root = take("root")?;
        let users = take("users")?.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        let timestamps = take("timestamps")?.parse().map_err(|_| CoreError::Data("manifest: bad timestamps".into()))?;
        if schema_version != SCHEMA_VERSION {
            return Err(CoreError::Data(format!("manifest: unsupported schema version {schema_version}")));
        }
        Ok(Manifest { schema_version, root, users, timestamps, extra: map })
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    Manifest::parse(&text)
}

fn file_error(file: &Path, row: usize, message: impl Into<String>) -> CoreError {
    CoreError::File { file: file.to_path_buf(), row, message: message.into() }
}

/// Reads one session file. `row` in diagnostics is the 1-based line number.
pub fn read_session_csv(path: &Path, user: &str, day: Day, index: usize, format: &SessionFormat) -> Result<Session> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| file_error(path, 0, e.to_string()))?;
    let header = reader.headers().map_err(|e| file_error(path, 1, e.to_string()))?;
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(file_error(path, 1, format!("expected header {}", HEADER.join(","))));
    }
    let mut data = Vec::with_capacity(format.timestamps * N_FEATURES);
    let mut rows = 0;
    for record in reader.records() {
        let line = rows + 2;
        let record = record.map_err(|e| file_error(path, line, e.to_string()))?;
        if record.len() != HEADER.len() {
            return Err(file_error(path, line, format!("expected {} columns, got {}", HEADER.len(), record.len())));
        }
        let t: usize =
            record[0].trim().parse().map_err(|_| file_error(path, line, format!("bad timestamp {:?}", &record[0])))?;
        if t != rows {
            return Err(file_error(path, line, format!("timestamp {t} out of order, expected {rows}")));
        }
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| file_error(path, line, format!("non-numeric cell {cell:?} in column {}", HEADER[c])))?;
            if !v.is_finite() {
                return Err(file_error(path, line, format!("non-finite value in column {}", HEADER[c])));
            }
            if c == 4 && !(0.0..=1.0).contains(&v) {
                return Err(file_error(path, line, format!("trigger {v} outside [0, 1]")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows != format.timestamps {
        return Err(file_error(path, rows + 1, format!("expected {} data rows, found {rows}", format.timestamps)));
    }
    let samples = Array2::from_shape_vec((rows, N_FEATURES), data).expect("row count checked");
    Session::new(user, day, index, samples)
}

pub fn write_session_csv(path: &Path, session: &Session) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CoreError::Data(format!("{}: {e}", path.display()));
    w.write_record(HEADER).map_err(err)?;
    for (t, row) in session.samples.rows().into_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn session_path(root: &Path, user: &str, day: Day, index: usize) -> PathBuf {
    root.join(user).join(day.to_string()).join(format!("session{index:02}.csv"))
}

/// Writes every session and a manifest. Returns the number of files written.
pub fn write_dataset(root: &Path, sessions: &[Session], extra: BTreeMap<String, String>) -> Result<usize> {
    for s in sessions {
        let path = session_path(root, &s.user_id, s.day, s.session_index);
        let dir = path.parent().expect("session path has a parent");
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        write_session_csv(&path, s)?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        root: root.display().to_string(),
        users: users(sessions),
        timestamps: sessions.first().map_or(SESSION_LEN, Session::len),
        extra,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| CoreError::io(&path, e))?;
    Ok(sessions.len())
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
    }
    out.sort();
    Ok(out)
}

/// Loads every `<user>/day<d>/session<NN>.csv` under `root`, ordered by
/// (user, day, session). Files and directories that do not match the layout
/// are ignored.
pub fn load_sessions(root: &Path, format: &SessionFormat) -> Result<Vec<Session>> {
    if !root.is_dir() {
        return Err(CoreError::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut sessions = Vec::new();
    for (user, user_dir) in sorted_entries(root)? {
        if !user_dir.is_dir() {
            continue;
        }
        for (day_name, day_dir) in sorted_entries(&user_dir)? {
            let Some(day) = day_name.strip_prefix("day").and_then(|d| d.parse().ok()).and_then(Day::from_number) else {
                continue;
            };
            if !day_dir.is_dir() {
                continue;
            }
            for (file, path) in sorted_entries(&day_dir)? {
                let Some(index) = file
                    .strip_prefix("session")
                    .and_then(|f| f.strip_suffix(".csv"))
                    .and_then(|i| i.parse::<usize>().ok())
                else {
                    continue;
                };
                sessions.push(read_session_csv(&path, &user, day, index, format)?);
            }
        }
    }
    if sessions.is_empty() {
        return Err(CoreError::Data(format!("no session files under {}", root.display())));
    }
    Ok(sessions)
}
