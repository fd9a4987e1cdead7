//! CSV and JSON plumbing shared by the subcommands.

use crate::error::{CliError, CliResult};
use ndarray::{Array2, Array3};
use qnoise_core::sampling::Trajectory;
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".qnoise.lock";

/// Exclusive writer lock on an output directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::config(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::config(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn coord_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_points(path: &Path, points: &Array2<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(points.ncols()))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per `(sample, step)` with the integration time `s`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> CliResult<()> {
    let (_, b, d) = traj.states.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample".to_string(), "step".to_string(), "s".to_string()];
    header.extend(coord_header(d));
    w.write_record(&header)?;
    for i in 0..b {
        for (k, s) in traj.times.iter().enumerate() {
            let mut rec = vec![i.to_string(), k.to_string(), fmt_f64(*s)];
            rec.extend((0..d).map(|j| fmt_f64(traj.states[[k, i, j]])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn open_csv(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::Reader::from_path(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

fn parse_field(path: &Path, line: usize, s: &str) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CliError::config(format!("{}:{line}: `{s}` is not a number", path.display())))
}

/// Reads a points CSV written by [`write_points`] (header `x0, x1, ...`).
pub fn read_points(path: &Path) -> CliResult<Array2<f64>> {
    let mut r = open_csv(path)?;
    let d = r.headers()?.len();
    if d == 0 {
        return Err(CliError::config(format!("{} has no columns", path.display())));
    }
    let mut flat = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(CliError::config(format!("{}:{}: expected {d} fields", path.display(), i + 2)));
        }
        for f in rec.iter() {
            flat.push(parse_field(path, i + 2, f)?);
        }
    }
    let n = flat.len() / d;
    Ok(Array2::from_shape_vec((n, d), flat).expect("rows have equal length"))
}

/// Reads a trajectory CSV into `[steps + 1, batch, d]`.
pub fn read_trajectory(path: &Path) -> CliResult<Array3<f64>> {
    let mut r = open_csv(path)?;
    let d = r.headers()?.len().saturating_sub(3);
    if d == 0 {
        return Err(CliError::config(format!("{} is not a trajectory file", path.display())));
    }
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let idx = |k: usize| -> CliResult<usize> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CliError::config(format!("{}:{line}: bad index", path.display())))
        };
        let (sample, step) = (idx(0)?, idx(1)?);
        let coords = (0..d).map(|j| parse_field(path, line, rec.get(3 + j).unwrap_or(""))).collect::<CliResult<Vec<_>>>()?;
        rows.push((sample, step, coords));
    }
    let b = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let k = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != b * k {
        return Err(CliError::config(format!("{}: trajectories are ragged", path.display())));
    }
    let mut out = Array3::zeros((k, b, d));
    for (i, s, c) in rows {
        for (j, v) in c.into_iter().enumerate() {
            out[[s, i, j]] = v;
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn points_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let x = array![[0.1, -1e-300], [1.0 / 3.0, f64::MAX]];
        write_points(&p, &x).unwrap();
        assert_eq!(read_points(&p).unwrap(), x);
        write_points(&p, &Array2::zeros((0, 2))).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x0,x1\n");
        assert_eq!(read_points(&p).unwrap().dim(), (0, 2));
    }

    #[test]
    fn trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        let states = Array3::from_shape_fn((3, 2, 2), |(k, i, j)| (k * 10 + i * 3 + j) as f64 * 0.5);
        let traj = Trajectory { times: vec![0.0, 0.5, 1.0], states: states.clone() };
        write_trajectory(&p, &traj).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), states);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn malformed_numbers_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x0,x1\n1,abc\n").unwrap();
        assert_eq!(read_points(&p).unwrap_err().exit_code(), 2);
    }
}
