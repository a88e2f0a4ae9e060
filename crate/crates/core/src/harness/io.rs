use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{RunRecord, SweepMode};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::world::{Trajectory, View};

pub const RUNS_HEADER: [&str; 16] = [
    "run_id",
    "mode",
    "category",
    "prompt_id",
    "view",
    "x",
    "setting",
    "seed",
    "ta1",
    "ta2",
    "ta_mean",
    "ic",
    "bc",
    "turning_frame",
    "occupancy2",
    "wall_time_ms",
];

fn row(r: &RunRecord) -> Vec<String> {
    let m = r.metrics.as_ref();
    let f = |get: fn(&MetricsRecord) -> f64| m.map(|m| get(m).to_string()).unwrap_or_default();
    vec![
        r.run_id.clone(),
        r.mode.to_string(),
        r.category.to_string(),
        r.prompt_id.clone(),
        r.view.to_string(),
        r.x.to_string(),
        r.setting.to_string(),
        r.seed.to_string(),
        f(|m| m.ta1),
        f(|m| m.ta2),
        f(|m| m.ta_mean),
        f(|m| m.ic),
        f(|m| m.bc),
        m.and_then(|m| m.turning_frame)
            .map(|t| t.to_string())
            .unwrap_or_default(),
        f(|m| m.occupancy2),
        format!("{:.3}", r.wall_time_ms),
    ]
}

/// Appends rows to `runs.csv`, flushing after each batch.
pub(super) struct RunsWriter {
    inner: csv::Writer<BufWriter<fs::File>>,
}

impl RunsWriter {
    pub(super) fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
        inner.write_record(RUNS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub(super) fn write_all(&mut self, records: &[RunRecord]) -> Result<()> {
        for r in records {
            self.inner.write_record(row(r))?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    RunsWriter::create(path)?.write_all(records)
}

fn bad(path: &Path, line: u64, what: impl std::fmt::Display) -> Error {
    Error::Input {
        path: path.to_owned(),
        reason: format!("line {line}: {what}"),
    }
}

/// Reads a `runs.csv` back. Rows with empty metric fields become failed
/// records.
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Input {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(RUNS_HEADER) {
        return Err(bad(path, 1, "header does not match the runs.csv schema"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| bad(path, line, format!("{} is not a number: {:?}", RUNS_HEADER[i], &rec[i])))
        };
        let metrics = if rec[9].is_empty() {
            None
        } else {
            Some(MetricsRecord {
                ta1: num(8)?,
                ta2: num(9)?,
                ta_mean: num(10)?,
                ic: num(11)?,
                bc: num(12)?,
                turning_frame: if rec[13].is_empty() {
                    None
                } else {
                    Some(num(13)? as usize)
                },
                occupancy2: num(14)?,
            })
        };
        let view = match &rec[4] {
            "first" => View::First,
            "third" => View::Third,
            v => return Err(bad(path, line, format!("unknown view {v:?}"))),
        };
        out.push(RunRecord {
            run_id: rec[0].to_string(),
            mode: rec[1].parse::<SweepMode>().map_err(|e| bad(path, line, e))?,
            category: rec[2].parse().map_err(|e| bad(path, line, e))?,
            prompt_id: rec[3].to_string(),
            view,
            x: num(5)?,
            setting: rec[6].parse().map_err(|_| bad(path, line, "bad setting"))?,
            seed: rec[7].parse().map_err(|_| bad(path, line, "bad seed"))?,
            error: metrics.is_none().then(|| "failed".to_string()),
            metrics,
            wall_time_ms: num(15)?,
        });
    }
    Ok(out)
}

/// One row per frame: `frame,x,y,id_0..,bg_0..`.
pub fn write_frames_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    let d = traj.feature_dim();
    let mut header = vec!["frame".to_string(), "x".into(), "y".into()];
    header.extend((0..d).map(|i| format!("id_{i}")));
    header.extend((0..d).map(|i| format!("bg_{i}")));
    w.write_record(&header)?;
    for f in 0..traj.frames() {
        let mut row = vec![f.to_string()];
        row.extend(traj.frame(f).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .flush()?;
    Ok(())
}
