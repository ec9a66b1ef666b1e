//! Append-only CSV metric log: `step,split,name,value,wall_time`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HEADER: &str = "step,split,name,value,wall_time";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub step: u64,
    pub split: Split,
    pub name: String,
    pub value: f64,
    /// Seconds since the log was opened; 0 when wall time is not recorded.
    pub wall_time: f64,
}

pub struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
    started: Instant,
    record_wall_time: bool,
}

impl EventLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path, record_wall_time: bool) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            out,
            started: Instant::now(),
            record_wall_time,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, step: u64, split: Split, name: &str, value: f64) -> Result<()> {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Invalid(format!("metric name {name:?} cannot be written to CSV")));
        }
        let wall = if self.record_wall_time { self.started.elapsed().as_secs_f64() } else { 0.0 };
        writeln!(self.out, "{step},{},{name},{value},{wall}", split.as_str()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_events(path: &Path) -> Result<Vec<MetricEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 && line == HEADER || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Dataset(format!("{}:{}: malformed event line {line:?}", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let split = match f[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(bad()),
        };
        events.push(MetricEvent {
            step: f[0].parse().map_err(|_| bad())?,
            split,
            name: f[2].to_string(),
            value: f[3].parse().map_err(|_| bad())?,
            wall_time: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(events)
}

/// `(step, value)` series for one split and metric.
pub fn series(events: &[MetricEvent], split: Split, name: &str) -> Vec<(u64, f64)> {
    events
        .iter()
        .filter(|e| e.split == split && e.name == name)
        .map(|e| (e.step, e.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        {
            let mut log = EventLog::open(&path, false).unwrap();
            log.log(0, Split::Train, "loss", 0.5).unwrap();
            log.log(3, Split::Val, "accuracy", 0.125).unwrap();
            assert!(log.log(3, Split::Val, "a,b", 1.0).is_err());
        }
        {
            let mut log = EventLog::open(&path, false).unwrap();
            log.log(4, Split::Val, "accuracy", 0.25).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,split,name,value,wall_time\n0,train,loss,0.5,0\n3,val,accuracy,0.125,0\n4,val,accuracy,0.25,0\n");
        let ev = read_events(&path).unwrap();
        assert_eq!(ev.len(), 3);
        assert_eq!(series(&ev, Split::Val, "accuracy"), vec![(3, 0.125), (4, 0.25)]);
    }
}
