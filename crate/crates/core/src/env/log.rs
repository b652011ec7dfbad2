//! Line-delimited JSON trajectory log, one record per agent per tick.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::reward::RewardTerms;
use super::TerminationCause;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub agent: usize,
    pub p: [f64; 3],
    /// Scalar-first quaternion.
    pub q: [f64; 4],
    pub v: [f64; 3],
    pub omega: [f64; 3],
    /// Collective (m/s^2) followed by body-rate command (rad/s).
    pub action: [f64; 4],
    pub terms: RewardTerms,
    pub reward: f64,
    pub gates_passed: usize,
    pub passed_gate: bool,
    pub contact: bool,
    pub event: Option<TerminationCause>,
}

pub struct TrajectoryWriter<W: Write> {
    out: W,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &TickRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_all<'a>(&mut self, records: impl IntoIterator<Item = &'a TickRecord>) -> Result<()> {
        for r in records {
            self.write(r)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trajectory<R: BufRead>(input: R) -> Result<Vec<TickRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("trajectory line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
