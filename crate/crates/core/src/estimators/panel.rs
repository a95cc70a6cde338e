use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::Trajectory;
use crate::system::DataRecord;

/// Estimation view of one period: (X_t, A_t, D_{t-m:t-1}, Y_{t:t+H}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub replication: u64,
    pub t: usize,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    /// D_{t-m:t-1} stacked oldest first, each record as (x, a, y).
    pub history: Vec<f64>,
    /// Y_{t+h} for h = 0..=H (selected outcome coordinate).
    pub leads: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelOptions {
    pub max_h: usize,
    pub history_lags: usize,
    /// Which outcome coordinate feeds the leads.
    pub outcome: usize,
}

impl Default for PanelOptions {
    fn default() -> Self {
        PanelOptions {
            max_h: 0,
            history_lags: 1,
            outcome: 0,
        }
    }
}

/// Pooled estimation rows. Rows without a full history window or without
/// every lead up to `max_h` are dropped and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub rows: Vec<PanelRow>,
    pub options: PanelOptions,
    /// (dx, da, dy)
    pub dims: (usize, usize, usize),
    pub dropped: usize,
    /// Seeds of the source trajectories.
    pub seeds: Vec<u64>,
}

impl Panel {
    pub fn from_trajectory(traj: &Trajectory, options: PanelOptions) -> Result<Self> {
        Self::from_trajectories(std::slice::from_ref(traj), options)
    }

    pub fn from_trajectories(trajs: &[Trajectory], options: PanelOptions) -> Result<Self> {
        let first = trajs
            .iter()
            .find_map(|t| t.records.first())
            .ok_or_else(|| Error::InvalidArgument("no records to build a panel from".into()))?;
        let dims = (first.x.len(), first.a.len(), first.y.len());
        if options.outcome >= dims.2 {
            return Err(Error::dim("outcome coordinate", dims.2, options.outcome));
        }
        let m = options.history_lags;
        let mut rows = Vec::new();
        let mut dropped = 0;
        for traj in trajs {
            let n = traj.records.len();
            for i in 0..n {
                if i < m || i + options.max_h >= n {
                    dropped += 1;
                    continue;
                }
                let r = &traj.records[i];
                let history = traj.records[i - m..i].iter().flat_map(|d| d.stacked()).collect();
                let leads = (0..=options.max_h).map(|h| traj.records[i + h].y[options.outcome]).collect();
                rows.push(PanelRow {
                    replication: traj.replication,
                    t: i + 1,
                    x: r.x.clone(),
                    a: r.a.clone(),
                    history,
                    leads,
                });
            }
        }
        Ok(Panel {
            rows,
            options,
            dims,
            dropped,
            seeds: trajs.iter().map(|t| t.seed).collect::<BTreeSet<_>>().into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_replications(&self) -> usize {
        self.rows.iter().map(|r| r.replication).collect::<BTreeSet<_>>().len()
    }

    pub fn check_h(&self, h: usize) -> Result<()> {
        if h > self.options.max_h {
            return Err(Error::InvalidArgument(format!(
                "horizon {h} exceeds panel leads {}",
                self.options.max_h
            )));
        }
        Ok(())
    }

    pub fn y(&self, h: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.leads[h]).collect()
    }

    /// History window of a row as records (t fields are relative lags).
    pub fn history_records(&self, row: &PanelRow) -> Vec<DataRecord> {
        let (dx, da, dy) = self.dims;
        let w = dx + da + dy;
        row.history
            .chunks(w)
            .enumerate()
            .map(|(k, c)| DataRecord {
                t: row.t as i64 - self.options.history_lags as i64 + k as i64,
                x: c[..dx].to_vec(),
                a: c[dx..dx + da].to_vec(),
                y: c[dx + da..].to_vec(),
            })
            .collect()
    }

    /// Distinct assignment values in first-appearance order.
    pub fn assignment_atoms(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.a) {
                out.push(r.a.clone());
            }
        }
        out
    }

    fn header(&self) -> Vec<String> {
        let (dx, da, dy) = self.dims;
        let mut h = vec!["rep".to_string(), "t".to_string()];
        h.extend((0..dx).map(|j| format!("x{j}")));
        h.extend((0..da).map(|j| format!("a{j}")));
        h.extend((0..self.options.history_lags * (dx + da + dy)).map(|j| format!("d{j}")));
        h.extend((0..=self.options.max_h).map(|j| format!("y_h{j}")));
        h
    }

    /// CSV with columns rep, t, x*, a*, d* (history), y_h* (leads).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.replication.to_string(), r.t.to_string()];
            rec.extend(r.x.iter().chain(&r.a).chain(&r.history).chain(&r.leads).map(|v| format!("{v}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format of [`Panel::write_csv`]. The outcome dimension and
    /// history length cannot be recovered from the header alone and are given.
    pub fn read_csv<R: Read>(r: R, dy: usize, options: PanelOptions) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let count = |prefix: &str| {
            headers
                .iter()
                .filter(|h| h.starts_with(prefix) && h[prefix.len()..].chars().all(|c| c.is_ascii_digit()))
                .count()
        };
        let dx = count("x");
        let da = count("a");
        let nd = count("d");
        let nh = count("y_h");
        if nh != options.max_h + 1 || nd != options.history_lags * (dx + da + dy) {
            return Err(Error::Io("panel header does not match the declared options".into()));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Io("short panel row".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::Io(e.to_string()))
            };
            let replication = rec.get(0).unwrap_or("").parse().map_err(|_| Error::Io("bad rep".into()))?;
            let t = rec.get(1).unwrap_or("").parse().map_err(|_| Error::Io("bad t".into()))?;
            let mut k = 2;
            let mut take = |n: usize| -> Result<Vec<f64>> {
                let v = (k..k + n).map(num).collect::<Result<Vec<_>>>()?;
                k += n;
                Ok(v)
            };
            rows.push(PanelRow {
                replication,
                t,
                x: take(dx)?,
                a: take(da)?,
                history: take(nd)?,
                leads: take(nh)?,
            });
        }
        Ok(Panel {
            rows,
            options,
            dims: (dx, da, dy),
            dropped: 0,
            seeds: vec![],
        })
    }

    /// Sub-panel with the given rows, keeping metadata.
    pub fn with_rows(&self, rows: Vec<PanelRow>) -> Self {
        Panel {
            rows,
            options: self.options,
            dims: self.dims,
            dropped: self.dropped,
            seeds: self.seeds.clone(),
        }
    }
}
