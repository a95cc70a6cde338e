use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{mean_variance, Panel, PanelRow};
use crate::error::{Error, Result};

/// Minimum first-stage difference accepted by [`iv_wald`].
pub const DEFAULT_RELEVANCE_FLOOR: f64 = 0.01;

/// Finite coarsening of the history used to form instrument cells. This is
/// an approximation to conditioning on the whole past.
#[derive(Clone, Default)]
pub enum Coarsening {
    /// (last assignment, sign of last outcome).
    #[default]
    LastAssignmentAndOutcomeSign,
    /// A single cell.
    None,
    Custom(Arc<dyn Fn(&PanelRow) -> i64 + Send + Sync>),
}

impl std::fmt::Debug for Coarsening {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coarsening::LastAssignmentAndOutcomeSign => write!(f, "last_assignment_and_outcome_sign"),
            Coarsening::None => write!(f, "none"),
            Coarsening::Custom(_) => write!(f, "custom"),
        }
    }
}

impl Coarsening {
    fn key(&self, panel: &Panel, row: &PanelRow) -> i64 {
        match self {
            Coarsening::None => 0,
            Coarsening::Custom(f) => f(row),
            Coarsening::LastAssignmentAndOutcomeSign => {
                let (dx, da, dy) = panel.dims;
                let w = dx + da + dy;
                if row.history.len() < w {
                    return 0;
                }
                let last = &row.history[row.history.len() - w..];
                let a = last[dx] as i64;
                let y_pos = i64::from(last[dx + da] > 0.0);
                2 * a + y_pos
            }
        }
    }
}

/// IV-Wald estimate with per-cell diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvEstimate {
    pub h: usize,
    pub point: f64,
    pub stderr: f64,
    pub n_obs: usize,
    /// (cell key, rows, first stage, reduced form, ratio)
    pub cells: Vec<(i64, usize, f64, f64, f64)>,
    pub coarsening: String,
}

struct Cell {
    idx: Vec<usize>,
    n1: usize,
    n0: usize,
    y1: f64,
    y0: f64,
    a1: f64,
    a0: f64,
}

/// Wald ratio of reduced form over first stage within history cells,
/// averaged with cell shares; delta-method standard error from the
/// influence series with a HAC (or replication clusters).
pub fn iv_wald(panel: &Panel, h: usize, coarsening: &Coarsening, floor: f64) -> Result<IvEstimate> {
    panel.check_h(h)?;
    if panel.dims.0 < 1 {
        return Err(Error::InvalidArgument("iv_wald needs a binary instrument in X".into()));
    }
    let mut cells: BTreeMap<i64, Cell> = BTreeMap::new();
    for (i, r) in panel.rows.iter().enumerate() {
        let c = cells.entry(coarsening.key(panel, r)).or_insert(Cell {
            idx: vec![],
            n1: 0,
            n0: 0,
            y1: 0.0,
            y0: 0.0,
            a1: 0.0,
            a0: 0.0,
        });
        c.idx.push(i);
        if r.x[0] > 0.5 {
            c.n1 += 1;
            c.y1 += r.leads[h];
            c.a1 += r.a[0];
        } else {
            c.n0 += 1;
            c.y0 += r.leads[h];
            c.a0 += r.a[0];
        }
    }
    let n = panel.len();
    let mut summary = Vec::new();
    let mut point = 0.0;
    for (key, c) in cells.iter_mut() {
        if c.n1 == 0 || c.n0 == 0 {
            return Err(Error::EmptyCell(format!("instrument cell {key} lacks one instrument value")));
        }
        c.y1 /= c.n1 as f64;
        c.y0 /= c.n0 as f64;
        c.a1 /= c.n1 as f64;
        c.a0 /= c.n0 as f64;
        let fs = c.a1 - c.a0;
        if !(fs > floor) {
            return Err(Error::WeakFirstStage { diff: fs, floor });
        }
        let rf = c.y1 - c.y0;
        let ratio = rf / fs;
        point += c.idx.len() as f64 / n as f64 * ratio;
        summary.push((*key, c.idx.len(), fs, rf, ratio));
    }
    let mut psi = vec![0.0; n];
    for (c, (_, _, fs, _, ratio)) in cells.values().zip(&summary) {
        let nc = c.idx.len() as f64;
        let (p1, p0) = (c.n1 as f64 / nc, c.n0 as f64 / nc);
        for &i in &c.idx {
            let r = &panel.rows[i];
            let (dy, da) = if r.x[0] > 0.5 {
                ((r.leads[h] - c.y1) / p1, (r.a[0] - c.a1) / p1)
            } else {
                (-(r.leads[h] - c.y0) / p0, -(r.a[0] - c.a0) / p0)
            };
            psi[i] = (dy - ratio * da) / fs + (ratio - point);
        }
    }
    let var = mean_variance(panel, &psi, h, None);
    Ok(IvEstimate {
        h,
        point,
        stderr: var.max(0.0).sqrt(),
        n_obs: n,
        cells: summary,
        coarsening: format!("{coarsening:?}"),
    })
}
