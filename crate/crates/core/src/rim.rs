//! RIM₁ curves (mean error under dephasing), the derivative check at zero
//! strength, and the δ-selection rank-correlation map.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dephasing::StrengthGrid;
use crate::dynamics::ErrorGrid;
use crate::error::{Error, Result};
use crate::sensitivity::SensitivityRecord;
use crate::stats::kendall_tau;

/// Strength at which single-number RIM₁ comparisons are made.
pub const REPRESENTATIVE_DELTA: f64 = 0.05;

/// Bound on the derivative check.
pub const THEOREM1_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RimCurve {
    pub controller_id: String,
    pub grid: StrengthGrid,
    /// RIM₁(δ(n)).
    pub values: Vec<f64>,
    /// RIM₁(δ(n)) − e(T).
    pub adjusted: Vec<f64>,
}

/// Row means of the error grid. Row 0 is constant, so RIM₁(0) is e(T) exactly.
pub fn rim1_curve(grid: &ErrorGrid) -> RimCurve {
    let values = grid.row_means();
    let nominal = values[0];
    let adjusted = values.iter().map(|v| v - nominal).collect();
    RimCurve {
        controller_id: grid.controller_id.clone(),
        grid: grid.grid,
        values,
        adjusted,
    }
}

impl RimCurve {
    pub fn nominal_error(&self) -> f64 {
        self.values[0]
    }

    /// RIM₁ at the grid point nearest `delta`.
    pub fn at(&self, delta: f64) -> f64 {
        self.values[self.grid.nearest_index(delta)]
    }

    pub fn adjusted_at(&self, delta: f64) -> f64 {
        self.adjusted[self.grid.nearest_index(delta)]
    }

    /// CSV columns: delta, rim1, adjusted.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["delta", "rim1", "adjusted"])?;
        for (n, (v, a)) in self.values.iter().zip(&self.adjusted).enumerate() {
            out.write_record([self.grid.delta(n).to_string(), v.to_string(), a.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("rim csv", e))?;
        Ok(())
    }

    /// Reads a curve written by [`Self::write_csv`] on the given grid.
    pub fn read_csv<R: Read>(controller_id: &str, grid: StrengthGrid, r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut values = Vec::with_capacity(grid.len());
        let mut adjusted = Vec::with_capacity(grid.len());
        for (n, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("expected 3 columns, got {}", rec.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let delta = num(&rec[0])?;
            if n >= grid.len() || (delta - grid.delta(n)).abs() > 1e-12 {
                return Err(Error::Format(format!(
                    "{controller_id}: row {n} (delta {delta}) does not match the strength grid"
                )));
            }
            values.push(num(&rec[1])?);
            adjusted.push(num(&rec[2])?);
        }
        if values.len() != grid.len() {
            return Err(Error::Format(format!(
                "{controller_id}: {} rows for a grid of {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            controller_id: controller_id.to_string(),
            grid,
            values,
            adjusted,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub zeta_a: f64,
    /// RIM̃₁(δ(1)) / δ(1).
    pub forward_difference: f64,
    /// Relative error, or the absolute difference when ζ_a = 0.
    pub error: f64,
    pub relative: bool,
}

impl Theorem1Check {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.error <= tolerance
    }
}

/// Compares the mean analytic differential sensitivity with the forward
/// difference of RIM₁ at the first grid step.
pub fn theorem1_check(record: &SensitivityRecord, curve: &RimCurve) -> Result<Theorem1Check> {
    if curve.values.len() < 2 {
        return Err(Error::InvalidArgument("RIM curve has no δ > 0 point".into()));
    }
    let step = curve.grid.delta(1);
    let forward_difference = curve.adjusted[1] / step;
    let diff = (record.zeta_a - forward_difference).abs();
    let (error, relative) = if record.zeta_a == 0.0 {
        (diff, false)
    } else {
        (diff / record.zeta_a.abs(), true)
    };
    Ok(Theorem1Check {
        zeta_a: record.zeta_a,
        forward_difference,
        error,
        relative,
    })
}

/// `count` log-spaced strengths on [lo, hi].
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default heat-map axis: 20 log-spaced points over [0.005, 0.1].
pub fn default_selection_deltas() -> Vec<f64> {
    log_spaced(0.005, 0.1, 20)
}

/// τ between controller rankings at each pair of strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct TauHeatMap {
    pub deltas: Vec<f64>,
    /// Row-major; NaN where τ is undefined (a constant ranking).
    pub tau: Vec<f64>,
}

impl TauHeatMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.tau[i * self.deltas.len() + j]
    }

    /// Header `delta,<δ_1>,...`; each row starts with its δ.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["delta".to_string()];
        header.extend(self.deltas.iter().map(|d| d.to_string()));
        out.write_record(&header)?;
        for (i, d) in self.deltas.iter().enumerate() {
            let mut row = vec![d.to_string()];
            row.extend((0..self.deltas.len()).map(|j| self.get(i, j).to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("heat map csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        let deltas = reader
            .headers()?
            .iter()
            .skip(1)
            .map(num)
            .collect::<Result<Vec<_>>>()?;
        let mut tau = Vec::with_capacity(deltas.len() * deltas.len());
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != deltas.len() + 1 {
                return Err(Error::Format("ragged heat-map row".into()));
            }
            for v in rec.iter().skip(1) {
                tau.push(num(v)?);
            }
        }
        if tau.len() != deltas.len() * deltas.len() {
            return Err(Error::Format("heat map is not square".into()));
        }
        Ok(Self { deltas, tau })
    }
}

fn column_at(curves: &[RimCurve], delta: f64) -> Vec<f64> {
    curves.iter().map(|c| c.at(delta)).collect()
}

/// Kendall τ(RIM₁(δ₁), RIM₁(δ₂)) across controllers for every pair in `deltas`.
pub fn rim_delta_selection(curves: &[RimCurve], deltas: &[f64]) -> Result<TauHeatMap> {
    if curves.len() < 2 {
        return Err(Error::InvalidArgument("δ selection needs at least two controllers".into()));
    }
    let columns: Vec<Vec<f64>> = deltas.iter().map(|&d| column_at(curves, d)).collect();
    let m = deltas.len();
    let tau = (0..m * m)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            kendall_tau(&columns[i], &columns[j]).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(TauHeatMap {
        deltas: deltas.to_vec(),
        tau,
    })
}

/// τ(RIM₁(anchor), RIM₁(δ₂)) for each δ₂.
pub fn delta_selection_profile(curves: &[RimCurve], anchor: f64, deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    if curves.len() < 2 {
        return Err(Error::InvalidArgument("δ selection needs at least two controllers".into()));
    }
    let base = column_at(curves, anchor);
    Ok(deltas
        .iter()
        .map(|&d| (d, kendall_tau(&base, &column_at(curves, d)).unwrap_or(f64::NAN)))
        .collect())
}
