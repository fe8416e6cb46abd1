//! Log-sensitivity and differential sensitivity of the transfer error to
//! dephasing, analytically and from smoothed Monte-Carlo means.

use std::io::{Read, Write};

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dephasing::{DephasingOp, DephasingSet};
use crate::dynamics::{ErrorGrid, SpectralTransfer};
use crate::error::{Error, Result};
use crate::kde::ErrorDensity;
use crate::linalg::{exact_mean, expm};
use crate::liouville::LiouvilleSystem;
use crate::spline::{one_sided_derivative, SmoothingSpline};

/// Below this nominal error the log-sensitivity is undefined.
pub const LOG_SENSITIVITY_FLOOR: f64 = 1e-12;
/// Below this nominal error a controller is left out of log-sensitivity statistics.
pub const DEGENERATE_ERROR: f64 = 1e-10;

const SPLINE_STENCIL_AGREEMENT: f64 = 0.05;

/// ζ = −c·exp(TA)·(T S)·r0 by matrix exponential.
pub fn differential_sensitivity(sys: &LiouvilleSystem, s: &DMatrix<f64>, t: f64) -> f64 {
    let row = expm(&(&sys.a * t)).transpose() * &sys.c;
    -t * row.dot(&(s * &sys.r0))
}

/// s = ζ / e(T), with the commutation check that licenses the closed form.
pub fn analytic_log_sensitivity(sys: &LiouvilleSystem, s: &DMatrix<f64>, t: f64) -> Result<f64> {
    let comm = (&sys.a * s - s * &sys.a).amax();
    if comm > 1e-10 * sys.a.amax().max(1.0) * s.amax().max(1.0) {
        return Err(Error::InvalidModel(format!(
            "dephasing superoperator does not commute with A (|[A,S]| = {comm:e})"
        )));
    }
    let propagator = expm(&(&sys.a * t));
    let e = 1.0 - sys.c.dot(&(&propagator * &sys.r0));
    if e < LOG_SENSITIVITY_FLOOR {
        return Err(Error::DegenerateController(e));
    }
    let zeta = -t * (propagator.transpose() * &sys.c).dot(&(s * &sys.r0));
    Ok(zeta / e)
}

/// Spectral-route log-sensitivity for one operator.
pub fn log_sensitivity(transfer: &SpectralTransfer, op: &DephasingOp) -> Result<f64> {
    let e = transfer.nominal_error()?;
    if e < LOG_SENSITIVITY_FLOOR {
        return Err(Error::DegenerateController(e));
    }
    Ok(transfer.differential_sensitivity(op)? / e)
}

/// Smoothing-spline fit to the per-δ mean errors.
#[derive(Debug, Clone)]
pub struct MeanErrorFit {
    pub deltas: Vec<f64>,
    pub means: Vec<f64>,
    pub spline: SmoothingSpline,
    /// dê/dδ at 0 from the spline.
    pub slope: f64,
    /// Five-point one-sided estimate on the raw means.
    pub stencil_slope: f64,
}

impl MeanErrorFit {
    pub fn stencil_agrees(&self) -> bool {
        let scale = self.slope.abs().max(self.stencil_slope.abs());
        scale == 0.0 || (self.slope - self.stencil_slope).abs() <= SPLINE_STENCIL_AGREEMENT * scale
    }
}

/// ê(T; S, δ): row means of the KDE error distributions, smoothed by a GCV spline.
pub fn smooth_mean_error(grid: &ErrorGrid) -> Result<MeanErrorFit> {
    let deltas = grid.grid.values();
    let means = (0..grid.rows())
        .map(|n| ErrorDensity::estimate(grid.row(n)).map(|d| d.mean()))
        .collect::<Result<Vec<_>>>()?;
    let spline = SmoothingSpline::fit_gcv(&deltas, &means)?;
    let slope = spline.derivative(0.0);
    let stencil_slope = if deltas.len() >= 5 {
        one_sided_derivative(&deltas, &means)?
    } else {
        slope
    };
    let fit = MeanErrorFit {
        deltas,
        means,
        spline,
        slope,
        stencil_slope,
    };
    if !fit.stencil_agrees() {
        warn!(
            "{}: spline slope {:.6e} and stencil slope {:.6e} differ by more than {}%",
            grid.controller_id,
            fit.slope,
            fit.stencil_slope,
            SPLINE_STENCIL_AGREEMENT * 100.0
        );
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeSensitivity {
    pub s_k: f64,
    pub zeta_k: f64,
}

/// s_k = (1/e(T))·dê/dδ|₀ and ζ_k = dê/dδ|₀.
pub fn kde_log_sensitivity(grid: &ErrorGrid, nominal_error: f64) -> Result<KdeSensitivity> {
    if nominal_error < LOG_SENSITIVITY_FLOOR {
        return Err(Error::DegenerateController(nominal_error));
    }
    let zeta_k = smooth_mean_error(grid)?.slope;
    Ok(KdeSensitivity {
        s_k: zeta_k / nominal_error,
        zeta_k,
    })
}

/// Per-controller sensitivity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub controller_id: String,
    pub e_t: f64,
    /// `None` when the nominal error is too small for a log-sensitivity.
    pub s_a: Option<f64>,
    pub s_k: Option<f64>,
    pub zeta_a: f64,
    pub zeta_k: f64,
    #[serde(skip)]
    pub per_op_s: Vec<f64>,
    #[serde(skip)]
    pub per_op_zeta: Vec<f64>,
}

impl SensitivityRecord {
    /// Too close to perfect transfer for log-sensitivity statistics.
    pub fn degenerate(&self) -> bool {
        self.e_t < DEGENERATE_ERROR
    }
}

/// All sensitivities for one controller from its transfer kernel, dephasing set and error grid.
pub fn evaluate_sensitivity(
    controller_id: &str,
    transfer: &SpectralTransfer,
    set: &DephasingSet,
    grid: &ErrorGrid,
) -> Result<SensitivityRecord> {
    let e_t = transfer.nominal_error()?;
    let per_op_zeta = set
        .ops
        .par_iter()
        .map(|op| transfer.differential_sensitivity(op))
        .collect::<Result<Vec<_>>>()?;
    let zeta_a = exact_mean(&per_op_zeta);
    let fit = smooth_mean_error(grid)?;
    let zeta_k = fit.slope;

    let (s_a, s_k, per_op_s) = if e_t >= LOG_SENSITIVITY_FLOOR {
        let per_op_s: Vec<f64> = per_op_zeta.iter().map(|z| z / e_t).collect();
        (Some(exact_mean(&per_op_s)), Some(zeta_k / e_t), per_op_s)
    } else {
        (None, None, Vec::new())
    };
    Ok(SensitivityRecord {
        controller_id: controller_id.to_string(),
        e_t,
        s_a,
        s_k,
        zeta_a,
        zeta_k,
        per_op_s,
        per_op_zeta,
    })
}

/// CSV columns: controller_id, e_T, s_a, s_k, zeta_a, zeta_k (empty cell for undefined s).
pub fn write_records_csv<W: Write>(records: &[SensitivityRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["controller_id", "e_T", "s_a", "s_k", "zeta_a", "zeta_k"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        out.write_record([
            r.controller_id.clone(),
            r.e_t.to_string(),
            opt(r.s_a),
            opt(r.s_k),
            r.zeta_a.to_string(),
            r.zeta_k.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("sensitivity csv", e))?;
    Ok(())
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<SensitivityRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse(s).map(Some)
        }
    };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 6 {
            return Err(Error::Format(format!("expected 6 columns, got {}", row.len())));
        }
        records.push(SensitivityRecord {
            controller_id: row[0].to_string(),
            e_t: parse(&row[1])?,
            s_a: opt(&row[2])?,
            s_k: opt(&row[3])?,
            zeta_a: parse(&row[4])?,
            zeta_k: parse(&row[5])?,
            per_op_s: Vec::new(),
            per_op_zeta: Vec::new(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dephasing::{generate_set, StrengthGrid};
    use crate::dynamics::compute_error_grid;
    use crate::liouville::HermitianBasis;
    use crate::network::{build_hamiltonian, Controller, HamiltonianSS, SpinNetwork, Topology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case {
        ham: HamiltonianSS,
        basis: HermitianBasis,
        sys: LiouvilleSystem,
        transfer: SpectralTransfer,
        t: f64,
    }

    fn case(n: usize, topology: Topology, biases: Vec<f64>, t: f64, out: usize) -> Case {
        let net = SpinNetwork::new(n, topology).unwrap();
        let ctrl = Controller::new(biases, t, out);
        let ham = build_hamiltonian(&net, &ctrl).unwrap();
        let basis = HermitianBasis::new(n).unwrap();
        let sys = LiouvilleSystem::new(&ham, &basis, 1, out).unwrap();
        let transfer = SpectralTransfer::new(&ham, &ctrl).unwrap();
        Case {
            ham,
            basis,
            sys,
            transfer,
            t,
        }
    }

    #[test]
    fn zero_operator_has_zero_sensitivity() {
        let c = case(4, Topology::Chain, vec![0.0, 1.0, 0.5, 2.0], 3.0, 4);
        let s = DMatrix::zeros(16, 16);
        assert_eq!(analytic_log_sensitivity(&c.sys, &s, c.t).unwrap(), 0.0);
        assert_eq!(differential_sensitivity(&c.sys, &s, c.t), 0.0);
    }

    #[test]
    fn two_level_closed_form() {
        // e(δ) = ½ + ½cos(2T)e^{−δT}  ⇒  ζ = −½T cos(2T),  s = ζ / (½ + ½cos 2T).
        let t = 1.1;
        let c = case(2, Topology::Chain, vec![0.0, 0.0], t, 2);
        let op = DephasingOp::normalized(&c.ham, vec![0.0, 1.0]).unwrap().unwrap();
        let s = op.superoperator(&c.basis).unwrap();
        let zeta = -0.5 * t * (2.0 * t).cos();
        let e = 0.5 + 0.5 * (2.0 * t).cos();
        assert!((differential_sensitivity(&c.sys, &s, t) - zeta).abs() < 1e-13);
        assert!((analytic_log_sensitivity(&c.sys, &s, t).unwrap() - zeta / e).abs() < 1e-12);
        assert!((c.transfer.differential_sensitivity(&op).unwrap() - zeta).abs() < 1e-14);
    }

    #[test]
    fn perfect_transfer_is_degenerate() {
        let c = case(2, Topology::Chain, vec![0.0, 0.0], std::f64::consts::FRAC_PI_2, 2);
        let op = DephasingOp::normalized(&c.ham, vec![0.0, 1.0]).unwrap().unwrap();
        let s = op.superoperator(&c.basis).unwrap();
        assert!(matches!(
            analytic_log_sensitivity(&c.sys, &s, c.t),
            Err(Error::DegenerateController(_))
        ));
        assert!(matches!(log_sensitivity(&c.transfer, &op), Err(Error::DegenerateController(_))));
    }

    #[test]
    fn non_commuting_operator_is_rejected() {
        let c = case(3, Topology::Chain, vec![0.0, 1.0, 2.0], 2.0, 3);
        let mut v = DMatrix::zeros(3, 3);
        v[(0, 0)] = 1.0;
        let s = crate::liouville::dephasing_superop_real(&v, &c.basis).unwrap();
        assert!(matches!(
            analytic_log_sensitivity(&c.sys, &s, c.t),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn analytic_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let n = rng.gen_range(3..=6);
            let biases = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let topology = if rng.gen_bool(0.5) { Topology::Chain } else { Topology::Ring };
            let t = rng.gen_range(1.0..4.0 * n as f64);
            let out = rng.gen_range(2..=n);
            let c = case(n, topology, biases, t, out);
            let op = crate::dephasing::sample_dephasing_op(&c.ham, &mut rng).unwrap();
            let s = op.superoperator(&c.basis).unwrap();
            let h = 1e-6;
            let (plus, minus) = (
                crate::dynamics::lti_error(&c.sys, Some(&s), h, t),
                crate::dynamics::lti_error(&c.sys, Some(&s), -h, t),
            );
            let fd = (plus - minus) / (2.0 * h);
            let zeta = differential_sensitivity(&c.sys, &s, t);
            assert!((zeta - fd).abs() <= 1e-6 * zeta.abs().max(1e-3), "{zeta} vs {fd}");
            let e = 1.0 - c.sys.c.dot(&(expm(&(&c.sys.a * t)) * &c.sys.r0));
            let s_val = analytic_log_sensitivity(&c.sys, &s, t).unwrap();
            assert!((s_val * e - zeta).abs() < 1e-10 * zeta.abs().max(1.0));
            assert!((c.transfer.differential_sensitivity(&op).unwrap() - zeta).abs() < 1e-9);
        }
    }

    #[test]
    fn log_sensitivity_is_linear_in_operator() {
        let c = case(5, Topology::Ring, vec![0.3, 1.0, -2.0, 0.0, 4.0], 6.0, 3);
        let op = DephasingOp::normalized(&c.ham, vec![0.1, -1.0, 0.5, 2.0, 0.0]).unwrap().unwrap();
        let s = op.superoperator(&c.basis).unwrap();
        let base = analytic_log_sensitivity(&c.sys, &s, c.t).unwrap();
        let scaled = analytic_log_sensitivity(&c.sys, &(&s * 2.5), c.t).unwrap();
        assert!((scaled - 2.5 * base).abs() < 1e-10 * base.abs().max(1.0));
    }

    fn synthetic_grid(values: impl Fn(f64) -> f64) -> ErrorGrid {
        let grid = StrengthGrid::default();
        ErrorGrid {
            controller_id: "synthetic".into(),
            dim: 2,
            dephasing_seed: 0,
            grid,
            ops: 1,
            values: grid.values().into_iter().map(values).collect(),
            clamped: 0,
        }
    }

    #[test]
    fn smoothed_mean_of_linear_and_quadratic_curves() {
        let lin = smooth_mean_error(&synthetic_grid(|d| 0.1 + 0.5 * d)).unwrap();
        assert!((lin.slope - 0.5).abs() < 1e-6);
        assert!((lin.spline.value(0.0) - 0.1).abs() < 1e-6);
        let quad = smooth_mean_error(&synthetic_grid(|d| 0.1 + 0.5 * d + 3.0 * d * d)).unwrap();
        assert!((quad.slope - 0.5).abs() < 1e-3);
        assert!(quad.stencil_agrees());
    }

    #[test]
    fn single_operator_grid_recovers_analytic_value() {
        let c = case(5, Topology::Chain, vec![1.0, -0.5, 0.2, 2.0, -1.5], 7.0, 5);
        let set = generate_set(&c.ham, 1, 17).unwrap();
        let grid = compute_error_grid(&c.transfer, &set, &StrengthGrid::default(), "one").unwrap();
        let e = c.transfer.nominal_error().unwrap();
        let kde = kde_log_sensitivity(&grid, e).unwrap();
        let exact = log_sensitivity(&c.transfer, &set.ops[0]).unwrap();
        assert!((kde.s_k - exact).abs() <= 0.01 * exact.abs(), "{} vs {exact}", kde.s_k);
        assert!((kde.zeta_k - kde.s_k * e).abs() < 1e-15);
    }

    #[test]
    fn full_set_record_invariants_and_truncation() {
        let c = case(5, Topology::Ring, vec![0.0, 2.1, -0.3, 1.2, 0.7], 5.0, 3);
        let set = generate_set(&c.ham, 200, 5).unwrap();
        let strength = StrengthGrid::default();
        let grid = compute_error_grid(&c.transfer, &set, &strength, "r").unwrap();
        let rec = evaluate_sensitivity("r", &c.transfer, &set, &grid).unwrap();
        let s_a = rec.s_a.unwrap();
        assert_eq!(rec.per_op_s.len(), 200);
        assert!((s_a - exact_mean(&rec.per_op_s)).abs() == 0.0);
        assert!((rec.zeta_a - s_a * rec.e_t).abs() <= 1e-13 * rec.zeta_a.abs());
        assert!((rec.s_k.unwrap() - s_a).abs() <= 0.05 * s_a.abs());

        let short = strength.truncated(0.01).unwrap();
        let short_grid = compute_error_grid(&c.transfer, &set, &short, "r").unwrap();
        let short_k = kde_log_sensitivity(&short_grid, rec.e_t).unwrap().s_k;
        assert!((short_k - rec.s_k.unwrap()).abs() <= 0.02 * short_k.abs());
    }

    #[test]
    fn records_csv_round_trip() {
        let records = vec![
            SensitivityRecord {
                controller_id: "a".into(),
                e_t: 0.0123,
                s_a: Some(-1.5),
                s_k: Some(-1.49),
                zeta_a: -0.018_45,
                zeta_k: 0.1 + 0.2,
                per_op_s: Vec::new(),
                per_op_zeta: Vec::new(),
            },
            SensitivityRecord {
                controller_id: "b".into(),
                e_t: 1e-14,
                s_a: None,
                s_k: None,
                zeta_a: 3e-15,
                zeta_k: 2e-15,
                per_op_s: Vec::new(),
                per_op_zeta: Vec::new(),
            },
        ];
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("controller_id,e_T,s_a,s_k,zeta_a,zeta_k\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), records);
        assert!(records[1].degenerate() && !records[0].degenerate());
    }
}
