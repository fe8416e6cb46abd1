//! End-to-end evaluation of controller sets and the cross-controller analysis.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dephasing::{generate_set, hamiltonian_hash, StrengthGrid, DEFAULT_SET_SIZE};
use crate::dynamics::{compute_error_grid, ErrorGrid, SpectralTransfer};
use crate::error::{Error, Result};
use crate::network::{build_hamiltonian, Controller, SpinNetwork, Topology};
use crate::optimizer::{Algorithm, ControllerSet, TransferProblem};
use crate::rim::{
    default_selection_deltas, rim1_curve, rim_delta_selection, theorem1_check, RimCurve, TauHeatMap,
    Theorem1Check, REPRESENTATIVE_DELTA,
};
use crate::sensitivity::{evaluate_sensitivity, smooth_mean_error, SensitivityRecord};
use crate::stats::{
    concordance_suite, tradeoff_suite, ControllerMeasures, HypothesisSuite, MeasureGroup, ADJUSTED_MEASURES,
    DEFAULT_ALPHA, RAW_MEASURES,
};

/// The transfer problems of the study: every target for chains and rings of
/// 5 and 6 spins, plus the 6-ring 1→4 transfer.
pub fn default_problems() -> Vec<TransferProblem> {
    let mut problems = TransferProblem::enumerate(&[5, 6], &[Topology::Chain, Topology::Ring])
        .expect("built-in problems are valid");
    problems.push(TransferProblem::new(6, Topology::Ring, 4).expect("valid"));
    problems
}

/// A problem solved by one scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub problem: TransferProblem,
    pub algorithm: Algorithm,
}

impl ProblemSpec {
    pub fn id(&self) -> String {
        format!("{}-{}", self.problem, self.algorithm)
    }

    /// Every default problem under every scheme.
    pub fn defaults() -> Vec<Self> {
        default_problems()
            .into_iter()
            .flat_map(|problem| Algorithm::ALL.map(|algorithm| Self { problem, algorithm }))
            .collect()
    }
}

impl std::str::FromStr for ProblemSpec {
    type Err = Error;
    /// `ring:6:4:A` or `ring-6-4-A`; without a scheme letter, scheme A.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split([':', '-']).collect();
        match parts.len() {
            3 => Ok(Self {
                problem: parts.join(":").parse()?,
                algorithm: Algorithm::A,
            }),
            4 => Ok(Self {
                problem: parts[..3].join(":").parse()?,
                algorithm: parts[3].parse()?,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "problem {s:?} is not of the form topology:N:OUT[:scheme]"
            ))),
        }
    }
}

/// Parses a comma-separated problem list. An entry without a scheme expands to all three.
pub fn parse_problem_list(list: &str) -> Result<Vec<ProblemSpec>> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item.split([':', '-']).count() == 3 {
            let problem: TransferProblem = item.parse()?;
            out.extend(Algorithm::ALL.map(|algorithm| ProblemSpec { problem, algorithm }));
        } else {
            out.push(item.parse()?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("empty problem list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub dephasing_seed: u64,
    pub ops: usize,
    pub grid: StrengthGrid,
}

impl EvaluationConfig {
    pub fn new(dephasing_seed: u64) -> Self {
        Self {
            dephasing_seed,
            ops: DEFAULT_SET_SIZE,
            grid: StrengthGrid::default(),
        }
    }
}

/// Everything derived from one controller's error grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvaluation {
    pub controller_id: String,
    pub hamiltonian_hash: String,
    pub dephasing_seed: u64,
    pub record: SensitivityRecord,
    pub theorem1: Theorem1Check,
    pub clamped: usize,
    /// Spline and five-point slopes agree within 5%.
    pub stencil_agrees: bool,
    #[serde(skip)]
    pub curve: Option<RimCurve>,
}

impl ControllerEvaluation {
    pub fn curve(&self) -> &RimCurve {
        self.curve.as_ref().expect("evaluation carries its RIM curve")
    }

    pub fn measures(&self) -> ControllerMeasures {
        let curve = self.curve();
        let r = &self.record;
        let keep_log = !r.degenerate();
        ControllerMeasures {
            e_t: r.e_t,
            s_a: r.s_a.filter(|_| keep_log),
            s_k: r.s_k.filter(|_| keep_log),
            rim1: curve.at(REPRESENTATIVE_DELTA),
            zeta_a: r.zeta_a,
            zeta_k: r.zeta_k,
            rim1_adjusted: curve.adjusted_at(REPRESENTATIVE_DELTA),
        }
    }
}

/// Error grid, RIM₁ curve, sensitivities and the derivative check for one controller.
pub fn evaluate_controller(
    net: &SpinNetwork,
    ctrl: &Controller,
    controller_id: &str,
    config: &EvaluationConfig,
) -> Result<(ControllerEvaluation, ErrorGrid)> {
    ctrl.validate(net)?;
    let ham = build_hamiltonian(net, ctrl)?;
    let transfer = SpectralTransfer::new(&ham, ctrl)?;
    let set = generate_set(&ham, config.ops, config.dephasing_seed)?;
    let grid = compute_error_grid(&transfer, &set, &config.grid, controller_id)?;
    let curve = rim1_curve(&grid);
    let record = evaluate_sensitivity(controller_id, &transfer, &set, &grid)?;
    let theorem1 = theorem1_check(&record, &curve)?;
    let stencil_agrees = smooth_mean_error(&grid)?.stencil_agrees();
    Ok((
        ControllerEvaluation {
            controller_id: controller_id.to_string(),
            hamiltonian_hash: hamiltonian_hash(&ham),
            dephasing_seed: config.dephasing_seed,
            record,
            theorem1,
            clamped: grid.clamped,
            stencil_agrees,
            curve: Some(curve),
        },
        grid,
    ))
}

/// Evaluates every controller of a set in parallel; grids are dropped.
pub fn evaluate_set(set: &ControllerSet, config: &EvaluationConfig) -> Result<Vec<ControllerEvaluation>> {
    let net = set.problem.network()?;
    set.controllers
        .par_iter()
        .enumerate()
        .map(|(i, c)| evaluate_controller(&net, c, &set.controller_id(i), config).map(|(e, _)| e))
        .collect()
}

/// Evaluations of one controller set, in set order.
#[derive(Debug, Clone)]
pub struct EvaluatedSet {
    pub spec: ProblemSpec,
    pub evaluations: Vec<ControllerEvaluation>,
}

impl EvaluatedSet {
    pub fn measure_group(&self) -> MeasureGroup {
        MeasureGroup {
            problem: self.spec.problem.to_string(),
            algorithm: self.spec.algorithm.to_string(),
            controllers: self.evaluations.iter().map(|e| e.measures()).collect(),
        }
    }

    pub fn curves(&self) -> Vec<RimCurve> {
        self.evaluations.iter().map(|e| e.curve().clone()).collect()
    }

    pub fn worst_theorem1(&self) -> f64 {
        self.evaluations
            .iter()
            .map(|e| e.theorem1.error)
            .fold(0.0, f64::max)
    }

    /// (δ, RIM₁ per controller) rows: controllers ranked by e(T) as columns.
    pub fn write_rim_matrix<W: Write>(&self, stride: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["delta".to_string()];
        header.extend(self.evaluations.iter().map(|e| e.controller_id.clone()));
        out.write_record(&header)?;
        let curves = self.curves();
        let grid = curves[0].grid;
        for n in (0..grid.len()).step_by(stride.max(1)) {
            let mut row = vec![grid.delta(n).to_string()];
            row.extend(curves.iter().map(|c| c.values[n].to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("rim matrix", e))?;
        Ok(())
    }

    /// Per-controller measures in controller-index order.
    pub fn write_measure_series<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "index", "controller_id", "e_T", "s_a", "s_k", "rim1", "zeta_a", "zeta_k", "rim1_adj",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, e) in self.evaluations.iter().enumerate() {
            let m = e.measures();
            out.write_record([
                i.to_string(),
                e.controller_id.clone(),
                m.e_t.to_string(),
                opt(m.s_a),
                opt(m.s_k),
                m.rim1.to_string(),
                m.zeta_a.to_string(),
                m.zeta_k.to_string(),
                m.rim1_adjusted.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("measure series", e))?;
        Ok(())
    }

    /// Adjusted RIM₁ against δ, one row per controller in ascending ζ_a.
    pub fn write_adjusted_by_zeta<W: Write>(&self, stride: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let grid = self.evaluations[0].curve().grid;
        let idx: Vec<usize> = (0..grid.len()).step_by(stride.max(1)).collect();
        let mut header = vec!["controller_id".to_string(), "zeta_a".to_string()];
        header.extend(idx.iter().map(|&n| grid.delta(n).to_string()));
        out.write_record(&header)?;
        let mut order: Vec<&ControllerEvaluation> = self.evaluations.iter().collect();
        order.sort_by(|a, b| a.record.zeta_a.total_cmp(&b.record.zeta_a));
        for e in order {
            let mut row = vec![e.controller_id.clone(), e.record.zeta_a.to_string()];
            row.extend(idx.iter().map(|&n| e.curve().adjusted[n].to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("adjusted by zeta", e))?;
        Ok(())
    }
}

/// Hypothesis suites and δ-selection maps over all evaluated sets.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub concordance: HypothesisSuite,
    pub concordance_adjusted: HypothesisSuite,
    pub tradeoff: HypothesisSuite,
    pub tradeoff_adjusted: HypothesisSuite,
    /// (set id, heat map).
    pub heat_maps: Vec<(String, TauHeatMap)>,
}

pub fn analyze(sets: &[EvaluatedSet], selection_deltas: Option<&[f64]>) -> Result<Analysis> {
    let groups: Vec<MeasureGroup> = sets.iter().map(EvaluatedSet::measure_group).collect();
    let default_axis = default_selection_deltas();
    let axis = selection_deltas.unwrap_or(&default_axis);
    let heat_maps = sets
        .iter()
        .map(|s| rim_delta_selection(&s.curves(), axis).map(|m| (s.spec.id(), m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        concordance: concordance_suite(&groups, &RAW_MEASURES, DEFAULT_ALPHA)?,
        concordance_adjusted: concordance_suite(&groups, &ADJUSTED_MEASURES, DEFAULT_ALPHA)?,
        tradeoff: tradeoff_suite(&groups, &RAW_MEASURES, DEFAULT_ALPHA)?,
        tradeoff_adjusted: tradeoff_suite(&groups, &ADJUSTED_MEASURES, DEFAULT_ALPHA)?,
        heat_maps,
    })
}
