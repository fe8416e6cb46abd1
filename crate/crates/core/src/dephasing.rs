//! Pure-dephasing perturbations in the Hamiltonian eigenbasis.
//!
//! Each operator is V = Σ_k c_k Π_k over the (degeneracy-grouped) eigenspaces
//! of H_ss, so V commutes with the Hamiltonian and the Lindblad term
//! −½[V,[V,·]] damps the coherence between eigenspaces k and ℓ at rate
//! γ_kℓ = (c_k − c_ℓ)²/2. Operators are rescaled so the largest rate is 1,
//! which makes the strength δ the peak dephasing rate.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::liouville::{dephasing_superop_real, HermitianBasis, LiouvilleSystem};
use crate::network::HamiltonianSS;

pub const DEFAULT_SET_SIZE: usize = 1000;

#[derive(Debug, Clone)]
pub struct DephasingOp {
    /// One eigenvalue of V per eigenspace of H_ss, ascending-energy order.
    pub c: Vec<f64>,
    pub v: DMatrix<f64>,
    /// γ_kℓ between eigenspaces.
    pub rates: DMatrix<f64>,
}

impl DephasingOp {
    /// Builds V = Σ c_k Π_k without normalisation.
    pub fn from_eigenvalues(ham: &HamiltonianSS, c: Vec<f64>) -> Result<Self> {
        let spaces = ham.eigenspaces();
        if c.len() != spaces.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} dephasing eigenvalues (one per eigenspace), got {}",
                spaces.len(),
                c.len()
            )));
        }
        let n = ham.dim();
        let v = spaces
            .iter()
            .zip(&c)
            .fold(DMatrix::zeros(n, n), |acc, (s, &ck)| acc + &s.projector * ck);
        let rates = rates_from_eigenvalues(&c);
        Ok(Self { c, v, rates })
    }

    /// Centres the eigenvalues on zero and rescales them so max γ_kℓ = 1.
    /// Shifting V by a multiple of the identity leaves every rate unchanged,
    /// and the centred V keeps ‖V‖ small. `None` when all c_k coincide.
    pub fn normalized(ham: &HamiltonianSS, c: Vec<f64>) -> Result<Option<Self>> {
        let (lo, hi) = c
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let spread = hi - lo;
        if !(spread > 0.0 && spread.is_finite()) {
            return Ok(None);
        }
        let scale = std::f64::consts::SQRT_2 / spread;
        let mid = 0.5 * (lo + hi);
        Self::from_eigenvalues(ham, c.into_iter().map(|x| (x - mid) * scale).collect()).map(Some)
    }

    /// Wraps an arbitrary real symmetric V. Rates are read off the diagonal
    /// blocks of V in the eigenbasis; if V does not commute with H_ss the
    /// result fails [`validate_cp`].
    pub fn from_operator(ham: &HamiltonianSS, v: DMatrix<f64>) -> Result<Self> {
        if v.nrows() != ham.dim() || v.ncols() != ham.dim() {
            return Err(Error::InvalidArgument("V dimension does not match H_ss".into()));
        }
        let c: Vec<f64> = ham
            .eigenspaces()
            .iter()
            .map(|s| (&s.projector * &v).trace() / s.rank() as f64)
            .collect();
        let rates = rates_from_eigenvalues(&c);
        Ok(Self { c, v, rates })
    }

    /// Coherence-vector superoperator S (recomputed on demand).
    pub fn superoperator(&self, basis: &HermitianBasis) -> Result<DMatrix<f64>> {
        dephasing_superop_real(&self.v, basis)
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().fold(0.0, |m: f64, &g| m.max(g))
    }

    /// γ_kℓ for k < ℓ in lexicographic order.
    pub fn pair_rates(&self) -> Vec<f64> {
        let g = self.c.len();
        (0..g)
            .flat_map(|k| (k + 1..g).map(move |l| (k, l)))
            .map(|(k, l)| self.rates[(k, l)])
            .collect()
    }
}

fn rates_from_eigenvalues(c: &[f64]) -> DMatrix<f64> {
    let g = c.len();
    DMatrix::from_fn(g, g, |k, l| {
        let d = c[k] - c[l];
        0.5 * d * d
    })
}

/// Draw one operator: c_k i.i.d. standard normal per eigenspace, centred and
/// rescaled to unit peak rate. Degenerate draws (all equal) are redrawn.
pub fn sample_dephasing_op<R: Rng + ?Sized>(ham: &HamiltonianSS, rng: &mut R) -> Result<DephasingOp> {
    let g = ham.eigenspaces().len();
    if g < 2 {
        return Err(Error::InvalidModel(
            "H_ss has a single eigenspace; every eigenbasis dephasing operator is trivial".into(),
        ));
    }
    loop {
        let c: Vec<f64> = (0..g).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(op) = DephasingOp::normalized(ham, c)? {
            return Ok(op);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CpViolation {
    NegativeRate { k: usize, l: usize, rate: f64 },
    AsymmetricRates { k: usize, l: usize },
    NonzeroSelfRate { k: usize, rate: f64 },
    RateMismatch { k: usize, l: usize, rate: f64, expected: f64 },
    NotNegativeSemidefinite { max_eigenvalue: f64 },
    TraceNotPreserved { residual: f64 },
    NonCommuting { commutator_norm: f64 },
}

impl fmt::Display for CpViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CpViolation::NegativeRate { k, l, rate } => {
                write!(f, "negative rate γ[{k},{l}] = {rate}")
            }
            CpViolation::AsymmetricRates { k, l } => write!(f, "asymmetric rates at ({k},{l})"),
            CpViolation::NonzeroSelfRate { k, rate } => write!(f, "nonzero self rate γ[{k},{k}] = {rate}"),
            CpViolation::RateMismatch { k, l, rate, expected } => write!(
                f,
                "rate γ[{k},{l}] = {rate} inconsistent with eigenvalues (expected {expected})"
            ),
            CpViolation::NotNegativeSemidefinite { max_eigenvalue } => {
                write!(f, "superoperator not negative semidefinite (max eigenvalue {max_eigenvalue:e})")
            }
            CpViolation::TraceNotPreserved { residual } => {
                write!(f, "trace not preserved (|S·vec(I)| = {residual:e})")
            }
            CpViolation::NonCommuting { commutator_norm } => {
                write!(f, "dephasing does not commute with the Hamiltonian (|[A,S]| = {commutator_norm:e})")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CpReport {
    pub violations: Vec<CpViolation>,
}

impl CpReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_negative_rate(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, CpViolation::NegativeRate { .. }))
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidModel(msg.join("; ")))
        }
    }
}

/// Checks the complete-positivity structure of a pure-dephasing operator and
/// that it commutes with the Hamiltonian generator.
pub fn validate_cp(op: &DephasingOp, sys: &LiouvilleSystem, basis: &HermitianBasis) -> Result<CpReport> {
    let mut report = CpReport::default();
    let g = op.rates.nrows();
    for k in 0..g {
        let self_rate = op.rates[(k, k)];
        if self_rate != 0.0 {
            report.violations.push(CpViolation::NonzeroSelfRate { k, rate: self_rate });
        }
        for l in 0..g {
            let rate = op.rates[(k, l)];
            if k < l {
                if rate < 0.0 {
                    report.violations.push(CpViolation::NegativeRate { k, l, rate });
                }
                if rate != op.rates[(l, k)] {
                    report.violations.push(CpViolation::AsymmetricRates { k, l });
                }
                if op.c.len() == g {
                    let d = op.c[k] - op.c[l];
                    let expected = 0.5 * d * d;
                    if (rate - expected).abs() > 1e-12 * expected.max(1.0) {
                        report.violations.push(CpViolation::RateMismatch { k, l, rate, expected });
                    }
                }
            }
        }
    }

    let s = op.superoperator(basis)?;
    let scale = s.amax().max(1.0);
    let max_eig = s.clone().symmetric_eigenvalues().max();
    if max_eig > 1e-12 * scale {
        report
            .violations
            .push(CpViolation::NotNegativeSemidefinite { max_eigenvalue: max_eig });
    }
    let mut ident = DVector::zeros(s.nrows());
    ident[0] = 1.0;
    let residual = (&s * ident).amax();
    if residual > 1e-12 * scale {
        report.violations.push(CpViolation::TraceNotPreserved { residual });
    }
    let comm = (&sys.a * &s - &s * &sys.a).amax();
    if comm > 1e-10 * sys.a.amax().max(1.0) * scale {
        report
            .violations
            .push(CpViolation::NonCommuting { commutator_norm: comm });
    }
    Ok(report)
}

/// SHA-256 of the Hamiltonian matrix (dimension, then row-major little-endian entries).
pub fn hamiltonian_hash(ham: &HamiltonianSS) -> String {
    let m = ham.matrix();
    let mut hasher = Sha256::new();
    hasher.update((m.nrows() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            hasher.update(m[(r, c)].to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// A seeded family of dephasing operators bound to one Hamiltonian.
#[derive(Debug, Clone)]
pub struct DephasingSet {
    pub seed: u64,
    pub dim: usize,
    pub hamiltonian_hash: String,
    pub ops: Vec<DephasingOp>,
}

/// Generate `count` operators for `ham` from `seed`.
///
/// The random stream depends only on the seed and the number of eigenspaces,
/// so controllers with the same eigenspace count see the same eigenvalue
/// draws, each expressed in its own eigenbasis.
pub fn generate_set(ham: &HamiltonianSS, count: usize, seed: u64) -> Result<DephasingSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("dephasing set needs at least one operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = (0..count)
        .map(|_| sample_dephasing_op(ham, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DephasingSet {
        seed,
        dim: ham.dim(),
        hamiltonian_hash: hamiltonian_hash(ham),
        ops,
    })
}

#[derive(Serialize, Deserialize)]
struct OpRecord {
    c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    seed: u64,
    #[serde(rename = "N")]
    n: usize,
    hamiltonian_hash: String,
    ops: Vec<OpRecord>,
}

impl DephasingSet {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let record = SetRecord {
            seed: self.seed,
            n: self.dim,
            hamiltonian_hash: self.hamiltonian_hash.clone(),
            ops: self.ops.iter().map(|op| OpRecord { c: op.c.clone() }).collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    /// Parse a stored set and rebind it to `ham`; fails on a hash mismatch.
    pub fn from_json(json: &str, ham: &HamiltonianSS) -> Result<Self> {
        let record: SetRecord = serde_json::from_str(json)?;
        let hash = hamiltonian_hash(ham);
        if record.hamiltonian_hash != hash || record.n != ham.dim() {
            return Err(Error::InvalidModel(format!(
                "dephasing set was generated for Hamiltonian {} but the controller hashes to {hash}",
                record.hamiltonian_hash
            )));
        }
        let ops = record
            .ops
            .into_iter()
            .map(|r| DephasingOp::from_eigenvalues(ham, r.c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: record.seed,
            dim: record.n,
            hamiltonian_hash: record.hamiltonian_hash,
            ops,
        })
    }
}

/// Uniform dephasing-strength grid δ(n) = n·δ_max/steps, n = 0..=steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthGrid {
    pub delta_max: f64,
    pub steps: usize,
}

impl Default for StrengthGrid {
    fn default() -> Self {
        Self {
            delta_max: 0.1,
            steps: 1000,
        }
    }
}

impl StrengthGrid {
    pub fn new(delta_max: f64, steps: usize) -> Result<Self> {
        if !(delta_max.is_finite() && delta_max > 0.0) || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "strength grid needs delta_max > 0 and steps >= 1 (got {delta_max}, {steps})"
            )));
        }
        Ok(Self { delta_max, steps })
    }

    /// Number of grid points (steps + 1).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta(&self, n: usize) -> f64 {
        self.delta_max * n as f64 / self.steps as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|n| self.delta(n)).collect()
    }

    /// Index of the grid point closest to `delta`.
    pub fn nearest_index(&self, delta: f64) -> usize {
        let raw = (delta / self.delta_max * self.steps as f64).round();
        raw.clamp(0.0, self.steps as f64) as usize
    }

    /// Leading part of the grid up to `delta_max` (same spacing).
    pub fn truncated(&self, delta_max: f64) -> Result<Self> {
        let steps = self.nearest_index(delta_max);
        Self::new(self.delta(steps), steps)
    }
}
