//! Nominal and dephasing-perturbed transfer dynamics.
//!
//! Two independent routes are provided:
//!
//! * the coherence-vector LTI route, r(t) = exp(t(A + δS)) r0, using dense
//!   matrix exponentials ([`propagate_lti`], [`lti_error`]);
//! * the eigenprojector route, ρ(t) = Σ e^{−t(iω_kℓ + δγ_kℓ)} Π_k ρ0 Π_ℓ
//!   ([`propagate_eigen`]) and its scalar specialisation [`SpectralTransfer`],
//!   which is what the error grids are built from.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dephasing::{DephasingOp, DephasingSet, StrengthGrid};
use crate::error::{Error, Result};
use crate::linalg::{exact_mean, expm, sym_eigen, sym_expm, SymEigen, C64};
use crate::liouville::LiouvilleSystem;
use crate::network::{Controller, HamiltonianSS};

/// Errors within this distance outside [0, 1] are float noise and get clamped.
pub const ERROR_SLACK: f64 = 1e-9;

/// Relative commutator tolerance for the commuting fast path.
const COMMUTE_TOLERANCE: f64 = 1e-10;

/// Clamp a raw error into [0, 1]; the flag reports whether clamping happened.
pub fn checked_error(raw: f64) -> Result<(f64, bool)> {
    if (0.0..=1.0).contains(&raw) {
        Ok((raw, false))
    } else if raw >= -ERROR_SLACK && raw < 0.0 {
        Ok((0.0, true))
    } else if raw > 1.0 && raw <= 1.0 + ERROR_SLACK {
        Ok((1.0, true))
    } else {
        Err(Error::NumericalIntegrity(format!(
            "fidelity error {raw} outside [0, 1] beyond slack"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationPath {
    /// Commuting fast path when [A, S] ≈ 0, otherwise the full generator.
    Auto,
    /// exp(tA)·exp(tδS); fails if A and S do not commute.
    Commuting,
    /// Padé exponential of t(A + δS).
    FullGenerator,
}

/// Coherence-vector propagator for one (A, S) pair. Caches the eigensystem of S
/// so repeated (δ, t) evaluations need no further eigensolves.
pub struct LtiPropagator<'a> {
    a: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    s_eigen: SymEigen,
    commuting: bool,
}

impl<'a> LtiPropagator<'a> {
    pub fn new(a: &'a DMatrix<f64>, s: &'a DMatrix<f64>) -> Result<Self> {
        if a.shape() != s.shape() || a.nrows() != a.ncols() {
            return Err(Error::InvalidArgument("A and S must be square and of equal size".into()));
        }
        let comm = (a * s - s * a).amax();
        let commuting = comm <= COMMUTE_TOLERANCE * a.amax().max(1.0) * s.amax().max(1.0);
        Ok(Self {
            a,
            s,
            s_eigen: sym_eigen(s),
            commuting,
        })
    }

    pub fn commuting(&self) -> bool {
        self.commuting
    }

    pub fn propagate(&self, delta: f64, t: f64, r0: &DVector<f64>, path: PropagationPath) -> Result<DVector<f64>> {
        if !(delta >= 0.0 && t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "propagation needs delta >= 0 and t >= 0 (got {delta}, {t})"
            )));
        }
        if t == 0.0 {
            return Ok(r0.clone());
        }
        let fast = match path {
            PropagationPath::Auto => self.commuting,
            PropagationPath::Commuting if !self.commuting => {
                return Err(Error::InvalidModel(
                    "commuting propagation requested but [A, S] != 0".into(),
                ))
            }
            PropagationPath::Commuting => true,
            PropagationPath::FullGenerator => false,
        };
        if fast {
            let damped = sym_expm(&self.s_eigen, t * delta) * r0;
            Ok(expm(&(self.a * t)) * damped)
        } else {
            Ok(expm(&((self.a + self.s * delta) * t)) * r0)
        }
    }
}

/// r(t) = exp(t(A + δS)) r0.
pub fn propagate_lti(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    delta: f64,
    t: f64,
    r0: &DVector<f64>,
    path: PropagationPath,
) -> Result<DVector<f64>> {
    LtiPropagator::new(a, s)?.propagate(delta, t, r0, path)
}

/// 1 − c·exp(t(A + δS))·r0 by dense matrix exponential (no clamping).
pub fn lti_error(sys: &LiouvilleSystem, s: Option<&DMatrix<f64>>, delta: f64, t: f64) -> f64 {
    let generator = match s {
        Some(s) => &sys.a + s * delta,
        None => sys.a.clone(),
    };
    1.0 - sys.c.dot(&(expm(&(generator * t)) * &sys.r0))
}

/// Eigenvalues of V on the eigenspaces of H, or an error if V is not of the
/// form Σ c_k Π_k.
fn shared_eigenvalues(ham: &HamiltonianSS, v: &DMatrix<C64>) -> Result<Vec<f64>> {
    let n = ham.dim();
    if v.shape() != (n, n) {
        return Err(Error::InvalidArgument("V dimension does not match H_ss".into()));
    }
    let scale = v.norm().max(1.0);
    let mut rebuilt = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let mut c = Vec::with_capacity(ham.eigenspaces().len());
    for space in ham.eigenspaces() {
        let p = space.projector.map(|x| C64::new(x, 0.0));
        let ck = (&p * v).trace().re / space.rank() as f64;
        rebuilt += p * C64::new(ck, 0.0);
        c.push(ck);
    }
    if (&rebuilt - v).norm() > 1e-10 * scale {
        return Err(Error::InvalidArgument(
            "V does not share the eigenprojectors of H_ss".into(),
        ));
    }
    Ok(c)
}

/// ρ(t) = Σ_{kℓ} exp(−t(iω_kℓ + δγ_kℓ)) Π_k ρ0 Π_ℓ with γ_kℓ = (c_k − c_ℓ)²/2.
pub fn propagate_eigen(
    ham: &HamiltonianSS,
    v: &DMatrix<C64>,
    delta: f64,
    t: f64,
    rho0: &DMatrix<C64>,
) -> Result<DMatrix<C64>> {
    if !(delta >= 0.0 && t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "propagation needs delta >= 0 and t >= 0 (got {delta}, {t})"
        )));
    }
    let c = shared_eigenvalues(ham, v)?;
    let n = ham.dim();
    let projectors: Vec<DMatrix<C64>> = ham
        .eigenspaces()
        .iter()
        .map(|s| s.projector.map(|x| C64::new(x, 0.0)))
        .collect();
    let mut rho = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for (k, sk) in ham.eigenspaces().iter().enumerate() {
        let left = &projectors[k] * rho0;
        for (l, sl) in ham.eigenspaces().iter().enumerate() {
            let omega = sk.energy - sl.energy;
            let d = c[k] - c[l];
            let gamma = 0.5 * d * d;
            let phase = C64::new(-t * delta * gamma, -t * omega).exp();
            rho += &left * &projectors[l] * phase;
        }
    }
    Ok(rho)
}

/// Closed-form transfer fidelity under eigenbasis dephasing.
///
/// With a_k = ⟨OUT|Π_k|IN⟩ the fidelity is
/// Σ_k a_k² + Σ_{k<ℓ} 2 a_k a_ℓ cos(ω_kℓ T) exp(−δ T γ_kℓ),
/// so every error evaluation is a short weighted sum of exponentials.
#[derive(Debug, Clone)]
pub struct SpectralTransfer {
    readout_time: f64,
    population: f64,
    /// 2 a_k a_ℓ cos(ω_kℓ T) for k < ℓ, lexicographic.
    weights: Vec<f64>,
    spaces: usize,
}

impl SpectralTransfer {
    pub fn new(ham: &HamiltonianSS, ctrl: &Controller) -> Result<Self> {
        let n = ham.dim();
        for spin in [ctrl.input_spin, ctrl.output_spin] {
            if spin == 0 || spin > n {
                return Err(Error::InvalidArgument(format!("spin {spin} outside 1..={n}")));
            }
        }
        let t = ctrl.readout_time;
        let spaces = ham.eigenspaces();
        let amp: Vec<f64> = spaces
            .iter()
            .map(|s| s.projector[(ctrl.output_spin - 1, ctrl.input_spin - 1)])
            .collect();
        let population = amp.iter().map(|a| a * a).sum();
        let mut weights = Vec::with_capacity(spaces.len() * (spaces.len().saturating_sub(1)) / 2);
        for k in 0..spaces.len() {
            for l in k + 1..spaces.len() {
                let omega = spaces[k].energy - spaces[l].energy;
                weights.push(2.0 * amp[k] * amp[l] * (omega * t).cos());
            }
        }
        Ok(Self {
            readout_time: t,
            population,
            weights,
            spaces: spaces.len(),
        })
    }

    pub fn readout_time(&self) -> f64 {
        self.readout_time
    }

    pub fn eigenspace_count(&self) -> usize {
        self.spaces
    }

    fn check_op(&self, op: &DephasingOp) -> Result<()> {
        if op.c.len() != self.spaces {
            return Err(Error::InvalidArgument(format!(
                "dephasing operator has {} eigenvalues but H_ss has {} eigenspaces",
                op.c.len(),
                self.spaces
            )));
        }
        Ok(())
    }

    /// Unclamped error for per-pair decay factors (all ones at δ = 0).
    fn raw_error<I: IntoIterator<Item = f64>>(&self, decay: I) -> f64 {
        let coherent: f64 = self.weights.iter().zip(decay).map(|(w, f)| w * f).sum();
        1.0 - (self.population + coherent)
    }

    pub fn nominal_error(&self) -> Result<f64> {
        checked_error(self.raw_error(std::iter::repeat(1.0))).map(|(e, _)| e)
    }

    pub fn perturbed_error(&self, op: &DephasingOp, delta: f64) -> Result<f64> {
        self.check_op(op)?;
        if delta == 0.0 {
            return self.nominal_error();
        }
        let t = self.readout_time;
        let raw = self.raw_error(op.pair_rates().into_iter().map(|g| (-delta * t * g).exp()));
        checked_error(raw).map(|(e, _)| e)
    }

    /// ∂ẽ/∂δ at δ = 0: T Σ_{k<ℓ} w_kℓ γ_kℓ.
    pub fn differential_sensitivity(&self, op: &DephasingOp) -> Result<f64> {
        self.check_op(op)?;
        let t = self.readout_time;
        Ok(self
            .weights
            .iter()
            .zip(op.pair_rates())
            .map(|(w, g)| w * t * g)
            .sum())
    }

    /// Error along a uniform δ grid for one operator, with the number of clamped cells.
    pub fn error_column(&self, op: &DephasingOp, grid: &StrengthGrid) -> Result<(Vec<f64>, usize)> {
        self.check_op(op)?;
        let t = self.readout_time;
        let step = grid.delta(1);
        let ratios: Vec<f64> = op.pair_rates().iter().map(|g| (-step * t * g).exp()).collect();
        let mut decay = vec![1.0; ratios.len()];
        let mut column = Vec::with_capacity(grid.len());
        let mut clamped = 0;
        for n in 0..grid.len() {
            if n > 0 {
                for (f, q) in decay.iter_mut().zip(&ratios) {
                    *f *= q;
                }
            }
            let (e, was_clamped) = checked_error(self.raw_error(decay.iter().copied()))?;
            clamped += was_clamped as usize;
            column.push(e);
        }
        Ok((column, clamped))
    }
}

/// Nominal fidelity error e(T) = 1 − c·exp(TA)·r0, evaluated spectrally.
pub fn fidelity_error(transfer: &SpectralTransfer) -> Result<f64> {
    transfer.nominal_error()
}

/// ẽ(T; S_μ, δ).
pub fn perturbed_error(transfer: &SpectralTransfer, op: &DephasingOp, delta: f64) -> Result<f64> {
    transfer.perturbed_error(op, delta)
}

/// Perturbed errors for one controller: rows are δ grid points, columns operators.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    pub controller_id: String,
    pub dim: usize,
    pub dephasing_seed: u64,
    pub grid: StrengthGrid,
    pub ops: usize,
    /// Row-major, `grid.len()` × `ops`.
    pub values: Vec<f64>,
    pub clamped: usize,
}

const GRID_MAGIC: &[u8; 8] = b"SPNRGRID";
const GRID_VERSION: u32 = 1;

impl ErrorGrid {
    pub fn rows(&self) -> usize {
        self.grid.len()
    }

    pub fn cols(&self) -> usize {
        self.ops
    }

    pub fn get(&self, n: usize, mu: usize) -> f64 {
        self.values[n * self.ops + mu]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.ops..(n + 1) * self.ops]
    }

    /// Order-independent mean of each δ row.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows()).map(|n| exact_mean(self.row(n))).collect()
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        for v in [self.dim as u64, self.dephasing_seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.grid.delta_max.to_le_bytes())?;
        for v in [self.grid.steps as u64, self.ops as u64, self.clamped as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        let id = self.controller_id.as_bytes();
        w.write_all(&(id.len() as u64).to_le_bytes())?;
        w.write_all(id)?;
        let mut body = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| Error::Format(format!("grid header: {e}")))?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("grid header: {e}")))?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not an error-grid file".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)
            .map_err(|e| Error::Format(format!("grid header: {e}")))?;
        if u32::from_le_bytes(version) != GRID_VERSION {
            return Err(Error::Format("unsupported error-grid version".into()));
        }
        let dim = read_u64(&mut r)? as usize;
        let dephasing_seed = read_u64(&mut r)?;
        let delta_max = f64::from_bits(read_u64(&mut r)?);
        let steps = read_u64(&mut r)? as usize;
        let ops = read_u64(&mut r)? as usize;
        let clamped = read_u64(&mut r)? as usize;
        let id_len = read_u64(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|e| Error::Format(format!("grid header: {e}")))?;
        let controller_id =
            String::from_utf8(id).map_err(|_| Error::Format("controller id is not UTF-8".into()))?;
        let grid = StrengthGrid::new(delta_max, steps)?;
        let count = grid.len() * ops;
        let mut body = vec![0u8; count * 8];
        r.read_exact(&mut body)
            .map_err(|e| Error::Format(format!("grid body: {e}")))?;
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self {
            controller_id,
            dim,
            dephasing_seed,
            grid,
            ops,
            values,
            clamped,
        })
    }

    /// CSV with one row per δ: `delta,e_0,...,e_{ops-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["delta".to_string()];
        header.extend((0..self.ops).map(|mu| format!("op{mu}")));
        out.write_record(&header)?;
        for n in 0..self.rows() {
            let mut rec = vec![self.grid.delta(n).to_string()];
            rec.extend(self.row(n).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

/// Full δ × operator error grid for one controller.
///
/// The eigenstructure of every S_μ is that of H_ss (eigenvalues −γ_kℓ on the
/// eigen-coherences), so one diagonalisation of H_ss serves all operators and
/// all δ; each column is filled by repeated multiplication with the per-step
/// decay ratios.
pub fn compute_error_grid(
    transfer: &SpectralTransfer,
    set: &DephasingSet,
    grid: &StrengthGrid,
    controller_id: &str,
) -> Result<ErrorGrid> {
    let columns = set
        .ops
        .par_iter()
        .enumerate()
        .map(|(mu, op)| {
            transfer.error_column(op, grid).map_err(|e| match e {
                Error::NumericalIntegrity(msg) => {
                    Error::NumericalIntegrity(format!("operator {mu}: {msg}"))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = grid.len();
    let ops = set.len();
    let mut values = vec![0.0; rows * ops];
    let mut clamped = 0;
    for (mu, (column, c)) in columns.into_iter().enumerate() {
        clamped += c;
        for (n, v) in column.into_iter().enumerate() {
            values[n * ops + mu] = v;
        }
    }
    Ok(ErrorGrid {
        controller_id: controller_id.to_string(),
        dim: set.dim,
        dephasing_seed: set.seed,
        grid: *grid,
        ops,
        values,
        clamped,
    })
}
