//! Spin-network topologies and their single-excitation Hamiltonians.
//!
//! Spins are addressed with 1-based indices throughout the public API, matching
//! the usual "spin 1 → spin OUT" phrasing of transfer problems. Matrices are
//! 0-based internally.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::linalg::sym_eigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance (in units of the spectral norm) below which eigenvalues
/// are merged into one eigenspace.
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Chain,
    Ring,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Chain => f.write_str("chain"),
            Topology::Ring => f.write_str("ring"),
        }
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chain" => Ok(Topology::Chain),
            "ring" => Ok(Topology::Ring),
            other => Err(Error::InvalidArgument(format!("unknown topology '{other}'"))),
        }
    }
}

/// An XX-coupled spin network with uniform nearest-neighbour coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinNetwork {
    size: usize,
    topology: Topology,
    coupling: f64,
    kappa: f64,
}

impl SpinNetwork {
    /// Network with unit coupling (time measured in units of 1/J) and no ZZ term.
    pub fn new(size: usize, topology: Topology) -> Result<Self> {
        Self::with_coupling(size, topology, 1.0, 0.0)
    }

    pub fn with_coupling(size: usize, topology: Topology, coupling: f64, kappa: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "a spin network needs at least 2 spins, got {size}"
            )));
        }
        if !(coupling.is_finite() && coupling > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "coupling must be positive and finite, got {coupling}"
            )));
        }
        // The ZZ term leaves the XX single-excitation structure but shifts the
        // diagonal; that model family is not supported here.
        if kappa != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "only kappa = 0 (XX coupling) is supported, got {kappa}"
            )));
        }
        Ok(Self {
            size,
            topology,
            coupling,
            kappa,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Coupling J_{mn} between spins `m` and `n` (1-based).
    pub fn coupling_between(&self, m: usize, n: usize) -> f64 {
        let (lo, hi) = if m < n { (m, n) } else { (n, m) };
        if lo == 0 || hi > self.size || lo == hi {
            return 0.0;
        }
        let adjacent = hi - lo == 1;
        let wraps = self.topology == Topology::Ring && lo == 1 && hi == self.size && self.size > 2;
        if adjacent || wraps {
            self.coupling
        } else {
            0.0
        }
    }

    /// Output spins considered for transfers out of spin 1.
    ///
    /// Chains use {⌊N/2⌋+1, N}; rings use 2..=⌈N/2⌉.
    pub fn transfer_targets(&self) -> Vec<usize> {
        transfer_targets(self)
    }
}

pub fn transfer_targets(net: &SpinNetwork) -> Vec<usize> {
    let n = net.size;
    match net.topology {
        Topology::Chain => {
            let mut out = vec![n / 2 + 1, n];
            out.dedup();
            out
        }
        Topology::Ring => (2..=n.div_ceil(2)).collect(),
    }
}

/// Static bias-field controller: one energy shift per spin plus a readout time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    #[serde(rename = "delta")]
    pub biases: Vec<f64>,
    #[serde(rename = "T")]
    pub readout_time: f64,
    #[serde(default = "default_input_spin", skip_serializing)]
    pub input_spin: usize,
    #[serde(default, skip_serializing)]
    pub output_spin: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_error: Option<f64>,
}

fn default_input_spin() -> usize {
    1
}

impl Controller {
    pub fn new(biases: Vec<f64>, readout_time: f64, output_spin: usize) -> Self {
        Self {
            biases,
            readout_time,
            input_spin: 1,
            output_spin,
            nominal_error: None,
        }
    }

    pub fn validate(&self, net: &SpinNetwork) -> Result<()> {
        let n = net.size();
        if self.biases.len() != n {
            return Err(Error::InvalidArgument(format!(
                "controller has {} biases but the network has {n} spins",
                self.biases.len()
            )));
        }
        if self.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("controller biases must be finite".into()));
        }
        if !(self.readout_time.is_finite() && self.readout_time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "readout time must be positive, got {}",
                self.readout_time
            )));
        }
        for (label, spin) in [("input", self.input_spin), ("output", self.output_spin)] {
            if spin == 0 || spin > n {
                return Err(Error::InvalidArgument(format!(
                    "{label} spin {spin} is outside 1..={n}"
                )));
            }
        }
        Ok(())
    }
}

/// One eigenspace of H_ss (possibly degenerate) and its orthogonal projector.
#[derive(Debug, Clone)]
pub struct Eigenspace {
    pub energy: f64,
    /// Columns of the eigenvector matrix spanning this space.
    pub columns: Range<usize>,
    pub projector: DMatrix<f64>,
}

impl Eigenspace {
    pub fn rank(&self) -> usize {
        self.columns.len()
    }
}

/// Single-excitation subspace Hamiltonian with its spectral decomposition.
#[derive(Debug, Clone)]
pub struct HamiltonianSS {
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    spaces: Vec<Eigenspace>,
}

impl HamiltonianSS {
    /// Diagonalise an arbitrary real symmetric matrix, grouping degenerate eigenvalues.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::InvalidArgument("Hamiltonian must be a non-empty square matrix".into()));
        }
        if matrix != matrix.transpose() {
            return Err(Error::InvalidArgument("Hamiltonian must be symmetric".into()));
        }
        let eig = sym_eigen(&matrix);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.values[a].total_cmp(&eig.values[b]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.values[i]).collect();
        let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.vectors[(r, order[c])]);

        let norm = eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = DEGENERACY_TOLERANCE * norm.max(f64::MIN_POSITIVE);
        let mut spaces = Vec::new();
        let mut start = 0;
        for i in 1..=n {
            if i == n || eigenvalues[i] - eigenvalues[i - 1] > tol {
                let block = eigenvectors.columns(start, i - start);
                let projector = &block * block.transpose();
                let energy = eigenvalues[start..i].iter().sum::<f64>() / (i - start) as f64;
                spaces.push(Eigenspace {
                    energy,
                    columns: start..i,
                    projector,
                });
                start = i;
            }
        }
        Ok(Self {
            matrix,
            eigenvalues,
            eigenvectors,
            spaces,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// All N eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, ordered like [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Eigenspaces after degeneracy grouping, ascending in energy.
    pub fn eigenspaces(&self) -> &[Eigenspace] {
        &self.spaces
    }

    /// Σ_k λ_k Π_k.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.dim();
        self.spaces
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, s| acc + &s.projector * s.energy)
    }
}

/// H_ss with Δ_n on the diagonal and J_{mn} off the diagonal.
pub fn build_hamiltonian(net: &SpinNetwork, ctrl: &Controller) -> Result<HamiltonianSS> {
    let n = net.size();
    if ctrl.biases.len() != n {
        return Err(Error::InvalidArgument(format!(
            "controller has {} biases but the network has {n} spins",
            ctrl.biases.len()
        )));
    }
    let mut h = DMatrix::zeros(n, n);
    for r in 0..n {
        h[(r, r)] = ctrl.biases[r];
        for c in r + 1..n {
            let j = net.coupling_between(r + 1, c + 1);
            h[(r, c)] = j;
            h[(c, r)] = j;
        }
    }
    HamiltonianSS::from_matrix(h)
}
