//! Real vectorised (coherence-vector) representation of density-matrix dynamics.
//!
//! A density matrix ρ is expanded in a trace-orthonormal Hermitian basis
//! {σ_k} as r_k = Tr(ρ σ_k). The Hamiltonian commutator and a Lindblad
//! dephasing term then become real N²×N² matrices acting on r.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{hermitian_defect, to_complex, trace_product, C64};
use crate::network::HamiltonianSS;

/// Largest imaginary part tolerated when a trace form is real analytically.
const IMAG_TOLERANCE: f64 = 1e-12;

/// Normalised generalised Gell-Mann basis, identity element first.
///
/// Ordering: I/√N, then the symmetric off-diagonal elements, the antisymmetric
/// off-diagonal elements (both over pairs j<k in lexicographic order), and
/// finally the N−1 traceless diagonal elements.
#[derive(Debug, Clone)]
pub struct HermitianBasis {
    dim: usize,
    elements: Vec<DMatrix<C64>>,
}

impl HermitianBasis {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "Hermitian basis needs N >= 2, got {dim}"
            )));
        }
        let zero = C64::new(0.0, 0.0);
        let mut elements = Vec::with_capacity(dim * dim);
        elements.push(DMatrix::from_diagonal_element(
            dim,
            dim,
            C64::new(1.0 / (dim as f64).sqrt(), 0.0),
        ));

        let r = std::f64::consts::FRAC_1_SQRT_2;
        let pairs: Vec<(usize, usize)> = (0..dim)
            .flat_map(|j| (j + 1..dim).map(move |k| (j, k)))
            .collect();
        for &(j, k) in &pairs {
            let mut m = DMatrix::from_element(dim, dim, zero);
            m[(j, k)] = C64::new(r, 0.0);
            m[(k, j)] = C64::new(r, 0.0);
            elements.push(m);
        }
        for &(j, k) in &pairs {
            let mut m = DMatrix::from_element(dim, dim, zero);
            m[(j, k)] = C64::new(0.0, -r);
            m[(k, j)] = C64::new(0.0, r);
            elements.push(m);
        }
        for l in 1..dim {
            let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
            let mut m = DMatrix::from_element(dim, dim, zero);
            for i in 0..l {
                m[(i, i)] = C64::new(norm, 0.0);
            }
            m[(l, l)] = C64::new(-(l as f64) * norm, 0.0);
            elements.push(m);
        }
        Ok(Self { dim, elements })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of basis elements, N².
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[DMatrix<C64>] {
        &self.elements
    }

    /// Gram matrix Tr(σ_j σ_k); the identity for this basis.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(m, m, |j, k| trace_product(&self.elements[j], &self.elements[k]).re)
    }

    /// Coherence vector r_k = Tr(ρ σ_k).
    pub fn vectorize(&self, rho: &DMatrix<C64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.elements.iter().map(|s| trace_product(rho, s).re),
        )
    }

    /// ρ = Σ_k r_k σ_k.
    pub fn devectorize(&self, r: &DVector<f64>) -> DMatrix<C64> {
        let n = self.dim;
        self.elements
            .iter()
            .zip(r.iter())
            .fold(DMatrix::from_element(n, n, C64::new(0.0, 0.0)), |acc, (s, &rk)| {
                acc + s * C64::new(rk, 0.0)
            })
    }

    fn check_dim(&self, m: usize, what: &str) -> Result<()> {
        if m != self.dim {
            return Err(Error::InvalidArgument(format!(
                "{what} has dimension {m} but the basis has dimension {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Real part of a trace that is real in exact arithmetic; `scale` bounds the
/// magnitude of the terms, so rounding in the imaginary part is relative to it.
fn real_part(z: C64, scale: f64, what: &str) -> Result<f64> {
    if z.im.abs() > IMAG_TOLERANCE * scale.max(z.re.abs()).max(1.0) {
        return Err(Error::NumericalIntegrity(format!(
            "{what} has imaginary part {:e}",
            z.im
        )));
    }
    Ok(z.re)
}

/// A_{kl} = Tr(i·H·[σ_k, σ_l]) with ħ = 1. Antisymmetric by construction.
pub fn hamiltonian_superop(h: &DMatrix<f64>, basis: &HermitianBasis) -> Result<DMatrix<f64>> {
    basis.check_dim(h.nrows(), "Hamiltonian")?;
    let h = to_complex(h);
    let m = basis.len();
    let scale = h.norm();
    let i = C64::new(0.0, 1.0);
    // Tr(H[σ_k,σ_l]) = −Tr(σ_k [H, σ_l]).
    let comms: Vec<DMatrix<C64>> = basis
        .elements()
        .iter()
        .map(|s| &h * s - s * &h)
        .collect();
    let mut a = DMatrix::zeros(m, m);
    for k in 0..m {
        for l in 0..m {
            let z = -i * trace_product(&basis.elements()[k], &comms[l]);
            a[(k, l)] = real_part(z, scale, "Hamiltonian superoperator entry")?;
        }
    }
    Ok((&a - a.transpose()) * 0.5)
}

/// L_{kl} = Tr(V σ_k V σ_l) − ½ Tr(V² {σ_k, σ_l}): the coherence-vector form of
/// −½[V,[V,·]]. Symmetric and negative semidefinite for Hermitian V.
pub fn dephasing_superop(v: &DMatrix<C64>, basis: &HermitianBasis) -> Result<DMatrix<f64>> {
    basis.check_dim(v.nrows(), "dephasing operator")?;
    let scale = v.norm().max(1.0);
    if hermitian_defect(v) > 1e-12 * scale {
        return Err(Error::InvalidArgument("dephasing operator V must be Hermitian".into()));
    }
    let v2 = v * v;
    let half = C64::new(0.5, 0.0);
    let images: Vec<DMatrix<C64>> = basis
        .elements()
        .iter()
        .map(|s| v * s * v - (&v2 * s + s * &v2) * half)
        .collect();
    let m = basis.len();
    let mut l = DMatrix::zeros(m, m);
    for k in 0..m {
        for j in 0..m {
            let z = trace_product(&basis.elements()[k], &images[j]);
            l[(k, j)] = real_part(z, scale * scale, "dephasing superoperator entry")?;
        }
    }
    Ok((&l + l.transpose()) * 0.5)
}

pub fn dephasing_superop_real(v: &DMatrix<f64>, basis: &HermitianBasis) -> Result<DMatrix<f64>> {
    dephasing_superop(&to_complex(v), basis)
}

/// |n⟩⟨n| for a 1-based spin index.
pub fn site_projector(dim: usize, spin: usize) -> DMatrix<C64> {
    let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    m[(spin - 1, spin - 1)] = C64::new(1.0, 0.0);
    m
}

/// Vectorised transfer problem: ṙ = A r, r(0) = r0, fidelity c·r(T).
#[derive(Debug, Clone)]
pub struct LiouvilleSystem {
    pub a: DMatrix<f64>,
    pub r0: DVector<f64>,
    /// Vectorised target |OUT⟩⟨OUT|, used as a row vector.
    pub c: DVector<f64>,
}

impl LiouvilleSystem {
    pub fn new(
        ham: &HamiltonianSS,
        basis: &HermitianBasis,
        input_spin: usize,
        output_spin: usize,
    ) -> Result<Self> {
        let n = ham.dim();
        basis.check_dim(n, "Hamiltonian")?;
        for spin in [input_spin, output_spin] {
            if spin == 0 || spin > n {
                return Err(Error::InvalidArgument(format!("spin {spin} outside 1..={n}")));
            }
        }
        Ok(Self {
            a: hamiltonian_superop(ham.matrix(), basis)?,
            r0: basis.vectorize(&site_projector(n, input_spin)),
            c: basis.vectorize(&site_projector(n, output_spin)),
        })
    }

    pub fn dim(&self) -> usize {
        self.r0.len()
    }
}
