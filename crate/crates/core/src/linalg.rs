//! Dense matrix helpers: scaling-and-squaring Padé exponential, complex
//! trace products, and correctly rounded summation.

use nalgebra::{Complex, DMatrix, DVector};

pub type C64 = Complex<f64>;

// Higham (2005) thresholds on the 1-norm for Padé degrees 3, 5, 7, 9, 13.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé approximant
/// (lower degrees when the norm allows).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return a.clone();
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let nrm = norm1(a);
    if nrm == 0.0 {
        return ident;
    }

    for (degree, theta) in THETA {
        if nrm <= theta {
            let coeffs: &[f64] = match degree {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            let a2 = a * a;
            let mut power = ident.clone();
            let mut u = &ident * coeffs[1];
            let mut v = &ident * coeffs[0];
            for k in 1..=degree / 2 {
                power = &power * &a2;
                u += &power * coeffs[2 * k + 1];
                v += &power * coeffs[2 * k];
            }
            let u = a * u;
            return pade_solve(u, v);
        }
    }

    let s = (nrm / THETA_13).log2().ceil().max(0.0) as i32;
    let scaled = a / 2f64.powi(s);
    let b = &PADE_13;
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = &scaled * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let mut result = pade_solve(u, v);
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

fn pade_solve(u: DMatrix<f64>, v: DMatrix<f64>) -> DMatrix<f64> {
    let numer = &v + &u;
    let denom = v - u;
    denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular within the scaling thresholds")
}

/// Eigendecomposition of a real symmetric matrix: M = V·diag(values)·Vᵀ.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigensolver. Accurate to a few ulps of ‖M‖ for the small
/// matrices used here, where nalgebra's QL iteration can lose several digits.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "sym_eigen needs a square matrix");
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= f64::EPSILON * f64::EPSILON * 1e-4 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                let g = 1e3 * apq.abs();
                if apq == 0.0 || (app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs()) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    SymEigen {
        values: DVector::from_fn(n, |i, _| a[(i, i)]),
        vectors: v,
    }
}

/// exp(t·M) for a symmetric M from its eigendecomposition.
pub fn sym_expm(eig: &SymEigen, t: f64) -> DMatrix<f64> {
    let q = &eig.vectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= (t * eig.values[j]).exp();
    }
    scaled * q.transpose()
}

pub fn commutator(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b - b * a
}

/// Tr(A·B) without forming the product.
pub fn trace_product(a: &DMatrix<C64>, b: &DMatrix<C64>) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

/// Frobenius norm of M − M†.
pub fn hermitian_defect(m: &DMatrix<C64>) -> f64 {
    (m - m.adjoint()).norm()
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials).
///
/// The result does not depend on the order of the input, which makes means over
/// an operator set bit-identical under permutation.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    // Round the partials to a single float, fixing up half-way cases.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Order-independent mean. A constant slice returns its value unchanged.
pub fn exact_mean(values: &[f64]) -> f64 {
    match values.first() {
        None => f64::NAN,
        Some(&first) if values.iter().all(|v| v.to_bits() == first.to_bits()) => first,
        Some(_) => exact_sum(values.iter().copied()) / values.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        // Reference for small-norm matrices only.
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..60 {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_matches_taylor_for_each_pade_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scale in [1e-3, 0.1, 0.5, 1.5, 4.0] {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0)) * (scale / 6.0);
            let diff = (expm(&a) - taylor_expm(&a)).amax();
            assert!(diff < 1e-13, "scale {scale}: {diff}");
        }
    }

    #[test]
    fn expm_matches_nalgebra_for_large_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(9, 9, |_, _| rng.gen_range(-3.0..3.0));
        let ours = expm(&a);
        let theirs = a.clone().exp();
        let rel = (&ours - &theirs).amax() / theirs.amax();
        assert!(rel < 1e-12, "{rel}");
    }

    #[test]
    fn expm_of_rotation_generator() {
        let t = 2.3;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&a);
        let expected = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((e - expected).amax() < 1e-14);
    }

    #[test]
    fn sym_expm_agrees_with_pade() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
        let s = &b + b.transpose();
        let eig = sym_eigen(&s);
        assert!((sym_expm(&eig, 0.7) - expm(&(s * 0.7))).amax() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_to_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1, 2, 5, 9, 25, 36] {
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-10.0..10.0));
            let m = &b + b.transpose();
            let eig = sym_eigen(&m);
            let q = &eig.vectors;
            let rebuilt = q * DMatrix::from_diagonal(&eig.values) * q.transpose();
            assert!((rebuilt - &m).amax() < 1e-13 * m.amax() * n as f64);
            assert!((q.transpose() * q - DMatrix::identity(n, n)).amax() < 1e-14 * n as f64);
        }
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut values: Vec<f64> = (0..1000)
            .map(|_| rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-8..8)))
            .collect();
        let reference = exact_sum(values.iter().copied());
        for _ in 0..20 {
            values.shuffle(&mut rng);
            assert_eq!(exact_sum(values.iter().copied()).to_bits(), reference.to_bits());
        }
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn exact_mean_of_constant_is_exact() {
        let v = vec![0.123456789012345_f64; 1000];
        assert_eq!(exact_mean(&v).to_bits(), v[0].to_bits());
    }
}
