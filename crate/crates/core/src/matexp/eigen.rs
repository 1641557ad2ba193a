use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::MatexpError;

/// Eigenvector condition numbers above this are reported as unusable for
/// eigen-based expectations.
pub const ILL_CONDITIONED: f64 = 1e8;

const EPS: f64 = f64::EPSILON;

/// `Q = U · diag(λ) · V` with `V = U⁻¹`, all in complex arithmetic.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<Complex64>,
    pub right_vectors: DMatrix<Complex64>,
    pub inverse_vectors: DMatrix<Complex64>,
    /// `κ₁(U) = ‖U‖₁‖U⁻¹‖₁`; infinite when `U` is numerically singular.
    pub condition: f64,
    pub balanced: bool,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_well_conditioned(&self) -> bool {
        self.condition.is_finite() && self.condition <= ILL_CONDITIONED
    }

    pub fn reconstruct(&self) -> DMatrix<Complex64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues);
        &self.right_vectors * d * &self.inverse_vectors
    }

    /// `exp(Qt)` through the spectral form; imaginary parts are dropped.
    pub fn exp(&self, t: f64) -> DMatrix<f64> {
        let e = DMatrix::from_diagonal(&self.eigenvalues.map(|l| (l * t).exp()));
        (&self.right_vectors * e * &self.inverse_vectors).map(|z| z.re)
    }
}

fn c_one_norm(a: &DMatrix<Complex64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Osborne/Parlett–Reinsch diagonal scaling by powers of two.
/// Returns `B = D⁻¹AD` and the diagonal of `D`.
fn balance(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut b = a.clone();
    let mut d = vec![1.0; n];
    let mut converged = false;
    let mut sweeps = 0;
    while !converged && sweeps < 100 {
        converged = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += b[(j, i)].abs();
                    r += b[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / 2.0;
            while c < g {
                f *= 2.0;
                c *= 4.0;
            }
            g = r * 2.0;
            while c >= g {
                f /= 2.0;
                c /= 4.0;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                d[i] *= f;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
    }
    (b, d)
}

/// Rotation `G = [[c, s], [-s̄, c]]` with `G·[x; y] = [r; 0]`.
fn givens(x: Complex64, y: Complex64) -> (f64, Complex64) {
    let ax = x.norm();
    let ay = y.norm();
    if ay == 0.0 {
        return (1.0, Complex64::new(0.0, 0.0));
    }
    if ax == 0.0 {
        return (0.0, Complex64::new(1.0, 0.0));
    }
    let norm = ax.hypot(ay);
    let c = ax / norm;
    let s = (x / ax) * y.conj() / norm;
    (c, s)
}

/// Complex Schur form `H = Z T Zᴴ` of an upper Hessenberg matrix, in place.
fn schur(h: &mut DMatrix<Complex64>, z: &mut DMatrix<Complex64>) -> Result<(), MatexpError> {
    let n = h.nrows();
    if n < 2 {
        return Ok(());
    }
    let hnorm = c_one_norm(h).max(f64::MIN_POSITIVE);
    let max_total = 100 * n;
    let mut total = 0;
    let mut its = 0;
    let mut hi = n - 1;
    while hi >= 1 {
        let mut l = hi;
        while l > 0 {
            let mut s = h[(l - 1, l - 1)].norm() + h[(l, l)].norm();
            if s == 0.0 {
                s = hnorm;
            }
            if h[(l, l - 1)].norm() <= EPS * s {
                h[(l, l - 1)] = Complex64::new(0.0, 0.0);
                break;
            }
            l -= 1;
        }
        if l == hi {
            hi -= 1;
            its = 0;
            continue;
        }
        its += 1;
        total += 1;
        if total > max_total {
            return Err(MatexpError::DecompositionFailed(total));
        }

        let mu = if its % 10 == 0 {
            // Exceptional shift to break cycles.
            let sub = h[(hi, hi - 1)].re.abs() + if hi >= 2 { h[(hi - 1, hi - 2)].re.abs() } else { 0.0 };
            h[(hi, hi)] + Complex64::new(0.75 * sub, 0.0)
        } else {
            let a = h[(hi - 1, hi - 1)];
            let b = h[(hi - 1, hi)];
            let c = h[(hi, hi - 1)];
            let d = h[(hi, hi)];
            let half = (a - d) * 0.5;
            let disc = (half * half + b * c).sqrt();
            let mid = (a + d) * 0.5;
            let mu1 = mid + disc;
            let mu2 = mid - disc;
            if (mu1 - d).norm() <= (mu2 - d).norm() {
                mu1
            } else {
                mu2
            }
        };

        for k in l..hi {
            let (x, y) = if k == l { (h[(l, l)] - mu, h[(l + 1, l)]) } else { (h[(k, k - 1)], h[(k + 1, k - 1)]) };
            let (c, s) = givens(x, y);
            let col_start = if k == l { l } else { k - 1 };
            for j in col_start..n {
                let h1 = h[(k, j)];
                let h2 = h[(k + 1, j)];
                h[(k, j)] = h1 * c + s * h2;
                h[(k + 1, j)] = -s.conj() * h1 + h2 * c;
            }
            let row_end = (k + 2).min(hi);
            for i in 0..=row_end {
                let h1 = h[(i, k)];
                let h2 = h[(i, k + 1)];
                h[(i, k)] = h1 * c + h2 * s.conj();
                h[(i, k + 1)] = -h1 * s + h2 * c;
            }
            for i in 0..n {
                let z1 = z[(i, k)];
                let z2 = z[(i, k + 1)];
                z[(i, k)] = z1 * c + z2 * s.conj();
                z[(i, k + 1)] = -z1 * s + z2 * c;
            }
            if k > l {
                h[(k + 1, k - 1)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(())
}

/// Right eigenvectors of an upper-triangular matrix (columns of the result).
fn triangular_eigenvectors(t: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let n = t.nrows();
    let tnorm = t.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let small = EPS * if tnorm > 0.0 { tnorm } else { 1.0 };
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        y[(k, k)] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * y[(j, k)];
            }
            let mut d = t[(i, i)] - lambda;
            if d.norm() < small {
                d = Complex64::new(small, 0.0);
            }
            y[(i, k)] = -s / d;
            let mag = y[(i, k)].norm();
            if mag > 1e100 {
                for r in i..=k {
                    y[(r, k)] /= mag;
                }
            }
        }
    }
    y
}

/// Full complex eigendecomposition of a real square matrix.
///
/// Non-convergence of the QR iteration is an error; a poorly conditioned
/// eigenvector basis is not, and is reported through
/// [`EigenDecomposition::condition`].
pub fn eig(q: &DMatrix<f64>, balance_first: bool) -> Result<EigenDecomposition, MatexpError> {
    let (r, c) = q.shape();
    if r != c {
        return Err(MatexpError::NotSquare(r, c));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(MatexpError::NonFinite);
    }
    let n = r;
    let (work, scale) = if balance_first { balance(q) } else { (q.clone(), vec![1.0; n]) };

    let (qh, hess) = if n > 2 { work.clone().hessenberg().unpack() } else { (DMatrix::identity(n, n), work.clone()) };
    let mut t = hess.map(|x| Complex64::new(x, 0.0));
    let mut z = qh.map(|x| Complex64::new(x, 0.0));
    schur(&mut t, &mut z)?;

    let eigenvalues = DVector::from_fn(n, |i, _| t[(i, i)]);
    let y = triangular_eigenvectors(&t);
    let mut u = &z * y;
    for i in 0..n {
        for j in 0..n {
            u[(i, j)] *= scale[i];
        }
    }
    for mut col in u.column_iter_mut() {
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            col /= Complex64::new(norm, 0.0);
        }
    }
    let (inverse_vectors, condition) = match u.clone().try_inverse() {
        Some(v) if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) => {
            let k = c_one_norm(&u) * c_one_norm(&v);
            (v, k)
        }
        _ => (DMatrix::zeros(n, n), f64::INFINITY),
    };
    Ok(EigenDecomposition {
        eigenvalues,
        right_vectors: u,
        inverse_vectors,
        condition,
        balanced: balance_first,
    })
}
