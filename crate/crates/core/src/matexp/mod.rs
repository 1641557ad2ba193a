//! Dense matrix-function kernel.
//!
//! * [`expm`]: degree-13 Padé approximant with scaling and squaring.
//! * [`eig`]: complex eigendecomposition of a real non-symmetric matrix with
//!   optional diagonal balancing and a condition-number diagnostic.
//! * [`vanloan_integral`]: `∫₀ᵗ exp(Qx) B exp(Q(t-x)) dx` read off the upper
//!   right block of a `2n × 2n` exponential.

mod eigen;

pub use eigen::{eig, EigenDecomposition, ILL_CONDITIONED};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatexpError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix must be square (got {0}x{1})")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: expected {expected}x{expected}, got {rows}x{cols}")]
    DimensionMismatch { expected: usize, rows: usize, cols: usize },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("Padé denominator is singular")]
    SingularPade,
    #[error("eigendecomposition did not converge after {0} iterations")]
    DecompositionFailed(usize),
}

/// Scaling threshold for the degree-13 approximant.
pub const THETA_13: f64 = 5.4;

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

pub(crate) fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Number of squarings so that `‖A / 2^s‖₁ ≤ θ₁₃`.
pub fn scaling_power(norm: f64) -> u32 {
    if norm <= THETA_13 {
        0
    } else {
        (norm / THETA_13).log2().ceil().max(0.0) as u32
    }
}

/// Matrix exponential of a square real matrix.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, MatexpError> {
    let (r, c) = a.shape();
    if r != c {
        return Err(MatexpError::NotSquare(r, c));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(MatexpError::NonFinite);
    }
    let n = r;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let s = scaling_power(one_norm(a));
    let a = if s > 0 { a / 2f64.powi(s as i32) } else { a.clone() };

    let b = &PADE_13;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_poly = &a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = &a * u_poly;
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut result = denom.lu().solve(&numer).ok_or(MatexpError::SingularPade)?;
    for _ in 0..s {
        result = &result * &result;
    }
    if result.iter().any(|x| !x.is_finite()) {
        return Err(MatexpError::NonFinite);
    }
    Ok(result)
}

/// Van Loan block-exponential integral `∫₀ᵗ exp(Qx) B exp(Q(t−x)) dx`.
pub fn vanloan_integral(q: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, MatexpError> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(MatexpError::NotSquare(n, q.ncols()));
    }
    if b.shape() != (n, n) {
        return Err(MatexpError::DimensionMismatch { expected: n, rows: b.nrows(), cols: b.ncols() });
    }
    if t < 0.0 || t.is_nan() {
        return Err(MatexpError::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(q * t));
    block.view_mut((0, n), (n, n)).copy_from(&(b * t));
    block.view_mut((n, n), (n, n)).copy_from(&(q * t));
    let e = expm(&block)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}
