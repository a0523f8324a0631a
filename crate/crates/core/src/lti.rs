//! Linear time-invariant helpers: matrix exponential, zero-order-hold
//! discretization and the left pseudo-inverse used to build decoupling gains.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative eigenvalue floor of `MᵀM` below which a matrix is treated as
/// column-rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix does not have full column rank (eigenvalue ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("sample time must be positive and finite, got {0}")]
    InvalidSampleTime(f64),
}

/// Discrete-time model `x⁺ = a·x + b·u + e·d` obtained at sample time `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub ts: f64,
}

/// Exact zero-order-hold discretization through the exponential of the
/// augmented matrix `[[A, B, E], [0, 0, 0]]·ts`.
pub fn discretize_zoh(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    e_c: &DMatrix<f64>,
    ts: f64,
) -> Result<DiscreteModel, LinalgError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(LinalgError::InvalidSampleTime(ts));
    }
    let n = a_c.nrows();
    if a_c.ncols() != n {
        return Err(LinalgError::NonSquare {
            rows: n,
            cols: a_c.ncols(),
        });
    }
    if b_c.nrows() != n || e_c.nrows() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "state matrix is {n}x{n} but input matrices have {} and {} rows",
            b_c.nrows(),
            e_c.nrows()
        )));
    }
    let p = b_c.ncols();
    let q = e_c.ncols();
    let size = n + p + q;

    let mut aug = DMatrix::zeros(size, size);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * ts));
    aug.view_mut((0, n), (n, p)).copy_from(&(b_c * ts));
    aug.view_mut((0, n + p), (n, q)).copy_from(&(e_c * ts));

    let phi = matrix_exponential(&aug)?;
    Ok(DiscreteModel {
        a: phi.view((0, 0), (n, n)).into_owned(),
        b: phi.view((0, n), (n, p)).into_owned(),
        e: phi.view((0, n + p), (n, q)).into_owned(),
        ts,
    })
}

// Padé coefficients and θ thresholds from Higham, "The scaling and squaring
// method for the matrix exponential revisited" (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
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
const PADE13: [f64; 14] = [
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
const THETA: [f64; 4] = [
    1.495585217958292e-2,
    2.53939833006323e-1,
    9.504178996162932e-1,
    2.097847961257068,
];
const THETA13: f64 = 5.371920351148152;

/// `exp(m)` by scaling and squaring around a diagonal Padé approximant.
pub fn matrix_exponential(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(LinalgError::NonSquare {
            rows: n,
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let norm = one_norm(m);
    let (u, v, squarings) = if norm <= THETA[0] {
        let (u, v) = pade_low(m, &PADE3);
        (u, v, 0)
    } else if norm <= THETA[1] {
        let (u, v) = pade_low(m, &PADE5);
        (u, v, 0)
    } else if norm <= THETA[2] {
        let (u, v) = pade_low(m, &PADE7);
        (u, v, 0)
    } else if norm <= THETA[3] {
        let (u, v) = pade_low(m, &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scaled = m * 2f64.powi(-s);
        let (u, v) = pade13(&scaled);
        (u, v, s as u32)
    };

    // r = (V - U)⁻¹ (V + U)
    let numer = &v + &u;
    let denom = v - u;
    let mut result = denom.lu().solve(&numer).ok_or(LinalgError::NonFinite)?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_low(m: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let m2 = m * m;
    let mut odd = ident.clone() * b[1];
    let mut even = ident * b[0];
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 1..b.len() / 2 {
        power = &power * &m2;
        odd += &power * b[2 * k + 1];
        even += &power * b[2 * k];
    }
    (m * odd, even)
}

fn pade13(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let n = m.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let m2 = m * m;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;

    let inner_u = &m6 * b[13] + &m4 * b[11] + &m2 * b[9];
    let u = m * (&m6 * &inner_u + &m6 * b[7] + &m4 * b[5] + &m2 * b[3] + &ident * b[1]);
    let inner_v = &m6 * b[12] + &m4 * b[10] + &m2 * b[8];
    let v = &m6 * &inner_v + &m6 * b[6] + &m4 * b[4] + &m2 * b[2] + ident * b[0];
    (u, v)
}

/// `(MᵀM)⁻¹Mᵀ`, the left inverse of a full-column-rank matrix.
pub fn left_pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let cols = m.ncols();
    if cols == 0 {
        return Ok(DMatrix::zeros(0, m.nrows()));
    }
    if m.nrows() < cols {
        return Err(LinalgError::RankDeficient { ratio: 0.0 });
    }
    let gram = m.transpose() * m;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if max <= 0.0 || ratio < RANK_TOLERANCE {
        return Err(LinalgError::RankDeficient { ratio });
    }
    let chol = gram
        .cholesky()
        .ok_or(LinalgError::RankDeficient { ratio })?;
    Ok(chol.solve(&m.transpose()))
}
