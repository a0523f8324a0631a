//! Distributed optimal unknown-input observer for one agent.
//!
//! Observer form:
//!
//! ```text
//! z[k+1] = F·z[k] + T·B_x·u_x[k] + (K¹ + K²)·y[k]
//! x̂[k+1] = z[k+1] + H·y[k+1]
//! ```
//!
//! with the structural gains `H = E·((CE)ᵀCE)⁻¹(CE)ᵀ`, `T = I − H·C`, which
//! remove the load disturbance from the error dynamics, and the time-varying
//! gains
//!
//! ```text
//! K¹ = T·A·P·Cᵀ·(C·P·Cᵀ + R)⁻¹
//! F  = T·A − K¹·C
//! K² = F·H
//! P⁺ = F·P·Fᵀ + K¹·R·K¹ᵀ − H·R·Hᵀ + T·Q·Tᵀ
//! ```
//!
//! The covariance update is symmetrized and clamped to the PSD cone after
//! every step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lti::{left_pinv, LinalgError};
use crate::netmodel::AgentModel;

/// Trace change below which gains may be frozen.
pub const FREEZE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("disturbance cannot be decoupled: {0}")]
    DecouplingInfeasible(String),

    #[error("innovation covariance C·P·Cᵀ + R is not invertible")]
    SingularInnovation,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// `H` and `T`, fixed for a time-invariant model.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGains {
    pub h: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGains {
    pub h: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
}

impl ObserverGains {
    /// `K = K¹ + K²`, the gain applied to `y[k]`.
    pub fn k(&self) -> DMatrix<f64> {
        &self.k1 + &self.k2
    }
}

/// Max-abs violation of each decoupling identity:
/// `(I−HC)E = 0`, `T − (I−HC) = 0`, `F − (I−HC)A + K¹C = 0`, `K² − FH = 0`.
pub fn decoupling_violations(model: &AgentModel, gains: &ObserverGains) -> [f64; 4] {
    let n = model.n();
    let i_hc = DMatrix::identity(n, n) - &gains.h * &model.c;
    [
        (&i_hc * &model.e).amax(),
        (&gains.t - &i_hc).amax(),
        (&gains.f - &i_hc * &model.a + &gains.k1 * &model.c).amax(),
        (&gains.k2 - &gains.f * &gains.h).amax(),
    ]
}

pub fn structural_gains(model: &AgentModel) -> Result<StructuralGains, ObserverError> {
    let n = model.n();
    let m = model.m();
    if model.c.ncols() != n || model.e.nrows() != n {
        return Err(ObserverError::DimensionMismatch(format!(
            "C is {}x{}, E is {}x{}, state dimension {n}",
            model.c.nrows(),
            model.c.ncols(),
            model.e.nrows(),
            model.e.ncols()
        )));
    }
    if model.e.iter().all(|&v| v == 0.0) {
        return Ok(StructuralGains {
            h: DMatrix::zeros(n, m),
            t: DMatrix::identity(n, n),
        });
    }
    let ce = &model.c * &model.e;
    let pinv = left_pinv(&ce).map_err(|err| match err {
        LinalgError::RankDeficient { ratio } => ObserverError::DecouplingInfeasible(format!(
            "rank(C·E) is below the column rank of E (eigenvalue ratio {ratio:.3e})"
        )),
        other => ObserverError::DecouplingInfeasible(other.to_string()),
    })?;
    let h = &model.e * pinv;
    let t = DMatrix::identity(n, n) - &h * &model.c;
    Ok(StructuralGains { h, t })
}

/// Result of one gain/covariance update.
#[derive(Debug, Clone)]
pub struct GainStep {
    pub gains: ObserverGains,
    /// Symmetrized, PSD-clamped `P[k+1]`.
    pub p: DMatrix<f64>,
    /// Max-abs asymmetry of the raw update before symmetrization.
    pub asymmetry: f64,
    /// Smallest eigenvalue of the symmetrized update before clamping.
    pub min_eigenvalue: f64,
}

pub fn gain_step(
    model: &AgentModel,
    structural: &StructuralGains,
    p_k: &DMatrix<f64>,
    r_k: &DMatrix<f64>,
    r_k1: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<GainStep, ObserverError> {
    let n = model.n();
    let m = model.m();
    if p_k.shape() != (n, n) || q.shape() != (n, n) {
        return Err(ObserverError::DimensionMismatch(format!(
            "P and Q must be {n}x{n}"
        )));
    }
    if r_k.shape() != (m, m) || r_k1.shape() != (m, m) {
        return Err(ObserverError::DimensionMismatch(format!(
            "R must be {m}x{m}"
        )));
    }
    let StructuralGains { h, t } = structural;
    let c = &model.c;
    let ta = t * &model.a;

    let innovation = c * p_k * c.transpose() + r_k;
    let chol = innovation
        .cholesky()
        .ok_or(ObserverError::SingularInnovation)?;
    // K¹ = T·A·P·Cᵀ·S⁻¹, solved as S·K¹ᵀ = C·P·(T·A)ᵀ.
    let k1 = chol.solve(&(c * p_k * ta.transpose())).transpose();
    let f = &ta - &k1 * c;
    let k2 = &f * h;

    let raw = &f * p_k * f.transpose() + &k1 * r_k * k1.transpose() - h * r_k1 * h.transpose()
        + t * q * t.transpose();
    let asymmetry = (&raw - raw.transpose()).amax();
    let (p, min_eigenvalue) = clamp_psd(raw);

    Ok(GainStep {
        gains: ObserverGains {
            h: h.clone(),
            t: t.clone(),
            f,
            k1,
            k2,
        },
        p,
        asymmetry,
        min_eigenvalue,
    })
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

fn clamp_psd(raw: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = symmetrize(&raw);
    let eig = sym.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, min);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub z: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub gains: ObserverGains,
}

/// `r = y − ŷ` with one label per measured component.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub r: DVector<f64>,
    pub labels: Arc<[String]>,
}

/// Advance `z` and `x̂` by one step using `state.gains`.
///
/// `u_x_received` stacks local inputs and the neighbor voltages as received,
/// in `B_x` column order. The residual is taken against `y_k1`, right after
/// the update that produces `x̂[k+1]`.
pub fn observer_step(
    state: &ObserverState,
    model: &AgentModel,
    u_x_received: &DVector<f64>,
    y_k: &DVector<f64>,
    y_k1: &DVector<f64>,
) -> Result<(ObserverState, DVector<f64>), ObserverError> {
    let n = model.n();
    let m = model.m();
    if u_x_received.len() != model.b_x.ncols() {
        return Err(ObserverError::DimensionMismatch(format!(
            "expected {} inputs, got {}",
            model.b_x.ncols(),
            u_x_received.len()
        )));
    }
    if y_k.len() != m || y_k1.len() != m || state.z.len() != n {
        return Err(ObserverError::DimensionMismatch(format!(
            "expected {m} measurements and {n} states"
        )));
    }
    let g = &state.gains;
    let z = &g.f * &state.z + &g.t * (&model.b_x * u_x_received) + g.k() * y_k;
    let x_hat = &z + &g.h * y_k1;
    let r = y_k1 - &model.c * &x_hat;
    Ok((
        ObserverState {
            z,
            x_hat,
            p: state.p.clone(),
            gains: g.clone(),
        },
        r,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverOptions {
    /// Initial covariance is `p0_scale · I`.
    pub p0_scale: f64,
    /// Stop recomputing gains once `|Δtrace(P)| < FREEZE_TOLERANCE`.
    pub freeze_gains: bool,
}

impl Default for ObserverOptions {
    fn default() -> Self {
        ObserverOptions {
            p0_scale: 1.0,
            freeze_gains: false,
        }
    }
}

/// Owns one agent's model, structural gains and running state.
#[derive(Debug, Clone)]
pub struct Observer {
    model: AgentModel,
    structural: StructuralGains,
    state: ObserverState,
    labels: Arc<[String]>,
    options: ObserverOptions,
    frozen: bool,
    last_step: Option<(f64, f64)>,
}

impl Observer {
    /// Bootstraps `x̂[0]` from the first measurement (`x̂ = C⁺·y₀`) and
    /// sets `z[0] = x̂[0] − H·y₀`.
    pub fn new(
        model: AgentModel,
        y0: &DVector<f64>,
        options: ObserverOptions,
    ) -> Result<Self, ObserverError> {
        let structural = structural_gains(&model)?;
        let n = model.n();
        let m = model.m();
        if y0.len() != m {
            return Err(ObserverError::DimensionMismatch(format!(
                "expected {m} measurements, got {}",
                y0.len()
            )));
        }
        let x_hat = match left_pinv(&model.c) {
            Ok(pinv) => pinv * y0,
            Err(_) => DVector::zeros(n),
        };
        let z = &x_hat - &structural.h * y0;
        let p = DMatrix::identity(n, n) * options.p0_scale;
        let initial = gain_step(&model, &structural, &p, &model.r, &model.r, &model.q)?;
        let labels: Arc<[String]> = model.state_labels.clone().into();
        Ok(Observer {
            state: ObserverState {
                z,
                x_hat,
                p,
                gains: initial.gains,
            },
            model,
            structural,
            labels,
            options,
            frozen: false,
            last_step: None,
        })
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    pub fn state(&self) -> &ObserverState {
        &self.state
    }

    pub fn structural(&self) -> &StructuralGains {
        &self.structural
    }

    pub fn labels(&self) -> &Arc<[String]> {
        &self.labels
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `(asymmetry, min eigenvalue)` of the most recent covariance update.
    pub fn last_covariance_health(&self) -> Option<(f64, f64)> {
        self.last_step
    }

    /// Update gains and covariance for step k+1, then advance the estimate.
    pub fn step(
        &mut self,
        u_x_received: &DVector<f64>,
        y_k: &DVector<f64>,
        y_k1: &DVector<f64>,
    ) -> Result<Residual, ObserverError> {
        if !self.frozen {
            let gs = gain_step(
                &self.model,
                &self.structural,
                &self.state.p,
                &self.model.r,
                &self.model.r,
                &self.model.q,
            )?;
            let delta = (gs.p.trace() - self.state.p.trace()).abs();
            self.last_step = Some((gs.asymmetry, gs.min_eigenvalue));
            self.state.gains = gs.gains;
            self.state.p = gs.p;
            if self.options.freeze_gains && delta < FREEZE_TOLERANCE {
                self.frozen = true;
            }
        }
        let (next, r) = observer_step(&self.state, &self.model, u_x_received, y_k, y_k1)?;
        self.state = next;
        Ok(Residual {
            r,
            labels: Arc::clone(&self.labels),
        })
    }

    /// `sqrt(diag(C·P·Cᵀ + R))` for the current covariance.
    pub fn innovation_sigma(&self) -> DVector<f64> {
        let c = &self.model.c;
        let s = c * &self.state.p * c.transpose() + &self.model.r;
        s.diagonal().map(|v| v.max(0.0).sqrt())
    }
}
