//! Per-sample endpoint Jacobian: backward accumulation of state transition
//! matrices along an Euler trajectory, assembled into the matrix that maps a
//! discrete control variation to the first-order variation of the read-out
//! endpoint. Also the per-sample cost and its control gradient.
//!
//! With `Φ_m = ∂x_N/∂x_m` (so `Φ_N = I` and `Φ_m = Φ_{m+1}(I + h·∂f/∂x)`),
//! column block `l` of the Jacobian is `h·C·Φ_{l+1}·∂f/∂u` evaluated on step
//! `l`. The `h` factor and the `Φ_{l+1}` alignment make the matrix the exact
//! derivative of the sample-and-hold Euler endpoint, which the
//! finite-difference oracles in the tests check directly.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{
    flow, jac_control, jac_state, uplift, ControlSignal, Model, ReadoutMap,
};
use crate::ensemble::Sample;
use crate::error::{Error, Result};

/// Discretized first-order map from control perturbations to endpoint-readout
/// perturbations for one sample: an `n_out × (p·N)` matrix.
#[derive(Debug, Clone)]
pub struct EndpointJacobian {
    matrix: DMatrix<f64>,
    sample_index: usize,
    control_version: u64,
}

impl EndpointJacobian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sample_index(&self) -> usize {
        self.sample_index
    }

    pub fn control_version(&self) -> u64 {
        self.control_version
    }

    /// First-order endpoint variation `L·δu`.
    pub fn apply(&self, du: &DVector<f64>) -> Result<DVector<f64>> {
        if du.len() != self.matrix.ncols() {
            return Err(Error::Dimension {
                context: "endpoint jacobian apply",
                expected: self.matrix.ncols(),
                actual: du.len(),
            });
        }
        Ok(&self.matrix * du)
    }
}

/// Per-sample cost `½‖C·φ(u, E(x)) − y‖²` together with its residual.
#[derive(Debug, Clone)]
pub struct PerSampleCost {
    pub value: f64,
    pub residual: DVector<f64>,
}

/// Computes the endpoint Jacobian of one sample under the current control by
/// a single forward trajectory and one backward sweep.
pub fn endpoint_jacobian(
    model: &Model,
    readout: &ReadoutMap,
    u: &ControlSignal,
    sample: &Sample,
) -> Result<EndpointJacobian> {
    let nbar = model.nbar();
    let p = model.params_per_step();
    let n = u.steps();
    let h = u.step_size();
    let lifted = uplift(&sample.x, nbar)?;
    let traj = flow(model, u, &lifted)?;

    let mut matrix = DMatrix::zeros(readout.n_out(), p * n);
    // a = C·Φ_{l+1}; starts at C·Φ_N = C and is pulled back one step per turn
    let mut a = readout.matrix().clone();
    let eye = DMatrix::identity(nbar, nbar);
    for l in (0..n).rev() {
        let z = traj.state(l);
        let b = jac_control(model, u.step(l), z)?;
        let block = h * (&a * &b);
        matrix.columns_mut(l * p, p).copy_from(&block);
        let j = jac_state(model, u.step(l), z)?;
        a = &a * (&eye + h * j);
    }
    if !matrix.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteValue("endpoint jacobian"));
    }
    Ok(EndpointJacobian {
        matrix,
        sample_index: sample.index,
        control_version: u.version(),
    })
}

/// Backward-accumulated state transition chain `Φ_0..Φ_N` along a sample's
/// trajectory (`Φ_m = ∂x_N/∂x_m`). Diagnostic companion of
/// [`endpoint_jacobian`]; entry `N` is the identity.
pub fn state_transition_chain(
    model: &Model,
    u: &ControlSignal,
    sample: &Sample,
) -> Result<Vec<DMatrix<f64>>> {
    let nbar = model.nbar();
    let n = u.steps();
    let h = u.step_size();
    let lifted = uplift(&sample.x, nbar)?;
    let traj = flow(model, u, &lifted)?;

    let mut chain = vec![DMatrix::identity(nbar, nbar); n + 1];
    let eye = DMatrix::identity(nbar, nbar);
    for m in (0..n).rev() {
        let j = jac_state(model, u.step(m), traj.state(m))?;
        chain[m] = &chain[m + 1] * (&eye + h * j);
    }
    Ok(chain)
}

/// Endpoint residual and `½‖·‖²` cost of one sample.
pub fn per_sample_cost(
    model: &Model,
    readout: &ReadoutMap,
    u: &ControlSignal,
    sample: &Sample,
) -> Result<PerSampleCost> {
    let lifted = uplift(&sample.x, model.nbar())?;
    let traj = flow(model, u, &lifted)?;
    let out = readout.apply(traj.final_state())?;
    let residual = out - &sample.y;
    Ok(PerSampleCost {
        value: 0.5 * residual.norm_squared(),
        residual,
    })
}

/// Steepest-descent direction of the per-sample cost in the discretized
/// control space: `Lᵀ·residual`. Rejects a Jacobian computed for a different
/// control version.
pub fn cost_gradient(
    jacobian: &EndpointJacobian,
    residual: &DVector<f64>,
    u: &ControlSignal,
) -> Result<DVector<f64>> {
    if jacobian.control_version != u.version() {
        return Err(Error::StaleJacobian {
            jacobian: jacobian.control_version,
            control: u.version(),
        });
    }
    if residual.len() != jacobian.matrix.nrows() {
        return Err(Error::Dimension {
            context: "cost gradient residual",
            expected: jacobian.matrix.nrows(),
            actual: residual.len(),
        });
    }
    if jacobian.matrix.ncols() != u.dim() {
        return Err(Error::Dimension {
            context: "cost gradient control",
            expected: jacobian.matrix.ncols(),
            actual: u.dim(),
        });
    }
    Ok(jacobian.matrix.tr_mul(residual))
}
