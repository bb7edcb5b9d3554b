//! Joint-training and fine-tuning baselines: the folded method (all samples
//! stacked into one system driven by a shared control) and penalty-method
//! fine-tuning, plus a wall-time probe of the folded method's per-iteration
//! scaling in the ensemble size.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{eval_rhs, ControlSignal, Model, ReadoutMap};
use crate::endpoint_jacobian::{cost_gradient, endpoint_jacobian, per_sample_cost};
use crate::ensemble::{average_error, SubEnsembleView};
use crate::error::{Error, Result};

const MAX_BACKTRACKS: usize = 40;

/// The q-folded Bolza problem: all initial states stacked into one vector,
/// all targets stacked, and the block-diagonal readout `Λ(C) = diag(C,…,C)`.
#[derive(Debug, Clone)]
pub struct QFoldedProblem {
    x0_stacked: DVector<f64>,
    y_stacked: DVector<f64>,
    lambda_c: DMatrix<f64>,
    q: usize,
    nbar: usize,
}

impl QFoldedProblem {
    pub fn new(
        model: &Model,
        readout: &ReadoutMap,
        view: &SubEnsembleView<'_>,
    ) -> Result<QFoldedProblem> {
        if view.is_empty() {
            return Err(Error::EmptyView);
        }
        let nbar = model.nbar();
        let n_out = readout.n_out();
        let q = view.len();
        let mut x0_stacked = DVector::zeros(nbar * q);
        let mut y_stacked = DVector::zeros(n_out * q);
        let mut lambda_c = DMatrix::zeros(n_out * q, nbar * q);
        for (k, sample) in view.iter().enumerate() {
            let lifted = crate::dynamics::uplift(&sample.x, nbar)?;
            x0_stacked.rows_mut(k * nbar, nbar).copy_from(&lifted);
            y_stacked.rows_mut(k * n_out, n_out).copy_from(&sample.y);
            lambda_c
                .view_mut((k * n_out, k * nbar), (n_out, nbar))
                .copy_from(readout.matrix());
        }
        Ok(QFoldedProblem {
            x0_stacked,
            y_stacked,
            lambda_c,
            q,
            nbar,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn nbar(&self) -> usize {
        self.nbar
    }

    pub fn x0_stacked(&self) -> &DVector<f64> {
        &self.x0_stacked
    }

    pub fn y_stacked(&self) -> &DVector<f64> {
        &self.y_stacked
    }

    pub fn lambda_c(&self) -> &DMatrix<f64> {
        &self.lambda_c
    }

    /// Stacked endpoint residual `Λ(C)·φ_T(u, X0) − Y`.
    pub fn stacked_residual(&self, model: &Model, u: &ControlSignal) -> Result<DVector<f64>> {
        let states = stacked_flow(model, u, &self.x0_stacked)?;
        let last = states.last().expect("flow returns at least the initial state");
        Ok(&self.lambda_c * last - &self.y_stacked)
    }
}

/// Euler flow of the folded system: the shared control applied blockwise to a
/// stacked state. The arithmetic per block is identical to the per-sample
/// flow, so the stacked trajectory is the concatenation of the per-sample
/// trajectories.
pub fn stacked_flow(
    model: &Model,
    u: &ControlSignal,
    x0_stacked: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let nbar = model.nbar();
    if x0_stacked.is_empty() || !x0_stacked.len().is_multiple_of(nbar) {
        return Err(Error::Dimension {
            context: "stacked flow initial state",
            expected: nbar,
            actual: x0_stacked.len(),
        });
    }
    let q = x0_stacked.len() / nbar;
    let h = u.step_size();
    let mut states = Vec::with_capacity(u.steps() + 1);
    states.push(x0_stacked.clone());
    let mut x = x0_stacked.clone();
    for l in 0..u.steps() {
        let mut next = DVector::zeros(nbar * q);
        for i in 0..q {
            let xb = x.rows(i * nbar, nbar).into_owned();
            let rhs = eval_rhs(model, u.step(l), &xb)?;
            next.rows_mut(i * nbar, nbar).copy_from(&(xb + h * rhs));
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: l + 1 });
        }
        states.push(next.clone());
        x = next;
    }
    Ok(states)
}

/// Regularizer of the joint descent objective.
#[derive(Debug, Clone, Copy)]
pub enum JointRegularizer<'a> {
    None,
    /// `coeff · h · Σ_l ‖u_l‖²`, the discretized control-energy term.
    ControlNorm { coeff: f64 },
    /// `coeff · h · Σ_l ‖u_l − u0_l‖²`, the penalty-method distance term.
    DistanceToReference {
        coeff: f64,
        reference: &'a ControlSignal,
    },
}

fn regularizer_cost(reg: &JointRegularizer<'_>, u: &ControlSignal) -> Result<f64> {
    Ok(match reg {
        JointRegularizer::None => 0.0,
        JointRegularizer::ControlNorm { coeff } => coeff * u.step_size() * u.norm_squared(),
        JointRegularizer::DistanceToReference { coeff, reference } => {
            if reference.dim() != u.dim() {
                return Err(Error::Dimension {
                    context: "penalty reference control",
                    expected: u.dim(),
                    actual: reference.dim(),
                });
            }
            let mut acc = 0.0;
            for (a, b) in u.as_flat().iter().zip(reference.as_flat()) {
                let d = a - b;
                acc += d * d;
            }
            coeff * u.step_size() * acc
        }
    })
}

fn regularizer_gradient(
    reg: &JointRegularizer<'_>,
    u: &ControlSignal,
    g: &mut DVector<f64>,
) -> Result<()> {
    match reg {
        JointRegularizer::None => {}
        JointRegularizer::ControlNorm { coeff } => {
            let scale = 2.0 * coeff * u.step_size();
            for (gk, uk) in g.iter_mut().zip(u.as_flat()) {
                *gk += scale * uk;
            }
        }
        JointRegularizer::DistanceToReference { coeff, reference } => {
            if reference.dim() != u.dim() {
                return Err(Error::Dimension {
                    context: "penalty reference control",
                    expected: u.dim(),
                    actual: reference.dim(),
                });
            }
            let scale = 2.0 * coeff * u.step_size();
            for ((gk, uk), rk) in g.iter_mut().zip(u.as_flat()).zip(reference.as_flat()) {
                *gk += scale * (uk - rk);
            }
        }
    }
    Ok(())
}

/// Joint objective `Σ_i ‖C·φ(u, x_i) − y_i‖² + regularizer`, evaluated through
/// the stacked flow.
fn joint_cost(
    model: &Model,
    problem: &QFoldedProblem,
    u: &ControlSignal,
    reg: &JointRegularizer<'_>,
) -> Result<f64> {
    let r = problem.stacked_residual(model, u)?;
    Ok(r.norm_squared() + regularizer_cost(reg, u)?)
}

/// Exact gradient of the joint objective, assembled from per-sample endpoint
/// Jacobians in index order: `Σ_i 2·L_iᵀ r_i` plus the regularizer gradient.
/// Also returns the stacked residual norm.
fn joint_gradient(
    model: &Model,
    readout: &ReadoutMap,
    view: &SubEnsembleView<'_>,
    u: &ControlSignal,
    reg: &JointRegularizer<'_>,
) -> Result<(DVector<f64>, f64)> {
    let mut g = DVector::zeros(u.dim());
    let mut residual_sq = 0.0;
    for sample in view.iter() {
        let cost = per_sample_cost(model, readout, u, sample)?;
        let jac = endpoint_jacobian(model, readout, u, sample)?;
        let gi = cost_gradient(&jac, &cost.residual, u)?;
        g.axpy(2.0, &gi, 1.0);
        residual_sq += cost.residual.norm_squared();
    }
    regularizer_gradient(reg, u, &mut g)?;
    Ok((g, residual_sq.sqrt()))
}

/// One training-curve record per iteration.
#[derive(Debug, Clone, Default)]
pub struct TrainingCurve {
    /// `(iteration, objective, average error)` rows.
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainingCurve {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("iteration,cost,avg_error\n");
        for (i, c, e) in &self.rows {
            out.push_str(&format!("{},{},{}\n", i, c, e));
        }
        out
    }
}

/// Result of a joint gradient-descent run.
#[derive(Debug, Clone)]
pub struct JointDescentOutcome {
    pub control: ControlSignal,
    pub curve: TrainingCurve,
    pub converged: bool,
    pub final_residual_norm: f64,
    pub iterations: usize,
}

#[allow(clippy::too_many_arguments)]
fn joint_descent(
    model: &Model,
    readout: &ReadoutMap,
    view: &SubEnsembleView<'_>,
    problem: &QFoldedProblem,
    u_init: ControlSignal,
    reg: &JointRegularizer<'_>,
    step_size: f64,
    armijo: bool,
    max_iterations: usize,
    residual_target: Option<f64>,
) -> Result<JointDescentOutcome> {
    let mut u = u_init;
    let mut curve = TrainingCurve::default();
    let mut converged = false;
    let mut final_residual = f64::INFINITY;
    let mut iterations = 0;
    for iter in 0..=max_iterations {
        let (g, residual_norm) = joint_gradient(model, readout, view, &u, reg)?;
        let cost = joint_cost(model, problem, &u, reg)?;
        let avg = average_error(model, readout, &u, view)?;
        curve.rows.push((iter, cost, avg));
        final_residual = residual_norm;
        if let Some(target) = residual_target {
            if residual_norm <= target {
                converged = true;
                break;
            }
        }
        if iter == max_iterations {
            break;
        }
        if armijo {
            let slope = g.norm_squared();
            let mut t = step_size;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let candidate = u.offset(&g, -t)?;
                let c = joint_cost(model, problem, &candidate, reg)?;
                if c <= cost - 1e-4 * t * slope {
                    u = candidate;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // step size collapsed; no further progress is possible
                break;
            }
        } else {
            u = u.offset(&g, -step_size)?;
        }
        iterations = iter + 1;
    }
    Ok(JointDescentOutcome {
        control: u,
        curve,
        converged: converged || residual_target.is_none(),
        final_residual_norm: final_residual,
        iterations,
    })
}

#[derive(Debug, Clone)]
pub struct QFoldedConfig {
    pub step_size: f64,
    /// Stop once the stacked residual norm falls below this.
    pub residual_threshold: f64,
    pub max_iterations: usize,
    /// Coefficient of the discretized control-energy regularizer.
    pub reg_coeff: f64,
    pub armijo: bool,
}

impl Default for QFoldedConfig {
    fn default() -> Self {
        QFoldedConfig {
            step_size: 0.1,
            residual_threshold: 0.02,
            max_iterations: 5000,
            reg_coeff: 1e-3,
            armijo: true,
        }
    }
}

/// Trains a shared control on all samples of the view jointly by first-order
/// gradient descent on the folded Bolza objective. The control is initialized
/// entrywise Gaussian with standard deviation `0.1/√nbar` from `seed`.
pub fn qfolded_train(
    model: &Model,
    readout: &ReadoutMap,
    view: &SubEnsembleView<'_>,
    steps: usize,
    horizon: f64,
    config: &QFoldedConfig,
    seed: u64,
) -> Result<JointDescentOutcome> {
    let problem = QFoldedProblem::new(model, readout, view)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_dev = 0.1 / (model.nbar() as f64).sqrt();
    let u0 = ControlSignal::gaussian(model.params_per_step(), steps, horizon, std_dev, &mut rng);
    let reg = if config.reg_coeff == 0.0 {
        JointRegularizer::None
    } else {
        JointRegularizer::ControlNorm {
            coeff: config.reg_coeff,
        }
    };
    joint_descent(
        model,
        readout,
        view,
        &problem,
        u0,
        &reg,
        config.step_size,
        config.armijo,
        config.max_iterations,
        Some(config.residual_threshold),
    )
}

#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    /// Weight of the distance-to-reference penalty.
    pub lambda: f64,
    pub step_size: f64,
    /// Fixed iteration budget; the penalty method has no residual target.
    pub max_iterations: usize,
    pub armijo: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda: 1.0,
            step_size: 0.05,
            max_iterations: 2000,
            armijo: true,
        }
    }
}

/// Penalty-method fine-tuning: gradient descent over the full view on
/// `Σ_i ‖C·φ(ũ, x_i) − y_i‖² + λ·h·Σ_l ‖ũ_l − u0_l‖²`, starting from `u0`.
pub fn penalty_tune(
    model: &Model,
    readout: &ReadoutMap,
    view: &SubEnsembleView<'_>,
    u0: &ControlSignal,
    config: &PenaltyConfig,
) -> Result<JointDescentOutcome> {
    penalty_tune_from(model, readout, view, u0.clone(), u0, config)
}

/// [`penalty_tune`] with a separate starting iterate, used to resume a
/// penalized run in segments while keeping the original reference control.
pub fn penalty_tune_from(
    model: &Model,
    readout: &ReadoutMap,
    view: &SubEnsembleView<'_>,
    start: ControlSignal,
    reference: &ControlSignal,
    config: &PenaltyConfig,
) -> Result<JointDescentOutcome> {
    if config.lambda < 0.0 {
        return Err(Error::InvalidConfig("penalty lambda must be nonnegative".into()));
    }
    let problem = QFoldedProblem::new(model, readout, view)?;
    let reg = JointRegularizer::DistanceToReference {
        coeff: config.lambda,
        reference,
    };
    joint_descent(
        model,
        readout,
        view,
        &problem,
        start,
        &reg,
        config.step_size,
        config.armijo,
        config.max_iterations,
        None,
    )
}

/// Generic dense realization of one folded gradient iteration.
///
/// The folded system is treated as a single controlled ODE on the stacked
/// state space: the per-step control matrix is materialized as a
/// block-diagonal operator and both the forward Euler sweep and the backward
/// adjoint sweep are dense matrix–vector products on the full stacked
/// dimension. That is the cost model under which the folded method scales
/// quadratically in the ensemble size, and it is what the probe times. The
/// gradient it computes agrees with the per-sample assembly used by
/// [`qfolded_train`] (see the cross-check test).
///
/// The probe dynamics are the linear matrix-control system `ẋ = u(t)·x` with
/// `u(t) ∈ R^{n×n}` and a last-coordinate readout per sample.
pub struct DenseFoldedIteration {
    n: usize,
    q: usize,
    steps: usize,
    h: f64,
    step_size: f64,
    /// Per-step control matrices.
    u: Vec<DMatrix<f64>>,
    x0: DVector<f64>,
    y: DVector<f64>,
    /// Preallocated block-diagonal lifted operator; off-block entries stay 0.
    lifted: DMatrix<f64>,
    states: Vec<DVector<f64>>,
}

impl DenseFoldedIteration {
    pub fn new(n: usize, q: usize, steps: usize, step_size: f64, seed: u64) -> DenseFoldedIteration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.5 / (n as f64).sqrt();
        let u = (0..steps)
            .map(|_| {
                DMatrix::from_fn(n, n, |_, _| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    scale * z
                })
            })
            .collect();
        let x0 = DVector::from_fn(n * q, |_, _| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            0.5 * z
        });
        let y = DVector::from_fn(q, |_, _| {
            if rng.random_range(0.0..1.0) < 0.5 {
                -1.0
            } else {
                1.0
            }
        });
        let dim = n * q;
        DenseFoldedIteration {
            n,
            q,
            steps,
            h: 1.0 / steps as f64,
            step_size,
            u,
            x0,
            y,
            lifted: DMatrix::zeros(dim, dim),
            states: vec![DVector::zeros(dim); steps + 1],
        }
    }

    pub fn control(&self) -> &[DMatrix<f64>] {
        &self.u
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    /// Materializes the dense stacked operator for step `l` the way a
    /// structure-blind solver would: the full matrix is rebuilt, zeros
    /// included.
    fn build_lifted(&mut self, l: usize) {
        self.lifted.fill(0.0);
        for i in 0..self.q {
            self.lifted
                .view_mut((i * self.n, i * self.n), (self.n, self.n))
                .copy_from(&self.u[l]);
        }
    }

    /// One gradient iteration: dense forward sweep, dense backward adjoint
    /// sweep, control update. Returns the gradient blocks that were applied.
    pub fn gradient_iteration(&mut self) -> Vec<DMatrix<f64>> {
        let (n, q, steps, h) = (self.n, self.q, self.steps, self.h);
        let dim = n * q;
        // forward: x_{l+1} = x_l + h·(U_lift x_l)
        self.states[0].copy_from(&self.x0);
        let mut tmp = DVector::zeros(dim);
        for l in 0..steps {
            self.build_lifted(l);
            tmp.gemv(1.0, &self.lifted, &self.states[l], 0.0);
            let (head, tail) = self.states.split_at_mut(l + 1);
            tail[0].copy_from(&head[l]);
            tail[0].axpy(h, &tmp, 1.0);
        }
        // adjoint seed: λ_N = Λ(C)ᵀ · 2r, nonzero only on readout coordinates
        let mut lambda = DVector::zeros(dim);
        for i in 0..q {
            let out = self.states[steps][i * n + n - 1];
            lambda[i * n + n - 1] = 2.0 * (out - self.y[i]);
        }
        // backward: gradient block l is h·(∂F/∂u)ᵀλ_{l+1}, then
        // λ_l = (I + h·U_lift)ᵀ λ_{l+1} with the not-yet-updated control
        let mut grads = Vec::with_capacity(steps);
        for l in (0..steps).rev() {
            let mut g = DMatrix::zeros(n, n);
            for i in 0..q {
                let lam = lambda.rows(i * n, n);
                let x = self.states[l].rows(i * n, n);
                for a in 0..n {
                    let la = h * lam[a];
                    for b in 0..n {
                        g[(a, b)] += la * x[b];
                    }
                }
            }
            self.build_lifted(l);
            tmp.gemv_tr(1.0, &self.lifted, &lambda, 0.0);
            lambda.axpy(h, &tmp, 1.0);
            self.u[l] -= self.step_size * &g;
            grads.push(g);
        }
        grads.reverse();
        grads
    }
}

/// One scaling measurement.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub state_dim: usize,
    pub q: usize,
    pub steps: usize,
    pub seconds_per_iteration: f64,
}

pub fn scaling_to_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("n,q,N,seconds_per_iteration\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.state_dim, r.q, r.steps, r.seconds_per_iteration
        ));
    }
    out
}

/// Measures the wall time of one dense folded gradient iteration across
/// ensemble sizes. Each measurement warms up, then times enough iterations
/// for a stable average.
pub fn qfolded_iteration_cost_probe(
    n_list: &[usize],
    q_list: &[usize],
    steps: usize,
    seed: u64,
) -> Vec<ScalingRow> {
    let mut rows = Vec::new();
    for &n in n_list {
        for &q in q_list {
            // tiny step: the probe measures cost, not training progress
            let mut probe = DenseFoldedIteration::new(n, q, steps, 1e-6, seed);
            for _ in 0..2 {
                probe.gradient_iteration();
            }
            let mut iters = 4usize;
            let seconds_per_iteration;
            loop {
                let start = Instant::now();
                for _ in 0..iters {
                    probe.gradient_iteration();
                }
                let elapsed = start.elapsed().as_secs_f64();
                if elapsed >= 0.1 || iters >= 1 << 20 {
                    seconds_per_iteration = elapsed / iters as f64;
                    break;
                }
                iters *= 2;
            }
            rows.push(ScalingRow {
                state_dim: n,
                q,
                steps,
                seconds_per_iteration,
            });
        }
    }
    rows
}

/// Least-squares slope of `ln(seconds)` against `ln(q)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(q, _)| q.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| t.ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    num / den
}
