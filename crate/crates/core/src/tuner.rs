//! Tuning without forgetting.
//!
//! Phase 1 learns newly added samples by gradient descent projected onto the
//! kernel of the memorized samples' stacked endpoint Jacobians, so memorized
//! endpoints move only at second order in the step. Phase 2 shrinks the
//! control norm inside the same kernel. Phase 3 refines all samples
//! round-robin, each step constrained by every sample except the one being
//! refined. One refinement round is phase 2 followed by phase 3.

use nalgebra::DVector;

use crate::dynamics::{ControlSignal, Model, ReadoutMap};
use crate::endpoint_jacobian::{cost_gradient, endpoint_jacobian, per_sample_cost};
use crate::ensemble::{average_error, Ensemble};
use crate::error::{Error, Result};
use crate::kernel_projection::StackedConstraints;

const MAX_BACKTRACKS: usize = 40;

/// Model, readout, and data shared by every tuning phase.
#[derive(Clone, Copy)]
pub struct TuneContext<'a> {
    pub model: &'a Model,
    pub readout: &'a ReadoutMap,
    pub ensemble: &'a Ensemble,
}

#[derive(Debug, Clone)]
pub struct TunerConfig {
    /// Gradient step size α.
    pub step_size: f64,
    /// Backtracking line search on the active per-sample cost. Guarantees
    /// that no accepted step increases it.
    pub armijo: bool,
    pub armijo_contraction: f64,
    pub armijo_slope: f64,
    /// Per-sample cost below which a sample counts as memorized.
    pub convergence_cost_threshold: f64,
    pub max_inner_iterations: usize,
    /// Passes per sample in phase 3; zero disables the phase.
    pub refinement_passes: usize,
    /// Refinement rounds run by the full pipeline.
    pub rounds: usize,
    pub rank_tolerance: f64,
    /// Phase 2 stops once the relative decrease of ‖u‖² falls below this.
    pub regularization_target_tolerance: f64,
    /// Phase 2 rolls back and stops if a memorized cost exceeds
    /// `max(drift_budget_factor · pre-phase cost, convergence threshold)`.
    pub drift_budget_factor: f64,
    /// Refresh memorized blocks every k-th inner iteration (1 = every one).
    pub block_recompute_every: usize,
    /// Cap on ‖δu‖ per accepted step: the line search starts at
    /// `min(step_size, max_step_norm/‖d‖)`. Keeps early steps inside the
    /// region where the first-order forgetting guarantee is meaningful;
    /// infinite by default.
    pub max_step_norm: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            step_size: 0.05,
            armijo: true,
            armijo_contraction: 0.5,
            armijo_slope: 1e-4,
            convergence_cost_threshold: 1e-4,
            max_inner_iterations: 500,
            refinement_passes: 1,
            rounds: 2,
            rank_tolerance: 1e-10,
            regularization_target_tolerance: 1e-6,
            drift_budget_factor: 2.0,
            block_recompute_every: 1,
            max_step_norm: f64::INFINITY,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("convergence_cost_threshold", self.convergence_cost_threshold),
            ("rank_tolerance", self.rank_tolerance),
            (
                "regularization_target_tolerance",
                self.regularization_target_tolerance,
            ),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{} must be positive", name)));
            }
        }
        let c = self.armijo_contraction;
        if c.is_nan() || c <= 0.0 || c >= 1.0 {
            return Err(Error::InvalidConfig(
                "armijo_contraction must lie in (0, 1)".into(),
            ));
        }
        if self.armijo_slope.is_nan() || self.armijo_slope < 0.0 {
            return Err(Error::InvalidConfig("armijo_slope must be nonnegative".into()));
        }
        if self.max_inner_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_inner_iterations must be at least 1".into(),
            ));
        }
        if self.block_recompute_every == 0 {
            return Err(Error::InvalidConfig(
                "block_recompute_every must be at least 1".into(),
            ));
        }
        if self.drift_budget_factor.is_nan() || self.drift_budget_factor < 1.0 {
            return Err(Error::InvalidConfig(
                "drift_budget_factor must be at least 1".into(),
            ));
        }
        // infinity is fine here: it disables the cap
        if self.max_step_norm.is_nan() || self.max_step_norm <= 0.0 {
            return Err(Error::InvalidConfig("max_step_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    PhaseOne,
    PhaseTwo,
    PhaseThree,
}

impl PhaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::PhaseOne => "phase1",
            PhaseKind::PhaseTwo => "phase2",
            PhaseKind::PhaseThree => "phase3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    DriftBudget,
    Completed,
}

/// One history entry per executed phase (per sample in phase 1).
#[derive(Debug, Clone)]
pub struct PhaseRecord {
    /// Strictly increasing sequence stamp.
    pub seq: u64,
    pub round: usize,
    pub phase: PhaseKind,
    /// Sample the record refers to (phase 1 only).
    pub sample_index: Option<usize>,
    pub iterations: usize,
    /// Max over applied updates δu of ‖L·δu‖ / (‖L‖·‖δu‖).
    pub max_kernel_residual_ratio: f64,
    /// Max increase of the active per-sample cost over accepted steps;
    /// nonpositive whenever the line search is enabled.
    pub max_cost_increase: f64,
    pub stop: StopReason,
}

/// Mutable state threaded through the tuning phases.
pub struct TuningState {
    u: ControlSignal,
    memorized: Vec<usize>,
    stacked: StackedConstraints,
    config: TunerConfig,
    history: Vec<PhaseRecord>,
    blocks_version: u64,
    seq: u64,
    rounds_done: usize,
}

impl TuningState {
    /// Seeds the state with `memorized = {1..j}` and their endpoint-Jacobian
    /// blocks computed at `u0`.
    pub fn new(
        ctx: TuneContext<'_>,
        u0: ControlSignal,
        j: usize,
        config: TunerConfig,
    ) -> Result<TuningState> {
        config.validate()?;
        let q = ctx.ensemble.len();
        if j > q {
            return Err(Error::IndexOutOfRange {
                index: j,
                capacity: q,
            });
        }
        let mut stacked = StackedConstraints::new(ctx.readout.n_out(), q, u0.dim());
        for i in 1..=j {
            let jac = endpoint_jacobian(ctx.model, ctx.readout, &u0, ctx.ensemble.sample(i)?)?;
            stacked.update_block(i, &jac)?;
        }
        let blocks_version = u0.version();
        Ok(TuningState {
            u: u0,
            memorized: (1..=j).collect(),
            stacked,
            config,
            history: Vec::new(),
            blocks_version,
            seq: 0,
            rounds_done: 0,
        })
    }

    pub fn control(&self) -> &ControlSignal {
        &self.u
    }

    pub fn into_control(self) -> ControlSignal {
        self.u
    }

    pub fn memorized(&self) -> &[usize] {
        &self.memorized
    }

    pub fn history(&self) -> &[PhaseRecord] {
        &self.history
    }

    pub fn config(&self) -> &TunerConfig {
        &self.config
    }

    pub fn stacked(&self) -> &StackedConstraints {
        &self.stacked
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    fn record(&mut self, mut rec: PhaseRecord) {
        self.seq += 1;
        rec.seq = self.seq;
        self.history.push(rec);
    }

    /// Recomputes every memorized block at the current control.
    fn refresh_blocks(&mut self, ctx: TuneContext<'_>) -> Result<()> {
        for idx in self.memorized.clone() {
            let jac = endpoint_jacobian(ctx.model, ctx.readout, &self.u, ctx.ensemble.sample(idx)?)?;
            self.stacked.update_block(idx, &jac)?;
        }
        self.blocks_version = self.u.version();
        Ok(())
    }

    fn blocks_stale(&self) -> bool {
        self.blocks_version != self.u.version()
    }
}

/// Ratio ‖L·d‖ / (‖L‖·‖d‖) measuring how far an update leaves the kernel.
fn kernel_residual_ratio(stacked: &StackedConstraints, d: &DVector<f64>) -> f64 {
    if stacked.active().is_empty() {
        return 0.0;
    }
    let dn = d.norm();
    let ln = stacked.matrix().norm();
    if dn == 0.0 || ln == 0.0 {
        return 0.0;
    }
    (stacked.matrix() * d).norm() / (ln * dn)
}

/// One descent step on a per-sample cost along `−d`, with optional Armijo
/// backtracking. Returns the new control, its cost, and whether a step was
/// accepted at all.
fn descend(
    ctx: TuneContext<'_>,
    u: &ControlSignal,
    sample_index: usize,
    cost0: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    config: &TunerConfig,
) -> Result<(ControlSignal, f64, bool)> {
    let sample = ctx.ensemble.sample(sample_index)?;
    let dn = d.norm();
    let t0 = if dn > 0.0 && config.step_size * dn > config.max_step_norm {
        config.max_step_norm / dn
    } else {
        config.step_size
    };
    if !config.armijo {
        let next = u.offset(d, -t0)?;
        let cost = per_sample_cost(ctx.model, ctx.readout, &next, sample)?.value;
        return Ok((next, cost, true));
    }
    let slope = g.dot(d);
    let mut t = t0;
    for _ in 0..MAX_BACKTRACKS {
        let candidate = u.offset(d, -t)?;
        let cost = per_sample_cost(ctx.model, ctx.readout, &candidate, sample)?.value;
        if cost <= cost0 - config.armijo_slope * t * slope {
            return Ok((candidate, cost, true));
        }
        t *= config.armijo_contraction;
    }
    Ok((u.clone(), cost0, false))
}

/// Phase 1: for each new sample in order, repeat kernel-projected gradient
/// steps on its cost — refreshing every memorized block after each accepted
/// update — until the cost falls below the convergence threshold, then add
/// the sample to the memorized set and install its block.
pub fn phase1(state: &mut TuningState, ctx: TuneContext<'_>, new_indices: &[usize]) -> Result<()> {
    let config = state.config.clone();
    for &i in new_indices {
        let sample = ctx.ensemble.sample(i)?;
        let mut iterations = 0;
        let mut since_refresh = config.block_recompute_every; // force a refresh check on entry
        let mut max_ratio = 0.0f64;
        let mut max_increase = f64::NEG_INFINITY;
        loop {
            let cost = per_sample_cost(ctx.model, ctx.readout, &state.u, sample)?;
            if cost.value <= config.convergence_cost_threshold {
                break;
            }
            if iterations >= config.max_inner_iterations {
                state.record(PhaseRecord {
                    seq: 0,
                    round: state.rounds_done,
                    phase: PhaseKind::PhaseOne,
                    sample_index: Some(i),
                    iterations,
                    max_kernel_residual_ratio: max_ratio,
                    max_cost_increase: finite_or_zero(max_increase),
                    stop: StopReason::MaxIterations,
                });
                return Err(Error::NonConvergence {
                    index: i,
                    iterations,
                    cost: cost.value,
                });
            }
            if state.blocks_stale() && since_refresh >= config.block_recompute_every {
                state.refresh_blocks(ctx)?;
                since_refresh = 0;
            }
            let projector = state.stacked.projector(config.rank_tolerance)?;
            let jac = endpoint_jacobian(ctx.model, ctx.readout, &state.u, sample)?;
            let g = cost_gradient(&jac, &cost.residual, &state.u)?;
            let d = projector.project(&g)?;
            max_ratio = max_ratio.max(kernel_residual_ratio(state.stacked(), &d));
            let (next, new_cost, accepted) =
                descend(ctx, &state.u, i, cost.value, &g, &d, &config)?;
            if !accepted {
                state.record(PhaseRecord {
                    seq: 0,
                    round: state.rounds_done,
                    phase: PhaseKind::PhaseOne,
                    sample_index: Some(i),
                    iterations,
                    max_kernel_residual_ratio: max_ratio,
                    max_cost_increase: finite_or_zero(max_increase),
                    stop: StopReason::MaxIterations,
                });
                return Err(Error::NonConvergence {
                    index: i,
                    iterations,
                    cost: cost.value,
                });
            }
            max_increase = max_increase.max(new_cost - cost.value);
            state.u = next;
            iterations += 1;
            since_refresh += 1;
        }
        // Bring every block current at the converged control and constrain
        // the sample from now on.
        state.refresh_blocks(ctx)?;
        let jac = endpoint_jacobian(ctx.model, ctx.readout, &state.u, sample)?;
        state.stacked.update_block(i, &jac)?;
        if let Err(pos) = state.memorized.binary_search(&i) {
            state.memorized.insert(pos, i);
        }
        state.blocks_version = state.u.version();
        state.record(PhaseRecord {
            seq: 0,
            round: state.rounds_done,
            phase: PhaseKind::PhaseOne,
            sample_index: Some(i),
            iterations,
            max_kernel_residual_ratio: max_ratio,
            max_cost_increase: finite_or_zero(max_increase),
            stop: StopReason::Converged,
        });
    }
    Ok(())
}

fn finite_or_zero(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// Phase 2: projected descent on the control norm inside the kernel of all
/// memorized blocks, stopping when the relative decrease of ‖u‖² drops below
/// the target tolerance, the iteration budget runs out, or a memorized
/// sample's cost would exceed its drift budget (in which case the offending
/// iterate is rolled back).
pub fn phase2(state: &mut TuningState, ctx: TuneContext<'_>) -> Result<()> {
    let config = state.config.clone();
    let memorized = state.memorized.clone();
    let mut budgets = Vec::with_capacity(memorized.len());
    for &idx in &memorized {
        let pre = per_sample_cost(ctx.model, ctx.readout, &state.u, ctx.ensemble.sample(idx)?)?;
        budgets.push((
            idx,
            (config.drift_budget_factor * pre.value).max(config.convergence_cost_threshold),
        ));
    }

    let mut iterations = 0;
    let mut max_ratio = 0.0f64;
    let mut stop = StopReason::MaxIterations;
    let mut norm_prev = state.u.norm_squared();
    while iterations < config.max_inner_iterations {
        if state.blocks_stale() {
            state.refresh_blocks(ctx)?;
        }
        let projector = state.stacked.projector(config.rank_tolerance)?;
        let d = projector.project(&state.u.flat_vector())?;
        max_ratio = max_ratio.max(kernel_residual_ratio(state.stacked(), &d));
        let candidate = state.u.offset(&d, -config.step_size)?;
        let mut violated = false;
        for &(idx, budget) in &budgets {
            let c = per_sample_cost(ctx.model, ctx.readout, &candidate, ctx.ensemble.sample(idx)?)?;
            if c.value > budget {
                violated = true;
                break;
            }
        }
        if violated {
            stop = StopReason::DriftBudget;
            break;
        }
        state.u = candidate;
        iterations += 1;
        let norm_new = state.u.norm_squared();
        let rel_decrease = (norm_prev - norm_new) / norm_prev.max(f64::MIN_POSITIVE);
        if rel_decrease < config.regularization_target_tolerance {
            stop = StopReason::Converged;
            break;
        }
        norm_prev = norm_new;
    }
    state.record(PhaseRecord {
        seq: 0,
        round: state.rounds_done,
        phase: PhaseKind::PhaseTwo,
        sample_index: None,
        iterations,
        max_kernel_residual_ratio: max_ratio,
        max_cost_increase: 0.0,
        stop,
    });
    Ok(())
}

/// Phase 3: `refinement_passes` round-robin passes over the memorized
/// samples. For each sample, every other block is recomputed at the current
/// control, the sample's own block is removed from the constraints, and one
/// projected descent step is taken on its cost.
pub fn phase3(state: &mut TuningState, ctx: TuneContext<'_>) -> Result<()> {
    let config = state.config.clone();
    let indices = state.memorized.clone();
    let mut iterations = 0;
    let mut max_ratio = 0.0f64;
    let mut max_increase = f64::NEG_INFINITY;
    for _pass in 0..config.refinement_passes {
        for &i in &indices {
            let sample = ctx.ensemble.sample(i)?;
            for &l in &indices {
                if l == i {
                    continue;
                }
                let jac =
                    endpoint_jacobian(ctx.model, ctx.readout, &state.u, ctx.ensemble.sample(l)?)?;
                state.stacked.update_block(l, &jac)?;
            }
            // the refined sample's endpoint is deliberately unconstrained
            state.stacked.clear_block(i)?;
            state.blocks_version = state.u.version();
            let projector = state.stacked.projector(config.rank_tolerance)?;
            let cost = per_sample_cost(ctx.model, ctx.readout, &state.u, sample)?;
            let jac = endpoint_jacobian(ctx.model, ctx.readout, &state.u, sample)?;
            let g = cost_gradient(&jac, &cost.residual, &state.u)?;
            let d = projector.project(&g)?;
            max_ratio = max_ratio.max(kernel_residual_ratio(state.stacked(), &d));
            let (next, new_cost, accepted) =
                descend(ctx, &state.u, i, cost.value, &g, &d, &config)?;
            if accepted {
                max_increase = max_increase.max(new_cost - cost.value);
                state.u = next;
            }
            iterations += 1;
        }
    }
    state.record(PhaseRecord {
        seq: 0,
        round: state.rounds_done,
        phase: PhaseKind::PhaseThree,
        sample_index: None,
        iterations,
        max_kernel_residual_ratio: max_ratio,
        max_cost_increase: finite_or_zero(max_increase),
        stop: StopReason::Completed,
    });
    Ok(())
}

/// Runs `rounds` consecutive (phase 2, phase 3) pairs.
pub fn refinement_rounds(
    state: &mut TuningState,
    ctx: TuneContext<'_>,
    rounds: usize,
) -> Result<()> {
    for _ in 0..rounds {
        state.rounds_done += 1;
        phase2(state, ctx)?;
        phase3(state, ctx)?;
    }
    Ok(())
}

/// One row of the tuning report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub round: usize,
    pub phase: String,
    pub set: String,
    pub metric: String,
    pub value: f64,
}

/// Per-phase metrics on the original prefix ("memorized"), the expansion
/// ("new"), and the full ensemble ("all").
#[derive(Debug, Clone, Default)]
pub struct TuningReport {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

impl TuningReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("round,phase,set,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round, r.phase, r.set, r.metric, r.value
            ));
        }
        out
    }

    pub fn value(&self, round: usize, phase: &str, set: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.round == round && r.phase == phase && r.set == set && r.metric == metric)
            .map(|r| r.value)
    }

    /// Appends the standard metric block (per-set average error and cost sum,
    /// control norm, optional iteration count) for one phase event.
    pub fn push_metrics(
        &mut self,
        ctx: TuneContext<'_>,
        u: &ControlSignal,
        j: usize,
        round: usize,
        phase: &str,
        iterations: Option<usize>,
    ) -> Result<()> {
        let q = ctx.ensemble.len();
        for (name, lo, hi) in [("memorized", 0, j), ("new", j, q), ("all", 0, q)] {
            if hi == lo {
                continue;
            }
            let view = ctx.ensemble.view(lo, hi)?;
            let avg = average_error(ctx.model, ctx.readout, u, &view)?;
            let mut cost_sum = 0.0;
            for sample in view.iter() {
                cost_sum += per_sample_cost(ctx.model, ctx.readout, u, sample)?.value;
            }
            self.rows.push(ReportRow {
                round,
                phase: phase.into(),
                set: name.into(),
                metric: "avg_error".into(),
                value: avg,
            });
            self.rows.push(ReportRow {
                round,
                phase: phase.into(),
                set: name.into(),
                metric: "cost_sum".into(),
                value: cost_sum,
            });
        }
        self.rows.push(ReportRow {
            round,
            phase: phase.into(),
            set: "all".into(),
            metric: "u_norm_sq".into(),
            value: u.norm_squared(),
        });
        if let Some(iters) = iterations {
            self.rows.push(ReportRow {
                round,
                phase: phase.into(),
                set: "all".into(),
                metric: "iterations".into(),
                value: iters as f64,
            });
        }
        Ok(())
    }
}

/// Full pipeline: verify the starting control on the prefix, run phase 1 on
/// the expansion indices, then the configured refinement rounds, reporting
/// metrics after each phase (round 0 rows describe the unmodified `u0`).
pub fn tune_without_forgetting(
    ctx: TuneContext<'_>,
    u0: &ControlSignal,
    j: usize,
    config: &TunerConfig,
) -> Result<(ControlSignal, TuningReport)> {
    let q = ctx.ensemble.len();
    let mut state = TuningState::new(ctx, u0.clone(), j, config.clone())?;
    let mut report = TuningReport::default();

    for i in 1..=j {
        let cost = per_sample_cost(ctx.model, ctx.readout, u0, ctx.ensemble.sample(i)?)?;
        if cost.value > config.convergence_cost_threshold {
            report.warnings.push(format!(
                "sample {} is not memorized by the starting control (cost {:e} > threshold {:e})",
                i, cost.value, config.convergence_cost_threshold
            ));
        }
    }

    report.push_metrics(ctx, &state.u, j, 0, "init", None)?;

    let new_indices: Vec<usize> = (j + 1..=q).collect();
    phase1(&mut state, ctx, &new_indices)?;
    let phase1_iters: usize = state
        .history
        .iter()
        .filter(|r| r.phase == PhaseKind::PhaseOne)
        .map(|r| r.iterations)
        .sum();
    report.push_metrics(ctx, &state.u, j, 0, "phase1", Some(phase1_iters))?;

    for round in 1..=config.rounds {
        state.rounds_done = round;
        phase2(&mut state, ctx)?;
        let iters = state.history.last().map(|r| r.iterations).unwrap_or(0);
        report.push_metrics(ctx, &state.u, j, round, "phase2", Some(iters))?;
        phase3(&mut state, ctx)?;
        let iters = state.history.last().map(|r| r.iterations).unwrap_or(0);
        report.push_metrics(ctx, &state.u, j, round, "phase3", Some(iters))?;
    }

    Ok((state.into_control(), report))
}
