//! Controlled model family, piecewise-constant control signals, the explicit
//! Euler flow, and analytic Jacobians with respect to state and control.
//!
//! Two model kinds are supported: a two-layer form
//! `ẋ = W2(t)·tanh(W1(t)x + b1(t)) + b2(t)` whose four weight objects are all
//! time-varying controls (vectorized per step), and a generic control-affine
//! form `ẋ = Σ_d u_d(t) f_d(x)`.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Monotone counter behind control version stamps. Every construction or
/// mutation of a [`ControlSignal`] draws a fresh stamp, so a Jacobian computed
/// for one control can never be mistaken for another's.
static CONTROL_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    CONTROL_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// One control field of a control-affine system `ẋ = Σ_d u_d f_d(x)`.
#[derive(Debug, Clone)]
pub enum AffineField {
    /// `f(x) = c`.
    Constant(DVector<f64>),
    /// `f(x) = A x`.
    Linear(DMatrix<f64>),
}

impl AffineField {
    fn state_dim(&self) -> usize {
        match self {
            AffineField::Constant(c) => c.len(),
            AffineField::Linear(a) => a.nrows(),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            AffineField::Constant(c) => c.clone(),
            AffineField::Linear(a) => a * x,
        }
    }

    fn jacobian(&self, dim: usize) -> DMatrix<f64> {
        match self {
            AffineField::Constant(_) => DMatrix::zeros(dim, dim),
            AffineField::Linear(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    TwoLayerTanh,
    ControlAffine(Vec<AffineField>),
}

/// A controlled vector field on the lifted state space of dimension `nbar`.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    nbar: usize,
}

impl Model {
    pub fn two_layer_tanh(nbar: usize) -> Model {
        Model {
            kind: ModelKind::TwoLayerTanh,
            nbar,
        }
    }

    pub fn control_affine(nbar: usize, fields: Vec<AffineField>) -> Result<Model> {
        for f in &fields {
            if f.state_dim() != nbar {
                return Err(Error::Dimension {
                    context: "control-affine field",
                    expected: nbar,
                    actual: f.state_dim(),
                });
            }
            if let AffineField::Linear(a) = f {
                if a.ncols() != nbar {
                    return Err(Error::Dimension {
                        context: "control-affine field columns",
                        expected: nbar,
                        actual: a.ncols(),
                    });
                }
            }
        }
        Ok(Model {
            kind: ModelKind::ControlAffine(fields),
            nbar,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ModelKind::TwoLayerTanh => "two-layer-tanh",
            ModelKind::ControlAffine(_) => "control-affine",
        }
    }

    pub fn nbar(&self) -> usize {
        self.nbar
    }

    /// Control parameters per time step: `2·nbar² + 2·nbar` for the two-layer
    /// form (vectorized `W1, b1, W2, b2`), the field count otherwise.
    pub fn params_per_step(&self) -> usize {
        match &self.kind {
            ModelKind::TwoLayerTanh => 2 * self.nbar * self.nbar + 2 * self.nbar,
            ModelKind::ControlAffine(fields) => fields.len(),
        }
    }
}

/// Piecewise-constant control over `[0, T]`: `steps` uniform intervals, each
/// holding a parameter vector of length `params_per_step`.
///
/// Stored column-major with one column per step, so the flat layout is
/// `[step 0 | step 1 | …]` — the same block order the endpoint Jacobian uses.
#[derive(Debug, Clone)]
pub struct ControlSignal {
    /// `params_per_step × steps`.
    values: DMatrix<f64>,
    horizon: f64,
    version: u64,
}

impl ControlSignal {
    pub fn zeros(params_per_step: usize, steps: usize, horizon: f64) -> ControlSignal {
        ControlSignal {
            values: DMatrix::zeros(params_per_step, steps),
            horizon,
            version: next_version(),
        }
    }

    pub fn from_matrix(values: DMatrix<f64>, horizon: f64) -> Result<ControlSignal> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "control needs at least one step and one parameter".into(),
            ));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidConfig("control horizon must be positive".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue("control signal"));
        }
        Ok(ControlSignal {
            values,
            horizon,
            version: next_version(),
        })
    }

    /// Entrywise Gaussian initialization with the given standard deviation.
    pub fn gaussian<R: Rng>(
        params_per_step: usize,
        steps: usize,
        horizon: f64,
        std_dev: f64,
        rng: &mut R,
    ) -> ControlSignal {
        let values = DMatrix::from_fn(params_per_step, steps, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            std_dev * z
        });
        ControlSignal {
            values,
            horizon,
            version: next_version(),
        }
    }

    pub fn steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn params_per_step(&self) -> usize {
        self.values.nrows()
    }

    /// Total number of scalar control parameters, `params_per_step · steps`.
    pub fn dim(&self) -> usize {
        self.values.nrows() * self.values.ncols()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Euler step size `h = T / N`.
    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    /// Parameter vector held on step `l` (0-based).
    pub fn step(&self, l: usize) -> &[f64] {
        let p = self.params_per_step();
        &self.values.as_slice()[l * p..(l + 1) * p]
    }

    pub fn as_flat(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn flat_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.values.as_slice())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.norm_squared()
    }

    /// Returns `u + scale·direction` as a new control with a fresh version.
    pub fn offset(&self, direction: &DVector<f64>, scale: f64) -> Result<ControlSignal> {
        if direction.len() != self.dim() {
            return Err(Error::Dimension {
                context: "control offset",
                expected: self.dim(),
                actual: direction.len(),
            });
        }
        let mut values = self.values.clone();
        for (v, d) in values.as_mut_slice().iter_mut().zip(direction.iter()) {
            *v += scale * d;
        }
        ControlSignal::from_matrix(values, self.horizon)
    }
}

/// Discrete trajectory of one sample under one control: states `x_0..x_N`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn state(&self, l: usize) -> &DVector<f64> {
        &self.states[l]
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Fixed linear readout `x ↦ C x`.
#[derive(Debug, Clone)]
pub struct ReadoutMap {
    c: DMatrix<f64>,
}

impl ReadoutMap {
    /// Canonical form `C = [0 | I]`: reads the last `n_out` lifted coordinates.
    pub fn canonical(n_out: usize, nbar: usize) -> Result<ReadoutMap> {
        if n_out == 0 || n_out > nbar {
            return Err(Error::Dimension {
                context: "readout rows",
                expected: nbar,
                actual: n_out,
            });
        }
        let mut c = DMatrix::zeros(n_out, nbar);
        for r in 0..n_out {
            c[(r, nbar - n_out + r)] = 1.0;
        }
        Ok(ReadoutMap { c })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn n_out(&self) -> usize {
        self.c.nrows()
    }

    pub fn nbar(&self) -> usize {
        self.c.ncols()
    }

    pub fn apply(&self, xbar: &DVector<f64>) -> Result<DVector<f64>> {
        if xbar.len() != self.c.ncols() {
            return Err(Error::Dimension {
                context: "readout",
                expected: self.c.ncols(),
                actual: xbar.len(),
            });
        }
        Ok(&self.c * xbar)
    }
}

/// Zero-padding embedding of an input point into the lifted state space.
pub fn uplift(x: &DVector<f64>, nbar: usize) -> Result<DVector<f64>> {
    if nbar < x.len() {
        return Err(Error::Dimension {
            context: "uplift",
            expected: x.len(),
            actual: nbar,
        });
    }
    let mut out = DVector::zeros(nbar);
    out.rows_mut(0, x.len()).copy_from(x);
    Ok(out)
}

/// Flattens `(W1, b1, W2, b2)` into a per-step parameter vector with layout
/// `[vec(W1) row-major | b1 | vec(W2) row-major | b2]`.
pub fn vectorize(
    w1: &DMatrix<f64>,
    b1: &DVector<f64>,
    w2: &DMatrix<f64>,
    b2: &DVector<f64>,
) -> Result<DVector<f64>> {
    let nbar = b1.len();
    let square = |m: &DMatrix<f64>, context| {
        if m.nrows() != nbar || m.ncols() != nbar {
            Err(Error::Dimension {
                context,
                expected: nbar,
                actual: m.nrows().max(m.ncols()),
            })
        } else {
            Ok(())
        }
    };
    square(w1, "vectorize W1")?;
    square(w2, "vectorize W2")?;
    if b2.len() != nbar {
        return Err(Error::Dimension {
            context: "vectorize b2",
            expected: nbar,
            actual: b2.len(),
        });
    }
    let p = 2 * nbar * nbar + 2 * nbar;
    let mut out = DVector::zeros(p);
    let mut k = 0;
    for r in 0..nbar {
        for c in 0..nbar {
            out[k] = w1[(r, c)];
            k += 1;
        }
    }
    for r in 0..nbar {
        out[k] = b1[r];
        k += 1;
    }
    for r in 0..nbar {
        for c in 0..nbar {
            out[k] = w2[(r, c)];
            k += 1;
        }
    }
    for r in 0..nbar {
        out[k] = b2[r];
        k += 1;
    }
    Ok(out)
}

/// The two-layer weight objects `(W1, b1, W2, b2)`.
pub type TwoLayerParams = (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>);

/// Inverse of [`vectorize`].
pub fn devectorize(u_step: &[f64], nbar: usize) -> Result<TwoLayerParams> {
    let p = 2 * nbar * nbar + 2 * nbar;
    if u_step.len() != p {
        return Err(Error::Dimension {
            context: "devectorize",
            expected: p,
            actual: u_step.len(),
        });
    }
    let nn = nbar * nbar;
    let w1 = DMatrix::from_row_slice(nbar, nbar, &u_step[0..nn]);
    let b1 = DVector::from_column_slice(&u_step[nn..nn + nbar]);
    let w2 = DMatrix::from_row_slice(nbar, nbar, &u_step[nn + nbar..2 * nn + nbar]);
    let b2 = DVector::from_column_slice(&u_step[2 * nn + nbar..p]);
    Ok((w1, b1, w2, b2))
}

fn check_step_dims(model: &Model, u_step: &[f64], x: &DVector<f64>) -> Result<()> {
    if u_step.len() != model.params_per_step() {
        return Err(Error::Dimension {
            context: "control step",
            expected: model.params_per_step(),
            actual: u_step.len(),
        });
    }
    if x.len() != model.nbar() {
        return Err(Error::Dimension {
            context: "state",
            expected: model.nbar(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Evaluates the controlled vector field `f(u, x)`.
pub fn eval_rhs(model: &Model, u_step: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
    check_step_dims(model, u_step, x)?;
    let out = match &model.kind {
        ModelKind::TwoLayerTanh => {
            let (w1, b1, w2, b2) = devectorize(u_step, model.nbar())?;
            let s = (w1 * x + b1).map(f64::tanh);
            w2 * s + b2
        }
        ModelKind::ControlAffine(fields) => {
            let mut out = DVector::zeros(model.nbar());
            for (d, f) in fields.iter().enumerate() {
                out += u_step[d] * f.eval(x);
            }
            out
        }
    };
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteValue("vector field evaluation"));
    }
    Ok(out)
}

/// Analytic Jacobian `∂f/∂x`, an `nbar × nbar` matrix.
///
/// For the two-layer form this is `W2 · diag(1 − tanh²(W1 x + b1)) · W1`.
pub fn jac_state(model: &Model, u_step: &[f64], x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_step_dims(model, u_step, x)?;
    match &model.kind {
        ModelKind::TwoLayerTanh => {
            let (w1, b1, w2, _) = devectorize(u_step, model.nbar())?;
            let s = (&w1 * x + b1).map(f64::tanh);
            // tanh' computed as 1 − tanh² for stability
            let d = s.map(|v| 1.0 - v * v);
            let mut w2d = w2;
            for c in 0..model.nbar() {
                let scale = d[c];
                w2d.column_mut(c).scale_mut(scale);
            }
            Ok(w2d * w1)
        }
        ModelKind::ControlAffine(fields) => {
            let mut out = DMatrix::zeros(model.nbar(), model.nbar());
            for (d, f) in fields.iter().enumerate() {
                out += u_step[d] * f.jacobian(model.nbar());
            }
            Ok(out)
        }
    }
}

/// Analytic Jacobian `∂f/∂u` in the fixed per-step vectorization, an
/// `nbar × params_per_step` matrix.
///
/// Two-layer blocks, with `z = W1 x + b1`, `s = tanh(z)`, `D = diag(1 − s²)`:
/// `∂f/∂W1[c,d] = (W2 D)[:,c]·x[d]`, `∂f/∂b1 = W2 D`,
/// `∂f/∂W2[c,d] = e_c·s[d]`, `∂f/∂b2 = I`.
/// Control-affine columns are `[f_1(x) … f_p(x)]`, independent of `u`.
pub fn jac_control(model: &Model, u_step: &[f64], x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_step_dims(model, u_step, x)?;
    let nbar = model.nbar();
    match &model.kind {
        ModelKind::TwoLayerTanh => {
            let (w1, b1, w2, _) = devectorize(u_step, nbar)?;
            let s = (w1 * x + b1).map(f64::tanh);
            let d = s.map(|v| 1.0 - v * v);
            let mut w2d = w2;
            for c in 0..nbar {
                let scale = d[c];
                w2d.column_mut(c).scale_mut(scale);
            }
            let nn = nbar * nbar;
            let p = 2 * nn + 2 * nbar;
            let mut out = DMatrix::zeros(nbar, p);
            // ∂f/∂W1: column (c,d) is (W2 D)[:,c] scaled by x[d]
            for c in 0..nbar {
                for dd in 0..nbar {
                    let col = c * nbar + dd;
                    for a in 0..nbar {
                        out[(a, col)] = w2d[(a, c)] * x[dd];
                    }
                }
            }
            // ∂f/∂b1
            for c in 0..nbar {
                let col = nn + c;
                for a in 0..nbar {
                    out[(a, col)] = w2d[(a, c)];
                }
            }
            // ∂f/∂W2: row c only, value s[d]
            for c in 0..nbar {
                for dd in 0..nbar {
                    out[(c, nn + nbar + c * nbar + dd)] = s[dd];
                }
            }
            // ∂f/∂b2 = identity
            for c in 0..nbar {
                out[(c, 2 * nn + nbar + c)] = 1.0;
            }
            Ok(out)
        }
        ModelKind::ControlAffine(fields) => {
            let mut out = DMatrix::zeros(nbar, fields.len());
            for (d, f) in fields.iter().enumerate() {
                out.column_mut(d).copy_from(&f.eval(x));
            }
            Ok(out)
        }
    }
}

/// Explicit Euler flow from a lifted initial state: `N` steps of size
/// `h = T/N`, returning all `N + 1` states. Fails fast with the step index if
/// a non-finite state appears.
pub fn flow(model: &Model, u: &ControlSignal, x0_lifted: &DVector<f64>) -> Result<Trajectory> {
    if x0_lifted.len() != model.nbar() {
        return Err(Error::Dimension {
            context: "flow initial state",
            expected: model.nbar(),
            actual: x0_lifted.len(),
        });
    }
    if u.params_per_step() != model.params_per_step() {
        return Err(Error::Dimension {
            context: "flow control",
            expected: model.params_per_step(),
            actual: u.params_per_step(),
        });
    }
    let h = u.step_size();
    let n = u.steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0_lifted.clone());
    let mut x = x0_lifted.clone();
    for l in 0..n {
        let rhs = eval_rhs(model, u.step(l), &x).map_err(|e| match e {
            Error::NonFiniteValue(_) => Error::NonFiniteState { step: l + 1 },
            other => other,
        })?;
        x += h * rhs;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { step: l + 1 });
        }
        states.push(x.clone());
    }
    Ok(Trajectory { states })
}

/// Header of a control checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHeader {
    pub kind: String,
    pub nbar: usize,
    pub params_per_step: usize,
    pub steps: usize,
    pub horizon: f64,
}

/// Serializes a control to the checkpoint format: a header line followed by
/// one line of decimal values per step. Values round-trip bit-faithfully via
/// shortest decimal formatting.
pub fn control_to_string(model: &Model, u: &ControlSignal) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# control v1 model={} nbar={} p={} N={} T={}\n",
        model.kind_name(),
        model.nbar(),
        u.params_per_step(),
        u.steps(),
        u.horizon()
    ));
    for l in 0..u.steps() {
        let step = u.step(l);
        for (d, v) in step.iter().enumerate() {
            if d > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{}", v));
        }
        out.push('\n');
    }
    out
}

pub fn save_control(path: &Path, model: &Model, u: &ControlSignal) -> Result<()> {
    std::fs::write(path, control_to_string(model, u))?;
    Ok(())
}

pub fn parse_control(text: &str) -> Result<(ControlHeader, ControlSignal)> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty control file".into(),
    })?;
    let header = parse_control_header(header_line)?;
    let mut values = DMatrix::zeros(header.params_per_step, header.steps);
    let mut filled = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if filled >= header.steps {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("more than {} step lines", header.steps),
            });
        }
        let mut col = values.column_mut(filled);
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count >= header.params_per_step {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("more than {} values on step line", header.params_per_step),
                });
            }
            col[count] = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("bad value {:?}: {}", tok, e),
            })?;
            count += 1;
        }
        if count != header.params_per_step {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected {} values, got {}", header.params_per_step, count),
            });
        }
        filled += 1;
    }
    if filled != header.steps {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected {} step lines, got {}", header.steps, filled),
        });
    }
    let u = ControlSignal::from_matrix(values, header.horizon)?;
    Ok((header, u))
}

pub fn load_control(path: &Path) -> Result<(ControlHeader, ControlSignal)> {
    let text = std::fs::read_to_string(path)?;
    parse_control(&text)
}

fn parse_control_header(line: &str) -> Result<ControlHeader> {
    let err = |message: String| Error::Parse { line: 1, message };
    let rest = line
        .strip_prefix("# control v1 ")
        .ok_or_else(|| err("expected '# control v1' header".into()))?;
    let mut kind = None;
    let mut nbar = None;
    let mut p = None;
    let mut steps = None;
    let mut horizon = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("bad header field {:?}", field)))?;
        match key {
            "model" => kind = Some(value.to_string()),
            "nbar" => nbar = Some(value.parse().map_err(|_| err(format!("bad nbar {:?}", value)))?),
            "p" => p = Some(value.parse().map_err(|_| err(format!("bad p {:?}", value)))?),
            "N" => steps = Some(value.parse().map_err(|_| err(format!("bad N {:?}", value)))?),
            "T" => horizon = Some(value.parse().map_err(|_| err(format!("bad T {:?}", value)))?),
            other => return Err(err(format!("unknown header field {:?}", other))),
        }
    }
    Ok(ControlHeader {
        kind: kind.ok_or_else(|| err("missing model".into()))?,
        nbar: nbar.ok_or_else(|| err("missing nbar".into()))?,
        params_per_step: p.ok_or_else(|| err("missing p".into()))?,
        steps: steps.ok_or_else(|| err("missing N".into()))?,
        horizon: horizon.ok_or_else(|| err("missing T".into()))?,
    })
}

/// Scalar test system `ẋ = u·x` (one linear field, state dimension 1).
pub fn scalar_multiplicative() -> Model {
    Model::control_affine(1, vec![AffineField::Linear(DMatrix::identity(1, 1))])
        .expect("valid 1-d model")
}

/// Scalar test system `ẋ = u` (one constant field, state dimension 1).
pub fn scalar_additive() -> Model {
    Model::control_affine(1, vec![AffineField::Constant(DVector::from_element(1, 1.0))])
        .expect("valid 1-d model")
}
