//! Stacked endpoint-Jacobian constraints and the orthogonal projector onto
//! their null space.
//!
//! The stacked matrix reserves one `n_out`-row block per sample index;
//! inactive blocks are zero rows. The projector is represented by an
//! orthonormal basis of the row space of the active blocks (small: at most
//! `n_out·q` rows), applied as `P(g) = g − Qᵀ(Q g)`. The full
//! `dim × dim` projector is never materialized.

use nalgebra::{DMatrix, DVector};

use crate::endpoint_jacobian::EndpointJacobian;
use crate::error::{Error, Result};

/// Stacked constraint matrix built from per-sample endpoint-Jacobian blocks.
#[derive(Debug, Clone)]
pub struct StackedConstraints {
    /// `(n_out · q_total) × control_dim`; rows of inactive samples stay zero.
    matrix: DMatrix<f64>,
    /// Sorted 1-based indices of samples whose block has been installed.
    active: Vec<usize>,
    n_out: usize,
    q_total: usize,
    control_dim: usize,
    cache: Option<(u64, KernelProjector)>,
}

impl StackedConstraints {
    pub fn new(n_out: usize, q_total: usize, control_dim: usize) -> StackedConstraints {
        StackedConstraints {
            matrix: DMatrix::zeros(n_out * q_total, control_dim),
            active: Vec::new(),
            n_out,
            q_total,
            control_dim,
            cache: None,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn q_total(&self) -> usize {
        self.q_total
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Rows of one sample's block.
    pub fn block(&self, sample_index: usize) -> Result<DMatrix<f64>> {
        self.check_index(sample_index)?;
        Ok(self
            .matrix
            .rows((sample_index - 1) * self.n_out, self.n_out)
            .into_owned())
    }

    fn check_index(&self, sample_index: usize) -> Result<()> {
        if sample_index == 0 || sample_index > self.q_total {
            return Err(Error::IndexOutOfRange {
                index: sample_index,
                capacity: self.q_total,
            });
        }
        Ok(())
    }

    /// Installs or replaces one sample's block; activates the sample if it was
    /// inactive and invalidates any cached projector.
    pub fn update_block(&mut self, sample_index: usize, jacobian: &EndpointJacobian) -> Result<()> {
        self.set_block(sample_index, jacobian.matrix())
    }

    /// Raw-matrix form of [`StackedConstraints::update_block`].
    pub fn set_block(&mut self, sample_index: usize, rows: &DMatrix<f64>) -> Result<()> {
        self.check_index(sample_index)?;
        if rows.nrows() != self.n_out {
            return Err(Error::Dimension {
                context: "stacked block rows",
                expected: self.n_out,
                actual: rows.nrows(),
            });
        }
        if rows.ncols() != self.control_dim {
            return Err(Error::Dimension {
                context: "stacked block columns",
                expected: self.control_dim,
                actual: rows.ncols(),
            });
        }
        self.matrix
            .rows_mut((sample_index - 1) * self.n_out, self.n_out)
            .copy_from(rows);
        if let Err(pos) = self.active.binary_search(&sample_index) {
            self.active.insert(pos, sample_index);
        }
        self.cache = None;
        Ok(())
    }

    /// Deactivates one sample's block, zeroing its rows.
    pub fn clear_block(&mut self, sample_index: usize) -> Result<()> {
        self.check_index(sample_index)?;
        self.matrix
            .rows_mut((sample_index - 1) * self.n_out, self.n_out)
            .fill(0.0);
        if let Ok(pos) = self.active.binary_search(&sample_index) {
            self.active.remove(pos);
        }
        self.cache = None;
        Ok(())
    }

    /// Compact matrix of the active blocks, in index order, optionally
    /// skipping one sample.
    fn active_rows(&self, exclude: Option<usize>) -> DMatrix<f64> {
        let kept: Vec<usize> = self
            .active
            .iter()
            .copied()
            .filter(|&i| Some(i) != exclude)
            .collect();
        let mut rows = DMatrix::zeros(kept.len() * self.n_out, self.control_dim);
        for (k, &idx) in kept.iter().enumerate() {
            rows.rows_mut(k * self.n_out, self.n_out)
                .copy_from(&self.matrix.rows((idx - 1) * self.n_out, self.n_out));
        }
        rows
    }

    /// Projector onto the null space of the active constraints, cached until
    /// the next block update.
    pub fn projector(&mut self, rank_tolerance: f64) -> Result<KernelProjector> {
        if let Some((tol_bits, cached)) = &self.cache {
            if *tol_bits == rank_tolerance.to_bits() {
                return Ok(cached.clone());
            }
        }
        let projector = kernel_projector(self, rank_tolerance)?;
        self.cache = Some((rank_tolerance.to_bits(), projector.clone()));
        Ok(projector)
    }

    /// Projector built from all active blocks except `exclude`, bypassing the
    /// cache. Used by round-robin refinement, where a sample's own endpoint is
    /// deliberately left unconstrained.
    pub fn projector_excluding(
        &self,
        exclude: usize,
        rank_tolerance: f64,
    ) -> Result<KernelProjector> {
        build_projector(
            self.active_rows(Some(exclude)),
            self.control_dim,
            rank_tolerance,
        )
    }
}

/// Stacks per-sample blocks into a constraint matrix with reserved capacity
/// `q_total`; samples outside `active_set` contribute zero rows.
pub fn build_stacked(
    blocks: &[EndpointJacobian],
    active_set: &[usize],
    q_total: usize,
) -> Result<StackedConstraints> {
    if active_set.is_empty() {
        if let Some(first) = blocks.first() {
            return Ok(StackedConstraints::new(
                first.matrix().nrows(),
                q_total,
                first.matrix().ncols(),
            ));
        }
        return Err(Error::InvalidConfig(
            "build_stacked with no blocks and no active set cannot infer dimensions".into(),
        ));
    }
    let find = |idx: usize| blocks.iter().find(|b| b.sample_index() == idx);
    let first = find(active_set[0]).ok_or(Error::MissingBlock {
        index: active_set[0],
    })?;
    let n_out = first.matrix().nrows();
    let control_dim = first.matrix().ncols();
    let mut stacked = StackedConstraints::new(n_out, q_total, control_dim);
    for &idx in active_set {
        let block = find(idx).ok_or(Error::MissingBlock { index: idx })?;
        stacked.update_block(idx, block)?;
    }
    Ok(stacked)
}

/// Orthogonal projector onto the kernel of the stacked constraints,
/// represented by an orthonormal row-space basis.
#[derive(Debug, Clone)]
pub struct KernelProjector {
    /// `rank × control_dim` orthonormal basis of the constraint row space.
    basis: DMatrix<f64>,
    control_dim: usize,
    rank_tolerance: f64,
}

impl KernelProjector {
    /// Numerical rank of the constraint matrix.
    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Orthogonal projection `g − Qᵀ(Q g)`. A rank-zero projector is the
    /// identity and returns `g` unchanged, bitwise.
    pub fn project(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.control_dim {
            return Err(Error::Dimension {
                context: "projection",
                expected: self.control_dim,
                actual: g.len(),
            });
        }
        if self.basis.nrows() == 0 {
            return Ok(g.clone());
        }
        let coeffs = &self.basis * g;
        Ok(g - self.basis.tr_mul(&coeffs))
    }
}

/// Free-function form of [`KernelProjector::project`].
pub fn project(projector: &KernelProjector, g: &DVector<f64>) -> Result<DVector<f64>> {
    projector.project(g)
}

/// Computes the kernel projector of all active constraints via a
/// rank-revealing singular value decomposition; singular values below
/// `rank_tolerance · σ_max` are treated as zero.
pub fn kernel_projector(
    stacked: &StackedConstraints,
    rank_tolerance: f64,
) -> Result<KernelProjector> {
    build_projector(stacked.active_rows(None), stacked.control_dim, rank_tolerance)
}

fn build_projector(
    rows: DMatrix<f64>,
    control_dim: usize,
    rank_tolerance: f64,
) -> Result<KernelProjector> {
    if rows.nrows() == 0 {
        return Ok(KernelProjector {
            basis: DMatrix::zeros(0, control_dim),
            control_dim,
            rank_tolerance,
        });
    }
    if !rows.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteValue("kernel projector input"));
    }
    let svd = rows.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(Error::NonFiniteValue("singular value decomposition"))?;
    let sigma_max = svd.singular_values.max();
    let rank = if sigma_max == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|&&s| s >= rank_tolerance * sigma_max)
            .count()
    };
    Ok(KernelProjector {
        basis: v_t.rows(0, rank).into_owned(),
        control_dim,
        rank_tolerance,
    })
}
