//! Multi-mode truncated Fock-space linear algebra.
//!
//! A [`HilbertSpaceLayout`] fixes an ordered list of labelled modes. The first
//! listed mode is the slowest-varying tensor index, so a basis index decomposes
//! into per-mode occupations like the digits of a mixed-radix number.
//!
//! Everything is dense. The largest protocol-level space (two cavities of at
//! most 12 levels and two transmons) stays below dimension 600.

use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Label used for standalone single-mode operators.
pub const SINGLE_MODE: &str = "a";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mode {
    pub label: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HilbertSpaceLayout {
    modes: Vec<Mode>,
    strides: Vec<usize>,
    total_dim: usize,
}

impl HilbertSpaceLayout {
    pub fn new(modes: &[(&str, usize)]) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidDimension {
                dim: 0,
                reason: "layout needs at least one mode",
            });
        }
        let mut out: Vec<Mode> = Vec::with_capacity(modes.len());
        for &(label, dim) in modes {
            if dim == 0 {
                return Err(Error::InvalidDimension {
                    dim,
                    reason: "mode dimension must be positive",
                });
            }
            if out.iter().any(|m| m.label == label) {
                return Err(Error::DuplicateLabel(label.to_string()));
            }
            out.push(Mode {
                label: label.to_string(),
                dim,
            });
        }
        let mut strides = vec![1; out.len()];
        for k in (0..out.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * out[k + 1].dim;
        }
        let total_dim = out.iter().map(|m| m.dim).product();
        Ok(Self {
            modes: out,
            strides,
            total_dim,
        })
    }

    pub fn single(dim: usize) -> Result<Self> {
        Self::new(&[(SINGLE_MODE, dim)])
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn position(&self, label: &str) -> Result<usize> {
        self.modes
            .iter()
            .position(|m| m.label == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.modes.iter().any(|m| m.label == label)
    }

    pub fn dim_of(&self, label: &str) -> Result<usize> {
        Ok(self.modes[self.position(label)?].dim)
    }

    pub fn stride(&self, pos: usize) -> usize {
        self.strides[pos]
    }

    /// Occupation of mode `pos` in basis index `index`.
    pub fn digit(&self, index: usize, pos: usize) -> usize {
        (index / self.strides[pos]) % self.modes[pos].dim
    }

    pub fn digits(&self, index: usize) -> Vec<usize> {
        (0..self.modes.len()).map(|p| self.digit(index, p)).collect()
    }

    pub fn index_of(&self, digits: &[usize]) -> Result<usize> {
        if digits.len() != self.modes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.modes.len(),
                got: digits.len(),
            });
        }
        let mut idx = 0;
        for (p, &d) in digits.iter().enumerate() {
            if d >= self.modes[p].dim {
                return Err(Error::DimensionMismatch {
                    expected: self.modes[p].dim,
                    got: d,
                });
            }
            idx += d * self.strides[p];
        }
        Ok(idx)
    }

    /// Layout restricted to `labels`, keeping this layout's ordering.
    pub fn subset(&self, labels: &[&str]) -> Result<Self> {
        for l in labels {
            self.position(l)?;
        }
        let kept: Vec<(&str, usize)> = self
            .modes
            .iter()
            .filter(|m| labels.contains(&m.label.as_str()))
            .map(|m| (m.label.as_str(), m.dim))
            .collect();
        Self::new(&kept)
    }
}

/// Dense operator on a layout, matrix side equals `layout.total_dim()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    layout: HilbertSpaceLayout,
    matrix: CMatrix,
}

impl Operator {
    pub fn new(layout: HilbertSpaceLayout, matrix: CMatrix) -> Result<Self> {
        let n = layout.total_dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: matrix.nrows().max(matrix.ncols()),
            });
        }
        Ok(Self { layout, matrix })
    }

    pub fn identity(layout: &HilbertSpaceLayout) -> Self {
        let n = layout.total_dim();
        Self {
            layout: layout.clone(),
            matrix: CMatrix::identity(n, n),
        }
    }

    pub fn zeros(layout: &HilbertSpaceLayout) -> Self {
        let n = layout.total_dim();
        Self {
            layout: layout.clone(),
            matrix: CMatrix::zeros(n, n),
        }
    }

    pub fn from_diagonal(layout: &HilbertSpaceLayout, diag: &[C64]) -> Result<Self> {
        let m = CMatrix::from_diagonal(&CVector::from_column_slice(diag));
        Self::new(layout.clone(), m)
    }

    pub fn layout(&self) -> &HilbertSpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dagger(&self) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self {
            layout: self.layout.clone(),
            matrix: &self.matrix * s,
        }
    }

    pub fn scale_real(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn apply(&self, v: &CVector) -> CVector {
        &self.matrix * v
    }

    pub fn commutator(&self, other: &Self) -> Self {
        &(self * other) - &(other * self)
    }

    /// Largest entry of |A - A^dagger|.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(&self.matrix - self.matrix.adjoint()))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.matrix[(i, j)].norm() <= tol))
    }

    pub fn diagonal(&self) -> Vec<C64> {
        self.matrix.diagonal().iter().copied().collect()
    }

    /// Spectral norm bound used by step-size guards.
    pub fn max_abs_eigenvalue(&self) -> f64 {
        let (vals, _) = hermitian_eigen(&self.matrix);
        vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn expectation(&self, v: &CVector) -> C64 {
        v.dotc(&(&self.matrix * v))
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        let mut modes: Vec<(&str, usize)> = self
            .layout
            .modes()
            .iter()
            .map(|m| (m.label.as_str(), m.dim))
            .collect();
        modes.extend(
            other
                .layout
                .modes()
                .iter()
                .map(|m| (m.label.as_str(), m.dim)),
        );
        let layout = HilbertSpaceLayout::new(&modes)?;
        Ok(Self {
            layout,
            matrix: self.matrix.kronecker(&other.matrix),
        })
    }

    /// Relabel the operator's single mode layout, keeping the matrix.
    pub fn with_layout(&self, layout: &HilbertSpaceLayout) -> Result<Self> {
        Self::new(layout.clone(), self.matrix.clone())
    }
}

fn check_same(a: &HilbertSpaceLayout, b: &HilbertSpaceLayout) {
    assert_eq!(a, b, "operator layouts differ");
}

impl<'a> Mul<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn mul(self, rhs: &'a Operator) -> Operator {
        check_same(&self.layout, &rhs.layout);
        Operator {
            layout: self.layout.clone(),
            matrix: &self.matrix * &rhs.matrix,
        }
    }
}

impl<'a> Add<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn add(self, rhs: &'a Operator) -> Operator {
        check_same(&self.layout, &rhs.layout);
        Operator {
            layout: self.layout.clone(),
            matrix: &self.matrix + &rhs.matrix,
        }
    }
}

impl<'a> Sub<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn sub(self, rhs: &'a Operator) -> Operator {
        check_same(&self.layout, &rhs.layout);
        Operator {
            layout: self.layout.clone(),
            matrix: &self.matrix - &rhs.matrix,
        }
    }
}

fn check_mode_dim(dim: usize, min: usize) -> Result<()> {
    if dim < min {
        return Err(Error::InvalidDimension {
            dim,
            reason: if min == 2 {
                "ladder operators need dim >= 2"
            } else {
                "dimension must be positive"
            },
        });
    }
    Ok(())
}

/// Truncated bosonic lowering operator, `<n-1|a|n> = sqrt(n)`.
pub fn annihilation(dim: usize) -> Result<Operator> {
    check_mode_dim(dim, 2)?;
    let mut m = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    Operator::new(HilbertSpaceLayout::single(dim)?, m)
}

pub fn creation(dim: usize) -> Result<Operator> {
    Ok(annihilation(dim)?.dagger())
}

pub fn number(dim: usize) -> Result<Operator> {
    check_mode_dim(dim, 1)?;
    let diag: Vec<C64> = (0..dim).map(|n| C64::new(n as f64, 0.0)).collect();
    Operator::from_diagonal(&HilbertSpaceLayout::single(dim)?, &diag)
}

/// Photon-number parity `exp(i pi a^dagger a)`.
pub fn parity(dim: usize) -> Result<Operator> {
    check_mode_dim(dim, 1)?;
    let diag: Vec<C64> = (0..dim)
        .map(|n| if n % 2 == 0 { ONE } else { -ONE })
        .collect();
    Operator::from_diagonal(&HilbertSpaceLayout::single(dim)?, &diag)
}

pub fn single_identity(dim: usize) -> Result<Operator> {
    check_mode_dim(dim, 1)?;
    Ok(Operator::identity(&HilbertSpaceLayout::single(dim)?))
}

/// `|row><col|` on a single mode.
pub fn transition(dim: usize, row: usize, col: usize) -> Result<Operator> {
    check_mode_dim(dim, 1)?;
    let mut m = CMatrix::zeros(dim, dim);
    m[(row, col)] = ONE;
    Operator::new(HilbertSpaceLayout::single(dim)?, m)
}

/// Smallest dimension accepted by [`displacement`] for a given `beta`.
pub fn displacement_min_dim(beta: C64) -> usize {
    (4.0 * beta.norm_sqr()).ceil() as usize
}

/// Displacement `exp(beta a^dagger - beta* a)` by dense matrix exponential.
///
/// The truncated generator is anti-Hermitian, so the result is unitary; its
/// matrix elements are only trustworthy on the lower part of the space, hence
/// the `|beta|^2 <= dim/4` guard.
pub fn displacement(beta: C64, dim: usize) -> Result<Operator> {
    check_mode_dim(dim, 2)?;
    let beta_sq = beta.norm_sqr();
    if 4.0 * beta_sq > dim as f64 {
        return Err(Error::TruncationRisk {
            dim,
            beta_sq,
            recommended: displacement_min_dim(beta),
        });
    }
    let a = annihilation(dim)?;
    let gen = &a.dagger().scale(beta) - &a.scale(beta.conj());
    let m = gen.into_matrix().exp();
    Operator::new(HilbertSpaceLayout::single(dim)?, m)
}

/// `op` acting on mode `label` of `layout`, identity elsewhere.
pub fn embed(op: &Operator, layout: &HilbertSpaceLayout, label: &str) -> Result<Operator> {
    let pos = layout.position(label)?;
    let mode_dim = layout.modes()[pos].dim;
    if op.dim() != mode_dim {
        return Err(Error::DimensionMismatch {
            expected: mode_dim,
            got: op.dim(),
        });
    }
    let before: usize = layout.modes()[..pos].iter().map(|m| m.dim).product();
    let after: usize = layout.modes()[pos + 1..].iter().map(|m| m.dim).product();
    let m = CMatrix::identity(before, before)
        .kronecker(op.matrix())
        .kronecker(&CMatrix::identity(after, after));
    Operator::new(layout.clone(), m)
}

/// Operator on several modes (in the order given by `labels`, each listed
/// layout-order contiguous or not) embedded into `layout`.
///
/// `op` must be defined on the tensor product of the named modes taken in the
/// order they appear in `layout`.
pub fn embed_multi(op: &CMatrix, layout: &HilbertSpaceLayout, labels: &[&str]) -> Result<Operator> {
    let mut positions: Vec<usize> = labels
        .iter()
        .map(|l| layout.position(l))
        .collect::<Result<_>>()?;
    positions.sort_unstable();
    let sub_dims: Vec<usize> = positions.iter().map(|&p| layout.modes()[p].dim).collect();
    let sub_dim: usize = sub_dims.iter().product();
    if op.nrows() != sub_dim || op.ncols() != sub_dim {
        return Err(Error::DimensionMismatch {
            expected: sub_dim,
            got: op.nrows(),
        });
    }
    let n = layout.total_dim();
    let split = |idx: usize| -> (usize, usize) {
        // (sub-index, index with the selected digits zeroed)
        let mut sub = 0;
        let mut rest = idx;
        for &p in &positions {
            let d = layout.digit(idx, p);
            sub = sub * layout.modes()[p].dim + d;
            rest -= d * layout.stride(p);
        }
        (sub, rest)
    };
    let parts: Vec<(usize, usize)> = (0..n).map(split).collect();
    let mut m = CMatrix::zeros(n, n);
    for i in 0..n {
        let (si, ri) = parts[i];
        for j in 0..n {
            let (sj, rj) = parts[j];
            if ri == rj {
                m[(i, j)] = op[(si, sj)];
            }
        }
    }
    Operator::new(layout.clone(), m)
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure {
        layout: HilbertSpaceLayout,
        vector: CVector,
    },
    Mixed {
        layout: HilbertSpaceLayout,
        matrix: CMatrix,
    },
}

pub const PURE_NORM_TOL: f64 = 1e-12;
pub const MIXED_HERMITIAN_TOL: f64 = 1e-12;
pub const MIXED_TRACE_TOL: f64 = 1e-10;
pub const MIXED_EIGEN_FLOOR: f64 = -1e-10;

impl QuantumState {
    /// Validated pure state.
    pub fn pure(layout: HilbertSpaceLayout, vector: CVector) -> Result<Self> {
        if vector.len() != layout.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.total_dim(),
                got: vector.len(),
            });
        }
        let norm = vector.norm();
        if (norm - 1.0).abs() > PURE_NORM_TOL {
            return Err(Error::InvalidState(format!("norm {norm} != 1")));
        }
        Ok(Self::Pure { layout, vector })
    }

    /// Pure state after normalizing `vector`.
    pub fn pure_normalized(layout: HilbertSpaceLayout, vector: CVector) -> Result<Self> {
        let norm = vector.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidState("zero or non-finite vector".into()));
        }
        Self::pure(layout, vector / C64::new(norm, 0.0))
    }

    /// Validated density operator.
    pub fn mixed(layout: HilbertSpaceLayout, matrix: CMatrix) -> Result<Self> {
        let n = layout.total_dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: matrix.nrows(),
            });
        }
        let herm = max_abs(&(&matrix - matrix.adjoint()));
        if herm > MIXED_HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian ({herm:e})")));
        }
        let tr = matrix.trace();
        if (tr.re - 1.0).abs() > MIXED_TRACE_TOL || tr.im.abs() > MIXED_TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} != 1")));
        }
        let (vals, _) = hermitian_eigen(&matrix);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < MIXED_EIGEN_FLOOR {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(Self::Mixed { layout, matrix })
    }

    /// Density operator built without validation (used inside integrators
    /// where invariants are checked by tests rather than per step).
    pub fn mixed_unchecked(layout: HilbertSpaceLayout, matrix: CMatrix) -> Self {
        Self::Mixed { layout, matrix }
    }

    /// Fock product state `|d_0, d_1, ...>`.
    pub fn basis(layout: &HilbertSpaceLayout, digits: &[usize]) -> Result<Self> {
        let idx = layout.index_of(digits)?;
        let mut v = CVector::zeros(layout.total_dim());
        v[idx] = ONE;
        Self::pure(layout.clone(), v)
    }

    pub fn layout(&self) -> &HilbertSpaceLayout {
        match self {
            Self::Pure { layout, .. } | Self::Mixed { layout, .. } => layout,
        }
    }

    pub fn is_pure_kind(&self) -> bool {
        matches!(self, Self::Pure { .. })
    }

    pub fn vector(&self) -> Option<&CVector> {
        match self {
            Self::Pure { vector, .. } => Some(vector),
            Self::Mixed { .. } => None,
        }
    }

    pub fn density(&self) -> CMatrix {
        match self {
            Self::Pure { vector, .. } => vector * vector.adjoint(),
            Self::Mixed { matrix, .. } => matrix.clone(),
        }
    }

    pub fn to_mixed(&self) -> Self {
        Self::Mixed {
            layout: self.layout().clone(),
            matrix: self.density(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Self::Pure { vector, .. } => vector.norm_squared(),
            Self::Mixed { matrix, .. } => matrix.trace().re,
        }
    }

    pub fn purity(&self) -> f64 {
        match self {
            Self::Pure { vector, .. } => vector.norm_squared().powi(2),
            Self::Mixed { matrix, .. } => (matrix * matrix).trace().re,
        }
    }

    pub fn expectation(&self, op: &Operator) -> C64 {
        match self {
            Self::Pure { vector, .. } => op.expectation(vector),
            Self::Mixed { matrix, .. } => (op.matrix() * matrix).trace(),
        }
    }

    /// `U |psi>` or `U rho U^dagger`.
    pub fn evolve(&self, u: &Operator) -> Self {
        check_same(self.layout(), u.layout());
        match self {
            Self::Pure { layout, vector } => Self::Pure {
                layout: layout.clone(),
                vector: u.matrix() * vector,
            },
            Self::Mixed { layout, matrix } => Self::Mixed {
                layout: layout.clone(),
                matrix: u.matrix() * matrix * u.matrix().adjoint(),
            },
        }
    }

    /// Overlap `<target|rho|target>` with a pure target.
    pub fn overlap_with(&self, target: &CVector) -> f64 {
        match self {
            Self::Pure { vector, .. } => target.dotc(vector).norm_sqr(),
            Self::Mixed { matrix, .. } => target.dotc(&(matrix * target)).re,
        }
    }

    /// Reduced state on the modes in `keep`.
    pub fn partial_trace(&self, keep: &[&str]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::EmptyKeep);
        }
        let layout = self.layout();
        let kept_layout = layout.subset(keep)?;
        let groups = trace_groups(layout, &kept_layout)?;
        let k = kept_layout.total_dim();
        let mut out = CMatrix::zeros(k, k);
        match self {
            Self::Pure { vector, .. } => {
                for group in &groups {
                    for &(ki, ai) in group {
                        let va = vector[ai];
                        if va == ZERO {
                            continue;
                        }
                        for &(kj, aj) in group {
                            out[(ki, kj)] += va * vector[aj].conj();
                        }
                    }
                }
            }
            Self::Mixed { matrix, .. } => {
                for group in &groups {
                    for &(ki, ai) in group {
                        for &(kj, aj) in group {
                            out[(ki, kj)] += matrix[(ai, aj)];
                        }
                    }
                }
            }
        }
        Ok(Self::Mixed {
            layout: kept_layout,
            matrix: out,
        })
    }

    /// Tensor product, `self` modes first.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let mut modes: Vec<(&str, usize)> = self
            .layout()
            .modes()
            .iter()
            .map(|m| (m.label.as_str(), m.dim))
            .collect();
        modes.extend(
            other
                .layout()
                .modes()
                .iter()
                .map(|m| (m.label.as_str(), m.dim)),
        );
        let layout = HilbertSpaceLayout::new(&modes)?;
        Ok(match (self, other) {
            (Self::Pure { vector: a, .. }, Self::Pure { vector: b, .. }) => Self::Pure {
                layout,
                vector: a.kronecker(b),
            },
            _ => Self::Mixed {
                layout,
                matrix: self.density().kronecker(&other.density()),
            },
        })
    }
}

/// For every assignment of the traced-out modes, the list of
/// `(kept index, full index)` pairs sharing it.
fn trace_groups(
    layout: &HilbertSpaceLayout,
    kept: &HilbertSpaceLayout,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let kept_pos: Vec<usize> = kept
        .modes()
        .iter()
        .map(|m| layout.position(&m.label))
        .collect::<Result<_>>()?;
    let traced_dim = layout.total_dim() / kept.total_dim();
    let mut groups = vec![Vec::with_capacity(kept.total_dim()); traced_dim];
    for a in 0..layout.total_dim() {
        let mut k = 0;
        let mut t = 0;
        for p in 0..layout.modes().len() {
            let d = layout.digit(a, p);
            if kept_pos.contains(&p) {
                k = k * layout.modes()[p].dim + d;
            } else {
                t = t * layout.modes()[p].dim + d;
            }
        }
        groups[t].push((k, a));
    }
    Ok(groups)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Eigen-decomposition of a Hermitian matrix; eigenvalues ascending.
///
/// nalgebra's complex tridiagonal QR occasionally returns non-finite values on
/// sparse inputs, so its result is checked against `H V = V Λ` and replaced
/// by a cyclic Jacobi solve when the check fails.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let n = m.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    let scale = max_abs(&sym).max(1.0);
    let ok = vals.iter().all(|v| v.is_finite())
        && vecs.iter().all(|z| z.re.is_finite() && z.im.is_finite())
        && {
            let lam = CMatrix::from_diagonal(&CVector::from_iterator(n, vals.iter().map(|&v| C64::new(v, 0.0))));
            max_abs(&(&sym * &vecs - &vecs * lam)) < 1e-9 * scale
        };
    if ok {
        (vals, vecs)
    } else {
        jacobi_eigen(sym)
    }
}

/// Cyclic Jacobi rotations for a Hermitian matrix; eigenvalues ascending.
pub fn jacobi_eigen(mut h: CMatrix) -> (Vec<f64>, CMatrix) {
    let n = h.nrows();
    let mut v = CMatrix::identity(n, n);
    let norm = h.norm().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += h[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-15 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let c = h[(p, q)];
                let mag = c.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let a = h[(p, p)].re;
                let b = h[(q, q)].re;
                let zeta = (b - a) / (2.0 * mag);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * cs;
                let ph = (c / mag).conj();
                // G = diag(1, e^{-iφ}) · [[cs, sn], [-sn, cs]]
                let g = [[C64::new(cs, 0.0), C64::new(sn, 0.0)], [ph * -sn, ph * cs]];
                for k in 0..n {
                    let (hp, hq) = (h[(k, p)], h[(k, q)]);
                    h[(k, p)] = hp * g[0][0] + hq * g[1][0];
                    h[(k, q)] = hp * g[0][1] + hq * g[1][1];
                    let (vp, vq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = vp * g[0][0] + vq * g[1][0];
                    v[(k, q)] = vp * g[0][1] + vq * g[1][1];
                }
                for k in 0..n {
                    let (hp, hq) = (h[(p, k)], h[(q, k)]);
                    h[(p, k)] = g[0][0].conj() * hp + g[1][0].conj() * hq;
                    h[(q, k)] = g[0][1].conj() * hp + g[1][1].conj() * hq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[(a, a)].re.total_cmp(&h[(b, b)].re));
    let vals = order.iter().map(|&k| h[(k, k)].re).collect();
    let mut vecs = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &v.column(src));
    }
    (vals, vecs)
}

/// `exp(-i H t)` for Hermitian `H` via eigendecomposition.
pub fn unitary_step(h: &CMatrix, t: f64) -> CMatrix {
    let (vals, v) = hermitian_eigen(h);
    let phases: Vec<C64> = vals.iter().map(|&l| C64::from_polar(1.0, -l * t)).collect();
    let d = CMatrix::from_diagonal(&CVector::from_vec(phases));
    &v * d * v.adjoint()
}

/// Principal square root of a positive semidefinite Hermitian matrix.
pub fn sqrt_psd(m: &CMatrix) -> CMatrix {
    let (vals, v) = hermitian_eigen(m);
    let roots: Vec<C64> = vals
        .iter()
        .map(|&l| C64::new(l.max(0.0).sqrt(), 0.0))
        .collect();
    &v * CMatrix::from_diagonal(&CVector::from_vec(roots)) * v.adjoint()
}

/// Complete a set of orthonormal input/output vector pairs to a unitary that
/// maps each input to its output, rotates the remainder of their joint span
/// onto itself, and acts as identity on everything orthogonal to that span.
pub fn unitary_from_transfers(inputs: &[CVector], outputs: &[CVector]) -> Result<CMatrix> {
    if inputs.is_empty() || inputs.len() != outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            got: outputs.len(),
        });
    }
    let n = inputs[0].len();
    // joint span basis: inputs, outputs, then Gram-Schmidt
    let mut span: Vec<CVector> = Vec::new();
    for v in inputs.iter().chain(outputs.iter()) {
        push_orthonormal(&mut span, v.clone());
    }
    let mut in_basis: Vec<CVector> = Vec::new();
    for v in inputs {
        push_orthonormal(&mut in_basis, v.clone());
    }
    let mut out_basis: Vec<CVector> = Vec::new();
    for v in outputs {
        push_orthonormal(&mut out_basis, v.clone());
    }
    if in_basis.len() != inputs.len() || out_basis.len() != outputs.len() {
        return Err(Error::InvalidState(
            "transfer inputs/outputs must be linearly independent".into(),
        ));
    }
    for v in &span {
        push_orthonormal(&mut in_basis, v.clone());
        push_orthonormal(&mut out_basis, v.clone());
    }
    let mut u = CMatrix::identity(n, n);
    // remove identity on the span
    for s in &span {
        u -= s * s.adjoint();
    }
    for (k, (src, dst)) in in_basis.iter().zip(out_basis.iter()).enumerate() {
        let (src, dst) = if k < inputs.len() {
            (&inputs[k], &outputs[k])
        } else {
            (src, dst)
        };
        u += dst * src.adjoint();
    }
    Ok(u)
}

fn push_orthonormal(basis: &mut Vec<CVector>, mut v: CVector) {
    for _ in 0..2 {
        for b in basis.iter() {
            let c = b.dotc(&v);
            v -= b * c;
        }
    }
    let norm = v.norm();
    if norm > 1e-9 {
        basis.push(v / C64::new(norm, 0.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ket(dim: usize, n: usize) -> CVector {
        let mut v = CVector::zeros(dim);
        v[n] = ONE;
        v
    }

    fn check_eigen(m: &CMatrix, vals: &[f64], vecs: &CMatrix) {
        let n = m.nrows();
        let lam = CMatrix::from_diagonal(&CVector::from_iterator(n, vals.iter().map(|&v| C64::new(v, 0.0))));
        assert!(max_abs(&(m * vecs - vecs * lam)) < 1e-10);
        assert!(max_abs(&(vecs.adjoint() * vecs - CMatrix::identity(n, n))) < 1e-10);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn jacobi_matches_definition() {
        let m = CMatrix::from_fn(7, 7, |i, j| C64::new((i * j) as f64 * 0.1 + 1.0 / (1.0 + i as f64 + j as f64), i as f64 - j as f64));
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        let (vals, vecs) = jacobi_eigen(h.clone());
        check_eigen(&h, &vals, &vecs);
    }

    #[test]
    fn tiny_entries_do_not_break_eigen() {
        // cos(π/2)-sized residues from building cardinal states, embedded in a
        // sparse code isometry, underflow inside the tridiagonal QR
        let w = crate::protocol::Protocol::new(
            &crate::hamiltonians::SystemParams::paper_defaults(),
            crate::protocol::ProtocolOptions::ideal(crate::codes::CodeKind::Binomial),
        )
        .unwrap()
        .logical_isometry()
        .unwrap();
        for k in [7, 8, 13, 14] {
            let logical = &crate::tomography::cardinal_inputs(2)[k];
            let rho = &w * logical * w.adjoint();
            let (vals, vecs) = hermitian_eigen(&rho);
            check_eigen(&rho, &vals, &vecs);
            assert!((vals[vals.len() - 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn annihilation_ladder() {
        let a = annihilation(3).unwrap();
        let out = a.apply(&ket(3, 2));
        assert_abs_diff_eq!(out[1].re, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(out.iter().filter(|z| z.norm() > 0.0).count(), 1);
        assert!(a.apply(&ket(3, 0)).iter().all(|z| z.norm() == 0.0));
        let n = &a.dagger() * &a;
        let n5 = &annihilation(5).unwrap().dagger() * &annihilation(5).unwrap();
        for k in 0..5 {
            assert_abs_diff_eq!(n5.matrix()[(k, k)].re, k as f64, epsilon = 1e-15);
        }
        assert!(n.is_diagonal(0.0));
    }

    #[test]
    fn annihilation_rejects_small_dim() {
        assert!(matches!(
            annihilation(1),
            Err(Error::InvalidDimension { dim: 1, .. })
        ));
    }

    #[test]
    fn parity_signs() {
        let p = parity(5).unwrap();
        assert_abs_diff_eq!(p.apply(&ket(5, 2))[2].re, 1.0);
        assert_abs_diff_eq!(p.apply(&ket(5, 3))[3].re, -1.0);
        assert!(parity(0).is_err());
    }

    #[test]
    fn displacement_examples() {
        let d0 = displacement(ZERO, 8).unwrap();
        assert!(max_abs(&(d0.matrix() - CMatrix::identity(8, 8))) < 1e-14);
        let d = displacement(ONE, 30).unwrap();
        let coh = d.apply(&ket(30, 0));
        let nbar = number(30).unwrap().expectation(&coh).re;
        assert_abs_diff_eq!(nbar, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn displacement_inverse_pair() {
        // direct matrix product oracle
        for &(re, im) in &[(2.0, 0.0), (0.0, -1.5), (1.2, 1.4), (-0.3, 0.9)] {
            let b = C64::new(re, im);
            let p = displacement(b, 30).unwrap().matrix() * displacement(-b, 30).unwrap().matrix();
            assert!(max_abs(&(p - CMatrix::identity(30, 30))) < 1e-8);
        }
    }

    #[test]
    fn displacement_guard() {
        match displacement(C64::new(2.0, 0.0), 10) {
            Err(Error::TruncationRisk { recommended, .. }) => assert_eq!(recommended, 16),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn displacement_unitary_on_lower_half() {
        let d = displacement(C64::new(0.8, -0.6), 24).unwrap();
        let udu = d.matrix().adjoint() * d.matrix();
        for i in 0..12 {
            for j in 0..12 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((udu[(i, j)] - C64::new(expected, 0.0)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn parity_conjugates_displacement() {
        let b = C64::new(0.7, 0.4);
        let p = parity(30).unwrap();
        let lhs = &(&p * &displacement(b, 30).unwrap()) * &p;
        let rhs = displacement(-b, 30).unwrap();
        assert!(max_abs(&(lhs.matrix() - rhs.matrix())) < 1e-8);
    }

    #[test]
    fn embed_examples() {
        let layout = HilbertSpaceLayout::new(&[("c", 3), ("q", 2)]).unwrap();
        let id = embed(&single_identity(3).unwrap(), &layout, "c").unwrap();
        assert_eq!(id.matrix(), &CMatrix::identity(6, 6));
        let n = embed(&number(3).unwrap(), &layout, "c").unwrap();
        let diag: Vec<f64> = n.diagonal().iter().map(|z| z.re).collect();
        assert_eq!(diag, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);

        let layout = HilbertSpaceLayout::new(&[("c", 4), ("q", 2)]).unwrap();
        let n = embed(&number(4).unwrap(), &layout, "c").unwrap();
        // brute-force Kronecker construction
        let brute = number(4).unwrap().matrix().kronecker(&CMatrix::identity(2, 2));
        assert_eq!(n.matrix(), &brute);
        assert_abs_diff_eq!(n.trace().re, 12.0);
    }

    #[test]
    fn embed_errors() {
        let layout = HilbertSpaceLayout::new(&[("c", 3), ("q", 2)]).unwrap();
        assert!(matches!(
            embed(&number(3).unwrap(), &layout, "x"),
            Err(Error::UnknownLabel(_))
        ));
        assert!(matches!(
            embed(&number(4).unwrap(), &layout, "q"),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embed_is_homomorphism() {
        let layout = HilbertSpaceLayout::new(&[("q", 2), ("c", 4), ("r", 3)]).unwrap();
        let a = annihilation(4).unwrap();
        let b = displacement(C64::new(0.3, 0.2), 4).unwrap();
        let ab = &a * &b;
        let lhs = embed(&ab, &layout, "c").unwrap();
        let rhs = &embed(&a, &layout, "c").unwrap() * &embed(&b, &layout, "c").unwrap();
        assert!(max_abs(&(lhs.matrix() - rhs.matrix())) < 1e-12);
    }

    #[test]
    fn embed_multi_matches_kron() {
        let layout = HilbertSpaceLayout::new(&[("c1", 3), ("q1", 2), ("c2", 2)]).unwrap();
        let a = annihilation(3).unwrap();
        let x = transition(2, 0, 1).unwrap();
        let joint = a.matrix().kronecker(x.matrix());
        let emb = embed_multi(&joint, &layout, &["c1", "q1"]).unwrap();
        let direct = &embed(&a, &layout, "c1").unwrap() * &embed(&x, &layout, "q1").unwrap();
        assert!(max_abs(&(emb.matrix() - direct.matrix())) < 1e-15);
        // non-adjacent modes
        let joint = a.matrix().kronecker(x.matrix());
        let emb = embed_multi(&joint, &layout, &["c1", "c2"]).unwrap();
        let direct = &embed(&a, &layout, "c1").unwrap() * &embed(&x, &layout, "c2").unwrap();
        assert!(max_abs(&(emb.matrix() - direct.matrix())) < 1e-15);
    }

    #[test]
    fn commutator_is_identity_below_truncation() {
        for dim in 2..8 {
            let a = annihilation(dim).unwrap();
            let c = a.commutator(&a.dagger());
            for i in 0..dim - 1 {
                for j in 0..dim - 1 {
                    let e = if i == j { ONE } else { ZERO };
                    assert!((c.matrix()[(i, j)] - e).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn partial_trace_of_product_and_bell() {
        let layout = HilbertSpaceLayout::new(&[("q1", 2), ("q2", 2)]).unwrap();
        let g = QuantumState::basis(&HilbertSpaceLayout::new(&[("q1", 2)]).unwrap(), &[0]).unwrap();
        let e = QuantumState::basis(&HilbertSpaceLayout::new(&[("q2", 2)]).unwrap(), &[1]).unwrap();
        let prod = g.tensor(&e).unwrap();
        let red = prod.partial_trace(&["q2"]).unwrap();
        assert!(max_abs(&(red.density() - e.density())) < 1e-15);

        let mut v = CVector::zeros(4);
        v[1] = C64::new(1.0 / 2f64.sqrt(), 0.0);
        v[2] = C64::new(1.0 / 2f64.sqrt(), 0.0);
        let bell = QuantumState::pure(layout, v).unwrap();
        let red = bell.partial_trace(&["q1"]).unwrap();
        let (vals, _) = hermitian_eigen(&red.density());
        assert_abs_diff_eq!(vals[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 0.5, epsilon = 1e-12);
        assert!(matches!(bell.partial_trace(&[]), Err(Error::EmptyKeep)));
        assert!(matches!(
            bell.partial_trace(&["zz"]),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn partial_trace_purity_matches_index_contraction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (da, db) = (3usize, 4usize);
        let layout = HilbertSpaceLayout::new(&[("a", da), ("b", db)]).unwrap();
        let v = CVector::from_iterator(
            da * db,
            (0..da * db).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)),
        );
        let psi = QuantumState::pure_normalized(layout, v).unwrap();
        let vec = psi.vector().unwrap();
        // explicit contraction: rho_b[j,l] = sum_i psi[i,j] conj(psi[i,l])
        let mut rho_b = CMatrix::zeros(db, db);
        for i in 0..da {
            for j in 0..db {
                for l in 0..db {
                    rho_b[(j, l)] += vec[i * db + j] * vec[i * db + l].conj();
                }
            }
        }
        let oracle = (&rho_b * &rho_b).trace().re;
        let red = psi.partial_trace(&["b"]).unwrap();
        assert_abs_diff_eq!(red.purity(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(red.trace(), 1.0, epsilon = 1e-12);
        // the other side has the same purity (Schmidt symmetry)
        assert_abs_diff_eq!(psi.partial_trace(&["a"]).unwrap().purity(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn state_validation() {
        let layout = HilbertSpaceLayout::single(2).unwrap();
        assert!(QuantumState::pure(layout.clone(), CVector::from_element(2, ONE)).is_err());
        let bad = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(1.2, 0.0), C64::new(-0.2, 0.0)]));
        assert!(QuantumState::mixed(layout.clone(), bad).is_err());
        let ok = CMatrix::from_diagonal(&CVector::from_vec(vec![C64::new(0.5, 0.0), C64::new(0.5, 0.0)]));
        assert!(QuantumState::mixed(layout, ok).is_ok());
    }

    #[test]
    fn layout_rules() {
        assert!(matches!(
            HilbertSpaceLayout::new(&[("c", 2), ("c", 3)]),
            Err(Error::DuplicateLabel(_))
        ));
        let l = HilbertSpaceLayout::new(&[("c", 3), ("q", 2), ("b", 4)]).unwrap();
        assert_eq!(l.total_dim(), 24);
        let idx = l.index_of(&[2, 1, 3]).unwrap();
        assert_eq!(idx, 2 * 8 + 1 * 4 + 3);
        assert_eq!(l.digits(idx), vec![2, 1, 3]);
    }

    #[test]
    fn transfer_completion_is_unitary() {
        let n = 6;
        let s = C64::new(1.0 / 2f64.sqrt(), 0.0);
        let inputs = vec![ket(n, 0), ket(n, 1)];
        let mut plus = CVector::zeros(n);
        plus[0] = s;
        plus[4] = s;
        let outputs = vec![ket(n, 2), plus];
        let u = unitary_from_transfers(&inputs, &outputs).unwrap();
        assert!(max_abs(&(u.adjoint() * &u - CMatrix::identity(n, n))) < 1e-12);
        assert!((&u * &inputs[0] - &outputs[0]).norm() < 1e-12);
        assert!((&u * &inputs[1] - &outputs[1]).norm() < 1e-12);
        // untouched levels stay fixed
        assert!((&u * ket(n, 3) - ket(n, 3)).norm() < 1e-12);
        assert!((&u * ket(n, 5) - ket(n, 5)).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partial_trace_preserves_trace_and_positivity(seed in 0u64..500) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let layout = HilbertSpaceLayout::new(&[("a", 2), ("b", 3), ("c", 2)]).unwrap();
                let n = layout.total_dim();
                let g = CMatrix::from_fn(n, n, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
                let rho = &g * g.adjoint();
                let rho = &rho / rho.trace();
                let st = QuantumState::mixed(layout, rho).unwrap();
                for keep in [&["a"][..], &["b"][..], &["a", "c"][..], &["c", "b"][..]] {
                    let red = st.partial_trace(keep).unwrap();
                    prop_assert!((red.trace() - 1.0).abs() < 1e-10);
                    let (vals, _) = hermitian_eigen(&red.density());
                    prop_assert!(vals[0] > -1e-10);
                }
            }

            #[test]
            fn parity_displacement_symmetry(re in -1.5f64..1.5, im in -1.5f64..1.5) {
                let b = C64::new(re, im);
                let p = parity(30).unwrap();
                let lhs = &(&p * &displacement(b, 30).unwrap()) * &p;
                let rhs = displacement(-b, 30).unwrap();
                prop_assert!(max_abs(&(lhs.matrix() - rhs.matrix())) < 1e-8);
            }
        }
    }
}
