//! Transmon state tomography: design matrix, linear inversion and
//! constrained least squares.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{pauli_x, pauli_y};
use crate::error::{Error, Result};
use crate::fock::{hermitian_eigen, CMatrix, C64, ONE};
use crate::protocol::channels::single_paulis;

pub type RMatrix = DMatrix<f64>;
pub type RVector = DVector<f64>;

/// Pre-measurement rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    I,
    Xpi,
    Xp2,
    Xm2,
    Yp2,
    Ym2,
}

pub const ROTATIONS: [Rotation; 6] = [
    Rotation::I,
    Rotation::Xpi,
    Rotation::Xp2,
    Rotation::Xm2,
    Rotation::Yp2,
    Rotation::Ym2,
];

impl Rotation {
    /// `exp(-i θ σ / 2)`.
    pub fn matrix(self) -> CMatrix {
        let (axis, theta) = match self {
            Rotation::I => return CMatrix::identity(2, 2),
            Rotation::Xpi => (pauli_x(), std::f64::consts::PI),
            Rotation::Xp2 => (pauli_x(), std::f64::consts::FRAC_PI_2),
            Rotation::Xm2 => (pauli_x(), -std::f64::consts::FRAC_PI_2),
            Rotation::Yp2 => (pauli_y(), std::f64::consts::FRAC_PI_2),
            Rotation::Ym2 => (pauli_y(), -std::f64::consts::FRAC_PI_2),
        };
        CMatrix::identity(2, 2) * C64::new((theta / 2.0).cos(), 0.0) - axis * C64::new(0.0, (theta / 2.0).sin())
    }
}

/// Diagonal POVM elements of the joint readout: `elements[o][b]` is the
/// probability of reporting outcome `o` from computational state `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PovmCalibration {
    pub n_qubits: usize,
    pub elements: Vec<Vec<f64>>,
}

impl PovmCalibration {
    pub fn ideal(n_qubits: usize) -> Self {
        let d = 1 << n_qubits;
        let elements = (0..d).map(|o| (0..d).map(|b| f64::from(u8::from(o == b))).collect()).collect();
        Self { n_qubits, elements }
    }

    /// Product POVM from per-qubit `confusion[true][recorded]`; the first
    /// qubit is the most significant bit.
    pub fn from_confusion(confusion: &[[[f64; 2]; 2]]) -> Result<Self> {
        let n = confusion.len();
        let d = 1 << n;
        let mut elements = vec![vec![0.0; d]; d];
        for (o, row) in elements.iter_mut().enumerate() {
            for (b, e) in row.iter_mut().enumerate() {
                *e = (0..n)
                    .map(|k| {
                        let shift = n - 1 - k;
                        confusion[k][(b >> shift) & 1][(o >> shift) & 1]
                    })
                    .product();
            }
        }
        let p = Self { n_qubits: n, elements };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = 1usize << self.n_qubits;
        if self.elements.len() != d || self.elements.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.elements.len(),
            });
        }
        for b in 0..d {
            let s: f64 = self.elements.iter().map(|r| r[b]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("POVM elements sum to {s} on basis state {b}")));
            }
        }
        if self.elements.iter().flatten().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("POVM entries outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// All `n`-qubit Paulis, first factor slow, identity first.
pub fn pauli_basis(n: usize) -> Vec<CMatrix> {
    let mut out = vec![CMatrix::identity(1, 1)];
    for _ in 0..n {
        out = out
            .iter()
            .flat_map(|a| single_paulis().into_iter().map(move |b| a.kronecker(&b)))
            .collect();
    }
    out
}

pub fn pauli_labels(n: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    for _ in 0..n {
        out = out
            .iter()
            .flat_map(|a| ["I", "X", "Y", "Z"].into_iter().map(move |b| format!("{a}{b}")))
            .collect();
    }
    out
}

/// `P_k = Tr[σ_k ρ]`.
pub fn pauli_vector(rho: &CMatrix, basis: &[CMatrix]) -> RVector {
    RVector::from_iterator(basis.len(), basis.iter().map(|s| (s * rho).trace().re))
}

/// `ρ = Σ_k P_k σ_k / d`.
pub fn density_from_pauli(p: &RVector, basis: &[CMatrix]) -> CMatrix {
    let d = basis[0].nrows();
    let mut rho = CMatrix::zeros(d, d);
    for (pk, s) in p.iter().zip(basis) {
        rho += s * C64::new(*pk / d as f64, 0.0);
    }
    rho
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomographyDesign {
    pub n_qubits: usize,
    /// One rotation per qubit per setting.
    pub settings: Vec<Vec<Rotation>>,
    pub povm: PovmCalibration,
}

impl TomographyDesign {
    /// Every combination of [`ROTATIONS`] across the qubits.
    pub fn standard(povm: PovmCalibration) -> Self {
        let n = povm.n_qubits;
        let mut settings = vec![Vec::new()];
        for _ in 0..n {
            settings = settings
                .iter()
                .flat_map(|s: &Vec<Rotation>| {
                    ROTATIONS.iter().map(move |r| {
                        let mut v = s.clone();
                        v.push(*r);
                        v
                    })
                })
                .collect();
        }
        Self {
            n_qubits: n,
            settings,
            povm,
        }
    }

    fn setting_unitary(&self, s: usize) -> CMatrix {
        self.settings[s]
            .iter()
            .fold(CMatrix::identity(1, 1), |acc, r| acc.kronecker(&r.matrix()))
    }
}

/// Linear map `Π = T·P` from Pauli vector to outcome probabilities; rows are
/// grouped by setting, `outcomes` per setting.
#[derive(Clone, Debug)]
pub struct TomographyMatrix {
    pub n_qubits: usize,
    pub settings: usize,
    pub outcomes: usize,
    pub t: RMatrix,
    /// Condition number of `TᵀT`.
    pub condition_number: f64,
    basis: Vec<CMatrix>,
    pinv: RMatrix,
}

pub fn build_tomography_matrix(design: &TomographyDesign) -> Result<TomographyMatrix> {
    design.povm.validate()?;
    let n = design.n_qubits;
    let d = 1usize << n;
    let basis = pauli_basis(n);
    let rows = design.settings.len() * d;
    let mut t = RMatrix::zeros(rows, basis.len());
    for s in 0..design.settings.len() {
        let u = design.setting_unitary(s);
        let rotated: Vec<CMatrix> = basis.iter().map(|p| &u * p * u.adjoint()).collect();
        for o in 0..d {
            for (k, rp) in rotated.iter().enumerate() {
                let v: f64 = (0..d).map(|b| design.povm.elements[o][b] * rp[(b, b)].re).sum();
                t[(s * d + o, k)] = v / d as f64;
            }
        }
    }
    let svd = t.clone().svd(false, false);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let rank = sv.iter().filter(|&&x| x > 1e-10 * smax).count();
    if rank < basis.len() {
        return Err(Error::RankDeficient {
            rank,
            needed: basis.len(),
        });
    }
    let pinv = t
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Fit(e.to_string()))?;
    Ok(TomographyMatrix {
        n_qubits: n,
        settings: design.settings.len(),
        outcomes: d,
        t,
        condition_number: (smax / smin).powi(2),
        basis,
        pinv,
    })
}

impl TomographyMatrix {
    pub fn dim(&self) -> usize {
        self.outcomes
    }

    pub fn basis(&self) -> &[CMatrix] {
        &self.basis
    }

    pub fn probabilities(&self, rho: &CMatrix) -> RVector {
        &self.t * pauli_vector(rho, &self.basis)
    }

    /// Pseudo-inverse estimate; Hermitian and unit trace, not necessarily
    /// positive.
    pub fn linear_inversion(&self, freqs: &RVector) -> Result<CMatrix> {
        self.check_len(freqs)?;
        Ok(density_from_pauli(&(&self.pinv * freqs), &self.basis))
    }

    fn check_len(&self, freqs: &RVector) -> Result<()> {
        if freqs.len() != self.t.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.t.nrows(),
                got: freqs.len(),
            });
        }
        Ok(())
    }

    /// Multinomial counts per setting turned into frequencies.
    pub fn sample_frequencies<R: Rng>(&self, rho: &CMatrix, shots: usize, rng: &mut R) -> RVector {
        self.resample(&self.probabilities(rho), shots, rng)
    }

    /// Draw `shots` outcomes per setting from `probs` (clipped, renormalized
    /// per setting).
    pub fn resample<R: Rng>(&self, probs: &RVector, shots: usize, rng: &mut R) -> RVector {
        let d = self.outcomes;
        let mut out = RVector::zeros(probs.len());
        for s in 0..self.settings {
            let p: Vec<f64> = (0..d).map(|o| probs[s * d + o].max(0.0)).collect();
            let total: f64 = p.iter().sum();
            let mut counts = vec![0usize; d];
            for _ in 0..shots {
                let mut u = rng.gen::<f64>() * total;
                let mut o = d - 1;
                for (k, pk) in p.iter().enumerate() {
                    if u < *pk {
                        o = k;
                        break;
                    }
                    u -= pk;
                }
                counts[o] += 1;
            }
            for o in 0..d {
                out[s * d + o] = counts[o] as f64 / shots.max(1) as f64;
            }
        }
        out
    }
}

/// Euclidean projection of a Hermitian matrix onto density matrices:
/// eigenvalues projected onto the probability simplex.
pub fn project_density(h: &CMatrix) -> CMatrix {
    let (vals, v) = hermitian_eigen(h);
    let proj = simplex_projection(&vals);
    let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        proj.len(),
        proj.iter().map(|&x| C64::new(x, 0.0)),
    ));
    &v * diag * v.adjoint()
}

fn simplex_projection(x: &[f64]) -> Vec<f64> {
    let mut u = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    x.iter().map(|&xi| (xi - theta).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Bound on the gradient-mapping norm `L‖ρ - proj(ρ - ∇f/L)‖_F`.
    pub tolerance: f64,
    /// Nesterov momentum with restart on objective increase.
    pub accelerate: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            tolerance: 1e-7,
            accelerate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MleResult {
    pub rho: CMatrix,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Objective after each accepted iteration.
    pub objective_trace: Vec<f64>,
}

/// Least-squares fit `min Σ_m (π_m(ρ) - f_m)²` over density matrices by
/// projected gradient with exact projection.
pub fn mle_reconstruct(freqs: &RVector, t: &TomographyMatrix, opts: &MleOptions) -> Result<MleResult> {
    t.check_len(freqs)?;
    let d = t.dim();
    let basis = &t.basis;
    let sigma_max = t.t.clone().svd(false, false).singular_values.max();
    let lip = 2.0 * sigma_max * sigma_max * d as f64;

    let objective = |rho: &CMatrix| -> f64 { (&t.t * pauli_vector(rho, basis) - freqs).norm_squared() };
    let gradient = |rho: &CMatrix| -> CMatrix {
        let g = (t.t.transpose() * (&t.t * pauli_vector(rho, basis) - freqs)) * 2.0;
        let mut out = CMatrix::zeros(d, d);
        for (gk, s) in g.iter().zip(basis) {
            out += s * C64::new(*gk, 0.0);
        }
        out
    };
    let step = |rho: &CMatrix| -> CMatrix { project_density(&(rho - gradient(rho) / C64::new(lip, 0.0))) };
    let residual = |rho: &CMatrix| -> f64 { lip * (rho - step(rho)).norm() };

    let mut rho = project_density(&t.linear_inversion(freqs)?);
    let mut f = objective(&rho);
    let mut trace = vec![f];
    let mut y = rho.clone();
    let mut momentum = 1.0_f64;
    for it in 1..=opts.max_iterations {
        let res = residual(&rho);
        if !res.is_finite() || !f.is_finite() {
            return Err(Error::Divergence(it));
        }
        if res < opts.tolerance {
            return Ok(MleResult {
                rho,
                objective: f,
                iterations: it - 1,
                kkt_residual: res,
                objective_trace: trace,
            });
        }
        let mut next = step(&y);
        let mut f_next = objective(&next);
        if f_next > f {
            momentum = 1.0;
            next = step(&rho);
            f_next = objective(&next);
            y = next.clone();
        } else if opts.accelerate {
            let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let w = (momentum - 1.0) / m_next;
            y = &next + (&next - &rho) * C64::new(w, 0.0);
            momentum = m_next;
        } else {
            y = next.clone();
        }
        rho = next;
        f = f_next.min(f);
        trace.push(f);
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        residual: residual(&rho),
    })
}

/// Rank-one helper used by tests and the CLI.
pub fn pure_density(psi: &nalgebra::DVector<C64>) -> CMatrix {
    let n = psi.norm();
    let v = psi / C64::new(n, 0.0);
    &v * v.adjoint()
}

/// Haar-ish random pure state from Gaussian amplitudes.
pub fn random_pure<R: Rng>(dim: usize, rng: &mut R) -> nalgebra::DVector<C64> {
    let mut gauss = || {
        // Box-Muller
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let v = nalgebra::DVector::from_fn(dim, |_, _| C64::new(gauss(), gauss()));
    let n = v.norm();
    v / C64::new(n, 0.0) * ONE
}
