//! Pauli-twirl depolarizing channels restricted to a subspace.

use crate::codes::{pauli_x, pauli_y, pauli_z};
use crate::error::{Error, Result};
use crate::fock::{CMatrix, C64};

/// `ρ → (1-p) ρ + p/(m-1) Σ_{P≠I} Q_P ρ Q_P†` with
/// `Q_P = W P W† + (1 - W W†)`: a Pauli twirl on the range of the isometry
/// `W`, identity on its complement. The process fidelity on the subspace is
/// `1 - p`.
#[derive(Clone, Debug)]
pub struct SubspaceTwirl {
    w: CMatrix,
    /// `paulis[0]` is the identity.
    paulis: Vec<CMatrix>,
    pauli_sum: CMatrix,
    p: f64,
}

impl SubspaceTwirl {
    pub fn new(w: CMatrix, paulis: Vec<CMatrix>, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("channel infidelity {p} outside [0, 1]")));
        }
        let k = w.ncols();
        if paulis.len() < 2 || paulis.iter().any(|m| m.nrows() != k || m.ncols() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: paulis.first().map_or(0, |m| m.nrows()),
            });
        }
        let mut pauli_sum = CMatrix::zeros(k, k);
        for m in &paulis {
            pauli_sum += m;
        }
        Ok(Self {
            w,
            paulis,
            pauli_sum,
            p,
        })
    }

    /// Same channel parameterized by its average-gate infidelity `r` on the
    /// register the Paulis act on: `p = r (d + 1) / d` with `d² = paulis.len()`.
    pub fn from_average_infidelity(w: CMatrix, paulis: Vec<CMatrix>, r: f64) -> Result<Self> {
        let d = (paulis.len() as f64).sqrt();
        Self::new(w, paulis, r * (d + 1.0) / d)
    }

    /// Entanglement infidelity on the twirled register.
    pub fn infidelity(&self) -> f64 {
        self.p
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        if self.p == 0.0 {
            return rho.clone();
        }
        let w = &self.w;
        let wd = w.adjoint();
        let rw = rho * w;
        let a = &wd * &rw;
        let wr = &wd * rho;
        let mut pap = CMatrix::zeros(a.nrows(), a.ncols());
        for m in &self.paulis {
            pap += m * &a * m.adjoint();
        }
        // W† ρ C and C ρ W
        let wrc = &wr - &a * &wd;
        let crw = &rw - w * &a;
        let crc = rho - w * &wr - &rw * &wd + w * &a * &wd;
        let m = self.paulis.len() as f64;
        let total = w * pap * &wd
            + w * &self.pauli_sum * wrc
            + crw * self.pauli_sum.adjoint() * &wd
            + crc * C64::new(m, 0.0);
        let q = self.p / (m - 1.0);
        rho * C64::new(1.0 - self.p - q, 0.0) + total * C64::new(q, 0.0)
    }
}

/// `{I, X, Y, Z}`.
pub fn single_paulis() -> Vec<CMatrix> {
    vec![CMatrix::identity(2, 2), pauli_x(), pauli_y(), pauli_z()]
}

/// The sixteen two-qubit Paulis, first factor slow, identity first.
pub fn two_qubit_paulis() -> Vec<CMatrix> {
    let s = single_paulis();
    let mut out = Vec::with_capacity(16);
    for a in &s {
        for b in &s {
            out.push(a.kronecker(b));
        }
    }
    out
}

/// `I_left ⊗ M ⊗ I_right`.
pub fn pad(m: &CMatrix, left: usize, right: usize) -> CMatrix {
    CMatrix::identity(left, left)
        .kronecker(m)
        .kronecker(&CMatrix::identity(right, right))
}
