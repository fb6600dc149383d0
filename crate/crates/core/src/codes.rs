//! Logical encodings of a qubit in a cavity mode.
//!
//! Two-mode operators in this module act on `cavity ⊗ transmon` with the
//! cavity as the slow index and a two-level transmon (`g = 0`, `e = 1`).

use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{unitary_from_transfers, CMatrix, CVector, C64, ONE, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeKind {
    Binomial,
    Fock,
}

impl CodeKind {
    pub fn code(self) -> LogicalCode {
        match self {
            CodeKind::Binomial => binomial_code(),
            CodeKind::Fock => fock_code(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CodeKind::Binomial => "binomial",
            CodeKind::Fock => "fock",
        }
    }
}

impl std::str::FromStr for CodeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(CodeKind::Binomial),
            "fock" => Ok(CodeKind::Fock),
            other => Err(Error::Config(format!("unknown code `{other}`"))),
        }
    }
}

/// Codewords and optional error words, stored as Fock amplitudes up to
/// `min_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalCode {
    pub kind: CodeKind,
    pub name: String,
    codeword0: Vec<C64>,
    codeword1: Vec<C64>,
    errorwords: Option<[Vec<C64>; 2]>,
    pub min_dim: usize,
    /// Reference-phase angle equivalent to a logical Z, rad.
    pub z_angle: f64,
}

fn fock_amps(pairs: &[(usize, f64)], len: usize) -> Vec<C64> {
    let mut v = vec![ZERO; len];
    for &(n, a) in pairs {
        v[n] = C64::new(a, 0.0);
    }
    v
}

/// |0_L> = |2>, |1_L> = (|0> + |4>)/√2, error words |1> and |3>.
pub fn binomial_code() -> LogicalCode {
    LogicalCode {
        kind: CodeKind::Binomial,
        name: "binomial".into(),
        codeword0: fock_amps(&[(2, 1.0)], 5),
        codeword1: fock_amps(&[(0, FRAC_1_SQRT_2), (4, FRAC_1_SQRT_2)], 5),
        errorwords: Some([fock_amps(&[(1, 1.0)], 5), fock_amps(&[(3, 1.0)], 5)]),
        min_dim: 5,
        z_angle: std::f64::consts::FRAC_PI_2,
    }
}

/// |0_L> = |0>, |1_L> = |1>.
pub fn fock_code() -> LogicalCode {
    LogicalCode {
        kind: CodeKind::Fock,
        name: "fock".into(),
        codeword0: fock_amps(&[(0, 1.0)], 2),
        codeword1: fock_amps(&[(1, 1.0)], 2),
        errorwords: None,
        min_dim: 2,
        z_angle: std::f64::consts::PI,
    }
}

fn pad(amps: &[C64], dim: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    for (i, a) in amps.iter().enumerate().take(dim) {
        v[i] = *a;
    }
    v
}

impl LogicalCode {
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim < self.min_dim {
            return Err(Error::InvalidDimension {
                dim,
                reason: "cavity dimension below the code's minimum",
            });
        }
        Ok(())
    }

    pub fn codeword(&self, k: usize, dim: usize) -> Result<CVector> {
        self.check_dim(dim)?;
        Ok(match k {
            0 => pad(&self.codeword0, dim),
            1 => pad(&self.codeword1, dim),
            _ => return Err(Error::InvalidOutcome(k as u8)),
        })
    }

    pub fn errorword(&self, k: usize, dim: usize) -> Result<Option<CVector>> {
        self.check_dim(dim)?;
        Ok(self.errorwords.as_ref().map(|e| pad(&e[k.min(1)], dim)))
    }

    pub fn has_errorwords(&self) -> bool {
        self.errorwords.is_some()
    }

    /// Isometry from the logical qubit into the cavity (columns are codewords).
    pub fn isometry(&self, dim: usize) -> Result<CMatrix> {
        let c0 = self.codeword(0, dim)?;
        let c1 = self.codeword(1, dim)?;
        Ok(CMatrix::from_columns(&[c0, c1]))
    }

    pub fn projector(&self, dim: usize) -> Result<CMatrix> {
        let v = self.isometry(dim)?;
        Ok(&v * v.adjoint())
    }

    /// `|0_L><0_L| - |1_L><1_L|`.
    pub fn logical_z(&self, dim: usize) -> Result<CMatrix> {
        let c0 = self.codeword(0, dim)?;
        let c1 = self.codeword(1, dim)?;
        Ok(&c0 * c0.adjoint() - &c1 * c1.adjoint())
    }

    /// Codeword swap, identity on the complement of the codespace (unitary).
    pub fn logical_x(&self, dim: usize) -> Result<CMatrix> {
        let c0 = self.codeword(0, dim)?;
        let c1 = self.codeword(1, dim)?;
        let p = self.projector(dim)?;
        Ok(CMatrix::identity(dim, dim) - p + &c1 * c0.adjoint() + &c0 * c1.adjoint())
    }

    /// Logical-level operator lifted by `V U V† + (1 - P)`.
    pub fn lift(&self, u: &CMatrix, dim: usize) -> Result<CMatrix> {
        let v = self.isometry(dim)?;
        Ok(CMatrix::identity(dim, dim) - &v * v.adjoint() + &v * u * v.adjoint())
    }

    /// `cos(θ/2)|0_L> + e^{iφ} sin(θ/2)|1_L>`.
    pub fn logical_state(&self, theta: f64, phi: f64, dim: usize) -> Result<CVector> {
        let c0 = self.codeword(0, dim)?;
        let c1 = self.codeword(1, dim)?;
        let v = c0 * C64::new((theta / 2.0).cos(), 0.0)
            + c1 * (C64::from_polar(1.0, phi) * (theta / 2.0).sin());
        let n = v.norm();
        Ok(v / C64::new(n, 0.0))
    }

    /// Cavity state for logical amplitudes `(alpha, beta)`.
    pub fn encode_amplitudes(&self, alpha: C64, beta: C64, dim: usize) -> Result<CVector> {
        Ok(self.codeword(0, dim)? * alpha + self.codeword(1, dim)? * beta)
    }

    /// Logical amplitudes `(<0_L|psi>, <1_L|psi>)`.
    pub fn logical_amplitudes(&self, psi: &CVector) -> Result<(C64, C64)> {
        let dim = psi.len();
        Ok((
            self.codeword(0, dim)?.dotc(psi),
            self.codeword(1, dim)?.dotc(psi),
        ))
    }

    /// Transfers `|0>_c|g> -> |0_L>|g>` and `|0>_c|e> -> |1_L>|g>`.
    pub fn encode_pairs(&self, dim: usize) -> Result<Vec<(CVector, CVector)>> {
        let g = qubit(0);
        let e = qubit(1);
        let vac = fock(0, dim);
        Ok(vec![
            (vac.kronecker(&g), self.codeword(0, dim)?.kronecker(&g)),
            (vac.kronecker(&e), self.codeword(1, dim)?.kronecker(&g)),
        ])
    }

    /// Reverse of [`Self::encode_pairs`].
    pub fn decode_pairs(&self, dim: usize) -> Result<Vec<(CVector, CVector)>> {
        Ok(self
            .encode_pairs(dim)?
            .into_iter()
            .map(|(a, b)| (b, a))
            .collect())
    }

    /// Ideal encoding unitary on `cavity(dim) ⊗ transmon(2)`: realizes the
    /// encode transfers, rotates within their joint span, identity elsewhere.
    pub fn encode_unitary(&self, dim: usize) -> Result<CMatrix> {
        let pairs = self.encode_pairs(dim)?;
        let (ins, outs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        unitary_from_transfers(&ins, &outs)
    }

    pub fn decode_unitary(&self, dim: usize) -> Result<CMatrix> {
        Ok(self.encode_unitary(dim)?.adjoint())
    }

    /// Cavity-controlled transmon-target CNOT on `cavity ⊗ transmon`:
    /// `(1 - P_1L) ⊗ I + P_1L ⊗ X`.
    pub fn cnot_cavity_control(&self, dim: usize) -> Result<CMatrix> {
        let c1 = self.codeword(1, dim)?;
        let p1 = &c1 * c1.adjoint();
        let id = CMatrix::identity(dim, dim);
        Ok((&id - &p1).kronecker(&CMatrix::identity(2, 2)) + p1.kronecker(&pauli_x()))
    }

    /// Transmon-controlled cavity-target CNOT: `I ⊗ |g><g| + X_L ⊗ |e><e|`.
    pub fn cnot_transmon_control(&self, dim: usize) -> Result<CMatrix> {
        let id = CMatrix::identity(dim, dim);
        Ok(id.kronecker(&proj_q(0)) + self.logical_x(dim)?.kronecker(&proj_q(1)))
    }

    /// Transfer pairs for the cavity-controlled CNOT (four basis inputs).
    pub fn cnot_cavity_control_pairs(&self, dim: usize) -> Result<Vec<(CVector, CVector)>> {
        let u = self.cnot_cavity_control(dim)?;
        self.logical_transmon_basis(dim)
            .map(|ins| ins.into_iter().map(|v| (v.clone(), &u * v)).collect())
    }

    pub fn cnot_transmon_control_pairs(&self, dim: usize) -> Result<Vec<(CVector, CVector)>> {
        let u = self.cnot_transmon_control(dim)?;
        self.logical_transmon_basis(dim)
            .map(|ins| ins.into_iter().map(|v| (v.clone(), &u * v)).collect())
    }

    /// Single-qubit logical gate transfers with the transmon in `g`.
    pub fn logical_gate_pairs(&self, u: &CMatrix, dim: usize) -> Result<Vec<(CVector, CVector)>> {
        let lifted = self.lift(u, dim)?;
        let g = qubit(0);
        (0..2)
            .map(|k| {
                let c = self.codeword(k, dim)?;
                Ok((c.kronecker(&g), (&lifted * c).kronecker(&g)))
            })
            .collect()
    }

    fn logical_transmon_basis(&self, dim: usize) -> Result<Vec<CVector>> {
        let mut out = Vec::with_capacity(4);
        for k in 0..2 {
            let c = self.codeword(k, dim)?;
            for q in 0..2 {
                out.push(c.kronecker(&qubit(q)));
            }
        }
        Ok(out)
    }
}

/// Result of a single photon loss.
#[derive(Clone, Debug)]
pub struct LossOutcome {
    pub state: CVector,
    /// `<Π>` after the loss.
    pub parity: f64,
    /// Norm of `a|ψ>` before renormalization.
    pub norm: f64,
}

/// Apply `a` to a cavity state and renormalize.
pub fn apply_single_photon_loss(code: &LogicalCode, state: &CVector) -> Result<LossOutcome> {
    let dim = state.len();
    code.check_dim(dim)?;
    let mut out = CVector::zeros(dim);
    for n in 1..dim {
        out[n - 1] = state[n] * (n as f64).sqrt();
    }
    let norm = out.norm();
    if norm < 1e-14 {
        return Err(Error::ZeroState);
    }
    out /= C64::new(norm, 0.0);
    let parity = out
        .iter()
        .enumerate()
        .map(|(n, a)| if n % 2 == 0 { a.norm_sqr() } else { -a.norm_sqr() })
        .sum();
    Ok(LossOutcome {
        state: out,
        parity,
        norm,
    })
}

pub fn fock(n: usize, dim: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[n] = ONE;
    v
}

/// Transmon basis vector: 0 = g, 1 = e.
pub fn qubit(k: usize) -> CVector {
    fock(k, 2)
}

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMatrix {
    let i = C64::new(0.0, 1.0);
    CMatrix::from_row_slice(2, 2, &[ZERO, -i, i, ZERO])
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

pub fn proj_q(k: usize) -> CMatrix {
    let v = qubit(k);
    &v * v.adjoint()
}

/// The six cardinal (θ, φ) pairs: +Z, −Z, +X, −X, +Y, −Y.
pub fn cardinal_angles() -> [(f64, f64); 6] {
    use std::f64::consts::{FRAC_PI_2, PI};
    [
        (0.0, 0.0),
        (PI, 0.0),
        (FRAC_PI_2, 0.0),
        (FRAC_PI_2, PI),
        (FRAC_PI_2, FRAC_PI_2),
        (FRAC_PI_2, -FRAC_PI_2),
    ]
}
