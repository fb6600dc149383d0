//! Pauli transfer matrices and process tomography.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::cardinal_angles;
use crate::error::{Error, Result};
use crate::fock::{CMatrix, CVector, C64};

use super::qst::{
    build_tomography_matrix, mle_reconstruct, pauli_basis, pauli_labels, pauli_vector, MleOptions, PovmCalibration,
    RMatrix, TomographyDesign,
};

pub const PTM_SCHEMA_VERSION: u32 = 1;

/// `R_ij = Tr[P_i E(P_j)] / d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PauliTransferMatrix {
    pub n_qubits: usize,
    pub matrix: RMatrix,
}

impl PauliTransferMatrix {
    pub fn identity(n_qubits: usize) -> Self {
        let m = 1 << (2 * n_qubits);
        Self {
            n_qubits,
            matrix: RMatrix::identity(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    /// PTM of a linear map supplied as a function on operators.
    pub fn from_channel<F>(n_qubits: usize, channel: F) -> Result<Self>
    where
        F: Fn(&CMatrix) -> Result<CMatrix>,
    {
        let basis = pauli_basis(n_qubits);
        let d = (1usize << n_qubits) as f64;
        let m = basis.len();
        let mut r = RMatrix::zeros(m, m);
        for (j, pj) in basis.iter().enumerate() {
            let out = channel(pj)?;
            for (i, pi) in basis.iter().enumerate() {
                r[(i, j)] = (pi * &out).trace().re / d;
            }
        }
        Ok(Self { n_qubits, matrix: r })
    }

    pub fn from_unitary(u: &CMatrix) -> Result<Self> {
        let n = qubits_for(u.nrows())?;
        Self::from_channel(n, |p| Ok(u * p * u.adjoint()))
    }

    /// Least squares `R = P_out · pinv(P_in)` from paired density matrices.
    pub fn from_io(inputs: &[CMatrix], outputs: &[CMatrix]) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: outputs.len(),
            });
        }
        let n = qubits_for(inputs[0].nrows())?;
        let basis = pauli_basis(n);
        let m = basis.len();
        let cols = |v: &[CMatrix]| -> Result<RMatrix> {
            let mut out = RMatrix::zeros(m, v.len());
            for (k, rho) in v.iter().enumerate() {
                if rho.nrows() != 1 << n {
                    return Err(Error::DimensionMismatch {
                        expected: 1 << n,
                        got: rho.nrows(),
                    });
                }
                out.set_column(k, &pauli_vector(rho, &basis));
            }
            Ok(out)
        };
        let p_in = cols(inputs)?;
        let p_out = cols(outputs)?;
        let svd = p_in.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        if rank < m {
            return Err(Error::RankDeficient { rank, needed: m });
        }
        let pinv = p_in.pseudo_inverse(1e-12).map_err(|e| Error::Fit(e.to_string()))?;
        Ok(Self {
            n_qubits: n,
            matrix: p_out * pinv,
        })
    }

    /// PTM of `after ∘ self`.
    pub fn then(&self, after: &Self) -> Self {
        Self {
            n_qubits: self.n_qubits,
            matrix: &after.matrix * &self.matrix,
        }
    }

    pub fn is_trace_preserving(&self, tol: f64) -> bool {
        let row = self.matrix.row(0);
        (row[0] - 1.0).abs() < tol && row.iter().skip(1).all(|x| x.abs() < tol)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PtmDocument {
            schema_version: PTM_SCHEMA_VERSION,
            n_qubits: self.n_qubits,
            basis: pauli_labels(self.n_qubits),
            matrix: self.matrix.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PtmDocument = serde_json::from_str(text)?;
        if doc.schema_version != PTM_SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported PTM schema {}", doc.schema_version)));
        }
        if doc.n_qubits == 0 || doc.n_qubits > 4 {
            return Err(Error::Parse(format!("PTM for {} qubits", doc.n_qubits)));
        }
        let m = 1usize << (2 * doc.n_qubits);
        if doc.basis != pauli_labels(doc.n_qubits) {
            return Err(Error::Parse("PTM basis labels out of order".into()));
        }
        if doc.matrix.len() != m || doc.matrix.iter().any(|r| r.len() != m) {
            return Err(Error::Parse(format!("PTM must be {m} x {m}")));
        }
        if doc.matrix.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Parse("non-finite PTM entry".into()));
        }
        Ok(Self {
            n_qubits: doc.n_qubits,
            matrix: RMatrix::from_fn(m, m, |i, j| doc.matrix[i][j]),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PtmDocument {
    schema_version: u32,
    n_qubits: usize,
    basis: Vec<String>,
    matrix: Vec<Vec<f64>>,
}

fn qubits_for(dim: usize) -> Result<usize> {
    if dim < 2 || !dim.is_power_of_two() {
        return Err(Error::InvalidDimension {
            dim,
            reason: "qubit register dimension must be a power of two",
        });
    }
    Ok(dim.trailing_zeros() as usize)
}

/// The six cardinal states of one qubit: `+Z, -Z, +X, -X, +Y, -Y`.
pub fn cardinal_states() -> Vec<CVector> {
    cardinal_angles()
        .iter()
        .map(|&(theta, phi)| {
            CVector::from_vec(vec![
                C64::new((theta / 2.0).cos(), 0.0),
                C64::from_polar((theta / 2.0).sin(), phi),
            ])
        })
        .collect()
}

/// Tensor products of cardinal states, `6^n` density matrices.
pub fn cardinal_inputs(n_qubits: usize) -> Vec<CMatrix> {
    let single = cardinal_states();
    let mut states = vec![CVector::from_element(1, C64::new(1.0, 0.0))];
    for _ in 0..n_qubits {
        states = states
            .iter()
            .flat_map(|a| single.iter().map(move |b| a.kronecker(b)))
            .collect();
    }
    states.iter().map(|v| v * v.adjoint()).collect()
}

/// How each output state is estimated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reconstruction {
    Exact,
    /// Sampled QST with an ideal readout, followed by MLE.
    Shots { shots: usize, seed: u64 },
}

/// Runs `channel` on the cardinal inputs and inverts against the ideal
/// inputs.
pub fn process_tomography<F>(n_qubits: usize, channel: F, recon: Reconstruction) -> Result<PauliTransferMatrix>
where
    F: Fn(&CMatrix) -> Result<CMatrix> + Sync,
{
    let inputs = cardinal_inputs(n_qubits);
    let outputs: Vec<CMatrix> = inputs.par_iter().map(&channel).collect::<Result<_>>()?;
    let outputs = match recon {
        Reconstruction::Exact => outputs,
        Reconstruction::Shots { shots, seed } => {
            let t = build_tomography_matrix(&TomographyDesign::standard(PovmCalibration::ideal(n_qubits)))?;
            outputs
                .par_iter()
                .enumerate()
                .map(|(k, rho)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(k as u64);
                    let f = t.sample_frequencies(rho, shots, &mut rng);
                    mle_reconstruct(&f, &t, &MleOptions::default()).map(|r| r.rho)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    PauliTransferMatrix::from_io(&inputs, &outputs)
}
