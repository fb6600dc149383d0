//! Reconstruction of states and processes from simulated measurements, and
//! the figures of merit used to compare them.

pub mod ptm;
pub mod qst;
pub mod rb;
pub mod wigner;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::{pauli_y, LogicalCode};
use crate::error::{Error, Result};
use crate::evolver::amplitude_damp;
use crate::fock::{embed_multi, hermitian_eigen, sqrt_psd, CMatrix, CVector, HilbertSpaceLayout, QuantumState, C64};

pub use ptm::{cardinal_inputs, process_tomography, PauliTransferMatrix, Reconstruction};
pub use qst::{
    build_tomography_matrix, mle_reconstruct, MleOptions, MleResult, PovmCalibration, Rotation, TomographyDesign,
    TomographyMatrix,
};
pub use rb::{interleaved_error, rb_fit, RbFit, RbPoint};
pub use wigner::{wigner_element, wigner_function, WignerGrid};

fn check_square(a: &CMatrix, b: &CMatrix) -> Result<()> {
    if a.nrows() != a.ncols() || b.nrows() != b.ncols() || a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    Ok(())
}

/// `Tr sqrt(√ρ σ √ρ)` (not squared).
pub fn state_fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    check_square(rho, sigma)?;
    let s = sqrt_psd(rho);
    let inner = &s * sigma * &s;
    let (vals, _) = hermitian_eigen(&inner);
    Ok(vals.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Root fidelity against a pure state, `sqrt(<ψ|ρ|ψ>)`.
pub fn pure_state_fidelity(rho: &CMatrix, psi: &CVector) -> Result<f64> {
    if rho.nrows() != psi.len() || rho.ncols() != psi.len() {
        return Err(Error::DimensionMismatch {
            expected: psi.len(),
            got: rho.nrows(),
        });
    }
    Ok(psi.dotc(&(rho * psi)).re.max(0.0).sqrt())
}

/// `(Tr[R1ᵀ R2]/d + 1)/(d + 1)`.
pub fn process_fidelity(r1: &PauliTransferMatrix, r2: &PauliTransferMatrix) -> Result<f64> {
    if r1.n_qubits != r2.n_qubits {
        return Err(Error::DimensionMismatch {
            expected: r1.n_qubits,
            got: r2.n_qubits,
        });
    }
    let d = r1.dim() as f64;
    let tr = (r1.matrix.transpose() * &r2.matrix).trace();
    Ok((tr / d + 1.0) / (d + 1.0))
}

/// Wootters concurrence of a two-qubit state.
pub fn concurrence(rho: &CMatrix) -> Result<f64> {
    if rho.nrows() != 4 || rho.ncols() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: rho.nrows(),
        });
    }
    let yy = pauli_y().kronecker(&pauli_y());
    let tilde = &yy * rho.conjugate() * &yy;
    let s = sqrt_psd(rho);
    let r = sqrt_psd(&(&s * tilde * &s));
    let (mut vals, _) = hermitian_eigen(&r);
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok((vals[0] - vals[1] - vals[2] - vals[3]).max(0.0))
}

/// Decodes each `(cavity, transmon)` pair with `decode`, traces out the
/// cavities and reconstructs the transmon register. Leaked population stays
/// wherever the decode unitary sends it; nothing is postselected.
pub fn decode_tomography(
    state: &QuantumState,
    modules: &[(&str, &str)],
    decode: &CMatrix,
    recon: Reconstruction,
) -> Result<CMatrix> {
    let layout = state.layout().clone();
    let mut s = state.clone();
    for (c, q) in modules {
        let op = embed_multi(decode, &layout, &[c, q])?;
        s = s.evolve(&op);
    }
    let transmons: Vec<&str> = modules.iter().map(|m| m.1).collect();
    let rho = s.partial_trace(&transmons)?.density();
    match recon {
        Reconstruction::Exact => Ok(rho),
        Reconstruction::Shots { shots, seed } => {
            let t = build_tomography_matrix(&TomographyDesign::standard(PovmCalibration::ideal(modules.len())))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = t.sample_frequencies(&rho, shots, &mut rng);
            Ok(mle_reconstruct(&f, &t, &MleOptions::default())?.rho)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub estimate: f64,
    pub mean: f64,
    pub std: f64,
    pub resamples: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Nonparametric bootstrap of the MLE state fidelity: each resample redraws
/// `shots` outcomes per setting from the observed frequencies.
pub fn bootstrap_state_fidelity(
    t: &TomographyMatrix,
    freqs: &qst::RVector,
    shots: usize,
    target: &CMatrix,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    let estimate = state_fidelity(&mle_reconstruct(freqs, t, &MleOptions::default())?.rho, target)?;
    let samples: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let f = t.resample(freqs, shots, &mut rng);
            state_fidelity(&mle_reconstruct(&f, t, &MleOptions::default())?.rho, target)
        })
        .collect::<Result<_>>()?;
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(BootstrapSummary {
        estimate,
        mean,
        std: var.sqrt(),
        resamples,
    })
}

/// Amplitude damping with loss probability `p` per photon on a single mode.
pub fn photon_loss_channel(rho: &CMatrix, p: f64) -> Result<CMatrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("loss probability {p} outside [0, 1)")));
    }
    let layout = HilbertSpaceLayout::single(rho.nrows())?;
    let mut out = rho.clone();
    amplitude_damp(&layout, &mut out, 0, -(1.0 - p).ln());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageProbe {
    /// Process fidelity after decoding onto the transmon.
    pub decode_fidelity: f64,
    /// Process fidelity of the codespace block, leaked weight replaced by
    /// the maximally mixed state.
    pub direct_fidelity: f64,
    /// `decode_fidelity - direct_fidelity`.
    pub bias: f64,
    /// Mean population outside the codespace over the probe inputs.
    pub leakage: f64,
}

/// Compares the decode-then-QST estimate of a single-cavity channel against
/// its fidelity read directly on the code subspace.
pub fn leakage_bias_probe<F>(code: &LogicalCode, dim: usize, decode: &CMatrix, channel: F) -> Result<LeakageProbe>
where
    F: Fn(&CMatrix) -> Result<CMatrix> + Sync,
{
    if decode.nrows() != 2 * dim {
        return Err(Error::DimensionMismatch {
            expected: 2 * dim,
            got: decode.nrows(),
        });
    }
    let v = code.isometry(dim)?;
    let layout = HilbertSpaceLayout::new(&[("c", dim), ("q", 2)])?;
    let g = crate::codes::proj_q(0);
    let inputs = cardinal_inputs(1);
    let mut decoded = Vec::with_capacity(inputs.len());
    let mut direct = Vec::with_capacity(inputs.len());
    let mut leakage = 0.0;
    for rho in &inputs {
        let out = channel(&(&v * rho * v.adjoint()))?;
        let joint = decode * out.kronecker(&g) * decode.adjoint();
        decoded.push(
            QuantumState::mixed_unchecked(layout.clone(), joint)
                .partial_trace(&["q"])?
                .density(),
        );
        let block = v.adjoint() * &out * &v;
        let leak = 1.0 - block.trace().re;
        leakage += leak / inputs.len() as f64;
        direct.push(block + CMatrix::identity(2, 2) * C64::new(leak / 2.0, 0.0));
    }
    let id = PauliTransferMatrix::identity(1);
    let decode_fidelity = process_fidelity(&PauliTransferMatrix::from_io(&inputs, &decoded)?, &id)?;
    let direct_fidelity = process_fidelity(&PauliTransferMatrix::from_io(&inputs, &direct)?, &id)?;
    Ok(LeakageProbe {
        decode_fidelity,
        direct_fidelity,
        bias: decode_fidelity - direct_fidelity,
        leakage,
    })
}
