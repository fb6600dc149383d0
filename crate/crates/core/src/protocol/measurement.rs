//! Communication-qubit readout, conditional reset and the readout-crosstalk
//! probe.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codes::pauli_x;
use crate::error::{Error, Result};
use crate::evolver::amplitude_damp;
use crate::fock::{embed, CMatrix, HilbertSpaceLayout, Operator, QuantumState, C64, ONE, ZERO};

use super::ledger::ReferencePhaseLedger;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "theta")]
pub enum MeasurementBasis {
    Z,
    X,
    /// `cos θ X + sin θ Y`, rad
    Equatorial(f64),
}

impl MeasurementBasis {
    /// Rotation applied before a Z projection: `H diag(1, e^{-iθ})`.
    pub fn rotation(&self) -> CMatrix {
        let theta = match *self {
            MeasurementBasis::Z => return CMatrix::identity(2, 2),
            MeasurementBasis::X => 0.0,
            MeasurementBasis::Equatorial(t) => t,
        };
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let hm = CMatrix::from_row_slice(2, 2, &[C64::new(h, 0.0), C64::new(h, 0.0), C64::new(h, 0.0), C64::new(-h, 0.0)]);
        let d = CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, C64::from_polar(1.0, -theta)]);
        hm * d
    }
}

/// Single-qubit readout: basis, classical confusion and latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub basis: MeasurementBasis,
    /// `confusion[true][recorded]`
    pub confusion: [[f64; 2]; 2],
    /// Measurement-to-feedforward latency, ns.
    pub duration_ns: f64,
    /// Fraction of this channel's signal that comes from the other qubit.
    pub crosstalk_ratio: f64,
}

impl MeasurementModel {
    pub fn perfect() -> Self {
        Self {
            basis: MeasurementBasis::Z,
            confusion: [[1.0, 0.0], [0.0, 1.0]],
            duration_ns: 1000.0,
            crosstalk_ratio: 0.0,
        }
    }

    /// Assignment errors for modules 1 and 2. Energy decay during the
    /// latency window is not part of the confusion; it comes from T1.
    pub fn paper_defaults(module: usize) -> Result<Self> {
        let eps_ge = match module {
            1 => 0.0048,
            2 => 0.0258,
            _ => return Err(Error::Config(format!("no module {module}"))),
        };
        let eps_eg = 0.0035;
        Ok(Self {
            confusion: [[1.0 - eps_ge, eps_ge], [eps_eg, 1.0 - eps_eg]],
            ..Self::perfect()
        })
    }

    pub fn with_basis(mut self, basis: MeasurementBasis) -> Self {
        self.basis = basis;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.confusion {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("confusion row {row:?} is not a distribution")));
            }
        }
        if !(self.crosstalk_ratio >= 0.0 && self.crosstalk_ratio <= 1.0) {
            return Err(Error::Config(format!("crosstalk ratio {} outside [0, 1]", self.crosstalk_ratio)));
        }
        if !(self.duration_ns >= 0.0 && self.duration_ns.is_finite()) {
            return Err(Error::Config(format!("measurement duration {}", self.duration_ns)));
        }
        Ok(())
    }

    pub fn assignment_fidelity(&self) -> f64 {
        0.5 * (self.confusion[0][0] + self.confusion[1][1])
    }

    pub fn is_perfect(&self) -> bool {
        self.confusion == [[1.0, 0.0], [0.0, 1.0]] && self.crosstalk_ratio == 0.0
    }
}

/// `P(recorded | true)` for the joint outcome `2 b1 + b2` of two qubits,
/// including crosstalk between the channels.
pub fn joint_record_probability(models: &[MeasurementModel; 2], true_outcome: u8, recorded: u8) -> f64 {
    let t = [(true_outcome >> 1) & 1, true_outcome & 1];
    let r = [(recorded >> 1) & 1, recorded & 1];
    let mut p = 1.0;
    for k in 0..2 {
        let j = 1 - k;
        let x = models[k].crosstalk_ratio;
        let p1 = (1.0 - x) * models[k].confusion[t[k] as usize][1] + x * models[j].confusion[t[j] as usize][1];
        p *= if r[k] == 1 { p1 } else { 1.0 - p1 };
    }
    p
}

fn transmon(module: usize) -> Result<&'static str> {
    match module {
        1 => Ok("q1"),
        2 => Ok("q2"),
        _ => Err(Error::Config(format!("no module {module}"))),
    }
}

fn embedded_2x2(m: &CMatrix, layout: &HilbertSpaceLayout, label: &str) -> Result<Operator> {
    let op = Operator::new(HilbertSpaceLayout::single(2)?, m.clone())?;
    embed(&op, layout, label)
}

/// Diagonal projector on one two-level mode.
pub fn level_projector(layout: &HilbertSpaceLayout, label: &str, level: usize) -> Result<Operator> {
    let pos = layout.position(label)?;
    let diag: Vec<C64> = (0..layout.total_dim())
        .map(|i| if layout.digit(i, pos) == level { ONE } else { ZERO })
        .collect();
    Operator::from_diagonal(layout, &diag)
}

#[derive(Clone, Debug)]
pub struct CommMeasurement {
    pub recorded: u8,
    pub true_outcome: u8,
    /// Born probability of the excited outcome.
    pub probability_e: f64,
    pub state: QuantumState,
}

/// Projective readout of one communication qubit.
///
/// The state is projected on the true outcome; the record is drawn from the
/// confusion row of that outcome. When the true outcome is `e` the ledger
/// books `theta_m` (signed) on the module's data cavity.
pub fn measure_comm<R: Rng>(
    state: &QuantumState,
    module: usize,
    model: &MeasurementModel,
    ledger: &mut ReferencePhaseLedger,
    theta_m: f64,
    rng: &mut R,
) -> Result<CommMeasurement> {
    model.validate()?;
    let label = transmon(module)?;
    let layout = state.layout().clone();
    let rotated = state.evolve(&embedded_2x2(&model.basis.rotation(), &layout, label)?);
    let pe = level_projector(&layout, label, 1)?;
    let probability_e = rotated.expectation(&pe).re.clamp(0.0, 1.0);
    let true_outcome = u8::from(rng.gen::<f64>() < probability_e);
    let proj = if true_outcome == 1 { pe } else { level_projector(&layout, label, 0)? };
    let state = project(&rotated, &proj)?;
    let recorded = u8::from(rng.gen::<f64>() < model.confusion[true_outcome as usize][1]);
    if true_outcome == 1 {
        ledger.add(module, theta_m)?;
    }
    Ok(CommMeasurement {
        recorded,
        true_outcome,
        probability_e,
        state,
    })
}

fn project(state: &QuantumState, proj: &Operator) -> Result<QuantumState> {
    match state {
        QuantumState::Pure { layout, vector } => {
            QuantumState::pure_normalized(layout.clone(), proj.matrix() * vector)
        }
        QuantumState::Mixed { layout, matrix } => {
            let m = proj.matrix() * matrix * proj.matrix();
            let tr = m.trace().re;
            if !(tr > 0.0) {
                return Err(Error::ZeroState);
            }
            Ok(QuantumState::mixed_unchecked(layout.clone(), m / C64::new(tr, 0.0)))
        }
    }
}

/// Readout plus conditional π pulse on both communication qubits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetModel {
    pub measurement: [MeasurementModel; 2],
    /// Transmon T1 during the latency window, µs; `None` disables decay.
    pub t1: [Option<f64>; 2],
}

impl ResetModel {
    pub fn perfect() -> Self {
        Self {
            measurement: [MeasurementModel::perfect(), MeasurementModel::perfect()],
            t1: [None, None],
        }
    }

    pub fn paper_defaults(sp: &crate::hamiltonians::SystemParams) -> Result<Self> {
        Ok(Self {
            measurement: [MeasurementModel::paper_defaults(1)?, MeasurementModel::paper_defaults(2)?],
            t1: [sp.module1.transmon.t1, sp.module2.transmon.t1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResetReport {
    /// Probability of each recorded outcome `2 r1 + r2`.
    pub probabilities: [f64; 4],
    /// `<gg|ρ_r|gg>` after the conditional π pulses.
    pub conditioned_ground: [f64; 4],
    /// Unweighted mean over the four outcomes.
    pub mean: f64,
    /// Outcome-probability-weighted mean.
    pub average: f64,
}

/// Exact recorded-outcome branches `Σ_t P(r|t) X_r D(P_t ρ P_t) X_r` of a
/// measure-and-reset cycle, unnormalized.
pub fn reset_branches(state: &QuantumState, model: &ResetModel) -> Result<Vec<CMatrix>> {
    for m in &model.measurement {
        m.validate()?;
    }
    let layout = state.layout().clone();
    let rho = state.density();
    let proj = [
        [level_projector(&layout, "q1", 0)?, level_projector(&layout, "q1", 1)?],
        [level_projector(&layout, "q2", 0)?, level_projector(&layout, "q2", 1)?],
    ];
    let x1 = embedded_2x2(&pauli_x(), &layout, "q1")?;
    let x2 = embedded_2x2(&pauli_x(), &layout, "q2")?;
    let pos = [layout.position("q1")?, layout.position("q2")?];
    let n = layout.total_dim();
    let mut out = vec![CMatrix::zeros(n, n); 4];
    for t in 0..4u8 {
        let p = proj[0][(t >> 1) as usize].matrix() * proj[1][(t & 1) as usize].matrix();
        let mut s = &p * &rho * &p;
        if s.trace().re <= 0.0 {
            continue;
        }
        for k in 0..2 {
            if let Some(t1) = model.t1[k] {
                amplitude_damp(&layout, &mut s, pos[k], model.measurement[k].duration_ns * 1e-3 / t1);
            }
        }
        for r in 0..4u8 {
            let w = joint_record_probability(&model.measurement, t, r);
            if w == 0.0 {
                continue;
            }
            let mut b = s.clone();
            if r & 2 != 0 {
                b = x1.matrix() * b * x1.matrix();
            }
            if r & 1 != 0 {
                b = x2.matrix() * b * x2.matrix();
            }
            out[r as usize] += b * C64::new(w, 0.0);
        }
    }
    Ok(out)
}

/// Measure both communication qubits, flip those recorded in `e`, and
/// report conditioned ground-state fidelities. The returned state is one
/// sampled recorded branch.
pub fn measure_and_reset_comm<R: Rng>(
    state: &QuantumState,
    model: &ResetModel,
    rng: &mut R,
) -> Result<(u8, QuantumState, ResetReport)> {
    let layout = state.layout().clone();
    let branches = reset_branches(state, model)?;
    let gg = level_projector(&layout, "q1", 0)?.matrix() * level_projector(&layout, "q2", 0)?.matrix();
    let mut probabilities = [0.0; 4];
    let mut conditioned_ground = [0.0; 4];
    for (r, b) in branches.iter().enumerate() {
        let p = b.trace().re;
        probabilities[r] = p;
        if p > 0.0 {
            conditioned_ground[r] = (&gg * b).trace().re / p;
        }
    }
    let populated: Vec<usize> = (0..4).filter(|&r| probabilities[r] > 0.0).collect();
    let mean = populated.iter().map(|&r| conditioned_ground[r]).sum::<f64>() / populated.len().max(1) as f64;
    let average = (0..4).map(|r| probabilities[r] * conditioned_ground[r]).sum();
    let mut u = rng.gen::<f64>() * probabilities.iter().sum::<f64>();
    let mut chosen = *populated.last().ok_or(Error::ZeroState)?;
    for &r in &populated {
        if u < probabilities[r] {
            chosen = r;
            break;
        }
        u -= probabilities[r];
    }
    let post = QuantumState::mixed_unchecked(
        layout,
        &branches[chosen] / C64::new(probabilities[chosen], 0.0),
    );
    Ok((
        chosen as u8,
        post,
        ResetReport {
            probabilities,
            conditioned_ground,
            mean,
            average,
        },
    ))
}

/// Fitted dual-Rabi contrasts. `contrast[k][j]` is the amplitude of readout
/// channel `k` against the rotation of qubit `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkFit {
    pub contrast: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl CrosstalkFit {
    /// Isolated-to-direct contrast ratio seen by channel `k`.
    pub fn ratio(&self, k: usize) -> f64 {
        let j = 1 - k;
        self.contrast[k][j] / self.contrast[j][j]
    }
}

/// Simulated dual Rabi experiment: at point `i` qubit 1 is rotated by
/// `theta1[i]` and qubit 2 by `theta2[i]` about X, then both are read out
/// `shots` times. Each channel's excited-record frequency is fitted to
/// `offset + Σ_j c_j (1 - cos θ_j) / 2` with the Rabi frequency and phase
/// fixed; qubits whose angle never varies are left out of the fit.
pub fn crosstalk_rabi_probe<R: Rng>(
    theta1: &[f64],
    theta2: &[f64],
    models: &[MeasurementModel; 2],
    shots: usize,
    rng: &mut R,
) -> Result<CrosstalkFit> {
    if shots == 0 {
        return Err(Error::Config("crosstalk probe needs at least one shot".into()));
    }
    if theta1.len() != theta2.len() || theta1.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: theta1.len(),
            got: theta2.len(),
        });
    }
    for m in models {
        m.validate()?;
    }
    let npts = theta1.len();
    let mut freq = [vec![0.0; npts], vec![0.0; npts]];
    for i in 0..npts {
        let pe = [(theta1[i] / 2.0).sin().powi(2), (theta2[i] / 2.0).sin().powi(2)];
        let mut counts = [0usize; 2];
        for _ in 0..shots {
            let t = (u8::from(rng.gen::<f64>() < pe[0]) << 1) | u8::from(rng.gen::<f64>() < pe[1]);
            let tb = [(t >> 1) as usize, (t & 1) as usize];
            for k in 0..2 {
                let j = 1 - k;
                let x = models[k].crosstalk_ratio;
                let p1 = (1.0 - x) * models[k].confusion[tb[k]][1] + x * models[j].confusion[tb[j]][1];
                if rng.gen::<f64>() < p1 {
                    counts[k] += 1;
                }
            }
        }
        for k in 0..2 {
            freq[k][i] = counts[k] as f64 / shots as f64;
        }
    }
    let regress = [
        theta1.iter().map(|t| 0.5 * (1.0 - t.cos())).collect::<Vec<_>>(),
        theta2.iter().map(|t| 0.5 * (1.0 - t.cos())).collect::<Vec<_>>(),
    ];
    let varies: Vec<usize> = (0..2)
        .filter(|&j| {
            let r = &regress[j];
            r.iter().any(|v| (v - r[0]).abs() > 1e-12)
        })
        .collect();
    let mut design = DMatrix::<f64>::from_element(npts, 1 + varies.len(), 1.0);
    for (c, &j) in varies.iter().enumerate() {
        for i in 0..npts {
            design[(i, c + 1)] = regress[j][i];
        }
    }
    let svd = design.clone().svd(true, true);
    if svd.rank(1e-10) < design.ncols() {
        return Err(Error::RankDeficient {
            rank: svd.rank(1e-10),
            needed: design.ncols(),
        });
    }
    let mut contrast = [[0.0; 2]; 2];
    let mut offset = [0.0; 2];
    for k in 0..2 {
        let y = DVector::from_vec(freq[k].clone());
        let beta = svd.solve(&y, 1e-12).map_err(|e| Error::Fit(e.to_string()))?;
        offset[k] = beta[0];
        for (c, &j) in varies.iter().enumerate() {
            contrast[k][j] = beta[c + 1];
        }
    }
    Ok(CrosstalkFit { contrast, offset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::CVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_transmons() -> HilbertSpaceLayout {
        HilbertSpaceLayout::new(&[("q1", 2), ("q2", 2)]).unwrap()
    }

    fn plus_plus() -> QuantumState {
        let v = CVector::from_element(4, C64::new(0.5, 0.0));
        QuantumState::pure(two_transmons(), v).unwrap()
    }

    #[test]
    fn ground_state_reads_zero() {
        let s = QuantumState::basis(&two_transmons(), &[0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = ReferencePhaseLedger::new();
        for _ in 0..100 {
            let m = measure_comm(&s, 1, &MeasurementModel::perfect(), &mut l, 0.3, &mut rng).unwrap();
            assert_eq!(m.recorded, 0);
        }
        assert_eq!(l.angles, [0.0, 0.0]);
    }

    #[test]
    fn born_frequency_in_z() {
        let s = plus_plus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = ReferencePhaseLedger::new();
        let n = 100_000;
        let ones: usize = (0..n)
            .map(|_| measure_comm(&s, 2, &MeasurementModel::perfect(), &mut l, 0.0, &mut rng).unwrap().recorded as usize)
            .sum();
        let f = ones as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.005, "{f}");
    }

    #[test]
    fn equatorial_probability() {
        let s = plus_plus();
        let mut l = ReferencePhaseLedger::new();
        for k in 0..9 {
            let theta = k as f64 * 0.7;
            let model = MeasurementModel::perfect().with_basis(MeasurementBasis::Equatorial(theta));
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let m = measure_comm(&s, 1, &model, &mut l, 0.0, &mut rng).unwrap();
            let p0 = 1.0 - m.probability_e;
            assert!((p0 - (theta / 2.0).cos().powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn ledger_books_true_excited_outcome() {
        let s = QuantumState::basis(&two_transmons(), &[1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = ReferencePhaseLedger::new();
        measure_comm(&s, 1, &MeasurementModel::perfect(), &mut l, -0.5, &mut rng).unwrap();
        assert!((l.angles[0] - (std::f64::consts::TAU - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn perfect_reset_of_ground() {
        let s = QuantumState::basis(&two_transmons(), &[0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (o, post, rep) = measure_and_reset_comm(&s, &ResetModel::perfect(), &mut rng).unwrap();
        assert_eq!(o, 0);
        assert!((rep.conditioned_ground[0] - 1.0).abs() < 1e-12);
        assert!((post.density()[(0, 0)].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibrated_reset_fidelities() {
        let sp = crate::hamiltonians::SystemParams::paper_defaults();
        let model = ResetModel::paper_defaults(&sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, _, rep) = measure_and_reset_comm(&plus_plus(), &model, &mut rng).unwrap();
        let target = [0.993, 0.957, 0.977, 0.942];
        for r in 0..4 {
            assert!((rep.conditioned_ground[r] - target[r]).abs() < 0.015, "{r}: {:?}", rep.conditioned_ground);
        }
        assert!((rep.average - 0.97).abs() < 0.01, "{}", rep.average);
        assert!((rep.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn record_probabilities_normalized() {
        let mut m = [MeasurementModel::paper_defaults(1).unwrap(), MeasurementModel::paper_defaults(2).unwrap()];
        m[0].crosstalk_ratio = 0.01;
        for t in 0..4 {
            let s: f64 = (0..4).map(|r| joint_record_probability(&m, t, r)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 4.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn driven_contrast_matches_assignment() {
        let m = [MeasurementModel::paper_defaults(1).unwrap(), MeasurementModel::paper_defaults(2).unwrap()];
        let th = grid(41);
        let zeros = vec![0.0; th.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fit = crosstalk_rabi_probe(&th, &zeros, &m, 20_000, &mut rng).unwrap();
        let expect = 2.0 * (m[0].assignment_fidelity() - 0.5);
        assert!((fit.contrast[0][0] - expect).abs() < 0.01, "{} vs {expect}", fit.contrast[0][0]);
    }

    #[test]
    fn no_crosstalk_sits_at_noise_floor() {
        let m = [MeasurementModel::perfect(), MeasurementModel::perfect()];
        let th = grid(41);
        let zeros = vec![0.0; th.len()];
        let shots = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fit = crosstalk_rabi_probe(&th, &zeros, &m, shots, &mut rng).unwrap();
        let ratio = fit.contrast[1][0].abs() / fit.contrast[0][0];
        assert!(ratio < 3.0 / (shots as f64).sqrt(), "{ratio}");
    }
}
