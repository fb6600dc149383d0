//! The teleported-CNOT state machine: Bell pair, local CNOTs, readout of the
//! communication qubits, feedforward and the data-cavity reference frames.
//!
//! The joint layout is `c1, q1, c2, q2`. Outcomes are packed as `2 r1 + r2`
//! with `r1` from module 1. Noise mode interleaves Lindblad windows with the
//! linear dispersive drift for every step duration; local operations are then
//! exact unitaries, Pauli-twirl channels carrying their predicted
//! infidelities, or propagated pulses.

pub mod channels;
pub mod cooling;
pub mod ledger;
pub mod measurement;

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::{pauli_x, CodeKind, LogicalCode};
use crate::error::{Error, Result};
use crate::evolver::{
    bell_drift, bell_frame_shifts, calibrate_rip_amplitude, drive_propagator, echo_pulse,
    reference_phase_op, refocused_rip_gate, rip_half_phases, DiagonalLindblad, PiecewiseDrive,
    RipConfig, BELL_HALF_NS,
};
use crate::fock::{
    embed, embed_multi, CMatrix, CVector, HilbertSpaceLayout, Operator, QuantumState, C64, ONE,
    ZERO,
};
use crate::hamiltonians::{ang, collapse_operators, module_hamiltonian, CollapseOp, SystemParams};

pub use channels::SubspaceTwirl;
pub use cooling::{cooling_reset, cooling_statistics, CoolingConfig, CoolingRun, CoolingStats, ModuleOccupation, ThermalConfig};
pub use ledger::ReferencePhaseLedger;
pub use measurement::{
    crosstalk_rabi_probe, joint_record_probability, measure_and_reset_comm, measure_comm,
    CrosstalkFit, MeasurementBasis, MeasurementModel, ResetModel, ResetReport,
};

/// Lindblad split-steps per µs of window.
const STEPS_PER_US: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BellMode {
    Ideal,
    Rip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalOpMode {
    Ideal,
    /// Ideal unitary followed by a Pauli twirl with the predicted infidelity.
    Channel,
    /// Propagated drives from a [`PulseSet`].
    Pulse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Ideal decode into the transmons, then trace out the cavities.
    Decode,
    /// Codespace projection; leaked weight replaced by the maximally mixed
    /// logical state.
    Project,
}

/// Step durations, ns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub bell_ns: f64,
    pub cnot_control_ns: f64,
    pub cnot_target_ns: f64,
    pub x_feedforward_ns: f64,
}

impl Timing {
    pub fn for_code(kind: CodeKind) -> Self {
        match kind {
            CodeKind::Binomial => Self {
                bell_ns: 2.0 * BELL_HALF_NS,
                cnot_control_ns: 500.0,
                cnot_target_ns: 2000.0,
                x_feedforward_ns: 1000.0,
            },
            CodeKind::Fock => Self {
                bell_ns: 2.0 * BELL_HALF_NS,
                cnot_control_ns: 900.0,
                cnot_target_ns: 1000.0,
                x_feedforward_ns: 900.0,
            },
        }
    }
}

/// Process infidelities of the local operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalOpInfidelities {
    pub cnot_control: f64,
    pub cnot_target: f64,
    pub x_feedforward: f64,
    /// Encode plus decode, per module; split evenly between the two.
    pub encode_decode: [f64; 2],
}

impl LocalOpInfidelities {
    /// Predicted values from Lindblad validation of the optimized pulses.
    pub fn for_code(kind: CodeKind) -> Self {
        match kind {
            CodeKind::Binomial => Self {
                cnot_control: 0.020,
                cnot_target: 0.054,
                x_feedforward: 0.024,
                encode_decode: [0.069, 0.044],
            },
            CodeKind::Fock => Self {
                cnot_control: 0.030,
                cnot_target: 0.029,
                x_feedforward: 0.013,
                encode_decode: [0.041, 0.023],
            },
        }
    }

    /// `1 - F_E+D` summed over both modules.
    pub fn encode_decode_total(&self) -> f64 {
        self.encode_decode[0] + self.encode_decode[1]
    }
}

/// Drives for pulse-mode local operations. Labels name modes of the
/// module layout (`c1, q1` or `c2, q2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSet {
    pub cnot_control: Vec<PiecewiseDrive>,
    pub cnot_target: Vec<PiecewiseDrive>,
    pub x_feedforward: Vec<PiecewiseDrive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub code: CodeKind,
    pub cavity_dim: usize,
    pub bell: BellMode,
    pub local_ops: LocalOpMode,
    pub noise: bool,
    pub feedforward: bool,
    /// Apply Z_L as an explicit cavity rotation instead of a frame update.
    #[serde(default)]
    pub explicit_z: bool,
    pub measurement: [MeasurementModel; 2],
    pub timing: Timing,
    pub infidelities: LocalOpInfidelities,
    pub rip: RipConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulses: Option<PulseSet>,
}

impl ProtocolOptions {
    pub fn ideal(code: CodeKind) -> Self {
        Self {
            code,
            cavity_dim: 6,
            bell: BellMode::Ideal,
            local_ops: LocalOpMode::Ideal,
            noise: false,
            feedforward: true,
            explicit_z: false,
            measurement: [
                MeasurementModel::perfect(),
                MeasurementModel::perfect().with_basis(MeasurementBasis::X),
            ],
            timing: Timing::for_code(code),
            infidelities: LocalOpInfidelities::for_code(code),
            rip: RipConfig::default(),
            pulses: None,
        }
    }

    /// RIP Bell pair, twirl channels, calibrated readout, decoherence.
    pub fn noisy(code: CodeKind) -> Self {
        Self {
            bell: BellMode::Rip,
            local_ops: LocalOpMode::Channel,
            noise: true,
            measurement: [
                MeasurementModel::paper_defaults(1).expect("module 1"),
                MeasurementModel::paper_defaults(2)
                    .expect("module 2")
                    .with_basis(MeasurementBasis::X),
            ],
            ..Self::ideal(code)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.code.code().check_dim(self.cavity_dim)?;
        for m in &self.measurement {
            m.validate()?;
        }
        let t = &self.timing;
        for d in [t.bell_ns, t.cnot_control_ns, t.cnot_target_ns, t.x_feedforward_ns] {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("step duration {d} ns")));
            }
        }
        let f = &self.infidelities;
        for p in [f.cnot_control, f.cnot_target, f.x_feedforward, f.encode_decode[0], f.encode_decode[1]] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("infidelity {p} outside [0, 1]")));
            }
        }
        if self.local_ops == LocalOpMode::Pulse && self.pulses.is_none() {
            return Err(Error::MissingComponent("pulse-mode local operations need a pulse set".into()));
        }
        if self.bell == BellMode::Rip {
            self.rip.validate()?;
        }
        Ok(())
    }
}

/// Amplitude and single-qubit Z corrections of the refocused RIP sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellCalibration {
    pub amplitude: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Phase error left on the `|ee>` component after the Z corrections.
    pub residual: f64,
}

fn ry_half() -> CMatrix {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    CMatrix::from_row_slice(2, 2, &[h, -h, h, h])
}

fn z_phase(phi: f64) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, C64::from_polar(1.0, phi)])
}

fn op2(m: &CMatrix, layout: &HilbertSpaceLayout, label: &str) -> Result<Operator> {
    embed(&Operator::new(HilbertSpaceLayout::single(2)?, m.clone())?, layout, label)
}

/// Calibrate the RIP amplitude for a π entangling phase and the Z
/// corrections that turn the refocused output into `(|00>+|01>+|10>-|11>)/2`.
pub fn calibrate_bell(cfg: &RipConfig, sp: &SystemParams) -> Result<BellCalibration> {
    let amplitude = calibrate_rip_amplitude(cfg, sp)?;
    let cfg = cfg.with_amplitude(amplitude);
    let layout = HilbertSpaceLayout::new(&[("q1", 2), ("q2", 2)])?;
    let start = QuantumState::basis(&layout, &[0, 0])?;
    let ry = &op2(&ry_half(), &layout, "q1")? * &op2(&ry_half(), &layout, "q2")?;
    let s = refocused_rip_gate(&cfg, sp, &start.evolve(&ry))?;
    let v = s.vector().ok_or_else(|| Error::InvalidState("expected a pure state".into()))?;
    let alpha = -(v[2] / v[0]).arg();
    let beta = -(v[1] / v[0]).arg();
    let corrected = v[3] / v[0] * C64::from_polar(1.0, alpha + beta);
    let residual = (corrected / C64::new(-1.0, 0.0)).arg();
    Ok(BellCalibration {
        amplitude,
        alpha,
        beta,
        residual,
    })
}

/// `(|ge> + |eg>)/√2` on `q1, q2` of a (q1, q2) layout.
pub fn psi_plus() -> CVector {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    CVector::from_vec(vec![ZERO, h, h, ZERO])
}

/// Bell state on `q1, q2` (transmons only) from `|gg>`; returns the reduced
/// transmon fidelity to `|Ψ+>`. With `noise` the transmons decohere with
/// their echo coherence times.
pub fn bell_pair_fidelity(mode: BellMode, sp: &SystemParams, cfg: &RipConfig, noise: bool) -> Result<f64> {
    let layout = HilbertSpaceLayout::new(&[("q1", 2), ("q2", 2)])?;
    let start = QuantumState::basis(&layout, &[0, 0])?;
    let out = match mode {
        BellMode::Ideal => start.evolve(&ideal_bell_op(&layout)?),
        BellMode::Rip => {
            let cal = calibrate_bell(cfg, sp)?;
            let lind = if noise { Some(bell_lindblad(sp, &layout)?) } else { None };
            rip_bell(&start, sp, cfg, &cal, lind.as_ref())?
        }
    };
    Ok(out.partial_trace(&["q1", "q2"])?.overlap_with(&psi_plus()))
}

fn ideal_bell_op(layout: &HilbertSpaceLayout) -> Result<Operator> {
    let l = HilbertSpaceLayout::new(&[("q1", 2), ("q2", 2)])?;
    let gg = QuantumState::basis(&l, &[0, 0])?.vector().cloned().expect("pure");
    let u = crate::fock::unitary_from_transfers(&[gg], &[psi_plus()])?;
    embed_multi(&u, layout, &["q1", "q2"])
}

/// Bell-step Lindblad generator: echo coherence for the transmons, all
/// modes of `layout`, linear dispersive drift.
fn bell_lindblad(sp: &SystemParams, layout: &HilbertSpaceLayout) -> Result<DiagonalLindblad> {
    let mut echo = sp.clone();
    for m in [&mut echo.module1.transmon, &mut echo.module2.transmon] {
        if m.t2_echo.is_some() {
            m.t2_ramsey = m.t2_echo;
        }
    }
    let collapse = collapse_operators(&echo, layout)?;
    let drift: Vec<C64> = bell_drift(layout, sp)?.into_iter().map(|e| C64::new(e, 0.0)).collect();
    DiagonalLindblad::new(&Operator::from_diagonal(layout, &drift)?, &collapse)
}

/// `Ry ⊗ Ry`, refocused RIP, `Z(α) ⊗ Z(β)`, `I ⊗ Ry`.
fn rip_bell(
    state: &QuantumState,
    sp: &SystemParams,
    cfg: &RipConfig,
    cal: &BellCalibration,
    noise: Option<&DiagonalLindblad>,
) -> Result<QuantumState> {
    let layout = state.layout().clone();
    let cfg = cfg.with_amplitude(cal.amplitude);
    let ry1 = op2(&ry_half(), &layout, "q1")?;
    let ry2 = op2(&ry_half(), &layout, "q2")?;
    let s = state.evolve(&(&ry1 * &ry2));
    let s = match noise {
        None => refocused_rip_gate(&cfg, sp, &s)?,
        Some(lind) => {
            let n = layout.total_dim();
            rip_half_phases(&cfg, sp, &layout, 0.0, BELL_HALF_NS)?;
            let phase = |t0: f64, t1: f64| -> Vec<f64> {
                rip_half_phases(&cfg, sp, &layout, t0 * 1e3, t1 * 1e3).unwrap_or_else(|_| vec![0.0; n])
            };
            let half = BELL_HALF_NS * 1e-3;
            let steps = window_steps(half);
            let echo = echo_pulse(&layout)?;
            let mut rho = lind.evolve(&s.density(), half, steps, Some(&phase));
            rho = echo.matrix() * rho * echo.matrix().adjoint();
            rho = lind.evolve(&rho, half, steps, Some(&phase));
            QuantumState::mixed_unchecked(layout.clone(), rho)
        }
    };
    let zc = &op2(&z_phase(cal.alpha), &layout, "q1")? * &op2(&z_phase(cal.beta), &layout, "q2")?;
    Ok(s.evolve(&zc).evolve(&ry2))
}

fn window_steps(duration_us: f64) -> usize {
    ((duration_us * STEPS_PER_US).ceil() as usize).max(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub step: String,
    pub duration_ns: f64,
}

/// One shot of the protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRecord {
    /// Recorded bits `[r1, r2]`.
    pub outcome: [u8; 2],
    pub true_outcome: [u8; 2],
    /// Pre-measurement Born probabilities of `00, 01, 10, 11`.
    pub probabilities: [f64; 4],
    pub feedforward: Vec<String>,
    pub seed: u64,
    pub shot: u64,
    pub timeline: Vec<TimelineEntry>,
    /// Frame angles booked on `c1, c2`, rad.
    pub frame: [f64; 2],
}

impl ProtocolRecord {
    pub fn outcome_index(&self) -> u8 {
        2 * self.outcome[0] + self.outcome[1]
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn outcome_label(o: u8) -> String {
    format!("{}{}", (o >> 1) & 1, o & 1)
}

/// Counter-based shot RNG keyed by `(seed, shot)`.
pub fn shot_rng(seed: u64, shot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot);
    rng
}

/// State after the measurement window, per true outcome.
#[derive(Clone, Debug)]
pub struct BranchSet {
    pub p_true: [f64; 4],
    /// Normalized, frame-resolved states; `None` for impossible outcomes.
    pub states: Vec<Option<QuantumState>>,
    /// Frame angles booked before measurement, and per true outcome.
    pub ledger: Vec<ReferencePhaseLedger>,
    pub timeline: Vec<TimelineEntry>,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub true_outcome: u8,
    pub recorded: u8,
    pub probability: f64,
    pub state: QuantumState,
}

struct LocalOps {
    cnot: [Operator; 2],
    x_target: Operator,
    reset: [Operator; 2],
    meas_rotation: Operator,
    projectors: [Operator; 4],
    decode: Operator,
}

struct Noise {
    measure: DiagonalLindblad,
    idle: [DiagonalLindblad; 2],
    /// Dissipation only, per module (pulse mode).
    passive: [DiagonalLindblad; 2],
    bell: DiagonalLindblad,
    cnot: [SubspaceTwirl; 2],
    x_target: SubspaceTwirl,
    encode: [SubspaceTwirl; 2],
    decode: [SubspaceTwirl; 2],
}

pub struct Protocol {
    sp: SystemParams,
    opts: ProtocolOptions,
    code: LogicalCode,
    layout: HilbertSpaceLayout,
    ops: LocalOps,
    bell_cal: Option<BellCalibration>,
    noise: Option<Noise>,
    durations_ns: [f64; 3],
}

fn module_labels(k: usize) -> [&'static str; 2] {
    if k == 1 {
        ["c1", "q1"]
    } else {
        ["c2", "q2"]
    }
}

impl Protocol {
    pub fn new(sp: &SystemParams, opts: ProtocolOptions) -> Result<Self> {
        opts.validate()?;
        sp.validate()?;
        let dim = opts.cavity_dim;
        let code = opts.code.code();
        let layout = HilbertSpaceLayout::new(&[("c1", dim), ("q1", 2), ("c2", dim), ("q2", 2)])?;
        let (cnot, x_target, durations_ns) = match (&opts.local_ops, &opts.pulses) {
            (LocalOpMode::Pulse, Some(p)) => {
                let d = [
                    pulse_duration_ns(&p.cnot_control)?,
                    pulse_duration_ns(&p.cnot_target)?,
                    pulse_duration_ns(&p.x_feedforward)?,
                ];
                (
                    [
                        pulse_unitary(sp, 1, dim, &p.cnot_control, &layout)?,
                        pulse_unitary(sp, 2, dim, &p.cnot_target, &layout)?,
                    ],
                    pulse_unitary(sp, 2, dim, &p.x_feedforward, &layout)?,
                    d,
                )
            }
            _ => (
                [
                    embed_multi(&code.cnot_cavity_control(dim)?, &layout, &["c1", "q1"])?,
                    embed_multi(&code.cnot_transmon_control(dim)?, &layout, &["c2", "q2"])?,
                ],
                embed(&Operator::new(HilbertSpaceLayout::single(dim)?, code.logical_x(dim)?)?, &layout, "c2")?,
                [
                    opts.timing.cnot_control_ns,
                    opts.timing.cnot_target_ns,
                    opts.timing.x_feedforward_ns,
                ],
            ),
        };
        let mut projectors = Vec::with_capacity(4);
        for t in 0..4u8 {
            let a = measurement::level_projector(&layout, "q1", ((t >> 1) & 1) as usize)?;
            let b = measurement::level_projector(&layout, "q2", (t & 1) as usize)?;
            projectors.push(&a * &b);
        }
        let meas_rotation = &op2(&opts.measurement[0].basis.rotation(), &layout, "q1")?
            * &op2(&opts.measurement[1].basis.rotation(), &layout, "q2")?;
        let decode_local = code.decode_unitary(dim)?;
        let decode = &embed_multi(&decode_local, &layout, &["c1", "q1"])?
            * &embed_multi(&decode_local, &layout, &["c2", "q2"])?;
        let ops = LocalOps {
            cnot,
            x_target,
            reset: [op2(&pauli_x(), &layout, "q1")?, op2(&pauli_x(), &layout, "q2")?],
            meas_rotation,
            projectors: projectors.try_into().map_err(|_| Error::Config("projectors".into()))?,
            decode,
        };
        let bell_cal = match opts.bell {
            BellMode::Rip => Some(calibrate_bell(&opts.rip, sp)?),
            BellMode::Ideal => None,
        };
        let noise = if opts.noise {
            Some(build_noise(sp, &opts, &code, &layout)?)
        } else {
            None
        };
        Ok(Self {
            sp: sp.clone(),
            opts,
            code,
            layout,
            ops,
            bell_cal,
            noise,
            durations_ns,
        })
    }

    pub fn layout(&self) -> &HilbertSpaceLayout {
        &self.layout
    }

    pub fn options(&self) -> &ProtocolOptions {
        &self.opts
    }

    pub fn code(&self) -> &LogicalCode {
        &self.code
    }

    pub fn bell_calibration(&self) -> Option<&BellCalibration> {
        self.bell_cal.as_ref()
    }

    /// Isometry from the 4-dim logical space (control slow) into the joint
    /// layout with both transmons in `g`.
    pub fn logical_isometry(&self) -> Result<CMatrix> {
        let dim = self.opts.cavity_dim;
        let g = crate::codes::qubit(0);
        let mut cols = Vec::with_capacity(4);
        for i in 0..2 {
            for j in 0..2 {
                let v = self
                    .code
                    .codeword(i, dim)?
                    .kronecker(&g)
                    .kronecker(&self.code.codeword(j, dim)?.kronecker(&g));
                cols.push(v);
            }
        }
        Ok(CMatrix::from_columns(&cols))
    }

    /// Encoded pure input from logical amplitudes `a_ij |i_L j_L>`.
    pub fn encode_input(&self, amplitudes: &CVector) -> Result<QuantumState> {
        if amplitudes.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: amplitudes.len(),
            });
        }
        QuantumState::pure_normalized(self.layout.clone(), self.logical_isometry()? * amplitudes)
    }

    /// Encoded mixed input from a 4×4 logical density matrix.
    pub fn encode_density(&self, rho: &CMatrix) -> Result<QuantumState> {
        if rho.nrows() != 4 || rho.ncols() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: rho.nrows(),
            });
        }
        let w = self.logical_isometry()?;
        QuantumState::mixed(self.layout.clone(), &w * rho * w.adjoint())
    }

    /// Step 1. Expects both transmons in `g`.
    pub fn generate_bell_pair(&self, state: &QuantumState, ledger: &mut ReferencePhaseLedger) -> Result<QuantumState> {
        self.check_layout(state)?;
        match self.opts.bell {
            BellMode::Ideal => {
                let s = state.evolve(&ideal_bell_op(&self.layout)?);
                match &self.noise {
                    Some(n) => Ok(mixed(&self.layout, n.bell.evolve(&s.density(), self.opts.timing.bell_ns * 1e-3, window_steps(self.opts.timing.bell_ns * 1e-3), None))),
                    None => Ok(s),
                }
            }
            BellMode::Rip => {
                let cal = self.bell_cal.as_ref().expect("calibrated in new");
                let lind = self.noise.as_ref().map(|n| &n.bell);
                let s = rip_bell(state, &self.sp, &self.opts.rip, cal, lind)?;
                let shifts = bell_frame_shifts(&self.sp);
                let mut inc = ReferencePhaseLedger::new();
                for k in 0..2 {
                    ledger.add(k + 1, -shifts[k])?;
                    inc.add(k + 1, -shifts[k])?;
                }
                Ok(s.evolve(&inc.resolve_op(&self.layout)?))
            }
        }
    }

    /// Control-module CNOT (data 1 controls q1).
    pub fn local_cnot_control_module(&self, state: &QuantumState) -> Result<QuantumState> {
        self.local_op(state, 0)
    }

    /// Target-module CNOT (q2 controls data 2).
    pub fn local_cnot_target_module(&self, state: &QuantumState) -> Result<QuantumState> {
        self.local_op(state, 1)
    }

    fn local_op(&self, state: &QuantumState, k: usize) -> Result<QuantumState> {
        self.check_layout(state)?;
        let noise = self.noise.as_ref();
        match (self.opts.local_ops, noise) {
            (LocalOpMode::Channel, Some(n)) => {
                let rho = state.evolve(&self.ops.cnot[k]).density();
                Ok(mixed(&self.layout, n.cnot[k].apply(&rho)))
            }
            (LocalOpMode::Pulse, Some(n)) => Ok(self.passive_sandwich(state, &self.ops.cnot[k], &n.passive[k], self.durations_ns[k])),
            _ => Ok(state.evolve(&self.ops.cnot[k])),
        }
    }

    fn passive_sandwich(&self, state: &QuantumState, u: &Operator, lind: &DiagonalLindblad, duration_ns: f64) -> QuantumState {
        let half = 0.5 * duration_ns * 1e-3;
        let steps = window_steps(half);
        let rho = lind.evolve(&state.density(), half, steps, None);
        let rho = u.matrix() * rho * u.matrix().adjoint();
        mixed(&self.layout, lind.evolve(&rho, half, steps, None))
    }

    fn check_layout(&self, state: &QuantumState) -> Result<()> {
        if state.layout() != &self.layout {
            return Err(Error::DimensionMismatch {
                expected: self.layout.total_dim(),
                got: state.layout().total_dim(),
            });
        }
        Ok(())
    }

    fn idle_module(&self) -> Option<(usize, f64)> {
        let d = self.durations_ns[1] - self.durations_ns[0];
        if d > 0.0 {
            Some((0, d))
        } else if d < 0.0 {
            Some((1, -d))
        } else {
            None
        }
    }

    /// Frame drift booked for true outcome `t` (noise mode only).
    fn measurement_frame(&self, t: u8) -> [f64; 2] {
        if self.noise.is_none() {
            return [0.0; 2];
        }
        let tm = self.measurement_window_us();
        let idle1 = match self.idle_module() {
            Some((0, d)) => d * 1e-3,
            _ => 0.0,
        };
        let chi = [ang(self.sp.module1.chi_cq.chi), ang(self.sp.module2.chi_cq.chi)];
        let bits = [(t >> 1) & 1, t & 1];
        [
            -f64::from(bits[0]) * chi[0] * (tm + idle1),
            -f64::from(bits[1]) * chi[1] * tm,
        ]
    }

    fn measurement_window_us(&self) -> f64 {
        self.opts.measurement[0].duration_ns.max(self.opts.measurement[1].duration_ns) * 1e-3
    }

    fn timeline(&self) -> Vec<TimelineEntry> {
        let e = |s: &str, d: f64| TimelineEntry {
            step: s.to_string(),
            duration_ns: d,
        };
        let tm = self.measurement_window_us() * 1e3;
        let mut v = vec![
            e("bell", self.opts.timing.bell_ns),
            e("local_cnot", self.durations_ns[0].max(self.durations_ns[1])),
            e("measure", tm),
        ];
        if self.opts.feedforward {
            v.push(e("feedforward", self.durations_ns[2]));
        }
        v
    }

    /// Steps 1–3 up to and including the measurement window, branched on
    /// the true outcome.
    pub fn run_to_measurement(&self, input: &QuantumState) -> Result<BranchSet> {
        self.check_layout(input)?;
        let mut ledger = ReferencePhaseLedger::new();
        let s = self.generate_bell_pair(input, &mut ledger)?;
        let s = self.local_cnot_control_module(&s)?;
        let mut s = self.local_cnot_target_module(&s)?;
        if let (Some(n), Some((k, d))) = (&self.noise, self.idle_module()) {
            let t = d * 1e-3;
            s = mixed(&self.layout, n.idle[k].evolve(&s.density(), t, window_steps(t), None));
        }
        let s = s.evolve(&self.ops.meas_rotation);
        let mut p_true = [0.0; 4];
        let mut states = Vec::with_capacity(4);
        let mut ledgers = vec![ledger.clone()];
        for t in 0..4u8 {
            let proj = &self.ops.projectors[t as usize];
            let p = s.expectation(proj).re.max(0.0);
            p_true[t as usize] = p;
            let mut l = ledger.clone();
            if p < 1e-14 {
                states.push(None);
                ledgers.push(l);
                continue;
            }
            let mut b = project_state(&s, proj, p);
            if let Some(n) = &self.noise {
                let tm = self.measurement_window_us();
                b = mixed(&self.layout, n.measure.evolve(&b.density(), tm, window_steps(tm), None));
            }
            let inc = self.measurement_frame(t);
            let mut step = ReferencePhaseLedger::new();
            for k in 0..2 {
                if inc[k] != 0.0 {
                    l.add(k + 1, inc[k])?;
                    step.add(k + 1, inc[k])?;
                }
            }
            if step.angles != [0.0; 2] {
                b = b.evolve(&step.resolve_op(&self.layout)?);
            }
            states.push(Some(b));
            ledgers.push(l);
        }
        let total: f64 = p_true.iter().sum();
        for p in &mut p_true {
            *p /= total;
        }
        Ok(BranchSet {
            p_true,
            states,
            ledger: ledgers,
            timeline: self.timeline(),
        })
    }

    /// Reset, feedforward and frame resolution for recorded outcome `r`.
    /// Linear in `state`, so it may be applied to unnormalized mixtures.
    pub fn finish(&self, state: &QuantumState, recorded: u8) -> Result<(QuantumState, Vec<String>)> {
        if recorded > 3 {
            return Err(Error::InvalidOutcome(recorded));
        }
        let mut s = state.clone();
        if recorded & 2 != 0 {
            s = s.evolve(&self.ops.reset[0]);
        }
        if recorded & 1 != 0 {
            s = s.evolve(&self.ops.reset[1]);
        }
        self.feedforward(recorded, &s)
    }

    /// Feedforward on (control data, target data): `00 → I⊗X_L`,
    /// `01 → Z_L⊗X_L`, `10 → I⊗I`, `11 → Z_L⊗I`.
    pub fn feedforward(&self, outcome: u8, state: &QuantumState) -> Result<(QuantumState, Vec<String>)> {
        if outcome > 3 {
            return Err(Error::InvalidOutcome(outcome));
        }
        let mut labels = Vec::new();
        let mut s = state.clone();
        if !self.opts.feedforward {
            return Ok((s, labels));
        }
        if let Some(n) = &self.noise {
            let t = self.durations_ns[2] * 1e-3;
            let rho = n.idle[0].evolve(&s.density(), t, window_steps(t), None);
            s = mixed(&self.layout, rho);
        }
        let x = outcome & 2 == 0;
        let z = outcome & 1 != 0;
        if x {
            labels.push("X_L(target)".to_string());
            s = match (self.opts.local_ops, &self.noise) {
                (LocalOpMode::Channel, Some(n)) => mixed(&self.layout, n.x_target.apply(&s.evolve(&self.ops.x_target).density())),
                (LocalOpMode::Pulse, Some(n)) => self.passive_sandwich(&s, &self.ops.x_target, &n.passive[1], self.durations_ns[2]),
                _ => s.evolve(&self.ops.x_target),
            };
        } else if let Some(n) = &self.noise {
            let t = self.durations_ns[2] * 1e-3;
            s = mixed(&self.layout, n.idle[1].evolve(&s.density(), t, window_steps(t), None));
        }
        if z {
            labels.push("Z_L(control)".to_string());
            let theta = self.code.z_angle;
            let u = if self.opts.explicit_z {
                reference_phase_op(theta, "c1", &self.layout)?
            } else {
                let mut l = ReferencePhaseLedger::new();
                l.add(1, theta)?;
                l.resolve_op(&self.layout)?
            };
            s = s.evolve(&u);
        }
        Ok((s, labels))
    }

    /// Every `(true, recorded)` branch with nonzero weight.
    pub fn branches(&self, input: &QuantumState) -> Result<Vec<Branch>> {
        let set = self.run_to_measurement(input)?;
        let mut out = Vec::new();
        for t in 0..4u8 {
            let Some(st) = &set.states[t as usize] else { continue };
            for r in 0..4u8 {
                let w = joint_record_probability(&self.opts.measurement, t, r);
                if w == 0.0 {
                    continue;
                }
                out.push(Branch {
                    true_outcome: t,
                    recorded: r,
                    probability: set.p_true[t as usize] * w,
                    state: self.finish(st, r)?.0,
                });
            }
        }
        Ok(out)
    }

    /// Unnormalized state per recorded outcome, summed over true outcomes.
    pub fn recorded_outputs(&self, input: &QuantumState) -> Result<Vec<Option<(f64, QuantumState)>>> {
        let set = self.run_to_measurement(input)?;
        let n = self.layout.total_dim();
        let mut out = Vec::with_capacity(4);
        for r in 0..4u8 {
            let mut m = CMatrix::zeros(n, n);
            let mut total = 0.0;
            for t in 0..4u8 {
                let Some(st) = &set.states[t as usize] else { continue };
                let w = set.p_true[t as usize] * joint_record_probability(&self.opts.measurement, t, r);
                if w > 0.0 {
                    m += st.density() * C64::new(w, 0.0);
                    total += w;
                }
            }
            if total < 1e-14 {
                out.push(None);
                continue;
            }
            let (s, _) = self.finish(&mixed(&self.layout, m / C64::new(total, 0.0)), r)?;
            out.push(Some((total, s)));
        }
        Ok(out)
    }

    /// Outcome-averaged output state (the protocol as a channel).
    pub fn channel_output(&self, input: &QuantumState) -> Result<QuantumState> {
        let n = self.layout.total_dim();
        let mut m = CMatrix::zeros(n, n);
        for (p, s) in self.recorded_outputs(input)?.into_iter().flatten() {
            m += s.density() * C64::new(p, 0.0);
        }
        Ok(mixed(&self.layout, m))
    }

    /// One shot keyed by `(seed, shot)`.
    pub fn teleported_cnot(&self, input: &QuantumState, seed: u64, shot: u64) -> Result<(QuantumState, ProtocolRecord)> {
        let set = self.run_to_measurement(input)?;
        let (t, r) = self.sample_outcome(&set, seed, shot);
        let st = set.states[t as usize].as_ref().ok_or(Error::InvalidOutcome(t))?;
        let (out, ff) = self.finish(st, r)?;
        Ok((out, self.record(&set, t, r, ff, seed, shot)))
    }

    fn sample_outcome(&self, set: &BranchSet, seed: u64, shot: u64) -> (u8, u8) {
        let mut rng = shot_rng(seed, shot);
        let t = sample_index(&set.p_true, rng.gen());
        let w: Vec<f64> = (0..4).map(|r| joint_record_probability(&self.opts.measurement, t, r)).collect();
        let r = sample_index(&w, rng.gen());
        (t, r)
    }

    fn record(&self, set: &BranchSet, t: u8, r: u8, ff: Vec<String>, seed: u64, shot: u64) -> ProtocolRecord {
        let mut frame = set.ledger[1 + t as usize].angles;
        if ff.iter().any(|l| l.starts_with("Z_L")) && !self.opts.explicit_z {
            frame[0] = (frame[0] + self.code.z_angle).rem_euclid(std::f64::consts::TAU);
        }
        ProtocolRecord {
            outcome: [(r >> 1) & 1, r & 1],
            true_outcome: [(t >> 1) & 1, t & 1],
            probabilities: set.p_true,
            feedforward: ff,
            seed,
            shot,
            timeline: set.timeline.clone(),
            frame,
        }
    }

    /// Records for `shots` shots of the same input; the state evolution is
    /// shared and only the outcome sampling is per shot.
    pub fn sample_records(&self, input: &QuantumState, seed: u64, shots: u64) -> Result<Vec<ProtocolRecord>> {
        let set = self.run_to_measurement(input)?;
        let ff_labels: Vec<Vec<String>> = (0..4u8).map(|r| self.feedforward_labels(r)).collect();
        Ok((0..shots)
            .into_par_iter()
            .map(|shot| {
                let (t, r) = self.sample_outcome(&set, seed, shot);
                self.record(&set, t, r, ff_labels[r as usize].clone(), seed, shot)
            })
            .collect())
    }

    fn feedforward_labels(&self, r: u8) -> Vec<String> {
        let mut v = Vec::new();
        if self.opts.feedforward {
            if r & 2 == 0 {
                v.push("X_L(target)".to_string());
            }
            if r & 1 != 0 {
                v.push("Z_L(control)".to_string());
            }
        }
        v
    }

    /// Logical two-qubit density matrix of an output state.
    pub fn logical_output(&self, state: &QuantumState, readout: Readout) -> Result<CMatrix> {
        self.check_layout(state)?;
        match readout {
            Readout::Decode => Ok(state.evolve(&self.ops.decode).partial_trace(&["q1", "q2"])?.density()),
            Readout::Project => {
                let data = state.partial_trace(&["c1", "c2"])?.density();
                let v = self.code.isometry(self.opts.cavity_dim)?;
                let vv = v.kronecker(&v);
                let mut rho = vv.adjoint() * data * &vv;
                let leak = 1.0 - rho.trace().re;
                rho += CMatrix::identity(4, 4) * C64::new(leak / 4.0, 0.0);
                Ok(rho)
            }
        }
    }

    /// Encode (with its channel in noise mode), teleported CNOT averaged
    /// over outcomes, decode (with its channel) and read out.
    pub fn pipeline_output(&self, logical_rho: &CMatrix, readout: Readout) -> Result<CMatrix> {
        let mut input = self.encode_density(logical_rho)?;
        let twirl = self.noise.as_ref().filter(|_| self.opts.local_ops != LocalOpMode::Ideal);
        if let Some(n) = twirl {
            let mut rho = input.density();
            for t in &n.encode {
                rho = t.apply(&rho);
            }
            input = mixed(&self.layout, rho);
        }
        let mut out = self.channel_output(&input)?;
        if let Some(n) = twirl {
            let mut rho = out.density();
            for t in &n.decode {
                rho = t.apply(&rho);
            }
            out = mixed(&self.layout, rho);
        }
        self.logical_output(&out, readout)
    }
}

fn mixed(layout: &HilbertSpaceLayout, m: CMatrix) -> QuantumState {
    QuantumState::mixed_unchecked(layout.clone(), m)
}

fn project_state(s: &QuantumState, proj: &Operator, p: f64) -> QuantumState {
    match s {
        QuantumState::Pure { layout, vector } => QuantumState::Pure {
            layout: layout.clone(),
            vector: proj.matrix() * vector / C64::new(p.sqrt(), 0.0),
        },
        QuantumState::Mixed { layout, matrix } => {
            mixed(layout, proj.matrix() * matrix * proj.matrix() / C64::new(p, 0.0))
        }
    }
}

fn sample_index(weights: &[f64], u: f64) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut x = u * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if x < w {
            return i as u8;
        }
        x -= w;
    }
    last as u8
}

fn pulse_duration_ns(drives: &[PiecewiseDrive]) -> Result<f64> {
    let d = drives
        .first()
        .ok_or_else(|| Error::MissingComponent("empty pulse".into()))?;
    Ok(d.duration_us() * 1e3)
}

fn pulse_unitary(
    sp: &SystemParams,
    module: usize,
    dim: usize,
    drives: &[PiecewiseDrive],
    layout: &HilbertSpaceLayout,
) -> Result<Operator> {
    let labels = module_labels(module);
    let local = HilbertSpaceLayout::new(&[(labels[0], dim), (labels[1], 2)])?;
    let h0 = module_hamiltonian(sp, module, &local)?;
    let u = drive_propagator(&h0, drives)?;
    embed_multi(&u, layout, &labels)
}

fn module_drift(layout: &HilbertSpaceLayout, sp: &SystemParams, module: usize) -> Result<Operator> {
    let [c, q] = module_labels(module);
    let pc = layout.position(c)?;
    let pq = layout.position(q)?;
    let chi = ang(sp.module(module)?.chi_cq.chi);
    let diag: Vec<C64> = (0..layout.total_dim())
        .map(|i| C64::new(-chi * (layout.digit(i, pc) * layout.digit(i, pq)) as f64, 0.0))
        .collect();
    Operator::from_diagonal(layout, &diag)
}

fn of_module(collapse: &[CollapseOp], module: usize) -> Vec<CollapseOp> {
    let labels = module_labels(module);
    collapse.iter().filter(|c| labels.contains(&c.mode.as_str())).cloned().collect()
}

fn build_noise(sp: &SystemParams, opts: &ProtocolOptions, code: &LogicalCode, layout: &HilbertSpaceLayout) -> Result<Noise> {
    let dim = opts.cavity_dim;
    let collapse = collapse_operators(sp, layout)?;
    let full_drift: Vec<C64> = bell_drift(layout, sp)?.into_iter().map(|e| C64::new(e, 0.0)).collect();
    let measure = DiagonalLindblad::new(&Operator::from_diagonal(layout, &full_drift)?, &collapse)?;
    let zero = Operator::zeros(layout);
    let idle = [
        DiagonalLindblad::new(&module_drift(layout, sp, 1)?, &of_module(&collapse, 1))?,
        DiagonalLindblad::new(&module_drift(layout, sp, 2)?, &of_module(&collapse, 2))?,
    ];
    let passive = [
        DiagonalLindblad::new(&zero, &of_module(&collapse, 1))?,
        DiagonalLindblad::new(&zero, &of_module(&collapse, 2))?,
    ];
    let bell = match opts.bell {
        BellMode::Rip => bell_lindblad(sp, layout)?,
        BellMode::Ideal => {
            let cav: Vec<CollapseOp> = collapse.iter().filter(|c| c.mode.starts_with('c')).cloned().collect();
            DiagonalLindblad::new(&zero, &cav)?
        }
    };
    let v = code.isometry(dim)?;
    let module_block = 2 * dim;
    let vq = v.kronecker(&CMatrix::identity(2, 2));
    let pauli4 = channels::two_qubit_paulis();
    let pauli2 = channels::single_paulis();
    // module 1 occupies the slow factor, module 2 the fast one
    let module_twirl = |k: usize, w: &CMatrix, paulis: &[CMatrix], p: f64| -> Result<SubspaceTwirl> {
        let (l, r) = if k == 1 { (1, module_block) } else { (module_block, 1) };
        SubspaceTwirl::from_average_infidelity(
            channels::pad(w, l, r),
            paulis.iter().map(|m| channels::pad(m, l, r)).collect(),
            p,
        )
    };
    let cavity_w = v.kronecker(&CMatrix::identity(2, 2));
    let cavity_paulis: Vec<CMatrix> = pauli2.iter().map(|m| m.kronecker(&CMatrix::identity(2, 2))).collect();
    let f = &opts.infidelities;
    Ok(Noise {
        measure,
        idle,
        passive,
        bell,
        cnot: [
            module_twirl(1, &vq, &pauli4, f.cnot_control)?,
            module_twirl(2, &vq, &pauli4, f.cnot_target)?,
        ],
        x_target: module_twirl(2, &vq, &pauli4, f.x_feedforward)?,
        encode: [
            module_twirl(1, &cavity_w, &cavity_paulis, 0.5 * f.encode_decode[0])?,
            module_twirl(2, &cavity_w, &cavity_paulis, 0.5 * f.encode_decode[1])?,
        ],
        decode: [
            module_twirl(1, &cavity_w, &cavity_paulis, 0.5 * f.encode_decode[0])?,
            module_twirl(2, &cavity_w, &cavity_paulis, 0.5 * f.encode_decode[1])?,
        ],
    })
}

/// Ideal logical CNOT, control slow.
pub fn logical_cnot() -> CMatrix {
    let mut u = CMatrix::zeros(4, 4);
    for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        u[(j, i)] = ONE;
    }
    u
}

/// Logical Bell states in the order `Ψ+, Ψ-, Φ+, Φ-`.
pub fn bell_states() -> [CVector; 4] {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    let v = |a: [C64; 4]| CVector::from_vec(a.to_vec());
    [
        v([ZERO, h, h, ZERO]),
        v([ZERO, h, -h, ZERO]),
        v([h, ZERO, ZERO, h]),
        v([h, ZERO, ZERO, -h]),
    ]
}

/// Per-outcome correlators at one measurement angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleSweepPoint {
    pub theta: f64,
    pub probabilities: [f64; 4],
    /// `[ZZ, XX, XY, YX, YY]` of the conditioned logical state per outcome.
    pub correlators: [[f64; 5]; 4],
}

/// Conditioned Pauli correlators versus the equatorial angle of the
/// target-module readout, feedforward off.
pub fn measurement_angle_sweep(
    sp: &SystemParams,
    base: &ProtocolOptions,
    thetas: &[f64],
    amplitudes: &CVector,
) -> Result<Vec<AngleSweepPoint>> {
    let paulis = channels::single_paulis();
    let pairs = [(3, 3), (1, 1), (1, 2), (2, 1), (2, 2)];
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let mut opts = base.clone();
        opts.feedforward = false;
        opts.measurement[1].basis = MeasurementBasis::Equatorial(theta);
        let p = Protocol::new(sp, opts)?;
        let input = p.encode_input(amplitudes)?;
        let mut probabilities = [0.0; 4];
        let mut correlators = [[0.0; 5]; 4];
        for (r, item) in p.recorded_outputs(&input)?.into_iter().enumerate() {
            let Some((prob, s)) = item else { continue };
            probabilities[r] = prob;
            let rho = p.logical_output(&s, Readout::Project)?;
            for (c, &(a, b)) in pairs.iter().enumerate() {
                correlators[r][c] = (paulis[a].kronecker(&paulis[b]) * &rho).trace().re;
            }
        }
        out.push(AngleSweepPoint {
            theta,
            probabilities,
            correlators,
        });
    }
    Ok(out)
}
