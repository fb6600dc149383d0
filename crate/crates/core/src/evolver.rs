//! Time evolution: piecewise-constant unitary propagation, Lindblad
//! integration, the resonator-induced-phase (RIP) gate and reference-frame
//! phase operators.
//!
//! Times are µs unless a name says `_ns`. Rates are rad/µs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    annihilation, embed, hermitian_eigen, max_abs, unitary_step, CMatrix, CVector,
    HilbertSpaceLayout, Operator, QuantumState, C64, I, ZERO,
};
use crate::hamiltonians::{ang, CollapseKind, CollapseOp, SystemParams};

pub const DEFAULT_SAMPLE_NS: f64 = 2.0;

/// Piecewise-constant complex drive `ε(t) a† + ε*(t) a` on one mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseDrive {
    pub label: String,
    pub sample_period_ns: f64,
    /// rad/µs
    pub samples: Vec<C64>,
}

impl PiecewiseDrive {
    pub fn new(label: &str, samples: Vec<C64>) -> Self {
        Self {
            label: label.to_string(),
            sample_period_ns: DEFAULT_SAMPLE_NS,
            samples,
        }
    }

    pub fn zeros(label: &str, n: usize) -> Self {
        Self::new(label, vec![ZERO; n])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period_ns > 0.0) {
            return Err(Error::Config("sample period must be positive".into()));
        }
        if self.samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Config("drive samples must be finite".into()));
        }
        Ok(())
    }

    pub fn dt_us(&self) -> f64 {
        self.sample_period_ns * 1e-3
    }

    pub fn duration_us(&self) -> f64 {
        self.dt_us() * self.samples.len() as f64
    }
}

fn check_hermitian(h: &CMatrix) -> Result<()> {
    let err = max_abs(&(h - h.adjoint()));
    let scale = max_abs(h).max(1.0);
    if err > 1e-9 * scale {
        return Err(Error::NonHermitian(err));
    }
    Ok(())
}

/// `exp(-i H t)` applied to a state (time-independent `H`).
pub fn propagate_unitary(h: &Operator, state: &QuantumState, duration: f64) -> Result<QuantumState> {
    check_hermitian(h.matrix())?;
    let u = Operator::new(h.layout().clone(), unitary_step(h.matrix(), duration))?;
    Ok(state.evolve(&u))
}

/// Drive operators `(a_m, a_m†)` for each drive label.
fn drive_ops(layout: &HilbertSpaceLayout, drives: &[PiecewiseDrive]) -> Result<Vec<(CMatrix, CMatrix)>> {
    drives
        .iter()
        .map(|d| {
            d.validate()?;
            let a = embed(&annihilation(layout.dim_of(&d.label)?)?, layout, &d.label)?;
            let a = a.into_matrix();
            let ad = a.adjoint();
            Ok((a, ad))
        })
        .collect()
}

fn check_aligned(drives: &[PiecewiseDrive]) -> Result<(usize, f64)> {
    let Some(first) = drives.first() else {
        return Ok((0, DEFAULT_SAMPLE_NS * 1e-3));
    };
    for d in drives {
        if d.samples.len() != first.samples.len() || d.sample_period_ns != first.sample_period_ns {
            return Err(Error::DimensionMismatch {
                expected: first.samples.len(),
                got: d.samples.len(),
            });
        }
    }
    Ok((first.samples.len(), first.dt_us()))
}

/// Hamiltonian during sample `k`.
fn driven_h(h0: &CMatrix, ops: &[(CMatrix, CMatrix)], drives: &[PiecewiseDrive], k: usize) -> CMatrix {
    let mut h = h0.clone();
    for ((a, ad), d) in ops.iter().zip(drives) {
        let e = d.samples[k];
        h += ad * e + a * e.conj();
    }
    h
}

/// Time-ordered product of step propagators for a set of aligned drives.
pub fn drive_propagator(h0: &Operator, drives: &[PiecewiseDrive]) -> Result<CMatrix> {
    check_hermitian(h0.matrix())?;
    let ops = drive_ops(h0.layout(), drives)?;
    let (n, dt) = check_aligned(drives)?;
    let dim = h0.dim();
    let mut u = CMatrix::identity(dim, dim);
    for k in 0..n {
        let h = driven_h(h0.matrix(), &ops, drives, k);
        u = unitary_step(&h, dt) * u;
    }
    Ok(u)
}

/// Propagate a state through `H0 + Σ drives`.
pub fn propagate_drives(
    h0: &Operator,
    drives: &[PiecewiseDrive],
    state: &QuantumState,
) -> Result<QuantumState> {
    let u = Operator::new(h0.layout().clone(), drive_propagator(h0, drives)?)?;
    Ok(state.evolve(&u))
}

/// Precomputed Lindblad generator pieces.
struct Generator {
    /// `H - (i/2) Σ γ L†L`
    h_eff: CMatrix,
    h_eff_dag: CMatrix,
    jumps: Vec<(CMatrix, CMatrix, f64)>,
}

impl Generator {
    fn new(h: &CMatrix, collapse: &[CollapseOp]) -> Self {
        let mut h_eff = h.clone();
        let mut jumps = Vec::with_capacity(collapse.len());
        for c in collapse {
            let l = c.op.matrix();
            let ld = l.adjoint();
            h_eff -= (&ld * l) * C64::new(0.0, 0.5 * c.rate);
            jumps.push((l.clone(), ld, c.rate));
        }
        let h_eff_dag = h_eff.adjoint();
        Self {
            h_eff,
            h_eff_dag,
            jumps,
        }
    }

    fn rhs(&self, rho: &CMatrix) -> CMatrix {
        // rho need not be Hermitian (coherence blocks)
        let mut out = (&self.h_eff * rho - rho * &self.h_eff_dag) * (-I);
        for (l, ld, rate) in &self.jumps {
            out += (l * rho * ld) * C64::new(*rate, 0.0);
        }
        out
    }

    fn rk4(&self, rho: &CMatrix, dt: f64) -> CMatrix {
        let h = C64::new(dt, 0.0);
        let half = C64::new(0.5 * dt, 0.0);
        let k1 = self.rhs(rho);
        let k2 = self.rhs(&(rho + &k1 * half));
        let k3 = self.rhs(&(rho + &k2 * half));
        let k4 = self.rhs(&(rho + &k3 * h));
        rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0)
    }
}

/// Spectral radius of a Hermitian matrix.
pub fn spectral_radius(h: &CMatrix) -> f64 {
    if h.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = hermitian_eigen(h);
    vals[0].abs().max(vals[vals.len() - 1].abs())
}

/// Fixed-step RK4 integration of the Lindblad master equation.
///
/// Requires `dt * max|H| < 0.1`.
pub fn propagate_lindblad(
    h: &Operator,
    collapse: &[CollapseOp],
    state: &QuantumState,
    duration: f64,
    dt: f64,
) -> Result<QuantumState> {
    check_hermitian(h.matrix())?;
    if !(dt > 0.0) {
        return Err(Error::StepSize(dt));
    }
    let guard = dt * spectral_radius(h.matrix());
    if guard >= 0.1 {
        return Err(Error::StepSize(guard));
    }
    let gen = Generator::new(h.matrix(), collapse);
    let steps = (duration / dt).round().max(0.0) as usize;
    let last = duration - steps as f64 * dt;
    let mut rho = state.density();
    for _ in 0..steps {
        rho = gen.rk4(&rho, dt);
    }
    if last.abs() > 1e-15 {
        rho = gen.rk4(&rho, last);
    }
    Ok(QuantumState::mixed_unchecked(h.layout().clone(), rho))
}

/// Lindblad evolution under piecewise drives, applied to an arbitrary
/// operator (not necessarily a density matrix).
///
/// Each sample is split symmetrically: exact half-step unitary, RK4 on the
/// dissipator over the full sample, exact half-step unitary.
pub fn propagate_lindblad_drives(
    h0: &Operator,
    drives: &[PiecewiseDrive],
    collapse: &[CollapseOp],
    rho: &CMatrix,
) -> Result<CMatrix> {
    let steps = lindblad_drive_steps(h0, drives)?;
    let gen = Generator::new(&CMatrix::zeros(h0.dim(), h0.dim()), collapse);
    let dt = check_aligned(drives)?.1;
    let mut r = rho.clone();
    for u in &steps {
        r = u * &r * u.adjoint();
        r = gen.rk4(&r, dt);
        r = u * &r * u.adjoint();
    }
    Ok(r)
}

/// Half-sample propagators for [`propagate_lindblad_drives`].
pub fn lindblad_drive_steps(h0: &Operator, drives: &[PiecewiseDrive]) -> Result<Vec<CMatrix>> {
    check_hermitian(h0.matrix())?;
    let ops = drive_ops(h0.layout(), drives)?;
    let (n, dt) = check_aligned(drives)?;
    Ok((0..n)
        .map(|k| unitary_step(&driven_h(h0.matrix(), &ops, drives, k), 0.5 * dt))
        .collect())
}

/// Apply precomputed half-step propagators with the dissipator in between.
pub fn apply_lindblad_steps(
    steps: &[CMatrix],
    collapse: &[CollapseOp],
    dt: f64,
    rho: &CMatrix,
) -> CMatrix {
    let dim = rho.nrows();
    let gen = Generator::new(&CMatrix::zeros(dim, dim), collapse);
    let mut r = rho.clone();
    for u in steps {
        r = u * &r * u.adjoint();
        if !gen.jumps.is_empty() {
            r = gen.rk4(&r, dt);
        }
        r = u * &r * u.adjoint();
    }
    r
}

/// Split-step integrator for a diagonal Hamiltonian with per-mode amplitude
/// damping and pure dephasing.
///
/// The diagonal unitary and dephasing act exactly on each element; damping is
/// applied as the exact amplitude-damping channel of each mode. The pieces are
/// Strang-composed per step, which is exact whenever the Hamiltonian is linear
/// in the photon numbers.
#[derive(Clone, Debug)]
pub struct DiagonalLindblad {
    layout: HilbertSpaceLayout,
    energies: Vec<f64>,
    /// (mode position, rate) with dephasing operator sqrt(2) n
    dephasing: Vec<(usize, f64)>,
    damping: Vec<(usize, f64)>,
}

impl DiagonalLindblad {
    pub fn new(h: &Operator, collapse: &[CollapseOp]) -> Result<Self> {
        if !h.is_diagonal(1e-12) {
            return Err(Error::Config("split-step integrator needs a diagonal Hamiltonian".into()));
        }
        let layout = h.layout().clone();
        let energies = h.diagonal().iter().map(|z| z.re).collect();
        let mut dephasing = Vec::new();
        let mut damping = Vec::new();
        for c in collapse {
            let pos = layout.position(&c.mode)?;
            match c.kind {
                CollapseKind::Damping => damping.push((pos, c.rate)),
                CollapseKind::Dephasing => dephasing.push((pos, c.rate)),
            }
        }
        Ok(Self {
            layout,
            energies,
            dephasing,
            damping,
        })
    }

    pub fn layout(&self) -> &HilbertSpaceLayout {
        &self.layout
    }

    /// Evolve for `duration` in `steps` steps. `extra_phase(t0, t1)` may
    /// return additional per-index phases `∫E dt` over the step.
    pub fn evolve(
        &self,
        rho: &CMatrix,
        duration: f64,
        steps: usize,
        extra_phase: Option<&dyn Fn(f64, f64) -> Vec<f64>>,
    ) -> CMatrix {
        let steps = steps.max(1);
        let dt = duration / steps as f64;
        let mut r = rho.clone();
        for s in 0..steps {
            let t0 = s as f64 * dt;
            let mid = t0 + 0.5 * dt;
            let e1 = extra_phase.map(|f| f(t0, mid));
            let e2 = extra_phase.map(|f| f(mid, t0 + dt));
            self.diag_step(&mut r, 0.5 * dt, e1.as_deref());
            for &(pos, rate) in &self.damping {
                self.damp(&mut r, pos, rate * dt);
            }
            self.diag_step(&mut r, 0.5 * dt, e2.as_deref());
        }
        r
    }

    fn diag_step(&self, r: &mut CMatrix, dt: f64, extra: Option<&[f64]>) {
        let n = self.layout.total_dim();
        let phase: Vec<f64> = (0..n)
            .map(|i| self.energies[i] * dt + extra.map_or(0.0, |e| e[i]))
            .collect();
        let occ: Vec<Vec<f64>> = self
            .dephasing
            .iter()
            .map(|&(pos, _)| (0..n).map(|i| self.layout.digit(i, pos) as f64).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let z = r[(i, j)];
                if z == ZERO {
                    continue;
                }
                let mut decay = 0.0;
                for (k, &(_, rate)) in self.dephasing.iter().enumerate() {
                    let d = occ[k][i] - occ[k][j];
                    decay += rate * d * d;
                }
                let f = C64::from_polar((-decay * dt).exp(), -(phase[i] - phase[j]));
                r[(i, j)] = z * f;
            }
        }
    }

    fn damp(&self, r: &mut CMatrix, pos: usize, gamma_t: f64) {
        amplitude_damp(&self.layout, r, pos, gamma_t);
    }
}

/// Exact amplitude-damping channel with `η = exp(-γt)` on one mode.
pub fn amplitude_damp(layout: &HilbertSpaceLayout, r: &mut CMatrix, pos: usize, gamma_t: f64) {
    let dim = layout.modes()[pos].dim;
    let stride = layout.stride(pos);
    let eta = (-gamma_t).exp();
    // kraus[n][k] = sqrt(C(n,k) η^(n-k) (1-η)^k)
    let mut kraus = vec![vec![0.0; dim]; dim];
    for n in 0..dim {
        for k in 0..=n {
            let c = binomial(n, k);
            kraus[n][k] = (c * eta.powi((n - k) as i32) * (1.0 - eta).powi(k as i32)).sqrt();
        }
    }
    let total = layout.total_dim();
    let mut out = CMatrix::zeros(total, total);
    for i in 0..total {
        let ni = layout.digit(i, pos);
        for j in 0..total {
            let z = r[(i, j)];
            if z == ZERO {
                continue;
            }
            let nj = layout.digit(j, pos);
            for k in 0..=ni.min(nj) {
                let w = kraus[ni][k] * kraus[nj][k];
                if w == 0.0 {
                    continue;
                }
                out[(i - k * stride, j - k * stride)] += z * w;
            }
        }
    }
    *r = out;
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c *= (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// `exp(-iθ n)` on one mode.
pub fn reference_phase_op(theta: f64, mode: &str, layout: &HilbertSpaceLayout) -> Result<Operator> {
    let pos = layout.position(mode)?;
    let diag: Vec<C64> = (0..layout.total_dim())
        .map(|i| C64::from_polar(1.0, -theta * layout.digit(i, pos) as f64))
        .collect();
    Operator::from_diagonal(layout, &diag)
}

/// Off-resonant bus drive used for the RIP gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipConfig {
    /// Δ0, MHz
    pub detuning_mhz: f64,
    pub length_ns: f64,
    /// A, rad/µs
    pub amplitude: f64,
    /// κ, 1/µs
    pub kappa: f64,
}

impl Default for RipConfig {
    fn default() -> Self {
        Self {
            detuning_mhz: 20.0,
            length_ns: 300.0,
            amplitude: 0.0,
            kappa: 1.0 / 230.0,
        }
    }
}

impl RipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detuning_mhz > 0.0) || !(self.length_ns > 0.0) {
            return Err(Error::Config("RIP detuning and length must be positive".into()));
        }
        if !self.amplitude.is_finite() || !(self.kappa >= 0.0) {
            return Err(Error::Config("RIP amplitude and κ must be finite".into()));
        }
        Ok(())
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }
}

/// `ε(t) = A [cos(π cos(π t/T)) + 1]`, t in ns.
pub fn rip_envelope(cfg: &RipConfig, t_ns: f64) -> Result<f64> {
    if !(0.0..=cfg.length_ns).contains(&t_ns) {
        return Err(Error::OutOfWindow {
            t: t_ns,
            length: cfg.length_ns,
        });
    }
    Ok(envelope_unchecked(cfg, t_ns))
}

fn envelope_unchecked(cfg: &RipConfig, t_ns: f64) -> f64 {
    let u = std::f64::consts::PI * t_ns / cfg.length_ns;
    cfg.amplitude * ((std::f64::consts::PI * u.cos()).cos() + 1.0)
}

/// Bus frequency shift for each joint transmon state, MHz:
/// `χ_ij = i χ_b1 + j χ_b2`.
pub fn bus_shifts(sp: &SystemParams) -> [[f64; 2]; 2] {
    let (a, b) = (sp.chi_bq1.chi, sp.chi_bq2.chi);
    [[0.0, b], [a, a + b]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipPhases {
    /// `φ_ij` indexed `[i][j]` with 0 = g, 1 = e.
    pub phases: [[f64; 2]; 2],
    /// `φ_ee − φ_eg − φ_ge + φ_gg`
    pub entangling: f64,
}

/// Stark energy `Δ_ij |ξ_ij|²` per branch, rad/µs, for drive amplitude `eps`.
fn branch_energies(cfg: &RipConfig, shifts: &[[f64; 2]; 2], eps: f64) -> [[f64; 2]; 2] {
    let mut e = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let d = ang(cfg.detuning_mhz + shifts[i][j]);
            let xi2 = eps * eps / (4.0 * (d * d + 0.25 * cfg.kappa * cfg.kappa));
            e[i][j] = d * xi2;
        }
    }
    e
}

fn check_resonance(cfg: &RipConfig, shifts: &[[f64; 2]; 2]) -> Result<()> {
    for row in shifts {
        for s in row {
            let d = ang(cfg.detuning_mhz + s);
            if d.abs() <= cfg.kappa.max(1e-12) {
                return Err(Error::Resonance {
                    detuning: d,
                    kappa: cfg.kappa,
                });
            }
        }
    }
    Ok(())
}

/// `∫ε² dt` over `[t0, t1]` (ns bounds, result in rad²/µs), clipped to the
/// pulse window, by composite Simpson.
pub fn envelope_power_integral(cfg: &RipConfig, t0_ns: f64, t1_ns: f64) -> f64 {
    let a = t0_ns.max(0.0);
    let b = t1_ns.min(cfg.length_ns);
    if b <= a {
        return 0.0;
    }
    let n = (((b - a) / cfg.length_ns * 400.0).ceil() as usize).max(2) * 2;
    let h = (b - a) / n as f64;
    let f = |t: f64| envelope_unchecked(cfg, t).powi(2);
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0 * 1e-3
}

/// Per-branch phases `φ_ij = ∫ Δ_ij |ξ_ij(t)|² dt` over one RIP pulse.
pub fn rip_effective_phases(cfg: &RipConfig, shifts: &[[f64; 2]; 2]) -> Result<RipPhases> {
    cfg.validate()?;
    check_resonance(cfg, shifts)?;
    Ok(rip_phases_window(cfg, shifts, 0.0, cfg.length_ns))
}

fn rip_phases_window(cfg: &RipConfig, shifts: &[[f64; 2]; 2], t0: f64, t1: f64) -> RipPhases {
    let p = envelope_power_integral(&cfg.with_amplitude(1.0), t0, t1) * cfg.amplitude * cfg.amplitude;
    // energies are linear in ε², so scale the unit-amplitude energy
    let e = branch_energies(cfg, shifts, 1.0);
    let mut phases = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            phases[i][j] = e[i][j] * p;
        }
    }
    let entangling = phases[1][1] - phases[1][0] - phases[0][1] + phases[0][0];
    RipPhases { phases, entangling }
}

/// Closed-form approximation `χ²/(2Δ³) ∫ε² dt` for equal shifts.
pub fn rip_entangling_approx(cfg: &RipConfig, chi_mhz: f64, detuning_mhz: f64) -> f64 {
    let chi = ang(chi_mhz);
    let d = ang(detuning_mhz);
    chi * chi / (2.0 * d * d * d) * envelope_power_integral(cfg, 0.0, cfg.length_ns)
}

/// Bell-sequence timing: two halves of `half_ns`, each holding one RIP pulse
/// centred in it.
pub const BELL_HALF_NS: f64 = 336.0;

/// Total two-qubit phase `2 φ_ent(A) − χ_q1q2 T_Bell` of the refocused
/// sequence.
pub fn refocused_entangling_phase(cfg: &RipConfig, sp: &SystemParams) -> Result<f64> {
    let ph = rip_effective_phases(cfg, &bus_shifts(sp))?;
    Ok(2.0 * ph.entangling - ang(sp.chi_q1q2) * 2.0 * BELL_HALF_NS * 1e-3)
}

/// Amplitude giving a total entangling phase of π for the refocused
/// sequence.
pub fn calibrate_rip_amplitude(cfg: &RipConfig, sp: &SystemParams) -> Result<f64> {
    let unit = rip_effective_phases(&cfg.with_amplitude(1.0), &bus_shifts(sp))?.entangling;
    let zz = ang(sp.chi_q1q2) * 2.0 * BELL_HALF_NS * 1e-3;
    let need = (std::f64::consts::PI + zz) / (2.0 * unit);
    if !(need > 0.0) {
        return Err(Error::Config("RIP calibration needs a positive entangling phase".into()));
    }
    Ok(need.sqrt())
}

/// Diagonal two-transmon-plus-cavity energies used during the refocused
/// sequence (linear dispersive drift only), as a per-index vector.
pub fn bell_drift(layout: &HilbertSpaceLayout, sp: &SystemParams) -> Result<Vec<f64>> {
    let pq1 = layout.position("q1")?;
    let pq2 = layout.position("q2")?;
    let c1 = layout.position("c1").ok();
    let c2 = layout.position("c2").ok();
    let chi12 = ang(sp.chi_q1q2);
    let x1 = ang(sp.module1.chi_cq.chi);
    let x2 = ang(sp.module2.chi_cq.chi);
    Ok((0..layout.total_dim())
        .map(|i| {
            let n1 = layout.digit(i, pq1) as f64;
            let n2 = layout.digit(i, pq2) as f64;
            let mut e = -chi12 * n1 * n2;
            if let Some(p) = c1 {
                e -= x1 * layout.digit(i, p) as f64 * n1;
            }
            if let Some(p) = c2 {
                e -= x2 * layout.digit(i, p) as f64 * n2;
            }
            e
        })
        .collect())
}

/// Per-index RIP phases `∫E dt` over `[t0, t1]` (ns, relative to the start
/// of a half) for a pulse centred in the half.
pub fn rip_half_phases(
    cfg: &RipConfig,
    sp: &SystemParams,
    layout: &HilbertSpaceLayout,
    t0_ns: f64,
    t1_ns: f64,
) -> Result<Vec<f64>> {
    let pq1 = layout.position("q1")?;
    let pq2 = layout.position("q2")?;
    let offset = 0.5 * (BELL_HALF_NS - cfg.length_ns);
    let ph = rip_phases_window(cfg, &bus_shifts(sp), t0_ns - offset, t1_ns - offset);
    Ok((0..layout.total_dim())
        .map(|i| ph.phases[layout.digit(i, pq1).min(1)][layout.digit(i, pq2).min(1)])
        .collect())
}

/// X on both transmons.
pub fn echo_pulse(layout: &HilbertSpaceLayout) -> Result<Operator> {
    let x = Operator::new(
        HilbertSpaceLayout::single(2)?,
        crate::codes::pauli_x(),
    )?;
    Ok(&embed(&x, layout, "q1")? * &embed(&x, layout, "q2")?)
}

/// RIP(T) · (π ⊗ π) · RIP(T) over 2 × 336 ns with linear dispersive drift of
/// any data cavities in the layout. Noiseless.
pub fn refocused_rip_gate(cfg: &RipConfig, sp: &SystemParams, state: &QuantumState) -> Result<QuantumState> {
    cfg.validate()?;
    check_resonance(cfg, &bus_shifts(sp))?;
    let layout = state.layout().clone();
    let drift = bell_drift(&layout, sp)?;
    let rip = rip_half_phases(cfg, sp, &layout, 0.0, BELL_HALF_NS)?;
    let half_t = BELL_HALF_NS * 1e-3;
    let diag: Vec<C64> = drift
        .iter()
        .zip(&rip)
        .map(|(e, p)| C64::from_polar(1.0, -(e * half_t + p)))
        .collect();
    let half = Operator::from_diagonal(&layout, &diag)?;
    let echo = echo_pulse(&layout)?;
    let u = &(&half * &echo) * &half;
    Ok(state.evolve(&u))
}

/// Deterministic cavity frame shifts `χ_cq · T_Bell / 2` (rad) for modules 1, 2.
pub fn bell_frame_shifts(sp: &SystemParams) -> [f64; 2] {
    let t = BELL_HALF_NS * 1e-3;
    [ang(sp.module1.chi_cq.chi) * t, ang(sp.module2.chi_cq.chi) * t]
}

/// Per-branch phases from a driven bus mode instead of the adiabatic model.
///
/// Each transmon branch evolves the bus under
/// `H = −Δ_ij n_b + ε(t)/2 (b + b†)` from vacuum; returns the phases
/// `−arg<0|ψ(T)>` and the largest residual bus population.
pub fn full_bus_rip_phases(
    cfg: &RipConfig,
    sp: &SystemParams,
    bus_dim: usize,
    step_ns: f64,
) -> Result<(RipPhases, f64)> {
    cfg.validate()?;
    let shifts = bus_shifts(sp);
    check_resonance(cfg, &shifts)?;
    let a = annihilation(bus_dim)?.into_matrix();
    let x = &a + a.adjoint();
    let n = a.adjoint() * &a;
    let steps = (cfg.length_ns / step_ns).ceil() as usize;
    let dt_ns = cfg.length_ns / steps as f64;
    let mut phases = [[0.0; 2]; 2];
    let mut residual: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let d = ang(cfg.detuning_mhz + shifts[i][j]);
            let mut psi = CVector::zeros(bus_dim);
            psi[0] = C64::new(1.0, 0.0);
            for s in 0..steps {
                let t = (s as f64 + 0.5) * dt_ns;
                let eps = envelope_unchecked(cfg, t);
                let h = &n * C64::new(-d, 0.0) + &x * C64::new(0.5 * eps, 0.0);
                psi = unitary_step(&h, dt_ns * 1e-3) * psi;
            }
            phases[i][j] = -psi[0].arg();
            residual = residual.max(1.0 - psi[0].norm_sqr());
        }
    }
    let entangling = phases[1][1] - phases[1][0] - phases[0][1] + phases[0][0];
    Ok((RipPhases { phases, entangling }, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{number, sqrt_psd, ONE};
    use crate::hamiltonians::{collapse_operators, mode_collapse, ModeParams};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn ket(dim: usize, n: usize) -> CVector {
        let mut v = CVector::zeros(dim);
        v[n] = ONE;
        v
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let layout = HilbertSpaceLayout::single(4).unwrap();
        let st = QuantumState::basis(&layout, &[2]).unwrap();
        let out = propagate_unitary(&Operator::zeros(&layout), &st, 3.0).unwrap();
        assert_eq!(out.vector().unwrap(), st.vector().unwrap());
    }

    #[test]
    fn dispersive_rotation_of_coherent_state() {
        let dim = 20;
        let layout = HilbertSpaceLayout::new(&[("c", dim), ("q", 2)]).unwrap();
        let chi = ang(0.5);
        let h = crate::hamiltonians::dispersive(
            &crate::hamiltonians::CouplingParams::new(0.5, 0.0),
            "c",
            "q",
            &layout,
        )
        .unwrap();
        let beta = C64::new(1.0, 0.5);
        let coh = |b: C64| crate::fock::displacement(b, dim).unwrap().apply(&ket(dim, 0));
        let psi = coh(beta).kronecker(&ket(2, 1));
        let st = QuantumState::pure(layout.clone(), psi).unwrap();
        let t = 0.3;
        let out = propagate_unitary(&h, &st, t).unwrap();
        let target = coh(beta * C64::from_polar(1.0, chi * t)).kronecker(&ket(2, 1));
        assert_abs_diff_eq!(target.dotc(out.vector().unwrap()).norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn semigroup_property() {
        let layout = HilbertSpaceLayout::single(5).unwrap();
        let a = annihilation(5).unwrap();
        let h = &(&a + &a.dagger()).scale_real(3.0) + &number(5).unwrap();
        let st = QuantumState::basis(&layout, &[1]).unwrap();
        let one = propagate_unitary(&h, &st, 0.4).unwrap();
        let two = propagate_unitary(&h, &propagate_unitary(&h, &st, 0.2).unwrap(), 0.2).unwrap();
        assert!((one.vector().unwrap() - two.vector().unwrap()).norm() < 1e-10);
    }

    #[test]
    fn non_hermitian_rejected() {
        let layout = HilbertSpaceLayout::single(3).unwrap();
        let a = annihilation(3).unwrap();
        let st = QuantumState::basis(&layout, &[1]).unwrap();
        assert!(matches!(
            propagate_unitary(&a, &st, 1.0),
            Err(Error::NonHermitian(_))
        ));
    }

    #[test]
    fn long_unitary_norm() {
        let layout = HilbertSpaceLayout::single(6).unwrap();
        let a = annihilation(6).unwrap();
        let drive = PiecewiseDrive {
            label: "a".into(),
            sample_period_ns: 1.0,
            samples: (0..10_000).map(|k| C64::from_polar(2.0, k as f64 * 0.01)).collect(),
        };
        let h0 = number(6).unwrap().scale_real(0.3);
        let st = QuantumState::basis(&layout, &[0]).unwrap();
        let out = propagate_drives(&h0, &[drive], &st).unwrap();
        assert_abs_diff_eq!(out.vector().unwrap().norm(), 1.0, epsilon = 1e-9);
        let _ = a;
    }

    #[test]
    fn lindblad_without_collapse_matches_unitary() {
        let layout = HilbertSpaceLayout::single(4).unwrap();
        let a = annihilation(4).unwrap();
        let h = &(&a + &a.dagger()).scale_real(2.0) + &number(4).unwrap();
        let st = QuantumState::basis(&layout, &[0]).unwrap();
        let l = propagate_lindblad(&h, &[], &st.to_mixed(), 1.0, 0.002).unwrap();
        let u = propagate_unitary(&h, &st, 1.0).unwrap();
        assert!(max_abs(&(l.density() - u.density())) < 1e-8);
    }

    #[test]
    fn damping_law() {
        let layout = HilbertSpaceLayout::single(3).unwrap();
        let m = ModeParams::new(1.0, 0.0).with_coherence(Some(2.0), None, None);
        let cs = mode_collapse(&m, "a", &layout).unwrap();
        let st = QuantumState::basis(&layout, &[1]).unwrap().to_mixed();
        let out = propagate_lindblad(&Operator::zeros(&layout), &cs, &st, 1.5, 0.001).unwrap();
        let p1 = out.density()[(1, 1)].re;
        assert_abs_diff_eq!(p1, (-0.75f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn step_guard() {
        let layout = HilbertSpaceLayout::single(3).unwrap();
        let h = number(3).unwrap().scale_real(100.0);
        let st = QuantumState::basis(&layout, &[1]).unwrap();
        assert!(matches!(
            propagate_lindblad(&h, &[], &st, 1.0, 0.01),
            Err(Error::StepSize(_))
        ));
    }

    /// Least-squares slope of ln(envelope) vs t.
    fn fit_decay(ts: &[f64], env: &[f64]) -> f64 {
        let n = ts.len() as f64;
        let ys: Vec<f64> = env.iter().map(|e| e.ln()).collect();
        let mt = ts.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = ts.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum();
        let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
        -1.0 / (sxy / sxx)
    }

    #[test]
    fn ramsey_decay_matches_t2() {
        let sp = SystemParams::paper_defaults();
        let layout = HilbertSpaceLayout::new(&[("q1", 2)]).unwrap();
        let cs = collapse_operators(&sp, &layout).unwrap();
        let h = number(2).unwrap().scale_real(ang(0.5)).with_layout(&layout).unwrap();
        let s = C64::new(0.5, 0.0);
        let rho0 = CMatrix::from_element(2, 2, s);
        let mut st = QuantumState::mixed(layout, rho0).unwrap();
        let (mut ts, mut xs, mut env) = (vec![], vec![], vec![]);
        let dt = 0.5;
        for k in 1..=60 {
            st = propagate_lindblad(&h, &cs, &st, dt, 0.01).unwrap();
            let r = st.density();
            ts.push(k as f64 * dt);
            xs.push(2.0 * r[(0, 1)].re);
            env.push(2.0 * r[(0, 1)].norm());
        }
        // fringes oscillate at the detuning
        assert!(xs.iter().any(|x| *x < 0.0));
        let t2 = fit_decay(&ts, &env);
        let expected = sp.module1.transmon.t2_ramsey.unwrap();
        assert!((t2 / expected - 1.0).abs() < 0.02, "fitted T2 {t2}");
    }

    #[test]
    fn lindblad_trace_and_positivity() {
        let sp = SystemParams::paper_defaults();
        let layout = HilbertSpaceLayout::new(&[("c1", 4), ("q1", 2)]).unwrap();
        let cs = collapse_operators(&sp, &layout).unwrap();
        let h = crate::hamiltonians::module_hamiltonian(&sp, 1, &layout).unwrap();
        let mut v = CVector::from_element(8, ONE);
        v /= C64::new(v.norm(), 0.0);
        let st = QuantumState::pure(layout, v).unwrap().to_mixed();
        let out = propagate_lindblad(&h, &cs, &st, 2.0, 0.002).unwrap();
        assert!((out.trace() - 1.0).abs() < 2e-8);
        let r = out.density();
        assert!(max_abs(&(&r - r.adjoint())) < 1e-12);
        let (vals, _) = hermitian_eigen(&r);
        assert!(vals[0] > -1e-8);
    }

    #[test]
    fn split_step_matches_rk4() {
        let sp = SystemParams::paper_defaults().scale_coherence(0.05);
        let layout = HilbertSpaceLayout::new(&[("c1", 4), ("q1", 2), ("q2", 2)]).unwrap();
        let cs = collapse_operators(&sp, &layout).unwrap();
        let h = &crate::hamiltonians::module_hamiltonian(&sp, 1, &layout).unwrap()
            + &crate::hamiltonians::dispersive(
                &crate::hamiltonians::CouplingParams::new(0.2, 0.0),
                "q1",
                "q2",
                &layout,
            )
            .unwrap();
        let n = layout.total_dim();
        let v = CVector::from_fn(n, |i, _| C64::new(1.0 + i as f64 * 0.1, 0.3 * i as f64));
        let st = QuantumState::pure_normalized(layout.clone(), v).unwrap().to_mixed();
        let rk = propagate_lindblad(&h, &cs, &st, 1.0, 0.001).unwrap().density();
        let split = DiagonalLindblad::new(&h, &cs).unwrap().evolve(&st.density(), 1.0, 400, None);
        assert!(max_abs(&(rk - split)) < 1e-5);
    }

    #[test]
    fn envelope_examples() {
        let cfg = RipConfig::default().with_amplitude(3.0);
        assert_abs_diff_eq!(rip_envelope(&cfg, 0.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rip_envelope(&cfg, 300.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rip_envelope(&cfg, 150.0).unwrap(), 6.0, epsilon = 1e-12);
        for k in 0..30 {
            let t = k as f64 * 5.0;
            let d = rip_envelope(&cfg, t).unwrap() - rip_envelope(&cfg, 300.0 - t).unwrap();
            assert!(d.abs() < 1e-12);
        }
        assert!(matches!(
            rip_envelope(&cfg, 301.0),
            Err(Error::OutOfWindow { .. })
        ));
    }

    #[test]
    fn rip_phases_zero_amplitude() {
        let sp = SystemParams::paper_defaults();
        let ph = rip_effective_phases(&RipConfig::default(), &bus_shifts(&sp)).unwrap();
        assert_eq!(ph.entangling, 0.0);
        assert!(ph.phases.iter().flatten().all(|p| *p == 0.0));
    }

    #[test]
    fn rip_resonance_error() {
        let cfg = RipConfig {
            detuning_mhz: 0.3,
            ..RipConfig::default()
        };
        let shifts = [[0.0, -0.3], [0.1, 0.2]];
        assert!(matches!(
            rip_effective_phases(&cfg.with_amplitude(10.0), &shifts),
            Err(Error::Resonance { .. })
        ));
    }

    #[test]
    fn rip_equal_chi_closed_form() {
        let chi = 0.4;
        let shifts = [[0.0, chi], [chi, 2.0 * chi]];
        let cfg = RipConfig::default().with_amplitude(500.0);
        let four = rip_effective_phases(&cfg, &shifts).unwrap().entangling;
        // closed form evaluated at the single-excitation detuning
        let approx = rip_entangling_approx(&cfg, chi, cfg.detuning_mhz + chi);
        assert!((approx / four - 1.0).abs() < 0.05, "{approx} vs {four}");
    }

    #[test]
    fn rip_quadratic_in_amplitude() {
        let sp = SystemParams::paper_defaults();
        let base = RipConfig::default();
        let amps: Vec<f64> = (1..=10).map(|k| 150.0 * k as f64).collect();
        let phis: Vec<f64> = amps
            .iter()
            .map(|&a| rip_effective_phases(&base.with_amplitude(a), &bus_shifts(&sp)).unwrap().entangling)
            .collect();
        let c = amps.iter().zip(&phis).map(|(a, p)| a * a * p).sum::<f64>()
            / amps.iter().map(|a| a.powi(4)).sum::<f64>();
        for (a, p) in amps.iter().zip(&phis) {
            assert!((p - c * a * a).abs() < 1e-3);
        }
    }

    #[test]
    fn calibrated_amplitude_gives_pi() {
        let sp = SystemParams::paper_defaults();
        let a = calibrate_rip_amplitude(&RipConfig::default(), &sp).unwrap();
        let phi = refocused_entangling_phase(&RipConfig::default().with_amplitude(a), &sp).unwrap();
        assert_abs_diff_eq!(phi, PI, epsilon = 1e-9);
    }

    #[test]
    fn reference_phase_examples() {
        let layout = HilbertSpaceLayout::new(&[("c", 6)]).unwrap();
        let id = reference_phase_op(0.0, "c", &layout).unwrap();
        assert!(max_abs(&(id.matrix() - CMatrix::identity(6, 6))) < 1e-15);
        let p = reference_phase_op(PI, "c", &layout).unwrap();
        let par = crate::fock::parity(6).unwrap();
        assert!(max_abs(&(p.matrix() - par.matrix())) < 1e-12);
        // θ = π/2 on binomial codewords acts as Z_L up to a global phase
        let code = crate::codes::binomial_code();
        let u = reference_phase_op(PI / 2.0, "c", &layout).unwrap();
        let z = code.logical_z(6).unwrap();
        let v = code.isometry(6).unwrap();
        let lhs = v.adjoint() * u.matrix() * &v;
        let rhs = v.adjoint() * &z * &v * C64::new(-1.0, 0.0);
        assert!(max_abs(&(lhs - rhs)) < 1e-12);
    }

    #[test]
    fn reference_phase_commutes() {
        let layout = HilbertSpaceLayout::new(&[("c", 5), ("q", 2)]).unwrap();
        let a = reference_phase_op(0.7, "c", &layout).unwrap();
        let b = reference_phase_op(-1.3, "c", &layout).unwrap();
        let n = embed(&number(5).unwrap(), &layout, "c").unwrap();
        assert_eq!(max_abs(a.commutator(&b).matrix()), 0.0);
        assert_eq!(max_abs(a.commutator(&n).matrix()), 0.0);
    }

    #[test]
    fn zero_amplitude_refocused_is_drift_plus_echo() {
        let sp = SystemParams::paper_defaults();
        let layout = HilbertSpaceLayout::new(&[("c1", 4), ("q1", 2), ("c2", 4), ("q2", 2)]).unwrap();
        let n = layout.total_dim();
        let v = CVector::from_fn(n, |i, _| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()));
        let st = QuantumState::pure_normalized(layout.clone(), v).unwrap();
        let out = refocused_rip_gate(&RipConfig::default(), &sp, &st).unwrap();
        // oracle: explicit linear dispersive Hamiltonian, exact exponentials
        let mut h = crate::hamiltonians::dispersive(
            &crate::hamiltonians::CouplingParams::new(sp.module1.chi_cq.chi, 0.0),
            "c1",
            "q1",
            &layout,
        )
        .unwrap();
        h = &h
            + &crate::hamiltonians::dispersive(
                &crate::hamiltonians::CouplingParams::new(sp.module2.chi_cq.chi, 0.0),
                "c2",
                "q2",
                &layout,
            )
            .unwrap();
        h = &h
            + &crate::hamiltonians::dispersive(
                &crate::hamiltonians::CouplingParams::new(sp.chi_q1q2, 0.0),
                "q1",
                "q2",
                &layout,
            )
            .unwrap();
        let mid = propagate_unitary(&h, &st, 0.336).unwrap();
        let mid = mid.evolve(&echo_pulse(&layout).unwrap());
        let oracle = propagate_unitary(&h, &mid, 0.336).unwrap();
        assert!((out.vector().unwrap() - oracle.vector().unwrap()).norm() < 1e-10);
    }

    #[test]
    fn frame_shifts() {
        let sp = SystemParams::paper_defaults();
        let [a, b] = bell_frame_shifts(&sp);
        assert_abs_diff_eq!(a, 1.21, epsilon = 5e-3);
        assert_abs_diff_eq!(b, 1.78, epsilon = 5e-3);
    }

    #[test]
    fn refocused_gate_disentangles_cavity() {
        // coherent cavity input, transmon in superposition
        let sp = SystemParams::paper_defaults();
        let dim = 14;
        let layout = HilbertSpaceLayout::new(&[("c1", dim), ("q1", 2), ("q2", 2)]).unwrap();
        let coh = crate::fock::displacement(C64::new(1.0, 0.0), dim).unwrap().apply(&ket(dim, 0));
        let plus = CVector::from_element(2, C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0));
        let psi = coh.kronecker(&plus).kronecker(&plus);
        let st = QuantumState::pure_normalized(layout, psi).unwrap();
        let cfg = RipConfig::default();
        let a = calibrate_rip_amplitude(&cfg, &sp).unwrap();
        let out = refocused_rip_gate(&cfg.with_amplitude(a), &sp, &st).unwrap();
        let red = out.partial_trace(&["c1"]).unwrap().density();
        let (vals, _) = hermitian_eigen(&red);
        let entropy: f64 = vals.iter().filter(|&&p| p > 1e-15).map(|p| -p * p.ln()).sum();
        assert!(entropy < 1e-6, "entropy {entropy}");
        let _ = sqrt_psd(&red);
    }

    #[test]
    fn full_bus_agrees_with_effective_model() {
        let sp = SystemParams::paper_defaults();
        let cfg = RipConfig::default().with_amplitude(ang(4.0));
        let eff = rip_effective_phases(&cfg, &bus_shifts(&sp)).unwrap();
        let (full, residual) = full_bus_rip_phases(&cfg, &sp, 6, 0.25).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (e, f) = (eff.phases[i][j], full.phases[i][j]);
                assert!((e - f).abs() < 0.02 * e.abs(), "branch {i}{j}: {e} vs {f}");
            }
        }
        assert!(residual < 1e-3, "residual bus population {residual}");
    }
}
