//! Dispersive circuit-QED Hamiltonians and collapse operators.
//!
//! Parameters are stored as ordinary frequencies in MHz and times in µs.
//! Operators carry angular rates in rad/µs (2π·MHz), so `exp(-i H t)` takes
//! `t` in µs directly.
//!
//! Mode labels follow a fixed convention: `c1`, `q1`, `r1` for module 1,
//! `c2`, `q2`, `r2` for module 2 and `b` for the bus.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{annihilation, embed, number, HilbertSpaceLayout, Operator, C64};

pub const TWO_PI: f64 = 2.0 * PI;

/// MHz to rad/µs.
pub fn ang(mhz: f64) -> f64 {
    TWO_PI * mhz
}

pub fn cavity_label(module: usize) -> String {
    format!("c{module}")
}

pub fn transmon_label(module: usize) -> String {
    format!("q{module}")
}

pub fn readout_label(module: usize) -> String {
    format!("r{module}")
}

pub const BUS: &str = "b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    /// MHz
    pub freq: f64,
    /// MHz
    pub self_kerr: f64,
    /// µs
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_ramsey: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_echo: Option<f64>,
}

impl ModeParams {
    pub fn new(freq: f64, self_kerr: f64) -> Self {
        Self {
            freq,
            self_kerr,
            t1: None,
            t2_ramsey: None,
            t2_echo: None,
        }
    }

    pub fn with_coherence(mut self, t1: Option<f64>, t2r: Option<f64>, t2e: Option<f64>) -> Self {
        self.t1 = t1;
        self.t2_ramsey = t2r;
        self.t2_echo = t2e;
        self
    }

    pub fn validate(&self, label: &str) -> Result<()> {
        if !(self.freq > 0.0) || !self.self_kerr.is_finite() {
            return Err(Error::Config(format!(
                "mode `{label}` needs freq > 0 and finite self-Kerr"
            )));
        }
        for t in [self.t1, self.t2_ramsey, self.t2_echo].into_iter().flatten() {
            if !(t > 0.0) {
                return Err(Error::Config(format!(
                    "mode `{label}` coherence times must be positive"
                )));
            }
        }
        if let (Some(t1), Some(t2)) = (self.t1, self.t2_ramsey) {
            if t2 > 2.0 * t1 + 1e-9 {
                return Err(Error::InconsistentCoherence {
                    mode: label.to_string(),
                    t2,
                    two_t1: 2.0 * t1,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    /// MHz
    pub chi: f64,
    /// MHz
    #[serde(default)]
    pub chi_prime: f64,
}

impl CouplingParams {
    pub const ZERO: Self = Self {
        chi: 0.0,
        chi_prime: 0.0,
    };

    pub fn new(chi: f64, chi_prime: f64) -> Self {
        Self { chi, chi_prime }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    pub cavity: ModeParams,
    pub transmon: ModeParams,
    pub readout: ModeParams,
    pub chi_cq: CouplingParams,
    pub chi_qr: CouplingParams,
    /// Cavity-readout cross-Kerr, MHz (only the linear part is kept).
    #[serde(default)]
    pub chi_cr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub module1: ModuleParams,
    pub module2: ModuleParams,
    pub bus: ModeParams,
    pub chi_bq1: CouplingParams,
    pub chi_bq2: CouplingParams,
    /// MHz
    pub chi_q1q2: f64,
    /// Optional data-bus cross-Kerr per module, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_cb: Option<[f64; 2]>,
    /// Optional data-data cross-Kerr, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_c1c2: Option<f64>,
}

/// Which point of each measured coherence range to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoherencePoint {
    Low,
    Mid,
    High,
}

fn pick(range: (f64, f64), point: CoherencePoint) -> f64 {
    match point {
        CoherencePoint::Low => range.0,
        CoherencePoint::Mid => 0.5 * (range.0 + range.1),
        CoherencePoint::High => range.1,
    }
}

impl SystemParams {
    /// Measured parameters with coherence ranges at their midpoints.
    pub fn paper_defaults() -> Self {
        Self::paper_at(CoherencePoint::Mid)
    }

    pub fn paper_at(point: CoherencePoint) -> Self {
        let p = |r| Some(pick(r, point));
        let module1 = ModuleParams {
            cavity: ModeParams::new(5123.6, 1.1e-3).with_coherence(Some(1150.0), Some(390.0), None),
            transmon: ModeParams::new(4387.7, 131.2).with_coherence(
                p((65.0, 69.0)),
                p((11.0, 14.0)),
                p((18.0, 20.0)),
            ),
            readout: ModeParams::new(7720.0, 0.0).with_coherence(Some(0.1), None, None),
            chi_cq: CouplingParams::new(0.573, 0.00061),
            chi_qr: CouplingParams::new(2.7, 0.0),
            chi_cr: 1e-3,
        };
        let module2 = ModuleParams {
            cavity: ModeParams::new(5275.0, 1.8e-3).with_coherence(Some(1100.0), Some(390.0), None),
            transmon: ModeParams::new(4559.2, 123.2).with_coherence(
                p((67.0, 77.0)),
                p((18.0, 22.0)),
                p((22.0, 24.0)),
            ),
            readout: ModeParams::new(7735.4, 0.0).with_coherence(Some(0.1), None, None),
            chi_cq: CouplingParams::new(0.843, 0.0014),
            chi_qr: CouplingParams::new(2.8, 0.0),
            chi_cr: 1e-3,
        };
        Self {
            module1,
            module2,
            bus: ModeParams::new(5692.8, 0.3e-3).with_coherence(Some(230.0), None, None),
            chi_bq1: CouplingParams::new(0.319, 0.001),
            chi_bq2: CouplingParams::new(0.455, 0.001),
            chi_q1q2: 0.019,
            chi_cb: None,
            chi_c1c2: None,
        }
    }

    pub fn module(&self, index: usize) -> Result<&ModuleParams> {
        match index {
            1 => Ok(&self.module1),
            2 => Ok(&self.module2),
            _ => Err(Error::Config(format!("module index {index} not in {{1, 2}}"))),
        }
    }

    pub fn module_mut(&mut self, index: usize) -> Result<&mut ModuleParams> {
        match index {
            1 => Ok(&mut self.module1),
            2 => Ok(&mut self.module2),
            _ => Err(Error::Config(format!("module index {index} not in {{1, 2}}"))),
        }
    }

    pub fn bus_coupling(&self, module: usize) -> Result<CouplingParams> {
        match module {
            1 => Ok(self.chi_bq1),
            2 => Ok(self.chi_bq2),
            _ => Err(Error::Config(format!("module index {module} not in {{1, 2}}"))),
        }
    }

    /// Parameters for the mode carrying `label`, if any.
    pub fn mode(&self, label: &str) -> Option<&ModeParams> {
        match label {
            "c1" => Some(&self.module1.cavity),
            "q1" => Some(&self.module1.transmon),
            "r1" => Some(&self.module1.readout),
            "c2" => Some(&self.module2.cavity),
            "q2" => Some(&self.module2.transmon),
            "r2" => Some(&self.module2.readout),
            BUS => Some(&self.bus),
            _ => None,
        }
    }

    pub fn mode_mut(&mut self, label: &str) -> Option<&mut ModeParams> {
        match label {
            "c1" => Some(&mut self.module1.cavity),
            "q1" => Some(&mut self.module1.transmon),
            "r1" => Some(&mut self.module1.readout),
            "c2" => Some(&mut self.module2.cavity),
            "q2" => Some(&mut self.module2.transmon),
            "r2" => Some(&mut self.module2.readout),
            BUS => Some(&mut self.bus),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for label in ["c1", "q1", "r1", "c2", "q2", "r2", BUS] {
            self.mode(label).expect("known label").validate(label)?;
        }
        let finite = |c: &CouplingParams| c.chi.is_finite() && c.chi_prime.is_finite();
        let couplings = [
            self.module1.chi_cq,
            self.module1.chi_qr,
            self.module2.chi_cq,
            self.module2.chi_qr,
            self.chi_bq1,
            self.chi_bq2,
        ];
        if !couplings.iter().all(finite) || !self.chi_q1q2.is_finite() {
            return Err(Error::Config("coupling constants must be finite".into()));
        }
        Ok(())
    }

    /// Copy with every coherence time removed (noiseless model).
    pub fn without_decoherence(&self) -> Self {
        let mut out = self.clone();
        for label in ["c1", "q1", "r1", "c2", "q2", "r2", BUS] {
            let m = out.mode_mut(label).expect("known label");
            m.t1 = None;
            m.t2_ramsey = None;
            m.t2_echo = None;
        }
        out
    }

    /// Copy with every coherence time multiplied by `factor`.
    pub fn scale_coherence(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for label in ["c1", "q1", "r1", "c2", "q2", "r2", BUS] {
            let m = out.mode_mut(label).expect("known label");
            m.t1 = m.t1.map(|t| t * factor);
            m.t2_ramsey = m.t2_ramsey.map(|t| t * factor);
            m.t2_echo = m.t2_echo.map(|t| t * factor);
        }
        out
    }
}

/// Hamiltonian frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Bare mode frequencies removed.
    Rotating,
    Lab,
}

/// `omega n - (K/2) a†a†aa` on a single mode, in rad/µs.
pub fn kerr_oscillator(mode: &ModeParams, dim: usize) -> Result<Operator> {
    kerr_term(mode, dim, Frame::Lab)
}

fn kerr_term(mode: &ModeParams, dim: usize, frame: Frame) -> Result<Operator> {
    let a = annihilation(dim)?;
    let layout = a.layout().clone();
    let omega = match frame {
        Frame::Lab => ang(mode.freq),
        Frame::Rotating => 0.0,
    };
    let k = ang(mode.self_kerr);
    let diag: Vec<C64> = (0..dim)
        .map(|n| {
            let n = n as f64;
            C64::new(omega * n - 0.5 * k * n * (n - 1.0), 0.0)
        })
        .collect();
    Operator::from_diagonal(&layout, &diag)
}

/// `-chi n_a n_b + chi' a†a†aa n_b` embedded in `layout`.
pub fn dispersive(
    coupling: &CouplingParams,
    a_label: &str,
    b_label: &str,
    layout: &HilbertSpaceLayout,
) -> Result<Operator> {
    if a_label == b_label {
        return Err(Error::Config(format!(
            "dispersive coupling needs two distinct modes, got `{a_label}` twice"
        )));
    }
    let pa = layout.position(a_label)?;
    let pb = layout.position(b_label)?;
    let chi = ang(coupling.chi);
    let chip = ang(coupling.chi_prime);
    let diag: Vec<C64> = (0..layout.total_dim())
        .map(|i| {
            let na = layout.digit(i, pa) as f64;
            let nb = layout.digit(i, pb) as f64;
            C64::new(-chi * na * nb + chip * na * (na - 1.0) * nb, 0.0)
        })
        .collect();
    Operator::from_diagonal(layout, &diag)
}

fn embedded_kerr(
    mode: &ModeParams,
    label: &str,
    layout: &HilbertSpaceLayout,
    frame: Frame,
) -> Result<Operator> {
    let dim = layout.dim_of(label)?;
    if dim < 2 {
        return Ok(Operator::zeros(layout));
    }
    embed(&kerr_term(mode, dim, frame)?, layout, label)
}

fn require(layout: &HilbertSpaceLayout, label: &str) -> Result<()> {
    if layout.contains(label) {
        Ok(())
    } else {
        Err(Error::MissingMode(label.to_string()))
    }
}

/// Module Hamiltonian in the rotating frame: Kerr oscillators for the cavity,
/// transmon and (if present) readout, the cavity-transmon and
/// readout-transmon dispersive terms and the linear cavity-readout cross-Kerr.
/// The readout self-Kerr and the nonlinear cavity-readout term are dropped.
pub fn module_hamiltonian(
    sp: &SystemParams,
    module: usize,
    layout: &HilbertSpaceLayout,
) -> Result<Operator> {
    module_hamiltonian_in(sp, module, layout, Frame::Rotating)
}

pub fn module_hamiltonian_in(
    sp: &SystemParams,
    module: usize,
    layout: &HilbertSpaceLayout,
    frame: Frame,
) -> Result<Operator> {
    let mp = sp.module(module)?;
    let c = cavity_label(module);
    let q = transmon_label(module);
    let r = readout_label(module);
    require(layout, &c)?;
    require(layout, &q)?;
    let mut h = &embedded_kerr(&mp.cavity, &c, layout, frame)?
        + &embedded_kerr(&mp.transmon, &q, layout, frame)?;
    h = &h + &dispersive(&mp.chi_cq, &c, &q, layout)?;
    if layout.contains(&r) {
        let mut readout = mp.readout.clone();
        readout.self_kerr = 0.0;
        h = &h + &embedded_kerr(&readout, &r, layout, frame)?;
        h = &h + &dispersive(&mp.chi_qr, &r, &q, layout)?;
        h = &h + &dispersive(&CouplingParams::new(mp.chi_cr, 0.0), &c, &r, layout)?;
    }
    Ok(h)
}

/// Transmon-bus coupling Hamiltonian (rotating frame) including the direct
/// transmon-transmon term and, when configured and the modes are present, the
/// residual data-bus and data-data cross-Kerrs.
pub fn coupling_hamiltonian(sp: &SystemParams, layout: &HilbertSpaceLayout) -> Result<Operator> {
    coupling_hamiltonian_in(sp, layout, Frame::Rotating)
}

pub fn coupling_hamiltonian_in(
    sp: &SystemParams,
    layout: &HilbertSpaceLayout,
    frame: Frame,
) -> Result<Operator> {
    for l in ["q1", "q2", BUS] {
        require(layout, l)?;
    }
    let mut h = &(&embedded_kerr(&sp.module1.transmon, "q1", layout, frame)?
        + &embedded_kerr(&sp.module2.transmon, "q2", layout, frame)?)
        + &embedded_kerr(&sp.bus, BUS, layout, frame)?;
    h = &h + &dispersive(&sp.chi_bq1, BUS, "q1", layout)?;
    h = &h + &dispersive(&sp.chi_bq2, BUS, "q2", layout)?;
    h = &h + &dispersive(&CouplingParams::new(sp.chi_q1q2, 0.0), "q1", "q2", layout)?;
    h = &h + &residual_terms(sp, layout)?;
    Ok(h)
}

/// Optional data-bus and data-data cross-Kerrs for whichever modes exist.
pub fn residual_terms(sp: &SystemParams, layout: &HilbertSpaceLayout) -> Result<Operator> {
    let mut h = Operator::zeros(layout);
    if let Some(cb) = sp.chi_cb {
        for (k, chi) in cb.iter().enumerate() {
            let c = cavity_label(k + 1);
            if layout.contains(&c) && layout.contains(BUS) {
                h = &h + &dispersive(&CouplingParams::new(*chi, 0.0), &c, BUS, layout)?;
            }
        }
    }
    if let Some(chi) = sp.chi_c1c2 {
        if layout.contains("c1") && layout.contains("c2") {
            h = &h + &dispersive(&CouplingParams::new(chi, 0.0), "c1", "c2", layout)?;
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollapseKind {
    Damping,
    Dephasing,
}

/// Lindblad channel `rate * D[op]`.
#[derive(Clone, Debug)]
pub struct CollapseOp {
    pub mode: String,
    pub kind: CollapseKind,
    pub op: Operator,
    /// 1/µs
    pub rate: f64,
}

/// `1/T_phi = 1/T2 - 1/(2 T1)`; zero when T2 is absent.
pub fn dephasing_rate(mode: &ModeParams, label: &str) -> Result<f64> {
    mode.validate(label)?;
    match (mode.t1, mode.t2_ramsey) {
        (_, None) => Ok(0.0),
        (Some(t1), Some(t2)) => Ok((1.0 / t2 - 0.5 / t1).max(0.0)),
        (None, Some(t2)) => Ok(1.0 / t2),
    }
}

/// Amplitude damping `(a, 1/T1)` and pure dephasing `(sqrt(2) n, 1/T_phi)` for
/// every mode of `layout` that has coherence data.
///
/// The dephasing operator is scaled by sqrt(2) so that a superposition of
/// neighbouring levels loses coherence at exactly `1/T_phi`; together with
/// damping the Ramsey envelope then decays with the configured T2.
pub fn collapse_operators(sp: &SystemParams, layout: &HilbertSpaceLayout) -> Result<Vec<CollapseOp>> {
    let mut out = Vec::new();
    for m in layout.modes() {
        let label = m.label.as_str();
        let Some(params) = sp.mode(label) else {
            continue;
        };
        out.extend(mode_collapse(params, label, layout)?);
    }
    Ok(out)
}

/// Collapse operators for one mode.
pub fn mode_collapse(
    params: &ModeParams,
    label: &str,
    layout: &HilbertSpaceLayout,
) -> Result<Vec<CollapseOp>> {
    let mut out = Vec::new();
    let dim = layout.dim_of(label)?;
    if dim < 2 {
        return Ok(out);
    }
    if let Some(t1) = params.t1 {
        out.push(CollapseOp {
            mode: label.to_string(),
            kind: CollapseKind::Damping,
            op: embed(&annihilation(dim)?, layout, label)?,
            rate: 1.0 / t1,
        });
    }
    let gphi = dephasing_rate(params, label)?;
    if gphi > 0.0 {
        out.push(CollapseOp {
            mode: label.to_string(),
            kind: CollapseKind::Dephasing,
            op: embed(&number(dim)?.scale_real(2f64.sqrt()), layout, label)?,
            rate: gphi,
        });
    }
    Ok(out)
}
