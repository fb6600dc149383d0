//! Run configuration: one JSON document per run.
//!
//! `system` is either a full [`SystemParams`] object or one of the named
//! presets `paper-defaults`, `paper-low`, `paper-high` (measured coherence
//! ranges at their midpoint, lower or upper end).

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codes::CodeKind;
use crate::error::{Error, Result};
use crate::fock::{CVector, C64};
use crate::hamiltonians::{CoherencePoint, SystemParams};
use crate::protocol::{BellMode, LocalOpMode, ProtocolOptions};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Named(String),
    Explicit(Box<SystemParams>),
}

impl SystemSpec {
    pub fn resolve(&self) -> Result<SystemParams> {
        let sp = match self {
            SystemSpec::Named(name) => match name.as_str() {
                "paper-defaults" => SystemParams::paper_defaults(),
                "paper-low" => SystemParams::paper_at(CoherencePoint::Low),
                "paper-high" => SystemParams::paper_at(CoherencePoint::High),
                other => return Err(Error::Config(format!("unknown system preset `{other}`"))),
            },
            SystemSpec::Explicit(sp) => (**sp).clone(),
        };
        sp.validate()?;
        Ok(sp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Ideal Bell pair, local operations and readout.
    Ideal,
    /// RIP Bell pair, twirl channels, calibrated readout, decoherence.
    Noisy,
    /// Ideal, with the classical corrections switched off.
    NoFeedforward,
    /// Ideal, run on the four logical basis states with Wigner output.
    TruthTable,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ideal => "ideal",
            Preset::Noisy => "noisy",
            Preset::NoFeedforward => "no-feedforward",
            Preset::TruthTable => "truth-table",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown preset `{s}`")))
    }
}

/// Per-field overrides applied on top of the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolOverrides {
    pub cavity_dim: Option<usize>,
    pub bell: Option<BellMode>,
    pub local_ops: Option<LocalOpMode>,
    pub noise: Option<bool>,
    pub feedforward: Option<bool>,
    pub explicit_z: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomographySettings {
    pub shots_per_setting: usize,
    pub bootstrap: usize,
    /// Also run process tomography of the full pipeline.
    pub process: bool,
}

impl Default for TomographySettings {
    fn default() -> Self {
        Self {
            shots_per_setting: 2000,
            bootstrap: crate::tomography::BOOTSTRAP_RESAMPLES,
            process: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrapeTarget {
    XGate,
    Encode,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrapeSettings {
    pub target: GrapeTarget,
    /// Defaults to 40 ns for the X gate and 1000 ns otherwise.
    pub duration_ns: Option<f64>,
    pub cavity_dim: usize,
    pub iterations: usize,
    pub target_fidelity: f64,
}

impl Default for GrapeSettings {
    fn default() -> Self {
        Self {
            target: GrapeTarget::XGate,
            duration_ns: None,
            cavity_dim: 12,
            iterations: 500,
            target_fidelity: 0.9999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    RipAmplitude,
    MeasurementAngle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub kind: SweepKind,
    pub points: usize,
    /// Largest RIP amplitude, rad/µs.
    pub max_amplitude: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            kind: SweepKind::RipAmplitude,
            points: 10,
            max_amplitude: 1500.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemSpec,
    pub encoding: CodeKind,
    pub preset: Preset,
    #[serde(default)]
    pub protocol: ProtocolOverrides,
    /// Logical two-qubit input as `[re, im]` pairs over `00, 01, 10, 11`.
    #[serde(default)]
    pub input: Option<Vec<[f64; 2]>>,
    pub shots: Option<u64>,
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub tomography: TomographySettings,
    #[serde(default)]
    pub grape: GrapeSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Paper defaults with no seed or shot count; callers must supply both.
    pub fn new(encoding: CodeKind, preset: Preset) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            system: SystemSpec::Named("paper-defaults".into()),
            encoding,
            preset,
            protocol: ProtocolOverrides::default(),
            input: None,
            shots: None,
            seed: None,
            output_dir: default_output_dir(),
            tomography: TomographySettings::default(),
            grape: GrapeSettings::default(),
            sweep: SweepSettings::default(),
        }
    }

    /// Parses without checking for seed and shots, which the command line
    /// may still provide.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported config schema {}", cfg.schema_version)));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required".into()))
    }

    pub fn shots(&self) -> Result<u64> {
        match self.shots {
            Some(n) if n >= 1 => Ok(n),
            Some(_) => Err(Error::Config("shot count must be >= 1".into())),
            None => Err(Error::Config("a shot count is required".into())),
        }
    }

    /// Checks everything except the presence of seed and shots, which only
    /// the sampling commands need.
    pub fn validate(&self) -> Result<()> {
        if self.shots == Some(0) {
            return Err(Error::Config("shot count must be >= 1".into()));
        }
        self.system.resolve()?;
        self.protocol_options()?.validate()?;
        self.input_state()?;
        let t = &self.tomography;
        if t.shots_per_setting == 0 {
            return Err(Error::Config("tomography needs at least one shot per setting".into()));
        }
        let g = &self.grape;
        if g.iterations == 0 || !(0.0..=1.0).contains(&g.target_fidelity) {
            return Err(Error::Config("grape needs iterations >= 1 and a target fidelity in [0, 1]".into()));
        }
        if let Some(d) = g.duration_ns {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("grape duration {d} ns")));
            }
        }
        let s = &self.sweep;
        if s.points < 3 || !(s.max_amplitude > 0.0 && s.max_amplitude.is_finite()) {
            return Err(Error::Config("sweep needs >= 3 points and a positive amplitude".into()));
        }
        Ok(())
    }

    pub fn protocol_options(&self) -> Result<ProtocolOptions> {
        let mut o = match self.preset {
            Preset::Noisy => ProtocolOptions::noisy(self.encoding),
            _ => ProtocolOptions::ideal(self.encoding),
        };
        if self.preset == Preset::NoFeedforward {
            o.feedforward = false;
        }
        let p = &self.protocol;
        if let Some(d) = p.cavity_dim {
            o.cavity_dim = d;
        }
        if let Some(b) = p.bell {
            o.bell = b;
        }
        if let Some(l) = p.local_ops {
            if l == LocalOpMode::Pulse {
                return Err(Error::Config("pulse-mode local operations are not available from a config".into()));
            }
            o.local_ops = l;
        }
        if let Some(n) = p.noise {
            o.noise = n;
        }
        if let Some(f) = p.feedforward {
            o.feedforward = f;
        }
        if let Some(z) = p.explicit_z {
            o.explicit_z = z;
        }
        Ok(o)
    }

    /// Normalized logical input and its label. Defaults to
    /// `(|00> + |10>)/√2`, which the gate maps to a Bell state.
    pub fn input_state(&self) -> Result<(String, CVector)> {
        match &self.input {
            None => {
                let h = C64::new(FRAC_1_SQRT_2, 0.0);
                let z = C64::new(0.0, 0.0);
                Ok(("+0".into(), CVector::from_vec(vec![h, z, h, z])))
            }
            Some(v) => {
                if v.len() != 4 {
                    return Err(Error::Config(format!("input needs 4 amplitudes, got {}", v.len())));
                }
                let psi = CVector::from_iterator(4, v.iter().map(|a| C64::new(a[0], a[1])));
                let n = psi.norm();
                if !(n > 1e-12 && n.is_finite()) {
                    return Err(Error::Config("input amplitudes must be finite and nonzero".into()));
                }
                Ok(("custom".into(), psi / C64::new(n, 0.0)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "system": "paper-defaults",
        "encoding": "binomial",
        "preset": "ideal",
        "shots": 1000,
        "seed": 7
    }"#;

    #[test]
    fn minimal_config() {
        let c = RunConfig::from_json(MINIMAL.as_bytes()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.system.resolve().unwrap(), SystemParams::paper_defaults());
        assert_eq!(c.output_dir, PathBuf::from("out"));
        let o = c.protocol_options().unwrap();
        assert_eq!(o, ProtocolOptions::ideal(CodeKind::Binomial));
    }

    #[test]
    fn explicit_system_round_trips() {
        let mut c = RunConfig::new(CodeKind::Fock, Preset::Noisy);
        c.system = SystemSpec::Explicit(Box::new(SystemParams::paper_defaults().scale_coherence(2.0)));
        c.seed = Some(1);
        c.shots = Some(10);
        let back = RunConfig::from_json(c.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn presets_and_overrides() {
        let mut c = RunConfig::new(CodeKind::Binomial, Preset::NoFeedforward);
        assert!(!c.protocol_options().unwrap().feedforward);
        c.protocol.feedforward = Some(true);
        c.protocol.bell = Some(BellMode::Rip);
        let o = c.protocol_options().unwrap();
        assert!(o.feedforward && o.bell == BellMode::Rip);
        assert_eq!("truth-table".parse::<Preset>().unwrap(), Preset::TruthTable);
        assert!("bogus".parse::<Preset>().is_err());
    }

    #[test]
    fn rejects_invalid_configs() {
        let seedless = MINIMAL.replace("\"seed\": 7", "\"output_dir\": \"x\"");
        let c = RunConfig::from_json(seedless.as_bytes()).unwrap();
        c.validate().unwrap();
        assert!(c.seed().unwrap_err().is_config_error());
        let zero = MINIMAL.replace("1000", "0");
        assert!(RunConfig::from_json(zero.as_bytes()).unwrap().validate().is_err());
        for bad in [
            MINIMAL.replace("paper-defaults", "lab-b"),
            MINIMAL.replace("binomial", "cat"),
            MINIMAL.replace("\"ideal\"", "\"fast\""),
            MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"extra\": 1"),
            MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2"),
        ] {
            let r = RunConfig::from_json(bad.as_bytes()).and_then(|c| c.validate());
            assert!(r.unwrap_err().is_config_error(), "{bad}");
        }
        let mut c = RunConfig::from_json(MINIMAL.as_bytes()).unwrap();
        c.input = Some(vec![[0.0, 0.0]; 4]);
        assert!(c.validate().is_err());
        c.input = Some(vec![[1.0, 0.0]; 3]);
        assert!(c.validate().is_err());
        c.input = None;
        c.protocol.local_ops = Some(LocalOpMode::Pulse);
        assert!(c.validate().unwrap_err().is_config_error());
    }

    #[test]
    fn custom_input_is_normalized() {
        let mut c = RunConfig::from_json(MINIMAL.as_bytes()).unwrap();
        c.input = Some(vec![[3.0, 0.0], [0.0, 4.0], [0.0, 0.0], [0.0, 0.0]]);
        let (label, psi) = c.input_state().unwrap();
        assert_eq!(label, "custom");
        assert!((psi.norm() - 1.0).abs() < 1e-15);
    }
}
