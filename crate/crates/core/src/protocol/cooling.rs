//! Measurement-based feedback cooling before each run.
//!
//! Every mode is classical here (Z readout and π pulses only), so a run is a
//! Markov chain over transmon bits and cavity photon numbers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::measurement::MeasurementModel;

/// Equilibrium excitations before cooling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalConfig {
    pub transmon: f64,
    /// Probability that a cavity holds at least one photon.
    pub cavity: f64,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        Self {
            transmon: 0.10,
            cavity: 0.01,
        }
    }
}

impl ThermalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("transmon", self.transmon), ("cavity", self.cavity)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} thermal population {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            transmon: self.transmon * factor,
            cavity: self.cavity * factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoolingConfig {
    pub consecutive: usize,
    /// Probability that a vacuum-selective π pulse flips the transmon.
    pub selective_success: f64,
    /// Cap on readout rounds.
    pub max_attempts: usize,
    pub measurement: [MeasurementModel; 2],
}

impl Default for CoolingConfig {
    fn default() -> Self {
        Self {
            consecutive: 3,
            selective_success: 0.90,
            max_attempts: 100,
            measurement: [
                MeasurementModel::paper_defaults(1).expect("module 1"),
                MeasurementModel::paper_defaults(2).expect("module 2"),
            ],
        }
    }
}

impl CoolingConfig {
    pub fn perfect() -> Self {
        Self {
            selective_success: 1.0,
            measurement: [MeasurementModel::perfect(), MeasurementModel::perfect()],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.consecutive == 0 || self.max_attempts == 0 {
            return Err(Error::Config("cooling needs positive pass and attempt counts".into()));
        }
        if !(0.0..=1.0).contains(&self.selective_success) {
            return Err(Error::Config(format!("selective success {}", self.selective_success)));
        }
        for m in &self.measurement {
            m.validate()?;
        }
        Ok(())
    }
}

/// Classical configuration of the two modules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleOccupation {
    pub transmon: [bool; 2],
    pub cavity: [usize; 2],
}

impl ModuleOccupation {
    pub fn is_ground(&self) -> bool {
        self.transmon == [false, false] && self.cavity == [0, 0]
    }

    /// Thermal draw: Bernoulli transmons, geometric cavity photon numbers.
    pub fn thermal<R: Rng>(cfg: &ThermalConfig, rng: &mut R) -> Self {
        let mut occ = Self::default();
        for k in 0..2 {
            occ.transmon[k] = rng.gen::<f64>() < cfg.transmon;
            while rng.gen::<f64>() < cfg.cavity {
                occ.cavity[k] += 1;
            }
        }
        occ
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoolingRun {
    pub state: ModuleOccupation,
    pub attempts: usize,
    pub q_switches: usize,
}

struct Machine<'a, R: Rng> {
    cfg: &'a CoolingConfig,
    rng: &'a mut R,
    occ: ModuleOccupation,
    attempts: usize,
}

impl<R: Rng> Machine<'_, R> {
    fn read(&mut self) -> Result<[bool; 2]> {
        self.attempts += 1;
        if self.attempts > self.cfg.max_attempts {
            return Err(Error::CoolingTimeout(self.cfg.max_attempts));
        }
        let mut rec = [false; 2];
        for (k, r) in rec.iter_mut().enumerate() {
            let row = self.cfg.measurement[k].confusion[usize::from(self.occ.transmon[k])];
            *r = self.rng.gen::<f64>() < row[1];
        }
        Ok(rec)
    }

    fn flip_recorded(&mut self, rec: [bool; 2]) {
        for k in 0..2 {
            if rec[k] {
                self.occ.transmon[k] = !self.occ.transmon[k];
            }
        }
    }

    /// Read and reset until `consecutive` rounds in a row report gg.
    fn transmon_reset(&mut self) -> Result<()> {
        let mut run = 0;
        while run < self.cfg.consecutive {
            let rec = self.read()?;
            self.flip_recorded(rec);
            run = if rec == [false, false] { run + 1 } else { 0 };
        }
        Ok(())
    }

    /// Vacuum check; false on the first failed round.
    fn cavity_check(&mut self) -> Result<bool> {
        for _ in 0..self.cfg.consecutive {
            for k in 0..2 {
                if self.occ.cavity[k] == 0 && self.rng.gen::<f64>() < self.cfg.selective_success {
                    self.occ.transmon[k] = !self.occ.transmon[k];
                }
            }
            let rec = self.read()?;
            self.flip_recorded(rec);
            if rec != [true, true] {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Transmon reset, cavity vacuum check with Q-switch on failure, final
/// transmon check.
pub fn cooling_reset<R: Rng>(initial: ModuleOccupation, cfg: &CoolingConfig, rng: &mut R) -> Result<CoolingRun> {
    cfg.validate()?;
    let mut m = Machine {
        cfg,
        rng,
        occ: initial,
        attempts: 0,
    };
    let mut q_switches = 0;
    loop {
        m.transmon_reset()?;
        if m.cavity_check()? {
            break;
        }
        m.occ.cavity = [0, 0];
        q_switches += 1;
    }
    m.transmon_reset()?;
    Ok(CoolingRun {
        state: m.occ,
        attempts: m.attempts,
        q_switches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoolingStats {
    pub runs: usize,
    pub ground_fidelity: f64,
    pub mean_attempts: f64,
    pub timeouts: usize,
    /// `histogram[a]` counts runs that took `a` readout rounds.
    pub histogram: Vec<usize>,
}

/// Monte Carlo over `runs` thermal draws; timeouts count as failures.
pub fn cooling_statistics<R: Rng>(
    runs: usize,
    thermal: &ThermalConfig,
    cfg: &CoolingConfig,
    rng: &mut R,
) -> Result<CoolingStats> {
    thermal.validate()?;
    let mut ground = 0usize;
    let mut timeouts = 0usize;
    let mut total = 0usize;
    let mut histogram = vec![0usize; cfg.max_attempts + 1];
    for _ in 0..runs {
        let init = ModuleOccupation::thermal(thermal, rng);
        match cooling_reset(init, cfg, rng) {
            Ok(run) => {
                ground += usize::from(run.state.is_ground());
                total += run.attempts;
                histogram[run.attempts] += 1;
            }
            Err(Error::CoolingTimeout(_)) => timeouts += 1,
            Err(e) => return Err(e),
        }
    }
    let done = runs - timeouts;
    Ok(CoolingStats {
        runs,
        ground_fidelity: ground as f64 / runs.max(1) as f64,
        mean_attempts: total as f64 / done.max(1) as f64,
        timeouts,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimal_pass_count_when_cold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = cooling_reset(ModuleOccupation::default(), &CoolingConfig::perfect(), &mut rng).unwrap();
        assert_eq!(run.attempts, 9);
        assert_eq!(run.q_switches, 0);
        assert!(run.state.is_ground());
    }

    #[test]
    fn hot_cavity_triggers_q_switch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = ModuleOccupation {
            transmon: [true, false],
            cavity: [0, 2],
        };
        let run = cooling_reset(init, &CoolingConfig::perfect(), &mut rng).unwrap();
        assert_eq!(run.q_switches, 1);
        assert!(run.state.is_ground());
    }

    #[test]
    fn timeout_is_reported() {
        let mut cfg = CoolingConfig::perfect();
        cfg.max_attempts = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = cooling_reset(ModuleOccupation::default(), &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::CoolingTimeout(5)));
    }

    #[test]
    fn thermal_validation() {
        assert!(ThermalConfig { transmon: 1.0, cavity: 0.0 }.validate().is_err());
    }
}
