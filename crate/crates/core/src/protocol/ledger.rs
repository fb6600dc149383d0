use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolver::reference_phase_op;
use crate::fock::{HilbertSpaceLayout, Operator};

/// Software frame of the two data cavities.
///
/// An angle `θ_k` means the intended cavity state is `exp(iθ_k n)` applied to
/// the physical one. Logical Z updates and known drifts are booked here and
/// resolved in one step at readout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferencePhaseLedger {
    pub angles: [f64; 2],
    /// Increment for each measurement outcome `2 r1 + r2`.
    pub conditional: [[f64; 2]; 4],
}

impl ReferencePhaseLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_conditional(conditional: [[f64; 2]; 4]) -> Self {
        Self {
            angles: [0.0; 2],
            conditional,
        }
    }

    pub fn add(&mut self, module: usize, theta: f64) -> Result<()> {
        if !(1..=2).contains(&module) {
            return Err(Error::Config(format!("no data cavity in module {module}")));
        }
        let a = &mut self.angles[module - 1];
        *a = (*a + theta).rem_euclid(TAU);
        Ok(())
    }

    pub fn record_outcome(&mut self, outcome: u8) -> Result<()> {
        let inc = *self
            .conditional
            .get(outcome as usize)
            .ok_or(Error::InvalidOutcome(outcome))?;
        self.add(1, inc[0])?;
        self.add(2, inc[1])
    }

    /// Unitary taking physical to intended frame on `c1`, `c2`.
    pub fn resolve_op(&self, layout: &HilbertSpaceLayout) -> Result<Operator> {
        let mut u = Operator::identity(layout);
        for (k, label) in ["c1", "c2"].iter().enumerate() {
            if layout.contains(label) && self.angles[k] != 0.0 {
                u = &u * &reference_phase_op(-self.angles[k], label, layout)?;
            }
        }
        Ok(u)
    }
}
