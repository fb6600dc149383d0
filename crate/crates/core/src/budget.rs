//! Additive error budget with per-outcome accounting.
//!
//! Outcomes are ordered `00, 01, 10, 11` (module 1 bit first). The total for
//! outcome `i` is `p_bell + p_lo[i] + p_msmt[i] + p_ff[i]`.

use serde::{Deserialize, Serialize};

use crate::codes::CodeKind;
use crate::error::{Error, Result};

pub const BUDGET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentErrors {
    pub encoding: CodeKind,
    pub p_bell: f64,
    pub p_lo: [f64; 4],
    pub p_msmt: [f64; 4],
    pub p_ff: [f64; 4],
}

fn pct(v: [f64; 4]) -> [f64; 4] {
    v.map(|x| x / 100.0)
}

impl ComponentErrors {
    /// Reference component rows.
    pub fn paper_defaults(encoding: CodeKind) -> Self {
        match encoding {
            CodeKind::Binomial => Self {
                encoding,
                p_bell: 0.03,
                p_lo: pct([10.0, 10.0, 7.0, 7.0]),
                p_msmt: pct([1.0, 4.0, 2.0, 6.0]),
                p_ff: pct([3.0, 3.0, 0.0, 0.0]),
            },
            CodeKind::Fock => Self {
                encoding,
                p_bell: 0.03,
                p_lo: pct([6.0, 6.0, 6.0, 6.0]),
                p_msmt: pct([1.0, 4.0, 2.0, 6.0]),
                p_ff: pct([2.0, 2.0, 0.0, 0.0]),
            },
        }
    }

    pub fn zero(encoding: CodeKind) -> Self {
        Self {
            encoding,
            p_bell: 0.0,
            p_lo: [0.0; 4],
            p_msmt: [0.0; 4],
            p_ff: [0.0; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.p_bell)
            .chain(self.p_lo)
            .chain(self.p_msmt)
            .chain(self.p_ff);
        for p in all {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("component error {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn rows(&self) -> [(&'static str, [f64; 4]); 4] {
        [
            ("Bell generation", [self.p_bell; 4]),
            ("Local operations", self.p_lo),
            ("Communication qubit measurements", self.p_msmt),
            ("Feedforward operations", self.p_ff),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTotals {
    pub per_outcome: [f64; 4],
    /// Uniform-weight mean over outcomes.
    pub mean: f64,
    /// `1 - Π(1 - p)` per outcome, for comparison.
    pub multiplicative: [f64; 4],
    pub multiplicative_mean: f64,
    /// Some additive total exceeded 1 and was clipped.
    pub saturated: bool,
}

pub fn total_error(c: &ComponentErrors) -> Result<BudgetTotals> {
    c.validate()?;
    let mut per_outcome = [0.0; 4];
    let mut multiplicative = [0.0; 4];
    let mut saturated = false;
    for i in 0..4 {
        let parts = [c.p_bell, c.p_lo[i], c.p_msmt[i], c.p_ff[i]];
        let sum: f64 = parts.iter().sum();
        if sum > 1.0 {
            saturated = true;
        }
        per_outcome[i] = sum.min(1.0);
        multiplicative[i] = 1.0 - parts.iter().map(|p| 1.0 - p).product::<f64>();
    }
    Ok(BudgetTotals {
        per_outcome,
        mean: per_outcome.iter().sum::<f64>() / 4.0,
        multiplicative,
        multiplicative_mean: multiplicative.iter().sum::<f64>() / 4.0,
        saturated,
    })
}

/// Simulated component figures that feed the budget.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulatedComponents {
    pub bell_fidelity: Option<f64>,
    /// Local CNOT infidelities, module 1 then module 2.
    pub local_cnot: Option<[f64; 2]>,
    /// Extra error on outcomes `00, 01` from module-1 transmon decay while
    /// it waits for the longer module-2 operation.
    pub idle_t1: Option<f64>,
    /// Ground-state reset fidelity per outcome.
    pub reset_fidelity: Option<[f64; 4]>,
    pub x_feedforward: Option<f64>,
}

/// `1 - e^{-Δt/T1}`: chance that a transmon left in `e` decays before its
/// readout, conditioned on the module-1 bit being recorded 0.
pub fn idle_t1_penalty(idle_ns: f64, t1_us: f64) -> f64 {
    if idle_ns <= 0.0 {
        return 0.0;
    }
    1.0 - (-idle_ns * 1e-3 / t1_us).exp()
}

pub fn budget_from_simulation(encoding: CodeKind, sim: &SimulatedComponents) -> Result<ComponentErrors> {
    let need = |name: &str| Error::MissingComponent(name.to_string());
    let bell = sim.bell_fidelity.ok_or_else(|| need("bell_fidelity"))?;
    let lo = sim.local_cnot.ok_or_else(|| need("local_cnot"))?;
    let t1 = sim.idle_t1.ok_or_else(|| need("idle_t1"))?;
    let reset = sim.reset_fidelity.ok_or_else(|| need("reset_fidelity"))?;
    let x = sim.x_feedforward.ok_or_else(|| need("x_feedforward"))?;
    let base = lo[0] + lo[1];
    let c = ComponentErrors {
        encoding,
        p_bell: 1.0 - bell,
        p_lo: [base + t1, base + t1, base, base],
        p_msmt: reset.map(|f| 1.0 - f),
        p_ff: [x, x, 0.0, 0.0],
    };
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agreement {
    Consistent,
    /// Error bars touch or overlap by under one percentage point.
    Marginal,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub budget: f64,
    pub budget_err: f64,
    pub measured: f64,
    pub measured_err: f64,
    /// `(budget_err + measured_err) - |budget - measured|`.
    pub overlap: f64,
    pub agreement: Agreement,
}

pub fn compare(budget: f64, budget_err: f64, measured: f64, measured_err: f64) -> ConsistencyReport {
    let gap = (budget - measured).abs();
    let overlap = budget_err + measured_err - gap;
    let agreement = if gap <= 1e-12 || overlap > 0.01 + 1e-12 {
        Agreement::Consistent
    } else if overlap >= -1e-12 {
        Agreement::Marginal
    } else {
        Agreement::Inconsistent
    };
    ConsistencyReport {
        budget,
        budget_err,
        measured,
        measured_err,
        overlap,
        agreement,
    }
}

/// Share of the total infidelity per loss mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossAttribution {
    pub transmon_t2: f64,
    pub transmon_t1: f64,
    pub cavity: f64,
    pub other: f64,
}

impl LossAttribution {
    /// Normalizes absolute contributions to fractions summing to one.
    pub fn shares(&self) -> Result<LossAttribution> {
        let parts = [self.transmon_t2, self.transmon_t1, self.cavity, self.other];
        if parts.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("loss contributions must be non-negative".into()));
        }
        let total: f64 = parts.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("no loss to attribute".into()));
        }
        Ok(LossAttribution {
            transmon_t2: self.transmon_t2 / total,
            transmon_t1: self.transmon_t1 / total,
            cavity: self.cavity / total,
            other: self.other / total,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub component: String,
    pub per_outcome: [f64; 4],
    pub all: f64,
}

/// JSON layout of the budget, values in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTable {
    pub schema_version: u32,
    pub encoding: CodeKind,
    pub outcomes: [String; 4],
    pub rows: Vec<BudgetRow>,
    pub total: BudgetRow,
    pub multiplicative_total: BudgetRow,
}

fn row(name: &str, v: [f64; 4]) -> BudgetRow {
    let p = v.map(|x| x * 100.0);
    BudgetRow {
        component: name.to_string(),
        per_outcome: p,
        all: p.iter().sum::<f64>() / 4.0,
    }
}

pub fn budget_table(c: &ComponentErrors) -> Result<BudgetTable> {
    let totals = total_error(c)?;
    Ok(BudgetTable {
        schema_version: BUDGET_SCHEMA_VERSION,
        encoding: c.encoding,
        outcomes: ["00", "01", "10", "11"].map(String::from),
        rows: c.rows().iter().map(|(n, v)| row(n, *v)).collect(),
        total: row("Total infidelity", totals.per_outcome),
        multiplicative_total: row("Multiplicative total", totals.multiplicative),
    })
}

/// Integer-percent rendering with ties to even.
pub fn render_table(t: &BudgetTable) -> String {
    let fmt = |r: &BudgetRow| {
        let cells: Vec<String> = r
            .per_outcome
            .iter()
            .chain(std::iter::once(&r.all))
            .map(|x| format!("{:>4}", x.round_ties_even() as i64))
            .collect();
        format!("{:<34}{}\n", r.component, cells.join(""))
    };
    let mut out = format!("{:<34}{:>4}{:>4}{:>4}{:>4}{:>4}\n", t.encoding.name(), "00", "01", "10", "11", "All");
    for r in &t.rows {
        out += &fmt(r);
    }
    out += &fmt(&t.total);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rounded(v: [f64; 4]) -> [i64; 4] {
        v.map(|x| (x * 100.0).round() as i64)
    }

    #[test]
    fn reference_rows() {
        let b = total_error(&ComponentErrors::paper_defaults(CodeKind::Binomial)).unwrap();
        assert_eq!(rounded(b.per_outcome), [17, 20, 12, 16]);
        assert!((b.mean - 0.1625).abs() < 1e-12);
        let f = total_error(&ComponentErrors::paper_defaults(CodeKind::Fock)).unwrap();
        assert_eq!(rounded(f.per_outcome), [12, 15, 11, 15]);
        assert!((f.mean * 100.0).round_ties_even() == 13.0);
        assert!(b.multiplicative.iter().zip(b.per_outcome).all(|(m, a)| *m <= a));
    }

    #[test]
    fn zero_budget() {
        let z = total_error(&ComponentErrors::zero(CodeKind::Fock)).unwrap();
        assert_eq!(z.per_outcome, [0.0; 4]);
        assert_eq!(z.mean, 0.0);
    }

    #[test]
    fn saturation_is_flagged() {
        let mut c = ComponentErrors::zero(CodeKind::Binomial);
        c.p_bell = 0.6;
        c.p_lo = [0.6; 4];
        let t = total_error(&c).unwrap();
        assert!(t.saturated);
        assert_eq!(t.per_outcome, [1.0; 4]);
    }

    #[test]
    fn simulation_components_reproduce_rows() {
        let sim = SimulatedComponents {
            bell_fidelity: Some(0.97),
            local_cnot: Some([0.02, 0.054]),
            idle_t1: Some(0.025),
            reset_fidelity: Some([0.993, 0.957, 0.977, 0.942]),
            x_feedforward: Some(0.03),
        };
        let c = budget_from_simulation(CodeKind::Binomial, &sim).unwrap();
        let t = budget_table(&c).unwrap();
        let ints = |r: &BudgetRow| r.per_outcome.map(|x| x.round_ties_even() as i64);
        assert_eq!(ints(&t.rows[1]), [10, 10, 7, 7]);
        assert_eq!(ints(&t.rows[2]), [1, 4, 2, 6]);
        // unrounded components land on 13 for outcome 10; summing the
        // already-rounded cells gives 12
        assert_eq!(ints(&t.total), [17, 20, 13, 16]);
        assert!(budget_from_simulation(CodeKind::Binomial, &SimulatedComponents::default()).is_err());
        let perfect = SimulatedComponents {
            bell_fidelity: Some(1.0),
            local_cnot: Some([0.0, 0.0]),
            idle_t1: Some(0.0),
            reset_fidelity: Some([1.0; 4]),
            x_feedforward: Some(0.0),
        };
        let z = total_error(&budget_from_simulation(CodeKind::Fock, &perfect).unwrap()).unwrap();
        assert_eq!(z.mean, 0.0);
    }

    #[test]
    fn idle_penalty_magnitudes() {
        // module-1 transmon T1 of 67 us; waits of 1.5 us and 0.1 us
        assert!((idle_t1_penalty(1500.0, 67.0) - 0.022).abs() < 0.003);
        assert!((idle_t1_penalty(100.0, 67.0) - 0.0015).abs() < 0.0005);
        assert_eq!(idle_t1_penalty(-5.0, 67.0), 0.0);
    }

    #[test]
    fn rendered_table_rows() {
        let text = render_table(&budget_table(&ComponentErrors::paper_defaults(CodeKind::Binomial)).unwrap());
        let last = text.lines().last().unwrap();
        assert!(last.ends_with("  17  20  12  16  16"), "{text}");
        assert!(text.contains("Local operations                    10  10   7   7   8"), "{text}");
        let fock = render_table(&budget_table(&ComponentErrors::paper_defaults(CodeKind::Fock)).unwrap());
        assert!(fock.lines().last().unwrap().ends_with("  12  15  11  15  13"), "{fock}");
    }

    #[test]
    fn comparisons() {
        assert_eq!(compare(0.16, 0.03, 0.21, 0.02).agreement, Agreement::Marginal);
        assert_eq!(compare(0.13, 0.02, 0.13, 0.02).agreement, Agreement::Consistent);
        assert_eq!(compare(0.1, 0.0, 0.1, 0.0).agreement, Agreement::Consistent);
        assert_eq!(compare(0.10, 0.01, 0.20, 0.02).agreement, Agreement::Inconsistent);
    }

    #[test]
    fn attribution_shares() {
        let a = LossAttribution {
            transmon_t2: 0.70 * 0.16,
            transmon_t1: 0.25 * 0.16,
            cavity: 0.04 * 0.16,
            other: 0.01 * 0.16,
        }
        .shares()
        .unwrap();
        assert!((a.transmon_t2 + a.transmon_t1 + a.cavity + a.other - 1.0).abs() < 1e-12);
        assert!((a.transmon_t2 - 0.70).abs() < 1e-12);
    }

    fn arb_components() -> impl Strategy<Value = ComponentErrors> {
        let v4 = || prop::array::uniform4(0.0f64..0.2);
        (0.0f64..0.2, v4(), v4(), v4()).prop_map(|(b, lo, m, ff)| ComponentErrors {
            encoding: CodeKind::Binomial,
            p_bell: b,
            p_lo: lo,
            p_msmt: m,
            p_ff: ff,
        })
    }

    proptest! {
        #[test]
        fn totals_are_monotone(c in arb_components(), which in 0usize..13, bump in 0.0f64..0.1) {
            let base = total_error(&c).unwrap();
            let mut d = c.clone();
            match which {
                0 => d.p_bell += bump,
                1..=4 => d.p_lo[which - 1] += bump,
                5..=8 => d.p_msmt[which - 5] += bump,
                _ => d.p_ff[which - 9] += bump,
            }
            let up = total_error(&d).unwrap();
            for i in 0..4 {
                prop_assert!(up.per_outcome[i] >= base.per_outcome[i]);
            }
        }

        #[test]
        fn outcome_permutation_is_equivariant(c in arb_components(), perm in Just([2usize, 0, 3, 1])) {
            let mut d = c.clone();
            for i in 0..4 {
                d.p_lo[i] = c.p_lo[perm[i]];
                d.p_msmt[i] = c.p_msmt[perm[i]];
                d.p_ff[i] = c.p_ff[perm[i]];
            }
            let (a, b) = (total_error(&c).unwrap(), total_error(&d).unwrap());
            for i in 0..4 {
                prop_assert!((b.per_outcome[i] - a.per_outcome[perm[i]]).abs() < 1e-15);
            }
        }
    }
}
