//! Randomized-benchmarking decay fits.
//!
//! Model `p(N) = 0.5 + A e^{-N/τ}`, error per gate `r = (1 - e^{-1/τ})/2`.
//! The fit works with the rate `λ = 1/τ ≥ 0` so that error-free data
//! (`λ = 0`, `τ = ∞`) is representable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbPoint {
    pub length: usize,
    pub p_correct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbFit {
    pub amplitude: f64,
    /// `1/τ` per gate.
    pub rate: f64,
    pub error_per_gate: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl RbFit {
    /// Infinite when the fitted rate is zero.
    pub fn tau(&self) -> f64 {
        if self.rate > 0.0 {
            1.0 / self.rate
        } else {
            f64::INFINITY
        }
    }

    pub fn predict(&self, length: usize) -> f64 {
        0.5 + self.amplitude * (-self.rate * length as f64).exp()
    }
}

pub fn error_per_gate(rate: f64) -> f64 {
    (1.0 - (-rate).exp()) / 2.0
}

/// Levenberg-Marquardt on `(A, λ)` with `λ` clamped at zero.
pub fn rb_fit(points: &[RbPoint]) -> Result<RbFit> {
    let mut lengths: Vec<usize> = points.iter().map(|p| p.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    if lengths.len() < 3 {
        return Err(Error::Fit(format!("need 3 distinct lengths, got {}", lengths.len())));
    }
    if points.iter().any(|p| !p.p_correct.is_finite()) {
        return Err(Error::Fit("non-finite survival probability".into()));
    }
    let cost = |a: f64, l: f64| -> f64 {
        points
            .iter()
            .map(|p| {
                let r = 0.5 + a * (-l * p.length as f64).exp() - p.p_correct;
                r * r
            })
            .sum()
    };

    // log-linear start on points above the floor
    let (mut a, mut l) = {
        let usable: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.p_correct > 0.5 + 1e-9)
            .map(|p| (p.length as f64, (p.p_correct - 0.5).ln()))
            .collect();
        if usable.len() >= 2 {
            let n = usable.len() as f64;
            let mx = usable.iter().map(|u| u.0).sum::<f64>() / n;
            let my = usable.iter().map(|u| u.1).sum::<f64>() / n;
            let sxx: f64 = usable.iter().map(|u| (u.0 - mx).powi(2)).sum();
            let sxy: f64 = usable.iter().map(|u| (u.0 - mx) * (u.1 - my)).sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            ((my - slope * mx).exp(), (-slope).max(0.0))
        } else {
            (0.5, 0.01)
        }
    };

    let mut damping = 1e-3;
    let mut c = cost(a, l);
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for p in points {
            let n = p.length as f64;
            let e = (-l * n).exp();
            let r = 0.5 + a * e - p.p_correct;
            let g = [e, -a * n * e];
            for i in 0..2 {
                jtr[i] += g[i] * r;
                for j in 0..2 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let m = [
                [jtj[0][0] * (1.0 + damping), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + damping)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if !(det.abs() > 1e-300) {
                damping *= 10.0;
                continue;
            }
            let da = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let dl = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let (na, nl) = (a + da, (l + dl).max(0.0));
            let nc = cost(na, nl);
            if !nc.is_finite() {
                return Err(Error::Divergence(it));
            }
            if nc <= c {
                let step = (na - a).abs() + (nl - l).abs();
                a = na;
                l = nl;
                let done = c - nc <= 1e-15 * c.max(1e-300) || step < 1e-13;
                c = nc;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                if done {
                    return Ok(finish(a, l, c, iterations));
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            return Ok(finish(a, l, c, iterations));
        }
    }
    Ok(finish(a, l, c, iterations))
}

fn finish(amplitude: f64, rate: f64, residual: f64, iterations: usize) -> RbFit {
    RbFit {
        amplitude,
        rate,
        error_per_gate: error_per_gate(rate),
        residual,
        iterations,
    }
}

/// Error of the interleaved gate from reference and interleaved decays:
/// `r(X) = (1 - e^{-(1/τ_irb - 1/τ_rb)})/2`.
pub fn interleaved_error(reference: &RbFit, interleaved: &RbFit) -> f64 {
    error_per_gate(interleaved.rate - reference.rate)
}

/// Ideal depolarizing survival curve `0.5 + 0.5 (1 - 2r)^N`.
pub fn depolarizing_curve(r: f64, lengths: &[usize]) -> Vec<RbPoint> {
    lengths
        .iter()
        .map(|&n| RbPoint {
            length: n,
            p_correct: 0.5 + 0.5 * (1.0 - 2.0 * r).powi(n as i32),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LENGTHS: [usize; 8] = [1, 5, 10, 20, 40, 60, 90, 120];

    #[test]
    fn recovers_depolarizing_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = depolarizing_curve(0.01, &LENGTHS);
        for p in &mut pts {
            p.p_correct += 0.003 * (rng.gen::<f64>() - 0.5);
        }
        let fit = rb_fit(&pts).unwrap();
        assert!((fit.error_per_gate - 0.01).abs() < 0.002, "{fit:?}");
    }

    #[test]
    fn zero_error_data() {
        let fit = rb_fit(&depolarizing_curve(0.0, &LENGTHS)).unwrap();
        assert!((fit.amplitude - 0.5).abs() < 1e-6);
        assert!(fit.error_per_gate < 1e-4);
        assert!(fit.tau() > 1e4);
    }

    #[test]
    fn interleaved_worse_gate() {
        let reference = rb_fit(&depolarizing_curve(0.01, &LENGTHS)).unwrap();
        // interleaving a gate with error 0.02 composes the two depolarizers
        let composed = 1.0 - (1.0 - 2.0 * 0.01) * (1.0 - 2.0 * 0.02);
        let interleaved = rb_fit(&depolarizing_curve(composed / 2.0, &LENGTHS)).unwrap();
        let rx = interleaved_error(&reference, &interleaved);
        assert!(rx > reference.error_per_gate);
        assert!((rx - 0.02).abs() < 1e-6, "{rx}");
    }

    #[test]
    fn too_few_lengths() {
        let pts = depolarizing_curve(0.01, &[1, 1, 5]);
        assert!(matches!(rb_fit(&pts), Err(Error::Fit(_))));
    }
}
