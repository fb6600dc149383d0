//! Gradient-ascent pulse engineering for cavity + transmon local operations.
//!
//! Controls are the real and imaginary parts of piecewise-constant drives
//! `ε a† + ε* a` on named modes. The objective is the coherent transfer
//! fidelity `F = |Σ_k w_k <φ_k|U|ψ_k>|² / K²` minus smoothness and amplitude
//! penalties, where `w_k` are optional Z-gauge phases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::{qubit, LogicalCode};
use crate::error::{Error, Result};
use crate::evolver::{apply_lindblad_steps, lindblad_drive_steps, PiecewiseDrive, DEFAULT_SAMPLE_NS};
use crate::fock::{annihilation, embed, hermitian_eigen, CMatrix, CVector, Operator, C64, I, ZERO};
use crate::hamiltonians::{ang, CollapseOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    Fixed,
    /// Z phases on the listed qubit labels are free.
    ZPhaseFree,
}

/// Set of state transfers to realize.
#[derive(Clone, Debug)]
pub struct TransferSpec {
    pub pairs: Vec<(CVector, CVector)>,
    pub gauge: Gauge,
    /// `labels[k][j]`: whether gauge phase `j` multiplies pair `k`.
    pub labels: Vec<Vec<bool>>,
}

impl TransferSpec {
    pub fn new(pairs: Vec<(CVector, CVector)>, gauge: Gauge) -> Result<Self> {
        let k = pairs.len();
        let spec = Self {
            pairs,
            gauge,
            labels: vec![Vec::new(); k],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_labels(mut self, labels: Vec<Vec<bool>>) -> Result<Self> {
        self.labels = labels;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("transfer spec needs at least one pair".into()));
        }
        let dim = self.pairs[0].0.len();
        for (a, b) in &self.pairs {
            if a.len() != dim || b.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: a.len().max(b.len()),
                });
            }
            for v in [a, b] {
                if (v.norm() - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidState("transfer states must be normalized".into()));
                }
            }
        }
        if self.labels.len() != self.pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.pairs.len(),
                got: self.labels.len(),
            });
        }
        let j = self.labels[0].len();
        if self.labels.iter().any(|l| l.len() != j) {
            return Err(Error::Config("gauge labels must have equal length".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `|g> <-> |e>` on a bare transmon; gauge phases on input and output.
    pub fn x_gate(gauge: Gauge) -> Result<Self> {
        let g = qubit(0);
        let e = qubit(1);
        Self::new(vec![(g.clone(), e.clone()), (e, g)], gauge)?
            .with_labels(vec![vec![false, true], vec![true, false]])
    }

    /// Encoding on `cavity(dim) ⊗ transmon`.
    pub fn encode(code: &LogicalCode, dim: usize, gauge: Gauge) -> Result<Self> {
        Self::new(code.encode_pairs(dim)?, gauge)?
            .with_labels(vec![vec![false, false], vec![true, true]])
    }

    pub fn decode(code: &LogicalCode, dim: usize, gauge: Gauge) -> Result<Self> {
        Self::new(code.decode_pairs(dim)?, gauge)?
            .with_labels(vec![vec![false, false], vec![true, true]])
    }

    /// Cavity-controlled, transmon-target local CNOT.
    pub fn cnot_cavity_control(code: &LogicalCode, dim: usize, gauge: Gauge) -> Result<Self> {
        Self::new(code.cnot_cavity_control_pairs(dim)?, gauge)?
            .with_labels(cnot_labels(|c, q| (c, q ^ c)))
    }

    /// Transmon-controlled, cavity-target local CNOT.
    pub fn cnot_transmon_control(code: &LogicalCode, dim: usize, gauge: Gauge) -> Result<Self> {
        Self::new(code.cnot_transmon_control_pairs(dim)?, gauge)?
            .with_labels(cnot_labels(|c, q| (c ^ q, q)))
    }

    /// Logical single-qubit gate with the transmon idle in `g`.
    pub fn logical_gate(code: &LogicalCode, u: &CMatrix, dim: usize, gauge: Gauge) -> Result<Self> {
        let pairs = code.logical_gate_pairs(u, dim)?;
        let labels = (0..2).map(|k| vec![k == 1]).collect();
        Self::new(pairs, gauge)?.with_labels(labels)
    }
}

/// Labels `[in_c, in_q, out_c, out_q]` for the basis order `|c>|q>`, c slow.
fn cnot_labels(map: impl Fn(usize, usize) -> (usize, usize)) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for c in 0..2 {
        for q in 0..2 {
            let (oc, oq) = map(c, q);
            out.push(vec![c == 1, q == 1, oc == 1, oq == 1]);
        }
    }
    out
}

/// Gauge phases maximizing `|Σ w_k o_k|` by exact coordinate ascent.
pub fn gauge_align(overlaps: &[C64], labels: &[Vec<bool>], gauge: Gauge) -> Vec<C64> {
    let k = overlaps.len();
    let mut w = vec![C64::new(1.0, 0.0); k];
    let nlab = labels.first().map_or(0, |l| l.len());
    if gauge == Gauge::Fixed || nlab == 0 {
        return w;
    }
    let mut best = sum_weighted(overlaps, &w).norm();
    for _ in 0..100 {
        for j in 0..nlab {
            let mut s0 = ZERO;
            let mut s1 = ZERO;
            for (i, o) in overlaps.iter().enumerate() {
                if labels[i][j] {
                    s1 += w[i] * o;
                } else {
                    s0 += w[i] * o;
                }
            }
            if s1.norm() < 1e-300 {
                continue;
            }
            let rot = if s0.norm() < 1e-300 {
                C64::new(1.0, 0.0)
            } else {
                C64::from_polar(1.0, s0.arg() - s1.arg())
            };
            for i in 0..k {
                if labels[i][j] {
                    w[i] *= rot;
                }
            }
        }
        let now = sum_weighted(overlaps, &w).norm();
        if now - best < 1e-15 {
            break;
        }
        best = now;
    }
    w
}

fn sum_weighted(o: &[C64], w: &[C64]) -> C64 {
    o.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// rad/µs
    pub amplitude_limit: f64,
    pub amplitude_weight: f64,
    pub derivative_weight: f64,
    pub edge_weight: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            amplitude_limit: ang(10.0),
            amplitude_weight: 1.0,
            derivative_weight: 1e-3,
            edge_weight: 1e-2,
        }
    }
}

impl PenaltyConfig {
    pub fn none() -> Self {
        Self {
            amplitude_weight: 0.0,
            derivative_weight: 0.0,
            edge_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_limit > 0.0) {
            return Err(Error::Config("amplitude limit must be positive".into()));
        }
        for w in [self.amplitude_weight, self.derivative_weight, self.edge_weight] {
            if !(w >= 0.0) {
                return Err(Error::Config("penalty weights must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Penalty and its gradient for one drive (samples in units of the limit).
    ///
    /// amplitude: `Σ max(0, |u| - 1)²`; derivative: `Σ |u_{k+1} - u_k|²`;
    /// edge: `Σ |u_k|²` over the first and last `N/20` samples.
    fn evaluate(&self, samples: &[C64], grad: &mut [C64]) -> f64 {
        let l = self.amplitude_limit;
        let n = samples.len();
        let mut p = 0.0;
        for (k, s) in samples.iter().enumerate() {
            let u = s / l;
            let m = u.norm();
            if m > 1.0 && self.amplitude_weight > 0.0 {
                p += self.amplitude_weight * (m - 1.0).powi(2);
                grad[k] += u / m * (2.0 * self.amplitude_weight * (m - 1.0) / l);
            }
        }
        if self.derivative_weight > 0.0 {
            for k in 0..n.saturating_sub(1) {
                let d = (samples[k + 1] - samples[k]) / l;
                p += self.derivative_weight * d.norm_sqr();
                let g = d * (2.0 * self.derivative_weight / l);
                grad[k + 1] += g;
                grad[k] -= g;
            }
        }
        if self.edge_weight > 0.0 && n > 0 {
            let m = (n / 20).max(1);
            for k in (0..m.min(n)).chain(n.saturating_sub(m)..n) {
                let u = samples[k] / l;
                p += self.edge_weight * u.norm_sqr();
                grad[k] += u * (2.0 * self.edge_weight / l);
            }
        }
        p
    }
}

/// A pulse-synthesis problem: drift Hamiltonian, driven modes and transfers.
#[derive(Clone, Debug)]
pub struct GrapeProblem {
    pub h0: Operator,
    pub controls: Vec<String>,
    pub spec: TransferSpec,
    pub n_samples: usize,
    pub sample_period_ns: f64,
    pub penalties: PenaltyConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrapeOptions {
    pub iterations: usize,
    /// stop once the transfer fidelity reaches this value
    pub target_fidelity: f64,
    pub gradient_tol: f64,
    pub seed: u64,
    /// scale of the random initial guess relative to the amplitude limit
    pub init_scale: f64,
}

impl Default for GrapeOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            target_fidelity: 1.0,
            gradient_tol: 1e-9,
            seed: 0,
            init_scale: 0.6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GrapeResult {
    pub pulses: Vec<PiecewiseDrive>,
    pub fidelity: f64,
    pub objective: f64,
    /// transfer fidelity after each accepted iteration (entry 0 = initial)
    pub trace: Vec<f64>,
    /// objective after each accepted iteration
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

struct Step {
    vals: Vec<f64>,
    phases: Vec<C64>,
    v: CMatrix,
    u: CMatrix,
}

struct Forward {
    x: Vec<f64>,
    eig: Vec<Step>,
    fwd: Vec<Vec<CVector>>,
    w: Vec<C64>,
    s: C64,
    fidelity: f64,
    objective: f64,
    penalty_grad: Vec<f64>,
}


impl GrapeProblem {
    pub fn new(h0: Operator, controls: &[&str], spec: TransferSpec, duration_ns: f64) -> Result<Self> {
        let n = (duration_ns / DEFAULT_SAMPLE_NS).round() as usize;
        let p = Self {
            h0,
            controls: controls.iter().map(|s| s.to_string()).collect(),
            spec,
            n_samples: n,
            sample_period_ns: DEFAULT_SAMPLE_NS,
            penalties: PenaltyConfig::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_penalties(mut self, penalties: PenaltyConfig) -> Result<Self> {
        penalties.validate()?;
        self.penalties = penalties;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.penalties.validate()?;
        if self.spec.dim() != self.h0.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.h0.dim(),
                got: self.spec.dim(),
            });
        }
        if self.n_samples == 0 || !(self.sample_period_ns > 0.0) {
            return Err(Error::Config("pulse must have at least one sample".into()));
        }
        if self.controls.is_empty() {
            return Err(Error::Config("at least one control drive is required".into()));
        }
        for c in &self.controls {
            self.h0.layout().position(c)?;
        }
        if !self.h0.is_hermitian(1e-9) {
            return Err(Error::NonHermitian(self.h0.hermiticity_error()));
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.sample_period_ns * 1e-3
    }

    /// Control Hamiltonians `(a + a†, i(a† - a))` per drive.
    fn control_ops(&self) -> Result<Vec<[CMatrix; 2]>> {
        let layout = self.h0.layout();
        self.controls
            .iter()
            .map(|c| {
                let a = embed(&annihilation(layout.dim_of(c)?)?, layout, c)?.into_matrix();
                let ad = a.adjoint();
                Ok([&a + &ad, (&ad - &a) * I])
            })
            .collect()
    }

    pub fn zero_pulses(&self) -> Vec<PiecewiseDrive> {
        self.controls
            .iter()
            .map(|c| PiecewiseDrive {
                label: c.clone(),
                sample_period_ns: self.sample_period_ns,
                samples: vec![ZERO; self.n_samples],
            })
            .collect()
    }

    /// Smooth random guess: a few random sine harmonics per drive.
    pub fn random_pulses(&self, seed: u64, scale: f64) -> Vec<PiecewiseDrive> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = scale * self.penalties.amplitude_limit;
        let n = self.n_samples;
        self.zero_pulses()
            .into_iter()
            .map(|mut d| {
                let coefs: Vec<C64> = (0..5)
                    .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * (amp / 3.0))
                    .collect();
                for (k, s) in d.samples.iter_mut().enumerate() {
                    let t = (k as f64 + 0.5) / n as f64;
                    *s = coefs
                        .iter()
                        .enumerate()
                        .map(|(m, c)| c * (std::f64::consts::PI * (m + 1) as f64 * t).sin())
                        .sum();
                }
                d
            })
            .collect()
    }

    fn check_pulses(&self, pulses: &[PiecewiseDrive]) -> Result<()> {
        if pulses.len() != self.controls.len() {
            return Err(Error::DimensionMismatch {
                expected: self.controls.len(),
                got: pulses.len(),
            });
        }
        for (p, c) in pulses.iter().zip(&self.controls) {
            p.validate()?;
            if &p.label != c {
                return Err(Error::UnknownLabel(p.label.clone()));
            }
            if p.samples.len() != self.n_samples {
                return Err(Error::DimensionMismatch {
                    expected: self.n_samples,
                    got: p.samples.len(),
                });
            }
        }
        Ok(())
    }

    fn flatten(&self, pulses: &[PiecewiseDrive]) -> Vec<f64> {
        pulses
            .iter()
            .flat_map(|p| p.samples.iter().flat_map(|z| [z.re, z.im]))
            .collect()
    }

    fn unflatten(&self, x: &[f64]) -> Vec<PiecewiseDrive> {
        let n = self.n_samples;
        self.controls
            .iter()
            .enumerate()
            .map(|(d, c)| PiecewiseDrive {
                label: c.clone(),
                sample_period_ns: self.sample_period_ns,
                samples: (0..n)
                    .map(|k| C64::new(x[2 * (d * n + k)], x[2 * (d * n + k) + 1]))
                    .collect(),
            })
            .collect()
    }

    fn step_hamiltonian(&self, ops: &[[CMatrix; 2]], x: &[f64], k: usize) -> CMatrix {
        let n = self.n_samples;
        let mut h = self.h0.matrix().clone();
        for (d, [hr, hi]) in ops.iter().enumerate() {
            let re = x[2 * (d * n + k)];
            let im = x[2 * (d * n + k) + 1];
            if re != 0.0 {
                h += hr * C64::new(re, 0.0);
            }
            if im != 0.0 {
                h += hi * C64::new(im, 0.0);
            }
        }
        h
    }

    /// Full propagator `U_OC` for the given pulses.
    pub fn propagator(&self, pulses: &[PiecewiseDrive]) -> Result<CMatrix> {
        self.check_pulses(pulses)?;
        let ops = self.control_ops()?;
        let x = self.flatten(pulses);
        let dt = self.dt();
        let steps: Vec<CMatrix> = (0..self.n_samples)
            .into_par_iter()
            .map(|k| {
                let (vals, v) = hermitian_eigen(&self.step_hamiltonian(&ops, &x, k));
                let ph = CVector::from_iterator(vals.len(), vals.iter().map(|l| C64::from_polar(1.0, -l * dt)));
                &v * CMatrix::from_diagonal(&ph) * v.adjoint()
            })
            .collect();
        let d = self.h0.dim();
        Ok(steps.iter().fold(CMatrix::identity(d, d), |u, s| s * u))
    }

    /// Per-pair overlaps `<φ_k|U|ψ_k>`.
    pub fn overlaps(&self, pulses: &[PiecewiseDrive]) -> Result<Vec<C64>> {
        let u = self.propagator(pulses)?;
        Ok(self.spec.pairs.iter().map(|(a, b)| b.dotc(&(&u * a))).collect())
    }

    /// Gauge weights at the optimum for these pulses.
    pub fn gauge_weights(&self, pulses: &[PiecewiseDrive]) -> Result<Vec<C64>> {
        Ok(gauge_align(&self.overlaps(pulses)?, &self.spec.labels, self.spec.gauge))
    }

    pub fn transfer_fidelity(&self, pulses: &[PiecewiseDrive]) -> Result<f64> {
        let o = self.overlaps(pulses)?;
        let w = gauge_align(&o, &self.spec.labels, self.spec.gauge);
        let k = o.len() as f64;
        Ok(sum_weighted(&o, &w).norm_sqr() / (k * k))
    }

    pub fn penalty(&self, pulses: &[PiecewiseDrive]) -> Result<f64> {
        self.check_pulses(pulses)?;
        Ok(pulses
            .iter()
            .map(|p| {
                let mut g = vec![ZERO; p.samples.len()];
                self.penalties.evaluate(&p.samples, &mut g)
            })
            .sum())
    }

    /// Objective `F - penalties`.
    pub fn objective(&self, pulses: &[PiecewiseDrive]) -> Result<f64> {
        Ok(self.transfer_fidelity(pulses)? - self.penalty(pulses)?)
    }

    /// Gradient of `F - penalties`; entry `re` / `im` of each returned sample
    /// is the derivative with respect to that part.
    pub fn gradient(&self, pulses: &[PiecewiseDrive]) -> Result<Vec<Vec<C64>>> {
        self.check_pulses(pulses)?;
        let grad = self.backward(&self.forward(&self.flatten(pulses))?)?;
        let n = self.n_samples;
        Ok((0..self.controls.len())
            .map(|d| {
                (0..n)
                    .map(|k| C64::new(grad[2 * (d * n + k)], grad[2 * (d * n + k) + 1]))
                    .collect()
            })
            .collect())
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        let ops = self.control_ops()?;
        let n = self.n_samples;
        let dt = self.dt();
        let kp = self.spec.len();
        let eig: Vec<Step> = (0..n)
            .into_par_iter()
            .map(|k| {
                let (vals, v) = hermitian_eigen(&self.step_hamiltonian(&ops, x, k));
                let phases: Vec<C64> = vals.iter().map(|l| C64::from_polar(1.0, -l * dt)).collect();
                let ph = CVector::from_column_slice(&phases);
                let u = &v * CMatrix::from_diagonal(&ph) * v.adjoint();
                Step { vals, phases, v, u }
            })
            .collect();

        // fwd[k] = states before step k
        let mut fwd: Vec<Vec<CVector>> = Vec::with_capacity(n + 1);
        fwd.push(self.spec.pairs.iter().map(|(a, _)| a.clone()).collect());
        for st in &eig {
            let next = fwd.last().unwrap().iter().map(|s| &st.u * s).collect();
            fwd.push(next);
        }
        let overlaps: Vec<C64> = self
            .spec
            .pairs
            .iter()
            .zip(&fwd[n])
            .map(|((_, t), s)| t.dotc(s))
            .collect();
        let w = gauge_align(&overlaps, &self.spec.labels, self.spec.gauge);
        let s = sum_weighted(&overlaps, &w);
        let fidelity = s.norm_sqr() / (kp * kp) as f64;

        let mut penalty_grad = vec![0.0; 2 * self.controls.len() * n];
        let mut penalty = 0.0;
        for d in 0..self.controls.len() {
            let samples: Vec<C64> = (0..n)
                .map(|k| C64::new(x[2 * (d * n + k)], x[2 * (d * n + k) + 1]))
                .collect();
            let mut g = vec![ZERO; n];
            penalty += self.penalties.evaluate(&samples, &mut g);
            for k in 0..n {
                penalty_grad[2 * (d * n + k)] -= g[k].re;
                penalty_grad[2 * (d * n + k) + 1] -= g[k].im;
            }
        }
        Ok(Forward {
            x: x.to_vec(),
            eig,
            fwd,
            w,
            s,
            fidelity,
            objective: fidelity - penalty,
            penalty_grad,
        })
    }

    /// Exact gradient through each step propagator using the
    /// eigendecomposition (divided differences of the phases).
    fn backward(&self, fw: &Forward) -> Result<Vec<f64>> {
        let ops = self.control_ops()?;
        let n = self.n_samples;
        let dt = self.dt();
        let kp = self.spec.len();
        let norm = (kp * kp) as f64;

        // bwd[k] = U_{k+1}† ... U_N† φ, the costate after step k
        let mut bwd: Vec<Vec<CVector>> = vec![Vec::new(); n];
        let mut cur: Vec<CVector> = self.spec.pairs.iter().map(|(_, t)| t.clone()).collect();
        for k in (0..n).rev() {
            let ud = fw.eig[k].u.adjoint();
            let prev = cur.iter().map(|c| &ud * c).collect();
            bwd[k] = std::mem::replace(&mut cur, prev);
        }

        let sc = fw.s.conj();
        let sparse: Vec<[Vec<(usize, usize, C64)>; 2]> = ops
            .iter()
            .map(|pair| [nonzeros(&pair[0]), nonzeros(&pair[1])])
            .collect();
        let per_step: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let st = &fw.eig[k];
                let m = st.vals.len();
                let vd = st.v.adjoint();
                let chis: Vec<CVector> = bwd[k].iter().map(|c| &vd * c).collect();
                let psis: Vec<CVector> = fw.fwd[k].iter().map(|p| &vd * p).collect();
                // M_ab = Σ_j w_j conj(χ_ja) G_ab ψ_jb, then back to the Fock basis
                let mut mm = CMatrix::zeros(m, m);
                for a in 0..m {
                    let ea = st.phases[a];
                    for b in 0..m {
                        let diff = st.vals[a] - st.vals[b];
                        let g = if diff.abs() * dt < 1e-8 {
                            -I * dt * ea
                        } else {
                            (ea - st.phases[b]) / diff
                        };
                        let mut acc = ZERO;
                        for j in 0..kp {
                            acc += chis[j][a].conj() * fw.w[j] * psis[j][b];
                        }
                        mm[(a, b)] = g * acc;
                    }
                }
                let bm = st.v.conjugate() * mm * st.v.transpose();
                sparse
                    .iter()
                    .flat_map(|pair| pair.iter())
                    .map(|nz| {
                        let acc: C64 = nz.iter().map(|&(x, y, h)| h * bm[(x, y)]).sum();
                        2.0 * (sc * acc).re / norm
                    })
                    .collect()
            })
            .collect();
        let mut grad = fw.penalty_grad.clone();
        for (k, g) in per_step.iter().enumerate() {
            for d in 0..ops.len() {
                grad[2 * (d * n + k)] += g[2 * d];
                grad[2 * (d * n + k) + 1] += g[2 * d + 1];
            }
        }
        Ok(grad)
    }

    /// Conjugate-gradient ascent (Polak-Ribière, reset to steepest ascent
    /// whenever a direction fails) with a backtracking line search using
    /// parabolic step estimates; every accepted step increases the objective.
    pub fn optimize(&self, init: Option<Vec<PiecewiseDrive>>, opts: &GrapeOptions) -> Result<GrapeResult> {
        self.validate()?;
        if opts.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        let init = match init {
            Some(p) => p,
            None => self.random_pulses(opts.seed, opts.init_scale),
        };
        self.check_pulses(&init)?;
        let mut fw = self.forward(&self.flatten(&init))?;
        if !fw.objective.is_finite() {
            return Err(Error::Divergence(0));
        }
        let mut grad = self.backward(&fw)?;
        let mut trace = vec![fw.fidelity];
        let mut objective_trace = vec![fw.objective];
        let mut dir = grad.clone();
        let mut step = 0.1 * self.penalties.amplitude_limit / norm(&dir).max(1e-300);
        let mut iterations = 0;
        for it in 1..=opts.iterations {
            if fw.fidelity >= opts.target_fidelity || norm(&grad) < opts.gradient_tol {
                break;
            }
            iterations = it;
            if dot(&grad, &dir) <= 0.0 {
                dir = grad.clone();
            }
            let found = self.line_search(&fw, &dir, dot(&grad, &dir), step, it)?;
            let Some((next, used)) = found else {
                if dir != grad {
                    dir = grad.clone();
                    continue;
                }
                break;
            };
            step = used;
            let next_grad = self.backward(&next)?;
            let gg = dot(&grad, &grad);
            let beta = if gg > 0.0 {
                ((dot(&next_grad, &next_grad) - dot(&next_grad, &grad)) / gg).max(0.0)
            } else {
                0.0
            };
            dir = next_grad.iter().zip(&dir).map(|(g, d)| g + beta * d).collect();
            grad = next_grad;
            fw = next;
            trace.push(fw.fidelity);
            objective_trace.push(fw.objective);
        }
        Ok(GrapeResult {
            pulses: self.unflatten(&fw.x),
            fidelity: fw.fidelity,
            objective: fw.objective,
            trace,
            objective_trace,
            iterations,
        })
    }

    fn line_search(
        &self,
        fw: &Forward,
        dir: &[f64],
        slope: f64,
        step: f64,
        it: usize,
    ) -> Result<Option<(Forward, f64)>> {
        let j0 = fw.objective;
        let at = |alpha: f64| -> Result<Forward> {
            let xt: Vec<f64> = fw.x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
            let f = self.forward(&xt)?;
            if !f.objective.is_finite() {
                return Err(Error::Divergence(it));
            }
            Ok(f)
        };
        // parabola through J(0), J'(0) and J(alpha)
        let vertex = |alpha: f64, j: f64| {
            let c = (j - j0 - slope * alpha) / (alpha * alpha);
            if c < 0.0 {
                Some(-slope / (2.0 * c))
            } else {
                None
            }
        };
        let mut alpha = step;
        for _ in 0..40 {
            let trial = at(alpha)?;
            if trial.objective > j0 {
                let mut best = (trial, alpha);
                let guess = match vertex(alpha, best.0.objective) {
                    Some(v) => v.clamp(0.25 * alpha, 4.0 * alpha),
                    None => 2.0 * alpha,
                };
                if (guess / alpha - 1.0).abs() > 0.1 {
                    let other = at(guess)?;
                    if other.objective > best.0.objective {
                        best = (other, guess);
                    }
                }
                return Ok(Some(best));
            }
            alpha = match vertex(alpha, trial.objective) {
                Some(v) => v.clamp(0.1 * alpha, 0.5 * alpha),
                None => 0.5 * alpha,
            };
        }
        Ok(None)
    }

    /// Average transfer infidelity under the Lindblad channel defined by
    /// `collapse`, using the gauge weights that are optimal for the unitary
    /// evolution:
    /// `F = (1/K²) Σ_kl w_k w_l* <φ_k| E(|ψ_k><ψ_l|) |φ_l>`.
    pub fn lindblad_validate(&self, pulses: &[PiecewiseDrive], collapse: &[CollapseOp]) -> Result<f64> {
        self.check_pulses(pulses)?;
        let w = self.gauge_weights(pulses)?;
        let steps = lindblad_drive_steps(&self.h0, pulses)?;
        let kp = self.spec.len();
        let blocks: Vec<(usize, usize)> = (0..kp).flat_map(|k| (k..kp).map(move |l| (k, l))).collect();
        let dt = self.dt();
        let terms: Vec<C64> = blocks
            .par_iter()
            .map(|&(k, l)| {
                let (pk, tk) = &self.spec.pairs[k];
                let (pl, tl) = &self.spec.pairs[l];
                let x = pk * pl.adjoint();
                let e = apply_lindblad_steps(&steps, collapse, dt, &x);
                let v = tk.dotc(&(&e * tl)) * w[k] * w[l].conj();
                if k == l {
                    v
                } else {
                    v + v.conj()
                }
            })
            .collect();
        let f = terms.iter().sum::<C64>().re / (kp * kp) as f64;
        Ok(1.0 - f)
    }
}

fn nonzeros(m: &CMatrix) -> Vec<(usize, usize, C64)> {
    let mut out = Vec::new();
    for x in 0..m.nrows() {
        for y in 0..m.ncols() {
            if m[(x, y)] != ZERO {
                out.push((x, y, m[(x, y)]));
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::binomial_code;
    use crate::evolver::propagate_drives;
    use crate::fock::{max_abs, HilbertSpaceLayout, QuantumState};
    use crate::hamiltonians::{collapse_operators, module_hamiltonian, SystemParams};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn transmon_problem(duration_ns: f64, gauge: Gauge) -> GrapeProblem {
        let layout = HilbertSpaceLayout::new(&[("q2", 2)]).unwrap();
        GrapeProblem::new(
            Operator::zeros(&layout),
            &["q2"],
            TransferSpec::x_gate(gauge).unwrap(),
            duration_ns,
        )
        .unwrap()
    }

    #[test]
    fn identity_transfer_with_zero_pulses() {
        let layout = HilbertSpaceLayout::single(3).unwrap();
        let pairs = (0..3)
            .map(|k| {
                let v = crate::codes::fock(k, 3);
                (v.clone(), v)
            })
            .collect();
        let spec = TransferSpec::new(pairs, Gauge::Fixed).unwrap();
        let p = GrapeProblem::new(Operator::zeros(&layout), &["a"], spec, 20.0).unwrap();
        assert!((p.transfer_fidelity(&p.zero_pulses()).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_targets() {
        let p = transmon_problem(20.0, Gauge::Fixed);
        assert!(p.transfer_fidelity(&p.zero_pulses()).unwrap() < 1e-28);
    }

    #[test]
    fn fidelity_matches_stepwise_oracle() {
        let sp = SystemParams::paper_defaults();
        let layout = HilbertSpaceLayout::new(&[("c2", 6), ("q2", 2)]).unwrap();
        let h0 = module_hamiltonian(&sp, 2, &layout).unwrap();
        let code = binomial_code();
        let spec = TransferSpec::encode(&code, 6, Gauge::Fixed).unwrap();
        let p = GrapeProblem::new(h0.clone(), &["c2", "q2"], spec.clone(), 100.0).unwrap();
        let pulses = p.random_pulses(7, 0.5);
        let mut total = ZERO;
        for (a, b) in &spec.pairs {
            let st = QuantumState::pure(layout.clone(), a.clone()).unwrap();
            let out = propagate_drives(&h0, &pulses, &st).unwrap();
            total += b.dotc(out.vector().unwrap());
        }
        let oracle = (total / C64::new(2.0, 0.0)).norm_sqr();
        assert!((p.transfer_fidelity(&pulses).unwrap() - oracle).abs() < 1e-10);
    }

    fn fd_check(p: &GrapeProblem, pulses: &[PiecewiseDrive]) -> f64 {
        let g = p.gradient(pulses).unwrap();
        let h = 1e-7;
        let x = p.flatten(pulses);
        let mut max_dev: f64 = 0.0;
        let mut max_g: f64 = 0.0;
        let n = p.n_samples;
        for d in 0..p.controls.len() {
            for k in 0..n {
                for part in 0..2 {
                    let idx = 2 * (d * n + k) + part;
                    let mut xp = x.clone();
                    xp[idx] += h;
                    let mut xm = x.clone();
                    xm[idx] -= h;
                    let fd = (p.objective(&p.unflatten(&xp)).unwrap()
                        - p.objective(&p.unflatten(&xm)).unwrap())
                        / (2.0 * h);
                    let an = if part == 0 { g[d][k].re } else { g[d][k].im };
                    max_dev = max_dev.max((fd - an).abs());
                    max_g = max_g.max(fd.abs());
                }
            }
        }
        max_dev / max_g
    }

    #[test]
    fn gradient_matches_finite_differences_two_level() {
        let p = transmon_problem(20.0, Gauge::Fixed);
        let pulses = p.random_pulses(3, 0.8);
        assert!(fd_check(&p, &pulses) < 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_three_pairs() {
        let layout = HilbertSpaceLayout::new(&[("c1", 3), ("q1", 2)]).unwrap();
        let sp = SystemParams::paper_defaults();
        let h0 = module_hamiltonian(&sp, 1, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_state = || {
            let v = CVector::from_fn(6, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let n = v.norm();
            v / C64::new(n, 0.0)
        };
        let pairs = (0..3).map(|_| (rand_state(), rand_state())).collect();
        let spec = TransferSpec::new(pairs, Gauge::Fixed).unwrap();
        let p = GrapeProblem::new(h0, &["c1", "q1"], spec, 16.0)
            .unwrap()
            .with_penalties(PenaltyConfig {
                amplitude_limit: 20.0,
                ..PenaltyConfig::default()
            })
            .unwrap();
        let pulses = p.random_pulses(5, 1.5);
        assert!(fd_check(&p, &pulses) < 1e-5);
    }

    #[test]
    fn gradient_with_gauge_matches_finite_differences() {
        let p = transmon_problem(20.0, Gauge::ZPhaseFree);
        let pulses = p.random_pulses(9, 0.8);
        assert!(fd_check(&p, &pulses) < 1e-5);
    }

    #[test]
    fn flat_pulse_derivative_penalty_gradient() {
        let pen = PenaltyConfig {
            derivative_weight: 1.0,
            ..PenaltyConfig::none()
        };
        let samples = vec![C64::new(3.0, -1.0); 50];
        let mut g = vec![ZERO; 50];
        assert_eq!(pen.evaluate(&samples, &mut g), 0.0);
        assert!(g.iter().all(|z| *z == ZERO));
    }

    #[test]
    fn x_gate_converges() {
        let p = transmon_problem(40.0, Gauge::ZPhaseFree);
        let r = p
            .optimize(
                None,
                &GrapeOptions {
                    iterations: 200,
                    target_fidelity: 0.9999,
                    ..GrapeOptions::default()
                },
            )
            .unwrap();
        assert!(r.fidelity > 0.999, "F = {}", r.fidelity);
        assert!(r.objective_trace.windows(2).all(|w| w[1] > w[0]));
        let u = p.propagator(&r.pulses).unwrap();
        assert!(max_abs(&(&u * u.adjoint() - CMatrix::identity(2, 2))) < 1e-9);
    }

    #[test]
    fn gauge_never_hurts() {
        let fixed = transmon_problem(40.0, Gauge::Fixed);
        let free = transmon_problem(40.0, Gauge::ZPhaseFree);
        for seed in 0..5 {
            let pulses = fixed.random_pulses(seed, 0.7);
            let a = fixed.transfer_fidelity(&pulses).unwrap();
            let b = free.transfer_fidelity(&pulses).unwrap();
            assert!(b >= a - 1e-14);
        }
    }

    #[test]
    fn gauge_align_is_exact_for_independent_phases() {
        let o = [C64::from_polar(0.5, 1.0), C64::from_polar(0.5, -2.0)];
        let labels = vec![vec![false], vec![true]];
        let w = gauge_align(&o, &labels, Gauge::ZPhaseFree);
        assert!((sum_weighted(&o, &w).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn objective_invariant_under_global_target_phase() {
        let p = transmon_problem(20.0, Gauge::Fixed);
        let pulses = p.random_pulses(1, 0.5);
        let mut q = p.clone();
        let ph = C64::from_polar(1.0, 0.77);
        for (_, t) in q.spec.pairs.iter_mut() {
            *t *= ph;
        }
        assert!((p.objective(&pulses).unwrap() - q.objective(&pulses).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn lindblad_without_decoherence_matches() {
        let layout = HilbertSpaceLayout::new(&[("c2", 5), ("q2", 2)]).unwrap();
        let sp = SystemParams::paper_defaults();
        let h0 = module_hamiltonian(&sp, 2, &layout).unwrap();
        let spec = TransferSpec::encode(&binomial_code(), 5, Gauge::ZPhaseFree).unwrap();
        let p = GrapeProblem::new(h0, &["c2", "q2"], spec, 60.0).unwrap();
        let pulses = p.random_pulses(2, 0.5);
        let f = p.transfer_fidelity(&pulses).unwrap();
        let inf = p.lindblad_validate(&pulses, &[]).unwrap();
        assert!((1.0 - inf - f).abs() < 1e-6);
    }

    #[test]
    fn lindblad_infidelity_decreases_with_coherence() {
        let p = transmon_problem(40.0, Gauge::ZPhaseFree);
        let r = p
            .optimize(None, &GrapeOptions { iterations: 200, target_fidelity: 0.99999, ..Default::default() })
            .unwrap();
        let layout = p.h0.layout().clone();
        let mut last = f64::INFINITY;
        for scale in [0.01, 0.1, 1.0] {
            let sp = SystemParams::paper_defaults().scale_coherence(scale);
            let cs = collapse_operators(&sp, &layout).unwrap();
            let inf = p.lindblad_validate(&r.pulses, &cs).unwrap();
            assert!(inf < last, "{inf} !< {last}");
            last = inf;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let layout = HilbertSpaceLayout::single(2).unwrap();
        let v = CVector::from_element(2, C64::new(1.0, 0.0));
        assert!(TransferSpec::new(vec![(v.clone(), v)], Gauge::Fixed).is_err());
        assert!(TransferSpec::new(Vec::new(), Gauge::Fixed).is_err());
        let spec = TransferSpec::x_gate(Gauge::Fixed).unwrap();
        assert!(GrapeProblem::new(Operator::zeros(&layout), &["zz"], spec, 10.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn propagator_is_unitary(seed in 0u64..1000, scale in 0.1f64..3.0) {
            let layout = HilbertSpaceLayout::new(&[("c1", 4), ("q1", 2)]).unwrap();
            let sp = SystemParams::paper_defaults();
            let h0 = module_hamiltonian(&sp, 1, &layout).unwrap();
            let spec = TransferSpec::encode(&crate::codes::fock_code(), 4, Gauge::Fixed).unwrap();
            let p = GrapeProblem::new(h0, &["c1", "q1"], spec, 20.0).unwrap();
            let u = p.propagator(&p.random_pulses(seed, scale)).unwrap();
            prop_assert!(max_abs(&(&u * u.adjoint() - CMatrix::identity(8, 8))) < 1e-9);
        }
    }
}
