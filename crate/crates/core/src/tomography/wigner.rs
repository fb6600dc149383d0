//! Wigner function of a cavity state via displaced parity.
//!
//! `D(β) Π D(β)† = D(2β) Π`, so
//! `W_mn(β) := <n| D(β) Π D(β)† |m> = (-1)^m <n| D(2β) |m>` with
//!
//! ```text
//! <n|D(α)|m> = sqrt(m!/n!) α^(n-m) e^(-|α|²/2) L_m^(n-m)(|α|²)          n >= m
//!            = sqrt(n!/m!) (-α*)^(m-n) e^(-|α|²/2) L_n^(m-n)(|α|²)       n <  m
//! ```
//!
//! evaluated at `α = 2β`.

use std::f64::consts::FRAC_2_PI;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{displacement, parity, CMatrix, C64};

/// Largest `|β|` accepted; beyond it `e^{-2|β|²}` underflows against the
/// Laguerre growth.
pub const MAX_BETA: f64 = 10.0;

/// Generalized Laguerre polynomial `L_k^(a)(x)` by upward recurrence.
pub fn laguerre(k: usize, a: usize, x: f64) -> f64 {
    let a = a as f64;
    let mut prev = 1.0;
    if k == 0 {
        return prev;
    }
    let mut cur = 1.0 + a - x;
    for j in 1..k {
        let j = j as f64;
        let next = ((2.0 * j + 1.0 + a - x) * cur - (j + a) * prev) / (j + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Fock matrix element `<n|D(α)|m>`.
pub fn displacement_element(n: usize, m: usize, alpha: C64) -> C64 {
    let x = alpha.norm_sqr();
    let gauss = (-x / 2.0).exp();
    if n >= m {
        let k = (n - m) as i32;
        let pref = (0.5 * (ln_factorial(m) - ln_factorial(n))).exp();
        alpha.powi(k) * (pref * gauss * laguerre(m, n - m, x))
    } else {
        let k = (m - n) as i32;
        let pref = (0.5 * (ln_factorial(n) - ln_factorial(m))).exp();
        (-alpha.conj()).powi(k) * (pref * gauss * laguerre(n, m - n, x))
    }
}

/// `<n| D(β) Π D(β)† |m>` in closed form.
pub fn wigner_element(m: usize, n: usize, beta: C64) -> C64 {
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    displacement_element(n, m, beta * 2.0) * sign
}

/// Dimension used by [`wigner_element_oracle`].
pub fn oracle_dim(m: usize, n: usize, beta: C64) -> usize {
    m + n + 8 * beta.norm_sqr().ceil() as usize + 10
}

/// Same element from dense matrices: `D(β)` by matrix exponential in a
/// padded space.
pub fn wigner_element_oracle(m: usize, n: usize, beta: C64) -> Result<C64> {
    let dim = oracle_dim(m, n, beta).max(crate::fock::displacement_min_dim(beta));
    let d = displacement(beta, dim)?.into_matrix();
    let p = parity(dim)?.into_matrix();
    let k = &d * p * d.adjoint();
    Ok(k[(n, m)])
}

/// Matrix `K(β)` with `K[(n, m)] = W_mn(β)`, so that `Tr[ρ K] = Σ ρ_mn W_mn`.
pub fn displaced_parity(beta: C64, dim: usize) -> CMatrix {
    CMatrix::from_fn(dim, dim, |n, m| wigner_element(m, n, beta))
}

fn check_beta(beta: C64, dim: usize) -> Result<()> {
    if !(beta.norm() <= MAX_BETA) {
        return Err(Error::TruncationRisk {
            dim,
            beta_sq: beta.norm_sqr(),
            recommended: dim,
        });
    }
    Ok(())
}

/// `W(β) = (2/π) Tr[ρ D(β) Π D(β)†]` for a single-cavity density matrix.
pub fn wigner_at(rho: &CMatrix, beta: C64) -> Result<f64> {
    let dim = rho.nrows();
    if rho.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: rho.ncols(),
        });
    }
    check_beta(beta, dim)?;
    let mut acc = C64::new(0.0, 0.0);
    for m in 0..dim {
        for n in 0..dim {
            acc += rho[(m, n)] * wigner_element(m, n, beta);
        }
    }
    Ok(FRAC_2_PI * acc.re)
}

/// Square grid over `[-extent, extent]²` with `points` samples per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerGrid {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl WignerGrid {
    pub fn square(extent: f64, points: usize) -> Result<Self> {
        if points < 2 || !(extent > 0.0) {
            return Err(Error::Config(format!("wigner grid {points} x {points} over ±{extent}")));
        }
        let axis: Vec<f64> = (0..points)
            .map(|k| -extent + 2.0 * extent * k as f64 / (points - 1) as f64)
            .collect();
        Ok(Self {
            re: axis.clone(),
            im: axis,
        })
    }

    /// Row-major over `im`, then `re`.
    pub fn points(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.re.len() * self.im.len());
        for &y in &self.im {
            for &x in &self.re {
                out.push(C64::new(x, y));
            }
        }
        out
    }

    pub fn cell_area(&self) -> f64 {
        let step = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 0.0 };
        step(&self.re) * step(&self.im)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WignerSample {
    pub beta: C64,
    pub w: f64,
}

pub fn wigner_function(rho: &CMatrix, grid: &WignerGrid) -> Result<Vec<WignerSample>> {
    grid.points()
        .into_par_iter()
        .map(|beta| wigner_at(rho, beta).map(|w| WignerSample { beta, w }))
        .collect()
}

/// CSV with header `re_beta,im_beta,W`.
pub fn write_wigner_csv<W: Write>(samples: &[WignerSample], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["re_beta", "im_beta", "W"]).map_err(csv_err)?;
    for s in samples {
        wr.write_record(&[s.beta.re.to_string(), s.beta.im.to_string(), s.w.to_string()])
            .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_wigner_csv<R: std::io::Read>(input: R) -> Result<Vec<WignerSample>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["re_beta", "im_beta", "W"] {
        return Err(Error::Parse(format!("unexpected wigner header {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 3 {
            return Err(Error::Parse(format!("wigner row with {} fields", rec.len())));
        }
        let mut v = [0.0; 3];
        for (slot, field) in v.iter_mut().zip(rec.iter()) {
            *slot = field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("`{field}`: {e}")))?;
            if !slot.is_finite() {
                return Err(Error::Parse(format!("non-finite value `{field}`")));
            }
        }
        out.push(WignerSample {
            beta: C64::new(v[0], v[1]),
            w: v[2],
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::binomial_code;
    use std::f64::consts::PI;

    #[test]
    fn trivial_elements() {
        assert!((wigner_element(0, 0, C64::new(0.0, 0.0)) - 1.0).norm() < 1e-15);
        assert!((wigner_element(1, 1, C64::new(0.0, 0.0)) + 1.0).norm() < 1e-15);
        let b = C64::new(0.7, -0.4);
        assert!((wigner_element(0, 0, b).re - (-2.0 * b.norm_sqr()).exp()).abs() < 1e-14);
    }

    #[test]
    fn closed_form_matches_oracle_sampled() {
        let betas = [C64::new(0.3, 0.2), C64::new(-1.1, 0.9), C64::new(1.7, -1.8)];
        for &b in &betas {
            for (m, n) in [(0, 0), (3, 1), (2, 7), (14, 14), (9, 13)] {
                let d = (wigner_element(m, n, b) - wigner_element_oracle(m, n, b).unwrap()).norm();
                assert!(d < 1e-9, "m={m} n={n} beta={b} d={d}");
            }
        }
    }

    #[test]
    fn vacuum_is_gaussian() {
        let mut rho = CMatrix::zeros(8, 8);
        rho[(0, 0)] = C64::new(1.0, 0.0);
        let grid = WignerGrid::square(2.0, 9).unwrap();
        for s in wigner_function(&rho, &grid).unwrap() {
            let expect = FRAC_2_PI * (-2.0 * s.beta.norm_sqr()).exp();
            assert!((s.w - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn binomial_zero_is_even_and_normalized() {
        let code = binomial_code();
        let c0 = code.codeword(0, 8).unwrap();
        let rho = &c0 * c0.adjoint();
        let w0 = wigner_at(&rho, C64::new(0.0, 0.0)).unwrap();
        assert!((w0 - FRAC_2_PI).abs() < 1e-12);
        let grid = WignerGrid::square(4.0, 81).unwrap();
        let samples = wigner_function(&rho, &grid).unwrap();
        let integral: f64 = samples.iter().map(|s| s.w).sum::<f64>() * grid.cell_area();
        assert!((integral - 1.0).abs() < 0.01, "{integral}");
        assert!(samples.iter().all(|s| s.w.abs() <= 2.0 / PI + 1e-12));
    }

    #[test]
    fn csv_round_trip() {
        let samples = vec![
            WignerSample {
                beta: C64::new(0.5, -0.25),
                w: 0.123456789,
            },
            WignerSample {
                beta: C64::new(-1.0, 2.0),
                w: -0.3,
            },
        ];
        let mut buf = Vec::new();
        write_wigner_csv(&samples, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("re_beta,im_beta,W\n"));
        assert_eq!(read_wigner_csv(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn huge_beta_is_rejected() {
        let rho = CMatrix::identity(3, 3) / C64::new(3.0, 0.0);
        assert!(matches!(
            wigner_at(&rho, C64::new(20.0, 0.0)),
            Err(Error::TruncationRisk { .. })
        ));
    }
}
