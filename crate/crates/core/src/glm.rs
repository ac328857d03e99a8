//! Static Tweedie GLM fits (IRLS / Fisher scoring) with a log link.
//!
//! Used two ways: as the exploratory per-line analysis (fixed accident-year
//! intercepts with a shared development pattern, optionally the two
//! first-development indicators or a cross-classified chain-ladder structure)
//! and as the initialization hand-off for the adaptive filters.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::triangle::{calendar_index, TrianglePanel};

/// Fixed-factor mean structures for the exploratory fit. All use a log link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanStructure {
    /// Per-accident-year intercepts `a_i` with shared `r log(j) + s j`.
    Hoerl,
    /// [`Hoerl`](Self::Hoerl) plus the `j = 1` and `j = 2` indicators.
    HoerlExtended,
    /// Cross-classified `a_i + d_j` with `d_1 = 0`.
    ChainLadderCrossClassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedCell {
    pub i: usize,
    pub j: usize,
    pub y: f64,
    pub mu: f64,
}

impl FittedCell {
    /// `(y - mu) / sqrt(mu^p)`.
    pub fn pearson(&self, p: f64) -> f64 {
        (self.y - self.mu) / self.mu.powf(p).sqrt()
    }
}

/// A converged IRLS fit for one line.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub structure: MeanStructure,
    pub p: f64,
    /// Coefficients in design order (see [`coefficient_names`]).
    pub coefficients: Vec<f64>,
    /// Estimated coefficient covariance, `phi_hat * (X' W X)^-1`.
    pub covariance: DMatrix<f64>,
    pub cells: Vec<FittedCell>,
    /// Pearson estimate of the dispersion.
    pub dispersion: f64,
    pub deviance: f64,
    pub iterations: usize,
}

impl GlmFit {
    /// Per-cell Pearson residuals in cell order.
    pub fn pearson_residuals(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.pearson(self.p)).collect()
    }

    /// Calendar-year aggregate residuals `(sum y - sum mu) / sum mu`, indexed
    /// by `t = 1 ..= T` (`None` where a year has no observed cells).
    pub fn calendar_residuals(&self, dim: usize) -> Vec<Option<f64>> {
        let mut obs = vec![0.0; dim];
        let mut fit = vec![0.0; dim];
        let mut seen = vec![false; dim];
        for c in &self.cells {
            let t = calendar_index(c.i, c.j);
            if t <= dim {
                obs[t - 1] += c.y;
                fit[t - 1] += c.mu;
                seen[t - 1] = true;
            }
        }
        (0..dim)
            .map(|t| seen[t].then(|| (obs[t] - fit[t]) / fit[t]))
            .collect()
    }
}

/// Coefficient labels for `structure` on a dimension-`dim` triangle.
pub fn coefficient_names(structure: MeanStructure, dim: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=dim).map(|i| format!("a_{i}")).collect();
    match structure {
        MeanStructure::Hoerl => {
            names.push("r".into());
            names.push("s".into());
        }
        MeanStructure::HoerlExtended => {
            names.push("r".into());
            names.push("s".into());
            names.push("b1".into());
            names.push("b2".into());
        }
        MeanStructure::ChainLadderCrossClassified => {
            names.extend((2..=dim).map(|j| format!("d_{j}")));
        }
    }
    names
}

fn design_row(structure: MeanStructure, dim: usize, i: usize, j: usize) -> Vec<f64> {
    let mut row = vec![0.0; coefficient_count(structure, dim)];
    row[i - 1] = 1.0;
    match structure {
        MeanStructure::Hoerl => {
            row[dim] = (j as f64).ln();
            row[dim + 1] = j as f64;
        }
        MeanStructure::HoerlExtended => {
            row[dim] = (j as f64).ln();
            row[dim + 1] = j as f64;
            if j == 1 {
                row[dim + 2] = 1.0;
            }
            if j == 2 {
                row[dim + 3] = 1.0;
            }
        }
        MeanStructure::ChainLadderCrossClassified => {
            if j >= 2 {
                row[dim + j - 2] = 1.0;
            }
        }
    }
    row
}

fn coefficient_count(structure: MeanStructure, dim: usize) -> usize {
    match structure {
        MeanStructure::Hoerl => dim + 2,
        MeanStructure::HoerlExtended => dim + 4,
        MeanStructure::ChainLadderCrossClassified => 2 * dim - 1,
    }
}

/// Tweedie unit deviance summed over cells.
fn deviance(y: &[f64], mu: &[f64], p: f64) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            if p == 0.0 {
                (y - m).powi(2)
            } else if p == 1.0 {
                let ylog = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
                2.0 * (ylog - (y - m))
            } else if p == 2.0 {
                2.0 * ((y - m) / m - (y / m).ln())
            } else {
                let t1 = if y > 0.0 {
                    y.powf(2.0 - p) / ((1.0 - p) * (2.0 - p))
                } else {
                    0.0
                };
                2.0 * (t1 - y * m.powf(1.0 - p) / (1.0 - p) + m.powf(2.0 - p) / (2.0 - p))
            }
        })
        .sum()
}

/// IRLS on an arbitrary design matrix with log link and variance `mu^p`.
///
/// Converges when the quasi-score `X' (y - mu) mu^(1-p)` is below `1e-8`
/// (relative to the data scale) or the step stalls; step-halving guards
/// against deviance increases.
pub fn fit_irls_design(
    x: &DMatrix<f64>,
    y: &[f64],
    p: f64,
    structure: MeanStructure,
    cells: Vec<(usize, usize)>,
) -> Result<GlmFit> {
    let n_obs = x.nrows();
    let n_par = x.ncols();
    if n_obs < n_par {
        return Err(Error::InvalidData(format!(
            "{n_obs} observations for {n_par} coefficients"
        )));
    }
    if y.len() != n_obs || cells.len() != n_obs {
        return Err(Error::InvalidData("design/observation length mismatch".into()));
    }

    // mu = y with a small positive guard on nonpositive cells
    let positives: Vec<f64> = y.iter().copied().filter(|v| *v > 0.0).collect();
    if positives.is_empty() {
        return Err(Error::InvalidData("no positive observations to anchor the log link".into()));
    }
    let guard = 0.1 * positives.iter().sum::<f64>() / positives.len() as f64;
    let mut mu: Vec<f64> = y.iter().map(|&v| if v > 0.0 { v } else { guard }).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let mut dev = deviance(y, &mu, p);
    let mut beta = DVector::zeros(n_par);
    let mut have_beta = false;

    // Absolute score tolerance with a floor at the cancellation noise of the
    // score sums themselves, so huge raw-currency panels still converge.
    let score_scale: f64 = (0..n_par)
        .map(|c| {
            (0..n_obs)
                .map(|r| (x[(r, c)] * y[r]).abs() * mu[r].powf(1.0 - p))
                .sum::<f64>()
        })
        .fold(0.0f64, f64::max);
    let score_tol = (64.0 * f64::EPSILON * score_scale).max(1e-8);

    let mut iterations = 0usize;
    let mut stalls = 0usize;
    loop {
        iterations += 1;
        if iterations > 200 {
            return Err(Error::NonConvergence(format!(
                "IRLS did not converge in 200 iterations (deviance {dev:.6e})"
            )));
        }
        // working weights mu^(2-p), working response eta + (y - mu)/mu
        let mut xtwx = DMatrix::zeros(n_par, n_par);
        let mut xtwz = DVector::zeros(n_par);
        for r in 0..n_obs {
            let w = mu[r].powf(2.0 - p);
            let z = eta[r] + (y[r] - mu[r]) / mu[r];
            for a in 0..n_par {
                let xa = x[(r, a)];
                if xa == 0.0 {
                    continue;
                }
                xtwz[a] += w * z * xa;
                for b in a..n_par {
                    xtwx[(a, b)] += w * xa * x[(r, b)];
                }
            }
        }
        for a in 0..n_par {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = Cholesky::new(xtwx.clone())
            .ok_or_else(|| Error::Singular("information matrix X'WX is not PD".into()))?;
        let beta_new = chol.solve(&xtwz);

        // step-halving on deviance increase
        let mut step = 1.0;
        let (mut eta_new, mut mu_new, mut dev_new);
        loop {
            let candidate: DVector<f64> = if have_beta {
                &beta + (&beta_new - &beta) * step
            } else {
                beta_new.clone()
            };
            eta_new = (x * &candidate).iter().copied().collect::<Vec<f64>>();
            mu_new = eta_new.iter().map(|e| e.exp()).collect::<Vec<f64>>();
            dev_new = deviance(y, &mu_new, p);
            if dev_new.is_finite() && (dev_new <= dev * (1.0 + 1e-12) + 1e-12 || step < 1e-6) {
                beta = candidate;
                break;
            }
            step *= 0.5;
        }
        have_beta = true;
        if (dev - dev_new).abs() <= 1e-15 * (1.0 + dev.abs()) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        eta = eta_new;
        mu = mu_new;
        dev = dev_new;

        let score_ok = (0..n_par).all(|c| {
            let s: f64 =
                (0..n_obs).map(|r| x[(r, c)] * (y[r] - mu[r]) * mu[r].powf(1.0 - p)).sum();
            s.abs() <= score_tol
        });
        if score_ok {
            break;
        }
        if stalls >= 10 {
            return Err(Error::NonConvergence(
                "IRLS stalled above the score tolerance".into(),
            ));
        }
    }

    // Pearson dispersion and coefficient covariance at convergence.
    let dof = (n_obs - n_par).max(1) as f64;
    let pearson_sq: f64 = y
        .iter()
        .zip(&mu)
        .map(|(&y, &m)| (y - m).powi(2) / m.powf(p))
        .sum();
    let dispersion = pearson_sq / dof;
    let mut xtwx = DMatrix::zeros(n_par, n_par);
    for r in 0..n_obs {
        let w = mu[r].powf(2.0 - p);
        for a in 0..n_par {
            for b in 0..n_par {
                xtwx[(a, b)] += w * x[(r, a)] * x[(r, b)];
            }
        }
    }
    let covariance = Cholesky::new(xtwx)
        .ok_or_else(|| Error::Singular("information matrix X'WX is not PD".into()))?
        .inverse()
        * dispersion;

    let fitted = cells
        .iter()
        .zip(y.iter().zip(&mu))
        .map(|(&(i, j), (&y, &mu))| FittedCell { i, j, y, mu })
        .collect();
    Ok(GlmFit {
        structure,
        p,
        coefficients: beta.iter().copied().collect(),
        covariance,
        cells: fitted,
        dispersion,
        deviance: dev,
        iterations,
    })
}

/// Fit `structure` to the observed cells of line `n` at fixed power `p`.
pub fn fit_irls(
    panel: &TrianglePanel,
    n: usize,
    structure: MeanStructure,
    p: f64,
) -> Result<GlmFit> {
    let observed = panel.observed_cells(n);
    let dim = panel.dim;
    let n_par = coefficient_count(structure, dim);
    let x = DMatrix::from_fn(observed.len(), n_par, |r, c| {
        let (i, j, _) = observed[r];
        design_row(structure, dim, i, j)[c]
    });
    let y: Vec<f64> = observed.iter().map(|&(_, _, v)| v).collect();
    let cells: Vec<(usize, usize)> = observed.iter().map(|&(i, j, _)| (i, j)).collect();
    fit_irls_design(&x, &y, p, structure, cells)
}

/// Profile `p` over a grid, scoring each fit by its Tweedie log-likelihood at
/// the Pearson plug-in dispersion. A convenience for exploratory work.
pub fn fit_irls_profile(
    panel: &TrianglePanel,
    n: usize,
    structure: MeanStructure,
    grid: &[f64],
) -> Result<(GlmFit, f64)> {
    let mut best: Option<(GlmFit, f64, f64)> = None;
    for &p in grid {
        let fit = match fit_irls(panel, n, structure, p) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let spec = crate::tweedie::TweedieSpec::new(p, fit.dispersion)?;
        let loglik: f64 = fit
            .cells
            .iter()
            .map(|c| spec.log_pdf(c.y, c.mu).unwrap_or(f64::NEG_INFINITY))
            .sum();
        if best.as_ref().map(|(_, _, l)| loglik > *l).unwrap_or(true) {
            best = Some((fit, p, loglik));
        }
    }
    best.map(|(fit, p, _)| (fit, p))
        .ok_or_else(|| Error::NonConvergence("no grid point produced a convergent fit".into()))
}

/// Prior moments for the filters' first accident-year block, taken from a
/// static fit: mean `(a_1, r, s[, b1, b2])`, covariance = the matching IRLS
/// block inflated by `scale`.
#[derive(Debug, Clone)]
pub struct FilterHandoff {
    pub gamma_mean: Vec<f64>,
    pub gamma_cov: DMatrix<f64>,
}

pub fn filter_handoff(fit: &GlmFit, dim: usize, scale: f64) -> Result<FilterHandoff> {
    let idx: Vec<usize> = match fit.structure {
        MeanStructure::Hoerl => vec![0, dim, dim + 1],
        MeanStructure::HoerlExtended => vec![0, dim, dim + 1, dim + 2, dim + 3],
        MeanStructure::ChainLadderCrossClassified => {
            return Err(Error::InvalidParameter(
                "chain-ladder fits do not map onto the Hoerl factor block".into(),
            ))
        }
    };
    let gamma_mean = idx.iter().map(|&k| fit.coefficients[k]).collect();
    let mut gamma_cov = DMatrix::zeros(idx.len(), idx.len());
    for (a, &ka) in idx.iter().enumerate() {
        for (b, &kb) in idx.iter().enumerate() {
            gamma_cov[(a, b)] = fit.covariance[(ka, kb)] * scale;
        }
    }
    Ok(FilterHandoff { gamma_mean, gamma_cov })
}
