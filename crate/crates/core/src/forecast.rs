//! Outstanding-claims forecasting and risk-margin arithmetic.
//!
//! A reserve draw replays one posterior sample (a particle chosen by final
//! weight, or a Gaussian posterior draw for the Kalman path), pushes the
//! calendar levels forward through their random walk with fresh common
//! shocks, and draws every future cell from the observation family. Future
//! cells are those with calendar year `t > I`. Per-draw additivity is exact
//! by construction: accident-year pieces sum to line totals, line totals to
//! the aggregate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::KalmanRun;
use crate::particle::PfRun;
use crate::rng::{scope, stream};
use crate::state_space::{evolve_calendar, ModelParams, ObservationFamily};
use crate::triangle::{calendar_index, TrianglePanel};

/// Joint simulated outstanding-claims samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReserveDistribution {
    pub draws: usize,
    pub n_lines: usize,
    pub dim: usize,
    /// `by_line_ay[n][i-1][d]`: outstanding claims of accident year `i`.
    pub by_line_ay: Vec<Vec<Vec<f64>>>,
    /// `line_totals[n][d]` = sum over accident years, per draw.
    pub line_totals: Vec<Vec<f64>>,
    /// `aggregate[d]` = sum over lines, per draw.
    pub aggregate: Vec<f64>,
    pub seed: u64,
}

impl ReserveDistribution {
    fn from_draws(by_line_ay: Vec<Vec<Vec<f64>>>, seed: u64) -> Self {
        let n_lines = by_line_ay.len();
        let dim = by_line_ay[0].len();
        let draws = by_line_ay[0][0].len();
        let mut line_totals = vec![vec![0.0; draws]; n_lines];
        let mut aggregate = vec![0.0; draws];
        for n in 0..n_lines {
            for ay in 0..dim {
                for d in 0..draws {
                    line_totals[n][d] += by_line_ay[n][ay][d];
                }
            }
            for d in 0..draws {
                aggregate[d] += line_totals[n][d];
            }
        }
        Self { draws, n_lines, dim, by_line_ay, line_totals, aggregate, seed }
    }
}

/// Future-cell coordinates per line: everything past the latest diagonal.
fn future_cells(dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 2..=dim {
        for j in 1..=dim {
            if calendar_index(i, j) > dim {
                out.push((i, j));
            }
        }
    }
    out
}

fn eta_for(gamma: &[f64], j: usize, h: f64) -> f64 {
    let mut eta = gamma[0] + gamma[1] * (j as f64).ln() + gamma[2] * j as f64;
    if gamma.len() == 5 {
        if j == 1 {
            eta += gamma[3];
        }
        if j == 2 {
            eta += gamma[4];
        }
    }
    eta + h
}

/// One draw's cell simulation given factors and parameters.
fn draw_future_cells<R: Rng + ?Sized>(
    gamma_rows: &dyn Fn(usize, usize) -> Vec<f64>,
    h_in_triangle: &dyn Fn(usize) -> f64,
    params: &ModelParams,
    family: ObservationFamily,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let n_lines = params.n_lines();
    // push calendar levels through t = I+1 .. 2I-1 with fresh shared shocks
    let mut h_future: Vec<Vec<f64>> = vec![Vec::new(); n_lines];
    let mut current: Vec<f64> = (0..n_lines).map(|n| h_in_triangle(n)).collect();
    for _ in (dim + 1)..=(2 * dim - 1) {
        let (next, _) = evolve_calendar(&current, params, rng);
        for (n, v) in next.iter().enumerate() {
            h_future[n].push(*v);
        }
        current = next;
    }
    let cells = future_cells(dim);
    let mut out = vec![vec![0.0; dim]; n_lines];
    for n in 0..n_lines {
        for &(i, j) in &cells {
            let t = calendar_index(i, j);
            let h = h_future[n][t - dim - 1];
            let gamma = gamma_rows(n, i);
            let eta = eta_for(&gamma, j, h);
            let y = family.sample_cell(eta, params.lines[n].phi, params.lines[n].p, rng)?;
            out[n][i - 1] += y;
        }
    }
    Ok(out)
}

/// Posterior-predictive reserves from a particle-filter fit: particles are
/// picked proportionally to the final weights; each particle's own filtered
/// gamma path supplies every accident year's block.
pub fn forecast_pf(
    run: &PfRun,
    panel: &TrianglePanel,
    draws: usize,
    seed: u64,
) -> Result<ReserveDistribution> {
    if draws < 1 {
        return Err(Error::InvalidParameter("draw count must be >= 1".into()));
    }
    if !run.config.track_paths {
        return Err(Error::InvalidParameter(
            "forecasting needs gamma paths; rerun the filter with track_paths".into(),
        ));
    }
    let dim = panel.dim;
    let n_lines = panel.n_lines();
    let layout = run.cloud.layout;
    let k = layout.gamma_dim();
    let weights = run.cloud.normalized_weights()?;
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cum.push(acc);
    }

    let samples: Vec<Vec<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, &[scope::FORECAST, d as u64]);
            let u: f64 = rng.random_range(0.0..1.0);
            let idx = cum.partition_point(|c| *c < u).min(weights.len() - 1);
            let particle = &run.cloud.particles[idx];
            let params = layout.to_params(&particle.theta);
            let gamma_rows = |n: usize, i: usize| -> Vec<f64> {
                let base = (i - 1) * n_lines * k + n * k;
                particle.gamma_path[base..base + k].to_vec()
            };
            let h_last = |n: usize| particle.psi[n * dim + dim - 1];
            draw_future_cells(&gamma_rows, &h_last, &params, run.config.family, dim, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_line_ay = vec![vec![vec![0.0; draws]; dim]; n_lines];
    for (d, sample) in samples.iter().enumerate() {
        for n in 0..n_lines {
            for ay in 0..dim {
                by_line_ay[n][ay][d] = sample[n][ay];
            }
        }
    }
    Ok(ReserveDistribution::from_draws(by_line_ay, seed))
}

/// Posterior-predictive reserves from a Kalman fit: each accident year's
/// gamma block is drawn from its own filtered posterior (rows are filtered
/// once and never revisited), the calendar block from the final posterior,
/// parameters held at the supplied point.
pub fn forecast_kalman(
    run: &KalmanRun,
    params: &ModelParams,
    panel: &TrianglePanel,
    draws: usize,
    seed: u64,
) -> Result<ReserveDistribution> {
    if draws < 1 {
        return Err(Error::InvalidParameter("draw count must be >= 1".into()));
    }
    let dim = panel.dim;
    let n_lines = panel.n_lines();
    let k = params.gamma_dim();
    if run.steps.len() != dim {
        return Err(Error::InvalidParameter("filter output does not span the panel".into()));
    }
    // per-step Cholesky factors for gamma, final factor for psi
    let gamma_factors: Vec<(DVector<f64>, DMatrix<f64>)> = run
        .steps
        .iter()
        .map(|s| (s.gamma_mean.clone(), psd_factor(&s.gamma_cov)))
        .collect();
    let last = run.steps.last().unwrap();
    let psi_factor = (last.psi_mean.clone(), psd_factor(&last.psi_cov));

    let samples: Vec<Vec<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = stream(seed, &[scope::FORECAST, d as u64]);
            let mut gamma_draws: Vec<Vec<f64>> = Vec::with_capacity(dim);
            for (mean, factor) in &gamma_factors {
                gamma_draws.push(mvn_draw(mean, factor, &mut rng));
            }
            let psi = mvn_draw(&psi_factor.0, &psi_factor.1, &mut rng);
            let gamma_rows = |n: usize, i: usize| -> Vec<f64> {
                gamma_draws[i - 1][n * k..(n + 1) * k].to_vec()
            };
            let h_last = |n: usize| psi[n * dim + dim - 1];
            draw_future_cells(&gamma_rows, &h_last, params, ObservationFamily::Gaussian, dim, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_line_ay = vec![vec![vec![0.0; draws]; dim]; n_lines];
    for (d, sample) in samples.iter().enumerate() {
        for n in 0..n_lines {
            for ay in 0..dim {
                by_line_ay[n][ay][d] = sample[n][ay];
            }
        }
    }
    Ok(ReserveDistribution::from_draws(by_line_ay, seed))
}

fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let scale = cov.diagonal().sum() / d as f64;
    if scale <= 0.0 {
        return DMatrix::zeros(d, d);
    }
    if let Some(chol) = nalgebra::Cholesky::new(cov + DMatrix::identity(d, d) * (1e-12 * scale))
    {
        return chol.l();
    }
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let mut scaled = eig.eigenvectors.clone();
    for (c, l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for r in 0..d {
            scaled[(r, c)] *= s;
        }
    }
    scaled
}

fn mvn_draw<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let d = mean.len();
    let z = DVector::from_fn(d, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    (mean + factor * z).iter().copied().collect()
}

/// Empirical value-at-risk: the order statistic at rank `ceil(chi * S)`
/// (1-based, lower-interpolation convention).
pub fn var_quantile(samples: &[f64], chi: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidData("empty sample set".into()));
    }
    if !(0.0 < chi && chi < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {chi} not in (0, 1)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (chi * samples.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(samples.len()) - 1])
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `max(VaR - mean, SD / 2)` from already-computed statistics.
pub fn risk_margin_from_stats(mean: f64, sd: f64, var: f64) -> f64 {
    (var - mean).max(0.5 * sd)
}

/// Risk margin of a sample set at level `chi`.
pub fn risk_margin(samples: &[f64], chi: f64) -> Result<f64> {
    let (mean, sd) = mean_sd(samples);
    Ok(risk_margin_from_stats(mean, sd, var_quantile(samples, chi)?))
}

/// Relative reduction of the aggregate margin versus the sum of line
/// margins, in percent.
pub fn diversification_benefit(line_margins: &[f64], aggregate_margin: f64) -> Result<f64> {
    let total: f64 = line_margins.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidData("line margins sum to zero".into()));
    }
    Ok((total - aggregate_margin) / total * 100.0)
}

/// Table 2/3-shaped summary plus a gridded kernel density per line and for
/// the aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReserveSummary {
    /// One row per line plus "aggregate": (label, mean, sd, VaR per level).
    pub totals: Vec<SummaryRow>,
    /// Per accident year: (line label, year, mean, sd).
    pub by_ay: Vec<AySummaryRow>,
    pub densities: Vec<DensityCurve>,
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AySummaryRow {
    pub label: String,
    pub year: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityCurve {
    pub label: String,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Gaussian kernel density with Silverman's bandwidth; export-only.
pub fn kernel_density(samples: &[f64], points: usize) -> DensityCurve {
    let (_, sd) = mean_sd(samples);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    let q1 = sorted[(0.25 * (n - 1) as f64).round() as usize];
    let q3 = sorted[(0.75 * (n - 1) as f64).round() as usize];
    let iqr = q3 - q1;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * (n as f64).powf(-0.2)).max(f64::MIN_POSITIVE);
    let lo = sorted[0] - 3.0 * h;
    let hi = sorted[n - 1] + 3.0 * h;
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density: Vec<f64> = grid
        .par_iter()
        .map(|&x| {
            norm * sorted
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    DensityCurve { label: String::new(), grid, density }
}

pub fn summarize(
    dist: &ReserveDistribution,
    levels: &[f64],
    line_labels: &[String],
) -> Result<ReserveSummary> {
    if line_labels.len() != dist.n_lines {
        return Err(Error::InvalidParameter("label count mismatch".into()));
    }
    let mut totals = Vec::new();
    let mut densities = Vec::new();
    for n in 0..dist.n_lines {
        let (mean, sd) = mean_sd(&dist.line_totals[n]);
        let var = levels
            .iter()
            .map(|&chi| var_quantile(&dist.line_totals[n], chi))
            .collect::<Result<Vec<_>>>()?;
        totals.push(SummaryRow { label: line_labels[n].clone(), mean, sd, var });
        let mut curve = kernel_density(&dist.line_totals[n], 512);
        curve.label = line_labels[n].clone();
        densities.push(curve);
    }
    let (mean, sd) = mean_sd(&dist.aggregate);
    let var = levels
        .iter()
        .map(|&chi| var_quantile(&dist.aggregate, chi))
        .collect::<Result<Vec<_>>>()?;
    totals.push(SummaryRow { label: "aggregate".into(), mean, sd, var });
    let mut curve = kernel_density(&dist.aggregate, 512);
    curve.label = "aggregate".into();
    densities.push(curve);

    let mut by_ay = Vec::new();
    for n in 0..dist.n_lines {
        for ay in 0..dist.dim {
            let samples = &dist.by_line_ay[n][ay];
            if samples.iter().all(|v| *v == 0.0) {
                continue;
            }
            let (mean, sd) = mean_sd(samples);
            by_ay.push(AySummaryRow {
                label: line_labels[n].clone(),
                year: ay + 1,
                mean,
                sd,
            });
        }
    }
    // aggregate per accident year
    for ay in 0..dist.dim {
        let mut agg = vec![0.0; dist.draws];
        for n in 0..dist.n_lines {
            for d in 0..dist.draws {
                agg[d] += dist.by_line_ay[n][ay][d];
            }
        }
        if agg.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (mean, sd) = mean_sd(&agg);
        by_ay.push(AySummaryRow { label: "aggregate".into(), year: ay + 1, mean, sd });
    }
    Ok(ReserveSummary { totals, by_ay, densities, levels: levels.to_vec() })
}
