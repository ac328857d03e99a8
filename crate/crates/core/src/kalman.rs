//! Adaptive estimation for the Gaussian special case.
//!
//! Two filter modes share one recursion skeleton:
//!
//! * [`FilterMode::Dual`] — two interleaved Kalman updates per accident year.
//!   The calendar block is filtered first (innovation offset by the previous
//!   filtered gamma), then the gamma block (offset by the fresh calendar
//!   posterior). Cross-block covariance is not tracked, so this is an
//!   approximation; it is cheap and mirrors how the two blocks would be
//!   maintained by separate teams.
//! * [`FilterMode::Joint`] — one Kalman update on the stacked state
//!   `(gamma_i, psi)`. For the linear Gaussian model this is exact: posteriors
//!   coincide with dense joint-Gaussian conditioning and the innovation
//!   decomposition gives the exact log-likelihood. The MLE uses this mode.
//!
//! The calendar block is static once the filter is running; a small
//! "artificial" diagonal is added to its predicted covariance each step so the
//! estimates can keep moving (configurable, relative to the prior scale).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::rng::{scope, stream};
use crate::state_space::{evolve_calendar, hoerl_row, ModelParams};
use crate::triangle::TrianglePanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Dual,
    Joint,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KalmanConfig {
    pub mode: FilterMode,
    /// Artificial calendar dynamic as a fraction of the mean initial psi
    /// variance; added to the psi prediction covariance each step.
    pub artificial_noise_rel: f64,
    /// Use the Joseph-form covariance update (numerically safer, slower).
    pub joseph: bool,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { mode: FilterMode::Dual, artificial_noise_rel: 1e-6, joseph: false }
    }
}

/// How the initial calendar-block moments are obtained.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiInit {
    /// Closed-form random-walk moments.
    Exact,
    /// Sample mean/covariance over simulated calendar paths.
    Simulate { paths: usize, seed: u64 },
}

/// Initial moments for both blocks; the psi prior is derived from the model
/// parameters and the initial calendar law.
#[derive(Debug, Clone)]
pub struct KalmanInitSpec {
    pub gamma_mean: Vec<Vec<f64>>,
    /// Per-line gamma covariance blocks (lines are independent a priori).
    pub gamma_cov: Vec<DMatrix<f64>>,
    pub h1_mean: Vec<f64>,
    pub h1_var: Vec<f64>,
    pub psi: PsiInit,
}

impl KalmanInitSpec {
    pub fn build(&self, dim: usize, params: &ModelParams) -> Result<KalmanInit> {
        let n_lines = params.n_lines();
        let k = params.gamma_dim();
        if self.gamma_mean.len() != n_lines || self.gamma_cov.len() != n_lines {
            return Err(Error::InvalidParameter("gamma prior has wrong line count".into()));
        }
        let mut gamma_mean = DVector::zeros(n_lines * k);
        let mut gamma_cov = DMatrix::zeros(n_lines * k, n_lines * k);
        for n in 0..n_lines {
            if self.gamma_mean[n].len() != k || self.gamma_cov[n].shape() != (k, k) {
                return Err(Error::InvalidParameter(format!(
                    "gamma prior block {} has wrong dimension",
                    n + 1
                )));
            }
            for a in 0..k {
                gamma_mean[n * k + a] = self.gamma_mean[n][a];
                for b in 0..k {
                    gamma_cov[(n * k + a, n * k + b)] = self.gamma_cov[n][(a, b)];
                }
            }
        }
        if Cholesky::new(gamma_cov.clone() + DMatrix::identity(n_lines * k, n_lines * k) * 1e-9)
            .is_none()
        {
            return Err(Error::Singular("supplied gamma prior covariance is not PSD".into()));
        }
        let (psi_mean, psi_cov) = match self.psi {
            PsiInit::Exact => crate::state_space::psi_prior_moments(
                dim,
                params,
                &self.h1_mean,
                &self.h1_var,
            ),
            PsiInit::Simulate { paths, seed } => {
                simulate_psi_moments(dim, params, &self.h1_mean, &self.h1_var, paths, seed)
            }
        };
        Ok(KalmanInit { gamma_mean, gamma_cov, psi_mean, psi_cov })
    }
}

/// Stacked initial moments.
#[derive(Debug, Clone)]
pub struct KalmanInit {
    pub gamma_mean: DVector<f64>,
    pub gamma_cov: DMatrix<f64>,
    pub psi_mean: DVector<f64>,
    pub psi_cov: DMatrix<f64>,
}

fn simulate_psi_moments(
    dim: usize,
    params: &ModelParams,
    h1_mean: &[f64],
    h1_var: &[f64],
    paths: usize,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n_lines = params.n_lines();
    let d = n_lines * dim;
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for path_idx in 0..paths {
        let mut rng = stream(seed, &[scope::KALMAN_INIT, path_idx as u64]);
        let mut h: Vec<f64> = h1_mean
            .iter()
            .zip(h1_var)
            .map(|(m, v)| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                m + v.sqrt() * z
            })
            .collect();
        let mut path = DVector::zeros(d);
        for n in 0..n_lines {
            path[n * dim] = h[n];
        }
        for t in 1..dim {
            let (next, _) = evolve_calendar(&h, params, &mut rng);
            h = next;
            for n in 0..n_lines {
                path[n * dim + t] = h[n];
            }
        }
        mean += &path;
        second += &path * path.transpose();
    }
    let pf = paths as f64;
    mean /= pf;
    let cov = second / pf - &mean * mean.transpose();
    (mean, cov)
}

/// Filtered estimates after absorbing accident row `i`.
#[derive(Debug, Clone)]
pub struct StepEstimate {
    pub i: usize,
    /// Observed cell count in this row across lines.
    pub d: usize,
    pub gamma_mean: DVector<f64>,
    pub gamma_cov: DMatrix<f64>,
    pub psi_mean: DVector<f64>,
    pub psi_cov: DMatrix<f64>,
    /// Joint posterior covariance of `(gamma, psi)`; tracked in joint mode.
    pub joint_cov: Option<DMatrix<f64>>,
    /// Prior innovation and its covariance (the likelihood decomposition).
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct KalmanRun {
    pub mode: FilterMode,
    pub steps: Vec<StepEstimate>,
    pub log_likelihood: f64,
}

/// Stacked measurement structure of one accident row, observed cells only.
pub(crate) struct RowDesign {
    pub a: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
}

pub(crate) fn row_design(panel: &TrianglePanel, params: &ModelParams, i: usize) -> RowDesign {
    let dim = panel.dim;
    let n_lines = panel.n_lines();
    let k = params.gamma_dim();
    let extended = params.extended();
    let mut cells = Vec::new();
    for n in 0..n_lines {
        for (j, _) in panel.observed_row(n, i) {
            cells.push((n, j));
        }
    }
    let rows = cells.len();
    let mut a = DMatrix::zeros(rows, n_lines * k);
    let mut e = DMatrix::zeros(rows, n_lines * dim);
    let mut h = DMatrix::zeros(rows, rows);
    let mut y = DVector::zeros(rows);
    for (r, &(n, j)) in cells.iter().enumerate() {
        for (c, v) in hoerl_row(j, extended).into_iter().enumerate() {
            a[(r, n * k + c)] = v;
        }
        e[(r, n * dim + i + j - 2)] = 1.0;
        h[(r, r)] = params.lines[n].phi;
        y[r] = panel.cell(n, i, j).unwrap();
    }
    RowDesign { a, e, h, y }
}

/// Solve `F x = b` for a symmetric PD `F`, escalating a diagonal jitter from
/// `1e-12` to `1e-8` of the mean diagonal before giving up.
fn solve_spd(f: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let scale = (f.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        let candidate = if jitter == 0.0 {
            f.clone()
        } else {
            f + DMatrix::identity(n, n) * (jitter * scale)
        };
        if let Some(chol) = Cholesky::new(candidate) {
            return Ok(chol.solve(b));
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
        if jitter > 1e-8 {
            return Err(Error::Singular(
                "innovation covariance is singular beyond jitter escalation".into(),
            ));
        }
    }
}

fn log_det_spd(f: &DMatrix<f64>) -> Result<f64> {
    Cholesky::new(f.clone())
        .map(|c| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
        .ok_or_else(|| Error::Singular("innovation covariance is not PD".into()))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One conditional-Gaussian measurement update: condition `x ~ N(mean, cov)`
/// on `y = offset + C x + noise`, `noise ~ N(0, H)`.
///
/// Returns the posterior mean and covariance. The Joseph form
/// `(I - GC) P (I - GC)' + G H G'` costs more but cannot lose PSD-ness.
pub fn gaussian_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    c: &DMatrix<f64>,
    offset: &DVector<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    joseph: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y.is_empty() {
        return Ok((mean.clone(), cov.clone()));
    }
    let f = c * cov * c.transpose() + h;
    // gain G = P C' F^-1 via F G' = C P
    let gain = solve_spd(&f, &(c * cov))?.transpose();
    let innovation = y - offset - c * mean;
    let post_mean = mean + &gain * innovation;
    let mut post_cov = if joseph {
        let ikc = DMatrix::identity(mean.len(), mean.len()) - &gain * c;
        &ikc * cov * ikc.transpose() + &gain * h * gain.transpose()
    } else {
        cov - &gain * c * cov
    };
    symmetrize(&mut post_cov);
    Ok((post_mean, post_cov))
}

/// Time update of one block: the mean carries over, the covariance grows by
/// the process noise.
pub fn predict_block(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    (mean.clone(), cov + q)
}

/// Run the filter over every accident row of a Gaussian panel.
pub fn run(
    panel: &TrianglePanel,
    params: &ModelParams,
    init: &KalmanInit,
    config: &KalmanConfig,
) -> Result<KalmanRun> {
    params.validate()?;
    let dim = panel.dim;
    let n_lines = panel.n_lines();
    if params.n_lines() != n_lines {
        return Err(Error::InvalidParameter("parameter/panel line count mismatch".into()));
    }
    let k = params.gamma_dim();
    let psi_dim = n_lines * dim;
    let gamma_dim = n_lines * k;

    let mut q_gamma = DMatrix::zeros(gamma_dim, gamma_dim);
    for (n, line) in params.lines.iter().enumerate() {
        for (c, v) in line.gamma_variances().into_iter().enumerate() {
            q_gamma[(n * k + c, n * k + c)] = v;
        }
    }
    let psi_scale = init.psi_cov.diagonal().sum() / psi_dim as f64;
    let q_art = config.artificial_noise_rel * psi_scale.max(0.0);

    let mut steps = Vec::with_capacity(dim);
    let mut loglik = 0.0;

    match config.mode {
        FilterMode::Dual => {
            let mut psi_mean = init.psi_mean.clone();
            let mut psi_cov = init.psi_cov.clone();
            let mut gamma_mean = init.gamma_mean.clone();
            let mut gamma_cov = init.gamma_cov.clone();
            // the calendar innovation at step i uses the previous filtered gamma
            let mut gamma_post_prev = init.gamma_mean.clone();
            for i in 1..=dim {
                let design = row_design(panel, params, i);
                let d = design.y.len();

                // innovation decomposition on the block priors
                let innovation =
                    &design.y - &design.a * &gamma_mean - &design.e * &psi_mean;
                let innovation_cov = &design.a * &gamma_cov * design.a.transpose()
                    + &design.e * &psi_cov * design.e.transpose()
                    + &design.h;
                if d > 0 {
                    let solve = solve_spd(
                        &innovation_cov,
                        &DMatrix::from_column_slice(d, 1, innovation.as_slice()),
                    )?;
                    let quad = (innovation.transpose() * solve)[(0, 0)];
                    loglik += -0.5
                        * (d as f64 * (2.0 * std::f64::consts::PI).ln()
                            + log_det_spd(&innovation_cov)?
                            + quad);
                }

                // calendar update with the gamma contribution fixed at the
                // previous filtered estimate
                let offset_h = &design.a * &gamma_post_prev;
                let (psi_post, psi_post_cov) = gaussian_update(
                    &psi_mean,
                    &psi_cov,
                    &design.e,
                    &offset_h,
                    &design.h,
                    &design.y,
                    config.joseph,
                )?;
                // gamma update with the fresh calendar posterior
                let offset_g = &design.e * &psi_post;
                let (gamma_post, gamma_post_cov) = gaussian_update(
                    &gamma_mean,
                    &gamma_cov,
                    &design.a,
                    &offset_g,
                    &design.h,
                    &design.y,
                    config.joseph,
                )?;

                steps.push(StepEstimate {
                    i,
                    d,
                    gamma_mean: gamma_post.clone(),
                    gamma_cov: gamma_post_cov.clone(),
                    psi_mean: psi_post.clone(),
                    psi_cov: psi_post_cov.clone(),
                    joint_cov: None,
                    innovation,
                    innovation_cov,
                });

                // time updates
                let q_art_mat = DMatrix::identity(psi_dim, psi_dim) * q_art;
                (psi_mean, psi_cov) = predict_block(&psi_post, &psi_post_cov, &q_art_mat);
                gamma_post_prev = gamma_post.clone();
                (gamma_mean, gamma_cov) =
                    predict_block(&gamma_post, &gamma_post_cov, &q_gamma);
            }
        }
        FilterMode::Joint => {
            let full = gamma_dim + psi_dim;
            let mut x = DVector::zeros(full);
            x.rows_mut(0, gamma_dim).copy_from(&init.gamma_mean);
            x.rows_mut(gamma_dim, psi_dim).copy_from(&init.psi_mean);
            let mut p = DMatrix::zeros(full, full);
            p.view_mut((0, 0), (gamma_dim, gamma_dim)).copy_from(&init.gamma_cov);
            p.view_mut((gamma_dim, gamma_dim), (psi_dim, psi_dim))
                .copy_from(&init.psi_cov);
            for i in 1..=dim {
                let design = row_design(panel, params, i);
                let d = design.y.len();
                let mut c = DMatrix::zeros(d, full);
                c.view_mut((0, 0), (d, gamma_dim)).copy_from(&design.a);
                c.view_mut((0, gamma_dim), (d, psi_dim)).copy_from(&design.e);

                let innovation = &design.y - &c * &x;
                let innovation_cov = &c * &p * c.transpose() + &design.h;
                if d > 0 {
                    let solve = solve_spd(
                        &innovation_cov,
                        &DMatrix::from_column_slice(d, 1, innovation.as_slice()),
                    )?;
                    let quad = (innovation.transpose() * solve)[(0, 0)];
                    loglik += -0.5
                        * (d as f64 * (2.0 * std::f64::consts::PI).ln()
                            + log_det_spd(&innovation_cov)?
                            + quad);
                }

                let zeros = DVector::zeros(d);
                let (x_post, p_post) = gaussian_update(
                    &x,
                    &p,
                    &c,
                    &zeros,
                    &design.h,
                    &design.y,
                    config.joseph,
                )?;

                steps.push(StepEstimate {
                    i,
                    d,
                    gamma_mean: x_post.rows(0, gamma_dim).into_owned(),
                    gamma_cov: p_post.view((0, 0), (gamma_dim, gamma_dim)).into_owned(),
                    psi_mean: x_post.rows(gamma_dim, psi_dim).into_owned(),
                    psi_cov: p_post
                        .view((gamma_dim, gamma_dim), (psi_dim, psi_dim))
                        .into_owned(),
                    joint_cov: Some(p_post.clone()),
                    innovation,
                    innovation_cov,
                });

                x = x_post;
                p = p_post;
                for a in 0..gamma_dim {
                    p[(a, a)] += q_gamma[(a, a)];
                }
                for idx in gamma_dim..full {
                    p[(idx, idx)] += q_art;
                }
            }
        }
    }

    Ok(KalmanRun { mode: config.mode, steps, log_likelihood: loglik })
}

/// Exact (joint-mode) or block-approximate (dual-mode) Gaussian
/// log-likelihood via the innovation decomposition.
pub fn log_likelihood(
    panel: &TrianglePanel,
    params: &ModelParams,
    init_spec: &KalmanInitSpec,
    config: &KalmanConfig,
) -> Result<f64> {
    let init = init_spec.build(panel.dim, params)?;
    Ok(run(panel, params, &init, config)?.log_likelihood)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_evals: usize,
    /// Optimize the common-shock loadings (identifiable only with N >= 2).
    pub fit_lambda: bool,
    /// Optimize the shared common-shock variance.
    pub fit_common_shock: bool,
}

impl MleOptions {
    pub fn for_lines(n_lines: usize) -> Self {
        Self { max_evals: 4_000, fit_lambda: n_lines > 1, fit_common_shock: n_lines > 1 }
    }
}

#[derive(Debug, Clone)]
pub struct MleReport {
    pub params: ModelParams,
    pub log_likelihood: f64,
    pub evaluations: usize,
    pub converged: bool,
}

fn pack(params: &ModelParams, opts: &MleOptions) -> Vec<f64> {
    let mut x = Vec::new();
    for line in &params.lines {
        x.push(line.sigma2_a.max(1e-12).ln());
        x.push(line.sigma2_r.max(1e-12).ln());
        x.push(line.sigma2_s.max(1e-12).ln());
        if let (Some(b1), Some(b2)) = (line.sigma2_b1, line.sigma2_b2) {
            x.push(b1.max(1e-12).ln());
            x.push(b2.max(1e-12).ln());
        }
        x.push(line.sigma2_h.max(1e-12).ln());
        x.push(line.phi.max(1e-12).ln());
        if opts.fit_lambda {
            x.push(line.lambda);
        }
    }
    if opts.fit_common_shock {
        x.push(params.sigma2_h_tilde.max(1e-12).ln());
    }
    x
}

fn unpack(x: &[f64], template: &ModelParams, opts: &MleOptions) -> ModelParams {
    let mut params = template.clone();
    let mut idx = 0;
    let next = |idx: &mut usize| {
        let v = x[*idx];
        *idx += 1;
        v
    };
    for line in &mut params.lines {
        line.sigma2_a = next(&mut idx).exp();
        line.sigma2_r = next(&mut idx).exp();
        line.sigma2_s = next(&mut idx).exp();
        if line.sigma2_b1.is_some() {
            line.sigma2_b1 = Some(next(&mut idx).exp());
            line.sigma2_b2 = Some(next(&mut idx).exp());
        }
        line.sigma2_h = next(&mut idx).exp();
        line.phi = next(&mut idx).exp();
        if opts.fit_lambda {
            line.lambda = next(&mut idx);
        }
    }
    if opts.fit_common_shock {
        params.sigma2_h_tilde = next(&mut idx).exp();
    }
    params
}

/// Numerical maximum likelihood over the variance parameters (log scale) and
/// optionally the common-shock loadings.
///
/// Non-convergence within the budget returns the best point found, flagged.
pub fn fit_mle(
    panel: &TrianglePanel,
    start: &ModelParams,
    init_spec: &KalmanInitSpec,
    config: &KalmanConfig,
    opts: &MleOptions,
) -> Result<MleReport> {
    start.validate()?;
    let x0 = pack(start, opts);
    let objective = |x: &[f64]| -> f64 {
        let candidate = unpack(x, start, opts);
        match log_likelihood(panel, &candidate, init_spec, config) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    };
    let solver = NelderMead {
        max_iter: opts.max_evals,
        f_tol: 1e-9,
        x_tol: 1e-7,
        step: 0.5,
    };
    let result = solver.minimize(objective, &x0);
    let params = unpack(&result.x, start, opts);
    let start_ll = log_likelihood(panel, start, init_spec, config)?;
    let final_ll = -result.f;
    // monotone acceptance: never return something worse than the start
    if final_ll < start_ll {
        return Ok(MleReport {
            params: start.clone(),
            log_likelihood: start_ll,
            evaluations: result.evaluations,
            converged: false,
        });
    }
    Ok(MleReport {
        params,
        log_likelihood: final_ll,
        evaluations: result.evaluations,
        converged: result.converged,
    })
}
