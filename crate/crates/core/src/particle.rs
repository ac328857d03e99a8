//! Particle filter with parameter learning.
//!
//! Joint on-line estimation of the evolving accident-year blocks, the
//! calendar levels, and the static parameters. Accident years are the filter
//! time; calendar levels are present in full from the first row onward, so
//! they are treated like parameters: kernel-shrunk toward the cloud mean and
//! rejuvenated, never propagated by a random walk across filter steps.
//!
//! One filter iteration (rows `i = 2 ..= I`):
//!
//! 1. shrink parameters and calendar levels toward the cloud mean with
//!    coefficient `xi`; project the gamma block by its random-walk mean
//!    (identity);
//! 2. accumulate look-ahead weights `w_(i-1) * f(Y_i | projected)` and
//!    normalize;
//! 3. resample systematically on the normalized weights (resampling sits
//!    before the evaluation step, auxiliary-filter style);
//! 4. rejuvenate parameters and calendar levels from a Gaussian kernel with
//!    covariance `(1 - xi^2) * Cov[previous cloud]`, and draw the gamma block
//!    from its random-walk transition;
//! 5. reset raw weights to the ratio `f(Y_i | filtered) / f(Y_i | projected)`.
//!
//! Parameters live in a transformed space (log variances and dispersion,
//! logit power onto (1, 2), raw loadings) so that Gaussian rejuvenation
//! cannot leave the valid region. Every random draw comes from a stream keyed
//! by `(seed, scope, step, particle)`; results do not depend on thread
//! scheduling.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{scope, stream};
use crate::state_space::{FactorState, LineParams, ModelParams, ObservationFamily};
use crate::triangle::TrianglePanel;

/// Marginal prior for one scalar component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Dist {
    Point { value: f64 },
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Dist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Point { value } => value,
            Dist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Dist::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            Dist::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

/// Per-line parameter priors (natural scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePrior {
    pub sigma2_a: Dist,
    pub sigma2_r: Dist,
    pub sigma2_s: Dist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b1: Option<Dist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b2: Option<Dist>,
    pub sigma2_h: Dist,
    pub lambda: Dist,
    pub phi: Dist,
    pub p: Dist,
}

/// Full prior: parameters, the first accident-year block, and the initial
/// calendar level per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub lines: Vec<LinePrior>,
    pub sigma2_h_tilde: Dist,
    /// Mean of the first gamma block, per line.
    pub gamma1_mean: Vec<Vec<f64>>,
    /// Covariance of the first gamma block, per line (row-major).
    pub gamma1_cov: Vec<Vec<Vec<f64>>>,
    /// Initial calendar level law, per line.
    pub h1: Vec<Dist>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    /// Cloud size M.
    pub particles: usize,
    /// Liu-West shrinkage coefficient.
    pub xi: f64,
    pub seed: u64,
    pub family: ObservationFamily,
    /// Keep each particle's full gamma history (needed for forecasting).
    pub track_paths: bool,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            particles: 10_000,
            xi: 0.98,
            seed: 0,
            family: ObservationFamily::Tweedie,
            track_paths: true,
        }
    }
}

/// Transformed-parameter layout: per line `[log variances.., log sigma2_h,
/// lambda, log phi, logit(p-1)]`, then the shared `log sigma2_h_tilde`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub n_lines: usize,
    pub extended: bool,
    pub family: ObservationFamily,
}

/// Variances this small are treated as exact zeros on the natural scale, so
/// point-mass priors at zero behave exactly (no phantom jitter).
const VAR_FLOOR: f64 = 1e-13;

fn from_log(z: f64) -> f64 {
    let v = z.exp();
    if v < VAR_FLOOR {
        0.0
    } else {
        v
    }
}

fn to_log(v: f64) -> f64 {
    v.max(VAR_FLOOR * 0.1).ln()
}

impl ThetaLayout {
    pub fn new(n_lines: usize, extended: bool, family: ObservationFamily) -> Self {
        Self { n_lines, extended, family }
    }

    pub fn gamma_dim(&self) -> usize {
        if self.extended {
            5
        } else {
            3
        }
    }

    /// Transformed slots per line: gamma variances + sigma2_h + lambda + phi + p.
    pub fn per_line(&self) -> usize {
        self.gamma_dim() + 4
    }

    pub fn dim(&self) -> usize {
        self.n_lines * self.per_line() + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for n in 1..=self.n_lines {
            names.push(format!("sigma2_a[{n}]"));
            names.push(format!("sigma2_r[{n}]"));
            names.push(format!("sigma2_s[{n}]"));
            if self.extended {
                names.push(format!("sigma2_b1[{n}]"));
                names.push(format!("sigma2_b2[{n}]"));
            }
            names.push(format!("sigma2_h[{n}]"));
            names.push(format!("lambda[{n}]"));
            names.push(format!("phi[{n}]"));
            names.push(format!("p[{n}]"));
        }
        names.push("sigma2_h_tilde".into());
        names
    }

    fn lambda_slot(&self, n: usize) -> usize {
        n * self.per_line() + self.gamma_dim() + 1
    }

    pub fn phi(&self, theta: &[f64], n: usize) -> f64 {
        from_log(theta[n * self.per_line() + self.gamma_dim() + 2]).max(VAR_FLOOR)
    }

    pub fn p(&self, theta: &[f64], n: usize) -> f64 {
        match self.family {
            ObservationFamily::Gaussian => 0.0,
            ObservationFamily::Tweedie => {
                let z = theta[n * self.per_line() + self.gamma_dim() + 3];
                1.0 + 1.0 / (1.0 + (-z).exp())
            }
        }
    }

    pub fn gamma_variances(&self, theta: &[f64], n: usize) -> Vec<f64> {
        (0..self.gamma_dim())
            .map(|c| from_log(theta[n * self.per_line() + c]))
            .collect()
    }

    pub fn sigma2_h(&self, theta: &[f64], n: usize) -> f64 {
        from_log(theta[n * self.per_line() + self.gamma_dim()])
    }

    pub fn lambda(&self, theta: &[f64], n: usize) -> f64 {
        theta[self.lambda_slot(n)]
    }

    pub fn sigma2_h_tilde(&self, theta: &[f64]) -> f64 {
        from_log(theta[self.dim() - 1])
    }

    /// Natural-scale value of slot `k` (for reporting).
    pub fn natural(&self, theta: &[f64], k: usize) -> f64 {
        let per = self.per_line();
        if k == self.dim() - 1 {
            return from_log(theta[k]);
        }
        let within = k % per;
        let g = self.gamma_dim();
        if within < g || within == g {
            from_log(theta[k])
        } else if within == g + 1 {
            theta[k]
        } else if within == g + 2 {
            from_log(theta[k])
        } else {
            self.p(theta, k / per)
        }
    }

    /// Assemble natural-scale parameters from a transformed vector.
    pub fn to_params(&self, theta: &[f64]) -> ModelParams {
        let lines = (0..self.n_lines)
            .map(|n| {
                let vars = self.gamma_variances(theta, n);
                LineParams {
                    sigma2_a: vars[0],
                    sigma2_r: vars[1],
                    sigma2_s: vars[2],
                    sigma2_b1: self.extended.then(|| vars[3]),
                    sigma2_b2: self.extended.then(|| vars[4]),
                    sigma2_h: self.sigma2_h(theta, n),
                    lambda: self.lambda(theta, n),
                    phi: self.phi(theta, n),
                    p: self.p(theta, n),
                }
            })
            .collect();
        ModelParams { lines, sigma2_h_tilde: self.sigma2_h_tilde(theta) }
    }

    /// Transform a sampled natural-scale draw; `None` when the draw is
    /// outside the admissible region.
    fn encode_line(&self, prior: &LinePrior, rng: &mut impl Rng, out: &mut Vec<f64>) -> bool {
        let mut vars = vec![
            prior.sigma2_a.sample(rng),
            prior.sigma2_r.sample(rng),
            prior.sigma2_s.sample(rng),
        ];
        if self.extended {
            match (&prior.sigma2_b1, &prior.sigma2_b2) {
                (Some(b1), Some(b2)) => {
                    vars.push(b1.sample(rng));
                    vars.push(b2.sample(rng));
                }
                _ => return false,
            }
        }
        let sigma2_h = prior.sigma2_h.sample(rng);
        let lambda = prior.lambda.sample(rng);
        let phi = prior.phi.sample(rng);
        let p = prior.p.sample(rng);
        if vars.iter().any(|v| *v < 0.0) || sigma2_h < 0.0 || !(phi > 0.0) {
            return false;
        }
        match self.family {
            ObservationFamily::Gaussian => {
                if p != 0.0 {
                    return false;
                }
            }
            ObservationFamily::Tweedie => {
                if !(p > 1.0 && p < 2.0) {
                    return false;
                }
            }
        }
        for v in vars {
            out.push(to_log(v));
        }
        out.push(to_log(sigma2_h));
        out.push(lambda);
        out.push(to_log(phi));
        out.push(match self.family {
            ObservationFamily::Gaussian => 0.0,
            ObservationFamily::Tweedie => ((p - 1.0) / (2.0 - p)).ln(),
        });
        true
    }
}

/// One weighted sample of `(gamma block, calendar levels, parameters)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Particle {
    /// Current gamma block, stacked over lines (`N * k`).
    pub gamma: Vec<f64>,
    /// Filtered gamma history, one stacked block per absorbed row.
    pub gamma_path: Vec<f64>,
    /// All calendar levels, stacked over lines (`N * I`).
    pub psi: Vec<f64>,
    /// Transformed parameter vector.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub particles: Vec<Particle>,
    /// Raw weights, log scale.
    pub log_omega: Vec<f64>,
    /// Last absorbed accident row.
    pub step: usize,
    pub layout: ThetaLayout,
    pub dim: usize,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Normalized weights of the current raw weights.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize(&self.log_omega)
    }
}

/// Weighted posterior summary of one scalar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub name: String,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Per-step filter output.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub i: usize,
    /// ESS of the weights used for resampling at this step.
    pub ess: f64,
    pub degeneracy_warning: bool,
    /// Look-ahead likelihoods that vanished for resampled ancestors.
    pub zero_lookahead: usize,
    /// Posterior-mean factors (for tracking and forecasting diagnostics).
    pub mean_state: FactorState,
    pub factors: Vec<PosteriorSummary>,
    pub params: Vec<PosteriorSummary>,
}

#[derive(Debug, Clone)]
pub struct PfRun {
    pub config: PfConfig,
    pub records: Vec<StepRecord>,
    pub cloud: ParticleCloud,
}

/// Effective sample size `1 / sum W^2` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Normalize raw log-weights with log-sum-exp.
pub fn normalize(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate("all importance weights vanished".into()));
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Systematic resampling: expected copy count of particle `m` is `M * W_m`.
pub fn resample_systematic<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    let u0: f64 = rng.random_range(0.0..1.0);
    let mut indices = Vec::with_capacity(m);
    let mut cum = 0.0;
    let mut k = 0usize;
    for step in 0..m {
        let target = (step as f64 + u0) / m as f64;
        while cum + weights[k] < target && k + 1 < weights.len() {
            cum += weights[k];
            k += 1;
        }
        indices.push(k);
    }
    indices
}

/// Row observations flattened once per step: `(line, j, y)`.
fn row_cells(panel: &TrianglePanel, i: usize) -> Vec<(usize, usize, f64)> {
    let mut cells = Vec::new();
    for n in 0..panel.n_lines() {
        for (j, y) in panel.observed_row(n, i) {
            cells.push((n, j, y));
        }
    }
    cells
}

/// Log-likelihood of one accident row for one particle's factors and
/// parameters; masked cells contribute zero, invalid densities sink the
/// particle.
fn row_log_lik(
    cells: &[(usize, usize, f64)],
    i: usize,
    dim: usize,
    layout: &ThetaLayout,
    gamma: &[f64],
    psi: &[f64],
    theta: &[f64],
    family: ObservationFamily,
) -> f64 {
    let k = layout.gamma_dim();
    let mut total = 0.0;
    for &(n, j, y) in cells {
        let g = &gamma[n * k..(n + 1) * k];
        let mut eta = g[0] + g[1] * (j as f64).ln() + g[2] * j as f64;
        if k == 5 {
            if j == 1 {
                eta += g[3];
            }
            if j == 2 {
                eta += g[4];
            }
        }
        eta += psi[n * dim + i + j - 2];
        match family.cell_log_pdf(y, eta, layout.phi(theta, n), layout.p(theta, n)) {
            Ok(l) => total += l,
            Err(_) => return f64::NEG_INFINITY,
        }
    }
    total
}

fn draw_mvn_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    // jitter is relative so exactly-degenerate directions stay exactly quiet
    let scale = cov.diagonal().sum() / d as f64;
    if scale <= 0.0 {
        return DMatrix::zeros(d, d);
    }
    let jittered = cov + DMatrix::identity(d, d) * (1e-10 * scale);
    if let Some(chol) = Cholesky::new(jittered.clone()) {
        return chol.l();
    }
    // PSD projection: floor eigenvalues at zero
    let eig = nalgebra::SymmetricEigen::new(jittered);
    let mut scaled = eig.eigenvectors.clone();
    for (c, l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        for r in 0..d {
            scaled[(r, c)] *= s;
        }
    }
    scaled
}

/// Draw the first cloud: parameters from their priors, calendar levels by
/// simulating the calendar recursion under each particle's parameters, the
/// first gamma block from its prior, weights from the first row's likelihood.
pub fn initialize(
    panel: &TrianglePanel,
    prior: &PriorSpec,
    config: &PfConfig,
) -> Result<ParticleCloud> {
    let n_lines = panel.n_lines();
    let dim = panel.dim;
    if prior.lines.len() != n_lines
        || prior.gamma1_mean.len() != n_lines
        || prior.gamma1_cov.len() != n_lines
        || prior.h1.len() != n_lines
    {
        return Err(Error::InvalidParameter("prior line count mismatch".into()));
    }
    if config.particles < 1 {
        return Err(Error::InvalidParameter("particle count must be >= 1".into()));
    }
    let extended = prior.lines[0].sigma2_b1.is_some();
    let layout = ThetaLayout::new(n_lines, extended, config.family);
    let k = layout.gamma_dim();

    // gamma prior Cholesky factors, one per line
    let mut gamma_factors = Vec::with_capacity(n_lines);
    for n in 0..n_lines {
        let cov = &prior.gamma1_cov[n];
        if prior.gamma1_mean[n].len() != k || cov.len() != k || cov.iter().any(|r| r.len() != k)
        {
            return Err(Error::InvalidParameter(format!(
                "gamma1 prior block {} has wrong dimension (expected {k})",
                n + 1
            )));
        }
        let m = DMatrix::from_fn(k, k, |r, c| cov[r][c]);
        gamma_factors.push(draw_mvn_factor(&m));
    }

    let cells1 = row_cells(panel, 1);
    let particles: Vec<(Particle, f64)> = (0..config.particles)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream(config.seed, &[scope::PF_INIT, m as u64]);
            // parameters, retried while the draw is invalid
            let mut theta = Vec::with_capacity(layout.dim());
            let mut attempts = 0;
            loop {
                theta.clear();
                let mut ok = true;
                for prior_line in &prior.lines {
                    if !layout.encode_line(prior_line, &mut rng, &mut theta) {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    let shared = prior.sigma2_h_tilde.sample(&mut rng);
                    if shared >= 0.0 {
                        theta.push(to_log(shared));
                        break;
                    }
                }
                attempts += 1;
                if attempts > 100 {
                    return Err(Error::InvalidParameter(
                        "prior rejected 100 consecutive draws".into(),
                    ));
                }
            }
            let params = layout.to_params(&theta);

            // calendar levels simulated forward from the initial law
            let mut h: Vec<f64> = prior.h1.iter().map(|d| d.sample(&mut rng)).collect();
            let mut psi = vec![0.0; n_lines * dim];
            for n in 0..n_lines {
                psi[n * dim] = h[n];
            }
            for t in 1..dim {
                let (next, _) = crate::state_space::evolve_calendar(&h, &params, &mut rng);
                h = next;
                for n in 0..n_lines {
                    psi[n * dim + t] = h[n];
                }
            }

            // first gamma block
            let mut gamma = vec![0.0; n_lines * k];
            for n in 0..n_lines {
                let z = DVector::from_fn(k, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                });
                let draw = &gamma_factors[n] * z;
                for c in 0..k {
                    gamma[n * k + c] = prior.gamma1_mean[n][c] + draw[c];
                }
            }

            let ll = row_log_lik(&cells1, 1, dim, &layout, &gamma, &psi, &theta, config.family);
            let gamma_path = if config.track_paths { gamma.clone() } else { Vec::new() };
            Ok((Particle { gamma, gamma_path, psi, theta }, ll))
        })
        .collect::<Result<Vec<_>>>()?;

    let (particles, log_omega): (Vec<_>, Vec<_>) = particles.into_iter().unzip();
    Ok(ParticleCloud { particles, log_omega, step: 1, layout, dim })
}

/// Shrunk look-ahead parameters and calendar levels (paper step 2); the
/// gamma projection is the identity under the random-walk mean.
pub struct Lookahead {
    pub theta: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
}

pub fn shrink_lookahead(cloud: &ParticleCloud, xi: f64) -> Lookahead {
    let m = cloud.len() as f64;
    let theta_dim = cloud.layout.dim();
    let psi_dim = cloud.particles[0].psi.len();
    let mut theta_mean = vec![0.0; theta_dim];
    let mut psi_mean = vec![0.0; psi_dim];
    for p in &cloud.particles {
        for (acc, v) in theta_mean.iter_mut().zip(&p.theta) {
            *acc += v / m;
        }
        for (acc, v) in psi_mean.iter_mut().zip(&p.psi) {
            *acc += v / m;
        }
    }
    let theta = cloud
        .particles
        .iter()
        .map(|p| {
            p.theta
                .iter()
                .zip(&theta_mean)
                .map(|(v, mean)| xi * v + (1.0 - xi) * mean)
                .collect()
        })
        .collect();
    let psi = cloud
        .particles
        .iter()
        .map(|p| {
            p.psi
                .iter()
                .zip(&psi_mean)
                .map(|(v, mean)| xi * v + (1.0 - xi) * mean)
                .collect()
        })
        .collect();
    Lookahead { theta, psi }
}

/// Look-ahead row log-likelihoods (the new-data factor of the raw weights).
pub fn lookahead_log_lik(
    cloud: &ParticleCloud,
    lookahead: &Lookahead,
    panel: &TrianglePanel,
    i: usize,
    family: ObservationFamily,
) -> Vec<f64> {
    let cells = row_cells(panel, i);
    cloud
        .particles
        .par_iter()
        .enumerate()
        .map(|(m, p)| {
            row_log_lik(
                &cells,
                i,
                cloud.dim,
                &cloud.layout,
                &p.gamma,
                &lookahead.psi[m],
                &lookahead.theta[m],
                family,
            )
        })
        .collect()
}

/// Weighted mean and covariance of a particle attribute.
fn weighted_moments<F: Fn(&Particle) -> &[f64]>(
    cloud: &ParticleCloud,
    weights: &[f64],
    get: F,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = get(&cloud.particles[0]).len();
    let mut mean = DVector::zeros(d);
    for (p, w) in cloud.particles.iter().zip(weights) {
        for (k, v) in get(p).iter().enumerate() {
            mean[k] += w * v;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (p, w) in cloud.particles.iter().zip(weights) {
        let x = get(p);
        for a in 0..d {
            let da = x[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += w * da * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    (mean, cov)
}

struct StepDiagnostics {
    ess: f64,
    zero_lookahead: usize,
}

/// Advance the cloud by one accident row (paper steps 2-6).
fn advance(
    cloud: &mut ParticleCloud,
    panel: &TrianglePanel,
    i: usize,
    config: &PfConfig,
) -> Result<StepDiagnostics> {
    let m = cloud.len();
    let xi = config.xi;

    // covariances of the PREVIOUS step's filtered cloud, weighted by its
    // normalized raw weights
    let prev_weights = cloud.normalized_weights()?;
    let (_, theta_cov) = weighted_moments(cloud, &prev_weights, |p| &p.theta);
    let (_, psi_cov) = weighted_moments(cloud, &prev_weights, |p| &p.psi);
    let noise = 1.0 - xi * xi;
    let theta_factor = draw_mvn_factor(&(theta_cov * noise));
    let psi_factor = draw_mvn_factor(&(psi_cov * noise));

    // steps 2-3: look-ahead and weights
    let lookahead = shrink_lookahead(cloud, xi);
    let ll_look = lookahead_log_lik(cloud, &lookahead, panel, i, config.family);
    let log_w: Vec<f64> = cloud
        .log_omega
        .iter()
        .zip(&ll_look)
        .map(|(prev, ll)| prev + ll)
        .collect();
    let w = normalize(&log_w).map_err(|_| {
        Error::Degenerate(format!("all look-ahead weights vanished at accident row {i}"))
    })?;
    let step_ess = ess(&w);

    // step 4: systematic resampling of the look-ahead tuples
    let mut resample_rng = stream(config.seed, &[scope::PF_RESAMPLE, i as u64]);
    let ancestors = resample_systematic(&w, m, &mut resample_rng);

    // steps 5-6: rejuvenate and re-weight
    let cells = row_cells(panel, i);
    let k = cloud.layout.gamma_dim();
    let n_lines = panel.n_lines();
    let layout = cloud.layout;
    let dim = cloud.dim;
    let theta_dim = layout.dim();
    let psi_dim = n_lines * dim;

    let rejuvenated: Vec<(Particle, f64)> = (0..m)
        .into_par_iter()
        .map(|idx| {
            let a = ancestors[idx];
            let mut rng = stream(config.seed, &[scope::PF_REJUVENATE, i as u64, idx as u64]);

            let mut theta = lookahead.theta[a].clone();
            if noise > 0.0 {
                let z = DVector::from_fn(theta_dim, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                });
                let delta = &theta_factor * z;
                for (t, d) in theta.iter_mut().zip(delta.iter()) {
                    *t += d;
                }
            }
            let mut psi = lookahead.psi[a].clone();
            if noise > 0.0 {
                let z = DVector::from_fn(psi_dim, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v
                });
                let delta = &psi_factor * z;
                for (t, d) in psi.iter_mut().zip(delta.iter()) {
                    *t += d;
                }
            }
            // gamma transition under the rejuvenated parameters
            let ancestor = &cloud.particles[a];
            let mut gamma = vec![0.0; n_lines * k];
            for n in 0..n_lines {
                let vars = layout.gamma_variances(&theta, n);
                let block = crate::state_space::evolve_gamma(
                    &ancestor.gamma[n * k..(n + 1) * k],
                    &vars,
                    &mut rng,
                );
                gamma[n * k..(n + 1) * k].copy_from_slice(&block);
            }

            let ll_filtered =
                row_log_lik(&cells, i, dim, &layout, &gamma, &psi, &theta, config.family);
            let log_ratio = if ll_look[a] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                ll_filtered - ll_look[a]
            };
            let mut gamma_path = if config.track_paths {
                ancestor.gamma_path.clone()
            } else {
                Vec::new()
            };
            if config.track_paths {
                gamma_path.extend_from_slice(&gamma);
            }
            (Particle { gamma, gamma_path, psi, theta }, log_ratio)
        })
        .collect();

    let zero_lookahead = ancestors.iter().filter(|&&a| ll_look[a] == f64::NEG_INFINITY).count();
    let (particles, log_omega): (Vec<_>, Vec<_>) = rejuvenated.into_iter().unzip();
    cloud.particles = particles;
    cloud.log_omega = log_omega;
    cloud.step = i;
    Ok(StepDiagnostics { ess: step_ess, zero_lookahead })
}

fn weighted_quantile(values: &mut [(f64, f64)], q: f64) -> f64 {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    for &(v, w) in values.iter() {
        cum += w;
        if cum >= q {
            return v;
        }
    }
    values.last().map(|&(v, _)| v).unwrap_or(f64::NAN)
}

fn summarize_step(cloud: &ParticleCloud, i: usize, diag: &StepDiagnostics, m: usize) -> Result<StepRecord> {
    let weights = cloud.normalized_weights()?;
    let layout = &cloud.layout;
    let k = layout.gamma_dim();
    let n_lines = layout.n_lines;
    let dim = cloud.dim;

    let gamma_names = if layout.extended {
        vec!["a", "r", "s", "b1", "b2"]
    } else {
        vec!["a", "r", "s"]
    };
    let mut factors = Vec::new();
    let mut mean_gamma = vec![vec![0.0; k]; n_lines];
    let mut mean_psi = vec![vec![0.0; dim]; n_lines];
    for n in 0..n_lines {
        for c in 0..k {
            let mut pairs: Vec<(f64, f64)> = cloud
                .particles
                .iter()
                .zip(&weights)
                .map(|(p, &w)| (p.gamma[n * k + c], w))
                .collect();
            let mean: f64 = pairs.iter().map(|(v, w)| v * w).sum();
            mean_gamma[n][c] = mean;
            factors.push(PosteriorSummary {
                name: format!("{}[{}]", gamma_names[c], n + 1),
                mean,
                q05: weighted_quantile(&mut pairs, 0.05),
                q95: weighted_quantile(&mut pairs, 0.95),
            });
        }
        for t in 0..dim {
            let mut pairs: Vec<(f64, f64)> = cloud
                .particles
                .iter()
                .zip(&weights)
                .map(|(p, &w)| (p.psi[n * dim + t], w))
                .collect();
            let mean: f64 = pairs.iter().map(|(v, w)| v * w).sum();
            mean_psi[n][t] = mean;
            factors.push(PosteriorSummary {
                name: format!("h_{}[{}]", t + 1, n + 1),
                mean,
                q05: weighted_quantile(&mut pairs, 0.05),
                q95: weighted_quantile(&mut pairs, 0.95),
            });
        }
    }

    let mut params = Vec::new();
    for (slot, name) in layout.names().into_iter().enumerate() {
        let mut pairs: Vec<(f64, f64)> = cloud
            .particles
            .iter()
            .zip(&weights)
            .map(|(p, &w)| (layout.natural(&p.theta, slot), w))
            .collect();
        let mean: f64 = pairs.iter().map(|(v, w)| v * w).sum();
        params.push(PosteriorSummary {
            name,
            mean,
            q05: weighted_quantile(&mut pairs, 0.05),
            q95: weighted_quantile(&mut pairs, 0.95),
        });
    }

    Ok(StepRecord {
        i,
        ess: diag.ess,
        degeneracy_warning: diag.ess < 0.1 * m as f64 || m == 1,
        zero_lookahead: diag.zero_lookahead,
        mean_state: FactorState { gamma: mean_gamma, psi: mean_psi },
        factors,
        params,
    })
}

/// Run the full filter over the panel.
pub fn run(panel: &TrianglePanel, prior: &PriorSpec, config: &PfConfig) -> Result<PfRun> {
    if (1..=panel.dim).all(|i| panel.observed_in_row(i) == 0) {
        return Err(Error::InvalidData("panel has no observed cells".into()));
    }
    if !(config.xi > 0.0 && config.xi <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "shrinkage xi = {} must lie in (0, 1]",
            config.xi
        )));
    }
    let mut cloud = initialize(panel, prior, config)?;
    let m = cloud.len();
    let w1 = cloud.normalized_weights().map_err(|_| {
        Error::Degenerate("all initial weights vanished on the first row".into())
    })?;
    let mut records = Vec::with_capacity(panel.dim);
    records.push(summarize_step(
        &cloud,
        1,
        &StepDiagnostics { ess: ess(&w1), zero_lookahead: 0 },
        m,
    )?);
    for i in 2..=panel.dim {
        let diag = advance(&mut cloud, panel, i, config)?;
        records.push(summarize_step(&cloud, i, &diag, m)?);
    }
    Ok(PfRun { config: *config, records, cloud })
}
