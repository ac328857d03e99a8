//! Mean structure, factor state, and evolution kernels.
//!
//! Cell means follow a log-linked Hoerl curve per accident year plus a
//! calendar-year level:
//!
//! ```text
//! log mu_(i,j) = a_i + r_i log(j) + s_i j [+ b_(i,1) 1{j=1} + b_(i,2) 1{j=2}] + h_(i+j-1)
//! ```
//!
//! The per-row factor block `gamma_i = (a, r, s[, b1, b2])` drifts as a random
//! walk across accident years; the calendar levels `h_t` drift across calendar
//! years with a line-specific disturbance plus a shared common shock scaled by
//! a per-line loading. This module builds the matrix form of that model (the
//! design block `A_i`, calendar selector `E_i`, noise covariances, and the
//! calendar transition pair `R_(t-1)`, `S_(t-1)`) and the simulation kernels.
//!
//! Factor ordering is fixed everywhere: `(a, r, s, b1, b2)` within a line,
//! lines in ascending order, the calendar block after all gamma blocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tweedie::TweedieSpec;

/// Distributional family of the observation component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationFamily {
    /// Tweedie cells with a log link: `Y ~ Tw(exp(eta), phi, p)`.
    Tweedie,
    /// Gaussian cells with an identity link: `Y ~ N(eta, phi)`; `phi` is read
    /// as the observation variance.
    Gaussian,
}

impl ObservationFamily {
    /// Per-cell log-density at linear predictor `eta`.
    pub fn cell_log_pdf(&self, y: f64, eta: f64, phi: f64, p: f64) -> Result<f64> {
        match self {
            Self::Tweedie => TweedieSpec::new(p, phi)?.log_pdf(y, eta.exp()),
            Self::Gaussian => TweedieSpec::gaussian(phi)?.log_pdf(y, eta),
        }
    }

    /// Draw a cell at linear predictor `eta`.
    pub fn sample_cell<R: Rng + ?Sized>(
        &self,
        eta: f64,
        phi: f64,
        p: f64,
        rng: &mut R,
    ) -> Result<f64> {
        match self {
            Self::Tweedie => TweedieSpec::new(p, phi)?.sample(eta.exp(), rng),
            Self::Gaussian => TweedieSpec::gaussian(phi)?.sample(eta, rng),
        }
    }
}

/// Static parameters of one line of business.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub sigma2_a: f64,
    pub sigma2_r: f64,
    pub sigma2_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b2: Option<f64>,
    /// Line-specific calendar disturbance variance.
    pub sigma2_h: f64,
    /// Common-shock loading.
    pub lambda: f64,
    /// Dispersion; the observation variance for Gaussian models.
    pub phi: f64,
    /// Tweedie power; 0 for Gaussian models.
    pub p: f64,
}

impl LineParams {
    /// Random-walk variances of the gamma block in factor order.
    pub fn gamma_variances(&self) -> Vec<f64> {
        let mut v = vec![self.sigma2_a, self.sigma2_r, self.sigma2_s];
        if let (Some(b1), Some(b2)) = (self.sigma2_b1, self.sigma2_b2) {
            v.push(b1);
            v.push(b2);
        }
        v
    }
}

/// The full static parameter vector: per-line blocks plus the shared
/// common-shock variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lines: Vec<LineParams>,
    pub sigma2_h_tilde: f64,
}

impl ModelParams {
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// True when the lines carry the two extra first-development covariates.
    pub fn extended(&self) -> bool {
        self.lines.first().map(|l| l.sigma2_b1.is_some()).unwrap_or(false)
    }

    /// Gamma block length per line: 3 base, 5 extended.
    pub fn gamma_dim(&self) -> usize {
        if self.extended() {
            5
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lines.is_empty() {
            return Err(Error::InvalidParameter("no lines".into()));
        }
        let extended = self.extended();
        if !(self.sigma2_h_tilde >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma2_h_tilde = {} must be >= 0",
                self.sigma2_h_tilde
            )));
        }
        for (n, line) in self.lines.iter().enumerate() {
            if line.sigma2_b1.is_some() != extended || line.sigma2_b2.is_some() != extended {
                return Err(Error::InvalidParameter(format!(
                    "line {}: extended Hoerl variances must be present on all lines or none",
                    n + 1
                )));
            }
            for (name, v) in [
                ("sigma2_a", line.sigma2_a),
                ("sigma2_r", line.sigma2_r),
                ("sigma2_s", line.sigma2_s),
                ("sigma2_b1", line.sigma2_b1.unwrap_or(0.0)),
                ("sigma2_b2", line.sigma2_b2.unwrap_or(0.0)),
                ("sigma2_h", line.sigma2_h),
            ] {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "line {}: {name} = {v} must be >= 0",
                        n + 1
                    )));
                }
            }
            if !(line.phi > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "line {}: phi = {} must be > 0",
                    n + 1,
                    line.phi
                )));
            }
        }
        Ok(())
    }
}

/// One joint realization of all random factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    /// `gamma[n]`: the current accident-year block `(a, r, s[, b1, b2])`.
    pub gamma: Vec<Vec<f64>>,
    /// `psi[n]`: all calendar levels `h_1 ... h_I`.
    pub psi: Vec<Vec<f64>>,
}

impl FactorState {
    pub fn n_lines(&self) -> usize {
        self.gamma.len()
    }

    pub fn dim(&self) -> usize {
        self.psi.first().map(Vec::len).unwrap_or(0)
    }

    pub fn extended(&self) -> bool {
        self.gamma.first().map(|g| g.len() == 5).unwrap_or(false)
    }

    /// Log-means (or Gaussian means) of accident row `i` for line `n`, entry
    /// per development year `j = 1 ..= I - i + 1`.
    pub fn linear_predictor(&self, i: usize, n: usize) -> Vec<f64> {
        let dim = self.dim();
        let g = &self.gamma[n];
        let h = &self.psi[n];
        (1..=dim - i + 1)
            .map(|j| {
                let mut eta = g[0] + g[1] * (j as f64).ln() + g[2] * j as f64;
                if g.len() == 5 {
                    if j == 1 {
                        eta += g[3];
                    }
                    if j == 2 {
                        eta += g[4];
                    }
                }
                eta + h[i + j - 2]
            })
            .collect()
    }
}

/// One row of the Hoerl design: `[1, log j, j]`, extended with the two
/// first-development indicators when requested.
pub fn hoerl_row(j: usize, extended: bool) -> Vec<f64> {
    let mut row = vec![1.0, (j as f64).ln(), j as f64];
    if extended {
        row.push(if j == 1 { 1.0 } else { 0.0 });
        row.push(if j == 2 { 1.0 } else { 0.0 });
    }
    row
}

/// Single-line design block `A_i`: one row per development year observable in
/// accident row `i`.
pub fn design_matrix_a(i: usize, dim: usize, extended: bool) -> Result<DMatrix<f64>> {
    if i < 1 || i > dim {
        return Err(Error::InvalidParameter(format!("accident index {i} out of 1..={dim}")));
    }
    let rows = dim - i + 1;
    let cols = if extended { 5 } else { 3 };
    Ok(DMatrix::from_fn(rows, cols, |r, c| hoerl_row(r + 1, extended)[c]))
}

/// Single-line calendar selector `E_i`: row `j` picks `h_(i+j-1)`.
pub fn selector_matrix_e(i: usize, dim: usize) -> Result<DMatrix<f64>> {
    if i < 1 || i > dim {
        return Err(Error::InvalidParameter(format!("accident index {i} out of 1..={dim}")));
    }
    let rows = dim - i + 1;
    let mut m = DMatrix::zeros(rows, dim);
    for r in 0..rows {
        m[(r, i - 1 + r)] = 1.0;
    }
    Ok(m)
}

/// Random-walk step of one gamma block; zero variances leave components
/// untouched.
pub fn evolve_gamma<R: Rng + ?Sized>(prev: &[f64], variances: &[f64], rng: &mut R) -> Vec<f64> {
    debug_assert_eq!(prev.len(), variances.len());
    prev.iter()
        .zip(variances)
        .map(|(x, v)| x + Normal::new(0.0, v.sqrt()).unwrap().sample(rng))
        .collect()
}

/// One calendar step `h_(t-1) -> h_t` for every line, sharing a single common
/// shock. Returns the new levels and the realized shock.
pub fn evolve_calendar<R: Rng + ?Sized>(
    prev: &[f64],
    params: &ModelParams,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    debug_assert_eq!(prev.len(), params.n_lines());
    let shock = Normal::new(0.0, params.sigma2_h_tilde.sqrt()).unwrap().sample(rng);
    let next = prev
        .iter()
        .zip(&params.lines)
        .map(|(h, line)| {
            let own = Normal::new(0.0, line.sigma2_h.sqrt()).unwrap().sample(rng);
            h + own + line.lambda * shock
        })
        .collect();
    (next, shock)
}

/// All matrices of the Gaussian state-space form for accident row `i`,
/// stacked block-diagonally over lines. `r` and `s` advance the calendar
/// block `psi_(t-1) -> psi_t` at `t = i`.
#[derive(Debug, Clone)]
pub struct GaussianSystem {
    pub a: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q_gamma: DMatrix<f64>,
    pub q_h_eps: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

/// Calendar transition matrix `R_(t-1)` stacked over `n_lines`: copies
/// `psi_(t-1)` and duplicates each line's last level into the new slot.
pub fn calendar_r(t: usize, n_lines: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_lines * t, n_lines * (t - 1));
    for n in 0..n_lines {
        let (ro, co) = (n * t, n * (t - 1));
        for k in 0..t - 1 {
            m[(ro + k, co + k)] = 1.0;
        }
        m[(ro + t - 1, co + t - 2)] = 1.0;
    }
    m
}

/// Disturbance loader `S_(t-1)` stacked over lines; the final column carries
/// the common-shock loadings.
pub fn calendar_s(t: usize, params: &ModelParams) -> DMatrix<f64> {
    let n_lines = params.n_lines();
    let mut m = DMatrix::zeros(n_lines * t, n_lines + 1);
    for (n, line) in params.lines.iter().enumerate() {
        m[(n * t + t - 1, n)] = 1.0;
        m[(n * t + t - 1, n_lines)] = line.lambda;
    }
    m
}

/// Covariance of the stacked calendar disturbance `(eps_1 .. eps_N, shock)`.
pub fn calendar_noise_cov(params: &ModelParams) -> DMatrix<f64> {
    let n = params.n_lines();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    for (k, line) in params.lines.iter().enumerate() {
        m[(k, k)] = line.sigma2_h;
    }
    m[(n, n)] = params.sigma2_h_tilde;
    m
}

pub fn build_gaussian_system(i: usize, dim: usize, params: &ModelParams) -> Result<GaussianSystem> {
    params.validate()?;
    let n_lines = params.n_lines();
    let extended = params.extended();
    let k = params.gamma_dim();
    let rows = dim - i + 1;
    let a_block = design_matrix_a(i, dim, extended)?;
    let e_block = selector_matrix_e(i, dim)?;

    let mut a = DMatrix::zeros(n_lines * rows, n_lines * k);
    let mut e = DMatrix::zeros(n_lines * rows, n_lines * dim);
    let mut h = DMatrix::zeros(n_lines * rows, n_lines * rows);
    let mut q_gamma = DMatrix::zeros(n_lines * k, n_lines * k);
    for (n, line) in params.lines.iter().enumerate() {
        a.view_mut((n * rows, n * k), (rows, k)).copy_from(&a_block);
        e.view_mut((n * rows, n * dim), (rows, dim)).copy_from(&e_block);
        for r in 0..rows {
            h[(n * rows + r, n * rows + r)] = line.phi;
        }
        for (c, v) in line.gamma_variances().into_iter().enumerate() {
            q_gamma[(n * k + c, n * k + c)] = v;
        }
    }
    let t = i.max(2);
    Ok(GaussianSystem {
        a,
        e,
        h,
        q_gamma,
        q_h_eps: calendar_noise_cov(params),
        r: calendar_r(t, n_lines),
        s: calendar_s(t, params),
    })
}

/// Exact random-walk moments of the stacked calendar block `psi_I`:
/// `Cov(h_s^(n), h_t^(m)) = Var[h_1] 1{n=m} + (min(s,t) - 1) *
/// (sigma2_h 1{n=m} + lambda_n lambda_m sigma2_h_tilde)`.
pub fn psi_prior_moments(
    dim: usize,
    params: &ModelParams,
    h1_mean: &[f64],
    h1_var: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let n_lines = params.n_lines();
    let mut mean = DVector::zeros(n_lines * dim);
    let mut cov = DMatrix::zeros(n_lines * dim, n_lines * dim);
    for n in 0..n_lines {
        for t in 0..dim {
            mean[n * dim + t] = h1_mean[n];
        }
    }
    for n in 0..n_lines {
        for m in 0..n_lines {
            for s in 1..=dim {
                for t in 1..=dim {
                    let steps = (s.min(t) - 1) as f64;
                    let mut c = steps
                        * params.lines[n].lambda
                        * params.lines[m].lambda
                        * params.sigma2_h_tilde;
                    if n == m {
                        c += h1_var[n] + steps * params.lines[n].sigma2_h;
                    }
                    cov[(n * dim + s - 1, m * dim + t - 1)] = c;
                }
            }
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_line_params() -> ModelParams {
        ModelParams {
            lines: vec![
                LineParams {
                    sigma2_a: 0.01,
                    sigma2_r: 0.005,
                    sigma2_s: 0.001,
                    sigma2_b1: None,
                    sigma2_b2: None,
                    sigma2_h: 0.005,
                    lambda: 0.6,
                    phi: 0.4,
                    p: 1.27,
                },
                LineParams {
                    sigma2_a: 0.005,
                    sigma2_r: 0.002,
                    sigma2_s: 0.0005,
                    sigma2_b1: None,
                    sigma2_b2: None,
                    sigma2_h: 0.005,
                    lambda: 0.8,
                    phi: 0.5,
                    p: 1.35,
                },
            ],
            sigma2_h_tilde: 0.005,
        }
    }

    #[test]
    fn design_matrix_rows() {
        let a = design_matrix_a(3, 3, false).unwrap();
        assert_eq!(a.nrows(), 1);
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);

        let a = design_matrix_a(1, 3, false).unwrap();
        assert_eq!(a.nrows(), 3);
        assert_eq!(a[(1, 1)], 2f64.ln());
        assert_eq!(a[(2, 2)], 3.0);

        let a = design_matrix_a(2, 3, true).unwrap();
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0, 1.0, 0.0]);
        let row1: Vec<f64> = a.row(1).iter().copied().collect();
        assert_eq!(row1, vec![1.0, 2f64.ln(), 2.0, 0.0, 1.0]);

        assert!(design_matrix_a(0, 3, false).is_err());
        assert!(design_matrix_a(4, 3, false).is_err());
    }

    #[test]
    fn selector_matrix_semantics() {
        assert_eq!(selector_matrix_e(1, 4).unwrap(), DMatrix::identity(4, 4));
        let last = selector_matrix_e(4, 4).unwrap();
        assert_eq!(last.nrows(), 1);
        assert_eq!(last[(0, 3)], 1.0);

        let e = selector_matrix_e(2, 5).unwrap();
        let idx = DVector::from_iterator(5, (1..=5).map(|v| v as f64));
        let picked = &e * idx;
        assert_eq!(picked.iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn linear_predictor_cases() {
        let zero = FactorState { gamma: vec![vec![0.0; 3]], psi: vec![vec![0.0; 4]] };
        assert_eq!(zero.linear_predictor(2, 0), vec![0.0; 3]);

        // a = 1, r = s = 0, h_t = t: entry j is 1 + (i + j - 1)
        let state = FactorState {
            gamma: vec![vec![1.0, 0.0, 0.0]],
            psi: vec![(1..=4).map(|t| t as f64).collect()],
        };
        for i in 1..=4usize {
            let eta = state.linear_predictor(i, 0);
            for (idx, v) in eta.iter().enumerate() {
                let j = idx + 1;
                assert!((v - (1.0 + (i + j - 1) as f64)).abs() < 1e-12);
            }
        }

        // filtered factors, line 1, i = 1: 6.9772 + 0 - 0.7669 + 0.45
        let state = FactorState {
            gamma: vec![vec![6.9772, 1.1637, -0.7669]],
            psi: vec![vec![0.45; 3]],
        };
        let eta = state.linear_predictor(1, 0);
        assert!((eta[0] - 6.6603).abs() < 1e-10);
    }

    #[test]
    fn predictor_matches_matrix_route() {
        let params = two_line_params();
        let dim = 6usize;
        let mut rng = stream(11, &[0]);
        for i in 1..=dim {
            let state = FactorState {
                gamma: (0..2)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                psi: (0..2)
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            };
            let sys = build_gaussian_system(i, dim, &params).unwrap();
            let gamma_vec =
                DVector::from_iterator(6, state.gamma.iter().flatten().copied());
            let psi_vec =
                DVector::from_iterator(2 * dim, state.psi.iter().flatten().copied());
            let eta_mat = &sys.a * gamma_vec + &sys.e * psi_vec;
            let rows = dim - i + 1;
            for n in 0..2 {
                let eta = state.linear_predictor(i, n);
                for (j, v) in eta.iter().enumerate() {
                    assert!((v - eta_mat[n * rows + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gamma_evolution_moments() {
        let mut rng = stream(21, &[0]);
        // zero variance is the identity
        let out = evolve_gamma(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], &mut rng);
        assert_eq!(out, vec![1.0, 2.0, 3.0]);

        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let step = evolve_gamma(&[0.0], &[1.0], &mut rng)[0];
            sum += step;
            sum_sq += step * step;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.004);
        assert!((var - 1.0).abs() < 0.01);

        // seeded reproducibility
        let a = evolve_gamma(&[0.0; 3], &[0.5; 3], &mut stream(3, &[1, 2]));
        let b = evolve_gamma(&[0.0; 3], &[0.5; 3], &mut stream(3, &[1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn calendar_evolution_common_shock() {
        let mut params = two_line_params();
        let mut rng = stream(31, &[0]);

        // all noise off
        let mut quiet = params.clone();
        for line in &mut quiet.lines {
            line.sigma2_h = 0.0;
        }
        quiet.sigma2_h_tilde = 0.0;
        let (next, _) = evolve_calendar(&[0.3, -0.2], &quiet, &mut rng);
        assert_eq!(next, vec![0.3, -0.2]);

        // pure common shock with unit loadings moves both lines identically
        let mut pure = quiet.clone();
        pure.sigma2_h_tilde = 0.01;
        pure.lines[0].lambda = 1.0;
        pure.lines[1].lambda = 1.0;
        let (next, shock) = evolve_calendar(&[0.0, 0.0], &pure, &mut rng);
        assert_eq!(next[0], next[1]);
        assert_eq!(next[0], shock);

        // increment correlation across lines matches the closed form
        params.lines[0].sigma2_h = 0.004;
        params.lines[1].sigma2_h = 0.002;
        let n = 100_000usize;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let (next, _) = evolve_calendar(&[0.0, 0.0], &params, &mut rng);
            sx += next[0];
            sy += next[1];
            sxx += next[0] * next[0];
            syy += next[1] * next[1];
            sxy += next[0] * next[1];
        }
        let nf = n as f64;
        let corr = (sxy / nf - sx * sy / nf / nf)
            / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
        let l1 = params.lines[0].lambda;
        let l2 = params.lines[1].lambda;
        let st = params.sigma2_h_tilde;
        let expect = l1 * l2 * st
            / ((params.lines[0].sigma2_h + l1 * l1 * st)
                * (params.lines[1].sigma2_h + l2 * l2 * st))
                .sqrt();
        assert!((corr - expect).abs() < 3.0 / nf.sqrt() * (1.0 - expect * expect).max(0.5));

        // lambda = 0 decouples the lines
        let mut decoupled = params.clone();
        decoupled.lines[0].lambda = 0.0;
        decoupled.lines[1].lambda = 0.0;
        let (mut sxy, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (next, _) = evolve_calendar(&[0.0, 0.0], &decoupled, &mut rng);
            sxy += next[0] * next[1];
            sx += next[0];
            sy += next[1];
        }
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let bound = 4.0
            * (decoupled.lines[0].sigma2_h * decoupled.lines[1].sigma2_h / nf).sqrt();
        assert!(cov.abs() < bound);
    }

    #[test]
    fn smallest_system_shapes() {
        let mut params = two_line_params();
        params.lines.truncate(1);
        let sys = build_gaussian_system(1, 1, &params).unwrap();
        assert_eq!(sys.a.shape(), (1, 3));
        assert_eq!(sys.e.shape(), (1, 1));
        assert_eq!(sys.h.shape(), (1, 1));
        assert_eq!(sys.h[(0, 0)], params.lines[0].phi);
    }

    #[test]
    fn common_shock_cross_covariance_in_s() {
        let params = two_line_params();
        let t = 2usize;
        let s = calendar_s(t, &params);
        let q = calendar_noise_cov(&params);
        let cov = &s * q * s.transpose();
        // rows of h_t^(1) and h_t^(2) are t-1 and 2t-1
        let off = cov[(t - 1, 2 * t - 1)];
        let expect =
            params.lines[0].lambda * params.lines[1].lambda * params.sigma2_h_tilde;
        assert!((off - expect).abs() < 1e-15);
        let diag = cov[(t - 1, t - 1)];
        let expect_diag =
            params.lines[0].sigma2_h + params.lines[0].lambda.powi(2) * params.sigma2_h_tilde;
        assert!((diag - expect_diag).abs() < 1e-15);
    }

    #[test]
    fn calendar_r_appends_last_level() {
        let r = calendar_r(3, 2);
        let psi_prev = DVector::from_vec(vec![0.1, 0.2, 1.1, 1.2]);
        let psi = &r * psi_prev;
        assert_eq!(
            psi.iter().copied().collect::<Vec<_>>(),
            vec![0.1, 0.2, 0.2, 1.1, 1.2, 1.2]
        );
    }

    #[test]
    fn psi_prior_moments_match_simulation() {
        let params = two_line_params();
        let dim = 4usize;
        let (mean, cov) = psi_prior_moments(dim, &params, &[0.5, 0.5], &[0.0, 0.0]);
        assert!(mean.iter().all(|m| (m - 0.5).abs() < 1e-15));

        let n = 200_000usize;
        let mut rng = stream(41, &[7]);
        let mut acc_mean = DVector::zeros(2 * dim);
        let mut acc_cov = DMatrix::zeros(2 * dim, 2 * dim);
        for _ in 0..n {
            let mut h = vec![0.5, 0.5];
            let mut path = DVector::zeros(2 * dim);
            path[0] = h[0];
            path[dim] = h[1];
            for t in 1..dim {
                let (next, _) = evolve_calendar(&h, &params, &mut rng);
                h = next;
                path[t] = h[0];
                path[dim + t] = h[1];
            }
            acc_mean += &path;
            acc_cov += &path * path.transpose();
        }
        let nf = n as f64;
        acc_mean /= nf;
        acc_cov = acc_cov / nf - &acc_mean * acc_mean.transpose();
        for a in 0..2 * dim {
            for b in 0..2 * dim {
                let se = 3.0 * ((cov[(a, a)] * cov[(b, b)] + cov[(a, b)].powi(2)) / nf).sqrt();
                assert!(
                    (acc_cov[(a, b)] - cov[(a, b)]).abs() < se.max(1e-4),
                    "cov[{a},{b}] sim {} vs exact {}",
                    acc_cov[(a, b)],
                    cov[(a, b)]
                );
            }
        }
    }

    #[test]
    fn zero_variances_freeze_paths() {
        let mut params = two_line_params();
        for line in &mut params.lines {
            line.sigma2_a = 0.0;
            line.sigma2_r = 0.0;
            line.sigma2_s = 0.0;
            line.sigma2_h = 0.0;
        }
        params.sigma2_h_tilde = 0.0;
        let mut rng = stream(55, &[0]);
        let mut gamma = vec![1.0, -0.5, 0.25];
        let mut h = vec![0.5, 0.4];
        for _ in 0..10 {
            gamma = evolve_gamma(&gamma, &params.lines[0].gamma_variances(), &mut rng);
            let (next, _) = evolve_calendar(&h, &params, &mut rng);
            h = next;
        }
        assert_eq!(gamma, vec![1.0, -0.5, 0.25]);
        assert_eq!(h, vec![0.5, 0.4]);
    }

    #[test]
    fn params_json_round_trip() {
        let params = two_line_params();
        let text = serde_json::to_string(&params).unwrap();
        assert!(text.contains("sigma2_h_tilde"));
        assert!(!text.contains("sigma2_b1"));
        let back: ModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(params, back);
        back.validate().unwrap();
    }
}
