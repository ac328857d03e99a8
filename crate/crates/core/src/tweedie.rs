//! Tweedie exponential-dispersion densities, samplers, and variance functions.
//!
//! Supported powers: `p = 0` (Gaussian), `p = 1` (overdispersed Poisson on the
//! lattice `phi * N`), `1 < p < 2` (compound Poisson-gamma with an atom at
//! zero), and `p = 2` (gamma). The variance function is `Var[Y] = phi * mu^p`
//! throughout.
//!
//! For `1 < p < 2` the density has no closed form; `log_pdf` evaluates the
//! Poisson-weighted gamma series
//!
//! ```text
//! f(y) = sum_{k >= 1} Pois(k; lambda) * Gamma(y; k*alpha, theta),   y > 0
//! P(Y = 0) = exp(-lambda)
//! ```
//!
//! with `lambda = mu^(2-p) / (phi (2-p))`, `alpha = (2-p)/(p-1)` and scale
//! `theta = phi (p-1) mu^(p-1)`. Terms are summed in log space starting from
//! the index of the maximal term and scanning outward until terms fall
//! [`SERIES_LOG_CUTOFF`] log-units below the running maximum.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Terms this far below the running maximum no longer move the sum at f64
/// precision.
const SERIES_LOG_CUTOFF: f64 = 37.0;
/// Hard cap on evaluated series terms before reporting non-convergence.
const SERIES_MAX_TERMS: usize = 5_000;

/// A Tweedie family member: power `p` and dispersion `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweedieSpec {
    pub p: f64,
    pub phi: f64,
}

impl TweedieSpec {
    pub fn new(p: f64, phi: f64) -> Result<Self> {
        if !(p == 0.0 || (1.0..=2.0).contains(&p)) {
            return Err(Error::InvalidParameter(format!(
                "power p = {p} unsupported (need 0 or [1, 2])"
            )));
        }
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::InvalidParameter(format!("dispersion phi = {phi} must be > 0")));
        }
        Ok(Self { p, phi })
    }

    pub fn gaussian(sigma2: f64) -> Result<Self> {
        Self::new(0.0, sigma2)
    }

    /// `Var[Y] = phi * mu^p`.
    pub fn variance(&self, mu: f64) -> f64 {
        self.phi * mu.powf(self.p)
    }

    /// Poisson rate of the compound representation, `mu^(2-p) / (phi (2-p))`.
    fn rate(&self, mu: f64) -> f64 {
        mu.powf(2.0 - self.p) / (self.phi * (2.0 - self.p))
    }

    /// Log-density of `y` under mean `mu`.
    pub fn log_pdf(&self, y: f64, mu: f64) -> Result<f64> {
        let p = self.p;
        let phi = self.phi;
        if p != 0.0 && !(mu > 0.0) {
            return Err(Error::Domain(format!("mean mu = {mu} must be > 0 for p = {p}")));
        }
        if p == 0.0 {
            let z = y - mu;
            return Ok(-0.5 * ((2.0 * std::f64::consts::PI * phi).ln() + z * z / phi));
        }
        if p == 1.0 {
            // Scaled Poisson: y must sit on the lattice phi * {0, 1, 2, ...}.
            let k = y / phi;
            let k_round = k.round();
            if k_round < 0.0 || (k - k_round).abs() > 1e-8 * k_round.abs().max(1.0) {
                return Err(Error::Domain(format!(
                    "y = {y} is off the lattice phi*N required for p = 1"
                )));
            }
            let rate = mu / phi;
            return Ok(k_round * rate.ln() - rate - ln_gamma(k_round + 1.0));
        }
        if p == 2.0 {
            if !(y > 0.0) {
                return Err(Error::Domain(format!("y = {y} must be > 0 for p = 2")));
            }
            let shape = 1.0 / phi;
            let scale = phi * mu;
            return Ok((shape - 1.0) * y.ln() - y / scale - ln_gamma(shape) - shape * scale.ln());
        }
        // 1 < p < 2: compound Poisson-gamma.
        if y < 0.0 {
            return Err(Error::Domain(format!("y = {y} must be >= 0 for 1 < p < 2")));
        }
        let lambda = self.rate(mu);
        if y == 0.0 {
            return Ok(-lambda);
        }
        self.series_log_pdf(y, mu, lambda)
    }

    fn series_log_pdf(&self, y: f64, mu: f64, lambda: f64) -> Result<f64> {
        let p = self.p;
        let alpha = (2.0 - p) / (p - 1.0);
        let log_theta = (self.phi * (p - 1.0)).ln() + (p - 1.0) * mu.ln();
        let log_y = y.ln();
        let log_lambda = lambda.ln();
        // log of the k-th summand; the -lambda - y/theta part is k-free.
        let base = -lambda - y / ((self.phi * (p - 1.0)) * mu.powf(p - 1.0)) - log_y;
        let log_term = |k: f64| -> f64 {
            base + k * log_lambda - ln_gamma(k + 1.0) + k * alpha * (log_y - log_theta)
                - ln_gamma(k * alpha)
        };
        // Index of the maximal term (Dunn & Smyth 2005), clamped to >= 1.
        let k_peak = (y.powf(2.0 - p) / (self.phi * (2.0 - p))).max(1.0);
        let k_mid = k_peak.round().max(1.0) as usize;

        let mut max_log = f64::NEG_INFINITY;
        let mut logs: Vec<f64> = Vec::with_capacity(64);
        let mut evaluated = 0usize;
        // downward sweep k_mid, k_mid - 1, ..., 1
        for k in (1..=k_mid).rev() {
            let lt = log_term(k as f64);
            evaluated += 1;
            max_log = max_log.max(lt);
            logs.push(lt);
            if lt < max_log - SERIES_LOG_CUTOFF {
                break;
            }
        }
        // upward sweep from k_mid + 1
        let mut k = k_mid + 1;
        loop {
            if evaluated >= SERIES_MAX_TERMS {
                return Err(Error::NonConvergence(format!(
                    "tweedie series needs more than {SERIES_MAX_TERMS} terms \
                     (y = {y}, mu = {mu}, p = {p}, phi = {})",
                    self.phi
                )));
            }
            let lt = log_term(k as f64);
            evaluated += 1;
            max_log = max_log.max(lt);
            logs.push(lt);
            if lt < max_log - SERIES_LOG_CUTOFF {
                break;
            }
            k += 1;
        }
        let sum: f64 = logs.iter().map(|lt| (lt - max_log).exp()).sum();
        Ok(max_log + sum.ln())
    }

    /// Draw one observation with mean `mu`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> Result<f64> {
        let p = self.p;
        let phi = self.phi;
        if p != 0.0 && !(mu > 0.0) {
            return Err(Error::Domain(format!("mean mu = {mu} must be > 0 for p = {p}")));
        }
        if p == 0.0 {
            let d = Normal::new(mu, phi.sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            return Ok(d.sample(rng));
        }
        if p == 1.0 {
            let d = Poisson::new(mu / phi).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            return Ok(phi * d.sample(rng));
        }
        if p == 2.0 {
            let d = Gamma::new(1.0 / phi, phi * mu)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            return Ok(d.sample(rng));
        }
        // 1 < p < 2: N ~ Poisson(lambda), then the sum of N gammas with shape
        // alpha collapses to a single Gamma(N * alpha, theta) draw.
        let lambda = self.rate(mu);
        let alpha = (2.0 - p) / (p - 1.0);
        let theta = phi * (p - 1.0) * mu.powf(p - 1.0);
        let n = Poisson::new(lambda)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .sample(rng);
        if n == 0.0 {
            return Ok(0.0);
        }
        let d =
            Gamma::new(n * alpha, theta).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(d.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn rejects_unsupported_powers() {
        assert!(TweedieSpec::new(0.5, 1.0).is_err());
        assert!(TweedieSpec::new(2.5, 1.0).is_err());
        assert!(TweedieSpec::new(1.5, 0.0).is_err());
        assert!(TweedieSpec::new(1.5, -1.0).is_err());
    }

    #[test]
    fn variance_function() {
        assert_eq!(TweedieSpec::new(0.0, 3.0).unwrap().variance(2.0), 3.0);
        assert_eq!(TweedieSpec::new(2.0, 1.0).unwrap().variance(2.0), 4.0);
        let v = TweedieSpec::new(1.27, 0.4).unwrap().variance(2.0);
        assert!((v - 0.4 * 2f64.powf(1.27)).abs() < 1e-15);
        assert!((v - 0.9646).abs() < 1e-4);
    }

    #[test]
    fn closed_form_log_densities() {
        let normal = TweedieSpec::new(0.0, 1.0).unwrap();
        assert!((normal.log_pdf(0.0, 0.0).unwrap() + 0.9189385332046727).abs() < 1e-12);

        let gamma = TweedieSpec::new(2.0, 1.0).unwrap();
        assert!((gamma.log_pdf(1.0, 1.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_atom_is_exact() {
        // lambda = mu^(2-p) / (phi (2-p)) = 1 / (1 * 0.5) = 2
        let spec = TweedieSpec::new(1.5, 1.0).unwrap();
        assert_eq!(spec.log_pdf(0.0, 1.0).unwrap(), -2.0);

        let spec = TweedieSpec::new(1.27, 0.4).unwrap();
        let mu: f64 = 5.0;
        let lambda = mu.powf(0.73) / (0.4 * 0.73);
        assert_eq!(spec.log_pdf(0.0, mu).unwrap(), -lambda);
    }

    #[test]
    fn scaled_poisson_lattice() {
        let spec = TweedieSpec::new(1.0, 0.5).unwrap();
        // y = 1.0 is k = 2 on the lattice; rate = mu / phi = 6
        let lp = spec.log_pdf(1.0, 3.0).unwrap();
        let expect = 2.0 * 6f64.ln() - 6.0 - ln_gamma(3.0);
        assert!((lp - expect).abs() < 1e-12);
        assert!(spec.log_pdf(0.75, 3.0).is_err());
    }

    #[test]
    fn domain_violations() {
        let spec = TweedieSpec::new(1.5, 1.0).unwrap();
        assert!(spec.log_pdf(-0.1, 1.0).is_err());
        assert!(spec.log_pdf(1.0, 0.0).is_err());
        let gamma = TweedieSpec::new(2.0, 1.0).unwrap();
        assert!(gamma.log_pdf(0.0, 1.0).is_err());
    }

    #[test]
    fn log_pdf_is_continuous_in_p() {
        for &(y, mu, phi) in &[(3.0, 5.0, 0.4), (0.7, 1.0, 1.3), (40.0, 50.0, 2.0)] {
            let mut p = 1.05;
            while p < 1.95 {
                let a = TweedieSpec::new(p, phi).unwrap().log_pdf(y, mu).unwrap();
                let b = TweedieSpec::new(p + 1e-4, phi).unwrap().log_pdf(y, mu).unwrap();
                assert!(
                    (a - b).abs() < 1e-2,
                    "jump at p = {p}: {a} vs {b} (y = {y}, mu = {mu}, phi = {phi})"
                );
                p += 0.05;
            }
        }
    }

    #[test]
    fn density_normalizes() {
        // integral over (0, inf) after y = exp(x), plus the atom at zero
        for &(p, mu, phi) in &[(1.27, 1.0, 0.5), (1.5, 5.0, 2.0), (1.9, 5.0, 0.5)] {
            let spec = TweedieSpec::new(p, phi).unwrap();
            let atom = (-spec.rate(mu)).exp();
            let (lo, hi, h) = (-320.0, 12.0, 0.01);
            let steps = ((hi - lo) / h) as usize;
            let mut integral = 0.0;
            for idx in 0..=steps {
                let x = lo + h * idx as f64;
                let y = x.exp();
                let f = spec.log_pdf(y, mu).unwrap().exp() * y;
                integral += if idx == 0 || idx == steps { 0.5 * f } else { f };
            }
            integral *= h;
            let total = atom + integral;
            assert!(
                (total - 1.0).abs() < 1e-6,
                "p = {p}, mu = {mu}, phi = {phi}: total mass {total}"
            );
        }
    }

    #[test]
    fn sampler_moments_match() {
        let n = 1_000_000usize;
        for (case, &(p, mu, phi)) in
            [(1.27f64, 5.0f64, 0.4f64), (1.5, 1.0, 1.0), (2.0, 3.0, 0.5), (0.0, 7.0, 2.0)]
                .iter()
                .enumerate()
        {
            let spec = TweedieSpec::new(p, phi).unwrap();
            let mut rng = stream(9001 + case as u64, &[1]);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let y = spec.sample(mu, &mut rng).unwrap();
                sum += y;
                sum_sq += y * y;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            let true_var = spec.variance(mu);
            let mean_tol = 4.0 * (true_var / n as f64).sqrt();
            assert!((mean - mu).abs() < mean_tol, "case {case}: mean {mean} vs {mu}");
            // EDF cumulants: kappa_{r+1} = phi mu^p d(kappa_r)/dmu, so
            // kappa4 = phi^3 p (2p - 1) mu^(3p - 2) and
            // Var[s^2] ~ (kappa4 + 2 kappa2^2) / n.
            let kappa4 = phi.powi(3) * p * (2.0 * p - 1.0) * mu.powf(3.0 * p - 2.0);
            let var_tol = 4.0 * ((kappa4 + 2.0 * true_var * true_var) / n as f64).sqrt();
            assert!((var - true_var).abs() < var_tol, "case {case}: var {var} vs {true_var}");
        }
    }

    #[test]
    fn sampler_zero_mass() {
        // P(Y = 0) = exp(-2) for p = 1.5, mu = 1, phi = 1
        let spec = TweedieSpec::new(1.5, 1.0).unwrap();
        let mut rng = stream(77, &[2]);
        let n = 1_000_000usize;
        let zeros = (0..n).filter(|_| spec.sample(1.0, &mut rng).unwrap() == 0.0).count();
        let p0 = (-2.0f64).exp();
        let sd = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((zeros as f64 / n as f64 - p0).abs() < 3.0 * sd);
    }

    #[test]
    fn degenerate_gaussian_sampler() {
        let spec = TweedieSpec::new(0.0, 1e-12).unwrap();
        let mut rng = stream(5, &[3]);
        for _ in 0..100 {
            let y = spec.sample(7.0, &mut rng).unwrap();
            assert!((y - 7.0).abs() < 1e-5);
        }
    }
}
