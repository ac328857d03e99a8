//! Synthetic multi-line panel generation from the full generative model.
//!
//! Factors drift by their random walks (one shared shock per calendar step),
//! then every cell is drawn from the observation family at the implied mean.
//! The truth record keeps every factor path and shock draw so recovery
//! studies can compute exact fitting ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{scope, stream};
use crate::state_space::{
    evolve_calendar, evolve_gamma, FactorState, LineParams, ModelParams, ObservationFamily,
};
use crate::triangle::{calendar_index, Kind, Scale, TrianglePanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSimConfig {
    pub params: LineParams,
    /// Initial accident-year block `(a_1, r_1, s_1[, b_(1,1), b_(1,2)])`.
    pub gamma1: Vec<f64>,
    /// Initial calendar level `h_1`.
    pub h1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dim: usize,
    pub lines: Vec<LineSimConfig>,
    pub sigma2_h_tilde: f64,
    pub family: ObservationFamily,
    pub seed: u64,
    /// Also draw the lower (future) triangle for holdout studies.
    #[serde(default)]
    pub draw_lower: bool,
}

impl SimConfig {
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            lines: self.lines.iter().map(|l| l.params.clone()).collect(),
            sigma2_h_tilde: self.sigma2_h_tilde,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParameter("dimension must be >= 2".into()));
        }
        let params = self.model_params();
        params.validate()?;
        let k = params.gamma_dim();
        for (n, line) in self.lines.iter().enumerate() {
            if line.gamma1.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "line {}: initial gamma block has {} entries, expected {k}",
                    n + 1,
                    line.gamma1.len()
                )));
            }
            match self.family {
                ObservationFamily::Tweedie => {
                    crate::tweedie::TweedieSpec::new(line.params.p, line.params.phi)?;
                }
                ObservationFamily::Gaussian => {
                    if line.params.p != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "line {}: Gaussian family requires p = 0",
                            n + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// True factor trajectories plus the realized common shocks.
///
/// Calendar paths run to `t = 2I - 1` (the full square horizon) so holdout
/// draws of the lower triangle use the same truth record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPaths {
    /// `gamma[n][i-1]`: the accident-year block of row `i`.
    pub gamma: Vec<Vec<Vec<f64>>>,
    /// `h[n][t-1]`: the calendar level of year `t`.
    pub h: Vec<Vec<f64>>,
    /// Realized shared shocks for `t = 2 ..= 2I - 1`.
    pub common_shocks: Vec<f64>,
}

impl FactorPaths {
    /// Factor state as seen after accident row `i` (its gamma block, the
    /// in-triangle calendar levels).
    pub fn state_at(&self, i: usize) -> FactorState {
        let dim = self.gamma[0].len();
        FactorState {
            gamma: self.gamma.iter().map(|line| line[i - 1].clone()).collect(),
            psi: self.h.iter().map(|line| line[..dim].to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub config: SimConfig,
    pub factors: FactorPaths,
}

/// Simulate the factor trajectories only.
pub fn simulate_factors(config: &SimConfig) -> Result<FactorPaths> {
    config.validate()?;
    let dim = config.dim;
    let params = config.model_params();

    // per-line gamma streams are independent of each other and of the
    // calendar stream
    let mut gamma: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.lines.len());
    for (n, line) in config.lines.iter().enumerate() {
        let mut rng = stream(config.seed, &[scope::SIM_FACTORS, 1, n as u64]);
        let mut path = vec![line.gamma1.clone()];
        let vars = line.params.gamma_variances();
        for _ in 2..=dim {
            let next = evolve_gamma(path.last().unwrap(), &vars, &mut rng);
            path.push(next);
        }
        gamma.push(path);
    }

    let mut rng = stream(config.seed, &[scope::SIM_FACTORS, 2]);
    let mut h: Vec<Vec<f64>> = config.lines.iter().map(|l| vec![l.h1]).collect();
    let mut current: Vec<f64> = config.lines.iter().map(|l| l.h1).collect();
    let mut common_shocks = Vec::with_capacity(2 * dim - 2);
    for _ in 2..=(2 * dim - 1) {
        let (next, shock) = evolve_calendar(&current, &params, &mut rng);
        for (n, v) in next.iter().enumerate() {
            h[n].push(*v);
        }
        common_shocks.push(shock);
        current = next;
    }
    Ok(FactorPaths { gamma, h, common_shocks })
}

/// Simulate a full panel; the truth record retains the generating factors.
pub fn simulate_panel(config: &SimConfig) -> Result<(TrianglePanel, TruthRecord)> {
    let factors = simulate_factors(config)?;
    let dim = config.dim;
    let mut cells = Vec::with_capacity(config.lines.len());
    for (n, line) in config.lines.iter().enumerate() {
        let mut grid = vec![vec![None; dim]; dim];
        for i in 1..=dim {
            let g = &factors.gamma[n][i - 1];
            for j in 1..=dim {
                if calendar_index(i, j) > dim && !config.draw_lower {
                    continue;
                }
                let mut eta = g[0] + g[1] * (j as f64).ln() + g[2] * j as f64;
                if g.len() == 5 {
                    if j == 1 {
                        eta += g[3];
                    }
                    if j == 2 {
                        eta += g[4];
                    }
                }
                eta += factors.h[n][calendar_index(i, j) - 1];
                let mut rng =
                    stream(config.seed, &[scope::SIM_CELLS, n as u64, i as u64, j as u64]);
                let y = config.family.sample_cell(
                    eta,
                    line.params.phi,
                    line.params.p,
                    &mut rng,
                )?;
                grid[i - 1][j - 1] = Some(y);
            }
        }
        cells.push(grid);
    }
    let panel = TrianglePanel::new(
        cells,
        vec![vec![1.0; dim]; config.lines.len()],
        Kind::Incremental,
        Scale::Raw,
    )?;
    Ok((panel, TruthRecord { config: config.clone(), factors }))
}
