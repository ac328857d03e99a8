//! Fit diagnostics: fitting ratios against simulation truth, Hoerl-curve
//! summaries, residual tables by year dimension, rank association measures,
//! and tracking/heatmap exports.
//!
//! Everything here is a pure function of the panel and fit artifacts; no
//! value is fabricated for masked cells.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist, StudentsT};

use crate::error::{Error, Result};
use crate::particle::StepRecord;
use crate::sim::FactorPaths;
use crate::state_space::ObservationFamily;
use crate::triangle::{calendar_index, TrianglePanel};

/// Mean `(r - 1) / (-s)` and variance `(r - 1) / s^2` of the Hoerl curve.
pub fn hoerl_summary(r: f64, s: f64) -> Result<(f64, f64)> {
    if s == 0.0 {
        return Err(Error::InvalidParameter("Hoerl summary undefined at s = 0".into()));
    }
    Ok(((r - 1.0) / (-s), (r - 1.0) / (s * s)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittingRatioRow {
    pub line: usize,
    pub step: usize,
    pub factor: String,
    pub filtered: f64,
    pub truth: f64,
    /// `filtered / truth`; NaN when the truth is zero.
    pub ratio: f64,
}

fn ratio_row(line: usize, step: usize, factor: &str, filtered: f64, truth: f64) -> FittingRatioRow {
    FittingRatioRow {
        line,
        step,
        factor: factor.into(),
        filtered,
        truth,
        ratio: if truth != 0.0 { filtered / truth } else { f64::NAN },
    }
}

/// Filtered-to-true ratios per factor and step, including the Hoerl mean and
/// variance computed from each side's own `(r, s)`.
pub fn fitting_ratios(records: &[StepRecord], truth: &FactorPaths) -> Result<Vec<FittingRatioRow>> {
    let n_lines = truth.gamma.len();
    let mut rows = Vec::new();
    for record in records {
        let i = record.i;
        for n in 0..n_lines {
            let filtered = &record.mean_state.gamma[n];
            let actual = &truth.gamma[n][i - 1];
            let names: &[&str] = if filtered.len() == 5 {
                &["a", "r", "s", "b1", "b2"]
            } else {
                &["a", "r", "s"]
            };
            for (c, name) in names.iter().enumerate() {
                rows.push(ratio_row(n + 1, i, name, filtered[c], actual[c]));
            }
            let (mean_f, var_f) = hoerl_summary(filtered[1], filtered[2])?;
            let (mean_t, var_t) = hoerl_summary(actual[1], actual[2])?;
            rows.push(ratio_row(n + 1, i, "hoerl_mean", mean_f, mean_t));
            rows.push(ratio_row(n + 1, i, "hoerl_variance", var_f, var_t));
            // the current diagonal's calendar level
            rows.push(ratio_row(
                n + 1,
                i,
                "h",
                record.mean_state.psi[n][i - 1],
                truth.h[n][i - 1],
            ));
        }
    }
    Ok(rows)
}

/// Fitted cell means implied by per-step posterior-mean factors: row `i` is
/// priced with the step-`i` state.
pub fn fitted_grid(
    panel: &TrianglePanel,
    records: &[StepRecord],
    family: ObservationFamily,
) -> Vec<Vec<Vec<Option<f64>>>> {
    let dim = panel.dim;
    let mut grids = vec![vec![vec![None; dim]; dim]; panel.n_lines()];
    for record in records {
        let i = record.i;
        for n in 0..panel.n_lines() {
            let eta = record.mean_state.linear_predictor(i, n);
            for (j, e) in eta.iter().enumerate() {
                if panel.is_observed(n, i, j + 1) {
                    grids[n][i - 1][j] = Some(match family {
                        ObservationFamily::Tweedie => e.exp(),
                        ObservationFamily::Gaussian => *e,
                    });
                }
            }
        }
    }
    grids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YearDimension {
    Accident,
    Development,
    Calendar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualRow {
    pub line: usize,
    pub dimension: YearDimension,
    pub year: usize,
    pub observed: f64,
    pub fitted: f64,
    /// `(sum observed - sum fitted) / sum fitted`.
    pub residual: f64,
}

/// Aggregate residuals by accident, development, and calendar year.
pub fn residuals_by_dimension(
    panel: &TrianglePanel,
    fitted: &[Vec<Vec<Option<f64>>>],
) -> Result<Vec<ResidualRow>> {
    let dim = panel.dim;
    let mut rows = Vec::new();
    for n in 0..panel.n_lines() {
        for dimension in
            [YearDimension::Accident, YearDimension::Development, YearDimension::Calendar]
        {
            let mut obs = vec![0.0; 2 * dim];
            let mut fit = vec![0.0; 2 * dim];
            let mut seen = vec![false; 2 * dim];
            for (i, j, y) in panel.observed_cells(n) {
                let Some(mu) = fitted[n][i - 1][j - 1] else { continue };
                let year = match dimension {
                    YearDimension::Accident => i,
                    YearDimension::Development => j,
                    YearDimension::Calendar => calendar_index(i, j),
                };
                obs[year - 1] += y;
                fit[year - 1] += mu;
                seen[year - 1] = true;
            }
            for year in 1..=2 * dim {
                if !seen[year - 1] {
                    continue;
                }
                if fit[year - 1] == 0.0 {
                    return Err(Error::InvalidData(format!(
                        "zero fitted sum in {dimension:?} year {year}"
                    )));
                }
                rows.push(ResidualRow {
                    line: n + 1,
                    dimension,
                    year,
                    observed: obs[year - 1],
                    fitted: fit[year - 1],
                    residual: (obs[year - 1] - fit[year - 1]) / fit[year - 1],
                });
            }
        }
    }
    Ok(rows)
}

/// The three association coefficients with two-sided p-values
/// (t-approximation for Pearson and Spearman, normal approximation for
/// Kendall's tau-b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Association {
    pub n: usize,
    pub pearson: f64,
    pub pearson_p: f64,
    pub spearman: f64,
    pub spearman_p: f64,
    pub kendall: f64,
    pub kendall_p: f64,
}

fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidData("zero-variance input to association".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn t_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

/// Average ranks with ties sharing their midrank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[k]] {
            end += 1;
        }
        let midrank = (k + end) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=end] {
            out[idx] = midrank;
        }
        k = end + 1;
    }
    out
}

pub fn association(x: &[f64], y: &[f64]) -> Result<Association> {
    if x.len() != y.len() {
        return Err(Error::InvalidData("length mismatch".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidData("need at least 3 pairs".into()));
    }
    let pearson = pearson_coefficient(x, y)?;
    let spearman = pearson_coefficient(&ranks(x), &ranks(y))?;

    // Kendall tau-b
    let (mut concordant, mut discordant) = (0f64, 0f64);
    let (mut ties_x, mut ties_y) = (0f64, 0f64);
    for a in 0..n {
        for b in (a + 1)..n {
            let dx = x[a] - x[b];
            let dy = y[a] - y[b];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_x += 1.0;
            } else if dy == 0.0 {
                ties_y += 1.0;
            } else if dx * dy > 0.0 {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    let pairs = (n * (n - 1)) as f64 / 2.0;
    let denom = ((pairs - ties_x) * (pairs - ties_y)).sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidData("zero-variance input to association".into()));
    }
    let kendall = (concordant - discordant) / denom;
    let nf = n as f64;
    let kendall_var = 2.0 * (2.0 * nf + 5.0) / (9.0 * nf * (nf - 1.0));
    let z = kendall / kendall_var.sqrt();
    let normal = NormalDist::new(0.0, 1.0).expect("unit normal");
    let kendall_p = 2.0 * (1.0 - normal.cdf(z.abs()));

    Ok(Association {
        n,
        pearson,
        pearson_p: t_p_value(pearson, n),
        spearman,
        spearman_p: t_p_value(spearman, n),
        kendall,
        kendall_p,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingRow {
    pub line: usize,
    pub i: usize,
    pub j: usize,
    pub observed: f64,
    /// Fitted with the current row's filtered factors.
    pub fitted: f64,
    /// Fitted for this row with the previous row's filtered factors.
    pub fitted_previous: Option<f64>,
}

/// Long-format data behind the development-pattern tracking plots.
pub fn tracking_table(
    panel: &TrianglePanel,
    records: &[StepRecord],
    family: ObservationFamily,
) -> Vec<TrackingRow> {
    let mut rows = Vec::new();
    let value = |eta: f64| match family {
        ObservationFamily::Tweedie => eta.exp(),
        ObservationFamily::Gaussian => eta,
    };
    for (idx, record) in records.iter().enumerate() {
        let i = record.i;
        for n in 0..panel.n_lines() {
            let eta = record.mean_state.linear_predictor(i, n);
            let eta_prev = (idx > 0).then(|| {
                // previous step's factors, priced on this row's cells
                let prev = &records[idx - 1].mean_state;
                prev.linear_predictor(i, n)
            });
            for (j, y) in panel.observed_row(n, i) {
                rows.push(TrackingRow {
                    line: n + 1,
                    i,
                    j,
                    observed: y,
                    fitted: value(eta[j - 1]),
                    fitted_previous: eta_prev.as_ref().map(|e| value(e[j - 1])),
                });
            }
        }
    }
    rows
}

/// Observed-to-fitted ratio grid; `None` outside the observed region.
pub fn heatmap_table(
    panel: &TrianglePanel,
    fitted: &[Vec<Vec<Option<f64>>>],
) -> Vec<Vec<Vec<Option<f64>>>> {
    let dim = panel.dim;
    (0..panel.n_lines())
        .map(|n| {
            (1..=dim)
                .map(|i| {
                    (1..=dim)
                        .map(|j| match (panel.cell(n, i, j), fitted[n][i - 1][j - 1]) {
                            (Some(y), Some(mu)) if mu != 0.0 => Some(y / mu),
                            _ => None,
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::state_space::FactorState;
    use crate::triangle::{Kind, Scale};
    use rand::Rng;

    #[test]
    fn hoerl_summary_values() {
        let (mean, var) = hoerl_summary(1.0, -0.7).unwrap();
        assert_eq!((mean, var), (0.0, 0.0));
        let (mean, var) = hoerl_summary(2.0, -1.0).unwrap();
        assert_eq!((mean, var), (1.0, 1.0));
        // appendix truth for line 1, first accident year
        let (mean, var) = hoerl_summary(1.2867, -0.8014).unwrap();
        assert!((mean - 0.35775).abs() < 1e-5, "{mean}");
        assert!((var - 0.4464046).abs() < 1e-6, "{var}");
        assert!(hoerl_summary(1.5, 0.0).is_err());
    }

    fn record_at(i: usize, state: FactorState) -> StepRecord {
        StepRecord {
            i,
            ess: 1.0,
            degeneracy_warning: false,
            zero_lookahead: 0,
            mean_state: state,
            factors: vec![],
            params: vec![],
        }
    }

    #[test]
    fn fitting_ratios_against_truth() {
        let truth = FactorPaths {
            gamma: vec![vec![vec![6.9111, 1.2867, -0.8014], vec![7.1203, 1.1831, -0.7783]]],
            h: vec![vec![0.5, 0.5025]],
            common_shocks: vec![0.0],
        };
        // filtered equal to truth: every ratio is 1
        let records = vec![
            record_at(
                1,
                FactorState {
                    gamma: vec![truth.gamma[0][0].clone()],
                    psi: vec![truth.h[0].clone()],
                },
            ),
            record_at(
                2,
                FactorState {
                    gamma: vec![truth.gamma[0][1].clone()],
                    psi: vec![truth.h[0].clone()],
                },
            ),
        ];
        let rows = fitting_ratios(&records, &truth).unwrap();
        assert!(rows.iter().all(|r| (r.ratio - 1.0).abs() < 1e-12));

        // published filtered estimate for a_1
        let records = vec![record_at(
            1,
            FactorState {
                gamma: vec![vec![6.9772, 1.1637, -0.7669]],
                psi: vec![vec![0.45, 0.45]],
            },
        )];
        let rows = fitting_ratios(&records, &truth).unwrap();
        let a_row = rows.iter().find(|r| r.factor == "a").unwrap();
        assert!((a_row.ratio - 1.00956).abs() < 1e-5);
        let h_row = rows.iter().find(|r| r.factor == "h").unwrap();
        assert!((h_row.ratio - 0.45 / 0.5).abs() < 1e-12);
    }

    fn small_panel(values: &[(usize, usize, f64)], dim: usize) -> TrianglePanel {
        let mut grid = vec![vec![None; dim]; dim];
        for &(i, j, y) in values {
            grid[i - 1][j - 1] = Some(y);
        }
        TrianglePanel::new(vec![grid], vec![vec![1.0; dim]], Kind::Incremental, Scale::Raw)
            .unwrap()
    }

    #[test]
    fn residual_tables() {
        let panel = small_panel(&[(1, 1, 2.0), (1, 2, 3.0), (2, 1, 4.0)], 2);
        // perfect fit
        let fitted = vec![vec![
            vec![Some(2.0), Some(3.0)],
            vec![Some(4.0), None],
        ]];
        let rows = residuals_by_dimension(&panel, &fitted).unwrap();
        assert!(rows.iter().all(|r| r.residual.abs() < 1e-12));

        // single-cell year with y = 1.5 mu
        let fitted = vec![vec![
            vec![Some(2.0), Some(2.0)],
            vec![Some(4.0), None],
        ]];
        let rows = residuals_by_dimension(&panel, &fitted).unwrap();
        let cy2 = rows
            .iter()
            .find(|r| r.dimension == YearDimension::Calendar && r.year == 2)
            .unwrap();
        // calendar year 2 holds cells (1,2) and (2,1): (3+4)/(2+4) - 1
        assert!((cy2.residual - 7.0 / 6.0 + 1.0).abs() < 1e-12);
        let dy2 = rows
            .iter()
            .find(|r| r.dimension == YearDimension::Development && r.year == 2)
            .unwrap();
        assert!((dy2.residual - 0.5).abs() < 1e-12);
    }

    #[test]
    fn calendar_residuals_match_glm_aggregates() {
        let mut rng = stream(91, &[0]);
        let dim = 5usize;
        let mut grid = vec![vec![None; dim]; dim];
        for i in 1..=dim {
            for j in 1..=(dim - i + 1) {
                let eta = 0.5 + 0.1 * i as f64 + 0.7 * (j as f64).ln() - 0.35 * j as f64;
                grid[i - 1][j - 1] = Some((eta + rng.random_range(-0.2..0.2)).exp());
            }
        }
        let panel =
            TrianglePanel::new(vec![grid], vec![vec![1.0; dim]], Kind::Incremental, Scale::Raw)
                .unwrap();
        let fit = crate::glm::fit_irls(&panel, 0, crate::glm::MeanStructure::Hoerl, 1.5).unwrap();
        let mut fitted = vec![vec![vec![None; dim]; dim]];
        for cell in &fit.cells {
            fitted[0][cell.i - 1][cell.j - 1] = Some(cell.mu);
        }
        let rows = residuals_by_dimension(&panel, &fitted).unwrap();
        let glm_cal = fit.calendar_residuals(dim);
        for row in rows.iter().filter(|r| r.dimension == YearDimension::Calendar) {
            let expect = glm_cal[row.year - 1].unwrap();
            assert!((row.residual - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn association_identity_and_null() {
        let x: Vec<f64> = (0..50).map(|k| k as f64 * 0.3 - 2.0).collect();
        let id = association(&x, &x).unwrap();
        assert!((id.pearson - 1.0).abs() < 1e-12);
        assert!((id.spearman - 1.0).abs() < 1e-12);
        assert!((id.kendall - 1.0).abs() < 1e-12);
        assert!(id.pearson_p < 1e-10);

        let mut rng = stream(92, &[0]);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let null = association(&a, &b).unwrap();
        assert!(null.pearson.abs() < 0.03);
        assert!(null.spearman.abs() < 0.03);
        assert!(null.kendall.abs() < 0.03);

        assert!(association(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(association(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_measures_invariant_under_monotone_transform() {
        let mut rng = stream(93, &[0]);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let base = association(&x, &y).unwrap();
        let transformed: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let moved = association(&x, &transformed).unwrap();
        assert!((base.spearman - moved.spearman).abs() < 1e-12);
        assert!((base.kendall - moved.kendall).abs() < 1e-12);
        assert!((base.pearson - moved.pearson).abs() > 1e-6);
    }

    #[test]
    fn tracking_rows_shape() {
        let dim = 3usize;
        let panel = small_panel(&[(1, 1, 1.0), (1, 2, 2.0), (1, 3, 3.0), (2, 1, 4.0), (2, 2, 5.0), (3, 1, 6.0)], dim);
        let state = |a: f64| FactorState {
            gamma: vec![vec![a, 0.0, 0.0]],
            psi: vec![vec![0.0; dim]],
        };
        let records =
            vec![record_at(1, state(0.0)), record_at(2, state(0.5)), record_at(3, state(1.0))];
        let rows = tracking_table(&panel, &records, ObservationFamily::Tweedie);
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().filter(|r| r.i == 1).all(|r| r.fitted_previous.is_none()));
        let row21 = rows.iter().find(|r| r.i == 2 && r.j == 1).unwrap();
        assert!((row21.fitted - 0.5f64.exp()).abs() < 1e-12);
        assert!((row21.fitted_previous.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tracking_is_exact_on_noiseless_filter() {
        // deterministic filter on noiseless data: fitted equals observed
        let dim = 3usize;
        let state = FactorState {
            gamma: vec![vec![0.4, 0.6, -0.3]],
            psi: vec![vec![0.1; dim]],
        };
        let mut grid = vec![vec![None; dim]; dim];
        for i in 1..=dim {
            let eta = state.linear_predictor(i, 0);
            for j in 1..=(dim - i + 1) {
                grid[i - 1][j - 1] = Some(eta[j - 1].exp());
            }
        }
        let panel =
            TrianglePanel::new(vec![grid], vec![vec![1.0; dim]], Kind::Incremental, Scale::Raw)
                .unwrap();
        let records: Vec<StepRecord> =
            (1..=dim).map(|i| record_at(i, state.clone())).collect();
        let rows = tracking_table(&panel, &records, ObservationFamily::Tweedie);
        assert!(rows.iter().all(|r| (r.fitted - r.observed).abs() < 1e-12));
    }

    #[test]
    fn heatmap_ratios() {
        let panel = small_panel(&[(1, 1, 2.0), (1, 2, 6.0), (2, 1, 4.0)], 2);
        let fitted = vec![vec![
            vec![Some(2.0), Some(3.0)],
            vec![Some(4.0), None],
        ]];
        let grid = heatmap_table(&panel, &fitted);
        assert_eq!(grid[0][0][0], Some(1.0));
        assert_eq!(grid[0][0][1], Some(2.0));
        assert_eq!(grid[0][1][0], Some(1.0));
        assert_eq!(grid[0][1][1], None);
    }
}
