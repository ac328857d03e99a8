//! Derivative-free minimization (Nelder-Mead) for likelihood surfaces whose
//! gradients are awkward to propagate through the filter recursions.

#[derive(Debug, Clone)]
pub(crate) struct NelderMead {
    pub f_tol: f64,
    pub x_tol: f64,
    pub max_iter: usize,
    /// Initial simplex edge per coordinate (relative to |x0| with an absolute
    /// floor).
    pub step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { f_tol: 1e-10, x_tol: 1e-10, max_iter: 2_000, step: 0.25 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MinResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl NelderMead {
    pub fn minimize(&self, mut f: impl FnMut(&[f64]) -> f64, x0: &[f64]) -> MinResult {
        let n = x0.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], count: &mut usize| -> f64 {
            *count += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for d in 0..n {
            let mut v = x0.to_vec();
            v[d] += self.step * v[d].abs().max(0.1);
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

        let mut converged = false;
        while evals < self.max_iter {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let best = order[0];
            let worst = order[n];
            let second_worst = order[n - 1];

            let f_spread = (values[worst] - values[best]).abs();
            let x_spread = (0..n)
                .map(|d| {
                    simplex
                        .iter()
                        .map(|v| (v[d] - simplex[best][d]).abs())
                        .fold(0.0f64, f64::max)
                })
                .fold(0.0f64, f64::max);
            if f_spread <= self.f_tol * (1.0 + values[best].abs()) && x_spread <= self.x_tol {
                converged = true;
                break;
            }

            // centroid of all but the worst vertex
            let mut centroid = vec![0.0; n];
            for (idx, v) in simplex.iter().enumerate() {
                if idx == worst {
                    continue;
                }
                for d in 0..n {
                    centroid[d] += v[d] / n as f64;
                }
            }

            let blend = |a: &[f64], b: &[f64], w: f64| -> Vec<f64> {
                a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
            };
            // reflection
            let reflected = blend(&centroid, &simplex[worst], -1.0);
            let f_reflected = eval(&reflected, &mut evals);
            if f_reflected < values[best] {
                // expansion
                let expanded = blend(&centroid, &simplex[worst], -2.0);
                let f_expanded = eval(&expanded, &mut evals);
                if f_expanded < f_reflected {
                    simplex[worst] = expanded;
                    values[worst] = f_expanded;
                } else {
                    simplex[worst] = reflected;
                    values[worst] = f_reflected;
                }
            } else if f_reflected < values[second_worst] {
                simplex[worst] = reflected;
                values[worst] = f_reflected;
            } else {
                // contraction (outside if the reflection helped at all)
                let towards = if f_reflected < values[worst] { -0.5 } else { 0.5 };
                let contracted = blend(&centroid, &simplex[worst], towards);
                let f_contracted = eval(&contracted, &mut evals);
                if f_contracted < values[worst].min(f_reflected) {
                    simplex[worst] = contracted;
                    values[worst] = f_contracted;
                } else {
                    // shrink towards the best vertex
                    for idx in 0..=n {
                        if idx == best {
                            continue;
                        }
                        simplex[idx] = blend(&simplex[best], &simplex[idx], 0.5);
                        values[idx] = eval(&simplex[idx], &mut evals);
                    }
                }
            }
        }

        let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
        MinResult { x: simplex[best].clone(), f: values[best], evaluations: evals, converged }
    }
}
