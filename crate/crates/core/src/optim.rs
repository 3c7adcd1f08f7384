//! Local minimisers shared by the calibrators.

use nalgebra::{DMatrix, DVector};

/// Nelder-Mead settings.
#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop once the simplex spread of objective values falls below this.
    pub f_tol: f64,
    /// Stop once every vertex lies within this distance of the best one.
    pub x_tol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { max_evals: 4000, f_tol: 1e-16, x_tol: 1e-10, initial_step: 0.2 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

impl NelderMead {
    /// Minimise `f` from `start`. Non-finite objective values are treated as +inf.
    pub fn minimize<F>(&self, mut f: F, start: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = start.len();
        let mut evals = 0usize;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };

        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(start.to_vec());
        for i in 0..n {
            let mut v = start.to_vec();
            v[i] += self.initial_step;
            simplex.push(v);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        while evals < self.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = values[n] - values[0];
            let size = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (spread.is_finite() && spread <= self.f_tol) || size <= self.x_tol {
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
            };

            let reflected = along(-alpha);
            let fr = eval(&reflected, &mut evals);
            if fr < values[0] {
                let expanded = along(-gamma);
                let fe = eval(&expanded, &mut evals);
                if fe < fr {
                    simplex[n] = expanded;
                    values[n] = fe;
                } else {
                    simplex[n] = reflected;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = reflected;
                values[n] = fr;
                continue;
            }
            let (contracted, fc) = if fr < values[n] {
                let c = along(-rho);
                let fc = eval(&c, &mut evals);
                (c, fc)
            } else {
                let c = along(rho);
                let fc = eval(&c, &mut evals);
                (c, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
                continue;
            }
            // Shrink towards the best vertex.
            for i in 1..=n {
                let shrunk: Vec<f64> = simplex[0]
                    .iter()
                    .zip(&simplex[i])
                    .map(|(b, x)| b + sigma * (x - b))
                    .collect();
                values[i] = eval(&shrunk, &mut evals);
                simplex[i] = shrunk;
            }
        }

        let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        Minimum { x: simplex[best].clone(), value: values[best], evals }
    }
}

/// Levenberg-Marquardt for nonlinear least squares with a forward-difference Jacobian.
#[derive(Debug, Clone, Copy)]
pub struct LevenbergMarquardt {
    pub max_iterations: usize,
    /// Stop when a step improves the cost by less than this relative amount.
    pub rel_tol: f64,
    pub fd_step: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self { max_iterations: 300, rel_tol: 1e-14, fd_step: 1e-7 }
    }
}

impl LevenbergMarquardt {
    /// Minimise `0.5 * |r(x)|^2`. Returns the best point seen; non-finite residuals reject a step.
    pub fn minimize<F>(&self, mut residuals: F, start: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let n = start.len();
        let cost = |r: &[f64]| {
            let c = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
            if c.is_finite() {
                c
            } else {
                f64::INFINITY
            }
        };
        let mut x = start.to_vec();
        let mut r = residuals(&x);
        let mut evals = 1;
        let mut c = cost(&r);
        if !c.is_finite() {
            return Minimum { x, value: f64::INFINITY, evals };
        }
        let mut lambda = 1e-3;
        for _ in 0..self.max_iterations {
            let m = r.len();
            let mut jac = DMatrix::<f64>::zeros(m, n);
            for j in 0..n {
                let h = self.fd_step * x[j].abs().max(1.0);
                let mut xp = x.clone();
                xp[j] += h;
                let rp = residuals(&xp);
                evals += 1;
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - r[i]) / h;
                }
            }
            let rv = DVector::from_column_slice(&r);
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * rv;
            let mut accepted = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for j in 0..n {
                    a[(j, j)] += lambda * jtj[(j, j)].max(1e-12);
                }
                let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let rt = residuals(&trial);
                evals += 1;
                let ct = cost(&rt);
                if ct < c {
                    let improvement = (c - ct) / c.max(f64::MIN_POSITIVE);
                    x = trial;
                    r = rt;
                    c = ct;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if improvement < self.rel_tol {
                        return Minimum { x, value: c, evals };
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted || c == 0.0 {
                break;
            }
        }
        Minimum { x, value: c, evals }
    }
}
