//! Gaussian-process regression over (k, tau) with an anisotropic RBF kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::types::{Coordinate, Quote};

pub const NOISE_FLOOR: f64 = 1e-10;
const JITTERS: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];
/// Box for the log-hyperparameter search: signal variance, the two lengthscales, noise variance.
const BOUNDS: [(f64, f64); 4] = [(1e-8, 10.0), (1e-3, 100.0), (1e-3, 100.0), (NOISE_FLOOR, 1.0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub length_k: f64,
    pub length_tau: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self { signal_var: 0.01, length_k: 0.2, length_tau: 0.5, noise_var: 1e-6 }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_var > 0.0 && self.length_k > 0.0 && self.length_tau > 0.0 && self.noise_var >= NOISE_FLOOR) {
            return Err(Error::Domain(format!("invalid GP hyperparameters {self:?}")));
        }
        Ok(())
    }

    fn to_log(self) -> [f64; 4] {
        [self.signal_var.ln(), self.length_k.ln(), self.length_tau.ln(), self.noise_var.ln()]
    }

    fn from_log(x: &[f64]) -> Self {
        let v = |i: usize| x[i].exp().clamp(BOUNDS[i].0, BOUNDS[i].1);
        Self { signal_var: v(0), length_k: v(1), length_tau: v(2), noise_var: v(3) }
    }

    pub fn kernel(&self, a: &Coordinate, b: &Coordinate) -> f64 {
        let dk = (a.k - b.k) / self.length_k;
        let dt = (a.tau - b.tau) / self.length_tau;
        self.signal_var * (-0.5 * (dk * dk + dt * dt)).exp()
    }
}

/// A GP conditioned on a context set.
#[derive(Debug, Clone)]
pub struct GpState {
    pub hyper: GpHyper,
    /// Constant prior mean: the average context vol.
    pub prior_mean: f64,
    /// Extra diagonal added to make the factorisation succeed.
    pub jitter: f64,
    coords: Vec<Coordinate>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    residual: DVector<f64>,
}

fn check_context(context: &[Quote]) -> Result<()> {
    if context.len() < 2 {
        return Err(Error::InsufficientQuotes { needed: 2, available: context.len() });
    }
    if context.iter().all(|q| q.coord.same_point(&context[0].coord)) {
        return Err(Error::Domain("all context coordinates coincide".into()));
    }
    Ok(())
}

impl GpState {
    /// Condition on `context` with fixed hyperparameters.
    pub fn condition(context: &[Quote], hyper: GpHyper) -> Result<Self> {
        check_context(context)?;
        hyper.validate()?;
        let n = context.len();
        let coords: Vec<Coordinate> = context.iter().map(|q| q.coord).collect();
        let prior_mean = context.iter().map(|q| q.vol).sum::<f64>() / n as f64;
        let residual = DVector::from_iterator(n, context.iter().map(|q| q.vol - prior_mean));
        let mut k = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&coords[i], &coords[j]));
        for i in 0..n {
            k[(i, i)] += hyper.noise_var;
        }
        for &jitter in &JITTERS {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = kj.cholesky() {
                let alpha = chol.solve(&residual);
                return Ok(Self { hyper, prior_mean, jitter, coords, chol, alpha, residual });
            }
        }
        Err(Error::SingularKernel { jitter: JITTERS[JITTERS.len() - 1] })
    }

    /// Log marginal likelihood of the context residuals.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.coords.len() as f64;
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.residual.dot(&self.alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Posterior mean and latent variance at each target.
    pub fn predict(&self, targets: &[Coordinate]) -> Vec<(f64, f64)> {
        targets
            .iter()
            .map(|t| {
                let ks = DVector::from_iterator(self.coords.len(), self.coords.iter().map(|c| self.hyper.kernel(c, t)));
                let mean = self.prior_mean + ks.dot(&self.alpha);
                let v = self.chol.l().solve_lower_triangular(&ks).expect("factor is non-singular");
                let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
                (mean, var)
            })
            .collect()
    }
}

/// Starting points for the likelihood search around `init`.
fn starts(init: GpHyper) -> Vec<GpHyper> {
    let mut out = vec![init];
    for &lk in &[0.05, 0.3] {
        for &lt in &[0.2, 2.0] {
            out.push(GpHyper { length_k: lk, length_tau: lt, ..init });
        }
    }
    out
}

/// Fit hyperparameters by maximising the log marginal likelihood from several
/// starts, then condition on the context.
pub fn gp_fit(context: &[Quote], init: GpHyper) -> Result<GpState> {
    check_context(context)?;
    init.validate()?;
    let objective = |x: &[f64]| match GpState::condition(context, GpHyper::from_log(x)) {
        Ok(s) => -s.log_marginal_likelihood(),
        Err(_) => f64::INFINITY,
    };
    let nm = NelderMead { max_evals: 600, f_tol: 1e-10, x_tol: 1e-6, initial_step: 0.5 };
    let mut best: Option<(f64, GpHyper)> = None;
    for start in starts(init) {
        let m = nm.minimize(objective, &start.to_log());
        let h = GpHyper::from_log(&m.x);
        if m.value.is_finite() && best.map_or(true, |(v, _)| m.value < v) {
            best = Some((m.value, h));
        }
    }
    let hyper = best.map(|(_, h)| h).unwrap_or(init);
    GpState::condition(context, hyper)
}

pub fn gp_predict(state: &GpState, targets: &[Coordinate]) -> Vec<(f64, f64)> {
    state.predict(targets)
}
