//! Gaussian-process surrogate with a Matérn-5/2 ARD kernel, and expected
//! improvement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

/// Kernel hyperparameters on the standardized objective scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GpHyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyperparameters {
    pub fn isotropic(dims: usize, lengthscale: f64, noise_variance: f64) -> Self {
        GpHyperparameters {
            lengthscales: vec![lengthscale; dims],
            signal_variance: 1.0,
            noise_variance,
        }
    }
}

pub fn matern52(a: &[f64], b: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    let s5r = (5.0 * r2).sqrt();
    signal_variance * (1.0 + s5r + 5.0 * r2 / 3.0) * (-s5r).exp()
}

#[derive(Clone, Debug)]
pub struct GpSurrogate {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    hyper: GpHyperparameters,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn factor(x: &[Vec<f64>], hyper: &GpHyperparameters) -> Option<Cholesky<f64, Dyn>> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        matern52(&x[i], &x[j], &hyper.lengthscales, hyper.signal_variance)
    });
    for jitter in JITTERS {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += hyper.noise_variance + jitter * hyper.signal_variance;
        }
        if let Some(c) = m.cholesky() {
            return Some(c);
        }
    }
    None
}

fn standardize(y: &[f64]) -> (f64, f64, DVector<f64>) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    (mean, scale, DVector::from_iterator(y.len(), y.iter().map(|v| (v - mean) / scale)))
}

/// Negative log marginal likelihood of standardized targets.
fn neg_log_likelihood(x: &[Vec<f64>], z: &DVector<f64>, hyper: &GpHyperparameters) -> f64 {
    let Some(chol) = factor(x, hyper) else {
        return f64::INFINITY;
    };
    let alpha = chol.solve(z);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    0.5 * z.dot(&alpha) + 0.5 * log_det + 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

impl GpSurrogate {
    /// Condition on observations with fixed hyperparameters.
    pub fn with_hyperparameters(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyperparameters) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Contract(format!(
                "GP needs matching non-empty inputs, got {} points and {} targets",
                x.len(),
                y.len()
            )));
        }
        let dims = x[0].len();
        if x.iter().any(|p| p.len() != dims) || hyper.lengthscales.len() != dims {
            return Err(Error::dim("gp", "points and lengthscales disagree on dimension"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("GP targets must be finite".into()));
        }
        let (y_mean, y_scale, z) = standardize(y);
        let chol = factor(&x, &hyper)
            .ok_or_else(|| Error::Numeric("kernel matrix is not positive definite after jitter".into()))?;
        let alpha = chol.solve(&z);
        Ok(GpSurrogate {
            x,
            y_mean,
            y_scale,
            hyper,
            chol,
            alpha,
        })
    }

    /// Fit hyperparameters by maximizing the marginal likelihood with
    /// multi-start Nelder–Mead in log space, then condition.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64], seed: u64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Contract("GP needs at least one observation".into()));
        }
        let dims = x[0].len();
        let (_, _, z) = standardize(y);
        // log lengthscales, log signal variance, log noise variance
        let lower: Vec<f64> = (0..dims)
            .map(|_| 0.01f64.ln())
            .chain([0.05f64.ln(), 1e-8f64.ln()])
            .collect();
        let upper: Vec<f64> = (0..dims)
            .map(|_| 10f64.ln())
            .chain([20f64.ln(), 0.5f64.ln()])
            .collect();
        let decode = |theta: &[f64]| -> GpHyperparameters {
            let c: Vec<f64> = theta
                .iter()
                .zip(lower.iter().zip(&upper))
                .map(|(t, (lo, hi))| t.clamp(*lo, *hi).exp())
                .collect();
            GpHyperparameters {
                lengthscales: c[..dims].to_vec(),
                signal_variance: c[dims],
                noise_variance: c[dims + 1],
            }
        };
        let objective = |theta: &[f64]| neg_log_likelihood(&x, &z, &decode(theta));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts = vec![(0..dims)
            .map(|_| 0.3f64.ln())
            .chain([0.0, 1e-4f64.ln()])
            .collect::<Vec<f64>>()];
        for _ in 0..4 {
            starts.push(lower.iter().zip(&upper).map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            let (theta, value) = nelder_mead(&objective, &start, 0.5, 60 * (dims + 2));
            if value.is_finite() && best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, theta));
            }
        }
        let hyper = match best {
            Some((_, theta)) => decode(&theta),
            None => GpHyperparameters::isotropic(dims, 0.3, 1e-4),
        };
        Self::with_hyperparameters(x, y, hyper)
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Posterior mean and standard deviation of the latent function, in
    /// objective units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let h = &self.hyper;
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|p| matern52(p, q, &h.lengthscales, h.signal_variance)),
        );
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("cholesky factor has a positive diagonal");
        let var = (h.signal_variance - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_scale * mean, self.y_scale * var.sqrt())
    }

    /// The same surrogate with one more observation and unchanged hyperparameters.
    pub fn with_observation(&self, point: Vec<f64>, value: f64, raw_y: &[f64]) -> Result<Self> {
        let mut x = self.x.clone();
        x.push(point);
        let mut y = raw_y.to_vec();
        y.push(value);
        Self::with_hyperparameters(x, &y, self.hyper.clone())
    }
}

/// Expected improvement below `incumbent` (minimization).
pub fn expected_improvement(mean: f64, stddev: f64, incumbent: f64) -> f64 {
    let gain = incumbent - mean;
    if stddev <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / stddev;
    let n = Normal::standard();
    (gain * n.cdf(z) + stddev * n.pdf(z)).max(0.0)
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

pub fn normal_pdf(z: f64) -> f64 {
    Normal::standard().pdf(z)
}

/// Minimize `f` from `start`; returns the best point and value.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, start: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        let v = f(&p);
        simplex.push((p, v));
    }
    let mut evals = n + 1;
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    while evals < max_evals {
        simplex.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)));
        let spread = key(simplex[n].1) - key(simplex[0].1);
        if spread.is_finite() && spread.abs() < 1e-9 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if key(fr) < key(simplex[0].1) {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[n] = if key(fe) < key(fr) { (expanded, fe) } else { (reflected, fr) };
        } else if key(fr) < key(simplex[n - 1].1) {
            simplex[n] = (reflected, fr);
        } else {
            let contracted = if key(fr) < key(simplex[n].1) { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            evals += 1;
            if key(fc) < key(simplex[n].1).min(key(fr)) {
                simplex[n] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = best.iter().zip(&entry.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let v = f(&p);
                    *entry = (p, v);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)));
    let (p, v) = simplex.swap_remove(0);
    (p, v)
}
