//! Exact Gaussian process regression: marginal-likelihood training,
//! predictive mean and covariance, and the age-weighted posterior
//! covariance.
//!
//! All solves go through a Cholesky factor of `K(X, X) + jitter I`; nothing
//! here forms an explicit inverse except the gradient, which needs the
//! whole of `K^-1` for its trace terms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_gram_matrix, gram_matrix, AgeKernelParams, Covariance, KernelForm, KernelParams};
use crate::optim::{minimize, LbfgsConfig};
use crate::rng::{substream, STREAM_OPTIMIZER};
use crate::scalar::Real;

/// Diagonal jitter schedule, relative to the mean of `diag(K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterLadder {
    pub start: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for JitterLadder {
    fn default() -> Self {
        JitterLadder {
            start: 1e-10,
            factor: 10.0,
            max: 1e-4,
        }
    }
}

impl JitterLadder {
    pub fn rungs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut r = self.start;
        // tolerate rounding in the last multiplication
        while r <= self.max * (1.0 + 1e-9) {
            out.push(r);
            r *= self.factor;
            if self.factor <= 1.0 || r <= 0.0 {
                break;
            }
        }
        out
    }
}

/// Cholesky factor of `K + jitter I` together with the jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct Factor<T: Real> {
    chol: Cholesky<T, Dyn>,
    lower: DMatrix<T>,
    jitter: T,
}

impl<T: Real> Factor<T> {
    pub fn new(k: &DMatrix<T>, ladder: &JitterLadder) -> Result<Self> {
        let n = k.nrows();
        let mean_diag = if n == 0 {
            T::one()
        } else {
            k.diagonal().sum() / T::from_usize(n).unwrap()
        };
        let rungs = ladder.rungs();
        for &r in &rungs {
            let jitter = T::lit(r) * mean_diag;
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(kj) {
                if chol.l_dirty().diagonal().iter().all(|d| d.is_finite_val() && *d > T::zero()) {
                    let lower = chol.l();
                    return Ok(Factor { chol, lower, jitter });
                }
            }
        }
        Err(Error::Conditioning {
            jitters: rungs.iter().map(|r| r * mean_diag.as_f64()).collect(),
        })
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn lower(&self) -> &DMatrix<T> {
        &self.lower
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn log_determinant(&self) -> T {
        self.lower.diagonal().iter().fold(T::zero(), |acc, d| acc + d.ln()) * T::lit(2.0)
    }

    fn inverse(&self) -> DMatrix<T> {
        self.chol.inverse()
    }

    fn solve_lower(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.lower
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// How chronological ages are mapped to regression targets. The GP prior
/// has zero mean, so the default leaves ages untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeNormalization {
    #[default]
    None,
    Center,
    Standardize,
}

impl std::str::FromStr for AgeNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AgeNormalization::None),
            "center" => Ok(AgeNormalization::Center),
            "standardize" => Ok(AgeNormalization::Standardize),
            other => Err(Error::contract(format!(
                "unknown age normalization {other:?} (expected none|center|standardize)"
            ))),
        }
    }
}

/// `target = (age - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform<T> {
    pub offset: T,
    pub scale: T,
}

impl<T: Real> TargetTransform<T> {
    pub fn identity() -> Self {
        TargetTransform {
            offset: T::zero(),
            scale: T::one(),
        }
    }

    pub fn fit(ages: &[T], mode: AgeNormalization) -> Self {
        let n = T::from_usize(ages.len().max(1)).unwrap();
        let mean = ages.iter().fold(T::zero(), |a, &b| a + b) / n;
        match mode {
            AgeNormalization::None => Self::identity(),
            AgeNormalization::Center => TargetTransform {
                offset: mean,
                scale: T::one(),
            },
            AgeNormalization::Standardize => {
                let var = ages.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
                let sd = var.sqrt();
                TargetTransform {
                    offset: mean,
                    scale: if sd > T::zero() { sd } else { T::one() },
                }
            }
        }
    }

    pub fn forward(&self, ages: &[T]) -> DVector<T> {
        DVector::from_iterator(ages.len(), ages.iter().map(|&a| (a - self.offset) / self.scale))
    }

    pub fn inverse(&self, t: T) -> T {
        t * self.scale + self.offset
    }
}

fn params_from_log<T: Real>(theta: &DVector<T>) -> KernelParams<T> {
    let k = theta.len() - 1;
    KernelParams {
        length_scales: theta.iter().take(k).map(|v| v.exp()).collect(),
        noise_variance: theta[k].exp(),
    }
}

fn check_training<T: Real>(params: &KernelParams<T>, x: &DMatrix<T>, y: &DVector<T>) -> Result<()> {
    params.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::contract(format!("{} feature rows but {} targets", x.nrows(), y.len())));
    }
    if x.ncols() != params.dim() {
        return Err(Error::contract(format!(
            "{} length scales for {} features",
            params.dim(),
            x.ncols()
        )));
    }
    Ok(())
}

fn lml_from_factor<T: Real>(factor: &Factor<T>, y: &DVector<T>, alpha: &DVector<T>) -> T {
    let m = T::from_usize(y.len()).unwrap();
    let half = T::lit(0.5);
    -half * y.dot(alpha) - half * factor.log_determinant() - half * m * T::two_pi().ln()
}

/// `-1/2 y^T K^-1 y - 1/2 log|K| - m/2 log 2 pi` with `K = K(X, X) + jitter I`.
pub fn log_marginal_likelihood<T: Real>(
    params: &KernelParams<T>,
    form: KernelForm,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ladder: &JitterLadder,
) -> Result<T> {
    check_training(params, x, y)?;
    let k = gram_matrix(&Covariance::new(params.clone(), form), x, None)?;
    let factor = Factor::new(&k, ladder)?;
    let alpha = factor.solve(y);
    Ok(lml_from_factor(&factor, y, &alpha))
}

/// Log marginal likelihood and its gradient with respect to
/// `(log l_1, ..., log l_K, log sigma_n^2)`.
pub fn lml_with_gradient<T: Real>(
    params: &KernelParams<T>,
    form: KernelForm,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ladder: &JitterLadder,
) -> Result<(T, DVector<T>)> {
    check_training(params, x, y)?;
    let k = gram_matrix(&Covariance::new(params.clone(), form), x, None)?;
    let factor = Factor::new(&k, ladder)?;
    let alpha = factor.solve(y);
    let lml = lml_from_factor(&factor, y, &alpha);

    // dL/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK/dtheta)
    let mut w = factor.inverse();
    w.ger(-T::one(), &alpha, &alpha, T::one());
    // w now holds K^-1 - alpha alpha^T, so contributions are negated below.

    let m = x.nrows();
    let dim = params.dim();
    let half = T::lit(0.5);
    let mut grad = DVector::zeros(dim + 1);
    for (kdim, &l) in params.length_scales.iter().enumerate() {
        let mut acc = T::zero();
        for j in 0..m {
            for i in 0..j {
                let d = (x[(i, kdim)] - x[(j, kdim)]) / l;
                let r2 = d * d;
                let dk = match form {
                    KernelForm::Sum => (-half * r2).exp() * r2,
                    KernelForm::Product => k[(i, j)] * r2,
                };
                acc += w[(i, j)] * dk;
            }
        }
        // off-diagonal pairs counted twice, times 1/2
        grad[kdim] = -acc;
    }
    grad[dim] = -half * params.noise_variance * w.trace();
    Ok((lml, grad))
}

pub fn lml_gradient<T: Real>(
    params: &KernelParams<T>,
    form: KernelForm,
    x: &DMatrix<T>,
    y: &DVector<T>,
    ladder: &JitterLadder,
) -> Result<DVector<T>> {
    lml_with_gradient(params, form, x, y, ladder).map(|(_, g)| g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub form: KernelForm,
    pub restarts: usize,
    pub seed: u64,
    /// Initial length scales are drawn log-uniformly from this range, times each feature's std.
    pub length_scale_init: (f64, f64),
    /// Initial noise variance as a fraction of the target variance.
    pub noise_init_fraction: f64,
    pub jitter: JitterLadder,
    pub max_iterations: usize,
    /// Projected-gradient infinity-norm tolerance.
    pub tolerance: f64,
    pub age_normalization: AgeNormalization,
    /// Skip optimization and use these hyperparameters.
    pub fixed_params: Option<KernelParams<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            form: KernelForm::Sum,
            restarts: 5,
            seed: 0,
            length_scale_init: (0.1, 10.0),
            noise_init_fraction: 0.1,
            jitter: JitterLadder::default(),
            max_iterations: 200,
            tolerance: 1e-5,
            age_normalization: AgeNormalization::None,
            fixed_params: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub index: usize,
    pub initial_lml: Option<f64>,
    pub final_lml: Option<f64>,
    pub iterations: usize,
    pub termination: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub restarts: Vec<RestartTrace>,
    pub best_restart: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel<T: Real> {
    x: DMatrix<T>,
    ages: Vec<T>,
    target: TargetTransform<T>,
    targets: DVector<T>,
    params: KernelParams<T>,
    form: KernelForm,
    ladder: JitterLadder,
    factor: Factor<T>,
    alpha: DVector<T>,
    lml: T,
    trace: Option<FitTrace>,
}

#[derive(Clone, Debug)]
pub struct PredictionResult<T> {
    pub y_hat: DVector<T>,
    pub variance: DVector<T>,
    pub full_cov: Option<DMatrix<T>>,
}

#[derive(Clone, Debug)]
pub struct PosteriorCovariance<T> {
    pub variance: DVector<T>,
    pub full_cov: Option<DMatrix<T>>,
}

fn clamp_variance<T: Real>(v: T, prior: T, index: usize) -> Result<T> {
    let tol = T::lit(1e-10).max(T::lit(100.0) * T::EPSILON) * prior.max(T::one());
    if v >= T::zero() {
        Ok(v)
    } else if v >= -tol {
        Ok(T::zero())
    } else {
        Err(Error::NumericalFailure(format!(
            "posterior variance {} at test point {index} is below -{}",
            v.as_f64(),
            tol.as_f64()
        )))
    }
}

/// `prior - cross^T (K + jitter)^-1 cross` via `V = L^-1 cross`.
fn posterior<T: Real>(
    factor: &Factor<T>,
    cross: &DMatrix<T>,
    prior_diag: T,
    prior_full: Option<DMatrix<T>>,
) -> Result<PosteriorCovariance<T>> {
    let v = factor.solve_lower(cross);
    let n = cross.ncols();
    let mut variance = DVector::zeros(n);
    for i in 0..n {
        let col = v.column(i);
        variance[i] = clamp_variance(prior_diag - col.dot(&col), prior_diag, i)?;
    }
    let full_cov = prior_full.map(|mut full| {
        full.gemm_tr(-T::one(), &v, &v, T::one());
        for i in 0..n {
            full[(i, i)] = variance[i];
        }
        full
    });
    Ok(PosteriorCovariance { variance, full_cov })
}

impl<T: Real> TrainedModel<T> {
    /// Builds the model for fixed hyperparameters: factorizes `K(X, X)` and solves for `alpha`.
    pub fn from_params(
        x: DMatrix<T>,
        ages: Vec<T>,
        params: KernelParams<T>,
        form: KernelForm,
        target: TargetTransform<T>,
        ladder: JitterLadder,
    ) -> Result<Self> {
        if ages.len() != x.nrows() {
            return Err(Error::contract(format!("{} ages for {} training rows", ages.len(), x.nrows())));
        }
        let targets = target.forward(&ages);
        check_training(&params, &x, &targets)?;
        let k = gram_matrix(&Covariance::new(params.clone(), form), &x, None)?;
        let factor = Factor::new(&k, &ladder)?;
        let alpha = factor.solve(&targets);
        let lml = lml_from_factor(&factor, &targets, &alpha);
        Ok(TrainedModel {
            x,
            ages,
            target,
            targets,
            params,
            form,
            ladder,
            factor,
            alpha,
            lml,
            trace: None,
        })
    }

    pub fn features(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn ages(&self) -> &[T] {
        &self.ages
    }

    pub fn targets(&self) -> &DVector<T> {
        &self.targets
    }

    pub fn target_transform(&self) -> TargetTransform<T> {
        self.target
    }

    pub fn params(&self) -> &KernelParams<T> {
        &self.params
    }

    pub fn form(&self) -> KernelForm {
        self.form
    }

    pub fn jitter_ladder(&self) -> &JitterLadder {
        &self.ladder
    }

    pub fn factor(&self) -> &Factor<T> {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<T> {
        &self.alpha
    }

    pub fn log_marginal_likelihood(&self) -> T {
        self.lml
    }

    pub fn trace(&self) -> Option<&FitTrace> {
        self.trace.as_ref()
    }

    /// Attaches an optimizer trace, e.g. one restored from a model file.
    pub fn with_trace(mut self, trace: Option<FitTrace>) -> Self {
        self.trace = trace;
        self
    }

    pub fn covariance(&self) -> Covariance<T> {
        Covariance::new(self.params.clone(), self.form)
    }

    fn check_test(&self, x_test: &DMatrix<T>) -> Result<()> {
        if x_test.ncols() != self.x.ncols() {
            return Err(Error::contract(format!(
                "model has {} features, test matrix has {}",
                self.x.ncols(),
                x_test.ncols()
            )));
        }
        Ok(())
    }

    /// Predictive mean (in years) and posterior covariance of the latent targets.
    pub fn predict(&self, x_test: &DMatrix<T>, full_cov: bool) -> Result<PredictionResult<T>> {
        self.check_test(x_test)?;
        let cov = self.covariance();
        let cross = cross_gram_matrix(&cov, &self.x, None, x_test, None)?;
        let mean = cross.tr_mul(&self.alpha);
        let y_hat = mean.map(|t| self.target.inverse(t));
        let prior_full = if full_cov {
            Some(gram_matrix(&cov, x_test, None)?)
        } else {
            None
        };
        let post = posterior(&self.factor, &cross, cov.self_variance(), prior_full)?;
        Ok(PredictionResult {
            y_hat,
            variance: post.variance,
            full_cov: post.full_cov,
        })
    }

    /// Posterior covariance under the age-weighted kernel, with every block
    /// rebuilt from training ages and the test subjects' chronological ages.
    /// Hyperparameters of the feature kernel are the fitted ones.
    pub fn weighted_posterior_cov(
        &self,
        x_test: &DMatrix<T>,
        test_ages: &[T],
        age_params: &AgeKernelParams<T>,
        full_cov: bool,
    ) -> Result<PosteriorCovariance<T>> {
        self.check_test(x_test)?;
        age_params.validate()?;
        if test_ages.len() != x_test.nrows() {
            return Err(Error::contract(format!(
                "{} test ages for {} test rows",
                test_ages.len(),
                x_test.nrows()
            )));
        }
        let cov = Covariance::weighted(self.params.clone(), self.form, *age_params);
        let k_train = gram_matrix(&cov, &self.x, Some(&self.ages))?;
        let factor = Factor::new(&k_train, &self.ladder)?;
        let cross = cross_gram_matrix(&cov, &self.x, Some(&self.ages), x_test, Some(test_ages))?;
        let prior_full = if full_cov {
            Some(gram_matrix(&cov, x_test, Some(test_ages))?)
        } else {
            None
        };
        posterior(&factor, &cross, cov.self_variance(), prior_full)
    }
}

fn column_std<T: Real>(x: &DMatrix<T>) -> Vec<T> {
    let n = T::from_usize(x.nrows()).unwrap();
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let sd = var.sqrt();
            if sd > T::zero() {
                sd
            } else {
                T::one()
            }
        })
        .collect()
}

/// Maximizes the log marginal likelihood over `(l, sigma_n^2)` from several
/// random starting points and keeps the best restart (lowest index on ties).
pub fn fit<T: Real>(x: &DMatrix<T>, ages: &[T], config: &FitConfig) -> Result<TrainedModel<T>> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::contract(format!("need at least 2 training subjects, got {m}")));
    }
    if ages.len() != m {
        return Err(Error::contract(format!("{} ages for {m} training rows", ages.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::contract("training matrix has no features"));
    }
    if !x.iter().chain(ages.iter()).all(|v| v.is_finite_val()) {
        return Err(Error::contract("training data contains non-finite values"));
    }
    if config.restarts == 0 {
        return Err(Error::contract("restarts must be >= 1"));
    }
    let target = TargetTransform::fit(ages, config.age_normalization);

    if let Some(fixed) = &config.fixed_params {
        return TrainedModel::from_params(
            x.clone(),
            ages.to_vec(),
            fixed.cast(),
            config.form,
            target,
            config.jitter.clone(),
        );
    }

    let y = target.forward(ages);
    let dim = x.ncols();
    let stds = column_std(x);
    let y_mean = y.mean();
    let y_var = y.iter().fold(T::zero(), |a, &v| a + (v - y_mean) * (v - y_mean)) / T::from_usize(m).unwrap();
    let y_var = if y_var > T::zero() { y_var } else { T::one() };

    let mut lower = DVector::zeros(dim + 1);
    let mut upper = DVector::zeros(dim + 1);
    for (k, s) in stds.iter().enumerate() {
        lower[k] = (T::lit(1e-3) * *s).ln();
        upper[k] = (T::lit(1e5) * *s).ln();
    }
    let signal = KernelParams {
        length_scales: stds.clone(),
        noise_variance: T::zero(),
    }
    .signal_variance(config.form);
    lower[dim] = T::lit(1e-10).max(T::lit(1e-4) * T::EPSILON.sqrt()).ln();
    upper[dim] = (T::lit(10.0) * y_var.max(signal)).ln();

    let lbfgs = LbfgsConfig {
        max_iterations: config.max_iterations,
        gradient_tolerance: config.tolerance,
        ..LbfgsConfig::default()
    };
    let (lo_init, hi_init) = config.length_scale_init;
    if !(lo_init > 0.0 && hi_init >= lo_init) {
        return Err(Error::contract("length_scale_init must satisfy 0 < lo <= hi"));
    }

    let outcomes: Vec<(RestartTrace, Option<(KernelParams<T>, T)>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(config.seed, STREAM_OPTIMIZER, r as u64);
            let mut theta0 = DVector::zeros(dim + 1);
            for (k, s) in stds.iter().enumerate() {
                let u: f64 = rng.random_range(lo_init.log10()..=hi_init.log10());
                theta0[k] = s.ln() + T::lit(u * std::f64::consts::LN_10);
            }
            theta0[dim] = (T::lit(config.noise_init_fraction) * y_var).ln();
            for i in 0..=dim {
                theta0[i] = theta0[i].clamp(lower[i], upper[i]);
            }
            let mut initial = None;
            let objective = |theta: &DVector<T>| {
                let p = params_from_log(theta);
                let (l, g) = lml_with_gradient(&p, config.form, x, &y, &config.jitter)?;
                if initial.is_none() {
                    initial = Some(l.as_f64());
                }
                Ok((-l, -g))
            };
            match minimize(objective, theta0, &lower, &upper, &lbfgs) {
                Ok(min) => {
                    let lml = -min.value;
                    (
                        RestartTrace {
                            index: r,
                            initial_lml: initial,
                            final_lml: Some(lml.as_f64()),
                            iterations: min.iterations,
                            termination: Some(format!("{:?}", min.termination)),
                            error: None,
                        },
                        Some((params_from_log(&min.x), lml)),
                    )
                }
                Err(e) => (
                    RestartTrace {
                        index: r,
                        initial_lml: initial,
                        final_lml: None,
                        iterations: 0,
                        termination: None,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();

    let mut best: Option<(usize, T)> = None;
    for (r, (_, res)) in outcomes.iter().enumerate() {
        if let Some((_, lml)) = res {
            if best.is_none_or(|(_, b)| *lml > b) {
                best = Some((r, *lml));
            }
        }
    }
    let traces: Vec<RestartTrace> = outcomes.iter().map(|(t, _)| t.clone()).collect();
    let Some((best_idx, _)) = best else {
        let reasons: Vec<String> = traces.iter().filter_map(|t| t.error.clone()).collect();
        return Err(Error::Fit(format!("all {} restarts failed: {}", config.restarts, reasons.join("; "))));
    };
    let params = outcomes[best_idx].1.as_ref().unwrap().0.clone();
    let mut model = TrainedModel::from_params(x.clone(), ages.to_vec(), params, config.form, target, config.jitter.clone())?;
    model.trace = Some(FitTrace {
        restarts: traces,
        best_restart: Some(best_idx),
    });
    Ok(model)
}
