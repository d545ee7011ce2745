//! Covariance functions over feature vectors and chronological ages.
//!
//! The feature kernel comes in two shapes selected by [`KernelForm`]:
//!
//! * `Sum`: `sum_k exp(-d_k^2 / 2 l_k^2) + sigma_n^2 [same]`, an additive
//!   squared-exponential kernel with one length scale per feature.
//! * `Product`: `exp(-sum_k d_k^2 / 2 l_k^2) + sigma_n^2 [same]`, the usual
//!   ARD squared exponential.
//!
//! The age-similarity term `s(y_i, y_j) = exp(-(y_i - y_j)^2 / 2 l_y^2) +
//! sigma_y^2 [same]` multiplies the feature kernel to form the age-weighted
//! kernel. In both noise terms `[same]` means "same sample index", never
//! "equal values"; duplicated subjects therefore do not double-count noise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelForm {
    #[default]
    Sum,
    Product,
}

impl std::str::FromStr for KernelForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(KernelForm::Sum),
            "product" => Ok(KernelForm::Product),
            other => Err(Error::contract(format!(
                "unknown kernel form {other:?} (expected sum|product)"
            ))),
        }
    }
}

impl std::fmt::Display for KernelForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelForm::Sum => "sum",
            KernelForm::Product => "product",
        })
    }
}

/// Feature-kernel hyperparameters: one length scale per feature plus the
/// noise variance added on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    pub length_scales: Vec<T>,
    pub noise_variance: T,
}

impl<T: Real> KernelParams<T> {
    pub fn new(length_scales: Vec<T>, noise_variance: T) -> Result<Self> {
        let params = KernelParams {
            length_scales,
            noise_variance,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty() {
            return Err(Error::contract("kernel needs at least one length scale"));
        }
        if let Some((k, l)) = self
            .length_scales
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite_val() && **l > T::zero()))
        {
            return Err(Error::contract(format!(
                "length scale {k} must be finite and positive, got {}",
                l.as_f64()
            )));
        }
        if !(self.noise_variance.is_finite_val() && self.noise_variance >= T::zero()) {
            return Err(Error::contract(format!(
                "noise variance must be finite and non-negative, got {}",
                self.noise_variance.as_f64()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Prior variance of a sample with itself, excluding the noise term.
    pub fn signal_variance(&self, form: KernelForm) -> T {
        match form {
            KernelForm::Sum => T::from_usize(self.dim()).unwrap(),
            KernelForm::Product => T::one(),
        }
    }

    pub fn cast<U: Real>(&self) -> KernelParams<U> {
        KernelParams {
            length_scales: self
                .length_scales
                .iter()
                .map(|l| U::lit(l.as_f64()))
                .collect(),
            noise_variance: U::lit(self.noise_variance.as_f64()),
        }
    }
}

/// Age-similarity hyperparameters. `length_scale` may be `+inf`, in which
/// case the exponential factor is exactly one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgeKernelParams<T> {
    pub length_scale: T,
    pub noise_variance: T,
}

impl<T: Real> AgeKernelParams<T> {
    pub fn new(length_scale: T, noise_variance: T) -> Result<Self> {
        let p = AgeKernelParams {
            length_scale,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    /// `l_y = inf`, `sigma_y^2 = 0`: the weighted kernel collapses to the plain one.
    pub fn unweighted() -> Self {
        AgeKernelParams {
            length_scale: T::INFINITY,
            noise_variance: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > T::zero()) {
            return Err(Error::contract(format!(
                "age length scale must be > 0 or inf, got {}",
                self.length_scale.as_f64()
            )));
        }
        if !(self.noise_variance.is_finite_val() && self.noise_variance >= T::zero()) {
            return Err(Error::contract(format!(
                "age noise variance must be finite and non-negative, got {}",
                self.noise_variance.as_f64()
            )));
        }
        Ok(())
    }
}

fn check_dims<T: Real>(xi: &[T], xj: &[T], params: &KernelParams<T>) -> Result<()> {
    if xi.len() != params.dim() || xj.len() != params.dim() {
        return Err(Error::contract(format!(
            "kernel expects {} features, got {} and {}",
            params.dim(),
            xi.len(),
            xj.len()
        )));
    }
    Ok(())
}

/// Noise-free part of the feature kernel. Distances are taken per dimension.
#[inline]
pub(crate) fn feature_similarity<T: Real>(
    xi: impl Iterator<Item = T>,
    xj: impl Iterator<Item = T>,
    length_scales: &[T],
    form: KernelForm,
) -> T {
    let half = T::lit(0.5);
    let scaled = xi
        .zip(xj)
        .zip(length_scales)
        .map(|((a, b), &l)| {
            let d = (a - b) / l;
            half * d * d
        });
    match form {
        KernelForm::Sum => scaled.fold(T::zero(), |acc, q| acc + (-q).exp()),
        KernelForm::Product => (-scaled.fold(T::zero(), |acc, q| acc + q)).exp(),
    }
}

#[inline]
fn noise_term<T: Real>(variance: T, same_sample: bool) -> T {
    if same_sample {
        variance
    } else {
        T::zero()
    }
}

pub fn kernel_value<T: Real>(
    xi: &[T],
    xj: &[T],
    params: &KernelParams<T>,
    same_sample: bool,
    form: KernelForm,
) -> Result<T> {
    check_dims(xi, xj, params)?;
    Ok(feature_similarity(
        xi.iter().copied(),
        xj.iter().copied(),
        &params.length_scales,
        form,
    ) + noise_term(params.noise_variance, same_sample))
}

#[inline]
pub fn age_similarity<T: Real>(yi: T, yj: T, params: &AgeKernelParams<T>, same_sample: bool) -> T {
    let base = if params.length_scale.is_infinite_val() {
        T::one()
    } else {
        let d = (yi - yj) / params.length_scale;
        (-T::lit(0.5) * d * d).exp()
    };
    base + noise_term(params.noise_variance, same_sample)
}

#[allow(clippy::too_many_arguments)]
pub fn weighted_kernel_value<T: Real>(
    xi: &[T],
    xj: &[T],
    yi: T,
    yj: T,
    kernel: &KernelParams<T>,
    age: &AgeKernelParams<T>,
    same_sample: bool,
    form: KernelForm,
) -> Result<T> {
    Ok(age_similarity(yi, yj, age, same_sample) * kernel_value(xi, xj, kernel, same_sample, form)?)
}

/// A fully specified covariance function: feature kernel, its form, and an
/// optional age weighting. Gram matrices are assembled from this.
#[derive(Clone, Debug)]
pub struct Covariance<T> {
    pub params: KernelParams<T>,
    pub form: KernelForm,
    pub age: Option<AgeKernelParams<T>>,
}

impl<T: Real> Covariance<T> {
    pub fn new(params: KernelParams<T>, form: KernelForm) -> Self {
        Covariance {
            params,
            form,
            age: None,
        }
    }

    pub fn weighted(params: KernelParams<T>, form: KernelForm, age: AgeKernelParams<T>) -> Self {
        Covariance {
            params,
            form,
            age: Some(age),
        }
    }

    #[inline]
    fn entry(
        &self,
        a: &DMatrix<T>,
        i: usize,
        b: &DMatrix<T>,
        j: usize,
        ages: Option<(T, T)>,
        same: bool,
    ) -> T {
        let k = feature_similarity(
            a.row(i).iter().copied(),
            b.row(j).iter().copied(),
            &self.params.length_scales,
            self.form,
        ) + noise_term(self.params.noise_variance, same);
        match (&self.age, ages) {
            (Some(ap), Some((yi, yj))) => age_similarity(yi, yj, ap, same) * k,
            _ => k,
        }
    }

    /// Prior variance `k(x, x)` of a sample with itself (noise terms included).
    pub fn self_variance(&self) -> T {
        let k = self.params.signal_variance(self.form) + self.params.noise_variance;
        match &self.age {
            Some(ap) => (T::one() + ap.noise_variance) * k,
            None => k,
        }
    }

    fn check_inputs(&self, x: &DMatrix<T>, ages: Option<&[T]>, what: &str) -> Result<()> {
        if x.ncols() != self.params.dim() {
            return Err(Error::contract(format!(
                "{what}: kernel expects {} features, matrix has {}",
                self.params.dim(),
                x.ncols()
            )));
        }
        match (&self.age, ages) {
            (Some(_), Some(y)) if y.len() != x.nrows() => Err(Error::contract(format!(
                "{what}: {} ages for {} rows",
                y.len(),
                x.nrows()
            ))),
            (Some(_), None) => Err(Error::contract(format!(
                "{what}: age-weighted kernel needs ages"
            ))),
            (None, Some(_)) => Err(Error::contract(format!(
                "{what}: ages supplied to an unweighted kernel"
            ))),
            _ => Ok(()),
        }
    }
}

/// `K(X, X)`: the Gram matrix of a sample set with itself. The noise terms
/// land on the diagonal only, and the result is exactly symmetric.
pub fn gram_matrix<T: Real>(cov: &Covariance<T>, x: &DMatrix<T>, ages: Option<&[T]>) -> Result<DMatrix<T>> {
    cov.check_inputs(x, ages, "gram_matrix")?;
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let y = ages.map(|y| (y[i], y[j]));
            let v = cov.entry(x, i, x, j, y, i == j);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `K(A, B)` between two distinct sample sets; never receives a noise term.
pub fn cross_gram_matrix<T: Real>(
    cov: &Covariance<T>,
    a: &DMatrix<T>,
    ages_a: Option<&[T]>,
    b: &DMatrix<T>,
    ages_b: Option<&[T]>,
) -> Result<DMatrix<T>> {
    cov.check_inputs(a, ages_a, "cross_gram_matrix (rows)")?;
    cov.check_inputs(b, ages_b, "cross_gram_matrix (columns)")?;
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let y = match (ages_a, ages_b) {
                (Some(ya), Some(yb)) => Some((ya[i], yb[j])),
                _ => None,
            };
            k[(i, j)] = cov.entry(a, i, b, j, y, false);
        }
    }
    Ok(k)
}
