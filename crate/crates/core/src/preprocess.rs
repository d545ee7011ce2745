//! Feature standardization and PCA, fitted on training data only.
//!
//! Both transforms use population (divide-by-n) moments. PCA is computed
//! from the SVD of the centered matrix; each component's sign is fixed so
//! that its largest-magnitude loading is positive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub means: Vec<T>,
    pub std_devs: Vec<T>,
}

impl<T: Real> Standardizer<T> {
    /// `names` labels columns in the constant-column error; indices are used when absent.
    pub fn fit(train: &DMatrix<T>, names: Option<&[String]>) -> Result<Self> {
        let n = train.nrows();
        if n < 2 {
            return Err(Error::contract(format!("standardizer needs at least 2 rows, got {n}")));
        }
        let nf = T::from_usize(n).unwrap();
        let mut means = Vec::with_capacity(train.ncols());
        let mut std_devs = Vec::with_capacity(train.ncols());
        for (j, col) in train.column_iter().enumerate() {
            let mean = col.sum() / nf;
            let var = col.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let sd = var.sqrt();
            let floor = T::lit(16.0) * T::EPSILON * mean.abs();
            if !(sd > floor) {
                let column = names
                    .and_then(|n| n.get(j).cloned())
                    .unwrap_or_else(|| format!("#{j}"));
                return Err(Error::ConstantColumn { column });
            }
            means.push(mean);
            std_devs.push(sd);
        }
        Ok(Standardizer { means, std_devs })
    }

    pub fn apply(&self, features: &DMatrix<T>) -> Result<DMatrix<T>> {
        if features.ncols() != self.means.len() {
            return Err(Error::contract(format!(
                "standardizer fitted on {} columns, got {}",
                self.means.len(),
                features.ncols()
            )));
        }
        Ok(DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.means[j]) / self.std_devs[j]
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaTransform<T: Real> {
    pub mean: Vec<T>,
    /// `n_components x n_features`, orthonormal rows.
    pub components: DMatrix<T>,
    /// Population variance along each component, descending.
    pub explained_variance: Vec<T>,
}

/// Component count used when PCA is requested without an explicit size.
pub const DEFAULT_PCA_COMPONENTS: usize = 50;

impl<T: Real> PcaTransform<T> {
    pub fn fit(train: &DMatrix<T>, n_components: usize) -> Result<Self> {
        let (n, d) = train.shape();
        let limit = n.saturating_sub(1).min(d);
        if n_components == 0 || n_components > limit {
            return Err(Error::contract(format!(
                "cannot keep {n_components} principal components from {n} rows x {d} features (max {limit})"
            )));
        }
        let nf = T::from_usize(n).unwrap();
        let mean: Vec<T> = train.column_iter().map(|c| c.sum() / nf).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| train[(i, j)] - mean[j]);
        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut components = DMatrix::zeros(n_components, d);
        let mut explained_variance = Vec::with_capacity(n_components);
        for (r, &idx) in order.iter().take(n_components).enumerate() {
            let row = v_t.row(idx);
            let pivot = row.iter().fold(T::zero(), |best, &v| if v.abs() > best.abs() { v } else { best });
            let sign = if pivot < T::zero() { -T::one() } else { T::one() };
            for j in 0..d {
                components[(r, j)] = row[j] * sign;
            }
            let s = svd.singular_values[idx];
            explained_variance.push(s * s / nf);
        }
        Ok(PcaTransform {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn project(&self, features: &DMatrix<T>) -> Result<DMatrix<T>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::contract(format!(
                "PCA fitted on {} columns, got {}",
                self.mean.len(),
                features.ncols()
            )));
        }
        let centered = DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| features[(i, j)] - self.mean[j]);
        Ok(centered * self.components.transpose())
    }

    /// Maps component scores back to the original (un-centered) feature space.
    pub fn reconstruct(&self, scores: &DMatrix<T>) -> Result<DMatrix<T>> {
        if scores.ncols() != self.n_components() {
            return Err(Error::contract("score matrix width differs from component count"));
        }
        let mut out = scores * &self.components;
        for mut row in out.row_iter_mut() {
            row += DVector::from_column_slice(&self.mean).transpose();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub standardize: bool,
    pub pca_components: Option<usize>,
}

/// Standardize-then-PCA chain; either stage may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor<T: Real> {
    pub standardizer: Option<Standardizer<T>>,
    pub pca: Option<PcaTransform<T>>,
}

impl<T: Real> Preprocessor<T> {
    pub fn identity() -> Self {
        Preprocessor {
            standardizer: None,
            pca: None,
        }
    }

    pub fn fit(train: &DMatrix<T>, names: Option<&[String]>, config: &PreprocessConfig) -> Result<Self> {
        let standardizer = if config.standardize {
            Some(Standardizer::fit(train, names)?)
        } else {
            None
        };
        let pca = match config.pca_components {
            Some(k) => {
                let input = match &standardizer {
                    Some(s) => s.apply(train)?,
                    None => train.clone(),
                };
                Some(PcaTransform::fit(&input, k)?)
            }
            None => None,
        };
        Ok(Preprocessor { standardizer, pca })
    }

    pub fn transform(&self, features: &DMatrix<T>) -> Result<DMatrix<T>> {
        let mut out = match &self.standardizer {
            Some(s) => s.apply(features)?,
            None => features.clone(),
        };
        if let Some(p) = &self.pca {
            out = p.project(&out)?;
        }
        Ok(out)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.pca.as_ref().map_or(input_dim, |p| p.n_components())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn standardizes_with_population_sigma() {
        let t = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let s = Standardizer::fit(&t, None).unwrap();
        let z = s.apply(&t).unwrap();
        let expected = 1.5f64.sqrt();
        assert_relative_eq!(z[(0, 0)], -expected, epsilon = 1e-12);
        assert_eq!(z[(1, 0)], 0.0);
        assert_relative_eq!(z[(2, 0)], 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn constant_column_is_named() {
        let t = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let names = vec!["v1".to_string(), "v2".to_string()];
        match Standardizer::fit(&t, Some(&names)) {
            Err(Error::ConstantColumn { column }) => assert_eq!(column, "v2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn training_mean_maps_to_zero() {
        let t = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 14.0, 3.0, 11.0, 6.0, 9.0]);
        let s = Standardizer::fit(&t, None).unwrap();
        let row = DMatrix::from_row_slice(1, 2, &[s.means[0], s.means[1]]);
        assert_eq!(s.apply(&row).unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn collinear_points_have_one_component() {
        let t = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0, -1.5, -3.0]);
        let p = PcaTransform::fit(&t, 2).unwrap();
        assert!(p.explained_variance[1] <= 1e-12);
        assert_relative_eq!(p.components[(0, 1)], 2.0 / 5f64.sqrt(), epsilon = 1e-12);
        assert!(p.components[(0, 1)] > 0.0);
    }

    #[test]
    fn too_many_components_is_contract_error() {
        let t = DMatrix::from_fn(3, 5, |i, j| (i * j) as f64 + (j as f64).sin());
        assert!(matches!(PcaTransform::fit(&t, 3), Err(Error::Contract(_))));
        assert!(PcaTransform::fit(&t, 2).is_ok());
    }

    #[test]
    fn full_rank_reconstruction_recovers_data() {
        let t = DMatrix::from_fn(7, 3, |i, j| ((i * 5 + j * 3) % 7) as f64 - 0.3 * j as f64);
        let p = PcaTransform::fit(&t, 3).unwrap();
        let back = p.reconstruct(&p.project(&t).unwrap()).unwrap();
        assert!((&back - &t).amax() < 1e-8);
        let cct = &p.components * p.components.transpose();
        assert!((cct - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn chain_standardizes_before_pca() {
        let t = DMatrix::from_fn(8, 3, |i, j| (i as f64 + 1.0).powi(j as i32 + 1) * 0.1);
        let cfg = PreprocessConfig {
            standardize: true,
            pca_components: Some(2),
        };
        let pre = Preprocessor::fit(&t, None, &cfg).unwrap();
        let direct = pre.pca.as_ref().unwrap().project(&pre.standardizer.as_ref().unwrap().apply(&t).unwrap()).unwrap();
        assert_eq!(pre.transform(&t).unwrap(), direct);
        assert_eq!(pre.output_dim(3), 2);
    }
}
