//! Per-subject abnormality metrics and cross-validated fit quality.
//!
//! A [`NormativeModel`] bundles the preprocessing chain with a trained GP.
//! Scoring a cohort yields, per subject, the prediction error
//! `epsilon = y_hat - y`, the posterior variance `cov`, and the age-weighted
//! posterior variance `cov_w`. Larger is more abnormal for all three.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, FitConfig, TargetTransform, TrainedModel};
use crate::io::{Cohort, FitMetadata, ModelArtifact, PcaRecord, ScoreTable, MODEL_FORMAT_VERSION};
use crate::kernels::AgeKernelParams;
use crate::preprocess::{PcaTransform, PreprocessConfig, Preprocessor, Standardizer};
use crate::rng::{substream, STREAM_FOLDS};
use crate::scalar::Real;

/// `y_hat - y`, signed: positive means the subject looks older than they are.
pub fn prediction_error<T: Real>(y_hat: &[T], y: &[T]) -> Result<Vec<T>> {
    if y_hat.len() != y.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ages",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(y_hat.iter().zip(y).map(|(&p, &a)| p - a).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScores<T> {
    pub y_hat: Vec<T>,
    pub epsilon: Vec<T>,
    pub cov_score: Vec<T>,
    pub cov_w_score: Vec<T>,
    pub age_length_scale_used: T,
    pub age_noise_used: T,
}

impl<T: Real> AnomalyScores<T> {
    pub fn to_table(&self, cohort: &Cohort) -> Result<ScoreTable> {
        if cohort.len() != self.epsilon.len() {
            return Err(Error::contract("score count differs from cohort size"));
        }
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let table = ScoreTable {
            ids: cohort.subject_ids.clone(),
            age: cohort.age.clone(),
            diagnosis: cohort
                .diagnosis
                .clone()
                .unwrap_or_else(|| vec![String::new(); cohort.len()]),
            y_hat: f(&self.y_hat),
            epsilon: f(&self.epsilon),
            cov: f(&self.cov_score),
            cov_w: f(&self.cov_w_score),
        };
        table.validate()?;
        Ok(table)
    }
}

fn to_matrix<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::lit)
}

fn rows_to_matrix<T: Real>(rows: &[Vec<f64>], ncols: usize) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| T::lit(rows[i][j]))
}

/// A preprocessing chain plus a GP trained on healthy subjects.
#[derive(Clone, Debug)]
pub struct NormativeModel<T: Real> {
    pub feature_names: Vec<String>,
    pub preprocessor: Preprocessor<T>,
    pub gp: TrainedModel<T>,
    pub config: ModelConfig,
}

impl<T: Real> NormativeModel<T> {
    pub fn train(cohort: &Cohort, config: &ModelConfig) -> Result<Self> {
        cohort.validate()?;
        let ages: Vec<T> = cohort.age.iter().map(|&a| T::lit(a)).collect();
        Self::train_matrix(&to_matrix(&cohort.features), &cohort.feature_names, &ages, config)
    }

    pub fn train_matrix(
        features: &DMatrix<T>,
        feature_names: &[String],
        ages: &[T],
        config: &ModelConfig,
    ) -> Result<Self> {
        if feature_names.len() != features.ncols() {
            return Err(Error::contract("feature name count differs from feature columns"));
        }
        let preprocessor = Preprocessor::fit(features, Some(feature_names), &config.preprocess)?;
        let x = preprocessor.transform(features)?;
        let gp = gp::fit(&x, ages, &config.fit)?;
        Ok(NormativeModel {
            feature_names: feature_names.to_vec(),
            preprocessor,
            gp,
            config: config.clone(),
        })
    }

    /// Cohort features in model column order, converted and preprocessed.
    pub fn model_inputs(&self, cohort: &Cohort) -> Result<DMatrix<T>> {
        let cols: Vec<usize> = self
            .feature_names
            .iter()
            .map(|name| {
                cohort
                    .feature_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Schema(format!("cohort lacks model feature {name:?}")))
            })
            .collect::<Result<_>>()?;
        let raw = DMatrix::from_fn(cohort.len(), cols.len(), |i, j| T::lit(cohort.features[(i, cols[j])]));
        self.preprocessor.transform(&raw)
    }

    pub fn predict_cohort(&self, cohort: &Cohort) -> Result<gp::PredictionResult<T>> {
        let x = self.model_inputs(cohort)?;
        self.gp.predict(&x, false)
    }

    pub fn score(&self, cohort: &Cohort, age_params: &AgeKernelParams<T>) -> Result<AnomalyScores<T>> {
        cohort.validate()?;
        let x = self.model_inputs(cohort)?;
        let ages: Vec<T> = cohort.age.iter().map(|&a| T::lit(a)).collect();
        let pred = self.gp.predict(&x, false)?;
        let weighted = self.gp.weighted_posterior_cov(&x, &ages, age_params, false)?;
        let y_hat: Vec<T> = pred.y_hat.iter().copied().collect();
        Ok(AnomalyScores {
            epsilon: prediction_error(&y_hat, &ages)?,
            y_hat,
            cov_score: pred.variance.iter().copied().collect(),
            cov_w_score: weighted.variance.iter().copied().collect(),
            age_length_scale_used: age_params.length_scale,
            age_noise_used: age_params.noise_variance,
        })
    }

    pub fn to_artifact(&self) -> ModelArtifact {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let x = self.gp.features();
        let t = self.gp.target_transform();
        ModelArtifact {
            format_version: MODEL_FORMAT_VERSION,
            feature_names: self.feature_names.clone(),
            standardizer: self.preprocessor.standardizer.as_ref().map(|s| Standardizer {
                means: f(&s.means),
                std_devs: f(&s.std_devs),
            }),
            pca: self.preprocessor.pca.as_ref().map(|p| PcaRecord {
                mean: f(&p.mean),
                components: p.components.row_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect(),
                explained_variance: f(&p.explained_variance),
            }),
            training_features: x.row_iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect(),
            training_ages: f(self.gp.ages()),
            age_transform: TargetTransform {
                offset: t.offset.as_f64(),
                scale: t.scale.as_f64(),
            },
            kernel_params: self.gp.params().cast(),
            kernel_form: self.gp.form(),
            jitter: self.gp.jitter_ladder().clone(),
            fit_metadata: FitMetadata {
                log_marginal_likelihood: self.gp.log_marginal_likelihood().as_f64(),
                restarts_used: self.gp.trace().map_or(0, |t| t.restarts.len()),
                trace: self.gp.trace().cloned(),
                config: self.config.clone(),
            },
        }
    }

    /// Rebuilds the model; the factorization is recomputed deterministically
    /// from the stored hyperparameters, so scores match the original model.
    pub fn from_artifact(a: &ModelArtifact) -> Result<Self> {
        a.validate()?;
        let g = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let input_dim = a.feature_names.len();
        let dim = a.kernel_params.dim();
        let preprocessor = Preprocessor {
            standardizer: a.standardizer.as_ref().map(|s| Standardizer {
                means: g(&s.means),
                std_devs: g(&s.std_devs),
            }),
            pca: a.pca.as_ref().map(|p| PcaTransform {
                mean: g(&p.mean),
                components: rows_to_matrix(&p.components, input_dim),
                explained_variance: g(&p.explained_variance),
            }),
        };
        let gp = TrainedModel::from_params(
            rows_to_matrix(&a.training_features, dim),
            g(&a.training_ages),
            a.kernel_params.cast(),
            a.kernel_form,
            TargetTransform {
                offset: T::lit(a.age_transform.offset),
                scale: T::lit(a.age_transform.scale),
            },
            a.jitter.clone(),
        )?
        .with_trace(a.fit_metadata.trace.clone());
        Ok(NormativeModel {
            feature_names: a.feature_names.clone(),
            preprocessor,
            gp,
            config: a.fit_metadata.config.clone(),
        })
    }
}

pub fn score_cohort<T: Real>(
    model: &NormativeModel<T>,
    cohort: &Cohort,
    age_params: &AgeKernelParams<T>,
) -> Result<AnomalyScores<T>> {
    model.score(cohort, age_params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldQuality {
    pub n: usize,
    pub mae: f64,
    /// `None` when the held-out ages are constant.
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitQualityReport {
    pub folds: usize,
    /// Mean absolute error over pooled out-of-fold predictions, in years.
    pub mae: f64,
    /// Coefficient of determination over pooled out-of-fold predictions.
    pub r2: f64,
    pub per_fold: Vec<FoldQuality>,
    /// Indices of folds whose held-out ages were constant.
    pub degenerate_folds: Vec<usize>,
    /// Out-of-fold prediction for every subject, in input order.
    pub predictions: Vec<f64>,
}

fn mae_r2(pred: &[f64], truth: &[f64]) -> (f64, Option<f64>) {
    let n = truth.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    (mae, r2)
}

/// Shuffled fold assignment: position `p` in the permutation goes to fold `p % folds`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, STREAM_FOLDS, 0));
    let mut fold = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        fold[i] = p % folds;
    }
    fold
}

/// K-fold cross-validation of the full pipeline (preprocessing refit per
/// fold). Fold assignment is seeded from `config.fit.seed`.
pub fn cross_validated_quality<T: Real>(
    features: &DMatrix<T>,
    feature_names: &[String],
    ages: &[T],
    folds: usize,
    config: &ModelConfig,
) -> Result<FitQualityReport> {
    let m = features.nrows();
    if folds < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {folds}")));
    }
    if m < folds {
        return Err(Error::contract(format!("{folds} folds for {m} subjects")));
    }
    if ages.len() != m {
        return Err(Error::contract(format!("{} ages for {m} rows", ages.len())));
    }
    let assignment = fold_assignment(m, folds, config.fit.seed);
    let mut predictions = vec![0.0; m];
    let mut per_fold = Vec::with_capacity(folds);
    let mut degenerate = Vec::new();
    for f in 0..folds {
        let test: Vec<usize> = (0..m).filter(|&i| assignment[i] == f).collect();
        let train: Vec<usize> = (0..m).filter(|&i| assignment[i] != f).collect();
        let train_ages: Vec<T> = train.iter().map(|&i| ages[i]).collect();
        let model = NormativeModel::train_matrix(&features.select_rows(&train), feature_names, &train_ages, config)?;
        let x_test = model.preprocessor.transform(&features.select_rows(&test))?;
        let pred = model.gp.predict(&x_test, false)?;
        let p: Vec<f64> = pred.y_hat.iter().map(|v| v.as_f64()).collect();
        let t: Vec<f64> = test.iter().map(|&i| ages[i].as_f64()).collect();
        for (&i, &v) in test.iter().zip(&p) {
            predictions[i] = v;
        }
        let (mae, r2) = mae_r2(&p, &t);
        if r2.is_none() {
            degenerate.push(f);
        }
        per_fold.push(FoldQuality { n: test.len(), mae, r2 });
    }
    let truth: Vec<f64> = ages.iter().map(|a| a.as_f64()).collect();
    let (mae, r2) = mae_r2(&predictions, &truth);
    Ok(FitQualityReport {
        folds,
        mae,
        r2: r2.unwrap_or(f64::NAN),
        per_fold,
        degenerate_folds: degenerate,
        predictions,
    })
}
