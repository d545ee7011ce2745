//! Synthetic cohorts with a known deviation structure.
//!
//! Healthy feature k follows `f_k(t) = a_k t + b_k tanh((t - c_k) / s_k)`
//! of normalized age `t = (age - lo) / (hi - lo)`, plus Gaussian noise.
//! `a_k` and `b_k` share a sign so each trajectory is monotone; signs are
//! mixed across features. Diseased subjects are displaced by
//! `magnitude * noise_std` in feature space according to the mode.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Cohort, Sex};
use crate::rng::{substream, Rng, STREAM_SYNTH_SUBJECTS, STREAM_SYNTH_TRAJECTORY};

pub const HEALTHY_LABEL: &str = "HC";
pub const DISEASE_LABEL: &str = "DX";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMode {
    #[default]
    None,
    /// Moved forward along the healthy trajectory: looks older.
    AcceleratedAging,
    /// Moved off the trajectory, perpendicular to its local tangent.
    Orthogonal,
    /// Looks like a healthy subject of a different age, older or younger.
    AgeConditional,
}

impl FromStr for DeviationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "none" => Ok(DeviationMode::None),
            "accelerated_aging" | "accelerated" => Ok(DeviationMode::AcceleratedAging),
            "orthogonal" => Ok(DeviationMode::Orthogonal),
            "age_conditional" => Ok(DeviationMode::AgeConditional),
            _ => Err(Error::contract(format!(
                "unknown deviation mode {s:?} (none|accelerated_aging|orthogonal|age_conditional)"
            ))),
        }
    }
}

impl fmt::Display for DeviationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviationMode::None => "none",
            DeviationMode::AcceleratedAging => "accelerated_aging",
            DeviationMode::Orthogonal => "orthogonal",
            DeviationMode::AgeConditional => "age_conditional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_healthy: usize,
    pub n_diseased: usize,
    pub n_features: usize,
    pub age_range: (f64, f64),
    pub deviation_mode: DeviationMode,
    /// In units of `noise_std`.
    pub deviation_magnitude: f64,
    pub noise_std: f64,
    /// Subject draws (ages, sex, noise, deviation directions).
    pub seed: u64,
    /// Trajectory coefficients; kept apart from `seed` so train and test
    /// cohorts drawn with different seeds share one healthy population.
    pub trajectory_seed: u64,
}

pub const DEFAULT_TRAJECTORY_SEED: u64 = 2018;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_healthy: 500,
            n_diseased: 0,
            n_features: 6,
            age_range: (20.0, 90.0),
            deviation_mode: DeviationMode::None,
            deviation_magnitude: 4.0,
            noise_std: 0.1,
            seed: 0,
            trajectory_seed: DEFAULT_TRAJECTORY_SEED,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_healthy + self.n_diseased == 0 {
            return Err(Error::contract("synthetic cohort needs at least one subject"));
        }
        if self.n_features == 0 {
            return Err(Error::contract("synthetic cohort needs at least one feature"));
        }
        if self.deviation_mode == DeviationMode::Orthogonal && self.n_features < 2 && self.n_diseased > 0 {
            return Err(Error::contract("orthogonal deviations need at least 2 features"));
        }
        let (lo, hi) = self.age_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::contract(format!("invalid age range [{lo}, {hi}]")));
        }
        if !(self.deviation_magnitude >= 0.0 && self.deviation_magnitude.is_finite()) {
            return Err(Error::contract("deviation magnitude must be finite and >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub age_range: (f64, f64),
    pub slope: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub center: Vec<f64>,
    pub width: Vec<f64>,
}

impl Trajectory {
    pub fn sample(rng: &mut Rng, n_features: usize, age_range: (f64, f64)) -> Self {
        let mut t = Trajectory {
            age_range,
            slope: Vec::with_capacity(n_features),
            amplitude: Vec::with_capacity(n_features),
            center: Vec::with_capacity(n_features),
            width: Vec::with_capacity(n_features),
        };
        for k in 0..n_features {
            // alternate signs so every cohort has both directions
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            t.slope.push(sign * rng.random_range(0.5..1.5));
            t.amplitude.push(sign * rng.random_range(0.3..1.0));
            t.center.push(rng.random_range(0.2..0.8));
            t.width.push(rng.random_range(0.1..0.3));
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    fn normalized(&self, age: f64) -> f64 {
        (age - self.age_range.0) / (self.age_range.1 - self.age_range.0)
    }

    pub fn value(&self, age: f64) -> Vec<f64> {
        let t = self.normalized(age);
        (0..self.dim())
            .map(|k| self.slope[k] * t + self.amplitude[k] * ((t - self.center[k]) / self.width[k]).tanh())
            .collect()
    }

    /// `d f / d age`, per year.
    pub fn tangent(&self, age: f64) -> Vec<f64> {
        let t = self.normalized(age);
        let span = self.age_range.1 - self.age_range.0;
        (0..self.dim())
            .map(|k| {
                let th = ((t - self.center[k]) / self.width[k]).tanh();
                (self.slope[k] + self.amplitude[k] * (1.0 - th * th) / self.width[k]) / span
            })
            .collect()
    }

    /// Years to travel `distance` along the trajectory from `age`, to first order.
    pub fn years_for_distance(&self, age: f64, distance: f64) -> f64 {
        distance / norm(&self.tangent(age))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub cohort: Cohort,
    pub diseased: Vec<bool>,
    /// Age the diseased subject's features were drawn at; chronological age for everyone else.
    pub apparent_age: Vec<f64>,
    /// Unit displacement direction for orthogonal-mode subjects.
    pub direction: Vec<Option<Vec<f64>>>,
    pub trajectory: Trajectory,
}

impl SynthCohort {
    pub fn healthy_rows(&self) -> Vec<usize> {
        (0..self.diseased.len()).filter(|&i| !self.diseased[i]).collect()
    }
}

/// Healthy subjects come first and depend only on the seeds and their index,
/// so they are identical across deviation modes.
pub fn generate_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let trajectory = Trajectory::sample(
        &mut substream(config.trajectory_seed, STREAM_SYNTH_TRAJECTORY, 0),
        config.n_features,
        config.age_range,
    );
    let n = config.n_healthy + config.n_diseased;
    let d = config.n_features;
    let (lo, hi) = config.age_range;
    let shift = config.deviation_magnitude * config.noise_std;

    let mut features = DMatrix::zeros(n, d);
    let mut ages = Vec::with_capacity(n);
    let mut sex = Vec::with_capacity(n);
    let mut diagnosis = Vec::with_capacity(n);
    let mut diseased = Vec::with_capacity(n);
    let mut apparent_age = Vec::with_capacity(n);
    let mut direction = Vec::with_capacity(n);

    for i in 0..n {
        let mut rng = substream(config.seed, STREAM_SYNTH_SUBJECTS, i as u64);
        let sick = i >= config.n_healthy;
        let age = rng.random_range(lo..hi);
        let s = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let noise: Vec<f64> = (0..d).map(|_| config.noise_std * rng.sample::<f64, _>(StandardNormal)).collect();

        let mut source_age = age;
        let mut dir = None;
        let mut offset = vec![0.0; d];
        if sick {
            match config.deviation_mode {
                DeviationMode::None => {}
                DeviationMode::AcceleratedAging => {
                    source_age = age + trajectory.years_for_distance(age, shift);
                }
                DeviationMode::AgeConditional => {
                    let delta = trajectory.years_for_distance(age, shift);
                    let older_ok = age + delta <= hi;
                    let younger_ok = age - delta >= lo;
                    let older = match (older_ok, younger_ok) {
                        (true, false) => true,
                        (false, true) => false,
                        _ => rng.random_bool(0.5),
                    };
                    source_age = if older { age + delta } else { age - delta };
                }
                DeviationMode::Orthogonal => {
                    let tangent = trajectory.tangent(age);
                    let tn = norm(&tangent);
                    let u = loop {
                        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                        let proj = v.iter().zip(&tangent).map(|(a, b)| a * b).sum::<f64>() / (tn * tn);
                        for (vk, tk) in v.iter_mut().zip(&tangent) {
                            *vk -= proj * tk;
                        }
                        let vn = norm(&v);
                        if vn > 1e-6 {
                            break v.into_iter().map(|x| x / vn).collect::<Vec<_>>();
                        }
                    };
                    offset = u.iter().map(|x| shift * x).collect();
                    dir = Some(u);
                }
            }
        }
        let base = trajectory.value(source_age);
        for k in 0..d {
            features[(i, k)] = base[k] + offset[k] + noise[k];
        }
        ages.push(age);
        sex.push(s);
        diagnosis.push(if sick { DISEASE_LABEL } else { HEALTHY_LABEL }.to_string());
        diseased.push(sick);
        apparent_age.push(source_age);
        direction.push(dir);
    }

    let width = n.to_string().len().max(4);
    Ok(SynthCohort {
        cohort: Cohort {
            subject_ids: (0..n).map(|i| format!("sub-{:0width$}", i + 1)).collect(),
            features,
            feature_names: (0..d).map(|k| format!("f{}", k + 1)).collect(),
            age: ages,
            sex: Some(sex),
            diagnosis: Some(diagnosis),
        },
        diseased,
        apparent_age,
        direction,
        trajectory,
    })
}
