use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KinematicModel;

use super::{EstimatorConfig, EstimatorError, EstimatorNoise, InputVector, MeasurementVector, TorqueEstimator};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("no datasets to tune on")]
    EmptyScenarioSet,
    #[error("search spec yields no candidates")]
    EmptySearch,
    #[error("invalid search axis: {0}")]
    InvalidAxis(String),
    #[error("dataset '{name}': {reason}")]
    InvalidDataset { name: String, reason: String },
    #[error("every candidate failed; first failure: {0}")]
    AllTrialsFailed(String),
}

/// Recorded estimator inputs with ground-truth joint torques, replayed
/// offline.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub model: KinematicModel,
    pub config: EstimatorConfig,
    pub dt: f64,
    pub inputs: Vec<InputVector>,
    pub measurements: Vec<MeasurementVector>,
    pub truth: Vec<DVector<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseParam {
    ProcessSDot,
    ProcessTauM,
    ProcessTauF,
    ProcessFtForce,
    ProcessFtTorque,
    ProcessExtForce,
    ProcessExtTorque,
    Encoder,
    Current,
    FtForce,
    FtTorque,
    Accelerometer,
    Gyroscope,
}

impl NoiseParam {
    fn slot(self, n: &mut EstimatorNoise) -> &mut f64 {
        match self {
            Self::ProcessSDot => &mut n.process_s_dot,
            Self::ProcessTauM => &mut n.process_tau_m,
            Self::ProcessTauF => &mut n.process_tau_f,
            Self::ProcessFtForce => &mut n.process_ft_force,
            Self::ProcessFtTorque => &mut n.process_ft_torque,
            Self::ProcessExtForce => &mut n.process_ext_force,
            Self::ProcessExtTorque => &mut n.process_ext_torque,
            Self::Encoder => &mut n.encoder,
            Self::Current => &mut n.current,
            Self::FtForce => &mut n.ft_force,
            Self::FtTorque => &mut n.ft_torque,
            Self::Accelerometer => &mut n.accelerometer,
            Self::Gyroscope => &mut n.gyroscope,
        }
    }

    pub fn set(self, noise: &mut EstimatorNoise, value: f64) {
        *self.slot(noise) = value;
    }

    pub fn get(self, noise: &EstimatorNoise) -> f64 {
        let mut copy = *noise;
        *self.slot(&mut copy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub param: NoiseParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomAxis {
    pub param: NoiseParam,
    pub min: f64,
    pub max: f64,
}

/// Candidate standard deviations to try. Parameters not named keep the
/// value from the first dataset's configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SearchSpec {
    /// Cartesian product of the listed values.
    Grid { axes: Vec<GridAxis> },
    /// `samples` draws, log-uniform within each range.
    Random { axes: Vec<RandomAxis>, samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneTrial {
    pub noise: EstimatorNoise,
    /// Mean over datasets of the mean per-joint torque RMSE; infinite if
    /// the estimator failed.
    pub score: f64,
    pub per_dataset: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best: EstimatorNoise,
    pub best_score: f64,
    pub trials: Vec<TuneTrial>,
}

fn candidates(base: &EstimatorNoise, spec: &SearchSpec) -> Result<Vec<EstimatorNoise>, TuneError> {
    let check = |v: f64, p: NoiseParam| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(TuneError::InvalidAxis(format!("{p:?}: value {v} must be positive")))
        }
    };
    match spec {
        SearchSpec::Grid { axes } => {
            let mut out = vec![*base];
            for axis in axes {
                if axis.values.is_empty() {
                    return Err(TuneError::InvalidAxis(format!("{:?} has no values", axis.param)));
                }
                let mut next = Vec::with_capacity(out.len() * axis.values.len());
                for c in &out {
                    for &v in &axis.values {
                        check(v, axis.param)?;
                        let mut n = *c;
                        axis.param.set(&mut n, v);
                        next.push(n);
                    }
                }
                out = next;
            }
            Ok(out)
        }
        SearchSpec::Random { axes, samples, seed } => {
            for a in axes {
                check(a.min, a.param)?;
                check(a.max, a.param)?;
                if a.max < a.min {
                    return Err(TuneError::InvalidAxis(format!("{:?}: max below min", a.param)));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..*samples)
                .map(|_| {
                    let mut n = *base;
                    for a in axes {
                        let t: f64 = rng.random();
                        a.param.set(&mut n, (a.min.ln() + t * (a.max.ln() - a.min.ln())).exp());
                    }
                    n
                })
                .collect())
        }
    }
}

/// Mean per-joint RMSE of the estimator on one dataset.
fn replay(data: &Dataset, noise: &EstimatorNoise) -> Result<f64, EstimatorError> {
    let config = EstimatorConfig {
        noise: *noise,
        ..data.config.clone()
    };
    let mut est = TorqueEstimator::new(&data.model, config)?;
    let n = data.model.dofs();
    let mut sq = DVector::zeros(n);
    for ((u, y), truth) in data.inputs.iter().zip(&data.measurements).zip(&data.truth) {
        let out = est.step(u, y, data.dt)?;
        sq += (out.tau_j_hat - truth).map(|e| e * e);
    }
    let count = data.truth.len().max(1) as f64;
    Ok(sq.map(|s| (s / count).sqrt()).mean())
}

/// Searches diagonal filter covariances for the lowest mean torque RMSE
/// over `datasets`. Ties go to the earliest candidate.
pub fn tune_covariances(datasets: &[Dataset], spec: &SearchSpec) -> Result<TuneReport, TuneError> {
    let first = datasets.first().ok_or(TuneError::EmptyScenarioSet)?;
    for d in datasets {
        let len = d.inputs.len();
        if len == 0 || d.measurements.len() != len || d.truth.len() != len {
            return Err(TuneError::InvalidDataset {
                name: d.name.clone(),
                reason: "inputs, measurements and truth must be non-empty and aligned".into(),
            });
        }
    }
    let cands = candidates(&first.config.noise, spec)?;
    if cands.is_empty() {
        return Err(TuneError::EmptySearch);
    }
    let mut trials = Vec::with_capacity(cands.len());
    for noise in cands {
        let mut per_dataset = Vec::with_capacity(datasets.len());
        let mut failure = None;
        for d in datasets {
            match replay(d, &noise) {
                Ok(s) if s.is_finite() => per_dataset.push(s),
                Ok(_) => {
                    failure.get_or_insert_with(|| format!("{}: non-finite RMSE", d.name));
                    per_dataset.push(f64::INFINITY);
                }
                Err(e) => {
                    failure.get_or_insert_with(|| format!("{}: {e}", d.name));
                    per_dataset.push(f64::INFINITY);
                }
            }
        }
        let score = per_dataset.iter().sum::<f64>() / per_dataset.len() as f64;
        trials.push(TuneTrial {
            noise,
            score,
            per_dataset,
            failure,
        });
    }
    let best = trials
        .iter()
        .enumerate()
        .filter(|(_, t)| t.score.is_finite())
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    match best {
        Some(i) => Ok(TuneReport {
            best: trials[i].noise,
            best_score: trials[i].score,
            trials,
        }),
        None => Err(TuneError::AllTrialsFailed(
            trials[0].failure.clone().unwrap_or_else(|| "unknown".into()),
        )),
    }
}
