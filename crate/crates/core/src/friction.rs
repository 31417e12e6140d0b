//! Harmonic-drive friction `τ_F = k0·tanh(k1·ṡ) + k2·ṡ`, its time derivative,
//! and identification from motor/joint torque residuals.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fewest samples accepted by [`identify_friction`].
pub const MIN_SAMPLES: usize = 10;
const STILL_VELOCITY: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FrictionError {
    #[error("friction parameters must be finite and non-negative (got k0={k0}, k1={k1}, k2={k2})")]
    InvalidParams { k0: f64, k1: f64, k2: f64 },
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {0} is not finite")]
    NonFiniteSample(usize),
    #[error("friction is not identifiable: {0}")]
    Unidentifiable(String),
    #[error("k1 grid is empty or contains negative/non-finite values")]
    InvalidGrid,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    /// Nm
    pub k0: f64,
    /// 1/(rad/s)
    pub k1: f64,
    /// Nm/(rad/s)
    pub k2: f64,
}

impl FrictionParams {
    pub fn new(k0: f64, k1: f64, k2: f64) -> Result<Self, FrictionError> {
        let p = Self { k0, k1, k2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FrictionError> {
        let ok = [self.k0, self.k1, self.k2]
            .iter()
            .all(|k| k.is_finite() && *k >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(FrictionError::InvalidParams {
                k0: self.k0,
                k1: self.k1,
                k2: self.k2,
            })
        }
    }

    #[inline]
    pub fn torque(&self, s_dot: f64) -> f64 {
        friction_torque(self, s_dot)
    }

    #[inline]
    pub fn rate(&self, s_dot: f64, s_ddot: f64) -> f64 {
        friction_torque_rate(self, s_dot, s_ddot)
    }
}

#[inline]
pub fn friction_torque(p: &FrictionParams, s_dot: f64) -> f64 {
    p.k0 * (p.k1 * s_dot).tanh() + p.k2 * s_dot
}

/// `dτ_F/dt = (k0·k1·sech²(k1·ṡ) + k2)·s̈`
#[inline]
pub fn friction_torque_rate(p: &FrictionParams, s_dot: f64, s_ddot: f64) -> f64 {
    let sech = 1.0 / (p.k1 * s_dot).cosh();
    (p.k0 * p.k1 * sech * sech + p.k2) * s_ddot
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrictionSample {
    /// rad/s
    pub s_dot: f64,
    /// `r·τ_m − τ_j` with no external load, Nm.
    pub residual_torque: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrictionFit {
    pub params: FrictionParams,
    pub rmse: f64,
    /// Measured minus fitted, per sample.
    pub residuals: Vec<f64>,
}

/// `k1 ∈ {0.05, 0.06, …, 20.00}`.
pub fn default_k1_grid() -> Vec<f64> {
    (5..=2000).map(|i| i as f64 / 100.0).collect()
}

/// Grid search over `k1`; for each candidate `(k0, k2)` come from a
/// non-negative linear least-squares fit.
pub fn identify_friction(samples: &[FrictionSample], k1_grid: &[f64]) -> Result<FrictionFit, FrictionError> {
    if samples.len() < MIN_SAMPLES {
        return Err(FrictionError::TooFewSamples(samples.len()));
    }
    if let Some(i) = samples
        .iter()
        .position(|s| !(s.s_dot.is_finite() && s.residual_torque.is_finite()))
    {
        return Err(FrictionError::NonFiniteSample(i));
    }
    if k1_grid.is_empty() || k1_grid.iter().any(|k| !k.is_finite() || *k < 0.0) {
        return Err(FrictionError::InvalidGrid);
    }
    let moving: Vec<_> = samples.iter().filter(|s| s.s_dot.abs() >= STILL_VELOCITY).collect();
    if moving.is_empty() {
        return Err(FrictionError::Unidentifiable(
            "all samples have |s_dot| below 1e-6 rad/s; excite the joint".into(),
        ));
    }
    let positive = moving.iter().any(|s| s.s_dot > 0.0);
    let negative = moving.iter().any(|s| s.s_dot < 0.0);
    if !(positive && negative) {
        return Err(FrictionError::Unidentifiable(
            "all samples move in one direction; include both velocity signs".into(),
        ));
    }

    let levels = VelocityLevels::of(samples);
    let mut best: Option<(f64, FrictionParams)> = None;
    for &k1 in k1_grid {
        let (k0, k2, sse) = levels.fit(k1);
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, FrictionParams { k0, k1, k2 }));
        }
    }
    let (_, params) = best.expect("grid is non-empty");
    let residuals: Vec<f64> = samples
        .iter()
        .map(|s| s.residual_torque - params.torque(s.s_dot))
        .collect();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(FrictionFit {
        params,
        rmse: (sse / samples.len() as f64).sqrt(),
        residuals,
    })
}

/// Samples pooled by distinct velocity: the least-squares normal equations
/// only need per-velocity counts and residual sums.
struct VelocityLevels {
    /// `(ṡ, count, Σ y)`
    levels: Vec<(f64, f64, f64)>,
    yy: f64,
}

impl VelocityLevels {
    fn of(samples: &[FrictionSample]) -> Self {
        let mut sorted: Vec<(f64, f64)> = samples.iter().map(|s| (s.s_dot, s.residual_torque)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut levels: Vec<(f64, f64, f64)> = Vec::new();
        for (v, y) in sorted {
            match levels.last_mut() {
                Some(l) if l.0 == v => {
                    l.1 += 1.0;
                    l.2 += y;
                }
                _ => levels.push((v, 1.0, y)),
            }
        }
        Self {
            levels,
            yy: samples.iter().map(|s| s.residual_torque * s.residual_torque).sum(),
        }
    }

    /// Least squares for `y ≈ k0·tanh(k1·ṡ) + k2·ṡ` with `k0, k2 ≥ 0`;
    /// also returns the sum of squared residuals.
    fn fit(&self, k1: f64) -> (f64, f64, f64) {
        let (mut aa, mut ab, mut bb, mut ay, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(v, n, sy) in &self.levels {
            let a = (k1 * v).tanh();
            aa += n * a * a;
            ab += n * a * v;
            bb += n * v * v;
            ay += a * sy;
            by += v * sy;
        }
        let yy = self.yy;
        let sse = |k0: f64, k2: f64| {
            (yy + k0 * k0 * aa + 2.0 * k0 * k2 * ab + k2 * k2 * bb - 2.0 * (k0 * ay + k2 * by)).max(0.0)
        };
        let det = aa * bb - ab * ab;
        if det > 1e-12 * (aa * bb).max(f64::MIN_POSITIVE) {
            let k0 = (ay * bb - by * ab) / det;
            let k2 = (aa * by - ab * ay) / det;
            if k0 >= 0.0 && k2 >= 0.0 {
                return (k0, k2, sse(k0, k2));
            }
        }
        // on the boundary: the better of the two single-term fits
        let only_k0 = if aa > 0.0 { (ay / aa).max(0.0) } else { 0.0 };
        let only_k2 = if bb > 0.0 { (by / bb).max(0.0) } else { 0.0 };
        let (e0, e2) = (sse(only_k0, 0.0), sse(0.0, only_k2));
        if e0 <= e2 {
            (only_k0, 0.0, e0)
        } else {
            (0.0, only_k2, e2)
        }
    }
}

/// Reads samples from CSV with header `s_dot,residual_torque`.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<FrictionSample>, FrictionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["s_dot", "residual_torque"] {
        return Err(FrictionError::Unidentifiable(format!(
            "expected header 's_dot,residual_torque', found '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(FrictionError::from)).collect()
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<FrictionSample>, FrictionError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| FrictionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_samples(std::io::BufReader::new(file))
}

pub fn write_samples<W: Write>(writer: W, samples: &[FrictionSample]) -> Result<(), FrictionError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|source| FrictionError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}
