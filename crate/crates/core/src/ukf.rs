//! Additive-noise unscented Kalman filter.

use std::fmt::Display;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest diagonal jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UkfError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} is not positive (semi)definite even with jitter {jitter:e}")]
    NotPositiveDefinite { what: &'static str, jitter: f64 },
    #[error("sigma point {point}: {reason}")]
    Propagation { point: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// First diagonal jitter tried when a factorization fails; multiplied by
    /// ten up to [`MAX_JITTER`].
    pub jitter: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
            jitter: 1e-12,
        }
    }
}

impl UkfConfig {
    /// `λ = α²(d+κ) − d`
    pub fn lambda(&self, d: usize) -> f64 {
        self.alpha * self.alpha * (d as f64 + self.kappa) - d as f64
    }

    pub fn validate(&self, d: usize) -> Result<(), UkfError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(UkfError::InvalidConfig(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !self.beta.is_finite() || !self.kappa.is_finite() {
            return Err(UkfError::InvalidConfig("beta and kappa must be finite".into()));
        }
        if !(self.jitter > 0.0 && self.jitter <= MAX_JITTER) {
            return Err(UkfError::InvalidConfig(format!(
                "jitter {} outside (0, {MAX_JITTER}]",
                self.jitter
            )));
        }
        if d as f64 + self.lambda(d) <= 0.0 {
            return Err(UkfError::InvalidConfig(format!(
                "d + lambda must be positive (d = {d}, kappa = {})",
                self.kappa
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, UkfError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(UkfError::Dimension {
                what: "covariance",
                expected: d,
                actual: covariance.nrows(),
            });
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Q
    pub process: DMatrix<f64>,
    /// R
    pub measurement: DMatrix<f64>,
}

impl NoiseModel {
    pub fn diagonal(process: &[f64], measurement: &[f64]) -> Self {
        Self {
            process: DMatrix::from_diagonal(&DVector::from_column_slice(process)),
            measurement: DMatrix::from_diagonal(&DVector::from_column_slice(measurement)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SigmaPoints {
    /// One point per column, `2d + 1` columns.
    pub points: DMatrix<f64>,
    pub mean_weights: Vec<f64>,
    pub covariance_weights: Vec<f64>,
}

/// Lower-triangular `L` with `L Lᵀ = a` for positive semidefinite `a`.
/// Pivots within `tol` of zero yield zero columns; `None` on a clearly
/// negative pivot.
fn semidefinite_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !d.is_finite() || d < -tol {
            return None;
        }
        if d <= tol {
            // the whole column must vanish for the factor to exist
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-6 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Factorizes `a`, adding escalating diagonal jitter on failure.
fn factor_with_jitter(a: &DMatrix<f64>, first: f64, what: &'static str) -> Result<DMatrix<f64>, UkfError> {
    if let Some(l) = semidefinite_cholesky(a) {
        return Ok(l);
    }
    let n = a.nrows();
    let mut jitter = first;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let shifted = a + DMatrix::identity(n, n) * jitter;
        if let Some(l) = semidefinite_cholesky(&shifted) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(UkfError::NotPositiveDefinite { what, jitter: MAX_JITTER })
}

pub fn sigma_points(belief: &GaussianBelief, config: &UkfConfig) -> Result<SigmaPoints, UkfError> {
    let d = belief.dim();
    config.validate(d)?;
    let lambda = config.lambda(d);
    let c = d as f64 + lambda;
    let l = factor_with_jitter(&belief.covariance, config.jitter, "covariance")? * c.sqrt();
    let mut points = DMatrix::zeros(d, 2 * d + 1);
    points.set_column(0, &belief.mean);
    for i in 0..d {
        let col = l.column(i);
        points.set_column(1 + i, &(&belief.mean + col));
        points.set_column(1 + d + i, &(&belief.mean - col));
    }
    let wi = 1.0 / (2.0 * c);
    let wm0 = lambda / c;
    let wc0 = wm0 + 1.0 - config.alpha * config.alpha + config.beta;
    let mut mean_weights = vec![wi; 2 * d + 1];
    let mut covariance_weights = vec![wi; 2 * d + 1];
    mean_weights[0] = wm0;
    covariance_weights[0] = wc0;
    Ok(SigmaPoints {
        points,
        mean_weights,
        covariance_weights,
    })
}

impl SigmaPoints {
    /// Weighted mean and covariance of the columns of `ys`.
    pub fn moments(&self, ys: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mean = ys * DVector::from_column_slice(&self.mean_weights);
        let mut dev = ys.clone();
        for (j, mut col) in dev.column_iter_mut().enumerate() {
            col -= &mean;
            col *= self.covariance_weights[j].abs().sqrt();
        }
        // split positive and negative weights so the product stays symmetric
        let mut cov = DMatrix::zeros(ys.nrows(), ys.nrows());
        for (j, col) in dev.column_iter().enumerate() {
            let sign = self.covariance_weights[j].signum();
            cov.ger(sign, &col, &col, 1.0);
        }
        (mean, cov)
    }
}

fn propagate<F, E>(points: &DMatrix<f64>, mut f: F) -> Result<DMatrix<f64>, UkfError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: Display,
{
    let mut out: Option<DMatrix<f64>> = None;
    for (j, col) in points.column_iter().enumerate() {
        let y = f(&col.into_owned()).map_err(|e| UkfError::Propagation {
            point: j,
            reason: e.to_string(),
        })?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(UkfError::Propagation {
                point: j,
                reason: format!("component {i} is not finite"),
            });
        }
        let m = out.get_or_insert_with(|| DMatrix::zeros(y.len(), points.ncols()));
        if y.len() != m.nrows() {
            return Err(UkfError::Propagation {
                point: j,
                reason: format!("output length {} differs from {}", y.len(), m.nrows()),
            });
        }
        m.set_column(j, &y);
    }
    Ok(out.expect("at least one sigma point"))
}

/// Symmetrizes `m`; if it is then not positive semidefinite, clamps its
/// eigenvalues at `floor`.
pub fn ensure_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if semidefinite_cholesky(&sym).is_some() {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Unscented time update with additive process noise `q`.
pub fn predict<F, E>(belief: &GaussianBelief, config: &UkfConfig, q: &DMatrix<f64>, process: F) -> Result<GaussianBelief, UkfError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: Display,
{
    let d = belief.dim();
    check_square("process covariance", q, d)?;
    let sp = sigma_points(belief, config)?;
    let ys = propagate(&sp.points, process)?;
    if ys.nrows() != d {
        return Err(UkfError::Dimension {
            what: "process output",
            expected: d,
            actual: ys.nrows(),
        });
    }
    let (mean, cov) = sp.moments(&ys);
    Ok(GaussianBelief {
        mean,
        covariance: ensure_psd(&(cov + q), 0.0),
    })
}

#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub belief: GaussianBelief,
    pub predicted_measurement: DVector<f64>,
    /// Observed minus predicted measurement.
    pub innovation: DVector<f64>,
    pub innovation_covariance: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Unscented measurement update with additive measurement noise `r`.
pub fn update<F, E>(
    belief: &GaussianBelief,
    config: &UkfConfig,
    r: &DMatrix<f64>,
    observed: &DVector<f64>,
    measurement: F,
) -> Result<UpdateOutcome, UkfError>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>, E>,
    E: Display,
{
    let m = observed.len();
    check_square("measurement covariance", r, m)?;
    let sp = sigma_points(belief, config)?;
    let ys = propagate(&sp.points, measurement)?;
    if ys.nrows() != m {
        return Err(UkfError::Dimension {
            what: "measurement output",
            expected: m,
            actual: ys.nrows(),
        });
    }
    let (y_mean, pyy) = sp.moments(&ys);
    let s = ensure_psd(&(pyy + r), 0.0);
    let mut pxy = DMatrix::zeros(belief.dim(), m);
    for j in 0..sp.points.ncols() {
        let dx = sp.points.column(j) - &belief.mean;
        let dy = ys.column(j) - &y_mean;
        pxy.ger(sp.covariance_weights[j], &dx, &dy, 1.0);
    }
    let gain = solve_spd_right(&s, &pxy, config.jitter)?;
    let innovation = observed - &y_mean;
    let mean = &belief.mean + &gain * &innovation;
    let cov = &belief.covariance - &gain * &s * gain.transpose();
    Ok(UpdateOutcome {
        belief: GaussianBelief {
            mean,
            covariance: ensure_psd(&cov, 0.0),
        },
        predicted_measurement: y_mean,
        innovation,
        innovation_covariance: s,
        gain,
    })
}

/// `b · s⁻¹` for symmetric positive definite `s`.
fn solve_spd_right(s: &DMatrix<f64>, b: &DMatrix<f64>, first_jitter: f64) -> Result<DMatrix<f64>, UkfError> {
    let n = s.nrows();
    let mut jitter = 0.0;
    loop {
        let shifted = s + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol.solve(&b.transpose()).transpose());
        }
        jitter = if jitter == 0.0 { first_jitter } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(UkfError::NotPositiveDefinite {
                what: "innovation covariance",
                jitter: MAX_JITTER,
            });
        }
    }
}

fn check_square(what: &'static str, m: &DMatrix<f64>, d: usize) -> Result<(), UkfError> {
    if m.nrows() == d && m.ncols() == d {
        Ok(())
    } else {
        Err(UkfError::Dimension {
            what,
            expected: d,
            actual: m.nrows(),
        })
    }
}
