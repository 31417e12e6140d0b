use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{EstimatorKind, SimulationError};
use crate::estimator::MeasurementBlock;

/// One estimator tick.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub s: DVector<f64>,
    pub s_dot: DVector<f64>,
    pub s_dot_meas: DVector<f64>,
    pub current_meas: DVector<f64>,
    /// Joint torque acting when the sensors were sampled.
    pub tau_true: DVector<f64>,
    /// Joint torque produced by this tick's current command at the sampled
    /// velocity.
    pub tau_applied: DVector<f64>,
    pub tau_hat: DVector<f64>,
    pub tau_des: DVector<f64>,
    /// Joint-space projection of the contacts no FT sensor sees.
    pub tau_ext: DVector<f64>,
    pub current: DVector<f64>,
    pub clamped: Vec<bool>,
    /// Any contact active.
    pub contact: bool,
    /// Distance of the cartesian task frame from its target, m.
    pub task_error: Option<f64>,
    /// Estimator innovation norm per measurement block; zero for the
    /// RNEA baseline.
    pub innovation: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub time: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub joints: Vec<String>,
    pub dt: f64,
    pub rows: Vec<LogRow>,
    /// `[start, end)` of every contact event.
    pub contact_windows: Vec<(f64, f64)>,
    pub abort: Option<Abort>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    TauTrue,
    TauApplied,
    TauHat,
    TauDes,
    TauExt,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    All,
    /// Rows with an active contact.
    Contact,
    /// Rows with `t ≥` the given time.
    After(f64),
}

impl LogRow {
    fn signal(&self, s: Signal) -> DVector<f64> {
        match s {
            Signal::TauTrue => self.tau_true.clone(),
            Signal::TauApplied => self.tau_applied.clone(),
            Signal::TauHat => self.tau_hat.clone(),
            Signal::TauDes => self.tau_des.clone(),
            Signal::TauExt => self.tau_ext.clone(),
            Signal::Zero => DVector::zeros(self.tau_true.len()),
        }
    }

    fn in_window(&self, w: Window) -> bool {
        match w {
            Window::All => true,
            Window::Contact => self.contact,
            Window::After(t) => self.t >= t,
        }
    }
}

/// Per-component root mean square of `a − b`. Empty series give zeros of
/// length zero.
pub fn rmse(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<DVector<f64>, SimulationError> {
    if a.len() != b.len() {
        return Err(SimulationError::Length {
            left: a.len(),
            right: b.len(),
        });
    }
    let Some(first) = a.first() else {
        return Ok(DVector::zeros(0));
    };
    let mut sum = DVector::zeros(first.len());
    for (x, y) in a.iter().zip(b) {
        if x.len() != sum.len() || y.len() != sum.len() {
            return Err(SimulationError::Length {
                left: x.len(),
                right: y.len(),
            });
        }
        sum += (x - y).map(|e| e * e);
    }
    Ok(sum.map(|s| (s / a.len() as f64).sqrt()))
}

/// Per-joint RMSE between two logged signals over the rows in `window`.
/// A window without rows gives zeros.
pub fn compute_rmse(log: &RunLog, a: Signal, b: Signal, window: Window) -> Result<DVector<f64>, SimulationError> {
    let rows: Vec<&LogRow> = log.rows.iter().filter(|r| r.in_window(window)).collect();
    if rows.is_empty() {
        return Ok(DVector::zeros(log.joints.len()));
    }
    let xs: Vec<_> = rows.iter().map(|r| r.signal(a)).collect();
    let ys: Vec<_> = rows.iter().map(|r| r.signal(b)).collect();
    rmse(&xs, &ys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub name: String,
    /// τ̂ against the true torque.
    pub estimation_rmse: f64,
    /// Applied torque against the desired torque.
    pub tracking_rmse: f64,
    pub contact_estimation_rmse: f64,
    pub contact_tracking_rmse: f64,
    /// RMS of the unmeasured contact torque over the contact rows.
    pub contact_projection_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub estimator: EstimatorKind,
    pub ticks: usize,
    pub simulated_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort: Option<Abort>,
    pub joints: Vec<JointSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_task_error: Option<f64>,
}

impl RunLog {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn summary(&self) -> RunSummary {
        let get = |a, b, w| compute_rmse(self, a, b, w).expect("rows share one joint count");
        let est = get(Signal::TauHat, Signal::TauTrue, Window::All);
        let trk = get(Signal::TauApplied, Signal::TauDes, Window::All);
        let cest = get(Signal::TauHat, Signal::TauTrue, Window::Contact);
        let ctrk = get(Signal::TauApplied, Signal::TauDes, Window::Contact);
        let proj = get(Signal::TauExt, Signal::Zero, Window::Contact);
        let joints = self
            .joints
            .iter()
            .enumerate()
            .map(|(i, name)| JointSummary {
                name: name.clone(),
                estimation_rmse: est[i],
                tracking_rmse: trk[i],
                contact_estimation_rmse: cest[i],
                contact_tracking_rmse: ctrk[i],
                contact_projection_rms: proj[i],
            })
            .collect();
        let max_task_error = self.rows.iter().filter_map(|r| r.task_error).reduce(f64::max);
        RunSummary {
            scenario: self.scenario.clone(),
            estimator: self.estimator,
            ticks: self.rows.len(),
            simulated_time: self.rows.len() as f64 * self.dt,
            abort: self.abort.clone(),
            joints,
            max_task_error,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string(), "contact".into(), "task_error".into()];
        for b in MeasurementBlock::ALL {
            h.push(format!("innovation_{}", b.name()));
        }
        for field in [
            "s",
            "s_dot",
            "s_dot_meas",
            "current_meas",
            "tau_true",
            "tau_applied",
            "tau_hat",
            "tau_des",
            "tau_ext",
            "current",
            "clamped",
        ] {
            for j in &self.joints {
                h.push(format!("{field}_{j}"));
            }
        }
        h
    }

    /// Writes the log as CSV. Numbers use the shortest representation that
    /// round-trips, so equal logs give equal bytes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        let mut rec: Vec<String> = Vec::new();
        for r in &self.rows {
            rec.clear();
            rec.push(r.t.to_string());
            rec.push(u8::from(r.contact).to_string());
            rec.push(r.task_error.map(|e| e.to_string()).unwrap_or_default());
            rec.extend(r.innovation.iter().map(|x| x.to_string()));
            for v in [
                &r.s,
                &r.s_dot,
                &r.s_dot_meas,
                &r.current_meas,
                &r.tau_true,
                &r.tau_applied,
                &r.tau_hat,
                &r.tau_des,
                &r.tau_ext,
                &r.current,
            ] {
                rec.extend(v.iter().map(|x| x.to_string()));
            }
            rec.extend(r.clamped.iter().map(|&c| u8::from(c).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!("scenario {} / estimator {}\n", self.scenario, self.estimator.name());
        s.push_str(&format!("ticks {}  simulated {:.3} s\n", self.ticks, self.simulated_time));
        if let Some(a) = &self.abort {
            s.push_str(&format!("ABORTED at t = {:.4} s: {}\n", a.time, a.reason));
        }
        s.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>14} {:>14} {:>14}\n",
            "joint", "est_rmse", "track_rmse", "contact_est", "contact_track", "contact_proj"
        ));
        for j in &self.joints {
            s.push_str(&format!(
                "{:<16} {:>12.4} {:>12.4} {:>14.4} {:>14.4} {:>14.4}\n",
                j.name, j.estimation_rmse, j.tracking_rmse, j.contact_estimation_rmse, j.contact_tracking_rmse, j.contact_projection_rms
            ));
        }
        if let Some(e) = self.max_task_error {
            s.push_str(&format!("max task error {e:.5} m\n"));
        }
        s
    }
}
