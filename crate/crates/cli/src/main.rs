use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use torquefuse::dynamics::RigidBodyTree;
use torquefuse::estimator::{tune_covariances, GridAxis, NoiseParam, SearchSpec, TuneError};
use torquefuse::friction::{default_k1_grid, identify_friction, load_samples, FrictionError};
use torquefuse::model::{load_model, split_at_ft_sensors, KinematicModel};
use torquefuse::simulation::{
    compute_rmse, EstimatorChoice, EstimatorKind, Experiment, RunLog, Scenario, Signal, SimulationError, Window,
};

#[derive(Parser)]
#[command(name = "torquefuse", version, about = "Joint-torque estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenarios and write logs and summaries.
    Run(RunArgs),
    /// Per-joint RMSE of the UKF against the RNEA baseline.
    Compare(ScenarioArgs),
    /// Fit friction parameters to `s_dot,residual_torque` samples.
    IdentifyFriction(FrictionArgs),
    /// Grid-search estimator noise covariances on recorded scenarios.
    Tune(TuneArgs),
    /// Parse a model and report its structure.
    ValidateModel(ModelArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's model path.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ScenarioArgs,
    #[arg(long, value_enum)]
    estimator: Option<Choice>,
    /// Further scenarios, run in parallel, each in its own output subdirectory.
    #[arg(long, num_args = 1..)]
    batch: Vec<PathBuf>,
}

#[derive(Args)]
struct FrictionArgs {
    /// CSV with header `s_dot,residual_torque`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    scenario: Vec<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON search spec; defaults to a decade sweep of the motor-torque and
    /// contact-force process noise.
    #[arg(long)]
    search: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Choice {
    Ukf,
    Rnea,
    Both,
}

impl From<Choice> for EstimatorChoice {
    fn from(c: Choice) -> Self {
        match c {
            Choice::Ukf => Self::Ukf,
            Choice::Rnea => Self::Rnea,
            Choice::Both => Self::Both,
        }
    }
}

enum Failure {
    Config(String),
    Abort(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Abort(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) | Self::Abort(m) => f.write_str(m),
        }
    }
}

impl From<SimulationError> for Failure {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Diverged { .. } => Self::Abort(e.to_string()),
            e => Self::Config(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn load_scenario(path: &Path, model: Option<&Path>, seed: Option<u64>, duration: Option<f64>) -> Outcome<(Scenario, KinematicModel)> {
    if !path.exists() {
        return Err(Failure::Config(format!("scenario file not found: {}", path.display())));
    }
    let mut sc = Scenario::load(path)?;
    if let Some(m) = model {
        sc.model = m.to_path_buf();
    }
    if !sc.model.exists() {
        return Err(Failure::Config(format!("model file not found: {}", sc.model.display())));
    }
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = duration {
        sc.duration = d;
    }
    let kinematic = load_model(&sc.model).map_err(|e| Failure::Config(format!("{}: {e}", sc.model.display())))?;
    Ok((sc, kinematic))
}

fn simulate(sc: &Scenario, model: &KinematicModel) -> Outcome<Vec<RunLog>> {
    let exp = Experiment::new(sc, model)?;
    sc.estimator_choice
        .kinds()
        .iter()
        .map(|&k| exp.run(k).map_err(Failure::from))
        .collect()
}

/// Writes `<scenario>_<estimator>.csv` and the summaries for each log;
/// returns the first abort.
fn write_logs(logs: &[RunLog], out: &Path) -> Outcome<Option<String>> {
    create_dir(out)?;
    let mut abort = None;
    for log in logs {
        let stem = format!("{}_{}", log.scenario, log.estimator.name());
        write(&out.join(format!("{stem}.csv")), &log.to_csv_string())?;
        let summary = log.summary();
        write(&out.join(format!("{stem}_summary.txt")), &summary.to_text())?;
        write(&out.join(format!("{stem}_summary.json")), &to_json(&summary))?;
        print!("{}", summary.to_text());
        if let (None, Some(a)) = (&abort, &log.abort) {
            abort = Some(format!(
                "scenario '{}' ({}) aborted at t = {:.4} s: {}",
                log.scenario,
                log.estimator.name(),
                a.time,
                a.reason
            ));
        }
    }
    Ok(abort)
}

fn run_one(path: &Path, args: &ScenarioArgs, estimator: Option<Choice>, out: &Path) -> Outcome {
    let (mut sc, model) = load_scenario(path, args.model.as_deref(), args.seed, args.duration)?;
    if let Some(c) = estimator {
        sc.estimator_choice = c.into();
    }
    let logs = simulate(&sc, &model)?;
    match write_logs(&logs, out)? {
        Some(msg) => Err(Failure::Abort(msg)),
        None => Ok(()),
    }
}

fn cmd_run(args: RunArgs) -> Outcome {
    if args.batch.is_empty() {
        return run_one(&args.common.scenario, &args.common, args.estimator, &args.common.out);
    }
    let paths: Vec<&PathBuf> = std::iter::once(&args.common.scenario).chain(&args.batch).collect();
    let results: Vec<Outcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let out = args.common.out.join(format!("{i:02}_{stem}"));
                let common = &args.common;
                let estimator = args.estimator;
                scope.spawn(move || run_one(p, common, estimator, &out))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    let mut worst: Option<Failure> = None;
    for (p, r) in paths.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("{}: {e}", p.display());
            if worst.as_ref().is_none_or(|w| e.code() > w.code()) {
                worst = Some(e);
            }
        }
    }
    worst.map_or(Ok(()), |w| Err(match w {
        Failure::Config(_) => Failure::Config("batch had configuration errors".into()),
        Failure::Abort(_) => Failure::Abort("batch had aborted scenarios".into()),
    }))
}

struct ComparisonRow {
    joint: String,
    ukf: f64,
    rnea: f64,
}

impl ComparisonRow {
    fn ratio(&self) -> f64 {
        self.ukf / self.rnea
    }
}

fn comparison(ukf: &RunLog, rnea: &RunLog, a: Signal, b: Signal) -> Outcome<Vec<ComparisonRow>> {
    let window = if ukf.rows.iter().any(|r| r.contact) { Window::Contact } else { Window::All };
    let u = compute_rmse(ukf, a, b, window)?;
    let r = compute_rmse(rnea, a, b, window)?;
    Ok(ukf
        .joints
        .iter()
        .enumerate()
        .map(|(j, name)| ComparisonRow {
            joint: name.clone(),
            ukf: u[j],
            rnea: r[j],
        })
        .collect())
}

fn cmd_compare(args: ScenarioArgs) -> Outcome {
    let (mut sc, model) = load_scenario(&args.scenario, args.model.as_deref(), args.seed, args.duration)?;
    sc.estimator_choice = EstimatorChoice::Both;
    let logs = simulate(&sc, &model)?;
    let abort = write_logs(&logs, &args.out)?;
    let find = |k: EstimatorKind| logs.iter().find(|l| l.estimator == k).expect("both estimators ran");
    let (ukf, rnea) = (find(EstimatorKind::Ukf), find(EstimatorKind::Rnea));
    let tracking = comparison(ukf, rnea, Signal::TauApplied, Signal::TauDes)?;
    let estimation = comparison(ukf, rnea, Signal::TauHat, Signal::TauTrue)?;

    let mut csv = String::from("joint,ukf_tracking_rmse,rnea_tracking_rmse,tracking_ratio,ukf_estimation_rmse,rnea_estimation_rmse,estimation_ratio\n");
    let mut text = format!(
        "scenario {}: UKF vs RNEA baseline\n{:<16} {:>12} {:>12} {:>8}   {:>12} {:>12} {:>8}\n",
        sc.name, "joint", "ukf_track", "rnea_track", "ratio", "ukf_est", "rnea_est", "ratio"
    );
    for (t, e) in tracking.iter().zip(&estimation) {
        csv.push_str(&format!("{},{},{},{},{},{},{}\n", t.joint, t.ukf, t.rnea, t.ratio(), e.ukf, e.rnea, e.ratio()));
        text.push_str(&format!(
            "{:<16} {:>12.4} {:>12.4} {:>8.3}   {:>12.4} {:>12.4} {:>8.3}\n",
            t.joint,
            t.ukf,
            t.rnea,
            t.ratio(),
            e.ukf,
            e.rnea,
            e.ratio()
        ));
    }
    write(&args.out.join(format!("{}_compare.csv", sc.name)), &csv)?;
    write(&args.out.join(format!("{}_compare.txt", sc.name)), &text)?;
    print!("{text}");
    match abort {
        Some(msg) => Err(Failure::Abort(msg)),
        None => Ok(()),
    }
}

fn cmd_identify_friction(args: FrictionArgs) -> Outcome {
    let samples = load_samples(&args.data).map_err(|e| Failure::Config(e.to_string()))?;
    let fit = identify_friction(&samples, &default_k1_grid()).map_err(|e| {
        let hint = match e {
            FrictionError::Unidentifiable(_) | FrictionError::TooFewSamples(_) => {
                "\nhint: record the joint moving in both directions over a range of speeds with no external load"
            }
            _ => "",
        };
        Failure::Config(format!("{e}{hint}"))
    })?;
    create_dir(&args.out)?;
    write(&args.out.join("friction.json"), &to_json(&fit.params))?;
    let p = fit.params;
    let report = format!(
        "samples {}\nk0 {:.6}\nk1 {:.6}\nk2 {:.6}\nrmse {:.6} Nm\n",
        samples.len(),
        p.k0,
        p.k1,
        p.k2,
        fit.rmse
    );
    write(&args.out.join("friction_report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn default_search(sc: &Scenario) -> SearchSpec {
    let decades = |v: f64| vec![v * 0.1, v, v * 10.0];
    let noise = &sc.estimator.noise;
    SearchSpec::Grid {
        axes: [NoiseParam::ProcessTauM, NoiseParam::ProcessExtForce]
            .into_iter()
            .map(|param| GridAxis {
                param,
                values: decades(param.get(noise)),
            })
            .collect(),
    }
}

fn cmd_tune(args: TuneArgs) -> Outcome {
    if args.scenario.is_empty() {
        return Err(Failure::Config(TuneError::EmptyScenarioSet.to_string()));
    }
    let mut datasets = Vec::new();
    let mut first = None;
    for path in &args.scenario {
        let (sc, model) = load_scenario(path, args.model.as_deref(), args.seed, args.duration)?;
        let exp = Experiment::new(&sc, &model)?;
        let (log, data) = exp.record(EstimatorKind::Ukf)?;
        if let Some(a) = log.abort {
            return Err(Failure::Abort(format!("recording '{}' aborted at t = {:.4} s: {}", sc.name, a.time, a.reason)));
        }
        datasets.push(data);
        first.get_or_insert(sc);
    }
    let spec = match &args.search {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => default_search(first.as_ref().expect("at least one scenario")),
    };
    let report = tune_covariances(&datasets, &spec).map_err(|e| Failure::Config(e.to_string()))?;
    create_dir(&args.out)?;
    write(&args.out.join("noise.json"), &to_json(&report.best))?;
    let mut table = String::from("trial,score\n");
    for (i, t) in report.trials.iter().enumerate() {
        table.push_str(&format!("{i},{}\n", t.score));
    }
    write(&args.out.join("tune_scores.csv"), &table)?;
    write(&args.out.join("tune_report.json"), &to_json(&report))?;
    println!("{} trials, best score {:.6} Nm", report.trials.len(), report.best_score);
    Ok(())
}

fn cmd_validate_model(args: ModelArgs) -> Outcome {
    let fail = |e: &dyn fmt::Display| Failure::Config(format!("{}: {e}", args.model.display()));
    let model = load_model(&args.model).map_err(|e| fail(&e))?;
    RigidBodyTree::from_model(&model).map_err(|e| fail(&e))?;
    let subs = split_at_ft_sensors(&model).map_err(|e| fail(&e))?;
    println!(
        "{}: {} links, {} joints ({} DoF), {} sensors, {} submodels",
        args.model.display(),
        model.links.len(),
        model.joints.len(),
        model.dofs(),
        model.sensors.len(),
        subs.len()
    );
    for (i, s) in subs.iter().enumerate() {
        let joints: Vec<&str> = s.joints.iter().map(|&j| model.joints[j].name.as_str()).collect();
        println!("  submodel {i}: base {} joints [{}]", model.links[s.base_link].name, joints.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::IdentifyFriction(a) => cmd_identify_friction(a),
        Command::Tune(a) => cmd_tune(a),
        Command::ValidateModel(a) => cmd_validate_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
