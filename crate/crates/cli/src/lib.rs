//! Command implementations behind the `cgrid` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use cgrid_core::checkpoint::Checkpoint;
use cgrid_core::dataset::{generate_dataset, states, Dataset, Manifest, State, Task};
use cgrid_core::io::{create_dir, write_json};
use cgrid_core::metrics::{
    aggregate, energy_spectrum, high_correlation_time, rollout_metrics, velocity_spectrum, RolloutMetrics, Spectrum,
};
use cgrid_core::model::Surrogate;
use cgrid_core::rollout::{rollout_batch, InsReference, Predictor, RolloutMode, SurrogatePredictor, SweReference};
use cgrid_core::solvers::ins::InsSolver;
use cgrid_core::symmetry::EquivarianceReport;
use cgrid_core::train::{train, TrainData, TrainHistory, TrainMode};
use cgrid_core::verify::{ins_solver_report, network_report, swe_solver_report, Target};
use cgrid_core::{Error, Result};
use serde::Serialize;

pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::NanLoss { .. }
        | Error::NonFinite(_)
        | Error::Depth { .. }
        | Error::Cfl { .. }
        | Error::Convergence { .. } => EXIT_NUMERIC,
        Error::Constraint(_) => EXIT_VIOLATION,
        _ => EXIT_CONFIG,
    }
}

pub fn gen_data(cfg: &ExperimentConfig, jobs: usize) -> Result<Manifest> {
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    generate_dataset(&cfg.dataset, &dir, jobs.max(1))
}

#[derive(Clone, Debug, Serialize)]
pub struct ElementError {
    pub element: String,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SymmetryReport {
    pub target: Target,
    pub group: String,
    pub tolerance: f64,
    pub passed: bool,
    pub max_error: f64,
    pub worst: Option<ElementError>,
    pub errors: Vec<ElementError>,
}

impl SymmetryReport {
    fn new(target: Target, r: &EquivarianceReport) -> Self {
        let el = |&(g, e): &(cgrid_core::symmetry::GroupElement, f64)| ElementError {
            element: g.to_string(),
            error: e,
        };
        SymmetryReport {
            target,
            group: r.group.to_string(),
            tolerance: r.tolerance,
            passed: r.passed(),
            max_error: r.max_error(),
            worst: r.worst().as_ref().map(el),
            errors: r.errors.iter().map(el).collect(),
        }
    }

    pub fn lines(&self) -> Vec<String> {
        self.errors
            .iter()
            .map(|e| {
                let verdict = if e.error <= self.tolerance { "ok" } else { "FAIL" };
                format!("{:<6} {:>12.3e}  {verdict}", e.element, e.error)
            })
            .collect()
    }
}

/// Runs one symmetry check and writes `symmetry_<target>.json`.
pub fn verify_symmetry(
    cfg: &ExperimentConfig,
    target: Target,
    break_staggering: bool,
) -> Result<(SymmetryReport, PathBuf)> {
    let s = &cfg.symmetry;
    let mut model = cfg.model.clone();
    if break_staggering {
        model.break_staggering = true;
        model.validate()?;
    }
    let report = match target {
        Target::SweSolver => swe_solver_report(&cfg.dataset.swe, s.grid.unwrap_or(16), s.seed, s.tolerance)?,
        Target::InsSolver => {
            let n = s.grid.unwrap_or(32);
            let peak = cfg.dataset.peak_k.min(n / 2 - 1).max(1);
            ins_solver_report(&cfg.dataset.ins, n, peak, s.seed, s.tolerance)?
        }
        Target::InputLayer | Target::FullNet => {
            let n = s.grid.unwrap_or(cfg.dataset.grid);
            let grid = match cfg.task {
                Task::Swe => cfg.dataset.swe.grid(n)?,
                Task::Ins => cfg.dataset.ins.grid(n)?,
            };
            network_report(&model, &grid, target, s.draws, s.seed, s.tolerance)?
        }
    };
    let out = cfg.output();
    create_dir(&out)?;
    let name = serde_json::to_value(target).expect("target serialises");
    let path = out.join(format!("symmetry_{}.json", name.as_str().expect("string")));
    let rep = SymmetryReport::new(target, &report);
    write_json(&path, &rep)?;
    Ok((rep, path))
}

pub struct TrainOutput {
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

pub fn train_command(
    cfg: &ExperimentConfig,
    mode: Option<TrainMode>,
    mut on_epoch: impl FnMut(&cgrid_core::train::EpochRecord),
) -> Result<TrainOutput> {
    let mut cfg = cfg.clone();
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    let ds = Dataset::load(&cfg.data_dir())?;
    if ds.task() != cfg.task {
        return Err(Error::Config(format!(
            "dataset in {} is {:?}, config is {:?}",
            cfg.data_dir().display(),
            ds.task(),
            cfg.task
        )));
    }
    let data = TrainData::from_dataset(&ds)?;
    let mut model = Surrogate::new(&cfg.model, cfg.train.seed)?;
    let history = train(&mut model, &data, &cfg.train, &mut on_epoch)?;
    let out = cfg.output();
    create_dir(&out)?;
    let ck = Checkpoint {
        model,
        norm: data.norm.clone(),
        grid: data.grid,
        swe: data.swe,
    };
    let path = cfg.checkpoint_path();
    ck.save(&path)?;
    history.write_csv(&out.join("history.csv"))?;
    write_json(&out.join("config.json"), &cfg)?;
    Ok(TrainOutput {
        history,
        checkpoint: path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IcSummary {
    pub ic: usize,
    pub steps_completed: usize,
    pub diverged_at: Option<usize>,
    pub mean_nrmse: Option<f64>,
    pub high_correlation_time: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RolloutSummary {
    pub task: Task,
    pub predictor: String,
    pub steps: usize,
    pub summary_steps: usize,
    pub diverged: usize,
    /// Mean over non-diverged initial conditions.
    pub mean_nrmse: Option<f64>,
    pub ics: Vec<IcSummary>,
}

pub struct RolloutOptions {
    pub checkpoint: Option<PathBuf>,
    pub hybrid: bool,
    pub steps: Option<usize>,
    /// Roll out the reference solver instead of a surrogate.
    pub reference: bool,
}

/// Indices of the fields a model predicts, in state order.
fn predicted_fields(task: Task) -> Vec<usize> {
    match task {
        Task::Swe => vec![0],
        Task::Ins => vec![0, 1],
    }
}

pub fn rollout_command(cfg: &ExperimentConfig, opts: &RolloutOptions) -> Result<RolloutSummary> {
    let ds = Dataset::load(&cfg.data_dir())?;
    let task = ds.task();
    let grid = ds.grid();
    let mode = match (task, opts.hybrid) {
        (Task::Swe, true) => RolloutMode::HybridSwe,
        (Task::Ins, false) => RolloutMode::Direct,
        (Task::Swe, false) => {
            return Err(Error::Config(
                "shallow-water surrogates predict only ζ; pass --hybrid to recover velocities".into(),
            ))
        }
        (Task::Ins, true) => return Err(Error::Config("--hybrid applies only to shallow-water runs".into())),
    };
    let swe = (task == Task::Swe).then_some(ds.manifest.config.swe);
    let ck = if opts.reference {
        None
    } else {
        let path = opts.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
        let ck = Checkpoint::load(&path)?;
        if ck.model.config.task != task || ck.grid != grid {
            return Err(Error::Config(format!(
                "checkpoint {} was trained on a {:?} {}x{} grid, the dataset is {:?} {}x{}",
                path.display(),
                ck.model.config.task,
                ck.grid.ny,
                ck.grid.nx,
                task,
                grid.ny,
                grid.nx
            )));
        }
        Some(ck)
    };
    let refs: Vec<Vec<State>> = ds
        .test
        .iter()
        .take(cfg.rollout.ics.unwrap_or(usize::MAX))
        .map(|s| states(s, task, &grid))
        .collect::<Result<_>>()?;
    if refs.is_empty() {
        return Err(Error::Config("the dataset has no test trajectories".into()));
    }
    let available = refs.iter().map(|r| r.len() - 1).min().unwrap_or(0);
    let steps = opts.steps.or(cfg.rollout.steps).unwrap_or(available);
    if steps == 0 || steps > available {
        return Err(Error::Config(format!(
            "rollout needs 1..={available} steps (test trajectory length), got {steps}"
        )));
    }
    let swe_ref;
    let ins_ref;
    let surrogate;
    let (pred, label): (&dyn Predictor, String) = match &ck {
        Some(ck) => {
            surrogate = SurrogatePredictor {
                model: &ck.model,
                norm: &ck.norm,
            };
            let c = &ck.model.config;
            (&surrogate, format!("{}/{}", c.group, c.constraints.label()))
        }
        None => match task {
            Task::Swe => {
                swe_ref = SweReference {
                    params: ds.manifest.config.swe,
                    grid,
                };
                (&swe_ref, "reference".into())
            }
            Task::Ins => {
                ins_ref = InsReference {
                    solver: InsSolver::new(ds.manifest.config.ins, &grid)?,
                    dt: ds.manifest.dt,
                };
                (&ins_ref, "reference".into())
            }
        },
    };
    let ics: Vec<State> = refs.iter().map(|r| r[0].clone()).collect();
    let records = rollout_batch(pred, &ics, steps, mode, &grid, swe.as_ref())?;

    let dir = cfg.rollout_dir();
    create_dir(&dir)?;
    let fields = predicted_fields(task);
    let k = cfg.rollout.summary_steps.min(steps);
    let mut metrics: Vec<RolloutMetrics> = Vec::with_capacity(records.len());
    let mut ic_summaries = Vec::with_capacity(records.len());
    for (i, (rec, reference)) in records.iter().zip(&refs).enumerate() {
        let m = rollout_metrics(rec, reference, ds.manifest.dt, &grid, swe.as_ref())?;
        m.write_csv(&dir.join(format!("ic_{i:04}.csv")))?;
        let rho: Vec<f64> = m
            .steps
            .iter()
            .map(|s| fields.iter().map(|&f| s.rho[f]).fold(f64::INFINITY, f64::min))
            .collect();
        let times: Vec<f64> = m.steps.iter().map(|s| s.time).collect();
        ic_summaries.push(IcSummary {
            ic: i,
            steps_completed: m.steps.len(),
            diverged_at: rec.diverged_at,
            mean_nrmse: m.mean_nrmse(k, &fields),
            high_correlation_time: high_correlation_time(&rho, &times, cfg.rollout.threshold).ok(),
        });
        metrics.push(m);
    }
    aggregate(&metrics)?.write_csv(&dir.join("aggregate.csv"))?;
    if task == Task::Ins {
        write_spectra(&dir, &records, &refs, &grid)?;
    }
    let finished: Vec<f64> = ic_summaries.iter().filter_map(|s| s.mean_nrmse).collect();
    let summary = RolloutSummary {
        task,
        predictor: label,
        steps,
        summary_steps: k,
        diverged: records.iter().filter(|r| r.diverged()).count(),
        mean_nrmse: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
        ics: ic_summaries,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Mean spectra over initial conditions at the last step every record
/// reached.
fn write_spectra(
    dir: &Path,
    records: &[cgrid_core::rollout::RolloutRecord],
    refs: &[Vec<State>],
    grid: &cgrid_core::grid::GridSpec,
) -> Result<()> {
    let Some(last) = records.iter().map(|r| r.states.len() - 1).min() else {
        return Ok(());
    };
    type SpecFn =
        fn(&cgrid_core::grid::Field, &cgrid_core::grid::Field, &cgrid_core::grid::GridSpec) -> Result<Spectrum>;
    let kinds: [(&str, SpecFn); 2] = [("velocity", velocity_spectrum), ("energy", energy_spectrum)];
    for (name, f) in kinds {
        for (who, states) in [
            ("pred", records.iter().map(|r| &r.states[last]).collect::<Vec<_>>()),
            ("ref", refs.iter().map(|r| &r[last]).collect()),
        ] {
            let mut total: Option<Spectrum> = None;
            for s in &states {
                let State::Ins(s) = s else { continue };
                let sp = f(&s.u, &s.v, grid)?;
                match total.as_mut() {
                    Some(t) => t.add(&sp),
                    None => total = Some(sp),
                }
            }
            if let Some(mut t) = total {
                let n = states.len() as f64;
                t.power.iter_mut().for_each(|p| *p /= n);
                t.write_csv(&dir.join(format!("spectrum_{name}_{who}.csv")))?;
            }
        }
    }
    Ok(())
}

/// Reads a whole output file; used by determinism checks.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
