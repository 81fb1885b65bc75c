//! Trajectory generation and on-disk datasets.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{face_average_coarsen, Field, GridSpec, InsState, Location, SweState};
use crate::io::{create_dir, read_json, write_json, FieldDesc, FieldStack, VERSION};
use crate::solvers::ic::{ins_ic_filtered_noise, swe_ic, SweIcKind};
use crate::solvers::ins::{InsParams, InsSolver};
use crate::solvers::swe::{swe_step, SweParams};
use crate::symmetry::{act_on_ins_state, act_on_swe_state, Flatten, GroupElement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Swe,
    Ins,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub task: Task,
    /// Cells per side of the stored (model) grid.
    pub grid: usize,
    /// Stored steps per trajectory; each file holds `steps + 1` snapshots.
    pub steps: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub swe: SweParams,
    pub swe_ic: SweIcKind,
    pub ins: InsParams,
    /// Fine-to-stored grid ratio for the incompressible task.
    pub coarsen: usize,
    /// Stored-resolution steps discarded before the first snapshot.
    pub burn_in: usize,
    pub peak_k: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::swe_desk()
    }
}

impl DatasetConfig {
    pub fn swe_desk() -> Self {
        DatasetConfig {
            task: Task::Swe,
            grid: 32,
            steps: 100,
            train: 20,
            val: 5,
            test: 5,
            seed: 0,
            swe: SweParams::default(),
            swe_ic: SweIcKind::Square,
            ins: InsParams::default(),
            coarsen: 2,
            burn_in: 148,
            peak_k: 10,
        }
    }

    pub fn ins_desk() -> Self {
        DatasetConfig {
            task: Task::Ins,
            grid: 48,
            steps: 120,
            ..DatasetConfig::swe_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::Config(format!(
                "dataset.grid must be at least 4, got {}",
                self.grid
            )));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Error::Config("dataset needs at least one trajectory".into()));
        }
        match self.task {
            Task::Swe => self.swe.validate(),
            Task::Ins => {
                self.ins.validate()?;
                if self.coarsen == 0 {
                    return Err(Error::Config("dataset.coarsen must be positive".into()));
                }
                let fine = self.grid * self.coarsen;
                if self.peak_k < 1 || self.peak_k >= fine / 2 {
                    return Err(Error::Config(format!(
                        "dataset.peak_k {} out of range for a {fine}-cell fine grid",
                        self.peak_k
                    )));
                }
                Ok(())
            }
        }
    }

    /// Grid on which snapshots are stored.
    pub fn model_grid(&self) -> Result<GridSpec> {
        match self.task {
            Task::Swe => self.swe.grid(self.grid),
            Task::Ins => self.ins.grid(self.grid),
        }
    }

    /// Time between stored snapshots.
    pub fn dt(&self) -> f64 {
        match self.task {
            Task::Swe => self.swe.dt,
            Task::Ins => self.ins.dt,
        }
    }

    pub fn trajectory_count(&self) -> usize {
        self.train + self.val + self.test
    }

    /// One seed per trajectory, drawn from the master seed.
    pub fn trajectory_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.trajectory_count()).map(|_| rng.random()).collect()
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn field_descs(task: Task, grid: &GridSpec) -> Vec<FieldDesc> {
    let desc = |name: &str, kind| {
        let (rows, cols) = grid.shape(kind);
        FieldDesc {
            name: name.into(),
            kind,
            rows,
            cols,
        }
    };
    match task {
        Task::Swe => vec![
            desc("zeta", Location::Cell),
            desc("u", Location::FaceX),
            desc("v", Location::FaceY),
        ],
        Task::Ins => vec![desc("u", Location::FaceX), desc("v", Location::FaceY)],
    }
}

pub fn swe_stack(states: &[SweState], grid: &GridSpec) -> Result<FieldStack> {
    let mut stack = FieldStack::new(field_descs(Task::Swe, grid));
    for s in states {
        stack.push(vec![s.zeta.clone(), s.u.clone(), s.v.clone()])?;
    }
    Ok(stack)
}

pub fn ins_stack(states: &[InsState], grid: &GridSpec) -> Result<FieldStack> {
    let mut stack = FieldStack::new(field_descs(Task::Ins, grid));
    for s in states {
        stack.push(vec![s.u.clone(), s.v.clone()])?;
    }
    Ok(stack)
}

fn check_layout(stack: &FieldStack, task: Task, grid: &GridSpec) -> Result<()> {
    if stack.fields != field_descs(task, grid) {
        return Err(Error::Data(format!(
            "field layout {:?} does not match a {:?} task on a {}×{} grid",
            stack.fields.iter().map(|d| &d.name).collect::<Vec<_>>(),
            task,
            grid.ny,
            grid.nx
        )));
    }
    Ok(())
}

pub fn swe_states(stack: &FieldStack, grid: &GridSpec) -> Result<Vec<SweState>> {
    check_layout(stack, Task::Swe, grid)?;
    stack
        .frames
        .iter()
        .map(|f| SweState::new(grid, f[0].clone(), f[1].clone(), f[2].clone()))
        .collect()
}

pub fn ins_states(stack: &FieldStack, grid: &GridSpec) -> Result<Vec<InsState>> {
    check_layout(stack, Task::Ins, grid)?;
    stack
        .frames
        .iter()
        .map(|f| InsState::new(grid, f[0].clone(), f[1].clone()))
        .collect()
}

/// A snapshot of either task.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    Swe(SweState),
    Ins(InsState),
}

impl State {
    pub fn task(&self) -> Task {
        match self {
            State::Swe(_) => Task::Swe,
            State::Ins(_) => Task::Ins,
        }
    }

    /// Fields in stack order (`zeta, u, v` or `u, v`).
    pub fn fields(&self) -> Vec<&Field> {
        match self {
            State::Swe(s) => vec![&s.zeta, &s.u, &s.v],
            State::Ins(s) => vec![&s.u, &s.v],
        }
    }

    pub fn from_fields(task: Task, grid: &GridSpec, mut f: Vec<Field>) -> Result<Self> {
        let want = match task {
            Task::Swe => 3,
            Task::Ins => 2,
        };
        if f.len() != want {
            return Err(Error::Data(format!(
                "{task:?} state needs {want} fields, got {}",
                f.len()
            )));
        }
        Ok(match task {
            Task::Swe => {
                let v = f.pop().expect("len");
                let u = f.pop().expect("len");
                let z = f.pop().expect("len");
                State::Swe(SweState::new(grid, z, u, v)?)
            }
            Task::Ins => {
                let v = f.pop().expect("len");
                let u = f.pop().expect("len");
                State::Ins(InsState::new(grid, u, v)?)
            }
        })
    }

    pub fn act(&self, g: GroupElement, grid: &GridSpec) -> Result<State> {
        Ok(match self {
            State::Swe(s) => State::Swe(act_on_swe_state(g, s, grid)?),
            State::Ins(s) => State::Ins(act_on_ins_state(g, s, grid)?),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|f| f.all_finite())
    }
}

impl Flatten for State {
    fn flat(&self) -> Vec<f64> {
        self.fields().iter().flat_map(|f| f.data().iter().copied()).collect()
    }
}

pub fn states(stack: &FieldStack, task: Task, grid: &GridSpec) -> Result<Vec<State>> {
    Ok(match task {
        Task::Swe => swe_states(stack, grid)?.into_iter().map(State::Swe).collect(),
        Task::Ins => ins_states(stack, grid)?.into_iter().map(State::Ins).collect(),
    })
}

pub fn state_stack(states: &[State], task: Task, grid: &GridSpec) -> Result<FieldStack> {
    let mut stack = FieldStack::new(field_descs(task, grid));
    for s in states {
        if s.task() != task {
            return Err(Error::Data("mixed tasks in one trajectory".into()));
        }
        stack.push(s.fields().into_iter().cloned().collect())?;
    }
    Ok(stack)
}

/// Reference trajectory of `steps + 1` snapshots for one seed.
pub fn generate_trajectory(cfg: &DatasetConfig, seed: u64) -> Result<FieldStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cfg.model_grid()?;
    match cfg.task {
        Task::Swe => {
            let mut states = vec![swe_ic(&mut rng, cfg.swe_ic, &grid)?];
            for _ in 0..cfg.steps {
                let next = swe_step(states.last().expect("non-empty"), &cfg.swe, &grid)?;
                states.push(next);
            }
            swe_stack(&states, &grid)
        }
        Task::Ins => {
            let fine = cfg.ins.grid(cfg.grid * cfg.coarsen)?;
            let solver = InsSolver::new(cfg.ins, &fine)?;
            let mut s = ins_ic_filtered_noise(&mut rng, cfg.peak_k, &fine)?;
            for _ in 0..cfg.burn_in {
                s = solver.advance(&s, cfg.ins.dt)?;
            }
            let mut states = Vec::with_capacity(cfg.steps + 1);
            for k in 0..=cfg.steps {
                if k > 0 {
                    s = solver.advance(&s, cfg.ins.dt)?;
                }
                states.push(face_average_coarsen(&s, &fine, cfg.coarsen)?.0);
            }
            ins_stack(&states, &grid)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub file: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u16,
    pub config: DatasetConfig,
    pub grid: GridSpec,
    pub dt: f64,
    pub fields: Vec<FieldDesc>,
    pub trajectories: Vec<TrajectoryEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads, returning results in
/// index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                out.lock().expect("worker panicked")[i] = Some(v);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every index visited"))
        .collect()
}

/// Writes every trajectory plus the manifest into `dir`.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(dir)?;
    let grid = cfg.model_grid()?;
    let seeds = cfg.trajectory_seeds();
    let results = parallel_map(seeds.len(), jobs, |i| -> Result<TrajectoryEntry> {
        let stack = generate_trajectory(cfg, seeds[i])?;
        let file = format!("traj_{i:04}.cgf");
        stack.write(&dir.join(&file))?;
        Ok(TrajectoryEntry {
            file,
            split: cfg.split_of(i),
            seed: seeds[i],
        })
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: "CGF1".into(),
        format_version: VERSION,
        config: cfg.clone(),
        grid,
        dt: cfg.dt(),
        fields: field_descs(cfg.task, &grid),
        trajectories,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<FieldStack>,
    pub val: Vec<FieldStack>,
    pub test: Vec<FieldStack>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        if manifest.format != "CGF1" || manifest.format_version != VERSION {
            return Err(Error::Format {
                path: dir.join(MANIFEST),
                detail: format!("unsupported format {} v{}", manifest.format, manifest.format_version),
            });
        }
        let mut ds = Dataset {
            dir: dir.to_path_buf(),
            manifest: manifest.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for t in &manifest.trajectories {
            let stack = FieldStack::read(&dir.join(&t.file))?;
            check_layout(&stack, manifest.config.task, &manifest.grid)?;
            match t.split {
                Split::Train => ds.train.push(stack),
                Split::Val => ds.val.push(stack),
                Split::Test => ds.test.push(stack),
            }
        }
        Ok(ds)
    }

    pub fn task(&self) -> Task {
        self.manifest.config.task
    }

    pub fn grid(&self) -> GridSpec {
        self.manifest.grid
    }

    pub fn split(&self, s: Split) -> &[FieldStack] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::divergence;

    #[test]
    fn counts_and_determinism() {
        let cfg = DatasetConfig {
            grid: 8,
            steps: 3,
            train: 1,
            val: 0,
            test: 0,
            ..DatasetConfig::swe_desk()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, dir.path(), 1).unwrap();
        assert_eq!(m.trajectories.len(), 1);
        let stack = FieldStack::read(&dir.path().join(&m.trajectories[0].file)).unwrap();
        assert_eq!(stack.frames.len(), 4);
        let a = std::fs::read(dir.path().join("traj_0000.cgf")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, dir2.path(), 2).unwrap();
        assert_eq!(a, std::fs::read(dir2.path().join("traj_0000.cgf")).unwrap());
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 1);
    }

    #[test]
    fn coarse_ins_snapshots_stay_divergence_free() {
        let cfg = DatasetConfig {
            grid: 8,
            steps: 2,
            burn_in: 1,
            coarsen: 2,
            peak_k: 3,
            ins: InsParams {
                dt: 0.2,
                ..InsParams::default()
            },
            ..DatasetConfig::ins_desk()
        };
        let stack = generate_trajectory(&cfg, 5).unwrap();
        let grid = cfg.model_grid().unwrap();
        for s in ins_states(&stack, &grid).unwrap() {
            assert!(divergence(&s.u, &s.v, &grid).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(7, 3, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
