//! Empirical symmetry checks for the solvers and networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{State, Task};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, InsState, Location, SweState};
use crate::model::{ModelConfig, Surrogate};
use crate::solvers::ic::{ins_ic_filtered_noise, swe_ic_square};
use crate::solvers::ins::{InsParams, InsSolver};
use crate::solvers::swe::{swe_step, SweParams};
use crate::symmetry::{act_on_ins_state, act_on_swe_state, check_equivariance, EquivarianceReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    SweSolver,
    InsSolver,
    InputLayer,
    FullNet,
}

fn noise<R: Rng>(rng: &mut R, (rows, cols): (usize, usize), scale: f64) -> Field {
    Field::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .expect("sizes match")
}

/// A random state of `task` on `grid` with every field non-trivial.
pub fn random_state<R: Rng>(rng: &mut R, task: Task, grid: &GridSpec, scale: f64) -> Result<State> {
    let u = noise(rng, grid.shape(Location::FaceX), scale);
    let v = noise(rng, grid.shape(Location::FaceY), scale);
    Ok(match task {
        Task::Swe => {
            let z = noise(rng, grid.shape(Location::Cell), scale);
            State::Swe(SweState::new(grid, z, u, v)?)
        }
        Task::Ins => State::Ins(InsState::new(grid, u, v)?),
    })
}

/// Worst error per element over several reports of the same group.
pub fn merge_reports(reports: &[EquivarianceReport]) -> Result<EquivarianceReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no reports to merge".into()))?;
    let mut out = first.clone();
    for r in &reports[1..] {
        for (slot, &(g, e)) in out.errors.iter_mut().zip(&r.errors) {
            debug_assert_eq!(slot.0, g);
            slot.1 = slot.1.max(e);
        }
    }
    Ok(out)
}

/// One semi-implicit step from a bump initial condition with a random
/// velocity field, so that every term of the scheme is active.
pub fn swe_solver_report(p: &SweParams, n: usize, seed: u64, tolerance: f64) -> Result<EquivarianceReport> {
    let grid = p.grid(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = swe_ic_square(&mut rng, &grid)?;
    s.u = s.u.zip_map(&noise(&mut rng, s.u.shape(), 0.05), |a, b| a + b)?;
    s.v = s.v.zip_map(&noise(&mut rng, s.v.shape(), 0.05), |a, b| a + b)?;
    let s = SweState::new(&grid, s.zeta, s.u, s.v)?;
    check_equivariance(
        |x: &SweState| swe_step(x, p, &grid),
        crate::symmetry::Group::P4m,
        &s,
        |g, x| act_on_swe_state(g, x, &grid),
        |g, y| act_on_swe_state(g, y, &grid),
        tolerance,
    )
}

/// One stored step (`dt`, with CFL substeps) from filtered noise.
pub fn ins_solver_report(
    p: &InsParams,
    n: usize,
    peak_k: usize,
    seed: u64,
    tolerance: f64,
) -> Result<EquivarianceReport> {
    let grid = p.grid(n)?;
    let solver = InsSolver::new(*p, &grid)?;
    let s = ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(seed), peak_k, &grid)?;
    check_equivariance(
        |x: &InsState| solver.advance(x, p.dt),
        crate::symmetry::Group::P4m,
        &s,
        |g, x| act_on_ins_state(g, x, &grid),
        |g, y| act_on_ins_state(g, y, &grid),
        tolerance,
    )
}

/// Random weights and inputs for `draws` independent draws.
pub fn network_report(
    cfg: &ModelConfig,
    grid: &GridSpec,
    target: Target,
    draws: usize,
    seed: u64,
    tolerance: f64,
) -> Result<EquivarianceReport> {
    if draws == 0 {
        return Err(Error::Config("at least one draw is needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut model = Surrogate::new(cfg, rng.random())?;
        // zero-initialised biases would hide bias-sharing errors
        for id in 0..model.store.len() {
            for w in model.store.get_mut(id).data_mut() {
                *w = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = random_state(&mut rng, cfg.task, grid, 1.0)?;
        reports.push(match target {
            Target::InputLayer => model.check_input_equivariance(grid, &x, tolerance)?,
            Target::FullNet => model.check_equivariance(grid, &x, tolerance)?,
            _ => return Err(Error::Config("solver targets are not networks".into())),
        });
    }
    merge_reports(&reports)
}
