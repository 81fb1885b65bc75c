//! Autoregressive rollouts of surrogates and reference solvers.

use crate::autodiff::Tape;
use crate::dataset::{State, Task};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, SweState};
use crate::model::Surrogate;
use crate::norm::{target_fields, NormStats};
use crate::solvers::ins::InsSolver;
use crate::solvers::swe::{interim_velocity, swe_step, velocity_update, SweParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Predictions are the whole next state.
    Direct,
    /// The network predicts ζ; velocities come from the solver's update.
    HybridSwe,
}

impl RolloutMode {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Swe => RolloutMode::HybridSwe,
            Task::Ins => RolloutMode::Direct,
        }
    }
}

/// Anything that maps a batch of states to their predicted fields one step
/// ahead (`zeta`, or `u, v`).
pub trait Predictor {
    fn task(&self) -> Task;
    fn predict_targets(&self, batch: &[State]) -> Result<Vec<Vec<Field>>>;
}

/// `[B, 1, rows, cols]` from one field per sample.
pub fn stack_fields(fields: &[&Field]) -> Result<Tensor> {
    let (rows, cols) = fields
        .first()
        .ok_or_else(|| Error::shape("stack", "empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(fields.len() * rows * cols);
    for f in fields {
        if f.shape() != (rows, cols) {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", f.shape(), (rows, cols))));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![fields.len(), 1, rows, cols], data)
}

pub fn unstack_fields(t: &Tensor) -> Result<Vec<Field>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("unstack", format!("expected [B, 1, H, W], got {s:?}")));
    }
    let n = s[2] * s[3];
    t.data()
        .chunks(n)
        .map(|c| Field::from_vec(s[2], s[3], c.to_vec()))
        .collect()
}

/// Per-field batch tensors from per-sample field lists.
pub fn batch_tensors(samples: &[Vec<Field>]) -> Result<Vec<Tensor>> {
    let nf = samples.first().map_or(0, Vec::len);
    (0..nf)
        .map(|k| stack_fields(&samples.iter().map(|s| &s[k]).collect::<Vec<_>>()))
        .collect()
}

pub struct SurrogatePredictor<'a> {
    pub model: &'a Surrogate,
    pub norm: &'a NormStats,
}

impl Predictor for SurrogatePredictor<'_> {
    fn task(&self) -> Task {
        self.model.config.task
    }

    fn predict_targets(&self, batch: &[State]) -> Result<Vec<Vec<Field>>> {
        let inputs: Vec<Vec<Field>> = batch.iter().map(|s| self.norm.normalize_state(s)).collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = batch_tensors(&inputs)?.into_iter().map(|t| tape.constant(t)).collect();
        let out = self.model.forward(&mut tape, &vars)?;
        let per_field: Vec<Vec<Field>> = out
            .iter()
            .map(|&v| unstack_fields(tape.value(v)))
            .collect::<Result<_>>()?;
        let mut result = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let inc: Vec<Field> = per_field.iter().map(|f| f[b].clone()).collect();
            let inc = self.norm.denormalize_increment(&inc);
            let next = target_fields(s)
                .into_iter()
                .zip(&inc)
                .map(|(cur, d)| cur.add(d))
                .collect::<Result<Vec<_>>>()?;
            result.push(next);
        }
        Ok(result)
    }
}

/// The shallow-water solver's elevation, for solver-substitution checks.
pub struct SweReference {
    pub params: SweParams,
    pub grid: GridSpec,
}

impl Predictor for SweReference {
    fn task(&self) -> Task {
        Task::Swe
    }

    fn predict_targets(&self, batch: &[State]) -> Result<Vec<Vec<Field>>> {
        batch
            .iter()
            .map(|s| match s {
                State::Swe(x) => Ok(vec![swe_step(x, &self.params, &self.grid)?.zeta]),
                State::Ins(_) => Err(Error::Data("incompressible state passed to the SWE solver".into())),
            })
            .collect()
    }
}

pub struct InsReference {
    pub solver: InsSolver,
    pub dt: f64,
}

impl Predictor for InsReference {
    fn task(&self) -> Task {
        Task::Ins
    }

    fn predict_targets(&self, batch: &[State]) -> Result<Vec<Vec<Field>>> {
        batch
            .iter()
            .map(|s| match s {
                State::Ins(x) => {
                    let n = self.solver.advance(x, self.dt)?;
                    Ok(vec![n.u, n.v])
                }
                State::Swe(_) => Err(Error::Data("shallow-water state passed to the INS solver".into())),
            })
            .collect()
    }
}

/// Builds the next state from predicted fields.
pub fn assemble_next(
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
    current: &State,
    mut pred: Vec<Field>,
) -> Result<State> {
    match (mode, current) {
        (RolloutMode::Direct, State::Ins(_)) => State::from_fields(Task::Ins, grid, pred),
        (RolloutMode::HybridSwe, State::Swe(s)) => {
            let p = swe.ok_or_else(|| Error::Config("hybrid rollout needs shallow-water parameters".into()))?;
            let zeta = pred
                .pop()
                .ok_or_else(|| Error::Data("missing elevation prediction".into()))?;
            let (us, vs) = interim_velocity(s, p, grid)?;
            let (u, v) = velocity_update(&us, &vs, &zeta, p);
            Ok(State::Swe(SweState {
                zeta,
                u,
                v,
                mask: s.mask.clone(),
            }))
        }
        (RolloutMode::Direct, State::Swe(_)) => Err(Error::Config(
            "shallow-water surrogates predict only ζ; roll them out in hybrid mode".into(),
        )),
        (RolloutMode::HybridSwe, State::Ins(_)) => Err(Error::Config(
            "hybrid mode applies only to the shallow-water task".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    /// `states[0]` is the initial condition.
    pub states: Vec<State>,
    /// First step whose state was non-finite or physically invalid.
    pub diverged_at: Option<usize>,
}

impl RolloutRecord {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Depth { .. } | Error::NonFinite(_) | Error::Cfl { .. } | Error::Convergence { .. }
    )
}

/// Rolls every initial condition forward `steps` times, batching all live
/// members through the predictor together.
pub fn rollout_batch(
    pred: &dyn Predictor,
    ics: &[State],
    steps: usize,
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
) -> Result<Vec<RolloutRecord>> {
    let mut records: Vec<RolloutRecord> = ics
        .iter()
        .map(|s| RolloutRecord {
            states: vec![s.clone()],
            diverged_at: None,
        })
        .collect();
    for step in 1..=steps {
        let live: Vec<usize> = (0..records.len()).filter(|&i| !records[i].diverged()).collect();
        if live.is_empty() {
            break;
        }
        let batch: Vec<State> = live
            .iter()
            .map(|&i| records[i].states.last().expect("non-empty").clone())
            .collect();
        let preds = match pred.predict_targets(&batch) {
            Ok(p) => p,
            Err(e) if is_divergence(&e) && batch.len() == 1 => {
                records[live[0]].diverged_at = Some(step);
                continue;
            }
            Err(e) if is_divergence(&e) => {
                // fall back to one member at a time to find the culprit
                let mut out = Vec::with_capacity(batch.len());
                for s in &batch {
                    out.push(pred.predict_targets(std::slice::from_ref(s)).map(|mut v| v.remove(0)));
                }
                let mut ok = Vec::new();
                for (k, r) in out.into_iter().enumerate() {
                    match r {
                        Ok(p) => ok.push((k, p)),
                        Err(e) if is_divergence(&e) => records[live[k]].diverged_at = Some(step),
                        Err(e) => return Err(e),
                    }
                }
                advance_members(&mut records, &live, &batch, ok, mode, grid, swe, step)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let ok = preds.into_iter().enumerate().collect();
        advance_members(&mut records, &live, &batch, ok, mode, grid, swe, step)?;
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn advance_members(
    records: &mut [RolloutRecord],
    live: &[usize],
    batch: &[State],
    preds: Vec<(usize, Vec<Field>)>,
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
    step: usize,
) -> Result<()> {
    for (k, p) in preds {
        let rec = &mut records[live[k]];
        if p.iter().any(|f| !f.all_finite()) {
            rec.diverged_at = Some(step);
            continue;
        }
        match assemble_next(mode, grid, swe, &batch[k], p) {
            Ok(next) if next.all_finite() => rec.states.push(next),
            Ok(_) => rec.diverged_at = Some(step),
            Err(e) if is_divergence(&e) => rec.diverged_at = Some(step),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

pub fn rollout(
    pred: &dyn Predictor,
    ic: &State,
    steps: usize,
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
) -> Result<RolloutRecord> {
    Ok(rollout_batch(pred, std::slice::from_ref(ic), steps, mode, grid, swe)?.remove(0))
}
