//! Supervised training on normalised one-step increments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::dataset::{states, Dataset, Split, State, Task};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::Surrogate;
use crate::norm::{increment, target_fields, NormStats};
use crate::optim::{Adam, AdamConfig};
use crate::rollout::{assemble_next, batch_tensors, Predictor, RolloutMode, SurrogatePredictor};
use crate::solvers::swe::SweParams;
use crate::symmetry::Group;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    Pushforward,
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Group sampled from in augmented mode.
    pub augment_group: Group,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            mode: TrainMode::Standard,
            augment_group: Group::P4m,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, patience and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Physical trajectories plus everything needed to normalise and step them.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub task: Task,
    pub grid: GridSpec,
    pub swe: Option<SweParams>,
    pub norm: NormStats,
    pub train: Vec<Vec<State>>,
    pub val: Vec<Vec<State>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let task = ds.task();
        let grid = ds.grid();
        if ds.train.is_empty() || ds.val.is_empty() {
            return Err(Error::Data("training needs non-empty train and val splits".into()));
        }
        let norm = NormStats::fit(&ds.train, task, &grid)?;
        let load =
            |s: Split| -> Result<Vec<Vec<State>>> { ds.split(s).iter().map(|st| states(st, task, &grid)).collect() };
        Ok(TrainData {
            task,
            grid,
            swe: (task == Task::Swe).then_some(ds.manifest.config.swe),
            norm,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        })
    }

    pub fn mode(&self) -> RolloutMode {
        RolloutMode::for_task(self.task)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val(&self) -> f64 {
        self.epochs.get(self.best).map_or(f64::INFINITY, |e| e.val_loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.epochs {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Builds `Σ sse / Σ n` over the predicted fields on a fresh tape.
fn loss_on_tape(
    tape: &mut Tape,
    model: &Surrogate,
    store: &ParamStore,
    norm: &NormStats,
    pairs: &[(State, State)],
) -> Result<(Var, usize)> {
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        inputs.push(norm.normalize_state(x));
        targets.push(norm.normalize_increment(&increment(x, y)?));
    }
    let xs: Vec<Var> = batch_tensors(&inputs)?.into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward_with(tape, store, &xs)?;
    let mut total: Option<Var> = None;
    let mut n = 0usize;
    for (o, t) in out.into_iter().zip(batch_tensors(&targets)?) {
        n += t.len();
        let t = tape.constant(t);
        let s = tape.sse(o, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Data("model has no outputs".into()))?;
    Ok((tape.scale(total, 1.0 / n as f64), n))
}

/// One-step MSE on normalised increments with its parameter gradient.
pub fn loss_and_grad(model: &Surrogate, norm: &NormStats, pairs: &[(State, State)]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (loss, _) = loss_on_tape(&mut tape, model, &model.store, norm, pairs)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss, &model.store)?;
    Ok((value, grads))
}

/// Summed squared error and element count, without a backward pass.
pub fn loss_sums(model: &Surrogate, norm: &NormStats, pairs: &[(State, State)]) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (loss, n) = loss_on_tape(&mut tape, model, &model.store, norm, pairs)?;
    Ok((tape.value(loss).data()[0] * n as f64, n))
}

/// First autoregressive step of a pushforward pair: the model's own
/// prediction of `x_{t+1}`, produced outside any tape.
pub fn detached_step(
    model: &Surrogate,
    norm: &NormStats,
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
    x_t: &[State],
) -> Result<Vec<State>> {
    let pred = SurrogatePredictor { model, norm }.predict_targets(x_t)?;
    x_t.iter()
        .zip(pred)
        .map(|(s, p)| assemble_next(mode, grid, swe, s, p))
        .collect()
}

/// Loss after two autoregressive steps with gradients through the second
/// only.
pub fn pushforward_batch(
    model: &Surrogate,
    norm: &NormStats,
    mode: RolloutMode,
    grid: &GridSpec,
    swe: Option<&SweParams>,
    x_t: &[State],
    x_t2: &[State],
) -> Result<(f64, Vec<Tensor>)> {
    let hat = detached_step(model, norm, mode, grid, swe, x_t)?;
    let pairs: Vec<(State, State)> = hat.into_iter().zip(x_t2.iter().cloned()).collect();
    loss_and_grad(model, norm, &pairs)
}

/// Applies one uniformly drawn element of `group` to both states.
pub fn augment_pair<R: Rng + ?Sized>(
    rng: &mut R,
    group: Group,
    grid: &GridSpec,
    input: &State,
    target: &State,
) -> Result<(State, State)> {
    let elems = group.elements();
    let g = elems[rng.random_range(0..elems.len())];
    Ok((input.act(g, grid)?, target.act(g, grid)?))
}

/// One-step MSE over every consecutive pair of the validation split.
pub fn validation_loss(model: &Surrogate, data: &TrainData, batch: usize) -> Result<f64> {
    let pairs: Vec<(State, State)> = data
        .val
        .iter()
        .flat_map(|traj| traj.windows(2).map(|w| (w[0].clone(), w[1].clone())))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("validation split has no consecutive snapshots".into()));
    }
    let (mut sse, mut n) = (0.0, 0usize);
    for chunk in pairs.chunks(batch.max(1)) {
        let (s, m) = loss_sums(model, &data.norm, chunk)?;
        sse += s;
        n += m;
    }
    Ok(sse / n as f64)
}

/// Trains in place and leaves the best-validation weights in `model`.
pub fn train(
    model: &mut Surrogate,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if model.config.task != data.task {
        return Err(Error::Config("model and dataset tasks differ".into()));
    }
    let lookahead = if cfg.mode == TrainMode::Pushforward { 2 } else { 1 };
    let mut order: Vec<(usize, usize)> = data
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, traj)| (0..traj.len().saturating_sub(lookahead)).map(move |t| (i, t)))
        .collect();
    if order.is_empty() {
        return Err(Error::Data("training trajectories are too short".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(
        &model.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )?;
    let mode = data.mode();
    let swe = data.swe.as_ref();
    let mut history = TrainHistory::default();
    let mut best_store = model.store.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let nan = || Error::NanLoss { epoch, batch: b };
            let (loss, grads) = match cfg.mode {
                TrainMode::Standard | TrainMode::Augmented => {
                    let mut pairs = Vec::with_capacity(chunk.len());
                    for &(i, t) in chunk {
                        let (x, y) = (&data.train[i][t], &data.train[i][t + 1]);
                        pairs.push(if cfg.mode == TrainMode::Augmented {
                            augment_pair(&mut rng, cfg.augment_group, &data.grid, x, y)?
                        } else {
                            (x.clone(), y.clone())
                        });
                    }
                    loss_and_grad(model, &data.norm, &pairs)?
                }
                TrainMode::Pushforward => {
                    let x_t: Vec<State> = chunk.iter().map(|&(i, t)| data.train[i][t].clone()).collect();
                    let x_t2: Vec<State> = chunk.iter().map(|&(i, t)| data.train[i][t + 2].clone()).collect();
                    pushforward_batch(model, &data.norm, mode, &data.grid, swe, &x_t, &x_t2).map_err(|e| match e {
                        Error::Depth { .. } | Error::NonFinite(_) => nan(),
                        e => e,
                    })?
                }
            };
            if !loss.is_finite() {
                return Err(nan());
            }
            opt.step(&mut model.store, &grads)?;
            sum += loss * chunk.len() as f64;
            n += chunk.len();
        }
        let val = validation_loss(model, data, cfg.batch_size)?;
        if !val.is_finite() {
            return Err(Error::NanLoss { epoch, batch: 0 });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sum / n as f64,
            val_loss: val,
        };
        history.epochs.push(rec);
        on_epoch(&rec);
        if val < best_val {
            best_val = val;
            best_store = model.store.clone();
            history.best = history.epochs.len() - 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.store = best_store;
    Ok(history)
}

/// Increments a model predicts for `batch`, in physical units.
pub fn predict_increments(
    model: &Surrogate,
    norm: &NormStats,
    batch: &[State],
) -> Result<Vec<Vec<crate::grid::Field>>> {
    let pred = SurrogatePredictor { model, norm }.predict_targets(batch)?;
    batch
        .iter()
        .zip(pred)
        .map(|(s, p)| target_fields(s).into_iter().zip(&p).map(|(a, b)| b.sub(a)).collect())
        .collect()
}
