//! Surrogate assembly: lifting, hidden group convolutions, an output head
//! and the constraint layer.
//!
//! Models read normalised states and emit normalised increments. Increments
//! are normalised by a scale only, so the constraint layers (mean removal,
//! curl of a potential) commute with de-normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::constraints::{curl_on_tape, mean_correction_on_tape};
use crate::dataset::{State, Task};
use crate::error::{Error, Result};
use crate::grid::{boundary_mask, Boundary, Field, GridSpec};
use crate::layers::{pad_mode, CollocatedLifting, GroupConv, ScalarHead, StaggeredLifting, VectorHead, VertexHead};
use crate::rollout::{batch_tensors, unstack_fields};
use crate::symmetry::{
    act_on_cell_field, act_on_regular_tensor, act_on_staggered_vector, check_equivariance, EquivarianceReport, Group,
    GroupElement,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    #[serde(rename = "none")]
    None,
    /// Mass: zero-mean `Δζ` (SWE) or divergence-free velocity (INS).
    #[serde(rename = "M")]
    Mass,
    #[serde(rename = "rho_u", alias = "ρu")]
    Momentum,
    #[serde(rename = "M+rho_u", alias = "M+ρu")]
    MassMomentum,
}

impl Constraint {
    pub fn label(self) -> &'static str {
        match self {
            Constraint::None => "none",
            Constraint::Mass => "M",
            Constraint::Momentum => "rho_u",
            Constraint::MassMomentum => "M+rho_u",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub group: Group,
    pub constraints: Constraint,
    /// Fibres per hidden layer (channels are `hidden · |G|`).
    pub hidden: usize,
    /// Hidden group convolutions after the lifting layer.
    pub depth: usize,
    pub kernel: usize,
    /// Optional per-layer fibres (`depth + 1` entries) overriding `hidden`.
    pub widths: Option<Vec<usize>>,
    /// Collocated vector lifting that ignores the staggering (negative control).
    pub break_staggering: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Swe,
            group: Group::P4m,
            constraints: Constraint::Mass,
            hidden: 4,
            depth: 3,
            kernel: 3,
            widths: None,
            break_staggering: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let allowed: &[Constraint] = match self.task {
            Task::Swe => &[Constraint::None, Constraint::Mass],
            Task::Ins => &[Constraint::None, Constraint::Momentum, Constraint::MassMomentum],
        };
        if !allowed.contains(&self.constraints) {
            return Err(Error::Config(format!(
                "constraint {} is not available for the {:?} task (allowed: {})",
                self.constraints.label(),
                self.task,
                allowed.iter().map(|c| c.label()).collect::<Vec<_>>().join(", ")
            )));
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!("model.kernel must be odd, got {}", self.kernel)));
        }
        let w = self.layer_widths();
        if w.len() != self.depth + 1 || w.contains(&0) {
            return Err(Error::Config(format!(
                "model widths must be {} positive entries, got {w:?}",
                self.depth + 1
            )));
        }
        if self.break_staggering && self.task != Task::Ins {
            return Err(Error::Config(
                "break_staggering is only defined for the periodic task".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| vec![self.hidden; self.depth + 1])
    }

    pub fn boundary(&self) -> Boundary {
        match self.task {
            Task::Swe => Boundary::Closed,
            Task::Ins => Boundary::Periodic,
        }
    }

    /// Trainable scalar count, computed from the layer shapes.
    pub fn param_count(&self) -> usize {
        let n = self.group.order();
        let k = self.kernel;
        let w = self.layer_widths();
        // SWE: ζ plus the wall mask
        let cell_in = 2 * usize::from(self.task == Task::Swe);
        let mut total = if self.break_staggering {
            2 * w[0] * k * k + w[0]
        } else {
            w[0] * (cell_in * k * k + 2 * k * 2) + w[0]
        };
        for i in 1..w.len() {
            total += w[i] * w[i - 1] * n * k * k + w[i];
        }
        let last = *w.last().expect("non-empty");
        total += match (self.task, self.constraints) {
            (Task::Swe, _) => last * n * k * k + 1,
            (Task::Ins, Constraint::MassMomentum) => last * n * 4 + usize::from(self.group != Group::P4m),
            (Task::Ins, _) if self.group == Group::P1 => 4 * last + 2,
            (Task::Ins, _) => last * n * k * k,
        };
        total
    }

    /// A p1 configuration using `constraints` whose parameter count is within
    /// 2% of this one's, with widths as even as possible. Falls back to the
    /// closest count when nothing lands inside 2%.
    pub fn matched_p1(&self, constraints: Constraint) -> ModelConfig {
        let target = self.param_count() as f64;
        let base = ModelConfig {
            group: Group::P1,
            constraints,
            widths: None,
            ..self.clone()
        };
        let uniform = ((self.hidden as f64) * (self.group.order() as f64).sqrt()).round() as usize;
        let hi = (2 * uniform).max(3);
        // (outside 2%, max/min width, count error)
        let mut best = ((true, f64::INFINITY, f64::INFINITY), base.clone());
        // interior layers share one width; the first and last vary freely
        for w in 1..=hi {
            for first in 1..=hi {
                for last in 1..=hi {
                    let mut widths = vec![w; self.depth + 1];
                    widths[0] = first;
                    *widths.last_mut().expect("non-empty") = last;
                    let spread = *widths.iter().max().expect("non-empty") as f64
                        / *widths.iter().min().expect("non-empty") as f64;
                    let cand = ModelConfig {
                        widths: Some(widths),
                        ..base.clone()
                    };
                    let err = (cand.param_count() as f64 / target - 1.0).abs();
                    let outside = err > 0.02;
                    let key = (outside, if outside { 0.0 } else { spread }, err);
                    if key.partial_cmp(&best.0) == Some(std::cmp::Ordering::Less) {
                        best = (key, cand);
                    }
                }
            }
        }
        best.1
    }

    pub fn input_fields(&self) -> usize {
        match self.task {
            Task::Swe => 3,
            Task::Ins => 2,
        }
    }

    pub fn output_fields(&self) -> usize {
        match self.task {
            Task::Swe => 1,
            Task::Ins => 2,
        }
    }
}

#[derive(Clone, Debug)]
enum Input {
    Staggered(StaggeredLifting),
    Collocated(CollocatedLifting),
}

#[derive(Clone, Debug)]
enum Head {
    Scalar(ScalarHead),
    Vector(VectorHead),
    Vertex(VertexHead),
}

#[derive(Clone, Debug)]
pub struct Surrogate {
    pub config: ModelConfig,
    pub store: ParamStore,
    input: Input,
    convs: Vec<GroupConv>,
    head: Head,
}

impl Surrogate {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = config.group;
        let k = config.kernel;
        let bc = config.boundary();
        let w = config.layer_widths();
        let cell_in = 2 * usize::from(config.task == Task::Swe);
        let input = if config.break_staggering {
            Input::Collocated(CollocatedLifting::new(&mut store, &mut rng, "lift", g, 1, w[0], k)?)
        } else {
            Input::Staggered(StaggeredLifting::new(
                &mut store, &mut rng, "lift", g, bc, cell_in, 1, w[0], k,
            )?)
        };
        let mut convs = Vec::with_capacity(config.depth);
        for i in 1..w.len() {
            convs.push(GroupConv::new(
                &mut store,
                &mut rng,
                &format!("conv{i}"),
                g,
                w[i - 1],
                w[i],
                k,
                pad_mode(bc),
                true,
            )?);
        }
        let last = *w.last().expect("non-empty");
        let head = match (config.task, config.constraints) {
            (Task::Swe, _) => Head::Scalar(ScalarHead::new(&mut store, &mut rng, "head", g, last, k, pad_mode(bc))?),
            (Task::Ins, Constraint::MassMomentum) => {
                Head::Vertex(VertexHead::new(&mut store, &mut rng, "head", g, last)?)
            }
            (Task::Ins, _) => Head::Vector(VectorHead::new(&mut store, &mut rng, "head", g, last, k, bc, None)?),
        };
        let model = Surrogate {
            config: config.clone(),
            store,
            input,
            convs,
            head,
        };
        debug_assert_eq!(model.store.count(), config.param_count());
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Normalised inputs (`zeta, u, v` or `u, v`, each `[B, 1, .., ..]`) to
    /// normalised increments (`dzeta` or `du, dv`).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, inputs: &[Var]) -> Result<Vec<Var>> {
        if inputs.len() != self.config.input_fields() {
            return Err(Error::shape(
                "model",
                format!(
                    "expected {} input fields, got {}",
                    self.config.input_fields(),
                    inputs.len()
                ),
            ));
        }
        let (cells, u, v) = match self.config.task {
            Task::Swe => (Some(inputs[0]), inputs[1], inputs[2]),
            Task::Ins => (None, inputs[0], inputs[1]),
        };
        let mut x = self.lift_on_tape(tape, store, cells, u, v)?;
        x = tape.gelu(x);
        for conv in &self.convs {
            x = conv.forward(tape, store, x)?;
            x = tape.gelu(x);
        }
        let c = self.config.constraints;
        Ok(match &self.head {
            Head::Scalar(h) => {
                let dz = h.forward(tape, store, x)?;
                match c {
                    Constraint::Mass => vec![mean_correction_on_tape(tape, dz)?],
                    _ => vec![dz],
                }
            }
            Head::Vector(h) => {
                let (du, dv) = h.forward(tape, store, x)?;
                match c {
                    Constraint::Momentum => {
                        vec![mean_correction_on_tape(tape, du)?, mean_correction_on_tape(tape, dv)?]
                    }
                    _ => vec![du, dv],
                }
            }
            Head::Vertex(h) => {
                let a = h.forward(tape, store, x)?;
                let (du, dv) = curl_on_tape(tape, a, 1.0)?;
                vec![mean_correction_on_tape(tape, du)?, mean_correction_on_tape(tape, dv)?]
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        self.forward_with(tape, &self.store, inputs)
    }

    fn lift_on_tape(&self, tape: &mut Tape, store: &ParamStore, cells: Option<Var>, u: Var, v: Var) -> Result<Var> {
        let cells = match cells {
            Some(z) => {
                let [b, _, ny, nx] = tape.value(z).dims4("cell input")?;
                let mask = tape.constant(wall_mask(b, ny, nx));
                Some(tape.concat_channels(z, mask)?)
            }
            None => None,
        };
        match &self.input {
            Input::Staggered(l) => l.forward(tape, store, cells, u, v),
            Input::Collocated(l) => l.forward(tape, store, u, v),
        }
    }

    /// Input layer alone on one sample, as a regular-representation tensor.
    pub fn lift_fields(&self, fields: &[Field]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = batch_tensors(&[fields.to_vec()])?
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let (cells, u, v) = match self.config.task {
            Task::Swe => (Some(xs[0]), xs[1], xs[2]),
            Task::Ins => (None, xs[0], xs[1]),
        };
        let y = self.lift_on_tape(&mut tape, &self.store, cells, u, v)?;
        Ok(tape.value(y).clone())
    }

    /// Checks the input layer against the regular representation.
    pub fn check_input_equivariance(
        &self,
        grid: &GridSpec,
        input: &State,
        tolerance: f64,
    ) -> Result<EquivarianceReport> {
        let group = self.config.group;
        check_equivariance(
            |x: &State| self.lift_fields(&x.fields().into_iter().cloned().collect::<Vec<_>>()),
            group,
            input,
            |g, x| x.act(g, grid),
            |g, y: &Tensor| act_on_regular_tensor(g, group, y),
            tolerance,
        )
    }

    /// The network on one sample: input fields to output fields.
    pub fn apply_fields(&self, fields: &[Field]) -> Result<Vec<Field>> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = batch_tensors(&[fields.to_vec()])?
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let out = self.forward(&mut tape, &xs)?;
        out.iter()
            .map(|&v| Ok(unstack_fields(tape.value(v))?.remove(0)))
            .collect()
    }

    /// Checks `net(T_g x) = T_g net(x)` over the model's group.
    pub fn check_equivariance(&self, grid: &GridSpec, input: &State, tolerance: f64) -> Result<EquivarianceReport> {
        let task = self.config.task;
        let act_out = |g: GroupElement, y: &Vec<Field>| -> Result<Vec<Field>> {
            Ok(match task {
                Task::Swe => vec![act_on_cell_field(g, &y[0], grid)?],
                Task::Ins => {
                    let (u, v) = act_on_staggered_vector(g, &y[0], &y[1], grid)?;
                    vec![u, v]
                }
            })
        };
        check_equivariance(
            |x: &State| self.apply_fields(&x.fields().into_iter().cloned().collect::<Vec<_>>()),
            self.config.group,
            input,
            |g, x| x.act(g, grid),
            act_out,
            tolerance,
        )
    }
}

/// [`boundary_mask`] repeated over a batch, as `[B, 1, ny, nx]`.
fn wall_mask(batch: usize, ny: usize, nx: usize) -> Tensor {
    let plane = boundary_mask(&GridSpec {
        ny,
        nx,
        dx: 1.0,
        bc: Boundary::Closed,
    })
    .into_vec();
    Tensor::new(vec![batch, 1, ny, nx], plane.repeat(batch)).expect("consistent shape")
}
