//! Normalisation statistics fitted on the training split.
//!
//! Scalars use their own mean and standard deviation. The two components of
//! a vector field share one scale and keep a zero offset, so a rotation or
//! reflection of the physical field is the same map on the normalised one.
//! Increments are likewise scaled without an offset.

use serde::{Deserialize, Serialize};

use crate::dataset::{states, State, Task};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::io::FieldStack;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: f64,
    pub std: f64,
}

impl Affine {
    pub fn apply(&self, f: &Field) -> Field {
        let (m, inv) = (self.mean, 1.0 / self.std);
        f.map(|x| (x - m) * inv)
    }

    pub fn invert(&self, f: &Field) -> Field {
        let (m, s) = (self.mean, self.std);
        f.map(|x| x * s + m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub task: Task,
    /// One entry per state field in stack order.
    pub state: Vec<Affine>,
    /// One entry per predicted field (`zeta`, or `u, v`).
    pub increment: Vec<Affine>,
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn add(&mut self, f: &Field) {
        self.n += f.len() as f64;
        self.sum += f.sum();
        self.sum_sq += f.sum_sq();
    }

    fn mean_std(&self) -> (f64, f64) {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        (mean, var.sqrt())
    }

    fn rms(&self) -> f64 {
        (self.sum_sq / self.n).sqrt()
    }
}

fn positive(std: f64, what: &str) -> Result<f64> {
    if std > 0.0 && std.is_finite() {
        Ok(std)
    } else {
        Err(Error::Data(format!("{what} has zero variance in the training split")))
    }
}

impl NormStats {
    pub fn fit(train: &[FieldStack], task: Task, grid: &GridSpec) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(
                "cannot fit normalisation on an empty training split".into(),
            ));
        }
        let mut zeta = Moments::default();
        let mut vel = Moments::default();
        let mut dzeta = Moments::default();
        let mut dvel = Moments::default();
        for stack in train {
            let traj = states(stack, task, grid)?;
            for (i, s) in traj.iter().enumerate() {
                let f = s.fields();
                let vf = match task {
                    Task::Swe => {
                        zeta.add(f[0]);
                        &f[1..]
                    }
                    Task::Ins => &f[..],
                };
                for x in vf {
                    vel.add(x);
                }
                if let Some(next) = traj.get(i + 1) {
                    let nf = next.fields();
                    if task == Task::Swe {
                        dzeta.add(&nf[0].sub(f[0])?);
                    } else {
                        for k in 0..2 {
                            dvel.add(&nf[k].sub(f[k])?);
                        }
                    }
                }
            }
        }
        let v = Affine {
            mean: 0.0,
            std: positive(vel.rms(), "velocity")?,
        };
        Ok(match task {
            Task::Swe => {
                let (m, s) = zeta.mean_std();
                NormStats {
                    task,
                    state: vec![
                        Affine {
                            mean: m,
                            std: positive(s, "surface elevation")?,
                        },
                        v,
                        v,
                    ],
                    increment: vec![Affine {
                        mean: 0.0,
                        std: positive(dzeta.rms(), "elevation increment")?,
                    }],
                }
            }
            Task::Ins => {
                let d = Affine {
                    mean: 0.0,
                    std: positive(dvel.rms(), "velocity increment")?,
                };
                NormStats {
                    task,
                    state: vec![v, v],
                    increment: vec![d, d],
                }
            }
        })
    }

    pub fn normalize_state(&self, s: &State) -> Vec<Field> {
        s.fields().iter().zip(&self.state).map(|(f, a)| a.apply(f)).collect()
    }

    pub fn denormalize_state(&self, fields: &[Field]) -> Vec<Field> {
        fields.iter().zip(&self.state).map(|(f, a)| a.invert(f)).collect()
    }

    pub fn normalize_increment(&self, fields: &[Field]) -> Vec<Field> {
        fields.iter().zip(&self.increment).map(|(f, a)| a.apply(f)).collect()
    }

    pub fn denormalize_increment(&self, fields: &[Field]) -> Vec<Field> {
        fields.iter().zip(&self.increment).map(|(f, a)| a.invert(f)).collect()
    }
}

/// Predicted fields of a state (`zeta`, or `u, v`).
pub fn target_fields(s: &State) -> Vec<&Field> {
    match s {
        State::Swe(x) => vec![&x.zeta],
        State::Ins(x) => vec![&x.u, &x.v],
    }
}

/// `next − current` over the predicted fields.
pub fn increment(current: &State, next: &State) -> Result<Vec<Field>> {
    target_fields(next)
        .into_iter()
        .zip(target_fields(current))
        .map(|(a, b)| a.sub(b))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ins_stack;
    use crate::grid::{Boundary, InsState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_stack(n: usize, frames: usize, seed: u64) -> (FieldStack, GridSpec) {
        let g = GridSpec::square(n, 1.0, Boundary::Periodic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |off: f64, amp: f64| {
            let d = (0..n * n).map(|_| off + amp * rng.random_range(-1.0..1.0)).collect();
            Field::from_vec(n, n, d).unwrap()
        };
        let states: Vec<InsState> = (0..frames)
            .map(|_| InsState {
                u: f(3.0, 1.0),
                v: f(-1.0, 2.0),
            })
            .collect();
        (ins_stack(&states, &g).unwrap(), g)
    }

    #[test]
    fn velocity_components_share_one_scale() {
        let (stack, g) = noisy_stack(8, 4, 1);
        let st = NormStats::fit(std::slice::from_ref(&stack), Task::Ins, &g).unwrap();
        assert_eq!(st.state[0], st.state[1]);
        assert_eq!(st.increment[0], st.increment[1]);
        assert_eq!(st.state[0].mean, 0.0);
        // shared RMS over both components: a loop oracle
        let mut acc = 0.0;
        let mut n = 0.0;
        for fr in &stack.frames {
            for f in fr {
                for x in f.data() {
                    acc += x * x;
                    n += 1.0;
                }
            }
        }
        assert!((st.state[0].std - (acc / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Field::from_vec(
            50,
            50,
            (0..2500).map(|_| 7.0 + 0.5 * rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut m = Moments::default();
        m.add(&f);
        let (mean, std) = m.mean_std();
        let a = Affine { mean, std };
        let z = a.apply(&f);
        assert!(z.mean().abs() < 1e-12);
        assert!((z.sum_sq() / 2500.0 - 1.0).abs() < 1e-10);
        assert!(a.invert(&z).max_abs_diff(&f) <= 1e-14 * 8.0);
    }

    #[test]
    fn zero_variance_is_an_error() {
        let g = GridSpec::square(4, 1.0, Boundary::Periodic).unwrap();
        let s = InsState::zeros(&g).unwrap();
        let stack = ins_stack(&[s.clone(), s], &g).unwrap();
        assert!(matches!(NormStats::fit(&[stack], Task::Ins, &g), Err(Error::Data(_))));
        assert!(NormStats::fit(&[], Task::Ins, &g).is_err());
    }
}
