//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every forward op evaluates eagerly and records its parents. Constants never
//! receive gradients; parameters are identified by their index in a
//! [`ParamStore`] so that `backward` can return one gradient per parameter,
//! zero-filled for those the loss does not reach.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, PaddingSpec, Tensor};

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// `out[i] = coeff[i] * x[src[i]]`; entries with a zero coefficient read nothing.
#[derive(Clone, Debug)]
pub struct GatherMap {
    pub shape: Vec<usize>,
    pub src: Vec<usize>,
    pub coeff: Vec<f64>,
}

impl GatherMap {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let xd = x.data();
        let data = self
            .src
            .iter()
            .zip(&self.coeff)
            .map(|(&s, &c)| if c == 0.0 { 0.0 } else { c * xd[s] })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(usize),
    Conv2d(Var, Var, PaddingSpec),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Gather(Var, Rc<GatherMap>),
    SubMeanSpatial(Var),
    Sse(Var, Var),
    Sum(Var),
    Reshape(Var),
    Concat(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let tracked = matches!(op, Op::Param(_)) || parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, pad: PaddingSpec) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), &pad)?;
        Ok(self.push(y, Op::Conv2d(x, w, pad), &[x, w]))
    }

    /// Adds `b[c]` to every element of channel `c` of a 3-d or 4-d input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let [_, c, h, w] = xv.dims4("add_bias")?;
        let bv = self.value(b);
        if bv.len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("channel axis: input has {c}, bias has {}", bv.len()),
            ));
        }
        let plane = h * w;
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[(i / plane) % c];
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|p| s * p);
        self.push(y, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = gelu(self.value(a));
        self.push(y, Op::Gelu(a), &[a])
    }

    pub fn gather(&mut self, x: Var, map: Rc<GatherMap>) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(bad) = map.src.iter().find(|&&s| s >= n) {
            return Err(Error::shape(
                "gather",
                format!("source index {bad} out of range for {n} values"),
            ));
        }
        let y = map.apply(self.value(x))?;
        Ok(self.push(y, Op::Gather(x, map), &[x]))
    }

    /// Subtracts the spatial mean of every `(batch, channel)` plane.
    pub fn sub_mean_spatial(&mut self, a: Var) -> Result<Var> {
        let y = sub_mean_planes(self.value(a))?;
        Ok(self.push(y, Op::SubMeanSpatial(a), &[a]))
    }

    /// Sum of squared differences.
    pub fn sse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let s = d.data().iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sse(a, b), &[a, b]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mse_loss", "empty tensors"));
        }
        let s = self.sse(a, b)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    /// Stacks two `[B, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!(
                    "{:?} and {:?} differ outside the channel axis",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut y = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            y.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            y.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let y = Tensor::new(vec![n, ca + cb, h, w], y)?;
        Ok(self.push(y, Op::Concat(a, b), &[a, b]))
    }

    /// Gradients of the scalar `loss` for every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut out: Vec<Tensor> = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let mut send = |v: Var, t: Tensor| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if *id >= out.len() {
                        return Err(Error::shape("backward", format!("parameter {id} is not in the store")));
                    }
                    out[*id].add_assign(&g);
                }
                Op::Conv2d(x, w, pad) => {
                    let need_dx = self.nodes[x.0].tracked;
                    let need_dw = self.nodes[w.0].tracked;
                    let (dx, dw) = conv2d_backward(self.value(*x), self.value(*w), pad, &g, need_dx, need_dw)?;
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = dw {
                        send(*w, dw);
                    }
                }
                Op::AddBias(x, b) => {
                    let c = self.value(*b).len();
                    let plane = g.len() / (c * self.value(*x).dims4("add_bias")?[0]);
                    let mut db = vec![0.0; c];
                    for (k, v) in g.data().iter().enumerate() {
                        db[(k / plane) % c] += v;
                    }
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.map(|v| s * v)),
                Op::Gelu(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gy| gy * gelu_grad(x))?;
                    send(*a, d);
                }
                Op::Gather(x, map) => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for ((&s, &c), gy) in map.src.iter().zip(&map.coeff).zip(g.data()) {
                        if c != 0.0 {
                            dx[s] += c * gy;
                        }
                    }
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                Op::SubMeanSpatial(a) => send(*a, sub_mean_planes(&g)?),
                Op::Sse(a, b) => {
                    let gs = g.data()[0];
                    let d = self.value(*a).zip_map(self.value(*b), |p, q| 2.0 * gs * (p - q))?;
                    send(*b, d.map(|v| -v));
                    send(*a, d);
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), gs));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    send(*a, g.reshape(&shape)?);
                }
                Op::Concat(a, b) => {
                    let sa = self.value(*a).len() / g.shape()[0];
                    let sb = self.value(*b).len() / g.shape()[0];
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for chunk in g.data().chunks(sa + sb) {
                        da.extend_from_slice(&chunk[..sa]);
                        db.extend_from_slice(&chunk[sa..]);
                    }
                    send(*a, Tensor::new(self.value(*a).shape().to_vec(), da)?);
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), db)?);
                }
            }
        }
        Ok(out)
    }
}

fn sub_mean_planes(x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4("sub_mean_spatial")?;
    let plane = h * w;
    let mut out = x.clone();
    if plane == 0 {
        return Ok(out);
    }
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        chunk.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// Exact Gaussian error linear unit, `x Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::shape("mse_loss", "empty tensors"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}
