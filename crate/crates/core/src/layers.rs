//! Group-equivariant layers on staggered grids.
//!
//! Learned weights live in a [`ParamStore`]; each forward pass expands them
//! into ordinary convolution filters with a [`GatherMap`], so every layer is a
//! plain `conv2d` on the tape and gradients flow back through the expansion.
//!
//! Regular-representation tensors are `[B, C·|G|, H, W]` with the group index
//! fastest, in the order of [`Group::elements`].

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{GatherMap, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Boundary;
use crate::symmetry::{scalar_index_map, vector_index_maps, Group, GroupElement, IndexMap, Lattice};
use crate::tensor::{PadMode, PaddingSpec, Tensor};

pub fn pad_mode(bc: Boundary) -> PadMode {
    match bc {
        Boundary::Closed => PadMode::Zero,
        Boundary::Periodic => PadMode::Circular,
    }
}

fn init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

/// `[Co·|G|]` bias from a `[Co]` parameter.
fn bias_map(group: Group, cout: usize) -> Rc<GatherMap> {
    let n = group.order();
    Rc::new(GatherMap {
        shape: vec![cout * n],
        src: (0..cout * n).map(|i| i / n).collect(),
        coeff: vec![1.0; cout * n],
    })
}

fn check_input(tape: &Tape, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::shape(
            "layer",
            format!("{what} must be [B, {channels}, H, W], got {s:?}"),
        ));
    }
    Ok(())
}

/// Lifting layer from cell-centred scalars and one or more staggered vector
/// fields to a regular representation.
///
/// The vector filters are `W_u` (`k × 2m`, even across the x-faces) and
/// `W_v` (`2m × k`). Output channel `(c, g)` applies the transformed filter
/// bank `T_g W` jointly to all inputs.
#[derive(Clone, Debug)]
pub struct StaggeredLifting {
    pub group: Group,
    pub bc: Boundary,
    pub cell_in: usize,
    pub vec_in: usize,
    pub out: usize,
    pub k: usize,
    pub m: usize,
    wc: Option<usize>,
    wu: usize,
    wv: usize,
    b: usize,
    cell_map: Option<Rc<GatherMap>>,
    /// (from `W_u`, from `W_v`) for the expanded u filter, then the v filter.
    vec_maps: [(Rc<GatherMap>, Rc<GatherMap>); 2],
    bias: Rc<GatherMap>,
}

impl StaggeredLifting {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        bc: Boundary,
        cell_in: usize,
        vec_in: usize,
        out: usize,
        k: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("lifting kernel size must be odd, got {k}")));
        }
        if vec_in == 0 {
            return Err(Error::Config("lifting layer needs a vector input".into()));
        }
        let m = 1;
        let fan = cell_in * k * k + 2 * vec_in * k * 2 * m;
        let wc = (cell_in > 0).then(|| store.push(format!("{name}.w_cell"), init(&[out, cell_in, k, k], fan, rng)));
        let wu = store.push(format!("{name}.w_u"), init(&[out, vec_in, k, 2 * m], fan, rng));
        let wv = store.push(format!("{name}.w_v"), init(&[out, vec_in, 2 * m, k], fan, rng));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[out]));

        let cell_map = (cell_in > 0)
            .then(|| scalar_expansion(group, out, cell_in, None, &Lattice::centered(k, k)))
            .transpose()?
            .map(Rc::new);
        let vec_maps = vector_expansion(group, out, vec_in, k, 2 * m)?;
        Ok(StaggeredLifting {
            group,
            bc,
            cell_in,
            vec_in,
            out,
            k,
            m,
            wc,
            wu,
            wv,
            b,
            cell_map,
            vec_maps,
            bias: bias_map(group, out),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out * self.group.order()
    }

    fn paddings(&self) -> (PaddingSpec, PaddingSpec, PaddingSpec) {
        let mode = pad_mode(self.bc);
        let h = (self.k - 1) / 2;
        let m = self.m;
        let center = PaddingSpec::new(mode, h, h, h, h);
        let (lead, trail) = match self.bc {
            Boundary::Closed => (m, m),
            Boundary::Periodic => (m, m - 1),
        };
        let u = PaddingSpec::new(mode, h, h, lead, trail);
        let v = PaddingSpec::new(mode, lead, trail, h, h);
        (center, u, v)
    }

    /// `cells`: `[B, cell_in, ny, nx]`; `u`, `v`: `[B, vec_in, .., ..]` in the
    /// grid's face shapes.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cells: Option<Var>, u: Var, v: Var) -> Result<Var> {
        check_input(tape, u, self.vec_in, "u input")?;
        check_input(tape, v, self.vec_in, "v input")?;
        let (pc, pu, pv) = self.paddings();
        let wu = tape.param(store, self.wu);
        let wv = tape.param(store, self.wv);
        let eu = {
            let a = tape.gather(wu, self.vec_maps[0].0.clone())?;
            let b = tape.gather(wv, self.vec_maps[0].1.clone())?;
            tape.add(a, b)?
        };
        let ev = {
            let a = tape.gather(wu, self.vec_maps[1].0.clone())?;
            let b = tape.gather(wv, self.vec_maps[1].1.clone())?;
            tape.add(a, b)?
        };
        let yu = tape.conv2d(u, eu, pu)?;
        let yv = tape.conv2d(v, ev, pv)?;
        let mut y = tape.add(yu, yv)?;
        match (cells, self.wc, &self.cell_map) {
            (Some(c), Some(wc), Some(map)) => {
                check_input(tape, c, self.cell_in, "cell input")?;
                let w = tape.param(store, wc);
                let e = tape.gather(w, map.clone())?;
                let yc = tape.conv2d(c, e, pc)?;
                y = tape.add(y, yc)?;
            }
            (None, None, _) => {}
            _ => {
                return Err(Error::shape(
                    "lifting",
                    format!("layer expects {} cell-centred channels", self.cell_in),
                ))
            }
        }
        let b = tape.param(store, self.b);
        let b = tape.gather(b, self.bias.clone())?;
        tape.add_bias(y, b)
    }
}

/// Expanded scalar filters `[Co·|G|, Ci·|G|ᵢ, kh, kw]` where `|G|ᵢ` is the
/// group order for regular inputs (`Some(group)`) or 1 for plain inputs.
///
/// For regular inputs the source weight is `[Co, Ci, |G|, kh, kw]` and
/// `E[(o,g),(i,h)] = T_g W[o, i, g⁻¹h]`; for plain inputs it is
/// `[Co, Ci, kh, kw]` and `E[(o,g), i] = T_g W[o, i]`.
fn scalar_expansion(
    group: Group,
    cout: usize,
    cin: usize,
    regular_in: Option<Group>,
    lat: &Lattice,
) -> Result<GatherMap> {
    let els = group.elements();
    let n = els.len();
    let gi = regular_in.map_or(1, |g| g.order());
    let (kh, kw) = lat.shape();
    let taps = kh * kw;
    let maps: Vec<IndexMap> = els
        .iter()
        .map(|&g| scalar_index_map(g, lat, false))
        .collect::<Result<_>>()?;
    let total = cout * n * cin * gi * taps;
    let mut src = Vec::with_capacity(total);
    for o in 0..cout {
        for (gidx, &g) in els.iter().enumerate() {
            for i in 0..cin {
                for h in 0..gi {
                    let slice = if regular_in.is_some() {
                        let rel = g.inverse().compose(els[h]);
                        let r = group.index_of(rel).expect("closed");
                        ((o * cin + i) * gi + r) * taps
                    } else {
                        (o * cin + i) * taps
                    };
                    for &(_, s, _) in &maps[gidx].entries {
                        src.push(slice + s);
                    }
                }
            }
        }
    }
    Ok(GatherMap {
        shape: vec![cout * n, cin * gi, kh, kw],
        src,
        coeff: vec![1.0; total],
    })
}

/// Expanded `(u, v)` filter pairs: for each output component, one map reading
/// `W_u` and one reading `W_v` (zero coefficients where the other is used).
fn vector_expansion(
    group: Group,
    cout: usize,
    cin: usize,
    k: usize,
    even: usize,
) -> Result<[(Rc<GatherMap>, Rc<GatherMap>); 2]> {
    let lu = Lattice::centered(k, even);
    let lv = Lattice::centered(even, k);
    let els = group.elements();
    let n = els.len();
    let maps: Vec<[IndexMap; 2]> = els
        .iter()
        .map(|&g| vector_index_maps(g, &lu, &lv))
        .collect::<Result<_>>()?;
    let taps = k * even;
    let build = |comp: usize| {
        let shape = if comp == 0 {
            vec![cout * n, cin, k, even]
        } else {
            vec![cout * n, cin, even, k]
        };
        let total = cout * n * cin * taps;
        let mut from = [
            (Vec::with_capacity(total), Vec::with_capacity(total)),
            (Vec::with_capacity(total), Vec::with_capacity(total)),
        ];
        for o in 0..cout {
            for gm in &maps {
                for i in 0..cin {
                    for &(sc, s, sign) in &gm[comp].entries {
                        let idx = (o * cin + i) * taps + s;
                        for (which, (src, coeff)) in from.iter_mut().enumerate() {
                            src.push(if which == sc { idx } else { 0 });
                            coeff.push(if which == sc { sign } else { 0.0 });
                        }
                    }
                }
            }
        }
        let [(su, cu), (sv, cv)] = from;
        (
            Rc::new(GatherMap {
                shape: shape.clone(),
                src: su,
                coeff: cu,
            }),
            Rc::new(GatherMap {
                shape,
                src: sv,
                coeff: cv,
            }),
        )
    };
    Ok([build(0), build(1)])
}

/// Regular-to-regular group convolution with odd square kernels, or the
/// even 2×2 cell-to-vertex kernel.
#[derive(Clone, Debug)]
pub struct GroupConv {
    pub group: Group,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: PaddingSpec,
    w: usize,
    b: Option<usize>,
    map: Rc<GatherMap>,
    bias: Rc<GatherMap>,
}

impl GroupConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
        mode: PadMode,
        with_bias: bool,
    ) -> Result<Self> {
        let padding = if k % 2 == 1 {
            PaddingSpec::same(mode, k, k)
        } else if k == 2 {
            // output (r, c) reads cells r..=r+1, c..=c+1: the vertex between them
            PaddingSpec::new(mode, 0, 1, 0, 1)
        } else {
            return Err(Error::Config(format!(
                "group convolutions use odd kernels or the 2×2 vertex kernel, got {k}"
            )));
        };
        let n = group.order();
        let w = store.push(format!("{name}.w"), init(&[cout, cin, n, k, k], cin * n * k * k, rng));
        let b = with_bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        let map = scalar_expansion(group, cout, cin, Some(group), &Lattice::centered(k, k))?;
        Ok(GroupConv {
            group,
            cin,
            cout,
            k,
            padding,
            w,
            b,
            map: Rc::new(map),
            bias: bias_map(group, cout),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.group.order();
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != self.cin * n {
            return Err(Error::Group(format!(
                "{} group conv expects {} channels ({} fibres of {n}), got shape {s:?}",
                self.group,
                self.cin * n,
                self.cin
            )));
        }
        let w = tape.param(store, self.w);
        let e = tape.gather(w, self.map.clone())?;
        let y = tape.conv2d(x, e, self.padding)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                let b = tape.gather(b, self.bias.clone())?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Constant 1×1 reduction over each fibre with per-element weights.
fn fibre_pool(tape: &mut Tape, x: Var, group: Group, weight: impl Fn(GroupElement) -> f64) -> Result<Var> {
    let n = group.order();
    let c = tape.value(x).shape()[1];
    if c != n {
        return Err(Error::Group(format!(
            "pooling expects one fibre of {n}, got {c} channels"
        )));
    }
    let w: Vec<f64> = group.elements().into_iter().map(|g| weight(g) / n as f64).collect();
    let w = tape.constant(Tensor::new(vec![1, n, 1, 1], w)?);
    tape.conv2d(x, w, PaddingSpec::NONE)
}

/// Group conv to a single fibre followed by the mean over the group: an
/// invariant cell-centred scalar.
#[derive(Clone, Debug)]
pub struct ScalarHead {
    pub conv: GroupConv,
}

impl ScalarHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        k: usize,
        mode: PadMode,
    ) -> Result<Self> {
        Ok(ScalarHead {
            conv: GroupConv::new(store, rng, name, group, cin, 1, k, mode, true)?,
        })
    }

    /// `[B, 1, H, W]`
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        fibre_pool(tape, y, self.conv.group, |_| 1.0)
    }
}

/// 2×2 cell-to-vertex group conv and a determinant-weighted mean: the
/// vertex potential changes sign under reflections.
#[derive(Clone, Debug)]
pub struct VertexHead {
    pub conv: GroupConv,
}

impl VertexHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
    ) -> Result<Self> {
        // a constant bias would not be a pseudoscalar under p4m
        let with_bias = group != Group::P4m;
        Ok(VertexHead {
            conv: GroupConv::new(store, rng, name, group, cin, 1, 2, PadMode::Circular, with_bias)?,
        })
    }

    /// `[B, 1, ny, nx]` on the periodic vertex lattice.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        fibre_pool(tape, y, self.conv.group, |g| g.det() as f64)
    }
}

/// Coefficients of the regular-to-staggered-vector output stencil:
/// `u[r][c] = Σ_h c_h p_h[r][c+1] − d_h p_h[r][c]` and
/// `v[r][c] = Σ_h e_h p_h[r+1][c] − f_h p_h[r][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputCoefficients {
    pub group: Group,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
}

impl OutputCoefficients {
    /// The equivariant solution whose `c` at the four pure rotations is `free`.
    pub fn from_free(group: Group, free: [f64; 4]) -> Result<Self> {
        if group == Group::P1 {
            return Err(Error::Group("p1 output layers learn their stencils".into()));
        }
        // base stencil taps (u_left, u_right, v_bottom, v_top) for the identity
        // channel; rotation r^j carries u_right onto c_{r^j}
        let base = [-free[2], free[0], -free[1], free[3]];
        let lu = Lattice::centered(1, 2);
        let lv = Lattice::centered(2, 1);
        let (mut c, mut d, mut e, mut f) = (vec![], vec![], vec![], vec![]);
        let src = [&base[0..2], &base[2..4]];
        for g in group.elements() {
            let [mu, mv] = vector_index_maps(g, &lu, &lv)?;
            let tap = |m: &IndexMap, i: usize| {
                let (comp, s, sign) = m.entries[i];
                sign * src[comp][s]
            };
            d.push(-tap(&mu, 0));
            c.push(tap(&mu, 1));
            f.push(-tap(&mv, 0));
            e.push(tap(&mv, 1));
        }
        Ok(OutputCoefficients { group, c, d, e, f })
    }

    /// Accepts explicit coefficients only if they satisfy the equivariance
    /// constraints.
    pub fn new(group: Group, c: Vec<f64>, d: Vec<f64>, e: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        let n = group.order();
        if [c.len(), d.len(), e.len(), f.len()].iter().any(|&l| l != n) {
            return Err(Error::Constraint(format!("{group} needs {n} coefficients per set")));
        }
        let rot: Vec<usize> = (0..4u8)
            .map(|j| group.index_of(GroupElement::rotation(j)).expect("rotations"))
            .collect();
        let free = [c[rot[0]], c[rot[1]], c[rot[2]], c[rot[3]]];
        let want = Self::from_free(group, free)?;
        let given = OutputCoefficients { group, c, d, e, f };
        if want != given {
            return Err(Error::Constraint(format!(
                "expected c={:?} d={:?} e={:?} f={:?}",
                want.c, want.d, want.e, want.f
            )));
        }
        Ok(given)
    }

    pub fn simple(group: Group) -> Result<Self> {
        Self::from_free(group, [1.0, 0.0, 0.0, 0.0])
    }

    fn filters(&self) -> (Tensor, Tensor) {
        let n = self.group.order();
        let mut wu = vec![0.0; 2 * n];
        let mut wv = vec![0.0; 2 * n];
        for h in 0..n {
            wu[2 * h] = -self.d[h];
            wu[2 * h + 1] = self.c[h];
            wv[2 * h] = -self.f[h];
            wv[2 * h + 1] = self.e[h];
        }
        (
            Tensor::new(vec![1, n, 1, 2], wu).expect("size"),
            Tensor::new(vec![1, n, 2, 1], wv).expect("size"),
        )
    }
}

/// Staggered vector output: equivariant fixed stencil after a group conv, or
/// learned face stencils for p1.
#[derive(Clone, Debug)]
pub enum VectorHead {
    Equivariant {
        conv: GroupConv,
        coeffs: OutputCoefficients,
        bc: Boundary,
    },
    Free {
        cin: usize,
        wu: usize,
        wv: usize,
        bu: usize,
        bv: usize,
        bc: Boundary,
    },
}

impl VectorHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        k: usize,
        bc: Boundary,
        coeffs: Option<OutputCoefficients>,
    ) -> Result<Self> {
        if group == Group::P1 {
            let fan = 2 * cin;
            return Ok(VectorHead::Free {
                cin,
                wu: store.push(format!("{name}.w_u"), init(&[1, cin, 1, 2], fan, rng)),
                wv: store.push(format!("{name}.w_v"), init(&[1, cin, 2, 1], fan, rng)),
                bu: store.push(format!("{name}.bias_u"), Tensor::zeros(&[1])),
                bv: store.push(format!("{name}.bias_v"), Tensor::zeros(&[1])),
                bc,
            });
        }
        let coeffs = match coeffs {
            Some(c) if c.group != group => {
                return Err(Error::Group(format!(
                    "coefficients for {} used with a {group} layer",
                    c.group
                )))
            }
            Some(c) => c,
            None => OutputCoefficients::simple(group)?,
        };
        Ok(VectorHead::Equivariant {
            conv: GroupConv::new(store, rng, name, group, cin, 1, k, pad_mode(bc), false)?,
            coeffs,
            bc,
        })
    }

    fn face_padding(bc: Boundary) -> (PaddingSpec, PaddingSpec) {
        match bc {
            Boundary::Closed => (PaddingSpec::NONE, PaddingSpec::NONE),
            Boundary::Periodic => (
                PaddingSpec::new(PadMode::Circular, 0, 0, 0, 1),
                PaddingSpec::new(PadMode::Circular, 0, 1, 0, 0),
            ),
        }
    }

    /// `([B,1,..], [B,1,..])` in the grid's face shapes.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        match self {
            VectorHead::Equivariant { conv, coeffs, bc } => {
                let p = conv.forward(tape, store, x)?;
                let (wu, wv) = coeffs.filters();
                let (pu, pv) = Self::face_padding(*bc);
                let wu = tape.constant(wu);
                let wv = tape.constant(wv);
                Ok((tape.conv2d(p, wu, pu)?, tape.conv2d(p, wv, pv)?))
            }
            VectorHead::Free {
                cin,
                wu,
                wv,
                bu,
                bv,
                bc,
            } => {
                check_input(tape, x, *cin, "vector head input")?;
                let (pu, pv) = Self::face_padding(*bc);
                let w = tape.param(store, *wu);
                let u = tape.conv2d(x, w, pu)?;
                let b = tape.param(store, *bu);
                let u = tape.add_bias(u, b)?;
                let w = tape.param(store, *wv);
                let v = tape.conv2d(x, w, pv)?;
                let b = tape.param(store, *bv);
                let v = tape.add_bias(v, b)?;
                Ok((u, v))
            }
        }
    }
}

/// A deliberately wrong lifting that treats periodic `u`, `v` as if both
/// were sampled at cell centres. It rotates the filters as a vector field on
/// the cell lattice, ignoring the half-cell staggering.
#[derive(Clone, Debug)]
pub struct CollocatedLifting {
    pub group: Group,
    pub vec_in: usize,
    pub out: usize,
    pub k: usize,
    wu: usize,
    wv: usize,
    b: usize,
    vec_maps: [(Rc<GatherMap>, Rc<GatherMap>); 2],
    bias: Rc<GatherMap>,
}

impl CollocatedLifting {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: Group,
        vec_in: usize,
        out: usize,
        k: usize,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        let fan = 2 * vec_in * k * k;
        let wu = store.push(format!("{name}.w_u"), init(&[out, vec_in, k, k], fan, rng));
        let wv = store.push(format!("{name}.w_v"), init(&[out, vec_in, k, k], fan, rng));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[out]));
        Ok(CollocatedLifting {
            group,
            vec_in,
            out,
            k,
            wu,
            wv,
            b,
            vec_maps: vector_expansion(group, out, vec_in, k, k)?,
            bias: bias_map(group, out),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, v: Var) -> Result<Var> {
        check_input(tape, u, self.vec_in, "u input")?;
        check_input(tape, v, self.vec_in, "v input")?;
        let pad = PaddingSpec::same(PadMode::Circular, self.k, self.k);
        let wu = tape.param(store, self.wu);
        let wv = tape.param(store, self.wv);
        let mut parts = vec![];
        for (comp, x) in [(0, u), (1, v)] {
            let a = tape.gather(wu, self.vec_maps[comp].0.clone())?;
            let b = tape.gather(wv, self.vec_maps[comp].1.clone())?;
            let e = tape.add(a, b)?;
            parts.push(tape.conv2d(x, e, pad)?);
        }
        let y = tape.add(parts[0], parts[1])?;
        let b = tape.param(store, self.b);
        let b = tape.gather(b, self.bias.clone())?;
        tape.add_bias(y, b)
    }
}
