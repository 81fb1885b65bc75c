//! The wallpaper groups p1, p4 and p4m acting on staggered fields.
//!
//! Every sample location is written in doubled integer coordinates relative
//! to the centre of its domain, so that cells, faces, vertices and filter taps
//! all share one exact action `p ↦ M_g p` with `M_g` a signed permutation
//! matrix. A scalar field transforms as `f'(p) = f(g⁻¹p)`, a vector field as
//! `w'(p) = M_g w(g⁻¹p)`, and a pseudoscalar (the stream-function-like vertex
//! potential) picks up an extra `det M_g`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, GridSpec, InsState, Location, SweState};
use crate::tensor::Tensor;

/// `R^rot ∘ F^flip`: mirror `x ↦ −x` first (if `flip`), then rotate
/// counter-clockwise by `rot · 90°`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupElement {
    pub rot: u8,
    pub flip: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { rot: 0, flip: false };

    pub fn new(rot: u8, flip: bool) -> Self {
        GroupElement { rot: rot % 4, flip }
    }

    pub fn rotation(quarter_turns: u8) -> Self {
        Self::new(quarter_turns, false)
    }

    pub fn mirror() -> Self {
        Self::new(0, true)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(self, other: GroupElement) -> GroupElement {
        let turn = if self.flip { 4 - other.rot % 4 } else { other.rot };
        GroupElement::new(self.rot + turn, self.flip ^ other.flip)
    }

    pub fn inverse(self) -> GroupElement {
        if self.flip {
            self
        } else {
            GroupElement::new(4 - self.rot, false)
        }
    }

    /// Signed permutation matrix acting on `(x, y)`.
    pub fn matrix(self) -> [[i64; 2]; 2] {
        let f = if self.flip { -1 } else { 1 };
        // R^k applied to the columns of F = diag(f, 1)
        match self.rot % 4 {
            0 => [[f, 0], [0, 1]],
            1 => [[0, -1], [f, 0]],
            2 => [[-f, 0], [0, -1]],
            _ => [[0, 1], [-f, 0]],
        }
    }

    pub fn det(self) -> i64 {
        if self.flip {
            -1
        } else {
            1
        }
    }

    pub fn apply(self, (x, y): (i64, i64)) -> (i64, i64) {
        let m = self.matrix();
        (m[0][0] * x + m[0][1] * y, m[1][0] * x + m[1][1] * y)
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.rot, self.flip) {
            (0, false) => write!(f, "e"),
            (r, false) => write!(f, "r{}", 90 * r as u32),
            (0, true) => write!(f, "m"),
            (r, true) => write!(f, "r{}m", 90 * r as u32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    P1,
    P4,
    P4m,
}

impl Group {
    pub fn order(self) -> usize {
        match self {
            Group::P1 => 1,
            Group::P4 => 4,
            Group::P4m => 8,
        }
    }

    /// Elements in regular-representation channel order: `r^j` for p4 and
    /// `m^b r^j` at index `2j + b` for p4m.
    pub fn elements(self) -> Vec<GroupElement> {
        match self {
            Group::P1 => vec![GroupElement::IDENTITY],
            Group::P4 => (0..4).map(GroupElement::rotation).collect(),
            Group::P4m => (0..8)
                .map(|i| {
                    let r = GroupElement::rotation(i / 2);
                    if i % 2 == 1 {
                        GroupElement::mirror().compose(r)
                    } else {
                        r
                    }
                })
                .collect(),
        }
    }

    pub fn index_of(self, g: GroupElement) -> Option<usize> {
        self.elements().iter().position(|&h| h == g)
    }

    pub fn contains(self, g: GroupElement) -> bool {
        self.index_of(g).is_some()
    }

    /// `table[a][b]` is the index of `elements[a] ∘ elements[b]`.
    pub fn cayley(self) -> Vec<Vec<usize>> {
        let els = self.elements();
        els.iter()
            .map(|&a| {
                els.iter()
                    .map(|&b| self.index_of(a.compose(b)).expect("group is closed"))
                    .collect()
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::P1 => "p1",
            Group::P4 => "p4",
            Group::P4m => "p4m",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One axis of sample positions `2 i + offset`, optionally periodic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axis {
    pub len: usize,
    pub offset: i64,
    pub period: Option<i64>,
}

impl Axis {
    pub fn centered(len: usize) -> Self {
        Axis {
            len,
            offset: 1 - len as i64,
            period: None,
        }
    }

    fn coord(&self, i: usize) -> i64 {
        2 * i as i64 + self.offset
    }

    fn index(&self, x: i64) -> Option<usize> {
        let mut d = x - self.offset;
        if let Some(p) = self.period {
            d = d.rem_euclid(p);
        }
        if d < 0 || d % 2 != 0 {
            return None;
        }
        let i = (d / 2) as usize;
        (i < self.len).then_some(i)
    }
}

/// Sample positions of a 2-d array: `rows` carries `y`, `cols` carries `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub rows: Axis,
    pub cols: Axis,
}

impl Lattice {
    /// Symmetric about the array centre (cells, closed-grid faces, filters).
    pub fn centered(rows: usize, cols: usize) -> Self {
        Lattice {
            rows: Axis::centered(rows),
            cols: Axis::centered(cols),
        }
    }

    pub fn for_grid(grid: &GridSpec, loc: Location) -> Self {
        let (rows, cols) = grid.shape(loc);
        match grid.bc {
            Boundary::Closed => Lattice::centered(rows, cols),
            Boundary::Periodic => {
                let axis = |len: usize, staggered: bool| Axis {
                    len,
                    offset: if staggered { 2 - len as i64 } else { 1 - len as i64 },
                    period: Some(2 * len as i64),
                };
                let (sy, sx) = match loc {
                    Location::Cell => (false, false),
                    Location::FaceX => (false, true),
                    Location::FaceY => (true, false),
                    Location::Vertex => (true, true),
                };
                Lattice {
                    rows: axis(rows, sy),
                    cols: axis(cols, sx),
                }
            }
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len, self.cols.len)
    }

    pub fn len(&self) -> usize {
        self.rows.len * self.cols.len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The lattice occupied after transforming by `g`.
    pub fn transformed(&self, g: GroupElement) -> Lattice {
        if g.rot % 2 == 1 {
            Lattice {
                rows: self.cols,
                cols: self.rows,
            }
        } else {
            *self
        }
    }

    fn position(&self, k: usize) -> (i64, i64) {
        let (r, c) = (k / self.cols.len, k % self.cols.len);
        (self.cols.coord(c), self.rows.coord(r))
    }

    fn locate(&self, (x, y): (i64, i64)) -> Option<usize> {
        Some(self.rows.index(y)? * self.cols.len + self.cols.index(x)?)
    }
}

/// For every output sample, where it reads from and with which sign.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMap {
    pub lattice: Lattice,
    pub entries: Vec<(usize, usize, f64)>,
}

/// Source of each sample of `T_g f` for a scalar on `lat` (pseudoscalars
/// carry `det g` as the sign).
pub fn scalar_index_map(g: GroupElement, lat: &Lattice, pseudo: bool) -> Result<IndexMap> {
    let out = lat.transformed(g);
    let inv = g.inverse();
    let sign = if pseudo { g.det() as f64 } else { 1.0 };
    let entries = (0..out.len())
        .map(|k| {
            let q = inv.apply(out.position(k));
            lat.locate(q)
                .map(|s| (0, s, sign))
                .ok_or_else(|| Error::Unsupported(format!("lattice is not closed under {g}")))
        })
        .collect::<Result<_>>()?;
    Ok(IndexMap { lattice: out, entries })
}

/// Source component (0 = x, 1 = y), index and sign of each sample of the
/// transformed x- and y-components.
pub fn vector_index_maps(g: GroupElement, lu: &Lattice, lv: &Lattice) -> Result<[IndexMap; 2]> {
    let m = g.matrix();
    let inv = g.inverse();
    let lats = [lu, lv];
    let build = |comp: usize| -> Result<IndexMap> {
        let out = if g.rot % 2 == 1 {
            lats[1 - comp].transformed(g)
        } else {
            lats[comp].transformed(g)
        };
        let (src, sign) = if m[comp][0] != 0 {
            (0, m[comp][0] as f64)
        } else {
            (1, m[comp][1] as f64)
        };
        let entries = (0..out.len())
            .map(|k| {
                let q = inv.apply(out.position(k));
                lats[src]
                    .locate(q)
                    .map(|s| (src, s, sign))
                    .ok_or_else(|| Error::Unsupported(format!("staggered lattices are not closed under {g}")))
            })
            .collect::<Result<_>>()?;
        Ok(IndexMap { lattice: out, entries })
    };
    Ok([build(0)?, build(1)?])
}

fn apply_map(map: &IndexMap, sources: &[&[f64]]) -> Field {
    let (rows, cols) = map.lattice.shape();
    let data = map.entries.iter().map(|&(comp, k, s)| s * sources[comp][k]).collect();
    Field::from_vec(rows, cols, data).expect("index map covers the lattice")
}

fn require_square(g: GroupElement, grid: &GridSpec) -> Result<()> {
    if !g.rot.is_multiple_of(4) && !grid.is_square() {
        return Err(Error::Unsupported(format!(
            "rotation {g} needs a square grid, got {}×{}",
            grid.ny, grid.nx
        )));
    }
    Ok(())
}

fn act_located(g: GroupElement, f: &Field, grid: &GridSpec, loc: Location, pseudo: bool) -> Result<Field> {
    require_square(g, grid)?;
    grid.check(f, loc, "field")?;
    let map = scalar_index_map(g, &Lattice::for_grid(grid, loc), pseudo)?;
    Ok(apply_map(&map, &[f.data()]))
}

/// `f'(x) = f(g⁻¹x)` by exact index permutation.
pub fn act_on_cell_field(g: GroupElement, f: &Field, grid: &GridSpec) -> Result<Field> {
    act_located(g, f, grid, Location::Cell, false)
}

/// Vertex potentials are pseudoscalars: reflections flip their sign.
pub fn act_on_vertex_potential(g: GroupElement, a: &Field, grid: &GridSpec) -> Result<Field> {
    act_located(g, a, grid, Location::Vertex, true)
}

pub fn act_on_staggered_vector(g: GroupElement, u: &Field, v: &Field, grid: &GridSpec) -> Result<(Field, Field)> {
    require_square(g, grid)?;
    grid.check(u, Location::FaceX, "u")?;
    grid.check(v, Location::FaceY, "v")?;
    let [mu, mv] = vector_index_maps(
        g,
        &Lattice::for_grid(grid, Location::FaceX),
        &Lattice::for_grid(grid, Location::FaceY),
    )?;
    let src = [u.data(), v.data()];
    Ok((apply_map(&mu, &src), apply_map(&mv, &src)))
}

pub fn act_on_swe_state(g: GroupElement, s: &SweState, grid: &GridSpec) -> Result<SweState> {
    let (u, v) = act_on_staggered_vector(g, &s.u, &s.v, grid)?;
    Ok(SweState {
        zeta: act_on_cell_field(g, &s.zeta, grid)?,
        u,
        v,
        mask: act_on_cell_field(g, &s.mask, grid)?,
    })
}

pub fn act_on_ins_state(g: GroupElement, s: &InsState, grid: &GridSpec) -> Result<InsState> {
    let (u, v) = act_on_staggered_vector(g, &s.u, &s.v, grid)?;
    Ok(InsState { u, v })
}

/// Channels of a `[.., C·|G|, H, W]` tensor, grouped as `(c, h)` with `h`
/// fastest, transformed spatially and permuted `h ↦ g∘h`.
pub fn act_on_regular_tensor(g: GroupElement, group: Group, x: &Tensor) -> Result<Tensor> {
    let Some(_) = group.index_of(g) else {
        return Err(Error::Group(format!("{g} is not an element of {group}")));
    };
    let [b, ch, h, w] = x.dims4("act_on_regular")?;
    let order = group.order();
    if ch % order != 0 {
        return Err(Error::Group(format!(
            "{ch} channels do not split into {group} fibres of size {order}"
        )));
    }
    if g.rot % 2 == 1 && h != w {
        return Err(Error::Unsupported(format!(
            "rotation {g} needs square planes, got {h}×{w}"
        )));
    }
    let map = scalar_index_map(g, &Lattice::centered(h, w), false)?;
    let els = group.elements();
    let perm: Vec<usize> = els
        .iter()
        .map(|&e| group.index_of(g.compose(e)).expect("closed"))
        .collect();
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for c in 0..ch / order {
            for (hi, &to) in perm.iter().enumerate() {
                let src = ((bi * ch) + c * order + hi) * plane;
                let dst = ((bi * ch) + c * order + to) * plane;
                let sp = &x.data()[src..src + plane];
                for (k, &(_, s, _)) in map.entries.iter().enumerate() {
                    out[dst + k] = sp[s];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A stack of `C` cell-centred fibres over a group.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularField {
    pub group: Group,
    /// `[C, |G|, H, W]`
    pub data: Tensor,
}

impl RegularField {
    pub fn new(group: Group, data: Tensor) -> Result<Self> {
        match *data.shape() {
            [_, gs, _, _] if gs == group.order() => Ok(RegularField { group, data }),
            _ => Err(Error::Group(format!(
                "{group} fields need shape [C, {}, H, W], got {:?}",
                group.order(),
                data.shape()
            ))),
        }
    }

    /// View as `[1, C·|G|, H, W]`.
    pub fn to_channels(&self) -> Tensor {
        let s = self.data.shape();
        self.data
            .clone()
            .reshape(&[1, s[0] * s[1], s[2], s[3]])
            .expect("same size")
    }
}

pub fn act_on_regular(g: GroupElement, r: &RegularField) -> Result<RegularField> {
    let s = r.data.shape().to_vec();
    let moved = act_on_regular_tensor(g, r.group, &r.to_channels())?;
    RegularField::new(r.group, moved.reshape(&s)?)
}

/// Flattened numeric view used when comparing outputs.
pub trait Flatten {
    fn flat(&self) -> Vec<f64>;
}

impl Flatten for Field {
    fn flat(&self) -> Vec<f64> {
        self.data().to_vec()
    }
}

impl Flatten for Vec<Field> {
    fn flat(&self) -> Vec<f64> {
        self.iter().flat_map(|f| f.data().iter().copied()).collect()
    }
}

impl Flatten for Tensor {
    fn flat(&self) -> Vec<f64> {
        self.data().to_vec()
    }
}

impl Flatten for RegularField {
    fn flat(&self) -> Vec<f64> {
        self.data.data().to_vec()
    }
}

impl<A: Flatten, B: Flatten> Flatten for (A, B) {
    fn flat(&self) -> Vec<f64> {
        let mut v = self.0.flat();
        v.extend(self.1.flat());
        v
    }
}

impl Flatten for SweState {
    fn flat(&self) -> Vec<f64> {
        [&self.zeta, &self.u, &self.v, &self.mask]
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect()
    }
}

impl Flatten for InsState {
    fn flat(&self) -> Vec<f64> {
        self.u.data().iter().chain(self.v.data()).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub group: Group,
    /// Max-norm relative error per non-identity element.
    pub errors: Vec<(GroupElement, f64)>,
    pub tolerance: f64,
}

impl EquivarianceReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().fold(0.0, |m, &(_, e)| m.max(e))
    }

    pub fn worst(&self) -> Option<(GroupElement, f64)> {
        self.errors.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn passed(&self) -> bool {
        self.errors.iter().all(|&(_, e)| e <= self.tolerance)
    }
}

/// `‖a − b‖∞ / ‖b‖∞`, or the absolute error when `b` vanishes.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if !err.is_finite() {
        return f64::INFINITY;
    }
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// Compares `f(T_g x)` with `T'_g f(x)` for every non-identity `g`.
pub fn check_equivariance<X, Y>(
    f: impl Fn(&X) -> Result<Y>,
    group: Group,
    input: &X,
    act_in: impl Fn(GroupElement, &X) -> Result<X>,
    act_out: impl Fn(GroupElement, &Y) -> Result<Y>,
    tolerance: f64,
) -> Result<EquivarianceReport>
where
    Y: Flatten,
{
    let base = f(input)?;
    let mut errors = Vec::new();
    for g in group.elements().into_iter().filter(|g| !g.is_identity()) {
        let lhs = f(&act_in(g, input)?)?;
        let rhs = act_out(g, &base)?;
        errors.push((g, max_rel_error(&lhs.flat(), &rhs.flat())));
    }
    Ok(EquivarianceReport {
        group,
        errors,
        tolerance,
    })
}
