//! Arakawa C-grid fields and discrete calculus.
//!
//! Row index is `y` (upward), column index is `x` (rightward). Cell `(r, c)`
//! has its center at `((c + ½) dx, (r + ½) dx)`. The x-face stored at `u[r][c]`
//! sits on the line `x = (c + 1) dx`, between cells `c` and `c + 1`; the
//! y-face `v[r][c]` sits on `y = (r + 1) dx`. Vertex `a[r][c]` is the corner
//! at `((c + 1) dx, (r + 1) dx)`.
//!
//! Under closed boundaries only interior faces are stored (`u` is
//! `ny × (nx − 1)`, `v` is `(ny − 1) × nx`); the wall-normal velocity is
//! identically zero. Under periodic boundaries every field is `ny × nx` and the
//! last column of `u` (last row of `v`) is the face that wraps around.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Closed,
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Location {
    Cell,
    FaceX,
    FaceY,
    Vertex,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub bc: Boundary,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, dx: f64, bc: Boundary) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!("grid needs at least 2×2 cells, got {nx}×{ny}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::Config(format!("cell size must be positive, got {dx}")));
        }
        Ok(GridSpec { nx, ny, dx, bc })
    }

    pub fn square(n: usize, dx: f64, bc: Boundary) -> Result<Self> {
        Self::new(n, n, dx, bc)
    }

    pub fn shape(&self, loc: Location) -> (usize, usize) {
        match (self.bc, loc) {
            (_, Location::Cell) => (self.ny, self.nx),
            (Boundary::Closed, Location::FaceX) => (self.ny, self.nx - 1),
            (Boundary::Closed, Location::FaceY) => (self.ny - 1, self.nx),
            (Boundary::Closed, Location::Vertex) => (self.ny - 1, self.nx - 1),
            (Boundary::Periodic, _) => (self.ny, self.nx),
        }
    }

    pub fn check(&self, f: &Field, loc: Location, what: &str) -> Result<()> {
        let want = self.shape(loc);
        if f.shape() != want {
            return Err(Error::shape(
                "grid",
                format!(
                    "{what} ({loc:?}) must be {}×{} on this grid, got {}×{}",
                    want.0,
                    want.1,
                    f.rows(),
                    f.cols()
                ),
            ));
        }
        Ok(())
    }

    pub fn is_square(&self) -> bool {
        self.nx == self.ny
    }
}

/// A dense 2-d array of grid values.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Field {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Field {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Field::from_vec",
                format!("{rows}×{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Field { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Field { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Field::zip_map",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Field {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|x| s * x)
    }

    /// Largest absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.zip_map(other, |a, b| (a - b).abs())
            .map(|d| d.max_abs())
            .unwrap_or(f64::INFINITY)
    }
}

impl Index<(usize, usize)> for Field {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Field {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Closed-basin shallow-water state: surface elevation, interior face
/// velocities and the (static) wall mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SweState {
    pub zeta: Field,
    pub u: Field,
    pub v: Field,
    pub mask: Field,
}

impl SweState {
    pub fn new(grid: &GridSpec, zeta: Field, u: Field, v: Field) -> Result<Self> {
        if grid.bc != Boundary::Closed {
            return Err(Error::Unsupported("shallow-water states live on closed grids".into()));
        }
        grid.check(&zeta, Location::Cell, "zeta")?;
        reject_wall_faces(grid, &u, &v)?;
        grid.check(&u, Location::FaceX, "u")?;
        grid.check(&v, Location::FaceY, "v")?;
        Ok(SweState {
            zeta,
            u,
            v,
            mask: boundary_mask(grid),
        })
    }

    pub fn rest(grid: &GridSpec) -> Result<Self> {
        let (cr, cc) = grid.shape(Location::Cell);
        let (ur, uc) = grid.shape(Location::FaceX);
        let (vr, vc) = grid.shape(Location::FaceY);
        Self::new(grid, Field::zeros(cr, cc), Field::zeros(ur, uc), Field::zeros(vr, vc))
    }
}

fn reject_wall_faces(grid: &GridSpec, u: &Field, v: &Field) -> Result<()> {
    let with_walls = [(grid.ny, grid.nx + 1), (grid.ny, grid.nx)];
    if with_walls.contains(&u.shape()) {
        return Err(Error::shape(
            "SweState",
            "u includes wall faces; closed grids store interior x-faces only (the wall-normal velocity is fixed at zero)",
        ));
    }
    let with_walls = [(grid.ny + 1, grid.nx), (grid.ny, grid.nx)];
    if with_walls.contains(&v.shape()) {
        return Err(Error::shape(
            "SweState",
            "v includes wall faces; closed grids store interior y-faces only (the wall-normal velocity is fixed at zero)",
        ));
    }
    Ok(())
}

/// 1 on cells touching a wall, 0 elsewhere.
pub fn boundary_mask(grid: &GridSpec) -> Field {
    let (ny, nx) = (grid.ny, grid.nx);
    Field::from_fn(ny, nx, |r, c| {
        if r == 0 || c == 0 || r + 1 == ny || c + 1 == nx {
            1.0
        } else {
            0.0
        }
    })
}

/// Periodic incompressible flow state.
#[derive(Clone, Debug, PartialEq)]
pub struct InsState {
    pub u: Field,
    pub v: Field,
}

impl InsState {
    pub fn new(grid: &GridSpec, u: Field, v: Field) -> Result<Self> {
        if grid.bc != Boundary::Periodic {
            return Err(Error::Unsupported(
                "incompressible states live on periodic grids".into(),
            ));
        }
        grid.check(&u, Location::FaceX, "u")?;
        grid.check(&v, Location::FaceY, "v")?;
        Ok(InsState { u, v })
    }

    pub fn zeros(grid: &GridSpec) -> Result<Self> {
        Self::new(grid, Field::zeros(grid.ny, grid.nx), Field::zeros(grid.ny, grid.nx))
    }
}

/// Neighbour values across the left/right (x) and bottom/top (y) faces of
/// cell `(r, c)`.
#[inline]
fn cell_faces(grid: &GridSpec, u: &Field, v: &Field, r: usize, c: usize) -> [f64; 4] {
    let (nx, ny) = (grid.nx, grid.ny);
    match grid.bc {
        Boundary::Closed => [
            if c > 0 { u[(r, c - 1)] } else { 0.0 },
            if c + 1 < nx { u[(r, c)] } else { 0.0 },
            if r > 0 { v[(r - 1, c)] } else { 0.0 },
            if r + 1 < ny { v[(r, c)] } else { 0.0 },
        ],
        Boundary::Periodic => [
            u[(r, (c + nx - 1) % nx)],
            u[(r, c)],
            v[((r + ny - 1) % ny, c)],
            v[(r, c)],
        ],
    }
}

pub fn divergence(u: &Field, v: &Field, grid: &GridSpec) -> Result<Field> {
    grid.check(u, Location::FaceX, "u")?;
    grid.check(v, Location::FaceY, "v")?;
    let inv = 1.0 / grid.dx;
    Ok(Field::from_fn(grid.ny, grid.nx, |r, c| {
        let [l, rt, b, t] = cell_faces(grid, u, v, r, c);
        (rt - l) * inv + (t - b) * inv
    }))
}

/// Velocity `(−∂a/∂y, ∂a/∂x)` of a vertex potential on a periodic grid.
pub fn curl_of_potential(a: &Field, grid: &GridSpec) -> Result<(Field, Field)> {
    if grid.bc != Boundary::Periodic {
        return Err(Error::Unsupported(
            "curl of a vertex potential is only defined on periodic grids".into(),
        ));
    }
    grid.check(a, Location::Vertex, "potential")?;
    let (ny, nx) = (grid.ny, grid.nx);
    let inv = 1.0 / grid.dx;
    let u = Field::from_fn(ny, nx, |r, c| -(a[(r, c)] - a[((r + ny - 1) % ny, c)]) * inv);
    let v = Field::from_fn(ny, nx, |r, c| (a[(r, c)] - a[(r, (c + nx - 1) % nx)]) * inv);
    Ok((u, v))
}

/// Face-average an incompressible state onto a grid `factor` times coarser.
pub fn face_average_coarsen(state: &InsState, grid: &GridSpec, factor: usize) -> Result<(InsState, GridSpec)> {
    if grid.bc != Boundary::Periodic {
        return Err(Error::Unsupported("coarsening needs a periodic grid".into()));
    }
    grid.check(&state.u, Location::FaceX, "u")?;
    grid.check(&state.v, Location::FaceY, "v")?;
    if factor == 0 || !grid.nx.is_multiple_of(factor) || !grid.ny.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "coarsening factor {factor} does not divide the {}×{} grid",
            grid.ny, grid.nx
        )));
    }
    let coarse = GridSpec::new(grid.nx / factor, grid.ny / factor, grid.dx * factor as f64, grid.bc)?;
    let w = 1.0 / factor as f64;
    let u = Field::from_fn(coarse.ny, coarse.nx, |r, c| {
        let fc = (c + 1) * factor - 1;
        (0..factor).map(|k| state.u[(r * factor + k, fc)]).sum::<f64>() * w
    });
    let v = Field::from_fn(coarse.ny, coarse.nx, |r, c| {
        let fr = (r + 1) * factor - 1;
        (0..factor).map(|k| state.v[(fr, c * factor + k)]).sum::<f64>() * w
    });
    Ok((InsState { u, v }, coarse))
}

/// Two-face averages at cell centers.
pub fn interpolate_to_centers(u: &Field, v: &Field, grid: &GridSpec) -> Result<(Field, Field)> {
    grid.check(u, Location::FaceX, "u")?;
    grid.check(v, Location::FaceY, "v")?;
    let mut uc = Field::zeros(grid.ny, grid.nx);
    let mut vc = Field::zeros(grid.ny, grid.nx);
    for r in 0..grid.ny {
        for c in 0..grid.nx {
            let [l, rt, b, t] = cell_faces(grid, u, v, r, c);
            uc[(r, c)] = 0.5 * (l + rt);
            vc[(r, c)] = 0.5 * (b + t);
        }
    }
    Ok((uc, vc))
}
