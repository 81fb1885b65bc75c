//! Semi-implicit shallow-water solver on a closed C-grid.
//!
//! Each step computes explicit interim velocities (drag, the explicit share of
//! the surface slope, lateral mixing), then solves a symmetric positive
//! definite five-point system for the new surface elevation with the flux
//! depth lagged at the old time level, updates the velocities with the
//! implicit share of the slope, and finally advances ζ in flux form so that
//! total mass is conserved to round-off.

use serde::{Deserialize, Serialize};

use super::cg::pcg;
use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, GridSpec, SweState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweParams {
    pub gravity: f64,
    /// Undisturbed depth `d`.
    pub depth: f64,
    pub drag: f64,
    /// Horizontal momentum exchange coefficient.
    pub a_h: f64,
    pub dx: f64,
    pub dt: f64,
    pub w_imp: f64,
    /// Relative residual at which the elevation solve stops.
    pub cg_tol: f64,
}

impl Default for SweParams {
    fn default() -> Self {
        SweParams {
            gravity: 9.81,
            depth: 100.0,
            drag: 1e-3,
            a_h: 0.0,
            dx: 10_000.0,
            dt: 300.0,
            w_imp: 0.5,
            cg_tol: 1e-12,
        }
    }
}

impl SweParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gravity", self.gravity),
            ("depth", self.depth),
            ("dx", self.dx),
            ("dt", self.dt),
            ("cg_tol", self.cg_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("swe.{name} must be positive, got {v}")));
            }
        }
        if !(self.drag >= 0.0) || !(self.a_h >= 0.0) {
            return Err(Error::Config("swe.drag and swe.a_h must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.w_imp) {
            return Err(Error::Config(format!(
                "swe.w_imp must lie in [0, 1], got {}",
                self.w_imp
            )));
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<GridSpec> {
        GridSpec::square(n, self.dx, Boundary::Closed)
    }
}

/// Total depth `d + ζ`, failing on dry or negative cells.
pub fn total_depth(zeta: &Field, p: &SweParams) -> Result<Field> {
    for r in 0..zeta.rows() {
        for c in 0..zeta.cols() {
            let h = p.depth + zeta[(r, c)];
            if !(h > 0.0) {
                return Err(Error::Depth {
                    row: r,
                    col: c,
                    depth: h,
                });
            }
        }
    }
    Ok(zeta.map(|z| p.depth + z))
}

/// Depth on x-faces and y-faces as the mean of the two adjacent cells.
fn face_depths(h: &Field) -> (Field, Field) {
    let (ny, nx) = h.shape();
    let hu = Field::from_fn(ny, nx - 1, |r, c| 0.5 * (h[(r, c)] + h[(r, c + 1)]));
    let hv = Field::from_fn(ny - 1, nx, |r, c| 0.5 * (h[(r, c)] + h[(r + 1, c)]));
    (hu, hv)
}

fn laplacian_zero_outside(f: &Field, dx: f64) -> Field {
    let (rows, cols) = f.shape();
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            f[(r as usize, c as usize)]
        }
    };
    Field::from_fn(rows, cols, |r, c| {
        let (r, c) = (r as isize, c as isize);
        (at(r, c - 1) + at(r, c + 1) + at(r - 1, c) + at(r + 1, c) - 4.0 * at(r, c)) / (dx * dx)
    })
}

fn check_state(state: &SweState, grid: &GridSpec) -> Result<()> {
    if grid.bc != Boundary::Closed {
        return Err(Error::Unsupported(
            "the shallow-water solver needs a closed grid".into(),
        ));
    }
    SweState::new(grid, state.zeta.clone(), state.u.clone(), state.v.clone()).map(|_| ())
}

/// Explicit interim velocities `u*`, `v*` from the state at time `n`.
pub fn interim_velocity(state: &SweState, p: &SweParams, grid: &GridSpec) -> Result<(Field, Field)> {
    check_state(state, grid)?;
    let h = total_depth(&state.zeta, p)?;
    let (hu, hv) = face_depths(&h);
    let z = &state.zeta;
    let dt = p.dt;
    let explicit = dt * p.gravity * (1.0 - p.w_imp) / p.dx;
    let lu = laplacian_zero_outside(&state.u, p.dx);
    let lv = laplacian_zero_outside(&state.v, p.dx);
    let us = Field::from_fn(state.u.rows(), state.u.cols(), |r, c| {
        let u = state.u[(r, c)];
        u - dt * p.drag * u * u.abs() / hu[(r, c)] - explicit * (z[(r, c + 1)] - z[(r, c)]) + dt * p.a_h * lu[(r, c)]
    });
    let vs = Field::from_fn(state.v.rows(), state.v.cols(), |r, c| {
        let v = state.v[(r, c)];
        v - dt * p.drag * v * v.abs() / hv[(r, c)] - explicit * (z[(r + 1, c)] - z[(r, c)]) + dt * p.a_h * lv[(r, c)]
    });
    Ok((us, vs))
}

/// `u = u* − Δt g w ∂ζ/∂x`, `v = v* − Δt g w ∂ζ/∂y`.
pub fn velocity_update(us: &Field, vs: &Field, zeta_new: &Field, p: &SweParams) -> (Field, Field) {
    let k = p.dt * p.gravity * p.w_imp / p.dx;
    let z = zeta_new;
    let u = Field::from_fn(us.rows(), us.cols(), |r, c| {
        us[(r, c)] - k * (z[(r, c + 1)] - z[(r, c)])
    });
    let v = Field::from_fn(vs.rows(), vs.cols(), |r, c| {
        vs[(r, c)] - k * (z[(r + 1, c)] - z[(r, c)])
    });
    (u, v)
}

/// `−∇·(H u)` with zero wall fluxes.
fn flux_convergence(hu: &Field, hv: &Field, u: &Field, v: &Field, dx: f64) -> Field {
    let ny = hu.rows();
    let nx = hv.cols();
    Field::from_fn(ny, nx, |r, c| {
        let fe = if c + 1 < nx { hu[(r, c)] * u[(r, c)] } else { 0.0 };
        let fw = if c > 0 { hu[(r, c - 1)] * u[(r, c - 1)] } else { 0.0 };
        let fn_ = if r + 1 < ny { hv[(r, c)] * v[(r, c)] } else { 0.0 };
        let fs = if r > 0 { hv[(r - 1, c)] * v[(r - 1, c)] } else { 0.0 };
        -(fe - fw + fn_ - fs) / dx
    })
}

/// The implicit elevation system `A η = b` (exposed for testing).
pub struct ElevationSystem {
    pub hu: Field,
    pub hv: Field,
    pub alpha: f64,
    pub rhs: Field,
}

impl ElevationSystem {
    pub fn new(state: &SweState, us: &Field, vs: &Field, p: &SweParams) -> Result<Self> {
        let h = total_depth(&state.zeta, p)?;
        let (hu, hv) = face_depths(&h);
        let conv = flux_convergence(&hu, &hv, us, vs, p.dx);
        let rhs = state.zeta.zip_map(&conv, |z, d| z + p.dt * d)?;
        Ok(ElevationSystem {
            hu,
            hv,
            alpha: p.dt * p.dt * p.gravity * p.w_imp / (p.dx * p.dx),
            rhs,
        })
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (ny, nx) = self.rhs.shape();
        for r in 0..ny {
            for c in 0..nx {
                let i = r * nx + c;
                let mut acc = 0.0;
                if c + 1 < nx {
                    acc += self.hu[(r, c)] * (x[i] - x[i + 1]);
                }
                if c > 0 {
                    acc += self.hu[(r, c - 1)] * (x[i] - x[i - 1]);
                }
                if r + 1 < ny {
                    acc += self.hv[(r, c)] * (x[i] - x[i + nx]);
                }
                if r > 0 {
                    acc += self.hv[(r - 1, c)] * (x[i] - x[i - nx]);
                }
                out[i] = x[i] + self.alpha * acc;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let (ny, nx) = self.rhs.shape();
        let mut d = vec![1.0; ny * nx];
        for r in 0..ny {
            for c in 0..nx {
                let mut s = 0.0;
                if c + 1 < nx {
                    s += self.hu[(r, c)];
                }
                if c > 0 {
                    s += self.hu[(r, c - 1)];
                }
                if r + 1 < ny {
                    s += self.hv[(r, c)];
                }
                if r > 0 {
                    s += self.hv[(r - 1, c)];
                }
                d[r * nx + c] += self.alpha * s;
            }
        }
        d
    }

    pub fn solve(&self, initial: &Field, tol: f64) -> Result<Field> {
        let (ny, nx) = self.rhs.shape();
        let mut x = initial.data().to_vec();
        pcg(
            |a, b| self.apply(a, b),
            &self.diagonal(),
            self.rhs.data(),
            &mut x,
            tol,
            10 * ny * nx,
        )?;
        Field::from_vec(ny, nx, x)
    }
}

/// Advances the state by one time step.
pub fn swe_step(state: &SweState, p: &SweParams, grid: &GridSpec) -> Result<SweState> {
    let (us, vs) = interim_velocity(state, p, grid)?;
    let sys = ElevationSystem::new(state, &us, &vs, p)?;
    let eta = sys.solve(&state.zeta, p.cg_tol)?;
    let (u, v) = velocity_update(&us, &vs, &eta, p);
    let conv = flux_convergence(&sys.hu, &sys.hv, &u, &v, p.dx);
    let zeta = state.zeta.zip_map(&conv, |z, d| z + p.dt * d)?;
    Ok(SweState {
        zeta,
        u,
        v,
        mask: state.mask.clone(),
    })
}

/// `steps + 1` snapshots starting with `ic`.
pub fn swe_trajectory(ic: &SweState, p: &SweParams, grid: &GridSpec, steps: usize) -> Result<Vec<SweState>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(ic.clone());
    for _ in 0..steps {
        let next = swe_step(out.last().expect("non-empty"), p, grid)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Location;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(n: usize, seed: u64, p: &SweParams) -> (SweState, GridSpec) {
        let grid = p.grid(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |loc| {
            let (r, c) = grid.shape(loc);
            let data = (0..r * c).map(|_| rng.random_range(-0.1..0.1)).collect();
            Field::from_vec(r, c, data).unwrap()
        };
        let z = f(Location::Cell);
        let u = f(Location::FaceX);
        let v = f(Location::FaceY);
        (SweState::new(&grid, z, u, v).unwrap(), grid)
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let p = SweParams::default();
        let grid = p.grid(6).unwrap();
        let s = SweState::rest(&grid).unwrap();
        assert_eq!(swe_step(&s, &p, &grid).unwrap(), s);
    }

    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, p);
            b.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn step_matches_dense_direct_solve() {
        let p = SweParams {
            a_h: 500.0,
            ..SweParams::default()
        };
        let (s, grid) = random_state(4, 3, &p);
        let got = swe_step(&s, &p, &grid).unwrap();

        // independent assembly: cell (r, c) couples to each wet neighbour with
        // weight α·H_face where H_face averages the two cell depths
        let n = 4;
        let (us, vs) = interim_velocity(&s, &p, &grid).unwrap();
        let h = |r: usize, c: usize| p.depth + s.zeta[(r, c)];
        let alpha = p.dt * p.dt * p.gravity * p.w_imp / (p.dx * p.dx);
        let mut a = vec![vec![0.0; n * n]; n * n];
        let mut b = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                a[i][i] = 1.0;
                let mut div = 0.0;
                let nbrs: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];
                for (dr, dc) in nbrs {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                        continue;
                    }
                    let (rr, cc) = (rr as usize, cc as usize);
                    let hf = 0.5 * (h(r, c) + h(rr, cc));
                    a[i][i] += alpha * hf;
                    a[i][rr * n + cc] -= alpha * hf;
                    let outward = match (dr, dc) {
                        (0, 1) => us[(r, c)],
                        (0, -1) => -us[(r, cc)],
                        (1, 0) => vs[(r, c)],
                        _ => -vs[(rr, c)],
                    };
                    div += hf * outward;
                }
                b[i] = s.zeta[(r, c)] - p.dt * div / p.dx;
            }
        }
        let eta = Field::from_vec(n, n, gauss_solve(a, b)).unwrap();
        let (u, v) = velocity_update(&us, &vs, &eta, &p);
        assert!(got.u.max_abs_diff(&u) < 1e-10 * u.max_abs().max(1e-3));
        assert!(got.v.max_abs_diff(&v) < 1e-10 * v.max_abs().max(1e-3));
        assert!(got.zeta.max_abs_diff(&eta) < 1e-10 * eta.max_abs());
    }

    #[test]
    fn mass_is_conserved() {
        let p = SweParams::default();
        let (s, grid) = random_state(8, 4, &p);
        let s1 = swe_step(&s, &p, &grid).unwrap();
        let m0 = s.zeta.data().iter().map(|z| z + p.depth).sum::<f64>();
        let m1 = s1.zeta.data().iter().map(|z| z + p.depth).sum::<f64>();
        assert!((m1 - m0).abs() <= 1e-12 * m0);
    }

    #[test]
    fn dry_cell_is_reported() {
        let p = SweParams::default();
        let grid = p.grid(4).unwrap();
        let mut s = SweState::rest(&grid).unwrap();
        s.zeta[(1, 2)] = -150.0;
        assert!(matches!(
            swe_step(&s, &p, &grid),
            Err(Error::Depth { row: 1, col: 2, .. })
        ));
    }

    #[test]
    fn step_is_p4m_equivariant() {
        use crate::symmetry::{act_on_swe_state, check_equivariance, Group};
        let p = SweParams {
            a_h: 1e4,
            ..SweParams::default()
        };
        let (s, grid) = random_state(8, 6, &p);
        let rep = check_equivariance(
            |x: &SweState| swe_step(x, &p, &grid),
            Group::P4m,
            &s,
            |e, x| act_on_swe_state(e, x, &grid),
            |e, y| act_on_swe_state(e, y, &grid),
            1e-10,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn params_validate() {
        assert!(SweParams::default().validate().is_ok());
        let bad = SweParams {
            w_imp: 1.5,
            ..SweParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
