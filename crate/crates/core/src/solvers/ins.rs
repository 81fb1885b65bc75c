//! Periodic incompressible Navier–Stokes on a staggered (MAC) grid.
//!
//! Advection is centred and in flux form, so the face sums of `u` and `v`
//! telescope and global momentum is conserved to round-off. Time stepping is
//! three-stage strong-stability-preserving Runge–Kutta with an exact discrete
//! projection after each stage; the pressure Poisson problem is inverted
//! spectrally using the eigenvalues of the five-point Laplacian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{divergence, Boundary, Field, GridSpec, InsState};
use crate::spectral::HalfFft2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsParams {
    pub rho: f64,
    pub mu: f64,
    /// Side length of the square domain.
    pub length: f64,
    /// Time between stored (coarse) snapshots.
    pub dt: f64,
    /// Target Courant number used to choose solver sub-steps.
    pub cfl: f64,
}

impl Default for InsParams {
    fn default() -> Self {
        InsParams {
            rho: 1.0,
            mu: 1e-3,
            length: 2.0 * std::f64::consts::PI,
            dt: 0.8375,
            cfl: 0.5,
        }
    }
}

impl InsParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("mu", self.mu),
            ("length", self.length),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("ins.{name} must be positive, got {v}")));
            }
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Config(format!("ins.cfl must lie in (0, 1], got {}", self.cfl)));
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<GridSpec> {
        GridSpec::square(n, self.length / n as f64, Boundary::Periodic)
    }
}

/// Exact discrete projection onto divergence-free MAC fields.
#[derive(Debug)]
pub struct Projector {
    grid: GridSpec,
    fft: HalfFft2,
    inv_eig: Vec<f64>,
}

impl Projector {
    pub fn new(grid: &GridSpec) -> Result<Self> {
        if grid.bc != Boundary::Periodic {
            return Err(Error::Unsupported("spectral projection needs a periodic grid".into()));
        }
        let (ny, nx) = (grid.ny, grid.nx);
        let h2 = grid.dx * grid.dx;
        let fft = HalfFft2::new(ny, nx);
        let mut inv_eig = vec![0.0; ny * fft.half_cols()];
        for kx in 0..fft.half_cols() {
            let sx = (std::f64::consts::PI * kx as f64 / nx as f64).sin();
            for ky in 0..ny {
                let sy = (std::f64::consts::PI * ky as f64 / ny as f64).sin();
                let lam = -4.0 / h2 * (sx * sx + sy * sy);
                if ky != 0 || kx != 0 {
                    inv_eig[kx * ny + ky] = 1.0 / lam;
                }
            }
        }
        Ok(Projector {
            grid: *grid,
            fft,
            inv_eig,
        })
    }

    /// Pressure-like potential `φ` with `∇²φ = ∇·(u, v)` and zero mean.
    pub fn potential(&self, u: &Field, v: &Field) -> Result<Field> {
        let div = divergence(u, v, &self.grid)?;
        let mut spec = self.fft.forward(div.data());
        for (z, s) in spec.iter_mut().zip(&self.inv_eig) {
            *z *= *s;
        }
        Field::from_vec(self.grid.ny, self.grid.nx, self.fft.inverse(spec))
    }

    pub fn project(&self, u: &Field, v: &Field) -> Result<InsState> {
        let phi = self.potential(u, v)?;
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let inv = 1.0 / self.grid.dx;
        let p = phi.data();
        let mut uo = u.clone();
        let mut vo = v.clone();
        let (ud, vd) = (uo.data_mut(), vo.data_mut());
        for r in 0..ny {
            let o = r * nx;
            let ou = ((r + 1) % ny) * nx;
            for c in 0..nx {
                let cr = if c + 1 == nx { 0 } else { c + 1 };
                ud[o + c] -= (p[o + cr] - p[o + c]) * inv;
                vd[o + c] -= (p[ou + c] - p[o + c]) * inv;
            }
        }
        Ok(InsState { u: uo, v: vo })
    }
}

#[derive(Debug)]
pub struct InsSolver {
    pub params: InsParams,
    pub grid: GridSpec,
    projector: Projector,
}

impl InsSolver {
    pub fn new(params: InsParams, grid: &GridSpec) -> Result<Self> {
        params.validate()?;
        Ok(InsSolver {
            params,
            grid: *grid,
            projector: Projector::new(grid)?,
        })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Advection plus viscous tendency, before projection.
    pub fn tendency(&self, s: &InsState) -> (Field, Field) {
        let (ny, nx) = (self.grid.ny, self.grid.nx);
        let inv = 1.0 / self.grid.dx;
        let nu = self.params.mu / self.params.rho;
        let (u, v) = (s.u.data(), s.v.data());
        let left: Vec<usize> = (0..nx).map(|c| (c + nx - 1) % nx).collect();
        let right: Vec<usize> = (0..nx).map(|c| (c + 1) % nx).collect();
        let row = |r: usize| r * nx;
        let down = |r: usize| ((r + ny - 1) % ny) * nx;
        let up = |r: usize| ((r + 1) % ny) * nx;
        let n = ny * nx;
        // cell-centred uu and vv, vertex uv
        let mut uu = vec![0.0; n];
        let mut vv = vec![0.0; n];
        let mut uv = vec![0.0; n];
        for r in 0..ny {
            let (o, od, ou) = (row(r), down(r), up(r));
            for c in 0..nx {
                let a = 0.5 * (u[o + left[c]] + u[o + c]);
                uu[o + c] = a * a;
                let b = 0.5 * (v[od + c] + v[o + c]);
                vv[o + c] = b * b;
                uv[o + c] = 0.25 * (u[o + c] + u[ou + c]) * (v[o + c] + v[o + right[c]]);
            }
        }
        let mut du = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let inv2 = inv * inv;
        for r in 0..ny {
            let (o, od, ou) = (row(r), down(r), up(r));
            for c in 0..nx {
                let (l, rt, i) = (o + left[c], o + right[c], o + c);
                let lap_u = (u[l] + u[rt] + u[od + c] + u[ou + c] - 4.0 * u[i]) * inv2;
                let lap_v = (v[l] + v[rt] + v[od + c] + v[ou + c] - 4.0 * v[i]) * inv2;
                du[i] = -(uu[rt] - uu[i]) * inv - (uv[i] - uv[od + c]) * inv + nu * lap_u;
                dv[i] = -(uv[i] - uv[l]) * inv - (vv[ou + c] - vv[i]) * inv + nu * lap_v;
            }
        }
        (
            Field::from_vec(ny, nx, du).expect("tendency shape"),
            Field::from_vec(ny, nx, dv).expect("tendency shape"),
        )
    }

    pub fn courant(&self, s: &InsState, dt: f64) -> f64 {
        s.u.max_abs().max(s.v.max_abs()) * dt / self.grid.dx
    }

    /// One SSP-RK3 step of size `dt`.
    pub fn step(&self, s: &InsState, dt: f64) -> Result<InsState> {
        self.grid.check(&s.u, crate::grid::Location::FaceX, "u")?;
        self.grid.check(&s.v, crate::grid::Location::FaceY, "v")?;
        let cfl = self.courant(s, dt);
        if !(cfl <= 1.0) {
            return Err(Error::Cfl { cfl });
        }
        let stage = |base: &InsState, a: f64, cur: &InsState, b: f64| -> Result<InsState> {
            let (du, dv) = self.tendency(cur);
            let u = Field::from_fn(self.grid.ny, self.grid.nx, |r, c| {
                a * base.u[(r, c)] + b * (cur.u[(r, c)] + dt * du[(r, c)])
            });
            let v = Field::from_fn(self.grid.ny, self.grid.nx, |r, c| {
                a * base.v[(r, c)] + b * (cur.v[(r, c)] + dt * dv[(r, c)])
            });
            self.projector.project(&u, &v)
        };
        let s1 = stage(s, 0.0, s, 1.0)?;
        let s2 = stage(s, 0.75, &s1, 0.25)?;
        stage(s, 1.0 / 3.0, &s2, 2.0 / 3.0)
    }

    /// Number of equal sub-steps used to cover `dt_total` from state `s`.
    pub fn substeps(&self, s: &InsState, dt_total: f64) -> usize {
        let speed = s.u.max_abs().max(s.v.max_abs());
        let n = (speed * dt_total / (self.params.cfl * self.grid.dx)).ceil();
        if n.is_finite() {
            (n as usize).max(1)
        } else {
            1
        }
    }

    /// Advances by `dt_total` using CFL-limited sub-steps.
    pub fn advance(&self, s: &InsState, dt_total: f64) -> Result<InsState> {
        let n = self.substeps(s, dt_total);
        let dt = dt_total / n as f64;
        let mut cur = s.clone();
        for _ in 0..n {
            cur = self.step(&cur, dt)?;
        }
        Ok(cur)
    }
}

/// One explicit step of size `dt` (no sub-stepping).
pub fn ins_step(state: &InsState, p: &InsParams, grid: &GridSpec, dt: f64) -> Result<InsState> {
    InsSolver::new(*p, grid)?.step(state, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::curl_of_potential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_divfree(n: usize, seed: u64, grid: &GridSpec) -> InsState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = crate::tensor::Tensor::randn(&[n * n], 0.05, &mut rng).into_data();
        let (u, v) = curl_of_potential(&Field::from_vec(n, n, a).unwrap(), grid).unwrap();
        InsState { u, v }
    }

    #[test]
    fn projection_is_exact_and_idempotent() {
        let p = InsParams::default();
        let g = p.grid(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Field::from_vec(16, 16, crate::tensor::Tensor::randn(&[256], 1.0, &mut rng).into_data()).unwrap();
        let v = Field::from_vec(16, 16, crate::tensor::Tensor::randn(&[256], 1.0, &mut rng).into_data()).unwrap();
        let pr = Projector::new(&g).unwrap();
        let s = pr.project(&u, &v).unwrap();
        assert!(divergence(&s.u, &s.v, &g).unwrap().max_abs() < 1e-12);
        assert!((s.u.sum() - u.sum()).abs() < 1e-12);
        let s2 = pr.project(&s.u, &s.v).unwrap();
        assert!(s2.u.max_abs_diff(&s.u) < 1e-13);
    }

    #[test]
    fn uniform_flow_is_fixed() {
        let p = InsParams::default();
        let g = p.grid(8).unwrap();
        let solver = InsSolver::new(p, &g).unwrap();
        let s = InsState {
            u: Field::full(8, 8, 0.5),
            v: Field::zeros(8, 8),
        };
        let out = solver.step(&s, 0.1).unwrap();
        assert!(out.u.max_abs_diff(&s.u) < 1e-15 && out.v.max_abs() < 1e-15);
    }

    #[test]
    fn conserves_momentum_and_divergence() {
        let p = InsParams::default();
        let g = p.grid(16).unwrap();
        let solver = InsSolver::new(p, &g).unwrap();
        let mut s = random_divfree(16, 2, &g);
        s.u = s.u.map(|x| x + 0.3);
        let (mu0, mv0) = (s.u.sum(), s.v.sum());
        for _ in 0..5 {
            s = solver.advance(&s, 0.2).unwrap();
        }
        assert!(divergence(&s.u, &s.v, &g).unwrap().max_abs() < 1e-10);
        assert!((s.u.sum() - mu0).abs() < 1e-10 * mu0.abs());
        assert!((s.v.sum() - mv0).abs() < 1e-10 * mu0.abs());
    }

    #[test]
    fn cfl_violation_is_reported() {
        let p = InsParams::default();
        let g = p.grid(8).unwrap();
        let s = InsState {
            u: Field::full(8, 8, 100.0),
            v: Field::zeros(8, 8),
        };
        assert!(matches!(ins_step(&s, &p, &g, 1.0), Err(Error::Cfl { .. })));
    }

    #[test]
    fn shear_wave_decays_viscously() {
        // u = sin(y): energy decays as exp(−2μk²t) with k = 1
        let p = InsParams {
            mu: 0.05,
            ..InsParams::default()
        };
        let n = 32;
        let g = p.grid(n).unwrap();
        let solver = InsSolver::new(p, &g).unwrap();
        let h = g.dx;
        let mut s = InsState {
            u: Field::from_fn(n, n, |r, _| ((r as f64 + 0.5) * h).sin()),
            v: Field::zeros(n, n),
        };
        let e0 = s.u.sum_sq() + s.v.sum_sq();
        let dt = 0.05;
        for _ in 0..10 {
            s = solver.step(&s, dt).unwrap();
        }
        let ratio = (s.u.sum_sq() + s.v.sum_sq()) / e0;
        let expected = (-2.0 * p.mu * 1.0 * 10.0 * dt).exp();
        assert!((ratio / expected - 1.0).abs() < 0.01, "{ratio} vs {expected}");
    }

    #[test]
    fn taylor_green_decays_viscously() {
        // |k|² = 2, so energy decays as exp(−4μt)
        let p = InsParams {
            mu: 0.05,
            ..InsParams::default()
        };
        let n = 32;
        let g = p.grid(n).unwrap();
        let solver = InsSolver::new(p, &g).unwrap();
        let h = g.dx;
        let mut s = InsState {
            u: Field::from_fn(n, n, |r, c| ((c + 1) as f64 * h).sin() * ((r as f64 + 0.5) * h).cos()),
            v: Field::from_fn(n, n, |r, c| -((c as f64 + 0.5) * h).cos() * ((r + 1) as f64 * h).sin()),
        };
        assert!(divergence(&s.u, &s.v, &g).unwrap().max_abs() < 1e-12);
        let e0 = s.u.sum_sq() + s.v.sum_sq();
        for _ in 0..10 {
            s = solver.step(&s, 0.05).unwrap();
        }
        let ratio = (s.u.sum_sq() + s.v.sum_sq()) / e0;
        let expected = (-2.0 * p.mu * 2.0 * 0.5).exp();
        assert!((ratio / expected - 1.0).abs() < 0.01, "{ratio} vs {expected}");
    }

    #[test]
    fn step_is_p4m_equivariant() {
        use crate::symmetry::{act_on_ins_state, check_equivariance, Group};
        let p = InsParams::default();
        let g = p.grid(16).unwrap();
        let solver = InsSolver::new(p, &g).unwrap();
        let s = random_divfree(16, 5, &g);
        let rep = check_equivariance(
            |x: &InsState| solver.advance(x, 0.3),
            Group::P4m,
            &s,
            |e, x| act_on_ins_state(e, x, &g),
            |e, y| act_on_ins_state(e, y, &g),
            1e-10,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
