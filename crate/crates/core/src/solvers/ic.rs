//! Initial conditions for both tasks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ins::Projector;
use crate::error::{Error, Result};
use crate::grid::{Boundary, Field, GridSpec, InsState, SweState};
use crate::spectral::{signed_k, Fft2};

pub const BUMP_HEIGHT: f64 = 0.1;
pub const BUMP_WIDTH: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweIcKind {
    Square,
    OneRect,
    TwoRects,
    OverlappingRects,
}

/// Largest side length drawn on an `n`-cell axis.
pub fn max_side(n: usize) -> usize {
    ((0.28 * n as f64).floor() as usize).max(2).min(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

fn closed_grid(grid: &GridSpec) -> Result<()> {
    if grid.bc != Boundary::Closed {
        return Err(Error::Unsupported(
            "shallow-water initial conditions need a closed grid".into(),
        ));
    }
    if grid.nx < 2 || grid.ny < 2 {
        return Err(Error::Config("grid too small for a 2-cell rectangle".into()));
    }
    Ok(())
}

fn place<R: Rng>(rng: &mut R, grid: &GridSpec, height: usize, width: usize) -> Rect {
    Rect {
        row: rng.random_range(0..=grid.ny - height),
        col: rng.random_range(0..=grid.nx - width),
        height,
        width,
    }
}

fn elevation(grid: &GridSpec, rects: &[Rect]) -> Result<SweState> {
    let mut zeta = Field::zeros(grid.ny, grid.nx);
    for rc in rects {
        for r in rc.row..rc.row + rc.height {
            for c in rc.col..rc.col + rc.width {
                zeta[(r, c)] += BUMP_HEIGHT;
            }
        }
    }
    let mut s = SweState::rest(grid)?;
    s.zeta = zeta;
    Ok(s)
}

/// Random rectangles for the requested kind.
pub fn swe_rects<R: Rng>(rng: &mut R, kind: SweIcKind, grid: &GridSpec) -> Result<Vec<Rect>> {
    closed_grid(grid)?;
    let sy = max_side(grid.ny);
    let sx = max_side(grid.nx);
    let rect = |rng: &mut R| {
        let h = rng.random_range(2..=sy);
        let w = rng.random_range(2..=sx);
        place(rng, grid, h, w)
    };
    Ok(match kind {
        SweIcKind::Square => {
            let s = rng.random_range(2..=sy.min(sx));
            vec![place(rng, grid, s, s)]
        }
        SweIcKind::OneRect => vec![rect(rng)],
        SweIcKind::TwoRects => vec![rect(rng), rect(rng)],
        SweIcKind::OverlappingRects => {
            let a = rect(rng);
            let h = rng.random_range(2..=sy);
            let w = rng.random_range(2..=sx);
            let lo_r = (a.row + 1).saturating_sub(h);
            let hi_r = (grid.ny - h).min(a.row + a.height - 1);
            let lo_c = (a.col + 1).saturating_sub(w);
            let hi_c = (grid.nx - w).min(a.col + a.width - 1);
            let b = Rect {
                row: rng.random_range(lo_r..=hi_r),
                col: rng.random_range(lo_c..=hi_c),
                height: h,
                width: w,
            };
            vec![a, b]
        }
    })
}

/// A 0.1 m square bump with side in `2..=max_side(n)`, fully inside the basin.
pub fn swe_ic_square<R: Rng>(rng: &mut R, grid: &GridSpec) -> Result<SweState> {
    swe_ic(rng, SweIcKind::Square, grid)
}

pub fn swe_ic<R: Rng>(rng: &mut R, kind: SweIcKind, grid: &GridSpec) -> Result<SweState> {
    let rects = swe_rects(rng, kind, grid)?;
    elevation(grid, &rects)
}

/// Band-limited Gaussian noise, projected and scaled to unit RMS speed.
pub fn ins_ic_filtered_noise<R: Rng>(rng: &mut R, peak_k: usize, grid: &GridSpec) -> Result<InsState> {
    if grid.bc != Boundary::Periodic || !grid.is_square() {
        return Err(Error::Unsupported("filtered noise needs a square periodic grid".into()));
    }
    let n = grid.nx;
    if peak_k < 1 || peak_k >= n / 2 {
        return Err(Error::Config(format!(
            "peak wavenumber {peak_k} must lie in 1..{} for a {n}×{n} grid",
            n / 2
        )));
    }
    let fft = Fft2::new(n, n);
    let filter = |f: Field| {
        let mut spec = fft.forward(&f);
        for ky in 0..n {
            for kx in 0..n {
                let k = ((signed_k(kx, n).pow(2) + signed_k(ky, n).pow(2)) as f64).sqrt();
                let w = if kx == 0 && ky == 0 {
                    0.0
                } else {
                    (-(k - peak_k as f64).powi(2) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
                };
                spec[ky * n + kx] *= w;
            }
        }
        fft.inverse_real(spec)
    };
    let mut draw = || {
        let data = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Field::from_vec(n, n, data)
    };
    let u = filter(draw()?);
    let v = filter(draw()?);
    let s = Projector::new(grid)?.project(&u, &v)?;
    let rms = ((s.u.sum_sq() + s.v.sum_sq()) / (n * n) as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::NonFinite("filtered noise has zero energy".into()));
    }
    Ok(InsState {
        u: s.u.scale(1.0 / rms),
        v: s.v.scale(1.0 / rms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::divergence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn closed(n: usize) -> GridSpec {
        GridSpec::square(n, 1.0, Boundary::Closed).unwrap()
    }

    #[test]
    fn square_is_inside_and_at_rest() {
        let g = closed(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = swe_ic_square(&mut rng, &g).unwrap();
            assert_eq!(s.u.max_abs() + s.v.max_abs(), 0.0);
            let cells = s.zeta.data().iter().filter(|&&z| z == BUMP_HEIGHT).count();
            let side = (cells as f64).sqrt() as usize;
            assert_eq!(side * side, cells);
            assert!((2..=8).contains(&side));
        }
        assert_eq!(max_side(100), 28);
    }

    #[test]
    fn seeded_draws_repeat() {
        let g = closed(16);
        let a = swe_ic(&mut ChaCha8Rng::seed_from_u64(9), SweIcKind::TwoRects, &g).unwrap();
        let b = swe_ic(&mut ChaCha8Rng::seed_from_u64(9), SweIcKind::TwoRects, &g).unwrap();
        assert_eq!(a, b);
        let pg = GridSpec::square(16, 0.4, Boundary::Periodic).unwrap();
        let x = ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(2), 3, &pg).unwrap();
        let y = ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(2), 3, &pg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn overlapping_rects_sum() {
        let g = closed(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let rects = swe_rects(&mut rng, SweIcKind::OverlappingRects, &g).unwrap();
            let s = elevation(&g, &rects).unwrap();
            let (a, b) = (rects[0], rects[1]);
            let r = a.row.max(b.row);
            let c = a.col.max(b.col);
            assert!(r < (a.row + a.height).min(b.row + b.height));
            assert!(c < (a.col + a.width).min(b.col + b.width));
            assert_eq!(s.zeta[(r, c)], 0.2);
        }
    }

    #[test]
    fn filtered_noise_is_divergence_free_with_unit_rms() {
        let g = GridSpec::square(32, 0.2, Boundary::Periodic).unwrap();
        let s = ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(4), 6, &g).unwrap();
        assert!(divergence(&s.u, &s.v, &g).unwrap().max_abs() < 1e-10);
        let rms = ((s.u.sum_sq() + s.v.sum_sq()) / 1024.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        assert!(s.u.sum().abs() < 1e-10 && s.v.sum().abs() < 1e-10);
        assert!(ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(4), 16, &g).is_err());
        assert!(ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(4), 0, &g).is_err());
    }
}
