//! Hard conservation constraints applied to predicted increments.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::grid::{curl_of_potential, Field, GridSpec, InsState};
use crate::tensor::{PadMode, PaddingSpec, Tensor};

/// `dζ − mean(dζ)`: the update leaves total mass unchanged.
pub fn mass_correction(dz: &Field) -> Field {
    let m = dz.mean();
    dz.map(|x| x - m)
}

/// Removes the mean of each velocity component increment independently.
pub fn momentum_correction(du: &Field, dv: &Field) -> (Field, Field) {
    (mass_correction(du), mass_correction(dv))
}

/// `u ← u − ∂a/∂y`, `v ← v + ∂a/∂x`.
pub fn divfree_update(a: &Field, state: &InsState, grid: &GridSpec) -> Result<InsState> {
    let (du, dv) = curl_of_potential(a, grid)?;
    Ok(InsState {
        u: state.u.add(&du)?,
        v: state.v.add(&dv)?,
    })
}

/// Per-plane mean removal on the tape (`[B, C, H, W]`).
pub fn mean_correction_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.sub_mean_spatial(x)
}

/// Curl of a periodic vertex potential `[B, 1, ny, nx]` on the tape, with
/// `scale` standing in for `1/dx`.
pub fn curl_on_tape(tape: &mut Tape, a: Var, scale: f64) -> Result<(Var, Var)> {
    // u[r][c] = −(a[r][c] − a[r−1][c])·s
    let ku = tape.constant(Tensor::new(vec![1, 1, 2, 1], vec![scale, -scale])?);
    let u = tape.conv2d(a, ku, PaddingSpec::new(PadMode::Circular, 1, 0, 0, 0))?;
    // v[r][c] = (a[r][c] − a[r][c−1])·s
    let kv = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![-scale, scale])?);
    let v = tape.conv2d(a, kv, PaddingSpec::new(PadMode::Circular, 0, 0, 1, 0))?;
    Ok((u, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::grid::{divergence, Boundary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_field(n: usize, rng: &mut ChaCha8Rng) -> Field {
        Field::from_vec(n, n, Tensor::randn(&[n * n], 1.0, rng).into_data()).unwrap()
    }

    #[test]
    fn mass_correction_cases() {
        assert_eq!(mass_correction(&Field::full(3, 3, 5.0)).max_abs(), 0.0);
        let z = Field::from_vec(1, 4, vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(mass_correction(&z), z);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_field(9, &mut rng);
        let out = mass_correction(&f);
        assert!(out.mean().abs() <= 1e-15);
        let mean: f64 = f.data().iter().sum::<f64>() / 81.0;
        for (o, i) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, i - mean);
        }
    }

    #[test]
    fn momentum_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (u, v) = (rand_field(8, &mut rng), rand_field(8, &mut rng));
        let (du, dv) = momentum_correction(&rand_field(8, &mut rng), &rand_field(8, &mut rng));
        let u1 = u.add(&du).unwrap();
        let v1 = v.add(&dv).unwrap();
        assert!((u1.sum() - u.sum()).abs() <= 1e-12 * u.sum().abs().max(1.0));
        assert!((v1.sum() - v.sum()).abs() <= 1e-12 * v.sum().abs().max(1.0));
        let (a, b) = momentum_correction(&Field::full(2, 2, 1.0), &Field::full(2, 2, -3.0));
        assert_eq!(a.max_abs() + b.max_abs(), 0.0);
    }

    #[test]
    fn divfree_update_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let g = GridSpec::square(n, 0.4, Boundary::Periodic).unwrap();
        let (u, v) = curl_of_potential(&rand_field(n, &mut rng), &g).unwrap();
        let s = InsState::new(&g, u, v).unwrap();
        assert_eq!(divfree_update(&Field::zeros(n, n), &s, &g).unwrap(), s);

        let a = rand_field(n, &mut rng);
        let s1 = divfree_update(&a, &s, &g).unwrap();
        let d0 = divergence(&s.u, &s.v, &g).unwrap();
        let d1 = divergence(&s1.u, &s1.v, &g).unwrap();
        assert!(d1.max_abs_diff(&d0) <= 1e-12);
        assert!((s1.u.sum() - s.u.sum()).abs() <= 1e-12);
        assert!((s1.v.sum() - s.v.sum()).abs() <= 1e-12);

        // adding the momentum correction changes nothing
        let (du, dv) = curl_of_potential(&a, &g).unwrap();
        let (cu, cv) = momentum_correction(&du, &dv);
        assert!(cu.max_abs_diff(&du) <= 1e-12 && cv.max_abs_diff(&dv) <= 1e-12);
    }

    #[test]
    fn tape_curl_matches_grid_curl_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let g = GridSpec::square(n, 0.5, Boundary::Periodic).unwrap();
        let a = rand_field(n, &mut rng);
        let (u, v) = curl_of_potential(&a, &g).unwrap();
        let mut store = ParamStore::new();
        store.push("a", Tensor::new(vec![1, 1, n, n], a.data().to_vec()).unwrap());
        let mut tape = Tape::new();
        let av = tape.param(&store, 0);
        let (ut, vt) = curl_on_tape(&mut tape, av, 2.0).unwrap();
        assert!(tape
            .value(ut)
            .data()
            .iter()
            .zip(u.data())
            .all(|(x, y)| (x - y).abs() < 1e-14));
        assert!(tape
            .value(vt)
            .data()
            .iter()
            .zip(v.data())
            .all(|(x, y)| (x - y).abs() < 1e-14));

        // mean correction and curl: the Jacobian-vector product of a linear
        // map equals the map itself, checked against central differences
        let w = Tensor::randn(&[1, 1, n, n], 1.0, &mut rng);
        let loss = |a: &Tensor| {
            let mut t = Tape::new();
            let av = t.constant(a.clone());
            let (u, v) = curl_on_tape(&mut t, av, 2.0).unwrap();
            let u = mean_correction_on_tape(&mut t, u).unwrap();
            let wv = t.constant(w.clone());
            let s1 = t.sse(u, wv).unwrap();
            let s2 = t.sse(v, wv).unwrap();
            let l = t.add(s1, s2).unwrap();
            t.value(l).data()[0]
        };
        let mut t = Tape::new();
        let av = t.param(&store, 0);
        let (u, v) = curl_on_tape(&mut t, av, 2.0).unwrap();
        let u = mean_correction_on_tape(&mut t, u).unwrap();
        let wv = t.constant(w.clone());
        let s1 = t.sse(u, wv).unwrap();
        let s2 = t.sse(v, wv).unwrap();
        let l = t.add(s1, s2).unwrap();
        let grad = t.backward(l, &store).unwrap().remove(0);
        for k in 0..n * n {
            let mut p = store.get(0).clone();
            p.data_mut()[k] += 1e-6;
            let up = loss(&p);
            p.data_mut()[k] -= 2e-6;
            let down = loss(&p);
            let fd = (up - down) / 2e-6;
            assert!((fd - grad.data()[k]).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }
}
