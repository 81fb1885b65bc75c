use cgrid_core::constraints::mass_correction;
use cgrid_core::grid::Location;
use cgrid_core::grid::{curl_of_potential, divergence, face_average_coarsen, Boundary, Field, GridSpec, InsState};
use cgrid_core::io::{FieldDesc, FieldStack};
use cgrid_core::symmetry::{act_on_cell_field, act_on_staggered_vector, act_on_vertex_potential, Group, GroupElement};
use cgrid_core::tensor::{conv2d, PadMode, PaddingSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field(rows: usize, cols: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_vec(rows, cols, Tensor::randn(&[rows * cols], 1.0, &mut rng).into_data()).unwrap()
}

fn element() -> impl Strategy<Value = GroupElement> {
    (0u8..4, any::<bool>()).prop_map(|(r, f)| GroupElement::new(r, f))
}

fn shift(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let mut out = vec![0.0; x.data().len()];
    for p in 0..s[0] * s[1] {
        for r in 0..h {
            for c in 0..w {
                out[p * h * w + ((r + dy) % h) * w + (c + dx) % w] = x.data()[p * h * w + r * w + c];
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn magnitudes(fields: &[&Field]) -> Vec<f64> {
    let mut m: Vec<f64> = fields.iter().flat_map(|f| f.data().iter().map(|x| x.abs())).collect();
    m.sort_by(f64::total_cmp);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn circular_conv_commutes_with_shifts(
        seed in 0u64..1000, h in 3usize..8, w in 3usize..8, kh in 1usize..4, kw in 1usize..4,
        dy in 0usize..8, dx in 0usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 2, h, w], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, kh, kw], 1.0, &mut rng);
        let pad = PaddingSpec::new(PadMode::Circular, kh / 2, (kh - 1) - kh / 2, kw / 2, (kw - 1) - kw / 2);
        let a = conv2d(&shift(&x, dy, dx), &k, &pad).unwrap();
        let b = shift(&conv2d(&x, &k, &pad).unwrap(), dy, dx);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn curl_is_divergence_free(seed in 0u64..1000, n in 2usize..20, dx in 0.01f64..3.0) {
        let grid = GridSpec::square(n, dx, Boundary::Periodic).unwrap();
        let (u, v) = curl_of_potential(&field(n, n, seed), &grid).unwrap();
        prop_assert!(divergence(&u, &v, &grid).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn coarsening_keeps_mean_flow(seed in 0u64..1000, n in 2usize..6, factor in 1usize..4) {
        let fine = n * factor;
        let grid = GridSpec::square(fine, 0.5, Boundary::Periodic).unwrap();
        let (u, v) = curl_of_potential(&field(fine, fine, seed), &grid).unwrap();
        let u = u.map(|x| x + 0.3);
        let s = InsState { u, v };
        let (c, cg) = face_average_coarsen(&s, &grid, factor).unwrap();
        prop_assert!((c.u.mean() - s.u.mean()).abs() <= 1e-13);
        prop_assert!((c.v.mean() - s.v.mean()).abs() <= 1e-13);
        prop_assert!(divergence(&c.u, &c.v, &cg).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn actions_preserve_norms(g in element(), seed in 0u64..1000, n in 2usize..9, periodic in any::<bool>()) {
        let bc = if periodic { Boundary::Periodic } else { Boundary::Closed };
        let grid = GridSpec::square(n, 1.0, bc).unwrap();
        let c = field(n, n, seed);
        // signed permutations: the multiset of magnitudes is unchanged
        prop_assert_eq!(magnitudes(&[&act_on_cell_field(g, &c, &grid).unwrap()]), magnitudes(&[&c]));
        let (ur, uc) = grid.shape(Location::FaceX);
        let (vr, vc) = grid.shape(Location::FaceY);
        let (u, v) = (field(ur, uc, seed + 1), field(vr, vc, seed + 2));
        let (gu, gv) = act_on_staggered_vector(g, &u, &v, &grid).unwrap();
        prop_assert_eq!(magnitudes(&[&gu, &gv]), magnitudes(&[&u, &v]));
    }

    #[test]
    fn actions_compose(a in element(), b in element(), seed in 0u64..1000, n in 2usize..9, periodic in any::<bool>()) {
        let bc = if periodic { Boundary::Periodic } else { Boundary::Closed };
        let grid = GridSpec::square(n, 1.0, bc).unwrap();
        let ab = a.compose(b);
        let c = field(n, n, seed);
        let two = act_on_cell_field(a, &act_on_cell_field(b, &c, &grid).unwrap(), &grid).unwrap();
        prop_assert_eq!(act_on_cell_field(ab, &c, &grid).unwrap(), two);
        let (ur, uc) = grid.shape(Location::FaceX);
        let (vr, vc) = grid.shape(Location::FaceY);
        let (u, v) = (field(ur, uc, seed + 1), field(vr, vc, seed + 2));
        let (bu, bv) = act_on_staggered_vector(b, &u, &v, &grid).unwrap();
        let two = act_on_staggered_vector(a, &bu, &bv, &grid).unwrap();
        prop_assert_eq!(act_on_staggered_vector(ab, &u, &v, &grid).unwrap(), two);
        if periodic {
            let p = field(n, n, seed + 3);
            let two = act_on_vertex_potential(a, &act_on_vertex_potential(b, &p, &grid).unwrap(), &grid).unwrap();
            prop_assert_eq!(act_on_vertex_potential(ab, &p, &grid).unwrap(), two);
        }
    }

    #[test]
    fn actions_keep_flow_divergence_free(g in element(), seed in 0u64..1000, n in 2usize..12) {
        let grid = GridSpec::square(n, 0.7, Boundary::Periodic).unwrap();
        let (u, v) = curl_of_potential(&field(n, n, seed), &grid).unwrap();
        let (gu, gv) = act_on_staggered_vector(g, &u, &v, &grid).unwrap();
        prop_assert!(divergence(&gu, &gv, &grid).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn mass_correction_is_an_idempotent_projection(seed in 0u64..1000, r in 1usize..10, c in 1usize..10, offset in -5.0f64..5.0) {
        let f = field(r, c, seed).map(|x| x + offset);
        let once = mass_correction(&f);
        prop_assert!(once.mean().abs() <= 1e-12 * (1.0 + offset.abs()));
        let twice = mass_correction(&once);
        prop_assert!(twice.max_abs_diff(&once) <= 1e-14 * (1.0 + offset.abs()));
    }

    #[test]
    fn field_stacks_round_trip(seed in 0u64..1000, frames in 0usize..4, n in 2usize..6) {
        let descs = vec![
            FieldDesc { name: "zeta".into(), kind: Location::Cell, rows: n, cols: n },
            FieldDesc { name: "u".into(), kind: Location::FaceX, rows: n, cols: n - 1 },
        ];
        let mut stack = FieldStack::new(descs);
        for k in 0..frames as u64 {
            stack.push(vec![field(n, n, seed + 2 * k), field(n, n - 1, seed + 2 * k + 1)]).unwrap();
        }
        let bytes = stack.to_bytes();
        let back = FieldStack::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, stack);
    }
}

#[test]
fn every_group_is_closed_under_composition() {
    for group in [Group::P1, Group::P4, Group::P4m] {
        let els = group.elements();
        for &a in &els {
            for &b in &els {
                assert!(group.contains(a.compose(b)));
            }
            assert!(a.compose(a.inverse()).is_identity());
        }
    }
}
