use cgrid_core::grid::{Boundary, GridSpec};
use cgrid_core::metrics::radial_spectrum;
use cgrid_core::solvers::ic::{ins_ic_filtered_noise, max_side, swe_rects, SweIcKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn square_side_is_uniform() {
    let n = 32;
    let grid = GridSpec::square(n, 1.0, Boundary::Closed).unwrap();
    let hi = max_side(n);
    let mut counts = vec![0usize; hi + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    for _ in 0..draws {
        let r = swe_rects(&mut rng, SweIcKind::Square, &grid).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].height, r[0].width);
        assert!(r[0].row + r[0].height <= n && r[0].col + r[0].width <= n);
        counts[r[0].height] += 1;
    }
    assert_eq!(counts[0] + counts[1], 0);
    let support = &counts[2..];
    let expected = draws as f64 / support.len() as f64;
    let chi2: f64 = support.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = (support.len() - 1) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2:.2} with {dof} dof, p = {p:.4}");
}

#[test]
fn filtered_noise_peaks_at_requested_wavenumber() {
    let n = 64;
    let grid = GridSpec::square(n, 1.0, Boundary::Periodic).unwrap();
    for peak in [4, 8, 10] {
        let mut total = vec![0.0; n];
        for seed in 0..20 {
            let s = ins_ic_filtered_noise(&mut ChaCha8Rng::seed_from_u64(seed), peak, &grid).unwrap();
            for sp in [radial_spectrum(&s.u), radial_spectrum(&s.v)] {
                for (k, p) in sp.bins() {
                    total[k] += p;
                }
            }
        }
        let argmax = (0..n).max_by(|&a, &b| total[a].total_cmp(&total[b])).unwrap();
        assert!(argmax.abs_diff(peak) <= 1, "peak {peak}: maximum in bin {argmax}");
    }
}
