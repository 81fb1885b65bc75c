//! Two-dimensional FFTs over row-major fields.

use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::Field;

pub struct Fft2 {
    rows: usize,
    cols: usize,
    fwd_r: Arc<dyn Fft<f64>>,
    inv_r: Arc<dyn Fft<f64>>,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.rows, self.cols)
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            rows,
            cols,
            fwd_r: planner.plan_fft_forward(cols),
            inv_r: planner.plan_fft_inverse(cols),
            fwd_c: planner.plan_fft_forward(rows),
            inv_c: planner.plan_fft_inverse(rows),
        }
    }

    fn transpose(&self, buf: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); buf.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = buf[r * cols + c];
            }
        }
        out
    }

    fn run(&self, buf: &mut Vec<Complex64>, inverse: bool) {
        let (row_fft, col_fft) = if inverse {
            (&self.inv_r, &self.inv_c)
        } else {
            (&self.fwd_r, &self.fwd_c)
        };
        row_fft.process(buf);
        let mut t = self.transpose(buf, self.rows, self.cols);
        col_fft.process(&mut t);
        *buf = self.transpose(&t, self.cols, self.rows);
    }

    /// Unnormalised forward transform; entry `ky * cols + kx`.
    pub fn forward(&self, f: &Field) -> Vec<Complex64> {
        assert_eq!(f.shape(), (self.rows, self.cols), "fft shape");
        let mut buf: Vec<Complex64> = f.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }

    /// Inverse transform scaled by `1/N`, keeping the real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Field {
        self.run(&mut spec, true);
        let s = 1.0 / (self.rows * self.cols) as f64;
        let data = spec.iter().map(|z| z.re * s).collect();
        Field::from_vec(self.rows, self.cols, data).expect("fft buffer length")
    }
}

/// Real-input transform keeping the `kx ≤ nx/2` half of the spectrum, laid
/// out column-major (`kx * rows + ky`).
pub struct HalfFft2 {
    rows: usize,
    cols: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HalfFft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HalfFft2({}x{})", self.rows, self.cols)
    }
}

impl HalfFft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut real = RealFftPlanner::<f64>::new();
        let mut planner = FftPlanner::new();
        HalfFft2 {
            rows,
            cols,
            r2c: real.plan_fft_forward(cols),
            c2r: real.plan_fft_inverse(cols),
            fwd_c: planner.plan_fft_forward(rows),
            inv_c: planner.plan_fft_inverse(rows),
        }
    }

    pub fn half_cols(&self) -> usize {
        self.cols / 2 + 1
    }

    pub fn forward(&self, data: &[f64]) -> Vec<Complex64> {
        let (rows, cols, hc) = (self.rows, self.cols, self.half_cols());
        assert_eq!(data.len(), rows * cols, "fft length");
        let mut line = vec![0.0; cols];
        let mut spec_row = vec![Complex64::new(0.0, 0.0); hc];
        let mut out = vec![Complex64::new(0.0, 0.0); hc * rows];
        for r in 0..rows {
            line.copy_from_slice(&data[r * cols..(r + 1) * cols]);
            self.r2c.process(&mut line, &mut spec_row).expect("r2c lengths");
            for (kx, z) in spec_row.iter().enumerate() {
                out[kx * rows + r] = *z;
            }
        }
        self.fwd_c.process(&mut out);
        out
    }

    /// Inverse of [`HalfFft2::forward`], scaled by `1/N`.
    pub fn inverse(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        let (rows, cols, hc) = (self.rows, self.cols, self.half_cols());
        self.inv_c.process(&mut spec);
        let s = 1.0 / (rows * cols) as f64;
        let mut spec_row = vec![Complex64::new(0.0, 0.0); hc];
        let mut line = vec![0.0; cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for (kx, z) in spec_row.iter_mut().enumerate() {
                *z = spec[kx * rows + r];
            }
            // these bins are real for real data; drop round-off
            spec_row[0].im = 0.0;
            if cols % 2 == 0 {
                spec_row[hc - 1].im = 0.0;
            }
            self.c2r.process(&mut spec_row, &mut line).expect("c2r lengths");
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(&line) {
                *o = x * s;
            }
        }
        out
    }
}

/// Signed wavenumber of index `i` on an `n`-point axis.
pub fn signed_k(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn matches_direct_dft() {
        let (rows, cols) = (4, 6);
        let f = Field::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) % 5) as f64 - 1.3);
        let got = Fft2::new(rows, cols).forward(&f);
        for ky in 0..rows {
            for kx in 0..cols {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..rows {
                    for c in 0..cols {
                        let ph = -2.0 * PI * (ky * r) as f64 / rows as f64 - 2.0 * PI * (kx * c) as f64 / cols as f64;
                        acc += f[(r, c)] * Complex64::new(ph.cos(), ph.sin());
                    }
                }
                assert!((acc - got[ky * cols + kx]).norm() < 1e-12);
            }
        }
        let back = Fft2::new(rows, cols).inverse_real(got);
        assert!(back.max_abs_diff(&f) < 1e-14);
    }

    #[test]
    fn half_spectrum_matches_full() {
        let (rows, cols) = (6, 8);
        let f = Field::from_fn(rows, cols, |r, c| ((r * 5 + c * 3) % 7) as f64 - 2.1);
        let full = Fft2::new(rows, cols).forward(&f);
        let half = HalfFft2::new(rows, cols);
        let h = half.forward(f.data());
        for ky in 0..rows {
            for kx in 0..half.half_cols() {
                assert!((h[kx * rows + ky] - full[ky * cols + kx]).norm() < 1e-12);
            }
        }
        let back = half.inverse(h);
        assert!(back.iter().zip(f.data()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn signed_wavenumbers() {
        let ks: Vec<i64> = (0..6).map(|i| signed_k(i, 6)).collect();
        assert_eq!(ks, vec![0, 1, 2, 3, -2, -1]);
    }
}
