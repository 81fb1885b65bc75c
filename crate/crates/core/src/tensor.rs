//! Dense row-major `f64` arrays and the convolution kernels that back every
//! layer in the crate.
//!
//! Convolutions are cross-correlations (no kernel flip). Inputs are
//! `[batch, channels, rows, cols]`; a 3-d input is treated as a batch of one.
//! A kernel axis of even length `2m` with no extra offset makes output sample
//! `i` consume padded inputs `i..i + 2m`, which is what places face-to-center
//! and center-to-vertex stencils on the right side of the staggering.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// View a 3-d `[c, h, w]` or 4-d `[b, c, h, w]` tensor as 4-d.
    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok([1, c, h, w]),
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected a 3-d or 4-d tensor, got {:?}", self.shape),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Circular,
    Zero,
    None,
}

/// Per-side padding amounts; amounts may be asymmetric for even kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaddingSpec {
    pub mode: PadMode,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PaddingSpec {
    pub const NONE: PaddingSpec = PaddingSpec {
        mode: PadMode::None,
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn new(mode: PadMode, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        PaddingSpec {
            mode,
            top,
            bottom,
            left,
            right,
        }
    }

    /// Symmetric padding of `(k - 1) / 2` on each side for odd kernels.
    pub fn same(mode: PadMode, kh: usize, kw: usize) -> Self {
        PaddingSpec::new(mode, (kh - 1) / 2, (kh - 1) / 2, (kw - 1) / 2, (kw - 1) / 2)
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        let any = self.top + self.bottom + self.left + self.right > 0;
        match self.mode {
            PadMode::None if any => Err(Error::Padding("mode `none` with non-zero amounts".to_string())),
            PadMode::Circular if (self.top + self.bottom > 0 && h == 0) => {
                Err(Error::Padding("circular padding of a zero-length row axis".to_string()))
            }
            PadMode::Circular if (self.left + self.right > 0 && w == 0) => Err(Error::Padding(
                "circular padding of a zero-length column axis".to_string(),
            )),
            _ => Ok(()),
        }
    }
}

/// Source index for every padded position along one axis (`None` = zero).
fn pad_map(len: usize, lead: usize, trail: usize, mode: PadMode) -> Vec<Option<usize>> {
    (0..len + lead + trail)
        .map(|p| {
            let src = p as isize - lead as isize;
            if src >= 0 && (src as usize) < len {
                Some(src as usize)
            } else if mode == PadMode::Circular {
                Some(src.rem_euclid(len as isize) as usize)
            } else {
                None
            }
        })
        .collect()
}

pub(crate) struct ConvGeometry {
    pub b: usize,
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub hp: usize,
    pub wp: usize,
    pub ho: usize,
    pub wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    h: usize,
    w: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, pad: &PaddingSpec) -> Result<Self> {
        let [b, ci, h, wd] = x.dims4("conv2d")?;
        let (co, wci, kh, kw) = match *w.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("filters must be 4-d, got {:?}", w.shape()),
                ))
            }
        };
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input-channel axis: input has {ci}, filters expect {wci}"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "kernel axes must be at least 1"));
        }
        pad.validate(h, wd)?;
        let hp = h + pad.top + pad.bottom;
        let wp = wd + pad.left + pad.right;
        if hp < kh {
            return Err(Error::shape(
                "conv2d",
                format!("row axis: padded length {hp} is shorter than kernel {kh}"),
            ));
        }
        if wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("column axis: padded length {wp} is shorter than kernel {kw}"),
            ));
        }
        Ok(ConvGeometry {
            b,
            ci,
            co,
            kh,
            kw,
            hp,
            wp,
            ho: hp - kh + 1,
            wo: wp - kw + 1,
            rows: pad_map(h, pad.top, pad.bottom, pad.mode),
            cols: pad_map(wd, pad.left, pad.right, pad.mode),
            h,
            w: wd,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.b, self.co, self.ho, self.wo]
        } else {
            vec![self.co, self.ho, self.wo]
        }
    }

    /// Padded copy of sample `bi` as `[ci, hp, wp]`.
    fn pad_sample(&self, x: &[f64], bi: usize, out: &mut [f64]) {
        let plane = self.h * self.w;
        for c in 0..self.ci {
            let src = &x[(bi * self.ci + c) * plane..(bi * self.ci + c + 1) * plane];
            let dst = &mut out[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
            for (pr, r) in self.rows.iter().enumerate() {
                let drow = &mut dst[pr * self.wp..(pr + 1) * self.wp];
                match r {
                    Some(r) => {
                        let srow = &src[r * self.w..(r + 1) * self.w];
                        for (d, cidx) in drow.iter_mut().zip(&self.cols) {
                            *d = cidx.map_or(0.0, |cc| srow[cc]);
                        }
                    }
                    None => drow.iter_mut().for_each(|d| *d = 0.0),
                }
            }
        }
    }

    /// Scatter-add a padded gradient `[ci, hp, wp]` back onto sample `bi`.
    fn unpad_add(&self, padded: &[f64], bi: usize, dx: &mut [f64]) {
        let plane = self.h * self.w;
        for c in 0..self.ci {
            let src = &padded[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
            let dst = &mut dx[(bi * self.ci + c) * plane..(bi * self.ci + c + 1) * plane];
            for (pr, r) in self.rows.iter().enumerate() {
                let Some(r) = r else { continue };
                let srow = &src[pr * self.wp..(pr + 1) * self.wp];
                for (pc, cidx) in self.cols.iter().enumerate() {
                    if let Some(cc) = cidx {
                        dst[r * self.w + cc] += srow[pc];
                    }
                }
            }
        }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, padded: &[f64], cols: &mut [f64]) {
        let n = self.n();
        for c in 0..self.ci {
            let src = &padded[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let s = (oy + ki) * self.wp + kj;
                        dst[oy * self.wo..(oy + 1) * self.wo].copy_from_slice(&src[s..s + self.wo]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], padded: &mut [f64]) {
        padded.iter_mut().for_each(|v| *v = 0.0);
        let n = self.n();
        for c in 0..self.ci {
            let dst = &mut padded[c * self.hp * self.wp..(c + 1) * self.hp * self.wp];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.ho {
                        let s = (oy + ki) * self.wp + kj;
                        for (d, v) in dst[s..s + self.wo]
                            .iter_mut()
                            .zip(&src[oy * self.wo..(oy + 1) * self.wo])
                        {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides and
    // dimensions, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `x` with `w`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: &PaddingSpec) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, pad)?;
    let (k, n) = (g.k(), g.n());
    let mut out = vec![0.0; g.b * g.co * n];
    let mut padded = vec![0.0; g.ci * g.hp * g.wp];
    let mut cols = vec![0.0; k * n];
    for bi in 0..g.b {
        g.pad_sample(x.data(), bi, &mut padded);
        g.im2col(&padded, &mut cols);
        let dst = &mut out[bi * g.co * n..(bi + 1) * g.co * n];
        gemm(g.co, k, n, w.data(), (k as isize, 1), &cols, (n as isize, 1), 0.0, dst);
    }
    Tensor::new(g.out_shape(x.shape().len() == 4), out)
}

/// Gradients of `conv2d` with respect to its input and filters.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: &PaddingSpec,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(x, w, pad)?;
    let (k, n) = (g.k(), g.n());
    let mut dw = if need_dw { Some(vec![0.0; g.co * k]) } else { None };
    let mut dx = if need_dx { Some(vec![0.0; x.len()]) } else { None };
    let mut padded = vec![0.0; g.ci * g.hp * g.wp];
    let mut cols = vec![0.0; k * n];
    for bi in 0..g.b {
        let dyb = &dy.data()[bi * g.co * n..(bi + 1) * g.co * n];
        if let Some(dw) = dw.as_mut() {
            g.pad_sample(x.data(), bi, &mut padded);
            g.im2col(&padded, &mut cols);
            // dw[co×k] += dy[co×n] · colsᵀ[n×k]
            gemm(g.co, n, k, dyb, (n as isize, 1), &cols, (1, n as isize), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[k×n] = wᵀ[k×co] · dy[co×n]
            gemm(
                k,
                g.co,
                n,
                w.data(),
                (1, k as isize),
                dyb,
                (n as isize, 1),
                0.0,
                &mut cols,
            );
            g.col2im(&cols, &mut padded);
            g.unpad_add(&padded, bi, dx);
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?;
    Ok((dx, dw))
}

/// Pad a `[.., h, w]` tensor's trailing two axes.
pub fn pad2d(x: &Tensor, pad: &PaddingSpec) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("pad2d")?;
    pad.validate(h, w)?;
    let rows = pad_map(h, pad.top, pad.bottom, pad.mode);
    let cols = pad_map(w, pad.left, pad.right, pad.mode);
    let (hp, wp) = (rows.len(), cols.len());
    let mut out = vec![0.0; b * c * hp * wp];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        for (pr, r) in rows.iter().enumerate() {
            for (pc, cc) in cols.iter().enumerate() {
                if let (Some(r), Some(cc)) = (r, cc) {
                    dst[pr * wp + pc] = src[r * w + cc];
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = hp;
    shape[nd - 1] = wp;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, pad: &PaddingSpec) -> Tensor {
        let [b, ci, h, wd] = x.dims4("t").unwrap();
        let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let ho = h + pad.top + pad.bottom - kh + 1;
        let wo = wd + pad.left + pad.right - kw + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let r = oy as isize + ki as isize - pad.top as isize;
                                    let q = ox as isize + kj as isize - pad.left as isize;
                                    let v = match pad.mode {
                                        PadMode::Circular => {
                                            let r = r.rem_euclid(h as isize) as usize;
                                            let q = q.rem_euclid(wd as isize) as usize;
                                            x.data()[((bi * ci + c) * h + r) * wd + q]
                                        }
                                        _ => {
                                            if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                                0.0
                                            } else {
                                                x.data()[((bi * ci + c) * h + r as usize) * wd + q as usize]
                                            }
                                        }
                                    };
                                    s += w.data()[((o * ci + c) * kh + ki) * kw + kj] * v;
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        Tensor::new(vec![b, co, ho, wo], out).unwrap()
    }

    #[test]
    fn identity_filter_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4, 5], 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, &PaddingSpec::NONE).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn even_kernel_circular_sums_all_four() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let pad = PaddingSpec::new(PadMode::Circular, 0, 1, 0, 1);
        let y = conv2d(&x, &w, &pad).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 10.0));
    }

    #[test]
    fn zero_padded_corner_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let pad = PaddingSpec::same(PadMode::Zero, 3, 3);
        let y = conv2d(&x, &w, &pad).unwrap();
        let want = naive_conv(&x, &w, &pad);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-13);
        }
        // corner output only sees the four in-bounds taps
        let xd = x.data();
        let wd = w.data();
        let corner = wd[4] * xd[0] + wd[5] * xd[1] + wd[7] * xd[5] + wd[8] * xd[6];
        assert!((y.data()[0] - corner).abs() < 1e-13);
    }

    #[test]
    fn matches_oracle_batched_multichannel_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 2], 1.0, &mut rng);
        for mode in [PadMode::Zero, PadMode::Circular] {
            let pad = PaddingSpec::new(mode, 1, 1, 1, 0);
            let y = conv2d(&x, &w, &pad).unwrap();
            let want = naive_conv(&x, &w, &pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &PaddingSpec::NONE).unwrap_err().to_string();
        assert!(err.contains("input-channel"), "{err}");
        let w = Tensor::zeros(&[1, 2, 5, 1]);
        let err = conv2d(&x, &w, &PaddingSpec::NONE).unwrap_err().to_string();
        assert!(err.contains("row axis"), "{err}");
    }

    #[test]
    fn circular_padding_of_empty_axis_is_rejected() {
        let x = Tensor::zeros(&[1, 0, 3]);
        let w = Tensor::zeros(&[1, 1, 1, 1]);
        let pad = PaddingSpec::new(PadMode::Circular, 1, 1, 0, 0);
        assert!(matches!(conv2d(&x, &w, &pad), Err(Error::Padding(_))));
    }

    #[test]
    fn circular_conv_commutes_with_cyclic_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (6, 7);
        let x = Tensor::randn(&[1, h, w], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let pad = PaddingSpec::same(PadMode::Circular, 3, 3);
        let shift = |t: &Tensor, dr: usize, dc: usize| {
            let mut out = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    out[((r + dr) % h) * w + (c + dc) % w] = t.data()[r * w + c];
                }
            }
            Tensor::new(vec![1, h, w], out).unwrap()
        };
        let a = conv2d(&shift(&x, 2, 3), &k, &pad).unwrap();
        let b = shift(&conv2d(&x, &k, &pad).unwrap(), 2, 3);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pad2d_wraps_and_zeros() {
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let p = pad2d(&x, &PaddingSpec::new(PadMode::Circular, 0, 0, 1, 2)).unwrap();
        assert_eq!(p.data(), &[2.0, 1.0, 2.0, 1.0, 2.0]);
        let p = pad2d(&x, &PaddingSpec::new(PadMode::Zero, 1, 0, 0, 1)).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
    }
}
