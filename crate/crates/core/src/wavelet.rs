//! Single-level orthonormal 2-D Haar transform on `[N, C, H, W]` feature maps.
//!
//! For every 2x2 block `[a b; c d]`:
//!
//! ```text
//! LL = ( a + b + c + d) / 2
//! HL = (-a + b - c + d) / 2   detail across width
//! LH = (-a - b + c + d) / 2   detail across height
//! HH = ( a - b - c + d) / 2   diagonal detail
//! ```
//!
//! The 4x4 matrix is symmetric and orthogonal, so the inverse applies the
//! same butterfly and energy is preserved exactly.
//!
//! Internally the four subbands travel as one "stacked" tensor
//! `[N, 4C, H/2, W/2]` in LL, HL, LH, HH channel order, which makes the high
//! bands a contiguous channel range (the [`HBundle`] layout).

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// One decomposition level: four equally shaped subbands.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
    /// Pyramid stage this set came from (0 = first DWT of the features).
    pub level: usize,
}

/// HL, LH and HH stacked along channels, in that order: `[N, 3C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HBundle<T>(pub Tensor<T>);

/// Spatial size recorded by [`pad_to_even`] for the matching [`crop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginalSize {
    pub height: usize,
    pub width: usize,
}

fn even_dims<T: Scalar>(f: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    let [n, c, h, w] = f.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Divisibility {
            op,
            height: h,
            width: w,
            multiple: 2,
        });
    }
    Ok([n, c, h, w])
}

/// Forward transform into the stacked `[N, 4C, H/2, W/2]` layout.
pub fn dwt2_stacked<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = even_dims(f, "dwt2")?;
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let half = T::from_f64(0.5);
    let x = f.data();
    let mut out = vec![T::zero(); n * 4 * c * q];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let band = |b: usize| ((ni * 4 + b) * c + ci) * q;
            let (ll, hl, lh, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..h2 {
                let top = &src[2 * i * w..(2 * i + 1) * w];
                let bot = &src[(2 * i + 1) * w..(2 * i + 2) * w];
                for j in 0..w2 {
                    let (a, b) = (top[2 * j], top[2 * j + 1]);
                    let (cc, d) = (bot[2 * j], bot[2 * j + 1]);
                    let o = i * w2 + j;
                    out[ll + o] = (a + b + cc + d) * half;
                    out[hl + o] = (b - a + d - cc) * half;
                    out[lh + o] = (cc + d - a - b) * half;
                    out[hh + o] = (a - b - cc + d) * half;
                }
            }
        }
    }
    Tensor::new([n, 4 * c, h2, w2], out)
}

/// Inverse of [`dwt2_stacked`].
pub fn idwt2_stacked<T: Scalar>(bands: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c4, h2, w2] = bands.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!(
            "idwt2: stacked subbands need a multiple of 4 channels, got {c4}"
        )));
    }
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let q = h2 * w2;
    let half = T::from_f64(0.5);
    let x = bands.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let band = |b: usize| &x[((ni * 4 + b) * c + ci) * q..((ni * 4 + b) * c + ci + 1) * q];
            let (ll, hl, lh, hh) = (band(0), band(1), band(2), band(3));
            let dst = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = i * w2 + j;
                    let (s, dh, dv, dd) = (ll[o], hl[o], lh[o], hh[o]);
                    dst[2 * i * w + 2 * j] = (s - dh - dv + dd) * half;
                    dst[2 * i * w + 2 * j + 1] = (s + dh - dv - dd) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (s - dh + dv - dd) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (s + dh + dv + dd) * half;
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// One-level DWT of `[N, C, H, W]` features (H and W must be even).
pub fn dwt2<T: Scalar>(f: &Tensor<T>) -> Result<SubbandSet<T>> {
    let c = f.dims4()?[1];
    let stacked = dwt2_stacked(f)?;
    Ok(SubbandSet {
        ll: ops::slice_channels(&stacked, 0, c)?,
        hl: ops::slice_channels(&stacked, c, c)?,
        lh: ops::slice_channels(&stacked, 2 * c, c)?,
        hh: ops::slice_channels(&stacked, 3 * c, c)?,
        level: 0,
    })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2<T: Scalar>(bands: &SubbandSet<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape();
    for (name, t) in [("hl", &bands.hl), ("lh", &bands.lh), ("hh", &bands.hh)] {
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "idwt2: subband {name} has shape {:?}, ll has {shape:?}",
                t.shape()
            )));
        }
    }
    let stacked = ops::concat_channels(&[&bands.ll, &bands.hl, &bands.lh, &bands.hh])?;
    idwt2_stacked(&stacked)
}

impl<T: Scalar> SubbandSet<T> {
    pub fn with_level(mut self, level: usize) -> Self {
        self.level = level;
        self
    }

    /// Sum of squared coefficients over all four subbands.
    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.hl.energy() + self.lh.energy() + self.hh.energy()
    }
}

/// Stacks HL, LH, HH along channels.
pub fn bundle_h<T: Scalar>(bands: &SubbandSet<T>) -> Result<HBundle<T>> {
    Ok(HBundle(ops::concat_channels(&[
        &bands.hl, &bands.lh, &bands.hh,
    ])?))
}

/// Splits an [`HBundle`] of `3C` channels back into `(HL, LH, HH)`.
pub fn unbundle_h<T: Scalar>(
    bundle: &HBundle<T>,
    channels: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let total = bundle.0.dims4()?[1];
    if total % 3 != 0 || total != 3 * channels {
        return Err(Error::shape(format!(
            "unbundle_h: {total} channels cannot be split into three blocks of {channels}"
        )));
    }
    Ok((
        ops::slice_channels(&bundle.0, 0, channels)?,
        ops::slice_channels(&bundle.0, channels, channels)?,
        ops::slice_channels(&bundle.0, 2 * channels, channels)?,
    ))
}

/// Reflection index for a coordinate that may run past the end of `[0, n)`.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the bottom and right edges of the last two axes so both
/// become multiples of `2^levels`.
pub fn pad_to_even<T: Scalar>(f: &Tensor<T>, levels: u32) -> Result<(Tensor<T>, OriginalSize)> {
    let nd = f.ndim();
    if nd < 2 {
        return Err(Error::shape("pad_to_even: tensor needs at least two axes"));
    }
    if levels < 1 {
        return Err(Error::Config(
            "pad_to_even: levels must be at least 1".into(),
        ));
    }
    let (h, w) = (f.shape()[nd - 2], f.shape()[nd - 1]);
    let original = OriginalSize {
        height: h,
        width: w,
    };
    let m = 1usize << levels;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((f.clone(), original));
    }
    let planes = f.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let src = &f.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let row = &src[reflect(y, h) * w..(reflect(y, h) + 1) * w];
            out.extend_from_slice(row);
            out.extend((w..pw).map(|x| row[reflect(x, w)]));
        }
    }
    let mut shape = f.shape().to_vec();
    shape[nd - 2] = ph;
    shape[nd - 1] = pw;
    Ok((Tensor::new(shape, out)?, original))
}

/// Keeps the top-left `size` region of the last two axes.
pub fn crop<T: Scalar>(f: &Tensor<T>, size: OriginalSize) -> Result<Tensor<T>> {
    let nd = f.ndim();
    if nd < 2 {
        return Err(Error::shape("crop: tensor needs at least two axes"));
    }
    let (h, w) = (f.shape()[nd - 2], f.shape()[nd - 1]);
    if size.height > h || size.width > w {
        return Err(Error::shape(format!(
            "crop: {}x{} is larger than {h}x{w}",
            size.height, size.width
        )));
    }
    if (size.height, size.width) == (h, w) {
        return Ok(f.clone());
    }
    let planes = f.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * size.height * size.width);
    for p in 0..planes {
        for y in 0..size.height {
            let start = p * h * w + y * w;
            out.extend_from_slice(&f.data()[start..start + size.width]);
        }
    }
    let mut shape = f.shape().to_vec();
    shape[nd - 2] = size.height;
    shape[nd - 1] = size.width;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn constant_has_no_detail() {
        let v = 0.3f64;
        let b = dwt2(&Tensor::full([1, 2, 4, 6], v)).unwrap();
        assert!(b.ll.data().iter().all(|&x| (x - 2.0 * v).abs() < 1e-15));
        for t in [&b.hl, &b.lh, &b.hh] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
        let back = idwt2(&b).unwrap();
        assert!(back.data().iter().all(|&x| (x - v).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_block() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = dwt2(&x).unwrap();
        assert_eq!(b.ll.data(), &[5.0]);
        assert_eq!(b.hl.data(), &[1.0]);
        assert_eq!(b.lh.data(), &[2.0]);
        assert_eq!(b.hh.data(), &[0.0]);
    }

    #[test]
    fn energy_is_preserved() {
        let x = random::<f64>(&[1, 1, 8, 8], 4);
        let b = dwt2(&x).unwrap();
        assert!(((b.energy() - x.energy()) / x.energy()).abs() < 1e-12);
    }

    #[test]
    fn odd_dims_are_rejected() {
        let err = dwt2(&Tensor::<f32>::zeros([1, 1, 5, 4])).unwrap_err();
        assert!(err.to_string().contains("pad_to_even"));
    }

    #[test]
    fn mismatched_subbands_are_rejected() {
        let b = SubbandSet {
            ll: Tensor::<f32>::zeros([1, 1, 2, 2]),
            hl: Tensor::zeros([1, 1, 2, 2]),
            lh: Tensor::zeros([1, 1, 2, 3]),
            hh: Tensor::zeros([1, 1, 2, 2]),
            level: 0,
        };
        assert!(matches!(idwt2(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn low_frequency_sine_lands_in_ll() {
        let (h, w) = (32usize, 32usize);
        let x = Tensor::<f64>::from_fn([1, 1, h, w], |i| {
            (2.0 * std::f64::consts::PI * (i % w) as f64 / w as f64).sin()
        });
        let b = dwt2(&x).unwrap();
        assert!(b.ll.energy() / b.energy() >= 0.95);
    }

    #[test]
    fn checkerboard_lands_in_hh() {
        let (h, w) = (16usize, 16usize);
        let x = Tensor::<f64>::from_fn([1, 1, h, w], |i| {
            if (i / w + i % w) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let b = dwt2(&x).unwrap();
        assert!(b.hh.energy() / b.energy() >= 0.99);
    }

    #[test]
    fn bundle_layout() {
        let x = random::<f32>(&[1, 32, 8, 8], 9);
        let b = dwt2(&x).unwrap();
        let bundle = bundle_h(&b).unwrap();
        assert_eq!(bundle.0.shape(), &[1, 96, 4, 4]);
        assert_eq!(
            ops::slice_channels(&bundle.0, 0, 1).unwrap(),
            ops::slice_channels(&b.hl, 0, 1).unwrap()
        );
        let (hl, lh, hh) = unbundle_h(&bundle, 32).unwrap();
        assert_eq!((hl, lh, hh), (b.hl.clone(), b.lh.clone(), b.hh.clone()));
        let odd = HBundle(Tensor::<f32>::zeros([1, 7, 2, 2]));
        assert!(unbundle_h(&odd, 2).is_err());
    }

    #[test]
    fn padding_rounds_up_to_multiple() {
        let x = random::<f32>(&[1, 1, 128, 128], 1);
        let (p, _) = pad_to_even(&x, 3).unwrap();
        assert_eq!(p, x);
        let y = random::<f32>(&[1, 1, 127, 121], 2);
        let (p, size) = pad_to_even(&y, 3).unwrap();
        assert_eq!(p.shape(), &[1, 1, 128, 128]);
        // reflected row: row 127 mirrors row 125
        assert_eq!(p.data()[127 * 128], y.data()[125 * 121]);
        assert_eq!(crop(&p, size).unwrap(), y);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn perfect_reconstruction(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h2 in 1usize..6, w2 in 1usize..6) {
            let x32 = random::<f32>(&[n, c, 2 * h2, 2 * w2], seed);
            let back = idwt2(&dwt2(&x32).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x32).unwrap() < 1e-5);
            let x64 = random::<f64>(&[n, c, 2 * h2, 2 * w2], seed);
            let b = dwt2(&x64).unwrap();
            prop_assert!(idwt2(&b).unwrap().max_abs_diff(&x64).unwrap() < 1e-12);
            prop_assert!(((b.energy() - x64.energy()) / x64.energy()).abs() < 1e-10);
        }

        #[test]
        fn inverse_then_forward_is_identity(seed in any::<u64>(), c in 1usize..4, h2 in 1usize..5) {
            let stacked = random::<f64>(&[1, 4 * c, h2, h2 + 1], seed);
            let again = dwt2_stacked(&idwt2_stacked(&stacked).unwrap()).unwrap();
            prop_assert!(again.max_abs_diff(&stacked).unwrap() < 1e-12);
        }

        #[test]
        fn transform_is_linear(seed in any::<u64>(), a in -3.0f32..3.0, bcoef in -3.0f32..3.0) {
            let x = random::<f32>(&[1, 2, 6, 4], seed);
            let y = random::<f32>(&[1, 2, 6, 4], seed ^ 0x55);
            let mix = x.scale(a).add(&y.scale(bcoef)).unwrap();
            let lhs = dwt2_stacked(&mix).unwrap();
            let rhs = dwt2_stacked(&x).unwrap().scale(a).add(&dwt2_stacked(&y).unwrap().scale(bcoef)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
        }

        #[test]
        fn pad_then_crop_round_trips(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, levels in 1u32..4) {
            let x = random::<f32>(&[1, 1, h, w], seed);
            let (p, size) = pad_to_even(&x, levels).unwrap();
            let m = 1usize << levels;
            prop_assert_eq!(p.shape()[2] % m, 0);
            prop_assert_eq!(p.shape()[3] % m, 0);
            prop_assert_eq!(crop(&p, size).unwrap(), x);
        }
    }
}
