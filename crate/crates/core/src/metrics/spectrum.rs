//! Frequency-domain analyses of images under AWGN: band-limited PSNR, radial
//! power spectra and per-subband PSNR.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{plane_dims, psnr_from_mse};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet;

/// 2-D DFT of a real `h x w` plane, row-major.
fn fft2(
    plane: &[f64],
    h: usize,
    w: usize,
    inverse: bool,
    input: Option<Vec<Complex<f64>>>,
) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = input.unwrap_or_else(|| plane.iter().map(|&v| Complex::new(v, 0.0)).collect());
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    if inverse {
        let n = (h * w) as f64;
        buf.iter_mut().for_each(|v| *v /= n);
    }
    buf
}

/// Signed frequency of DFT index `i` out of `n`, in cycles per pixel.
fn freq(i: usize, n: usize) -> f64 {
    let k = if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    k / n as f64
}

fn radius(y: usize, x: usize, h: usize, w: usize) -> f64 {
    freq(y, h).hypot(freq(x, w))
}

fn plane_f64<T: Scalar>(t: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (h, w) = plane_dims(t)?;
    Ok((t.data().iter().map(|v| v.as_f64()).collect(), h, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCurve {
    /// Cutoffs as a fraction of the largest radial frequency in the image.
    pub fractions: Vec<f64>,
    pub psnr: Vec<f64>,
}

impl SpectrumCurve {
    /// True when PSNR never increases as the cutoff grows.
    pub fn is_non_increasing(&self) -> bool {
        self.psnr
            .windows(2)
            .all(|w| w[1] <= w[0] || (w[0].is_infinite() && w[1].is_infinite()))
    }
}

/// PSNR between ideally low-passed copies of `clean` and `noisy`.
///
/// For each fraction `f` both images keep only the DFT coefficients within
/// radius `f · r_max` of DC, where `r_max` is the largest radial frequency
/// on the grid (the corner, `√2 ×` Nyquist for even sizes). So `f = 1` is
/// all-pass and reproduces the plain PSNR.
pub fn lowpass_psnr_curve<T: Scalar>(
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    fractions: &[f64],
) -> Result<SpectrumCurve> {
    clean.expect_same_shape(noisy, "lowpass_psnr_curve")?;
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Input(format!(
            "cutoff fraction {f} is outside (0, 1]"
        )));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input(
            "cutoff fractions must be strictly increasing".into(),
        ));
    }
    let (c, h, w) = plane_f64(clean)?;
    let (n, _, _) = plane_f64(noisy)?;
    // The transform is linear, so filtering the difference is the same as
    // differencing the filtered pair.
    let diff: Vec<f64> = n.iter().zip(&c).map(|(a, b)| a - b).collect();
    let spec = fft2(&diff, h, w, false, None);
    let r_max = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| radius(y, x, h, w))
        .fold(0.0, f64::max);
    let mut psnr = Vec::with_capacity(fractions.len());
    for &f in fractions {
        // Guard against the corner being dropped by rounding at f = 1.
        let cutoff = f * r_max * (1.0 + 1e-12);
        let masked: Vec<Complex<f64>> = spec
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if radius(i / w, i % w, h, w) <= cutoff {
                    v
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
            .collect();
        let back = fft2(&[], h, w, true, Some(masked));
        let mse = back.iter().map(|v| v.re * v.re).sum::<f64>() / (h * w) as f64;
        // Exact zero survives only if the difference was zero to begin with.
        let mse = if diff.iter().all(|&d| d == 0.0) {
            0.0
        } else {
            mse
        };
        psnr.push(psnr_from_mse(mse, 1.0));
    }
    Ok(SpectrumCurve {
        fractions: fractions.to_vec(),
        psnr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    /// Bin centres in cycles per pixel, evenly spaced over `(0, 0.5]`.
    pub freqs: Vec<f64>,
    /// Mean `|DFT|² / (H·W)` per bin; `NaN` for empty bins.
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Radially averaged power spectrum in `n_bins` equal-width rings out to
/// Nyquist. DC and frequencies beyond Nyquist (the corners) are excluded.
pub fn radial_power_spectrum<T: Scalar>(
    image: &Tensor<T>,
    n_bins: usize,
) -> Result<RadialSpectrum> {
    if n_bins < 4 {
        return Err(Error::Input(format!(
            "need at least 4 spectrum bins, got {n_bins}"
        )));
    }
    let (p, h, w) = plane_f64(image)?;
    let spec = fft2(&p, h, w, false, None);
    let width = 0.5 / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (i, v) in spec.iter().enumerate() {
        let r = radius(i / w, i % w, h, w);
        if r == 0.0 || r > 0.5 {
            continue;
        }
        let bin = ((r / width).ceil() as usize).clamp(1, n_bins) - 1;
        sums[bin] += v.norm_sqr() / (h * w) as f64;
        counts[bin] += 1;
    }
    Ok(RadialSpectrum {
        freqs: (0..n_bins).map(|b| (b as f64 + 0.5) * width).collect(),
        power: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        counts,
    })
}

/// Least-squares slope of `log10(power)` against `log10(freq)` over bins with
/// positive power.
pub fn power_law_slope(spectrum: &RadialSpectrum) -> Option<f64> {
    let pts: Vec<(f64, f64)> = spectrum
        .freqs
        .iter()
        .zip(&spectrum.power)
        .filter(|(_, &p)| p > 0.0 && p.is_finite())
        .map(|(&f, &p)| (f.log10(), p.log10()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubbandPsnr {
    pub ll: f64,
    pub hl: f64,
    pub lh: f64,
    pub hh: f64,
}

impl SubbandPsnr {
    pub fn as_array(&self) -> [f64; 4] {
        [self.ll, self.hl, self.lh, self.hh]
    }
}

/// Linearly interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Peak for a subband PSNR: the 1st-to-99th percentile span of the clean
/// subband, or 2 (the full range any unit-image Haar subband can span) when
/// that span is zero. Percentiles rather than min/max keep the peak stable
/// under the extreme values a few noisy coefficients produce.
fn subband_peak(t: &Tensor<f64>) -> f64 {
    let mut v = t.data().to_vec();
    v.sort_by(f64::total_cmp);
    let span = quantile(&v, 0.99) - quantile(&v, 0.01);
    if span > 0.0 {
        span
    } else {
        2.0
    }
}

/// PSNR between `dwt2(clean)` and `dwt2(noisy)` for each subband, with the
/// peak taken from the clean subband's own value range. Measuring each band
/// against its own signal range is what exposes the low band's higher SNR:
/// white noise spreads evenly over an orthonormal transform, while image
/// energy concentrates in LL.
pub fn subband_psnr<T: Scalar>(clean: &Tensor<T>, noisy: &Tensor<T>) -> Result<SubbandPsnr> {
    clean.expect_same_shape(noisy, "subband_psnr")?;
    let (h, w) = plane_dims(clean)?;
    let as4 = |t: &Tensor<T>| t.cast::<f64>().reshape([1, 1, h, w]);
    let c = wavelet::dwt2(&as4(clean)?)?;
    let n = wavelet::dwt2(&as4(noisy)?)?;
    let band = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mse = a.sub(b).map(|d| d.energy()).unwrap_or(0.0) / a.numel() as f64;
        psnr_from_mse(mse, subband_peak(a))
    };
    Ok(SubbandPsnr {
        ll: band(&c.ll, &n.ll),
        hl: band(&c.hl, &n.hl),
        lh: band(&c.lh, &n.lh),
        hh: band(&c.hh, &n.hh),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{add_awgn, load_grayscale, NoiseSpec};
    use crate::metrics::psnr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn natural(name: &str) -> Tensor<f32> {
        let path = format!(
            "{}/../../data/natural/{name}.png",
            env!("CARGO_MANIFEST_DIR")
        );
        load_grayscale(path).unwrap().pixels
    }

    fn white(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([h, w], |_| StandardNormal.sample(&mut rng))
    }

    /// Naive O(n^2) DFT of a real plane.
    fn dft_oracle(p: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += Complex::from_polar(p[y * w + x], ang);
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn fft2_matches_naive_dft_and_inverts() {
        let t = white(6, 10, 1);
        let fast = fft2(t.data(), 6, 10, false, None);
        let slow = dft_oracle(t.data(), 6, 10);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
        let back = fft2(&[], 6, 10, true, Some(fast));
        for (a, b) in back.iter().zip(t.data()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn full_band_equals_plain_psnr() {
        let clean = natural("camera");
        let noisy = add_awgn(
            &clean,
            NoiseSpec {
                sigma: 50.0,
                seed: 1,
            },
        );
        let curve = lowpass_psnr_curve(&clean, &noisy, &[1.0]).unwrap();
        assert!((curve.psnr[0] - psnr(&clean, &noisy).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn natural_image_curve_decreases_with_cutoff() {
        let clean = natural("camera");
        let noisy = add_awgn(
            &clean,
            NoiseSpec {
                sigma: 50.0,
                seed: 2,
            },
        );
        let fr = [0.1, 0.25, 0.5, 0.75, 1.0];
        let curve = lowpass_psnr_curve(&clean, &noisy, &fr).unwrap();
        assert!(curve.is_non_increasing(), "{:?}", curve.psnr);
        assert!(curve.psnr[0] > curve.psnr[4] + 3.0);
    }

    #[test]
    fn noise_free_curve_is_infinite() {
        let clean = natural("coins");
        let curve = lowpass_psnr_curve(&clean, &clean, &[0.1, 0.5, 1.0]).unwrap();
        assert!(curve.psnr.iter().all(|p| p.is_infinite()));
        assert!(curve.is_non_increasing());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let t = Tensor::<f32>::zeros([8, 8]);
        assert!(lowpass_psnr_curve(&t, &t, &[0.0]).is_err());
        assert!(lowpass_psnr_curve(&t, &t, &[1.5]).is_err());
        assert!(lowpass_psnr_curve(&t, &t, &[0.5, 0.25]).is_err());
    }

    #[test]
    fn white_noise_spectrum_is_flat() {
        let s = radial_power_spectrum(&white(256, 256, 3), 8).unwrap();
        let max = s.power.iter().cloned().fold(f64::MIN, f64::max);
        let min = s.power.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 3.0, "{:?}", s.power);
        assert!(power_law_slope(&s).unwrap().abs() < 0.2);
    }

    #[test]
    fn natural_image_spectrum_decays() {
        for name in ["camera", "astronaut"] {
            let s = radial_power_spectrum(&natural(name), 32).unwrap();
            let slope = power_law_slope(&s).unwrap();
            assert!(slope < -1.0, "{name}: slope {slope}");
        }
    }

    #[test]
    fn constant_image_has_no_ac_power() {
        let s = radial_power_spectrum(&Tensor::<f64>::full([64, 64], 0.7), 8).unwrap();
        assert!(s.power.iter().all(|&p| p < 1e-20));
        assert!(radial_power_spectrum(&Tensor::<f64>::zeros([8, 8]), 3).is_err());
    }

    #[test]
    fn radial_bins_cover_the_nyquist_disc() {
        let s = radial_power_spectrum(&white(32, 32, 4), 4).unwrap();
        let inside = (0..32 * 32)
            .filter(|i| {
                let r = radius(i / 32, i % 32, 32, 32);
                r > 0.0 && r <= 0.5
            })
            .count();
        assert_eq!(s.counts.iter().sum::<usize>(), inside);
        assert_eq!(s.freqs, vec![0.0625, 0.1875, 0.3125, 0.4375]);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let freqs: Vec<f64> = (1..=8).map(|i| i as f64 / 16.0).collect();
        let s = RadialSpectrum {
            power: freqs.iter().map(|f| 3.0 * f.powf(-2.0)).collect(),
            counts: vec![1; 8],
            freqs,
        };
        assert!((power_law_slope(&s).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn low_band_is_cleaner_on_natural_images() {
        let clean = natural("camera");
        let noisy = add_awgn(
            &clean,
            NoiseSpec {
                sigma: 50.0,
                seed: 5,
            },
        );
        let s = subband_psnr(&clean, &noisy).unwrap();
        assert!(s.ll - s.hh >= 3.0, "{s:?}");
    }

    #[test]
    fn noise_free_subbands_are_infinite() {
        let clean = natural("astronaut");
        let s = subband_psnr(&clean, &clean).unwrap();
        assert!(s.as_array().iter().all(|p| p.is_infinite()));
    }

    #[test]
    fn white_noise_splits_evenly() {
        // The "clean" signal is the noise itself and the estimate is zero.
        for seed in 0..5 {
            let noise = white(256, 256, seed).map(|v| 0.1 * v);
            let s = subband_psnr(&noise, &Tensor::zeros([256, 256])).unwrap();
            let a = s.as_array();
            let spread = a.iter().cloned().fold(f64::MIN, f64::max)
                - a.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 0.5, "{s:?}");
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 0.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.99) - 3.96).abs() < 1e-12);
        let flat = Tensor::<f64>::full([4, 4], 0.3);
        assert_eq!(subband_peak(&flat), 2.0);
    }
}
