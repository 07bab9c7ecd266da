//! Image quality metrics and evaluation reports.

pub mod spectrum;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use spectrum::{
    lowpass_psnr_curve, power_law_slope, radial_power_spectrum, subband_psnr, RadialSpectrum,
    SpectrumCurve, SubbandPsnr,
};

/// PSNR in dB for unit-range images: `10·log10(1 / MSE)`. Identical inputs
/// give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(psnr_from_mse(mse, 1.0))
}

pub(crate) fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Height and width of a single-channel image stored as `[H, W]`,
/// `[1, H, W]` or `[1, 1, H, W]`.
pub(crate) fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "expected a single-channel image, got {:?}",
            t.shape()
        ))),
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (h, w) = plane_dims(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let mxx = filter_valid(&prod(&x, &x), h, w, &g);
    let myy = filter_valid(&prod(&y, &y), h, w, &g);
    let mxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    /// Noisy input vs. clean; `None` when no ground truth noise was synthesized.
    pub noisy_psnr: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sigma: f64,
    pub model_id: String,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_noisy_psnr: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(sigma: f64, model_id: impl Into<String>, rows: Vec<EvalRow>) -> Self {
        let mean_noisy_psnr = rows
            .iter()
            .map(|r| r.noisy_psnr)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| mean(v.into_iter()));
        EvalReport {
            sigma,
            model_id: model_id.into(),
            mean_psnr: mean(rows.iter().map(|r| r.psnr)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_noisy_psnr,
            rows,
        }
    }

    /// Fixed-width table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}  sigma {}", self.model_id, self.sigma);
        let _ = writeln!(
            out,
            "{:<28} {:>11} {:>10} {:>8}",
            "image", "noisy(dB)", "psnr(dB)", "ssim"
        );
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>11} {:>10.2} {:>8.4}",
                r.name,
                fmt_opt(r.noisy_psnr),
                r.psnr,
                r.ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<28} {:>11} {:>10.2} {:>8.4}",
            "mean",
            fmt_opt(self.mean_noisy_psnr),
            self.mean_psnr,
            self.mean_ssim
        );
        out
    }

    /// One JSON record per image, then one aggregate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let rec = serde_json::json!({
                "model": self.model_id,
                "sigma": self.sigma,
                "image": r.name,
                "noisy_psnr": r.noisy_psnr,
                "psnr": r.psnr,
                "ssim": r.ssim,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let agg = serde_json::json!({
            "model": self.model_id,
            "sigma": self.sigma,
            "images": self.rows.len(),
            "mean_noisy_psnr": self.mean_noisy_psnr,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
        });
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }
}

/// Writes `x y` pairs, one per line, under a `# xlabel ylabel` header.
/// Infinite values are written as `inf`.
pub fn write_curve(
    path: impl AsRef<Path>,
    labels: (&str, &str),
    xs: &[f64],
    ys: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    if xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "curve has {} x values but {} y values",
            xs.len(),
            ys.len()
        )));
    }
    let mut text = format!("# {} {}\n", labels.0, labels.1);
    for (x, y) in xs.iter().zip(ys) {
        let _ = writeln!(text, "{x} {y}");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_grayscale, Dihedral};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn natural(name: &str) -> Tensor<f32> {
        let path = format!(
            "{}/../../data/natural/{name}.png",
            env!("CARGO_MANIFEST_DIR")
        );
        load_grayscale(path).unwrap().pixels
    }

    fn crop(t: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Tensor<f32> {
        let iw = t.shape()[2];
        Tensor::from_fn([1, h, w], |i| t.data()[(y + i / w) * iw + x + i % w])
    }

    fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn([h, w], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn([h, w], |i| {
            (a.data()[i] + rng.gen_range(-0.2f64..0.2)).clamp(0.0, 1.0)
        });
        (a, b)
    }

    /// Direct per-window SSIM with an explicit 2-D weight table.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let k = 11;
        let mut wt = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                wt[i * k + j] = (-(dy * dy + dx * dx) / 4.5).exp();
            }
        }
        let s: f64 = wt.iter().sum();
        wt.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = a.data()[(y + i) * w + x + j];
                        let q = b.data()[(y + i) * w + x + j];
                        let g = wt[i * k + j];
                        ma += g * p;
                        mb += g * q;
                        saa += g * p * p;
                        sbb += g * q * q;
                        sab += g * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total / ((h - k + 1) * (w - k + 1)) as f64
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f32>::full([8, 8], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 25.0 / 255.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * (255.0f64 / 25.0).log10()).abs() < 1e-4);
        assert!((p - 20.17).abs() < 0.01);
        assert_eq!(p, psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros([4, 16])).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pairs() {
        for seed in 0..5 {
            let (a, b) = random_pair(seed, 13, 17);
            let mut sq = 0.0;
            for i in 0..a.numel() {
                sq += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
            }
            let expect = -10.0 * (sq / a.numel() as f64).log10();
            assert!((psnr(&a, &b).unwrap() - expect).abs() < 0.01);
        }
    }

    #[test]
    fn ssim_matches_window_oracle_on_random_pairs() {
        for seed in 0..5 {
            let (a, b) = random_pair(seed, 20, 24);
            let got = ssim(&a, &b).unwrap();
            assert!((got - ssim_oracle(&a, &b)).abs() < 1e-3, "seed {seed}");
        }
    }

    #[test]
    fn ssim_matches_frozen_reference_values() {
        // Computed with scikit-image's structural_similarity(gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1) on the same crops.
        let cam = crop(&natural("camera"), 100, 120, 64, 64);
        let coins = crop(&natural("coins"), 50, 60, 64, 64);
        let shifted = crop(&natural("camera"), 101, 121, 64, 64);
        assert!((ssim(&cam, &coins).unwrap() - 0.242_797_476).abs() < 1e-4);
        assert!((ssim(&cam, &shifted).unwrap() - 0.758_574_453).abs() < 1e-4);
        assert!((psnr(&cam, &shifted).unwrap() - 21.721_233_886).abs() < 1e-3);
    }

    #[test]
    fn ssim_properties() {
        let cam = crop(&natural("camera"), 200, 200, 48, 48);
        assert!((ssim(&cam, &cam).unwrap() - 1.0).abs() < 1e-12);
        let inverted = cam.map(|v| 1.0 - v);
        assert!(ssim(&cam, &inverted).unwrap() < 0.3);
        let (a, b) = random_pair(9, 32, 32);
        let base = ssim(&a, &b).unwrap();
        for d in Dihedral::all() {
            let ta = d.apply(&a.cast::<f32>()).cast::<f64>();
            let tb = d.apply(&b.cast::<f32>()).cast::<f64>();
            assert!((ssim(&ta, &tb).unwrap() - base).abs() < 1e-3, "{d:?}");
        }
        assert!(ssim(&Tensor::<f32>::zeros([10, 30]), &Tensor::zeros([10, 30])).is_err());
    }

    #[test]
    fn report_aggregates_and_exports() {
        let rows = vec![
            EvalRow {
                name: "a".into(),
                noisy_psnr: Some(20.0),
                psnr: 30.0,
                ssim: 0.8,
            },
            EvalRow {
                name: "b".into(),
                noisy_psnr: Some(22.0),
                psnr: 32.0,
                ssim: 0.9,
            },
        ];
        let r = EvalReport::new(25.0, "m", rows);
        assert_eq!(r.mean_psnr, 31.0);
        assert!((r.mean_ssim - 0.85).abs() < 1e-12);
        assert_eq!(r.mean_noisy_psnr, Some(21.0));
        let table = r.to_table();
        assert!(table.contains("mean") && table.contains("31.00"));
        let jsonl = r.to_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["image"], "a");
    }

    #[test]
    fn curve_export_is_two_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_curve(&path, ("f", "psnr"), &[0.5, 1.0], &[30.0, f64::INFINITY]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# f psnr\n0.5 30\n1 inf\n");
        assert!(write_curve(&path, ("f", "p"), &[1.0], &[]).is_err());
    }
}
