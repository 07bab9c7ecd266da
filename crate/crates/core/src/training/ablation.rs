//! Variant grid training: stage count × refinement wiring × seeds, all on
//! the same data and noise stream.

use std::fmt::Write as _;

use log::{error, info};
use serde::Serialize;

use crate::data::ImageSample;
use crate::error::Result;
use crate::model::Variant;
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub base: TrainConfig,
    /// `(stages, variant)` cells in report order.
    pub cells: Vec<(usize, Variant)>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    /// Every stage count 1..=3 with every variant.
    pub fn full_grid(base: TrainConfig, seeds: Vec<u64>) -> Self {
        let cells = (1..=3)
            .flat_map(|s| Variant::ALL.into_iter().map(move |v| (s, v)))
            .collect();
        AblationSpec { base, cells, seeds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub stages: usize,
    pub variant: String,
    pub seed: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub noisy_psnr: Option<f64>,
    /// Data hash of each epoch; identical across cells sharing a seed.
    pub data_hashes: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub results: Vec<CellResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl AblationReport {
    fn cell(&self, stages: usize, variant: Variant) -> impl Iterator<Item = &CellResult> {
        self.results
            .iter()
            .filter(move |r| r.stages == stages && r.variant == variant.as_str())
    }

    /// Mean held-out PSNR over the seeds that finished.
    pub fn mean_psnr(&self, stages: usize, variant: Variant) -> Option<f64> {
        mean(self.cell(stages, variant).filter_map(|r| r.psnr))
    }

    pub fn mean_ssim(&self, stages: usize, variant: Variant) -> Option<f64> {
        mean(self.cell(stages, variant).filter_map(|r| r.ssim))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.results.iter().filter(|r| r.error.is_some())
    }

    /// One row per stage count, one PSNR/SSIM column pair per variant, means
    /// over seeds.
    pub fn to_table(&self) -> String {
        let mut stages: Vec<usize> = self.results.iter().map(|r| r.stages).collect();
        stages.sort_unstable();
        stages.dedup();
        let variants: Vec<Variant> = Variant::ALL
            .into_iter()
            .filter(|v| self.results.iter().any(|r| r.variant == v.as_str()))
            .collect();
        let seeds = {
            let mut s: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "stages");
        for v in &variants {
            let _ = write!(out, " | {:>13} {:>7}", format!("{v} PSNR"), "SSIM");
        }
        out.push('\n');
        for &s in &stages {
            let _ = write!(out, "{:<8}", format!("S={s}"));
            for &v in &variants {
                match (self.mean_psnr(s, v), self.mean_ssim(s, v)) {
                    (Some(p), Some(q)) => {
                        let _ = write!(out, " | {p:>13.2} {q:>7.4}");
                    }
                    _ => {
                        let _ = write!(out, " | {:>13} {:>7}", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        if let Some(n) = mean(self.results.iter().filter_map(|r| r.noisy_psnr)) {
            let _ = writeln!(
                out,
                "noisy input PSNR {n:.2} dB; means over {seeds} seed(s)"
            );
        }
        for f in self.failures() {
            let _ = writeln!(
                out,
                "failed: S={} {} seed {}: {}",
                f.stages,
                f.variant,
                f.seed,
                f.error.as_deref().unwrap_or_default()
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.results
            .iter()
            .map(|r| serde_json::to_string(r).expect("cell serializes") + "\n")
            .collect()
    }
}

/// Per held-out image `(PSNR, SSIM, noisy PSNR)` and the per-epoch data hashes.
type CellOutcome = (Vec<(f64, f64, f64)>, Vec<String>);

fn run_cell(
    config: TrainConfig,
    train: &[ImageSample],
    heldout: &[ImageSample],
) -> Result<CellOutcome> {
    let mut trainer = Trainer::new(config, train, heldout)?;
    trainer.run()?;
    let hashes = trainer.log.iter().map(|r| r.data_hash.clone()).collect();
    Ok((trainer.heldout_scores()?, hashes))
}

/// Trains every cell for every seed. A failing cell is recorded and the
/// remaining cells still run.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &[ImageSample],
    heldout: &[ImageSample],
) -> AblationReport {
    let mut report = AblationReport::default();
    for &seed in &spec.seeds {
        for &(stages, variant) in &spec.cells {
            let mut config = spec.base.clone();
            config.seed = seed;
            config.model.stages = stages;
            config.model.variant = variant;
            info!("ablation cell S={stages} {variant} seed {seed}");
            let mut result = CellResult {
                stages,
                variant: variant.as_str().to_string(),
                seed,
                psnr: None,
                ssim: None,
                noisy_psnr: None,
                data_hashes: Vec::new(),
                error: None,
            };
            match run_cell(config, train, heldout) {
                Ok((scores, hashes)) => {
                    result.psnr = mean(scores.iter().map(|s| s.0));
                    result.ssim = mean(scores.iter().map(|s| s.1));
                    result.noisy_psnr = mean(scores.iter().map(|s| s.2));
                    result.data_hashes = hashes;
                }
                Err(e) => {
                    error!("ablation cell S={stages} {variant} seed {seed} failed: {e}");
                    result.error = Some(e.to_string());
                }
            }
            report.results.push(result);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn images() -> Vec<ImageSample> {
        (0..2)
            .map(|k| {
                let px = Tensor::from_fn([1, 32, 32], |i| {
                    0.5 + 0.4 * ((i % 32) as f32 * 0.3 + k as f32).sin()
                });
                ImageSample::new(px, format!("a{k}.png")).unwrap()
            })
            .collect()
    }

    fn spec() -> AblationSpec {
        let mut base = TrainConfig {
            epochs: 1,
            batch_size: 4,
            patch: 16,
            stride: 16,
            ..TrainConfig::default()
        };
        base.model.channels = 2;
        base.model.fe_blocks = 1;
        base.model.dec_blocks = 1;
        AblationSpec {
            base,
            cells: vec![
                (1, Variant::Full),
                (2, Variant::NoLgr),
                (2, Variant::NoBandSep),
            ],
            seeds: vec![5],
        }
    }

    #[test]
    fn grid_shares_data_and_builds_table() {
        let imgs = images();
        let report = run_ablation(&spec(), &imgs, &imgs[..1]);
        assert_eq!(report.results.len(), 3);
        assert!(report.failures().next().is_none());
        let h = &report.results[0].data_hashes;
        assert!(report.results.iter().all(|r| &r.data_hashes == h));
        let table = report.to_table();
        assert_eq!(table.lines().filter(|l| l.starts_with("S=")).count(), 2);
        assert!(table.contains("no-band-sep PSNR"));
        assert_eq!(report.to_jsonl().lines().count(), 3);
    }

    #[test]
    fn failing_cell_does_not_stop_the_grid() {
        let imgs = images();
        let mut s = spec();
        // 12 is a multiple of 4 but not of 8.
        s.base.patch = 12;
        s.base.stride = 12;
        s.cells = vec![(3, Variant::Full), (2, Variant::Full)];
        let report = run_ablation(&s, &imgs, &[]);
        assert!(report.results[0].error.is_some());
        assert!(report.results[1].error.is_none());
        assert!(report.to_table().contains("failed: S=3"));
    }

    #[test]
    fn full_grid_has_nine_cells() {
        assert_eq!(
            AblationSpec::full_grid(TrainConfig::default(), vec![0])
                .cells
                .len(),
            9
        );
    }
}
