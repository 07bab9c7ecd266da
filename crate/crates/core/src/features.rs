//! Feature-map visualization of the high-band refinement.

use crate::autograd::Eager;
use crate::error::{Error, Result};
use crate::model::{feature_extractor, fpfr_forward_traced, FpfrTrace, ModelParams, Variant};
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::wavelet::{self, HBundle};

/// One tiled image of a `[C, h, w]` feature block.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    /// `raw` for the unrefined band, `r{k}` for refinement round `k`.
    pub label: String,
    /// `[H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub channels: usize,
}

/// Refinement rounds stage `stage` goes through in an `stages`-stage model.
pub fn rounds_for_stage(stages: usize, stage: usize) -> usize {
    stages.saturating_sub(stage)
}

/// `|x|` divided by the channel's largest `|x|` (all-zero channels stay 0).
pub fn normalize_abs(block: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = block.shape() else {
        return Err(Error::shape(format!(
            "expected [C, H, W], got {:?}",
            block.shape()
        )));
    };
    let mut out = block.map(f32::abs);
    for plane in out.data_mut().chunks_mut(h * w).take(c) {
        let peak = plane.iter().copied().fold(0.0f32, f32::max);
        if peak > 0.0 {
            plane.iter_mut().for_each(|v| *v /= peak);
        }
    }
    Ok(out)
}

/// Lays `[C, h, w]` out on a near-square grid with a 1-pixel zero gutter.
pub fn tile_channels(block: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = block.shape() else {
        return Err(Error::shape(format!(
            "expected [C, H, W], got {:?}",
            block.shape()
        )));
    };
    let cols = (1..=c).find(|k| k * k >= c).unwrap_or(1);
    let rows = c.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = Tensor::zeros([gh, gw]);
    let g = grid.data_mut();
    for ch in 0..c {
        let (r0, c0) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for y in 0..h {
            let src = &block.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            g[(r0 + y) * gw + c0..(r0 + y) * gw + c0 + w].copy_from_slice(src);
        }
    }
    Ok(grid)
}

/// The LH block of stage `stage`'s high band before refinement and after
/// each round up to `max_round` (all rounds when `None`), one normalized
/// tile grid per step. `image` is `[H, W]`; eval mode.
pub fn lh_refinement_grids(
    model: &ModelParams<f32>,
    image: &Tensor<f32>,
    stage: usize,
    max_round: Option<usize>,
) -> Result<Vec<FeatureGrid>> {
    let cfg = &model.config;
    if cfg.variant == Variant::NoBandSep {
        return Err(Error::Config(
            "the no-band-sep variant has no separate high bands to inspect".into(),
        ));
    }
    if stage >= cfg.stages {
        return Err(Error::Config(format!(
            "stage {stage} is out of range; valid stages: 0..={}",
            cfg.stages - 1
        )));
    }
    let rounds = rounds_for_stage(cfg.stages, stage);
    let last = max_round.unwrap_or(rounds - 1);
    if last >= rounds {
        return Err(Error::Config(format!(
            "round {last} is out of range for stage {stage}; valid rounds: 0..={}",
            rounds - 1
        )));
    }
    let &[h, w] = image.shape() else {
        return Err(Error::shape(format!(
            "expected an [H, W] image, got {:?}",
            image.shape()
        )));
    };
    let x = image.reshape([1, 1, h, w])?;
    let (x, _) = wavelet::pad_to_even(&x, cfg.stages as u32)?;
    let mut eager = Eager;
    let mut fwd = model.bind(&mut eager, Mode::Eval)?;
    let f = feature_extractor(&mut fwd, &x)?;
    let mut trace = FpfrTrace::default();
    fpfr_forward_traced(&mut fwd, &f, Some(&mut trace))?;

    let c = cfg.channels;
    let lh_grid = |label: String, bundle: &Tensor<f32>| -> Result<FeatureGrid> {
        let (_, lh, _) = wavelet::unbundle_h(&HBundle(bundle.clone()), c)?;
        let [_, _, bh, bw] = lh.dims4()?;
        let block = lh.reshape([c, bh, bw])?;
        Ok(FeatureGrid {
            label,
            image: tile_channels(&normalize_abs(&block)?)?,
            channels: c,
        })
    };
    let mut out = vec![lh_grid("raw".into(), &trace.raw[stage])?];
    for r in 0..=last {
        out.push(lh_grid(format!("r{r}"), &trace.refined[&(stage, r)])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> ModelParams<f32> {
        let cfg = ModelConfig {
            channels: 5,
            stages: 3,
            fe_blocks: 1,
            dec_blocks: 1,
            kernel_size: 3,
            variant: Variant::Full,
        };
        let mut m = ModelParams::init(cfg, 1).unwrap();
        // Eval mode needs running statistics.
        for (prefix, c) in crate::model::bn_layers(&m.config) {
            m.buffers
                .insert(format!("{prefix}_mean"), Tensor::zeros([c]));
            m.buffers
                .insert(format!("{prefix}_var"), Tensor::full([c], 1.0));
        }
        m
    }

    #[test]
    fn four_grids_at_stage_zero() {
        let img = Tensor::from_fn([16, 16], |i| ((i * 37) % 11) as f32 / 10.0);
        let grids = lh_refinement_grids(&small(), &img, 0, None).unwrap();
        let labels: Vec<&str> = grids.iter().map(|g| g.label.as_str()).collect();
        assert_eq!(labels, ["raw", "r0", "r1", "r2"]);
        for g in &grids {
            assert_eq!(g.channels, 5);
            // 5 channels of 8x8 on a 3x2 grid with gutters.
            assert_eq!(g.image.shape(), &[2 * 9 - 1, 3 * 9 - 1]);
            assert!(g.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(
            lh_refinement_grids(&small(), &img, 2, None).unwrap().len(),
            2
        );
    }

    #[test]
    fn out_of_range_lists_valid_values() {
        let img = Tensor::zeros([16, 16]);
        let err = lh_refinement_grids(&small(), &img, 3, None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("0..=2"), "{err}");
        let err = lh_refinement_grids(&small(), &img, 1, Some(2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("0..=1"), "{err}");
    }

    #[test]
    fn tiles_hold_every_channel() {
        let block = Tensor::from_fn([3, 2, 2], |i| (i / 4 + 1) as f32);
        let grid = tile_channels(&block).unwrap();
        assert_eq!(grid.shape(), &[5, 5]);
        // Channel 2 lands bottom-left.
        assert_eq!(grid.data()[3 * 5], 3.0);
        let n = normalize_abs(&block.map(|v| -v)).unwrap();
        assert!(n.data().iter().all(|&v| v == 1.0));
    }
}
