//! Query fusion against the content feature, the live/spoof classifier and the cue
//! map generator.

use std::rc::Rc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::graph::{Graph, Var, GATHER_ZERO};
use crate::nn::Linear;
use crate::params::{rng_for, Init, ParamId};
use crate::qformer::QBlock;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub heads: usize,
    pub ffn_mult: usize,
    /// Side of the square cue map.
    pub cue_grid: usize,
    pub cue_channels: usize,
    /// Scale of the unit-normalised noise injected before the cue convolution in training.
    pub cue_noise: f64,
    pub cue_beta: f64,
    /// Use `d²/(2β)` on the quadratic branch so the loss is continuous at `d = β`.
    pub cue_smooth_continuous: bool,
    pub zero_init_residual: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_mult: 2,
            cue_grid: 16,
            cue_channels: 8,
            cue_noise: 0.1,
            cue_beta: 0.5,
            cue_smooth_continuous: false,
            zero_init_residual: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || width % self.heads != 0 || self.ffn_mult == 0 {
            return reject("fusion heads must divide the width");
        }
        if self.cue_grid == 0 || self.cue_channels == 0 {
            return reject("cue grid and channels must be positive");
        }
        if !(self.cue_beta > 0.0 && self.cue_beta.is_finite()) {
            return reject(format!("cue_beta must be positive, got {}", self.cue_beta));
        }
        if !(self.cue_noise >= 0.0 && self.cue_noise.is_finite()) {
            return reject("cue_noise must be non-negative");
        }
        Ok(())
    }
}

pub struct FusedState {
    pub q_hat: Var,
    pub t_cls: Var,
    pub t_cue: Var,
}

/// Cue generator: per-token projection, square token grid, nearest upsampling, one
/// 3×3 convolution to a single channel, sigmoid.
#[derive(Clone, Debug)]
pub struct CueGenerator {
    pub project: Linear,
    pub conv: Linear,
    grid: usize,
    channels: usize,
    tokens: usize,
    upsample: Rc<[u32]>,
    im2col: Rc<[u32]>,
}

fn upsample_index(tokens: usize, grid: usize, channels: usize) -> Rc<[u32]> {
    let side = (tokens as f64).sqrt().ceil() as usize;
    let mut idx = Vec::with_capacity(grid * grid * channels);
    for y in 0..grid {
        for x in 0..grid {
            let cell = (y * side / grid) * side + x * side / grid;
            for c in 0..channels {
                idx.push(if cell < tokens { (cell * channels + c) as u32 } else { GATHER_ZERO });
            }
        }
    }
    idx.into()
}

fn im2col_index(grid: usize, channels: usize) -> Rc<[u32]> {
    let g = grid as isize;
    let mut idx = Vec::with_capacity(grid * grid * 9 * channels);
    for y in 0..g {
        for x in 0..g {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (sy, sx) = (y + dy, x + dx);
                    for c in 0..channels {
                        idx.push(if sy < 0 || sx < 0 || sy >= g || sx >= g {
                            GATHER_ZERO
                        } else {
                            ((sy * g + sx) as usize * channels + c) as u32
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

impl CueGenerator {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, width: usize, tokens: usize, cfg: &FusionConfig) -> Self {
        let mut sub = init.sub("cue");
        let c = cfg.cue_channels;
        Self {
            project: Linear::new(&mut sub, "project", width, c, true),
            conv: Linear::new(&mut sub, "conv", 9 * c, 1, true),
            grid: cfg.cue_grid,
            channels: c,
            tokens,
            upsample: upsample_index(tokens, cfg.cue_grid, c),
            im2col: im2col_index(cfg.cue_grid, c),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// `g²×1` map in `[0,1]`. `noise_seed` is only consumed when `training` is set.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, t_cue: Var, training: bool, noise_seed: u64, noise_scale: f64) -> Result<Var> {
        if g.shape(t_cue).0 != self.tokens {
            return reject(format!("cue generator expects {} tokens, got {}", self.tokens, g.shape(t_cue).0));
        }
        let p = self.project.forward(g, t_cue);
        let cells = self.grid * self.grid;
        let mut x = g.gather(p, self.upsample.clone(), cells, self.channels);
        if training && noise_scale > 0.0 {
            let mut rng = rng_for(noise_seed, "cue-noise");
            let z: Vec<f64> = (0..cells * self.channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt().max(1e-12);
            let n = Mat::from_vec(cells, self.channels, z.iter().map(|v| T::of(noise_scale * v / rms)).collect());
            let n = g.constant(n);
            x = g.add(x, n);
        }
        let cols = g.gather(x, self.im2col.clone(), cells, 9 * self.channels);
        let y = self.conv.forward(g, cols);
        Ok(g.sigmoid(y))
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub block: QBlock,
    pub classifier: Linear,
    pub cue: Option<CueGenerator>,
    /// Learnable stand-ins for the processed queries of a disabled branch.
    pub content_placeholder: Option<ParamId>,
    pub style_placeholder: Option<ParamId>,
    pub num_queries: usize,
}

impl Fusion {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        width: usize,
        num_queries: usize,
        cfg: &FusionConfig,
        with_cue: bool,
        content_enabled: bool,
        style_enabled: bool,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let mut sub = init.sub("fusion");
        let block = QBlock::new(&mut sub, "block", width, cfg.heads, cfg.ffn_mult, cfg.zero_init_residual);
        // zero head: every fresh model scores 0.5
        let classifier = Linear::zeros(&mut sub, "classifier", width, 2, true);
        let cue = with_cue.then(|| CueGenerator::new(&mut sub, width, 2 * num_queries - 1, cfg));
        let content_placeholder = (!content_enabled).then(|| sub.normal("content_placeholder", num_queries, width, 0.5, false));
        let style_placeholder = (!style_enabled).then(|| sub.normal("style_placeholder", num_queries, width, 0.5, false));
        Ok(Self { block, classifier, cue, content_placeholder, style_placeholder, num_queries })
    }

    /// `Q = Qc ⊕ Qs`, one block against `f_c`, then split into `t_cls` and `t_cue`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, qc: Var, qs: Var, f_c: Var) -> Result<FusedState> {
        let k = self.num_queries;
        let d = g.shape(f_c).1;
        if g.shape(qc) != (k, d) || g.shape(qs) != (k, d) {
            return reject(format!("fusion expects two {k}×{d} query sets, got {:?} and {:?}", g.shape(qc), g.shape(qs)));
        }
        let q = g.concat_rows(&[qc, qs]);
        let q_hat = self.block.forward(g, q, f_c)?;
        let t_cls = g.slice_rows(q_hat, 0, 1);
        let t_cue = g.slice_rows(q_hat, 1, 2 * k - 1);
        Ok(FusedState { q_hat, t_cls, t_cue })
    }

    /// Two logits `[live, spoof]`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<'_, T>, t_cls: Var) -> Var {
        self.classifier.forward(g, t_cls)
    }
}

/// Spoof-class probability from the two classifier logits.
pub fn fake_score<T: Scalar>(logits: &[T]) -> f64 {
    let (a, b) = (logits[0].f64(), logits[1].f64());
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    eb / (ea + eb)
}

/// Piecewise distance loss between a cue map and its constant target, averaged.
pub fn cue_loss<T: Scalar>(g: &mut Graph<'_, T>, cue: Var, spoof: bool, beta: f64, continuous: bool) -> Result<Var> {
    if !(beta > 0.0) {
        return reject(format!("cue loss beta must be positive, got {beta}"));
    }
    let target = vec![if spoof { T::one() } else { T::zero() }; g.value(cue).len()];
    Ok(g.cue_loss(cue, &target, T::of(beta), continuous))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_pads_missing_cells() {
        let idx = upsample_index(7, 3, 1);
        assert_eq!(&idx[..], &[0, 1, 2, 3, 4, 5, 6, GATHER_ZERO, GATHER_ZERO]);
        let idx = upsample_index(7, 6, 1);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 0);
        assert_eq!(idx[2], 1);
        assert_eq!(idx[6 * 5 + 5], GATHER_ZERO);
    }

    #[test]
    fn im2col_zero_pads_borders() {
        let idx = im2col_index(4, 2);
        // top-left pixel: first tap is outside
        assert_eq!(idx[0], GATHER_ZERO);
        // its centre tap is itself
        assert_eq!(idx[4 * 2], 0);
        assert_eq!(idx[4 * 2 + 1], 1);
    }

    #[test]
    fn symmetric_logits_score_half() {
        assert_eq!(fake_score(&[0.3f64, 0.3]), 0.5);
        assert!(fake_score(&[0.0f64, 50.0]) > 0.999);
    }
}
