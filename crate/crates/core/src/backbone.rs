//! Patch-token visual encoder producing the level pyramid, content and style features.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::graph::{Graph, Var};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::params::{Init, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Epsilon inside the square root of the style standard deviation.
pub const STYLE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of blocks, one pyramid level each.
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 8, depth: 4, width: 32, heads: 4, ffn_mult: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return reject(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.depth < 2 {
            return reject("encoder depth must be at least 2");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return reject(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.ffn_mult == 0 {
            return reject("ffn_mult must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Class token plus patch tokens.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

pub struct FeatureBundle {
    pub f_c: Var,
    pub f_s: Var,
    pub pyramid: FeaturePyramid,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
    patch_index: Rc<[u32]>,
}

/// Gather table mapping an `H×(W·3)` image to `P×(p·p·3)` patch rows.
fn patch_index(cfg: &EncoderConfig) -> Rc<[u32]> {
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let side = s / p;
    let mut idx = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..3 {
                        let (y, x) = (py * p + dy, px * p + dx);
                        idx.push(((y * s + x) * 3 + c) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sub = init.sub("encoder");
        let d = cfg.width;
        let patch_embed = Linear::new(&mut sub, "patch", cfg.patch_dim(), d, true);
        let cls_token = sub.normal("cls", 1, d, 0.02, false);
        let pos_embed = sub.normal("pos", cfg.num_tokens(), d, 0.02, false);
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(&mut sub, &format!("block{i}"), d, cfg.heads, cfg.ffn_mult))
            .collect();
        let final_ln = LayerNorm::new(&mut sub, "ln_f", d);
        Ok(Self { cfg: cfg.clone(), patch_embed, cls_token, pos_embed, blocks, final_ln, patch_index: patch_index(cfg) })
    }

    /// Converts an interleaved-RGB image into the `H×(W·3)` matrix `encode` expects.
    pub fn image_matrix<T: Scalar>(&self, image: &[f32]) -> Result<Mat<T>> {
        let s = self.cfg.image_size;
        if image.len() != s * s * 3 {
            return reject(format!("image has {} values, expected {}×{}×3", image.len(), s, s));
        }
        Ok(Mat::from_vec(s, s * 3, image.iter().map(|&v| T::of(v as f64)).collect()))
    }

    /// Patchify, embed, prepend the class token, add positions, run the blocks.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let s = self.cfg.image_size;
        if g.shape(image) != (s, s * 3) {
            return reject(format!("image shape {:?}, expected ({s}, {})", g.shape(image), s * 3));
        }
        let patches = g.gather(image, self.patch_index.clone(), self.cfg.num_patches(), self.cfg.patch_dim());
        let tokens = self.patch_embed.forward(g, patches);
        let cls = g.param(self.cls_token);
        let x = g.concat_rows(&[cls, tokens]);
        let pos = g.param(self.pos_embed);
        let mut x = g.add(x, pos);
        let mut levels = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, x, false);
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Final level passed through the closing layer norm.
    pub fn content_feature<T: Scalar>(&self, g: &mut Graph<'_, T>, pyramid: &FeaturePyramid) -> Var {
        let last = *pyramid.levels.last().expect("pyramid has levels");
        self.final_ln.forward(g, last)
    }

    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeatureBundle> {
        let pyramid = self.encode(g, image)?;
        let f_c = self.content_feature(g, &pyramid);
        let f_s = style_feature(g, &pyramid);
        Ok(FeatureBundle { f_c, f_s, pyramid })
    }
}

/// Per level: channel mean and standard deviation over patch tokens (class token
/// excluded), stacked as two rows, levels in order. Shape `2L×d`.
pub fn style_feature<T: Scalar>(g: &mut Graph<'_, T>, pyramid: &FeaturePyramid) -> Var {
    let mut rows = Vec::with_capacity(2 * pyramid.levels.len());
    for &level in &pyramid.levels {
        let n = g.shape(level).0;
        let patches = g.slice_rows(level, 1, n - 1);
        rows.push(g.mean_rows(patches));
        rows.push(g.std_rows(patches, STYLE_EPS));
    }
    g.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamStore, StoreKind};

    #[test]
    fn token_counts() {
        let cfg = EncoderConfig { patch_size: 4, ..Default::default() };
        assert_eq!(cfg.num_tokens(), 65);
        assert!(EncoderConfig { patch_size: 5, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { depth: 1, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { heads: 3, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn patch_index_covers_every_pixel_once() {
        let cfg = EncoderConfig::default();
        let idx = patch_index(&cfg);
        let mut seen = vec![0u8; cfg.image_size * cfg.image_size * 3];
        idx.iter().for_each(|&i| seen[i as usize] += 1);
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn pyramid_and_style_shapes() {
        let cfg = EncoderConfig { patch_size: 4, ..Default::default() };
        let mut store = ParamStore::<f64>::new(StoreKind::Model);
        let enc = Encoder::new(&mut Init::new(&mut store, 3, ""), &cfg).unwrap();
        let img: Vec<f32> = (0..32 * 32 * 3).map(|i| (i % 17) as f32 / 17.0).collect();
        let mut g = Graph::new(&store, None);
        let x = enc.image_matrix::<f64>(&img).unwrap();
        let x = g.input(x, false);
        let fb = enc.features(&mut g, x).unwrap();
        assert_eq!(fb.pyramid.levels.len(), 4);
        for &l in &fb.pyramid.levels {
            assert_eq!(g.shape(l), (65, 32));
        }
        assert_eq!(g.shape(fb.f_c), (65, 32));
        assert_eq!(g.shape(fb.f_s), (8, 32));
        assert!(enc.image_matrix::<f64>(&img[1..]).is_err());
    }
}
