//! Procedural face-proxy images with controllable spoof type and capture style.
//!
//! Content and style are rendered by independent stages: the spoof type decides the
//! face-region structure and artefacts, the environment picks the background texture,
//! the illumination scales brightness, and the camera quality sets blur and sensor noise.
//! Every sample is a pure function of its labels, the domain seed and its index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{reject, Error, Result};
use crate::params::{mix64, rng_for};

pub const NUM_CONTENT: usize = 11;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Illumination {
    #[default]
    Normal = 0,
    Strong = 1,
    Back = 2,
    Dark = 3,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    #[default]
    Indoor = 0,
    Outdoor = 1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraQuality {
    #[default]
    Low = 0,
    Medium = 1,
    High = 2,
}

impl Illumination {
    pub const ALL: [Self; 4] = [Self::Normal, Self::Strong, Self::Back, Self::Dark];
}
impl Environment {
    pub const ALL: [Self; 2] = [Self::Indoor, Self::Outdoor];
}
impl CameraQuality {
    pub const ALL: [Self; 3] = [Self::Low, Self::Medium, Self::High];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleSpec {
    pub illumination: Illumination,
    pub environment: Environment,
    pub camera_quality: CameraQuality,
}

impl StyleSpec {
    pub const COUNT: usize = 24;

    /// Mixed-radix decoding of `0..24` into the three style factors.
    pub fn from_index(i: usize) -> Self {
        let i = i % Self::COUNT;
        Self {
            illumination: Illumination::ALL[i % 4],
            environment: Environment::ALL[(i / 4) % 2],
            camera_quality: CameraQuality::ALL[(i / 8) % 3],
        }
    }

    pub fn index(&self) -> usize {
        self.illumination as usize + 4 * self.environment as usize + 8 * self.camera_quality as usize
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..Self::COUNT).map(Self::from_index)
    }
}

/// Rendering parameters, one value per style enum member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    /// Global brightness multiplier per illumination value.
    pub brightness: [f64; 4],
    /// Background texture id per environment value.
    pub textures: [u32; 2],
    /// Gaussian blur sigma (pixels) per camera quality.
    pub blur: [f64; 3],
    /// Additive sensor noise sigma per camera quality.
    pub noise: [f64; 3],
    /// Recapture grain of this domain's spoof media, see [`GRAIN_PATTERNS`].
    #[serde(default)]
    pub grain_pattern: u8,
    #[serde(default = "default_grain_amplitude")]
    pub grain_amplitude: f64,
    /// Radius of the grain patch as a fraction of the image side; its position on the
    /// face follows the grain layout.
    #[serde(default = "default_grain_radius")]
    pub grain_radius: f64,
}

/// Number of distinct recapture grain layouts.
pub const GRAIN_PATTERNS: u8 = 5;

fn default_grain_amplitude() -> f64 {
    0.08
}

fn default_grain_radius() -> f64 {
    0.12
}

/// Centre of the grain patch relative to the face centre, in face radii.
fn grain_offset(pattern: u8) -> (f64, f64) {
    let a = f64::from(pattern % GRAIN_PATTERNS) * std::f64::consts::TAU / f64::from(GRAIN_PATTERNS);
    (0.55 * a.cos(), 0.55 * a.sin())
}

/// Sign of the grain at a pixel: checkerboard, inverted checkerboard, column
/// stripes, row stripes, 2×2 block checkerboard.
fn grain_sign(pattern: u8, x: usize, y: usize) -> f64 {
    let even = match pattern % GRAIN_PATTERNS {
        0 => (x + y) % 2 == 0,
        1 => (x + y) % 2 == 1,
        2 => x % 2 == 0,
        3 => y % 2 == 0,
        _ => (x / 2 + y / 2) % 2 == 0,
    };
    if even {
        1.0
    } else {
        -1.0
    }
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            brightness: [1.0, 1.3, 0.85, 0.55],
            textures: [11, 23],
            blur: [1.0, 0.6, 0.0],
            noise: [0.05, 0.03, 0.01],
            grain_pattern: 0,
            grain_amplitude: default_grain_amplitude(),
            grain_radius: default_grain_radius(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "default_domain_name")]
    pub name: String,
    #[serde(default)]
    pub render: RenderParams,
    #[serde(default = "default_granularity")]
    pub label_granularity: u8,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_domain_name() -> String {
    "meta".into()
}

fn default_granularity() -> u8 {
    3
}

fn default_image_size() -> usize {
    32
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "meta".into(),
            render: RenderParams::default(),
            label_granularity: 3,
            base_seed: 0,
            image_size: 32,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.label_granularity) {
            return reject(format!("label_granularity {} not in 1..=3", self.label_granularity));
        }
        if self.image_size < 8 {
            return reject(format!("image_size {} is too small", self.image_size));
        }
        let r = &self.render;
        let finite = r.brightness.iter().chain(&r.blur).chain(&r.noise).all(|v| v.is_finite());
        if !(r.grain_amplitude >= 0.0 && r.grain_amplitude.is_finite()) {
            return reject("grain_amplitude must be finite and non-negative");
        }
        if !(r.grain_radius >= 0.0 && r.grain_radius.is_finite()) {
            return reject("grain_radius must be finite and non-negative");
        }
        if !finite || r.brightness.iter().any(|&b| b <= 0.0) || r.blur.iter().chain(&r.noise).any(|&v| v < 0.0) {
            return reject("render parameters must be finite, brightness positive, blur/noise non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `H×W×3` row-major, values in `[0, 1]`.
    #[serde(skip)]
    pub image: Vec<f32>,
    pub size: usize,
    pub content_label: u8,
    pub style: StyleSpec,
    /// `H×W`, all ones for spoofs and all zeros for real faces.
    #[serde(skip)]
    pub mask: Vec<u8>,
    pub domain_id: String,
    pub seed: u64,
    pub index: usize,
}

impl Sample {
    pub fn is_spoof(&self) -> bool {
        self.content_label != 0
    }

    /// Label-only sample with an empty image, for text-side code and tests.
    pub fn blank(content_label: u8, style: StyleSpec) -> Self {
        Self {
            image: Vec::new(),
            size: 0,
            content_label,
            style,
            mask: Vec::new(),
            domain_id: String::new(),
            seed: 0,
            index: 0,
        }
    }
}

/// Maps a fine label onto the label set of the requested granularity.
///
/// Granularity 1 yields real, print, replay, 2D mask, 3D mask (0..5); granularity 2
/// keeps two sub-labels per family by merging the last two; granularity 3 is identity.
pub fn coarsen_label(content_label: u8, granularity: u8) -> Result<u8> {
    if content_label as usize >= NUM_CONTENT {
        return reject(format!("content label {content_label} out of range 0..=10"));
    }
    match granularity {
        3 => Ok(content_label),
        2 => Ok(match content_label {
            0 => 0,
            1 => 1,
            2 | 3 => 2,
            4 => 3,
            5 | 6 => 4,
            7 => 5,
            8 | 9 => 6,
            _ => 7,
        }),
        1 => Ok(match content_label {
            0 => 0,
            1..=3 => 1,
            7..=9 => 2,
            4..=6 => 3,
            _ => 4,
        }),
        g => reject(format!("granularity {g} not in {{1,2,3}}")),
    }
}

pub fn num_content_classes(granularity: u8) -> usize {
    match granularity {
        1 => 5,
        2 => 8,
        _ => NUM_CONTENT,
    }
}

fn sample_seed(base_seed: u64, index: usize, label: u8, style: StyleSpec) -> u64 {
    mix64(mix64(base_seed ^ 0x5f3c_a11e) ^ mix64(index as u64) ^ ((label as u64) << 40) ^ ((style.index() as u64) << 48))
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self { size, px: vec![[0.0; 3]; size * size] }
    }

    fn get(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.px[y * self.size + x]
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = self.get(x, y);
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn gaussian_blur(&mut self, sigma: f64) {
        if sigma < 0.05 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let n = self.size as isize;
        for pass in 0..2 {
            let src = self.px.clone();
            for y in 0..n {
                for x in 0..n {
                    let mut acc = [0.0; 3];
                    for (k, w) in kernel.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sx, sy) = if pass == 0 { ((x + o).clamp(0, n - 1), y) } else { (x, (y + o).clamp(0, n - 1)) };
                        let s = src[(sy * n + sx) as usize];
                        for c in 0..3 {
                            acc[c] += w * s[c];
                        }
                    }
                    self.px[(y * n + x) as usize] = [acc[0] / norm, acc[1] / norm, acc[2] / norm];
                }
            }
        }
    }
}

fn texture_rng(texture: u32) -> ChaCha8Rng {
    rng_for(texture as u64, "texture")
}

/// Background: the texture id fixes a palette centre and two gratings; each sample
/// jitters palette, orientation and phase around them.
fn paint_background(canvas: &mut Canvas, texture: u32, rng: &mut ChaCha8Rng) {
    let mut trng = texture_rng(texture);
    let centre: [f64; 3] = [trng.gen_range(0.25..0.65), trng.gen_range(0.25..0.65), trng.gen_range(0.25..0.65)];
    let waves: Vec<(f64, f64, f64, usize)> = (0..2)
        .map(|_| (trng.gen_range(0.1..0.6), trng.gen_range(0.0..std::f64::consts::PI), trng.gen_range(0.04..0.12), trng.gen_range(0..3)))
        .collect();
    let base = centre.map(|c| c + rng.gen_range(-0.2..0.2));
    let tilt: f64 = rng.gen_range(-0.4..0.4);
    let stretch: f64 = rng.gen_range(0.7..1.4);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let n = canvas.size;
    for y in 0..n {
        for x in 0..n {
            let mut c = base;
            for &(f, theta, amp, ch) in &waves {
                let th = theta + tilt;
                let t = (x as f64 * th.cos() + y as f64 * th.sin()) * f * stretch + phase;
                c[ch] += amp * t.sin();
                c[(ch + 1) % 3] += 0.5 * amp * t.sin();
            }
            *canvas.get(x, y) = c;
        }
    }
}

struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
}

impl Face {
    fn inside(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)
    }
}

fn paint_face(canvas: &mut Canvas, face: &Face, shaded: bool) {
    let n = canvas.size;
    let s = n as f64;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = face.inside(fx, fy);
            if r <= 1.0 {
                let shade = if shaded { 1.0 - 0.35 * r } else { 0.9 };
                let mut col = face.skin.map(|c| c * shade);
                // eyes and mouth
                let ex = (fx - face.cx).abs();
                let ey = fy - (face.cy - 0.25 * face.ry);
                if (ex - 0.4 * face.rx).abs() < 0.12 * s && ey.abs() < 0.05 * s {
                    col = [0.1, 0.08, 0.08];
                }
                let my = fy - (face.cy + 0.45 * face.ry);
                if ex < 0.35 * face.rx && my.abs() < 0.03 * s {
                    col = [0.45, 0.1, 0.12];
                }
                *canvas.get(x, y) = col;
            }
        }
    }
}

/// Spoof-type structure: frames, bezels, mask edges, gratings. Real faces get none.
fn paint_content(canvas: &mut Canvas, label: u8, face: &Face, rng: &mut ChaCha8Rng) {
    let n = canvas.size;
    let s = n as f64;
    // class-specific grating: frequency and orientation indexed by class
    let grating = |x: f64, y: f64, label: u8| -> f64 {
        let theta = (label as f64) * std::f64::consts::PI / 10.0;
        let freq = 0.6 + 0.12 * label as f64;
        ((x * theta.cos() + y * theta.sin()) * freq).sin()
    };
    let rect = |x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64| x >= x0 && x < x1 && y >= y0 && y < y1;
    let jitter: f64 = rng.gen_range(-0.04..0.04) * s;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = face.inside(fx, fy);
            let g = grating(fx, fy, label);
            match label {
                // print family: paper border around a flat-shaded print, desaturated
                1..=3 => {
                    let margin = [0.14, 0.06, 0.02][label as usize - 1] * s;
                    let (x0, y0, x1, y1) = (margin + jitter, margin, s - margin + jitter, s - margin);
                    let inner = rect(fx, fy, x0 + 2.0, y0 + 2.0, x1 - 2.0, y1 - 2.0);
                    if rect(fx, fy, x0, y0, x1, y1) && !inner {
                        canvas.blend(x, y, [0.95, 0.95, 0.92], 0.85);
                    } else if inner {
                        let p = *canvas.get(x, y);
                        let grey = (p[0] + p[1] + p[2]) / 3.0;
                        let sat = [0.55, 0.4, 0.25][label as usize - 1];
                        for c in 0..3 {
                            canvas.get(x, y)[c] = p[c] * sat + grey * (1.0 - sat) + 0.06 * g;
                        }
                    }
                }
                // 2D masks: hard-edged flat cut-outs of different extents
                4..=6 => {
                    let covered = match label {
                        4 => r <= 1.05,
                        5 => r <= 1.05 || (fy > face.cy + 0.6 * face.ry && (fx - face.cx).abs() < 0.45 * s),
                        _ => (fy - (face.cy - 0.25 * face.ry)).abs() < 0.14 * s && (fx - face.cx).abs() < 0.42 * s,
                    };
                    if covered {
                        let tone = [0.92, 0.82, 0.7];
                        canvas.blend(x, y, tone.map(|c| c + 0.05 * g), 0.55);
                    }
                    if label != 6 && (r - 1.05).abs() < 0.1 {
                        canvas.blend(x, y, [0.2, 0.2, 0.2], 0.6);
                    }
                }
                // screens: dark bezel, backlit panel, moire stripes
                7..=9 => {
                    let (mx, my) = match label {
                        7 => (0.04, 0.1),
                        8 => (0.1, 0.06),
                        _ => (0.22, 0.03),
                    };
                    let (x0, y0, x1, y1) = (mx * s + jitter, my * s, s - mx * s + jitter, s - my * s);
                    let inner = rect(fx, fy, x0 + 2.5, y0 + 2.5, x1 - 2.5, y1 - 2.5);
                    if rect(fx, fy, x0, y0, x1, y1) && !inner {
                        canvas.blend(x, y, [0.05, 0.05, 0.07], 0.9);
                    } else if inner {
                        let p = canvas.get(x, y);
                        p[2] += 0.08;
                        for c in p.iter_mut() {
                            *c = *c * 0.9 + 0.1 + 0.08 * g;
                        }
                    }
                }
                // 3D mask: glossy uniform surface with a specular highlight
                10 => {
                    if r <= 1.0 {
                        let hx = fx - (face.cx - 0.3 * face.rx);
                        let hy = fy - (face.cy - 0.4 * face.ry);
                        let spec = (-(hx * hx + hy * hy) / (0.02 * s * s)).exp();
                        let p = canvas.get(x, y);
                        for c in p.iter_mut() {
                            *c = 0.75 * *c + 0.2 + 0.5 * spec + 0.04 * g;
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn apply_illumination(canvas: &mut Canvas, illumination: Illumination, brightness: f64, face: &Face) {
    let n = canvas.size;
    for y in 0..n {
        for x in 0..n {
            let inside = face.inside(x as f64 + 0.5, y as f64 + 0.5) <= 1.0;
            let gain = match illumination {
                // backlight: bright surround, dim subject
                Illumination::Back => {
                    if inside {
                        brightness * 0.7
                    } else {
                        brightness * 1.45
                    }
                }
                _ => brightness,
            };
            for c in canvas.get(x, y).iter_mut() {
                *c *= gain;
            }
        }
    }
}

/// Renders one sample; a pure function of the labels, `spec.base_seed` and `index`.
pub fn render_sample(content_label: u8, style: StyleSpec, spec: &DomainSpec, index: usize) -> Result<Sample> {
    if content_label as usize >= NUM_CONTENT {
        return reject(format!("content label {content_label} out of range 0..=10"));
    }
    spec.validate()?;
    let seed = sample_seed(spec.base_seed, index, content_label, style);
    let mut rng = rng_for(seed, "sample");
    let n = spec.image_size;
    let s = n as f64;
    let mut canvas = Canvas::new(n);

    paint_background(&mut canvas, spec.render.textures[style.environment as usize], &mut rng);
    let face = Face {
        cx: s * 0.5 + rng.gen_range(-0.06..0.06) * s,
        cy: s * 0.5 + rng.gen_range(-0.05..0.05) * s,
        rx: s * rng.gen_range(0.26..0.32),
        ry: s * rng.gen_range(0.33..0.4),
        skin: [rng.gen_range(0.7..0.9), rng.gen_range(0.5..0.65), rng.gen_range(0.4..0.55)],
    };
    paint_face(&mut canvas, &face, content_label != 4 && content_label != 5);
    paint_content(&mut canvas, content_label, &face, &mut rng);
    apply_illumination(&mut canvas, style.illumination, spec.render.brightness[style.illumination as usize], &face);

    let cam = style.camera_quality as usize;
    canvas.gaussian_blur(spec.render.blur[cam]);
    if content_label != 0 {
        // recapture grain specific to the domain's spoof media, in one patch on the face
        let (ox, oy) = grain_offset(spec.render.grain_pattern);
        let (gx, gy) = (face.cx + ox * face.rx, face.cy + oy * face.ry);
        let r2 = (spec.render.grain_radius * s).powi(2);
        for y in 0..n {
            for x in 0..n {
                if (x as f64 + 0.5 - gx).powi(2) + (y as f64 + 0.5 - gy).powi(2) <= r2 {
                    let v = spec.render.grain_amplitude * grain_sign(spec.render.grain_pattern, x, y);
                    for c in canvas.get(x, y).iter_mut() {
                        *c += v;
                    }
                }
            }
        }
    }
    let noise = spec.render.noise[cam];
    let mut image = Vec::with_capacity(n * n * 3);
    for p in &canvas.px {
        for &c in p {
            let z: f64 = StandardNormal.sample(&mut rng);
            image.push((c + noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    let mask_value = u8::from(content_label != 0);
    Ok(Sample {
        image,
        size: n,
        content_label,
        style,
        mask: vec![mask_value; n * n],
        domain_id: spec.name.clone(),
        seed,
        index,
    })
}

/// `n` samples. Balanced splits cycle content classes, then the 24 style combinations.
pub fn make_split(spec: &DomainSpec, n: usize, balanced: bool) -> Result<Vec<Sample>> {
    if n == 0 {
        return reject("split size must be positive");
    }
    spec.validate()?;
    let mut rng = rng_for(spec.base_seed, "split-labels");
    (0..n)
        .map(|i| {
            let (label, style) = if balanced {
                ((i % NUM_CONTENT) as u8, StyleSpec::from_index(i / NUM_CONTENT))
            } else {
                (rng.gen_range(0..NUM_CONTENT) as u8, StyleSpec::from_index(rng.gen_range(0..StyleSpec::COUNT)))
            };
            render_sample(label, style, spec, i)
        })
        .collect()
}

/// `n` samples of which `round(n * live_fraction)` are real faces; the spoofs cycle
/// the ten spoof types and every group cycles the style combinations.
pub fn make_eval_split(spec: &DomainSpec, n: usize, live_fraction: f64) -> Result<Vec<Sample>> {
    if n == 0 {
        return reject("split size must be positive");
    }
    if !(0.0..=1.0).contains(&live_fraction) {
        return reject(format!("live fraction must lie in [0, 1], got {live_fraction}"));
    }
    spec.validate()?;
    let live = (n as f64 * live_fraction).round() as usize;
    (0..n)
        .map(|i| {
            let (label, style) = if i < live {
                (0, StyleSpec::from_index(i))
            } else {
                let j = i - live;
                ((1 + j % (NUM_CONTENT - 1)) as u8, StyleSpec::from_index(j / (NUM_CONTENT - 1)))
            };
            render_sample(label, style, spec, i)
        })
        .collect()
}

/// `k` shifted domains: brightness outside the base set, unseen textures, new blur/noise.
pub fn make_target_domains(base: &DomainSpec, k: usize) -> Result<Vec<DomainSpec>> {
    if k == 0 {
        return reject("need at least one target domain");
    }
    base.validate()?;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = rng_for(base.base_seed, &format!("target-{i}"));
        let mut render = base.render.clone();
        let factor = if i % 2 == 0 { rng.gen_range(1.12..1.3) } else { rng.gen_range(0.72..0.88) };
        for b in render.brightness.iter_mut() {
            *b *= factor;
        }
        // never reuse a training multiplier exactly
        for b in render.brightness.iter_mut() {
            while base.render.brightness.iter().any(|&m| (m - *b).abs() < 1e-9) {
                *b *= 1.01;
            }
        }
        render.textures = [1000 + 2 * i as u32 + base.render.textures[0], 1001 + 2 * i as u32 + base.render.textures[1]];
        render.grain_pattern = (base.render.grain_pattern + 1 + i as u8 % (GRAIN_PATTERNS - 1)) % GRAIN_PATTERNS;
        let blur_shift = rng.gen_range(0.3..0.8);
        let noise_scale = rng.gen_range(1.4..2.2);
        for b in render.blur.iter_mut() {
            *b += blur_shift;
        }
        for v in render.noise.iter_mut() {
            *v = *v * noise_scale + 0.005;
        }
        out.push(DomainSpec {
            name: format!("{}-target{}", base.name, i + 1),
            render,
            label_granularity: base.label_granularity,
            base_seed: mix64(base.base_seed.wrapping_add(0x7a3d + i as u64)),
            image_size: base.image_size,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    spec: DomainSpec,
    balanced: bool,
    image_size: usize,
    samples: Vec<Sample>,
}

/// Writes `manifest.json`, `images.f32` (little-endian) and `masks.u8` under `dir`.
pub fn save_split(dir: &Path, spec: &DomainSpec, balanced: bool, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SplitManifest { spec: spec.clone(), balanced, image_size: spec.image_size, samples: samples.to_vec() };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut images = Vec::with_capacity(samples.len() * spec.image_size * spec.image_size * 12);
    let mut masks = Vec::new();
    for s in samples {
        for &v in &s.image {
            images.extend_from_slice(&v.to_le_bytes());
        }
        masks.extend_from_slice(&s.mask);
    }
    fs::File::create(dir.join("images.f32"))?.write_all(&images)?;
    fs::File::create(dir.join("masks.u8"))?.write_all(&masks)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<(DomainSpec, Vec<Sample>)> {
    let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let n = manifest.image_size;
    let mut images = Vec::new();
    fs::File::open(dir.join("images.f32"))?.read_to_end(&mut images)?;
    let masks = fs::read(dir.join("masks.u8"))?;
    let count = manifest.samples.len();
    if images.len() != count * n * n * 12 || masks.len() != count * n * n {
        return Err(Error::Corrupt(format!("split at {} has mismatched blob sizes", dir.display())));
    }
    let mut samples = manifest.samples;
    for (i, s) in samples.iter_mut().enumerate() {
        let off = i * n * n * 12;
        s.image = images[off..off + n * n * 12]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        s.mask = masks[i * n * n..(i + 1) * n * n].to_vec();
    }
    Ok((manifest.spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_follow_the_spoof_label() {
        let spec = DomainSpec::default();
        for label in 0..NUM_CONTENT as u8 {
            for style in StyleSpec::all().step_by(5) {
                let s = render_sample(label, style, &spec, 3).unwrap();
                let want = u8::from(label != 0);
                assert!(s.mask.iter().all(|&m| m == want), "label {label}");
                assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(s.image.len(), 32 * 32 * 3);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = DomainSpec::default();
        let style = StyleSpec::from_index(13);
        let a = render_sample(7, style, &spec, 42).unwrap();
        let b = render_sample(7, style, &spec, 42).unwrap();
        assert_eq!(a.image, b.image);
        let c = render_sample(7, style, &spec, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(render_sample(11, StyleSpec::default(), &DomainSpec::default(), 0).is_err());
    }

    #[test]
    fn balanced_splits_have_even_class_counts() {
        let spec = DomainSpec::default();
        for (n, each) in [(22usize, 2usize), (11, 1)] {
            let split = make_split(&spec, n, true).unwrap();
            let mut counts = [0usize; NUM_CONTENT];
            split.iter().for_each(|s| counts[s.content_label as usize] += 1);
            assert!(counts.iter().all(|&c| c == each), "{counts:?}");
        }
        let split = make_split(&spec, 50, true).unwrap();
        let mut counts = [0usize; NUM_CONTENT];
        split.iter().for_each(|s| counts[s.content_label as usize] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(make_split(&spec, 0, true).is_err());
    }

    #[test]
    fn splits_are_reproducible() {
        let spec = DomainSpec { base_seed: 9, ..Default::default() };
        let a = make_split(&spec, 12, false).unwrap();
        let b = make_split(&spec, 12, false).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image));
    }

    #[test]
    fn coarsening_maps() {
        assert_eq!(coarsen_label(0, 1).unwrap(), 0);
        assert_eq!(coarsen_label(3, 1).unwrap(), 1);
        assert_eq!(coarsen_label(8, 1).unwrap(), 2);
        assert_eq!(coarsen_label(5, 1).unwrap(), 3);
        assert_eq!(coarsen_label(10, 1).unwrap(), 4);
        for l in 0..11 {
            assert_eq!(coarsen_label(l, 3).unwrap(), l);
        }
        let g1: std::collections::BTreeSet<u8> = (0..11).map(|l| coarsen_label(l, 1).unwrap()).collect();
        assert_eq!(g1.len(), 5);
        let g2: std::collections::BTreeSet<u8> = (0..11).map(|l| coarsen_label(l, 2).unwrap()).collect();
        assert_eq!(g2.len(), 8);
        assert!(coarsen_label(2, 4).is_err());
        assert!(coarsen_label(11, 3).is_err());
    }

    #[test]
    fn target_domains_shift_parameters() {
        let base = DomainSpec { base_seed: 5, ..Default::default() };
        let targets = make_target_domains(&base, 4).unwrap();
        assert_eq!(targets.len(), 4);
        for (i, a) in targets.iter().enumerate() {
            for b in &targets[i + 1..] {
                assert_ne!(a.name, b.name);
                assert_ne!(a.base_seed, b.base_seed);
            }
            assert_ne!(a.base_seed, base.base_seed);
            for m in a.render.brightness {
                assert!(base.render.brightness.iter().all(|&bm| bm != m));
            }
            assert!(a.render.textures.iter().all(|t| !base.render.textures.contains(t)));
        }
        assert_eq!(make_target_domains(&base, 4).unwrap(), targets);
        assert!(make_target_domains(&base, 0).is_err());
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::default();
        let split = make_split(&spec, 5, true).unwrap();
        save_split(dir.path(), &spec, true, &split).unwrap();
        let (spec2, loaded) = load_split(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(loaded, split);
        assert!(loaded.iter().zip(&split).all(|(a, b)| a.image == b.image && a.mask == b.mask));
    }
}
