//! Central finite-difference verification of analytic gradients (float64).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::error::{reject, Result};
use crate::graph::{Graph, Var};
use crate::lmhead::{HeadMode, LmConfig, TinyLm};
use crate::model::{LossWeights, Model, ModelConfig};
use crate::params::{derive_seed, rng_for, GradBuffer, ParamId, ParamStore, StoreKind};
use crate::synthdata::{render_sample, DomainSpec, Sample, StyleSpec};
use crate::tensor::Mat;
use crate::textproto::Vocabulary;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so that coordinates with vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: String,
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn new(component: impl Into<String>, checks: Vec<CoordCheck>, tolerance: f64) -> Self {
        let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
        Self { component: component.into(), checks, max_rel_err, tolerance }
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.max_rel_err <= self.tolerance
    }

    /// Coordinates whose error exceeds the tolerance.
    pub fn offenders(&self) -> Vec<&CoordCheck> {
        self.checks.iter().filter(|c| c.rel_err > self.tolerance).collect()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks `trials` (parameter, flat index) pairs uniformly over the scalars of `params`.
pub fn sample_coords(store: &ParamStore<f64>, params: &[ParamId], trials: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = params.iter().map(|&p| store.get(p).len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Vec::new();
    }
    let mut rng = rng_for(seed, "gradcheck-coords");
    (0..trials)
        .map(|_| {
            let mut r = rng.gen_range(0..total);
            for (i, &s) in sizes.iter().enumerate() {
                if r < s {
                    return (params[i], r);
                }
                r -= s;
            }
            unreachable!()
        })
        .collect()
}

/// Compares analytic and central-difference gradients of the scalar built by `loss`
/// at the given model-store coordinates. `lm` is read-only and never perturbed.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    lm: Option<&ParamStore<f64>>,
    coords: &[(ParamId, usize)],
    h: f64,
    loss: F,
) -> Result<Vec<CoordCheck>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut grads = GradBuffer::zeros_like(store);
    {
        let mut g = Graph::new(store, lm);
        let l = loss(&mut g)?;
        if g.shape(l) != (1, 1) {
            return reject("gradcheck loss must be a scalar");
        }
        let gr = g.backward(l);
        g.accumulate(&gr, &mut grads, None);
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, lm);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut out = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        if store.entry(id).frozen {
            continue;
        }
        let orig = store.get(id).data[i];
        store.get_mut(id).data[i] = orig + h;
        let plus = eval(store)?;
        store.get_mut(id).data[i] = orig - h;
        let minus = eval(store)?;
        store.get_mut(id).data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).data[i];
        out.push(CoordCheck {
            param: store.entry(id).name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(out)
}

/// Same comparison for the entries of a graph input.
pub fn check_input<F>(
    store: &ParamStore<f64>,
    lm: Option<&ParamStore<f64>>,
    input: &Mat<f64>,
    trials: usize,
    h: f64,
    seed: u64,
    loss: F,
) -> Result<Vec<CoordCheck>>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let analytic_grad = {
        let mut g = Graph::new(store, lm);
        let x = g.input(input.clone(), true);
        let l = loss(&mut g, x)?;
        let gr = g.backward(l);
        gr.of(x).cloned().unwrap_or_else(|| Mat::zeros(input.rows, input.cols))
    };
    let eval = |m: &Mat<f64>| -> Result<f64> {
        let mut g = Graph::new(store, lm);
        let x = g.input(m.clone(), true);
        let l = loss(&mut g, x)?;
        Ok(g.value(l).item())
    };
    let mut rng = rng_for(seed, "gradcheck-input");
    let mut out = Vec::with_capacity(trials);
    let mut x = input.clone();
    for _ in 0..trials {
        let i = rng.gen_range(0..x.len());
        let orig = x.data[i];
        x.data[i] = orig + h;
        let plus = eval(&x)?;
        x.data[i] = orig - h;
        let minus = eval(&x)?;
        x.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = analytic_grad.data[i];
        out.push(CoordCheck { param: "input".into(), index: i, analytic, numeric, rel_err: rel_err(analytic, numeric) });
    }
    Ok(out)
}

/// Adds small Gaussian noise to every trainable entry so that zero-initialised
/// projections do not hide gradient paths during a check.
pub fn jitter_params(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = rng_for(seed, "gradcheck-jitter");
    for e in store.entries_mut() {
        if e.frozen {
            continue;
        }
        for v in e.value.data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

/// Relative-error bound the suite is held to.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// A small float64 configuration that still exercises every component.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.encoder = EncoderConfig { image_size: 16, patch_size: 8, depth: 2, width: 8, heads: 2, ffn_mult: 2 };
    c.qformer.depth = 1;
    c.qformer.heads = 2;
    c.qformer.num_queries = 2;
    c.lm = LmConfig { width: 8, depth: 1, heads: 2, ffn_mult: 2, max_len: 40, max_answer_len: 12 };
    c.fusion.heads = 2;
    c.fusion.cue_grid = 4;
    c.fusion.cue_channels = 2;
    c
}

/// Fresh float64 model; the frozen language model is randomly initialised.
pub fn tiny_model(cfg: &ModelConfig, seed: u64) -> Result<Model<f64>> {
    let vocab = Vocabulary::build();
    let lm = if cfg.uses_lm() {
        let mut store = ParamStore::<f64>::new(StoreKind::Lm);
        let lm = TinyLm::new(&mut store, &cfg.lm, vocab.len(), derive_seed(seed, "lm"))?;
        store.freeze_all();
        Some((lm, store))
    } else {
        None
    };
    Model::new(cfg, &vocab, lm, seed)
}

fn suite_sample(cfg: &ModelConfig, label: u8) -> Result<Sample> {
    let spec = DomainSpec { image_size: cfg.encoder.image_size, ..DomainSpec::default() };
    render_sample(label, StyleSpec::from_index(5), &spec, 3)
}

#[derive(Clone, Copy)]
enum Term {
    Objective,
    Content,
    Style,
    Cls,
    Cue,
}

fn term_loss(model: &Model<f64>, g: &mut Graph<'_, f64>, sample: &Sample, term: Term) -> Result<Var> {
    let (_, vars) = model.sample_losses(g, sample, 11)?;
    let pick = match term {
        Term::Objective => vars.weighted(g, &LossWeights::default(), 1.0),
        Term::Content => vars.content,
        Term::Style => vars.style,
        Term::Cls => vars.cls,
        Term::Cue => vars.cue,
    };
    pick.ok_or_else(|| crate::Error::Rejected("loss term is disabled in this configuration".into()))
}

/// Checks `trials` coordinates of the parameters whose names satisfy `select`.
fn check_component(
    component: &str,
    model: &mut Model<f64>,
    select: &dyn Fn(&str) -> bool,
    term: Term,
    label: u8,
    trials: usize,
    seed: u64,
) -> Result<Vec<CoordCheck>> {
    let sample = suite_sample(&model.cfg, label)?;
    let mut store = std::mem::replace(&mut model.store, ParamStore::new(StoreKind::Model));
    let params: Vec<ParamId> = store.ids().filter(|&id| !store.entry(id).frozen && select(&store.entry(id).name)).collect();
    if params.is_empty() {
        model.store = store;
        return reject(format!("no trainable parameters selected for {component}"));
    }
    let coords = sample_coords(&store, &params, trials, derive_seed(seed, component));
    let m: &Model<f64> = model;
    let out = check_params(&mut store, m.lm_store(), &coords, DEFAULT_STEP, |g| term_loss(m, g, &sample, term));
    model.store = store;
    out
}

/// Gradient checks for every differentiable component and each loss term.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let cfg = tiny_config();
    let mut model = tiny_model(&cfg, seed)?;
    jitter_params(&mut model.store, 0.05, seed);
    let mut cls_cfg = cfg.clone();
    cls_cfg.head_mode = HeadMode::ClsHead;
    let mut cls_model = tiny_model(&cls_cfg, seed)?;
    jitter_params(&mut cls_model.store, 0.05, seed);

    type Sel = fn(&str) -> bool;
    let components: [(&str, Sel); 7] = [
        ("embeddings", |n| {
            ["encoder.patch", "encoder.cls", "encoder.pos"].iter().any(|p| n.starts_with(p)) || n.ends_with(".queries") || n.ends_with(".token_embed")
        }),
        ("encoder", |n| n.starts_with("encoder.block") || n.starts_with("encoder.ln_f")),
        ("msa", |n| n.contains(".msa.")),
        ("mca", |n| n.contains(".mca.")),
        ("ffn", |n| n.contains(".ffn.") || n.contains(".ln_ffn")),
        ("fusion", |n| n.starts_with("fusion.block") || n.starts_with("fusion.classifier") || n.ends_with("_placeholder")),
        ("cue", |n| n.starts_with("fusion.cue")),
    ];
    let mut reports = Vec::new();
    for (i, (name, sel)) in components.iter().enumerate() {
        // alternate live and spoof samples across components
        let label = if i % 2 == 0 { 7 } else { 0 };
        let checks = check_component(name, &mut model, sel, Term::Objective, label, trials, seed)?;
        reports.push(GradcheckReport::new(*name, checks, SUITE_TOLERANCE));
    }

    let half = trials.div_ceil(2);
    let mut heads = check_component("heads", &mut model, &|n| n.ends_with(".project.w") || n.ends_with(".project.b"), Term::Content, 4, half, seed)?;
    heads.extend(check_component("heads", &mut cls_model, &|n| n.starts_with("cls_heads"), Term::Objective, 4, trials - half, seed)?);
    reports.push(GradcheckReport::new("heads", heads, SUITE_TOLERANCE));

    let all = |_: &str| true;
    for (name, term) in [("loss_content", Term::Content), ("loss_style", Term::Style), ("loss_cls", Term::Cls)] {
        let checks = check_component(name, &mut model, &all, term, 9, trials, seed)?;
        reports.push(GradcheckReport::new(name, checks, SUITE_TOLERANCE));
    }
    // the printed cue loss has a jump at d = beta; probe both sides of it
    let mut cue = Vec::new();
    for (beta, label) in [(0.3, 2u8), (0.8, 0u8)] {
        model.cfg.fusion.cue_beta = beta;
        cue.extend(check_component("loss_cue", &mut model, &all, Term::Cue, label, trials / 2, seed ^ label as u64)?);
    }
    model.cfg.fusion.cue_beta = cfg.fusion.cue_beta;
    reports.push(GradcheckReport::new("loss_cue", cue, SUITE_TOLERANCE));

    let sample = suite_sample(&cfg, 8)?;
    let image = model.encoder.image_matrix::<f64>(&sample.image)?;
    let m = &model;
    let input = check_input(&m.store, m.lm_store(), &image, trials, DEFAULT_STEP, seed, |g, x| {
        let f = m.forward_var(g, x, true, 5)?;
        Ok(g.cross_entropy(f.logits, &[1]))
    })?;
    reports.push(GradcheckReport::new("image_input", input, SUITE_TOLERANCE));
    Ok(reports)
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn suite_passes_at_tolerance() {
        let reports = run_suite(24, 3).unwrap();
        for r in &reports {
            let nz = r.checks.iter().filter(|c| c.analytic.abs() > 1e-9).count();
            assert!(nz * 2 > r.checks.len(), "{} has mostly zero gradients", r.component);
            assert!(r.passed(), "{r:?}");
        }
    }
}
