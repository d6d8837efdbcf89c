use fasq_core::fusion::cue_loss;
use fasq_core::gradcheck::{tiny_config, tiny_model};
use fasq_core::graph::{cue_elem, Graph};
use fasq_core::lmhead::HeadMode;
use fasq_core::model::{LossTerms, LossWeights};
use fasq_core::params::{ParamStore, StoreKind};
use fasq_core::synthdata::{render_sample, DomainSpec, Sample, StyleSpec, NUM_CONTENT};
use fasq_core::tensor::Mat;
use fasq_core::textproto::QuestionType;
use fasq_core::train::total_loss;
use proptest::prelude::*;

fn cue_value(pred: &[f64], spoof: bool, beta: f64, continuous: bool) -> f64 {
    let store = ParamStore::<f64>::new(StoreKind::Model);
    let mut g = Graph::new(&store, None);
    let p = g.constant(Mat::from_vec(1, pred.len(), pred.to_vec()));
    let l = cue_loss(&mut g, p, spoof, beta, continuous).unwrap();
    g.value(l).data[0]
}

#[test]
fn cue_loss_hand_values() {
    assert_eq!(cue_value(&[0.0; 4], false, 0.5, false), 0.0);
    assert_eq!(cue_value(&[1.0; 4], true, 0.5, false), 0.0);
    assert_eq!(cue_elem(2.0f64, 1.0, false), 1.5);
    assert_eq!(cue_elem(0.5f64, 1.0, false), 0.25);
    assert_eq!(cue_elem(0.5f64, 1.0, true), 0.125);
    // live target 0: every element at distance 0.5
    assert_eq!(cue_value(&[0.5; 9], false, 1.0, false), 0.25);
    assert_eq!(cue_value(&[0.5; 9], false, 1.0, true), 0.125);
}

#[test]
fn cue_loss_jump_at_beta() {
    for beta in [0.1f64, 0.5, 1.0, 2.0] {
        let below = cue_elem(beta - 1e-12, beta, false);
        let at = cue_elem(beta, beta, false);
        assert!(((below - at) - beta / 2.0).abs() < 1e-9, "piecewise form jump at beta={beta}");
        let below = cue_elem(beta - 1e-12, beta, true);
        let at = cue_elem(beta, beta, true);
        assert!((below - at).abs() < 1e-9, "continuous form at beta={beta}");
    }
}

#[test]
fn cue_loss_rejects_non_positive_beta() {
    let store = ParamStore::<f64>::new(StoreKind::Model);
    let mut g = Graph::new(&store, None);
    let p = g.constant(Mat::from_vec(1, 1, vec![0.3]));
    assert!(cue_loss(&mut g, p, true, 0.0, false).is_err());
    assert!(cue_loss(&mut g, p, true, -1.0, false).is_err());
}

proptest! {
    #[test]
    fn cue_elements_are_nonnegative_and_monotone(a in 0.0f64..3.0, b in 0.0f64..3.0, beta in 0.05f64..2.0, cont in any::<bool>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (l, h) = (cue_elem(lo, beta, cont), cue_elem(hi, beta, cont));
        prop_assert!(l >= 0.0);
        prop_assert!(cont == false || l <= h);
        // the printed form drops at d = beta but is monotone on each side
        prop_assert!(!( (lo < beta) == (hi < beta) ) || l <= h);
        prop_assert_eq!(cue_elem(0.0, beta, cont), 0.0);
    }
}

fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    let spec = DomainSpec { image_size: tiny_config().encoder.image_size, base_seed: seed, ..DomainSpec::default() };
    (0..n).map(|i| render_sample(((i as u64 * 7 + seed) % NUM_CONTENT as u64) as u8, StyleSpec::from_index(i), &spec, i).unwrap()).collect()
}

fn recombine(t: &LossTerms) -> f64 {
    0.4 * t.content + 0.4 * t.style + 0.15 * t.cls + 0.05 * t.cue
}

#[test]
fn default_weights_sum_to_one() {
    let w = LossWeights::default();
    let ones = LossTerms { content: 1.0, style: 1.0, cls: 1.0, cue: 1.0 };
    assert!((w.combine(&ones) - 1.0).abs() < 1e-15);
    let only_cls = LossWeights { content: 0.0, style: 0.0, cls: 1.0, cue: 0.0 };
    let t = LossTerms { content: 3.0, style: 2.0, cls: 0.7, cue: 9.0 };
    assert_eq!(only_cls.combine(&t), 0.7);
}

#[test]
fn reported_total_is_the_weighted_sum_of_terms() {
    let model = tiny_model(&tiny_config(), 11).unwrap();
    let w = LossWeights::default();
    for b in 0..100u64 {
        let data = tiny_samples(1 + (b as usize % 4), 100 + b);
        let batch: Vec<&Sample> = data.iter().collect();
        let r = total_loss(&model, &batch, &w, b, 5, None).unwrap();
        assert!((r.total - recombine(&r.terms)).abs() <= 1e-7, "batch {b}");
        assert!(r.terms.content > 0.0 && r.terms.style > 0.0 && r.terms.cls > 0.0 && r.terms.cue > 0.0);
    }
}

#[test]
fn disabled_terms_contribute_zero() {
    let mut cfg = tiny_config();
    cfg.cue = false;
    cfg.content_branch = false;
    let model = tiny_model(&cfg, 12).unwrap();
    let data = tiny_samples(3, 7);
    let batch: Vec<&Sample> = data.iter().collect();
    let r = total_loss(&model, &batch, &LossWeights::default(), 0, 0, None).unwrap();
    assert_eq!(r.terms.cue, 0.0);
    assert_eq!(r.terms.content, 0.0);
    assert!((r.total - (0.4 * r.terms.style + 0.15 * r.terms.cls)).abs() <= 1e-12);
}

#[test]
fn untrained_classifier_loss_is_ln_two() {
    let model = tiny_model(&tiny_config(), 13).unwrap();
    let data = tiny_samples(2, 3);
    let batch: Vec<&Sample> = data.iter().collect();
    let r = total_loss(&model, &batch, &LossWeights::default(), 0, 0, None).unwrap();
    assert!((r.terms.cls - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn uniform_classification_head_loss_is_ln_options() {
    let mut cfg = tiny_config();
    cfg.head_mode = HeadMode::ClsHead;
    let mut model = tiny_model(&cfg, 14).unwrap();
    for e in model.store.entries_mut() {
        if e.name.starts_with("cls_heads") {
            e.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let s = &tiny_samples(1, 2)[0];
    let mut g = model.graph();
    let (_, vars) = model.sample_losses(&mut g, s, 0).unwrap();
    let t = vars.values(&g);
    assert!((t.content - (QuestionType::Content.num_options(3) as f64).ln()).abs() < 1e-12);
    assert!((t.content - 11f64.ln()).abs() < 1e-12);
    assert!((t.style - (4f64.ln() + 2f64.ln() + 3f64.ln())).abs() < 1e-12);
}

#[test]
fn uniform_language_model_loss_is_ln_vocabulary() {
    let mut model = tiny_model(&tiny_config(), 15).unwrap();
    let v = model.vocab.len() as f64;
    let (lm, store) = model.lm.as_mut().unwrap();
    for id in [lm.head.w, lm.head.b.unwrap()] {
        store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let s = &tiny_samples(1, 4)[0];
    let mut g = model.graph();
    let (_, vars) = model.sample_losses(&mut g, s, 0).unwrap();
    let t = vars.values(&g);
    assert!((t.content - v.ln()).abs() < 1e-12);
    assert!((t.style - 3.0 * v.ln()).abs() < 1e-12);
}
