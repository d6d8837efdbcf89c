use fasq_core::backbone::{style_feature, FeaturePyramid, STYLE_EPS};
use fasq_core::fusion::{fake_score, Fusion, FusionConfig};
use fasq_core::gradcheck::{tiny_config, tiny_model};
use fasq_core::graph::Graph;
use fasq_core::lmhead::HeadMode;
use fasq_core::params::{rng_for, GradBuffer, Init, ParamStore, StoreKind};
use fasq_core::qformer::{Branch, BranchId, Mca, Msa, QFormerConfig};
use fasq_core::synthdata::{render_sample, DomainSpec, Sample, StyleSpec};
use fasq_core::tensor::Mat;
use proptest::prelude::*;
use rand::Rng;

fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    let mut rng = rng_for(seed, "test-mat");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn tiny_sample(label: u8, index: usize) -> Sample {
    let spec = DomainSpec { image_size: tiny_config().encoder.image_size, ..DomainSpec::default() };
    render_sample(label, StyleSpec::from_index(index), &spec, index).unwrap()
}

#[test]
fn qformer_is_identity_with_zero_output_projections() {
    let cfg = QFormerConfig { depth: 2, heads: 2, num_queries: 4, ffn_mult: 2, zero_init_residual: true };
    let mut store = ParamStore::<f64>::new(StoreKind::Model);
    let branch = Branch::new(&mut Init::new(&mut store, 1, ""), BranchId::Content, &cfg, 8, 20, 8).unwrap();
    let mut g = Graph::new(&store, None);
    let t = g.constant(random_mat(9, 8, 2));
    let f = g.constant(random_mat(5, 8, 3));
    let out = branch.forward(&mut g, t, f).unwrap();
    let q = store.get(branch.queries);
    assert_eq!(g.shape(out.hidden), (13, 8));
    assert_eq!(g.value(out.processed_queries), q);
    assert_eq!(&g.value(out.hidden).data[..32], &q.data[..]);
    assert_eq!(&g.value(out.hidden).data[32..], &random_mat(9, 8, 2).data[..]);
}

#[test]
fn fusion_is_identity_with_zero_output_projections() {
    let cfg = FusionConfig { heads: 2, zero_init_residual: true, ..FusionConfig::default() };
    let mut store = ParamStore::<f64>::new(StoreKind::Model);
    let fusion = Fusion::new(&mut Init::new(&mut store, 4, ""), 8, 4, &cfg, true, true, true).unwrap();
    let mut g = Graph::new(&store, None);
    let qc = g.constant(random_mat(4, 8, 5));
    let qs = g.constant(random_mat(4, 8, 6));
    let fc = g.constant(random_mat(5, 8, 7));
    let fused = fusion.fuse(&mut g, qc, qs, fc).unwrap();
    let mut expect = random_mat(4, 8, 5).data;
    expect.extend(random_mat(4, 8, 6).data);
    assert_eq!(g.value(fused.q_hat).data, expect);
    assert_eq!(g.shape(fused.t_cls), (1, 8));
    assert_eq!(g.shape(fused.t_cue), (7, 8));
}

#[test]
fn fusion_rejects_mismatched_query_sets() {
    let mut store = ParamStore::<f64>::new(StoreKind::Model);
    let cfg = FusionConfig { heads: 2, ..FusionConfig::default() };
    let fusion = Fusion::new(&mut Init::new(&mut store, 4, ""), 8, 4, &cfg, false, true, true).unwrap();
    let mut g = Graph::new(&store, None);
    let qc = g.constant(random_mat(3, 8, 5));
    let qs = g.constant(random_mat(4, 8, 6));
    let fc = g.constant(random_mat(5, 8, 7));
    assert!(fusion.fuse(&mut g, qc, qs, fc).is_err());
}

#[test]
fn attention_rows_are_distributions_and_single_keys_pass_through() {
    let mut store = ParamStore::<f64>::new(StoreKind::Model);
    let (msa, mca) = {
        let mut init = Init::new(&mut store, 8, "");
        (Msa::new(&mut init, "msa", 8, 2, false), Mca::new(&mut init, "mca", 8, 2, false))
    };
    let mut g = Graph::new(&store, None);
    for n in [4, 16] {
        let h = g.constant(random_mat(n, 8, n as u64));
        let (out, node) = msa.forward(&mut g, h);
        assert_eq!(g.shape(out), (n, 8));
        let (p, heads) = g.attention_probs(node).unwrap();
        assert_eq!(heads, 2);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let h = g.constant(random_mat(6, 8, 1));
    let f = g.constant(random_mat(1, 8, 2));
    let (out, node) = mca.forward(&mut g, h, f).unwrap();
    assert_eq!(g.shape(out), (6, 8));
    assert!(g.attention_probs(node).unwrap().0.iter().all(|&p| p == 1.0));
    let wrong = g.constant(random_mat(3, 6, 3));
    assert!(mca.forward(&mut g, h, wrong).is_err());
}

fn style_of(levels: &[Mat<f64>]) -> Mat<f64> {
    let store = ParamStore::<f64>::new(StoreKind::Model);
    let mut g = Graph::new(&store, None);
    let levels = levels.iter().map(|m| g.constant(m.clone())).collect();
    let v = style_feature(&mut g, &FeaturePyramid { levels });
    g.value(v).clone()
}

#[test]
fn style_feature_has_two_rows_per_level() {
    let levels: Vec<_> = (0..4).map(|i| random_mat(17, 32, i)).collect();
    let s = style_of(&levels);
    assert_eq!((s.rows, s.cols), (8, 32));
}

#[test]
fn style_feature_of_a_constant_level() {
    let mut m = Mat::from_vec(5, 3, vec![0.7; 15]);
    m.data[0] = -4.0; // class token is excluded
    let s = style_of(&[m.clone(), m]);
    for c in 0..3 {
        assert!((s.data[c] - 0.7).abs() < 1e-12);
        assert!((s.data[3 + c] - STYLE_EPS.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn style_feature_rows_are_level_local() {
    let mut levels: Vec<_> = (0..3).map(|i| random_mat(9, 4, 10 + i)).collect();
    let before = style_of(&levels);
    levels[1] = random_mat(9, 4, 99);
    let after = style_of(&levels);
    for r in 0..6 {
        let same = before.row(r) == after.row(r);
        assert_eq!(same, !(r == 2 || r == 3), "row {r}");
    }
}

proptest! {
    #[test]
    fn style_feature_ignores_patch_order(seed in 0u64..1000, shuffle in 0u64..1000) {
        let levels: Vec<_> = (0..3).map(|i| random_mat(9, 6, seed * 7 + i)).collect();
        let mut rng = rng_for(shuffle, "perm");
        let permuted: Vec<_> = levels.iter().map(|m| {
            let mut rows: Vec<usize> = (1..m.rows).collect();
            rand::seq::SliceRandom::shuffle(&mut rows[..], &mut rng);
            let mut data = m.row(0).to_vec();
            for r in rows {
                data.extend_from_slice(m.row(r));
            }
            Mat::from_vec(m.rows, m.cols, data)
        }).collect();
        let a = style_of(&levels);
        let b = style_of(&permuted);
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn fake_and_real_scores_sum_to_one(a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let fake = fake_score(&[a, b]);
        let real = fake_score(&[b, a]);
        prop_assert!((fake + real - 1.0).abs() <= 1e-6);
        prop_assert!((0.0..=1.0).contains(&fake));
    }
}

#[test]
fn equal_logits_score_one_half() {
    assert_eq!(fake_score(&[1.5f64, 1.5]), 0.5);
}

#[test]
fn encoder_shapes() {
    let model = tiny_model(&tiny_config(), 1).unwrap();
    let mut g = model.graph();
    let s = tiny_sample(3, 0);
    let x = g.constant(model.encoder.image_matrix::<f64>(&s.image).unwrap());
    let f = model.encoder.features(&mut g, x).unwrap();
    let c = &model.cfg.encoder;
    assert_eq!(f.pyramid.levels.len(), c.depth);
    assert_eq!(g.shape(f.f_c), (c.num_tokens(), c.width));
    assert_eq!(g.shape(f.f_s), (2 * c.depth, c.width));
    assert!(model.encoder.image_matrix::<f64>(&[0.0; 5]).is_err());
}

#[test]
fn frozen_lm_receives_no_gradient() {
    let model = tiny_model(&tiny_config(), 2).unwrap();
    let lm_store = model.lm_store().unwrap();
    let mut model_grads = model.zero_grads();
    let mut lm_grads = GradBuffer::zeros_like(lm_store);
    let mut g = model.graph();
    let (_, vars) = model.sample_losses(&mut g, &tiny_sample(5, 1), 3).unwrap();
    let obj = vars.weighted(&mut g, &Default::default(), 1.0).unwrap();
    let grads = g.backward(obj);
    g.accumulate(&grads, &mut model_grads, Some(&mut lm_grads));
    assert!(model_grads.max_abs() > 0.0);
    assert_eq!(lm_grads.max_abs(), 0.0);
}

#[test]
fn content_loss_does_not_reach_the_style_branch() {
    let model = tiny_model(&tiny_config(), 3).unwrap();
    let mut buf = model.zero_grads();
    let mut g = model.graph();
    let (_, vars) = model.sample_losses(&mut g, &tiny_sample(2, 4), 3).unwrap();
    let grads = g.backward(vars.content.unwrap());
    g.accumulate(&grads, &mut buf, None);
    let mut style_touched = false;
    let mut content_touched = false;
    for id in model.store.ids() {
        let name = &model.store.entry(id).name;
        let m = buf.get(id).data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if name.starts_with("style_branch") {
            style_touched |= m != 0.0;
        }
        if name.starts_with("content_branch") {
            content_touched |= m != 0.0;
        }
    }
    assert!(content_touched);
    assert!(!style_touched);
}

#[test]
fn llm_free_scores_are_bit_identical() {
    let cfg = tiny_config();
    let mut full = tiny_model(&cfg, 4).unwrap();
    let id = full.store.find("fusion.classifier.w").unwrap();
    full.store.get_mut(id).data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
    let mut stripped = tiny_model(&cfg, 4).unwrap();
    *stripped.store.get_mut(id) = full.store.get(id).clone();
    stripped.strip_lm();
    assert!(stripped.lm.is_none());
    for i in 0..6 {
        let s = tiny_sample(i as u8 * 2, i);
        let a = full.score(&s.image).unwrap();
        let p = full.predict(&s.image, true).unwrap();
        let b = stripped.score(&s.image).unwrap();
        assert_ne!(a, 0.5);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(p.fake_score.to_bits(), a.to_bits());
        assert_eq!(p.answers.len(), 4);
    }
}

#[test]
fn head_mode_leaves_the_score_path_unchanged() {
    let cfg = tiny_config();
    let mut cls = cfg.clone();
    cls.head_mode = HeadMode::ClsHead;
    let mut a = tiny_model(&cfg, 5).unwrap();
    let mut b = tiny_model(&cls, 5).unwrap();
    // give the classifier some signal so the comparison is not vacuous
    for store in [&mut a.store, &mut b.store] {
        let id = store.find("fusion.classifier.w").unwrap();
        store.get_mut(id).data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
    }
    let s = tiny_sample(9, 2);
    let sa = a.score(&s.image).unwrap();
    assert_ne!(sa, 0.5);
    assert_eq!(sa.to_bits(), b.score(&s.image).unwrap().to_bits());
    assert!(b.lm.is_none());
    assert_eq!(b.predict(&s.image, true).unwrap().answers.len(), 4);
}

#[test]
fn untrained_models_score_one_half() {
    let model = tiny_model(&tiny_config(), 6).unwrap();
    for i in 0..4 {
        assert_eq!(model.score(&tiny_sample(i as u8, i).image).unwrap(), 0.5);
    }
}

#[test]
fn binary_variant_has_no_style_parameters() {
    let mut cfg = tiny_config();
    cfg.binary_mode = true;
    cfg.style_branch = false;
    let model = tiny_model(&cfg, 7).unwrap();
    assert!(model.store.entries().iter().all(|e| !e.name.starts_with("style_branch")));
    let mut g = model.graph();
    let (_, vars) = model.sample_losses(&mut g, &tiny_sample(0, 0), 1).unwrap();
    assert!(vars.style.is_none());
    assert_eq!(vars.values(&g).style, 0.0);
    assert_eq!(model.predict(&tiny_sample(0, 0).image, true).unwrap().answers.len(), 1);
}

#[test]
fn cue_maps_are_deterministic_at_inference_and_bounded() {
    let model = tiny_model(&tiny_config(), 8).unwrap();
    let s = tiny_sample(4, 3);
    let a = model.predict(&s.image, false).unwrap().cue_map.unwrap();
    let b = model.predict(&s.image, false).unwrap().cue_map.unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), model.cfg.fusion.cue_grid.pow(2));
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}
