use fasq_core::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, MODEL_BLOB};
use fasq_core::error::Error;
use fasq_core::gradcheck::{tiny_config, tiny_model};
use fasq_core::lmhead::HeadMode;
use fasq_core::optim::{AdamW, AdamWConfig, OneCycle};
use fasq_core::params::{GradBuffer, ParamStore, StoreKind};
use fasq_core::synthdata::{make_split, DomainSpec, Sample};
use fasq_core::tensor::Mat;
use fasq_core::train::{fit, TrainConfig};
use proptest::prelude::*;

fn data(n: usize) -> Vec<Sample> {
    make_split(&DomainSpec { image_size: 16, ..DomainSpec::default() }, n, true).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() }
}

#[test]
fn training_is_bit_reproducible() {
    let d = data(12);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = tiny_model(&tiny_config(), 5).unwrap();
        let s = fit(&quick(), &mut m, &d, 9, |_| {}).unwrap();
        runs.push((s.trace, m.store.content_hash()));
    }
    assert_eq!(runs[0].0.len(), 6);
    let bits = |t: &[fasq_core::train::LossReport]| t.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&runs[0].0), bits(&runs[1].0));
    assert_eq!(runs[0].1, runs[1].1);
    let mut other = tiny_model(&tiny_config(), 5).unwrap();
    fit(&quick(), &mut other, &d, 10, |_| {}).unwrap();
    assert_ne!(other.store.content_hash(), runs[0].1);
}

#[test]
fn training_leaves_the_language_model_untouched() {
    let d = data(8);
    let mut m = tiny_model(&tiny_config(), 6).unwrap();
    let s = fit(&quick(), &mut m, &d, 1, |_| {}).unwrap();
    assert!(s.lm_hash_before.is_some());
    assert_eq!(s.lm_hash_before, s.lm_hash_after);
}

#[test]
fn divergence_is_reported() {
    let cfg = TrainConfig { divergence_factor: 0.5, divergence_patience: 1, ..quick() };
    let mut m = tiny_model(&tiny_config(), 7).unwrap();
    match fit(&cfg, &mut m, &data(4), 1, |_| {}) {
        Err(Error::Diverged(msg)) => assert!(msg.contains("initial")),
        other => panic!("expected divergence, got {:?}", other.map(|s| s.steps)),
    }
}

#[test]
fn frozen_lm_mode_without_lm_is_rejected() {
    let mut m = tiny_model(&tiny_config(), 8).unwrap();
    m.strip_lm();
    assert!(fit(&quick(), &mut m, &data(4), 1, |_| {}).is_err());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(4);
    let mut m = tiny_model(&tiny_config(), 9).unwrap();
    fit(&quick(), &mut m, &d, 2, |_| {}).unwrap();
    let full = dir.path().join("full");
    save_checkpoint(&m, &full, false, serde_json::json!({"seed": 2})).unwrap();
    let back = load_checkpoint::<f64>(&full).unwrap();
    assert_eq!(back.store.content_hash(), m.store.content_hash());
    assert_eq!(back.lm_store().map(|s| s.content_hash()), m.lm_store().map(|s| s.content_hash()));
    for s in &d {
        assert_eq!(back.score(&s.image).unwrap().to_bits(), m.score(&s.image).unwrap().to_bits());
    }
    assert_eq!(read_manifest(&full).unwrap().extra["seed"], 2);

    let again = dir.path().join("again");
    save_checkpoint(&back, &again, false, serde_json::json!({"seed": 2})).unwrap();
    for f in ["manifest.json", MODEL_BLOB] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let free = dir.path().join("free");
    save_checkpoint(&m, &free, true, serde_json::Value::Null).unwrap();
    let light = load_checkpoint::<f64>(&free).unwrap();
    assert!(light.lm.is_none());
    assert!(read_manifest(&free).unwrap().llm_free);
    assert_eq!(light.score(&d[0].image).unwrap().to_bits(), m.score(&d[0].image).unwrap().to_bits());

    assert!(load_checkpoint::<f32>(&full).is_err(), "dtype mismatch");
    let mut blob = std::fs::read(full.join(MODEL_BLOB)).unwrap();
    blob[17] ^= 0x40;
    std::fs::write(full.join(MODEL_BLOB), blob).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&full), Err(Error::Corrupt(_))));
}

#[test]
fn cls_head_checkpoint_has_no_language_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.head_mode = HeadMode::ClsHead;
    let m = tiny_model(&cfg, 3).unwrap();
    save_checkpoint(&m, dir.path(), false, serde_json::Value::Null).unwrap();
    let back = load_checkpoint::<f64>(dir.path()).unwrap();
    assert!(back.lm.is_none());
    assert_eq!(back.predict(&data(1)[0].image, true).unwrap().answers.len(), 4);
}

#[test]
fn adamw_matches_a_scalar_reference() {
    let cfg = AdamWConfig::default();
    let mut store = ParamStore::<f64>::new(StoreKind::Model);
    store.add("w", Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]), true);
    store.add("b", Mat::from_vec(1, 1, vec![0.25]), false);
    let mut opt = AdamW::new(&store, cfg.clone());
    let grad_seq = [[0.3, -7.0, 1e-3, 0.8], [-0.1, 2.0, 5e-3, 0.8]];
    let mut w = [1.0, -2.0, 0.5, 0.25];
    let mut m = [0.0; 4];
    let mut v = [0.0; 4];
    for (t, gs) in grad_seq.iter().enumerate() {
        let lr = 0.01 * (t + 1) as f64;
        let mut grads = GradBuffer::zeros_like(&store);
        grads.grads[0].data.copy_from_slice(&gs[..3]);
        grads.grads[1].data[0] = gs[3];
        opt.step(&mut store, &grads, lr);
        let n = (t + 1) as i32;
        for i in 0..4 {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gs[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gs[i] * gs[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(n));
            let vh = v[i] / (1.0 - cfg.beta2.powi(n));
            if i < 3 {
                w[i] *= 1.0 - lr * cfg.weight_decay;
            }
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    let got: Vec<f64> = store.entries().iter().flat_map(|e| e.value.data.clone()).collect();
    for (g, want) in got.iter().zip(w) {
        assert!((g - want).abs() < 1e-12, "{g} vs {want}");
    }
}

proptest! {
    #[test]
    fn one_cycle_stays_between_its_bounds(total in 2usize..500, warm in 0.05f64..0.9, step in 0usize..600) {
        let s = OneCycle::new(1e-4, 5e-4, 1e-6, total, warm).unwrap();
        let lr = s.lr(step);
        prop_assert!(lr >= 1e-6 - 1e-15 && lr <= 5e-4 + 1e-15);
        prop_assert!((s.lr(0) - 1e-4).abs() < 1e-12);
    }
}
