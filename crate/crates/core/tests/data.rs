use fasq_core::synthdata::{
    coarsen_label, load_split, make_eval_split, make_split, make_target_domains, num_content_classes, render_sample, save_split,
    DomainSpec, StyleSpec, NUM_CONTENT,
};
use fasq_core::textproto::{answer_for_at, build_question_at, QuestionType, Vocabulary, BOS, EOS};
use proptest::prelude::*;

fn small() -> DomainSpec {
    DomainSpec { image_size: 16, ..DomainSpec::default() }
}

#[test]
fn eval_split_has_the_requested_live_share() {
    let s = make_eval_split(&small(), 101, 0.3).unwrap();
    let live = s.iter().filter(|x| !x.is_spoof()).count();
    assert_eq!(live, 30);
    let mut per_type = [0usize; NUM_CONTENT];
    for x in &s {
        per_type[x.content_label as usize] += 1;
    }
    let spoof = &per_type[1..];
    assert!(spoof.iter().max().unwrap() - spoof.iter().min().unwrap() <= 1, "{per_type:?}");
    assert!(make_eval_split(&small(), 10, 1.5).is_err());
    assert!(make_eval_split(&small(), 0, 0.5).is_err());
}

#[test]
fn balanced_split_covers_every_style_combination() {
    let s = make_split(&small(), NUM_CONTENT * StyleSpec::COUNT, true).unwrap();
    let mut seen = vec![0usize; StyleSpec::COUNT];
    for x in &s {
        seen[x.style.index()] += 1;
    }
    assert!(seen.iter().all(|&c| c == NUM_CONTENT));
}

#[test]
fn targets_differ_from_each_other_and_from_meta() {
    let meta = small();
    let targets = make_target_domains(&meta, 4).unwrap();
    let a = render_sample(4, StyleSpec::from_index(2), &meta, 0).unwrap();
    for (i, t) in targets.iter().enumerate() {
        assert_ne!(t.render, meta.render);
        for u in &targets[i + 1..] {
            assert_ne!(t.render, u.render);
        }
        let b = render_sample(4, StyleSpec::from_index(2), t, 0).unwrap();
        assert_ne!(a.image, b.image);
    }
    assert_eq!(make_target_domains(&meta, 4).unwrap(), targets);
}

#[test]
fn saved_split_reloads_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small();
    let s = make_eval_split(&spec, 12, 0.5).unwrap();
    save_split(dir.path(), &spec, false, &s).unwrap();
    let (spec2, s2) = load_split(dir.path()).unwrap();
    assert_eq!(spec, spec2);
    assert_eq!(s, s2);
    std::fs::write(dir.path().join("masks.u8"), [1u8; 3]).unwrap();
    assert!(load_split(dir.path()).is_err());
}

#[test]
fn unknown_spec_keys_are_rejected() {
    let bad = r#"{"name": "x", "colour": 3}"#;
    assert!(serde_json::from_str::<DomainSpec>(bad).is_err());
}

proptest! {
    #[test]
    fn coarsening_is_nested(label in 0u8..NUM_CONTENT as u8) {
        let g2 = coarsen_label(label, 2).unwrap();
        let g1 = coarsen_label(label, 1).unwrap();
        prop_assert!((g2 as usize) < num_content_classes(2));
        prop_assert!((g1 as usize) < num_content_classes(1));
        prop_assert_eq!(g1 == 0, label == 0);
        prop_assert_eq!(g2 == 0, label == 0);
        // every fine label sharing a g2 class shares its g1 class
        for other in 0..NUM_CONTENT as u8 {
            if coarsen_label(other, 2).unwrap() == g2 {
                prop_assert_eq!(coarsen_label(other, 1).unwrap(), g1);
            }
        }
    }

    #[test]
    fn rendered_pixels_and_masks_are_valid(label in 0u8..NUM_CONTENT as u8, style in 0usize..StyleSpec::COUNT, index in 0usize..1000) {
        let s = render_sample(label, StyleSpec::from_index(style), &small(), index).unwrap();
        prop_assert_eq!(s.image.len(), 16 * 16 * 3);
        prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.mask.iter().all(|&m| m == u8::from(label != 0)));
        let again = render_sample(label, StyleSpec::from_index(style), &small(), index).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn answers_round_trip_through_the_vocabulary(label in 0u8..NUM_CONTENT as u8, style in 0usize..StyleSpec::COUNT, g in 1u8..=3) {
        let vocab = Vocabulary::build();
        let sample = fasq_core::synthdata::Sample::blank(label, StyleSpec::from_index(style));
        for q in QuestionType::ALL {
            let (question, options) = build_question_at(q, g);
            let answer = answer_for_at(q, &sample, g);
            prop_assert!(options.contains(&answer));
            let toks = vocab.tokenize(&answer).unwrap();
            prop_assert_eq!(toks[0], BOS);
            prop_assert_eq!(*toks.last().unwrap(), EOS);
            prop_assert_eq!(vocab.detokenize(&toks), answer.to_lowercase());
            prop_assert!(vocab.tokenize(&question).is_ok());
            prop_assert_eq!(options.len(), q.num_options(g));
        }
    }
}
