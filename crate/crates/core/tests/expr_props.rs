mod common;

use proptest::prelude::*;
use rand::Rng;
use symgpt::eqgen::{
    decorate, generate_corpus, generate_instances, generate_template, insert_constants,
    instance_rng, read_jsonl, Count, GenConfig,
};
use symgpt::expr::{parse, Expr, Program, Vocabulary};

fn random_expr(seed: u64, d: usize) -> Expr {
    let cfg = GenConfig {
        num_vars: Count::Fixed(d),
        ..GenConfig::default()
    };
    let mut rng = instance_rng(seed, 0);
    let t = generate_template(cfg.max_depth);
    insert_constants(&decorate(&t, d, &cfg, &mut rng), &cfg, &mut rng).collapse_id()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn print_parse_round_trip(seed in any::<u64>(), d in 1usize..6) {
        let e = random_expr(seed, d);
        prop_assert_eq!(parse(&e.to_infix_string()).unwrap(), e);
    }

    #[test]
    fn skeletonize_is_idempotent(seed in any::<u64>(), d in 1usize..6) {
        let e = random_expr(seed, d);
        let s = e.skeletonize();
        prop_assert_eq!(s.skeletonize(), s.clone());
        prop_assert_eq!(s.size(), e.size());
        prop_assert_eq!(s.placeholder_count(), e.constants().len());
        prop_assert_eq!(parse(&s.to_infix_string()).unwrap(), s);
    }

    #[test]
    fn skeleton_tokens_round_trip(seed in any::<u64>(), d in 1usize..6) {
        let text = random_expr(seed, d).skeletonize().to_infix_string();
        let vocab = Vocabulary::default();
        let ids = vocab.encode(&text).unwrap();
        prop_assert_eq!(ids[0], Vocabulary::SOS);
        prop_assert_eq!(*ids.last().unwrap(), Vocabulary::EOS);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }

    #[test]
    fn evaluation_is_total(seed in any::<u64>(), d in 1usize..4) {
        let e = random_expr(seed, d);
        let p = Program::compile(&e);
        let mut rng = common::rng(seed);
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if let Ok(v) = e.evaluate(&x) {
                prop_assert!(v.is_finite());
                prop_assert_eq!(p.eval_point(&x, &[]).unwrap().to_bits(), v.to_bits());
            } else {
                prop_assert!(p.eval_point(&x, &[]).is_err());
            }
        }
    }
}

#[test]
fn template_node_counts() {
    for k in 1..=6 {
        let t = generate_template(k);
        assert_eq!(t.internal_count(), (1 << (k - 1)) - 1);
        assert_eq!(t.leaf_count(), 1 << (k - 1));
    }
}

#[test]
fn corpus_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        num_vars: Count::Range([1, 3]),
        n_points: Count::Range([10, 40]),
        seed: 9,
        ..GenConfig::default()
    };
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    generate_corpus(&cfg, 200, &a).unwrap();
    generate_corpus(&cfg, 200, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let back = read_jsonl(&a).unwrap();
    assert_eq!(
        back,
        generate_instances(&cfg, 200, &Default::default()).unwrap()
    );
    for inst in &back {
        let p = Program::compile(&inst.expr);
        for (i, y) in inst.y.iter().enumerate() {
            assert!(y.is_finite());
            let v = p.eval_point(inst.row(i), &[]).unwrap();
            assert!((v - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
