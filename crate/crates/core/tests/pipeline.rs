mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use symgpt::bench::{self, Method, ResultRow, Solvers};
use symgpt::eqgen::{generate_instances, Count, Domain, GenConfig, Instance};
use symgpt::expr::Vocabulary;
use symgpt::gp::GpConfig;
use symgpt::infer::{infer, InferConfig};
use symgpt::model::Model;
use symgpt::train::{train, RunFiles, TrainConfig};

fn test_set(count: usize) -> Vec<Instance> {
    let cfg = GenConfig {
        n_points: Count::Fixed(20),
        x_domain: Domain::two_sided(3.0, 5.0),
        seed: 31,
        ..GenConfig::default()
    };
    generate_instances(&cfg, count, &Default::default()).unwrap()
}

fn small_gp() -> (GpConfig, GpConfig) {
    (
        GpConfig {
            population: 40,
            generations: 3,
            ..GpConfig::standard()
        },
        GpConfig {
            population: 60,
            generations: 4,
            ..GpConfig::max()
        },
    )
}

#[test]
fn memorized_skeleton_fits_exactly() {
    let cfg = GenConfig {
        n_points: Count::Fixed(30),
        seed: 2,
        ..GenConfig::default()
    };
    let inst = generate_instances(&cfg, 1, &Default::default())
        .unwrap()
        .remove(0);
    let mut model = Model::new(common::tiny_config(3), Vocabulary::default()).unwrap();
    let data = vec![inst.clone(); 8];
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 8,
        lr: 3e-3,
        warmup_fraction: 0.0,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &data,
        &data[..1],
        &tc,
        &RunFiles::default(),
        |_, _, _| {},
    )
    .unwrap();
    let w = model.embed(&inst.x, inst.d, &inst.y).unwrap();
    assert_eq!(model.greedy(&w, 200).unwrap(), inst.skeleton);

    let ic = InferConfig {
        top_k: 1,
        ..InferConfig::default()
    };
    let p = infer(
        &model,
        &inst.x,
        inst.d,
        &inst.y,
        &ic,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(p.skeleton, inst.skeleton);
    assert!(p.mse_n < 1e-6, "{} -> {}", inst.expr, p.mse_n);
    let t = p.timing;
    assert!((t.encode + t.sample + t.fit - t.total).abs() <= 0.01 * t.total);
}

#[test]
fn exhausted_retries_give_sentinel() {
    let model = Model::new(common::tiny_config(1), Vocabulary::default()).unwrap();
    let inst = &test_set(1)[0];
    let ic = InferConfig {
        retries: 0,
        max_len: 0,
        ..InferConfig::default()
    };
    let p = infer(
        &model,
        &inst.x,
        inst.d,
        &inst.y,
        &ic,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(p.attempts, 1);
    assert!(p.failed());
    assert_eq!(p.mse_n, f64::INFINITY);
    assert_eq!(p.equation(), "");

    let ic = InferConfig {
        retries: 2,
        max_len: 0,
        ..InferConfig::default()
    };
    let p = infer(
        &model,
        &inst.x,
        inst.d,
        &inst.y,
        &ic,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(p.attempts, 3);
}

#[test]
fn sampled_inference_is_seeded() {
    let model = Model::new(common::tiny_config(4), Vocabulary::default()).unwrap();
    let inst = &test_set(1)[0];
    let ic = InferConfig {
        max_len: 12,
        ..InferConfig::default()
    };
    let run = || {
        infer(
            &model,
            &inst.x,
            inst.d,
            &inst.y,
            &ic,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        (a.skeleton, a.expr, a.attempts),
        (b.skeleton, b.expr, b.attempts)
    );
}

fn gp_rows(instances: &[Instance]) -> Vec<ResultRow> {
    let (gp, gp_max) = small_gp();
    let solvers = Solvers {
        model: None,
        infer: InferConfig::default(),
        gp,
        gp_max,
    };
    bench::run(instances, &[Method::Gp, Method::GpMax], &solvers, 7, |_| {}).unwrap()
}

#[test]
fn benchmark_rows_are_complete_and_recomputable() {
    let test = test_set(12);
    let rows = gp_rows(&test);
    assert_eq!(rows.len(), 2 * test.len());
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.instance_id, k % test.len());
        let inst = &test[r.instance_id];
        assert_eq!((r.d, r.n), (inst.d, inst.n));
        let again = r.recompute(inst);
        if r.mse_n.is_finite() {
            assert!(
                (again - r.mse_n).abs() <= 1e-10 * r.mse_n.max(1.0),
                "{} vs {}",
                again,
                r.mse_n
            );
        } else {
            assert!(again.is_infinite());
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    bench::write_rows(&path, &rows).unwrap();
    let back: Vec<ResultRow> = bench::read_rows(&path).unwrap();
    assert_eq!(back, rows);

    let strip = |rows: Vec<ResultRow>| {
        rows.into_iter()
            .map(|r| ResultRow { seconds: 0.0, ..r })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(gp_rows(&test)), strip(rows));
}

#[test]
fn model_method_requires_checkpoint() {
    let (gp, gp_max) = small_gp();
    let solvers = Solvers {
        model: None,
        infer: InferConfig::default(),
        gp,
        gp_max,
    };
    assert!(bench::run(&test_set(1), &[Method::SymbolicGpt], &solvers, 0, |_| {}).is_err());
}

#[test]
fn cumulative_curve_is_monotone() {
    let rows = gp_rows(&test_set(10));
    let curve = bench::cdf_rows(&rows, &[Method::Gp, Method::GpMax]);
    for m in [Method::Gp, Method::GpMax] {
        let pts: Vec<_> = curve.iter().filter(|c| c.method == m).collect();
        assert!(pts
            .windows(2)
            .all(|w| w[0].proportion <= w[1].proportion
                && w[0].log10_threshold < w[1].log10_threshold));
        assert_eq!(pts.last().unwrap().proportion, 1.0);
    }
    let svg = bench::cdf_chart(&curve, "test");
    assert!(svg.contains("GP Max"));
}

#[test]
fn point_count_sweep() {
    let test = test_set(3);
    let (gp, gp_max) = small_gp();
    let solvers = Solvers {
        model: None,
        infer: InferConfig::default(),
        gp,
        gp_max,
    };
    let ns = [25, 50, 100, 250, 500];
    let (summary, rows) = bench::sweep(
        &test,
        &Domain::two_sided(3.0, 5.0),
        &ns,
        &[Method::Gp],
        &solvers,
        1,
        |_| {},
    )
    .unwrap();
    assert_eq!(summary.len(), ns.len());
    assert_eq!(rows.len(), ns.len() * test.len());
    for (s, n) in summary.iter().zip(ns) {
        assert_eq!((s.n, s.instances), (n, 3));
    }
    assert!(rows
        .iter()
        .zip(ns.iter().flat_map(|n| [*n; 3]))
        .all(|(r, n)| r.n == n));
    assert!(bench::sweep_chart(&summary, "n").starts_with("<svg"));
}
