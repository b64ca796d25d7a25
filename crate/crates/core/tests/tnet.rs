mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symgpt::eqgen::{generate_instances, Count, GenConfig, Instance};
use symgpt::nn::{Graph, ParamStore};
use symgpt::tnet::{squash, PointCloudBatch, TNet, TNetConfig};

fn setup() -> (TNet, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = TNetConfig {
        d_max: 5,
        embed: 16,
        fc_hidden: 32,
    };
    let net = TNet::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(11));
    (net, store)
}

fn instances(count: usize) -> Vec<Instance> {
    let cfg = GenConfig {
        num_vars: Count::Range([1, 4]),
        n_points: Count::Range([5, 40]),
        seed: 21,
        ..GenConfig::default()
    };
    generate_instances(&cfg, count, &Default::default()).unwrap()
}

fn embed(net: &TNet, store: &ParamStore, x: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let mut b = PointCloudBatch::new(5);
    b.push(x, d, y).unwrap();
    let mut g = Graph::new();
    let w = net.encode(&mut g, store, &b).unwrap();
    g.value(w).data().to_vec()
}

fn rows(inst: &Instance, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let x = order.iter().flat_map(|&i| inst.row(i).to_vec()).collect();
    let y = order.iter().map(|&i| inst.y[i]).collect();
    (x, y)
}

#[test]
fn permutation_invariance() {
    let (net, store) = setup();
    let mut rng = common::rng(1);
    for inst in instances(100) {
        let base = embed(&net, &store, &inst.x, inst.d, &inst.y);
        let mut order: Vec<usize> = (0..inst.n).collect();
        for _ in 0..10 {
            order.shuffle(&mut rng);
            let (x, y) = rows(&inst, &order);
            assert_eq!(embed(&net, &store, &x, inst.d, &y), base);
        }
    }
}

#[test]
fn duplication_invariance() {
    let (net, store) = setup();
    let mut rng = common::rng(2);
    for inst in instances(100) {
        let base = embed(&net, &store, &inst.x, inst.d, &inst.y);
        let mut order: Vec<usize> = (0..inst.n).collect();
        for _ in 0..rng.gen_range(1..20) {
            order.push(rng.gen_range(0..inst.n));
        }
        order.shuffle(&mut rng);
        let (x, y) = rows(&inst, &order);
        assert_eq!(embed(&net, &store, &x, inst.d, &y), base);
    }
}

#[test]
fn zero_column_padding_invariance() {
    let (net, store) = setup();
    for inst in instances(100) {
        let base = embed(&net, &store, &inst.x, inst.d, &inst.y);
        let padded: Vec<f64> = inst
            .x
            .chunks(inst.d)
            .flat_map(|r| r.iter().copied().chain([0.0]))
            .collect();
        assert_eq!(embed(&net, &store, &padded, inst.d + 1, &inst.y), base);
    }
}

#[test]
fn batched_encoding_matches_single() {
    let (net, store) = setup();
    let insts = instances(8);
    let mut b = PointCloudBatch::new(5);
    for i in &insts {
        b.push(&i.x, i.d, &i.y).unwrap();
    }
    let mut g = Graph::new();
    let w = net.encode(&mut g, &store, &b).unwrap();
    let all = g.value(w).data().to_vec();
    for (k, i) in insts.iter().enumerate() {
        let one = embed(&net, &store, &i.x, i.d, &i.y);
        for (a, b) in one.iter().zip(&all[k * 16..(k + 1) * 16]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn gradient_reaches_every_stage() {
    let (net, store) = setup();
    let insts = instances(4);
    let mut b = PointCloudBatch::new(5);
    for i in &insts {
        b.push(&i.x, i.d, &i.y).unwrap();
    }
    let mut g = Graph::new();
    let w = net.encode(&mut g, &store, &b).unwrap();
    let p = common::project(&mut g, w, 3).unwrap();
    let grads = g.backward(p, &store).unwrap();
    for stage in net.stage_params() {
        assert!(stage
            .iter()
            .any(|id| grads[id.index()].data().iter().any(|v| *v != 0.0)));
    }
}

proptest! {
    #[test]
    fn squash_is_odd_and_monotone(a in -1e12f64..1e12, b in -1e12f64..1e12) {
        prop_assert_eq!(squash(-a), -squash(a));
        if a < b {
            prop_assert!(squash(a) <= squash(b));
        }
        prop_assert!(squash(a).abs() <= a.abs());
    }
}
