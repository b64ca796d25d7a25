mod common;

use symgpt::nn::{Graph, Linear, ParamStore};

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in common::all_op_gradchecks() {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn stacked_linear_layers() {
    let mut r = common::rng(3);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 3, 8, 0.5, &mut r);
    let l2 = Linear::new(&mut store, "l2", 8, 2, 0.5, &mut r);
    let x = common::uniform(&[4, 3], -1.0, 1.0, &mut r);
    let err = common::gradcheck(&mut store, 1e-6, |g: &mut Graph, s| {
        let xi = g.input(x.clone());
        let h = l1.forward(g, s, xi)?;
        let h = g.tanh(h);
        let o = l2.forward(g, s, h)?;
        g.cross_entropy(o, &[0, 1, 1, 0], usize::MAX)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn shared_parameter_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add(
        "w",
        common::uniform(&[3, 3], -1.0, 1.0, &mut common::rng(5)),
    );
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let p = g.matmul(a, b).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss, &store).unwrap();
    // d/dW sum(W·W) = 1·Wᵀ + Wᵀ·1
    let wv = store.get(w).data();
    for i in 0..3 {
        for j in 0..3 {
            let row_sum_j: f64 = (0..3).map(|k| wv[j * 3 + k]).sum();
            let col_sum_i: f64 = (0..3).map(|k| wv[k * 3 + i]).sum();
            assert!((grads[w.index()].data()[i * 3 + j] - (row_sum_j + col_sum_i)).abs() < 1e-12);
        }
    }
}
