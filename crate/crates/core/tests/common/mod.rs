#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symgpt::nn::{Graph, NnError, ParamStore, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Largest norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)` over
/// all parameters, comparing backprop gradients with central differences.
pub fn gradcheck(
    store: &mut ParamStore,
    h: f64,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>,
) -> f64 {
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let l = loss(&mut g, store).unwrap();
        g.value(l).item().unwrap()
    };
    let analytic = {
        let mut g = Graph::new();
        let l = loss(&mut g, store).unwrap();
        g.backward(l, store).unwrap()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.get(id).numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let a = analytic[id.index()].data();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-6));
    }
    worst
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, NnError> {
    let shape = g.shape(out).to_vec();
    let r = uniform(&shape, -1.0, 1.0, &mut rng(seed));
    let r = g.input(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Pairs of (op name, worst relative error) for every differentiable op.
pub fn all_op_gradchecks() -> Vec<(&'static str, f64)> {
    use std::rc::Rc;
    let h = 1e-6;
    let mut results = Vec::new();
    let mut r = rng(42);

    type OpFn<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>;
    let mut run = |name: &'static str, params: Vec<Tensor>, f: OpFn| {
        let mut store = ParamStore::new();
        let ids: Vec<_> = params
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("p{i}"), t))
            .collect();
        let err = gradcheck(&mut store, h, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
            let out = f(g, &vars)?;
            project(g, out, 7)
        });
        results.push((name, err));
    };

    run(
        "matmul",
        vec![
            uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[4, 5], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.matmul(v[0], v[1]),
    );
    run(
        "matmul_bt",
        vec![
            uniform(&[3, 4], -1.0, 1.0, &mut r),
            uniform(&[5, 4], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.matmul_bt(v[0], v[1]),
    );
    run(
        "bmm",
        vec![
            uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[2, 4, 3], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.bmm(v[0], v[1], false),
    );
    run(
        "bmm_trans",
        vec![
            uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[2, 5, 4], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.bmm(v[0], v[1], true),
    );
    run(
        "add_same",
        vec![
            uniform(&[3, 4], -1.0, 1.0, &mut r),
            uniform(&[3, 4], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "add_bias",
        vec![
            uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[4], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "add_broadcast",
        vec![
            uniform(&[2, 1, 4], -1.0, 1.0, &mut r),
            uniform(&[3, 1], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "mul_broadcast",
        vec![
            uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
            uniform(&[2, 1, 4], -1.0, 1.0, &mut r),
        ],
        &|g, v| g.mul(v[0], v[1]),
    );
    run("scale", vec![uniform(&[5], -1.0, 1.0, &mut r)], &|g, v| {
        Ok(g.scale(v[0], -2.5))
    });
    run(
        "tanh",
        vec![uniform(&[3, 4], -2.0, 2.0, &mut r)],
        &|g, v| Ok(g.tanh(v[0])),
    );
    run(
        "gelu",
        vec![uniform(&[3, 4], -3.0, 3.0, &mut r)],
        &|g, v| Ok(g.gelu(v[0])),
    );
    // keep away from the kink at zero
    let relu_in = uniform(&[3, 4], 0.1, 2.0, &mut r);
    let signs = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let relu_in = Tensor::new(
        &[3, 4],
        relu_in
            .data()
            .iter()
            .zip(signs.data())
            .map(|(v, s)| v * s.signum())
            .collect(),
    )
    .unwrap();
    run("relu", vec![relu_in], &|g, v| Ok(g.relu(v[0])));
    run("exp", vec![uniform(&[3, 4], -2.0, 2.0, &mut r)], &|g, v| {
        Ok(g.exp(v[0]))
    });
    run("log", vec![uniform(&[3, 4], 0.5, 3.0, &mut r)], &|g, v| {
        Ok(g.log(v[0]))
    });
    run(
        "softmax",
        vec![uniform(&[3, 5], -2.0, 2.0, &mut r)],
        &|g, v| Ok(g.softmax(v[0])),
    );
    run(
        "layer_norm",
        vec![
            uniform(&[3, 6], -2.0, 2.0, &mut r),
            uniform(&[6], 0.5, 1.5, &mut r),
            uniform(&[6], -0.5, 0.5, &mut r),
        ],
        &|g, v| g.layer_norm(v[0], v[1], v[2]),
    );
    run(
        "masked_fill",
        vec![uniform(&[2, 3, 3], -1.0, 1.0, &mut r)],
        &|g, v| {
            let mask: Rc<[bool]> = (0..9).map(|i| i % 3 > i / 3).collect();
            let filled = g.masked_fill(v[0], mask, f64::NEG_INFINITY)?;
            Ok(g.softmax(filled))
        },
    );
    run(
        "max_axis",
        vec![uniform(&[2, 5, 3], -1.0, 1.0, &mut r)],
        &|g, v| g.max_axis(v[0], 1),
    );
    run(
        "segment_max",
        vec![uniform(&[6, 3], -1.0, 1.0, &mut r)],
        &|g, v| g.segment_max(v[0], &[0, 2, 3, 6]),
    );
    run(
        "embedding",
        vec![uniform(&[5, 3], -1.0, 1.0, &mut r)],
        &|g, v| g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]),
    );
    run(
        "cross_entropy",
        vec![uniform(&[4, 6], -2.0, 2.0, &mut r)],
        &|g, v| {
            let ce = g.cross_entropy(v[0], &[1, 99, 5, 0], 99)?;
            Ok(g.scale(ce, 1.0))
        },
    );
    run("sum", vec![uniform(&[2, 3], -1.0, 1.0, &mut r)], &|g, v| {
        let s = g.sum(v[0]);
        g.mul(s, s)
    });
    run(
        "mean",
        vec![uniform(&[2, 3], -1.0, 1.0, &mut r)],
        &|g, v| {
            let m = g.mean(v[0]);
            g.mul(m, m)
        },
    );
    run(
        "reshape",
        vec![uniform(&[2, 6], -1.0, 1.0, &mut r)],
        &|g, v| g.reshape(v[0], &[3, 4]),
    );
    run(
        "swap_axes12",
        vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut r)],
        &|g, v| g.swap_axes12(v[0]),
    );
    results
}

pub fn tiny_config(seed: u64) -> symgpt::model::ModelConfig {
    symgpt::model::ModelConfig {
        d_max: 1,
        width: 16,
        n_layers: 1,
        n_heads: 2,
        context: 64,
        seed,
        ..Default::default()
    }
}

/// Relative gradient error through encode, decoder forward and loss on a
/// 2-point instance with a 3-token decoder input.
pub fn end_to_end_gradcheck() -> f64 {
    use symgpt::eqgen::Instance;
    use symgpt::expr::{Expr, Vocabulary};
    use symgpt::model::{Model, ModelConfig};

    let cfg = ModelConfig {
        d_max: 1,
        width: 8,
        n_layers: 1,
        n_heads: 2,
        context: 8,
        seed: 5,
        ..Default::default()
    };
    let mut model = Model::new(cfg, Vocabulary::default()).unwrap();
    let mut r = rng(8);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
    }
    let inst = Instance {
        d: 1,
        n: 2,
        x: vec![0.3, -1.2],
        y: vec![0.7, 2.5],
        expr: Expr::var(1),
        skeleton: "x1".into(),
    };
    let points = model.point_batch(&[&inst]).unwrap();
    let tokens = model.token_batch(&["x1"]).unwrap();
    assert_eq!(tokens.seq, 3);
    let (tnet, gpt) = (model.tnet.clone(), model.gpt.clone());
    let v = model.vocab.len();
    gradcheck(&mut model.store, 1e-6, |g, s| {
        let w = tnet.encode(g, s, &points)?;
        let logits = gpt.forward(g, s, w, &tokens.inputs, tokens.batch, tokens.seq, None)?;
        let logits = g.reshape(logits, &[tokens.seq, v])?;
        g.cross_entropy(logits, &tokens.targets, Vocabulary::PAD)
    })
}

/// Straight-line normalized MSE: mean squared residual over `‖y + ε·1‖₂`.
pub fn mse_n_oracle(y: &[f64], y_hat: &[f64]) -> f64 {
    let mut sq = 0.0;
    let mut norm = 0.0;
    for i in 0..y.len() {
        let r = y[i] - y_hat[i];
        sq += r * r;
        let g = y[i] + 1e-8;
        norm += g * g;
    }
    (sq / y.len() as f64) / norm.sqrt()
}

/// Worst relative disagreement between `mse_n` and the oracle on random pairs.
pub fn mse_n_oracle_gap(pairs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let n = r.gen_range(1..300);
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let y: Vec<f64> = (0..n).map(|_| scale * r.gen_range(-1.0..1.0)).collect();
        let y_hat: Vec<f64> = y
            .iter()
            .map(|v| v + scale * r.gen_range(-0.5..0.5))
            .collect();
        let a = symgpt::fit::mse_n(&y, &y_hat).unwrap();
        let b = mse_n_oracle(&y, &y_hat);
        worst = worst.max((a - b).abs() / b.abs().max(1.0));
    }
    worst
}

/// Least-squares slope and intercept of `y ≈ a·x + b`.
pub fn least_squares_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let a = sxy / sxx;
    (a, my - a * mx)
}
