//! Browser bindings: draw a random equation, fit a skeleton's constants,
//! and run the GP baseline, all on in-page data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use symgpt::eqgen::{generate_instance, Count, GenConfig};
use symgpt::expr::{parse, Program};
use symgpt::fit::{fit_constants, FitOptions};
use symgpt::gp::{gp_regress, GpConfig};
use symgpt::infer::score;

fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn check_points(x: &[f64], d: usize, y: &[f64]) -> Result<(), String> {
    if d == 0 || y.is_empty() || x.len() != d * y.len() {
        return Err(format!(
            "expected {} x values for {} points in {d} variables, got {}",
            d * y.len(),
            y.len(),
            x.len()
        ));
    }
    Ok(())
}

pub fn generate(seed: u64, num_vars: usize, n_points: usize) -> Result<String, String> {
    let cfg = GenConfig {
        num_vars: Count::Fixed(num_vars),
        n_points: Count::Fixed(n_points),
        seed,
        ..GenConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let inst = generate_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(seed), |_| true)
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "equation": inst.expr.to_infix_string(),
        "skeleton": inst.skeleton,
        "d": inst.d,
        "n": inst.n,
        "x": inst.x,
        "y": inst.y,
    })
    .to_string())
}

pub fn fit(
    skeleton: &str,
    x: &[f64],
    d: usize,
    y: &[f64],
    restarts: usize,
    seed: u64,
) -> Result<String, String> {
    check_points(x, d, y)?;
    let sk = parse(skeleton).map_err(|e| e.to_string())?;
    if sk.max_var() > d {
        return Err(format!(
            "skeleton uses x{} but the data has {d} variables",
            sk.max_var()
        ));
    }
    let opts = FitOptions {
        restarts,
        seed,
        ..FitOptions::default()
    };
    let r = fit_constants(&sk, x, d, y, &opts);
    Ok(json!({
        "equation": r.expr.to_infix_string(),
        "constants": r.constants,
        "mse_n": finite(score(&r.expr, x, d, y)),
        "status": format!("{:?}", r.status),
        "restarts": r.restarts,
    })
    .to_string())
}

pub fn gp(
    x: &[f64],
    d: usize,
    y: &[f64],
    population: usize,
    generations: usize,
    seed: u64,
) -> Result<String, String> {
    check_points(x, d, y)?;
    let cfg = GpConfig {
        population,
        generations,
        seed,
        ..GpConfig::default()
    };
    let r = gp_regress(x, d, y, &cfg)?;
    Ok(json!({
        "equation": r.expr.to_infix_string(),
        "mse_n": finite(score(&r.expr, x, d, y)),
        "trace": r.trace.iter().map(|v| finite(*v)).collect::<Vec<_>>(),
    })
    .to_string())
}

/// Evaluates `equation` at each row of `x`; undefined points become NaN.
pub fn eval(equation: &str, x: &[f64], d: usize) -> Result<Vec<f64>, String> {
    let e = parse(equation).map_err(|e| e.to_string())?;
    let p = Program::compile(&e);
    Ok(x.chunks(d.max(1))
        .map(|row| p.eval_point(row, &[]).unwrap_or(f64::NAN))
        .collect())
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// JSON `{equation, skeleton, d, n, x, y}` for a random equation on `[-3, 3]^d`.
#[wasm_bindgen]
pub fn generate_equation(seed: u64, num_vars: usize, n_points: usize) -> Result<String, JsError> {
    generate(seed, num_vars, n_points).map_err(js)
}

/// JSON `{equation, constants, mse_n, status, restarts}`.
#[wasm_bindgen]
pub fn fit_skeleton(
    skeleton: &str,
    x: &[f64],
    d: usize,
    y: &[f64],
    restarts: usize,
    seed: u64,
) -> Result<String, JsError> {
    fit(skeleton, x, d, y, restarts, seed).map_err(js)
}

/// JSON `{equation, mse_n, trace}`.
#[wasm_bindgen]
pub fn run_gp(
    x: &[f64],
    d: usize,
    y: &[f64],
    population: usize,
    generations: usize,
    seed: u64,
) -> Result<String, JsError> {
    gp(x, d, y, population, generations, seed).map_err(js)
}

#[wasm_bindgen]
pub fn evaluate(equation: &str, x: &[f64], d: usize) -> Result<Vec<f64>, JsError> {
    eval(equation, x, d).map_err(js)
}
