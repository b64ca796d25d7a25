//! End-to-end inference: encode the point cloud, sample a skeleton, fit its
//! constants, score with MSE_N.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::expr::{parse, Expr, Program, Vocabulary};
use crate::fit::{fit_constants, mse_n, FitOptions, FitStatus};
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub top_k: usize,
    pub max_len: usize,
    /// Extra samples drawn after an unusable one before giving up.
    pub retries: usize,
    pub fit: FitOptions,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            top_k: 40,
            max_len: 200,
            retries: 3,
            fit: FitOptions::default(),
        }
    }
}

/// Wall-clock seconds per phase. `total` is the sum of the other three.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode: f64,
    pub sample: f64,
    pub fit: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Last sampled string, usable or not.
    pub skeleton: String,
    /// Fitted equation; `None` when every attempt failed.
    pub expr: Option<Expr>,
    /// `+∞` when every attempt failed.
    pub mse_n: f64,
    pub attempts: usize,
    pub timing: Timing,
}

impl Prediction {
    pub fn failed(&self) -> bool {
        self.expr.is_none()
    }

    pub fn equation(&self) -> String {
        self.expr
            .as_ref()
            .map(|e| e.to_infix_string())
            .unwrap_or_default()
    }
}

/// Phase stopwatch on a single clock so the phases tile the total exactly.
struct Clock {
    start: Instant,
    last: Instant,
}

impl Clock {
    fn new() -> Clock {
        let now = Instant::now();
        Clock {
            start: now,
            last: now,
        }
    }

    fn lap(&mut self, slot: &mut f64) {
        let now = Instant::now();
        *slot += (now - self.last).as_secs_f64();
        self.last = now;
    }
}

/// Scores `expr` on `(x, y)`; `+∞` if it cannot be evaluated everywhere.
pub fn score(expr: &Expr, x: &[f64], d: usize, y: &[f64]) -> f64 {
    match Program::compile(expr).eval_rows(x, d, &[]) {
        Ok(pred) => mse_n(y, &pred).unwrap_or(f64::INFINITY),
        Err(_) => f64::INFINITY,
    }
}

/// Runs the full pipeline on one dataset. Unparseable skeletons, skeletons
/// referring to variables beyond `d`, and failed fits are resampled up to
/// `cfg.retries` times.
pub fn infer<R: RngCore>(
    model: &Model,
    x: &[f64],
    d: usize,
    y: &[f64],
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<Prediction, ModelError> {
    let mut timing = Timing::default();
    let mut clock = Clock::new();
    let w = model.embed(x, d, y)?;
    clock.lap(&mut timing.encode);

    let mut out = Prediction {
        skeleton: String::new(),
        expr: None,
        mse_n: f64::INFINITY,
        attempts: 0,
        timing,
    };
    for _ in 0..=cfg.retries {
        out.attempts += 1;
        out.skeleton =
            model.sample_skeleton(&w, &[Vocabulary::SOS], cfg.top_k, cfg.max_len, rng)?;
        let parsed = parse(&out.skeleton).ok().filter(|e| e.max_var() <= d);
        clock.lap(&mut timing.sample);
        let Some(skeleton) = parsed else { continue };
        let fitted = fit_constants(&skeleton, x, d, y, &cfg.fit);
        let s = if fitted.status == FitStatus::Failed {
            f64::INFINITY
        } else {
            score(&fitted.expr, x, d, y)
        };
        clock.lap(&mut timing.fit);
        if s.is_finite() {
            out.expr = Some(fitted.expr);
            out.mse_n = s;
            break;
        }
    }
    timing.total = (clock.last - clock.start).as_secs_f64();
    out.timing = timing;
    Ok(out)
}
