//! Genetic-programming symbolic regression baseline.
//!
//! Tree-based GP with ramped half-and-half initialization, tournament
//! selection, subtree crossover, subtree and point mutation, and single-slot
//! elitism. Fitness is training MSE plus a parsimony penalty on tree size;
//! individuals that hit a domain error anywhere score `+∞`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{BinaryOp, Columns, Expr, Op, Program, UnaryOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub p_crossover: f64,
    pub p_subtree_mutation: f64,
    pub p_point_mutation: f64,
    pub max_depth: usize,
    /// Initial trees get depths ramped over `2..=init_depth`.
    pub init_depth: usize,
    pub parsimony: f64,
    pub const_min: f64,
    pub const_max: f64,
    pub operators: Vec<Op>,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            population: 1000,
            generations: 10,
            tournament: 7,
            p_crossover: 0.9,
            p_subtree_mutation: 0.05,
            p_point_mutation: 0.05,
            max_depth: 8,
            init_depth: 6,
            parsimony: 1e-3,
            const_min: -2.1,
            const_max: 2.1,
            operators: Op::ALL
                .iter()
                .copied()
                .filter(|op| *op != Op::Unary(UnaryOp::Id))
                .collect(),
            seed: 0,
        }
    }
}

impl GpConfig {
    /// Population 1000, 10 generations.
    pub fn standard() -> GpConfig {
        GpConfig::default()
    }

    /// Population 5000, 20 generations.
    pub fn max() -> GpConfig {
        GpConfig {
            population: 5000,
            generations: 20,
            ..GpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.population < 2 {
            return Err("population must be at least 2".into());
        }
        if self.generations == 0 {
            return Err("need at least one generation".into());
        }
        if self.tournament == 0 || self.operators.is_empty() {
            return Err("tournament size and operator set must be nonempty".into());
        }
        if self.max_depth < 1 || self.init_depth > self.max_depth || self.init_depth < 1 {
            return Err(format!(
                "init depth {} must lie in 1..={}",
                self.init_depth, self.max_depth
            ));
        }
        if !(self.const_min <= self.const_max) {
            return Err("const_min exceeds const_max".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpResult {
    pub expr: Expr,
    /// Penalized fitness of `expr`.
    pub fitness: f64,
    /// Unpenalized training MSE of `expr`.
    pub mse: f64,
    /// Best penalized fitness after each generation, the initial population
    /// counting as generation 1.
    pub trace: Vec<f64>,
}

struct Ctx<'a> {
    cfg: &'a GpConfig,
    unary: Vec<UnaryOp>,
    binary: Vec<BinaryOp>,
    d: usize,
}

impl Ctx<'_> {
    fn terminal(&self, rng: &mut ChaCha8Rng) -> Expr {
        if rng.gen_range(0..=self.d) == self.d {
            Expr::Const(rng.gen_range(self.cfg.const_min..=self.cfg.const_max))
        } else {
            Expr::Var(rng.gen_range(1..=self.d))
        }
    }

    fn function(
        &self,
        rng: &mut ChaCha8Rng,
        children: impl FnMut(&mut ChaCha8Rng) -> Expr,
    ) -> Expr {
        let mut children = children;
        let total = self.unary.len() + self.binary.len();
        let pick = rng.gen_range(0..total);
        if pick < self.unary.len() {
            Expr::unary(self.unary[pick], children(rng))
        } else {
            let lhs = children(rng);
            Expr::binary(self.binary[pick - self.unary.len()], lhs, children(rng))
        }
    }

    /// `full` grows every branch to `depth`; otherwise branches may stop early.
    fn random_tree(&self, depth: usize, full: bool, rng: &mut ChaCha8Rng) -> Expr {
        if depth <= 1 {
            return self.terminal(rng);
        }
        if !full {
            let terms = self.d + 1;
            let funcs = self.unary.len() + self.binary.len();
            if rng.gen_range(0..terms + funcs) < terms {
                return self.terminal(rng);
            }
        }
        self.function(rng, |r| self.random_tree(depth - 1, full, r))
    }
}

/// Pre-order node `idx`.
fn node_at(e: &Expr, idx: usize) -> &Expr {
    fn go<'a>(e: &'a Expr, idx: &mut usize) -> Option<&'a Expr> {
        if *idx == 0 {
            return Some(e);
        }
        *idx -= 1;
        match e {
            Expr::Unary(_, c) => go(c, idx),
            Expr::Binary(_, l, r) => go(l, idx).or_else(|| go(r, idx)),
            _ => None,
        }
    }
    let mut i = idx;
    go(e, &mut i).expect("index within tree")
}

/// Copy of `e` with pre-order node `idx` replaced by `with`.
fn replace_at(e: &Expr, idx: usize, with: &Expr) -> Expr {
    fn go(e: &Expr, idx: &mut Option<usize>, with: &Expr) -> Expr {
        match idx {
            Some(0) => {
                *idx = None;
                return with.clone();
            }
            Some(i) => *i -= 1,
            None => return e.clone(),
        }
        match e {
            Expr::Unary(op, c) => Expr::unary(*op, go(c, idx, with)),
            Expr::Binary(op, l, r) => {
                let l = go(l, idx, with);
                Expr::binary(*op, l, go(r, idx, with))
            }
            leaf => leaf.clone(),
        }
    }
    go(e, &mut Some(idx), with)
}

/// Depth of pre-order node `idx` (root = 1).
fn depth_at(e: &Expr, idx: usize) -> usize {
    fn go(e: &Expr, idx: &mut usize, level: usize) -> Option<usize> {
        if *idx == 0 {
            return Some(level);
        }
        *idx -= 1;
        match e {
            Expr::Unary(_, c) => go(c, idx, level + 1),
            Expr::Binary(_, l, r) => go(l, idx, level + 1).or_else(|| go(r, idx, level + 1)),
            _ => None,
        }
    }
    let mut i = idx;
    go(e, &mut i, 1).expect("index within tree")
}

fn crossover(a: &Expr, b: &Expr, max_depth: usize, rng: &mut ChaCha8Rng) -> Expr {
    let i = rng.gen_range(0..a.size());
    let donor = node_at(b, rng.gen_range(0..b.size()));
    if depth_at(a, i) - 1 + donor.depth() > max_depth {
        return a.clone();
    }
    replace_at(a, i, donor)
}

fn subtree_mutation(ctx: &Ctx, a: &Expr, rng: &mut ChaCha8Rng) -> Expr {
    let i = rng.gen_range(0..a.size());
    let room = ctx.cfg.max_depth + 1 - depth_at(a, i);
    let depth = rng.gen_range(1..=room.min(ctx.cfg.init_depth));
    let fresh = ctx.random_tree(depth, false, rng);
    replace_at(a, i, &fresh)
}

/// Swaps one node for another of the same arity (or a fresh terminal).
fn point_mutation(ctx: &Ctx, a: &Expr, rng: &mut ChaCha8Rng) -> Expr {
    let i = rng.gen_range(0..a.size());
    let replacement = match node_at(a, i) {
        Expr::Unary(_, c) if !ctx.unary.is_empty() => {
            Expr::unary(ctx.unary[rng.gen_range(0..ctx.unary.len())], (**c).clone())
        }
        Expr::Binary(_, l, r) if !ctx.binary.is_empty() => Expr::binary(
            ctx.binary[rng.gen_range(0..ctx.binary.len())],
            (**l).clone(),
            (**r).clone(),
        ),
        Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => ctx.terminal(rng),
        other => other.clone(),
    };
    replace_at(a, i, &replacement)
}

fn mse(e: &Expr, x: &Columns, y: &[f64]) -> f64 {
    match Program::compile(e).eval_columns(x, &[]) {
        Ok(p) => {
            let m = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
            if m.is_finite() {
                m
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

fn evaluate_all(pop: &[Expr], x: &Columns, y: &[f64], parsimony: f64) -> Vec<f64> {
    let score = |e: &Expr| mse(e, x, y) + parsimony * e.size() as f64;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pop.par_iter().map(score).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pop.iter().map(score).collect()
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, f) in v.iter().enumerate() {
        if *f < v[best] {
            best = i;
        }
    }
    best
}

fn tournament(fitness: &[f64], size: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut best = rng.gen_range(0..fitness.len());
    for _ in 1..size {
        let c = rng.gen_range(0..fitness.len());
        if fitness[c] < fitness[best] {
            best = c;
        }
    }
    best
}

/// Evolves an expression for `y ≈ f(x)` with `x` row-major `n × d`.
pub fn gp_regress(x: &[f64], d: usize, y: &[f64], cfg: &GpConfig) -> Result<GpResult, String> {
    cfg.validate()?;
    if y.is_empty() || d == 0 || x.len() != y.len() * d {
        return Err(format!(
            "need n ≥ 1 points of {d} variables, got {} values for {} targets",
            x.len(),
            y.len()
        ));
    }
    let ctx = Ctx {
        cfg,
        unary: cfg
            .operators
            .iter()
            .filter_map(|op| {
                if let Op::Unary(u) = op {
                    Some(*u)
                } else {
                    None
                }
            })
            .collect(),
        binary: cfg
            .operators
            .iter()
            .filter_map(|op| {
                if let Op::Binary(b) = op {
                    Some(*b)
                } else {
                    None
                }
            })
            .collect(),
        d,
    };
    let cols = Columns::from_rows(x, d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let ramps: Vec<usize> = (2.min(cfg.init_depth)..=cfg.init_depth).collect();
    let mut pop: Vec<Expr> = (0..cfg.population)
        .map(|i| ctx.random_tree(ramps[(i / 2) % ramps.len()], i % 2 == 0, &mut rng))
        .collect();
    let mut fitness = evaluate_all(&pop, &cols, y, cfg.parsimony);
    let mut trace = vec![fitness[argmin(&fitness)]];

    for _ in 1..cfg.generations {
        let elite = argmin(&fitness);
        let mut next = Vec::with_capacity(cfg.population);
        next.push(pop[elite].clone());
        while next.len() < cfg.population {
            let parent = &pop[tournament(&fitness, cfg.tournament, &mut rng)];
            let u: f64 = rng.gen();
            let child = if u < cfg.p_crossover {
                let donor = &pop[tournament(&fitness, cfg.tournament, &mut rng)];
                crossover(parent, donor, cfg.max_depth, &mut rng)
            } else if u < cfg.p_crossover + cfg.p_subtree_mutation {
                subtree_mutation(&ctx, parent, &mut rng)
            } else if u < cfg.p_crossover + cfg.p_subtree_mutation + cfg.p_point_mutation {
                point_mutation(&ctx, parent, &mut rng)
            } else {
                parent.clone()
            };
            next.push(child);
        }
        pop = next;
        fitness = evaluate_all(&pop, &cols, y, cfg.parsimony);
        trace.push(fitness[argmin(&fitness)]);
    }
    let best = argmin(&fitness);
    let expr = pop.swap_remove(best);
    let mse = mse(&expr, &cols, y);
    Ok(GpResult {
        expr,
        fitness: fitness[best],
        mse,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn subtree_addressing() {
        let e = parse("sin(x1)+x2*C").unwrap();
        // pre-order: +, sin, x1, *, x2, C
        assert_eq!(e.size(), 6);
        assert_eq!(node_at(&e, 2), &Expr::Var(1));
        assert_eq!(depth_at(&e, 0), 1);
        assert_eq!(depth_at(&e, 5), 3);
        assert_eq!(
            replace_at(&e, 3, &Expr::Var(3)),
            parse("sin(x1)+x3").unwrap()
        );
        assert_eq!(replace_at(&e, 0, &Expr::Var(2)), Expr::Var(2));
    }

    #[test]
    fn random_trees_respect_depth_and_operators() {
        let cfg = GpConfig {
            operators: vec![Op::Binary(BinaryOp::Add), Op::Unary(UnaryOp::Cos)],
            ..GpConfig::default()
        };
        let ctx = Ctx {
            cfg: &cfg,
            unary: vec![UnaryOp::Cos],
            binary: vec![BinaryOp::Add],
            d: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for depth in 1..=6 {
            for full in [true, false] {
                let t = ctx.random_tree(depth, full, &mut rng);
                assert!(t.depth() <= depth);
                if full {
                    assert_eq!(t.depth(), depth);
                }
                t.visit(&mut |n| match n {
                    Expr::Unary(op, _) => assert_eq!(*op, UnaryOp::Cos),
                    Expr::Binary(op, _, _) => assert_eq!(*op, BinaryOp::Add),
                    Expr::Var(i) => assert!((1..=2).contains(i)),
                    Expr::Const(c) => assert!((-2.1..=2.1).contains(c)),
                    Expr::Placeholder => panic!("placeholder in GP tree"),
                });
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(gp_regress(&[], 1, &[], &GpConfig::default()).is_err());
        assert!(gp_regress(
            &[1.0],
            1,
            &[1.0],
            &GpConfig {
                population: 1,
                ..GpConfig::default()
            }
        )
        .is_err());
        assert!(gp_regress(
            &[1.0],
            1,
            &[1.0],
            &GpConfig {
                generations: 0,
                ..GpConfig::default()
            }
        )
        .is_err());
    }
}
