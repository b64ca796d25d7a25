//! Random equation and dataset generation.
//!
//! An equation starts as a blank, perfectly balanced binary tree of a fixed
//! number of levels. Leaves are decorated with variables, internal nodes
//! with operators (unary operators keep only the left child), internal nodes
//! may be cut short as terminals, and finally every node may receive a
//! multiplicative and an additive random constant. The result is evaluated
//! on random points to form one [`Instance`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse, round_sig4, BinaryOp, Expr, Op, Program};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no valid points: only {valid} of {wanted} points evaluated after {draws} draws")]
    Rejected {
        valid: usize,
        wanted: usize,
        draws: usize,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("gave up after {0} attempts without an acceptable equation")]
    Exhausted(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// An integer that is either fixed or drawn uniformly from an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Fixed(usize),
    Range([usize; 2]),
}

impl Count {
    pub fn min(self) -> usize {
        match self {
            Count::Fixed(v) => v,
            Count::Range([lo, _]) => lo,
        }
    }

    pub fn max(self) -> usize {
        match self {
            Count::Fixed(v) => v,
            Count::Range([_, hi]) => hi,
        }
    }

    pub fn sample<R: Rng>(self, rng: &mut R) -> usize {
        match self {
            Count::Fixed(v) => v,
            Count::Range([lo, hi]) => rng.gen_range(lo..=hi),
        }
    }
}

/// Sampling region: every coordinate is drawn independently from the same
/// union of intervals, so the region is a union of axis-aligned boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Domain {
    pub intervals: Vec<[f64; 2]>,
}

impl Domain {
    pub fn interval(lo: f64, hi: f64) -> Domain {
        Domain {
            intervals: vec![[lo, hi]],
        }
    }

    /// `[-5, -3] ∪ [3, 5]` per coordinate: the extrapolation test region.
    pub fn two_sided(inner: f64, outer: f64) -> Domain {
        Domain {
            intervals: vec![[-outer, -inner], [inner, outer]],
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.intervals
            .iter()
            .any(|[lo, hi]| (*lo..=*hi).contains(&v))
    }

    /// Interval chosen with probability proportional to its length.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.intervals.iter().map(|[lo, hi]| hi - lo).sum();
        let mut u = rng.gen::<f64>() * total;
        for [lo, hi] in &self.intervals {
            let width = hi - lo;
            if u < width {
                return lo + u;
            }
            u -= width;
        }
        let [lo, hi] = self.intervals[self.intervals.len() - 1];
        rng.gen_range(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Levels in the template tree (`k`).
    pub max_depth: usize,
    /// Number of variables `d`, fixed or per-instance.
    pub num_vars: Count,
    pub operators: Vec<Op>,
    /// Per-node insertion probability `r` for each of the two constants.
    pub constant_ratio: f64,
    pub const_min: f64,
    pub const_max: f64,
    pub n_points: Count,
    pub x_domain: Domain,
    pub terminal_prob: f64,
    /// Equations whose skeleton prints longer than this are redrawn.
    pub max_skeleton_len: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 4,
            num_vars: Count::Fixed(1),
            operators: Op::ALL.to_vec(),
            constant_ratio: 0.5,
            const_min: -2.1,
            const_max: 2.1,
            n_points: Count::Fixed(30),
            x_domain: Domain::interval(-3.0, 3.0),
            terminal_prob: 0.2,
            max_skeleton_len: 200,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |m: &str| Err(GenError::Config(m.to_owned()));
        if self.max_depth < 1 {
            return fail("max_depth must be at least 1");
        }
        if self.num_vars.min() < 1 || self.num_vars.min() > self.num_vars.max() {
            return fail("num_vars must be a nonempty range of positive integers");
        }
        if self.n_points.min() < 1 || self.n_points.min() > self.n_points.max() {
            return fail("n_points must be a nonempty range of positive integers");
        }
        if !(0.0..=1.0).contains(&self.constant_ratio) {
            return fail("constant_ratio must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.terminal_prob) {
            return fail("terminal_prob must lie in [0, 1]");
        }
        if !(self.const_min <= self.const_max) {
            return fail("const_min must not exceed const_max");
        }
        if self.operators.is_empty() && self.max_depth > 1 {
            return fail("operator set is empty");
        }
        if self.x_domain.intervals.is_empty()
            || self
                .x_domain
                .intervals
                .iter()
                .any(|[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
        {
            return fail("x_domain needs at least one finite interval with lo < hi");
        }
        Ok(())
    }
}

/// Blank template node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    Leaf,
    Internal(Box<Template>, Box<Template>),
}

impl Template {
    pub fn internal_count(&self) -> usize {
        match self {
            Template::Leaf => 0,
            Template::Internal(l, r) => 1 + l.internal_count() + r.internal_count(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Template::Leaf => 1,
            Template::Internal(l, r) => l.leaf_count() + r.leaf_count(),
        }
    }
}

/// Perfectly balanced binary tree with `levels` levels:
/// `2^(levels-1) - 1` internal nodes and `2^(levels-1)` leaves.
pub fn generate_template(levels: usize) -> Template {
    assert!(levels >= 1, "a template needs at least one level");
    if levels == 1 {
        Template::Leaf
    } else {
        let child = generate_template(levels - 1);
        Template::Internal(Box::new(child.clone()), Box::new(child))
    }
}

/// Fills a template: variables at leaves, operators at internal nodes.
///
/// Each internal node is first tested for being terminal, which replaces
/// its whole subtree by one variable; otherwise it gets an operator, and a
/// unary operator drops the right subtree. The result may contain `id`.
pub fn decorate<R: Rng>(
    template: &Template,
    num_vars: usize,
    cfg: &GenConfig,
    rng: &mut R,
) -> Expr {
    let var = |rng: &mut R| Expr::Var(rng.gen_range(1..=num_vars));
    match template {
        Template::Leaf => var(rng),
        Template::Internal(left, right) => {
            if rng.gen_bool(cfg.terminal_prob) {
                return var(rng);
            }
            match *cfg
                .operators
                .choose(rng)
                .expect("validated nonempty operator set")
            {
                Op::Unary(op) => Expr::unary(op, decorate(left, num_vars, cfg, rng)),
                Op::Binary(op) => {
                    let l = decorate(left, num_vars, cfg, rng);
                    let r = decorate(right, num_vars, cfg, rng);
                    Expr::binary(op, l, r)
                }
            }
        }
    }
}

/// Counts of constant insertions, for checking the realised ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionTally {
    pub nodes: usize,
    pub multiplicative: usize,
    pub additive: usize,
}

/// Independently, with probability `r` each, wraps every node as
/// `c1 * node` and then `(...) + c2`. Constants are rounded to four
/// significant digits so that the printed equation reproduces them exactly.
pub fn insert_constants<R: Rng>(e: &Expr, cfg: &GenConfig, rng: &mut R) -> Expr {
    insert_constants_tallied(e, cfg, rng, &mut InsertionTally::default())
}

pub fn insert_constants_tallied<R: Rng>(
    e: &Expr,
    cfg: &GenConfig,
    rng: &mut R,
    tally: &mut InsertionTally,
) -> Expr {
    let node = match e {
        Expr::Unary(op, c) => Expr::unary(*op, insert_constants_tallied(c, cfg, rng, tally)),
        Expr::Binary(op, l, r) => {
            let l = insert_constants_tallied(l, cfg, rng, tally);
            let r = insert_constants_tallied(r, cfg, rng, tally);
            Expr::binary(*op, l, r)
        }
        leaf => leaf.clone(),
    };
    tally.nodes += 1;
    let draw = |rng: &mut R| round_sig4(rng.gen_range(cfg.const_min..=cfg.const_max));
    let scale = draw(rng);
    let node = if rng.gen_bool(cfg.constant_ratio) {
        tally.multiplicative += 1;
        Expr::mul(Expr::Const(scale), node)
    } else {
        node
    };
    let bias = draw(rng);
    if rng.gen_bool(cfg.constant_ratio) {
        tally.additive += 1;
        Expr::add(node, Expr::Const(bias))
    } else {
        node
    }
}

/// One symbolic-regression problem: points `X` (row-major, `n × d`), targets
/// `y = expr(X)`, and the generating equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Record", into = "Record")]
pub struct Instance {
    pub d: usize,
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub expr: Expr,
    pub skeleton: String,
}

/// On-disk JSONL record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    d: usize,
    n: usize,
    #[serde(rename = "X")]
    x: Vec<f64>,
    y: Vec<f64>,
    eq: String,
    skeleton: String,
}

impl From<Instance> for Record {
    fn from(i: Instance) -> Record {
        Record {
            d: i.d,
            n: i.n,
            x: i.x,
            y: i.y,
            eq: i.expr.to_infix_string(),
            skeleton: i.skeleton,
        }
    }
}

impl TryFrom<Record> for Instance {
    type Error = String;

    fn try_from(r: Record) -> Result<Instance, String> {
        if r.n == 0 || r.d == 0 {
            return Err("empty instance".into());
        }
        if r.x.len() != r.n * r.d || r.y.len() != r.n {
            return Err(format!(
                "X has {} values and y {} for n={} d={}",
                r.x.len(),
                r.y.len(),
                r.n,
                r.d
            ));
        }
        if r.y.iter().chain(&r.x).any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        let expr = parse(&r.eq).map_err(|e| format!("eq: {e}"))?;
        Ok(Instance {
            d: r.d,
            n: r.n,
            x: r.x,
            y: r.y,
            expr,
            skeleton: r.skeleton,
        })
    }
}

impl Instance {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn skeleton_expr(&self) -> Expr {
        self.expr.skeletonize()
    }

    /// Same equation re-sampled at a different point count, keeping the rows
    /// already present when shrinking.
    pub fn with_points<R: Rng>(
        &self,
        n: usize,
        domain: &Domain,
        rng: &mut R,
    ) -> Result<Instance, GenError> {
        if n <= self.n {
            return Ok(Instance {
                n,
                x: self.x[..n * self.d].to_vec(),
                y: self.y[..n].to_vec(),
                ..self.clone()
            });
        }
        sample_points(&self.expr, self.d, n, domain, rng).map(|(x, y)| Instance {
            n,
            x,
            y,
            ..self.clone()
        })
    }
}

fn sample_points<R: Rng>(
    e: &Expr,
    d: usize,
    n: usize,
    domain: &Domain,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), GenError> {
    let program = Program::compile(e);
    let budget = 100 * n;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut point = vec![0.0; d];
    let mut draws = 0;
    while y.len() < n && draws < budget {
        draws += 1;
        for v in point.iter_mut() {
            *v = domain.sample(rng);
        }
        if let Ok(v) = program.eval_point(&point, &[]) {
            x.extend_from_slice(&point);
            y.push(v);
        }
    }
    if y.len() < n {
        return Err(GenError::Rejected {
            valid: y.len(),
            wanted: n,
            draws,
        });
    }
    Ok((x, y))
}

/// Draws `n` points uniformly from the configured domain, redrawing any that
/// fall outside the equation's domain.
pub fn sample_dataset<R: Rng>(
    e: &Expr,
    d: usize,
    n: usize,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<Instance, GenError> {
    let (x, y) = sample_points(e, d, n, &cfg.x_domain, rng)?;
    Ok(Instance {
        d,
        n,
        x,
        y,
        expr: e.clone(),
        skeleton: e.skeletonize().to_infix_string(),
    })
}

const MAX_ATTEMPTS: usize = 10_000;

/// Generates one instance, redrawing equations that are rejected by the
/// sampler, print too long, or fail `accept` (used for split dedup).
pub fn generate_instance<R: Rng>(
    cfg: &GenConfig,
    rng: &mut R,
    accept: impl Fn(&str) -> bool,
) -> Result<Instance, GenError> {
    let template = generate_template(cfg.max_depth);
    for _ in 0..MAX_ATTEMPTS {
        let d = cfg.num_vars.sample(rng);
        let n = cfg.n_points.sample(rng);
        let bare = decorate(&template, d, cfg, rng);
        let e = insert_constants(&bare, cfg, rng).collapse_id();
        let skeleton = e.skeletonize().to_infix_string();
        if skeleton.len() > cfg.max_skeleton_len || !accept(&skeleton) {
            continue;
        }
        match sample_dataset(&e, d, n, cfg, rng) {
            Ok(instance) => return Ok(instance),
            Err(GenError::Rejected { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(GenError::Exhausted(MAX_ATTEMPTS))
}

/// Independent RNG stream for instance `index` of a corpus seeded by `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` instances; instance `i` depends only on `(cfg.seed, i)`.
pub fn generate_instances(
    cfg: &GenConfig,
    count: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Instance>, GenError> {
    cfg.validate()?;
    let one = |i: usize| {
        let mut rng = instance_rng(cfg.seed, i as u64);
        generate_instance(cfg, &mut rng, |s| !exclude.contains(s))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(one).collect()
    }
}

/// Summary written next to every corpus file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub operator_counts: BTreeMap<String, usize>,
    pub constants_total: usize,
    pub constants_mean: f64,
    pub y_min: Option<f64>,
    pub y_max: Option<f64>,
    pub skeleton_len_max: usize,
    pub distinct_skeletons: usize,
}

impl CorpusStats {
    pub fn from_instances(instances: &[Instance]) -> CorpusStats {
        let mut stats = CorpusStats {
            count: instances.len(),
            ..Default::default()
        };
        let mut skeletons = HashSet::new();
        for inst in instances {
            inst.expr.visit(&mut |node| {
                let name = match node {
                    Expr::Unary(op, _) => op.name(),
                    Expr::Binary(op, _, _) => op.name(),
                    _ => return,
                };
                *stats.operator_counts.entry(name.to_owned()).or_default() += 1;
            });
            stats.constants_total += inst.expr.constants().len();
            for &v in &inst.y {
                stats.y_min = Some(stats.y_min.map_or(v, |m| m.min(v)));
                stats.y_max = Some(stats.y_max.map_or(v, |m| m.max(v)));
            }
            stats.skeleton_len_max = stats.skeleton_len_max.max(inst.skeleton.len());
            skeletons.insert(inst.skeleton.as_str());
        }
        stats.distinct_skeletons = skeletons.len();
        if !instances.is_empty() {
            stats.constants_mean = stats.constants_total as f64 / instances.len() as f64;
        }
        stats
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenError + '_ {
    move |source| GenError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Path of the statistics sidecar for a corpus file.
pub fn stats_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().unwrap_or_default().to_os_string();
    name.push(".stats.json");
    corpus.with_file_name(name)
}

pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<(), GenError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instances serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Instance>, GenError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line).map_err(|e| GenError::Record {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}

/// Generates `count` instances into `out` (JSONL) plus a `.stats.json` sidecar.
pub fn generate_corpus(cfg: &GenConfig, count: usize, out: &Path) -> Result<CorpusStats, GenError> {
    let instances = generate_instances(cfg, count, &HashSet::new())?;
    persist(&instances, out)
}

fn persist(instances: &[Instance], out: &Path) -> Result<CorpusStats, GenError> {
    write_jsonl(out, instances)?;
    let stats = CorpusStats::from_instances(instances);
    let sidecar = stats_path(out);
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&sidecar, json).map_err(io_err(&sidecar))?;
    Ok(stats)
}

/// One named split of a multi-split corpus.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub name: String,
    pub cfg: GenConfig,
    pub count: usize,
}

/// Generates splits in order. Every split after the first only accepts
/// skeletons absent from all earlier splits, so no skeleton is shared
/// between splits. Writes `<dir>/<name>.jsonl` for each.
pub fn generate_splits(
    splits: &[SplitSpec],
    dir: &Path,
) -> Result<Vec<(PathBuf, CorpusStats)>, GenError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for split in splits {
        let instances = generate_instances(&split.cfg, split.count, &seen)?;
        let path = dir.join(format!("{}.jsonl", split.name));
        let stats = persist(&instances, &path)?;
        seen.extend(instances.into_iter().map(|i| i.skeleton));
        out.push((path, stats));
    }
    Ok(out)
}

/// Checks that `expr` wraps every node as `(c1 * node) + c2`, the shape
/// produced when both insertion probabilities are one.
pub fn fully_wrapped(e: &Expr) -> bool {
    let Expr::Binary(BinaryOp::Add, scaled, bias) = e else {
        return false;
    };
    let Expr::Binary(BinaryOp::Mul, scale, inner) = scaled.as_ref() else {
        return false;
    };
    if !matches!(bias.as_ref(), Expr::Const(_)) || !matches!(scale.as_ref(), Expr::Const(_)) {
        return false;
    }
    match inner.as_ref() {
        Expr::Var(_) => true,
        Expr::Unary(_, c) => fully_wrapped(c),
        Expr::Binary(_, l, r) => fully_wrapped(l) && fully_wrapped(r),
        _ => false,
    }
}
