//! Benchmark harness: per-instance result rows, cumulative error curves,
//! timing tables, point-count sweeps and SVG charts.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::eqgen::{instance_rng, Domain, GenError, Instance};
use crate::expr::parse;
use crate::gp::{gp_regress, GpConfig};
use crate::infer::{infer, score, InferConfig};
use crate::model::Model;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: std::path::PathBuf,
        source: csv::Error,
    },
    #[error("method `{0}` needs a trained model")]
    NoModel(Method),
    #[error(transparent)]
    Gen(#[from] GenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "symbolicgpt")]
    SymbolicGpt,
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "gp_max")]
    GpMax,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SymbolicGpt, Method::Gp, Method::GpMax];

    pub fn name(self) -> &'static str {
        match self {
            Method::SymbolicGpt => "symbolicgpt",
            Method::Gp => "gp",
            Method::GpMax => "gp_max",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::SymbolicGpt => "SymbolicGPT",
            Method::Gp => "GP",
            Method::GpMax => "GP Max",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected symbolicgpt, gp or gp_max)"))
    }
}

/// One method on one instance. Failures carry `mse_n = inf` and an empty
/// equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub instance_id: usize,
    pub d: usize,
    pub n: usize,
    pub mse_n: f64,
    pub seconds: f64,
    pub equation: String,
}

impl ResultRow {
    /// MSE_N of the stored equation on `inst`, `inf` for failures.
    pub fn recompute(&self, inst: &Instance) -> f64 {
        match parse(&self.equation) {
            Ok(e) if !self.equation.is_empty() => score(&e, &inst.x, inst.d, &inst.y),
            _ => f64::INFINITY,
        }
    }
}

pub struct Solvers<'a> {
    pub model: Option<&'a Model>,
    pub infer: InferConfig,
    pub gp: GpConfig,
    pub gp_max: GpConfig,
}

/// Runs `method` on instance `id`. The instance seed feeds the sampler and
/// the GP so rows do not depend on evaluation order.
pub fn solve(
    method: Method,
    solvers: &Solvers,
    inst: &Instance,
    id: usize,
    seed: u64,
) -> Result<ResultRow, BenchError> {
    let started = Instant::now();
    let (equation, mse_n, seconds) = match method {
        Method::SymbolicGpt => {
            let model = solvers.model.ok_or(BenchError::NoModel(method))?;
            let mut rng = instance_rng(seed, id as u64);
            match infer(model, &inst.x, inst.d, &inst.y, &solvers.infer, &mut rng) {
                Ok(p) => (p.equation(), p.mse_n, p.timing.total),
                Err(_) => (
                    String::new(),
                    f64::INFINITY,
                    started.elapsed().as_secs_f64(),
                ),
            }
        }
        Method::Gp | Method::GpMax => {
            let base = if method == Method::Gp {
                &solvers.gp
            } else {
                &solvers.gp_max
            };
            let cfg = GpConfig {
                seed: base.seed
                    ^ seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(id as u64),
                ..base.clone()
            };
            match gp_regress(&inst.x, inst.d, &inst.y, &cfg) {
                Ok(r) => {
                    let s = score(&r.expr, &inst.x, inst.d, &inst.y);
                    let eq = if s.is_finite() {
                        r.expr.to_infix_string()
                    } else {
                        String::new()
                    };
                    (eq, s, started.elapsed().as_secs_f64())
                }
                Err(_) => (
                    String::new(),
                    f64::INFINITY,
                    started.elapsed().as_secs_f64(),
                ),
            }
        }
    };
    Ok(ResultRow {
        method,
        instance_id: id,
        d: inst.d,
        n: inst.n,
        mse_n,
        seconds,
        equation,
    })
}

/// Every method on every instance, ordered by method then instance id.
pub fn run(
    instances: &[Instance],
    methods: &[Method],
    solvers: &Solvers,
    seed: u64,
    progress: impl Fn(&ResultRow) + Sync,
) -> Result<Vec<ResultRow>, BenchError> {
    if methods.contains(&Method::SymbolicGpt) && solvers.model.is_none() {
        return Err(BenchError::NoModel(Method::SymbolicGpt));
    }
    let mut rows = Vec::with_capacity(methods.len() * instances.len());
    for &m in methods {
        let one = |(id, inst): (usize, &Instance)| {
            let row = solve(m, solvers, inst, id, seed)?;
            progress(&row);
            Ok(row)
        };
        #[cfg(feature = "parallel")]
        let part: Result<Vec<_>, BenchError> = {
            use rayon::prelude::*;
            instances.par_iter().enumerate().map(one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let part: Result<Vec<_>, BenchError> = instances.iter().enumerate().map(one).collect();
        rows.extend(part?);
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> BenchError + '_ {
    move |source| BenchError::Csv {
        path: path.to_owned(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(csv_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub log10_threshold: f64,
    pub proportion: f64,
}

/// Thresholds `10^-10 .. 10^4` in quarter decades.
pub fn default_grid() -> Vec<f64> {
    (0..=56).map(|i| -10.0 + 0.25 * i as f64).collect()
}

/// Fraction of `scores` with `log10(score) ≤ t` for each `t` in `grid`, plus a
/// closing point at `t = +∞` where every score, failures included, counts.
pub fn cdf(scores: &[f64], grid: &[f64]) -> Vec<CdfPoint> {
    let mut logs: Vec<f64> = scores.iter().map(|s| s.log10()).collect();
    logs.sort_by(|a, b| a.total_cmp(b));
    let total = logs.len().max(1) as f64;
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.push(f64::INFINITY);
    grid.into_iter()
        .map(|t| {
            let below = logs.partition_point(|l| *l <= t);
            let proportion = if logs.is_empty() {
                1.0
            } else {
                below as f64 / total
            };
            CdfPoint {
                log10_threshold: t,
                proportion,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub method: Method,
    pub log10_threshold: f64,
    pub proportion: f64,
}

pub fn cdf_rows(rows: &[ResultRow], methods: &[Method]) -> Vec<CdfRow> {
    let grid = default_grid();
    methods
        .iter()
        .flat_map(|&m| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.mse_n)
                .collect();
            cdf(&scores, &grid).into_iter().map(move |p| CdfRow {
                method: m,
                log10_threshold: p.log10_threshold,
                proportion: p.proportion,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of per-instance seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub experiment: String,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn timing_cells(experiment: &str, rows: &[ResultRow], methods: &[Method]) -> Vec<TimingCell> {
    methods
        .iter()
        .map(|&m| {
            let secs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.seconds)
                .collect();
            let (mean, std) = mean_std(&secs);
            TimingCell {
                experiment: experiment.to_owned(),
                method: m,
                mean,
                std,
                count: secs.len(),
            }
        })
        .collect()
}

/// Markdown table: one row per experiment, one column per method, cells
/// `mean ± std` in seconds.
pub fn render_timing_table(cells: &[TimingCell]) -> String {
    let mut experiments: Vec<&str> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for c in cells {
        if !experiments.contains(&c.experiment.as_str()) {
            experiments.push(&c.experiment);
        }
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    methods.sort();
    let mut s = String::from("| Experiment |");
    for m in &methods {
        s += &format!(" {} |", m.label());
    }
    s += "\n|---|";
    s += &"---|".repeat(methods.len());
    s.push('\n');
    for e in experiments {
        s += &format!("| {e} |");
        for m in &methods {
            match cells.iter().find(|c| c.experiment == e && c.method == *m) {
                Some(c) => s += &format!(" {:.2} ± {:.2} |", c.mean, c.std),
                None => s += " - |",
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub n: usize,
    pub instances: usize,
    pub failures: usize,
    pub median_log10_mse_n: f64,
    pub mean_log10_mse_n: f64,
}

pub const SWEEP_N: [usize; 5] = [25, 50, 100, 250, 500];

/// Re-samples every instance at each point count and reports the error
/// distribution per method. Failures count toward `failures` and sort last
/// for the median; the mean covers finite scores only.
pub fn sweep(
    instances: &[Instance],
    domain: &Domain,
    ns: &[usize],
    methods: &[Method],
    solvers: &Solvers,
    seed: u64,
    progress: impl Fn(&ResultRow) + Sync,
) -> Result<(Vec<SweepRow>, Vec<ResultRow>), BenchError> {
    let mut summary = Vec::new();
    let mut all = Vec::new();
    for &n in ns {
        let resampled = instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                inst.with_points(n, domain, &mut instance_rng(seed ^ n as u64, i as u64))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rows = run(&resampled, methods, solvers, seed, &progress)?;
        for &m in methods {
            let mut logs: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.mse_n.log10())
                .collect();
            logs.sort_by(|a, b| a.total_cmp(b));
            let finite: Vec<f64> = logs.iter().copied().filter(|v| v.is_finite()).collect();
            summary.push(SweepRow {
                method: m,
                n,
                instances: logs.len(),
                failures: logs.iter().filter(|v| **v == f64::INFINITY).count(),
                median_log10_mse_n: median(&logs),
                mean_log10_mse_n: mean_std(&finite).0,
            });
        }
        all.extend(rows);
    }
    Ok((summary, all))
}

/// Median of sorted values.
fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => {
            let (a, b) = (sorted[n / 2 - 1], sorted[n / 2]);
            if a.is_infinite() || b.is_infinite() {
                if a == b {
                    a
                } else {
                    b
                }
            } else {
                0.5 * (a + b)
            }
        }
    }
}

pub fn median_of(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    median(&v)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Line chart as a standalone SVG document. Non-finite points are dropped;
/// `step` draws each series as a staircase.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    step: bool,
) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 55.0);
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    s += &format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        left + pw / 2.0,
        xml(title)
    );
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        s += &format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"#ddd\"/>\n<text x=\"{0:.1}\" y=\"{3:.1}\" text-anchor=\"middle\">{4}</text>\n",
            sx(fx), top, top + ph, top + ph + 18.0, tick(fx)
        );
        s += &format!(
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{2:.1}\" y2=\"{1:.1}\" stroke=\"#ddd\"/>\n<text x=\"{3:.1}\" y=\"{4:.1}\" text-anchor=\"end\">{5}</text>\n",
            left, sy(fy), left + pw, left - 6.0, sy(fy) + 4.0, tick(fy)
        );
    }
    s += &format!("<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n");
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        left + pw / 2.0,
        h - 12.0,
        xml(x_label)
    );
    s += &format!(
        "<text transform=\"translate(18 {}) rotate(-90)\" text-anchor=\"middle\">{}</text>\n",
        top + ph / 2.0,
        xml(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut path = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
        {
            match prev {
                None => path += &format!("M{:.2},{:.2}", sx(x), sy(y)),
                Some((_, py)) if step => {
                    path += &format!(" L{:.2},{:.2} L{:.2},{:.2}", sx(x), sy(py), sx(x), sy(y))
                }
                Some(_) => path += &format!(" L{:.2},{:.2}", sx(x), sy(y)),
            }
            prev = Some((x, y));
        }
        s += &format!("<path d=\"{path}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n");
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        s += &format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            xml(&ser.name)
        );
    }
    s += "</svg>\n";
    s
}

fn tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == r.trunc() {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn cdf_chart(rows: &[CdfRow], title: &str) -> String {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let series: Vec<Series> = methods
        .iter()
        .map(|&m| Series {
            name: m.label().to_owned(),
            points: rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| (r.log10_threshold, r.proportion))
                .collect(),
        })
        .collect();
    line_chart(
        title,
        "log10 MSE_N threshold",
        "proportion of instances",
        &series,
        true,
    )
}

pub fn sweep_chart(rows: &[SweepRow], title: &str) -> String {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let series: Vec<Series> = methods
        .iter()
        .map(|&m| Series {
            name: m.label().to_owned(),
            points: rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| (r.n as f64, r.median_log10_mse_n))
                .collect(),
        })
        .collect();
    line_chart(
        title,
        "number of points",
        "median log10 MSE_N",
        &series,
        false,
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<(), BenchError> {
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_counts_failures() {
        let pts = cdf(&[1e-3, 0.0, f64::INFINITY, 10.0], &[-3.0, 0.0, 2.0]);
        let p: Vec<f64> = pts.iter().map(|c| c.proportion).collect();
        assert_eq!(p, vec![0.5, 0.5, 0.75, 1.0]);
        assert_eq!(pts.last().unwrap().log10_threshold, f64::INFINITY);
    }

    #[test]
    fn failed_rows_round_trip() {
        let rows = vec![
            ResultRow {
                method: Method::SymbolicGpt,
                instance_id: 0,
                d: 1,
                n: 30,
                mse_n: f64::INFINITY,
                seconds: 0.25,
                equation: String::new(),
            },
            ResultRow {
                method: Method::Gp,
                instance_id: 1,
                d: 2,
                n: 30,
                mse_n: 1.5e-7,
                seconds: 0.0,
                equation: "(x1+0.5)".into(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_rows(&path, &rows).unwrap();
        assert_eq!(read_rows::<ResultRow>(&path).unwrap(), rows);
    }

    #[test]
    fn timing_table_layout() {
        let cells = vec![
            TimingCell {
                experiment: "one_var".into(),
                method: Method::Gp,
                mean: 44.6,
                std: 33.0,
                count: 3,
            },
            TimingCell {
                experiment: "one_var".into(),
                method: Method::SymbolicGpt,
                mean: 1.1,
                std: 0.9,
                count: 3,
            },
        ];
        let t = render_timing_table(&cells);
        assert_eq!(t, "| Experiment | SymbolicGPT | GP |\n|---|---|---|\n| one_var | 1.10 ± 0.90 | 44.60 ± 33.00 |\n");
    }

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        assert_eq!(median_of(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of(&[1.0, f64::INFINITY]), f64::INFINITY);
        assert_eq!(median_of(&[1.0, 3.0]), 2.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dsr".parse::<Method>().is_err());
    }

    #[test]
    fn chart_is_svg() {
        let s = line_chart(
            "t<1>",
            "x",
            "y",
            &[Series {
                name: "a".into(),
                points: vec![(0.0, 0.0), (1.0, f64::NAN), (2.0, 1.0)],
            }],
            true,
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t&lt;1&gt;"));
    }
}
