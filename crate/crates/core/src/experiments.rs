//! Experiment drivers shared by the command line and the acceptance suite:
//! train-then-probe runs, random-search sweeps, ablations and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde_json::json;

use crate::config::{Config, Family};
use crate::datasets::{Split, SplitSet};
use crate::envs::Benchmark;
use crate::error::{CoreError, Result};
use crate::probes::{evaluate, EvalMode, EvalReport, RunInfo};
use crate::seeding::{self, label};
use crate::trainer::{run_training, write_atomic, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

impl EvalSplit {
    fn pick(self, data: &SplitSet) -> &Split {
        match self {
            EvalSplit::Val => data.val(),
            EvalSplit::Test => data.test(),
        }
    }
}

/// Encoding and imagination reports of one run.
#[derive(Clone, Debug)]
pub struct RunReports {
    pub enc: EvalReport,
    pub im: EvalReport,
}

pub fn run_info(cfg: &Config) -> Result<RunInfo> {
    let tc = cfg.train_config()?;
    Ok(RunInfo {
        benchmark: tc.benchmark,
        noise: cfg.f64("data.noise"),
        family: tc.family,
        variant: tc.variant,
        seed: tc.seed,
    })
}

pub fn write_reports(dir: &Path, r: &RunReports) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, rep) in [("eval_enc.json", &r.enc), ("eval_im.json", &r.im)] {
        let text = serde_json::to_string_pretty(rep).map_err(|e| CoreError::Invalid(e.to_string()))?;
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok(())
}

/// Trains a model from `cfg` and probes it on `split`. With an output
/// directory the config, checkpoints, metrics and reports land there.
pub fn train_and_evaluate(cfg: &Config, data: &SplitSet, split: EvalSplit, out: Option<&Path>) -> Result<RunReports> {
    let tc = cfg.train_config()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    }
    let opts = RunOptions {
        out_dir: out.map(Path::to_path_buf),
        resume: false,
    };
    let state = run_training::<f32>(&tc, data, &opts)?;
    let (enc, im) = evaluate(&state.model, data.train(), split.pick(data), &cfg.probe_config()?, &run_info(cfg)?)?;
    let r = RunReports { enc, im };
    if let Some(dir) = out {
        write_reports(dir, &r)?;
    }
    Ok(r)
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, center: f64, spread: f64) -> f64 {
    center * spread.powf(rng.random_range(-1.0..=1.0))
}

/// Draws one random-search point around the values of `base`. Every point
/// satisfies the training-config invariants.
pub fn sample_point<R: Rng + ?Sized>(base: &Config, rng: &mut R) -> Result<Config> {
    let mut c = base.clone();
    let set = |c: &mut Config, k: &str, v: serde_json::Value| c.set_value(k, v);
    for k in [
        "loss.lambda_var",
        "loss.lambda_cor",
        "loss.lambda_cos",
        "loss.lambda_loc",
        "loss.lambda_rec",
        "loss.lambda_kl",
    ] {
        let v = log_uniform(rng, base.f64(k), 4.0);
        set(&mut c, k, json!(v))?;
    }
    for k in ["train.lr_enc", "train.lr_pred", "train.lr_dec"] {
        let v = log_uniform(rng, base.f64(k), 3.0);
        set(&mut c, k, json!(v))?;
    }
    let tau = rng.random_range(0.8..0.99);
    set(&mut c, "train.tau", json!(tau))?;
    let gamma = rng.random_range(0.3..=0.5);
    set(&mut c, "loss.gamma", json!(gamma))?;
    let lower = rng.random_range(1..=2u64);
    let upper = lower + rng.random_range(2..=8u64);
    set(&mut c, "loss.window_lower", json!(lower))?;
    set(&mut c, "loss.window_upper", json!(upper))?;
    let keys: Vec<String> = base.values().keys().filter(|k| k.starts_with("schedule.")).cloned().collect();
    for k in keys {
        let f = rng.random_range(0.9..=1.1);
        set(&mut c, &k, json!(f))?;
    }
    c.train_config()?.validate()?;
    Ok(c)
}

/// The `sweep.points` configurations of a sweep, reproducible from `sweep.seed`.
pub fn sweep_points(base: &Config) -> Result<Vec<Config>> {
    let mut rng = seeding::stream(base.u64("sweep.seed"), label::SWEEP);
    (0..base.usize("sweep.points")).map(|_| sample_point(base, &mut rng)).collect()
}

/// Outcome of a sweep: validation scores of every point, the index of the
/// winner and its test reports over the final seeds.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub scores: Vec<f64>,
    pub winner: usize,
    pub finals: Vec<RunReports>,
}

/// Index of the best score; ties go to the earliest point.
pub fn select_winner(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Random search ranked by the validation imagination F1; the winner is
/// retrained over `sweep.seeds` seeds and evaluated on the test split.
pub fn run_sweep(base: &Config, data: &SplitSet, out: &Path) -> Result<SweepOutcome> {
    let points = sweep_points(base)?;
    let mut scores = Vec::with_capacity(points.len());
    let mut summary = String::from("point,val_im_f1,val_enc_f1\n");
    for (i, p) in points.iter().enumerate() {
        let dir = out.join(format!("point{i:03}"));
        let r = match train_and_evaluate(p, data, EvalSplit::Val, Some(&dir)) {
            Ok(r) => r,
            Err(CoreError::Diverged(msg)) => {
                log::warn!("sweep point {i} diverged: {msg}");
                scores.push(f64::NAN);
                writeln!(summary, "{i},nan,nan").unwrap();
                continue;
            }
            Err(e) => return Err(e),
        };
        log::info!("sweep point {i}: val im F1 {:.2}, enc F1 {:.2}", r.im.mean_f1, r.enc.mean_f1);
        scores.push(r.im.mean_f1);
        writeln!(summary, "{i},{},{}", r.im.mean_f1, r.enc.mean_f1).unwrap();
    }
    write_atomic(&out.join("sweep.csv"), summary.as_bytes())?;
    let winner = select_winner(&scores).ok_or_else(|| CoreError::Diverged("every sweep point diverged".into()))?;
    log::info!("sweep winner: point {winner}");
    write_atomic(&out.join("best_config.json"), points[winner].to_json().as_bytes())?;
    let finals = run_seeds(&points[winner], data, base.usize("sweep.seeds"), &out.join("final"))?;
    write_table(out, &finals, &[(points[winner].family()?.label().to_string(), 0)], base)?;
    Ok(SweepOutcome { scores, winner, finals })
}

/// Trains `cfg` with seeds `seed, seed+1, …` and evaluates on the test split.
pub fn run_seeds(cfg: &Config, data: &SplitSet, seeds: usize, out: &Path) -> Result<Vec<RunReports>> {
    let first = cfg.u64("seed");
    (0..seeds as u64)
        .map(|s| {
            let mut c = cfg.clone();
            c.set_value("seed", json!(first + s))?;
            train_and_evaluate(&c, data, EvalSplit::Test, Some(&out.join(format!("seed{:03}", first + s))))
        })
        .collect()
}

/// Objective component removed by an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Var,
    Cor,
    Cos,
    Loc,
    Ema,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Var, Component::Cor, Component::Cos, Component::Loc, Component::Ema];

    pub fn name(self) -> &'static str {
        match self {
            Component::Var => "var",
            Component::Cor => "cor",
            Component::Cos => "cos",
            Component::Loc => "loc",
            Component::Ema => "ema",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Component::Var => "No L_var",
            Component::Cor => "No L_cor",
            Component::Cos => "No L_cos",
            Component::Loc => "No L_loc",
            Component::Ema => "No EMA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown ablation component `{s}` (expected var, cor, cos, loc or ema)")))
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| Self::parse(p.trim())).collect()
    }
}

/// `base` with one component removed and everything else unchanged.
pub fn ablated(base: &Config, c: Component) -> Result<Config> {
    let mut cfg = base.clone();
    match c {
        // The target encoder then equals the online encoder after every step.
        Component::Ema => cfg.set_value("train.tau", json!(0.0))?,
        _ => cfg.set_value(&format!("loss.lambda_{}", c.name()), json!(0.0))?,
    }
    Ok(cfg)
}

/// Runs the full objective and each ablation over `ablate.seeds` seeds.
pub fn run_ablations(base: &Config, data: &SplitSet, components: &[Component], out: &Path) -> Result<Vec<RunReports>> {
    let seeds = base.usize("ablate.seeds");
    let mut all = run_seeds(base, data, seeds, &out.join("full"))?;
    let mut rows = vec![(base.family()?.label().to_string(), 0)];
    for &c in components {
        let reports = run_seeds(&ablated(base, c)?, data, seeds, &out.join(c.name()))?;
        rows.push((c.label().to_string(), all.len()));
        all.extend(reports);
    }
    write_table(out, &all, &rows, base)?;
    Ok(all)
}

/// `mean ±std` over values in percent, rounded to integers; the sample
/// standard deviation is 0 for a single value.
pub fn mean_std(values: &[f64]) -> String {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    format!("{} ±{}", mean.round() as i64, std.round() as i64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    F1,
    Acc,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Metric::F1),
            "acc" => Ok(Metric::Acc),
            _ => Err(CoreError::Config(format!("unknown report metric `{s}` (expected f1 or acc)"))),
        }
    }

    fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::F1 => r.mean_f1,
            Metric::Acc => r.mean_acc,
        }
    }
}

/// Column key: benchmark, noise level (bit pattern, for ordering) and mode.
type Column = (Benchmark, u64, EvalMode);

fn column(r: &EvalReport) -> Column {
    (r.benchmark, r.noise.to_bits(), r.mode)
}

/// Renders labelled rows of reports as a mean ± std table with one column per
/// (benchmark, noise, mode) present in the reports.
pub fn format_table(rows: &[(String, Vec<&EvalReport>)], metric: Metric) -> String {
    let mut cols: Vec<Column> = rows.iter().flat_map(|(_, rs)| rs.iter().map(|r| column(r))).collect();
    cols.sort_by_key(|&(b, n, m)| (b.name(), f64::from_bits(n).to_bits(), m == EvalMode::Imagination));
    cols.dedup();
    let header: Vec<String> = cols
        .iter()
        .map(|&(b, n, m)| {
            let noise = f64::from_bits(n);
            let level = if noise == 0.0 { "clean".to_string() } else { format!("noise {noise}") };
            let mode = if m == EvalMode::Encoding { "Enc." } else { "Im." };
            format!("{} {level} {mode}", b.name())
        })
        .collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("Model".to_string()).chain(header).collect()];
    for (name, reports) in rows {
        let mut by_col: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in reports {
            let i = cols.iter().position(|&c| c == column(r)).expect("column collected above");
            by_col.entry(i).or_default().push(metric.of(r));
        }
        let mut line = vec![name.clone()];
        line.extend((0..cols.len()).map(|i| by_col.get(&i).map_or_else(|| "-".to_string(), |v| mean_std(v))));
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|j| cells.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &cells {
        let padded: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", padded.join("  ").trim_end()).unwrap();
    }
    out
}

/// Groups reports into one row per family in `order`; families without
/// reports are skipped.
pub fn family_table(reports: &[EvalReport], order: &[Family], metric: Metric) -> String {
    let rows: Vec<(String, Vec<&EvalReport>)> = order
        .iter()
        .map(|&f| (f.label().to_string(), reports.iter().filter(|r| r.family == f).collect::<Vec<_>>()))
        .filter(|(_, rs)| !rs.is_empty())
        .collect();
    format_table(&rows, metric)
}

/// Writes `table.txt` for runs grouped into rows starting at the given offsets.
fn write_table(out: &Path, runs: &[RunReports], rows: &[(String, usize)], cfg: &Config) -> Result<()> {
    let metric = Metric::parse(cfg.str("report.metric"))?;
    let grouped: Vec<(String, Vec<&EvalReport>)> = rows
        .iter()
        .enumerate()
        .map(|(i, (name, start))| {
            let end = rows.get(i + 1).map_or(runs.len(), |r| r.1);
            (name.clone(), runs[*start..end].iter().flat_map(|r| [&r.enc, &r.im]).collect())
        })
        .collect();
    let table = format_table(&grouped, metric);
    write_atomic(&out.join("table.txt"), table.as_bytes())?;
    log::info!("\n{table}");
    Ok(())
}

/// Every `eval_*.json` below the given files or directories, sorted by path.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    fn walk(p: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_dir() {
            for entry in std::fs::read_dir(p)? {
                walk(&entry?.path(), found)?;
            }
        } else if p.extension().is_some_and(|e| e == "json")
            && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("eval_"))
        {
            found.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(CoreError::Config(format!("{} does not exist", p.display())));
        }
        walk(p, &mut files)?;
    }
    files.sort();
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f)?;
            serde_json::from_str(&text).map_err(|e| CoreError::Invalid(format!("{}: {e}", f.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_formatting() {
        assert_eq!(mean_std(&[80.0, 90.0]), "85 ±7");
        assert_eq!(mean_std(&[42.4]), "42 ±0");
    }

    #[test]
    fn winner_skips_diverged_points() {
        assert_eq!(select_winner(&[f64::NAN, 3.0, 5.0, 5.0, 1.0]), Some(2));
        assert_eq!(select_winner(&[f64::NAN]), None);
    }

    #[test]
    fn ablation_changes_one_key() {
        let base = Config::default();
        for c in Component::ALL {
            let a = ablated(&base, c).unwrap();
            let changed: Vec<_> = a.values().iter().filter(|(k, v)| base.get(k) != *v).map(|(k, _)| k.clone()).collect();
            let expect = if c == Component::Ema { "train.tau".to_string() } else { format!("loss.lambda_{}", c.name()) };
            assert_eq!(changed, vec![expect]);
            a.train_config().unwrap().validate().unwrap();
        }
    }

    #[test]
    fn sweep_points_are_valid_and_reproducible() {
        let base = Config::default();
        let a = sweep_points(&base).unwrap();
        assert_eq!(a.len(), 24);
        assert_eq!(a, sweep_points(&base).unwrap());
        for p in &a {
            let tc = p.train_config().unwrap();
            tc.validate().unwrap();
            assert!(tc.window.lower <= tc.window.upper);
        }
        assert_ne!(a[0], a[1]);
    }
}
