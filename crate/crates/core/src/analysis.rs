//! Noise and sensitivity analyses over finished runs and tuner ledgers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::Level;
use crate::error::{Error, Result};
use crate::evaluator::{nll_to_bpc, nll_to_ppl};
use crate::tuner::{HyperparameterSpace, Trial, TrialStatus};

pub const RESULT_FILE: &str = "result.txt";

/// Outcome of one seed rerun.
#[derive(Clone, Debug, PartialEq)]
pub struct RerunRecord {
    pub seed: u64,
    pub outcome: std::result::Result<(f64, f64), String>,
}

/// Descriptive statistics over seed reruns.
#[derive(Clone, Debug, PartialEq)]
pub struct RerunStats {
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    pub valid: Vec<f64>,
    pub test: Vec<f64>,
    pub mean_valid: f64,
    pub sd_valid: f64,
    pub mean_test: f64,
    pub sd_test: f64,
    /// Valid minus test NLL per successful seed.
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
    pub sd_gap: f64,
    pub tuner_best_valid: Option<f64>,
    pub z_score: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl RerunStats {
    /// Aggregate successful reruns; failed ones are listed and excluded.
    pub fn from_records(records: &[RerunRecord], tuner_best_valid: Option<f64>) -> Result<Self> {
        let mut valid = Vec::new();
        let mut test = Vec::new();
        let mut seeds = Vec::new();
        let mut failed_seeds = Vec::new();
        for r in records {
            match &r.outcome {
                Ok((v, t)) => {
                    seeds.push(r.seed);
                    valid.push(*v);
                    test.push(*t);
                }
                Err(e) => {
                    log::warn!("rerun with seed {} failed: {e}", r.seed);
                    failed_seeds.push(r.seed);
                }
            }
        }
        if valid.len() < 2 {
            return Err(Error::Contract(format!(
                "seed statistics need at least 2 successful reruns, got {}",
                valid.len()
            )));
        }
        let gaps: Vec<f64> = valid.iter().zip(&test).map(|(v, t)| v - t).collect();
        let (mean_valid, sd_valid) = (mean(&valid), sample_stddev(&valid));
        let z_score = tuner_best_valid.map(|b| {
            if sd_valid > 0.0 {
                (b - mean_valid) / sd_valid
            } else {
                f64::NAN
            }
        });
        Ok(RerunStats {
            seeds,
            failed_seeds,
            mean_valid,
            sd_valid,
            mean_test: mean(&test),
            sd_test: sample_stddev(&test),
            mean_gap: mean(&gaps),
            sd_gap: sample_stddev(&gaps),
            valid,
            test,
            gaps,
            tuner_best_valid,
            z_score,
        })
    }

    /// Flat `key\tvalue` text; rendered metrics follow the corpus level.
    pub fn to_record(&self, level: Level) -> String {
        let render = |x: f64| match level {
            Level::Word => nll_to_ppl(x),
            Level::Character => nll_to_bpc(x),
        };
        let metric = match level {
            Level::Word => "ppl",
            Level::Character => "bpc",
        };
        let list = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "seeds\t{}", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        let _ = writeln!(
            out,
            "failed_seeds\t{}",
            self.failed_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "valid_nll\t{}", list(&self.valid));
        let _ = writeln!(out, "test_nll\t{}", list(&self.test));
        let _ = writeln!(out, "mean_valid_nll\t{}", self.mean_valid);
        let _ = writeln!(out, "sd_valid_nll\t{}", self.sd_valid);
        let _ = writeln!(out, "mean_test_nll\t{}", self.mean_test);
        let _ = writeln!(out, "sd_test_nll\t{}", self.sd_test);
        let _ = writeln!(out, "mean_valid_{metric}\t{}", render(self.mean_valid));
        let _ = writeln!(out, "mean_test_{metric}\t{}", render(self.mean_test));
        let _ = writeln!(out, "gap_nll\t{}", list(&self.gaps));
        let _ = writeln!(out, "mean_gap_nll\t{}", self.mean_gap);
        let _ = writeln!(out, "sd_gap_nll\t{}", self.sd_gap);
        if let (Some(b), Some(z)) = (self.tuner_best_valid, self.z_score) {
            let _ = writeln!(out, "tuner_best_valid_nll\t{b}");
            let _ = writeln!(out, "tuner_best_z\t{z}");
        }
        out
    }
}

/// Retrain once per seed with up to `parallelism` concurrent workers, then
/// aggregate. `train` returns (valid NLL, test NLL) for a seed.
pub fn seed_rerun_stats<F>(seeds: &[u64], tuner_best_valid: Option<f64>, parallelism: usize, train: F) -> Result<RerunStats>
where
    F: Fn(u64) -> Result<(f64, f64)> + Sync,
{
    if seeds.len() < 2 {
        return Err(Error::Contract("seed reruns need at least 2 seeds".into()));
    }
    let parallelism = parallelism.max(1);
    let mut records = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(parallelism) {
        let results: Vec<RerunRecord> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let train = &train;
                    scope.spawn(move || RerunRecord {
                        seed,
                        outcome: train(seed).map_err(|e| e.to_string()),
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rerun worker panicked")).collect()
        });
        records.extend(results);
    }
    RerunStats::from_records(&records, tuner_best_valid)
}

/// Trials near the best one, with per-dimension scatter series.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub kept: Vec<Trial>,
    /// One `(name, [(value, objective)])` series per dimension.
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    pub best_objective: Option<f64>,
}

impl Neighborhood {
    /// Fraction of completed kept trials within `margin` of the best objective.
    pub fn fraction_within(&self, margin: f64) -> Option<f64> {
        let best = self.best_objective?;
        let ys: Vec<f64> = self.kept.iter().filter_map(|t| t.objective).collect();
        if ys.is_empty() {
            return None;
        }
        Some(ys.iter().filter(|&&y| y - best <= margin).count() as f64 / ys.len() as f64)
    }
}

/// Keep trials whose every unit-cube coordinate lies in a window of width
/// `window` centred on the best trial's coordinate, shifted as needed to stay
/// inside `[0, 1]`.
pub fn sensitivity_neighborhood(
    space: &HyperparameterSpace,
    trials: &[Trial],
    best: &Trial,
    window: f64,
) -> Result<Neighborhood> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Contract(format!("window fraction must be in (0, 1], got {window}")));
    }
    if trials.is_empty() {
        return Err(Error::Contract("sensitivity analysis needs a non-empty ledger".into()));
    }
    // tolerance for decimal round-off in the stored values
    let eps = 1e-9;
    let kept: Vec<Trial> = trials
        .iter()
        .filter(|t| {
            t.unit.iter().zip(&best.unit).all(|(u, b)| {
                let lo = (b - window / 2.0).clamp(0.0, 1.0 - window);
                *u >= lo - eps && *u <= lo + window + eps
            })
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        log::warn!("the neighborhood of trial {} is empty", best.id);
    }
    let series = space
        .dims()
        .iter()
        .enumerate()
        .map(|(d, dim)| {
            let points = kept
                .iter()
                .filter(|t| t.status == TrialStatus::Complete)
                .map(|t| (t.values[d], t.objective.expect("complete trials have objectives")))
                .collect();
            (dim.name.clone(), points)
        })
        .collect();
    Ok(Neighborhood {
        kept,
        series,
        best_objective: best.objective,
    })
}

/// Write one `value\tvalid_nll` TSV per dimension into `dir`; returns the paths.
pub fn write_sensitivity_series(dir: &Path, neighborhood: &Neighborhood) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, points) in &neighborhood.series {
        let mut text = String::from("value\tvalid_nll\n");
        for (v, y) in points {
            let _ = writeln!(text, "{v}\t{y}");
        }
        let path = dir.join(format!("sensitivity_{name}.tsv"));
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Number of grid points for `values` settings of each of `dims` hyperparameters.
pub fn grid_cost(values: u64, dims: u32) -> Result<u64> {
    if values == 0 || dims == 0 {
        return Err(Error::Contract("grid cost needs at least one value and one dimension".into()));
    }
    values
        .checked_pow(dims)
        .ok_or_else(|| Error::Numeric(format!("grid of {values}^{dims} points overflows u64")))
}

/// Summary of a finished training run, stored as `result.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub model: String,
    pub budget: u64,
    pub param_count: u64,
    pub depth: usize,
    pub level: Level,
    pub valid_nll: f64,
    pub test_nll: f64,
    pub seed: u64,
}

impl RunResult {
    pub fn to_record(&self) -> String {
        format!(
            "model\t{}\nbudget\t{}\nparam_count\t{}\ndepth\t{}\nlevel\t{}\nvalid_nll\t{}\ntest_nll\t{}\nseed\t{}\n",
            self.model, self.budget, self.param_count, self.depth, self.level, self.valid_nll, self.test_nll, self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::config(i + 1, format!("expected `key<TAB>value`, got `{line}`")))?;
            fields.insert(k, (i + 1, v));
        }
        fn get<'a>(fields: &BTreeMap<&str, (usize, &'a str)>, key: &str) -> Result<(usize, &'a str)> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::config(0, format!("missing field `{key}`")))
        }
        fn num<T: std::str::FromStr>(fields: &BTreeMap<&str, (usize, &str)>, key: &str) -> Result<T> {
            let (line, v) = get(fields, key)?;
            v.parse()
                .map_err(|_| Error::config(line, format!("field `{key}` has invalid value `{v}`")))
        }
        let (level_line, level) = get(&fields, "level")?;
        Ok(RunResult {
            model: get(&fields, "model")?.1.to_string(),
            budget: num(&fields, "budget")?,
            param_count: num(&fields, "param_count")?,
            depth: num(&fields, "depth")?,
            level: level.parse().map_err(|e: String| Error::config(level_line, e))?,
            valid_nll: num(&fields, "valid_nll")?,
            test_nll: num(&fields, "test_nll")?,
            seed: num(&fields, "seed")?,
        })
    }
}

/// Render an NLL the way result tables show it: perplexity to one decimal
/// for word-level corpora, bits per character to three decimals otherwise.
pub fn render_metric(nll: f64, level: Level) -> String {
    match level {
        Level::Word => format!("{:.1}", nll_to_ppl(nll)),
        Level::Character => format!("{:.3}", nll_to_bpc(nll)),
    }
}

/// Compact parameter count: `24M`, `200k`, `950`.
pub fn render_size(n: u64) -> String {
    let trim = |x: f64| {
        let s = format!("{x:.1}");
        s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
    };
    if n >= 1_000_000 {
        format!("{}M", trim(n as f64 / 1e6))
    } else if n >= 1_000 {
        format!("{}k", trim(n as f64 / 1e3))
    } else {
        n.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub result: RunResult,
    pub best_in_budget: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn collect_results(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_results(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n == RESULT_FILE) {
            let run = path
                .parent()
                .and_then(|p| p.strip_prefix(root).ok())
                .map(|p| p.display().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| ".".to_string());
            out.push((run, path));
        }
    }
    Ok(())
}

/// Gather every `result.txt` under `root` into a table. Unreadable records
/// are skipped with a warning; rows are ordered by run path.
pub fn report(root: &Path) -> Result<Report> {
    let mut found = Vec::new();
    collect_results(root, root, &mut found)?;
    let mut rows = Vec::new();
    for (run, path) in found {
        match fs::read_to_string(&path).map_err(Error::from).and_then(|t| RunResult::parse(&t)) {
            Ok(result) => rows.push(ReportRow {
                run,
                result,
                best_in_budget: false,
            }),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if rows.is_empty() {
        log::warn!("no run results under {}", root.display());
    }
    let mut best: BTreeMap<(u64, String), usize> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let key = (row.result.budget, row.result.level.to_string());
        match best.get(&key) {
            Some(&j) if rows[j].result.valid_nll <= row.result.valid_nll => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    for &i in best.values() {
        rows[i].best_in_budget = true;
    }
    Ok(Report { rows })
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("run\tmodel\tsize\tdepth\tlevel\tvalid_nll\ttest_nll\tvalid\ttest\tbest\n");
        for r in &self.rows {
            let x = &r.result;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.run,
                x.model,
                x.budget,
                x.depth,
                x.level,
                x.valid_nll,
                x.test_nll,
                render_metric(x.valid_nll, x.level),
                render_metric(x.test_nll, x.level),
                u8::from(r.best_in_budget)
            );
        }
        out
    }

    /// Fixed-width table; `*` marks the best validation score per budget.
    pub fn to_text(&self) -> String {
        let header = ["Run", "Model", "Size", "Depth", "Valid", "Test"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let x = &r.result;
                let mark = if r.best_in_budget { "*" } else { "" };
                [
                    r.run.clone(),
                    x.model.clone(),
                    render_size(x.budget),
                    x.depth.to_string(),
                    format!("{}{mark}", render_metric(x.valid_nll, x.level)),
                    render_metric(x.test_nll, x.level),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}
