//! Black-box hyperparameter search: a Gaussian-process surrogate with
//! expected-improvement acquisition, batched by constant-liar fantasies.

pub mod design;
pub mod gp;
pub mod space;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use gp::{expected_improvement, GpHyperparameters, GpSurrogate};
pub use space::{Dimension, HyperparameterSpace, Scale};

pub const LEDGER_FILE: &str = "ledger.tsv";
pub const CANDIDATES: usize = 4096;
const POLISHED: usize = 5;
const POLISH_STEPS: [f64; 3] = [0.05, 0.01, 0.002];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialStatus {
    Pending,
    Complete,
    Failed,
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::Pending => "pending",
            TrialStatus::Complete => "complete",
            TrialStatus::Failed => "failed",
        })
    }
}

impl FromStr for TrialStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(TrialStatus::Pending),
            "complete" => Ok(TrialStatus::Complete),
            "failed" => Ok(TrialStatus::Failed),
            other => Err(Error::Contract(format!("unknown trial status `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: u64,
    /// Point in the unit cube.
    pub unit: Vec<f64>,
    /// The same point in hyperparameter units.
    pub values: Vec<f64>,
    pub status: TrialStatus,
    /// Best validation NLL; present iff the trial completed.
    pub objective: Option<f64>,
    pub test_nll: Option<f64>,
    pub steps: u64,
    pub wall_s: f64,
    pub seed: u64,
}

/// What a runner receives for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRequest {
    pub id: u64,
    pub unit: Vec<f64>,
    pub values: Vec<f64>,
    pub seed: u64,
}

/// What a runner reports for a finished trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialResult {
    pub best_valid_nll: f64,
    pub test_nll: Option<f64>,
    pub steps: u64,
    pub wall_s: f64,
}

impl TrialResult {
    pub fn objective(value: f64) -> Self {
        TrialResult {
            best_valid_nll: value,
            test_nll: None,
            steps: 0,
            wall_s: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StudyOptions {
    pub max_trials: usize,
    pub parallelism: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct StudyOutcome {
    pub trials: Vec<Trial>,
    pub best: Option<Trial>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed handed to the runner of trial `id`.
pub fn trial_seed(study_seed: u64, id: u64) -> u64 {
    splitmix(splitmix(study_seed) ^ id)
}

/// Penalty objective for failed trials: the worst completed objective plus one
/// standard deviation of the completed objectives (one unit if fewer than two).
pub fn failure_penalty(trials: &[Trial]) -> Option<f64> {
    let ys: Vec<f64> = trials.iter().filter_map(|t| t.objective).collect();
    let worst = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ys.is_empty() {
        return None;
    }
    let std = if ys.len() < 2 {
        1.0
    } else {
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let s = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() - 1) as f64).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    };
    Some(worst + std)
}

pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.objective.is_some())
        .min_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()).then(a.id.cmp(&b.id)))
}

fn design_shift(dims: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed_d351_9000_0000));
    (0..dims).map(|_| rng.gen::<f64>()).collect()
}

fn acquisition(gp: &GpSurrogate, incumbent: f64, q: &[f64]) -> (f64, f64) {
    let (mean, sd) = gp.predict(q);
    (expected_improvement(mean, sd, incumbent), sd)
}

fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

/// Maximize EI over quasi-random candidates, then polish the best few
/// coordinate by coordinate. Ties in EI are broken by posterior stddev.
fn maximize_ei(gp: &GpSurrogate, incumbent: f64, dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let shift: Vec<f64> = (0..dims).map(|_| rng.gen::<f64>()).collect();
    let offset = rng.gen_range(0..1u64 << 20);
    let mut scored: Vec<(Vec<f64>, (f64, f64))> = (0..CANDIDATES as u64)
        .map(|i| {
            let p = design::shifted_halton(offset + i, &shift);
            let s = acquisition(gp, incumbent, &p);
            (p, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(b.1 .1.total_cmp(&a.1 .1)));
    scored.truncate(POLISHED);
    let mut best: Option<(Vec<f64>, (f64, f64))> = None;
    for (mut p, mut s) in scored {
        for delta in POLISH_STEPS {
            let mut improved = true;
            let mut rounds = 0;
            while improved && rounds < 50 {
                improved = false;
                rounds += 1;
                for d in 0..dims {
                    for sign in [-1.0, 1.0] {
                        let mut q = p.clone();
                        q[d] = (q[d] + sign * delta).clamp(0.0, 1.0);
                        let sq = acquisition(gp, incumbent, &q);
                        if better(sq, s) {
                            p = q;
                            s = sq;
                            improved = true;
                        }
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|(_, b)| better(s, *b)) {
            best = Some((p, s));
        }
    }
    best.expect("candidate set is non-empty").0
}

/// Suggest `batch` unit-cube points given the trials so far.
///
/// The first `2 * dims` trials come from a shifted Halton design; later points
/// maximize EI, each one (and every pending trial) entering the surrogate as a
/// fantasy at its posterior mean before the next is chosen.
pub fn suggest_batch(space: &HyperparameterSpace, trials: &[Trial], batch: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if batch == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let dims = space.len();
    let n_init = 2 * dims;
    let shift = design_shift(dims, seed);
    let complete = trials.iter().filter(|t| t.status == TrialStatus::Complete).count();
    let mut out = Vec::with_capacity(batch);
    let mut k = 0;
    while out.len() < batch && (trials.len() + k < n_init || complete < 2) {
        out.push(design::shifted_halton((trials.len() + k) as u64, &shift));
        k += 1;
    }
    if out.len() == batch {
        return Ok(out);
    }

    let penalty = failure_penalty(trials);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in trials {
        match (t.status, t.objective, penalty) {
            (TrialStatus::Complete, Some(y), _) => {
                xs.push(t.unit.clone());
                ys.push(y);
            }
            (TrialStatus::Failed, _, Some(p)) => {
                xs.push(t.unit.clone());
                ys.push(p);
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(trials.len() as u64)));
    let mut gp = GpSurrogate::fit(xs, &ys, rng.gen())?;
    let pending = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Pending)
        .map(|t| t.unit.clone());
    for p in pending.chain(out.iter().cloned()).collect::<Vec<_>>() {
        let (lie, _) = gp.predict(&p);
        gp = gp.with_observation(p, lie, &ys)?;
        ys.push(lie);
    }
    while out.len() < batch {
        let incumbent = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let p = maximize_ei(&gp, incumbent, dims, &mut rng);
        let (lie, _) = gp.predict(&p);
        gp = gp.with_observation(p.clone(), lie, &ys)?;
        ys.push(lie);
        out.push(p);
    }
    Ok(out)
}

/// Run a study: synchronous batches of up to `parallelism` concurrent trials.
/// The ledger is rewritten after every completion when `ledger` is given.
pub fn run_study<F>(space: &HyperparameterSpace, runner: F, options: StudyOptions, ledger: Option<&Path>) -> Result<StudyOutcome>
where
    F: Fn(&TrialRequest) -> Result<TrialResult> + Sync,
{
    if options.parallelism == 0 {
        return Err(Error::Contract("parallelism must be at least 1".into()));
    }
    let mut trials: Vec<Trial> = Vec::with_capacity(options.max_trials);
    if let Some(path) = ledger {
        write_ledger(path, space, &trials)?;
    }
    while trials.len() < options.max_trials {
        let batch = options.parallelism.min(options.max_trials - trials.len());
        let points = suggest_batch(space, &trials, batch, options.seed)?;
        let first = trials.len();
        for unit in points {
            let id = trials.len() as u64;
            trials.push(Trial {
                id,
                values: space.decode(&unit),
                unit,
                status: TrialStatus::Pending,
                objective: None,
                test_nll: None,
                steps: 0,
                wall_s: 0.0,
                seed: trial_seed(options.seed, id),
            });
        }
        let requests: Vec<TrialRequest> = trials[first..]
            .iter()
            .map(|t| TrialRequest {
                id: t.id,
                unit: t.unit.clone(),
                values: t.values.clone(),
                seed: t.seed,
            })
            .collect();
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| -> Result<()> {
            for request in &requests {
                let tx = tx.clone();
                let runner = &runner;
                scope.spawn(move || {
                    let result = runner(request);
                    // the receiver outlives every worker
                    let _ = tx.send((request.id, result));
                });
            }
            drop(tx);
            for (id, result) in rx {
                let trial = &mut trials[id as usize];
                match result {
                    Ok(r) if r.best_valid_nll.is_finite() => {
                        trial.status = TrialStatus::Complete;
                        trial.objective = Some(r.best_valid_nll);
                        trial.test_nll = r.test_nll;
                        trial.steps = r.steps;
                        trial.wall_s = r.wall_s;
                    }
                    Ok(r) => {
                        log::warn!("trial {id} returned a non-finite objective {}", r.best_valid_nll);
                        trial.status = TrialStatus::Failed;
                        trial.steps = r.steps;
                        trial.wall_s = r.wall_s;
                    }
                    Err(e) => {
                        log::warn!("trial {id} failed: {e}");
                        trial.status = TrialStatus::Failed;
                    }
                }
                if let Some(path) = ledger {
                    write_ledger(path, space, &trials)?;
                }
            }
            Ok(())
        })?;
    }
    let best = best_trial(&trials).cloned();
    Ok(StudyOutcome { trials, best })
}

/// Uniform random search with the same runner contract, run sequentially.
pub fn random_search<F>(space: &HyperparameterSpace, runner: F, max_trials: usize, seed: u64) -> Result<StudyOutcome>
where
    F: Fn(&TrialRequest) -> Result<TrialResult>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(max_trials);
    for id in 0..max_trials as u64 {
        let unit: Vec<f64> = (0..space.len()).map(|_| rng.gen::<f64>()).collect();
        let values = space.decode(&unit);
        let request = TrialRequest {
            id,
            unit: unit.clone(),
            values: values.clone(),
            seed: trial_seed(seed, id),
        };
        let (status, objective, test_nll, steps, wall_s) = match runner(&request) {
            Ok(r) if r.best_valid_nll.is_finite() => (TrialStatus::Complete, Some(r.best_valid_nll), r.test_nll, r.steps, r.wall_s),
            Ok(r) => (TrialStatus::Failed, None, None, r.steps, r.wall_s),
            Err(_) => (TrialStatus::Failed, None, None, 0, 0.0),
        };
        trials.push(Trial {
            id,
            unit,
            values,
            status,
            objective,
            test_nll,
            steps,
            wall_s,
            seed: request.seed,
        });
    }
    let best = best_trial(&trials).cloned();
    Ok(StudyOutcome { trials, best })
}

/// Branin function over the unit square, rescaled to x1 in [-5, 10] and
/// x2 in [0, 15]. Global minimum 0.397887.
pub fn branin(u: &[f64]) -> f64 {
    let x1 = 15.0 * u[0] - 5.0;
    let x2 = 15.0 * u[1];
    let pi = std::f64::consts::PI;
    let b = 5.1 / (4.0 * pi * pi);
    let c = 5.0 / pi;
    let t = 1.0 / (8.0 * pi);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub const BRANIN_MINIMUM: f64 = 0.397_887_357_729_738;

pub fn ledger_header(space: &HyperparameterSpace) -> String {
    let mut cols = vec!["trial_id".to_string(), "status".to_string()];
    cols.extend(space.names().into_iter().map(String::from));
    cols.extend(["best_valid_nll", "test_nll", "steps", "wall_s", "seed"].map(String::from));
    cols.join("\t")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

pub fn format_ledger(space: &HyperparameterSpace, trials: &[Trial]) -> String {
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by_key(|t| t.id);
    let mut out = ledger_header(space);
    out.push('\n');
    for t in sorted {
        let mut cols = vec![t.id.to_string(), t.status.to_string()];
        cols.extend(t.values.iter().map(|v| v.to_string()));
        cols.extend([opt(t.objective), opt(t.test_nll), t.steps.to_string(), t.wall_s.to_string(), t.seed.to_string()]);
        out.push_str(&cols.join("\t"));
        out.push('\n');
    }
    out
}

pub fn write_ledger(path: &Path, space: &HyperparameterSpace, trials: &[Trial]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    std::fs::write(&tmp, format_ledger(space, trials))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse a ledger written for `space`; unit coordinates are re-derived from
/// the stored values.
pub fn parse_ledger(text: &str, space: &HyperparameterSpace) -> Result<Vec<Trial>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != ledger_header(space) {
        return Err(Error::config(1, format!("ledger header does not match the search space: `{header}`")));
    }
    let dims = space.len();
    let mut trials = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != dims + 7 {
            return Err(Error::config(line_no, format!("expected {} columns, found {}", dims + 7, cols.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::config(line_no, format!("`{s}` is not a number")))
        };
        let maybe = |s: &str| -> Result<Option<f64>> { if s == "-" { Ok(None) } else { num(s).map(Some) } };
        let int = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| Error::config(line_no, format!("`{s}` is not an integer")))
        };
        let values = cols[2..2 + dims].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let status: TrialStatus = cols[1].parse().map_err(|e: Error| Error::config(line_no, e.to_string()))?;
        let objective = maybe(cols[2 + dims])?;
        if (status == TrialStatus::Complete) != objective.is_some() {
            return Err(Error::config(line_no, "an objective must be present exactly for complete trials"));
        }
        trials.push(Trial {
            id: int(cols[0])?,
            unit: space.encode(&values),
            values,
            status,
            objective,
            test_nll: maybe(cols[3 + dims])?,
            steps: int(cols[4 + dims])?,
            wall_s: num(cols[5 + dims])?,
            seed: int(cols[6 + dims])?,
        });
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_space(dims: usize) -> HyperparameterSpace {
        HyperparameterSpace::new(
            (0..dims)
                .map(|i| Dimension::new(format!("x{i}"), 0.0, 1.0, Scale::Linear).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn complete(id: u64, unit: Vec<f64>, y: f64) -> Trial {
        Trial {
            id,
            values: unit.clone(),
            unit,
            status: TrialStatus::Complete,
            objective: Some(y),
            test_nll: None,
            steps: 0,
            wall_s: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn branin_minima() {
        let pi = std::f64::consts::PI;
        for (x1, x2) in [(-pi, 12.275), (pi, 2.275), (9.42478, 2.475)] {
            let u = [(x1 + 5.0) / 15.0, x2 / 15.0];
            assert!((branin(&u) - BRANIN_MINIMUM).abs() < 1e-5);
        }
    }

    #[test]
    fn initial_design_points_are_distinct() {
        let pts = suggest_batch(&unit_space(2), &[], 3, 7).unwrap();
        assert_eq!(pts.len(), 3);
        for i in 0..3 {
            for j in 0..i {
                assert_ne!(pts[i], pts[j]);
            }
        }
    }

    #[test]
    fn penalty_is_worst_plus_one_std() {
        let t = vec![complete(0, vec![0.0], 1.0), complete(1, vec![1.0], 3.0)];
        let std = 2f64.sqrt();
        assert!((failure_penalty(&t).unwrap() - (3.0 + std)).abs() < 1e-12);
        assert_eq!(failure_penalty(&t[..1]), Some(2.0));
        assert_eq!(failure_penalty(&[]), None);
    }

    #[test]
    fn ledger_round_trip() {
        let space = HyperparameterSpace::canonical(false);
        let unit = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let mut a = complete(0, unit.clone(), 4.5);
        a.values = space.decode(&unit);
        a.test_nll = Some(4.6);
        let mut b = a.clone();
        b.id = 1;
        b.status = TrialStatus::Failed;
        b.objective = None;
        let text = format_ledger(&space, &[b.clone(), a.clone()]);
        let back = parse_ledger(&text, &space).unwrap();
        assert_eq!(back[0].objective, Some(4.5));
        assert_eq!(back[1].status, TrialStatus::Failed);
        for (x, y) in back[0].unit.iter().zip(&unit) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(parse_ledger(&text.replace("complete", "done"), &space).is_err());
    }
}
