//! Command implementations behind the `budgetlm` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use budgetlm::analysis::{self, RerunStats, RunResult, RESULT_FILE};
use budgetlm::autodiff::{check_tape_gradients, GradCheckReport, Tensor};
use budgetlm::cells::{CellKind, CellRegistry, GateCoupling, StateDropVariant};
use budgetlm::corpus::{Corpus, Level, Vocabulary};
use budgetlm::evaluator::{evaluate, EvalMode, EvalResult};
use budgetlm::model::{count_parameters, sample_masks, ForwardMode, Model, ModelConfig, SizingSolution};
use budgetlm::params::Bound;
use budgetlm::trainer::{load_params, Checkpoint, Trainer, BEST_CHECKPOINT, LATEST_CHECKPOINT};
use budgetlm::tuner::{
    self, best_trial, parse_ledger, HyperparameterSpace, StudyOptions, Trial, TrialRequest, TrialResult,
    LEDGER_FILE,
};
use budgetlm::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{load_config, parse_config, parse_space, space_to_text, RunConfig};

pub const RUN_ROOT_ENV: &str = "BUDGETLM_RUN_ROOT";
pub const CONFIG_FILE: &str = "config.cfg";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPACE_FILE: &str = "space.cfg";
pub const STUDY_FILE: &str = "study.txt";
pub const RERUN_FILE: &str = "rerun_stats.txt";
pub const SENSITIVITY_FILE: &str = "sensitivity.txt";

/// Relative output paths resolve under the run root when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Run directories are append-only: refuse to reuse a non-empty one.
pub fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() && fs::read_dir(path)?.next().is_some() {
        return Err(Error::Contract(format!(
            "run directory {} already exists and is not empty; choose a fresh one",
            path.display()
        )));
    }
    fs::create_dir_all(path)?;
    Ok(())
}

fn model_name(m: &ModelConfig) -> String {
    match m.cell_kind {
        CellKind::Lstm => format!("lstm-{}", m.coupling),
        CellKind::Rhn => "rhn".to_string(),
    }
}

/// Outcome of one `train` invocation.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub result: RunResult,
    pub steps: u64,
    pub wall_s: f64,
}

/// Train, then score the best parameters on the validation and test splits
/// and write `result.txt`. With `resume`, continue from `latest.ckpt` in `out`.
pub fn train_run(cfg: &RunConfig, seed: u64, out: &Path, resume: bool) -> Result<TrainSummary> {
    let started = Instant::now();
    if !resume {
        fresh_dir(out)?;
    }
    let corpus = Corpus::load(&cfg.data.path, cfg.data.level)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = corpus.vocab.len();
    let model = Model::new(model_cfg.clone(), seed)?;
    log::info!(
        "{} with h={} e={} ({} parameters, budget {})",
        model_name(&cfg.model),
        model.sizing.hidden_dim,
        model.sizing.embedding_dim,
        model.sizing.param_count,
        cfg.model.budget
    );
    let trainer = if resume {
        let stored = fs::read_to_string(out.join(CONFIG_FILE))?;
        if stored != cfg.to_text() {
            return Err(Error::Contract(format!(
                "{} was written by a different configuration",
                out.join(CONFIG_FILE).display()
            )));
        }
        let ck = Checkpoint::load(&out.join(LATEST_CHECKPOINT))?;
        Trainer::resume(
            model,
            &corpus.train.ids,
            &corpus.valid.ids,
            cfg.train.clone(),
            cfg.optim,
            &ck,
            Some(out),
        )?
    } else {
        fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
        fs::write(out.join(VOCAB_FILE), corpus.vocab.to_text())?;
        Trainer::new(
            model,
            &corpus.train.ids,
            &corpus.valid.ids,
            cfg.train.clone(),
            cfg.optim,
            seed,
            Some(out),
        )?
    };
    let outcome = trainer.run()?;
    let mut model = Model::new(model_cfg, seed)?;
    model.params = outcome.best_params;
    let opts = cfg.eval_options(seed);
    let valid = evaluate(&model, &corpus.valid.ids, "valid", &opts)?;
    let test = evaluate(&model, &corpus.test.ids, "test", &opts)?;
    fs::write(out.join("valid_eval.txt"), valid.to_record())?;
    fs::write(out.join("test_eval.txt"), test.to_record())?;
    let result = RunResult {
        model: model_name(&cfg.model),
        budget: cfg.model.budget,
        param_count: count_parameters(&model.params),
        depth: cfg.model.depth,
        level: cfg.data.level,
        valid_nll: valid.mean_nll,
        test_nll: test.mean_nll,
        seed,
    };
    fs::write(out.join(RESULT_FILE), result.to_record())?;
    Ok(TrainSummary {
        result,
        steps: outcome.steps,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Rebuild the model stored in a run directory.
pub fn load_run_model(run_dir: &Path, checkpoint: &Path) -> Result<(RunConfig, Vocabulary, Model)> {
    let cfg = load_config(&run_dir.join(CONFIG_FILE))?;
    let vocab = Vocabulary::from_text(&fs::read_to_string(run_dir.join(VOCAB_FILE))?)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = Model::new(model_cfg, 0)?;
    load_params(&mut model, &Checkpoint::load(checkpoint)?)?;
    Ok((cfg, vocab, model))
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub split: String,
    pub batch_size: usize,
    pub unroll: Option<usize>,
    pub mc_samples: usize,
    pub seed: u64,
}

/// Score a checkpoint on a text file (encoded with the run's vocabulary) or
/// on one split of the run's corpus.
pub fn evaluate_checkpoint(args: &EvaluateArgs) -> Result<EvalResult> {
    let run_dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let (cfg, vocab, model) = load_run_model(run_dir, &args.checkpoint)?;
    let (ids, split) = match &args.data {
        Some(path) => (vocab.encode(&fs::read(path)?, cfg.data.level)?, args.split.clone()),
        None => {
            let corpus = Corpus::load(&cfg.data.path, cfg.data.level)?;
            if corpus.vocab != vocab {
                return Err(Error::Contract(format!(
                    "the corpus at {} no longer matches the run's vocabulary",
                    cfg.data.path.display()
                )));
            }
            let stream = match args.split.as_str() {
                "train" => corpus.train,
                "valid" => corpus.valid,
                "test" => corpus.test,
                other => return Err(Error::Contract(format!("unknown split `{other}`"))),
            };
            (stream.ids, args.split.clone())
        }
    };
    let mode = if args.mc_samples == 0 {
        EvalMode::MeanField
    } else {
        EvalMode::MonteCarlo {
            samples: args.mc_samples,
        }
    };
    let mut opts = cfg.eval_options(args.seed);
    opts.batch_size = args.batch_size;
    opts.mode = mode;
    if let Some(u) = args.unroll {
        opts.unroll = u;
    }
    evaluate(&model, &ids, &split, &opts)
}

fn study_space(cfg: &RunConfig, space: Option<&Path>) -> Result<HyperparameterSpace> {
    match space {
        Some(p) => parse_space(&fs::read_to_string(p)?),
        None => Ok(HyperparameterSpace::canonical(
            cfg.model.cell_kind == CellKind::Lstm && cfg.model.depth > 1,
        )),
    }
}

fn trial_config(base: &RunConfig, space: &HyperparameterSpace, values: &[f64]) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (dim, &v) in space.dims().iter().zip(values) {
        cfg.set_hyperparameter(&dim.name, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn trial_dir(study: &Path, id: u64) -> PathBuf {
    study.join("trials").join(format!("{id:04}"))
}

#[derive(Clone, Debug)]
pub struct TuneArgs {
    pub config: PathBuf,
    pub space: Option<PathBuf>,
    pub trials: usize,
    pub parallel: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Run a study; every trial trains into `trials/<id>` under `out`.
pub fn tune(args: &TuneArgs) -> Result<tuner::StudyOutcome> {
    let cfg = load_config(&args.config)?;
    let space = study_space(&cfg, args.space.as_deref())?;
    let out = &args.out;
    fresh_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(out.join(SPACE_FILE), space_to_text(&space))?;
    fs::write(
        out.join(STUDY_FILE),
        format!("seed\t{}\ntrials\t{}\nparallel\t{}\n", args.seed, args.trials, args.parallel),
    )?;
    let runner = |r: &TrialRequest| -> Result<TrialResult> {
        let trial_cfg = trial_config(&cfg, &space, &r.values)?;
        let summary = train_run(&trial_cfg, r.seed, &trial_dir(out, r.id), false)?;
        log::info!("trial {} finished: valid nll {:.4}", r.id, summary.result.valid_nll);
        Ok(TrialResult {
            best_valid_nll: summary.result.valid_nll,
            test_nll: Some(summary.result.test_nll),
            steps: summary.steps,
            wall_s: summary.wall_s,
        })
    };
    let outcome = tuner::run_study(
        &space,
        runner,
        StudyOptions {
            max_trials: args.trials,
            parallelism: args.parallel,
            seed: args.seed,
        },
        Some(&out.join(LEDGER_FILE)),
    )?;
    let mut best = String::new();
    if let Some(b) = &outcome.best {
        let _ = writeln!(best, "trial_id\t{}", b.id);
        let _ = writeln!(best, "best_valid_nll\t{}", b.objective.unwrap_or(f64::NAN));
        for (d, v) in space.dims().iter().zip(&b.values) {
            let _ = writeln!(best, "{}\t{v}", d.name);
        }
        fs::write(out.join("best.txt"), &best)?;
    } else {
        log::warn!("the study finished without a completed trial");
    }
    Ok(outcome)
}

/// A finished study directory: its base config, space and ledger.
pub struct Study {
    pub config: RunConfig,
    pub space: HyperparameterSpace,
    pub trials: Vec<Trial>,
}

pub fn load_study(dir: &Path) -> Result<Study> {
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let space = parse_space(&fs::read_to_string(dir.join(SPACE_FILE))?)?;
    let trials = parse_ledger(&fs::read_to_string(dir.join(LEDGER_FILE))?, &space)?;
    Ok(Study { config, space, trials })
}

#[derive(Clone, Debug)]
pub struct RerunArgs {
    pub study: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub parallel: usize,
    pub out: PathBuf,
}

/// Retrain the best configuration of a study (or a plain config) once per
/// seed and summarize the spread.
pub fn rerun(args: &RerunArgs) -> Result<(RerunStats, Level)> {
    let (cfg, tuner_best) = match (&args.study, &args.config) {
        (Some(dir), None) => {
            let study = load_study(dir)?;
            let best = best_trial(&study.trials)
                .ok_or_else(|| Error::Contract(format!("study {} has no completed trial", dir.display())))?;
            (trial_config(&study.config, &study.space, &best.values)?, best.objective)
        }
        (None, Some(path)) => (load_config(path)?, None),
        _ => return Err(Error::Contract("rerun needs exactly one of --study or --config".into())),
    };
    fresh_dir(&args.out)?;
    fs::write(args.out.join(CONFIG_FILE), cfg.to_text())?;
    let stats = analysis::seed_rerun_stats(&args.seeds, tuner_best, args.parallel, |seed| {
        let s = train_run(&cfg, seed, &args.out.join(format!("seed_{seed}")), false)?;
        Ok((s.result.valid_nll, s.result.test_nll))
    })?;
    fs::write(args.out.join(RERUN_FILE), stats.to_record(cfg.data.level))?;
    Ok((stats, cfg.data.level))
}

#[derive(Clone, Debug)]
pub struct SensitivityArgs {
    pub study: PathBuf,
    pub window: f64,
    pub margin: f64,
    pub out: PathBuf,
}

/// Per-dimension scatter series around the best trial of a study.
pub fn sensitivity(args: &SensitivityArgs) -> Result<String> {
    let study = load_study(&args.study)?;
    let best = best_trial(&study.trials)
        .ok_or_else(|| Error::Contract(format!("study {} has no completed trial", args.study.display())))?;
    let nb = analysis::sensitivity_neighborhood(&study.space, &study.trials, best, args.window)?;
    fresh_dir(&args.out)?;
    analysis::write_sensitivity_series(&args.out, &nb)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "best_trial\t{}", best.id);
    let _ = writeln!(summary, "window\t{}", args.window);
    let _ = writeln!(summary, "kept\t{}", nb.kept.len());
    let _ = writeln!(summary, "margin\t{}", args.margin);
    match nb.fraction_within(args.margin) {
        Some(f) => {
            let _ = writeln!(summary, "fraction_within_margin\t{f}");
        }
        None => {
            let _ = writeln!(summary, "fraction_within_margin\t-");
        }
    }
    fs::write(args.out.join(SENSITIVITY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct GradcheckArgs {
    pub cell: CellKind,
    pub coupling: GateCoupling,
    pub depth: usize,
    pub variant: StateDropVariant,
    pub seed: u64,
}

/// Finite-difference check of a tiny full model with fixed dropout masks.
pub fn gradcheck(args: &GradcheckArgs) -> Result<GradCheckReport> {
    let rate = 0.3;
    let config = ModelConfig {
        cell_kind: args.cell,
        coupling: args.coupling,
        depth: args.depth,
        vocab_size: 7,
        budget: u64::MAX,
        input_embedding_ratio: 0.8,
        input_drop: rate,
        intra_layer_drop: if args.cell == CellKind::Lstm { rate } else { 0.0 },
        output_drop: rate,
        state_drop: rate,
        state_drop_variant: args.variant,
        ..ModelConfig::default()
    };
    let (e, h) = (4, 5);
    let sizing = SizingSolution {
        embedding_dim: e,
        hidden_dim: h,
        down_projection: true,
        param_count: config.params_for_hidden(h),
    };
    let model = Model::with_sizing(config, sizing, args.seed, &CellRegistry::default())?;
    let (batch, steps) = (2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let inputs: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..7)).collect();
    let targets: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..7)).collect();
    let mut state = model.zero_state(batch);
    for part in state.layers.iter_mut().flatten() {
        for x in part.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let plan = sample_masks(&model.config, &model.sizing, batch, steps, args.seed)?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    check_tape_gradients(
        |tape, vars| {
            let bound = Bound::from_parts(&names, vars)?;
            let out = model.forward(tape, &bound, &inputs, &targets, batch, steps, &state, Some(&plan), ForwardMode::Train)?;
            Ok(out.loss)
        },
        &values,
        1e-4,
        1e-4,
    )
}

/// The checkpoint `evaluate` should use by default for a run directory.
pub fn default_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join(BEST_CHECKPOINT)
}
