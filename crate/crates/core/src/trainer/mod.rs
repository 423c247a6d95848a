//! Truncated-BPTT training with Adam, plateau decay and resumable checkpoints.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, Progress, RngState};
pub use optim::{adam_step, maybe_decay_lr, AdamState, OptimizerConfig, PlateauSchedule};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{training_layout, BatchLayout, Level};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalMode, EvalOptions};
use crate::model::{sample_masks, ForwardMode, Model, RecurrentState};
use crate::params::ParamStore;

pub const LOG_FILE: &str = "train_log.tsv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_HEADER: &str = "step\ttrain_nll\tvalid_nll\tlr\twall_s";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub unroll: usize,
    pub checkpoint_interval: u64,
    pub decay_factor: f64,
    /// Consecutive non-improving checkpoints before a decay.
    pub patience: usize,
    pub zero_state_prob: f64,
    pub max_epochs: u64,
    pub max_steps: Option<u64>,
    /// Validation tokens scored at each checkpoint.
    pub valid_tokens: usize,
}

impl TrainSchedule {
    pub fn word_level() -> Self {
        TrainSchedule {
            batch_size: 64,
            unroll: 35,
            checkpoint_interval: 100,
            decay_factor: 0.1,
            patience: 30,
            zero_state_prob: 0.01,
            max_epochs: 39,
            max_steps: None,
            valid_tokens: 20_000,
        }
    }

    pub fn char_level() -> Self {
        TrainSchedule {
            batch_size: 128,
            unroll: 50,
            checkpoint_interval: 400,
            max_epochs: 14,
            ..Self::word_level()
        }
    }

    pub fn for_level(level: Level) -> Self {
        match level {
            Level::Word => Self::word_level(),
            Level::Character => Self::char_level(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.unroll == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Contract(
                "batch size, unroll and checkpoint interval must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.zero_state_prob) {
            return Err(Error::Contract(format!(
                "zero-state probability must be in [0, 1], got {}",
                self.zero_state_prob
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) || self.patience == 0 {
            return Err(Error::Contract("decay factor must be in (0, 1] and patience positive".into()));
        }
        if self.valid_tokens < 2 {
            return Err(Error::Contract("validation slice needs at least 2 tokens".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub lr: f64,
    pub wall_s: f64,
}

impl LogRow {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.3}",
            self.step, self.train_nll, self.valid_nll, self.lr, self.wall_s
        )
    }

    /// The row without its timing column, for run-to-run comparison.
    pub fn deterministic_part(&self) -> (u64, u64, u64, u64) {
        (
            self.step,
            self.train_nll.to_bits(),
            self.valid_nll.to_bits(),
            self.lr.to_bits(),
        )
    }
}

/// Parse the rows of a training log, skipping the header and `#` comments.
pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') || line == LOG_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::config(i + 1, format!("malformed log row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            train_nll: f[1].parse().map_err(|_| bad())?,
            valid_nll: f[2].parse().map_err(|_| bad())?,
            lr: f[3].parse().map_err(|_| bad())?,
            wall_s: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// What happened in one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    /// Batch rows whose incoming state was replaced by zeros.
    pub reset_rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: u64,
    /// Best checkpoint score on the validation slice.
    pub best_valid_nll: f64,
    /// The best parameters scored on the whole validation stream.
    pub full_valid_nll: f64,
    pub final_lr: f64,
    pub log: Vec<LogRow>,
    pub best_params: ParamStore,
}

pub struct Trainer<'d> {
    pub model: Model,
    train: &'d [usize],
    valid: &'d [usize],
    layout: BatchLayout,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerConfig,
    adam: AdamState,
    state: RecurrentState,
    rng: ChaCha8Rng,
    plateau: PlateauSchedule,
    progress: Progress,
    best_params: Option<ParamStore>,
    log: Vec<LogRow>,
    out_dir: Option<PathBuf>,
    started: Instant,
}

impl<'d> Trainer<'d> {
    /// Fresh run. When `out_dir` is given, the log and checkpoints go there.
    pub fn new(
        model: Model,
        train: &'d [usize],
        valid: &'d [usize],
        schedule: TrainSchedule,
        optimizer: OptimizerConfig,
        seed: u64,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        schedule.validate()?;
        optimizer.validate()?;
        let layout = training_layout(train.len(), schedule.batch_size, schedule.unroll)?;
        if valid.len() < 2 {
            return Err(Error::Contract("validation stream needs at least 2 tokens".into()));
        }
        let v = model.config.vocab_size;
        if let Some(&bad) = train.iter().chain(valid).find(|&&id| id >= v) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {v}")));
        }
        let adam = AdamState::new(&model.params);
        let state = model.zero_state(schedule.batch_size);
        let plateau = PlateauSchedule::new(schedule.patience, schedule.decay_factor);
        let progress = Progress {
            learning_rate: optimizer.learning_rate,
            ..Progress::default()
        };
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Trainer {
            model,
            train,
            valid,
            layout,
            schedule,
            optimizer,
            adam,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
            plateau,
            progress,
            best_params: None,
            log: Vec::new(),
            out_dir: out_dir.map(Path::to_path_buf),
            started: Instant::now(),
        })
    }

    /// Continue a run from a snapshot written by [`Trainer::snapshot`].
    #[allow(clippy::too_many_arguments)]
    pub fn resume(
        mut model: Model,
        train: &'d [usize],
        valid: &'d [usize],
        schedule: TrainSchedule,
        optimizer: OptimizerConfig,
        checkpoint: &Checkpoint,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let missing = |name: &str| Error::Contract(format!("checkpoint lacks tensor `{name}`"));
        load_params(&mut model, checkpoint)?;
        let mut trainer = Trainer::new(model, train, valid, schedule, optimizer, 0, out_dir)?;
        let names: Vec<String> = trainer.model.params.iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let m = checkpoint.state_tensor(&format!("adam.m.{name}")).ok_or_else(|| missing(name))?;
            let v = checkpoint.state_tensor(&format!("adam.v.{name}")).ok_or_else(|| missing(name))?;
            if m.shape() != trainer.adam.m[i].shape() || v.shape() != trainer.adam.v[i].shape() {
                return Err(Error::Contract(format!("optimizer state for `{name}` has the wrong shape")));
            }
            trainer.adam.m[i] = m.clone();
            trainer.adam.v[i] = v.clone();
        }
        trainer.adam.step = checkpoint.progress.adam_step;
        for (l, parts) in trainer.state.layers.iter_mut().enumerate() {
            for (k, part) in parts.iter_mut().enumerate() {
                let name = format!("state.{l}.{k}");
                let t = checkpoint.state_tensor(&name).ok_or_else(|| missing(&name))?;
                if t.shape() != part.shape() {
                    return Err(Error::Contract(format!(
                        "carried state `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        part.shape()
                    )));
                }
                *part = t.clone();
            }
        }
        if checkpoint.state_tensor(&format!("best.{}", names[0])).is_some() {
            let mut best = trainer.model.params.clone();
            for p in best.iter_mut() {
                let name = format!("best.{}", p.name);
                p.value = checkpoint.state_tensor(&name).ok_or_else(|| missing(&name))?.clone();
            }
            trainer.best_params = Some(best);
        }
        let p = checkpoint.progress;
        let mut rng = ChaCha8Rng::from_seed(p.rng.seed);
        rng.set_stream(p.rng.stream);
        rng.set_word_pos(p.rng.word_pos);
        trainer.rng = rng;
        trainer.plateau.best = p.plateau_best;
        trainer.plateau.since_best = p.since_best as usize;
        trainer.progress = p;
        if let Some(dir) = out_dir {
            if let Ok(text) = fs::read_to_string(dir.join(LOG_FILE)) {
                trainer.log = parse_log(&text)?;
            }
        }
        Ok(trainer)
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn state(&self) -> &RecurrentState {
        &self.state
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn windows_per_epoch(&self) -> u64 {
        self.layout.full_windows() as u64
    }

    pub fn finished(&self) -> bool {
        self.progress.epoch >= self.schedule.max_epochs
            || self.schedule.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// One window: zero-state injection, forward/backward, Adam update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.progress.cursor == 0 {
            self.state.reset();
        }
        let batch = self.schedule.batch_size;
        let mut reset_rows = Vec::new();
        for row in 0..batch {
            if self.rng.gen::<f64>() < self.schedule.zero_state_prob {
                self.state.reset_row(row);
                reset_rows.push(row);
            }
        }
        let mask_seed: u64 = self.rng.gen();
        let window = self.layout.window(self.train, self.progress.cursor as usize);
        let plan = sample_masks(&self.model.config, &self.model.sizing, batch, window.steps, mask_seed)?;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true);
        let out = self.model.forward(
            &mut tape,
            &bound,
            &window.inputs,
            &window.targets,
            batch,
            window.steps,
            &self.state,
            Some(&plan),
            ForwardMode::Train,
        )?;
        let loss = tape.value(out.loss).item()?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "training loss is {loss} at step {}",
                self.progress.step + 1
            )));
        }
        tape.backward(out.loss)?;
        let grads: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(self.model.params.iter())
            .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.value.len()]))
            .collect();
        adam_step(
            &mut self.adam,
            &mut self.model.params,
            &grads,
            &self.optimizer,
            self.progress.learning_rate,
        )?;
        self.state = RecurrentState {
            layers: out
                .final_state
                .iter()
                .map(|parts| parts.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
        };
        self.progress.step += 1;
        self.progress.adam_step = self.adam.step;
        self.progress.interval_loss_sum += loss;
        self.progress.interval_windows += 1;
        self.progress.cursor += 1;
        if self.progress.cursor >= self.windows_per_epoch() {
            self.progress.cursor = 0;
            self.progress.epoch += 1;
        }
        Ok(StepReport { loss, reset_rows })
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: 1,
            unroll: self.schedule.unroll,
            mode: EvalMode::MeanField,
            seed: 0,
        }
    }

    /// Score the validation slice, update the best parameters and the
    /// learning rate, log a row and write checkpoints.
    pub fn checkpoint(&mut self) -> Result<LogRow> {
        let slice = &self.valid[..self.valid.len().min(self.schedule.valid_tokens)];
        let valid_nll = evaluate(&self.model, slice, "valid", &self.eval_options())?.mean_nll;
        if !valid_nll.is_finite() {
            return Err(Error::Diverged(format!(
                "validation nll is {valid_nll} at step {}",
                self.progress.step
            )));
        }
        let improved = valid_nll < self.progress.best_valid_nll;
        if improved {
            self.progress.best_valid_nll = valid_nll;
            self.best_params = Some(self.model.params.clone());
        }
        let lr = self.plateau.observe(valid_nll, self.progress.learning_rate);
        self.progress.learning_rate = lr;
        self.progress.since_best = self.plateau.since_best as u64;
        self.progress.plateau_best = self.plateau.best;
        let train_nll = if self.progress.interval_windows > 0 {
            self.progress.interval_loss_sum / self.progress.interval_windows as f64
        } else {
            f64::NAN
        };
        self.progress.interval_loss_sum = 0.0;
        self.progress.interval_windows = 0;
        let row = LogRow {
            step: self.progress.step,
            train_nll,
            valid_nll,
            lr,
            wall_s: self.started.elapsed().as_secs_f64(),
        };
        self.log.push(row.clone());
        if let Some(dir) = self.out_dir.clone() {
            self.append_log(&dir, &row.to_tsv())?;
            if improved {
                self.best_checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
            }
            self.snapshot().save(&dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(row)
    }

    fn append_log(&self, dir: &Path, line: &str) -> Result<()> {
        let path = dir.join(LOG_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        writeln!(f, "{line}")?;
        Ok(())
    }

    fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    fn named(params: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Everything needed to continue this run bit-exactly.
    pub fn snapshot(&self) -> Checkpoint {
        let mut state = Vec::new();
        for (p, (m, v)) in self.model.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            state.push((format!("adam.m.{}", p.name), m.clone()));
            state.push((format!("adam.v.{}", p.name), v.clone()));
        }
        for (l, parts) in self.state.layers.iter().enumerate() {
            for (k, t) in parts.iter().enumerate() {
                state.push((format!("state.{l}.{k}"), t.clone()));
            }
        }
        if let Some(best) = &self.best_params {
            state.extend(Self::named(best, "best."));
        }
        Checkpoint {
            params: Self::named(&self.model.params, ""),
            state,
            progress: Progress {
                rng: self.rng_state(),
                ..self.progress
            },
        }
    }

    fn best_checkpoint(&self) -> Checkpoint {
        let params = self.best_params.as_ref().unwrap_or(&self.model.params);
        Checkpoint {
            params: Self::named(params, ""),
            state: Vec::new(),
            progress: Progress {
                rng: self.rng_state(),
                ..self.progress
            },
        }
    }

    /// Train until the epoch or step limit, then score the best parameters on
    /// the full validation stream.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.finished() {
            self.train_step()?;
            if self.progress.step.is_multiple_of(self.schedule.checkpoint_interval) {
                self.checkpoint()?;
            }
        }
        let best = self.best_params.clone().unwrap_or_else(|| self.model.params.clone());
        let current = std::mem::replace(&mut self.model.params, best.clone());
        let full = evaluate(&self.model, self.valid, "valid", &self.eval_options())?.mean_nll;
        self.model.params = current;
        if let Some(dir) = self.out_dir.clone() {
            self.snapshot().save(&dir.join(LATEST_CHECKPOINT))?;
            if self.best_params.is_none() {
                self.best_checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
            }
            self.append_log(&dir, &format!("# full_valid_nll\t{full}"))?;
        }
        log::info!(
            "finished at step {} (epoch {}): best slice nll {:.4}, full valid nll {:.4}",
            self.progress.step,
            self.progress.epoch,
            self.progress.best_valid_nll,
            full
        );
        Ok(TrainOutcome {
            steps: self.progress.step,
            epochs: self.progress.epoch,
            best_valid_nll: self.progress.best_valid_nll,
            full_valid_nll: full,
            final_lr: self.progress.learning_rate,
            log: self.log,
            best_params: best,
        })
    }
}

/// Parameters from a checkpoint loaded into a model built from the same config.
pub fn load_params(model: &mut Model, checkpoint: &Checkpoint) -> Result<()> {
    for p in model.params.iter_mut() {
        let t = checkpoint
            .param(&p.name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "checkpoint parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    if checkpoint.params.len() != model.params.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} parameters, model has {}",
            checkpoint.params.len(),
            model.params.len()
        )));
    }
    Ok(())
}
