//! Scoring a token stream with carried state, and metric rendering.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::BatchLayout;
use crate::error::{Error, Result};
use crate::model::{sample_masks, ForwardMode, Model};

pub const DEFAULT_MC_SAMPLES: usize = 16;

pub fn nll_to_ppl(nll: f64) -> f64 {
    nll.exp()
}

pub fn nll_to_bpc(nll: f64) -> f64 {
    nll / std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    MeanField,
    /// Average of `samples` predictive distributions, each from its own
    /// dropout masks and state chain.
    MonteCarlo { samples: usize },
}

impl EvalMode {
    pub fn samples(self) -> usize {
        match self {
            EvalMode::MeanField => 1,
            EvalMode::MonteCarlo { samples } => samples,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::MeanField => f.write_str("meanfield"),
            EvalMode::MonteCarlo { .. } => f.write_str("mc"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "meanfield" => Ok(EvalMode::MeanField),
            "mc" => Ok(EvalMode::MonteCarlo {
                samples: DEFAULT_MC_SAMPLES,
            }),
            other => Err(format!("unknown evaluation mode `{other}` (expected meanfield|mc)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub split: String,
    pub token_count: usize,
    pub mean_nll: f64,
    pub mode: EvalMode,
    pub batch_size: usize,
}

impl EvalResult {
    pub fn ppl(&self) -> f64 {
        nll_to_ppl(self.mean_nll)
    }

    pub fn bpc(&self) -> f64 {
        nll_to_bpc(self.mean_nll)
    }

    /// `key\tvalue` lines.
    pub fn to_record(&self) -> String {
        format!(
            "split\t{}\ntoken_count\t{}\nmean_nll\t{}\nppl\t{}\nbpc\t{}\nmode\t{}\nK\t{}\nbatch_size\t{}\n",
            self.split,
            self.token_count,
            self.mean_nll,
            self.ppl(),
            self.bpc(),
            self.mode,
            self.mode.samples(),
            self.batch_size
        )
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub unroll: usize,
    pub mode: EvalMode,
    /// Seeds the Monte-Carlo masks.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 1,
            unroll: 50,
            mode: EvalMode::MeanField,
            seed: 0,
        }
    }
}

/// Mean per-token NLL over `ids`, starting from a zero state and carrying
/// state across windows.
pub fn evaluate(model: &Model, ids: &[usize], split: &str, opts: &EvalOptions) -> Result<EvalResult> {
    let v = model.config.vocab_size;
    if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
        return Err(Error::Contract(format!(
            "token id {bad} in {split} split is outside the model vocabulary of {v}"
        )));
    }
    let k = opts.mode.samples();
    if k == 0 {
        return Err(Error::Contract("Monte-Carlo evaluation needs at least one sample".into()));
    }
    let layout = BatchLayout::new(ids.len(), opts.batch_size, opts.unroll)?;
    let b = opts.batch_size;
    // chains are laid out sample-major: row = sample * b + stream_row
    let rows = b * k;
    let mut state = model.zero_state(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for w in 0..layout.covering_windows() {
        let window = layout.window(ids, w);
        let steps = window.steps;
        let (nll, next) = match opts.mode {
            EvalMode::MeanField => model.forward_window(
                &window.inputs,
                &window.targets,
                b,
                steps,
                &state,
                None,
                ForwardMode::MeanField,
            )?,
            EvalMode::MonteCarlo { .. } => {
                let inputs = window.inputs.repeat(k);
                let targets = window.targets.repeat(k);
                let plan = sample_masks(&model.config, &model.sizing, rows, steps, rng.gen())?;
                model.forward_window(
                    &inputs,
                    &targets,
                    rows,
                    steps,
                    &state,
                    Some(&plan),
                    ForwardMode::MonteCarlo,
                )?
            }
        };
        state = next;
        let per_sample = b * steps;
        for pos in 0..per_sample {
            let token_nll = if k == 1 {
                nll[pos]
            } else {
                // -log mean_k p_k, computed stably from the per-sample NLLs
                let min = (0..k).map(|s| nll[s * per_sample + pos]).fold(f64::INFINITY, f64::min);
                let mean: f64 = (0..k)
                    .map(|s| (min - nll[s * per_sample + pos]).exp())
                    .sum::<f64>()
                    / k as f64;
                min - mean.ln()
            };
            total += token_nll;
        }
        count += per_sample;
    }
    Ok(EvalResult {
        split: split.to_string(),
        token_count: count,
        mean_nll: total / count as f64,
        mode: opts.mode,
        batch_size: b,
    })
}
