//! Budget-sized language model: embeddings, stacked recurrent layers joined by
//! additive skip connections, optional down-projection, output embedding and
//! the four dropout sites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::cells::{
    count_cell_params, CellKind, CellRegistry, CellSpec, GateCoupling, RecurrentCell, StateDropVariant,
    StateMask,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamRole, ParamStore};

pub const EMBEDDING: &str = "embedding";
pub const OUTPUT_EMBEDDING: &str = "output_embedding";
pub const OUTPUT_BIAS: &str = "output_bias";
pub const PROJECTION: &str = "projection";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub cell_kind: CellKind,
    pub coupling: GateCoupling,
    /// Layers for LSTM, micro-layers for RHN.
    pub depth: usize,
    pub budget: u64,
    /// Embedding size as a fraction of the hidden size.
    pub input_embedding_ratio: f64,
    pub input_drop: f64,
    pub intra_layer_drop: f64,
    pub output_drop: f64,
    pub state_drop: f64,
    pub state_drop_variant: StateDropVariant,
    pub shared_embeddings: bool,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cell_kind: CellKind::Lstm,
            coupling: GateCoupling::Capped,
            depth: 1,
            budget: 10_000_000,
            input_embedding_ratio: 1.0,
            input_drop: 0.0,
            intra_layer_drop: 0.0,
            output_drop: 0.0,
            state_drop: 0.0,
            state_drop_variant: StateDropVariant::Variational,
            shared_embeddings: true,
            vocab_size: 10_000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Contract("depth must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Contract("vocabulary is empty".into()));
        }
        if !(self.input_embedding_ratio > 0.0 && self.input_embedding_ratio <= 1.0) {
            return Err(Error::Contract(format!(
                "input embedding ratio must be in (0, 1], got {}",
                self.input_embedding_ratio
            )));
        }
        for (name, rate) in [
            ("input_drop", self.input_drop),
            ("intra_layer_drop", self.intra_layer_drop),
            ("output_drop", self.output_drop),
            ("state_drop", self.state_drop),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Contract(format!("{name} must be in [0, 1), got {rate}")));
            }
        }
        if self.cell_kind == CellKind::Rhn && self.intra_layer_drop != 0.0 {
            return Err(Error::Contract(
                "intra_layer_drop does not apply to rhn: only the state passes between micro-layers".into(),
            ));
        }
        Ok(())
    }

    /// Unshared embeddings always use `e = h` with no projection.
    pub fn effective_ratio(&self) -> f64 {
        if self.shared_embeddings {
            self.input_embedding_ratio
        } else {
            1.0
        }
    }

    /// Number of stacked cells (RHN is a single highway stack).
    pub fn layers(&self) -> usize {
        match self.cell_kind {
            CellKind::Lstm => self.depth,
            CellKind::Rhn => 1,
        }
    }

    pub fn embedding_dim(&self, hidden: usize) -> usize {
        ((self.effective_ratio() * hidden as f64).floor() as usize).max(1)
    }

    /// Parameter count of the model with hidden size `hidden`.
    pub fn params_for_hidden(&self, hidden: usize) -> u64 {
        let v = self.vocab_size as u64;
        let h = hidden as u64;
        let e = self.embedding_dim(hidden) as u64;
        let tables = if self.shared_embeddings { 1 } else { 2 };
        let mut total = tables * v * e + v;
        if e < h {
            total += h * e;
        }
        match self.cell_kind {
            CellKind::Lstm => {
                for layer in 0..self.depth {
                    let input = if layer == 0 { e } else { h };
                    total += count_cell_params(CellKind::Lstm, self.coupling, input as usize, hidden, 1) as u64;
                }
            }
            CellKind::Rhn => {
                total += count_cell_params(CellKind::Rhn, self.coupling, e as usize, hidden, self.depth) as u64;
            }
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizingSolution {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub down_projection: bool,
    pub param_count: u64,
}

/// Largest hidden size whose parameter count fits the budget.
pub fn solve_sizing(config: &ModelConfig) -> Result<SizingSolution> {
    config.validate()?;
    let minimum = config.params_for_hidden(1);
    if minimum > config.budget {
        return Err(Error::Sizing {
            budget: config.budget,
            minimum,
        });
    }
    let fits = |h: usize| config.params_for_hidden(h) <= config.budget;
    let mut hi = 2;
    while fits(hi) {
        hi *= 2;
    }
    let mut lo = 1;
    // fits(lo) holds, fits(hi) does not
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // the count is monotone in h, but floor(r*h) steps make a short scan cheap insurance
    let mut h = lo;
    for cand in lo + 1..=lo + 4 {
        if fits(cand) {
            h = cand;
        }
    }
    let e = config.embedding_dim(h);
    Ok(SizingSolution {
        embedding_dim: e,
        hidden_dim: h,
        down_projection: e < h,
        param_count: config.params_for_hidden(h),
    })
}

/// Total trainable scalars in a parameter registry.
pub fn count_parameters(params: &ParamStore) -> u64 {
    params.count() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    MeanField,
    MonteCarlo,
}

/// Dropout masks for one window, stored time-major (`row = t * batch + b`).
/// Entries are 0 or `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPlan {
    pub batch: usize,
    pub steps: usize,
    pub input: Tensor,
    /// One per boundary between consecutive LSTM layers.
    pub intra: Vec<Tensor>,
    pub output: Tensor,
    pub output_projected: Tensor,
    /// One `[batch, hidden]` mask per layer, shared across time steps.
    pub state: Vec<Tensor>,
}

impl DropoutPlan {
    /// Rows of `mask` belonging to time step `t`.
    pub fn at_step<'a>(&self, mask: &'a Tensor, t: usize) -> &'a [f64] {
        let width = mask.cols();
        &mask.data()[t * self.batch * width..(t + 1) * self.batch * width]
    }
}

fn draw_mask(rng: &mut ChaCha8Rng, shape: &[usize], rate: f64) -> Tensor {
    if rate == 0.0 {
        return Tensor::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape is non-empty")
}

/// Draw every mask for a `batch x steps` window from `seed`.
pub fn sample_masks(
    config: &ModelConfig,
    sizing: &SizingSolution,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Result<DropoutPlan> {
    config.validate()?;
    if batch == 0 || steps == 0 {
        return Err(Error::Contract("masks need a non-empty window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, h) = (sizing.embedding_dim, sizing.hidden_dim);
    let rows = batch * steps;
    let input = draw_mask(&mut rng, &[rows, e], config.input_drop);
    let intra = (1..config.layers())
        .map(|_| draw_mask(&mut rng, &[rows, h], config.intra_layer_drop))
        .collect();
    let output = draw_mask(&mut rng, &[rows, h], config.output_drop);
    let output_projected = draw_mask(&mut rng, &[rows, e], config.output_drop);
    let state_rate = match config.state_drop_variant {
        StateDropVariant::None => 0.0,
        _ => config.state_drop,
    };
    let state = (0..config.layers())
        .map(|_| draw_mask(&mut rng, &[batch, h], state_rate))
        .collect();
    Ok(DropoutPlan {
        batch,
        steps,
        input,
        intra,
        output,
        output_projected,
        state,
    })
}

/// Carried state: one list of `[batch, hidden]` tensors per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<Vec<Tensor>>,
}

impl RecurrentState {
    pub fn batch(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |t| t.rows())
    }

    /// Zero the state of one batch row.
    pub fn reset_row(&mut self, row: usize) {
        for part in self.layers.iter_mut().flatten() {
            let h = part.cols();
            part.data_mut()[row * h..(row + 1) * h].fill(0.0);
        }
    }

    pub fn reset(&mut self) {
        for part in self.layers.iter_mut().flatten() {
            part.data_mut().fill(0.0);
        }
    }
}

/// Handles produced by [`Model::forward`].
pub struct ForwardOutput {
    /// Per-token negative log-likelihood, time-major `[steps * batch]`.
    pub token_nll: Var,
    /// Mean of `token_nll`.
    pub loss: Var,
    pub final_state: Vec<Vec<Var>>,
}

pub struct Model {
    pub config: ModelConfig,
    pub sizing: SizingSolution,
    pub params: ParamStore,
    cells: Vec<Box<dyn RecurrentCell>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("sizing", &self.sizing)
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Size to the budget and initialize from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, seed, &CellRegistry::default())
    }

    pub fn with_registry(config: ModelConfig, seed: u64, registry: &CellRegistry) -> Result<Self> {
        let sizing = solve_sizing(&config)?;
        Self::with_sizing(config, sizing, seed, registry)
    }

    /// Build with explicit dimensions, bypassing the budget search.
    pub fn with_sizing(
        config: ModelConfig,
        sizing: SizingSolution,
        seed: u64,
        registry: &CellRegistry,
    ) -> Result<Self> {
        config.validate()?;
        let (e, h) = (sizing.embedding_dim, sizing.hidden_dim);
        if e == 0 || h == 0 {
            return Err(Error::Contract("embedding and hidden sizes must be positive".into()));
        }
        if sizing.down_projection != (e < h) {
            return Err(Error::Contract(format!(
                "down projection flag disagrees with e={e}, h={h}"
            )));
        }
        if !config.shared_embeddings && e != h {
            return Err(Error::Contract("unshared embeddings need e = h".into()));
        }
        let cells: Vec<Box<dyn RecurrentCell>> = match config.cell_kind {
            CellKind::Lstm => (0..config.depth)
                .map(|l| {
                    let spec = CellSpec {
                        input: if l == 0 { e } else { h },
                        hidden: h,
                        coupling: config.coupling,
                        depth: 1,
                    };
                    registry.build("lstm", &format!("lstm{l}"), spec)
                })
                .collect::<Result<_>>()?,
            CellKind::Rhn => vec![registry.build(
                "rhn",
                "rhn",
                CellSpec {
                    input: e,
                    hidden: h,
                    coupling: config.coupling,
                    depth: config.depth,
                },
            )?],
        };
        let v = config.vocab_size;
        let scale = 1.0 / (h as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert_uniform(EMBEDDING, &[v, e], scale, &mut rng)?;
        if !config.shared_embeddings {
            params.insert_uniform(OUTPUT_EMBEDDING, &[v, e], scale, &mut rng)?;
        }
        params.insert(OUTPUT_BIAS, Tensor::zeros(&[v]), ParamRole::Bias)?;
        if e < h {
            params.insert_uniform(PROJECTION, &[h, e], scale, &mut rng)?;
        }
        for cell in &cells {
            cell.init_params(&mut params, &mut rng)?;
        }
        Ok(Model {
            config,
            sizing,
            params,
            cells,
        })
    }

    pub fn cells(&self) -> &[Box<dyn RecurrentCell>] {
        &self.cells
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState {
            layers: self
                .cells
                .iter()
                .map(|c| {
                    (0..c.state_parts())
                        .map(|_| Tensor::zeros(&c.state_shape(batch)))
                        .collect()
                })
                .collect(),
        }
    }

    /// Record one window on `tape`. `inputs` and `targets` are row-major
    /// `[batch, steps]`; `Train` and `MonteCarlo` apply `plan`, `MeanField`
    /// applies no masks.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        steps: usize,
        state: &RecurrentState,
        plan: Option<&DropoutPlan>,
        mode: ForwardMode,
    ) -> Result<ForwardOutput> {
        let rows = batch * steps;
        if rows == 0 || inputs.len() != rows || targets.len() != rows {
            return Err(Error::dim(
                "forward",
                format!(
                    "{} inputs and {} targets for a {batch}x{steps} window",
                    inputs.len(),
                    targets.len()
                ),
            ));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = inputs.iter().chain(targets).find(|&&id| id >= v) {
            return Err(Error::dim("forward", format!("token id {bad} outside vocabulary of {v}")));
        }
        if state.layers.len() != self.cells.len() {
            return Err(Error::dim(
                "forward",
                format!("state has {} layers, model has {}", state.layers.len(), self.cells.len()),
            ));
        }
        for (cell, parts) in self.cells.iter().zip(&state.layers) {
            let shape = cell.state_shape(batch);
            if parts.len() != cell.state_parts() || parts.iter().any(|p| p.shape() != shape) {
                return Err(Error::dim(
                    "forward",
                    format!("state does not match {} parts of shape {shape:?}", cell.state_parts()),
                ));
            }
        }
        let plan = match mode {
            ForwardMode::MeanField => None,
            _ => {
                let plan = plan.ok_or_else(|| {
                    Error::Contract(format!("{mode:?} forward needs a dropout plan"))
                })?;
                if plan.batch != batch || plan.steps != steps {
                    return Err(Error::dim(
                        "forward",
                        format!("plan is {}x{}, window is {batch}x{steps}", plan.batch, plan.steps),
                    ));
                }
                Some(plan)
            }
        };
        let c = &self.config;
        let masked = |tape: &mut Tape, x: Var, rate: f64, mask: Option<&Tensor>| -> Result<Var> {
            match mask {
                Some(m) if rate > 0.0 => {
                    let m = tape.constant(m.clone());
                    tape.mul(x, m)
                }
                _ => Ok(x),
            }
        };

        let time_major = |ids: &[usize]| -> Vec<usize> {
            (0..rows).map(|r| ids[(r % batch) * steps + r / batch]).collect()
        };
        let embedding = params.var(EMBEDDING)?;
        let embedded = tape.gather_rows(embedding, time_major(inputs))?;
        let mut layer_in = masked(tape, embedded, c.input_drop, plan.map(|p| &p.input))?;

        let state_rate = if c.state_drop_variant == StateDropVariant::None { 0.0 } else { c.state_drop };
        let mut combined: Option<Var> = None;
        let mut final_state = Vec::with_capacity(self.cells.len());
        for (l, cell) in self.cells.iter().enumerate() {
            let projected = cell.project_inputs(tape, params, layer_in)?;
            let mut carried: Vec<Var> = state.layers[l].iter().map(|t| tape.constant(t.clone())).collect();
            let mask = match plan {
                Some(p) if state_rate > 0.0 => Some(StateMask {
                    mask: tape.constant(p.state[l].clone()),
                    variant: c.state_drop_variant,
                }),
                _ => None,
            };
            let mut outputs = Vec::with_capacity(steps);
            for t in 0..steps {
                let x_t = if steps == 1 {
                    projected
                } else {
                    tape.slice(projected, 0, t * batch, batch)?
                };
                let (out, next) = cell.step(tape, params, x_t, &carried, mask)?;
                outputs.push(out);
                carried = next;
            }
            final_state.push(carried);
            let layer_out = if steps == 1 { outputs[0] } else { tape.concat(&outputs, 0)? };
            combined = Some(match combined {
                None => layer_out,
                Some(sum) => tape.add(sum, layer_out)?,
            });
            if l + 1 < self.cells.len() {
                layer_in = masked(tape, layer_out, c.intra_layer_drop, plan.map(|p| &p.intra[l]))?;
            }
        }
        let combined = combined.expect("at least one layer");
        let mut out = masked(tape, combined, c.output_drop, plan.map(|p| &p.output))?;
        if self.sizing.down_projection {
            let proj = params.var(PROJECTION)?;
            out = tape.matmul(out, proj)?;
            out = masked(tape, out, c.output_drop, plan.map(|p| &p.output_projected))?;
        }
        let table = if c.shared_embeddings {
            embedding
        } else {
            params.var(OUTPUT_EMBEDDING)?
        };
        let logits = tape.matmul_transposed(out, table)?;
        let bias = params.var(OUTPUT_BIAS)?;
        let logits = tape.add(logits, bias)?;
        let token_nll = tape.softmax_cross_entropy(logits, time_major(targets))?;
        let total = tape.sum(token_nll)?;
        let loss = tape.scale(total, 1.0 / rows as f64)?;
        Ok(ForwardOutput {
            token_nll,
            loss,
            final_state,
        })
    }

    /// Gradient-free window pass. Returns per-token NLL row-major
    /// `[batch, steps]` and the final state.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_window(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        steps: usize,
        state: &RecurrentState,
        plan: Option<&DropoutPlan>,
        mode: ForwardMode,
    ) -> Result<(Vec<f64>, RecurrentState)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, inputs, targets, batch, steps, state, plan, mode)?;
        let tm = tape.value(out.token_nll).data();
        let mut nll = vec![0.0; batch * steps];
        for (r, &x) in tm.iter().enumerate() {
            nll[(r % batch) * steps + r / batch] = x;
        }
        let next = RecurrentState {
            layers: out
                .final_state
                .iter()
                .map(|parts| parts.iter().map(|&p| tape.value(p).clone()).collect())
                .collect(),
        };
        Ok((nll, next))
    }
}
