//! Recurrent cells: LSTM with three cell-state couplings, and the recurrent
//! highway cell. Both sit behind [`RecurrentCell`] so further cells can be
//! registered by name in a [`CellRegistry`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamRole, ParamStore};

/// How the input and forget gates combine into the cell-state update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateCoupling {
    /// `c = f*c + i*j`
    Untied,
    /// `c = f*c + (1-f)*j`, no input gate parameters.
    Tied,
    /// `c = f*c + min(1-f, i)*j`
    #[default]
    Capped,
}

impl GateCoupling {
    /// Gate blocks in the stacked weight matrices.
    pub fn gate_blocks(self) -> usize {
        match self {
            GateCoupling::Tied => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for GateCoupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateCoupling::Untied => "untied",
            GateCoupling::Tied => "tied",
            GateCoupling::Capped => "capped",
        })
    }
}

impl FromStr for GateCoupling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "untied" => Ok(GateCoupling::Untied),
            "tied" => Ok(GateCoupling::Tied),
            "capped" => Ok(GateCoupling::Capped),
            other => Err(format!("unknown gate coupling `{other}` (expected untied|tied|capped)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CellKind {
    #[default]
    Lstm,
    Rhn,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Rhn => "rhn",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "rhn" => Ok(CellKind::Rhn),
            other => Err(format!("unknown cell `{other}` (expected lstm|rhn)")),
        }
    }
}

/// Where the per-window state mask applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StateDropVariant {
    /// On the recurrent state feeding every gate preactivation.
    #[default]
    Variational,
    /// On the cell-update candidate only.
    Recurrent,
    None,
}

impl fmt::Display for StateDropVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StateDropVariant::Variational => "variational",
            StateDropVariant::Recurrent => "recurrent",
            StateDropVariant::None => "none",
        })
    }
}

impl FromStr for StateDropVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variational" => Ok(StateDropVariant::Variational),
            "recurrent" => Ok(StateDropVariant::Recurrent),
            "none" => Ok(StateDropVariant::None),
            other => Err(format!(
                "unknown state dropout `{other}` (expected variational|recurrent|none)"
            )),
        }
    }
}

/// The state mask for one step, already recorded as a tape constant.
#[derive(Clone, Copy, Debug)]
pub struct StateMask {
    pub mask: Var,
    pub variant: StateDropVariant,
}

impl StateMask {
    fn on_state(mask: Option<StateMask>) -> Option<Var> {
        mask.filter(|m| m.variant == StateDropVariant::Variational)
            .map(|m| m.mask)
    }

    fn on_candidate(mask: Option<StateMask>) -> Option<Var> {
        mask.filter(|m| m.variant == StateDropVariant::Recurrent)
            .map(|m| m.mask)
    }
}

/// Dimensions of one cell instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub input: usize,
    pub hidden: usize,
    pub coupling: GateCoupling,
    /// Micro-layers for highway cells; ignored by LSTM.
    pub depth: usize,
}

/// Interface every recurrent cell implements.
///
/// A step consumes the input contribution for that time step (computed for the
/// whole window up front by [`RecurrentCell::project_inputs`]) and the carried
/// state, and returns the cell output plus the new state.
pub trait RecurrentCell: Send + Sync {
    fn spec(&self) -> CellSpec;

    /// Number of `[batch, hidden]` tensors carried between steps.
    fn state_parts(&self) -> usize;

    fn count_params(&self) -> usize;

    fn init_params(&self, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()>;

    /// Input contribution for every row of `xs: [n, input]`.
    fn project_inputs(&self, tape: &mut Tape, params: &Bound, xs: Var) -> Result<Var>;

    fn step(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x_proj: Var,
        state: &[Var],
        mask: Option<StateMask>,
    ) -> Result<(Var, Vec<Var>)>;

    /// Shape of each carried state tensor for `batch` rows.
    fn state_shape(&self, batch: usize) -> [usize; 2] {
        [batch, self.spec().hidden]
    }
}

/// Apply one of the three cell-state update rules.
///
/// `input_gate` is ignored for [`GateCoupling::Tied`] and required otherwise.
pub fn combine_cell_state(
    tape: &mut Tape,
    coupling: GateCoupling,
    c_prev: Var,
    forget: Var,
    input_gate: Option<Var>,
    candidate: Var,
) -> Result<Var> {
    let retained = tape.mul(forget, c_prev)?;
    let admit = match (coupling, input_gate) {
        (GateCoupling::Tied, _) => tape.one_minus(forget)?,
        (GateCoupling::Untied, Some(i)) => i,
        (GateCoupling::Capped, Some(i)) => {
            let room = tape.one_minus(forget)?;
            tape.min(room, i)?
        }
        (c, None) => {
            return Err(Error::Contract(format!("{c} coupling needs an input gate")));
        }
    };
    let update = tape.mul(admit, candidate)?;
    tape.add(retained, update)
}

fn init_scale(hidden: usize) -> f64 {
    1.0 / (hidden as f64).sqrt()
}

fn uniform(shape: &[usize], scale: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..=scale)).collect())
}

/// LSTM layer. Gate blocks are stacked column-wise in the order
/// `i, f, o, j` (`f, o, j` when tied).
pub struct LstmCell {
    spec: CellSpec,
    prefix: String,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, spec: CellSpec) -> Self {
        LstmCell {
            spec,
            prefix: prefix.into(),
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Single step from a raw input `x: [batch, input]`.
    pub fn step_from_input(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        mask: Option<StateMask>,
    ) -> Result<(Var, Var)> {
        let xp = self.project_inputs(tape, params, x)?;
        let (h, state) = self.step(tape, params, xp, &[h_prev, c_prev], mask)?;
        Ok((h, state[1]))
    }
}

impl RecurrentCell for LstmCell {
    fn spec(&self) -> CellSpec {
        self.spec
    }

    fn state_parts(&self) -> usize {
        2
    }

    fn count_params(&self) -> usize {
        count_cell_params(CellKind::Lstm, self.spec.coupling, self.spec.input, self.spec.hidden, 1)
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        let CellSpec { input, hidden, coupling, .. } = self.spec;
        let width = coupling.gate_blocks() * hidden;
        let s = init_scale(hidden);
        store.insert(self.name("w"), uniform(&[input, width], s, rng)?, ParamRole::Weight)?;
        store.insert(self.name("r"), uniform(&[hidden, width], s, rng)?, ParamRole::Weight)?;
        let mut bias = vec![0.0; width];
        let forget_block = if coupling == GateCoupling::Tied { 0 } else { 1 };
        bias[forget_block * hidden..(forget_block + 1) * hidden].fill(1.0);
        store.insert(self.name("b"), Tensor::vector(bias), ParamRole::Bias)
    }

    fn project_inputs(&self, tape: &mut Tape, params: &Bound, xs: Var) -> Result<Var> {
        let w = params.var(&self.name("w"))?;
        let b = params.var(&self.name("b"))?;
        let xw = tape.matmul(xs, w)?;
        tape.add(xw, b)
    }

    fn step(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x_proj: Var,
        state: &[Var],
        mask: Option<StateMask>,
    ) -> Result<(Var, Vec<Var>)> {
        let [h_prev, c_prev] = state else {
            return Err(Error::Contract(format!("lstm state has {} parts, expected 2", state.len())));
        };
        let h = self.spec.hidden;
        let r = params.var(&self.name("r"))?;
        let h_in = match StateMask::on_state(mask) {
            Some(m) => tape.mul(*h_prev, m)?,
            None => *h_prev,
        };
        let rec = tape.matmul(h_in, r)?;
        let pre = tape.add(x_proj, rec)?;
        let (input_gate, forget, out_gate, cand_pre) = match self.spec.coupling {
            GateCoupling::Tied => {
                let gates = tape.slice(pre, 1, 0, 2 * h)?;
                let gates = tape.sigmoid(gates)?;
                let f = tape.slice(gates, 1, 0, h)?;
                let o = tape.slice(gates, 1, h, h)?;
                (None, f, o, tape.slice(pre, 1, 2 * h, h)?)
            }
            _ => {
                let gates = tape.slice(pre, 1, 0, 3 * h)?;
                let gates = tape.sigmoid(gates)?;
                let i = tape.slice(gates, 1, 0, h)?;
                let f = tape.slice(gates, 1, h, h)?;
                let o = tape.slice(gates, 1, 2 * h, h)?;
                (Some(i), f, o, tape.slice(pre, 1, 3 * h, h)?)
            }
        };
        let mut cand = tape.tanh(cand_pre)?;
        if let Some(m) = StateMask::on_candidate(mask) {
            cand = tape.mul(cand, m)?;
        }
        let c = combine_cell_state(tape, self.spec.coupling, *c_prev, forget, input_gate, cand)?;
        let squashed = tape.tanh(c)?;
        let h_out = tape.mul(out_gate, squashed)?;
        Ok((h_out, vec![h_out, c]))
    }
}

/// Recurrent highway cell with coupled carry gate `1 - t`. The input enters
/// the first micro-layer only; columns are `[candidate | transform]`.
pub struct RhnCell {
    spec: CellSpec,
    prefix: String,
}

impl RhnCell {
    pub fn new(prefix: impl Into<String>, spec: CellSpec) -> Self {
        RhnCell {
            spec,
            prefix: prefix.into(),
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn step_from_input(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        s_prev: Var,
        mask: Option<StateMask>,
    ) -> Result<Var> {
        let xp = self.project_inputs(tape, params, x)?;
        let (s, _) = self.step(tape, params, xp, &[s_prev], mask)?;
        Ok(s)
    }
}

impl RecurrentCell for RhnCell {
    fn spec(&self) -> CellSpec {
        self.spec
    }

    fn state_parts(&self) -> usize {
        1
    }

    fn count_params(&self) -> usize {
        count_cell_params(CellKind::Rhn, self.spec.coupling, self.spec.input, self.spec.hidden, self.spec.depth)
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<()> {
        let CellSpec { input, hidden, depth, .. } = self.spec;
        let s = init_scale(hidden);
        store.insert(self.name("w"), uniform(&[input, 2 * hidden], s, rng)?, ParamRole::Weight)?;
        for l in 0..depth {
            store.insert(
                self.name(&format!("r{l}")),
                uniform(&[hidden, 2 * hidden], s, rng)?,
                ParamRole::Weight,
            )?;
            let mut bias = vec![0.0; 2 * hidden];
            bias[hidden..].fill(1.0);
            store.insert(self.name(&format!("b{l}")), Tensor::vector(bias), ParamRole::Bias)?;
        }
        Ok(())
    }

    fn project_inputs(&self, tape: &mut Tape, params: &Bound, xs: Var) -> Result<Var> {
        let w = params.var(&self.name("w"))?;
        tape.matmul(xs, w)
    }

    fn step(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x_proj: Var,
        state: &[Var],
        mask: Option<StateMask>,
    ) -> Result<(Var, Vec<Var>)> {
        let [s_prev] = state else {
            return Err(Error::Contract(format!("rhn state has {} parts, expected 1", state.len())));
        };
        let h = self.spec.hidden;
        let mut s = *s_prev;
        for l in 0..self.spec.depth {
            let r = params.var(&self.name(&format!("r{l}")))?;
            let b = params.var(&self.name(&format!("b{l}")))?;
            let s_in = match StateMask::on_state(mask) {
                Some(m) => tape.mul(s, m)?,
                None => s,
            };
            let rec = tape.matmul(s_in, r)?;
            let mut pre = tape.add(rec, b)?;
            if l == 0 {
                pre = tape.add(pre, x_proj)?;
            }
            let cand_pre = tape.slice(pre, 1, 0, h)?;
            let mut cand = tape.tanh(cand_pre)?;
            if let Some(m) = StateMask::on_candidate(mask) {
                cand = tape.mul(cand, m)?;
            }
            let gate_pre = tape.slice(pre, 1, h, h)?;
            let transform = tape.sigmoid(gate_pre)?;
            let carry = tape.one_minus(transform)?;
            let moved = tape.mul(cand, transform)?;
            let kept = tape.mul(s, carry)?;
            s = tape.add(moved, kept)?;
        }
        Ok((s, vec![s]))
    }
}

/// Trainable scalars of one cell instance.
pub fn count_cell_params(
    kind: CellKind,
    coupling: GateCoupling,
    input: usize,
    hidden: usize,
    depth: usize,
) -> usize {
    match kind {
        CellKind::Lstm => {
            coupling.gate_blocks() * (input * hidden + hidden * hidden + hidden)
        }
        CellKind::Rhn => 2 * input * hidden + depth * 2 * (hidden * hidden + hidden),
    }
}

type CellFactory = fn(&str, CellSpec) -> Box<dyn RecurrentCell>;

/// Name-keyed cell constructors. `lstm` and `rhn` are registered by default.
pub struct CellRegistry {
    factories: BTreeMap<String, CellFactory>,
}

impl Default for CellRegistry {
    fn default() -> Self {
        let mut reg = CellRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("lstm", |p, s| Box::new(LstmCell::new(p, s)));
        reg.register("rhn", |p, s| Box::new(RhnCell::new(p, s)));
        reg
    }
}

impl CellRegistry {
    pub fn register(&mut self, name: &str, factory: CellFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(|k| k.as_str())
    }

    pub fn build(&self, name: &str, prefix: &str, spec: CellSpec) -> Result<Box<dyn RecurrentCell>> {
        self.factories
            .get(name)
            .map(|f| f(prefix, spec))
            .ok_or_else(|| Error::Contract(format!("no cell registered as `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_tape_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(tape: &mut Tape, v: f64, shape: &[usize]) -> Var {
        tape.constant(Tensor::full(shape, v))
    }

    #[test]
    fn tied_full_retention() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let f = constant(&mut tape, 1.0, &[2]);
        let j = tape.constant(Tensor::vector(vec![0.9, 0.9]));
        let out = combine_cell_state(&mut tape, GateCoupling::Tied, c, f, None, j).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -0.7]);
    }

    #[test]
    fn capped_open_gate_copies_candidate() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let f = constant(&mut tape, 0.0, &[2]);
        let i = constant(&mut tape, 1.0, &[2]);
        let j = tape.constant(Tensor::vector(vec![0.25, -0.5]));
        let out = combine_cell_state(&mut tape, GateCoupling::Capped, c, f, Some(i), j).unwrap();
        assert_eq!(tape.value(out).data(), &[0.25, -0.5]);
    }

    #[test]
    fn untied_scalar_by_hand() {
        let mut tape = Tape::new();
        let c = constant(&mut tape, 0.5, &[1]);
        let f = constant(&mut tape, 0.5, &[1]);
        let i = constant(&mut tape, 0.25, &[1]);
        let j = constant(&mut tape, 0.8, &[1]);
        let out = combine_cell_state(&mut tape, GateCoupling::Untied, c, f, Some(i), j).unwrap();
        assert!((tape.value(out).data()[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn combine_rejects_mismatched_shapes_and_missing_gate() {
        let mut tape = Tape::new();
        let c = constant(&mut tape, 0.5, &[2]);
        let f = constant(&mut tape, 0.5, &[3]);
        let j = constant(&mut tape, 0.5, &[2]);
        assert!(matches!(
            combine_cell_state(&mut tape, GateCoupling::Tied, c, f, None, j),
            Err(Error::Dimension { .. })
        ));
        let f = constant(&mut tape, 0.5, &[2]);
        assert!(combine_cell_state(&mut tape, GateCoupling::Untied, c, f, None, j).is_err());
    }

    fn zero_store(cell: &dyn RecurrentCell) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cell.init_params(&mut store, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn lstm_zero_everything() {
        for coupling in [GateCoupling::Untied, GateCoupling::Tied, GateCoupling::Capped] {
            let spec = CellSpec { input: 3, hidden: 4, coupling, depth: 1 };
            let cell = LstmCell::new("l", spec);
            let store = zero_store(&cell);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = constant(&mut tape, 0.0, &[2, 3]);
            let h0 = constant(&mut tape, 0.0, &[2, 4]);
            let c0 = constant(&mut tape, 0.0, &[2, 4]);
            let (h, c) = cell.step_from_input(&mut tape, &p, x, h0, c0, None).unwrap();
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
            assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        }
    }

    fn random_store(cell: &dyn RecurrentCell, seed: u64, scale: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cell.init_params(&mut store, &mut rng).unwrap();
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        store
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn capped_with_saturated_input_gate_matches_tied() {
        let (e, h) = (3, 4);
        let capped = LstmCell::new("l", CellSpec { input: e, hidden: h, coupling: GateCoupling::Capped, depth: 1 });
        let tied = LstmCell::new("l", CellSpec { input: e, hidden: h, coupling: GateCoupling::Tied, depth: 1 });
        let mut cstore = random_store(&capped, 5, 0.5);
        // input gate bias -> +50 saturates i to 1 >= 1 - f
        for v in &mut cstore.get_mut("l.b").unwrap().data_mut()[..h] {
            *v = 50.0;
        }
        // the tied cell gets the same f, o, j blocks
        let mut tstore = ParamStore::new();
        for p in cstore.iter() {
            let cols = 4 * h;
            let rows = p.value.len() / cols;
            let mut data = Vec::new();
            for r in 0..rows {
                data.extend_from_slice(&p.value.data()[r * cols + h..(r + 1) * cols]);
            }
            let shape = if p.value.rank() == 1 { vec![3 * h] } else { vec![rows, 3 * h] };
            tstore.insert(p.name.clone(), Tensor::new(shape, data).unwrap(), p.role).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[2, e], -1.0, 1.0);
        let h0 = random_tensor(&mut rng, &[2, h], -1.0, 1.0);
        let c0 = random_tensor(&mut rng, &[2, h], -1.0, 1.0);
        let run = |cell: &LstmCell, store: &ParamStore| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let (x, h0, c0) = (tape.constant(x.clone()), tape.constant(h0.clone()), tape.constant(c0.clone()));
            let (hv, cv) = cell.step_from_input(&mut tape, &p, x, h0, c0, None).unwrap();
            (tape.value(hv).clone(), tape.value(cv).clone())
        };
        let (hc, cc) = run(&capped, &cstore);
        let (ht, ct) = run(&tied, &tstore);
        for (a, b) in hc.data().iter().zip(ht.data()).chain(cc.data().iter().zip(ct.data())) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rhn_closed_transform_gates_carry_state() {
        let spec = CellSpec { input: 3, hidden: 4, coupling: GateCoupling::Capped, depth: 3 };
        let cell = RhnCell::new("rhn", spec);
        let mut store = random_store(&cell, 1, 0.5);
        for l in 0..3 {
            for v in &mut store.get_mut(&format!("rhn.b{l}")).unwrap().data_mut()[4..] {
                *v = -50.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&mut rng, &[2, 3], -1.0, 1.0));
        let sv = tape.constant(s0.clone());
        let s = cell.step_from_input(&mut tape, &p, x, sv, None).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(s0.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rhn_open_transform_gate_is_plain_tanh_layer() {
        let spec = CellSpec { input: 2, hidden: 3, coupling: GateCoupling::Capped, depth: 1 };
        let cell = RhnCell::new("rhn", spec);
        let mut store = random_store(&cell, 4, 0.5);
        for v in &mut store.get_mut("rhn.b0").unwrap().data_mut()[3..] {
            *v = 50.0;
        }
        let x = Tensor::matrix(1, 2, vec![0.3, -0.6]).unwrap();
        let s0 = Tensor::matrix(1, 3, vec![0.1, 0.2, -0.4]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let (xv, sv) = (tape.constant(x.clone()), tape.constant(s0.clone()));
        let s = cell.step_from_input(&mut tape, &p, xv, sv, None).unwrap();
        let w = store.get("rhn.w").unwrap();
        let r = store.get("rhn.r0").unwrap();
        let b = store.get("rhn.b0").unwrap();
        for k in 0..3 {
            let mut pre = b.data()[k];
            for i in 0..2 {
                pre += x.data()[i] * w.data()[i * 6 + k];
            }
            for i in 0..3 {
                pre += s0.data()[i] * r.data()[i * 6 + k];
            }
            assert!((tape.value(s).data()[k] - pre.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_param_counts() {
        assert_eq!(count_cell_params(CellKind::Lstm, GateCoupling::Untied, 2, 2, 1), 40);
        assert_eq!(count_cell_params(CellKind::Lstm, GateCoupling::Tied, 2, 2, 1), 30);
        assert_eq!(count_cell_params(CellKind::Rhn, GateCoupling::Capped, 2, 2, 1), 20);
        // the formula agrees with what init_params allocates
        let reg = CellRegistry::default();
        for (name, coupling, depth) in [
            ("lstm", GateCoupling::Untied, 1),
            ("lstm", GateCoupling::Tied, 1),
            ("lstm", GateCoupling::Capped, 1),
            ("rhn", GateCoupling::Capped, 1),
            ("rhn", GateCoupling::Capped, 4),
        ] {
            for (e, h) in [(2, 2), (3, 7), (8, 5)] {
                let cell = reg.build(name, "c", CellSpec { input: e, hidden: h, coupling, depth }).unwrap();
                let mut store = ParamStore::new();
                cell.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(store.count(), cell.count_params(), "{name} {coupling} e={e} h={h}");
            }
        }
    }

    /// Unrolls one step per input and sums the outputs into a weighted scalar.
    fn unrolled_objective<'a>(
        cell: &'a dyn RecurrentCell,
        names: &[String],
        xs: &[Tensor],
        init: &[Tensor],
        mask: Option<(Tensor, StateDropVariant)>,
    ) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
        let names = names.to_vec();
        let xs = xs.to_vec();
        let init = init.to_vec();
        move |tape, vars| {
            let bound = Bound::from_parts(&names, vars)?;
            let mut state: Vec<Var> = init.iter().map(|t| tape.constant(t.clone())).collect();
            let m = mask.as_ref().map(|(t, variant)| StateMask { mask: tape.constant(t.clone()), variant: *variant });
            let mut total = None;
            for (k, x) in xs.iter().enumerate() {
                let xv = tape.constant(x.clone());
                let xp = cell.project_inputs(tape, &bound, xv)?;
                let (out, next) = cell.step(tape, &bound, xp, &state, m)?;
                state = next;
                let scaled = tape.scale(out, 1.0 + 0.5 * k as f64)?;
                let s = tape.sum(scaled)?;
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        }
    }

    fn gradcheck_cell(cell: &dyn RecurrentCell, variant: StateDropVariant, seed: u64) {
        let spec = cell.spec();
        let store = random_store(cell, seed, 0.8);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let params: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = 2;
        let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[batch, spec.input], -1.0, 1.0)).collect();
        let init: Vec<Tensor> = (0..cell.state_parts())
            .map(|_| random_tensor(&mut rng, &[batch, spec.hidden], -1.0, 1.0))
            .collect();
        let mask = match variant {
            StateDropVariant::None => None,
            v => Some((
                Tensor::new(
                    vec![batch, spec.hidden],
                    (0..batch * spec.hidden).map(|k| if k % 3 == 0 { 0.0 } else { 1.5 }).collect(),
                )
                .unwrap(),
                v,
            )),
        };
        let f = unrolled_objective(cell, &names, &xs, &init, mask);
        let report = check_tape_gradients(f, &params, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{variant:?}: {report:?}");
    }

    #[test]
    fn lstm_gradients_all_couplings() {
        for coupling in [GateCoupling::Untied, GateCoupling::Tied, GateCoupling::Capped] {
            let cell = LstmCell::new("l", CellSpec { input: 3, hidden: 4, coupling, depth: 1 });
            for variant in [StateDropVariant::None, StateDropVariant::Variational, StateDropVariant::Recurrent] {
                gradcheck_cell(&cell, variant, 11);
            }
        }
    }

    #[test]
    fn rhn_gradients() {
        for depth in [1, 2] {
            let cell = RhnCell::new("rhn", CellSpec { input: 3, hidden: 4, coupling: GateCoupling::Capped, depth });
            for variant in [StateDropVariant::None, StateDropVariant::Variational, StateDropVariant::Recurrent] {
                gradcheck_cell(&cell, variant, 21);
            }
        }
    }
}
