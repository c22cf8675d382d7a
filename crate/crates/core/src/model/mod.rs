//! The matching-model generator.
//!
//! A candidates encoder (self-attention stack, no positional signal) and a
//! position encoder (learned slot embeddings, self-attention, cross-attention
//! into the candidate states) produce `n x d` and `m x d` representations.
//! Their dot products, softmaxed down each column, give the probability of
//! placing candidate `i` at slot `j`. All `m` slot distributions come out of a
//! single pass.
//!
//! [`ArGenerator`] reuses the same network but conditions every pass on the
//! items already placed, so filling `m` slots takes `m` passes.

pub(crate) mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RequestBatch;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, NumericsError, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use layers::{CrossLayer, EncoderLayer, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Largest candidate set a request may carry.
    pub n_max: usize,
    /// Slate length.
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Raw candidate feature width.
    pub d_x: usize,
    /// Width of the learned position embeddings.
    pub d_t: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            m: 6,
            d: 16,
            heads: 2,
            layers: 2,
            d_x: 11,
            d_t: 16,
            d_ff: 32,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_max", self.n_max),
            ("m", self.m),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_x", self.d_x),
            ("d_t", self.d_t),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator.{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "generator.d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.m > self.n_max {
            return Err(Error::Config(format!(
                "generator.m={} exceeds n_max={}",
                self.m, self.n_max
            )));
        }
        Ok(())
    }
}

/// Column-stochastic `n x m` placement probabilities plus the hidden states
/// they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix<T> {
    pub values: Tensor<T>,
    pub candidate_reps: Tensor<T>,
    pub position_reps: Tensor<T>,
    /// Rows at or beyond this index are padding and carry probability 0.
    pub n_valid: usize,
}

impl<T: Scalar> ProbMatrix<T> {
    pub fn n(&self) -> usize {
        self.n_valid
    }

    pub fn m(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn prob(&self, candidate: usize, position: usize) -> T {
        self.values.get(candidate, position)
    }

    /// Builds a matrix from probabilities alone, using one-hot candidate
    /// representations (all pairwise similarities 0).
    pub fn from_values(values: Tensor<T>) -> Self {
        let n = values.rows();
        let mut reps = Tensor::zeros(n, n);
        for i in 0..n {
            reps.set(i, i, T::one());
        }
        Self {
            position_reps: Tensor::zeros(values.cols(), 1),
            candidate_reps: reps,
            n_valid: n,
            values,
        }
    }
}

/// Tape handles produced by one generator pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    pub candidate_reps: Var,
    pub position_reps: Var,
    pub n_valid: usize,
}

/// Which entries survive masking for a pass over `rows` candidate rows of
/// which the first `valid` are real and `excluded` are already placed.
struct Masks {
    keys: Option<Vec<bool>>,
    cross: Option<Vec<bool>>,
    columns: Option<Vec<bool>>,
}

impl Masks {
    fn new(rows: usize, valid: usize, m: usize, excluded: &[usize]) -> Self {
        if valid == rows && excluded.is_empty() {
            return Self {
                keys: None,
                cross: None,
                columns: None,
            };
        }
        let keys = (0..rows * rows).map(|k| k % rows < valid).collect();
        let cross = (0..m * rows).map(|k| k % rows < valid).collect();
        let mut columns: Vec<bool> = (0..rows * m).map(|k| k / m < valid).collect();
        for &i in excluded {
            for j in 0..m {
                columns[i * m + j] = false;
            }
        }
        Self {
            keys: Some(keys),
            cross: Some(cross),
            columns: Some(columns),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    NonAutoregressive,
    Autoregressive,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::NonAutoregressive => "nar",
            Kind::Autoregressive => "ar",
        }
    }
}

/// Non-autoregressive generator.
#[derive(Debug)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    kind: Kind,
    params: ParamStore<T>,
    cand_in: Linear,
    cand_layers: Vec<EncoderLayer>,
    cand_norm: LayerNorm,
    pos_table: ParamId,
    pos_in: Linear,
    pos_layers: Vec<CrossLayer>,
    pos_norm: LayerNorm,
    selected: Option<ParamId>,
    forward_passes: AtomicU64,
}

impl<T: Scalar> Clone for Generator<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            kind: self.kind,
            params: self.params.clone(),
            cand_in: self.cand_in.clone(),
            cand_layers: self.cand_layers.clone(),
            cand_norm: self.cand_norm.clone(),
            pos_table: self.pos_table,
            pos_in: self.pos_in.clone(),
            pos_layers: self.pos_layers.clone(),
            pos_norm: self.pos_norm.clone(),
            selected: self.selected,
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        Self::build(cfg, Kind::NonAutoregressive)
    }

    fn build(cfg: GeneratorConfig, kind: Kind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let cand_in = Linear::new(&mut p, "cand.in", cfg.d_x, cfg.d, &mut rng);
        let cand_layers = (0..cfg.layers)
            .map(|l| {
                EncoderLayer::new(
                    &mut p,
                    &format!("cand.layer{l}"),
                    cfg.d,
                    cfg.heads,
                    cfg.d_ff,
                    &mut rng,
                )
            })
            .collect();
        let cand_norm = LayerNorm::new(&mut p, "cand.norm", cfg.d);
        let pos_table = p.add_weight("pos.table", cfg.m, cfg.d_t, &mut rng);
        let pos_in = Linear::new(&mut p, "pos.in", cfg.d_t, cfg.d, &mut rng);
        let pos_layers = (0..cfg.layers)
            .map(|l| {
                CrossLayer::new(
                    &mut p,
                    &format!("pos.layer{l}"),
                    cfg.d,
                    cfg.heads,
                    cfg.d_ff,
                    &mut rng,
                )
            })
            .collect();
        let pos_norm = LayerNorm::new(&mut p, "pos.norm", cfg.d);
        let selected = match kind {
            Kind::Autoregressive => Some(p.add_weight("ar.selected", 1, cfg.d, &mut rng)),
            Kind::NonAutoregressive => None,
        };
        Ok(Self {
            cfg,
            kind,
            params: p,
            cand_in,
            cand_layers,
            cand_norm,
            pos_table,
            pos_in,
            pos_layers,
            pos_norm,
            selected,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of full model passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    /// Candidate features as an `rows x d_x` tensor, zero-padded past `n`.
    pub fn features(&self, req: &RequestBatch, rows: usize) -> Result<Tensor<T>> {
        let n = req.n();
        if n == 0 {
            return Err(Error::EmptyCandidates);
        }
        if n > self.cfg.n_max || rows < n {
            return Err(Error::Dimension {
                what: "candidates per request",
                expected: self.cfg.n_max,
                got: n,
            });
        }
        let d_x = self.cfg.d_x;
        let mut data = vec![T::zero(); rows * d_x];
        for (i, c) in req.candidates.iter().enumerate() {
            if c.features.len() != d_x {
                return Err(Error::Dimension {
                    what: "candidate feature width",
                    expected: d_x,
                    got: c.features.len(),
                });
            }
            for (k, &v) in c.features.iter().enumerate() {
                data[i * d_x + k] = T::lit(v);
            }
        }
        Ok(Tensor::from_vec(rows, d_x, data)?)
    }

    /// Projects candidate features to `d` and runs the self-attention stack.
    /// Rows at or past `valid` are padding and are never attended to.
    pub fn encode_candidates(&self, tape: &mut Tape<'_, T>, feats: Var, valid: usize) -> Result<Var> {
        let (rows, _) = tape.shape(feats);
        let x = self.cand_in.apply(tape, feats)?;
        self.encode_projected(tape, x, &Masks::new(rows, valid, self.cfg.m, &[]))
    }

    fn encode_projected(&self, tape: &mut Tape<'_, T>, mut x: Var, masks: &Masks) -> Result<Var> {
        for layer in &self.cand_layers {
            x = layer.apply(tape, x, masks.keys.as_deref())?;
        }
        Ok(self.cand_norm.apply(tape, x)?)
    }

    /// Runs the position encoder over the learned slot embeddings, attending
    /// into `cand_hidden`.
    pub fn encode_positions(&self, tape: &mut Tape<'_, T>, cand_hidden: Var, valid: usize) -> Result<Var> {
        let (rows, d) = tape.shape(cand_hidden);
        if d != self.cfg.d {
            return Err(Error::Dimension {
                what: "candidate hidden width",
                expected: self.cfg.d,
                got: d,
            });
        }
        let t0 = self.position_inputs(tape)?;
        self.encode_slots(tape, t0, cand_hidden, &Masks::new(rows, valid, self.cfg.m, &[]))
    }

    fn position_inputs(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        let table = tape.param(self.pos_table);
        Ok(self.pos_in.apply(tape, table)?)
    }

    fn encode_slots(&self, tape: &mut Tape<'_, T>, mut t: Var, memory: Var, masks: &Masks) -> Result<Var> {
        for layer in &self.pos_layers {
            t = layer.apply(tape, t, memory, masks.cross.as_deref())?;
        }
        Ok(self.pos_norm.apply(tape, t)?)
    }

    /// `softmax_columns(cand_reps * pos_reps^T)`, with rows past `valid`
    /// forced to probability 0.
    pub fn matching_head(
        tape: &mut Tape<'_, T>,
        cand_reps: Var,
        pos_reps: Var,
        valid: usize,
    ) -> Result<(Var, Var)> {
        let logits = tape.matmul_bt(cand_reps, pos_reps)?;
        let (rows, m) = tape.shape(logits);
        let masks = Masks::new(rows, valid, m, &[]);
        let probs = tape.softmax_columns(logits, masks.columns.as_deref())?;
        Ok((logits, probs))
    }

    /// Records a full pass for `feats` (first `valid` rows real) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<'_, T>, feats: Tensor<T>, valid: usize) -> Result<ForwardVars> {
        self.run(tape, feats, valid, &[])
    }

    fn run(
        &self,
        tape: &mut Tape<'_, T>,
        feats: Tensor<T>,
        valid: usize,
        prefix: &[usize],
    ) -> Result<ForwardVars> {
        if valid == 0 {
            return Err(Error::EmptyCandidates);
        }
        let rows = feats.rows();
        let m = self.cfg.m;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let masks = Masks::new(rows, valid, m, prefix);

        let feats = tape.leaf(feats)?;
        let mut x0 = self.cand_in.apply(tape, feats)?;
        let mut t0 = self.position_inputs(tape)?;
        if let Some(sel) = self.selected {
            if !prefix.is_empty() {
                let mut flags = Tensor::zeros(rows, 1);
                let mut slots = Tensor::zeros(m, rows);
                for (j, &i) in prefix.iter().enumerate() {
                    flags.set(i, 0, T::one());
                    slots.set(j, i, T::one());
                }
                let slots = tape.leaf(slots)?;
                let placed = tape.matmul(slots, x0)?;
                t0 = tape.add(t0, placed)?;
                let flags = tape.leaf(flags)?;
                let sel = tape.param(sel);
                let marks = tape.matmul(flags, sel)?;
                x0 = tape.add(x0, marks)?;
            }
        }
        let cand = self.encode_projected(tape, x0, &masks)?;
        let pos = self.encode_slots(tape, t0, cand, &masks)?;
        let logits = tape.matmul_bt(cand, pos)?;
        let probs = tape.softmax_columns(logits, masks.columns.as_deref())?;
        Ok(ForwardVars {
            logits,
            probs,
            candidate_reps: cand,
            position_reps: pos,
            n_valid: valid,
        })
    }

    fn collect(tape: &Tape<'_, T>, vars: &ForwardVars) -> ProbMatrix<T> {
        ProbMatrix {
            values: tape.value(vars.probs).clone(),
            candidate_reps: tape.value(vars.candidate_reps).clone(),
            position_reps: tape.value(vars.position_reps).clone(),
            n_valid: vars.n_valid,
        }
    }

    /// One inference pass over a request.
    pub fn forward(&self, req: &RequestBatch) -> Result<ProbMatrix<T>> {
        self.forward_padded(req, req.n())
    }

    /// Inference with the candidate set zero-padded to `rows`; padding rows
    /// come back with probability exactly 0.
    pub fn forward_padded(&self, req: &RequestBatch, rows: usize) -> Result<ProbMatrix<T>> {
        let feats = self.features(req, rows)?;
        let mut tape = Tape::with_params(&self.params);
        let vars = self.run(&mut tape, feats, req.n(), &[])?;
        Ok(Self::collect(&tape, &vars))
    }

    /// Inference over a batch, padding each request to the largest `n` in it.
    pub fn forward_batch(&self, reqs: &[RequestBatch]) -> Result<Vec<ProbMatrix<T>>> {
        let rows = reqs.iter().map(RequestBatch::n).max().unwrap_or(0);
        reqs.iter().map(|r| self.forward_padded(r, rows)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(self.kind.tag(), &self.params);
        ck.meta.insert("kind".into(), self.kind.tag().into());
        ck.meta.insert(
            "generator".into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        ck
    }

    fn from_checkpoint_kind(ck: &Checkpoint<T>, kind: Kind) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some(kind.tag()) {
            return Err(NumericsError::Checkpoint(format!(
                "expected a {} generator checkpoint",
                kind.tag()
            ))
            .into());
        }
        let cfg: GeneratorConfig = ck
            .meta
            .get("generator")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| NumericsError::Checkpoint("missing generator config".into()))?;
        let mut model = Self::build(cfg, kind)?;
        ck.load_into(kind.tag(), &mut model.params)?;
        Ok(model)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        Self::from_checkpoint_kind(ck, Kind::NonAutoregressive)
    }
}

/// Autoregressive baseline sharing the generator network. Each pass marks the
/// already-placed candidates, feeds them into their slots, and reads the
/// distribution for the next slot only.
#[derive(Debug)]
pub struct ArGenerator<T> {
    inner: Generator<T>,
}

impl<T: Scalar> Clone for ArGenerator<T> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Scalar> ArGenerator<T> {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        Ok(Self {
            inner: Generator::build(cfg, Kind::Autoregressive)?,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.inner.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.inner.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.inner.params
    }

    pub fn forward_passes(&self) -> u64 {
        self.inner.forward_passes()
    }

    pub fn reset_forward_passes(&self) {
        self.inner.reset_forward_passes()
    }

    pub fn features(&self, req: &RequestBatch) -> Result<Tensor<T>> {
        self.inner.features(req, req.n())
    }

    /// Records the pass that scores slot `prefix.len()` given the placed
    /// `prefix`. Placed candidates get probability 0 in every column.
    pub fn step_tape(
        &self,
        tape: &mut Tape<'_, T>,
        feats: Tensor<T>,
        valid: usize,
        prefix: &[usize],
    ) -> Result<ForwardVars> {
        if prefix.len() >= self.inner.cfg.m {
            return Err(Error::InvalidSlate(format!(
                "prefix of length {} leaves no slot to fill",
                prefix.len()
            )));
        }
        crate::decoding::validate_indices(prefix, valid)?;
        self.inner.run(tape, feats, valid, prefix)
    }

    /// Distribution over candidates for the next slot after `prefix`.
    pub fn step_probs(&self, req: &RequestBatch, prefix: &[usize]) -> Result<Vec<T>> {
        let feats = self.features(req)?;
        let mut tape = Tape::with_params(&self.inner.params);
        let vars = self.step_tape(&mut tape, feats, req.n(), prefix)?;
        let probs = tape.value(vars.probs);
        let col = prefix.len();
        Ok((0..req.n()).map(|i| probs.get(i, col)).collect())
    }

    /// Teacher-forced negative log-likelihood of `exposed`, one pass per slot.
    pub fn sequence_nll(
        &self,
        tape: &mut Tape<'_, T>,
        feats: &Tensor<T>,
        valid: usize,
        exposed: &[usize],
    ) -> Result<Var> {
        let mut terms = Vec::with_capacity(exposed.len());
        for t in 0..exposed.len() {
            let vars = self.step_tape(tape, feats.clone(), valid, &exposed[..t])?;
            let p = tape.gather_cells(vars.probs, &[(exposed[t], t)])?;
            terms.push(tape.log(p, T::min_positive_value())?);
        }
        let all = tape.concat_cols(&terms)?;
        let s = tape.sum(all)?;
        Ok(tape.neg(s)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        self.inner.to_checkpoint()
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        Ok(Self {
            inner: Generator::from_checkpoint_kind(ck, Kind::Autoregressive)?,
        })
    }
}
