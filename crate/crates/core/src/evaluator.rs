//! Listwise slate evaluator.
//!
//! A slate's items pass through an input projection plus a learned position
//! embedding, one pre-norm self-attention and feed-forward block, and a
//! sigmoid head per interaction type. The slate utility is the weighted sum
//! of the per-item scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RequestBatch;
use crate::decoding::{validate_indices, SlateSequence};
use crate::error::{Error, Result};
use crate::model::layers::{EncoderLayer, LayerNorm, Linear};
use crate::numerics::{sigmoid, Checkpoint, NumericsError, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::train::{minibatch_train, TrainConfig};

const NAMESPACE: &str = "eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub d_x: usize,
    /// Longest slate the position embedding covers.
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub interactions: Vec<String>,
    /// Selection weight per interaction type.
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            d_x: 11,
            m: 6,
            d: 16,
            heads: 2,
            d_ff: 32,
            interactions: vec!["click".into(), "like".into()],
            weights: vec![1.0, 0.5],
            seed: 1,
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_x", self.d_x),
            ("m", self.m),
            ("d", self.d),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("evaluator {name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "evaluator d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.interactions.is_empty() || self.interactions.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "evaluator has {} interactions and {} weights",
                self.interactions.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("evaluator weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateScore {
    /// `scores[b][i]`: predicted probability of interaction `b` on slot `i`.
    pub scores: Vec<Vec<f64>>,
    pub utility: f64,
}

impl SlateScore {
    fn from_probs(probs: Vec<Vec<f64>>, weights: &[f64]) -> Self {
        let utility = probs
            .iter()
            .zip(weights)
            .map(|(row, &w)| w * row.iter().sum::<f64>())
            .sum();
        Self {
            scores: probs,
            utility,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluator<T> {
    cfg: EvaluatorConfig,
    params: ParamStore<T>,
    input: Linear,
    positions: ParamId,
    block: EncoderLayer,
    norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(cfg: EvaluatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let input = Linear::new(&mut p, "in", cfg.d_x, cfg.d, &mut rng);
        let positions = p.add_weight("positions", cfg.m, cfg.d, &mut rng);
        let block = EncoderLayer::new(&mut p, "block", cfg.d, cfg.heads, cfg.d_ff, &mut rng);
        let norm = LayerNorm::new(&mut p, "norm", cfg.d);
        let head = Linear::new(&mut p, "head", cfg.d, cfg.interactions.len(), &mut rng);
        Ok(Self {
            cfg,
            params: p,
            input,
            positions,
            block,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Features of the slate's items in slate order, `len x d_x`.
    pub fn slate_features(&self, req: &RequestBatch, slate: &[usize]) -> Result<Tensor<T>> {
        if slate.is_empty() || slate.len() > self.cfg.m {
            return Err(Error::InvalidSlate(format!(
                "slate length {} outside 1..={}",
                slate.len(),
                self.cfg.m
            )));
        }
        validate_indices(slate, req.n())?;
        let d_x = self.cfg.d_x;
        let mut data = Vec::with_capacity(slate.len() * d_x);
        for &i in slate {
            let f = &req.candidates[i].features;
            if f.len() != d_x {
                return Err(Error::Dimension {
                    what: "candidate feature width",
                    expected: d_x,
                    got: f.len(),
                });
            }
            data.extend(f.iter().map(|&v| T::lit(v)));
        }
        Ok(Tensor::from_vec(slate.len(), d_x, data)?)
    }

    /// Per-slot logits, `len x |interactions|`.
    pub fn logits_tape(&self, tape: &mut Tape<'_, T>, feats: Tensor<T>) -> Result<Var> {
        let len = feats.rows();
        let x = tape.leaf(feats)?;
        let x = self.input.apply(tape, x)?;
        let table = tape.param(self.positions);
        let pos = if len == self.cfg.m {
            table
        } else {
            let rows: Vec<usize> = (0..len).collect();
            tape.gather_rows(table, &rows)?
        };
        let x = tape.add(x, pos)?;
        let x = self.block.apply(tape, x, None)?;
        let x = self.norm.apply(tape, x)?;
        Ok(self.head.apply(tape, x)?)
    }

    pub fn score_indices(&self, req: &RequestBatch, slate: &[usize]) -> Result<SlateScore> {
        let feats = self.slate_features(req, slate)?;
        let mut tape = Tape::with_params(&self.params);
        let logits = self.logits_tape(&mut tape, feats)?;
        let z = tape.value(logits);
        let b = self.cfg.interactions.len();
        let probs = (0..b)
            .map(|k| {
                (0..slate.len())
                    .map(|i| sigmoid(z.get(i, k)).to_f64_lossy())
                    .collect()
            })
            .collect();
        Ok(SlateScore::from_probs(probs, &self.cfg.weights))
    }

    pub fn score_slate(&self, req: &RequestBatch, slate: &SlateSequence) -> Result<SlateScore> {
        self.score_indices(req, &slate.indices)
    }

    /// Observed feedback of the logged slate laid out like the logits.
    pub fn labels(&self, req: &RequestBatch) -> Result<Vec<T>> {
        let fb = req
            .feedback
            .as_ref()
            .ok_or_else(|| Error::InvalidSlate(format!("request {} has no feedback", req.request_id)))?;
        let rows: Vec<&[f64]> = self
            .cfg
            .interactions
            .iter()
            .map(|name| {
                fb.row(name)
                    .ok_or_else(|| Error::Config(format!("feedback has no `{name}` interaction")))
            })
            .collect::<Result<_>>()?;
        let m = fb.m();
        let mut out = Vec::with_capacity(m * rows.len());
        for i in 0..m {
            for row in &rows {
                out.push(T::lit(row[i]));
            }
        }
        Ok(out)
    }

    /// Mean binary cross-entropy of the logged slate's feedback, recorded on
    /// `tape`, which may be bound to any store with this model's layout.
    pub fn loss_tape(&self, tape: &mut Tape<'_, T>, req: &RequestBatch) -> Result<Var> {
        let exposed = req
            .exposed
            .as_deref()
            .ok_or_else(|| Error::InvalidSlate(format!("request {} has no exposed slate", req.request_id)))?;
        let labels = self.labels(req)?;
        let feats = self.slate_features(req, exposed)?;
        let logits = self.logits_tape(tape, feats)?;
        Ok(tape.bce_with_logits(logits, &labels)?)
    }

    /// Fits the heads to logged feedback. Returns the mean batch loss of every
    /// optimizer step.
    pub fn train(&mut self, logs: &[RequestBatch], cfg: &TrainConfig) -> Result<Vec<f64>> {
        if logs.is_empty() {
            return Err(Error::Empty("evaluator training log"));
        }
        let model = self.clone();
        let mut curve = Vec::new();
        minibatch_train(
            &mut self.params,
            logs.len(),
            cfg,
            |store, i| {
                let mut tape = Tape::with_params(store);
                let loss = model.loss_tape(&mut tape, &logs[i])?;
                let value = tape.value(loss).item().to_f64_lossy();
                let grads = tape.backward(loss)?.param_grads(&tape)?;
                Ok((grads, value))
            },
            |_, losses| {
                curve.push(losses.iter().sum::<f64>() / losses.len() as f64);
                Ok(())
            },
        )?;
        Ok(curve)
    }

    /// Index and score of the highest-utility slate; the first wins ties.
    pub fn select_best(&self, req: &RequestBatch, slates: &[SlateSequence]) -> Result<(usize, SlateScore)> {
        let mut best: Option<(usize, SlateScore)> = None;
        for (k, s) in slates.iter().enumerate() {
            let score = self.score_slate(req, s)?;
            if best.as_ref().is_none_or(|(_, b)| score.utility > b.utility) {
                best = Some((k, score));
            }
        }
        best.ok_or(Error::Empty("slate list"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_store(NAMESPACE, &self.params);
        ck.meta.insert(
            "evaluator".into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let cfg: EvaluatorConfig = ck
            .meta
            .get("evaluator")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| NumericsError::Checkpoint("missing evaluator config".into()))?;
        let mut model = Self::new(cfg)?;
        ck.load_into(NAMESPACE, &mut model.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Candidate;
    use crate::decoding::DecodeMethod;
    use crate::numerics::gradcheck::check_param_grad;
    use crate::numerics::AdamConfig;
    use crate::objectives::FeedbackMatrix;
    use rand::Rng;

    fn small_cfg() -> EvaluatorConfig {
        EvaluatorConfig {
            d_x: 3,
            m: 3,
            d: 4,
            heads: 2,
            d_ff: 6,
            ..EvaluatorConfig::default()
        }
    }

    fn request(seed: u64, n: usize, d_x: usize, clicks: Option<Vec<f64>>) -> RequestBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = clicks.as_ref().map_or(0, Vec::len);
        RequestBatch {
            request_id: seed,
            user_id: 0,
            candidates: (0..n)
                .map(|i| Candidate {
                    item_id: i as u64,
                    features: (0..d_x).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                })
                .collect(),
            exposed: clicks.as_ref().map(|_| (0..m).collect()),
            feedback: clicks.map(|c| {
                let likes = c.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                FeedbackMatrix::new(vec!["click".into(), "like".into()], vec![c, likes]).unwrap()
            }),
        }
    }

    fn slate(indices: Vec<usize>) -> SlateSequence {
        SlateSequence {
            probs: vec![0.0; indices.len()],
            indices,
            method: DecodeMethod::Greedy,
        }
    }

    #[test]
    fn config_checks() {
        assert!(EvaluatorConfig::default().validate().is_ok());
        let mut c = small_cfg();
        c.weights.pop();
        assert!(c.validate().is_err());
        let c = EvaluatorConfig { heads: 3, ..small_cfg() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_utility() {
        let ev = Evaluator::<f64>::new(EvaluatorConfig { weights: vec![0.0, 0.0], ..small_cfg() }).unwrap();
        let req = request(1, 5, 3, None);
        assert_eq!(ev.score_slate(&req, &slate(vec![4, 0, 2])).unwrap().utility, 0.0);
    }

    #[test]
    fn single_item_utility() {
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let req = request(2, 4, 3, None);
        let s = ev.score_slate(&req, &slate(vec![3])).unwrap();
        assert_eq!(s.scores.len(), 2);
        let want = 1.0 * s.scores[0][0] + 0.5 * s.scores[1][0];
        assert_eq!(s.utility, want);
        for row in &s.scores {
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn order_changes_scores() {
        let mut ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<_> = ev.params().iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for v in ev.params_mut().get_mut(id).data_mut() {
                *v += rng.random::<f64>() - 0.5;
            }
        }
        let req = request(3, 5, 3, None);
        let a = ev.score_slate(&req, &slate(vec![0, 1, 2])).unwrap();
        let b = ev.score_slate(&req, &slate(vec![2, 1, 0])).unwrap();
        assert_ne!(a.utility, b.utility);
        assert_ne!(a.scores[0][0], b.scores[0][2]);
    }

    #[test]
    fn doubling_weights_doubles_utility() {
        let req = request(4, 6, 3, None);
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let mut doubled = ev.clone();
        doubled.cfg.weights = vec![2.0, 1.0];
        let s = slate(vec![5, 1, 3]);
        let a = ev.score_slate(&req, &s).unwrap().utility;
        let b = doubled.score_slate(&req, &s).unwrap().utility;
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn invalid_slates_rejected() {
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let req = request(5, 4, 3, None);
        assert!(ev.score_slate(&req, &slate(vec![0, 0])).is_err());
        assert!(ev.score_slate(&req, &slate(vec![0, 9])).is_err());
        assert!(ev.score_slate(&req, &slate(vec![0, 1, 2, 3])).is_err());
        assert!(ev.score_slate(&req, &slate(vec![])).is_err());
        assert!(ev.select_best(&req, &[]).is_err());
    }

    #[test]
    fn select_best_tie_break_and_permutation() {
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let req = request(6, 6, 3, None);
        let one = vec![slate(vec![1, 2, 3])];
        assert_eq!(ev.select_best(&req, &one).unwrap().0, 0);
        let dup = vec![slate(vec![1, 2, 3]), slate(vec![1, 2, 3])];
        assert_eq!(ev.select_best(&req, &dup).unwrap().0, 0);

        let list: Vec<_> = [vec![0, 1, 2], vec![5, 4, 3], vec![2, 0, 4], vec![3, 1, 5]]
            .into_iter()
            .map(slate)
            .collect();
        let (k, _) = ev.select_best(&req, &list).unwrap();
        let mut rev = list.clone();
        rev.reverse();
        let (k2, _) = ev.select_best(&req, &rev).unwrap();
        assert_eq!(list[k].indices, rev[k2].indices);
    }

    #[test]
    fn bce_gradient_check() {
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let req = request(7, 5, 3, Some(vec![1.0, 0.0, 1.0]));
        let err = check_param_grad(ev.params(), |tape| {
            ev.loss_tape(tape, &req).map_err(|e| match e {
                Error::Numerics(n) => n,
                other => panic!("{other}"),
            })
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_positive_labels_are_learned() {
        let mut ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let logs: Vec<_> = (0..8).map(|s| request(s, 5, 3, Some(vec![1.0; 3]))).collect();
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 4,
            adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let curve = ev.train(&logs, &cfg).unwrap();
        assert!(curve.last().unwrap() < &0.1);
        for r in &logs {
            let s = ev.score_indices(r, &[0, 1, 2]).unwrap();
            assert!(s.scores.iter().flatten().all(|&p| p > 0.9));
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_missing_feedback() {
        let ev = Evaluator::<f64>::new(small_cfg()).unwrap();
        let back = Evaluator::<f64>::from_checkpoint(&Checkpoint::parse(&ev.to_checkpoint().to_text()).unwrap()).unwrap();
        let req = request(8, 4, 3, None);
        let s = slate(vec![2, 0]);
        assert_eq!(ev.score_slate(&req, &s).unwrap(), back.score_slate(&req, &s).unwrap());
        let mut tape = Tape::with_params(ev.params());
        assert!(ev.loss_tape(&mut tape, &req).is_err());
        assert!(ev.clone().train(&[], &TrainConfig::default()).is_err());
    }
}
