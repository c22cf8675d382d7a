//! Training loops and end-to-end generation and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExposureLog, RequestBatch};
use crate::decoding::{decode, sample_slates, DecodeConfig, SlateSequence};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::metrics::{auc, exposure_scores, logloss, ndcg, recall_at_k_scores, EvalReport};
use crate::model::{ArGenerator, Generator};
use crate::numerics::{Gradients, ParamStore, Scalar, Tape};
use crate::objectives::{sequence_log_likelihood, total_loss_with, LossBreakdown, LossWeights, UtilitySpec};
use crate::simulator::{request_rng, World};
use crate::train::{minibatch_train, TrainConfig};

/// Batch means of the per-example loss terms after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub total: f64,
    pub sequence: f64,
    pub item_contrastive: f64,
    pub position_contrastive: f64,
    pub positive_fraction: f64,
    pub flagged: usize,
}

impl StepSummary {
    pub const CSV_HEADER: &'static str =
        "step,total,sequence,item_contrastive,position_contrastive,positive_fraction,flagged";

    fn from_batch(step: usize, parts: &[LossBreakdown]) -> Self {
        let n = parts.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            total: mean(|b| b.total),
            sequence: mean(|b| b.ce_or_ul),
            item_contrastive: mean(|b| b.item_contrastive),
            position_contrastive: mean(|b| b.position_contrastive),
            positive_fraction: mean(|b| b.is_positive_sequence as u8 as f64),
            flagged: parts.iter().map(|b| b.flagged).sum(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.total,
            self.sequence,
            self.item_contrastive,
            self.position_contrastive,
            self.positive_fraction,
            self.flagged
        )
    }
}

fn exposure(req: &RequestBatch) -> Result<&[usize]> {
    req.exposed
        .as_deref()
        .ok_or_else(|| Error::InvalidSlate(format!("request {} has no exposed slate", req.request_id)))
}

/// Gradient of the generator objective on one logged request, evaluated
/// against `store` with the structure of `model`.
pub fn generator_gradient<T: Scalar>(
    model: &Generator<T>,
    store: &ParamStore<T>,
    req: &ExposureLog,
    weights: &LossWeights,
    spec: &UtilitySpec,
) -> Result<(Gradients<T>, LossBreakdown)> {
    let feedback = req
        .feedback
        .as_ref()
        .ok_or_else(|| Error::InvalidSlate(format!("request {} has no feedback", req.request_id)))?;
    let feats = model.features(req, req.n())?;
    let mut tape = Tape::with_params(store);
    let fwd = model.forward_tape(&mut tape, feats, req.n())?;
    let (loss, parts) = total_loss_with(&mut tape, &fwd, exposure(req)?, feedback, spec, weights)?;
    let grads = tape.backward(loss)?.param_grads(&tape)?;
    Ok((grads, parts))
}

/// Teacher-forced negative log-likelihood gradient of the autoregressive
/// baseline on one logged request, with the loss value.
pub fn ar_gradient<T: Scalar>(
    model: &ArGenerator<T>,
    store: &ParamStore<T>,
    req: &ExposureLog,
) -> Result<(Gradients<T>, f64)> {
    let feats = model.features(req)?;
    let mut tape = Tape::with_params(store);
    let loss = model.sequence_nll(&mut tape, &feats, req.n(), exposure(req)?)?;
    let value = tape.value(loss).item().to_f64_lossy();
    Ok((tape.backward(loss)?.param_grads(&tape)?, value))
}

/// Minibatch Adam on the generator objective over `logs`.
pub fn train_generator<T: Scalar>(
    model: &mut Generator<T>,
    logs: &[ExposureLog],
    train: &TrainConfig,
    weights: &LossWeights,
    spec: &UtilitySpec,
    mut on_step: impl FnMut(&StepSummary),
) -> Result<Vec<StepSummary>> {
    spec.validate()?;
    let frozen = model.clone();
    let mut curve = Vec::new();
    minibatch_train(
        model.params_mut(),
        logs.len(),
        train,
        |store, i| generator_gradient(&frozen, store, &logs[i], weights, spec),
        |step, parts| {
            let s = StepSummary::from_batch(step, parts);
            on_step(&s);
            curve.push(s);
            Ok(())
        },
    )?;
    Ok(curve)
}

/// Teacher-forced likelihood training of the autoregressive baseline.
/// Returns the mean batch loss per step.
pub fn train_ar<T: Scalar>(
    model: &mut ArGenerator<T>,
    logs: &[ExposureLog],
    train: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let frozen = model.clone();
    let mut curve = Vec::new();
    minibatch_train(
        model.params_mut(),
        logs.len(),
        train,
        |store, i| ar_gradient(&frozen, store, &logs[i]),
        |step, losses| {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            on_step(step, mean);
            curve.push(mean);
            Ok(())
        },
    )?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSlate {
    pub request_id: u64,
    pub slate: Vec<usize>,
    pub item_ids: Vec<u64>,
    /// Evaluator utility of the chosen slate.
    pub utility: f64,
}

/// One forward pass per request, candidate slates from [`sample_slates`], and
/// the evaluator's pick. The sampling RNG of each request is derived from
/// `cfg.seed` and the request id.
pub fn generate<T: Scalar>(
    model: &Generator<T>,
    evaluator: &Evaluator<T>,
    reqs: &[RequestBatch],
    cfg: &DecodeConfig,
) -> Result<Vec<GeneratedSlate>> {
    cfg.validate()?;
    if evaluator.config().d_x != model.config().d_x || evaluator.config().m < model.config().m {
        return Err(Error::Config(format!(
            "evaluator (d_x={}, m={}) does not fit generator (d_x={}, m={})",
            evaluator.config().d_x,
            evaluator.config().m,
            model.config().d_x,
            model.config().m
        )));
    }
    reqs.par_iter()
        .map(|req| {
            let pm = model.forward(req)?;
            let mut rng = request_rng(cfg.seed, req.request_id);
            let slates = sample_slates(&pm, cfg, &mut rng)?;
            let (k, score) = evaluator.select_best(req, &slates)?;
            let slate = slates[k].indices.clone();
            Ok(GeneratedSlate {
                request_id: req.request_id,
                item_ids: slate.iter().map(|&i| req.candidates[i].item_id).collect(),
                slate,
                utility: score.utility,
            })
        })
        .collect()
}

/// Decodes every request with `cfg.method`.
pub fn decode_all<T: Scalar>(
    model: &Generator<T>,
    reqs: &[RequestBatch],
    cfg: &DecodeConfig,
) -> Result<Vec<SlateSequence>> {
    reqs.par_iter()
        .map(|req| {
            let pm = model.forward(req)?;
            let mut c = cfg.clone();
            c.seed = cfg.seed ^ req.request_id;
            decode(&pm, &c)
        })
        .collect()
}

/// Oracle expected utility of each slate.
pub fn oracle_utilities(
    world: &World,
    reqs: &[RequestBatch],
    slates: &[Vec<usize>],
    spec: &UtilitySpec,
) -> Result<Vec<f64>> {
    if reqs.len() != slates.len() {
        return Err(Error::Dimension {
            what: "slates",
            expected: reqs.len(),
            got: slates.len(),
        });
    }
    reqs.iter()
        .zip(slates)
        .map(|(r, s)| world.oracle_expected_utility(r, s, spec))
        .collect()
}

/// `sum_j ln p[exposed_j, j]` of every logged slate under `model`.
pub fn logged_log_likelihoods<T: Scalar>(model: &Generator<T>, logs: &[ExposureLog]) -> Result<Vec<f64>> {
    logs.par_iter()
        .map(|r| Ok(sequence_log_likelihood(&model.forward(r)?, exposure(r)?)))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Offline metrics over a labelled log.
///
/// Recall@k ranks candidates by the generator. AUC, LogLoss and NDCG score
/// the evaluator's first interaction head against that interaction's logged
/// feedback on the exposed slates. With a world, slates decoded with
/// `decode_cfg` are also scored by the oracle.
pub fn evaluate<T: Scalar>(
    model: &Generator<T>,
    evaluator: Option<&Evaluator<T>>,
    world: Option<&World>,
    logs: &[ExposureLog],
    decode_cfg: &DecodeConfig,
    spec: &UtilitySpec,
    ks: &[usize],
) -> Result<EvalReport> {
    if logs.is_empty() {
        return Err(Error::Empty("test log"));
    }
    let per_request: Vec<Vec<f64>> = logs
        .par_iter()
        .map(|r| {
            let scores = exposure_scores(&model.forward(r)?);
            let exposed = exposure(r)?;
            ks.iter()
                .map(|&k| recall_at_k_scores(&scores, exposed, k.min(r.n())))
                .collect()
        })
        .collect::<Result<_>>()?;
    let recall = ks
        .iter()
        .enumerate()
        .map(|(c, &k)| (k, per_request.iter().map(|r| r[c]).sum::<f64>() / logs.len() as f64))
        .collect();

    let mut report = EvalReport {
        requests: logs.len(),
        items: 0,
        auc: None,
        logloss: None,
        ndcg: None,
        ndcg_skipped: 0,
        recall,
        mean_oracle_utility: None,
    };

    if let Some(ev) = evaluator {
        let name = &ev.config().interactions[0];
        let lists: Vec<(Vec<f64>, Vec<f64>)> = logs
            .par_iter()
            .map(|r| {
                let s = ev.score_indices(r, exposure(r)?)?;
                let labels = r
                    .feedback
                    .as_ref()
                    .and_then(|f| f.row(name))
                    .ok_or_else(|| Error::InvalidSlate(format!("request {} lacks `{name}` feedback", r.request_id)))?;
                Ok((s.scores[0].clone(), labels.to_vec()))
            })
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = lists.iter().flat_map(|l| l.0.iter().copied()).collect();
        let labels: Vec<f64> = lists.iter().flat_map(|l| l.1.iter().copied()).collect();
        report.items = scores.len();
        report.auc = auc(&scores, &labels).ok();
        report.logloss = Some(logloss(&scores, &labels)?);
        if let Ok(n) = ndcg(&lists) {
            report.ndcg = Some(n.mean);
            report.ndcg_skipped = n.skipped;
        }
    }

    if let Some(w) = world {
        let slates: Vec<Vec<usize>> = decode_all(model, logs, decode_cfg)?
            .into_iter()
            .map(|s| s.indices)
            .collect();
        report.mean_oracle_utility = Some(mean(&oracle_utilities(w, logs, &slates, spec)?));
    }
    Ok(report)
}
