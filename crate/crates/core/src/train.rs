//! Minibatch Adam driver shared by every trainable model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Gradients, NumericsError, ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the example shuffle.
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// Runs shuffled minibatch Adam over `n` examples.
///
/// `example` returns the gradient and a caller-defined record for one example,
/// evaluated against the current parameters. Per-example gradients are
/// computed in parallel and summed in example order, so results do not depend
/// on the thread count. `on_step` sees the step index and the batch records.
/// Returns the number of optimizer steps taken.
pub fn minibatch_train<T, S, F, C>(
    params: &mut ParamStore<T>,
    n: usize,
    cfg: &TrainConfig,
    example: F,
    mut on_step: C,
) -> Result<usize>
where
    T: Scalar,
    S: Send,
    F: Fn(&ParamStore<T>, usize) -> Result<(Gradients<T>, S)> + Sync,
    C: FnMut(usize, &[S]) -> Result<()>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut adam = AdamState::new(params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|max| step >= max) {
                return Ok(step);
            }
            let store: &ParamStore<T> = params;
            let results: Vec<Result<(Gradients<T>, S)>> =
                batch.par_iter().map(|&i| example(store, i)).collect();
            let mut total = Gradients::zeros_like(store);
            let mut records = Vec::with_capacity(batch.len());
            for (r, &i) in results.into_iter().zip(batch) {
                let (g, s) = r.map_err(|e| numeric_context(e, step, i))?;
                total.add_assign(&g);
                records.push(s);
            }
            total.scale(T::lit(1.0 / batch.len() as f64));
            if !total.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "non-finite gradient at step {step}"
                )));
            }
            params.accumulate(&total)?;
            adam.step(params)?;
            on_step(step, &records)?;
            step += 1;
        }
    }
    Ok(step)
}

fn numeric_context(e: Error, step: usize, example: usize) -> Error {
    match e {
        Error::Numerics(NumericsError::NonFinite { op }) => Error::NumericFailure(format!(
            "non-finite value in `{op}` at step {step}, example {example}"
        )),
        other => other,
    }
}
