//! Latency harness comparing one-pass generation with step-by-step decoding.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ExposureLog;
use crate::decoding::{ar_decode, greedy_decode};
use crate::error::{Error, Result};
use crate::model::{ArGenerator, Generator, GeneratorConfig};
use crate::numerics::{AdamConfig, AdamState, Gradients, Scalar};
use crate::objectives::{LossWeights, UtilitySpec};
use crate::pipeline::{ar_gradient, generator_gradient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    /// Untimed steps run before every timed series.
    pub warmup: usize,
    pub steps: usize,
    /// Timed steps per method and slate length in the sweep.
    pub sweep_steps: usize,
    pub sweep_m: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup: 10,
            steps: 100,
            sweep_steps: 30,
            sweep_m: vec![1, 2, 4, 6, 8],
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps < 2 || self.sweep_steps < 2 {
            return Err(Error::Config("bench needs batch_size >= 1 and at least 2 timed steps".into()));
        }
        if self.sweep_m.len() < 2 || self.sweep_m.contains(&0) {
            return Err(Error::Config("sweep_m needs at least two positive slate lengths".into()));
        }
        Ok(())
    }
}

/// Wall-clock statistics of one timed series, in milliseconds per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl Timing {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean_ms: mean, std_ms: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub inference: Timing,
    pub training: Timing,
    /// Forward passes over all timed inference steps.
    pub forward_passes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: usize,
    pub nar_ms: f64,
    pub ar_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(x, y)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("linear fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub steps: usize,
    pub m: usize,
    pub nar: MethodReport,
    pub ar: MethodReport,
    /// AR over NAR mean inference time.
    pub inference_ratio: f64,
    pub training_ratio: f64,
    pub sweep: Vec<SweepPoint>,
    pub nar_fit: LinearFit,
    pub ar_fit: LinearFit,
}

impl BenchReport {
    pub const SWEEP_CSV_HEADER: &'static str = "m,nar_ms,ar_ms";

    pub fn sweep_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SWEEP_CSV_HEADER);
        for p in &self.sweep {
            s.push_str(&format!("{},{},{}\n", p.m, p.nar_ms, p.ar_ms));
        }
        s
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "batch {} x {} timed steps, m = {}", self.batch_size, self.steps, self.m)?;
        for (name, r) in [("nar", &self.nar), ("ar", &self.ar)] {
            writeln!(
                f,
                "{name:<4} inference {:9.3} ± {:7.3} ms  training {:9.3} ± {:7.3} ms  passes {}",
                r.inference.mean_ms, r.inference.std_ms, r.training.mean_ms, r.training.std_ms, r.forward_passes
            )?;
        }
        writeln!(f, "inference ratio {:.2}, training ratio {:.2}", self.inference_ratio, self.training_ratio)?;
        for p in &self.sweep {
            writeln!(f, "m={:<2} nar {:9.3} ms  ar {:9.3} ms", p.m, p.nar_ms, p.ar_ms)?;
        }
        write!(
            f,
            "slope nar {:.4} ms/pos (r2 {:.3}), ar {:.4} ms/pos (r2 {:.3})",
            self.nar_fit.slope, self.nar_fit.r2, self.ar_fit.slope, self.ar_fit.r2
        )
    }
}

fn batch(reqs: &[ExposureLog], step: usize, size: usize) -> impl Iterator<Item = &ExposureLog> {
    (0..size).map(move |k| &reqs[(step * size + k) % reqs.len()])
}

fn time_ms(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

fn nar_infer<T: Scalar>(model: &Generator<T>, reqs: &[ExposureLog], step: usize, size: usize) -> Result<()> {
    for r in batch(reqs, step, size) {
        std::hint::black_box(greedy_decode(&model.forward(r)?)?);
    }
    Ok(())
}

fn ar_infer<T: Scalar>(model: &ArGenerator<T>, reqs: &[ExposureLog], step: usize, size: usize) -> Result<()> {
    for r in batch(reqs, step, size) {
        std::hint::black_box(ar_decode(model, r)?);
    }
    Ok(())
}

/// Times `warmup` discarded plus `steps` kept calls of `f(step)`.
fn series(warmup: usize, steps: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<Vec<f64>> {
    for s in 0..warmup {
        f(s)?;
    }
    (0..steps).map(|s| time_ms(|| f(warmup + s))).collect()
}

/// Benchmarks the two generators on labelled requests. Both must share
/// encoder dimensions. Training steps run on clones, so the inputs are left
/// untouched. The slate-length sweep uses freshly initialised models, since
/// step cost does not depend on trained weights.
pub fn run_bench<T: Scalar>(
    nar: &Generator<T>,
    ar: &ArGenerator<T>,
    reqs: &[ExposureLog],
    cfg: &BenchConfig,
    weights: &LossWeights,
    spec: &UtilitySpec,
) -> Result<BenchReport> {
    cfg.validate()?;
    if reqs.is_empty() {
        return Err(Error::Empty("bench requests"));
    }
    if nar.config() != ar.config() {
        return Err(Error::Config(format!(
            "NAR and AR encoder configs differ: {:?} vs {:?}",
            nar.config(),
            ar.config()
        )));
    }
    let b = cfg.batch_size;
    let m = nar.config().m;

    nar.reset_forward_passes();
    let nar_inf = series(cfg.warmup, cfg.steps, |s| nar_infer(nar, reqs, s, b))?;
    let nar_passes = nar.forward_passes() - (cfg.warmup * b) as u64;
    ar.reset_forward_passes();
    let ar_inf = series(cfg.warmup, cfg.steps, |s| ar_infer(ar, reqs, s, b))?;
    let ar_passes = ar.forward_passes() - (cfg.warmup * b * m) as u64;

    let nar_train = {
        let frozen = nar.clone();
        let mut model = nar.clone();
        let mut adam = AdamState::new(model.params(), AdamConfig::default());
        series(cfg.warmup, cfg.steps, |s| {
            let mut total = Gradients::zeros_like(model.params());
            for r in batch(reqs, s, b) {
                total.add_assign(&generator_gradient(&frozen, model.params(), r, weights, spec)?.0);
            }
            total.scale(T::lit(1.0 / b as f64));
            model.params_mut().accumulate(&total)?;
            adam.step(model.params_mut())?;
            Ok(())
        })?
    };
    let ar_train = {
        let frozen = ar.clone();
        let mut model = ar.clone();
        let mut adam = AdamState::new(model.params(), AdamConfig::default());
        series(cfg.warmup, cfg.steps, |s| {
            let mut total = Gradients::zeros_like(model.params());
            for r in batch(reqs, s, b) {
                total.add_assign(&ar_gradient(&frozen, model.params(), r)?.0);
            }
            total.scale(T::lit(1.0 / b as f64));
            model.params_mut().accumulate(&total)?;
            adam.step(model.params_mut())?;
            Ok(())
        })?
    };

    let mut sweep = Vec::with_capacity(cfg.sweep_m.len());
    for &sm in &cfg.sweep_m {
        let gcfg = GeneratorConfig { m: sm, ..nar.config().clone() };
        let g = Generator::<T>::new(gcfg.clone())?;
        let a = ArGenerator::<T>::new(gcfg)?;
        for s in 0..cfg.warmup {
            nar_infer(&g, reqs, s, b)?;
            ar_infer(&a, reqs, s, b)?;
        }
        // Interleaved so slow drift in machine load hits both methods alike.
        let (mut tn, mut ta) = (Vec::new(), Vec::new());
        for s in 0..cfg.sweep_steps {
            tn.push(time_ms(|| nar_infer(&g, reqs, cfg.warmup + s, b))?);
            ta.push(time_ms(|| ar_infer(&a, reqs, cfg.warmup + s, b))?);
        }
        sweep.push(SweepPoint {
            m: sm,
            nar_ms: Timing::from_samples(&tn).mean_ms,
            ar_ms: Timing::from_samples(&ta).mean_ms,
        });
    }
    let ms: Vec<f64> = sweep.iter().map(|p| p.m as f64).collect();
    let nar_fit = linear_fit(&ms, &sweep.iter().map(|p| p.nar_ms).collect::<Vec<_>>())?;
    let ar_fit = linear_fit(&ms, &sweep.iter().map(|p| p.ar_ms).collect::<Vec<_>>())?;

    let nar = MethodReport {
        inference: Timing::from_samples(&nar_inf),
        training: Timing::from_samples(&nar_train),
        forward_passes: nar_passes,
    };
    let ar = MethodReport {
        inference: Timing::from_samples(&ar_inf),
        training: Timing::from_samples(&ar_train),
        forward_passes: ar_passes,
    };
    Ok(BenchReport {
        batch_size: b,
        steps: cfg.steps,
        m,
        inference_ratio: ar.inference.mean_ms / nar.inference.mean_ms,
        training_ratio: ar.training.mean_ms / nar.training.mean_ms,
        nar,
        ar,
        sweep,
        nar_fit,
        ar_fit,
    })
}
