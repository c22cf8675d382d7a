//! Slate construction from a placement probability matrix.
//!
//! All decoders fill positions left to right, never reuse a candidate, and
//! break ties toward the lowest candidate index.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RequestBatch;
use crate::error::{Error, Result};
use crate::model::{ArGenerator, ProbMatrix};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Contrastive,
    Greedy,
    Topk,
    Beam,
    Autoregressive,
}

impl fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Contrastive => "contrastive",
            Self::Greedy => "greedy",
            Self::Topk => "topk",
            Self::Beam => "beam",
            Self::Autoregressive => "autoregressive",
        })
    }
}

impl FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "contrastive" => Self::Contrastive,
            "greedy" => Self::Greedy,
            "topk" => Self::Topk,
            "beam" => Self::Beam,
            "autoregressive" | "ar" => Self::Autoregressive,
            other => return Err(Error::Config(format!("unknown decode method `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    /// Weight of the similarity penalty in contrastive decoding.
    pub alpha: f64,
    pub k: usize,
    pub beam_width: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: DecodeMethod::Contrastive,
            alpha: 0.1,
            k: 5,
            beam_width: 4,
            num_samples: 8,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.k == 0 || self.beam_width == 0 || self.num_samples == 0 {
            return Err(Error::Config(
                "k, beam_width and num_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateSequence {
    pub indices: Vec<usize>,
    /// Probability of the chosen candidate at each position.
    pub probs: Vec<f64>,
    pub method: DecodeMethod,
}

impl SlateSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `sum_j ln p_j`, with zero probabilities floored at the smallest
    /// positive normal.
    pub fn log_score(&self) -> f64 {
        self.probs.iter().map(|&p| floor_ln(p)).sum()
    }
}

/// Checks that `indices` are pairwise distinct and below `n`.
pub fn validate_indices(indices: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(Error::InvalidSlate(format!("index {i} out of range for {n} candidates")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidSlate(format!("index {i} appears twice")));
        }
    }
    Ok(())
}

fn floor_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

fn check_feasible<T: Scalar>(pm: &ProbMatrix<T>) -> Result<()> {
    if pm.m() > pm.n() {
        return Err(Error::Infeasible { m: pm.m(), n: pm.n() });
    }
    Ok(())
}

/// Column `j` of the valid rows, widened to `f64`.
fn column<T: Scalar>(pm: &ProbMatrix<T>, j: usize) -> Vec<f64> {
    (0..pm.n()).map(|i| pm.prob(i, j).to_f64_lossy()).collect()
}

/// Index of the largest unselected score, lowest index on ties.
fn argmax_unselected(scores: &[f64], used: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if used[i] {
            continue;
        }
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Cosine similarity of rows `a` and `b`; 0 when either has zero norm.
pub fn cosine<T: Scalar>(reps: &crate::numerics::Tensor<T>, a: usize, b: usize) -> f64 {
    let (x, y) = (reps.row(a), reps.row(b));
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (&u, &v) in x.iter().zip(y) {
        let (u, v) = (u.to_f64_lossy(), v.to_f64_lossy());
        dot += u * v;
        nx += u * u;
        ny += v * v;
    }
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx.sqrt() * ny.sqrt())
    }
}

pub fn greedy_decode<T: Scalar>(pm: &ProbMatrix<T>) -> Result<SlateSequence> {
    check_feasible(pm)?;
    let mut used = vec![false; pm.n()];
    let mut out = SlateSequence {
        indices: Vec::with_capacity(pm.m()),
        probs: Vec::with_capacity(pm.m()),
        method: DecodeMethod::Greedy,
    };
    for j in 0..pm.m() {
        let col = column(pm, j);
        let i = argmax_unselected(&col, &used).expect("feasibility checked");
        used[i] = true;
        out.indices.push(i);
        out.probs.push(col[i]);
    }
    Ok(out)
}

/// Picks, at each position, the unselected candidate maximising
/// `(1 - alpha) * p - alpha * max_sim`, where `max_sim` is the largest cosine
/// similarity to any already placed candidate (0 at the first position).
pub fn contrastive_decode<T: Scalar>(pm: &ProbMatrix<T>, cfg: &DecodeConfig) -> Result<SlateSequence> {
    check_feasible(pm)?;
    cfg.validate()?;
    let n = pm.n();
    let alpha = cfg.alpha;
    let mut used = vec![false; n];
    let mut max_sim = vec![f64::NEG_INFINITY; n];
    let mut out = SlateSequence {
        indices: Vec::with_capacity(pm.m()),
        probs: Vec::with_capacity(pm.m()),
        method: DecodeMethod::Contrastive,
    };
    for j in 0..pm.m() {
        let col = column(pm, j);
        let scores: Vec<f64> = if j == 0 {
            col.iter().map(|&p| (1.0 - alpha) * p).collect()
        } else {
            col.iter()
                .zip(&max_sim)
                .map(|(&p, &s)| (1.0 - alpha) * p - alpha * s)
                .collect()
        };
        let pick = argmax_unselected(&scores, &used).expect("feasibility checked");
        used[pick] = true;
        out.indices.push(pick);
        out.probs.push(col[pick]);
        for (i, s) in max_sim.iter_mut().enumerate() {
            if !used[i] {
                *s = s.max(cosine(&pm.candidate_reps, i, pick));
            }
        }
    }
    Ok(out)
}

/// Samples each position from the renormalised `k` most probable unselected
/// candidates of its column.
pub fn topk_sample<T: Scalar, R: Rng + ?Sized>(
    pm: &ProbMatrix<T>,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<SlateSequence> {
    check_feasible(pm)?;
    cfg.validate()?;
    let n = pm.n();
    let mut used = vec![false; n];
    let mut out = SlateSequence {
        indices: Vec::with_capacity(pm.m()),
        probs: Vec::with_capacity(pm.m()),
        method: DecodeMethod::Topk,
    };
    for j in 0..pm.m() {
        let col = column(pm, j);
        let mut ranked: Vec<usize> = (0..n).filter(|&i| !used[i]).collect();
        // Stable sort keeps lower indices first among equal probabilities.
        ranked.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
        ranked.truncate(cfg.k);
        let mass: f64 = ranked.iter().map(|&i| col[i]).sum();
        let pick = if mass > 0.0 {
            let mut u = rng.random::<f64>() * mass;
            let mut chosen = *ranked.last().unwrap();
            for &i in &ranked {
                if u < col[i] {
                    chosen = i;
                    break;
                }
                u -= col[i];
            }
            chosen
        } else {
            ranked[0]
        };
        used[pick] = true;
        out.indices.push(pick);
        out.probs.push(col[pick]);
    }
    Ok(out)
}

/// Width-limited search maximising `sum_j ln p[y_j, j]`.
pub fn beam_decode<T: Scalar>(pm: &ProbMatrix<T>, cfg: &DecodeConfig) -> Result<SlateSequence> {
    check_feasible(pm)?;
    cfg.validate()?;
    struct Beam {
        score: f64,
        last_p: f64,
        indices: Vec<usize>,
        probs: Vec<f64>,
    }
    let n = pm.n();
    let mut beams = vec![Beam {
        score: 0.0,
        last_p: 0.0,
        indices: Vec::new(),
        probs: Vec::new(),
    }];
    for j in 0..pm.m() {
        let col = column(pm, j);
        let mut next = Vec::with_capacity(beams.len() * n);
        for b in &beams {
            for (i, &p) in col.iter().enumerate() {
                if b.indices.contains(&i) {
                    continue;
                }
                let mut indices = b.indices.clone();
                indices.push(i);
                let mut probs = b.probs.clone();
                probs.push(p);
                next.push(Beam {
                    score: b.score + floor_ln(p),
                    last_p: p,
                    indices,
                    probs,
                });
            }
        }
        // Candidates are generated in lexicographic order, so the stable sort
        // resolves remaining ties toward lower indices.
        next.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(b.last_p.total_cmp(&a.last_p))
        });
        next.truncate(cfg.beam_width);
        beams = next;
    }
    let best = beams.into_iter().next().expect("feasibility checked");
    Ok(SlateSequence {
        indices: best.indices,
        probs: best.probs,
        method: DecodeMethod::Beam,
    })
}

/// The contrastive slate followed by up to `num_samples - 1` further distinct
/// top-k samples.
pub fn sample_slates<T: Scalar, R: Rng + ?Sized>(
    pm: &ProbMatrix<T>,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<SlateSequence>> {
    let mut out = vec![contrastive_decode(pm, cfg)?];
    let attempts = 4 * cfg.num_samples;
    for _ in 0..attempts {
        if out.len() >= cfg.num_samples {
            break;
        }
        let s = topk_sample(pm, cfg, rng)?;
        if out.iter().all(|o| o.indices != s.indices) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Runs the decoder selected by `cfg.method` with an RNG seeded from `cfg.seed`.
pub fn decode<T: Scalar>(pm: &ProbMatrix<T>, cfg: &DecodeConfig) -> Result<SlateSequence> {
    match cfg.method {
        DecodeMethod::Contrastive => contrastive_decode(pm, cfg),
        DecodeMethod::Greedy => greedy_decode(pm),
        DecodeMethod::Topk => topk_sample(pm, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
        DecodeMethod::Beam => beam_decode(pm, cfg),
        DecodeMethod::Autoregressive => Err(Error::Config(
            "autoregressive decoding needs an autoregressive model".into(),
        )),
    }
}

/// Fills the slate one position at a time, re-running the model with the
/// placed prefix and taking the most probable unplaced candidate.
pub fn ar_decode<T: Scalar>(model: &ArGenerator<T>, req: &RequestBatch) -> Result<SlateSequence> {
    let m = model.config().m;
    let n = req.n();
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    if m > n {
        return Err(Error::Infeasible { m, n });
    }
    let mut used = vec![false; n];
    let mut out = SlateSequence {
        indices: Vec::with_capacity(m),
        probs: Vec::with_capacity(m),
        method: DecodeMethod::Autoregressive,
    };
    for _ in 0..m {
        let p: Vec<f64> = model
            .step_probs(req, &out.indices)?
            .into_iter()
            .map(Scalar::to_f64_lossy)
            .collect();
        let i = argmax_unselected(&p, &used).expect("feasibility checked");
        used[i] = true;
        out.indices.push(i);
        out.probs.push(p[i]);
    }
    Ok(out)
}
