//! Synthetic users, items and listwise click feedback.
//!
//! Items live in clusters on the unit sphere. A user clicks slot `j` with
//! probability `sigmoid(a) * bias[j] * (1 - suppression * s)`, where `a` is
//! the true user-item affinity and `s` is the largest positive cosine
//! similarity between the item and anything shown above it. Every other
//! interaction type fires on a nested event with its own base rate, so a
//! `like` implies a `click` when its rate is lower.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, ExposureLog, RequestBatch};
use crate::decoding::validate_indices;
use crate::error::{Error, Result};
use crate::objectives::{FeedbackMatrix, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub name: String,
    /// Probability of the interaction given a click-level event, in `[0, 1]`.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub num_clusters: usize,
    /// Spread of items around their cluster centre before normalisation.
    pub cluster_spread: f64,
    /// Preferred clusters per user.
    pub user_clusters: usize,
    /// Clusters drawn into one request's candidate pool.
    pub clusters_per_request: usize,
    /// How many of those are the user's preferred clusters.
    pub preferred_per_request: usize,
    pub min_candidates: usize,
    pub max_candidates: usize,
    /// Examination probability per slot; its length is the slate size.
    pub position_bias: Vec<f64>,
    pub suppression: f64,
    pub affinity_scale: f64,
    pub affinity_bias: f64,
    /// Standard deviation of the noise on the observed affinity feature.
    pub observation_noise: f64,
    /// Pure-noise feature columns appended to every candidate.
    pub noise_dim: usize,
    pub interactions: Vec<Interaction>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 5000,
            latent_dim: 8,
            num_clusters: 20,
            cluster_spread: 0.2,
            user_clusters: 2,
            clusters_per_request: 4,
            preferred_per_request: 2,
            min_candidates: 20,
            max_candidates: 20,
            position_bias: vec![1.0, 0.85, 0.72, 0.61, 0.52, 0.44],
            suppression: 1.0,
            affinity_scale: 4.0,
            affinity_bias: -2.5,
            observation_noise: 0.3,
            noise_dim: 2,
            interactions: vec![
                Interaction {
                    name: "click".into(),
                    rate: 1.0,
                },
                Interaction {
                    name: "like".into(),
                    rate: 0.3,
                },
            ],
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn m(&self) -> usize {
        self.position_bias.len()
    }

    /// Width of each candidate's feature vector.
    pub fn feature_dim(&self) -> usize {
        self.latent_dim + 1 + self.noise_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim == 0 {
            return bad("world needs users, items and a latent dimension".into());
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_items {
            return bad(format!("{} clusters for {} items", self.num_clusters, self.num_items));
        }
        if self.user_clusters == 0 || self.user_clusters > self.num_clusters {
            return bad(format!("user_clusters {} outside 1..={}", self.user_clusters, self.num_clusters));
        }
        if self.clusters_per_request == 0 || self.clusters_per_request > self.num_clusters {
            return bad(format!(
                "clusters_per_request {} outside 1..={}",
                self.clusters_per_request, self.num_clusters
            ));
        }
        let cap = self.user_clusters.min(self.clusters_per_request);
        if self.preferred_per_request == 0 || self.preferred_per_request > cap {
            return bad(format!("preferred_per_request {} outside 1..={cap}", self.preferred_per_request));
        }
        if self.min_candidates == 0 || self.min_candidates > self.max_candidates {
            return bad(format!(
                "candidate bounds {}..={} are empty",
                self.min_candidates, self.max_candidates
            ));
        }
        if self.max_candidates > self.num_items {
            return bad("more candidates than items".into());
        }
        if self.m() == 0 || self.m() > self.min_candidates {
            return bad(format!(
                "slate size {} must be in 1..={}",
                self.m(),
                self.min_candidates
            ));
        }
        if self.position_bias.iter().any(|&b| !(b > 0.0 && b <= 1.0))
            || self.position_bias.windows(2).any(|w| w[1] > w[0])
        {
            return bad("position bias must lie in (0, 1] and be non-increasing".into());
        }
        if !(self.suppression >= 0.0) || !self.suppression.is_finite() {
            return bad(format!("suppression {} must be non-negative", self.suppression));
        }
        if self.interactions.is_empty()
            || self.interactions.iter().any(|i| !(0.0..=1.0).contains(&i.rate))
        {
            return bad("interaction rates must lie in [0, 1]".into());
        }
        if !(self.observation_noise >= 0.0) || !(self.cluster_spread >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Logging policy used to pick exposed slates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LoggingPolicy {
    /// Uniformly random slate.
    Random,
    /// Candidates sorted by their observed affinity feature.
    AffinityGreedy,
    /// Sequential sampling without replacement with weights
    /// `exp(observed affinity / temperature)`.
    Softmax { temperature: f64 },
}

/// Click-level probabilities of a slate and whether any had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickProbs {
    pub probs: Vec<f64>,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    users: Vec<Vec<f64>>,
    preferred: Vec<Vec<usize>>,
    items: Vec<Vec<f64>>,
    clusters: Vec<Vec<usize>>,
}

fn unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / norm).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// RNG for request `index` of a stream seeded with `seed`.
pub fn request_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.latent_dim;
        let centres: Vec<Vec<f64>> = (0..cfg.num_clusters).map(|_| unit(&mut rng, d)).collect();
        let mut clusters = vec![Vec::new(); cfg.num_clusters];
        let scale = cfg.cluster_spread / (d as f64).sqrt();
        let items = (0..cfg.num_items)
            .map(|i| {
                // Round-robin assignment keeps every cluster populated.
                let c = i % cfg.num_clusters;
                clusters[c].push(i);
                let v: Vec<f64> = centres[c]
                    .iter()
                    .map(|&x| x + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                normalize(v)
            })
            .collect();
        let all_clusters: Vec<usize> = (0..cfg.num_clusters).collect();
        let mut users = Vec::with_capacity(cfg.num_users);
        let mut preferred = Vec::with_capacity(cfg.num_users);
        for _ in 0..cfg.num_users {
            let liked: Vec<usize> = all_clusters
                .choose_multiple(&mut rng, cfg.user_clusters)
                .copied()
                .collect();
            let mut u = vec![0.0; d];
            for &c in &liked {
                for (x, y) in u.iter_mut().zip(&centres[c]) {
                    *x += y;
                }
            }
            let jitter = unit(&mut rng, d);
            for (x, y) in u.iter_mut().zip(jitter) {
                *x += 0.3 * y;
            }
            users.push(normalize(u));
            preferred.push(liked);
        }
        Ok(Self {
            cfg,
            users,
            preferred,
            items,
            clusters,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn item_latent(&self, item: u64) -> Result<&[f64]> {
        self.items
            .get(item as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown item {item}")))
    }

    fn user_latent(&self, user: u64) -> Result<&[f64]> {
        self.users
            .get(user as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown user {user}")))
    }

    pub fn true_affinity(&self, user: u64, item: u64) -> Result<f64> {
        let u = self.user_latent(user)?;
        let v = self.item_latent(item)?;
        Ok(self.cfg.affinity_scale * dot(u, v) + self.cfg.affinity_bias)
    }

    /// Cosine similarity of two items' latents.
    pub fn item_similarity(&self, a: u64, b: u64) -> Result<f64> {
        Ok(dot(self.item_latent(a)?, self.item_latent(b)?))
    }

    /// Samples one request with id `request_id`.
    pub fn gen_request<R: Rng + ?Sized>(&self, request_id: u64, rng: &mut R) -> RequestBatch {
        let cfg = &self.cfg;
        let user = rng.random_range(0..cfg.num_users);
        let n = rng.random_range(cfg.min_candidates..=cfg.max_candidates);
        let mut pool: Vec<usize> = self.preferred[user]
            .choose_multiple(rng, cfg.preferred_per_request)
            .copied()
            .collect();
        while pool.len() < cfg.clusters_per_request {
            let c = rng.random_range(0..cfg.num_clusters);
            if !pool.contains(&c) {
                pool.push(c);
            }
        }
        let capacity: usize = pool.iter().map(|&c| self.clusters[c].len()).sum();
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        if capacity < n {
            // Tiny worlds: fall back to the whole catalogue.
            let all: Vec<usize> = (0..cfg.num_items).collect();
            chosen.extend(all.choose_multiple(rng, n).copied());
        } else {
            while chosen.len() < n {
                let c = pool[rng.random_range(0..pool.len())];
                let item = *self.clusters[c].choose(rng).expect("clusters are populated");
                if !chosen.contains(&item) {
                    chosen.push(item);
                }
            }
        }
        chosen.shuffle(rng);
        let candidates = chosen
            .into_iter()
            .map(|item| {
                let mut features = self.items[item].clone();
                let a = self
                    .true_affinity(user as u64, item as u64)
                    .expect("sampled ids are valid");
                let noise: f64 = rng.sample(StandardNormal);
                features.push(a + cfg.observation_noise * noise);
                for _ in 0..cfg.noise_dim {
                    features.push(rng.sample(StandardNormal));
                }
                Candidate {
                    item_id: item as u64,
                    features,
                }
            })
            .collect();
        RequestBatch {
            request_id,
            user_id: user as u64,
            candidates,
            exposed: None,
            feedback: None,
        }
    }

    /// Column of the observed affinity feature.
    pub fn observed_affinity(&self, req: &RequestBatch) -> Vec<f64> {
        let k = self.cfg.latent_dim;
        req.candidates.iter().map(|c| c.features[k]).collect()
    }

    /// Unclamped click-level probability of candidate `i` at `position`
    /// below the candidates `preceding`.
    pub fn slot_probability(
        &self,
        req: &RequestBatch,
        i: usize,
        preceding: &[usize],
        position: usize,
    ) -> Result<f64> {
        let item = req.candidates[i].item_id;
        let base = sigmoid(self.true_affinity(req.user_id, item)?);
        let mut sim = 0.0f64;
        for &prev in preceding {
            sim = sim.max(self.item_similarity(item, req.candidates[prev].item_id)?);
        }
        Ok(base * self.cfg.position_bias[position] * (1.0 - self.cfg.suppression * sim))
    }

    /// Click-level probability of each slot of `slate`.
    pub fn click_probabilities(&self, req: &RequestBatch, slate: &[usize]) -> Result<ClickProbs> {
        validate_indices(slate, req.n())?;
        if slate.len() > self.cfg.m() {
            return Err(Error::InvalidSlate(format!(
                "slate of {} exceeds {} positions",
                slate.len(),
                self.cfg.m()
            )));
        }
        let mut clamped = false;
        let mut probs = Vec::with_capacity(slate.len());
        for (j, &i) in slate.iter().enumerate() {
            let p = self.slot_probability(req, i, &slate[..j], j)?;
            let c = p.clamp(0.0, 1.0);
            clamped |= c != p;
            probs.push(c);
        }
        Ok(ClickProbs { probs, clamped })
    }

    /// Draws one feedback matrix for `slate`: one uniform per slot, and
    /// interaction `b` fires when it falls below `rate_b * p_j`.
    pub fn oracle_feedback<R: Rng + ?Sized>(
        &self,
        req: &RequestBatch,
        slate: &[usize],
        rng: &mut R,
    ) -> Result<FeedbackMatrix> {
        let p = self.click_probabilities(req, slate)?.probs;
        let b = self.cfg.interactions.len();
        let mut values = vec![vec![0.0; slate.len()]; b];
        for (j, &pj) in p.iter().enumerate() {
            let u: f64 = rng.random();
            for (k, inter) in self.cfg.interactions.iter().enumerate() {
                if u < inter.rate * pj {
                    values[k][j] = 1.0;
                }
            }
        }
        FeedbackMatrix::new(
            self.cfg.interactions.iter().map(|i| i.name.clone()).collect(),
            values,
        )
    }

    /// `sum_b w_b * rate_b * sum_j p_j`, the exact mean of
    /// [`utility`](crate::objectives::utility) over [`Self::oracle_feedback`].
    pub fn oracle_expected_utility(
        &self,
        req: &RequestBatch,
        slate: &[usize],
        spec: &UtilitySpec,
    ) -> Result<f64> {
        let total_p: f64 = self.click_probabilities(req, slate)?.probs.iter().sum();
        let mut out = 0.0;
        for (name, &w) in spec.interactions.iter().zip(&spec.weights) {
            match self.cfg.interactions.iter().find(|i| &i.name == name) {
                Some(inter) => out += w * inter.rate * total_p,
                None if w == 0.0 => {}
                None => return Err(Error::Config(format!("world has no `{name}` interaction"))),
            }
        }
        Ok(out)
    }

    /// Slate chosen by `policy` for `req`.
    pub fn policy_slate<R: Rng + ?Sized>(
        &self,
        req: &RequestBatch,
        policy: LoggingPolicy,
        rng: &mut R,
    ) -> Vec<usize> {
        let m = self.cfg.m();
        let n = req.n();
        match policy {
            LoggingPolicy::Random => {
                let idx: Vec<usize> = (0..n).collect();
                idx.choose_multiple(rng, m).copied().collect()
            }
            LoggingPolicy::AffinityGreedy => affinity_greedy(&self.observed_affinity(req), m),
            LoggingPolicy::Softmax { temperature } => {
                let a = self.observed_affinity(req);
                let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut w: Vec<f64> = a.iter().map(|&x| ((x - top) / temperature).exp()).collect();
                let mut out = Vec::with_capacity(m);
                for _ in 0..m {
                    let total: f64 = w.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = None;
                    for (i, &wi) in w.iter().enumerate() {
                        if wi > 0.0 {
                            pick = Some(i);
                            if u < wi {
                                break;
                            }
                            u -= wi;
                        }
                    }
                    let i = pick.unwrap_or_else(|| (0..n).find(|i| !out.contains(i)).unwrap());
                    w[i] = 0.0;
                    out.push(i);
                }
                out
            }
        }
    }

    /// Request `first_id + k` with its exposure and feedback, for `k` in
    /// `0..count`. Request `k` draws from its own stream of `seed`, so the
    /// log is identical however it is split across threads.
    pub fn gen_log(
        &self,
        policy: LoggingPolicy,
        first_id: u64,
        count: usize,
        seed: u64,
    ) -> Result<Vec<ExposureLog>> {
        if let LoggingPolicy::Softmax { temperature } = policy {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("softmax temperature {temperature} must be positive")));
            }
        }
        (0..count as u64)
            .into_par_iter()
            .map(|k| {
                let id = first_id + k;
                let mut rng = request_rng(seed, id);
                let mut req = self.gen_request(id, &mut rng);
                let slate = self.policy_slate(&req, policy, &mut rng);
                req.feedback = Some(self.oracle_feedback(&req, &slate, &mut rng)?);
                req.exposed = Some(slate);
                Ok(req)
            })
            .collect()
    }

    /// Unlabelled requests `first_id..first_id + count`.
    pub fn gen_requests(&self, first_id: u64, count: usize, seed: u64) -> Vec<RequestBatch> {
        (0..count as u64)
            .into_par_iter()
            .map(|k| self.gen_request(first_id + k, &mut request_rng(seed, first_id + k)))
            .collect()
    }
}

/// Top `m` indices by score, highest first, lowest index on ties.
pub fn affinity_greedy(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(m);
    idx
}
