//! Offline ranking metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::decoding::validate_indices;
use crate::error::{Error, Result};
use crate::model::ProbMatrix;
use crate::numerics::Scalar;

/// Floor applied to predicted probabilities before taking logs.
pub const LOGLOSS_CLAMP: f64 = 1e-12;

/// Probability that a random positive outranks a random negative, with ties
/// counted as one half. Labels above 0.5 are positives.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "auc labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tie groups (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut pos = 0usize;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            if labels[i] > 0.5 {
                rank_sum += mid;
                pos += 1;
            }
        }
        start = end;
    }
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc"));
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with scores clamped to `[1e-12, 1 - 1e-12]`.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "logloss labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("logloss input"));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = s.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// DCG of `labels` read in descending score order, with gain equal to the
/// label and discount `1 / log2(rank + 1)`. Ties keep input order.
fn dcg(order: &[usize], labels: &[f64]) -> f64 {
    order
        .iter()
        .enumerate()
        .map(|(r, &i)| labels[i] / ((r + 2) as f64).log2())
        .sum()
}

fn ndcg_one(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let mut by_score: Vec<usize> = (0..scores.len()).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ideal: Vec<usize> = (0..labels.len()).collect();
    ideal.sort_by(|&a, &b| labels[b].total_cmp(&labels[a]));
    let best = dcg(&ideal, labels);
    if best == 0.0 {
        None
    } else {
        Some(dcg(&by_score, labels) / best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ndcg {
    pub mean: f64,
    pub lists: usize,
    /// Lists without any relevant item, left out of the mean.
    pub skipped: usize,
}

/// Mean NDCG over lists of `(scores, labels)`.
pub fn ndcg(lists: &[(Vec<f64>, Vec<f64>)]) -> Result<Ndcg> {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (scores, labels) in lists {
        if scores.len() != labels.len() {
            return Err(Error::Dimension {
                what: "ndcg labels",
                expected: scores.len(),
                got: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(Error::Empty("ndcg list"));
        }
        match ndcg_one(scores, labels) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("ndcg"));
    }
    Ok(Ndcg {
        mean: sum / used as f64,
        lists: used,
        skipped,
    })
}

/// Per-candidate score: largest probability over positions.
pub fn exposure_scores<T: Scalar>(pm: &ProbMatrix<T>) -> Vec<f64> {
    (0..pm.n())
        .map(|i| {
            (0..pm.m())
                .map(|j| pm.prob(i, j).to_f64_lossy())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Share of `exposed` found among the top `k` candidates by score, lowest
/// index first among ties.
pub fn recall_at_k_scores(scores: &[f64], exposed: &[usize], k: usize) -> Result<f64> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("recall cutoff {k} outside 1..={n}")));
    }
    if exposed.is_empty() {
        return Err(Error::Empty("exposed slate"));
    }
    validate_indices(exposed, n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top = &idx[..k];
    let hits = exposed.iter().filter(|i| top.contains(i)).count();
    Ok(hits as f64 / exposed.len() as f64)
}

pub fn recall_at_k<T: Scalar>(pm: &ProbMatrix<T>, exposed: &[usize], k: usize) -> Result<f64> {
    recall_at_k_scores(&exposure_scores(pm), exposed, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub requests: usize,
    /// Item-level predictions scored by AUC and LogLoss.
    pub items: usize,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub ndcg: Option<f64>,
    pub ndcg_skipped: usize,
    /// `(k, recall@k)` pairs.
    pub recall: Vec<(usize, f64)>,
    pub mean_oracle_utility: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "requests".to_string(),
            "items".into(),
            "auc".into(),
            "logloss".into(),
            "ndcg".into(),
            "ndcg_skipped".into(),
        ];
        cols.extend(self.recall.iter().map(|(k, _)| format!("recall@{k}")));
        cols.push("mean_oracle_utility".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.requests.to_string(),
            self.items.to_string(),
            cell(self.auc),
            cell(self.logloss),
            cell(self.ndcg),
            self.ndcg_skipped.to_string(),
        ];
        cols.extend(self.recall.iter().map(|(_, r)| format!("{r:.6}")));
        cols.push(cell(self.mean_oracle_utility));
        cols.join(",")
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "requests        {}", self.requests)?;
        writeln!(f, "items           {}", self.items)?;
        writeln!(f, "auc             {}", show(self.auc))?;
        writeln!(f, "logloss         {}", show(self.logloss))?;
        writeln!(
            f,
            "ndcg            {} ({} lists skipped)",
            show(self.ndcg),
            self.ndcg_skipped
        )?;
        for (k, r) in &self.recall {
            writeln!(f, "{:<16}{r:.4}", format!("recall@{k}"))?;
        }
        if let Some(u) = self.mean_oracle_utility {
            writeln!(f, "oracle utility  {u:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise-count AUC.
    fn auc_oracle(s: &[f64], y: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] > 0.5 && y[j] <= 0.5 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.9, 0.8], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn logloss_examples() {
        assert!((logloss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(logloss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-11);
        let v = logloss(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert!((v - (-(0.9f64.ln()))).abs() < 1e-15);
        assert!((v - 0.1054).abs() < 1e-4);
        let clamped = logloss(&[0.0], &[1.0]).unwrap();
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn ndcg_examples() {
        let ideal = ndcg(&[(vec![0.9, 0.5, 0.1], vec![1.0, 1.0, 0.0])]).unwrap();
        assert_eq!(ideal.mean, 1.0);
        let second = ndcg(&[(vec![0.9, 0.1], vec![0.0, 1.0])]).unwrap();
        assert!((second.mean - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second.mean - 0.6309).abs() < 1e-4);
        let mixed = ndcg(&[
            (vec![0.9, 0.1], vec![0.0, 1.0]),
            (vec![0.3, 0.2], vec![0.0, 0.0]),
        ])
        .unwrap();
        assert_eq!((mixed.lists, mixed.skipped), (1, 1));
        assert!(ndcg(&[(vec![0.3], vec![0.0])]).is_err());
        let tied = ndcg(&[(vec![0.5, 0.5, 0.5], vec![0.0, 1.0, 0.0])]).unwrap();
        let again = ndcg(&[(vec![0.5, 0.5, 0.5], vec![0.0, 1.0, 0.0])]).unwrap();
        assert_eq!(tied, again);
        assert!((tied.mean - 1.0 / 3f64.log2()).abs() < 1e-15);
    }

    fn pm_from_scores(scores: &[f64], m: usize) -> ProbMatrix<f64> {
        let n = scores.len();
        let mut t = Tensor::zeros(n, m);
        for (i, &s) in scores.iter().enumerate() {
            for j in 0..m {
                t.set(i, j, s);
            }
        }
        ProbMatrix::from_values(t)
    }

    #[test]
    fn recall_examples() {
        let pm = pm_from_scores(&[0.9, 0.1, 0.8, 0.2, 0.7, 0.3], 2);
        assert_eq!(recall_at_k(&pm, &[0, 2], 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&pm, &[1, 3], 6).unwrap(), 1.0);
        assert_eq!(recall_at_k(&pm, &[1, 2], 2).unwrap(), 0.5);
        assert!(recall_at_k(&pm, &[1, 2], 7).is_err());
        assert!(recall_at_k(&pm, &[1, 1], 3).is_err());
    }

    #[test]
    fn recall_uses_max_over_positions() {
        // Candidate 2 is low in column 0 but the best in column 1.
        let t = Tensor::<f64>::from_f64(3, 2, &[0.5, 0.2, 0.4, 0.1, 0.1, 0.7]).unwrap();
        let pm = ProbMatrix::from_values(t);
        assert_eq!(exposure_scores(&pm), vec![0.5, 0.4, 0.7]);
        assert_eq!(recall_at_k(&pm, &[2], 1).unwrap(), 1.0);
    }

    #[test]
    fn recall_random_scoring_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let idx: Vec<usize> = (0..60).collect();
        for _ in 0..trials {
            let scores: Vec<f64> = (0..60).map(|_| rng.random()).collect();
            let exposed: Vec<usize> = idx.choose_multiple(&mut rng, 6).copied().collect();
            let r = recall_at_k_scores(&scores, &exposed, 6).unwrap();
            sum += r;
            sq += r * r;
        }
        let mean = sum / trials as f64;
        let se = ((sq / trials as f64 - mean * mean) / trials as f64).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * se, "{mean} (se {se})");
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            requests: 10,
            items: 60,
            auc: Some(0.75),
            logloss: Some(0.5),
            ndcg: None,
            ndcg_skipped: 2,
            recall: vec![(6, 0.5), (10, 0.75)],
            mean_oracle_utility: Some(1.25),
        };
        assert_eq!(
            r.csv_header(),
            "requests,items,auc,logloss,ndcg,ndcg_skipped,recall@6,recall@10,mean_oracle_utility"
        );
        assert_eq!(r.csv_row(), "10,60,0.750000,0.500000,,2,0.500000,0.750000,1.250000");
        assert_eq!(r.recall(10), Some(0.75));
        assert!(r.to_string().contains("recall@6        0.5000"));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as u8 as f64).collect();
            prop_assume!(y.iter().any(|&v| v > 0.5) && y.iter().any(|&v| v < 0.5));
            let a = auc(&s, &y).unwrap();
            prop_assert!((a - auc_oracle(&s, &y)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            let warped: Vec<f64> = s.iter().map(|&v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&warped, &y).unwrap(), a);
        }

        #[test]
        fn recall_monotone_in_k(seed in any::<u64>(), n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let m = rng.random_range(1..=n);
            let idx: Vec<usize> = (0..n).collect();
            let exposed: Vec<usize> = idx.choose_multiple(&mut rng, m).copied().collect();
            let mut prev = 0.0;
            for k in 1..=n {
                let r = recall_at_k_scores(&scores, &exposed, k).unwrap();
                prop_assert!(r >= prev && r <= 1.0);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn logloss_non_negative(s in prop::collection::vec(0.0f64..=1.0, 1..20), bits in any::<u32>()) {
            let y: Vec<f64> = (0..s.len()).map(|i| ((bits >> (i % 32)) & 1) as f64).collect();
            prop_assert!(logloss(&s, &y).unwrap() >= 0.0);
        }
    }
}
