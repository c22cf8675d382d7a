//! Training losses for the generator.
//!
//! Every loss is recorded on a [`Tape`] so its gradient reaches the logits
//! and, through them, the model parameters.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::decoding::validate_indices;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, ProbMatrix};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Clamp applied to label probabilities on the negative branch.
pub const UNLIKELIHOOD_CLAMP: f64 = 1.0 - 1e-12;

/// Interaction outcomes for an exposed slate: one row per interaction type,
/// one column per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexMap<String, Vec<f64>>", into = "IndexMap<String, Vec<f64>>")]
pub struct FeedbackMatrix {
    types: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl FeedbackMatrix {
    pub fn new(types: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if types.is_empty() || types.len() != values.len() {
            return Err(Error::Dimension {
                what: "feedback interaction rows",
                expected: types.len(),
                got: values.len(),
            });
        }
        let m = values[0].len();
        for row in &values {
            if row.len() != m {
                return Err(Error::Dimension {
                    what: "feedback columns",
                    expected: m,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSlate("non-finite feedback value".into()));
            }
        }
        Ok(Self { types, values })
    }

    /// Number of slots.
    pub fn m(&self) -> usize {
        self.values[0].len()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn row(&self, interaction: &str) -> Option<&[f64]> {
        self.types
            .iter()
            .position(|t| t == interaction)
            .map(|k| self.values[k].as_slice())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }
}

impl TryFrom<IndexMap<String, Vec<f64>>> for FeedbackMatrix {
    type Error = Error;

    fn try_from(map: IndexMap<String, Vec<f64>>) -> Result<Self> {
        let (types, values) = map.into_iter().unzip();
        Self::new(types, values)
    }
}

impl From<FeedbackMatrix> for IndexMap<String, Vec<f64>> {
    fn from(f: FeedbackMatrix) -> Self {
        f.types.into_iter().zip(f.values).collect()
    }
}

/// Interaction weights and the positive/negative sequence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilitySpec {
    pub interactions: Vec<String>,
    pub weights: Vec<f64>,
    /// Sequences with utility below `tau` are negatives.
    pub tau: f64,
}

impl Default for UtilitySpec {
    fn default() -> Self {
        Self {
            interactions: vec!["click".into(), "like".into()],
            weights: vec![1.0, 0.5],
            tau: 1.0,
        }
    }
}

impl UtilitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.interactions.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "utility: {} interactions but {} weights",
                self.interactions.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("utility: every weight is zero".into()));
        }
        if !self.tau.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("utility: non-finite weight or tau".into()));
        }
        Ok(())
    }

    pub fn is_positive(&self, utility: f64) -> bool {
        utility >= self.tau
    }
}

/// `sum_i sum_b w_b * e[b][i]`. Interactions are matched by name; a
/// weighted interaction missing from the feedback is an error.
pub fn utility(feedback: &FeedbackMatrix, spec: &UtilitySpec) -> Result<f64> {
    if spec.interactions.len() != spec.weights.len() {
        return Err(Error::Dimension {
            what: "utility weights",
            expected: spec.interactions.len(),
            got: spec.weights.len(),
        });
    }
    let mut total = 0.0;
    for (name, &w) in spec.interactions.iter().zip(&spec.weights) {
        match feedback.row(name) {
            Some(row) => total += w * row.iter().sum::<f64>(),
            None if w == 0.0 => {}
            None => {
                return Err(Error::Config(format!(
                    "feedback has no `{name}` interaction"
                )))
            }
        }
    }
    Ok(total)
}

fn label_cells(exposed: &[usize], n_valid: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if exposed.len() != m {
        return Err(Error::Dimension {
            what: "exposed slate length",
            expected: m,
            got: exposed.len(),
        });
    }
    validate_indices(exposed, n_valid)?;
    Ok(exposed.iter().enumerate().map(|(j, &i)| (i, j)).collect())
}

/// `-sum_j ln p[exposed[j], j]`.
pub fn ce_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    exposed: &[usize],
    n_valid: usize,
) -> Result<Var> {
    let (_, m) = tape.shape(probs);
    let cells = label_cells(exposed, n_valid, m)?;
    let p = tape.gather_cells(probs, &cells)?;
    let lp = tape.log(p, T::min_positive_value())?;
    let s = tape.sum(lp)?;
    Ok(tape.neg(s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    /// True when utility reached `tau` and the likelihood branch was used.
    pub positive: bool,
    /// Label probabilities clamped below 1 on the negative branch.
    pub clamped: usize,
}

/// Likelihood on positive sequences, `-sum_j ln(1 - p[exposed[j], j])` on
/// negative ones.
pub fn unlikelihood_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    exposed: &[usize],
    n_valid: usize,
    utility: f64,
    spec: &UtilitySpec,
) -> Result<(Var, Branch)> {
    if spec.is_positive(utility) {
        let l = ce_loss(tape, probs, exposed, n_valid)?;
        return Ok((
            l,
            Branch {
                positive: true,
                clamped: 0,
            },
        ));
    }
    let (_, m) = tape.shape(probs);
    let cells = label_cells(exposed, n_valid, m)?;
    let p = tape.gather_cells(probs, &cells)?;
    let (p, clamped) = tape.clamp(p, T::zero(), T::lit(UNLIKELIHOOD_CLAMP))?;
    let q = tape.one_minus(p)?;
    let lq = tape.log(q, T::min_positive_value())?;
    let s = tape.sum(lq)?;
    Ok((
        tape.neg(s)?,
        Branch {
            positive: false,
            clamped,
        },
    ))
}

/// Hinge on pairwise cosine similarity of distinct representations:
/// mean over ordered pairs `i != j` of `max(0, margin - 1 + s(r_i, r_j))`.
/// Uses the first `rows` rows of `reps`. The second value counts
/// zero-norm rows, whose similarities are taken as 0.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    reps: Var,
    rows: usize,
    margin: f64,
) -> Result<(Var, usize)> {
    if rows < 2 {
        return Err(Error::Dimension {
            what: "representations for contrastive loss",
            expected: 2,
            got: rows,
        });
    }
    if !(-1.0..=1.0).contains(&margin) {
        return Err(Error::Config(format!("margin {margin} outside [-1, 1]")));
    }
    let (total_rows, _) = tape.shape(reps);
    let reps = if rows < total_rows {
        let idx: Vec<usize> = (0..rows).collect();
        tape.gather_rows(reps, &idx)?
    } else {
        reps
    };
    let (unit, degenerate) = tape.row_normalize(reps)?;
    let sim = tape.matmul_bt(unit, unit)?;
    let shifted = tape.add_scalar(sim, T::lit(margin - 1.0))?;
    let hinge = tape.relu(shifted)?;
    let mut off = Tensor::full(rows, rows, T::one());
    for i in 0..rows {
        off.set(i, i, T::zero());
    }
    let off = tape.leaf(off)?;
    let masked = tape.mul(hinge, off)?;
    let s = tape.sum(masked)?;
    let pairs = (rows * (rows - 1)) as f64;
    Ok((tape.scale(s, T::lit(1.0 / pairs))?, degenerate))
}

/// Contrastive loss over candidate representations.
pub fn item_contrastive_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cand_reps: Var,
    n_valid: usize,
    margin: f64,
) -> Result<(Var, usize)> {
    contrastive_loss(tape, cand_reps, n_valid, margin)
}

/// Contrastive loss over position representations.
pub fn position_contrastive_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pos_reps: Var,
    margin: f64,
) -> Result<(Var, usize)> {
    let (m, _) = tape.shape(pos_reps);
    contrastive_loss(tape, pos_reps, m, margin)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Contrastive margin.
    pub rho: f64,
    /// Weight of the two contrastive terms.
    pub omega: f64,
    /// When false, every exposure is treated as positive (vanilla likelihood).
    pub unlikelihood: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rho: 0.5,
            omega: 0.01,
            unlikelihood: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_or_ul: f64,
    pub item_contrastive: f64,
    pub position_contrastive: f64,
    pub is_positive_sequence: bool,
    /// Probabilities clamped on the negative branch or zero-norm
    /// representations met by the contrastive terms.
    pub flagged: usize,
}

/// `ul + omega * (item + position)` with the unlikelihood objective.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    fwd: &ForwardVars,
    exposed: &[usize],
    feedback: &FeedbackMatrix,
    spec: &UtilitySpec,
    rho: f64,
    omega: f64,
) -> Result<(Var, LossBreakdown)> {
    let weights = LossWeights {
        rho,
        omega,
        unlikelihood: true,
    };
    total_loss_with(tape, fwd, exposed, feedback, spec, &weights)
}

/// [`total_loss`] with an explicit choice between unlikelihood and vanilla
/// likelihood for the sequence term.
pub fn total_loss_with<T: Scalar>(
    tape: &mut Tape<'_, T>,
    fwd: &ForwardVars,
    exposed: &[usize],
    feedback: &FeedbackMatrix,
    spec: &UtilitySpec,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let r = utility(feedback, spec)?;
    let (seq, branch) = if weights.unlikelihood {
        unlikelihood_loss(tape, fwd.probs, exposed, fwd.n_valid, r, spec)?
    } else {
        let l = ce_loss(tape, fwd.probs, exposed, fwd.n_valid)?;
        (
            l,
            Branch {
                positive: true,
                clamped: 0,
            },
        )
    };
    let mut out = LossBreakdown {
        ce_or_ul: tape.value(seq).item().to_f64_lossy(),
        is_positive_sequence: spec.is_positive(r),
        flagged: branch.clamped,
        ..LossBreakdown::default()
    };
    if weights.omega == 0.0 {
        out.total = out.ce_or_ul;
        return Ok((seq, out));
    }

    let mut total = seq;
    let mut extra = Vec::new();
    if fwd.n_valid >= 2 {
        let (item, deg) = item_contrastive_loss(tape, fwd.candidate_reps, fwd.n_valid, weights.rho)?;
        out.item_contrastive = tape.value(item).item().to_f64_lossy();
        out.flagged += deg;
        extra.push(item);
    }
    if tape.shape(fwd.position_reps).0 >= 2 {
        let (pos, deg) = position_contrastive_loss(tape, fwd.position_reps, weights.rho)?;
        out.position_contrastive = tape.value(pos).item().to_f64_lossy();
        out.flagged += deg;
        extra.push(pos);
    }
    for term in extra {
        let scaled = tape.scale(term, T::lit(weights.omega))?;
        total = tape.add(total, scaled)?;
    }
    out.total = tape.value(total).item().to_f64_lossy();
    Ok((total, out))
}

/// `sum_j ln p[slate[j], j]` read from a finished probability matrix.
pub fn sequence_log_likelihood<T: Scalar>(pm: &ProbMatrix<T>, slate: &[usize]) -> f64 {
    slate
        .iter()
        .enumerate()
        .map(|(j, &i)| pm.prob(i, j).to_f64_lossy().max(f64::MIN_POSITIVE).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_grad;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fb(types: &[&str], rows: Vec<Vec<f64>>) -> FeedbackMatrix {
        FeedbackMatrix::new(types.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    fn click_spec(tau: f64) -> UtilitySpec {
        UtilitySpec {
            interactions: vec!["click".into()],
            weights: vec![1.0],
            tau,
        }
    }

    fn probs_leaf(tape: &mut Tape<'_, f64>, rows: usize, cols: usize, data: &[f64]) -> Var {
        tape.leaf(Tensor::from_f64(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn utility_examples() {
        let zero = fb(&["click"], vec![vec![0.0; 6]]);
        assert_eq!(utility(&zero, &click_spec(1.0)).unwrap(), 0.0);
        let clicks = fb(&["click"], vec![vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(utility(&clicks, &click_spec(1.0)).unwrap(), 3.0);
        let two = fb(&["click", "like"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let spec = UtilitySpec {
            interactions: vec!["click".into(), "like".into()],
            weights: vec![1.0, 0.5],
            tau: 1.0,
        };
        assert_eq!(utility(&two, &spec).unwrap(), 1.5);
    }

    #[test]
    fn utility_missing_interaction() {
        let clicks = fb(&["click"], vec![vec![1.0]]);
        assert!(utility(&clicks, &UtilitySpec::default()).is_err());
    }

    #[test]
    fn feedback_shape_checked() {
        assert!(FeedbackMatrix::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 0.0]]).is_err());
        assert!(FeedbackMatrix::new(vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn feedback_json_keeps_order() {
        let f = fb(&["like", "click"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"like":[1.0,0.0],"click":[0.0,1.0]}"#);
        assert_eq!(serde_json::from_str::<FeedbackMatrix>(&s).unwrap(), f);
    }

    #[test]
    fn spec_validation() {
        assert!(UtilitySpec::default().validate().is_ok());
        let mut s = UtilitySpec::default();
        s.weights = vec![0.0, 0.0];
        assert!(s.validate().is_err());
        s = UtilitySpec::default();
        s.tau = f64::NAN;
        assert!(s.validate().is_err());
    }

    #[test]
    fn ce_zero_at_certain_labels() {
        let mut tape = Tape::<f64>::new();
        let p = probs_leaf(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = ce_loss(&mut tape, p, &[0, 1], 2).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn ce_uniform_closed_form() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full(60, 6, 1.0 / 60.0)).unwrap();
        let l = ce_loss(&mut tape, p, &[0, 5, 9, 13, 40, 59], 60).unwrap();
        let want = 6.0 * 60f64.ln();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        assert!((want - 24.57).abs() < 0.005);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::full(3, 2, 1.0 / 3.0)).unwrap();
        assert!(ce_loss(&mut tape, p, &[0, 3], 3).is_err());
        assert!(ce_loss(&mut tape, p, &[1, 1], 3).is_err());
        assert!(ce_loss(&mut tape, p, &[1], 3).is_err());
    }

    #[test]
    fn ce_gradient_on_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::randn(4, 2, 1.0, &mut rng);
        let err = check_grad(&[logits], |tape, v| {
            let p = tape.softmax_columns(v[0], None)?;
            Ok(ce_loss(tape, p, &[3, 1], 4).unwrap())
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unlikelihood_positive_branch_is_ce() {
        let mut tape = Tape::<f64>::new();
        let p = probs_leaf(&mut tape, 3, 2, &[0.2, 0.5, 0.3, 0.1, 0.5, 0.4]);
        let ce = ce_loss(&mut tape, p, &[2, 0], 3).unwrap();
        let (ul, b) = unlikelihood_loss(&mut tape, p, &[2, 0], 3, 1.0, &click_spec(1.0)).unwrap();
        assert!(b.positive);
        assert_eq!(tape.value(ce).item(), tape.value(ul).item());
    }

    #[test]
    fn unlikelihood_negative_half_probabilities() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 12 * 6];
        for j in 0..6 {
            data[j * 6 + j] = 0.5;
        }
        let p = probs_leaf(&mut tape, 12, 6, &data);
        let (l, b) = unlikelihood_loss(&mut tape, p, &[0, 1, 2, 3, 4, 5], 12, 0.0, &click_spec(1.0)).unwrap();
        assert!(!b.positive);
        let want = -6.0 * 0.5f64.ln();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        assert!((want - 4.159).abs() < 1e-3);
    }

    #[test]
    fn unlikelihood_vanishes_as_labels_vanish() {
        let mut tape = Tape::<f64>::new();
        let p = probs_leaf(&mut tape, 2, 2, &[1e-15, 1.0, 1.0, 1e-15]);
        let (l, _) = unlikelihood_loss(&mut tape, p, &[0, 1], 2, 0.0, &click_spec(1.0)).unwrap();
        assert!(tape.value(l).item() < 1e-14);
    }

    #[test]
    fn unlikelihood_saturation_is_clamped_and_flagged() {
        let mut tape = Tape::<f64>::new();
        let p = probs_leaf(&mut tape, 2, 1, &[1.0, 0.0]);
        let (l, b) = unlikelihood_loss(&mut tape, p, &[0], 2, 0.0, &click_spec(1.0)).unwrap();
        assert_eq!(b.clamped, 1);
        let v = tape.value(l).item();
        assert!(v.is_finite());
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-3);
    }

    #[test]
    fn unlikelihood_gradients_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::randn(5, 3, 1.0, &mut rng);
        for r in [0.0, 2.0] {
            let err = check_grad(&[logits.clone()], |tape, v| {
                let p = tape.softmax_columns(v[0], None)?;
                Ok(unlikelihood_loss(tape, p, &[4, 0, 2], 5, r, &click_spec(1.0)).unwrap().0)
            });
            assert!(err < 1e-4, "r={r}: {err}");
        }
    }

    fn reps_with_cosine(c: f64) -> Tensor<f64> {
        // Unit vectors sharing a common component of weight sqrt(c).
        let e = |i: usize| -> Vec<f64> {
            let mut v = vec![0.0; 4];
            v[i] = (1.0 - c).sqrt();
            v[3] = c.sqrt();
            v
        };
        Tensor::from_rows(&[e(0), e(1), e(2)]).unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let mut tape = Tape::<f64>::new();
        let ortho = tape
            .leaf(Tensor::from_f64(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap())
            .unwrap();
        let (l, _) = item_contrastive_loss(&mut tape, ortho, 3, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let same = tape.leaf(Tensor::from_f64(2, 2, &[0.3, 0.4, 0.3, 0.4]).unwrap()).unwrap();
        let (l, _) = item_contrastive_loss(&mut tape, same, 2, 0.5).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);

        let t = reps_with_cosine(0.8);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let (a, b) = (t.row(i), t.row(j));
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    assert!((dot - 0.8).abs() < 1e-12);
                }
            }
        }
        let v = tape.leaf(t).unwrap();
        let (l, _) = position_contrastive_loss(&mut tape, v, 0.5).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn contrastive_zero_norm_is_flagged() {
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::from_f64(2, 2, &[0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let (l, deg) = item_contrastive_loss(&mut tape, r, 2, 0.5).unwrap();
        assert_eq!(deg, 1);
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(item_contrastive_loss(&mut tape, r, 1, 0.5).is_err());
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Shift so several pairs are inside the hinge at margin 0.9.
        let mut reps = Tensor::randn(5, 4, 1.0, &mut rng);
        for v in reps.data_mut().iter_mut().step_by(4) {
            *v += 2.0;
        }
        let err = check_grad(&[reps], |tape, v| Ok(contrastive_loss(tape, v[0], 5, 0.9).unwrap().0));
        assert!(err < 1e-4, "{err}");
    }

    fn forward_vars(tape: &mut Tape<'_, f64>, seed: u64, n: usize, m: usize) -> ForwardVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cand = tape.leaf(Tensor::randn(n, 4, 1.0, &mut rng)).unwrap();
        let pos = tape.leaf(Tensor::randn(m, 4, 1.0, &mut rng)).unwrap();
        let logits = tape.matmul_bt(cand, pos).unwrap();
        let probs = tape.softmax_columns(logits, None).unwrap();
        ForwardVars {
            logits,
            probs,
            candidate_reps: cand,
            position_reps: pos,
            n_valid: n,
        }
    }

    #[test]
    fn total_with_zero_omega_is_unlikelihood() {
        let mut tape = Tape::<f64>::new();
        let f = forward_vars(&mut tape, 1, 5, 3);
        let feedback = fb(&["click"], vec![vec![0.0, 0.0, 0.0]]);
        let spec = click_spec(1.0);
        let (total, br) = total_loss(&mut tape, &f, &[1, 2, 3], &feedback, &spec, 0.5, 0.0).unwrap();
        let (ul, _) = unlikelihood_loss(&mut tape, f.probs, &[1, 2, 3], 5, 0.0, &spec).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(ul).item());
        assert!(!br.is_positive_sequence);
        assert_eq!(br.total, br.ce_or_ul);
    }

    #[test]
    fn total_with_zero_margin_drops_contrastive_terms() {
        let mut tape = Tape::<f64>::new();
        let f = forward_vars(&mut tape, 2, 5, 3);
        let feedback = fb(&["click"], vec![vec![1.0, 0.0, 1.0]]);
        let (_, br) = total_loss(&mut tape, &f, &[0, 4, 2], &feedback, &click_spec(1.0), 0.0, 0.01).unwrap();
        assert_eq!(br.item_contrastive, 0.0);
        assert_eq!(br.position_contrastive, 0.0);
        assert!((br.total - br.ce_or_ul).abs() < 1e-15);
        assert!(br.is_positive_sequence);
    }

    #[test]
    fn total_combines_terms_with_default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.rho, w.omega), (0.5, 0.01));
        let mut tape = Tape::<f64>::new();
        let f = forward_vars(&mut tape, 3, 6, 3);
        let feedback = fb(&["click"], vec![vec![1.0, 1.0, 0.0]]);
        let (v, br) = total_loss(&mut tape, &f, &[5, 1, 0], &feedback, &click_spec(1.0), w.rho, w.omega).unwrap();
        let want = br.ce_or_ul + 0.01 * (br.item_contrastive + br.position_contrastive);
        assert!((tape.value(v).item() - want).abs() < 1e-12);
        assert!(br.item_contrastive > 0.0 || br.position_contrastive > 0.0);
    }

    proptest! {
        #[test]
        fn negative_branch_monotone_in_label_probability(
            a in 0.01f64..0.9, bump in 0.001f64..0.09, b in 0.01f64..0.99
        ) {
            let eval = |p0: f64| {
                let mut tape = Tape::<f64>::new();
                let p = tape.leaf(Tensor::from_f64(2, 2, &[p0, 1.0 - b, 1.0 - p0, b]).unwrap()).unwrap();
                let (l, _) = unlikelihood_loss(&mut tape, p, &[0, 1], 2, 0.0, &click_spec(1.0)).unwrap();
                tape.value(l).item()
            };
            prop_assert!(eval(a + bump) > eval(a));
        }

        #[test]
        fn losses_non_negative(seed in any::<u64>(), r in 0.0f64..3.0) {
            let mut tape = Tape::<f64>::new();
            let f = forward_vars(&mut tape, seed, 4, 3);
            let feedback = fb(&["click"], vec![vec![r, 0.0, 0.0]]);
            let (_, br) = total_loss(&mut tape, &f, &[3, 0, 1], &feedback, &click_spec(1.0), 0.5, 0.01).unwrap();
            prop_assert!(br.ce_or_ul >= 0.0 && br.item_contrastive >= 0.0 && br.position_contrastive >= 0.0);
            prop_assert_eq!(br.is_positive_sequence, r >= 1.0);
        }
    }
}
