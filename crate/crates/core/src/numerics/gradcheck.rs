//! Central finite-difference gradient checks.

use super::{NumericsError, ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative disagreement between the tape's gradient and central
/// differences over every entry of every input.
pub fn check_grad<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let back = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = back.wrt(&tape, vars[k]);
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[idx], numeric));
        }
    }
    worst
}

/// Same check against every entry of every tensor in `store`. `f` records a
/// scalar loss on a tape bound to the (possibly perturbed) store.
pub fn check_param_grad<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, NumericsError>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::with_params(s);
        let out = f(&mut tape).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape).unwrap();
    let grads = tape.backward(out).unwrap().param_grads(&tape).unwrap();

    let mut worst = 0.0f64;
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + FD_STEP;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[idx] = orig - FD_STEP;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.get(id)[idx], numeric));
        }
    }
    worst
}
