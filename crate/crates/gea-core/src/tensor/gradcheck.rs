//! Finite-difference validation of tape gradients.

use super::{Tape, Tensor, TensorError, Var};
use crate::params::ParamStore;

/// Relative error between an analytic and a numeric derivative:
/// `|a - n| / max(1, |a|, |n|)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Checks the tape gradient of a scalar-valued function of one tensor
/// against central differences with step `h`, returning the maximum
/// relative error over all coordinates.
///
/// The builder must produce a `1 x 1` output; it is re-run value-only for
/// every perturbed coordinate, so keep inputs small.
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = build(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .expect("requires_grad leaf gets a gradient")
        .to_vec();

    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let out = build(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..probe.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Result of a parameter-space gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and coordinate where the maximum was attained.
    pub worst: Option<(String, usize)>,
}

/// Checks tape gradients with respect to every parameter in the store,
/// for a scalar loss built by `build`. The store is restored to its
/// original values before returning.
pub fn grad_check_params<F>(
    build: F,
    store: &mut ParamStore,
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    tape.backward(out)?;
    tape.write_param_grads(store);

    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.tensor(id).grad().expect("zeroed grads").to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        for i in 0..store.tensor(id).data().len() {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + h;
            let up = eval_loss(&build, store)?;
            store.tensor_mut(id).data_mut()[i] = orig - h;
            let down = eval_loss(&build, store)?;
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[pi][i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(build: &F, store: &ParamStore) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    Ok(tape.value(out).item())
}
