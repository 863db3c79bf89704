use crate::nn::params::{Bound, ParamStore};
use crate::nn::tape::{Tape, Var};

pub const FD_EPS: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central differences.
///
/// At most `max_per_param` entries are probed per tensor, evenly spaced.
pub fn grad_check<F>(store: &ParamStore<f64>, max_per_param: usize, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic = bound.grads(&grads);
    drop(bound);

    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let b = s.bind(&tape);
        f(&tape, &b).item()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for pi in 0..store.len() {
        let n = store.tensors()[pi].numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work.tensors()[pi].data()[j];
            work.tensors_mut()[pi].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work);
            work.tensors_mut()[pi].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work);
            work.tensors_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.names()[pi].clone(), j));
            }
        }
    }
    report
}
