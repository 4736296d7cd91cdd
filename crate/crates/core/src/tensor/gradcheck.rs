//! Central-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst entry, if any was checked.
    pub worst: Option<(usize, usize)>,
    pub num_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error between two same-shape tensors, ignoring entries where both
/// magnitudes fall below `floor` (central differences are pure noise there).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < floor {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

const REL_FLOOR: f64 = 1e-6;

/// Check the tape gradient of a scalar-valued builder against central
/// differences with step `h` on every coordinate of every input. The builder
/// is re-invoked on a fresh tape per evaluation, so the numeric path never
/// shares state with the analytic one.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, _tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        tape.value(out).item()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids);
    assert_eq!(tape.value(out).numel(), 1, "grad_check target must be scalar");
    let grads = tape.backward(out);

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, num_checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let zero;
        let analytic = match grads.get(ids[ti]) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(input.shape());
                &zero
            }
        };
        for k in 0..input.numel() {
            let orig = input.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let fp = eval(&work);
            work[ti].data_mut()[k] = orig - h;
            let fm = eval(&work);
            work[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[k];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < REL_FLOOR { 0.0 } else { (a - numeric).abs() / scale };
            report.num_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, k));
            }
        }
    }
    report
}
