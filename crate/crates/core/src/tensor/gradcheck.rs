use super::{ParamId, ParamStore, Real, Tape, Var};

/// Outcome of a finite-difference gradient check on one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: Real,
    pub coordinates_checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

/// Compares tape gradients of `loss` with central differences for up to
/// `max_coords` evenly spaced coordinates of `param`.
///
/// The relative error of a coordinate is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, param: ParamId, epsilon: Real, max_coords: usize, loss: F) -> GradCheckReport
where
    F: for<'p> Fn(&mut Tape<'p>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l).expect("grad_check loss must be scalar").get(param).clone()
    };
    let eval = |store: &ParamStore| -> Real {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        use super::Graph;
        tape.value(&l).item()
    };
    let len = store.get(param).len();
    let count = len.min(max_coords.max(1));
    let mut report = GradCheckReport { max_relative_error: 0.0, coordinates_checked: 0, worst_index: 0 };
    for j in 0..count {
        let idx = if count == len { j } else { j * len / count };
        let orig = store.get(param).data()[idx];
        store.get_mut(param).data_mut()[idx] = orig + epsilon;
        let plus = eval(store);
        store.get_mut(param).data_mut()[idx] = orig - epsilon;
        let minus = eval(store);
        store.get_mut(param).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = idx;
        }
        report.coordinates_checked += 1;
    }
    report
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::tensor::{Array2, Graph};

    #[test]
    fn quadratic_toy_loss_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_rows(&[&[0.3, -1.2], &[0.7, 2.0]]));
        // sum(W W) + sum(W) is quadratic, so central differences are exact up to roundoff
        let report = grad_check(&mut store, id, 1e-5, 100, |t| {
            let w = t.param(id);
            let ww = t.matmul(&w, &w);
            let a = t.sum(&ww);
            let b = t.sum(&w);
            t.add(&a, &b)
        });
        assert_eq!(report.coordinates_checked, 4);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }
}
