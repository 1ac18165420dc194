//! Central finite-difference verification of tape gradients.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::NumericError;

/// Floor added to the relative-error denominator so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// Kink margin of the unperturbed forward pass (see [`Tape::kink_margin`]).
    pub kink_margin: f64,
    /// Coordinates whose `±h` evaluations took a different branch of some
    /// non-smooth op than the unperturbed pass. Their central differences
    /// straddle a kink and say nothing about the derivative.
    pub straddled: Vec<(String, usize)>,
    /// `(analytic, numeric)` for every coordinate, in check order.
    pub derivatives: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Max relative error with `floor` in place of [`GRAD_CHECK_FLOOR`].
    ///
    /// The floor decides where the comparison turns absolute. With step `h`
    /// a central difference carries roughly `δf / h` of rounding noise,
    /// where `δf` is the rounding error of one loss evaluation; coordinates
    /// whose gradient is far below that cannot agree in relative terms.
    pub fn max_rel_error_with_floor(&self, floor: f64) -> f64 {
        self.derivatives
            .iter()
            .map(|&(a, n)| relative_error(a, n, floor))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.derivatives.iter().map(|&(a, n)| (a - n).abs()).fold(0.0, f64::max)
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor)
}

/// Compares the reverse-mode gradient of `f` with central differences of
/// step `h` over every coordinate of the parameters in `ids`.
///
/// `f` must be deterministic. Parameter values are restored afterwards and
/// gradients are left holding the analytic result.
pub fn grad_check<E, F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport, E>
where
    E: From<NumericError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let kink_margin = tape.kink_margin();
    let branches = tape.branch_signature();

    let mut eval = |store: &ParamStore| -> Result<(f64, bool), E> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok((t.scalar(l), t.branch_signature() != branches))
    };

    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut worst_values = (0.0, 0.0);
    let mut coordinates = 0;
    let mut straddled = Vec::new();
    let mut derivatives = Vec::new();
    for &id in ids {
        let n = store.get(id).value.data().len();
        for k in 0..n {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + h;
            let (plus, moved_up) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original - h;
            let (minus, moved_down) = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = original;
            if moved_up || moved_down {
                straddled.push((store.get(id).name.clone(), k));
            }

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad.data()[k];
            let rel = relative_error(analytic, numeric, GRAD_CHECK_FLOOR);
            derivatives.push((analytic, numeric));
            coordinates += 1;
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((store.get(id).name.clone(), k));
                worst_values = (analytic, numeric);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        worst_values,
        coordinates,
        kink_margin,
        straddled,
        derivatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;

    #[test]
    fn quadratic_is_exact() {
        // f(P) = sum((P A) ⊙ (P A)) + 3 sum(P)
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::from_fn(2, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1));
        let a = Matrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64 * 0.25 - 0.5);
        let report = grad_check::<NumericError, _>(&mut store, &[p], 1e-5, |tape, store| {
            let pv = tape.param(store, p);
            let av = tape.constant(a.clone());
            let pa = tape.matmul(pv, av)?;
            let sq = tape.hadamard(pa, pa)?;
            let s1 = tape.sum(sq);
            let s2 = tape.sum(pv);
            let s2 = tape.scale(s2, 3.0);
            tape.add(s1, s2)
        })
        .unwrap();
        assert_eq!(report.coordinates, 6);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.straddled.is_empty());
        assert_eq!(report.derivatives.len(), 6);
        assert_eq!(report.max_rel_error_with_floor(GRAD_CHECK_FLOOR), report.max_rel_error);
        assert!(report.max_rel_error_with_floor(1.0) <= report.max_rel_error);
    }

    #[test]
    fn relu_kink_inside_the_step_is_reported() {
        // sum(relu(p)) with one entry 3e-6 from the kink and h = 1e-5.
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::from_vec(1, 3, vec![0.5, 3e-6, -0.7]).unwrap());
        let report = grad_check::<NumericError, _>(&mut store, &[p], 1e-5, |tape, store| {
            let pv = tape.param(store, p);
            let r = tape.relu(pv);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert_eq!(report.straddled, vec![("p".to_string(), 1)]);
        assert!((report.kink_margin - 3e-6).abs() < 1e-18);
        // The difference across the kink is off by about half.
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst, Some(("p".to_string(), 1)));
    }
}
