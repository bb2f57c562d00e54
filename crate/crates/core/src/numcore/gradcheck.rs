use super::{NumError, ParamStore, Tape, Var};

/// Compares reverse-mode gradients of `f` with central finite differences
/// (five-point stencil with step `eps`, truncation error O(eps⁴)).
///
/// `f` must build its scalar output on the given tape using only parameters read
/// from the store. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`. Parameter values
/// and gradients are left as they were on entry.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NumError::Domain(format!("grad_check eps must be in (0, 1e-3], got {eps}")));
    }
    let eval = |store: &ParamStore| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let v = tape.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumError::NonFinite("grad_check objective".into()))
        }
    };

    let saved_grads: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out, 1.0, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            let mut at = |delta: f64| -> Result<f64, NumError> {
                store.get_mut(id).value.data_mut()[k] = orig + delta;
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[pi][k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    for (p, g) in store.iter_mut().zip(saved_grads) {
        p.grad.data_mut().copy_from_slice(&g);
    }
    Ok(worst)
}
