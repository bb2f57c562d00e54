use super::{NumError, ParamStore};

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the factor applied, `min(1, max_norm / norm)`.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64, NumError> {
    if !(max_norm > 0.0) {
        return Err(NumError::Domain(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(NumError::NonFinite("gradient norm".into()));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for p in store.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= scale;
        }
    }
    Ok(scale)
}

/// Plain SGD: `value -= lr * grad`, then zeroes the gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<(), NumError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NumError::Domain(format!("learning rate must be non-negative, got {lr}")));
    }
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(NumError::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    for p in store.iter_mut() {
        if lr > 0.0 {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        p.grad.data_mut().fill(0.0);
    }
    Ok(())
}
