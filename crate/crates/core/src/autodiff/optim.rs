use super::{AutodiffError, Tensor};

/// Plain SGD: `p -= learning_rate * grad`, then the gradient is zeroed.
///
/// Every tensor must carry a gradient; nothing is updated if one is missing.
pub fn sgd_step<'a, I>(params: I, learning_rate: f64) -> Result<(), AutodiffError>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(AutodiffError::BadLearningRate(learning_rate));
    }
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(AutodiffError::MissingGrad(format!("#{i} {:?}", params[i].shape())));
    }
    for p in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        p.values_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(v, g)| *v -= learning_rate * g);
        p.zero_grad();
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}
