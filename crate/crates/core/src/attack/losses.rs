use super::AttackError;

/// Margin between the two largest logits; zero exactly at a tie. Minimizing
/// this drags the target onto the decision boundary.
pub fn loss_diff(logits: &[f32]) -> Result<f32, AttackError> {
    if logits.len() < 2 {
        return Err(AttackError::TooFewClasses);
    }
    let top = crate::engine::argmax_lowest(logits);
    let runner = runner_up(logits, top);
    Ok(logits[top] - logits[runner])
}

/// Hinge penalty for leaving the source class `t`: zero while `t` is
/// (weakly) on top.
pub fn loss_class(logits: &[f32], t: usize) -> Result<f32, AttackError> {
    if logits.len() < 2 || t >= logits.len() {
        return Err(AttackError::TooFewClasses);
    }
    let best_other = best_excluding(logits, t);
    Ok((logits[best_other] - logits[t]).max(0.0))
}

/// Squared Euclidean distance between flat parameter views, accumulated in
/// f64 and rounded once.
pub fn loss_reg(theta: &[f32], theta_bar: &[f32]) -> f32 {
    debug_assert_eq!(theta.len(), theta_bar.len());
    theta
        .iter()
        .zip(theta_bar)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>() as f32
}

/// Weighted proxy loss `alpha L_diff + beta L_class + gamma L_reg`.
pub fn proxy_loss(
    theta: &[f32],
    theta_bar: &[f32],
    logits: &[f32],
    t: usize,
    alpha: f32,
    beta: f32,
    gamma: f32,
) -> Result<f32, AttackError> {
    Ok(alpha * loss_diff(logits)? + beta * loss_class(logits, t)? + gamma * loss_reg(theta, theta_bar))
}

/// Logit gradient of `loss_diff`: +1 on the top class, -1 on the runner-up.
pub(crate) fn dlogits_diff(logits: &[f32]) -> Vec<f64> {
    let top = crate::engine::argmax_lowest(logits);
    let runner = runner_up(logits, top);
    let mut grad = vec![0.0; logits.len()];
    grad[top] = 1.0;
    grad[runner] = -1.0;
    grad
}

/// Logit gradient of `loss_class`: zero while the hinge is inactive, else
/// +1 on the strongest wrong class and -1 on `t`.
pub(crate) fn dlogits_class(logits: &[f32], t: usize) -> Vec<f64> {
    let mut grad = vec![0.0; logits.len()];
    let best_other = best_excluding(logits, t);
    if logits[best_other] > logits[t] {
        grad[best_other] = 1.0;
        grad[t] = -1.0;
    }
    grad
}

fn runner_up(logits: &[f32], top: usize) -> usize {
    best_excluding(logits, top)
}

fn best_excluding(logits: &[f32], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logits.iter().enumerate() {
        if i == skip {
            continue;
        }
        if best == usize::MAX || v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_is_top_minus_runner_up() {
        assert_eq!(loss_diff(&[2.0, 5.0, 3.0]).unwrap(), 2.0);
        assert_eq!(loss_diff(&[4.0, 4.0, 1.0]).unwrap(), 0.0);
        assert!(loss_diff(&[7.0]).is_err());
    }

    #[test]
    fn class_hinge() {
        assert_eq!(loss_class(&[3.0, 1.0, 2.0], 0).unwrap(), 0.0);
        assert_eq!(loss_class(&[1.0, 3.0, 2.0], 0).unwrap(), 2.0);
        assert_eq!(loss_class(&[5.0, 5.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn reg_of_single_half_step() {
        assert_eq!(loss_reg(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(loss_reg(&[1.5, 2.0], &[1.0, 2.0]), 0.25);
    }

    #[test]
    fn proxy_loss_reduces_to_parts() {
        let y = [2.0f32, 5.0, 3.0];
        let theta = [0.5f32, -0.5];
        let bar = [0.0f32, 0.0];
        assert_eq!(
            proxy_loss(&theta, &bar, &y, 1, 0.0, 0.0, 0.0).unwrap(),
            0.0
        );
        assert_eq!(
            proxy_loss(&theta, &bar, &y, 1, 1.0, 0.0, 0.0).unwrap(),
            loss_diff(&y).unwrap()
        );
        let full = proxy_loss(&theta, &bar, &y, 0, 1.0, 0.1, 10_000.0).unwrap();
        let expected = 2.0 + 0.1 * 3.0 + 10_000.0 * 0.5;
        assert!((full - expected).abs() < 1e-3);
    }

    #[test]
    fn losses_are_nonnegative() {
        for y in [[0.2f32, -1.0, 3.5], [-2.0, -2.0, -2.0], [9.0, 0.0, -9.0]] {
            assert!(loss_diff(&y).unwrap() >= 0.0);
            for t in 0..3 {
                assert!(loss_class(&y, t).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn gradients_mark_the_active_logits() {
        let d = dlogits_diff(&[2.0, 5.0, 3.0]);
        assert_eq!(d, vec![0.0, 1.0, -1.0]);
        let c = dlogits_class(&[1.0, 3.0, 2.0], 0);
        assert_eq!(c, vec![-1.0, 1.0, 0.0]);
        let inactive = dlogits_class(&[3.0, 1.0, 2.0], 0);
        assert!(inactive.iter().all(|&g| g == 0.0));
    }
}
