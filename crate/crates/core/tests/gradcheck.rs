//! Analytic gradients against central finite differences of the wide
//! reference mirror, for every layer kind and the full weighted proxy loss.

use driftlab::attack::{loss_reg, proxy_loss};
use driftlab::data::ModelArch;
use driftlab::engine::Model;
use driftlab::numerics::Tensor;
use driftlab_oracle::reference::{self, WideModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len)
            .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * 1.2)
            .collect(),
    )
    .unwrap()
}

fn random_model(rng: &mut ChaCha8Rng, cnn: bool) -> Model {
    let arch = if cnn {
        ModelArch::Cnn {
            channels: 2,
            hidden: 6,
            mid: 5,
        }
    } else {
        ModelArch::Mlp {
            input_dim: 5,
            hidden: 7,
            mid: 6,
        }
    };
    let mut model = arch.build(3, rng).unwrap();
    // Nonzero biases so their gradients are exercised from generic points.
    let mut flat = model.flatten();
    for v in flat.iter_mut() {
        if *v == 0.0 {
            *v = (rng.random::<f32>() - 0.5) * 0.2;
        }
    }
    model.set_flat(&flat).unwrap();
    model
}

/// Analytic gradient of the full proxy loss at the model's parameters.
fn analytic_proxy_gradient(
    model: &Model,
    theta_bar: &[f32],
    x: &Tensor,
    t: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Vec<f64> {
    let trace = model.forward_traced(x).unwrap();
    let logits = trace.logits.data();
    // Subgradient selections mirror the loss definitions.
    let top = driftlab::engine::argmax_lowest(logits);
    let runner = (0..logits.len())
        .filter(|&i| i != top)
        .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
        .unwrap();
    let mut dlogits = vec![0.0f64; logits.len()];
    dlogits[top] += alpha;
    dlogits[runner] -= alpha;
    let best_other = (0..logits.len())
        .filter(|&i| i != t)
        .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
        .unwrap();
    if logits[best_other] > logits[t] {
        dlogits[best_other] += beta;
        dlogits[t] -= beta;
    }
    let smooth = model.backward(&trace, &dlogits).unwrap();
    let flat = model.flatten();
    smooth
        .iter()
        .zip(flat.iter().zip(theta_bar))
        .map(|(&g, (&w, &wb))| g as f64 + gamma * 2.0 * (w as f64 - wb as f64))
        .collect()
}

/// Central differences are only a valid oracle where the loss is smooth
/// inside the probe window: away from ReLU kinks, argmax swaps, and the
/// hinge boundary. Random draws occasionally land on one; skip those.
fn fd_window_is_smooth(model: &Model, x: &Tensor, t: usize) -> bool {
    let canonical = driftlab::numerics::BackendProfile::canonical();
    let acts = model
        .forward_collect(x, &canonical, driftlab::numerics::Lane::SOLO)
        .unwrap();
    for (i, layer) in model.layers.iter().enumerate() {
        if matches!(layer, driftlab::engine::Layer::Relu) {
            let input: &Tensor = if i == 0 { x } else { &acts[i - 1] };
            if input.data().iter().any(|v| v.abs() < 0.02) {
                return false;
            }
        }
    }
    let logits = acts.last().unwrap().data();
    let mut sorted: Vec<f32> = logits.to_vec();
    sorted.sort_by(f32::total_cmp);
    let gap = sorted[sorted.len() - 1] - sorted[sorted.len() - 2];
    let best_other = (0..logits.len())
        .filter(|&i| i != t)
        .map(|i| logits[i])
        .fold(f32::NEG_INFINITY, f32::max);
    gap > 0.02 && (best_other - logits[t]).abs() > 0.02
}

fn run_gradcheck(cnn: bool, instances: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (alpha, beta, gamma) = (1.0f64, 0.1, 10_000.0);
    let mut case = 0;
    let mut attempts = 0;
    while case < instances {
        attempts += 1;
        assert!(attempts < instances * 20, "too many non-smooth draws");
        let model = random_model(&mut rng, cnn);
        let x = random_input(&mut rng, &model.input_shape.clone());
        let t = rng.random_range(0..3);
        if !fd_window_is_smooth(&model, &x, t) {
            continue;
        }
        case += 1;
        // A nearby anchor so the regularizer contributes a generic gradient.
        let theta_bar: Vec<f32> = model
            .flatten()
            .iter()
            .map(|&w| w + (rng.random::<f32>() - 0.5) * 0.05)
            .collect();

        let analytic = analytic_proxy_gradient(&model, &theta_bar, &x, t, alpha, beta, gamma);

        let wide = WideModel::from_model(&model);
        let theta0 = wide.flatten();
        let bar64: Vec<f64> = theta_bar.iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let loss = |theta: &[f64]| {
            let mut probe = wide.clone();
            probe.set_flat(theta);
            let logits = probe.forward(&x64);
            reference::proxy_loss_f64(&logits, t, theta, &bar64, alpha, beta, gamma)
        };
        let fd = reference::central_difference(loss, &theta0, 1e-3);

        let dot: f64 = analytic.iter().zip(&fd).map(|(a, b)| a * b).sum();
        let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rel = diff / nf.max(1e-12);
        assert!(
            rel <= 1e-4,
            "case {case} (cnn={cnn}): relative gradient error {rel:.3e} (cos {:.6})",
            dot / (na * nf)
        );
    }
}

#[test]
fn proxy_gradient_matches_finite_differences_mlp() {
    run_gradcheck(false, 25, 31);
}

#[test]
fn proxy_gradient_matches_finite_differences_cnn() {
    run_gradcheck(true, 25, 32);
}

#[test]
fn gradient_of_reg_at_anchor_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let model = random_model(&mut rng, false);
    let flat = model.flatten();
    assert_eq!(loss_reg(&flat, &flat), 0.0);
    // Pure regularizer gradient at theta == theta_bar vanishes.
    let grad = analytic_proxy_gradient(
        &model,
        &flat,
        &random_input(&mut rng, &model.input_shape.clone()),
        0,
        0.0,
        0.0,
        10_000.0,
    );
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn proxy_loss_value_matches_wide_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..20 {
        let model = random_model(&mut rng, false);
        let x = random_input(&mut rng, &model.input_shape.clone());
        let t = rng.random_range(0..3);
        let theta = model.flatten();
        let theta_bar: Vec<f32> = theta
            .iter()
            .map(|&w| w + (rng.random::<f32>() - 0.5) * 0.1)
            .collect();
        let logits = model
            .forward(&x, &driftlab::numerics::BackendProfile::canonical())
            .unwrap();
        let ours = proxy_loss(&theta, &theta_bar, logits.data(), t, 1.0, 0.1, 10_000.0).unwrap();

        let wide = WideModel::from_model(&model);
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let logits64 = wide.forward(&x64);
        let theta64 = wide.flatten();
        let bar64: Vec<f64> = theta_bar.iter().map(|&v| v as f64).collect();
        let reference =
            reference::proxy_loss_f64(&logits64, t, &theta64, &bar64, 1.0, 0.1, 10_000.0);
        let rel = ((ours as f64 - reference) / reference.abs().max(1e-9)).abs();
        assert!(rel < 1e-4, "proxy loss {ours} vs reference {reference}");
    }
}
