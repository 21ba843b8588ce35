//! Attack-operation fixtures: exact-arithmetic permutation preservation,
//! bit-flip behavior on a trained model, and shaping edge cases.

use driftlab::attack::{
    apply_flip_record, bitflip_candidate, permute_candidate, random_permutation, run_attack,
    sample_targets, shape_boundary, AttackConfig, Mechanism, ParamMask, Variant,
};
use driftlab::data::{accuracy, generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::engine::Layer;
use driftlab::numerics::{BackendProfile, ProfileRegistry, Tensor};
use driftlab_oracle::exact;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob_dataset(seed: u64) -> driftlab::data::Dataset {
    generate(&DataConfig {
        task: TaskKind::Blobs { dim: 16 },
        num_classes: 4,
        per_class_train: 100,
        per_class_test: 40,
        seed,
    })
    .unwrap()
}

fn trained_mlp(seed: u64) -> (driftlab::Model, driftlab::data::Dataset) {
    let dataset = blob_dataset(seed);
    let arch = ModelArch::Mlp {
        input_dim: 16,
        hidden: 64,
        mid: 64,
    };
    let (model, acc) = train_baseline(&arch, &dataset, 4, 12, 0.05, 32, seed ^ 0xF00D).unwrap();
    assert!(acc >= 0.95, "baseline accuracy {acc}");
    (model, dataset)
}

fn tuned_config(registry: &ProfileRegistry) -> AttackConfig {
    let mut config = AttackConfig::new(
        registry.get("blk8b").unwrap().clone(),
        vec![registry.get("pair32b").unwrap().clone()],
    );
    config.gamma = 10.0;
    config.lr = 1e-5;
    config.steps_per_iter = 3000;
    config.alpha.tau_low = 0.0;
    config
}

#[test]
fn permutation_preserves_exact_product_on_small_factored_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..40 {
        let (a, b, c) = (
            rng.random_range(2..=8),
            rng.random_range(2..=8),
            rng.random_range(2..=8),
        );
        let mut tensor = |shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..len).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect(),
            )
            .unwrap()
        };
        let model = driftlab::Model::new(
            vec![Layer::FactoredLinear {
                w1: tensor(vec![b, a]),
                w2: tensor(vec![c, b]),
                bias: Tensor::zeros(vec![c]),
            }],
            c,
            vec![a],
        )
        .unwrap();
        let perm = random_permutation(b, &mut rng);
        let permuted = permute_candidate(&model, 0, &perm).unwrap();

        let product = |m: &driftlab::Model| {
            let Layer::FactoredLinear { w1, w2, .. } = &m.layers[0] else {
                unreachable!()
            };
            // Exact W2[c,b] x W1[b,a] over dyadic rationals.
            exact::exact_matmul(w2.data(), w1.data(), c, b, a)
        };
        assert_eq!(
            product(&model),
            product(&permuted),
            "exact product changed for ({a},{b},{c})"
        );
    }
}

#[test]
fn five_bit_flips_barely_move_accuracy() {
    let (model, dataset) = trained_mlp(50);
    let profile = BackendProfile::canonical();
    let base_acc = accuracy(&model, &dataset.test, &profile).unwrap();
    let mask = ParamMask::from_model(&model, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut small_drop = 0;
    let samples = 100;
    for _ in 0..samples {
        let (flipped, record) = bitflip_candidate(&model, 5, &mut rng, &mask).unwrap();
        let acc = accuracy(&flipped, &dataset.test, &profile).unwrap();
        if base_acc - acc < 0.01 {
            small_drop += 1;
        }
        // Involution: restore and compare bits.
        let restored = apply_flip_record(&flipped, &record);
        assert!(model
            .flatten()
            .iter()
            .zip(restored.flatten().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(
        small_drop >= samples * 9 / 10,
        "only {small_drop}/{samples} flips kept accuracy within 1%"
    );
}

#[test]
fn shaping_strictly_decreases_the_margin_on_most_runs() {
    let registry = ProfileRegistry::with_builtins();
    let config = tuned_config(&registry);
    let (model, dataset) = trained_mlp(52);
    let theta_bar = model.flatten();
    let mut decreased = 0;
    let runs = 20;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
        let before = driftlab::attack::loss_diff(
            model
                .forward(&targets[0].input, &config.h1)
                .unwrap()
                .data(),
        )
        .unwrap();
        let shaped = shape_boundary(&model, &theta_bar, &targets, &config, 1.0).unwrap();
        let after = driftlab::attack::loss_diff(
            shaped
                .forward(&targets[0].input, &config.h1)
                .unwrap()
                .data(),
        )
        .unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(
        decreased * 100 >= runs * 95,
        "margin decreased in only {decreased}/{runs} runs"
    );
}

#[test]
fn infinite_anchor_freezes_the_parameters() {
    let registry = ProfileRegistry::with_builtins();
    let mut config = tuned_config(&registry);
    config.gamma = 1e12;
    config.steps_per_iter = 50;
    let (model, dataset) = trained_mlp(53);
    let theta_bar = model.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
    let shaped = shape_boundary(&model, &theta_bar, &targets, &config, 1.0).unwrap();
    let worst = model
        .flatten()
        .iter()
        .zip(shaped.flatten().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    // Displacement bounded by one un-shrunk step's numerical noise.
    assert!(worst <= config.lr, "parameters moved by {worst}");
}

#[test]
fn empty_target_set_is_a_bit_exact_no_op() {
    let registry = ProfileRegistry::with_builtins();
    let config = tuned_config(&registry);
    let (model, _) = trained_mlp(54);
    let theta_bar = model.flatten();
    let shaped = shape_boundary(&model, &theta_bar, &[], &config, 1.0).unwrap();
    assert!(model
        .flatten()
        .iter()
        .zip(shaped.flatten().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_iterations_returns_a_valid_failure_result() {
    let registry = ProfileRegistry::with_builtins();
    let mut config = tuned_config(&registry);
    config.max_iters = 0;
    let (model, dataset) = trained_mlp(55);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
    let result = run_attack(&model, &targets, &dataset.test, &config).unwrap();
    assert!(!result.success);
    assert_eq!(result.iterations, 0);
    assert_eq!(result.mechanism, Mechanism::None);
    assert_eq!(result.per_target_success, vec![false]);
}

#[test]
fn bit_identical_pair_never_succeeds() {
    let registry = ProfileRegistry::with_builtins();
    let mut config = tuned_config(&registry);
    config.h1 = registry.get("seq32").unwrap().clone();
    config.others = vec![registry.get("seq32twin").unwrap().clone()];
    config.max_iters = 2;
    let (model, dataset) = trained_mlp(56);
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
        let mut run_config = config.clone();
        run_config.seed = seed;
        let result = run_attack(&model, &targets, &dataset.test, &run_config).unwrap();
        assert!(!result.success, "seed {seed} split a bit-identical pair");
    }
}

#[test]
fn successful_run_satisfies_its_own_invariants() {
    let registry = ProfileRegistry::with_builtins();
    let mut config = tuned_config(&registry);
    config.seed = 9;
    let (model, dataset) = trained_mlp(57);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
    let result = run_attack(&model, &targets, &dataset.test, &config).unwrap();
    assert!(result.success, "tuned single-target attack should land");
    // Re-check independently from the returned model.
    let p1 = result
        .model
        .predict(&targets[0].input, &config.h1)
        .unwrap();
    let p2 = result
        .model
        .predict(&targets[0].input, &config.others[0])
        .unwrap();
    assert_ne!(p1, p2);
    let acc = accuracy(&result.model, &dataset.test, &config.h1).unwrap();
    let base = accuracy(&model, &dataset.test, &config.h1).unwrap();
    assert!(acc >= config.rho * base);
    assert!(result.iterations >= 1 && result.iterations <= config.max_iters);
}

#[test]
fn variant_base_never_reports_a_refinement_mechanism() {
    let registry = ProfileRegistry::with_builtins();
    let mut config = tuned_config(&registry);
    config.variant = Variant::Base;
    config.max_iters = 2;
    config.seed = 77;
    let (model, dataset) = trained_mlp(58);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let targets = sample_targets(&model, &dataset.train, &config.h1, 1, &mut rng).unwrap();
    let result = run_attack(&model, &targets, &dataset.test, &config).unwrap();
    assert_eq!(result.mechanism, Mechanism::None);
}
