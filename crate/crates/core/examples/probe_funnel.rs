use driftlab::attack::{
    bitflip_candidate, loss_diff, permute_candidate, random_permutation, sample_targets,
    shape_boundary, AttackConfig, ParamMask,
};
use driftlab::data::{generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::engine::argmax_lowest;
use driftlab::numerics::ProfileRegistry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arch_kind = args.get(1).map(|s| s.as_str()).unwrap_or("cnn");
    let h1n = args.get(2).map(|s| s.as_str()).unwrap_or("blk8b");
    let h2n = args.get(3).map(|s| s.as_str()).unwrap_or("pair32b");
    let registry = ProfileRegistry::with_builtins();
    let h1 = registry.get(h1n).unwrap().clone();
    let h2 = registry.get(h2n).unwrap().clone();

    let (dataset, arch, epochs) = if arch_kind == "mlp" {
        (
            generate(&DataConfig {
                task: TaskKind::Blobs { dim: 16 },
                num_classes: 4,
                per_class_train: 150,
                per_class_test: 50,
                seed: 7,
            })
            .unwrap(),
            ModelArch::Mlp { input_dim: 16, hidden: 64, mid: 64 },
            12,
        )
    } else {
        (
            generate(&DataConfig {
                task: TaskKind::Textures { size: 8 },
                num_classes: 4,
                per_class_train: 150,
                per_class_test: 50,
                seed: 7,
            })
            .unwrap(),
            ModelArch::Cnn { channels: 4, hidden: 64, mid: 64 },
            8,
        )
    };
    let (baseline, _) = train_baseline(&arch, &dataset, 4, epochs, 0.05, 32, 11).unwrap();
    let theta_bar = baseline.flatten();

    let mut config = AttackConfig::new(h1.clone(), vec![h2.clone()]);
    config.gamma = 10.0;
    config.lr = 1e-5;
    config.alpha.tau_low = 0.0;
    config.steps_per_iter = 2000;

    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = sample_targets(&baseline, &dataset.train, &h1, 1, &mut rng).unwrap();
        let x = &targets[0].input;
        let mut model = baseline.clone();
        let mut alpha = config.alpha.init;
        for _ in 0..4 {
            model = shape_boundary(&model, &theta_bar, &targets, &config, alpha).unwrap();
            let m = loss_diff(model.forward(x, &h1).unwrap().data()).unwrap();
            alpha = config.alpha.update(alpha, m);
        }
        let l1 = model.forward(x, &h1).unwrap();
        let l2 = model.forward(x, &h2).unwrap();
        let margin = loss_diff(l1.data()).unwrap();
        let top = argmax_lowest(l1.data());
        println!(
            "seed {seed}: margin {margin:.2e} top-logit {:.3} ulp {:.2e} dev_gap {:.2e}",
            l1.data()[top],
            f32::from_bits(l1.data()[top].to_bits() + 1) - l1.data()[top],
            {
                let a = argmax_lowest(l1.data());
                let mut sorted: Vec<f32> = l1.data().to_vec();
                sorted.sort_by(f32::total_cmp);
                let b = l1
                    .data()
                    .iter()
                    .position(|&v| v == sorted[sorted.len() - 2])
                    .unwrap();
                let g1 = l1.data()[a] - l1.data()[b];
                let g2 = l2.data()[a] - l2.data()[b];
                (g1 - g2).abs()
            }
        );
        let mask = ParamMask::from_model(&model, None).unwrap();
        let (mut strict_split, mut tie_block, mut same) = (0, 0, 0);
        for j in 0..512u64 {
            let mut crng = ChaCha8Rng::seed_from_u64(10_000 + j);
            let cand = if j % 2 == 0 {
                let layers = driftlab::attack::factored_layers(&model, None);
                let mid = 32.max(64);
                let _ = mid;
                let perm = random_permutation(
                    match &model.layers[layers[0]] {
                        driftlab::engine::Layer::FactoredLinear { w1, .. } => w1.shape()[0],
                        _ => unreachable!(),
                    },
                    &mut crng,
                );
                permute_candidate(&model, layers[0], &perm).unwrap()
            } else {
                bitflip_candidate(&model, 5, &mut crng, &mask).unwrap().0
            };
            let (p1, s1) = cand.predict_strict(x, &h1).unwrap();
            let (p2, s2) = cand.predict_strict(x, &h2).unwrap();
            if p1 != p2 && s1 && s2 {
                strict_split += 1;
            } else if p1 != p2 {
                tie_block += 1;
            } else if !s1 || !s2 {
                tie_block += 1;
            } else {
                same += 1;
            }
        }
        println!("  candidates: strict_split {strict_split} tie_blocked {tie_block} same {same}");
    }
}
