use driftlab::attack::{loss_diff, sample_targets, shape_boundary, AttackConfig};
use driftlab::data::{generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::numerics::ProfileRegistry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let beta: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);

    let registry = ProfileRegistry::with_builtins();
    let h1 = registry.get("blk8b").unwrap().clone();
    let h2 = registry.get("pair32b").unwrap().clone();

    let arch_kind = args.get(4).map(|s| s.as_str()).unwrap_or("mlp");
    let epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(20);
    let steps: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(500);
    let (dataset, arch) = if arch_kind == "mlp" {
        (generate(&DataConfig {
            task: TaskKind::Blobs { dim: 16 },
            num_classes: 4,
            per_class_train: 150,
            per_class_test: 50,
            seed: 7,
        }).unwrap(), ModelArch::Mlp { input_dim: 16, hidden: 64, mid: 64 })
    } else {
        (generate(&DataConfig {
            task: TaskKind::Textures { size: 8 },
            num_classes: 4,
            per_class_train: 150,
            per_class_test: 50,
            seed: 7,
        }).unwrap(), ModelArch::Cnn { channels: 4, hidden: 64, mid: 64 })
    };
    let (baseline, _) = train_baseline(&arch, &dataset, 4, epochs, 0.05, 32, 11).unwrap();
    let theta_bar = baseline.flatten();

    let mut config = AttackConfig::new(h1.clone(), vec![h2]);
    config.gamma = gamma;
    config.lr = lr;
    config.beta = beta;
    config.alpha.tau_low = 0.0;
    config.steps_per_iter = steps;

    let mut mins = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = sample_targets(&baseline, &dataset.train, &h1, 1, &mut rng).unwrap();
        let x = &targets[0].input;
        let mut model = baseline.clone();
        let mut alpha = config.alpha.init;
        let mut per_iter = Vec::new();
        for _ in 0..6 {
            model = shape_boundary(&model, &theta_bar, &targets, &config, alpha).unwrap();
            let m = loss_diff(model.forward(x, &h1).unwrap().data()).unwrap();
            per_iter.push(m);
            alpha = config.alpha.update(alpha, m);
        }
        let min = per_iter.iter().cloned().fold(f32::INFINITY, f32::min);
        mins.push(min);
        println!(
            "seed {seed}: margins {:?} min {min:.2e}",
            per_iter.iter().map(|m| format!("{m:.1e}")).collect::<Vec<_>>()
        );
    }
    mins.sort_by(f32::total_cmp);
    println!(
        "min-margin dist: p0 {:.2e} p50 {:.2e} p100 {:.2e}",
        mins[0], mins[5], mins[9]
    );
}
