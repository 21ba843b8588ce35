use driftlab::attack::{
    loss_diff, refine, sample_targets, shape_boundary, AttackConfig,
};
use driftlab::data::{accuracy, generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::numerics::ProfileRegistry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arch_kind = args.get(1).map(|s| s.as_str()).unwrap_or("cnn");
    let registry = ProfileRegistry::with_builtins();
    let h1 = registry.get("blk8b").unwrap().clone();
    let h2 = registry.get("pair32b").unwrap().clone();

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
    let (baseline, bacc) = train_baseline(&arch, &dataset, 4, epochs, 0.05, 32, 11).unwrap();
    println!("baseline acc {bacc}");
    let theta_bar = baseline.flatten();

    let mut config = AttackConfig::new(h1.clone(), vec![h2.clone()]);
    config.gamma = 10.0;
    config.lr = 1e-5;
    config.alpha.tau_low = 0.0;
    config.alpha.init = 4.0;
    config.steps_per_iter = 2000;

    let baseline_acc_h1 = accuracy(&baseline, &dataset.test, &h1).unwrap();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 5);
        let targets = sample_targets(&baseline, &dataset.train, &h1, 1, &mut rng).unwrap();
        let x = &targets[0].input;
        let mut cfg = config.clone();
        cfg.seed = seed;
        let mut model = baseline.clone();
        let mut alpha = cfg.alpha.init;
        let mut line = format!("seed {seed}:");
        for iter in 0..6 {
            model = shape_boundary(&model, &theta_bar, &targets, &cfg, alpha).unwrap();
            let m = loss_diff(model.forward(x, &h1).unwrap().data()).unwrap();
            let acc = accuracy(&model, &dataset.test, &h1).unwrap();
            let hit = refine(&model, &targets, &dataset.test, &cfg, baseline_acc_h1, iter).unwrap();
            line.push_str(&format!(
                " [i{iter} a{alpha:.2} m{m:.1e} acc{acc:.2} {}]",
                hit.as_ref()
                    .map(|h| format!("HIT:{}@{}", h.mechanism.label(), h.candidate_index))
                    .unwrap_or_else(|| "miss".into())
            ));
            if hit.is_some() {
                break;
            }
            alpha = cfg.alpha.update(alpha, m);
        }
        println!("{line}");
    }
}
