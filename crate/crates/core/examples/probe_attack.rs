use driftlab::attack::{run_many, AttackConfig, Variant};
use driftlab::data::{generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::numerics::{builtin_profiles, ProfileRegistry};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let runs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let h1_name = args.get(4).map(|s| s.as_str()).unwrap_or("blk8b");
    let h2_name = args.get(5).map(|s| s.as_str()).unwrap_or("pair32b");
    let arch_kind = args.get(6).map(|s| s.as_str()).unwrap_or("mlp");

    let registry = ProfileRegistry::with_builtins();
    let h1 = registry.get(h1_name).unwrap().clone();
    let h2 = registry.get(h2_name).unwrap().clone();
    let _ = builtin_profiles();

    let (dataset, arch) = if arch_kind == "mlp" {
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
            ModelArch::Cnn { channels: args.get(10).map(|s| s.parse().unwrap()).unwrap_or(4), hidden: 64, mid: args.get(11).map(|s| s.parse().unwrap()).unwrap_or(64) },
        )
    };
    let epochs: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(20);
    let steps: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(500);
    let (baseline, acc) = train_baseline(&arch, &dataset, 4, epochs, 0.05, 32, 11).unwrap();
    println!("baseline accuracy {acc:.4}");

    // Deviation scale between the two profiles on test points.
    let mut max_dev = 0.0f32;
    let mut sum_dev = 0.0f64;
    for x in dataset.test.inputs.iter().take(50) {
        let a = baseline.forward(x, &h1).unwrap();
        let b = baseline.forward(x, &h2).unwrap();
        for (va, vb) in a.data().iter().zip(b.data()) {
            let d = (va - vb).abs();
            max_dev = max_dev.max(d);
            sum_dev += d as f64;
        }
    }
    println!("logit deviation: mean {:.3e} max {:.3e}", sum_dev / (50.0 * 4.0), max_dev);

    let mut config = AttackConfig::new(h1, vec![h2]);
    config.alpha.tau_low = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    config.alpha.tau_high = args.get(13).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    config.alpha.init = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    config.gamma = gamma;
    config.lr = lr;
    config.seed = 0xA77AC4;
    config.steps_per_iter = steps;
    config.variant = match args.get(14).map(|s| s.as_str()).unwrap_or("full") {
        "base" => Variant::Base,
        "perm" => Variant::Perm,
        "flip" => Variant::Flip,
        _ => Variant::Full,
    };

    let t0 = std::time::Instant::now();
    let tpr: usize = args.get(15).map(|s| s.parse().unwrap()).unwrap_or(1);
    let results = run_many(&baseline, &dataset.train, &dataset.test, &config, runs, tpr).unwrap();
    let successes = results.iter().filter(|r| r.success).count();
    let mut mech = std::collections::BTreeMap::new();
    let mut iters_hist = std::collections::BTreeMap::new();
    for r in &results {
        if r.success {
            *mech.entry(r.mechanism.label()).or_insert(0) += 1;
            *iters_hist.entry(r.iterations).or_insert(0) += 1;
        }
    }
    println!(
        "gamma {gamma} lr {lr}: success {successes}/{runs} mech {mech:?} iters {iters_hist:?} in {:?}",
        t0.elapsed()
    );
    let min_ratio = results
        .iter()
        .filter(|r| r.success)
        .map(|r| r.accuracy_ratio)
        .fold(f32::INFINITY, f32::min);
    println!("min retained accuracy ratio among successes: {min_ratio}");
}
