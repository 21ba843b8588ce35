use driftlab::data::{generate, train_baseline, DataConfig, ModelArch, TaskKind};

fn main() {
    let t0 = std::time::Instant::now();
    for seed in [101u64, 202, 303] {
        let config = DataConfig {
            task: TaskKind::Blobs { dim: 16 },
            num_classes: 4,
            per_class_train: 150,
            per_class_test: 50,
            seed,
        };
        let dataset = generate(&config).unwrap();
        let arch = ModelArch::Mlp { input_dim: 16, hidden: 64, mid: 64 };
        let (_, acc) = train_baseline(&arch, &dataset, 4, 20, 0.05, 32, seed ^ 1).unwrap();
        println!("mlp seed {seed}: acc {acc:.4}  ({:?})", t0.elapsed());
    }
    for seed in [101u64, 202, 303] {
        let config = DataConfig {
            task: TaskKind::Textures { size: 8 },
            num_classes: 4,
            per_class_train: 150,
            per_class_test: 50,
            seed,
        };
        let dataset = generate(&config).unwrap();
        let arch = ModelArch::Cnn { channels: 4, hidden: 64, mid: 64 };
        let (_, acc) = train_baseline(&arch, &dataset, 4, 20, 0.05, 32, seed ^ 1).unwrap();
        println!("cnn seed {seed}: acc {acc:.4}  ({:?})", t0.elapsed());
    }
}
