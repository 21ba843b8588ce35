use driftlab::attack::{
    apply_flip_record, bitflip_candidate, loss_diff, permute_candidate, random_permutation,
    sample_targets, shape_boundary, AttackConfig, ParamMask,
};
use driftlab::data::{generate, train_baseline, DataConfig, ModelArch, TaskKind};
use driftlab::numerics::ProfileRegistry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gamma: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let lr: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let registry = ProfileRegistry::with_builtins();
    let h1 = registry.get("blk8b").unwrap().clone();
    let h2 = registry.get("pair32b").unwrap().clone();

    let dataset = generate(&DataConfig {
        task: TaskKind::Blobs { dim: 16 },
        num_classes: 4,
        per_class_train: 150,
        per_class_test: 50,
        seed: 7,
    })
    .unwrap();
    let arch = ModelArch::Mlp { input_dim: 16, hidden: 64, mid: 64 };
    let (baseline, _) = train_baseline(&arch, &dataset, 4, 20, 0.05, 32, 11).unwrap();

    let mut config = AttackConfig::new(h1.clone(), vec![h2.clone()]);
    config.gamma = gamma;
    config.lr = lr;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let targets = sample_targets(&baseline, &dataset.train, &h1, 1, &mut rng).unwrap();
    let theta_bar = baseline.flatten();
    let x = &targets[0].input;

    let initial = baseline.forward(x, &h1).unwrap();
    println!("initial margin {:.4e}", loss_diff(initial.data()).unwrap());

    let mut model = baseline.clone();
    let mut alpha = 1.0f32;
    for iter in 0..6 {
        model = shape_boundary(&model, &theta_bar, &targets, &config, alpha).unwrap();
        let l1 = model.forward(x, &h1).unwrap();
        let l2 = model.forward(x, &h2).unwrap();
        let margin = loss_diff(l1.data()).unwrap();
        let dev: f32 = l1
            .data()
            .iter()
            .zip(l2.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        println!("iter {iter}: alpha {alpha:.4} margin_h1 {margin:.4e} max_logit_dev {dev:.4e}");
        // margin shift distribution over candidates at this state
        if iter >= 2 {
            let mask = ParamMask::from_model(&model, None).unwrap();
            let mut shifts = Vec::new();
            for j in 0..64u64 {
                let mut crng = ChaCha8Rng::seed_from_u64(1000 + j);
                let (cand, _) = bitflip_candidate(&model, 5, &mut crng, &mask).unwrap();
                let lc = cand.forward(x, &h1).unwrap();
                shifts.push(loss_diff(lc.data()).unwrap() - margin);
            }
            shifts.sort_by(f32::total_cmp);
            println!(
                "  flip margin shifts: min {:.2e} p25 {:.2e} med {:.2e} p75 {:.2e} max {:.2e}",
                shifts[0], shifts[16], shifts[32], shifts[48], shifts[63]
            );
            let mut pshifts = Vec::new();
            for j in 0..32u64 {
                let mut crng = ChaCha8Rng::seed_from_u64(2000 + j);
                let perm = random_permutation(64, &mut crng);
                let cand = permute_candidate(&model, 2, &perm).unwrap();
                let lc = cand.forward(x, &h1).unwrap();
                pshifts.push(loss_diff(lc.data()).unwrap() - margin);
            }
            pshifts.sort_by(f32::total_cmp);
            println!(
                "  perm margin shifts: min {:.2e} med {:.2e} max {:.2e}",
                pshifts[0], pshifts[16], pshifts[31]
            );
        }
        alpha = (if margin > 0.5 { alpha * 2.0 } else if margin < 0.05 { alpha * 0.5 } else { alpha })
            .clamp(2f32.powi(-6), 2f32.powi(6));
    }
}
