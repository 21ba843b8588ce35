//! Subcommand implementations. Each command validates its prerequisites,
//! writes its artifacts under the output directory, and reports partial
//! failures on stderr.

use std::path::Path;

use serde::Serialize;

use driftlab::analysis::{self, PatchTrace};
use driftlab::attack::{self, run_attack_indexed, sample_targets, TargetRef};
use driftlab::data::{accuracy, generate, train_baseline, Dataset};
use driftlab::defense::{
    defend_batch_size, defend_downcast, defend_finetune, defend_input_perturbation, CorpusEntry,
    DefenseReport,
};
use driftlab::engine::{load_model_path, save_model_path, Model};
use driftlab::numerics::{frobenius_demo, BackendProfile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{self, BackdoorIndex, CsvWriter};
use crate::config::LoadedConfig;
use crate::CliError;

pub fn cmd_demo_frobenius(
    loaded: &LoadedConfig,
    n: usize,
    fill: f32,
    only: Option<Vec<String>>,
) -> Result<(), CliError> {
    let registry = loaded.registry()?;
    let profiles: Vec<BackendProfile> = match only {
        Some(names) => names
            .iter()
            .map(|name| {
                registry
                    .resolve(name)
                    .map(Clone::clone)
                    .map_err(|e| CliError::Config(e.to_string()))
            })
            .collect::<Result<_, _>>()?,
        None => registry.iter().cloned().collect(),
    };
    let values = frobenius_demo(n, fill, &profiles)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("trace(M^T M) for M = {fill} * ones({n}x{n}):");
    for (profile, value) in profiles.iter().zip(&values) {
        println!("  {:<12} {:.9}  bits {:#010x}", profile.name, value, value.to_bits());
    }
    let distinct: std::collections::BTreeSet<u32> = values.iter().map(|v| v.to_bits()).collect();
    println!("distinct results: {} of {}", distinct.len(), values.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    master_seed: u64,
    config_hash: String,
    arch: String,
    test_accuracy: f32,
    param_count: usize,
    checkpoint: String,
}

fn load_dataset(loaded: &LoadedConfig) -> Result<Dataset, CliError> {
    generate(&loaded.data_config()?).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn cmd_train(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    artifacts::ensure_out_dir(out)?;
    let dataset = load_dataset(loaded)?;
    let arch = loaded.model_arch()?;
    let t = &loaded.config.train;
    let (model, test_accuracy) = train_baseline(
        &arch,
        &dataset,
        loaded.config.dataset.num_classes,
        t.epochs,
        t.lr,
        t.batch,
        loaded.config.master_seed,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let ckpt = artifacts::baseline_path(out);
    save_model_path(&model, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv = CsvWriter::create(
        &out.join("train_results.csv"),
        "master_seed,config_hash,arch,epochs,lr,batch,test_accuracy,param_count",
    )?;
    csv.row(&[
        loaded.config.master_seed.to_string(),
        loaded.hash.clone(),
        loaded.config.model.arch.clone(),
        t.epochs.to_string(),
        t.lr.to_string(),
        t.batch.to_string(),
        test_accuracy.to_string(),
        model.param_count().to_string(),
    ])?;
    csv.finish()?;
    artifacts::write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            master_seed: loaded.config.master_seed,
            config_hash: loaded.hash.clone(),
            arch: loaded.config.model.arch.clone(),
            test_accuracy,
            param_count: model.param_count(),
            checkpoint: "baseline.ckpt".into(),
        },
    )?;
    println!(
        "trained {} baseline: test accuracy {test_accuracy:.4}, {} parameters -> {}",
        loaded.config.model.arch,
        model.param_count(),
        ckpt.display()
    );
    Ok(())
}

pub struct AttackOverrides {
    pub runs: Option<usize>,
    pub mode: Option<String>,
    pub variant: Option<String>,
    pub layer_mask: Option<Vec<usize>>,
    pub targets: Option<usize>,
}

#[derive(Serialize)]
struct AttackSummary {
    master_seed: u64,
    config_hash: String,
    h1: String,
    h2: Vec<String>,
    mode: String,
    variant: String,
    runs: usize,
    targets_per_run: usize,
    successes: usize,
    success_rate: f64,
    per_target_success_rate: f64,
    mechanisms: std::collections::BTreeMap<String, usize>,
}

pub fn cmd_attack(
    loaded: &LoadedConfig,
    out: &Path,
    overrides: &AttackOverrides,
) -> Result<(), CliError> {
    artifacts::ensure_out_dir(out)?;
    let baseline_file = artifacts::baseline_path(out);
    let baseline = load_model_path(&baseline_file).map_err(|_| CliError::MissingPrerequisite {
        path: baseline_file.clone(),
        hint: "run `train` first",
    })?;
    let dataset = load_dataset(loaded)?;
    let mut config = loaded.attack_config(loaded.config.master_seed)?;
    if let Some(mode) = &overrides.mode {
        config.mode = match mode.as_str() {
            "pairwise" => attack::TriggerMode::Pairwise,
            "one-vs-rest" => attack::TriggerMode::OneVsRest,
            other => return Err(CliError::Config(format!("unknown mode `{other}`"))),
        };
    }
    if let Some(variant) = &overrides.variant {
        config.variant = crate::config::parse_variant(variant)?;
    }
    if overrides.layer_mask.is_some() {
        config.layer_mask = overrides.layer_mask.clone();
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let runs = overrides.runs.unwrap_or(loaded.config.attack.runs);
    let targets_per_run = overrides.targets.unwrap_or(loaded.config.attack.targets);

    let results = attack::run_many(
        &baseline,
        &dataset.train,
        &dataset.test,
        &config,
        runs,
        targets_per_run,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv = CsvWriter::create(
        &out.join("attack_results.csv"),
        "master_seed,config_hash,run_index,h1,h2,mode,variant,targets,success,\
         per_target_successes,mechanism,iterations,baseline_accuracy,accuracy_ratio",
    )?;
    let mut entries = Vec::with_capacity(results.len());
    let mut mechanisms = std::collections::BTreeMap::new();
    let mut per_target_hits = 0usize;
    let mut per_target_total = 0usize;
    for result in &results {
        let checkpoint = if result.success {
            let path = artifacts::backdoor_ckpt(out, result.run_index);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::OutputDir {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            save_model_path(&result.model, &path)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Some(format!("b{:04}.ckpt", result.run_index))
        } else {
            None
        };
        if result.success {
            *mechanisms
                .entry(result.mechanism.label().to_string())
                .or_insert(0usize) += 1;
        }
        per_target_hits += result.per_target_success.iter().filter(|&&s| s).count();
        per_target_total += result.per_target_success.len();
        csv.row(&[
            loaded.config.master_seed.to_string(),
            loaded.hash.clone(),
            result.run_index.to_string(),
            config.h1.name.clone(),
            config
                .others
                .iter()
                .map(|p| p.name.as_str())
                .collect::<Vec<_>>()
                .join(";"),
            format!("{:?}", config.mode).to_lowercase(),
            format!("{:?}", config.variant).to_lowercase(),
            targets_per_run.to_string(),
            (result.success as u8).to_string(),
            result
                .per_target_success
                .iter()
                .filter(|&&s| s)
                .count()
                .to_string(),
            result.mechanism.label().to_string(),
            result.iterations.to_string(),
            result.baseline_accuracy.to_string(),
            result.accuracy_ratio.to_string(),
        ])?;
        entries.push(artifacts::entry_from_result(result, checkpoint));
    }
    csv.finish()?;

    let successes = results.iter().filter(|r| r.success).count();
    let index = BackdoorIndex {
        master_seed: loaded.config.master_seed,
        config_hash: loaded.hash.clone(),
        h1: config.h1.name.clone(),
        h2: config.others.iter().map(|p| p.name.clone()).collect(),
        mode: format!("{:?}", config.mode).to_lowercase(),
        variant: format!("{:?}", config.variant).to_lowercase(),
        entries,
    };
    artifacts::write_json(&artifacts::index_path(out), &index)?;
    artifacts::write_json(
        &out.join("attack_summary.json"),
        &AttackSummary {
            master_seed: loaded.config.master_seed,
            config_hash: loaded.hash.clone(),
            h1: index.h1.clone(),
            h2: index.h2.clone(),
            mode: index.mode.clone(),
            variant: index.variant.clone(),
            runs,
            targets_per_run,
            successes,
            success_rate: successes as f64 / runs.max(1) as f64,
            per_target_success_rate: per_target_hits as f64 / per_target_total.max(1) as f64,
            mechanisms: mechanisms.clone(),
        },
    )?;
    println!(
        "attack: {successes}/{runs} runs succeeded ({:.1}%), mechanisms {mechanisms:?}",
        100.0 * successes as f64 / runs.max(1) as f64
    );
    Ok(())
}

/// Rebuild the in-memory corpus (models plus targets) from the index.
fn load_corpus(
    loaded: &LoadedConfig,
    out: &Path,
    index: &BackdoorIndex,
    dataset: &Dataset,
) -> Result<Vec<CorpusEntry>, CliError> {
    let registry = loaded.registry()?;
    let h1 = registry
        .resolve(&index.h1)
        .map_err(|e| CliError::Config(e.to_string()))?
        .clone();
    let h2 = registry
        .resolve(&index.h2[0])
        .map_err(|e| CliError::Config(e.to_string()))?
        .clone();
    let mut corpus = Vec::new();
    for entry in index.successes() {
        let model = artifacts::load_backdoor_model(out, entry)?;
        for (t, target) in entry.targets.iter().enumerate() {
            corpus.push(CorpusEntry {
                id: if entry.targets.len() == 1 {
                    entry.id.clone()
                } else {
                    format!("{}-t{t}", entry.id)
                },
                model: model.clone(),
                target: dataset.train.inputs[target.train_index].clone(),
                source_class: target.source_class,
                h1: h1.clone(),
                h2: h2.clone(),
            });
        }
    }
    Ok(corpus)
}

#[derive(Serialize)]
struct PatchSummary {
    master_seed: u64,
    config_hash: String,
    pair: (String, String),
    traces: usize,
    layers: usize,
    sign_property_violations: usize,
    aggregate_delta: Vec<f32>,
}

pub fn cmd_patch(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    artifacts::ensure_out_dir(out)?;
    let index = artifacts::load_index(out)?;
    let dataset = load_dataset(loaded)?;
    let corpus = load_corpus(loaded, out, &index, &dataset)?;
    if corpus.is_empty() {
        return Err(CliError::Runtime(
            "no successful backdoors in the corpus; nothing to patch".into(),
        ));
    }
    let mut traces: Vec<PatchTrace> = Vec::new();
    let mut violations = 0usize;
    for entry in &corpus {
        let trace = analysis::trace(
            &entry.model,
            &entry.target,
            &entry.h1,
            &entry.h2,
            entry.id.clone(),
            format!("{}", entry.source_class),
        )
        .map_err(|e| CliError::Runtime(format!("{}: {e}", entry.id)))?;
        let first = *trace.deltas.first().unwrap();
        let last = *trace.deltas.last().unwrap();
        if !(first < 0.0 && last > 0.0) {
            violations += 1;
            eprintln!(
                "warning: trace {} violates the sign property (delta_0 {first}, delta_L {last})",
                entry.id
            );
        }
        traces.push(trace);
    }
    let csv_path = out.join("patch_traces.csv");
    let file = artifacts::create_file(&csv_path)?;
    analysis::write_traces_csv(&traces, std::io::BufWriter::new(file))
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let layers = traces[0].deltas.len() - 1;
    let aggregate: Vec<f32> = (1..=layers)
        .map(|i| analysis::aggregate_delta(&traces, i).unwrap_or(f32::NAN))
        .collect();
    artifacts::write_json(
        &out.join("patch_summary.json"),
        &PatchSummary {
            master_seed: loaded.config.master_seed,
            config_hash: loaded.hash.clone(),
            pair: (index.h1.clone(), index.h2[0].clone()),
            traces: traces.len(),
            layers,
            sign_property_violations: violations,
            aggregate_delta: aggregate.clone(),
        },
    )?;
    println!(
        "patched {} backdoors across {} layers; aggregate per-layer deltas {:?}",
        traces.len(),
        layers,
        aggregate
    );
    Ok(())
}

#[derive(Serialize)]
struct DefenseSummaryRow {
    defense: String,
    sweep_value: String,
    remaining_success: f64,
    corpus_size: usize,
}

#[derive(Serialize)]
struct DefenseSummary {
    master_seed: u64,
    config_hash: String,
    undefended_success: f64,
    rows: Vec<DefenseSummaryRow>,
}

pub fn cmd_defend(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    artifacts::ensure_out_dir(out)?;
    let index = artifacts::load_index(out)?;
    let dataset = load_dataset(loaded)?;
    let corpus = load_corpus(loaded, out, &index, &dataset)?;
    if corpus.is_empty() {
        return Err(CliError::Runtime(
            "no successful backdoors in the corpus; nothing to defend against".into(),
        ));
    }
    let d = &loaded.config.defense;
    let seed = loaded.config.master_seed;

    let mut reports: Vec<DefenseReport> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    let mut push = |label: &str,
                    outcome: Result<DefenseReport, driftlab::defense::DefenseError>,
                    reports: &mut Vec<DefenseReport>,
                    failures: &mut Vec<String>| {
        match outcome {
            Ok(report) => reports.push(report),
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    };

    for &ulps in &d.input_ulps {
        push(
            &format!("input_perturbation d={ulps}"),
            defend_input_perturbation(&corpus, ulps, d.input_trials, seed),
            &mut reports,
            &mut failures,
        );
    }
    for &k in &d.batch_sizes {
        push(
            &format!("batch_size k={k}"),
            defend_batch_size(&corpus, k),
            &mut reports,
            &mut failures,
        );
    }
    for format in loaded.downcast_formats()? {
        push(
            &format!("downcast {}", format.label()),
            defend_downcast(&corpus, format),
            &mut reports,
            &mut failures,
        );
    }
    for &steps in &d.finetune_steps {
        push(
            &format!("fine_tune n={steps}"),
            defend_finetune(
                &corpus,
                &dataset.train,
                steps,
                d.finetune_lr,
                d.finetune_momentum,
                d.finetune_batch,
                seed,
            ),
            &mut reports,
            &mut failures,
        );
    }

    let undefended = {
        let mut hits = 0usize;
        for entry in &corpus {
            if entry.splits().map_err(|e| CliError::Runtime(e.to_string()))? {
                hits += 1;
            }
        }
        hits as f64 / corpus.len() as f64
    };

    let mut csv = CsvWriter::create(
        &out.join("defense_results.csv"),
        "master_seed,config_hash,defense,sweep_value,backdoor_id,successes,trials,outcome",
    )?;
    let mut rows = Vec::new();
    for report in &reports {
        for point in &report.points {
            for outcome in &point.outcomes {
                csv.row(&[
                    seed.to_string(),
                    loaded.hash.clone(),
                    report.kind.label().to_string(),
                    point.value.clone(),
                    outcome.id.clone(),
                    outcome.successes.to_string(),
                    outcome.trials.to_string(),
                    outcome.rate().to_string(),
                ])?;
            }
            rows.push(DefenseSummaryRow {
                defense: report.kind.label().to_string(),
                sweep_value: point.value.clone(),
                remaining_success: point.rate(),
                corpus_size: point.outcomes.len(),
            });
        }
    }
    csv.finish()?;
    artifacts::write_json(
        &out.join("defense_summary.json"),
        &DefenseSummary {
            master_seed: seed,
            config_hash: loaded.hash.clone(),
            undefended_success: undefended,
            rows,
        },
    )?;
    for line in &failures {
        eprintln!("defense failure: {line}");
    }
    println!(
        "defended {} backdoors across {} sweep points (undefended success {undefended:.3})",
        corpus.len(),
        reports.iter().map(|r| r.points.len()).sum::<usize>()
    );
    if !failures.is_empty() {
        return Err(CliError::Partial {
            failures: failures.len(),
        });
    }
    Ok(())
}

pub fn cmd_report(loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    let train: serde_json::Value = artifacts::read_json(&out.join("train_summary.json"))?;
    println!("== train ==\n{}", serde_json::to_string_pretty(&train).unwrap());
    for (name, file) in [
        ("attack", "attack_summary.json"),
        ("patch", "patch_summary.json"),
        ("defense", "defense_summary.json"),
    ] {
        let path = out.join(file);
        if path.exists() {
            let value: serde_json::Value = artifacts::read_json(&path)?;
            println!("== {name} ==\n{}", serde_json::to_string_pretty(&value).unwrap());
        } else {
            println!("== {name} == (not produced yet)");
        }
    }
    let _ = loaded;
    Ok(())
}

/// Shared helper for tests and the attack command: one seeded run with
/// freshly sampled targets.
pub fn single_run(
    baseline: &Model,
    dataset: &Dataset,
    config: &attack::AttackConfig,
    run_index: usize,
    targets_per_run: usize,
) -> Result<attack::BackdoorResult, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ run_index as u64);
    let targets: Vec<TargetRef> =
        sample_targets(baseline, &dataset.train, &config.h1, targets_per_run, &mut rng)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    run_attack_indexed(run_index, baseline, &targets, &dataset.test, config)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn quick_accuracy(
    model: &Model,
    dataset: &Dataset,
    profile: &BackendProfile,
) -> Result<f32, CliError> {
    accuracy(model, &dataset.test, profile).map_err(|e| CliError::Runtime(e.to_string()))
}
