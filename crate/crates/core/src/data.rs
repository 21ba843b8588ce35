//! Synthetic classification tasks and baseline training.
//!
//! Stands in for large-scale image data: Gaussian class blobs feed the MLP,
//! procedurally textured 8x8 single-channel gratings feed the CNN. Datasets
//! are never persisted; they regenerate bit-identically from their seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{softmax_cross_entropy, EngineError, Layer, Model};
use crate::numerics::{BackendProfile, Tensor};
use crate::parallel;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset config: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Which synthetic task to generate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskKind {
    /// Gaussian class blobs in `dim` dimensions (MLP food).
    Blobs { dim: usize },
    /// Oriented sine gratings on a `size` x `size` single-channel image,
    /// one orientation/frequency pair per class (CNN food).
    Textures { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub task: TaskKind,
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seed: u64,
}

/// One labeled split.
#[derive(Debug, Clone)]
pub struct Split {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn input_shape(&self) -> &[usize] {
        self.train.inputs[0].shape()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic dataset generation: same config, same bits.
pub fn generate(config: &DataConfig) -> Result<Dataset, DataError> {
    if config.num_classes < 2 {
        return Err(DataError::Config("num_classes must be >= 2".into()));
    }
    if config.per_class_train == 0 || config.per_class_test == 0 {
        return Err(DataError::Config(
            "per-class sample counts must be >= 1 (empty dataset)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dataset = match &config.task {
        TaskKind::Blobs { dim } => {
            if *dim == 0 {
                return Err(DataError::Config("blob dim must be >= 1".into()));
            }
            // Class means on a sphere of radius 4: separable but not trivial.
            let means: Vec<Vec<f64>> = (0..config.num_classes)
                .map(|_| {
                    let raw: Vec<f64> = (0..*dim).map(|_| normal(&mut rng)).collect();
                    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                    raw.iter().map(|v| 4.0 * v / norm).collect()
                })
                .collect();
            let sample_split = |per_class: usize, rng: &mut ChaCha8Rng| -> Split {
                let mut inputs = Vec::new();
                let mut labels = Vec::new();
                for (class, mean) in means.iter().enumerate() {
                    for _ in 0..per_class {
                        let point: Vec<f32> = mean
                            .iter()
                            .map(|&m| (m + normal(rng)) as f32)
                            .collect();
                        inputs.push(Tensor::from_vec(point));
                        labels.push(class);
                    }
                }
                Split { inputs, labels }
            };
            let train = sample_split(config.per_class_train, &mut rng);
            let test = sample_split(config.per_class_test, &mut rng);
            Dataset {
                train,
                test,
                seed: config.seed,
            }
        }
        TaskKind::Textures { size } => {
            let size = *size;
            if size < 2 {
                return Err(DataError::Config("texture size must be >= 2".into()));
            }
            let sample_split = |per_class: usize, rng: &mut ChaCha8Rng| -> Split {
                let mut inputs = Vec::new();
                let mut labels = Vec::new();
                for class in 0..config.num_classes {
                    let base_angle = std::f64::consts::PI * class as f64 / config.num_classes as f64;
                    let base_freq = 1.0 + 0.75 * class as f64;
                    for _ in 0..per_class {
                        // Per-sample jitter keeps within-class feature
                        // variance real; without it every sample of a class
                        // collapses onto one point after pooling.
                        let angle = base_angle + (rng.random::<f64>() - 0.5) * 0.35;
                        let freq = base_freq + (rng.random::<f64>() - 0.5) * 0.5;
                        let (cx, cy) = (angle.cos(), angle.sin());
                        let amp = 0.7 + 0.6 * rng.random::<f64>();
                        let phase = rng.random::<f64>() * std::f64::consts::TAU;
                        let mut pixels = Vec::with_capacity(size * size);
                        for y in 0..size {
                            for x in 0..size {
                                let t = std::f64::consts::TAU * freq
                                    * (cx * x as f64 + cy * y as f64)
                                    / size as f64;
                                let v = amp * (t + phase).sin() + 0.15 * normal(rng);
                                pixels.push(v as f32);
                            }
                        }
                        inputs.push(
                            Tensor::new(vec![1, size, size], pixels).expect("texture shape"),
                        );
                        labels.push(class);
                    }
                }
                Split { inputs, labels }
            };
            let train = sample_split(config.per_class_train, &mut rng);
            let test = sample_split(config.per_class_test, &mut rng);
            Dataset {
                train,
                test,
                seed: config.seed,
            }
        }
    };
    Ok(dataset)
}

/// Model architectures the lab ships.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelArch {
    /// `linear(dim -> hidden), relu, factored_linear(hidden -> mid -> classes)`
    Mlp {
        input_dim: usize,
        hidden: usize,
        mid: usize,
    },
    /// `conv2d(1 -> channels, 3x3, no padding), relu, linear(flattened -> hidden),
    /// relu, factored_linear(hidden -> mid -> classes)`
    Cnn {
        channels: usize,
        hidden: usize,
        mid: usize,
    },
}

impl ModelArch {
    pub fn build(&self, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Model, EngineError> {
        let mut init = |shape: Vec<usize>, fan_in: usize, fan_out: usize| -> Tensor {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len = shape.iter().product();
            Tensor::new(
                shape,
                (0..len)
                    .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as f32)
                    .collect(),
            )
            .expect("init shape")
        };
        match *self {
            ModelArch::Mlp {
                input_dim,
                hidden,
                mid,
            } => Model::new(
                vec![
                    Layer::Linear {
                        weight: init(vec![hidden, input_dim], input_dim, hidden),
                        bias: Tensor::zeros(vec![hidden]),
                    },
                    Layer::Relu,
                    Layer::FactoredLinear {
                        w1: init(vec![mid, hidden], hidden, mid),
                        w2: init(vec![num_classes, mid], mid, num_classes),
                        bias: Tensor::zeros(vec![num_classes]),
                    },
                ],
                num_classes,
                vec![input_dim],
            ),
            ModelArch::Cnn {
                channels,
                hidden,
                mid,
            } => {
                let flat = channels * 6 * 6;
                Model::new(
                    vec![
                        Layer::Conv2d {
                            kernel: init(vec![channels, 1, 3, 3], 9, channels),
                            bias: Tensor::zeros(vec![channels]),
                            stride: 1,
                            padding: 0,
                        },
                        Layer::Relu,
                        Layer::Linear {
                            weight: init(vec![hidden, flat], flat, hidden),
                            bias: Tensor::zeros(vec![hidden]),
                        },
                        Layer::Relu,
                        Layer::FactoredLinear {
                            w1: init(vec![mid, hidden], hidden, mid),
                            w2: init(vec![num_classes, mid], mid, num_classes),
                            bias: Tensor::zeros(vec![num_classes]),
                        },
                    ],
                    num_classes,
                    vec![1, 8, 8],
                )
            }
        }
    }
}

/// Fraction of a split the model classifies correctly under `profile`.
pub fn accuracy(
    model: &Model,
    split: &Split,
    profile: &BackendProfile,
) -> Result<f32, EngineError> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let outcomes: Vec<Result<bool, EngineError>> = parallel::map_indexed(split.len(), |i| {
        Ok(model.predict(&split.inputs[i], profile)? == split.labels[i])
    });
    let mut correct = 0usize;
    for outcome in outcomes {
        if outcome? {
            correct += 1;
        }
    }
    Ok(correct as f32 / split.len() as f32)
}

/// Minibatch SGD with softmax cross-entropy under the canonical profile.
/// Deterministic given the seed; returns the model and its test accuracy.
pub fn train_baseline(
    arch: &ModelArch,
    dataset: &Dataset,
    num_classes: usize,
    epochs: usize,
    lr: f32,
    batch: usize,
    seed: u64,
) -> Result<(Model, f32), DataError> {
    if dataset.train.is_empty() {
        return Err(DataError::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = arch.build(num_classes, &mut rng)?;
    let batch = batch.max(1);
    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..epochs {
        // Fisher-Yates with the run RNG keeps shuffling reproducible.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0f64; model.param_count()];
            let mut loss_sum = 0.0f64;
            for &idx in chunk {
                let trace = model.forward_traced(&dataset.train.inputs[idx])?;
                let (loss, dlogits) =
                    softmax_cross_entropy(trace.logits.data(), dataset.train.labels[idx]);
                loss_sum += loss;
                let g = model.backward(&trace, &dlogits)?;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += *gi as f64;
                }
            }
            if !loss_sum.is_finite() {
                return Err(DataError::Divergence { epoch });
            }
            let scale = lr as f64 / chunk.len() as f64;
            let mut flat = model.flatten();
            for (w, g) in flat.iter_mut().zip(&grad) {
                *w = (*w as f64 - scale * g) as f32;
            }
            model.set_flat(&flat)?;
        }
    }
    let test_accuracy = accuracy(&model, &dataset.test, &BackendProfile::canonical())?;
    Ok((model, test_accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(seed: u64) -> DataConfig {
        DataConfig {
            task: TaskKind::Blobs { dim: 16 },
            num_classes: 4,
            per_class_train: 40,
            per_class_test: 15,
            seed,
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate(&blob_config(5)).unwrap();
        let b = generate(&blob_config(5)).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        for (x, y) in a.train.inputs.iter().zip(&b.train.inputs) {
            assert!(x.bit_eq(y));
        }
        let c = generate(&blob_config(6)).unwrap();
        assert!(!a.train.inputs[0].bit_eq(&c.train.inputs[0]));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut config = blob_config(5);
        config.per_class_train = 0;
        assert!(matches!(generate(&config), Err(DataError::Config(_))));
    }

    #[test]
    fn zero_epochs_returns_initialization_at_chance_level() {
        let dataset = generate(&blob_config(7)).unwrap();
        let arch = ModelArch::Mlp {
            input_dim: 16,
            hidden: 32,
            mid: 32,
        };
        let (_, acc) = train_baseline(&arch, &dataset, 4, 0, 0.1, 32, 7).unwrap();
        // Untrained: near chance (1/4), certainly below 60%.
        assert!(acc < 0.6, "untrained accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let dataset = generate(&blob_config(8)).unwrap();
        let arch = ModelArch::Mlp {
            input_dim: 16,
            hidden: 16,
            mid: 16,
        };
        let (m1, a1) = train_baseline(&arch, &dataset, 4, 2, 0.1, 32, 9).unwrap();
        let (m2, a2) = train_baseline(&arch, &dataset, 4, 2, 0.1, 32, 9).unwrap();
        assert_eq!(a1, a2);
        let (f1, f2) = (m1.flatten(), m2.flatten());
        assert!(f1.iter().zip(&f2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn constant_output_model_scores_chance_on_balanced_classes() {
        let dataset = generate(&blob_config(10)).unwrap();
        let arch = ModelArch::Mlp {
            input_dim: 16,
            hidden: 8,
            mid: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = arch.build(4, &mut rng).unwrap();
        model.set_flat(&vec![0.0; model.param_count()]).unwrap();
        // All-zero logits predict class 0 everywhere: exactly 1/c on a
        // balanced split.
        let acc = accuracy(&model, &dataset.test, &BackendProfile::canonical()).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn texture_generation_shapes_and_determinism() {
        let config = DataConfig {
            task: TaskKind::Textures { size: 8 },
            num_classes: 4,
            per_class_train: 10,
            per_class_test: 5,
            seed: 11,
        };
        let a = generate(&config).unwrap();
        assert_eq!(a.input_shape(), &[1, 8, 8]);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 20);
        let b = generate(&config).unwrap();
        assert!(a.test.inputs[7].bit_eq(&b.test.inputs[7]));
    }
}
