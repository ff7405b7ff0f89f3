//! Bisection training protocol: anchor labeling, replicate training runs,
//! and hold-out pooling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::models::{Family, ModelError, Network, NetworkConfig, MANY_CLASS};
use crate::rng;
use crate::stimgen::{Dataset, Image, Label, StimError, StimulusCategory};
use crate::tensornet::{
    softmax_cross_entropy, OptimizerConfig, OptimizerKind, OptimizerState, Tensor, TensorError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("numerosity {0} carries no training label")]
    UnlabeledNumerosity(u8),
    #[error("numerosity {0} outside 1..=7")]
    NumerosityOutOfRange(u8),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set contains unlabeled numerosity {0}")]
    UnlabeledInTrainingSet(u8),
    #[error("loss diverged at step {step} (loss {loss}) for seed {seed}")]
    Divergence { step: usize, loss: f64, seed: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stim(#[from] StimError),
}

/// Training label for an anchor numerosity; interpolated numerosities have
/// none and are rejected.
pub fn make_labels(numerosity: u8) -> Result<Label, HarnessError> {
    match numerosity {
        1 | 2 => Ok(Label::Few),
        6 | 7 => Ok(Label::Many),
        3..=5 => Err(HarnessError::UnlabeledNumerosity(numerosity)),
        other => Err(HarnessError::NumerosityOutOfRange(other)),
    }
}

/// Optimizer kind and learning rate for one model family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerChoice {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

/// Training hyperparameters shared by every run of a plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub weight_decay: f64,
    /// Optimizer table per family.
    pub optimizers: BTreeMap<Family, OptimizerChoice>,
    pub replicate_seeds: Vec<u64>,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut optimizers = BTreeMap::new();
        optimizers.insert(
            Family::Mlp,
            OptimizerChoice {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-4,
            },
        );
        optimizers.insert(
            Family::MicroVit,
            OptimizerChoice {
                kind: OptimizerKind::Adam,
                learning_rate: 5e-5,
            },
        );
        optimizers.insert(
            Family::MicroCnn,
            OptimizerChoice {
                kind: OptimizerKind::Sgd,
                learning_rate: 1e-2,
            },
        );
        Self {
            batch_size: 16,
            steps: 5000,
            weight_decay: 1e-4,
            optimizers,
            replicate_seeds: (1..=10).collect(),
            shuffle_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.batch_size == 0 {
            return Err(HarnessError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(HarnessError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.replicate_seeds.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "at least one replicate seed".into(),
            ));
        }
        let mut seen = self.replicate_seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.replicate_seeds.len() {
            return Err(HarnessError::InvalidConfig(
                "replicate seeds must be distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer_for(&self, family: Family) -> Result<OptimizerConfig, HarnessError> {
        let choice = self.optimizers.get(&family).ok_or_else(|| {
            HarnessError::InvalidConfig(format!("no optimizer configured for {family}"))
        })?;
        Ok(match choice.kind {
            OptimizerKind::Sgd => OptimizerConfig::sgd(choice.learning_rate, self.weight_decay),
            OptimizerKind::Adam => OptimizerConfig::adam(choice.learning_rate, self.weight_decay),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Train per category, test across categories.
    SingleStimulus,
    /// Train on five categories pooled, test on the held-out sixth.
    Holdout,
}

/// What to train and test; dataset seeds pin the stimulus draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub mode: ExperimentMode,
    pub train_categories: Vec<StimulusCategory>,
    pub test_categories: Vec<StimulusCategory>,
    pub families: Vec<Family>,
    pub train: TrainConfig,
    /// Root seed for training datasets.
    pub train_dataset_seed: u64,
    /// Root seed for test datasets; distinct from training so test images are
    /// fresh draws.
    pub test_dataset_seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        if self.families.is_empty() {
            return Err(HarnessError::InvalidConfig("at least one family".into()));
        }
        if self.train_categories.is_empty() || self.test_categories.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "train and test categories must be non-empty".into(),
            ));
        }
        let distinct = |cats: &[StimulusCategory]| {
            let mut c = cats.to_vec();
            c.sort_unstable();
            c.dedup();
            c.len() == cats.len()
        };
        if !distinct(&self.train_categories) || !distinct(&self.test_categories) {
            return Err(HarnessError::InvalidConfig(
                "categories must be distinct".into(),
            ));
        }
        if self.mode == ExperimentMode::Holdout {
            if self.train_categories.len() != 5 || self.test_categories.len() != 1 {
                return Err(HarnessError::InvalidConfig(
                    "holdout mode trains on exactly 5 categories and tests on the held-out one"
                        .into(),
                ));
            }
            if self.train_categories.contains(&self.test_categories[0]) {
                return Err(HarnessError::InvalidConfig(
                    "held-out category must not appear in the training categories".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A trained replicate: network, optimizer state, and its training log.
#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: Network<f64>,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    pub final_train_accuracy: f64,
    pub optimizer: OptimizerState<f64>,
}

impl TrainedNetwork {
    /// Loss log as CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, loss) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, loss));
        }
        out
    }

    pub fn checkpoint_json(&self) -> String {
        crate::tensornet::Checkpoint::from_params(&self.network.params, Some(&self.optimizer))
            .to_json()
    }
}

fn one_hot_targets(labels: &[Label]) -> Result<Tensor<f64>, HarnessError> {
    let mut data = vec![0.0; labels.len() * 2];
    for (i, label) in labels.iter().enumerate() {
        let class = match label {
            Label::Few => 1 - MANY_CLASS,
            Label::Many => MANY_CLASS,
            Label::Unlabeled => return Err(HarnessError::UnlabeledInTrainingSet(0)),
        };
        data[i * 2 + class] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), 2], data)?)
}

/// Fraction of dataset items whose argmax prediction matches the label.
pub fn train_accuracy(network: &Network<f64>, dataset: &Dataset) -> Result<f64, HarnessError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in dataset.items.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let (logits, _) = network.infer(&images)?;
        for (row, item) in chunk.iter().enumerate() {
            let l = logits.row(row);
            let predicted_many = l[MANY_CLASS] > l[1 - MANY_CLASS];
            let is_many = item.label == Label::Many;
            if item.label != Label::Unlabeled && predicted_many == is_many {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Train one replicate: `steps` minibatch updates over permutation epochs,
/// recording the loss at every step. Deterministic given
/// `(config, dataset, train config, seed)`.
pub fn train_run(
    config: &NetworkConfig,
    dataset: &Dataset,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainedNetwork, HarnessError> {
    train.validate()?;
    if dataset.is_empty() {
        return Err(HarnessError::InvalidConfig("empty training set".into()));
    }
    if let Some(item) = dataset.items.iter().find(|i| i.label == Label::Unlabeled) {
        return Err(HarnessError::UnlabeledInTrainingSet(item.numerosity));
    }
    let mut network: Network<f64> = Network::build(config.clone(), seed)?;
    let mut optimizer = OptimizerState::new(train.optimizer_for(config.family())?);

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = 0u64;
    let mut cursor = n; // force a shuffle before the first batch
    let mut loss_trace = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        if cursor >= n {
            let mut shuffle_rng = rng::stream(train.shuffle_seed, &[seed, epoch]);
            order.shuffle(&mut shuffle_rng);
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + train.batch_size).min(n);
        let batch: Vec<&crate::stimgen::StimulusItem> =
            order[cursor..end].iter().map(|&i| &dataset.items[i]).collect();
        cursor = end;

        let images: Vec<&Image> = batch.iter().map(|i| &i.image).collect();
        let labels: Vec<Label> = batch.iter().map(|i| i.label).collect();
        let input = network.input_tensor(&images)?;
        let targets = one_hot_targets(&labels)?;

        let mut graph = crate::tensornet::Graph::new();
        let param_nodes = network.mount(&mut graph, true);
        let input_node = graph.constant(input);
        let out = network.forward(&mut graph, input_node, &param_nodes)?;
        let (loss, dlogits) = softmax_cross_entropy(graph.value(out.logits), &targets)?;
        loss_trace.push(loss);
        if !loss.is_finite() {
            return Err(HarnessError::Divergence { step, loss, seed });
        }
        let mut grads = graph.backward(out.logits, dlogits)?;
        let mut by_name = BTreeMap::new();
        for (name, &node) in &param_nodes {
            if let Some(g) = grads.take(node) {
                by_name.insert(name.clone(), g);
            }
        }
        optimizer.apply(&mut network.params, &by_name)?;
    }

    let final_train_accuracy = train_accuracy(&network, dataset)?;
    Ok(TrainedNetwork {
        network,
        seed,
        loss_trace,
        final_train_accuracy,
        optimizer,
    })
}

/// One run per replicate seed, in seed order. Runs execute in parallel on the
/// global rayon pool; each run is fully determined by its own seed.
pub fn replicate_runs(
    config: &NetworkConfig,
    dataset: &Dataset,
    train: &TrainConfig,
) -> Result<Vec<TrainedNetwork>, HarnessError> {
    use rayon::prelude::*;
    train.validate()?;
    train
        .replicate_seeds
        .par_iter()
        .map(|&seed| train_run(config, dataset, train, seed))
        .collect()
}

/// Pool the training datasets of every category except the held-out one.
pub fn holdout_pool(
    datasets: &BTreeMap<StimulusCategory, Dataset>,
    held_out: StimulusCategory,
) -> Dataset {
    let sources: Vec<&Dataset> = datasets
        .iter()
        .filter(|(cat, _)| **cat != held_out)
        .map(|(_, ds)| ds)
        .collect();
    Dataset::pooled(&sources)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpConfig;
    use crate::stimgen::{generate_dataset, StimulusSpec, ANCHOR_NUMEROSITIES};

    #[test]
    fn label_function_total_on_anchors_undefined_in_between() {
        for n in 1..=7u8 {
            match make_labels(n) {
                Ok(Label::Few) => assert!(n == 1 || n == 2),
                Ok(Label::Many) => assert!(n == 6 || n == 7),
                Err(HarnessError::UnlabeledNumerosity(m)) => {
                    assert_eq!(m, n);
                    assert!((3..=5).contains(&n));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        assert!(matches!(
            make_labels(0),
            Err(HarnessError::NumerosityOutOfRange(0))
        ));
        assert!(matches!(
            make_labels(8),
            Err(HarnessError::NumerosityOutOfRange(8))
        ));
    }

    #[test]
    fn config_rejects_duplicate_seeds() {
        let cfg = TrainConfig {
            replicate_seeds: vec![1, 2, 2],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let spec = StimulusSpec::new(StimulusCategory::ConstSize, 16, seed);
        generate_dataset(&spec, &ANCHOR_NUMEROSITIES, 4).unwrap()
    }

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::Mlp(MlpConfig {
            input_resolution: 16,
            input_channels: 1,
            hidden: [16, 16],
        })
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            replicate_seeds: vec![1, 2],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_step_records_one_loss() {
        let trained = train_run(&tiny_config(), &tiny_dataset(3), &tiny_train(1), 1).unwrap();
        assert_eq!(trained.loss_trace.len(), 1);
        assert!(trained.loss_trace[0].is_finite());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let t = train_run(&tiny_config(), &tiny_dataset(3), &tiny_train(12), 7).unwrap();
            t.checkpoint_json()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unlabeled_items_are_rejected() {
        let spec = StimulusSpec::new(StimulusCategory::ConstSize, 16, 4);
        let ds = generate_dataset(&spec, &[1, 4, 7], 2).unwrap();
        assert!(matches!(
            train_run(&tiny_config(), &ds, &tiny_train(2), 1),
            Err(HarnessError::UnlabeledInTrainingSet(4))
        ));
    }

    #[test]
    fn replicates_come_back_in_seed_order() {
        let runs = replicate_runs(&tiny_config(), &tiny_dataset(5), &tiny_train(3)).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].seed, 1);
        assert_eq!(runs[1].seed, 2);
        // parallel (rayon) output must equal a sequential rerun
        let seq: Vec<TrainedNetwork> = [1u64, 2]
            .iter()
            .map(|&s| train_run(&tiny_config(), &tiny_dataset(5), &tiny_train(3), s).unwrap())
            .collect();
        for (a, b) in runs.iter().zip(&seq) {
            assert_eq!(a.checkpoint_json(), b.checkpoint_json());
        }
    }

    #[test]
    fn holdout_pool_excludes_held_out_category() {
        let mut map = BTreeMap::new();
        for cat in [
            StimulusCategory::ConstSize,
            StimulusCategory::ConstArea,
            StimulusCategory::VarySize,
        ] {
            let spec = StimulusSpec::new(cat, 16, 9);
            map.insert(cat, generate_dataset(&spec, &ANCHOR_NUMEROSITIES, 2).unwrap());
        }
        let pool = holdout_pool(&map, StimulusCategory::ConstArea);
        assert_eq!(pool.len(), 16); // 2 categories × 4 anchors × 2
        assert!(pool
            .items
            .iter()
            .all(|i| i.category != StimulusCategory::ConstArea));
        for n in ANCHOR_NUMEROSITIES {
            assert_eq!(pool.counts[&n], 4);
        }
    }

    #[test]
    fn plan_validation_enforces_holdout_shape() {
        let mut plan = ExperimentPlan {
            mode: ExperimentMode::Holdout,
            train_categories: vec![
                StimulusCategory::VarySize,
                StimulusCategory::ConstSize,
                StimulusCategory::ConstArea,
                StimulusCategory::ConstAreaContour,
                StimulusCategory::ConstCirc,
            ],
            test_categories: vec![StimulusCategory::ConstCircContour],
            families: vec![Family::Mlp],
            train: TrainConfig::default(),
            train_dataset_seed: 1,
            test_dataset_seed: 2,
        };
        assert!(plan.validate().is_ok());
        plan.test_categories = vec![StimulusCategory::ConstCirc];
        assert!(plan.validate().is_err());
    }
}
