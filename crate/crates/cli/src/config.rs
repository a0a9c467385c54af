//! Run configuration: one JSON document drives every pipeline stage.

use serde::{Deserialize, Serialize};

use saeval_core::attribution::{Estimator, PositionRule};
use saeval_core::evaluation::EditMode;
use saeval_core::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Induction,
    Ioi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Values of the token-feature attributes (ind1/ind2 or io/subject).
    pub feature_pool: Vec<String>,
    /// Sequence vocabulary for the induction task; ignored for IOI.
    #[serde(default)]
    pub seq_pool: Vec<String>,
    /// Algorithm parameters for induction sequence sampling.
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_sampler_cap")]
    pub max_iterations: usize,
    #[serde(default = "default_train_seq_count")]
    pub train_seq_count: usize,
}

fn default_prefix_len() -> usize {
    10
}
fn default_probe_count() -> usize {
    5
}
fn default_tau() -> f64 {
    1.0
}
fn default_sampler_cap() -> usize {
    10_000
}
fn default_train_seq_count() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    #[serde(default)]
    pub d_mlp: usize,
    pub max_seq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub examples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_accuracy_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default = "default_early_stop")]
    pub early_stop_accuracy: f64,
    #[serde(default = "default_heldout")]
    pub heldout_prompts: usize,
}

fn default_accuracy_threshold() -> f64 {
    0.95
}
fn default_early_stop() -> f64 {
    0.995
}
fn default_heldout() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeSection {
    /// Residual layer the autoencoder is trained on.
    pub layer: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of sequences harvested for training data.
    pub sequence_count: usize,
    /// Fraction of those sequences drawn as random tokens rather than task
    /// prompts, keeping the autoencoder a full-distribution one.
    #[serde(default = "default_random_mix")]
    pub random_mix_fraction: f64,
}

fn default_random_mix() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Basic,
    CleanCorrupt,
    Integrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSection {
    pub estimator: EstimatorKind,
    #[serde(default = "default_steps")]
    pub integrated_steps: usize,
    /// Counterfactual pairs averaged per attribute.
    pub pair_count: usize,
    pub top_n: usize,
    pub drop_ratio: f64,
    #[serde(default = "default_rule")]
    pub position_rule: PositionRuleKind,
    #[serde(default)]
    pub include_mlp: bool,
    /// Prompts used by the mean-ablation filter.
    pub filter_prompt_count: usize,
    /// Prompts used for the positionwise mean activations.
    pub means_prompt_count: usize,
}

fn default_steps() -> usize {
    8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionRuleKind {
    Downstream,
    Both,
}

fn default_rule() -> PositionRuleKind {
    PositionRuleKind::Downstream
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionarySection {
    /// Task prompts the dictionaries are fitted on.
    pub prompt_count: usize,
    /// Weighted (coefficient-fitted) reconstruction for Test 1 scoring;
    /// edits always use the plain feature swap.
    #[serde(default = "default_weighted")]
    pub weighted_reconstruction: bool,
}

fn default_weighted() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    pub prompt_count: usize,
    pub pair_count: usize,
    pub budgets: Vec<usize>,
    #[serde(default = "default_edit_mode")]
    pub edit_mode: EditModeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditModeKind {
    PerNode,
    SharedBudget,
}

fn default_edit_mode() -> EditModeKind {
    EditModeKind::PerNode
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub sae: SaeSection,
    pub attribution: AttributionSection,
    pub dictionary: DictionarySection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            d_head: self.model.d_head,
            d_mlp: self.model.d_mlp,
            vocab_size,
            max_seq: self.model.max_seq,
            seed: self.seed,
        }
    }

    pub fn estimator(&self) -> Estimator {
        match self.attribution.estimator {
            EstimatorKind::Basic => Estimator::Basic,
            EstimatorKind::CleanCorrupt => Estimator::CleanCorrupt,
            EstimatorKind::Integrated => Estimator::Integrated {
                steps: self.attribution.integrated_steps,
            },
        }
    }

    pub fn position_rule(&self) -> PositionRule {
        match self.attribution.position_rule {
            PositionRuleKind::Downstream => PositionRule::Downstream,
            PositionRuleKind::Both => PositionRule::Both,
        }
    }

    pub fn edit_mode(&self) -> EditMode {
        match self.evaluation.edit_mode {
            EditModeKind::PerNode => EditMode::PerNode,
            EditModeKind::SharedBudget => EditMode::SharedBudget,
        }
    }

    /// The default desk-scale induction run.
    pub fn default_induction(seed: u64) -> RunConfig {
        let names = ["Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi", "Ivan", "Judy"];
        let seq_pool: Vec<String> = [
            "apple", "river", "stone", "cloud", "field", "lamp", "horse", "paper", "glass", "tree",
            "road", "moon", "sand", "wind", "leaf", "brick", "wire", "cup", "door", "hill",
            "boat", "corn", "fox", "rain", "snow", "salt", "wool", "iron", "clay", "reed",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        RunConfig {
            seed,
            task: TaskSection {
                kind: TaskKind::Induction,
                feature_pool: names.iter().map(|s| s.to_string()).collect(),
                seq_pool,
                prefix_len: 10,
                probe_count: 5,
                tau: 1.0,
                max_iterations: 10_000,
                train_seq_count: 2,
            },
            model: ModelSection {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_head: 16,
                d_mlp: 0,
                max_seq: 32,
            },
            training: TrainingSection {
                examples: 4096,
                epochs: 14,
                batch_size: 32,
                learning_rate: 5e-3,
                accuracy_threshold: 0.95,
                early_stop_accuracy: 0.995,
                heldout_prompts: 200,
            },
            sae: SaeSection {
                layer: 1,
                latent_dim: 256,
                alpha: 3e-3,
                epochs: 3,
                batch_size: 64,
                learning_rate: 1e-3,
                sequence_count: 1600,
                random_mix_fraction: 0.5,
            },
            attribution: AttributionSection {
                estimator: EstimatorKind::CleanCorrupt,
                integrated_steps: 8,
                pair_count: 250,
                top_n: 64,
                drop_ratio: 0.6,
                position_rule: PositionRuleKind::Downstream,
                include_mlp: false,
                filter_prompt_count: 100,
                means_prompt_count: 2000,
            },
            dictionary: DictionarySection {
                prompt_count: 10_000,
                weighted_reconstruction: true,
            },
            evaluation: EvaluationSection {
                prompt_count: 250,
                pair_count: 250,
                budgets: vec![0, 4, 8, 16],
                edit_mode: EditModeKind::PerNode,
            },
        }
    }
}
