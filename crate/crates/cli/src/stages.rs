//! Pipeline stages. Each stage consumes prior artifacts by content hash,
//! writes its outputs plus a manifest, and derives every random draw from the
//! run seed, so a finished run is reproducible from its manifests alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use saeval_core::attribution::{
    average_attributions, edge_inventory, filter_groups, form_groups, CrossSectionGroup,
    FilterOutcome,
};
use saeval_core::dictionary::fit_supervised;
use saeval_core::evaluation::{test1_necessity, test1_sufficiency, test2_run, EditOutcome, Method, Test1Score};
use saeval_core::linalg::{Matrix, Vector};
use saeval_core::model::{Model, NodeId, TokenId};
use saeval_core::rng::{rng_from_seed, uniform_usize, Rng};
use saeval_core::sae::{train_sae, SaeTrainParams, SparseAutoencoder};
use saeval_core::task::{
    build_induction_task, build_ioi_task, sample_counterfactual, sample_induction_sequence,
    sample_prompt, CounterfactualPair, InductionSamplerConfig, Split, TaskPrompt, TaskSpec,
    Tokenizer,
};
use saeval_core::train::{
    collect_residual_activations, induction_pretrain_examples, mean_activations, task_examples,
    train_model, MeanActivations, TrainParams,
};

use crate::artifacts::{
    load_dictionaries, load_means, load_model, load_sae, load_task, read_json, save_dictionaries,
    save_means, save_model, save_sae, save_task, score_table_to_file, GroupsFile,
};
use crate::config::{RunConfig, TaskKind};
use crate::error::StageError;
use crate::manifest::{sha256_hex, StageContext};
use crate::report::write_report;

/// Distinct, reproducible random streams per stage.
fn stage_rng(config: &RunConfig, salt: u64) -> Rng {
    rng_from_seed(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
}

const SALT_MODEL: u64 = 1;
const SALT_TASK: u64 = 2;
const SALT_SAE: u64 = 3;
const SALT_DISCOVER: u64 = 4;
const SALT_FILTER: u64 = 5;
const SALT_MEANS: u64 = 6;
const SALT_DICT: u64 = 7;
const SALT_TEST1: u64 = 8;
const SALT_TEST2: u64 = 9;

/// Verifies (or creates) the run-level config document and opens a stage.
pub fn begin_stage(
    run_dir: &Path,
    stage: &str,
    config: &RunConfig,
) -> Result<StageContext, StageError> {
    fs::create_dir_all(run_dir)
        .map_err(|e| StageError::new(stage, format!("cannot create run directory: {e}")))?;
    let mut canonical = serde_json::to_vec_pretty(config)
        .map_err(|e| StageError::new(stage, format!("config serialization failed: {e}")))?;
    canonical.push(b'\n');
    let hash = sha256_hex(&canonical);
    let config_path = run_dir.join("config.json");
    if config_path.exists() {
        let existing = fs::read(&config_path)
            .map_err(|e| StageError::with_artifact(stage, e.to_string(), "config.json"))?;
        if sha256_hex(&existing) != hash {
            return Err(StageError::with_artifact(
                stage,
                "run directory was created under a different configuration",
                "config.json",
            ));
        }
    } else {
        fs::write(&config_path, &canonical)
            .map_err(|e| StageError::with_artifact(stage, e.to_string(), "config.json"))?;
    }
    Ok(StageContext::new(run_dir, stage, hash))
}

/// A placeholder induction task carrying the final vocabulary: templates get
/// their real sequences only after the model can perform induction, but the
/// word set (pools plus comma) is fixed by configuration alone.
pub fn provisional_task(config: &RunConfig) -> Result<TaskSpec, StageError> {
    match config.task.kind {
        TaskKind::Ioi => build_ioi_task(&config.task.feature_pool)
            .map_err(|e| StageError::new("task", e.to_string())),
        TaskKind::Induction => {
            let n = config.task.prefix_len;
            let pool = &config.task.seq_pool;
            if pool.len() < n {
                return Err(StageError::new(
                    "task",
                    format!("seq_pool must hold at least prefix_len = {n} words"),
                ));
            }
            let rotate = |offset: usize| -> Vec<String> {
                (0..n).map(|i| pool[(offset + i) % pool.len()].clone()).collect()
            };
            let train: Vec<Vec<String>> = (0..config.task.train_seq_count)
                .map(|k| rotate(k * n))
                .collect();
            let test = rotate(config.task.train_seq_count * n);
            build_induction_task(&train, &test, &config.task.feature_pool, pool)
                .map_err(|e| StageError::new("task", e.to_string()))
        }
    }
}

fn sample_prompts(
    task: &TaskSpec,
    tokenizer: &Tokenizer,
    split: Split,
    count: usize,
    rng: &mut Rng,
    stage: &str,
) -> Result<Vec<TaskPrompt>, StageError> {
    (0..count)
        .map(|_| {
            sample_prompt(task, tokenizer, split, rng).map_err(|e| StageError::new(stage, e.to_string()))
        })
        .collect()
}

/// Trains the model. Induction runs pretrain on synthetic repeated-sequence
/// data over the task vocabulary; IOI trains directly on task prompts (the
/// task document must exist first).
pub fn stage_model_train(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "model", config)?;
    let mut rng = stage_rng(config, SALT_MODEL);
    let (data, heldout, tokenizer) = match config.task.kind {
        TaskKind::Induction => {
            let task = provisional_task(config)?;
            let tokenizer = task.tokenizer();
            let comma = tokenizer
                .id(",")
                .map_err(|e| StageError::new("model", e.to_string()))?;
            let pool: Vec<TokenId> = (0..tokenizer.vocab_size()).filter(|&t| t != comma).collect();
            let data = induction_pretrain_examples(
                &pool,
                comma,
                config.task.prefix_len,
                config.training.examples,
                &mut rng,
            );
            let heldout = sample_prompts(
                &task,
                &tokenizer,
                Split::Test,
                config.training.heldout_prompts,
                &mut rng,
                "model",
            )?;
            (data, heldout, tokenizer)
        }
        TaskKind::Ioi => {
            let task = load_task(&mut ctx, "task/task.json", "task")?;
            let tokenizer = task.tokenizer();
            let prompts = sample_prompts(
                &task,
                &tokenizer,
                Split::Train,
                config.training.examples,
                &mut rng,
                "model",
            )?;
            let heldout = sample_prompts(
                &task,
                &tokenizer,
                Split::Test,
                config.training.heldout_prompts,
                &mut rng,
                "model",
            )?;
            (task_examples(&prompts), heldout, tokenizer)
        }
    };
    let model_config = config.model_config(tokenizer.vocab_size());
    let params = TrainParams {
        epochs: config.training.epochs,
        batch_size: config.training.batch_size,
        learning_rate: config.training.learning_rate,
        accuracy_threshold: config.training.accuracy_threshold,
        early_stop_accuracy: config.training.early_stop_accuracy,
        ..TrainParams::default()
    };
    let (model, report) = train_model(&model_config, &data, &heldout, &params, &mut rng)
        .map_err(|e| StageError::new("model", e.to_string()))?;
    save_model(&mut ctx, &model, "model")?;
    let report_bytes = ctx.serialize_json(&report)?;
    ctx.produce("model/train_report.json", &report_bytes)?;
    ctx.finish()
}

/// Builds the task document. The induction flavor samples its sequences with
/// the trained model through the acceptance loop.
pub fn stage_task_gen(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "task", config)?;
    let task = match config.task.kind {
        TaskKind::Ioi => build_ioi_task(&config.task.feature_pool)
            .map_err(|e| StageError::new("task", e.to_string()))?,
        TaskKind::Induction => {
            let model = load_model(&mut ctx, "model", "model")?;
            let provisional = provisional_task(config)?;
            let tokenizer = provisional.tokenizer();
            if model.config().vocab_size != tokenizer.vocab_size() {
                return Err(StageError::with_artifact(
                    "task",
                    "model vocabulary does not match the configured pools",
                    "model/model.json",
                ));
            }
            let pool: Vec<TokenId> = config
                .task
                .seq_pool
                .iter()
                .map(|w| tokenizer.id(w))
                .collect::<Result<_, _>>()
                .map_err(|e| StageError::new("task", e.to_string()))?;
            let sampler = InductionSamplerConfig {
                prefix_len: config.task.prefix_len,
                probe_count: config.task.probe_count,
                threshold: config.task.tau,
                max_iterations: config.task.max_iterations,
            };
            let mut rng = stage_rng(config, SALT_TASK);
            let mut seqs: Vec<Vec<String>> = Vec::new();
            for _ in 0..config.task.train_seq_count + 1 {
                let seq = sample_induction_sequence(&model, &pool, &sampler, &mut rng)
                    .map_err(|e| StageError::new("task", e.to_string()))?;
                seqs.push(
                    seq.iter()
                        .map(|&t| tokenizer.word(t).expect("pool token").to_string())
                        .collect(),
                );
            }
            let test_seq = seqs.pop().expect("one test sequence");
            build_induction_task(&seqs, &test_seq, &config.task.feature_pool, &config.task.seq_pool)
                .map_err(|e| StageError::new("task", e.to_string()))?
        }
    };
    save_task(&mut ctx, &task, "task/task.json")?;
    ctx.finish()
}

/// Trains the residual-stream autoencoder on task activations mixed with
/// random-token sequences.
pub fn stage_sae_train(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "sae", config)?;
    let model = load_model(&mut ctx, "model", "model")?;
    let task = load_task(&mut ctx, "task/task.json", "task")?;
    let tokenizer = task.tokenizer();
    let mut rng = stage_rng(config, SALT_SAE);
    let total = config.sae.sequence_count;
    let random_count =
        ((total as f64) * config.sae.random_mix_fraction).round().clamp(0.0, total as f64) as usize;
    let prompt_count = total - random_count;
    let mut sequences: Vec<Vec<TokenId>> = Vec::with_capacity(total);
    for prompt in sample_prompts(&task, &tokenizer, Split::Train, prompt_count, &mut rng, "sae")? {
        sequences.push(prompt.tokens);
    }
    let len = task.prompt_len();
    for _ in 0..random_count {
        sequences.push((0..len).map(|_| uniform_usize(&mut rng, tokenizer.vocab_size())).collect());
    }
    let positions: Vec<usize> = (0..len).collect();
    let activations = collect_residual_activations(&model, &sequences, config.sae.layer, &positions)
        .map_err(|e| StageError::new("sae", e.to_string()))?;
    let params = SaeTrainParams {
        latent_dim: config.sae.latent_dim,
        alpha: config.sae.alpha,
        epochs: config.sae.epochs,
        batch_size: config.sae.batch_size,
        learning_rate: config.sae.learning_rate,
        ..SaeTrainParams::default()
    };
    let (sae, report) = train_sae(&activations, &params, &mut rng)
        .map_err(|e| StageError::new("sae", e.to_string()))?;
    save_sae(&mut ctx, &sae, &report, config.sae.layer, "sae")?;
    ctx.finish()
}

/// Attribution over counterfactual pairs per attribute, group formation, and
/// the mean-ablation validation filter.
pub fn stage_discover(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "discover", config)?;
    let model = load_model(&mut ctx, "model", "model")?;
    let task = load_task(&mut ctx, "task/task.json", "task")?;
    let tokenizer = task.tokenizer();

    let mut means_rng = stage_rng(config, SALT_MEANS);
    let mean_prompts = sample_prompts(
        &task,
        &tokenizer,
        Split::Train,
        config.attribution.means_prompt_count,
        &mut means_rng,
        "discover",
    )?;
    let token_lists: Vec<Vec<TokenId>> = mean_prompts.into_iter().map(|p| p.tokens).collect();
    let means = mean_activations(&model, &token_lists)
        .map_err(|e| StageError::new("discover", e.to_string()))?;
    save_means(&mut ctx, &means, "discover")?;

    let edges = edge_inventory(
        &model,
        task.prompt_len(),
        task.last_attribute_position(),
        config.position_rule(),
        config.attribution.include_mlp,
    );
    let mut rng = stage_rng(config, SALT_DISCOVER);
    let mut groups: Vec<CrossSectionGroup> = Vec::new();
    for attribute in task.schema.attributes.iter().map(|a| a.name.clone()) {
        let mut pairs: Vec<CounterfactualPair> = Vec::with_capacity(config.attribution.pair_count);
        for _ in 0..config.attribution.pair_count {
            let prompt = sample_prompt(&task, &tokenizer, Split::Train, &mut rng)
                .map_err(|e| StageError::new("discover", e.to_string()))?;
            pairs.push(
                sample_counterfactual(&task, &tokenizer, &prompt, &attribute, &mut rng)
                    .map_err(|e| StageError::new("discover", e.to_string()))?,
            );
        }
        let table = average_attributions(&model, &pairs, config.estimator(), &edges)
            .map_err(|e| StageError::new("discover", e.to_string()))?;
        let bytes = ctx.serialize_json(&score_table_to_file(&table))?;
        ctx.produce(&format!("discover/scores-{attribute}.json"), &bytes)?;
        groups.extend(form_groups(&table, config.attribution.top_n));
    }
    if groups.is_empty() {
        eprintln!("warning: all attribution scores are zero; no cross-section groups formed");
    }
    let mut filter_rng = stage_rng(config, SALT_FILTER);
    let filter_prompts = sample_prompts(
        &task,
        &tokenizer,
        Split::Train,
        config.attribution.filter_prompt_count,
        &mut filter_rng,
        "discover",
    )?;
    let outcomes = filter_groups(&model, &groups, &filter_prompts, &means, config.attribution.drop_ratio)
        .map_err(|e| StageError::new("discover", e.to_string()))?;
    let bytes = ctx.serialize_json(&GroupsFile { outcomes })?;
    ctx.produce("discover/groups.json", &bytes)?;
    ctx.finish()
}

fn retained_groups(file: &GroupsFile) -> Vec<CrossSectionGroup> {
    file.outcomes
        .iter()
        .filter(|o| o.retained)
        .map(|o| o.group.clone())
        .collect()
}

fn load_groups(ctx: &mut StageContext, stage: &str) -> Result<GroupsFile, StageError> {
    let path = ctx.consume("discover/groups.json", "discover")?;
    read_json(ctx, &path, "discover/groups.json").map_err(|mut e| {
        e.stage = stage.to_string();
        e
    })
}

/// Fits supervised dictionaries at every upstream node of the retained
/// groups, over fresh task prompts.
pub fn stage_fit_dict(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "dict", config)?;
    let model = load_model(&mut ctx, "model", "model")?;
    let task = load_task(&mut ctx, "task/task.json", "task")?;
    let tokenizer = task.tokenizer();
    let groups_file = load_groups(&mut ctx, "dict")?;
    let groups = retained_groups(&groups_file);
    if groups.is_empty() {
        return Err(StageError::with_artifact(
            "dict",
            "no retained cross-section groups to fit dictionaries for",
            "discover/groups.json",
        ));
    }
    let mut nodes: Vec<NodeId> = groups.iter().flat_map(|g| g.upstream_nodes()).collect();
    nodes.sort();
    nodes.dedup();

    let mut rng = stage_rng(config, SALT_DICT);
    let prompts = sample_prompts(
        &task,
        &tokenizer,
        Split::Train,
        config.dictionary.prompt_count,
        &mut rng,
        "dict",
    )?;
    let mut activations: BTreeMap<NodeId, Vec<Vector>> =
        nodes.iter().map(|n| (*n, Vec::with_capacity(prompts.len()))).collect();
    let mut assignments = Vec::with_capacity(prompts.len());
    for prompt in &prompts {
        let run = model
            .forward(&prompt.tokens)
            .map_err(|e| StageError::new("dict", e.to_string()))?;
        for node in &nodes {
            let value = run.cache().get(node).ok_or_else(|| {
                StageError::new("dict", format!("node {node} missing from forward cache"))
            })?;
            activations.get_mut(node).expect("prepared").push(value.clone());
        }
        assignments.push(prompt.assignment.clone());
    }
    let mut dicts = BTreeMap::new();
    for node in &nodes {
        let rows = Matrix::from_rows(&activations[node]);
        let dict = fit_supervised(&rows, &assignments, &task.schema, *node)
            .map_err(|e| StageError::new("dict", e.to_string()))?;
        dicts.insert(*node, dict);
    }
    save_dictionaries(&mut ctx, &dicts, &task.schema, "dict")?;
    ctx.finish()
}

struct EvalInputs {
    model: Model,
    task: TaskSpec,
    tokenizer: Tokenizer,
    sae: SparseAutoencoder,
    sae_layer: usize,
    groups: Vec<CrossSectionGroup>,
    dicts: BTreeMap<NodeId, saeval_core::dictionary::SupervisedFeatureDictionary>,
    means: MeanActivations,
}

fn load_eval_inputs(ctx: &mut StageContext, stage: &str) -> Result<EvalInputs, StageError> {
    let model = load_model(ctx, "model", "model")?;
    let task = load_task(ctx, "task/task.json", "task")?;
    let tokenizer = task.tokenizer();
    let (sae, sae_layer) = load_sae(ctx, "sae", "sae")?;
    let groups_file = load_groups(ctx, stage)?;
    let groups = retained_groups(&groups_file);
    let dicts = load_dictionaries(ctx, &task.schema, "dict", "dict")?;
    let means = load_means(ctx, "discover", "discover")?;
    Ok(EvalInputs {
        model,
        task,
        tokenizer,
        sae,
        sae_layer,
        groups,
        dicts,
        means,
    })
}

/// Sufficiency and necessity for every retained group under the supervised
/// dictionary, the residual autoencoder, and the identity/mean baselines.
pub fn stage_eval_test1(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "test1", config)?;
    let inputs = load_eval_inputs(&mut ctx, "test1")?;
    let mut rng = stage_rng(config, SALT_TEST1);
    let prompts = sample_prompts(
        &inputs.task,
        &inputs.tokenizer,
        Split::Test,
        config.evaluation.prompt_count,
        &mut rng,
        "test1",
    )?;
    let methods: Vec<Method<'_>> = vec![
        Method::Supervised {
            dicts: &inputs.dicts,
            weighted: config.dictionary.weighted_reconstruction,
        },
        Method::Sae {
            sae: &inputs.sae,
            layer: inputs.sae_layer,
        },
        Method::Identity,
        Method::Mean,
    ];
    let mut scores: Vec<Test1Score> = Vec::new();
    for group in &inputs.groups {
        for method in &methods {
            scores.push(
                test1_sufficiency(&inputs.model, group, method, &prompts, &inputs.means)
                    .map_err(|e| StageError::new("test1", e.to_string()))?,
            );
            scores.push(
                test1_necessity(&inputs.model, group, method, &prompts, &inputs.means)
                    .map_err(|e| StageError::new("test1", e.to_string()))?,
            );
        }
    }
    let bytes = ctx.serialize_json(&scores)?;
    ctx.produce("test1/test1.json", &bytes)?;
    ctx.finish()
}

/// Sparse controllability: edits per budget against the ground-truth patch.
pub fn stage_eval_test2(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "test2", config)?;
    let inputs = load_eval_inputs(&mut ctx, "test2")?;
    let mut rng = stage_rng(config, SALT_TEST2);
    let mut outcomes: Vec<EditOutcome> = Vec::new();
    for group in &inputs.groups {
        let mut pairs: Vec<CounterfactualPair> = Vec::with_capacity(config.evaluation.pair_count);
        for _ in 0..config.evaluation.pair_count {
            let prompt = sample_prompt(&inputs.task, &inputs.tokenizer, Split::Test, &mut rng)
                .map_err(|e| StageError::new("test2", e.to_string()))?;
            pairs.push(
                sample_counterfactual(&inputs.task, &inputs.tokenizer, &prompt, &group.attribute, &mut rng)
                    .map_err(|e| StageError::new("test2", e.to_string()))?,
            );
        }
        let methods: Vec<Method<'_>> = vec![
            Method::Supervised {
                dicts: &inputs.dicts,
                weighted: false,
            },
            Method::Sae {
                sae: &inputs.sae,
                layer: inputs.sae_layer,
            },
            Method::GroundTruth,
        ];
        for method in &methods {
            outcomes.extend(
                test2_run(
                    &inputs.model,
                    group,
                    method,
                    &pairs,
                    &config.evaluation.budgets,
                    config.edit_mode(),
                    &inputs.means,
                )
                .map_err(|e| StageError::new("test2", e.to_string()))?,
            );
        }
    }
    let bytes = ctx.serialize_json(&outcomes)?;
    ctx.produce("test2/test2.json", &bytes)?;
    ctx.finish()
}

/// Aggregates both tests into the flat CSV and a JSON summary.
pub fn stage_report(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    let mut ctx = begin_stage(run_dir, "report", config)?;
    let groups_file = load_groups(&mut ctx, "report")?;
    let test1_path = ctx.consume("test1/test1.json", "test1")?;
    let scores: Vec<Test1Score> = read_json(&ctx, &test1_path, "test1/test1.json")?;
    let test2_path = ctx.consume("test2/test2.json", "test2")?;
    let outcomes: Vec<EditOutcome> = read_json(&ctx, &test2_path, "test2/test2.json")?;
    write_report(&mut ctx, &groups_file, &scores, &outcomes)?;
    ctx.finish()
}

/// The stage order for one full run of the configured task.
pub fn pipeline_order(kind: &TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::Induction => &["model", "task", "sae", "discover", "fit-dict", "test1", "test2", "report"],
        TaskKind::Ioi => &["task", "model", "sae", "discover", "fit-dict", "test1", "test2", "report"],
    }
}

pub fn run_stage(run_dir: &Path, config: &RunConfig, stage: &str) -> Result<(), StageError> {
    match stage {
        "model" => stage_model_train(run_dir, config),
        "task" => stage_task_gen(run_dir, config),
        "sae" => stage_sae_train(run_dir, config),
        "discover" => stage_discover(run_dir, config),
        "fit-dict" => stage_fit_dict(run_dir, config),
        "test1" => stage_eval_test1(run_dir, config),
        "test2" => stage_eval_test2(run_dir, config),
        "report" => stage_report(run_dir, config),
        other => Err(StageError::new(other, "unknown stage")),
    }
}

/// Runs every stage in order; the entry point the acceptance suite drives.
pub fn run_full_pipeline(run_dir: &Path, config: &RunConfig) -> Result<(), StageError> {
    for stage in pipeline_order(&config.task.kind) {
        run_stage(run_dir, config, stage)?;
    }
    Ok(())
}

/// Convenience levers used by the filter outcome inspection.
pub fn load_filter_outcomes(run_dir: &Path, config: &RunConfig) -> Result<Vec<FilterOutcome>, StageError> {
    let mut ctx = begin_stage(run_dir, "inspect", config)?;
    Ok(load_groups(&mut ctx, "inspect")?.outcomes)
}

/// Everything a finished run produced, reloaded with hash verification.
pub struct RunArtifacts {
    pub model: Model,
    pub task: TaskSpec,
    pub tokenizer: Tokenizer,
    pub sae: SparseAutoencoder,
    pub sae_layer: usize,
    pub outcomes: Vec<FilterOutcome>,
    pub dicts: BTreeMap<NodeId, saeval_core::dictionary::SupervisedFeatureDictionary>,
    pub means: MeanActivations,
    pub test1: Vec<Test1Score>,
    pub test2: Vec<EditOutcome>,
}

pub fn open_artifacts(run_dir: &Path, config: &RunConfig) -> Result<RunArtifacts, StageError> {
    let mut ctx = begin_stage(run_dir, "inspect", config)?;
    let inputs = load_eval_inputs(&mut ctx, "inspect")?;
    let outcomes = load_groups(&mut ctx, "inspect")?.outcomes;
    let test1_path = ctx.consume("test1/test1.json", "test1")?;
    let test1: Vec<Test1Score> = read_json(&ctx, &test1_path, "test1/test1.json")?;
    let test2_path = ctx.consume("test2/test2.json", "test2")?;
    let test2: Vec<EditOutcome> = read_json(&ctx, &test2_path, "test2/test2.json")?;
    Ok(RunArtifacts {
        model: inputs.model,
        task: inputs.task,
        tokenizer: inputs.tokenizer,
        sae: inputs.sae,
        sae_layer: inputs.sae_layer,
        outcomes,
        dicts: inputs.dicts,
        means: inputs.means,
        test1,
        test2,
    })
}
