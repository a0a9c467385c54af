//! Serialized artifact formats: model weights, autoencoders, task documents,
//! score tables, groups, dictionaries and mean activations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use saeval_core::attribution::{EdgeScoreTable, FilterOutcome};
use saeval_core::dictionary::SupervisedFeatureDictionary;
use saeval_core::linalg::{Matrix, Vector};
use saeval_core::model::{EdgeId, Model, ModelConfig, NamedTensor, NodeId, NodeKind};
use saeval_core::sae::{SaeReport, SparseAutoencoder};
use saeval_core::task::{Attribute, AttributeSchema, TaskSpec, Template};
use saeval_core::train::MeanActivations;

use crate::error::StageError;
use crate::manifest::{sha256_hex, StageContext};
use crate::tensor::{read_tensor, write_tensor};

fn artifact_err(ctx: &StageContext, rel: &str, message: impl Into<String>) -> StageError {
    StageError::with_artifact(ctx.stage(), message, rel)
}

// ---------------------------------------------------------------------------
// Model weights
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_model(ctx: &mut StageContext, model: &Model, dir: &str) -> Result<(), StageError> {
    let mut entries = Vec::new();
    for tensor in model.export_weights() {
        let file = format!("{dir}/weights/{}.sgt", tensor.name.replace('.', "_"));
        write_tensor(&ctx.path(&file), &tensor.dims, &tensor.data)
            .map_err(|e| artifact_err(ctx, &file, e.to_string()))?;
        ctx.record_output(&file)?;
        entries.push(TensorEntry {
            name: tensor.name,
            file,
            dims: tensor.dims,
        });
    }
    let model_file = ModelFile {
        config: *model.config(),
        tensors: entries,
    };
    let rel = format!("{dir}/model.json");
    let bytes = ctx.serialize_json(&model_file)?;
    ctx.produce(&rel, &bytes)
}

pub fn load_model(ctx: &mut StageContext, dir: &str, producer: &str) -> Result<Model, StageError> {
    let rel = format!("{dir}/model.json");
    let path = ctx.consume(&rel, producer)?;
    let model_file: ModelFile = read_json(ctx, &path, &rel)?;
    let mut tensors = Vec::with_capacity(model_file.tensors.len());
    for entry in &model_file.tensors {
        let tensor_path = ctx.consume(&entry.file, producer)?;
        let (dims, data) = read_tensor(&tensor_path)
            .map_err(|e| artifact_err(ctx, &entry.file, e.to_string()))?;
        if dims != entry.dims {
            return Err(artifact_err(ctx, &entry.file, "tensor dims disagree with model.json"));
        }
        tensors.push(NamedTensor {
            name: entry.name.clone(),
            dims,
            data,
        });
    }
    Model::from_weights(model_file.config, &tensors)
        .map_err(|e| artifact_err(ctx, &rel, e.to_string()))
}

// ---------------------------------------------------------------------------
// Task document: templates in `{slot}` text syntax
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateFile {
    pub name: String,
    pub variants: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFile {
    pub attributes: Vec<Attribute>,
    pub order_attribute: String,
    pub target_attribute: String,
    pub contrast_attribute: String,
    pub distinct_pairs: Vec<(String, String)>,
    pub train_templates: Vec<TemplateFile>,
    pub test_templates: Vec<TemplateFile>,
    pub extra_vocab: Vec<String>,
}

fn template_to_file(t: &Template) -> TemplateFile {
    TemplateFile {
        name: t.name.clone(),
        variants: t
            .variants
            .keys()
            .map(|v| (v.clone(), t.to_text(v).expect("known variant")))
            .collect(),
    }
}

fn template_from_file(t: &TemplateFile) -> Template {
    let variants: Vec<(&str, &str)> = t
        .variants
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    Template::from_text(&t.name, &variants)
}

pub fn task_to_file(task: &TaskSpec) -> TaskFile {
    TaskFile {
        attributes: task.schema.attributes.clone(),
        order_attribute: task.order_attribute.clone(),
        target_attribute: task.target_attribute.clone(),
        contrast_attribute: task.contrast_attribute.clone(),
        distinct_pairs: task.distinct_pairs.clone(),
        train_templates: task.train_templates.iter().map(template_to_file).collect(),
        test_templates: task.test_templates.iter().map(template_to_file).collect(),
        extra_vocab: task.extra_vocab.clone(),
    }
}

pub fn task_from_file(file: TaskFile) -> TaskSpec {
    TaskSpec {
        schema: AttributeSchema {
            attributes: file.attributes,
        },
        order_attribute: file.order_attribute,
        target_attribute: file.target_attribute,
        contrast_attribute: file.contrast_attribute,
        distinct_pairs: file.distinct_pairs,
        train_templates: file.train_templates.iter().map(template_from_file).collect(),
        test_templates: file.test_templates.iter().map(template_from_file).collect(),
        extra_vocab: file.extra_vocab,
    }
}

pub fn save_task(ctx: &mut StageContext, task: &TaskSpec, rel: &str) -> Result<(), StageError> {
    let bytes = ctx.serialize_json(&task_to_file(task))?;
    ctx.produce(rel, &bytes)
}

pub fn load_task(ctx: &mut StageContext, rel: &str, producer: &str) -> Result<TaskSpec, StageError> {
    let path = ctx.consume(rel, producer)?;
    let file: TaskFile = read_json(ctx, &path, rel)?;
    let task = task_from_file(file);
    let tokenizer = task.tokenizer();
    task.validate(&tokenizer)
        .map_err(|e| artifact_err(ctx, rel, e.to_string()))?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Sparse autoencoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaeFile {
    pub layer: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub tensors: Vec<TensorEntry>,
    pub report: SaeReport,
}

pub fn save_sae(
    ctx: &mut StageContext,
    sae: &SparseAutoencoder,
    report: &SaeReport,
    layer: usize,
    dir: &str,
) -> Result<(), StageError> {
    let (d, m) = (sae.input_dim(), sae.latent_dim());
    let tensors: Vec<(&str, Vec<usize>, Vec<f64>)> = vec![
        ("w_e", vec![m, d], sae.w_e.data().to_vec()),
        ("b_e", vec![m], sae.b_e.0.clone()),
        ("w_d", vec![d, m], sae.w_d.data().to_vec()),
        ("b_d", vec![d], sae.b_d.0.clone()),
    ];
    let mut entries = Vec::new();
    for (name, dims, data) in tensors {
        let file = format!("{dir}/tensors/{name}.sgt");
        write_tensor(&ctx.path(&file), &dims, &data)
            .map_err(|e| artifact_err(ctx, &file, e.to_string()))?;
        ctx.record_output(&file)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            file,
            dims,
        });
    }
    let sae_file = SaeFile {
        layer,
        input_dim: d,
        latent_dim: m,
        tensors: entries,
        report: report.clone(),
    };
    let rel = format!("{dir}/sae.json");
    let bytes = ctx.serialize_json(&sae_file)?;
    ctx.produce(&rel, &bytes)
}

pub fn load_sae(
    ctx: &mut StageContext,
    dir: &str,
    producer: &str,
) -> Result<(SparseAutoencoder, usize), StageError> {
    let rel = format!("{dir}/sae.json");
    let path = ctx.consume(&rel, producer)?;
    let file: SaeFile = read_json(ctx, &path, &rel)?;
    let mut loaded: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for entry in &file.tensors {
        let tensor_path = ctx.consume(&entry.file, producer)?;
        let tensor = read_tensor(&tensor_path)
            .map_err(|e| artifact_err(ctx, &entry.file, e.to_string()))?;
        loaded.insert(entry.name.clone(), tensor);
    }
    let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>), StageError> {
        loaded
            .get(name)
            .cloned()
            .ok_or_else(|| artifact_err(ctx, &rel, format!("missing tensor {name:?}")))
    };
    let (we_dims, we) = get("w_e")?;
    let (_, be) = get("b_e")?;
    let (wd_dims, wd) = get("w_d")?;
    let (_, bd) = get("b_d")?;
    let sae = SparseAutoencoder {
        w_e: matrix_from(we_dims, we, ctx, &rel)?,
        b_e: Vector(be),
        w_d: matrix_from(wd_dims, wd, ctx, &rel)?,
        b_d: Vector(bd),
    };
    Ok((sae, file.layer))
}

fn matrix_from(
    dims: Vec<usize>,
    data: Vec<f64>,
    ctx: &StageContext,
    rel: &str,
) -> Result<Matrix, StageError> {
    if dims.len() != 2 {
        return Err(artifact_err(ctx, rel, "expected a rank-2 tensor"));
    }
    let mut m = Matrix::zeros(dims[0], dims[1]);
    m.data_mut().copy_from_slice(&data);
    Ok(m)
}

// ---------------------------------------------------------------------------
// Edge score tables: scores stored as decimal strings to avoid drift
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub edge: EdgeId,
    pub mean: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreTableFile {
    pub attribute: String,
    pub metric: String,
    pub pair_count: usize,
    pub entries: Vec<ScoreEntry>,
}

pub fn score_table_to_file(table: &EdgeScoreTable) -> ScoreTableFile {
    ScoreTableFile {
        attribute: table.attribute.clone(),
        metric: table.metric.clone(),
        pair_count: table.pair_count,
        entries: table
            .scores
            .iter()
            .map(|(edge, score)| ScoreEntry {
                edge: *edge,
                mean: format!("{score}"),
            })
            .collect(),
    }
}

pub fn score_table_from_file(
    file: ScoreTableFile,
    ctx: &StageContext,
    rel: &str,
) -> Result<EdgeScoreTable, StageError> {
    let mut scores = BTreeMap::new();
    for entry in file.entries {
        let value: f64 = entry
            .mean
            .parse()
            .map_err(|e| artifact_err(ctx, rel, format!("bad decimal score: {e}")))?;
        scores.insert(entry.edge, value);
    }
    Ok(EdgeScoreTable {
        attribute: file.attribute,
        metric: file.metric,
        pair_count: file.pair_count,
        scores,
    })
}

// ---------------------------------------------------------------------------
// Groups with their filter outcomes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupsFile {
    pub outcomes: Vec<FilterOutcome>,
}

// ---------------------------------------------------------------------------
// Mean activations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeansFile {
    pub nodes: Vec<NodeId>,
    pub tensor: String,
}

pub fn save_means(
    ctx: &mut StageContext,
    means: &MeanActivations,
    dir: &str,
) -> Result<(), StageError> {
    // Logit-node means are vocabulary-sized and unused downstream; keep the
    // sublayer and residual nodes only so the matrix is rectangular.
    let nodes: Vec<NodeId> = means
        .keys()
        .filter(|n| !matches!(n.kind, NodeKind::Logits))
        .cloned()
        .collect();
    let d = means[&nodes[0]].dim();
    let mut data = Vec::with_capacity(nodes.len() * d);
    for node in &nodes {
        data.extend_from_slice(means[node].as_slice());
    }
    let tensor_rel = format!("{dir}/means.sgt");
    write_tensor(&ctx.path(&tensor_rel), &[nodes.len(), d], &data)
        .map_err(|e| artifact_err(ctx, &tensor_rel, e.to_string()))?;
    ctx.record_output(&tensor_rel)?;
    let file = MeansFile {
        nodes,
        tensor: tensor_rel,
    };
    let rel = format!("{dir}/means.json");
    let bytes = ctx.serialize_json(&file)?;
    ctx.produce(&rel, &bytes)
}

pub fn load_means(
    ctx: &mut StageContext,
    dir: &str,
    producer: &str,
) -> Result<MeanActivations, StageError> {
    let rel = format!("{dir}/means.json");
    let path = ctx.consume(&rel, producer)?;
    let file: MeansFile = read_json(ctx, &path, &rel)?;
    let tensor_path = ctx.consume(&file.tensor, producer)?;
    let (dims, data) = read_tensor(&tensor_path)
        .map_err(|e| artifact_err(ctx, &file.tensor, e.to_string()))?;
    if dims.len() != 2 || dims[0] != file.nodes.len() {
        return Err(artifact_err(ctx, &file.tensor, "means tensor shape mismatch"));
    }
    let d = dims[1];
    let mut means = MeanActivations::new();
    for (i, node) in file.nodes.iter().enumerate() {
        means.insert(*node, Vector(data[i * d..(i + 1) * d].to_vec()));
    }
    Ok(means)
}

// ---------------------------------------------------------------------------
// Supervised dictionaries
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub node: NodeId,
    pub residual_mse: f64,
    pub attribute_order: Vec<String>,
    pub keys: Vec<(String, String)>,
    pub mean_tensor: String,
    pub features_tensor: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DictionariesFile {
    pub schema_sha256: String,
    pub entries: Vec<DictionaryEntry>,
}

pub fn schema_hash(schema: &AttributeSchema) -> String {
    sha256_hex(&serde_json::to_vec(schema).expect("schema serializes"))
}

pub fn save_dictionaries(
    ctx: &mut StageContext,
    dicts: &BTreeMap<NodeId, SupervisedFeatureDictionary>,
    schema: &AttributeSchema,
    dir: &str,
) -> Result<(), StageError> {
    let mut entries = Vec::new();
    for (idx, (node, dict)) in dicts.iter().enumerate() {
        let mean_rel = format!("{dir}/tensors/n{idx}_mean.sgt");
        write_tensor(&ctx.path(&mean_rel), &[dict.mean.dim()], dict.mean.as_slice())
            .map_err(|e| artifact_err(ctx, &mean_rel, e.to_string()))?;
        ctx.record_output(&mean_rel)?;
        let keys: Vec<(String, String)> = dict.features.keys().cloned().collect();
        let d = dict.mean.dim();
        let mut data = Vec::with_capacity(keys.len() * d);
        for key in &keys {
            data.extend_from_slice(dict.features[key].as_slice());
        }
        let features_rel = format!("{dir}/tensors/n{idx}_features.sgt");
        write_tensor(&ctx.path(&features_rel), &[keys.len(), d], &data)
            .map_err(|e| artifact_err(ctx, &features_rel, e.to_string()))?;
        ctx.record_output(&features_rel)?;
        entries.push(DictionaryEntry {
            node: *node,
            residual_mse: dict.residual_mse,
            attribute_order: dict.attribute_order.clone(),
            keys,
            mean_tensor: mean_rel,
            features_tensor: features_rel,
        });
    }
    let file = DictionariesFile {
        schema_sha256: schema_hash(schema),
        entries,
    };
    let rel = format!("{dir}/dict.json");
    let bytes = ctx.serialize_json(&file)?;
    ctx.produce(&rel, &bytes)
}

pub fn load_dictionaries(
    ctx: &mut StageContext,
    schema: &AttributeSchema,
    dir: &str,
    producer: &str,
) -> Result<BTreeMap<NodeId, SupervisedFeatureDictionary>, StageError> {
    let rel = format!("{dir}/dict.json");
    let path = ctx.consume(&rel, producer)?;
    let file: DictionariesFile = read_json(ctx, &path, &rel)?;
    if file.schema_sha256 != schema_hash(schema) {
        return Err(artifact_err(ctx, &rel, "dictionaries were fitted under a different schema"));
    }
    let mut dicts = BTreeMap::new();
    for entry in file.entries {
        let mean_path = ctx.consume(&entry.mean_tensor, producer)?;
        let (_, mean) = read_tensor(&mean_path)
            .map_err(|e| artifact_err(ctx, &entry.mean_tensor, e.to_string()))?;
        let features_path = ctx.consume(&entry.features_tensor, producer)?;
        let (dims, data) = read_tensor(&features_path)
            .map_err(|e| artifact_err(ctx, &entry.features_tensor, e.to_string()))?;
        if dims.len() != 2 || dims[0] != entry.keys.len() {
            return Err(artifact_err(ctx, &entry.features_tensor, "feature tensor shape mismatch"));
        }
        let d = dims[1];
        let features = entry
            .keys
            .iter()
            .enumerate()
            .map(|(i, key)| (key.clone(), Vector(data[i * d..(i + 1) * d].to_vec())))
            .collect();
        dicts.insert(
            entry.node,
            SupervisedFeatureDictionary {
                node: entry.node,
                mean: Vector(mean),
                attribute_order: entry.attribute_order,
                features,
                residual_mse: entry.residual_mse,
            },
        );
    }
    Ok(dicts)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(
    ctx: &StageContext,
    path: &Path,
    rel: &str,
) -> Result<T, StageError> {
    let bytes = std::fs::read(path).map_err(|e| artifact_err(ctx, rel, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| artifact_err(ctx, rel, e.to_string()))
}
