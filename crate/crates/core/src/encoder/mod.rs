//! Hierarchical long-document classifier.
//!
//! Documents are cut into up to `max_blocks` blocks of `block_len` tokens.
//! Each real block is wrapped `CLS … SEP`; missing blocks are pure `PAD` and
//! carry `block_mask = 0`. A shared block encoder produces one CLS vector per
//! real block, a small transformer mixes the CLS vectors (attending only to
//! real blocks), the result is max-pooled over real blocks and fed to a
//! linear head.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fnv1a, stream_rng};
use graph::{log_softmax, Graph, NodeId};
use layers::{normal_mat, Adapter, Dropout, TransformerLayer, INIT_STD};
use params::{ParamGroup, ParamId, ParamStore};
use tensor::Mat;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("adapters are already configured")]
    AdaptersPresent,
    #[error("non-finite logits {0:?}")]
    NonFinite(Vec<f64>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EncoderError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EncoderError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

pub trait Tokenizer {
    fn pad_id(&self) -> u32;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    /// Content token ids, without special tokens.
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// Whitespace split, each word hashed into `[3, vocab_size)`.
#[derive(Debug, Clone, Copy)]
pub struct HashingTokenizer {
    pub vocab_size: u32,
}

impl HashingTokenizer {
    pub fn new(vocab_size: u32) -> Self {
        assert!(vocab_size > 3, "vocabulary must leave room for special ids");
        HashingTokenizer { vocab_size }
    }
}

impl Tokenizer for HashingTokenizer {
    fn pad_id(&self) -> u32 {
        PAD_ID
    }
    fn cls_id(&self) -> u32 {
        CLS_ID
    }
    fn sep_id(&self) -> u32 {
        SEP_ID
    }
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| 3 + (fnv1a(w.as_bytes()) % (self.vocab_size as u64 - 3)) as u32)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockingConfig {
    pub block_len: usize,
    pub max_blocks: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        BlockingConfig {
            block_len: 512,
            max_blocks: 4,
        }
    }
}

impl BlockingConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.block_len < 3 {
            return Err(EncoderError::Config("block_len must be at least 3".into()));
        }
        if self.max_blocks < 1 {
            return Err(EncoderError::Config("max_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

/// One tokenized document as a fixed `max_blocks × block_len` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRow {
    pub token_ids: Vec<u32>,
    pub token_mask: Vec<u8>,
    pub block_mask: Vec<u8>,
    pub block_len: usize,
}

impl BlockRow {
    pub fn blocks(&self) -> usize {
        self.block_mask.len()
    }

    pub fn block_tokens(&self, j: usize) -> &[u32] {
        &self.token_ids[j * self.block_len..(j + 1) * self.block_len]
    }

    pub fn block_token_mask(&self, j: usize) -> &[u8] {
        &self.token_mask[j * self.block_len..(j + 1) * self.block_len]
    }
}

/// A batch of [`BlockRow`]s, stored as flat `[batch, blocks, block_len]`
/// grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockBatch {
    pub rows: Vec<BlockRow>,
}

impl BlockBatch {
    pub fn from_rows(rows: Vec<BlockRow>) -> Self {
        BlockBatch { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r.token_ids.iter().copied()).collect()
    }

    pub fn block_mask(&self) -> Vec<u8> {
        self.rows.iter().flat_map(|r| r.block_mask.iter().copied()).collect()
    }
}

/// Cuts a document into `CLS … SEP` blocks, truncating past
/// `max_blocks · (block_len − 2)` content tokens and padding with all-PAD
/// blocks. An empty text still yields one real block (`CLS SEP`).
pub fn tokenize_blocks(text: &str, tokenizer: &dyn Tokenizer, config: &BlockingConfig) -> BlockRow {
    let (len, blocks) = (config.block_len, config.max_blocks);
    let per_block = len - 2;
    let mut content = tokenizer.encode(text);
    content.truncate(per_block * blocks);
    let real = content.len().div_ceil(per_block).clamp(1, blocks);
    let mut token_ids = vec![tokenizer.pad_id(); blocks * len];
    let mut token_mask = vec![0u8; blocks * len];
    let mut block_mask = vec![0u8; blocks];
    for j in 0..real {
        let chunk = &content[(j * per_block).min(content.len())..((j + 1) * per_block).min(content.len())];
        let base = j * len;
        token_ids[base] = tokenizer.cls_id();
        token_ids[base + 1..base + 1 + chunk.len()].copy_from_slice(chunk);
        token_ids[base + 1 + chunk.len()] = tokenizer.sep_id();
        token_mask[base..base + chunk.len() + 2].fill(1);
        block_mask[j] = 1;
    }
    BlockRow {
        token_ids,
        token_mask,
        block_mask,
        block_len: len,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; 0 means `4 × hidden`.
    pub intermediate: usize,
    pub aggregator_layers: usize,
    pub aggregator_heads: usize,
    pub vocab_size: usize,
    pub adapter_enabled: bool,
    pub adapter_reduction: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub blocking: BlockingConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            intermediate: 0,
            aggregator_layers: 2,
            aggregator_heads: 2,
            vocab_size: 1000,
            adapter_enabled: false,
            adapter_reduction: 4,
            label_smoothing: 0.1,
            dropout: 0.1,
            blocking: BlockingConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn ffn_width(&self) -> usize {
        if self.intermediate == 0 {
            4 * self.hidden
        } else {
            self.intermediate
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        self.blocking.validate()?;
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.aggregator_heads == 0 || !self.hidden.is_multiple_of(self.aggregator_heads) {
            return bad(format!(
                "hidden {} not divisible by aggregator heads {}",
                self.hidden, self.aggregator_heads
            ));
        }
        if self.adapter_reduction == 0 || !self.hidden.is_multiple_of(self.adapter_reduction) {
            return bad(format!(
                "adapter reduction {} does not divide hidden {}",
                self.adapter_reduction, self.hidden
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= 3 {
            return bad("vocabulary too small".into());
        }
        if self.aggregator_layers == 0 || self.layers == 0 {
            return bad("layer counts must be positive".into());
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> HashingTokenizer {
        HashingTokenizer::new(self.vocab_size as u32)
    }
}

/// Encodes one block into its CLS vector. A pretrained backbone plugs in by
/// implementing this trait.
pub trait BlockEncoder: Send + Sync {
    fn hidden_size(&self) -> usize;

    /// `tokens` are the real (unmasked) tokens of one block and `positions`
    /// their offsets inside the block; returns the `1×H` CLS vector.
    fn encode_block(&self, g: &mut Graph, tokens: &[u32], positions: &[usize], dropout: &mut Dropout) -> NodeId;

    /// Transformer layers whose feed-forward outputs take adapters.
    fn layers_mut(&mut self) -> Vec<&mut TransformerLayer>;
}

/// Randomly initialized BERT-style encoder.
#[derive(Debug, Clone)]
pub struct DeskBlockEncoder {
    hidden: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<TransformerLayer>,
}

impl DeskBlockEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden;
        let tok_emb = store.add("encoder.embeddings.token", normal_mat(config.vocab_size, h, INIT_STD, rng), ParamGroup::Backbone);
        let pos_emb = store.add(
            "encoder.embeddings.position",
            normal_mat(config.blocking.block_len, h, INIT_STD, rng),
            ParamGroup::Backbone,
        );
        let emb_ln_g = store.add("encoder.embeddings.norm.weight", Mat::from_vec(1, h, vec![1.0; h]), ParamGroup::LayerNorm);
        let emb_ln_b = store.add("encoder.embeddings.norm.bias", Mat::zeros(1, h), ParamGroup::LayerNorm);
        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(store, &format!("encoder.layer{i}"), h, config.heads, config.ffn_width(), rng))
            .collect();
        DeskBlockEncoder {
            hidden: h,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
        }
    }
}

impl BlockEncoder for DeskBlockEncoder {
    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn encode_block(&self, g: &mut Graph, tokens: &[u32], positions: &[usize], dropout: &mut Dropout) -> NodeId {
        let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let tok = g.gather(self.tok_emb, &ids);
        let pos = g.gather(self.pos_emb, positions);
        let x = g.add(tok, pos);
        let x = g.layer_norm(x, self.emb_ln_g, self.emb_ln_b);
        let mut x = dropout.apply(g, x);
        let keep = vec![true; tokens.len()];
        for layer in &self.layers {
            x = layer.forward(g, x, &keep, dropout);
        }
        g.row(x, 0)
    }

    fn layers_mut(&mut self) -> Vec<&mut TransformerLayer> {
        self.layers.iter_mut().collect()
    }
}

/// Named parameter sets with scalar counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSet {
    pub names: BTreeSet<String>,
    pub scalars: usize,
}

/// Disjoint cover of all model parameters. In adapter mode only `adapter`,
/// `layer_norm` and `head` are trained; `backbone` is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub adapter: NamedSet,
    pub layer_norm: NamedSet,
    pub head: NamedSet,
    pub backbone: NamedSet,
}

impl ParameterPartition {
    pub fn of(store: &ParamStore) -> Self {
        let mut out = ParameterPartition::default();
        for (_, p) in store.iter() {
            let set = match p.group {
                ParamGroup::Adapter => &mut out.adapter,
                ParamGroup::LayerNorm => &mut out.layer_norm,
                ParamGroup::Head => &mut out.head,
                ParamGroup::Backbone => &mut out.backbone,
            };
            set.names.insert(p.name.clone());
            set.scalars += p.value.len();
        }
        out
    }

    pub fn trainable_in_adapter_mode(&self) -> BTreeSet<String> {
        self.adapter
            .names
            .iter()
            .chain(&self.layer_norm.names)
            .chain(&self.head.names)
            .cloned()
            .collect()
    }
}

pub struct HierarchicalClassifier {
    pub config: EncoderConfig,
    pub store: ParamStore,
    seed: u64,
    encoder: Box<dyn BlockEncoder>,
    block_pos: ParamId,
    aggregator: Vec<TransformerLayer>,
    head_w: ParamId,
    head_b: ParamId,
    adapters: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: EncoderConfig,
    seed: u64,
    adapters: bool,
    tensors: BTreeMap<String, TensorInfo>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    group: ParamGroup,
    trainable: bool,
    shape: [usize; 2],
}

impl HierarchicalClassifier {
    /// Base model (no adapters, all parameters trainable), initialized from
    /// the `init` stream of `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = stream_rng(seed, "init");
        let mut store = ParamStore::default();
        let encoder = DeskBlockEncoder::new(&mut store, &config, &mut rng);
        let h = config.hidden;
        let block_pos = store.add(
            "aggregator.position",
            normal_mat(config.blocking.max_blocks, h, INIT_STD, &mut rng),
            ParamGroup::Backbone,
        );
        let aggregator = (0..config.aggregator_layers)
            .map(|i| {
                TransformerLayer::new(
                    &mut store,
                    &format!("aggregator.layer{i}"),
                    h,
                    config.aggregator_heads,
                    config.ffn_width(),
                    &mut rng,
                )
            })
            .collect();
        let head_w = store.add("head.weight", normal_mat(h, 2, INIT_STD, &mut rng), ParamGroup::Head);
        let head_b = store.add("head.bias", Mat::zeros(1, 2), ParamGroup::Head);
        let mut model = HierarchicalClassifier {
            config,
            store,
            seed,
            encoder: Box::new(encoder),
            block_pos,
            aggregator,
            head_w,
            head_b,
            adapters: false,
        };
        if model.config.adapter_enabled {
            model.configure_adapters(model.config.adapter_reduction)?;
        }
        Ok(model)
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters
    }

    /// Inserts a bottleneck adapter after every feed-forward sub-layer and
    /// freezes everything except adapters, layer norms and the head. The
    /// up-projections start at zero, so the forward pass is unchanged.
    pub fn configure_adapters(&mut self, reduction: usize) -> Result<ParameterPartition, EncoderError> {
        if self.adapters {
            return Err(EncoderError::AdaptersPresent);
        }
        let h = self.config.hidden;
        if reduction == 0 || !h.is_multiple_of(reduction) {
            return Err(EncoderError::Config(format!(
                "adapter reduction {reduction} does not divide hidden {h}"
            )));
        }
        let mut rng = stream_rng(self.seed, "adapters");
        for layer in self.encoder.layers_mut() {
            layer.add_adapter(&mut self.store, h, h / reduction, &mut rng);
        }
        for layer in &mut self.aggregator {
            layer.add_adapter(&mut self.store, h, h / reduction, &mut rng);
        }
        for p in self.store.iter_mut() {
            p.trainable = p.group != ParamGroup::Backbone;
        }
        self.adapters = true;
        self.config.adapter_enabled = true;
        self.config.adapter_reduction = reduction;
        Ok(self.partition())
    }

    pub fn partition(&self) -> ParameterPartition {
        ParameterPartition::of(&self.store)
    }

    /// Closed-form trainable scalar count in adapter mode.
    pub fn adapter_mode_trainable(config: &EncoderConfig) -> usize {
        let h = config.hidden;
        let layers = config.layers + config.aggregator_layers;
        let per_layer = Adapter::param_count(h, h / config.adapter_reduction) + 4 * h;
        layers * per_layer + 2 * h + (2 * h + 2)
    }

    pub fn check_row(&self, row: &BlockRow) -> Result<(), EncoderError> {
        let b = &self.config.blocking;
        let dim = |m: String| Err(EncoderError::Dimension(m));
        if row.blocks() != b.max_blocks || row.block_len != b.block_len {
            return dim(format!(
                "row is {}x{}, model expects {}x{}",
                row.blocks(),
                row.block_len,
                b.max_blocks,
                b.block_len
            ));
        }
        if row.token_ids.len() != b.max_blocks * b.block_len || row.token_mask.len() != row.token_ids.len() {
            return dim("token grid size".into());
        }
        if row.block_mask.first() != Some(&1) {
            return dim("first block must be real".into());
        }
        for j in 0..row.blocks() {
            let mask = row.block_token_mask(j);
            if row.block_mask[j] == 1 && mask[0] != 1 {
                return dim(format!("block {j} is real but its CLS position is masked"));
            }
            if row.block_mask[j] == 0 && mask.iter().any(|m| *m != 0) {
                return dim(format!("pad block {j} has unmasked tokens"));
            }
            for (t, m) in row.block_tokens(j).iter().zip(mask) {
                if *m == 1 && *t as usize >= self.config.vocab_size {
                    return dim(format!("token id {t} outside vocabulary {}", self.config.vocab_size));
                }
            }
        }
        Ok(())
    }

    /// Builds the forward graph for one document and returns its `1×2`
    /// logits. Masked blocks never enter the graph except as zero rows that
    /// are excluded from attention keys and from pooling.
    pub fn forward_row(&self, g: &mut Graph, row: &BlockRow, dropout: &mut Dropout) -> NodeId {
        let h = self.config.hidden;
        let keep: Vec<bool> = row.block_mask.iter().map(|m| *m == 1).collect();
        let mut cls = Vec::with_capacity(row.blocks());
        for (j, real) in keep.iter().enumerate() {
            if *real {
                let mask = row.block_token_mask(j);
                let positions: Vec<usize> = (0..row.block_len).filter(|p| mask[*p] == 1).collect();
                let tokens: Vec<u32> = positions.iter().map(|p| row.block_tokens(j)[*p]).collect();
                cls.push(self.encoder.encode_block(g, &tokens, &positions, dropout));
            } else {
                cls.push(g.constant(Mat::zeros(1, h)));
            }
        }
        let x = g.stack_rows(&cls);
        let positions: Vec<usize> = (0..row.blocks()).collect();
        let pos = g.gather(self.block_pos, &positions);
        let mut x = g.add(x, pos);
        for layer in &self.aggregator {
            x = layer.forward(g, x, &keep, dropout);
        }
        let pooled = g.masked_max_rows(x, &keep);
        g.linear(pooled, self.head_w, self.head_b)
    }

    pub fn logits(&self, row: &BlockRow) -> Result<[f64; 2], EncoderError> {
        self.check_row(row)?;
        let mut g = Graph::new(&self.store, false);
        let out = self.forward_row(&mut g, row, &mut Dropout::eval());
        let v = &g.value(out).data;
        Ok([v[0], v[1]])
    }

    /// Eval-mode logits for every document of the batch.
    pub fn encode_document(&self, batch: &BlockBatch) -> Result<Vec<[f64; 2]>, EncoderError> {
        batch.rows.iter().map(|r| self.logits(r)).collect()
    }

    pub fn predict(&self, row: &BlockRow) -> Result<u8, EncoderError> {
        let l = self.logits(row)?;
        Ok(u8::from(l[1] > l[0]))
    }

    /// Training graph: loss node for one labelled document.
    pub fn loss_graph<'a>(
        &'a self,
        row: &BlockRow,
        label: u8,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Graph<'a>, NodeId) {
        let mut g = Graph::new(&self.store, true);
        let mut dropout = Dropout {
            rate: self.config.dropout,
            rng: dropout_rng,
        };
        let logits = self.forward_row(&mut g, row, &mut dropout);
        let target = smoothed_targets(label as usize, 2, self.config.label_smoothing);
        let loss = g.soft_cross_entropy(logits, target);
        (g, loss)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        fs::create_dir_all(dir).map_err(|e| EncoderError::io(dir, e))?;
        let manifest = CheckpointManifest {
            format: "lexjudge-checkpoint-v1".into(),
            config: self.config.clone(),
            seed: self.seed,
            adapters: self.adapters,
            tensors: self.tensor_infos(),
        };
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| EncoderError::io(&path, e))?;
        self.store.write_archive(&dir.join("weights.bin"))
    }

    fn tensor_infos(&self) -> BTreeMap<String, TensorInfo> {
        self.store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    TensorInfo {
                        group: p.group,
                        trainable: p.trainable,
                        shape: [p.value.rows, p.value.cols],
                    },
                )
            })
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path).map_err(|e| EncoderError::io(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| EncoderError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut config = manifest.config.clone();
        config.adapter_enabled = false;
        let mut model = HierarchicalClassifier::new(config, manifest.seed)?;
        if manifest.adapters {
            model.configure_adapters(manifest.config.adapter_reduction)?;
        }
        if model.tensor_infos() != manifest.tensors {
            return Err(EncoderError::Checkpoint(
                "parameter names or partition differ from the model layout".into(),
            ));
        }
        model.store.read_archive(&dir.join("weights.bin"))?;
        Ok(model)
    }
}

/// Soft targets `ε/C + (1−ε)·1[i = label]`.
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    (0..classes)
        .map(|i| eps / classes as f64 + if i == label { 1.0 - eps } else { 0.0 })
        .collect()
}

/// Label-smoothed cross-entropy of one logit vector.
pub fn smoothed_cross_entropy(logits: &[f64], label: usize, eps: f64) -> Result<f64, EncoderError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(EncoderError::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(EncoderError::NonFinite(logits.to_vec()));
    }
    if label >= logits.len() {
        return Err(EncoderError::Dimension(format!("label {label} for {} classes", logits.len())));
    }
    let q = smoothed_targets(label, logits.len(), eps);
    Ok(-q.iter().zip(log_softmax(logits)).map(|(q, lp)| q * lp).sum::<f64>())
}
