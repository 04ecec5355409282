//! BERT-style encoder with a pooler and a linear classification head.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{apply_mask, dropout, gelu, gelu_backward, normal_init, LayerNorm, LayerNormCache, Linear};
use crate::lora::{adapter_size, LoraSpec, Projection, ProjectionCache};
use crate::param::{Param, ParamMut, Parameters};

/// Hyperparameters in the field layout of a Hugging Face `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    #[serde(default = "default_model_type")]
    pub model_type: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f32,
    #[serde(default = "default_dropout")]
    pub hidden_dropout_prob: f32,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default = "default_init_range")]
    pub initializer_range: f32,
}

fn default_model_type() -> String {
    "bert".into()
}
fn default_max_positions() -> usize {
    512
}
fn default_type_vocab() -> usize {
    2
}
fn default_ln_eps() -> f32 {
    1e-12
}
fn default_dropout() -> f32 {
    0.1
}
fn default_act() -> String {
    "gelu".into()
}
fn default_init_range() -> f32 {
    0.02
}

impl BertConfig {
    /// bert-base dimensions: 12 layers, hidden 768, 12 heads, FFN 3072.
    pub fn base(vocab_size: usize) -> Self {
        Self::with_dims(vocab_size, 768, 12, 12, 3072)
    }

    pub fn small(vocab_size: usize) -> Self {
        Self::with_dims(vocab_size, 256, 4, 4, 1024)
    }

    pub fn tiny(vocab_size: usize) -> Self {
        Self::with_dims(vocab_size, 64, 2, 2, 128)
    }

    pub fn with_dims(vocab_size: usize, hidden: usize, layers: usize, heads: usize, intermediate: usize) -> Self {
        Self {
            model_type: default_model_type(),
            vocab_size,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: intermediate,
            max_position_embeddings: default_max_positions(),
            type_vocab_size: default_type_vocab(),
            layer_norm_eps: default_ln_eps(),
            hidden_dropout_prob: default_dropout(),
            hidden_act: default_act(),
            initializer_range: default_init_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_type != "bert" {
            return Err(NnError::Unsupported(format!(
                "model_type `{}` (only BERT-family encoders are implemented)",
                self.model_type
            )));
        }
        if self.hidden_act != "gelu" {
            return Err(NnError::Unsupported(format!("activation `{}`", self.hidden_act)));
        }
        if self.num_attention_heads == 0 || self.hidden_size % self.num_attention_heads != 0 {
            return Err(NnError::Config(format!(
                "hidden_size {} is not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if self.vocab_size == 0 || self.max_position_embeddings < 2 {
            return Err(NnError::Config("empty vocabulary or position table".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }

    /// Parameter count of the full classifier, computed from the dimensions alone.
    pub fn parameter_count(&self, num_labels: usize) -> usize {
        let h = self.hidden_size;
        let i = self.intermediate_size;
        let embeddings = (self.vocab_size + self.max_position_embeddings + self.type_vocab_size) * h + 2 * h;
        let attention = 4 * (h * h + h) + 2 * h;
        let ffn = (h * i + i) + (i * h + h) + 2 * h;
        let pooler = h * h + h;
        let classifier = h * num_labels + num_labels;
        embeddings + self.num_hidden_layers * (attention + ffn) + pooler + classifier
    }

    /// Trainable parameters once adapters are attached: adapters plus the classification head.
    pub fn lora_trainable_count(&self, num_labels: usize, spec: &LoraSpec) -> usize {
        let h = self.hidden_size;
        let per_layer = ["query", "key", "value", "output"]
            .iter()
            .filter(|p| spec.targets(p))
            .count()
            * adapter_size(h, h, spec.rank);
        self.num_hidden_layers * per_layer + h * num_labels + num_labels
    }
}

/// How token vectors are reduced to one sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

/// Sequences packed back to back; `offsets[i]..offsets[i + 1]` spans sequence `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn from_sequences<S: AsRef<[u32]>>(sequences: &[S]) -> Self {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for seq in sequences {
            ids.extend_from_slice(seq.as_ref());
            offsets.push(ids.len());
        }
        Self { ids, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn tokens(&self) -> usize {
        self.ids.len()
    }
}

pub enum ForwardMode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

impl ForwardMode<'_> {
    fn dropout(&mut self, x: &mut Array2<f32>, p: f32) -> Option<Array2<f32>> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Train(rng) => dropout(x, p, rng),
        }
    }
}

#[derive(Debug, Clone)]
struct Embeddings {
    word: Param<ndarray::Ix2>,
    position: Param<ndarray::Ix2>,
    token_type: Param<ndarray::Ix2>,
    norm: LayerNorm,
}

struct EmbeddingCache {
    norm: LayerNormCache,
    mask: Option<Array2<f32>>,
}

impl Embeddings {
    fn forward(&self, batch: &Batch, mode: &mut ForwardMode<'_>, p: f32) -> (Array2<f32>, EmbeddingCache) {
        let h = self.word.value.ncols();
        let mut x = Array2::zeros((batch.tokens(), h));
        for i in 0..batch.len() {
            let span = batch.span(i);
            for (pos, row) in span.clone().enumerate() {
                let mut out = x.row_mut(row);
                out.assign(&self.word.value.row(batch.ids[row] as usize));
                out += &self.position.value.row(pos);
                out += &self.token_type.value.row(0);
            }
        }
        let (mut y, norm) = self.norm.forward(&x);
        let mask = mode.dropout(&mut y, p);
        (y, EmbeddingCache { norm, mask })
    }

    fn backward(&mut self, batch: &Batch, cache: &EmbeddingCache, mut dy: Array2<f32>) {
        apply_mask(&mut dy, &cache.mask);
        let dx = self.norm.backward(&cache.norm, &dy);
        for i in 0..batch.len() {
            for (pos, row) in batch.span(i).enumerate() {
                let g = dx.row(row);
                if !self.word.frozen {
                    let mut w = self.word.grad.row_mut(batch.ids[row] as usize);
                    w += &g;
                }
                if !self.position.frozen {
                    let mut w = self.position.grad.row_mut(pos);
                    w += &g;
                }
                if !self.token_type.frozen {
                    let mut w = self.token_type.grad.row_mut(0);
                    w += &g;
                }
            }
        }
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.word.frozen = frozen;
        self.position.frozen = frozen;
        self.token_type.frozen = frozen;
        self.norm.set_frozen(frozen);
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.word.visit(&format!("{prefix}.word_embeddings.weight"), f);
        self.position.visit(&format!("{prefix}.position_embeddings.weight"), f);
        self.token_type.visit(&format!("{prefix}.token_type_embeddings.weight"), f);
        self.norm.visit(&format!("{prefix}.LayerNorm"), f);
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Projection,
    key: Projection,
    value: Projection,
    attn_out: Projection,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

struct LayerCache {
    input: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    q_cache: ProjectionCache,
    k_cache: ProjectionCache,
    v_cache: ProjectionCache,
    probs: Vec<Array2<f32>>,
    context: Array2<f32>,
    attn_out_cache: ProjectionCache,
    attn_mask: Option<Array2<f32>>,
    attn_norm: LayerNormCache,
    hidden: Array2<f32>,
    pre_act: Array2<f32>,
    act: Array2<f32>,
    out_mask: Option<Array2<f32>>,
    out_norm: LayerNormCache,
}

impl EncoderLayer {
    fn new<R: rand::Rng + ?Sized>(cfg: &BertConfig, rng: &mut R) -> Self {
        let h = cfg.hidden_size;
        let std = cfg.initializer_range;
        Self {
            query: Projection::new(Linear::new(h, h, std, rng)),
            key: Projection::new(Linear::new(h, h, std, rng)),
            value: Projection::new(Linear::new(h, h, std, rng)),
            attn_out: Projection::new(Linear::new(h, h, std, rng)),
            attn_norm: LayerNorm::new(h, cfg.layer_norm_eps),
            intermediate: Linear::new(h, cfg.intermediate_size, std, rng),
            output: Linear::new(cfg.intermediate_size, h, std, rng),
            out_norm: LayerNorm::new(h, cfg.layer_norm_eps),
        }
    }

    fn forward(
        &self,
        x: Array2<f32>,
        batch: &Batch,
        heads: usize,
        mode: &mut ForwardMode<'_>,
        p: f32,
    ) -> (Array2<f32>, LayerCache) {
        let (q, q_cache) = self.query.forward(&x);
        let (k, k_cache) = self.key.forward(&x);
        let (v, v_cache) = self.value.forward(&x);
        let (context, probs) = attention(&q, &k, &v, batch, heads);
        let (mut attn, attn_out_cache) = self.attn_out.forward(&context);
        let attn_mask = mode.dropout(&mut attn, p);
        attn += &x;
        let (hidden, attn_norm) = self.attn_norm.forward(&attn);

        let pre_act = self.intermediate.forward(&hidden);
        let act = gelu(&pre_act);
        let mut out = self.output.forward(&act);
        let out_mask = mode.dropout(&mut out, p);
        out += &hidden;
        let (y, out_norm) = self.out_norm.forward(&out);
        (
            y,
            LayerCache {
                input: x,
                q,
                k,
                v,
                q_cache,
                k_cache,
                v_cache,
                probs,
                context,
                attn_out_cache,
                attn_mask,
                attn_norm,
                hidden,
                pre_act,
                act,
                out_mask,
                out_norm,
            },
        )
    }

    fn backward(&mut self, cache: &LayerCache, batch: &Batch, heads: usize, dy: &Array2<f32>) -> Array2<f32> {
        let d_out_sum = self.out_norm.backward(&cache.out_norm, dy);
        let mut d_out = d_out_sum.clone();
        apply_mask(&mut d_out, &cache.out_mask);
        let d_act = self.output.backward(&cache.act, &d_out);
        let d_pre = gelu_backward(&cache.pre_act, &d_act);
        let mut d_hidden = d_out_sum;
        d_hidden += &self.intermediate.backward(&cache.hidden, &d_pre);

        let d_attn_sum = self.attn_norm.backward(&cache.attn_norm, &d_hidden);
        let mut d_attn = d_attn_sum.clone();
        apply_mask(&mut d_attn, &cache.attn_mask);
        let d_context = self.attn_out.backward(&cache.context, &cache.attn_out_cache, &d_attn);
        let (dq, dk, dv) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &d_context, batch, heads);

        let mut dx = d_attn_sum;
        dx += &self.query.backward(&cache.input, &cache.q_cache, &dq);
        dx += &self.key.backward(&cache.input, &cache.k_cache, &dk);
        dx += &self.value.backward(&cache.input, &cache.v_cache, &dv);
        dx
    }

    fn projections_mut(&mut self) -> [(&'static str, &mut Projection); 4] {
        [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("output", &mut self.attn_out),
        ]
    }

    fn set_frozen(&mut self, frozen: bool) {
        for (_, proj) in self.projections_mut() {
            proj.base.set_frozen(frozen);
        }
        self.attn_norm.set_frozen(frozen);
        self.intermediate.set_frozen(frozen);
        self.output.set_frozen(frozen);
        self.out_norm.set_frozen(frozen);
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.query.visit(&format!("{prefix}.attention.self.query"), f);
        self.key.visit(&format!("{prefix}.attention.self.key"), f);
        self.value.visit(&format!("{prefix}.attention.self.value"), f);
        self.attn_out.visit(&format!("{prefix}.attention.output.dense"), f);
        self.attn_norm.visit(&format!("{prefix}.attention.output.LayerNorm"), f);
        self.intermediate.visit(&format!("{prefix}.intermediate.dense"), f);
        self.output.visit(&format!("{prefix}.output.dense"), f);
        self.out_norm.visit(&format!("{prefix}.output.LayerNorm"), f);
    }
}

fn softmax_rows_in_place(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Scaled dot-product attention per sequence and head. Returns the context and
/// the attention probabilities (sequence-major, then head).
fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>, batch: &Batch, heads: usize) -> (Array2<f32>, Vec<Array2<f32>>) {
    let hd = q.ncols() / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut context = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(batch.len() * heads);
    for i in 0..batch.len() {
        let r = batch.span(i);
        for h in 0..heads {
            let c = h * hd..(h + 1) * hd;
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            let mut scores = qs.dot(&ks.t()) * scale;
            softmax_rows_in_place(&mut scores);
            context.slice_mut(s![r.clone(), c]).assign(&scores.dot(&vs));
            probs.push(scores);
        }
    }
    (context, probs)
}

fn attention_backward(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    probs: &[Array2<f32>],
    d_context: &Array2<f32>,
    batch: &Batch,
    heads: usize,
) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
    let hd = q.ncols() / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for i in 0..batch.len() {
        let r = batch.span(i);
        for h in 0..heads {
            let p = &probs[i * heads + h];
            let c = h * hd..(h + 1) * hd;
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            let dc = d_context.slice(s![r.clone(), c.clone()]);
            let dp = dc.dot(&vs.t());
            dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&dc));
            let mut ds = &dp * p;
            let row_dot = ds.sum_axis(Axis(1));
            for (mut row, (prow, dot)) in ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(row_dot.iter())) {
                row.scaled_add(-*dot, &prow);
            }
            ds *= scale;
            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

/// Encoder + `[CLS]` pooler + linear head, named like `BertForSequenceClassification`.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    config: BertConfig,
    num_labels: usize,
    embeddings: Embeddings,
    layers: Vec<EncoderLayer>,
    pooler: Linear,
    classifier: Linear,
}

pub struct ForwardCache {
    embeddings: EmbeddingCache,
    layers: Vec<LayerCache>,
    cls: Array2<f32>,
    pooled: Array2<f32>,
    head_input: Array2<f32>,
    head_mask: Option<Array2<f32>>,
}

impl SequenceClassifier {
    /// Randomly initialised model (BERT's Normal(0, initializer_range) scheme).
    pub fn new(config: BertConfig, num_labels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let std = config.initializer_range;
        let embeddings = Embeddings {
            word: Param::new(normal_init(config.vocab_size, h, std, &mut rng), true),
            position: Param::new(normal_init(config.max_position_embeddings, h, std, &mut rng), true),
            token_type: Param::new(normal_init(config.type_vocab_size.max(1), h, std, &mut rng), true),
            norm: LayerNorm::new(h, config.layer_norm_eps),
        };
        let layers = (0..config.num_hidden_layers)
            .map(|_| EncoderLayer::new(&config, &mut rng))
            .collect();
        let pooler = Linear::new(h, h, std, &mut rng);
        let classifier = Linear::new(h, num_labels, std, &mut rng);
        Ok(Self {
            config,
            num_labels,
            embeddings,
            layers,
            pooler,
            classifier,
        })
    }

    pub fn config(&self) -> &BertConfig {
        &self.config
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Re-draws the classification head, e.g. after loading an encoder-only checkpoint.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = Linear::new(self.config.hidden_size, self.num_labels, self.config.initializer_range, &mut rng);
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for i in 0..batch.len() {
            let len = batch.span(i).len();
            if len == 0 {
                return Err(NnError::Input(format!("sequence {i} is empty")));
            }
            if len > self.config.max_position_embeddings {
                return Err(NnError::Input(format!(
                    "sequence {i} has {len} tokens, the model accepts at most {}",
                    self.config.max_position_embeddings
                )));
            }
        }
        if let Some(bad) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(NnError::Input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn encode_with_cache(&self, batch: &Batch, mode: &mut ForwardMode<'_>) -> Result<(Array2<f32>, EmbeddingCache, Vec<LayerCache>)> {
        self.check_batch(batch)?;
        let p = self.config.hidden_dropout_prob;
        let (mut x, emb_cache) = self.embeddings.forward(batch, mode, p);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(x, batch, self.config.num_attention_heads, mode, p);
            caches.push(cache);
            x = y;
        }
        Ok((x, emb_cache, caches))
    }

    /// Final-layer token vectors, `[tokens, hidden]`.
    pub fn encode(&self, batch: &Batch) -> Result<Array2<f32>> {
        self.check_batch(batch)?;
        let p = self.config.hidden_dropout_prob;
        let mut mode = ForwardMode::Eval;
        let (mut x, _) = self.embeddings.forward(batch, &mut mode, p);
        for layer in &self.layers {
            x = layer.forward(x, batch, self.config.num_attention_heads, &mut mode, p).0;
        }
        Ok(x)
    }

    /// One vector per sequence, `[sequences, hidden]`.
    pub fn sentence_embeddings(&self, batch: &Batch, pooling: Pooling) -> Result<Array2<f32>> {
        let hidden = self.encode(batch)?;
        let mut out = Array2::zeros((batch.len(), hidden.ncols()));
        for i in 0..batch.len() {
            let span = batch.span(i);
            let row = match pooling {
                Pooling::FirstToken => hidden.row(span.start).to_owned(),
                Pooling::Mean => hidden
                    .slice(s![span, ..])
                    .mean_axis(Axis(0))
                    .expect("sequences are non-empty"),
            };
            out.row_mut(i).assign(&row);
        }
        Ok(out)
    }

    fn cls_rows(hidden: &Array2<f32>, batch: &Batch) -> Array2<f32> {
        let mut cls = Array2::zeros((batch.len(), hidden.ncols()));
        for i in 0..batch.len() {
            cls.row_mut(i).assign(&hidden.row(batch.offsets[i]));
        }
        cls
    }

    /// Class logits `[sequences, num_labels]` plus the cache needed for [`Self::backward`].
    pub fn forward(&self, batch: &Batch, mut mode: ForwardMode<'_>) -> Result<(Array2<f32>, ForwardCache)> {
        let (hidden, embeddings, layers) = self.encode_with_cache(batch, &mut mode)?;
        let cls = Self::cls_rows(&hidden, batch);
        let pooled = self.pooler.forward(&cls).mapv(f32::tanh);
        let mut head_input = pooled.clone();
        let head_mask = mode.dropout(&mut head_input, self.config.hidden_dropout_prob);
        let logits = self.classifier.forward(&head_input);
        Ok((
            logits,
            ForwardCache {
                embeddings,
                layers,
                cls,
                pooled,
                head_input,
                head_mask,
            },
        ))
    }

    pub fn logits(&self, batch: &Batch) -> Result<Array2<f32>> {
        Ok(self.forward(batch, ForwardMode::Eval)?.0)
    }

    /// Back-propagates `dL/dlogits`, accumulating gradients into every unfrozen parameter.
    pub fn backward(&mut self, batch: &Batch, cache: ForwardCache, d_logits: &Array2<f32>) {
        let mut d_head = self.classifier.backward(&cache.head_input, d_logits);
        apply_mask(&mut d_head, &cache.head_mask);
        let d_pre = &d_head * &cache.pooled.mapv(|t| 1.0 - t * t);
        let d_cls = self.pooler.backward(&cache.cls, &d_pre);

        let mut d_hidden = Array2::zeros((batch.tokens(), self.config.hidden_size));
        for i in 0..batch.len() {
            d_hidden.row_mut(batch.offsets[i]).assign(&d_cls.row(i));
        }
        let heads = self.config.num_attention_heads;
        for (layer, layer_cache) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            d_hidden = layer.backward(layer_cache, batch, heads, &d_hidden);
        }
        self.embeddings.backward(batch, &cache.embeddings, d_hidden);
    }

    /// Freezes the whole model, attaches adapters to the targeted attention
    /// projections and leaves only adapters and the classification head trainable.
    pub fn attach_lora(&mut self, spec: &LoraSpec, seed: u64) -> Result<()> {
        if spec.rank == 0 {
            return Err(NnError::Config("LoRA rank must be positive".into()));
        }
        if !spec.targets.iter().all(|t| matches!(t.as_str(), "query" | "key" | "value" | "output")) {
            return Err(NnError::Unsupported(format!("LoRA targets {:?}", spec.targets)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.embeddings.set_frozen(true);
        self.pooler.set_frozen(true);
        for layer in &mut self.layers {
            layer.set_frozen(true);
            for (name, proj) in layer.projections_mut() {
                if spec.targets(name) {
                    proj.attach(spec, &mut rng);
                }
            }
        }
        self.classifier.set_frozen(false);
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| {
            [&l.query, &l.key, &l.value, &l.attn_out]
                .iter()
                .any(|p| p.adapter.is_some())
        })
    }

    /// Folds all adapters into the base weights and unfreezes the model.
    pub fn merge_lora(&mut self) {
        for layer in &mut self.layers {
            for (_, proj) in layer.projections_mut() {
                proj.merge();
            }
            layer.set_frozen(false);
        }
        self.embeddings.set_frozen(false);
        self.pooler.set_frozen(false);
    }
}

impl Parameters for SequenceClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.embeddings.visit("bert.embeddings", f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("bert.encoder.layer.{i}"), f);
        }
        self.pooler.visit("bert.pooler.dense", f);
        self.classifier.visit("classifier", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> SequenceClassifier {
        let mut cfg = BertConfig::with_dims(20, 8, 2, 2, 12);
        cfg.hidden_dropout_prob = 0.0;
        cfg.layer_norm_eps = 1e-5;
        cfg.initializer_range = 0.5;
        SequenceClassifier::new(cfg, 3, seed).unwrap()
    }

    fn batch() -> Batch {
        Batch::from_sequences(&[vec![1u32, 5, 7, 2], vec![1, 9, 2], vec![1, 3, 3, 4, 11, 2]])
    }

    /// Σ logits ⊙ probe, an arbitrary scalar objective for gradient checks.
    fn objective(model: &SequenceClassifier, batch: &Batch, probe: &Array2<f32>) -> f64 {
        let logits = model.logits(batch).unwrap();
        logits.iter().zip(probe.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    fn collect_grads(model: &mut SequenceClassifier) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        model.visit_params(&mut |p| out.push((p.name.to_string(), p.grad.to_vec())));
        out
    }

    fn nudge(model: &mut SequenceClassifier, name: &str, idx: usize, delta: f32) {
        model.visit_params(&mut |p| {
            if p.name == name {
                p.value[idx] += delta;
            }
        });
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut model = tiny_model(2);
        let b = batch();
        let probe = normal_init(3, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let (_, cache) = model.forward(&b, ForwardMode::Eval).unwrap();
        model.backward(&b, cache, &probe);
        let grads = collect_grads(&mut model);
        let h = 1e-2f32;
        let mut checked = 0;
        for (name, grad) in &grads {
            // A couple of entries per tensor keeps the test fast.
            let picks: Vec<usize> = (0..grad.len()).step_by((grad.len() / 3).max(1)).take(3).collect();
            for idx in picks {
                let mut plus = model.clone();
                nudge(&mut plus, name, idx, h);
                let mut minus = model.clone();
                nudge(&mut minus, name, idx, -h);
                let num = (objective(&plus, &b, &probe) - objective(&minus, &b, &probe)) / (2.0 * h as f64);
                let ana = grad[idx] as f64;
                let tol = 2e-2 * (1.0 + num.abs().max(ana.abs()));
                assert!((num - ana).abs() < tol, "{name}[{idx}]: numeric {num} vs analytic {ana}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn lora_freezes_base_and_merge_preserves_logits() {
        let mut model = tiny_model(4);
        model.attach_lora(&LoraSpec::new(2, 4.0), 1).unwrap();
        // Perturb adapters so the merge is non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        model.visit_params(&mut |p| {
            if p.name.ends_with("lora_B.weight") {
                for v in p.value.iter_mut() {
                    *v = (rng.next_u32() % 100) as f32 / 500.0 - 0.1;
                }
            }
        });
        let census = model.census();
        let expected = model.config().lora_trainable_count(3, &LoraSpec::new(2, 4.0));
        assert_eq!(census.trainable, expected);
        let b = batch();
        let adapted = model.logits(&b).unwrap();
        model.merge_lora();
        assert!(!model.has_adapters());
        let merged = model.logits(&b).unwrap();
        for (a, m) in adapted.iter().zip(merged.iter()) {
            assert!((a - m).abs() < 1e-4);
        }
    }

    #[test]
    fn analytic_count_matches_allocated_model() {
        let mut model = tiny_model(1);
        let census = model.census();
        assert_eq!(census.total, model.config().parameter_count(3));
        assert_eq!(census.trainable, census.total);
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let model = tiny_model(3);
        let b = batch();
        let joint = model.logits(&b).unwrap();
        for i in 0..b.len() {
            let single = Batch::from_sequences(&[b.ids[b.span(i)].to_vec()]);
            let alone = model.logits(&single).unwrap();
            for j in 0..3 {
                assert!((alone[[0, j]] - joint[[i, j]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let model = tiny_model(3);
        let bad = Batch::from_sequences(&[vec![1u32, 99]]);
        assert!(matches!(model.logits(&bad), Err(NnError::Input(_))));
    }
}
