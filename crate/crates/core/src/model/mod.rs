//! The toy vision-language stack: a patch transformer over the image, a
//! query transformer with K learned queries that can also read explanation
//! tokens, and a causal decoder that reads the projected queries as a prefix.

pub mod checkpoint;
mod config;
pub mod generate;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{LanguageMode, ModelConfig};
pub use generate::{decode, DecodeSettings, Generation, TokenScorer};

use crate::error::{Error, Result};
use crate::nn::tensor::log_softmax;
use crate::nn::{AttnMask, Float, Graph, ParamId, ParamStore, Partition, Tensor, Var};
use crate::text::{TokenId, BOS};
use layers::{AttnIds, FfnIds, Init, NormIds};

struct EncoderBlock {
    ln_attn: NormIds,
    attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

struct QformerLayer {
    ln_self: NormIds,
    self_attn: AttnIds,
    ln_cross: NormIds,
    cross_attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

/// Parameter handles resolved once at construction.
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    patch_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    encoder_ln: NormIds,
    queries: ParamId,
    segment: ParamId,
    text_embed: ParamId,
    text_pos: ParamId,
    qformer: Vec<QformerLayer>,
    qformer_ln: NormIds,
    proj_w: ParamId,
    proj_b: ParamId,
    tok_embed: ParamId,
    lm_pos: ParamId,
    lm_cell: ParamId,
    decoder: Vec<EncoderBlock>,
    decoder_ln: NormIds,
    head_w: ParamId,
    head_b: ParamId,
}

/// Which partitions a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezePolicy {
    /// Decoder language pretraining: only the language model learns.
    Pretrain,
    /// Vision encoder and query transformer learn; the language model is frozen.
    Finetune,
    /// Only the query transformer learns.
    Selftrain,
}

impl FreezePolicy {
    pub fn trainable(self, p: Partition) -> bool {
        match self {
            FreezePolicy::Pretrain => p == Partition::Lm,
            FreezePolicy::Finetune => p != Partition::Lm,
            FreezePolicy::Selftrain => p == Partition::Qformer,
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::Pretrain => "pretrain",
            FreezePolicy::Finetune => "finetune",
            FreezePolicy::Selftrain => "selftrain",
        })
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(FreezePolicy::Pretrain),
            "finetune" => Ok(FreezePolicy::Finetune),
            "selftrain" => Ok(FreezePolicy::Selftrain),
            other => Err(Error::Config(format!("unknown freezing policy `{other}`"))),
        }
    }
}

/// Sets every partition's trainable flag for `policy`. Values are untouched.
pub fn set_freezing<F: Float>(params: &mut ParamStore<F>, policy: FreezePolicy) {
    for p in Partition::ALL {
        params.set_partition_trainable(p, policy.trainable(p));
    }
}

/// One object of a symbolic scene prefix: colour and shape words and the
/// patch cell it occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneRow {
    pub color: TokenId,
    pub shape: TokenId,
    pub cell: usize,
}

/// Output of the query transformer inside a graph.
pub struct QformerOutput {
    /// Projected rows handed to the decoder: `K` rows, or `K + L` in
    /// explicit mode when explanation tokens were supplied.
    pub prefix: Var,
    /// Last layer's cross-attention node; its weights are `heads × rows × P`.
    pub cross_attention: Var,
    pub num_queries: usize,
    pub explanation_rows: usize,
    pub truncated: bool,
}

/// Materialized query-transformer output.
#[derive(Debug, Clone)]
pub struct ImageQueries<F = f32> {
    pub rows: Tensor<F>,
    /// `heads × (K + L) × P`, from the last layer.
    pub cross_weights: Tensor<F>,
    pub num_queries: usize,
    pub explanation_rows: usize,
    pub truncated: bool,
}

impl<F: Float> ImageQueries<F> {
    /// Cross-attention averaged over heads and over the K query rows; a
    /// distribution over patches.
    pub fn patch_attention(&self) -> Vec<f64> {
        let s = self.cross_weights.shape();
        let (heads, rows, patches) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; patches];
        let k = self.num_queries.min(rows);
        for h in 0..heads {
            for r in 0..k {
                let base = (h * rows + r) * patches;
                for (p, o) in out.iter_mut().enumerate() {
                    *o += self.cross_weights.data()[base + p].as_f64();
                }
            }
        }
        let n = (heads * k) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Per-layer keys and values of everything the decoder has consumed so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache<F = f32> {
    layers: Vec<(Tensor<F>, Tensor<F>)>,
    /// Rows consumed, prefix included.
    len: usize,
    prefix: usize,
    text_len: usize,
}

impl<F: Float> KvCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct Model<F: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

impl<F: Float> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: Layout::resolve(&self.config, &self.params).expect("layout of an existing model"),
        }
    }
}

impl Model<f32> {
    /// Fresh model with seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        build_params(&config, &mut init)?;
        let layout = Layout::resolve(&config, &store)?;
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }
}

fn build_params(c: &ModelConfig, init: &mut Init<'_>) -> Result<()> {
    let d = c.d_model;
    let ve = Partition::VisionEncoder;
    init.linear("ve.patch", ve, c.patch_dim(), d, 1.0)?;
    init.embedding("ve.pos", ve, c.num_patches(), d)?;
    for i in 0..c.encoder_layers {
        init.block(&format!("ve.block{i}"), ve, d, c.ffn_dim(), c.encoder_layers)?;
    }
    init.norm("ve.ln_f", ve, d)?;

    let qf = Partition::Qformer;
    init.embedding("qf.queries", qf, c.num_queries, d)?;
    init.embedding("qf.segment", qf, 2, d)?;
    init.embedding("qf.text_embed", qf, c.vocab_size, d)?;
    init.embedding("qf.text_pos", qf, c.max_explanation_len.max(1), d)?;
    for i in 0..c.qformer_layers {
        let p = format!("qf.layer{i}");
        init.norm(&format!("{p}.ln_self"), qf, d)?;
        init.attention(&format!("{p}.self_attn"), qf, d, c.qformer_layers)?;
        init.norm(&format!("{p}.ln_cross"), qf, d)?;
        init.attention(&format!("{p}.cross_attn"), qf, d, c.qformer_layers)?;
        init.norm(&format!("{p}.ln_ffn"), qf, d)?;
        init.ffn(&format!("{p}.ffn"), qf, d, c.ffn_dim(), c.qformer_layers)?;
    }
    init.norm("qf.ln_f", qf, d)?;
    init.linear("qf.proj", qf, d, d, 1.0)?;

    let lm = Partition::Lm;
    init.embedding("lm.tok_embed", lm, c.vocab_size, d)?;
    init.embedding("lm.pos", lm, c.max_text_len, d)?;
    init.embedding("lm.cell", lm, c.num_patches(), d)?;
    for i in 0..c.decoder_layers {
        init.block(&format!("lm.block{i}"), lm, d, c.ffn_dim(), c.decoder_layers)?;
    }
    init.norm("lm.ln_f", lm, d)?;
    init.linear("lm.head", lm, d, c.vocab_size, 1.0)?;
    Ok(())
}

impl Layout {
    fn resolve<F: Float>(c: &ModelConfig, s: &ParamStore<F>) -> Result<Self> {
        let id = |n: &str| {
            s.id(n)
                .ok_or_else(|| Error::Config(format!("parameter `{n}` is missing")))
        };
        let block = |p: &str| -> Result<EncoderBlock> {
            Ok(EncoderBlock {
                ln_attn: NormIds::resolve(s, &format!("{p}.ln_attn"))?,
                attn: AttnIds::resolve(s, &format!("{p}.attn"))?,
                ln_ffn: NormIds::resolve(s, &format!("{p}.ln_ffn"))?,
                ffn: FfnIds::resolve(s, &format!("{p}.ffn"))?,
            })
        };
        Ok(Self {
            patch_w: id("ve.patch.w")?,
            patch_b: id("ve.patch.b")?,
            patch_pos: id("ve.pos")?,
            encoder: (0..c.encoder_layers)
                .map(|i| block(&format!("ve.block{i}")))
                .collect::<Result<_>>()?,
            encoder_ln: NormIds::resolve(s, "ve.ln_f")?,
            queries: id("qf.queries")?,
            segment: id("qf.segment")?,
            text_embed: id("qf.text_embed")?,
            text_pos: id("qf.text_pos")?,
            qformer: (0..c.qformer_layers)
                .map(|i| {
                    let p = format!("qf.layer{i}");
                    Ok(QformerLayer {
                        ln_self: NormIds::resolve(s, &format!("{p}.ln_self"))?,
                        self_attn: AttnIds::resolve(s, &format!("{p}.self_attn"))?,
                        ln_cross: NormIds::resolve(s, &format!("{p}.ln_cross"))?,
                        cross_attn: AttnIds::resolve(s, &format!("{p}.cross_attn"))?,
                        ln_ffn: NormIds::resolve(s, &format!("{p}.ln_ffn"))?,
                        ffn: FfnIds::resolve(s, &format!("{p}.ffn"))?,
                    })
                })
                .collect::<Result<_>>()?,
            qformer_ln: NormIds::resolve(s, "qf.ln_f")?,
            proj_w: id("qf.proj.w")?,
            proj_b: id("qf.proj.b")?,
            tok_embed: id("lm.tok_embed")?,
            lm_pos: id("lm.pos")?,
            lm_cell: id("lm.cell")?,
            decoder: (0..c.decoder_layers)
                .map(|i| block(&format!("lm.block{i}")))
                .collect::<Result<_>>()?,
            decoder_ln: NormIds::resolve(s, "lm.ln_f")?,
            head_w: id("lm.head.w")?,
            head_b: id("lm.head.b")?,
        })
    }
}

/// Splits an `H×W×3` byte image into flattened patches scaled to `[-1, 1]`,
/// patches in row-major grid order and pixels `(y, x, channel)` within each.
pub fn patchify<F: Float>(image: &[u8], config: &ModelConfig) -> Result<Tensor<F>> {
    let (size, ps) = (config.image_size, config.patch_size);
    if image.len() != size * size * 3 {
        return Err(Error::Shape(format!(
            "image has {} bytes, expected {size}x{size}x3",
            image.len()
        )));
    }
    let side = size / ps;
    let mut data = Vec::with_capacity(size * size * 3);
    for pr in 0..side {
        for pc in 0..side {
            for y in 0..ps {
                let at = ((pr * ps + y) * size + pc * ps) * 3;
                for &b in &image[at..at + ps * 3] {
                    data.push(F::lit(b as f64 / 127.5 - 1.0));
                }
            }
        }
    }
    Tensor::new(vec![side * side, config.patch_dim()], data)
}

impl<F: Float> Model<F> {
    /// Same weights in another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        let params = self.params.cast();
        let layout = Layout::resolve(&self.config, &params).expect("cast keeps parameter names");
        Model {
            config: self.config.clone(),
            params,
            layout,
        }
    }

    /// Patch embeddings before positions are added (`P × d`).
    pub fn patch_embeddings(&self, g: &mut Graph<'_, F>, image: &[u8]) -> Result<Var> {
        let patches = g.input(patchify(image, &self.config)?);
        let (w, b) = (g.param(self.layout.patch_w), g.param(self.layout.patch_b));
        g.linear(patches, w, Some(b))
    }

    /// Image features `F_I` (`P × d`).
    pub fn encode_image(&self, g: &mut Graph<'_, F>, image: &[u8]) -> Result<Var> {
        let l = &self.layout;
        let emb = self.patch_embeddings(g, image)?;
        let pos = g.param(l.patch_pos);
        let mut x = g.add(emb, pos)?;
        for blk in &l.encoder {
            x = layers::block(g, x, blk.ln_attn, &blk.attn, blk.ln_ffn, &blk.ffn, self.config.heads, AttnMask::Full)?;
        }
        layers::norm(g, x, l.encoder_ln)
    }

    /// Runs the query transformer over `features`. With an explanation the
    /// input rows are the K queries followed by the embedded explanation.
    pub fn qformer(
        &self,
        g: &mut Graph<'_, F>,
        features: Var,
        explanation: Option<&[TokenId]>,
        mode: LanguageMode,
    ) -> Result<QformerOutput> {
        let l = &self.layout;
        let c = &self.config;
        let k = c.num_queries;
        let queries = g.param(l.queries);
        let segment = g.param(l.segment);
        let q_seg = g.slice_rows(segment, 0, 1)?;
        let mut x = g.add_row(queries, q_seg)?;
        let mut truncated = false;
        let mut text_rows = 0;
        if let Some(ids) = explanation.filter(|e| !e.is_empty()) {
            let mut ids = ids;
            if ids.len() > c.max_explanation_len {
                ids = &ids[..c.max_explanation_len];
                truncated = true;
            }
            if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
                return Err(Error::Invalid(format!("token id {bad} outside the vocabulary")));
            }
            text_rows = ids.len();
            let table = g.param(l.text_embed);
            let emb = g.gather(table, ids)?;
            let pos_table = g.param(l.text_pos);
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = g.gather(pos_table, &positions)?;
            let t_seg = g.slice_rows(segment, 1, 2)?;
            let t = g.add(emb, pos)?;
            let t = g.add_row(t, t_seg)?;
            x = g.concat_rows(&[x, t])?;
        }
        let mut cross = None;
        for layer in &l.qformer {
            let h = layers::norm(g, x, layer.ln_self)?;
            let (a, _) = layers::attention(g, h, h, &layer.self_attn, c.heads, AttnMask::Full)?;
            x = g.add(x, a)?;
            let h = layers::norm(g, x, layer.ln_cross)?;
            let (a, weights) = layers::attention(g, h, features, &layer.cross_attn, c.heads, AttnMask::Full)?;
            cross = Some(weights);
            x = g.add(x, a)?;
            let h = layers::norm(g, x, layer.ln_ffn)?;
            let f = layers::ffn(g, h, &layer.ffn)?;
            x = g.add(x, f)?;
        }
        let cross_attention = cross.ok_or_else(|| Error::Config("query transformer needs at least one layer".into()))?;
        let x = layers::norm(g, x, l.qformer_ln)?;
        let selected = match mode {
            LanguageMode::Explicit => x,
            LanguageMode::Implicit => g.slice_rows(x, 0, k)?,
        };
        let (w, b) = (g.param(l.proj_w), g.param(l.proj_b));
        let prefix = g.linear(selected, w, Some(b))?;
        Ok(QformerOutput {
            prefix,
            cross_attention,
            num_queries: k,
            explanation_rows: text_rows,
            truncated,
        })
    }

    /// Runs the decoder over `prefix` rows (if any) followed by `tokens`.
    /// Returns the final hidden states of the token rows only. With a cache,
    /// earlier rows are read from it and the new keys/values are appended.
    pub fn decoder(
        &self,
        g: &mut Graph<'_, F>,
        prefix: Option<Var>,
        tokens: &[TokenId],
        cache: Option<&mut KvCache<F>>,
    ) -> Result<Var> {
        let l = &self.layout;
        let c = &self.config;
        let (past, past_prefix, text_start) = match cache.as_deref() {
            Some(kv) => (kv.len, kv.prefix, kv.text_len),
            None => (0, 0, 0),
        };
        if past > 0 && prefix.is_some() {
            return Err(Error::Invalid("prefix rows must come before any cached tokens".into()));
        }
        if text_start + tokens.len() > c.max_text_len {
            return Err(Error::Invalid(format!(
                "text of {} tokens exceeds the decoder's {} positions",
                text_start + tokens.len(),
                c.max_text_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside the vocabulary")));
        }
        let table = g.param(l.tok_embed);
        let emb = g.gather(table, tokens)?;
        let pos_table = g.param(l.lm_pos);
        let positions: Vec<usize> = (text_start..text_start + tokens.len()).collect();
        let pos = g.gather(pos_table, &positions)?;
        let text = g.add(emb, pos)?;
        let prefix_rows = prefix.map_or(0, |p| g.value(p).rows());
        let mut x = match prefix {
            Some(p) => g.concat_rows(&[p, text])?,
            None => text,
        };
        let mask = AttnMask::Causal {
            query_offset: past,
            prefix: if past > 0 { past_prefix } else { prefix_rows },
        };
        let mut new_kv = Vec::with_capacity(l.decoder.len());
        for (i, blk) in l.decoder.iter().enumerate() {
            let h = layers::norm(g, x, blk.ln_attn)?;
            let q = layers::linear(g, h, blk.attn.q)?;
            let mut k = layers::linear(g, h, blk.attn.k)?;
            let mut v = layers::linear(g, h, blk.attn.v)?;
            if let Some(kv) = cache.as_deref() {
                if past > 0 {
                    let (ck, cv) = &kv.layers[i];
                    let ck = g.input(ck.clone());
                    let cv = g.input(cv.clone());
                    k = g.concat_rows(&[ck, k])?;
                    v = g.concat_rows(&[cv, v])?;
                }
                new_kv.push((g.value(k).clone(), g.value(v).clone()));
            }
            let a = g.attention(q, k, v, c.heads, mask)?;
            let a = layers::linear(g, a, blk.attn.o)?;
            x = g.add(x, a)?;
            let h = layers::norm(g, x, blk.ln_ffn)?;
            let f = layers::ffn(g, h, &blk.ffn)?;
            x = g.add(x, f)?;
        }
        if let Some(kv) = cache {
            kv.layers = new_kv;
            kv.len = past + prefix_rows + tokens.len();
            if past == 0 {
                kv.prefix = prefix_rows;
            }
            kv.text_len = text_start + tokens.len();
        }
        let x = layers::norm(g, x, l.decoder_ln)?;
        if prefix_rows > 0 {
            let rows = g.value(x).rows();
            g.slice_rows(x, prefix_rows, rows)
        } else {
            Ok(x)
        }
    }

    /// Decoder-space prefix rows for a symbolic scene, one per object: the
    /// sum of the colour and shape token embeddings and the cell embedding.
    /// Used to teach the decoder to read facts from prefix rows.
    pub fn scene_prefix(&self, g: &mut Graph<'_, F>, rows: &[SceneRow]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Invalid("a scene prefix needs at least one row".into()));
        }
        let c = &self.config;
        if let Some(r) = rows
            .iter()
            .find(|r| r.color >= c.vocab_size || r.shape >= c.vocab_size || r.cell >= c.num_patches())
        {
            return Err(Error::Invalid(format!("scene row {r:?} is out of range")));
        }
        let table = g.param(self.layout.tok_embed);
        let colors: Vec<usize> = rows.iter().map(|r| r.color).collect();
        let shapes: Vec<usize> = rows.iter().map(|r| r.shape).collect();
        let cells: Vec<usize> = rows.iter().map(|r| r.cell).collect();
        let col = g.gather(table, &colors)?;
        let shp = g.gather(table, &shapes)?;
        let cell_table = g.param(self.layout.lm_cell);
        let pos = g.gather(cell_table, &cells)?;
        let x = g.add(col, shp)?;
        g.add(x, pos)
    }

    /// Vocabulary logits for hidden rows.
    pub fn logits(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Var> {
        let (w, b) = (g.param(self.layout.head_w), g.param(self.layout.head_b));
        g.linear(hidden, w, Some(b))
    }

    /// Image features without recording gradients.
    pub fn image_features(&self, image: &[u8]) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad(&self.params);
        let f = self.encode_image(&mut g, image)?;
        Ok(g.value(f).clone())
    }

    pub fn image_queries(
        &self,
        features: &Tensor<F>,
        explanation: Option<&[TokenId]>,
        mode: LanguageMode,
    ) -> Result<ImageQueries<F>> {
        let mut g = Graph::no_grad(&self.params);
        let f = g.input(features.clone());
        let out = self.qformer(&mut g, f, explanation, mode)?;
        let weights = g
            .attention_weights(out.cross_attention)
            .ok_or_else(|| Error::Invalid("cross-attention node lost its weights".into()))?
            .clone();
        Ok(ImageQueries {
            rows: g.value(out.prefix).clone(),
            cross_weights: weights,
            num_queries: out.num_queries,
            explanation_rows: out.explanation_rows,
            truncated: out.truncated,
        })
    }

    /// Decodes from `prefix` rows and a prompt.
    pub fn generate(&self, prefix: &Tensor<F>, prompt: &[TokenId], settings: &DecodeSettings) -> Result<Generation> {
        let scorer = ModelScorer {
            model: self,
            prefix,
            prompt,
        };
        decode(&scorer, settings)
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings::new(self.config.beams, self.config.max_gen_len)
    }
}

/// Next-token scores from the decoder, conditioned on a fixed prefix and
/// prompt.
pub struct ModelScorer<'a, F: Float> {
    pub model: &'a Model<F>,
    pub prefix: &'a Tensor<F>,
    pub prompt: &'a [TokenId],
}

impl<F: Float> ModelScorer<'_, F> {
    fn scores(&self, g: &mut Graph<'_, F>, hidden: Var) -> Result<Vec<f64>> {
        let rows = g.value(hidden).rows();
        let last = g.slice_rows(hidden, rows - 1, rows)?;
        let logits = self.model.logits(g, last)?;
        Ok(log_softmax(g.value(logits).data()))
    }
}

impl<F: Float> TokenScorer for ModelScorer<'_, F> {
    type State = KvCache<F>;

    fn start(&self) -> Result<(KvCache<F>, Vec<f64>)> {
        let mut g = Graph::no_grad(&self.model.params);
        let mut cache = KvCache::default();
        let p = g.input(self.prefix.clone());
        let mut ids = Vec::with_capacity(self.prompt.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(self.prompt);
        let h = self.model.decoder(&mut g, Some(p), &ids, Some(&mut cache))?;
        let s = self.scores(&mut g, h)?;
        Ok((cache, s))
    }

    fn extend(&self, state: &KvCache<F>, token: TokenId) -> Result<(KvCache<F>, Vec<f64>)> {
        let mut g = Graph::no_grad(&self.model.params);
        let mut cache = state.clone();
        if cache.text_len >= self.model.config.max_text_len {
            // Out of positions: nothing but EOS can follow.
            let mut s = vec![f64::NEG_INFINITY; self.model.config.vocab_size];
            s[crate::text::EOS] = 0.0;
            return Ok((cache, s));
        }
        let h = self.model.decoder(&mut g, None, &[token], Some(&mut cache))?;
        let s = self.scores(&mut g, h)?;
        Ok((cache, s))
    }
}
