//! Pair captioner: patchifier, single-image encoder, cross encoder, attention
//! bottleneck, caption language model and a text tower for alignment.
//!
//! Token sequences have `n + 1` rows with the `[CLS]` token first. The
//! bottleneck only computes the `[CLS]` query row of its attention map.

mod checkpoint;
mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::synthdata::{Image, Vocab, BOS, EOS};

pub use checkpoint::{checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{BottleneckKind, ModelConfig};
pub use layers::{attention, causal_mask, DecoderLayer, EncoderLayer, EncoderStack, LayerNorm, Linear};

use layers::Init;

/// Init scale of the image positional table. Large next to the 0.02 used for
/// other embeddings so positions stay separable through the encoders.
const POS_STD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub single: EncoderStack,
    pub e1: ParamId,
    pub e2: ParamId,
    pub pos_pair: ParamId,
    pub cross: EncoderStack,
}

/// Single-head bottleneck weights. No bias on Q/K/V and no residual input.
#[derive(Clone, Copy, Debug)]
pub struct TabParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Linear,
    pub proj: Linear,
}

/// Multi-head cross-attention baseline that keeps its residual path.
#[derive(Clone, Copy, Debug)]
pub struct BaselineParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Linear,
    pub proj: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Bottleneck {
    Tab(TabParams),
    Baseline(BaselineParams),
}

#[derive(Clone, Debug)]
pub struct LanguageParams {
    pub in_proj: Linear,
    pub mem_pos: ParamId,
    pub encoder: EncoderStack,
    pub tokens: ParamId,
    pub pos: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct TextParams {
    pub tokens: ParamId,
    pub pos: ParamId,
    pub encoder: EncoderStack,
    pub proj: Linear,
    /// Log of the retrieval temperature.
    pub log_tau: ParamId,
}

/// Replacement `[CLS]` rows applied after the softmax, per image side.
#[derive(Clone, Debug, Default)]
pub struct RowOverride<T> {
    pub rows: [Option<Vec<T>>; 2],
}

impl<T> RowOverride<T> {
    pub fn none() -> Self {
        RowOverride { rows: [None, None] }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Option::is_none)
    }
}

/// Graph handles of one bottleneck side.
#[derive(Clone, Debug)]
pub struct SideVars {
    /// `[CLS]` row actually used downstream (edited when an override is set);
    /// the head mean for the baseline.
    pub a_cls: Var,
    /// Unedited softmax row(s), one per head.
    pub heads: Vec<Var>,
    pub gate: Option<Var>,
    pub a_prime: Option<Var>,
    pub h_cls: Var,
    pub p: Var,
}

#[derive(Clone, Debug)]
pub struct BottleneckVars {
    pub sides: [SideVars; 2],
}

impl BottleneckVars {
    pub fn p(&self, side: usize) -> Var {
        self.sides[side].p
    }
}

/// Bottleneck values of one side, copied out of the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideState {
    /// Post-softmax `[CLS]` row, `n + 1` entries with `[CLS]` first.
    pub a_cls: Vec<f64>,
    /// Attention mass on the `n` patches.
    pub gate: f64,
    /// Gated row `a_cls · gate`; equals `a_cls` for the baseline.
    pub a_prime: Vec<f64>,
    pub p: Vec<f64>,
    /// Per-head rows (one for TAB).
    pub heads: Vec<Vec<f64>>,
}

impl SideState {
    pub fn patch_attention(&self) -> &[f64] {
        &self.a_cls[1..]
    }
}

/// Bottleneck state of both sides of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabState {
    pub sides: [SideState; 2],
}

impl TabState {
    pub fn p1(&self) -> &[f64] {
        &self.sides[0].p
    }

    pub fn p2(&self) -> &[f64] {
        &self.sides[1].p
    }

    /// Element-wise max of the two sides' patch attentions.
    pub fn combined_patch_attention(&self) -> Vec<f64> {
        self.sides[0]
            .patch_attention()
            .iter()
            .zip(self.sides[1].patch_attention())
            .map(|(a, b)| a.max(*b))
            .collect()
    }
}

/// Caption and bottleneck state of one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutput {
    pub tokens: Vec<usize>,
    pub caption: String,
    pub state: TabState,
}

/// The full captioning network and its parameters.
#[derive(Clone, Debug)]
pub struct TabModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub vision: VisionParams,
    pub bottleneck: Bottleneck,
    pub language: LanguageParams,
    pub text: TextParams,
    pub vocab: Vocab,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

impl<T: Scalar> TabModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::build();
        if config.vocab_size != vocab.len() {
            return Err(TabError::Config(format!(
                "vocab_size {} does not match the caption vocabulary ({})",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let c = &config;
        let d = c.d_model;
        let n1 = c.num_patches() + 1;
        let emb_std = 0.02;

        let pos = init.normal("vision.pos", vec![n1, d], POS_STD)?;
        // both halves of the pair positional table start equal so matching
        // positions across the two images begin aligned
        let half = init.store.get(pos).data().to_vec();
        let mut pair_pos = half.clone();
        pair_pos.extend_from_slice(&half);
        let vision = VisionParams {
            patch: init.linear("vision.patch", c.patch_dim(), d, true)?,
            cls: init.normal("vision.cls", vec![1, d], emb_std)?,
            pos,
            single: EncoderStack::new(&mut init, "vision.single", c.enc_layers, d, c.enc_heads, c.ffn_mult)?,
            e1: init.normal("vision.e1", vec![d], emb_std)?,
            e2: init.normal("vision.e2", vec![d], emb_std)?,
            pos_pair: init.tensor("vision.pos_pair", Tensor::new(vec![2 * n1, d], pair_pos)?)?,
            cross: EncoderStack::new(&mut init, "vision.cross", c.cross_layers, d, c.cross_heads, c.ffn_mult)?,
        };
        let std = 1.0 / (d as f64).sqrt();
        let bottleneck = match c.bottleneck {
            BottleneckKind::Tab => Bottleneck::Tab(TabParams {
                wq: init.normal("tab.wq", vec![d, d], std)?,
                wk: init.normal("tab.wk", vec![d, d], std)?,
                wv: init.normal("tab.wv", vec![d, d], std)?,
                wo: init.linear("tab.wo", d, d, true)?,
                proj: init.linear("tab.proj", d, c.proj_dim, true)?,
            }),
            BottleneckKind::MhsaBaseline => Bottleneck::Baseline(BaselineParams {
                wq: init.normal("mhsa.wq", vec![d, d], std)?,
                wk: init.normal("mhsa.wk", vec![d, d], std)?,
                wv: init.normal("mhsa.wv", vec![d, d], std)?,
                wo: init.linear("mhsa.wo", d, d, true)?,
                proj: init.linear("mhsa.proj", d, c.proj_dim, true)?,
                heads: c.baseline_heads,
            }),
        };

        let v = c.vocab_size;
        let language = LanguageParams {
            in_proj: init.linear("lm.in_proj", c.proj_dim, d, true)?,
            mem_pos: init.normal("lm.mem_pos", vec![2, d], emb_std)?,
            encoder: EncoderStack::new(&mut init, "lm.enc", c.lm_enc_layers, d, c.lm_heads, c.ffn_mult)?,
            tokens: init.normal("lm.tokens", vec![v, d], emb_std)?,
            pos: init.normal("lm.pos", vec![c.max_caption_len + 1, d], emb_std)?,
            layers: (0..c.lm_dec_layers)
                .map(|i| DecoderLayer::new(&mut init, &format!("lm.dec.{i}"), d, c.lm_heads, c.ffn_mult))
                .collect::<Result<_>>()?,
            ln_f: init.layer_norm("lm.ln_f", d)?,
            head: init.linear("lm.head", d, v, true)?,
        };

        let text = TextParams {
            tokens: init.normal("text.tokens", vec![v, d], emb_std)?,
            pos: init.normal("text.pos", vec![c.max_caption_len + 2, d], emb_std)?,
            encoder: EncoderStack::new(&mut init, "text.enc", c.text_layers, d, c.text_heads, c.ffn_mult)?,
            proj: init.linear("text.proj", d, c.proj_dim, false)?,
            log_tau: init.constant("text.log_tau", vec![1], (0.07f64).ln())?,
        };

        Ok(TabModel { config, store, vision, bottleneck, language, text, vocab })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> TabModel<U> {
        TabModel {
            config: self.config.clone(),
            store: self.store.cast(),
            vision: self.vision.clone(),
            bottleneck: self.bottleneck,
            language: self.language.clone(),
            text: self.text.clone(),
            vocab: self.vocab.clone(),
        }
    }

    pub fn kind(&self) -> BottleneckKind {
        self.config.bottleneck
    }

    /// Flattened patches, `n × (P·P·C)`, patch index row-major over the grid.
    pub fn patch_matrix(&self, img: &Image) -> Result<Vec<T>> {
        let c = &self.config;
        if img.height != c.image_size || img.width != c.image_size || img.channels != c.channels {
            return Err(TabError::Config(format!(
                "image {}x{}x{} does not match model input {}x{}x{}",
                img.height, img.width, img.channels, c.image_size, c.image_size, c.channels
            )));
        }
        let (p, ps, ch) = (c.patch_grid(), c.patch_size, c.channels);
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for pr in 0..p {
            for pc in 0..p {
                for y in 0..ps {
                    let row = (pr * ps + y) * img.width + pc * ps;
                    let start = row * ch;
                    out.extend(img.data[start..start + ps * ch].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        Ok(out)
    }

    /// `[CLS]` followed by projected patches, plus positional embeddings.
    pub fn patchify(&self, g: &mut Graph<T>, img: &Image) -> Result<Var> {
        let s = &self.store;
        let c = &self.config;
        let patches = g.constant(vec![c.num_patches(), c.patch_dim()], self.patch_matrix(img)?)?;
        let emb = self.vision.patch.forward(g, s, patches)?;
        let cls = g.param(s, self.vision.cls);
        let tokens = g.concat_rows(&[cls, emb])?;
        let pos = g.param(s, self.vision.pos);
        g.add(tokens, pos)
    }

    pub fn encode_single(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        self.vision.single.forward(g, &self.store, tokens, None)
    }

    /// Joint encoding of both sequences with image-order and pair-position embeddings.
    pub fn encode_cross(&self, g: &mut Graph<T>, f1: Var, f2: Var) -> Result<(Var, Var)> {
        let s = &self.store;
        let n1 = self.config.num_patches() + 1;
        for f in [f1, f2] {
            if g.shape(f)[0] != n1 {
                return Err(TabError::Dimension { op: "encode_cross", lhs: g.shape(f).to_vec(), rhs: vec![n1] });
            }
        }
        let e1 = g.param(s, self.vision.e1);
        let e2 = g.param(s, self.vision.e2);
        let (f1, f2) = if self.config.pair_difference {
            // row i of both sequences covers the same patch position
            let d12 = g.sub(f1, f2)?;
            let d21 = g.sub(f2, f1)?;
            (g.add(f1, d12)?, g.add(f2, d21)?)
        } else {
            (f1, f2)
        };
        let x1 = g.add_row(f1, e1)?;
        let x2 = g.add_row(f2, e2)?;
        let y = g.concat_rows(&[x1, x2])?;
        let pos = g.param(s, self.vision.pos_pair);
        let y = g.add(y, pos)?;
        let y = self.vision.cross.forward(g, s, y, None)?;
        Ok((g.slice_rows(y, 0, n1)?, g.slice_rows(y, n1, n1)?))
    }

    /// Both images through patchify, the single encoder and the cross encoder.
    pub fn encode_pair(&self, g: &mut Graph<T>, a: &Image, b: &Image) -> Result<(Var, Var)> {
        let t1 = self.patchify(g, a)?;
        let t2 = self.patchify(g, b)?;
        let f1 = self.encode_single(g, t1)?;
        let f2 = self.encode_single(g, t2)?;
        self.encode_cross(g, f1, f2)
    }

    fn override_row(&self, g: &mut Graph<T>, row: &[T]) -> Result<Var> {
        let n1 = self.config.num_patches() + 1;
        if row.len() != n1 {
            return Err(TabError::Edit { field: "row".into(), msg: format!("expected {n1} entries, got {}", row.len()) });
        }
        g.constant(vec![1, n1], row.to_vec())
    }

    /// One gated single-head co-attention side: query `[CLS]` of `fq`, keys and values from `fk`.
    pub fn tab_side(&self, g: &mut Graph<T>, p: &TabParams, fq: Var, fk: Var, edit: Option<&[T]>) -> Result<SideVars> {
        let s = &self.store;
        let n = self.config.num_patches();
        let d = self.config.d_model;
        let wq = g.param(s, p.wq);
        let wk = g.param(s, p.wk);
        let wv = if self.config.share_kv { wk } else { g.param(s, p.wv) };
        let cls = g.row(fq, 0)?;
        let q = g.matmul(cls, wq)?;
        let k = g.matmul(fk, wk)?;
        let v = g.matmul(fk, wv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()));
        let a = g.softmax_rows(scores)?;
        let a_used = match edit {
            Some(row) => self.override_row(g, row)?,
            None => a,
        };
        let patches = g.slice_cols(a_used, 1, n)?;
        let gate = g.sum(patches);
        let a_prime = g.mul_scalar(a_used, gate)?;
        let mixed = g.matmul(a_prime, v)?;
        let h = p.wo.forward(g, s, mixed)?;
        let out = p.proj.forward(g, s, h)?;
        Ok(SideVars { a_cls: a_used, heads: vec![a], gate: Some(gate), a_prime: Some(a_prime), h_cls: h, p: out })
    }

    /// Multi-head cross-attention side with the residual from `fq`'s `[CLS]` token.
    pub fn baseline_side(
        &self,
        g: &mut Graph<T>,
        p: &BaselineParams,
        fq: Var,
        fk: Var,
        edit: Option<&[T]>,
    ) -> Result<SideVars> {
        let s = &self.store;
        let d = self.config.d_model;
        let dh = d / p.heads;
        let wq = g.param(s, p.wq);
        let wk = g.param(s, p.wk);
        let wv = if self.config.share_kv { wk } else { g.param(s, p.wv) };
        let cls = g.row(fq, 0)?;
        let q = g.matmul(cls, wq)?;
        let k = g.matmul(fk, wk)?;
        let v = g.matmul(fk, wv)?;
        let edit_var = edit.map(|row| self.override_row(g, row)).transpose()?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(p.heads);
        let mut used = Vec::with_capacity(p.heads);
        let mut outs = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let sc = g.matmul_nt(qh, kh)?;
            let sc = g.scale(sc, scale);
            let a = g.softmax_rows(sc)?;
            let a_used = edit_var.unwrap_or(a);
            outs.push(g.matmul(a_used, vh)?);
            heads.push(a);
            used.push(a_used);
        }
        let cat = g.concat_cols(&outs)?;
        let attn = p.wo.forward(g, s, cat)?;
        let h = g.add(cls, attn)?;
        let out = p.proj.forward(g, s, h)?;
        let stacked = g.concat_rows(&used)?;
        let mean = g.mean_rows(stacked);
        Ok(SideVars { a_cls: mean, heads, gate: None, a_prime: None, h_cls: h, p: out })
    }

    /// Both sides of the configured bottleneck; side 1 queries image 1 against image 2 and vice versa.
    pub fn bottleneck_forward(
        &self,
        g: &mut Graph<T>,
        f1: Var,
        f2: Var,
        edit: &RowOverride<T>,
    ) -> Result<BottleneckVars> {
        let e = |i: usize| edit.rows[i].as_deref();
        let sides = match &self.bottleneck {
            Bottleneck::Tab(p) => [self.tab_side(g, p, f1, f2, e(0))?, self.tab_side(g, p, f2, f1, e(1))?],
            Bottleneck::Baseline(p) => {
                [self.baseline_side(g, p, f1, f2, e(0))?, self.baseline_side(g, p, f2, f1, e(1))?]
            }
        };
        Ok(BottleneckVars { sides })
    }

    pub fn side_state(&self, g: &Graph<T>, side: &SideVars) -> SideState {
        let a_cls = to_f64(g.value(side.a_cls));
        let gate = match side.gate {
            Some(v) => g.scalar(v).as_f64(),
            None => a_cls[1..].iter().sum(),
        };
        let a_prime = side.a_prime.map_or_else(|| a_cls.clone(), |v| to_f64(g.value(v)));
        SideState {
            a_cls,
            gate,
            a_prime,
            p: to_f64(g.value(side.p)),
            heads: side.heads.iter().map(|&h| to_f64(g.value(h))).collect(),
        }
    }

    pub fn tab_state(&self, g: &Graph<T>, vars: &BottleneckVars) -> TabState {
        TabState { sides: [self.side_state(g, &vars.sides[0]), self.side_state(g, &vars.sides[1])] }
    }

    /// Language-encoder memory over the two bottleneck vectors.
    pub fn lm_memory(&self, g: &mut Graph<T>, p1: Var, p2: Var) -> Result<Var> {
        let s = &self.store;
        let x = g.concat_rows(&[p1, p2])?;
        let x = self.language.in_proj.forward(g, s, x)?;
        let pos = g.param(s, self.language.mem_pos);
        let x = g.add(x, pos)?;
        self.language.encoder.forward(g, s, x, None)
    }

    /// Teacher-forced next-token logits (`T × V`) for `inputs` (starting with BOS).
    pub fn decoder_logits(&self, g: &mut Graph<T>, memory: Var, inputs: &[usize]) -> Result<Var> {
        let s = &self.store;
        let t = inputs.len();
        if t == 0 || t > self.config.max_caption_len + 1 {
            return Err(TabError::Parameter(format!("decoder input length {t} out of range")));
        }
        let table = g.param(s, self.language.tokens);
        let x = g.embedding(table, inputs)?;
        let pos = g.param(s, self.language.pos);
        let pos = g.slice_rows(pos, 0, t)?;
        let mut x = g.add(x, pos)?;
        let mask = causal_mask(g, t)?;
        for layer in &self.language.layers {
            x = layer.forward(g, s, x, memory, mask)?;
        }
        let x = self.language.ln_f.forward(g, s, x)?;
        self.language.head.forward(g, s, x)
    }

    /// Greedy decoding until EOS or the word limit. Ties pick the lowest id.
    pub fn greedy_decode(&self, g: &mut Graph<T>, memory: Var) -> Result<Vec<usize>> {
        let v = self.config.vocab_size;
        let mut inputs = vec![BOS];
        let mut words = Vec::new();
        while words.len() < self.config.max_caption_len {
            let logits = self.decoder_logits(g, memory, &inputs)?;
            let last = &g.value(logits)[(inputs.len() - 1) * v..inputs.len() * v];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            words.push(best);
            inputs.push(best);
        }
        Ok(words)
    }

    /// Caption embedding: causal text encoder, last-token pooling, projection.
    pub fn encode_text(&self, g: &mut Graph<T>, words: &[usize]) -> Result<Var> {
        let s = &self.store;
        if words.len() > self.config.max_caption_len {
            return Err(TabError::Parameter(format!(
                "caption has {} words, limit {}",
                words.len(),
                self.config.max_caption_len
            )));
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.push(EOS);
        let t = ids.len();
        let table = g.param(s, self.text.tokens);
        let x = g.embedding(table, &ids)?;
        let pos = g.param(s, self.text.pos);
        let pos = g.slice_rows(pos, 0, t)?;
        let x = g.add(x, pos)?;
        let mask = causal_mask(g, t)?;
        let x = self.text.encoder.forward(g, s, x, Some(mask))?;
        let last = g.row(x, t - 1)?;
        self.text.proj.forward(g, s, last)
    }

    /// Vision path through the bottleneck.
    pub fn forward_bottleneck(
        &self,
        g: &mut Graph<T>,
        a: &Image,
        b: &Image,
        edit: &RowOverride<T>,
    ) -> Result<BottleneckVars> {
        let (f1, f2) = self.encode_pair(g, a, b)?;
        self.bottleneck_forward(g, f1, f2, edit)
    }

    /// Caption and bottleneck state for an image pair, with optional row overrides.
    pub fn forward_pair(&self, a: &Image, b: &Image, edit: &RowOverride<T>) -> Result<PairOutput> {
        let mut g = Graph::new();
        let vars = self.forward_bottleneck(&mut g, a, b, edit)?;
        let state = self.tab_state(&g, &vars);
        let memory = self.lm_memory(&mut g, vars.p(0), vars.p(1))?;
        let tokens = self.greedy_decode(&mut g, memory)?;
        let caption = self.vocab.decode(&tokens);
        Ok(PairOutput { tokens, caption, state })
    }

    /// Decodes from explicit bottleneck vectors.
    pub fn decode_from_p(&self, p1: &[T], p2: &[T]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let dim = self.config.proj_dim;
        let p1 = g.constant(vec![1, dim], p1.to_vec())?;
        let p2 = g.constant(vec![1, dim], p2.to_vec())?;
        let memory = self.lm_memory(&mut g, p1, p2)?;
        self.greedy_decode(&mut g, memory)
    }
}

#[cfg(test)]
mod tests;
