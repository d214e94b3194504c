//! Two-stage optimisation: contrastive alignment of the vision path with a
//! text tower, then captioning with optional attention supervision.

mod loss;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::model::{RowOverride, TabModel};
use crate::numerics::{GradBuffer, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::synthdata::{groundtruth_attention, ChangeKind, Color, ObjectShape, ScenePair, BOS, EOS};

pub use loss::{attention_loss, attention_loss_full_row, recall_at_1, retrieval_loss, similarity_logits, stage2_loss};
pub use optim::{lr_at, Adam, AdamConfig, ScheduleKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub adam: AdamConfig,
    pub schedule: ScheduleKind,
    pub warmup: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ce_weight: f64,
    pub att_weight: f64,
    /// Adds the attention loss to the objective (both stages).
    pub attention_supervision: bool,
    /// Supervises the `[CLS]` entry on change pairs as well, comparing the
    /// full row with `(0, G)` instead of the patch entries with `G`.
    pub full_row_targets: bool,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self::toy_stage2()
    }
}

impl TrainRecipe {
    /// Retrieval from scratch needs a higher rate and longer run than captioning.
    pub fn toy_stage1() -> Self {
        TrainRecipe {
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            schedule: ScheduleKind::Cosine,
            epochs: 15,
            ..Self::toy_stage2()
        }
    }

    pub fn toy_stage2() -> Self {
        TrainRecipe {
            adam: AdamConfig::default(),
            schedule: ScheduleKind::Linear,
            warmup: 0.1,
            epochs: 30,
            batch_size: 32,
            ce_weight: 1.0,
            att_weight: 1.0,
            attention_supervision: true,
            full_row_targets: true,
            seed: 0,
        }
    }

    /// Alignment recipe as tabulated in the appendix.
    pub fn paper_stage1_table() -> Self {
        TrainRecipe {
            adam: AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.2 },
            schedule: ScheduleKind::Cosine,
            epochs: 12,
            batch_size: 128,
            attention_supervision: false,
            full_row_targets: false,
            ..Self::toy_stage1()
        }
    }

    /// Alignment recipe with the learning rate quoted in the appendix prose.
    pub fn paper_stage1_text() -> Self {
        let mut r = Self::paper_stage1_table();
        r.adam.lr = 1e-7;
        r
    }

    pub fn paper_stage2() -> Self {
        TrainRecipe {
            adam: AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 },
            schedule: ScheduleKind::Linear,
            epochs: 50,
            batch_size: 64,
            ..Self::toy_stage2()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "toy_stage1" => Self::toy_stage1(),
            "toy_stage2" => Self::toy_stage2(),
            "paper_stage1_table" => Self::paper_stage1_table(),
            "paper_stage1_text" => Self::paper_stage1_text(),
            "paper_stage2" => Self::paper_stage2(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(TabError::Config(format!("warmup {} outside [0, 1)", self.warmup)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TabError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(TabError::Config(format!("learning rate {} must be non-negative", self.adam.lr)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    /// Caption cross-entropy in stage 2, retrieval loss in stage 1.
    pub ce: f64,
    pub att: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_at_1: Option<f64>,
    pub lr: f64,
}

pub fn write_metrics_line(w: &mut dyn Write, m: &EpochMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
}

impl TrainSummary {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Retrieval label of a pair: change kind and object, or no change.
pub type PairLabel = (ChangeKind, Option<(Color, ObjectShape)>);

pub fn pair_label(pair: &ScenePair) -> PairLabel {
    (pair.change.kind(), pair.change.object().map(|o| (o.color, o.shape)))
}

fn caption_ids<T: Scalar>(model: &TabModel<T>, pair: &ScenePair, idx: usize) -> Result<Vec<usize>> {
    let caption = pair
        .captions
        .get(idx)
        .ok_or_else(|| TabError::Parameter(format!("pair {} has no caption {idx}", pair.id)))?;
    model.vocab.encode(caption)
}

fn batches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

fn restore<T: Scalar>(store: &mut ParamStore<T>, snap: &[Vec<T>]) {
    let ids: Vec<_> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
}

fn all_finite<T: Scalar>(grads: &GradBuffer<T>) -> bool {
    grads.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Builds the stage-1 retrieval graph for one batch: `(loss, logits)`.
pub fn stage1_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &TabModel<T>,
    pairs: &[&ScenePair],
    caption_idx: &[usize],
) -> Result<(Var, Var)> {
    let (loss, logits, _) = stage1_graph_supervised(g, model, pairs, caption_idx, None)?;
    Ok((loss, logits))
}

/// Stage-1 graph with the attention loss added when `recipe` asks for it:
/// `(total, logits, att)`.
pub fn stage1_graph_supervised<T: Scalar>(
    g: &mut Graph<T>,
    model: &TabModel<T>,
    pairs: &[&ScenePair],
    caption_idx: &[usize],
    recipe: Option<&TrainRecipe>,
) -> Result<(Var, Var, Option<Var>)> {
    let supervise = recipe.filter(|r| r.attention_supervision);
    let mut vs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    let mut att_terms = Vec::new();
    for (pair, &ci) in pairs.iter().zip(caption_idx) {
        let vars = model.forward_bottleneck(g, &pair.image_a, &pair.image_b, &RowOverride::none())?;
        let sum = g.add(vars.p(0), vars.p(1))?;
        vs.push(g.scale(sum, T::of(0.5)));
        let ids = caption_ids(model, pair, ci)?;
        ts.push(model.encode_text(g, &ids)?);
        if let Some(r) = supervise {
            att_terms.extend(attention_terms(g, model, pair, &vars.sides, r)?);
        }
    }
    let v = g.concat_rows(&vs)?;
    let t = g.concat_rows(&ts)?;
    let log_tau = g.param(&model.store, model.text.log_tau);
    let logits = similarity_logits(g, v, t, log_tau)?;
    let loss = retrieval_loss(g, v, t, log_tau)?;
    let Some(r) = supervise else { return Ok((loss, logits, None)) };
    // per-pair mean so the attention term does not grow with the batch
    let mut att = att_terms[0];
    for &a in &att_terms[1..] {
        att = g.add(att, a)?;
    }
    let att = g.scale(att, T::of(1.0 / pairs.len() as f64));
    let total = stage2_loss(g, loss, &[att], 1.0, r.att_weight)?;
    Ok((total, logits, Some(att)))
}

/// Attention loss of both bottleneck sides against the pair's groundtruth.
fn attention_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &TabModel<T>,
    pair: &ScenePair,
    sides: &[crate::model::SideVars; 2],
    recipe: &TrainRecipe,
) -> Result<[Var; 2]> {
    let gt = groundtruth_attention(pair.bbox.as_ref(), model.config.image_size, model.config.patch_size);
    let loss = if recipe.full_row_targets { attention_loss_full_row } else { attention_loss };
    Ok([loss(g, sides[0].a_cls, &gt)?, loss(g, sides[1].a_cls, &gt)?])
}

/// Per-pair stage-2 terms: `(total, ce, att)`; `att` is zero when `supervise` is off.
pub fn stage2_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &TabModel<T>,
    pair: &ScenePair,
    caption_idx: usize,
    recipe: &TrainRecipe,
) -> Result<(Var, Var, Option<Var>)> {
    let vars = model.forward_bottleneck(g, &pair.image_a, &pair.image_b, &RowOverride::none())?;
    let memory = model.lm_memory(g, vars.p(0), vars.p(1))?;
    let words = caption_ids(model, pair, caption_idx)?;
    let mut inputs = Vec::with_capacity(words.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(&words);
    let mut targets = words;
    targets.push(EOS);
    let logits = model.decoder_logits(g, memory, &inputs)?;
    let ce = g.cross_entropy(logits, &targets, usize::MAX)?;
    let (total, att) = if recipe.attention_supervision {
        let sides = attention_terms(g, model, pair, &vars.sides, recipe)?;
        let att = g.add(sides[0], sides[1])?;
        (stage2_loss(g, ce, &sides, recipe.ce_weight, recipe.att_weight)?, Some(att))
    } else {
        (stage2_loss(g, ce, &[], recipe.ce_weight, recipe.att_weight)?, None)
    };
    Ok((total, ce, att))
}

/// Contrastive alignment of the vision path and the text tower.
///
/// On a non-finite loss the parameters are restored to the end of the last
/// finite epoch and a divergence error is returned.
pub fn train_stage1<T: Scalar>(
    model: &mut TabModel<T>,
    pairs: &[ScenePair],
    recipe: &TrainRecipe,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainSummary> {
    recipe.validate()?;
    if pairs.len() < 2 {
        return Err(TabError::Parameter("stage 1 needs at least two pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = Adam::new(recipe.adam, &model.store);
    let per_epoch = pairs.len().div_ceil(recipe.batch_size);
    let total = per_epoch * recipe.epochs;
    let mut summary = TrainSummary::default();
    let mut good = snapshot(&model.store);
    for epoch in 0..recipe.epochs {
        let (mut loss_sum, mut att_sum, mut r1_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in batches(pairs.len(), recipe.batch_size, &mut rng) {
            if batch.len() < 2 {
                continue;
            }
            let members: Vec<&ScenePair> = batch.iter().map(|&i| &pairs[i]).collect();
            let caps: Vec<usize> = members.iter().map(|p| rng.random_range(0..p.captions.len())).collect();
            let mut g = Graph::new();
            let (loss, logits, att) = stage1_graph_supervised(&mut g, model, &members, &caps, Some(recipe))?;
            let value = g.scalar(loss).as_f64();
            if let Some(a) = att {
                att_sum += g.scalar(a).as_f64();
            }
            if !value.is_finite() {
                restore(&mut model.store, &good);
                return Err(TabError::Divergence { stage: 1, epoch });
            }
            let sim: Vec<f64> = g.value(logits).iter().map(|v| v.as_f64()).collect();
            let labels: Vec<PairLabel> = members.iter().map(|p| pair_label(p)).collect();
            r1_sum += recall_at_1(&sim, &labels);
            g.backward(loss)?;
            let grads = g.param_grads(model.store.len());
            if !all_finite(&grads) {
                restore(&mut model.store, &good);
                return Err(TabError::Divergence { stage: 1, epoch });
            }
            lr = lr_at(recipe.schedule, recipe.adam.lr, recipe.warmup, summary.steps, total);
            adam.step(&mut model.store, &grads, lr);
            summary.steps += 1;
            loss_sum += value;
            count += 1;
        }
        let n = count.max(1) as f64;
        let m = EpochMetrics {
            stage: 1,
            epoch,
            loss: loss_sum / n,
            ce: (loss_sum - recipe.att_weight * att_sum) / n,
            att: att_sum / n,
            r_at_1: Some(r1_sum / n),
            lr,
        };
        tracing::debug!(epoch, loss = m.loss, r_at_1 = r1_sum / n, "stage 1 epoch");
        on_epoch(&m)?;
        summary.epochs.push(m);
        good = snapshot(&model.store);
    }
    Ok(summary)
}

/// Captioning with cross-entropy plus optional attention supervision.
///
/// Per-pair gradients are computed in parallel and summed in batch order, so
/// results do not depend on the thread count.
pub fn train_stage2<T: Scalar>(
    model: &mut TabModel<T>,
    pairs: &[ScenePair],
    recipe: &TrainRecipe,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainSummary> {
    recipe.validate()?;
    if pairs.is_empty() {
        return Err(TabError::Parameter("stage 2 needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = Adam::new(recipe.adam, &model.store);
    let per_epoch = pairs.len().div_ceil(recipe.batch_size);
    let total = per_epoch * recipe.epochs;
    let mut summary = TrainSummary::default();
    let mut good = snapshot(&model.store);
    let num_params = model.store.len();
    for epoch in 0..recipe.epochs {
        let (mut loss_sum, mut ce_sum, mut att_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in batches(pairs.len(), recipe.batch_size, &mut rng) {
            let jobs: Vec<(usize, usize)> =
                batch.iter().map(|&i| (i, rng.random_range(0..pairs[i].captions.len()))).collect();
            let scale = T::of(1.0 / batch.len() as f64);
            let shared: &TabModel<T> = model;
            let results: Vec<Result<(GradBuffer<T>, [f64; 3])>> = jobs
                .par_iter()
                .map(|&(i, ci)| {
                    let mut g = Graph::new();
                    let (total, ce, att) = stage2_graph(&mut g, shared, &pairs[i], ci, recipe)?;
                    let values = [
                        g.scalar(total).as_f64(),
                        g.scalar(ce).as_f64(),
                        att.map_or(0.0, |a| g.scalar(a).as_f64()),
                    ];
                    let scaled = g.scale(total, scale);
                    g.backward(scaled)?;
                    Ok((g.param_grads(num_params), values))
                })
                .collect();
            let mut grads = GradBuffer::new(num_params);
            for r in results {
                let (gb, [t, c, a]) = r?;
                if !t.is_finite() {
                    restore(&mut model.store, &good);
                    return Err(TabError::Divergence { stage: 2, epoch });
                }
                grads.merge(&gb);
                loss_sum += t;
                ce_sum += c;
                att_sum += a;
                seen += 1;
            }
            if !all_finite(&grads) {
                restore(&mut model.store, &good);
                return Err(TabError::Divergence { stage: 2, epoch });
            }
            lr = lr_at(recipe.schedule, recipe.adam.lr, recipe.warmup, summary.steps, total);
            adam.step(&mut model.store, &grads, lr);
            summary.steps += 1;
        }
        let n = seen.max(1) as f64;
        let m = EpochMetrics { stage: 2, epoch, loss: loss_sum / n, ce: ce_sum / n, att: att_sum / n, r_at_1: None, lr };
        tracing::debug!(epoch, loss = m.loss, ce = m.ce, att = m.att, "stage 2 epoch");
        on_epoch(&m)?;
        summary.epochs.push(m);
        good = snapshot(&model.store);
    }
    Ok(summary)
}

/// In-batch R@1 of image-pair→text retrieval over consecutive batches, using
/// each pair's first caption. Batches smaller than two are skipped.
pub fn retrieval_r_at_1<T: Scalar>(model: &TabModel<T>, pairs: &[ScenePair], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let members: Vec<&ScenePair> = chunk.iter().collect();
        let mut g = Graph::new();
        let (_, logits) = stage1_graph(&mut g, model, &members, &vec![0; chunk.len()])?;
        let sim: Vec<f64> = g.value(logits).iter().map(|v| v.as_f64()).collect();
        let labels: Vec<PairLabel> = members.iter().map(|p| pair_label(p)).collect();
        sum += recall_at_1(&sim, &labels) * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(TabError::Eval("no batch of at least two pairs".into()));
    }
    Ok(sum / count as f64)
}
