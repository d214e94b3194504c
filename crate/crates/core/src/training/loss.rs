use crate::error::{Result, TabError};
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;
use crate::synthdata::GroundtruthAttention;

/// Symmetric in-batch contrastive loss `L_i2t + L_t2i`.
///
/// `v` and `t` are `B × k`; similarities are cosines divided by
/// `exp(log_tau)`. Row `i` of `v` is matched with row `i` of `t`.
pub fn retrieval_loss<T: Scalar>(g: &mut Graph<T>, v: Var, t: Var, log_tau: Var) -> Result<Var> {
    if g.shape(v) != g.shape(t) || g.shape(v).len() != 2 {
        return Err(TabError::Dimension { op: "retrieval_loss", lhs: g.shape(v).to_vec(), rhs: g.shape(t).to_vec() });
    }
    let b = g.shape(v)[0];
    let logits = similarity_logits(g, v, t, log_tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = g.cross_entropy(logits, &targets, usize::MAX)?;
    let logits_t = g.transpose(logits)?;
    let t2i = g.cross_entropy(logits_t, &targets, usize::MAX)?;
    g.add(i2t, t2i)
}

/// `B × B` matrix of `cos(v_i, t_j) / tau`.
pub fn similarity_logits<T: Scalar>(g: &mut Graph<T>, v: Var, t: Var, log_tau: Var) -> Result<Var> {
    let vn = g.l2_normalize_rows(v);
    let tn = g.l2_normalize_rows(t);
    let sim = g.matmul_nt(vn, tn)?;
    let neg = g.scale(log_tau, -T::one());
    let inv_tau = g.exp(neg);
    g.mul_scalar(sim, inv_tau)
}

/// Cosine distance between the attention row and its target.
///
/// `a_row` is the full `1 × (n+1)` `[CLS]` row. Change pairs compare the `n`
/// patch entries with `G`; no-change pairs compare the whole row with
/// `(1, 0, …, 0)`.
pub fn attention_loss<T: Scalar>(g: &mut Graph<T>, a_row: Var, gt: &GroundtruthAttention) -> Result<Var> {
    let n = gt.g.len();
    if g.shape(a_row) != [1, n + 1] {
        return Err(TabError::Dimension { op: "attention_loss", lhs: g.shape(a_row).to_vec(), rhs: vec![1, n + 1] });
    }
    if gt.is_no_change() {
        let target = gt.full_row().iter().map(|&x| T::of(x as f64)).collect();
        let target = g.constant(vec![1, n + 1], target)?;
        g.cosine_distance(a_row, target)
    } else {
        let patches = g.slice_cols(a_row, 1, n)?;
        let target = g.constant(vec![1, n], gt.g.iter().map(|&x| T::of(x as f64)).collect())?;
        g.cosine_distance(patches, target)
    }
}

/// Cosine distance between the full row and `(cls_target, G)` for every pair.
///
/// Unlike [`attention_loss`] this also pulls the `[CLS]` entry of change
/// pairs to zero, which keeps the gate open where a change was found.
pub fn attention_loss_full_row<T: Scalar>(g: &mut Graph<T>, a_row: Var, gt: &GroundtruthAttention) -> Result<Var> {
    let n = gt.g.len();
    if g.shape(a_row) != [1, n + 1] {
        return Err(TabError::Dimension { op: "attention_loss", lhs: g.shape(a_row).to_vec(), rhs: vec![1, n + 1] });
    }
    let target = g.constant(vec![1, n + 1], gt.full_row().iter().map(|&x| T::of(x as f64)).collect())?;
    g.cosine_distance(a_row, target)
}

/// `ce_weight · ce + att_weight · Σ_sides att`.
pub fn stage2_loss<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    att_sides: &[Var],
    ce_weight: f64,
    att_weight: f64,
) -> Result<Var> {
    let mut total = g.scale(ce, T::of(ce_weight));
    for &a in att_sides {
        let a = g.scale(a, T::of(att_weight));
        total = g.add(total, a)?;
    }
    Ok(total)
}

/// Fraction of rows whose most similar column carries the same label.
/// Ties go to the lowest column index.
pub fn recall_at_1<L: PartialEq>(sim: &[f64], labels: &[L]) -> f64 {
    let b = labels.len();
    if b == 0 {
        return 0.0;
    }
    let hits = (0..b)
        .filter(|&i| {
            let row = &sim[i * b..(i + 1) * b];
            let mut best = 0;
            for j in 1..b {
                if row[j] > row[best] {
                    best = j;
                }
            }
            labels[best] == labels[i]
        })
        .count();
    hits as f64 / b as f64
}
