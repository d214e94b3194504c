//! Test-time replacement of the bottleneck's `[CLS]` attention row.
//!
//! An edit substitutes the post-softmax row before the gate is computed, so
//! the gate and the gated row follow from the edited values. With the
//! multi-head baseline every head's row is replaced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::metrics::{accuracy_of, judge, CaptionAccuracy, Verdict};
use crate::model::{RowOverride, TabModel, TabState};
use crate::scalar::Scalar;
use crate::synthdata::{groundtruth_attention, ScenePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    /// `[CLS]` entry 1, patches 0: the gate closes.
    Zero,
    /// The pair's groundtruth row.
    Correct,
    /// A caller-supplied row.
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditSide {
    First,
    Second,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionEdit {
    pub kind: EditKind,
    #[serde(default)]
    pub side: EditSide,
    /// Length `n + 1` with the `[CLS]` entry first; required for `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<Vec<f64>>,
    /// Reject out-of-range entries instead of clamping them.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub strict: bool,
}

impl AttentionEdit {
    pub fn zero() -> Self {
        AttentionEdit { kind: EditKind::Zero, side: EditSide::Both, row: None, strict: false }
    }

    pub fn correct() -> Self {
        AttentionEdit { kind: EditKind::Correct, ..Self::zero() }
    }

    pub fn custom(row: Vec<f64>, side: EditSide) -> Self {
        AttentionEdit { kind: EditKind::Custom, side, row: Some(row), strict: false }
    }

    /// The replacement row for an `n`-patch model, validated and clamped to `[0, 1]`.
    pub fn row_for(&self, n: usize, pair: &ScenePair, image_size: usize, patch_size: usize) -> Result<Vec<f64>> {
        let bad = |msg: String| TabError::Edit { field: "edit.row".into(), msg };
        match self.kind {
            EditKind::Zero => {
                let mut row = vec![0.0; n + 1];
                row[0] = 1.0;
                Ok(row)
            }
            EditKind::Correct => {
                let gt = groundtruth_attention(pair.bbox.as_ref(), image_size, patch_size);
                Ok(gt.full_row().iter().map(|&v| v as f64).collect())
            }
            EditKind::Custom => {
                let row = self.row.as_ref().ok_or_else(|| bad("required for custom edits".into()))?;
                if row.len() != n + 1 {
                    return Err(bad(format!("expected {} entries, got {}", n + 1, row.len())));
                }
                row.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if !v.is_finite() {
                            Err(TabError::Edit { field: format!("edit.row[{i}]"), msg: "not a finite number".into() })
                        } else if self.strict && !(0.0..=1.0).contains(&v) {
                            Err(TabError::Edit { field: format!("edit.row[{i}]"), msg: format!("{v} outside [0, 1]") })
                        } else {
                            Ok(v.clamp(0.0, 1.0))
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn overrides<T: Scalar>(&self, model: &TabModel<T>, pair: &ScenePair) -> Result<RowOverride<T>> {
        let c = &model.config;
        let row: Vec<T> = self
            .row_for(c.num_patches(), pair, c.image_size, c.patch_size)?
            .into_iter()
            .map(T::of)
            .collect();
        let (first, second) = match self.side {
            EditSide::First => (true, false),
            EditSide::Second => (false, true),
            EditSide::Both => (true, true),
        };
        Ok(RowOverride { rows: [first.then(|| row.clone()), second.then_some(row)] })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub base_caption: String,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub before: TabState,
    pub after: TabState,
}

/// Unedited and edited passes over one pair.
pub fn apply_edit<T: Scalar>(model: &TabModel<T>, pair: &ScenePair, edit: &AttentionEdit) -> Result<EditOutcome> {
    let overrides = edit.overrides(model, pair)?;
    let base = model.forward_pair(&pair.image_a, &pair.image_b, &RowOverride::none())?;
    let edited = model.forward_pair(&pair.image_a, &pair.image_b, &overrides)?;
    Ok(EditOutcome {
        base_caption: base.caption,
        caption: edited.caption,
        tokens: edited.tokens,
        before: base.state,
        after: edited.state,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Zero edit on every pair.
    Zero,
    /// Groundtruth edit on pairs whose base caption is wrong.
    Correct,
}

impl Protocol {
    pub fn edit(self) -> AttentionEdit {
        match self {
            Protocol::Zero => AttentionEdit::zero(),
            Protocol::Correct => AttentionEdit::correct(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionReport {
    pub protocol: Protocol,
    pub pairs: usize,
    pub edited: usize,
    pub before: CaptionAccuracy,
    pub after: CaptionAccuracy,
}

pub fn intervention_report<T: Scalar>(
    model: &TabModel<T>,
    pairs: &[&ScenePair],
    protocol: Protocol,
) -> Result<InterventionReport> {
    let edit = protocol.edit();
    let rows: Vec<(Verdict, Verdict, bool)> = pairs
        .par_iter()
        .map(|pair| {
            let base = model.forward_pair(&pair.image_a, &pair.image_b, &RowOverride::none())?;
            let before = judge(&base.caption, pair);
            let apply = match protocol {
                Protocol::Zero => true,
                Protocol::Correct => !before.correct(),
            };
            if !apply {
                return Ok((before, before, false));
            }
            let edited = model.forward_pair(&pair.image_a, &pair.image_b, &edit.overrides(model, pair)?)?;
            Ok((before, judge(&edited.caption, pair), true))
        })
        .collect::<Result<_>>()?;
    let before: Vec<Verdict> = rows.iter().map(|r| r.0).collect();
    let after: Vec<Verdict> = rows.iter().map(|r| r.1).collect();
    Ok(InterventionReport {
        protocol,
        pairs: pairs.len(),
        edited: rows.iter().filter(|r| r.2).count(),
        before: accuracy_of(&before),
        after: accuracy_of(&after),
    })
}
