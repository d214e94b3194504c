use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::synthdata::{parse_caption, ScenePair};

/// Template-matching accuracies in percent; `None` for a class with no pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionAccuracy {
    pub change: Option<f64>,
    pub no_change: Option<f64>,
    pub object: Option<f64>,
}

/// Per-pair verdict of a predicted caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub is_change_pair: bool,
    /// Change template on a change pair, or verbatim no-change template on a no-change pair.
    pub class_hit: bool,
    /// Slot equals the changed object's name; always false on no-change pairs.
    pub object_hit: bool,
}

impl Verdict {
    /// Fully correct: right class and, on change pairs, the right object.
    pub fn correct(&self) -> bool {
        self.class_hit && (!self.is_change_pair || self.object_hit)
    }
}

pub fn judge(prediction: &str, pair: &ScenePair) -> Verdict {
    let parsed = parse_caption(prediction);
    match pair.change.object() {
        Some(obj) => Verdict {
            is_change_pair: true,
            class_hit: parsed.is_change(),
            object_hit: parsed.object() == Some(obj.name().as_str()),
        },
        None => Verdict {
            is_change_pair: false,
            class_hit: parsed == crate::synthdata::ParsedCaption::NoChange,
            object_hit: false,
        },
    }
}

pub fn accuracy_of(verdicts: &[Verdict]) -> CaptionAccuracy {
    let pct = |hits: usize, n: usize| (n > 0).then(|| 100.0 * hits as f64 / n as f64);
    let changes = verdicts.iter().filter(|v| v.is_change_pair).count();
    let nones = verdicts.len() - changes;
    CaptionAccuracy {
        change: pct(verdicts.iter().filter(|v| v.is_change_pair && v.class_hit).count(), changes),
        no_change: pct(verdicts.iter().filter(|v| !v.is_change_pair && v.class_hit).count(), nones),
        object: pct(verdicts.iter().filter(|v| v.is_change_pair && v.object_hit).count(), changes),
    }
}

pub fn caption_accuracy(predictions: &[&str], pairs: &[&ScenePair]) -> Result<CaptionAccuracy> {
    if predictions.len() != pairs.len() {
        return Err(TabError::Eval(format!("{} predictions for {} pairs", predictions.len(), pairs.len())));
    }
    let verdicts: Vec<Verdict> = predictions.iter().zip(pairs).map(|(p, pair)| judge(p, pair)).collect();
    Ok(accuracy_of(&verdicts))
}
