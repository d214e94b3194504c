//! Caption scores, attention-map localisation and template accuracies.
//!
//! Accuracies are percentages in `[0, 100]`; BLEU-4 and ROUGE-L are in `[0, 1]`.

mod accuracy;
mod heatmap;
mod pointing;
mod text;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::model::{PairOutput, RowOverride, TabModel};
use crate::scalar::Scalar;
use crate::synthdata::{ScenePair, Split};

pub use accuracy::{accuracy_of, caption_accuracy, judge, CaptionAccuracy, Verdict};
pub use heatmap::{all_zero_at, argmax_pixel, boxes_at, upscale_bicubic, upscale_nearest, Heatmap};
pub use pointing::{hit_at, pg, pg_plus, pg_plus_at, thresholds, PgPlus, PgSample};
pub use text::{bleu4, corpus_bleu4, mean_rouge_l, rouge_l, BleuStats, ROUGE_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub pg_plus: PgPlus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pg: Option<f64>,
    pub acc: CaptionAccuracy,
}

/// Unedited inference over `pairs`, in order.
pub fn predict<T: Scalar>(model: &TabModel<T>, pairs: &[&ScenePair]) -> Result<Vec<PairOutput>> {
    pairs
        .par_iter()
        .map(|p| model.forward_pair(&p.image_a, &p.image_b, &RowOverride::none()))
        .collect()
}

/// Nearest-neighbour map of the side-wise maximum of the patch attentions.
pub fn pg_sample(out: &PairOutput, pair: &ScenePair) -> Result<PgSample> {
    let patches = out.state.combined_patch_attention();
    Ok(PgSample { map: upscale_nearest(&patches, pair.image_a.height, pair.image_a.width)?, gt: pair.bbox })
}

/// Scores test-split predictions, with the PG+ threshold chosen on validation predictions.
pub fn report_from_predictions(
    val: &[(&ScenePair, &PairOutput)],
    test: &[(&ScenePair, &PairOutput)],
) -> Result<EvalReport> {
    if val.is_empty() || test.is_empty() {
        return Err(TabError::Eval("validation and test splits must be non-empty".into()));
    }
    let samples = |set: &[(&ScenePair, &PairOutput)]| -> Result<Vec<PgSample>> {
        set.iter().map(|(p, o)| pg_sample(o, p)).collect()
    };
    let test_samples = samples(test)?;
    let pg_plus = pg_plus(&samples(val)?, &test_samples)?;
    let texts: Vec<(String, Vec<String>)> = test.iter().map(|(p, o)| (o.caption.clone(), p.captions.clone())).collect();
    let preds: Vec<&str> = test.iter().map(|(_, o)| o.caption.as_str()).collect();
    let pairs: Vec<&ScenePair> = test.iter().map(|(p, _)| *p).collect();
    Ok(EvalReport {
        bleu4: corpus_bleu4(&texts),
        rouge_l: mean_rouge_l(&texts),
        pg_plus,
        pg: pg(&test_samples),
        acc: caption_accuracy(&preds, &pairs)?,
    })
}

/// Runs the model on the validation and test splits of `dataset` and scores it.
pub fn evaluate<T: Scalar>(model: &TabModel<T>, dataset: &[ScenePair]) -> Result<EvalReport> {
    let of = |s: Split| dataset.iter().filter(|p| p.split == s).collect::<Vec<_>>();
    let (val, test) = (of(Split::Val), of(Split::Test));
    let val_out = predict(model, &val)?;
    let test_out = predict(model, &test)?;
    report_from_predictions(&zip(&val, &val_out), &zip(&test, &test_out))
}

fn zip<'a>(pairs: &[&'a ScenePair], outs: &'a [PairOutput]) -> Vec<(&'a ScenePair, &'a PairOutput)> {
    pairs.iter().copied().zip(outs).collect()
}
