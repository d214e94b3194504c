use serde::{Deserialize, Serialize};

use crate::error::{Result, TabError};
use crate::metrics::heatmap::{all_zero_at, argmax_pixel, boxes_at, Heatmap};
use crate::synthdata::BBox;

/// One evaluated pair: its upsampled map and the changed-object box, if any.
#[derive(Clone, Debug)]
pub struct PgSample {
    pub map: Heatmap,
    pub gt: Option<BBox>,
}

/// Sweep points `0.00, 0.05, …, 0.95`.
pub fn thresholds() -> [f64; 20] {
    std::array::from_fn(|k| k as f64 / 20.0)
}

/// Accuracies in percent at one threshold. A class absent from the split
/// has no accuracy and is left out of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgPlus {
    pub t: f64,
    pub change: Option<f64>,
    pub no_change: Option<f64>,
    pub mean: f64,
}

pub fn hit_at(sample: &PgSample, t: f64) -> bool {
    match &sample.gt {
        Some(gt) => boxes_at(&sample.map, t).iter().any(|b| b.intersects(gt)),
        None => all_zero_at(&sample.map, t),
    }
}

fn percent(hits: usize, count: usize) -> Option<f64> {
    (count > 0).then(|| 100.0 * hits as f64 / count as f64)
}

pub fn pg_plus_at(samples: &[PgSample], t: f64) -> Result<PgPlus> {
    if samples.is_empty() {
        return Err(TabError::Eval("empty split".into()));
    }
    let (mut ch, mut cn, mut nh, mut nn) = (0, 0, 0, 0);
    for s in samples {
        let hit = hit_at(s, t);
        if s.gt.is_some() {
            cn += 1;
            ch += hit as usize;
        } else {
            nn += 1;
            nh += hit as usize;
        }
    }
    let change = percent(ch, cn);
    let no_change = percent(nh, nn);
    let present: Vec<f64> = [change, no_change].into_iter().flatten().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(PgPlus { t, change, no_change, mean })
}

/// Picks the threshold with the best validation mean (lowest wins ties) and
/// reports the test accuracies at it.
pub fn pg_plus(val: &[PgSample], test: &[PgSample]) -> Result<PgPlus> {
    let mut best: Option<PgPlus> = None;
    for t in thresholds() {
        let r = pg_plus_at(val, t)?;
        if best.is_none_or(|b| r.mean > b.mean) {
            best = Some(r);
        }
    }
    pg_plus_at(test, best.expect("sweep is non-empty").t)
}

/// Pointing game over change pairs: the first maximal pixel lies inside the box.
/// `None` when there are no change pairs.
pub fn pg(samples: &[PgSample]) -> Option<f64> {
    let (mut hits, mut count) = (0, 0);
    for s in samples {
        if let Some(gt) = &s.gt {
            count += 1;
            let (x, y) = argmax_pixel(&s.map);
            hits += gt.contains(x, y) as usize;
        }
    }
    percent(hits, count)
}
