#![allow(dead_code)]
//! Deliberately naive reimplementations used as test oracles.

use tab_core::metrics::Heatmap;
use tab_core::synthdata::BBox;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn ngrams(toks: &[String], n: usize) -> Vec<String> {
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n).map(|i| toks[i..i + n].join("\u{1}")).collect()
}

fn count(list: &[String], item: &str) -> usize {
    list.iter().filter(|g| g.as_str() == item).count()
}

/// Sentence BLEU-4 with clipped counts, `1/(total+1)` smoothing for orders
/// 2–4, closest reference length (shorter on ties) and the brevity penalty.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand = words(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| words(r)).collect();
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cg = ngrams(&cand, n);
        let mut seen: Vec<&String> = Vec::new();
        let mut matched = 0;
        for g in &cg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let best_ref = refs.iter().map(|r| count(&ngrams(r, n), g)).max().unwrap_or(0);
            matched += count(&cg, g).min(best_ref);
        }
        if n == 1 && matched == 0 {
            return 0.0;
        }
        let p = if matched == 0 { 1.0 / (cg.len() + 1) as f64 } else { matched as f64 / cg.len() as f64 };
        log_p += p.ln() / 4.0;
    }
    let c = cand.len() as f64;
    let mut r = f64::INFINITY;
    for len in refs.iter().map(|x| x.len() as f64) {
        if (len - c).abs() < (r - c).abs() || ((len - c).abs() == (r - c).abs() && len < r) {
            r = len;
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_p.exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "exhaustive LCS is exponential");
    let is_subseq = |mask: u32| {
        let mut j = 0;
        for (i, w) in a.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            while j < b.len() && &b[j] != w {
                j += 1;
            }
            if j == b.len() {
                return false;
            }
            j += 1;
        }
        true
    };
    (0..1u32 << a.len()).filter(|&m| is_subseq(m)).map(|m| m.count_ones() as usize).max().unwrap_or(0)
}

/// ROUGE-L with the best precision and best recall over references, β = 1.2.
pub fn rouge_l(candidate: &str, references: &[&str]) -> f64 {
    let cand = words(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let mut p: f64 = 0.0;
    let mut r: f64 = 0.0;
    for reference in references {
        let rt = words(reference);
        if rt.is_empty() {
            continue;
        }
        let l = lcs_exhaustive(&cand, &rt) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rt.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2: f64 = 1.44;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Component bounding boxes of `{v ≥ t}` by repeated label relaxation until fixpoint.
fn component_boxes(map: &Heatmap, t: f64) -> Vec<BBox> {
    let (w, h) = (map.width, map.height);
    let on = |x: usize, y: usize| map.upsampled[y * w + x] >= t;
    let mut label: Vec<Option<usize>> = (0..w * h).map(|i| on(i % w, i / w).then_some(i)).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some(l) = label[y * w + x] else { continue };
                let mut best = l;
                for (nx, ny) in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
                    if nx < w && ny < h {
                        if let Some(o) = label[ny * w + nx] {
                            best = best.min(o);
                        }
                    }
                }
                if best != l {
                    label[y * w + x] = Some(best);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = label.iter().flatten().copied().collect();
    roots.sort_unstable();
    roots.dedup();
    roots
        .into_iter()
        .map(|root| {
            let pix: Vec<usize> = (0..w * h).filter(|&i| label[i] == Some(root)).collect();
            BBox {
                x0: pix.iter().map(|i| i % w).min().unwrap(),
                y0: pix.iter().map(|i| i / w).min().unwrap(),
                x1: pix.iter().map(|i| i % w).max().unwrap() + 1,
                y1: pix.iter().map(|i| i / w).max().unwrap() + 1,
            }
        })
        .collect()
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

pub fn pg_hit(map: &Heatmap, gt: Option<&BBox>, t: f64) -> bool {
    match gt {
        Some(b) => component_boxes(map, t).iter().any(|c| overlaps(c, b)),
        None => map.upsampled.iter().all(|&v| v < t || v <= 0.0),
    }
}

/// `(change %, no-change %, mean)` at threshold `t`, absent classes skipped.
pub fn pg_plus_at(samples: &[(Heatmap, Option<BBox>)], t: f64) -> (Option<f64>, Option<f64>, f64) {
    let class = |change: bool| {
        let members: Vec<_> = samples.iter().filter(|(_, g)| g.is_some() == change).collect();
        (!members.is_empty()).then(|| {
            100.0 * members.iter().filter(|(m, g)| pg_hit(m, g.as_ref(), t)).count() as f64 / members.len() as f64
        })
    };
    let (c, n) = (class(true), class(false));
    let present: Vec<f64> = [c, n].into_iter().flatten().collect();
    (c, n, present.iter().sum::<f64>() / present.len() as f64)
}

/// Exhaustive sweep over `k/20`: the first threshold reaching the best
/// validation mean is applied to the test samples.
pub fn pg_plus(
    val: &[(Heatmap, Option<BBox>)],
    test: &[(Heatmap, Option<BBox>)],
) -> (f64, Option<f64>, Option<f64>, f64) {
    let sweep: Vec<(f64, f64)> = (0..20).map(|k| k as f64 / 20.0).map(|t| (t, pg_plus_at(val, t).2)).collect();
    let best = sweep.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let t = sweep.iter().find(|s| s.1 == best).unwrap().0;
    let (c, n, m) = pg_plus_at(test, t);
    (t, c, n, m)
}
