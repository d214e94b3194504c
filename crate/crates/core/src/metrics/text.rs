use std::collections::HashMap;

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for orders 1..=4.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of(candidate: &str, references: &[&str]) -> Self {
        let cand = tokens(candidate);
        let refs: Vec<Vec<&str>> = references.iter().map(|r| tokens(r)).collect();
        let mut s = BleuStats { cand_len: cand.len(), ref_len: closest_ref_len(cand.len(), &refs), ..Default::default() };
        for n in 1..=4 {
            let cc = ngram_counts(&cand, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.matches[n - 1] = cc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = cand.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of the precisions times the brevity penalty.
    ///
    /// A zero match count at order 2–4 becomes `1 / (total + 1)`; zero unigram
    /// matches give 0.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..4 {
            let p = if self.matches[i] == 0 {
                1.0 / (self.totals[i] + 1) as f64
            } else {
                self.matches[i] as f64 / self.totals[i] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / 4.0).exp()
    }
}

/// Reference length closest to `c`; ties pick the shorter reference.
fn closest_ref_len(c: usize, refs: &[Vec<&str>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Sentence-level BLEU-4 over whitespace tokens.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    BleuStats::of(candidate, references).score()
}

/// Corpus BLEU-4: statistics are summed over all sentences before scoring.
pub fn corpus_bleu4(pairs: &[(String, Vec<String>)]) -> f64 {
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        total.add(&BleuStats::of(cand, &refs));
    }
    total.score()
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure with the best precision and best recall over references.
pub fn rouge_l(candidate: &str, references: &[&str]) -> f64 {
    let cand = tokens(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rt = tokens(reference);
        if rt.is_empty() {
            continue;
        }
        let l = lcs_len(&cand, &rt) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rt.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn mean_rouge_l(pairs: &[(String, Vec<String>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(c, refs)| rouge_l(c, &refs.iter().map(String::as_str).collect::<Vec<_>>()))
        .sum();
    sum / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let s = "the red square has been added";
        assert!((bleu4(s, &[s]) - 1.0).abs() < 1e-12);
        assert!((rouge_l(s, &[s]) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4("a b c d", &["e f g h"]), 0.0);
        assert_eq!(rouge_l("a b c d", &["e f g h"]), 0.0);
        assert_eq!(bleu4("", &["a"]), 0.0);
    }

    #[test]
    fn brevity_penalty_prefers_shorter_reference_on_ties() {
        let refs = ["a b c", "a b c d e f g"];
        // candidate length 5: distances 2 and 2, shorter (3) wins so no penalty
        assert_eq!(BleuStats::of("a b c d e", &refs).ref_len, 3);
    }
}
