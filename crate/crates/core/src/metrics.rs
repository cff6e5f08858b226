//! Caption metrics against multiple references: BLEU-4, ROUGE-L and CIDEr-D.
//!
//! Hypotheses and references are tokenized with the same normalizer as the
//! dataset (see [`crate::data::tokenize`]). BLEU-4 and ROUGE-L live in
//! `[0, 1]`, CIDEr-D in `[0, 10]`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
/// Substituted for a zero clipped n-gram count.
pub const BLEU_SMOOTHING: f64 = 1e-9;
/// Width of the CIDEr-D length penalty, in tokens.
pub const CIDER_SIGMA: f64 = 6.0;

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Clipped matches and hypothesis n-gram total for one order.
fn clipped(hyp: &[String], refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let hc = ngram_counts(hyp, n);
    let mut best = Counts::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = best.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let matched = hc.iter().map(|(g, &c)| c.min(best.get(g).copied().unwrap_or(0))).sum();
    (matched, hc.values().sum())
}

/// Length of the reference closest to `len`; ties go to the shorter one.
fn closest_ref_len(len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| (r.len().abs_diff(len), r.len()))
        .min()
        .map_or(0, |(_, l)| l)
}

fn bleu_from_stats(matched: &[usize; MAX_N], totals: &[usize; MAX_N], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| {
            let num = if matched[i] > 0 {
                matched[i] as f64
            } else {
                BLEU_SMOOTHING
            };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / MAX_N as f64).exp()
}

/// Sentence BLEU-4 of tokenized `hyp` against `refs`.
pub fn bleu4(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    let mut matched = [0; MAX_N];
    let mut totals = [0; MAX_N];
    for n in 1..=MAX_N {
        (matched[n - 1], totals[n - 1]) = clipped(hyp, refs, n);
    }
    bleu_from_stats(&matched, &totals, hyp.len(), closest_ref_len(hyp.len(), refs))
}

/// Corpus BLEU-4: n-gram statistics and lengths pooled before combining.
pub fn corpus_bleu4(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let mut matched = [0; MAX_N];
    let mut totals = [0; MAX_N];
    let (mut c, mut r) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        for n in 1..=MAX_N {
            let (m, t) = clipped(h, rs, n);
            matched[n - 1] += m;
            totals[n - 1] += t;
        }
        c += h.len();
        r += closest_ref_len(h.len(), rs);
    }
    bleu_from_stats(&matched, &totals, c, r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with recall weight `beta`, maximized over references.
pub fn rouge_l_beta(hyp: &[String], refs: &[Vec<String>], beta: f64) -> f64 {
    let b2 = beta * beta;
    refs.iter()
        .map(|r| {
            let l = lcs_len(hyp, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// ROUGE-L with `beta = 1`.
pub fn rouge_l(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    rouge_l_beta(hyp, refs, 1.0)
}

struct CiderVec {
    weights: [BTreeMap<Vec<String>, f64>; MAX_N],
    norms: [f64; MAX_N],
    /// Bigram count, the length measure of the reference implementation.
    length: usize,
}

/// Per-image CIDEr-D scores. idf is computed from `refs` only.
pub fn cider_d_scores(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let log_n = (refs.len() as f64).ln();
    let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
    for rs in refs {
        let mut seen = BTreeSet::new();
        for r in rs {
            for n in 1..=MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let vectorize = |tokens: &[String]| {
        let mut v = CiderVec {
            weights: Default::default(),
            norms: [0.0; MAX_N],
            length: tokens.len().saturating_sub(1),
        };
        for n in 1..=MAX_N {
            for (g, tf) in ngram_counts(tokens, n) {
                let d = (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
                let w = tf as f64 * (log_n - d);
                v.norms[n - 1] += w * w;
                v.weights[n - 1].insert(g.to_vec(), w);
            }
        }
        for x in &mut v.norms {
            *x = x.sqrt();
        }
        v
    };
    hyps.iter()
        .zip(refs)
        .map(|(h, rs)| {
            if rs.is_empty() {
                return 0.0;
            }
            let vh = vectorize(h);
            let mut total = 0.0;
            for r in rs {
                let vr = vectorize(r);
                let delta = vh.length as f64 - vr.length as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                for n in 0..MAX_N {
                    let mut val: f64 = vh.weights[n]
                        .iter()
                        .map(|(g, &wh)| {
                            let wr = vr.weights[n].get(g).copied().unwrap_or(0.0);
                            wh.min(wr) * wr
                        })
                        .sum();
                    if vh.norms[n] != 0.0 && vr.norms[n] != 0.0 {
                        val /= vh.norms[n] * vr.norms[n];
                    }
                    total += val * penalty;
                }
            }
            total / MAX_N as f64 / rs.len() as f64 * 10.0
        })
        .collect()
}

/// Corpus CIDEr-D: mean of the per-image scores.
pub fn cider_d(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    mean(&cider_d_scores(hyps, refs))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub hypothesis: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

/// Scores of one split. `bleu4` is corpus-level, the other two are means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub n_examples: usize,
    pub per_example: Vec<ExampleScore>,
}

/// Scores raw-text hypotheses against raw-text references.
pub fn score_corpus(
    split: &str,
    ids: &[String],
    hyps: &[String],
    refs: &[Vec<String>],
    rouge_beta: f64,
) -> Result<EvalReport> {
    if ids.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} ids, {} hypotheses and {} reference sets",
            ids.len(),
            hyps.len(),
            refs.len()
        )));
    }
    if !(rouge_beta > 0.0 && rouge_beta.is_finite()) {
        return Err(Error::Config(format!("rouge beta must be positive, got {rouge_beta}")));
    }
    let ht: Vec<Vec<String>> = hyps.iter().map(|h| tokenize(h)).collect();
    let rt: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();
    let cider = cider_d_scores(&ht, &rt);
    let per_example: Vec<ExampleScore> = (0..ht.len())
        .map(|i| ExampleScore {
            id: ids[i].clone(),
            hypothesis: ht[i].join(" "),
            bleu4: bleu4(&ht[i], &rt[i]),
            rouge_l: rouge_l_beta(&ht[i], &rt[i], rouge_beta),
            cider_d: cider[i],
        })
        .collect();
    let rouge: Vec<f64> = per_example.iter().map(|e| e.rouge_l).collect();
    Ok(EvalReport {
        split: split.to_string(),
        bleu4: corpus_bleu4(&ht, &rt),
        rouge_l: mean(&rouge),
        cider_d: mean(&cider),
        n_examples: per_example.len(),
        per_example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn ts(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| t(s)).collect()
    }

    #[test]
    fn brevity_penalty_case() {
        let got = bleu4(&t("a b c d"), &ts(&["a b c d e"]));
        assert!((got - (-0.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_closest_length_prefers_shorter_on_ties() {
        assert_eq!(closest_ref_len(4, &ts(&["a b c d e", "a b c"])), 3);
        assert_eq!(closest_ref_len(4, &ts(&["a b c d e f", "a b c d e"])), 5);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let refs = ts(&["a b"]);
        assert_eq!(bleu4(&[], &refs), 0.0);
        assert_eq!(rouge_l(&[], &refs), 0.0);
        assert_eq!(cider_d(&[vec![], vec![]], &[refs.clone(), ts(&["c d"])]), 0.0);
    }

    #[test]
    fn lcs_example() {
        assert!((rouge_l(&t("a b c"), &ts(&["a c d"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &ts(&["x y", "a b"])), 1.0);
    }

    #[test]
    fn recall_weighted_rouge() {
        // P = 1, R = 0.5: F_beta = (1 + b^2) * 0.5 / (0.5 + b^2)
        let got = rouge_l_beta(&t("a b"), &ts(&["a b c d"]), 2.0);
        assert!((got - 5.0 * 0.5 / 4.5).abs() < 1e-12);
    }

    #[test]
    fn single_image_cider_is_zero() {
        assert_eq!(cider_d(&[t("a b c")], &[ts(&["a b c"])]), 0.0);
    }

    #[test]
    fn disjoint_two_image_corpus_matches_brute_force() {
        let hyps = vec![t("a b c d"), t("x y")];
        let refs = vec![ts(&["a b c d"]), ts(&["e f g h"])];
        // Every n-gram appears in one image only, so idf = ln 2 for all of them;
        // image 0 is a perfect match with zero length gap, cosine 1 for each order.
        let scores = cider_d_scores(&hyps, &refs);
        assert!((scores[0] - 10.0).abs() < 1e-12);
        assert_eq!(scores[1], 0.0);
    }

    #[test]
    fn report_shape_and_oracle_model() {
        let refs = vec![
            vec!["the cat sat down".to_string(), "a cat sat".to_string()],
            vec!["two dogs ran off".to_string()],
        ];
        let hyps = vec!["The cat sat down".to_string(), "two dogs ran off".to_string()];
        let ids = vec!["p0".to_string(), "p1".to_string()];
        let rep = score_corpus("val", &ids, &hyps, &refs, 1.0).unwrap();
        assert_eq!(rep.split, "val");
        assert_eq!(rep.n_examples, 2);
        assert_eq!(rep.bleu4, 1.0);
        assert_eq!(rep.rouge_l, 1.0);
        assert_eq!(rep.per_example[0].hypothesis, "the cat sat down");
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["split", "bleu4", "rouge_l", "cider_d", "n_examples", "per_example"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(score_corpus("val", &ids[..1], &hyps, &refs, 1.0).is_err());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-e]", 0..8)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(h in sentence(), rs in proptest::collection::vec(sentence(), 1..4)) {
            let b = bleu4(&h, &rs);
            let r = rouge_l(&h, &rs);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0).contains(&r));
            let c = cider_d(&[h.clone(), h.clone()], &[rs.clone(), ts(&["z z"])]);
            prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
        }

        #[test]
        fn reference_order_is_irrelevant(h in sentence(), mut rs in proptest::collection::vec(sentence(), 1..4)) {
            let b = bleu4(&h, &rs);
            let r = rouge_l(&h, &rs);
            let hyps = [h.clone(), t("q")];
            let c = cider_d_scores(&hyps, &[rs.clone(), ts(&["q r"])]);
            rs.reverse();
            prop_assert_eq!(b, bleu4(&h, &rs));
            prop_assert_eq!(r, rouge_l(&h, &rs));
            let c2 = cider_d_scores(&hyps, &[rs.clone(), ts(&["q r"])]);
            prop_assert!((c[0] - c2[0]).abs() < 1e-12);
        }

        #[test]
        fn duplicate_reference(h in sentence(), rs in proptest::collection::vec(sentence(), 1..4), pick in 0usize..4) {
            let mut more = rs.clone();
            more.push(rs[pick % rs.len()].clone());
            prop_assert_eq!(rouge_l(&h, &rs), rouge_l(&h, &more));
            prop_assert!(bleu4(&h, &more) >= bleu4(&h, &rs));
        }

        #[test]
        fn perfect_scores_iff_hypothesis_is_a_reference(h in proptest::collection::vec("[a-c]", 1..6), rs in proptest::collection::vec(proptest::collection::vec("[a-c]", 1..6), 1..3)) {
            let is_ref = rs.contains(&h);
            prop_assert_eq!(rouge_l(&h, &rs) == 1.0, is_ref);
            // all four n-gram orders need at least one hypothesis n-gram
            if is_ref && h.len() >= 4 {
                prop_assert_eq!(bleu4(&h, &rs), 1.0);
            }
        }
    }
}
