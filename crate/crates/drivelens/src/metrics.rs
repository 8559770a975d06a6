//! Caption metrics over (candidate, reference) pairs — corpus BLEU-4,
//! ROUGE-L, plain CIDEr, a slot-level SPICE variant — plus top-k accuracy
//! for significance rankings.
//!
//! Variant choices, also embedded in every report:
//! - BLEU-4 is corpus-level and unsmoothed (any zero modified precision
//!   zeroes the score); an add-one-smoothed sentence-level BLEU is reported
//!   per record as a diagnostic only.
//! - ROUGE-L is the LCS F-measure with β = 1.2.
//! - CIDEr is plain CIDEr (no CIDEr-D clipping or length penalty): raw-count
//!   term frequencies weighted by ln(N/df) with document frequencies from
//!   the reference corpus; per order n = 1..4 the cosine similarity is
//!   averaged over the orders where the reference vector has nonzero norm
//!   (a three-word reference has no 4-grams and must not be penalized for
//!   it), then scaled by 10.
//! - SPICE is replaced by slot-level F1: texts come from a closed
//!   three-slot template, so proposition matching reduces to comparing the
//!   (object, action/status, position) slots; an unparseable candidate
//!   scores 0.
//!
//! Tokenization everywhere: lowercase, whitespace split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::parse_explanation;

/// One evaluation pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub clip_id: String,
    pub candidate: String,
    pub reference: String,
}

/// Per-record diagnostic columns of a [`MetricReport`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordDiagnostics {
    pub clip_id: String,
    /// Add-one-smoothed sentence BLEU (diagnostic; the headline BLEU-4 is
    /// corpus-level and unsmoothed).
    pub sentence_bleu_add1: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub spice_slot: f64,
    pub candidate_parsed: bool,
}

/// Corpus-level metric report: the four caption scores, optional top-k
/// object accuracies, the variant annotations, and per-record diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// Metric-variant annotations (serialized first: the report header).
    pub notes: Vec<String>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub spice_slot: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top3_accuracy: Option<f64>,
    pub records: Vec<RecordDiagnostics>,
}

/// The annotations embedded in every report.
pub fn variant_notes() -> Vec<String> {
    vec![
        "bleu4: corpus-level, unsmoothed; per-record sentence_bleu_add1 uses add-one smoothing \
         for orders 2-4"
            .into(),
        "rouge_l: LCS F-measure with beta = 1.2".into(),
        "cider: plain CIDEr (no CIDEr-D clipping or length penalty); raw-count TF times \
         ln(N/df) with df from the reference corpus; orders whose reference vector has zero \
         norm are skipped"
            .into(),
        "spice_slot: slot-level F1 over the (object, action/status, position) template slots \
         in place of scene-graph SPICE; unparseable candidates score 0"
            .into(),
    ]
}

fn toks(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_owned).collect()
}

/// Occurrence counts of the order-`n` n-grams of `tokens`. Sorted maps keep
/// every downstream float reduction in a fixed order, so metric values are
/// reproducible bit for bit across processes.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: clipped n-gram matches pooled over the corpus, uniform
/// weights over n = 1..4, standard brevity penalty, single reference per
/// candidate, no smoothing — zero pooled matches at any order give 0.
pub fn bleu4(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("BLEU of an empty corpus"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for rec in records {
        let c = toks(&rec.candidate);
        let r = toks(&rec.reference);
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            for (gram, &count) in &cc {
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let mean_log_p = (0..4)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / 4.0;
    // total[0] > 0 implies c_len > 0
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * mean_log_p.exp())
}

/// Sentence-level BLEU diagnostic: order 1 unsmoothed (zero unigram overlap
/// gives 0), orders 2–4 add-one smoothed ((m+1)/(t+1)), same brevity
/// penalty as the corpus score.
pub fn sentence_bleu_add1(candidate: &str, reference: &str) -> f64 {
    let c = toks(candidate);
    let r = toks(reference);
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cc = ngram_counts(&c, n);
        let rc = ngram_counts(&r, n);
        let m: usize =
            cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
        let t = c.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp =
        if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L of one pair: LCS-based F-measure with β = 1.2.
pub fn rouge_l_pair(candidate: &str, reference: &str) -> f64 {
    let c = toks(candidate);
    let r = toks(reference);
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean ROUGE-L over the corpus.
pub fn rouge_l(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("ROUGE of an empty corpus"));
    }
    Ok(records.iter().map(|r| rouge_l_pair(&r.candidate, &r.reference)).sum::<f64>()
        / records.len() as f64)
}

/// Per-record plain-CIDEr scores (see the module docs for the exact
/// variant). Needs at least two records: document frequencies come from the
/// reference corpus.
pub fn cider_scores(records: &[EvalRecord]) -> Result<Vec<f64>> {
    if records.len() < 2 {
        return Err(Error::data(format!(
            "CIDEr needs at least 2 records for document frequencies, got {}",
            records.len()
        )));
    }
    let n_docs = records.len() as f64;
    let ref_tokens: Vec<Vec<String>> = records.iter().map(|r| toks(&r.reference)).collect();
    // df[n-1][gram] = number of records whose reference contains the n-gram
    let mut df: Vec<BTreeMap<&[String], usize>> = vec![BTreeMap::new(); 4];
    for r in &ref_tokens {
        for n in 1..=4 {
            for gram in ngram_counts(r, n).keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    fn weighted<'t>(
        tokens: &'t [String],
        n: usize,
        df_n: &BTreeMap<&[String], usize>,
        n_docs: f64,
    ) -> BTreeMap<&'t [String], f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let d = df_n.get(g).copied().unwrap_or(0).max(1);
                (g, c as f64 * (n_docs / d as f64).ln())
            })
            .collect()
    }
    fn norm(v: &BTreeMap<&[String], f64>) -> f64 {
        v.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    let mut scores = Vec::with_capacity(records.len());
    for (rec, r) in records.iter().zip(&ref_tokens) {
        let c = toks(&rec.candidate);
        let mut sum = 0.0;
        let mut measurable = 0usize;
        for n in 1..=4 {
            let rv = weighted(r, n, &df[n - 1], n_docs);
            let rn = norm(&rv);
            if rn == 0.0 {
                continue;
            }
            measurable += 1;
            let cv = weighted(&c, n, &df[n - 1], n_docs);
            let cn = norm(&cv);
            if cn > 0.0 {
                let dot: f64 =
                    cv.iter().map(|(g, w)| w * rv.get(g).copied().unwrap_or(0.0)).sum();
                sum += dot / (cn * rn);
            }
        }
        scores.push(if measurable == 0 { 0.0 } else { 10.0 * sum / measurable as f64 });
    }
    Ok(scores)
}

/// Corpus CIDEr: mean of the per-record scores.
pub fn cider(records: &[EvalRecord]) -> Result<f64> {
    let scores = cider_scores(records)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Slot F1 of one pair: both texts are parsed into the three template
/// slots; an unparseable candidate scores 0, an unparseable reference is a
/// dataset-invariant violation and errors. With all three slots always
/// filled, precision = recall = matches/3, so F1 = matches/3.
pub fn spice_slot_pair(candidate: &str, reference: &str) -> Result<f64> {
    let reference_slots = parse_explanation(&reference.to_lowercase()).ok_or_else(|| {
        Error::data(format!("reference {reference:?} does not parse as a template sentence"))
    })?;
    let Some(candidate_slots) = parse_explanation(&candidate.to_lowercase()) else {
        return Ok(0.0);
    };
    let matches = usize::from(candidate_slots.0 == reference_slots.0)
        + usize::from(candidate_slots.1 == reference_slots.1)
        + usize::from(candidate_slots.2 == reference_slots.2);
    Ok(matches as f64 / 3.0)
}

/// Mean slot F1 over the corpus.
pub fn spice_slot(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("SPICE-slot of an empty corpus"));
    }
    let mut sum = 0.0;
    for r in records {
        sum += spice_slot_pair(&r.candidate, &r.reference)?;
    }
    Ok(sum / records.len() as f64)
}

/// Fraction of cases whose ground-truth index ranks among the `k` highest
/// scores, ties ordered toward the lower index.
///
/// Preconditions (panics on violation): at least one case; every
/// ground-truth index in range.
pub fn topk_accuracy(cases: &[(Vec<f64>, usize)], k: usize) -> f64 {
    assert!(!cases.is_empty(), "top-k accuracy of an empty case list");
    let hits = cases
        .iter()
        .filter(|(scores, gt)| {
            assert!(*gt < scores.len(), "ground-truth index {gt} out of range");
            let ahead = scores
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > scores[*gt] || (v == scores[*gt] && j < *gt))
                .count();
            ahead < k
        })
        .count();
    hits as f64 / cases.len() as f64
}

impl MetricReport {
    /// Compute every metric over `records`, plus top-1/top-3 accuracy when
    /// significance cases are supplied.
    pub fn compute(
        records: &[EvalRecord],
        significance_cases: Option<&[(Vec<f64>, usize)]>,
    ) -> Result<MetricReport> {
        let bleu = bleu4(records)?;
        let rouge = rouge_l(records)?;
        let cider_per_record = cider_scores(records)?;
        let spice = spice_slot(records)?;
        let mut diags = Vec::with_capacity(records.len());
        for (rec, &cid) in records.iter().zip(&cider_per_record) {
            diags.push(RecordDiagnostics {
                clip_id: rec.clip_id.clone(),
                sentence_bleu_add1: sentence_bleu_add1(&rec.candidate, &rec.reference),
                rouge_l: rouge_l_pair(&rec.candidate, &rec.reference),
                cider: cid,
                spice_slot: spice_slot_pair(&rec.candidate, &rec.reference)?,
                candidate_parsed: parse_explanation(&rec.candidate.to_lowercase()).is_some(),
            });
        }
        Ok(MetricReport {
            notes: variant_notes(),
            bleu4: bleu,
            rouge_l: rouge,
            cider: cider_per_record.iter().sum::<f64>() / cider_per_record.len() as f64,
            spice_slot: spice,
            top1_accuracy: significance_cases.map(|c| topk_accuracy(c, 1)),
            top3_accuracy: significance_cases.map(|c| topk_accuracy(c, 3)),
            records: diags,
        })
    }
}
