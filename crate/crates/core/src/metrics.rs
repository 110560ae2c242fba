//! Report evaluation: rule-based finding extraction with precision / recall /
//! F1, and the BLEU, METEOR, ROUGE-L and CIDEr text metrics.
//!
//! Every ratio with an empty denominator scores 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingLabel {
    Epidural,
    Subdural,
    Subarachnoid,
    Intraparenchymal,
    Intraventricular,
    Normal,
}

impl FindingLabel {
    pub const ALL: [FindingLabel; 6] = [
        FindingLabel::Epidural,
        FindingLabel::Subdural,
        FindingLabel::Subarachnoid,
        FindingLabel::Intraparenchymal,
        FindingLabel::Intraventricular,
        FindingLabel::Normal,
    ];

    pub const HEMORRHAGES: [FindingLabel; 5] = [
        FindingLabel::Epidural,
        FindingLabel::Subdural,
        FindingLabel::Subarachnoid,
        FindingLabel::Intraparenchymal,
        FindingLabel::Intraventricular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FindingLabel::Epidural => "epidural",
            FindingLabel::Subdural => "subdural",
            FindingLabel::Subarachnoid => "subarachnoid",
            FindingLabel::Intraparenchymal => "intraparenchymal",
            FindingLabel::Intraventricular => "intraventricular",
            FindingLabel::Normal => "normal",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }
}

pub type LabelSet = BTreeSet<FindingLabel>;

const NEGATION_CUES: [&str; 3] = ["no", "without", "negative"];
const NORMAL_PHRASES: [&[&str]; 4] = [
    &["no", "evidence", "of", "intracranial", "hemorrhage"],
    &["no", "acute", "intracranial", "abnormality"],
    &["unremarkable"],
    &["normal"],
];
const CLAUSE_BREAKS: [&str; 4] = [".", ";", ",", "but"];

fn contains_run(tokens: &[String], phrase: &[&str]) -> bool {
    tokens.windows(phrase.len()).any(|w| w.iter().zip(phrase).all(|(a, b)| a == b))
}

/// Rule-based labeller. A hemorrhage keyword counts unless a negation cue
/// precedes it in the same clause. `normal` is reported only when no
/// hemorrhage was found and an explicit normal phrase is present.
pub fn extract_findings(report: &str) -> LabelSet {
    let tokens = tokenize(report);
    let mut found = LabelSet::new();
    let mut normal_phrase = false;
    for clause in tokens.split(|t| CLAUSE_BREAKS.contains(&t.as_str())) {
        let mut negated = false;
        for tok in clause {
            if NEGATION_CUES.contains(&tok.as_str()) {
                negated = true;
            }
            if let Some(&label) = FindingLabel::HEMORRHAGES.iter().find(|l| l.name() == tok) {
                if !negated {
                    found.insert(label);
                }
            }
        }
        normal_phrase |= NORMAL_PHRASES.iter().any(|p| contains_run(clause, p));
    }
    if found.is_empty() && normal_phrase {
        found.insert(FindingLabel::Normal);
    }
    found
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub support: usize,
}

impl LabelScores {
    fn from_counts(a: usize, b: usize, c: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(a, a + b);
        let recall = ratio(a, a + c);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LabelScores {
            precision,
            recall,
            f1,
            true_positives: a,
            false_positives: b,
            false_negatives: c,
            support: a + c,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_label: BTreeMap<FindingLabel, LabelScores>,
    pub micro: LabelScores,
}

/// Per-label and micro-averaged precision, recall and F1.
pub fn precision_recall_f1(predicted: &[LabelSet], truth: &[LabelSet]) -> Result<ClassificationReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "label corpora differ in length: {} predicted, {} truth",
            predicted.len(),
            truth.len()
        )));
    }
    let mut per_label = BTreeMap::new();
    let (mut ta, mut tb, mut tc) = (0, 0, 0);
    for label in FindingLabel::ALL {
        let (mut a, mut b, mut c) = (0, 0, 0);
        for (p, t) in predicted.iter().zip(truth) {
            match (p.contains(&label), t.contains(&label)) {
                (true, true) => a += 1,
                (true, false) => b += 1,
                (false, true) => c += 1,
                (false, false) => {}
            }
        }
        ta += a;
        tb += b;
        tc += c;
        per_label.insert(label, LabelScores::from_counts(a, b, c));
    }
    Ok(ClassificationReport {
        per_label,
        micro: LabelScores::from_counts(ta, tb, tc),
    })
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-1..4: clipped n-gram counts and lengths are pooled over the
/// corpus before the geometric mean and brevity penalty. The reference
/// length of an item is the reference length closest to the candidate
/// (shorter wins ties).
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> [f64; 4] {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return [0.0; 4];
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    for big_n in 1..=4 {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..big_n {
            if matched[n] == 0 || total[n] == 0 {
                zero = true;
                break;
            }
            log_sum += (matched[n] as f64 / total[n] as f64).ln() / big_n as f64;
        }
        out[big_n - 1] = if zero { 0.0 } else { bp * log_sum.exp() };
    }
    out
}

/// Sentence BLEU-1..4 of one candidate against its references.
pub fn bleu<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> [f64; 4]
where
    S: Clone,
{
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()])
}

/// METEOR with exact matching only: each candidate token aligns to the
/// earliest unused equal reference token.
pub fn meteor<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == c.as_ref()) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let hmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    hmean * (1.0 - penalty)
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Longest common subsequence length over the reference length.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("ROUGE-L needs a non-empty reference".into()));
    }
    Ok(lcs(candidate, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderResult {
    pub score: f64,
    pub per_item: Vec<f64>,
    /// Set when fewer than two items make document frequencies meaningless.
    pub degenerate: bool,
}

fn tfidf<'a, S: AsRef<str>>(
    tokens: &'a [S],
    n: usize,
    df: &BTreeMap<Vec<&str>, usize>,
    m: usize,
) -> BTreeMap<Vec<&'a str>, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (m as f64 / d).ln())
        })
        .collect()
}

/// Consensus CIDEr: TF-IDF n-gram vectors with `idf = ln(M / df)` over the
/// `M` reference sets, cosine similarity averaged over references, then over
/// `n = 1..4`, scaled by 10.
pub fn cider<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> CiderResult {
    let m = references.len();
    let mut per_item = vec![0.0; candidates.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen = BTreeSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            if refs.is_empty() {
                continue;
            }
            let cv = tfidf(cand, n, &df, m);
            let cn: f64 = cv.values().map(|v| v * v).sum();
            let mut sim = 0.0;
            for r in refs {
                let rv = tfidf(r, n, &df, m);
                let rn: f64 = rv.values().map(|v| v * v).sum();
                let dot: f64 = cv.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
                if cn > 0.0 && rn > 0.0 {
                    sim += dot / (cn * rn).sqrt();
                }
            }
            per_item[i] += sim / refs.len() as f64;
        }
    }
    for s in &mut per_item {
        *s = *s / 4.0 * 10.0;
    }
    let score = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    };
    CiderResult {
        score,
        per_item,
        degenerate: m < 2,
    }
}

/// Corpus scores. Text metrics live in `[0, 1]` except CIDEr (up to 10).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// Consensus CIDEr on its native 0–10 scale.
    pub cider: f64,
    pub cider_degenerate: bool,
    pub findings: ClassificationReport,
}

pub const TABLE_COLUMNS: [&str; 7] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE", "CIDEr"];

impl MetricReport {
    /// Scores in table column order.
    pub fn columns(&self) -> [f64; 7] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor,
            self.rouge_l,
            self.cider,
        ]
    }
}

/// Aligned plain-text table, scores ×100.
pub fn format_table(rows: &[(&str, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<label_w$}", "model");
    for c in TABLE_COLUMNS {
        let _ = write!(s, " {c:>8}");
    }
    s.push('\n');
    for (label, r) in rows {
        let _ = write!(s, "{label:<label_w$}");
        for v in r.columns() {
            let _ = write!(s, " {:>8.2}", v * 100.0);
        }
        s.push('\n');
    }
    s
}

/// Runs every metric over aligned generated / ground-truth reports.
pub fn evaluate_corpus<S: AsRef<str>>(generated: &[S], truth: &[S]) -> Result<MetricReport> {
    if generated.is_empty() {
        return Err(Error::Data("generated corpus is empty".into()));
    }
    if generated.len() != truth.len() {
        return Err(Error::Data(format!(
            "corpora differ in length: {} generated, {} truth",
            generated.len(),
            truth.len()
        )));
    }
    let cands: Vec<Vec<String>> = generated.iter().map(|t| tokenize(t.as_ref())).collect();
    let refs: Vec<Vec<Vec<String>>> = truth.iter().map(|t| vec![tokenize(t.as_ref())]).collect();
    let b = corpus_bleu(&cands, &refs);
    let n = cands.len() as f64;
    let meteor_avg = cands.iter().zip(&refs).map(|(c, r)| meteor(c, &r[0])).sum::<f64>() / n;
    let mut rouge_sum = 0.0;
    for (c, r) in cands.iter().zip(&refs) {
        rouge_sum += rouge_l(c, &r[0])?;
    }
    let cid = cider(&cands, &refs);
    let predicted: Vec<LabelSet> = generated.iter().map(|t| extract_findings(t.as_ref())).collect();
    let actual: Vec<LabelSet> = truth.iter().map(|t| extract_findings(t.as_ref())).collect();
    Ok(MetricReport {
        items: generated.len(),
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        meteor: meteor_avg,
        rouge_l: rouge_sum / n,
        cider: cid.score,
        cider_degenerate: cid.degenerate,
        findings: precision_recall_f1(&predicted, &actual)?,
    })
}

/// One line of a reports JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<FindingLabel>>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptData {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// One JSON object per line.
pub fn jsonl_string(records: &[ReportRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, records: &[ReportRecord]) -> Result<()> {
    fs::write(path, jsonl_string(records)?).map_err(|e| Error::io(path, e))
}

/// Pairs generated reports with ground truth by id, in generated order.
/// Fails listing every generated id missing from the truth file.
pub fn align_by_id(generated: &[ReportRecord], truth: &[ReportRecord]) -> Result<(Vec<String>, Vec<String>)> {
    let index: HashMap<&str, &str> = truth.iter().map(|r| (r.id.as_str(), r.report.as_str())).collect();
    let missing: Vec<&str> = generated
        .iter()
        .filter(|r| !index.contains_key(r.id.as_str()))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("ids missing from ground truth: {}", missing.join(", "))));
    }
    Ok(generated
        .iter()
        .map(|r| (r.report.clone(), index[r.id.as_str()].to_string()))
        .unzip())
}
