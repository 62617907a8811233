//! Degeneration metrics: rep-n, diversity, distinct-n.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textdata::vocab::{Vocab, VocabMode};

/// Denominator of distinct-n: token count (the formula as printed) or the
/// total n-gram count (the other common convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistinctDenominator {
    Length,
    Ngrams,
}

impl std::str::FromStr for DistinctDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(DistinctDenominator::Length),
            "ngrams" => Ok(DistinctDenominator::Ngrams),
            other => Err(Error::Config(format!(
                "unknown distinct denominator {other:?} (expected length|ngrams)"
            ))),
        }
    }
}

fn unique_ngrams(tokens: &[String], n: usize) -> usize {
    if n == 0 || tokens.len() < n {
        return 0;
    }
    let mut seen: HashSet<&[String]> = HashSet::new();
    for w in tokens.windows(n) {
        seen.insert(w);
    }
    seen.len()
}

fn total_ngrams(tokens: &[String], n: usize) -> usize {
    if n == 0 || tokens.len() < n {
        0
    } else {
        tokens.len() - n + 1
    }
}

/// 1 - unique/total n-grams. Texts shorter than n have no n-grams and
/// therefore no repetition: 0.
pub fn rep_n(tokens: &[String], n: usize) -> f64 {
    assert!(n >= 1, "rep_n needs n >= 1");
    let total = total_ngrams(tokens, n);
    if total == 0 {
        return 0.0;
    }
    1.0 - unique_ngrams(tokens, n) as f64 / total as f64
}

/// Product over n = 2..4 of (1 - rep_n).
pub fn diversity(tokens: &[String]) -> f64 {
    (2..=4).map(|n| 1.0 - rep_n(tokens, n)).product()
}

/// Unique n-grams over the chosen denominator. None for an empty text
/// (undefined; callers report a metric-skip).
pub fn distinct_n(tokens: &[String], n: usize, denom: DistinctDenominator) -> Option<f64> {
    assert!(n >= 1, "distinct_n needs n >= 1");
    if tokens.is_empty() {
        return None;
    }
    let d = match denom {
        DistinctDenominator::Length => tokens.len(),
        DistinctDenominator::Ngrams => total_ngrams(tokens, n).max(1),
    };
    Some(unique_ngrams(tokens, n) as f64 / d as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct TextMetrics {
    pub id: String,
    pub tokens: usize,
    pub rep_2: f64,
    pub rep_3: f64,
    pub rep_4: f64,
    pub diversity: f64,
    /// None when the text was empty (metric-skip).
    pub distinct_2: Option<f64>,
}

pub fn text_metrics(id: &str, tokens: &[String], denom: DistinctDenominator) -> TextMetrics {
    let rep_2 = rep_n(tokens, 2);
    let rep_3 = rep_n(tokens, 3);
    let rep_4 = rep_n(tokens, 4);
    TextMetrics {
        id: id.to_string(),
        tokens: tokens.len(),
        rep_2,
        rep_3,
        rep_4,
        // the decomposition identity holds exactly over the stored values
        diversity: (1.0 - rep_2) * (1.0 - rep_3) * (1.0 - rep_4),
        distinct_2: distinct_n(tokens, 2, denom),
    }
}

/// Corpus report: macro aggregation (mean of per-text values).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub tokenization: String,
    pub distinct_denominator: String,
    pub texts: usize,
    pub tokens: usize,
    /// Texts skipped by distinct-n for being empty.
    pub skipped: usize,
    pub rep_2: f64,
    pub rep_3: f64,
    pub rep_4: f64,
    pub diversity: f64,
    pub distinct_2: Option<f64>,
    #[serde(skip)]
    pub per_text: Vec<TextMetrics>,
}

pub fn report(
    texts: &[(String, Vec<String>)],
    mode: VocabMode,
    denom: DistinctDenominator,
) -> Result<MetricsReport> {
    if texts.is_empty() {
        return Err(Error::contract("metrics over an empty corpus"));
    }
    let per_text: Vec<TextMetrics> = texts
        .par_iter()
        .map(|(id, tokens)| text_metrics(id, tokens, denom))
        .collect();

    let n = per_text.len() as f64;
    let mean = |f: &dyn Fn(&TextMetrics) -> f64| per_text.iter().map(|t| f(t)).sum::<f64>() / n;
    let distinct: Vec<f64> = per_text.iter().filter_map(|t| t.distinct_2).collect();
    let distinct_2 = if distinct.is_empty() {
        None
    } else {
        Some(distinct.iter().sum::<f64>() / distinct.len() as f64)
    };
    Ok(MetricsReport {
        tokenization: mode.to_string(),
        distinct_denominator: match denom {
            DistinctDenominator::Length => "length".to_string(),
            DistinctDenominator::Ngrams => "ngrams".to_string(),
        },
        texts: per_text.len(),
        tokens: per_text.iter().map(|t| t.tokens).sum(),
        skipped: per_text.iter().filter(|t| t.distinct_2.is_none()).count(),
        rep_2: mean(&|t| t.rep_2),
        rep_3: mean(&|t| t.rep_3),
        rep_4: mean(&|t| t.rep_4),
        diversity: mean(&|t| t.diversity),
        distinct_2,
        per_text,
    })
}

/// Tokenize raw `(id, text)` pairs and build the corpus report.
pub fn report_texts(
    texts: &[(String, String)],
    mode: VocabMode,
    denom: DistinctDenominator,
) -> Result<MetricsReport> {
    let tokenized: Vec<(String, Vec<String>)> = texts
        .iter()
        .map(|(id, t)| (id.clone(), Vocab::tokenize(mode, t)))
        .collect();
    report(&tokenized, mode, denom)
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut v = serde_json::to_value(report)?;
    // keep the per-text table out of the summary file
    if let Some(obj) = v.as_object_mut() {
        obj.remove("per_text");
    }
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

pub fn write_per_text_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("id,tokens,rep_2,rep_3,rep_4,diversity,distinct_2\n");
    for t in &report.per_text {
        let d2 = t
            .distinct_2
            .map(|v| v.to_string())
            .unwrap_or_else(|| "skip".to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.id, t.tokens, t.rep_2, t.rep_3, t.rep_4, t.diversity, d2
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
