//! Model evaluation: similarity-judged answers, leaderboards, the deviation
//! metric, checkpoint selection and significance tests.

mod stats;

pub use stats::{
    ln_beta_inc, ln_gamma, ln_t_sf, paired_ttest, pearson, t_quantile_upper, ttest_from_summary, PValue, TTestReport,
    ALPHA, P_FLOOR,
};

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embed::{self, cosine_similarity, Embedder};
use crate::error::{Error, Result};
use crate::qagen::{GridCell, QAPair, RunGrid};
use crate::service::TextService;

pub const DEFAULT_JUDGE_THRESHOLD: f64 = 0.85;

/// An answer counts as correct only when its similarity strictly exceeds the threshold.
pub fn is_correct(similarity: f64, threshold: f64) -> bool {
    similarity > threshold
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > -1.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "judge threshold must be in (-1, 1), got {threshold}"
        )))
    }
}

/// Cosine similarity of the two embedded answers and the verdict.
pub fn judge_answer(gold: &str, output: &str, embedder: &dyn Embedder, threshold: f64) -> Result<(f64, bool)> {
    check_threshold(threshold)?;
    if gold.trim().is_empty() || output.trim().is_empty() {
        return Err(Error::invalid("cannot judge an empty answer"));
    }
    let (v, _) = embed::embed_all(embedder, &[gold, output], embed::DEFAULT_MAX_CHARS)?;
    let sim = cosine_similarity(v[0].as_slice(), v[1].as_slice())?;
    Ok((sim, is_correct(sim, threshold)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub gold_answer: String,
    pub model_output: Option<String>,
    pub similarity: Option<f64>,
    pub correct: bool,
    /// Set when inference failed; such records count as incorrect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model_name: String,
    pub embedder: String,
    pub threshold: f64,
    pub records: Vec<EvalRecord>,
    pub score_percent: f64,
    pub failed: usize,
}

/// 100 x correct / total.
pub fn score_percent(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
}

impl EvalResult {
    pub fn from_records(
        model_name: impl Into<String>,
        embedder: impl Into<String>,
        threshold: f64,
        records: Vec<EvalRecord>,
    ) -> Self {
        EvalResult {
            model_name: model_name.into(),
            embedder: embedder.into(),
            threshold,
            score_percent: score_percent(&records),
            failed: records.iter().filter(|r| r.error.is_some()).count(),
            records,
        }
    }

    /// Per-question correctness as 0/1, for paired tests.
    pub fn indicators(&self) -> Vec<f64> {
        self.records.iter().map(|r| f64::from(u8::from(r.correct))).collect()
    }

    /// Records as JSONL plus a summary JSON.
    pub fn save(&self, records_path: &Path, summary_path: &Path) -> Result<()> {
        crate::corpus::write_records(&self.records, records_path)?;
        let summary = json!({
            "model_name": self.model_name,
            "embedder": self.embedder,
            "threshold": self.threshold,
            "questions": self.records.len(),
            "correct": self.records.iter().filter(|r| r.correct).count(),
            "failed": self.failed,
            "score_percent": self.score_percent,
        });
        crate::meta::write_json(summary_path, &summary)
    }

    pub fn load(
        model_name: impl Into<String>,
        embedder: impl Into<String>,
        threshold: f64,
        records_path: &Path,
    ) -> Result<Self> {
        let records = crate::corpus::read_records(records_path)?;
        Ok(Self::from_records(model_name, embedder, threshold, records))
    }
}

/// Asks `model` every question and judges the answers against the gold ones.
///
/// Failed requests and empty outputs are kept as incorrect records with the
/// error noted. Records follow evalset order.
pub fn domain_eval(
    model: &dyn TextService,
    model_name: &str,
    evalset: &[QAPair],
    embedder: &dyn Embedder,
    threshold: f64,
    in_flight: usize,
) -> Result<EvalResult> {
    check_threshold(threshold)?;
    if evalset.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(in_flight.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outputs: Vec<std::result::Result<String, String>> = pool.install(|| {
        evalset
            .par_iter()
            .map(|p| match model.call(&json!({ "prompt": p.question })) {
                Ok(text) if text.trim().is_empty() => Err("empty output".to_string()),
                Ok(text) => Ok(text),
                Err(e) => Err(e.to_string()),
            })
            .collect()
    });

    let answered: Vec<usize> = (0..evalset.len()).filter(|&i| outputs[i].is_ok()).collect();
    let mut texts: Vec<&str> = Vec::with_capacity(answered.len() * 2);
    for &i in &answered {
        texts.push(&evalset[i].answer);
        texts.push(outputs[i].as_deref().expect("answered"));
    }
    let (vectors, _) = embed::embed_all(embedder, &texts, embed::DEFAULT_MAX_CHARS)?;
    let mut similarity = vec![None; evalset.len()];
    for (k, &i) in answered.iter().enumerate() {
        similarity[i] = Some(cosine_similarity(
            vectors[2 * k].as_slice(),
            vectors[2 * k + 1].as_slice(),
        )?);
    }

    let records = evalset
        .iter()
        .zip(outputs)
        .zip(similarity)
        .map(|((pair, output), sim)| match output {
            Ok(text) => EvalRecord {
                question: pair.question.clone(),
                gold_answer: pair.answer.clone(),
                model_output: Some(text),
                similarity: sim,
                correct: sim.is_some_and(|s| is_correct(s, threshold)),
                error: None,
            },
            Err(e) => {
                log::warn!("{model_name}: no answer for {:?}: {e}", pair.question);
                EvalRecord {
                    question: pair.question.clone(),
                    gold_answer: pair.answer.clone(),
                    model_output: None,
                    similarity: None,
                    correct: false,
                    error: Some(e),
                }
            }
        })
        .collect();
    Ok(EvalResult::from_records(
        model_name,
        embedder.identity(),
        threshold,
        records,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_name: String,
    pub score_percent: f64,
}

impl From<&EvalResult> for ModelScore {
    fn from(r: &EvalResult) -> Self {
        ModelScore {
            model_name: r.model_name.clone(),
            score_percent: r.score_percent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub model_name: String,
    pub score_percent: f64,
    /// Percentage points ahead of the base model.
    pub delta_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub base_model: String,
    pub rows: Vec<LeaderboardRow>,
}

impl Leaderboard {
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model_name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<4} {:<width$} {:>8} {:>10}\n", "rank", "model", "score", "delta");
        for r in &self.rows {
            out += &format!(
                "{:<4} {:<width$} {:>8.2} {:>+10.2}\n",
                r.rank, r.model_name, r.score_percent, r.delta_vs_base
            );
        }
        out += &format!("delta is in percentage points vs {}\n", self.base_model);
        out
    }
}

/// Differences of scores given to two decimals come out as e.g.
/// 14.299999999999997; rounding to 1e-6 reports the intended figure.
fn round_delta(d: f64) -> f64 {
    (d * 1e6).round() / 1e6
}

/// Ranks models by score, best first, ties broken alphabetically. Deltas are
/// against `base`, or against the first listed model when no base is named.
pub fn leaderboard(scores: &[ModelScore], base: Option<&str>) -> Result<Leaderboard> {
    let first = scores
        .first()
        .ok_or_else(|| Error::invalid("leaderboard needs at least one model"))?;
    let mut names = HashSet::new();
    for s in scores {
        if !s.score_percent.is_finite() {
            return Err(Error::invalid(format!("{}: score is not finite", s.model_name)));
        }
        if !names.insert(s.model_name.as_str()) {
            return Err(Error::invalid(format!("{} is listed twice", s.model_name)));
        }
    }
    let base_name = base.unwrap_or(&first.model_name);
    let base_score = scores
        .iter()
        .find(|s| s.model_name == base_name)
        .ok_or_else(|| Error::invalid(format!("base model {base_name:?} is not on the leaderboard")))?
        .score_percent;
    let mut sorted: Vec<&ModelScore> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        b.score_percent
            .total_cmp(&a.score_percent)
            .then_with(|| a.model_name.to_lowercase().cmp(&b.model_name.to_lowercase()))
            .then_with(|| a.model_name.cmp(&b.model_name))
    });
    Ok(Leaderboard {
        base_model: base_name.to_owned(),
        rows: sorted
            .into_iter()
            .enumerate()
            .map(|(i, s)| LeaderboardRow {
                rank: i + 1,
                model_name: s.model_name.clone(),
                score_percent: s.score_percent,
                delta_vs_base: round_delta(s.score_percent - base_score),
            })
            .collect(),
    })
}

/// Change of a fine-tuned score relative to its base, in percent of the base.
pub fn deviation_metric(finetuned: f64, base: f64) -> Result<f64> {
    if !finetuned.is_finite() || !base.is_finite() {
        return Err(Error::invalid("scores must be finite"));
    }
    if base <= 0.0 {
        return Err(Error::invalid(format!("base score must be positive, got {base}")));
    }
    Ok(100.0 * (finetuned - base) / base)
}

/// Best-scoring checkpoint; ties go to the lower learning rate, then the earlier epoch.
pub fn select_best_checkpoint(grid: &RunGrid) -> Result<GridCell> {
    grid.validate()?;
    grid.scores
        .iter()
        .copied()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.learning_rate.total_cmp(&b.learning_rate))
                .then(a.epoch.cmp(&b.epoch))
        })
        .ok_or_else(|| Error::invalid("grid has no scores"))
}
