//! Multiple-choice accuracy by choice likelihood, and perplexity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward, ModelBundle};
use crate::util::{sha256_hex, to_json_pretty, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Sentiment,
    Qa,
    Similarity,
    Reasoning,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Sentiment, Category::Qa, Category::Similarity, Category::Reasoning];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Sentiment => "sentiment",
            Category::Qa => "qa",
            Category::Similarity => "similarity",
            Category::Reasoning => "reasoning",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

/// One line of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLine {
    pub task: String,
    pub category: Category,
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFile {
    pub task: String,
    pub category: Category,
    pub items: Vec<TaskItem>,
}

impl TaskFile {
    pub fn new(task: impl Into<String>, category: Category, items: Vec<TaskItem>) -> Result<Self> {
        let task = task.into();
        if items.is_empty() {
            return Err(Error::invalid(format!("task `{task}` has no items")));
        }
        for (i, it) in items.iter().enumerate() {
            if it.choices.len() < 2 {
                return Err(Error::invalid(format!("task `{task}` item {i} has fewer than 2 choices")));
            }
            if it.answer_index >= it.choices.len() {
                return Err(Error::invalid(format!(
                    "task `{task}` item {i}: answer_index {} out of {} choices",
                    it.answer_index,
                    it.choices.len()
                )));
            }
        }
        Ok(Self { task, category, items })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut header: Option<(String, Category)> = None;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let l: TaskLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            match &header {
                None => header = Some((l.task.clone(), l.category)),
                Some((t, c)) if *t != l.task || *c != l.category => {
                    return Err(parse_err(format!(
                        "item belongs to {}/{} but the file is {t}/{c}",
                        l.task, l.category
                    )))
                }
                _ => {}
            }
            items.push(TaskItem {
                prompt: l.prompt,
                choices: l.choices,
                answer_index: l.answer_index,
            });
        }
        let (task, category) = header.ok_or_else(|| Error::invalid(format!("task file {} is empty", path.display())))?;
        Self::new(task, category, items)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.items {
            let line = TaskLine {
                task: self.task.clone(),
                category: self.category,
                prompt: it.prompt.clone(),
                choices: it.choices.clone(),
                answer_index: it.answer_index,
            };
            out.push_str(&serde_json::to_string(&line).expect("task line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl())
    }
}

/// Natural-log softmax of one logit row, evaluated at `target`.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

/// Token ids of `<bos> prompt choice`, and where the choice starts.
fn choice_sequence(bundle: &ModelBundle, prompt: &str, choice: &str) -> Result<(Vec<u32>, usize)> {
    let vocab = bundle.vocab();
    let prompt_ids = vocab.encode(prompt, usize::MAX);
    let choice_ids = vocab.encode(choice, usize::MAX);
    if choice_ids.is_empty() {
        return Err(Error::invalid(format!("choice `{choice}` has no tokens")));
    }
    let mut ids = Vec::with_capacity(1 + prompt_ids.len() + choice_ids.len());
    ids.push(vocab.bos_id());
    ids.extend(prompt_ids);
    let start = ids.len();
    ids.extend(choice_ids);
    let max = bundle.spec().max_seq_len;
    if ids.len() > max {
        return Err(Error::invalid(format!(
            "prompt `{prompt}` with choice `{choice}` is {} tokens, over the model limit {max}",
            ids.len()
        )));
    }
    Ok((ids, start))
}

/// Mean log-likelihood of the choice tokens given `<bos>` and the prompt.
pub fn score_choice(bundle: &ModelBundle, prompt: &str, choice: &str) -> Result<f64> {
    let (ids, start) = choice_sequence(bundle, prompt, choice)?;
    let out = forward::<&str>(bundle, &ids, &[])?;
    let total: f64 = (start..ids.len())
        .map(|p| log_softmax_at(out.logits.row(p - 1), ids[p] as usize))
        .sum();
    Ok(total / (ids.len() - start) as f64)
}

/// Index of the largest score; the lower index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub category: Category,
    pub n_items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub model_fingerprint: String,
    pub config_fingerprint: String,
}

impl EvalResult {
    pub const CSV_HEADER: [&'static str; 6] = ["task", "category", "n_items", "correct", "accuracy", "model_fingerprint"];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.task.clone(),
            self.category.to_string(),
            self.n_items.to_string(),
            self.correct.to_string(),
            self.accuracy.to_string(),
            self.model_fingerprint.clone(),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, to_json_pretty(self)?)
    }
}

/// Correct count and accuracy of one prediction per item.
pub fn accuracy(task: &TaskFile, predictions: &[usize]) -> Result<(usize, f64)> {
    if predictions.len() != task.items.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} items",
            predictions.len(),
            task.items.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(&task.items)
        .filter(|(p, it)| **p == it.answer_index)
        .count();
    Ok((correct, correct as f64 / task.items.len() as f64))
}

const SCORING_SCHEME: &str = "bos+prompt+choice;mean-log-likelihood;argmax-lower-index";

pub fn evaluate(bundle: &ModelBundle, task: &TaskFile) -> Result<EvalResult> {
    let predictions: Vec<usize> = task
        .items
        .par_iter()
        .map(|it| {
            let scores = it
                .choices
                .iter()
                .map(|c| score_choice(bundle, &it.prompt, c))
                .collect::<Result<Vec<f64>>>()?;
            Ok(argmax(&scores))
        })
        .collect::<Result<_>>()?;
    let (correct, accuracy) = accuracy(task, &predictions)?;
    Ok(EvalResult {
        task: task.task.clone(),
        category: task.category,
        n_items: task.items.len(),
        correct,
        accuracy,
        predictions,
        model_fingerprint: bundle.fingerprint(),
        config_fingerprint: sha256_hex(format!("{SCORING_SCHEME}\n{}", task.to_jsonl()).as_bytes()),
    })
}

/// Sum of next-token negative log-likelihoods and the number of predicted
/// positions for one sequence.
fn sequence_nll(bundle: &ModelBundle, ids: &[u32]) -> Result<(f64, usize)> {
    if ids.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits: Matrix = forward::<&str>(bundle, ids, &[])?.logits;
    let nll = (1..ids.len())
        .map(|p| -log_softmax_at(logits.row(p - 1), ids[p] as usize))
        .sum();
    Ok((nll, ids.len() - 1))
}

/// `exp(mean next-token NLL)` over every predicted position of every
/// sequence.
pub fn perplexity(bundle: &ModelBundle, sequences: &[Vec<u32>]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = sequences
        .par_iter()
        .map(|s| sequence_nll(bundle, s))
        .collect::<Result<_>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, c), (x, k)| (a + x, c + k));
    if n == 0 {
        return Err(Error::invalid("perplexity corpus has no predicted positions"));
    }
    let ppl = (nll / n as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numerical(format!("perplexity is not finite (mean NLL {})", nll / n as f64)));
    }
    Ok(ppl)
}

/// Tokenizes each text behind `<bos>` and cuts it into windows of at most
/// the model's context length.
pub fn corpus_sequences(bundle: &ModelBundle, texts: &[String]) -> Vec<Vec<u32>> {
    let vocab = bundle.vocab();
    let max = bundle.spec().max_seq_len;
    let mut out = Vec::new();
    for t in texts {
        let mut ids = vec![vocab.bos_id()];
        ids.extend(vocab.encode(t, usize::MAX));
        out.extend(ids.chunks(max).filter(|c| c.len() >= 2).map(<[u32]>::to_vec));
    }
    out
}
