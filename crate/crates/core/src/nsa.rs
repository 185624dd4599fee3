//! Neuron semantic attribution: find neurons whose activation mass sits on
//! task-relevant words, then see how pruning changes those activations.
//!
//! For a neuron with activations `A_1..A_N` over the tokens of the samples and
//! a set `S` of positions holding lexicon words,
//! `Score = Σ_{m∈S} |A_m| / Σ_n |A_n|`, pooled over all samples.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward, ModelBundle, Token};
use crate::util::{to_json_pretty, write_file};

pub const DEFAULT_TOP_K: usize = 8;
pub const DEFAULT_WORDS_PER_NEURON: usize = 3;
pub const DEFAULT_DROP_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SAMPLE_COUNT: usize = 10;
pub const SUGGEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    UserFile,
    ExternalSuggester,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluentialLexicon {
    pub task: String,
    pub words: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl InfluentialLexicon {
    /// Lowercases the words; an empty list or a repeated word is an error.
    pub fn new(task: impl Into<String>, words: Vec<String>, provenance: Provenance) -> Result<Self> {
        let words: Vec<String> = words.iter().map(|w| w.trim().to_lowercase()).collect();
        if words.is_empty() {
            return Err(Error::invalid("lexicon word list is empty"));
        }
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::invalid(format!("lexicon word {i} is empty")));
            }
            if words[..i].contains(w) {
                return Err(Error::invalid(format!("duplicate lexicon word `{w}`")));
            }
        }
        Ok(Self {
            task: task.into(),
            words,
            provenance,
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, to_json_pretty(self)?)
    }
}

pub fn load_lexicon(path: &Path) -> Result<InfluentialLexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: InfluentialLexicon = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    InfluentialLexicon::new(raw.task, raw.words, raw.provenance)
}

/// Positions whose token text equals a lexicon word.
pub fn token_membership(tokens: &[Token], lexicon: &InfluentialLexicon) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| lexicon.contains(&t.text.to_lowercase()))
        .map(|(i, _)| i)
        .collect()
}

/// A tokenized attribution sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NsaSample {
    pub text: String,
    pub tokens: Vec<Token>,
    pub members: Vec<usize>,
}

impl NsaSample {
    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }
}

pub fn prepare_samples<S: AsRef<str>>(
    bundle: &ModelBundle,
    texts: &[S],
    lexicon: &InfluentialLexicon,
) -> Result<Vec<NsaSample>> {
    let max = bundle.spec().max_seq_len;
    texts
        .iter()
        .map(|t| {
            let text = t.as_ref();
            let tokens = bundle.tokenize(text, max)?;
            if tokens.is_empty() {
                return Err(Error::invalid(format!("attribution sample `{text}` has no tokens")));
            }
            let members = token_membership(&tokens, lexicon);
            if members.is_empty() {
                log::warn!("attribution sample `{text}` contains no lexicon word");
            }
            Ok(NsaSample {
                text: text.to_string(),
                tokens,
                members,
            })
        })
        .collect()
}

/// Activations of `site` for each sample, `(n_tokens × width)`.
pub fn collect_traces(bundle: &ModelBundle, samples: &[NsaSample], site: &str) -> Result<Vec<Matrix>> {
    samples
        .par_iter()
        .map(|s| {
            let mut out = forward(bundle, &s.ids(), &[site])?;
            Ok(out.traces.remove(site).expect("requested site is captured").values)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScores {
    pub scores: Vec<f64>,
    /// Neurons whose total activation is zero; their score is reported as 0.
    pub zero_denominator: Vec<usize>,
}

/// Pooled Score of every neuron. `signed` sums raw activations instead of
/// magnitudes, in which case the score is no longer confined to [0, 1].
pub fn score_neurons(traces: &[Matrix], members: &[Vec<usize>], signed: bool) -> Result<NeuronScores> {
    if traces.len() != members.len() {
        return Err(Error::invalid(format!(
            "{} traces but {} membership sets",
            traces.len(),
            members.len()
        )));
    }
    let width = traces.first().map_or(0, Matrix::cols);
    let mut num = vec![0.0; width];
    let mut den = vec![0.0; width];
    let value = |v: f64| if signed { v } else { v.abs() };
    for (trace, set) in traces.iter().zip(members) {
        if trace.cols() != width {
            return Err(Error::Shape {
                op: "score_neurons",
                left: (trace.rows(), width),
                right: trace.shape(),
            });
        }
        if let Some(&bad) = set.iter().find(|&&p| p >= trace.rows()) {
            return Err(Error::invalid(format!(
                "membership position {bad} outside a trace of {} tokens",
                trace.rows()
            )));
        }
        for t in 0..trace.rows() {
            for (d, v) in den.iter_mut().zip(trace.row(t)) {
                *d += value(*v);
            }
        }
        for &t in set {
            for (n, v) in num.iter_mut().zip(trace.row(t)) {
                *n += value(*v);
            }
        }
    }
    let mut zero_denominator = Vec::new();
    let scores = num
        .iter()
        .zip(&den)
        .enumerate()
        .map(|(j, (&n, &d))| {
            if d == 0.0 {
                zero_denominator.push(j);
                0.0
            } else {
                n / d
            }
        })
        .collect();
    if !zero_denominator.is_empty() {
        log::warn!("{} neurons have zero total activation; their score is 0", zero_denominator.len());
    }
    Ok(NeuronScores {
        scores,
        zero_denominator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedWord {
    pub word: String,
    pub occurrences: usize,
    pub dense_mean: f64,
    pub pruned_mean: Option<f64>,
    /// `1 − pruned/dense`; `None` while unmeasured or when the dense mean is 0.
    pub drop_ratio: Option<f64>,
    /// Set when the pruned side was measured but the dense mean is 0.
    pub drop_undefined: bool,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleActivations {
    pub tokens: Vec<String>,
    pub dense: Vec<f64>,
    pub pruned: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub site: String,
    pub neuron: usize,
    pub score: f64,
    pub zero_denominator: bool,
    pub matched_words: Vec<MatchedWord>,
    pub per_token: Vec<SampleActivations>,
}

impl AttributionRecord {
    pub fn significant(&self) -> bool {
        self.matched_words.iter().any(|w| w.significant)
    }
}

/// Mean |A| of one neuron per lexicon word, over every occurrence.
fn word_means(
    samples: &[NsaSample],
    traces: &[Matrix],
    neuron: usize,
) -> BTreeMap<String, (f64, usize)> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (s, trace) in samples.iter().zip(traces) {
        for &p in &s.members {
            let e = acc.entry(s.tokens[p].text.to_lowercase()).or_default();
            e.0 += trace[(p, neuron)].abs();
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(w, (sum, n))| (w, (sum / n as f64, n))).collect()
}

/// Top-`k` neurons by score (lower index on ties), each matched with its
/// `w` lexicon words of highest mean |A|.
pub fn select_and_match(
    site: &str,
    scores: &NeuronScores,
    samples: &[NsaSample],
    traces: &[Matrix],
    lexicon: &InfluentialLexicon,
    k: usize,
    w: usize,
) -> Result<Vec<AttributionRecord>> {
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let width = scores.scores.len();
    let k = if k > width {
        log::warn!("top-k {k} exceeds the {width} neurons of `{site}`; using {width}");
        width
    } else {
        k
    };
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    let rank_of = |word: &str| lexicon.words.iter().position(|x| x == word).unwrap_or(usize::MAX);
    Ok(order[..k]
        .iter()
        .map(|&neuron| {
            let mut words: Vec<(String, (f64, usize))> = word_means(samples, traces, neuron).into_iter().collect();
            words.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(rank_of(&a.0).cmp(&rank_of(&b.0))));
            words.truncate(w);
            AttributionRecord {
                site: site.to_string(),
                neuron,
                score: scores.scores[neuron],
                zero_denominator: scores.zero_denominator.binary_search(&neuron).is_ok(),
                matched_words: words
                    .into_iter()
                    .map(|(word, (mean, occurrences))| MatchedWord {
                        word,
                        occurrences,
                        dense_mean: mean,
                        pruned_mean: None,
                        drop_ratio: None,
                        drop_undefined: false,
                        significant: false,
                    })
                    .collect(),
                per_token: samples
                    .iter()
                    .zip(traces)
                    .map(|(s, t)| SampleActivations {
                        tokens: s.tokens.iter().map(|t| t.text.clone()).collect(),
                        dense: (0..t.rows()).map(|p| t[(p, neuron)]).collect(),
                        pruned: None,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Fills the pruned side of `records` by rerunning the same samples through
/// `pruned`.
pub fn compare_pruned(
    records: &mut [AttributionRecord],
    dense: &ModelBundle,
    pruned: &ModelBundle,
    samples: &[NsaSample],
    threshold: f64,
) -> Result<()> {
    if dense.spec() != pruned.spec() {
        return Err(Error::invalid("pruned model spec differs from the dense model"));
    }
    if dense.vocab() != pruned.vocab() {
        return Err(Error::invalid("pruned model vocabulary differs from the dense model"));
    }
    let mut sites: Vec<&str> = records.iter().map(|r| r.site.as_str()).collect();
    sites.sort_unstable();
    sites.dedup();
    let mut by_site = BTreeMap::new();
    for site in sites {
        by_site.insert(site.to_string(), collect_traces(pruned, samples, site)?);
    }
    for rec in records.iter_mut() {
        let traces = &by_site[&rec.site];
        if rec.per_token.len() != samples.len() {
            return Err(Error::invalid(format!(
                "record for neuron {} covers {} samples, not {}",
                rec.neuron,
                rec.per_token.len(),
                samples.len()
            )));
        }
        for (pt, t) in rec.per_token.iter_mut().zip(traces) {
            pt.pruned = Some((0..t.rows()).map(|p| t[(p, rec.neuron)]).collect());
        }
        let means = word_means(samples, traces, rec.neuron);
        for mw in &mut rec.matched_words {
            let pruned_mean = means.get(&mw.word).map_or(0.0, |m| m.0);
            mw.pruned_mean = Some(pruned_mean);
            if mw.dense_mean > 0.0 {
                let drop = 1.0 - pruned_mean / mw.dense_mean;
                mw.drop_ratio = Some(drop);
                mw.drop_undefined = false;
                mw.significant = drop >= threshold;
            } else {
                mw.drop_ratio = None;
                mw.drop_undefined = true;
                mw.significant = false;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsaConfig {
    pub site: String,
    pub top_k: usize,
    pub words_per_neuron: usize,
    pub drop_threshold: f64,
    pub signed: bool,
}

impl NsaConfig {
    pub fn new(site: impl Into<String>) -> Self {
        Self {
            site: site.into(),
            top_k: DEFAULT_TOP_K,
            words_per_neuron: DEFAULT_WORDS_PER_NEURON,
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            signed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsaReport {
    pub task: String,
    pub config: NsaConfig,
    pub samples: Vec<String>,
    pub records: Vec<AttributionRecord>,
}

/// Scores, selects and compares in one go.
pub fn attribute(
    dense: &ModelBundle,
    pruned: &ModelBundle,
    texts: &[String],
    lexicon: &InfluentialLexicon,
    cfg: &NsaConfig,
) -> Result<NsaReport> {
    let samples = prepare_samples(dense, texts, lexicon)?;
    let traces = collect_traces(dense, &samples, &cfg.site)?;
    let members: Vec<Vec<usize>> = samples.iter().map(|s| s.members.clone()).collect();
    let scores = score_neurons(&traces, &members, cfg.signed)?;
    let mut records = select_and_match(
        &cfg.site,
        &scores,
        &samples,
        &traces,
        lexicon,
        cfg.top_k,
        cfg.words_per_neuron,
    )?;
    compare_pruned(&mut records, dense, pruned, &samples, cfg.drop_threshold)?;
    Ok(NsaReport {
        task: lexicon.task.clone(),
        config: cfg.clone(),
        samples: texts.to_vec(),
        records,
    })
}

#[derive(Serialize)]
struct SuggestRequest<'a> {
    task: &'a str,
    samples: &'a [String],
}

#[derive(Deserialize)]
struct SuggestResponse {
    words: Vec<String>,
}

/// Asks an external HTTP service for influential words. Never called unless
/// an endpoint is given explicitly.
pub fn suggest_words(endpoint: Option<&str>, task: &str, samples: &[String]) -> Result<Vec<String>> {
    let url = endpoint.filter(|u| !u.is_empty()).ok_or_else(|| {
        Error::Unavailable("no word-suggestion endpoint configured; supply a lexicon file instead".into())
    })?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(SUGGEST_TIMEOUT))
        .build()
        .into();
    let fail = |e: ureq::Error| {
        Error::Unavailable(format!(
            "word-suggestion endpoint {url} failed ({e}); supply a lexicon file instead"
        ))
    };
    let resp: SuggestResponse = agent
        .post(url)
        .send_json(SuggestRequest { task, samples })
        .map_err(fail)?
        .body_mut()
        .read_json()
        .map_err(fail)?;
    Ok(resp.words)
}

/// Turns suggested words into a lexicon file: lowercased, deduplicated in
/// first-seen order.
pub fn materialize_suggestions(task: &str, words: &[String], path: &Path) -> Result<InfluentialLexicon> {
    let mut unique: Vec<String> = Vec::new();
    for w in words {
        let w = w.trim().to_lowercase();
        if !w.is_empty() && !unique.contains(&w) {
            unique.push(w);
        }
    }
    let lex = InfluentialLexicon::new(task, unique, Provenance::ExternalSuggester)?;
    lex.save(path)?;
    Ok(lex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;

    fn lex(words: &[&str]) -> InfluentialLexicon {
        InfluentialLexicon::new("t", words.iter().map(|s| s.to_string()).collect(), Provenance::UserFile).unwrap()
    }

    fn vocab() -> Vocabulary {
        let words = ["<unk>", "<bos>", "the", "food", "was", "badly", "damaged", "."];
        Vocabulary::new(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn membership_positions() {
        let v = vocab();
        let l = lex(&["badly", "damaged"]);
        assert_eq!(token_membership(&v.tokenize("the food was badly damaged", 64), &l), vec![3, 4]);
        assert_eq!(token_membership(&v.tokenize("the food", 64), &l), Vec::<usize>::new());
        let toks = v.tokenize("Badly.", 64);
        assert_eq!(toks.len(), 2);
        assert_eq!(token_membership(&toks, &l), vec![0]);
    }

    #[test]
    fn lexicon_rules() {
        let l = lex(&["Badly", "TRUST"]);
        assert_eq!(l.words, vec!["badly", "trust"]);
        assert!(InfluentialLexicon::new("t", vec![], Provenance::UserFile).is_err());
        assert!(InfluentialLexicon::new("t", vec!["a".into(), "A".into()], Provenance::UserFile).is_err());
    }

    #[test]
    fn score_single_neuron() {
        let t = Matrix::new(3, 1, vec![0.1, -0.3, 0.6]).unwrap();
        let s = score_neurons(&[t.clone()], &[vec![2]], false).unwrap();
        assert!((s.scores[0] - 0.6).abs() < 1e-12);
        let all = score_neurons(&[t.clone()], &[vec![0, 1, 2]], false).unwrap();
        assert_eq!(all.scores[0], 1.0);
        let none = score_neurons(&[t], &[vec![]], false).unwrap();
        assert_eq!(none.scores[0], 0.0);
        let zero = score_neurons(&[Matrix::zeros(2, 2)], &[vec![0]], false).unwrap();
        assert_eq!(zero.zero_denominator, vec![0, 1]);
    }

    #[test]
    fn word_matching_by_mean_activation() {
        let v = vocab();
        let l = lex(&["badly", "damaged"]);
        let samples = vec![NsaSample {
            text: "badly damaged".into(),
            tokens: v.tokenize("badly damaged", 64),
            members: vec![0, 1],
        }];
        let traces = vec![Matrix::new(2, 3, vec![0.0, 0.21, 0.1, 0.0, 0.05, 0.1]).unwrap()];
        let scores = NeuronScores {
            scores: vec![0.1, 0.9, 0.4],
            zero_denominator: vec![],
        };
        let recs = select_and_match("s", &scores, &samples, &traces, &l, 1, 1).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].neuron, 1);
        assert_eq!(recs[0].matched_words[0].word, "badly");
        let tied = NeuronScores {
            scores: vec![0.5; 3],
            zero_denominator: vec![],
        };
        let recs = select_and_match("s", &tied, &samples, &traces, &l, 5, 1).unwrap();
        assert_eq!(recs.iter().map(|r| r.neuron).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn suggester_requires_endpoint() {
        assert!(matches!(suggest_words(None, "t", &[]), Err(Error::Unavailable(_))));
    }
}
