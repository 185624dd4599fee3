//! Static report files: activation heatmaps, the sweep CSV and a short
//! sweep summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nsa::{AttributionRecord, NsaReport};

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Largest |A| over both sides of every record.
pub fn max_abs_activation(records: &[AttributionRecord]) -> f64 {
    let mut max: f64 = 0.0;
    for r in records {
        for s in &r.per_token {
            for v in s.dense.iter().chain(s.pruned.iter().flatten()) {
                max = max.max(v.abs());
            }
        }
    }
    max
}

/// Cell opacity: `|A| / max`, 0 when `max` is 0.
pub fn intensity(a: f64, max: f64) -> f64 {
    if max > 0.0 {
        (a.abs() / max).min(1.0)
    } else {
        0.0
    }
}

const STYLE: &str = "body{font-family:sans-serif;margin:1.5em;color:#222}\
table.heat{border-collapse:collapse;margin:0.3em 0 1em 0}\
table.heat th{text-align:right;padding:2px 8px;font-weight:normal;color:#555}\
td.tok{padding:3px 5px;border:1px solid #ddd;text-align:center}\
td.tok small{display:block;color:#444;font-size:70%}\
.sig{color:#a00;font-weight:bold}\
table.words{border-collapse:collapse}table.words td,table.words th{border:1px solid #ccc;padding:2px 6px}";

fn token_row(out: &mut String, label: &str, tokens: &[String], values: &[f64], max: f64) {
    let _ = write!(out, "<tr class=\"{label}\"><th>{label}</th>");
    for (tok, a) in tokens.iter().zip(values) {
        let alpha = intensity(*a, max);
        let _ = write!(
            out,
            "<td class=\"tok\" data-a=\"{a:.4}\" data-alpha=\"{alpha:.6}\" \
             style=\"background-color:rgba(178,24,43,{alpha:.6})\" title=\"A = {a:.4}\">{}<small>{a:.4}</small></td>",
            escape_html(tok)
        );
    }
    out.push_str("</tr>\n");
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Self-contained HTML page with a dense row and a pruned row of token cells
/// per sample and record. Cell opacity is `|A|` over the report-wide maximum.
pub fn render_heatmap(title: &str, records: &[AttributionRecord], notes: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n<h1>{}</h1>\n",
        escape_html(title),
        escape_html(title)
    );
    if !notes.is_empty() {
        out.push_str("<ul class=\"meta\">\n");
        for (k, v) in notes {
            let _ = writeln!(out, "<li>{}: {}</li>", escape_html(k), escape_html(v));
        }
        out.push_str("</ul>\n");
    }
    if records.is_empty() {
        out.push_str("<p class=\"notice\">No attribution records.</p>\n</body>\n</html>\n");
        return out;
    }
    let max = max_abs_activation(records);
    let _ = writeln!(out, "<p>Cell shading is |A| relative to the largest |A| in this report ({max:.4}).</p>");
    for r in records {
        let _ = write!(
            out,
            "<section class=\"record\">\n<h2>{} neuron {} &middot; score {:.4}{}</h2>\n",
            escape_html(&r.site),
            r.neuron,
            r.score,
            if r.significant() { " <span class=\"sig\">significant drop</span>" } else { "" }
        );
        out.push_str("<table class=\"words\"><tr><th>word</th><th>occurrences</th><th>dense mean |A|</th><th>pruned mean |A|</th><th>drop ratio</th></tr>\n");
        for w in &r.matched_words {
            let drop = if w.drop_undefined { "undefined".to_string() } else { fmt_opt(w.drop_ratio) };
            let _ = writeln!(
                out,
                "<tr{}><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td><td>{}</td></tr>",
                if w.significant { " class=\"sig\"" } else { "" },
                escape_html(&w.word),
                w.occurrences,
                w.dense_mean,
                fmt_opt(w.pruned_mean),
                drop
            );
        }
        out.push_str("</table>\n");
        for s in &r.per_token {
            out.push_str("<table class=\"heat\">\n");
            token_row(&mut out, "dense", &s.tokens, &s.dense, max);
            match &s.pruned {
                Some(p) => token_row(&mut out, "pruned", &s.tokens, p, max),
                None => out.push_str("<tr class=\"pruned\"><th>pruned</th><td>not measured</td></tr>\n"),
            }
            out.push_str("</table>\n");
        }
        out.push_str("</section>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

pub fn render_nsa_report(report: &NsaReport) -> String {
    let c = &report.config;
    let notes = vec![
        ("task".to_string(), report.task.clone()),
        ("site".to_string(), c.site.clone()),
        ("top-k neurons".to_string(), c.top_k.to_string()),
        ("words per neuron".to_string(), c.words_per_neuron.to_string()),
        ("significant drop threshold".to_string(), format!("{}", c.drop_threshold)),
        (
            "activation aggregation".to_string(),
            if c.signed { "signed" } else { "absolute" }.to_string(),
        ),
    ];
    render_heatmap(&format!("Neuron attribution: {}", report.task), &report.records, &notes)
}

/// One cell parsed back from a heatmap page: (row label, token, label value, opacity).
pub type HeatCell = (String, String, f64, f64);

/// Reads the token cells of a page produced by [`render_heatmap`].
pub fn parse_heatmap_cells(html: &str) -> Result<Vec<HeatCell>> {
    let mut cells = Vec::new();
    let mut row = String::new();
    let mut rest = html;
    loop {
        let next_row = rest.find("<tr class=\"");
        let next_cell = rest.find("<td class=\"tok\"");
        match (next_row, next_cell) {
            (Some(r), c) if c.is_none_or(|c| r < c) => {
                let s = &rest[r + 11..];
                let end = s.find('"').ok_or_else(|| Error::invalid("unterminated row class"))?;
                row = s[..end].to_string();
                rest = &s[end..];
            }
            (_, Some(c)) => {
                let s = &rest[c..];
                let attr = |name: &str| -> Result<f64> {
                    let key = format!("{name}=\"");
                    let i = s.find(&key).ok_or_else(|| Error::invalid(format!("cell without {name}")))? + key.len();
                    let j = s[i..].find('"').ok_or_else(|| Error::invalid("unterminated attribute"))?;
                    s[i..i + j]
                        .parse()
                        .map_err(|e| Error::invalid(format!("bad {name} value: {e}")))
                };
                let a = attr("data-a")?;
                let alpha = attr("data-alpha")?;
                let open = s.find('>').ok_or_else(|| Error::invalid("unterminated cell"))? + 1;
                let close = s[open..].find("<small>").ok_or_else(|| Error::invalid("cell without label"))?;
                let token = s[open..open + close].to_string();
                cells.push((row.clone(), token, a, alpha));
                rest = &s[open..];
            }
            _ => break,
        }
    }
    Ok(cells)
}

pub const SWEEP_HEADER: [&str; 12] = [
    "cell_id",
    "model",
    "method",
    "pattern",
    "calib_corpus",
    "seq_len",
    "task",
    "category",
    "n_items",
    "correct",
    "accuracy",
    "perplexity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_id: String,
    pub model: String,
    pub method: String,
    pub pattern: String,
    pub calib_corpus: String,
    pub seq_len: usize,
    pub task: String,
    pub category: String,
    pub n_items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub perplexity: Option<f64>,
}

/// CSV with the fixed [`SWEEP_HEADER`]; numbers use Rust's shortest
/// round-trip formatting, so the output does not depend on locale.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.cell_id.clone(),
            r.model.clone(),
            r.method.clone(),
            r.pattern.clone(),
            r.calib_corpus.clone(),
            r.seq_len.to_string(),
            r.task.clone(),
            r.category.clone(),
            r.n_items.to_string(),
            r.correct.to_string(),
            r.accuracy.to_string(),
            r.perplexity.map_or_else(String::new, |p| p.to_string()),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != SWEEP_HEADER {
        return Err(Error::invalid(format!("unexpected sweep CSV header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::invalid(format!("csv: {e}"))))
        .collect()
}

/// Spread of accuracy across calibration corpora for each combination of
/// the other axes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSpread {
    pub model: String,
    pub method: String,
    pub pattern: String,
    pub seq_len: usize,
    pub task: String,
    pub accuracies: Vec<(String, f64)>,
    pub spread: f64,
}

pub fn corpus_spread(rows: &[SweepRow]) -> Vec<CorpusSpread> {
    let mut groups: BTreeMap<(String, String, String, usize, String), Vec<(String, f64)>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.model.clone(), r.method.clone(), r.pattern.clone(), r.seq_len, r.task.clone()))
            .or_default()
            .push((r.calib_corpus.clone(), r.accuracy));
    }
    groups
        .into_iter()
        .map(|((model, method, pattern, seq_len, task), accuracies)| {
            let max = accuracies.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
            let min = accuracies.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
            CorpusSpread {
                model,
                method,
                pattern,
                seq_len,
                task,
                accuracies,
                spread: max - min,
            }
        })
        .collect()
}

/// Markdown summary of a sweep: the full grid and, when more than one
/// calibration corpus was used, the accuracy spread across corpora.
pub fn sweep_report(rows: &[SweepRow]) -> String {
    let mut out = String::from("# Sweep summary\n\n");
    let _ = writeln!(out, "{} rows.\n", rows.len());
    out.push_str("| cell | method | pattern | corpus | seq_len | task | accuracy | perplexity |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {:.4} | {} |",
            r.cell_id,
            r.method,
            r.pattern,
            r.calib_corpus,
            r.seq_len,
            r.task,
            r.accuracy,
            r.perplexity.map_or_else(|| "-".to_string(), |p| format!("{p:.3}"))
        );
    }
    let spreads = corpus_spread(rows);
    if spreads.iter().any(|s| s.accuracies.len() > 1) {
        out.push_str("\n## Calibration corpus spread\n\n");
        out.push_str("| method | pattern | seq_len | task | accuracy by corpus | spread |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for s in spreads.iter().filter(|s| s.accuracies.len() > 1) {
            let by: Vec<String> = s.accuracies.iter().map(|(c, a)| format!("{c}={a:.4}")).collect();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {:.4} |",
                s.method,
                s.pattern,
                s.seq_len,
                s.task,
                by.join(", "),
                s.spread
            );
        }
        let max = spreads.iter().map(|s| s.spread).fold(0.0, f64::max);
        let _ = writeln!(out, "\nLargest accuracy spread across calibration corpora: {max:.4}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsa::SampleActivations;

    fn record(dense: Vec<f64>, pruned: Vec<f64>) -> AttributionRecord {
        AttributionRecord {
            site: "layer.0.mlp.act".into(),
            neuron: 3,
            score: 0.5,
            zero_denominator: false,
            matched_words: vec![],
            per_token: vec![SampleActivations {
                tokens: ["the", "box", "was", "<b>", "damaged"].iter().map(|s| s.to_string()).collect(),
                dense,
                pruned: Some(pruned),
            }],
        }
    }

    #[test]
    fn layout_and_labels() {
        let r = record(vec![0.1, -0.2112, 0.0, 0.3, 0.05], vec![0.1, 0.0084, 0.0, 0.0, 0.0]);
        let html = render_heatmap("t", &[r], &[]);
        let cells = parse_heatmap_cells(&html).unwrap();
        assert_eq!(cells.len(), 10);
        assert_eq!(cells.iter().filter(|c| c.0 == "dense").count(), 5);
        assert_eq!(cells[1].2, -0.2112);
        assert_eq!(cells[6].2, 0.0084);
        assert_eq!(cells[3].1, "&lt;b&gt;");
        assert_eq!(cells[3].3, 1.0);
        assert!(!html.contains("http"));
    }

    #[test]
    fn zero_activations_have_zero_intensity() {
        let html = render_heatmap("t", &[record(vec![0.0; 5], vec![0.0; 5])], &[]);
        assert!(parse_heatmap_cells(&html).unwrap().iter().all(|c| c.3 == 0.0));
    }

    #[test]
    fn empty_report_has_notice() {
        let html = render_heatmap("t", &[], &[]);
        assert!(html.contains("No attribution records"));
        assert!(html.ends_with("</html>\n"));
    }

    #[test]
    fn csv_round_trip() {
        let row = SweepRow {
            cell_id: "c0".into(),
            model: "m".into(),
            method: "wanda".into(),
            pattern: "0.5".into(),
            calib_corpus: "wiki".into(),
            seq_len: 64,
            task: "t".into(),
            category: "qa".into(),
            n_items: 10,
            correct: 7,
            accuracy: 0.7,
            perplexity: None,
        };
        let text = sweep_csv(std::slice::from_ref(&row)).unwrap();
        assert!(text.starts_with("cell_id,model,method,pattern,calib_corpus,seq_len,task,category,n_items,correct,accuracy,perplexity\n"));
        assert_eq!(parse_sweep_csv(&text).unwrap(), vec![row]);
    }
}
