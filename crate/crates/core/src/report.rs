//! Static artifacts: instance heatmaps (HTML) and tab-separated weight files.
//!
//! Every tab-separated file starts with exactly one `#` metadata line of
//! `key=value` pairs separated by tabs. Floats are written in shortest
//! round-trip form, so a reader recovers the exact values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::explain::{
    InstanceExplanation, ModelComparison, RankingExplanation, TitleAttributionReport, WeightMap,
};
use crate::index::Hit;

/// Shading for positive intensities (RGB).
pub const POSITIVE_RGB: (u8, u8, u8) = (34, 139, 34);
/// Shading for negative intensities (RGB).
pub const NEGATIVE_RGB: (u8, u8, u8) = (220, 20, 60);

/// `score / max |score|` over the segment; an all-zero segment stays zero.
pub fn normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| s / max).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDoc {
    pub query: Vec<(String, f64)>,
    pub document: Vec<(String, f64)>,
}

impl HeatmapDoc {
    pub fn from_explanation(ex: &InstanceExplanation) -> Self {
        let seg = |tokens: &[String], scores: &[f64]| {
            tokens
                .iter()
                .cloned()
                .zip(normalize(scores))
                .collect::<Vec<_>>()
        };
        Self {
            query: seg(&ex.query_attr.tokens, &ex.query_attr.token_scores),
            document: seg(&ex.doc_attr.tokens, &ex.doc_attr.token_scores),
        }
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
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

fn shade(intensity: f64) -> Option<String> {
    if intensity == 0.0 {
        return None;
    }
    let (r, g, b) = if intensity > 0.0 {
        POSITIVE_RGB
    } else {
        NEGATIVE_RGB
    };
    Some(format!("rgba({r},{g},{b},{:.3})", intensity.abs()))
}

fn segment_html(
    out: &mut String,
    label: &str,
    seg: &[(String, f64)],
    title_span: Option<(usize, usize)>,
) {
    let _ = writeln!(out, "<section><h2>{label}</h2><p class=\"tokens\">");
    for (t, (tok, v)) in seg.iter().enumerate() {
        let in_title = title_span.is_some_and(|(s, e)| t >= s && t < e);
        let class = if in_title { " class=\"title\"" } else { "" };
        let style = shade(*v)
            .map(|c| format!(" style=\"background-color:{c}\""))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "<span{class}{style} title=\"{v:.4}\">{}</span>",
            html_escape(tok)
        );
    }
    out.push_str("</p></section>\n");
}

pub fn render_instance_html(ex: &InstanceExplanation) -> String {
    let heat = HeatmapDoc::from_explanation(ex);
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n");
    let _ = writeln!(
        out,
        "<title>{} / {}</title>",
        html_escape(&ex.query_id),
        html_escape(&ex.doc_id)
    );
    out.push_str(
        "<style>body{font-family:sans-serif;max-width:60em;margin:2em auto}\
         .tokens span{padding:0 2px;margin:1px;border-radius:3px;display:inline-block}\
         .title{text-decoration:underline}footer{color:#555;font-size:0.9em}</style>\n",
    );
    out.push_str("</head><body>\n");
    segment_html(&mut out, "Query", &heat.query, None);
    segment_html(&mut out, "Document", &heat.document, ex.doc_title_span);
    let _ = writeln!(
        out,
        "<footer>score={} | query residual={:e} (F(x)={}, F(baseline)={}) | document residual={:e} (F(x)={}, F(baseline)={})</footer>",
        ex.score,
        ex.query_attr.completeness_residual,
        ex.query_attr.score_f_x,
        ex.query_attr.score_f_baseline,
        ex.doc_attr.completeness_residual,
        ex.doc_attr.score_f_x,
        ex.doc_attr.score_f_baseline,
    );
    out.push_str("</body></html>\n");
    out
}

pub fn render_instance(ex: &InstanceExplanation, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), render_instance_html(ex))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(format!(
                    "bad escape `\\{}`",
                    other.map(String::from).unwrap_or_default()
                ))
            }
        }
    }
    Ok(out)
}

fn meta_line(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs
        .iter()
        .map(|(k, v)| format!("{k}={}", escape_field(v)))
        .collect();
    format!("# {}\n", body.join("\t"))
}

/// Parses a `# k=v\tk=v` metadata line.
pub fn parse_meta_line(line: &str) -> Result<BTreeMap<String, String>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(1, "missing `#` metadata line"))?
        .trim_start_matches(' ');
    let mut out = BTreeMap::new();
    for part in body.split('\t').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("metadata entry `{part}` lacks `=`")))?;
        out.insert(
            k.to_string(),
            unescape_field(v).map_err(|m| Error::parse(1, m))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudWeights {
    pub query_id: String,
    pub k: usize,
    pub polarity: Polarity,
    /// Strictly positive weights, heaviest first (ties by token).
    pub entries: Vec<(String, f64)>,
}

impl CloudWeights {
    pub fn new(query_id: &str, k: usize, polarity: Polarity, weights: &WeightMap) -> Result<Self> {
        if let Some((t, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!(
                "cloud weight for `{t}` is not positive: {w}"
            )));
        }
        let mut entries: Vec<_> = weights.iter().map(|(t, &w)| (t.clone(), w)).collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            query_id: query_id.to_string(),
            k,
            polarity,
            entries,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = meta_line(&[
            ("query_id", self.query_id.clone()),
            ("k", self.k.to_string()),
            ("polarity", self.polarity.as_str().to_string()),
        ]);
        for (t, w) in &self.entries {
            let _ = writeln!(out, "{}\t{w}", escape_field(t));
        }
        out
    }
}

pub fn emit_cloud(weights: &CloudWeights, path: impl AsRef<Path>) -> Result<()> {
    if weights.entries.is_empty() {
        return Err(Error::Empty("cloud has no entries"));
    }
    write_file(path.as_ref(), weights.to_tsv())
}

pub fn read_cloud(text: &str) -> Result<CloudWeights> {
    let mut lines = text.lines();
    let meta = parse_meta_line(lines.next().unwrap_or(""))?;
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::parse(1, format!("metadata lacks `{k}`")))
    };
    let polarity = match get("polarity")?.as_str() {
        "positive" => Polarity::Positive,
        "negative" => Polarity::Negative,
        other => return Err(Error::parse(1, format!("unknown polarity `{other}`"))),
    };
    let k = get("k")?
        .parse()
        .map_err(|_| Error::parse(1, "k is not an integer"))?;
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let (t, w) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(lineno, "expected token<TAB>weight"))?;
        let w: f64 = w
            .parse()
            .map_err(|_| Error::parse(lineno, format!("weight `{w}` is not a number")))?;
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::parse(lineno, "weight must be positive"));
        }
        entries.push((unescape_field(t).map_err(|m| Error::parse(lineno, m))?, w));
    }
    Ok(CloudWeights {
        query_id: get("query_id")?.clone(),
        k,
        polarity,
        entries,
    })
}

pub fn title_summary_tsv(report: &TitleAttributionReport) -> String {
    let mut out = meta_line(&[
        ("seed", report.seed.to_string()),
        ("rows", report.rows.len().to_string()),
        ("skipped", report.skipped.len().to_string()),
    ]);
    out.push_str("query_id\tdoc_id\ttitle_sum_a\ttitle_sum_b\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            escape_field(&r.query_id),
            escape_field(&r.doc_id),
            r.title_sum_a,
            r.title_sum_b
        );
    }
    let (a, b) = report.aggregate();
    let _ = writeln!(out, "TOTAL\t*\t{a}\t{b}");
    out
}

pub fn emit_title_summary(report: &TitleAttributionReport, path: impl AsRef<Path>) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::Empty("title report has no rows"));
    }
    write_file(path.as_ref(), title_summary_tsv(report))
}

pub fn ranking_table_tsv(re: &RankingExplanation) -> String {
    let mut out = meta_line(&[("query_id", re.query_id.clone()), ("k", re.k.to_string())]);
    out.push_str("token\ttotal\tdoc_count\n");
    for (t, v, n) in re.table() {
        let _ = writeln!(out, "{}\t{v}\t{n}", escape_field(t));
    }
    out
}

/// Retrieval results, one `query_id rank doc_id score` row per hit.
pub fn hits_tsv(runs: &[(String, Vec<Hit>)]) -> String {
    let mut out = String::from("query_id\trank\tdoc_id\tscore\n");
    for (q, hits) in runs {
        for (i, h) in hits.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                escape_field(q),
                i + 1,
                escape_field(&h.doc_id),
                h.score
            );
        }
    }
    out
}

pub fn delta_table_tsv(query_id: &str, cmp: &ModelComparison) -> String {
    let mut out = meta_line(&[
        ("query_id", query_id.to_string()),
        ("k", cmp.a.k.to_string()),
    ]);
    out.push_str("token\ttotal_a\ttotal_b\tdelta\n");
    let mut rows: Vec<_> = cmp.delta.iter().collect();
    rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(b.0)));
    for (t, d) in rows {
        let a = cmp.a.per_token_totals.get(t).copied().unwrap_or(0.0);
        let b = cmp.b.per_token_totals.get(t).copied().unwrap_or(0.0);
        let _ = writeln!(out, "{}\t{a}\t{b}\t{d}", escape_field(t));
    }
    out
}

pub fn eval_table_tsv(res: &EvalResult) -> String {
    let mut out = meta_line(&[
        ("metric", res.metric.clone()),
        ("queries", res.per_query.len().to_string()),
        ("excluded", res.excluded.to_string()),
    ]);
    let _ = writeln!(out, "query_id\t{}", res.metric);
    for (q, v) in &res.per_query {
        let _ = writeln!(out, "{}\t{v}", escape_field(q));
    }
    let _ = writeln!(out, "MEAN\t{}", res.mean);
    out
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Stream(e.into()))?);
        out.push('\n');
    }
    Ok(out)
}
