//! The differentiable encoding contract shared by every backend.
//!
//! A backend tokenizes text, maps tokens to input embeddings, runs a forward
//! pass from embeddings to a mean-pooled vector and exposes the gradient of
//! `fixed · pooled` with respect to the input embeddings. Integrated Gradients
//! only ever talks to a backend through [`EncoderBackend`].

mod external;
mod reference;
mod vocab;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub use external::{serve_request, ExternalEncoder, ExternalInfo, ProcessTransport, Transport};
pub use reference::{ReferenceConfig, ReferenceEncoder};
pub use vocab::{split_words, SpecialTokens, Vocabulary, CLS, PAD, SEP, UNK};

pub const DEFAULT_MAX_SEQ_LEN: usize = 350;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Document,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Query => "query",
            Side::Document => "document",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub token_ids: Vec<TokenId>,
    pub tokens: Vec<String>,
    /// True for `[CLS]`, `[SEP]` and trailing `[PAD]` positions.
    pub special_mask: Vec<bool>,
    pub attention_mask: Vec<bool>,
    /// Half-open token interval `[start, end)` covering the title.
    pub title_span: Option<(usize, usize)>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_poolable(&self, t: usize) -> bool {
        !self.special_mask[t] && self.attention_mask[t]
    }

    pub fn poolable_count(&self) -> usize {
        (0..self.len()).filter(|&t| self.is_poolable(t)).count()
    }

    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&t| !self.special_mask[t])
    }

    pub fn in_title(&self, t: usize) -> bool {
        self.title_span.is_some_and(|(s, e)| t >= s && t < e)
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let n = self.token_ids.len();
        let bad = |m: &str| Err(Error::Config(format!("malformed tokenization: {m}")));
        if n == 0 || n > max_seq_len {
            return bad("length out of range");
        }
        if self.tokens.len() != n || self.special_mask.len() != n || self.attention_mask.len() != n
        {
            return bad("sequence lengths differ");
        }
        if let Some((s, e)) = self.title_span {
            if s < 1 || e > n.saturating_sub(1) || s >= e || (s..e).any(|t| self.special_mask[t]) {
                return bad("title span outside content tokens");
            }
        }
        Ok(())
    }

    /// Appends unattended `[PAD]` positions up to `len`.
    pub fn pad_to(&mut self, len: usize, pad_id: TokenId) {
        while self.len() < len {
            self.token_ids.push(pad_id);
            self.tokens.push(PAD.to_string());
            self.special_mask.push(true);
            self.attention_mask.push(false);
        }
    }
}

pub trait EncoderBackend: Send + Sync {
    /// Identifies the model weights; indexes record it and refuse mismatches.
    fn fingerprint(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn special_tokens(&self) -> SpecialTokens;

    fn tokenize(&self, text: &str, side: Side) -> Result<TokenizedText>;

    /// Input embeddings, one row per token.
    fn embed(&self, tok: &TokenizedText) -> Result<Array2<f64>>;

    fn forward_pooled(&self, x: ArrayView2<'_, f64>, tok: &TokenizedText) -> Result<Array1<f64>>;

    /// Gradient of `fixed · forward_pooled(x)` with respect to `x`.
    fn gradient_wrt_embeddings(
        &self,
        _tok: &TokenizedText,
        _x: ArrayView2<'_, f64>,
        _fixed: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Err(Error::Unsupported("gradients"))
    }

    /// Gradients at several points. Backends with per-call overhead override this.
    fn gradient_batch(
        &self,
        tok: &TokenizedText,
        points: &[Array2<f64>],
        fixed: ArrayView1<'_, f64>,
    ) -> Result<Vec<Array2<f64>>> {
        points
            .iter()
            .map(|x| self.gradient_wrt_embeddings(tok, x.view(), fixed))
            .collect()
    }

    fn encode(&self, text: &str, side: Side) -> Result<Array1<f64>> {
        let tok = self.tokenize(text, side)?;
        let x = self.embed(&tok)?;
        self.forward_pooled(x.view(), &tok)
    }

    /// Whether concurrent calls on one instance are allowed.
    fn supports_parallel(&self) -> bool {
        true
    }
}

/// Dot-product relevance.
pub fn score(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.dot(&b))
}

/// Mean of per-position outputs over attended, non-special positions.
pub fn mean_pool(outputs: ArrayView2<'_, f64>, tok: &TokenizedText) -> Result<Array1<f64>> {
    let mut acc = Array1::<f64>::zeros(outputs.ncols());
    let mut n = 0usize;
    for (t, row) in outputs.axis_iter(Axis(0)).enumerate() {
        if tok.is_poolable(t) {
            acc += &row;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NothingToPool);
    }
    acc /= n as f64;
    Ok(acc)
}

pub(crate) fn check_shape(x: ArrayView2<'_, f64>, rows: usize, cols: usize) -> Result<()> {
    if x.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch {
            expected: (rows, cols),
            actual: x.dim(),
        });
    }
    Ok(())
}

/// Tokenizes `title + " " + text` and marks the title span.
///
/// The title's own content tokens must be a prefix of the document's content
/// tokens; subword tokenizers that merge across the boundary are rejected.
pub fn tokenize_document<B: EncoderBackend + ?Sized>(
    backend: &B,
    doc: &Document,
) -> Result<TokenizedText> {
    let mut tok = backend.tokenize(&doc.full_text(), Side::Document)?;
    if !doc.has_title() {
        return Ok(tok);
    }
    let title = match backend.tokenize(&doc.title, Side::Document) {
        Ok(t) => t,
        Err(Error::EmptyTokenization) => return Ok(tok),
        Err(e) => return Err(e),
    };
    let title_ids: Vec<TokenId> = title
        .content_positions()
        .map(|t| title.token_ids[t])
        .collect();
    let doc_content: Vec<usize> = tok.content_positions().collect();
    let n = title_ids.len().min(doc_content.len());
    let prefix_ok = title_ids[..n]
        .iter()
        .zip(&doc_content[..n])
        .all(|(&id, &pos)| tok.token_ids[pos] == id);
    if !prefix_ok {
        return Err(Error::InvalidRecord {
            id: doc.doc_id.clone(),
            message: "title tokens are not a prefix of the document tokens".into(),
        });
    }
    if n > 0 {
        tok.title_span = Some((doc_content[0], doc_content[n - 1] + 1));
    }
    Ok(tok)
}
