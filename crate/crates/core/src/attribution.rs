//! Integrated Gradients over input embeddings with `[PAD]` baselines.
//!
//! For a scalar `F` of an L×d input, the attribution of entry `i` is
//! `(x_i − x'_i) · ∫₀¹ ∂F(x' + α(x − x'))/∂x_i dα`, with the integral replaced
//! by a fixed quadrature rule. Per-token scores are row sums, so token scores
//! add up to `F(x) − F(x')` up to the quadrature error reported as the
//! completeness residual.
//!
//! Query-side attribution pads the query and holds the document vector fixed;
//! document-side attribution does the mirror image.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{score, EncoderBackend, Side, SpecialTokens, TokenizedText, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    LeftRiemann,
    Trapezoid,
}

impl QuadratureRule {
    pub fn as_str(self) -> &'static str {
        match self {
            QuadratureRule::LeftRiemann => "left-riemann",
            QuadratureRule::Trapezoid => "trapezoid",
        }
    }
}

impl std::str::FromStr for QuadratureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-riemann" | "left" | "riemann" => Ok(QuadratureRule::LeftRiemann),
            "trapezoid" | "trapezoidal" => Ok(QuadratureRule::Trapezoid),
            other => Err(Error::Config(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub steps: usize,
    pub rule: QuadratureRule,
    pub rel_tolerance: f64,
    pub abs_tolerance: f64,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 128,
            rule: QuadratureRule::Trapezoid,
            rel_tolerance: 1e-3,
            abs_tolerance: 1e-6,
        }
    }
}

impl IgConfig {
    pub fn with_steps(steps: usize, rule: QuadratureRule) -> Self {
        Self {
            steps,
            rule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("IG steps must be at least 1".into()));
        }
        if !(self.rel_tolerance >= 0.0 && self.abs_tolerance >= 0.0) {
            return Err(Error::Config("IG tolerances must be non-negative".into()));
        }
        Ok(())
    }

    /// Allowed residual for a given `F(x) − F(x')`.
    pub fn tolerance(&self, delta: f64) -> f64 {
        self.rel_tolerance * delta.abs() + self.abs_tolerance
    }
}

/// Interpolation coefficients and weights; weights sum to one.
pub fn quadrature_nodes(steps: usize, rule: QuadratureRule) -> Vec<(f64, f64)> {
    let m = steps as f64;
    match rule {
        QuadratureRule::LeftRiemann => (0..steps).map(|k| (k as f64 / m, 1.0 / m)).collect(),
        QuadratureRule::Trapezoid => (0..=steps)
            .map(|k| {
                let w = if k == 0 || k == steps {
                    0.5 / m
                } else {
                    1.0 / m
                };
                (k as f64 / m, w)
            })
            .collect(),
    }
}

/// A differentiable scalar function of an L×d matrix.
pub trait ScalarField: Sync {
    fn value(&self, x: ArrayView2<'_, f64>) -> Result<f64>;
    fn gradient(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    fn gradient_batch(&self, points: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        points.iter().map(|p| self.gradient(p.view())).collect()
    }

    /// Whether gradient evaluations may run concurrently.
    fn parallel(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgOutput {
    pub attributions: Array2<f64>,
    pub f_x: f64,
    pub f_baseline: f64,
    pub residual: f64,
}

const CHUNK: usize = 16;

pub fn integrated_gradients<F: ScalarField + ?Sized>(
    f: &F,
    x: ArrayView2<'_, f64>,
    x_base: ArrayView2<'_, f64>,
    cfg: &IgConfig,
) -> Result<IgOutput> {
    cfg.validate()?;
    if x.dim() != x_base.dim() {
        return Err(Error::ShapeMismatch {
            expected: x.dim(),
            actual: x_base.dim(),
        });
    }
    let delta = &x - &x_base;
    let nodes = quadrature_nodes(cfg.steps, cfg.rule);
    let mut avg_grad = Array2::<f64>::zeros(x.dim());

    for (c, chunk) in nodes.chunks(CHUNK).enumerate() {
        let points: Vec<Array2<f64>> = chunk
            .iter()
            .map(|&(alpha, _)| {
                let mut p = delta.clone();
                p *= alpha;
                p += &x_base;
                p
            })
            .collect();
        let grads = if f.parallel() {
            points
                .par_iter()
                .map(|p| f.gradient(p.view()))
                .collect::<Result<Vec<_>>>()?
        } else {
            f.gradient_batch(&points)?
        };
        // accumulate in step order so the sum is reproducible
        for (j, (g, &(_, w))) in grads.iter().zip(chunk).enumerate() {
            let step = c * CHUNK + j;
            if g.dim() != x.dim() {
                return Err(Error::ShapeMismatch {
                    expected: x.dim(),
                    actual: g.dim(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { step });
            }
            avg_grad.scaled_add(w, g);
        }
    }

    let attributions = delta * &avg_grad;
    let f_x = f.value(x)?;
    let f_baseline = f.value(x_base)?;
    let residual = (attributions.sum() - (f_x - f_baseline)).abs();
    Ok(IgOutput {
        attributions,
        f_x,
        f_baseline,
        residual,
    })
}

/// Sum over embedding dimensions, one score per token.
pub fn reduce_to_tokens(attr: ArrayView2<'_, f64>) -> Vec<f64> {
    attr.axis_iter(Axis(0))
        .map(|row| row.iter().fold(0.0, |acc, v| acc + v))
        .collect()
}

/// Replaces every content token with `[PAD]`, keeping `[CLS]`, `[SEP]`, the
/// masks and the title span.
pub fn pad_baseline(tok: &TokenizedText, specials: &SpecialTokens) -> Result<TokenizedText> {
    let pad = specials.pad()?;
    let mut out = tok.clone();
    for t in 0..out.len() {
        if !out.special_mask[t] {
            out.token_ids[t] = pad;
            out.tokens[t] = PAD.to_string();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub side: Side,
    pub tokens: Vec<String>,
    pub token_scores: Vec<f64>,
    pub score_f_x: f64,
    pub score_f_baseline: f64,
    pub completeness_residual: f64,
}

impl AttributionResult {
    pub fn total(&self) -> f64 {
        self.token_scores.iter().sum()
    }

    pub fn within_tolerance(&self, cfg: &IgConfig) -> bool {
        self.completeness_residual <= cfg.tolerance(self.score_f_x - self.score_f_baseline)
    }
}

/// `F(e) = fixed · forward_pooled(e)` for one tokenization.
pub struct PooledScore<'a, B: EncoderBackend + ?Sized> {
    pub backend: &'a B,
    pub tok: &'a TokenizedText,
    pub fixed: ArrayView1<'a, f64>,
}

impl<B: EncoderBackend + ?Sized> ScalarField for PooledScore<'_, B> {
    fn value(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        score(self.backend.forward_pooled(x, self.tok)?.view(), self.fixed)
    }

    fn gradient(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.backend
            .gradient_wrt_embeddings(self.tok, x, self.fixed)
    }

    fn gradient_batch(&self, points: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        self.backend.gradient_batch(self.tok, points, self.fixed)
    }

    fn parallel(&self) -> bool {
        self.backend.supports_parallel()
    }
}

/// Attributes one side of a query-document pair while the other side's vector
/// stays fixed at its true encoding.
pub fn attribute_side<B: EncoderBackend + ?Sized>(
    query_tok: &TokenizedText,
    doc_tok: &TokenizedText,
    backend: &B,
    side: Side,
    cfg: &IgConfig,
) -> Result<AttributionResult> {
    let (target, other) = match side {
        Side::Query => (query_tok, doc_tok),
        Side::Document => (doc_tok, query_tok),
    };
    let fixed = encode_tokens(backend, other)?;
    attribute_against(target, fixed.view(), backend, side, cfg)
}

/// Attributes `tok` against an already-encoded vector for the other side.
pub fn attribute_against<B: EncoderBackend + ?Sized>(
    tok: &TokenizedText,
    fixed: ArrayView1<'_, f64>,
    backend: &B,
    side: Side,
    cfg: &IgConfig,
) -> Result<AttributionResult> {
    let x = backend.embed(tok)?;
    let x_base = backend.embed(&pad_baseline(tok, &backend.special_tokens())?)?;
    let field = PooledScore {
        backend,
        tok,
        fixed: fixed.view(),
    };
    let out = integrated_gradients(&field, x.view(), x_base.view(), cfg)?;
    let token_scores = reduce_to_tokens(out.attributions.view());
    let total: f64 = token_scores.iter().sum();
    Ok(AttributionResult {
        side,
        tokens: tok.tokens.clone(),
        completeness_residual: (total - (out.f_x - out.f_baseline)).abs(),
        token_scores,
        score_f_x: out.f_x,
        score_f_baseline: out.f_baseline,
    })
}

pub fn encode_tokens<B: EncoderBackend + ?Sized>(
    backend: &B,
    tok: &TokenizedText,
) -> Result<Array1<f64>> {
    let x = backend.embed(tok)?;
    backend.forward_pooled(x.view(), tok)
}

/// Line-delimited attribution record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub query_id: String,
    pub doc_id: String,
    pub side: Side,
    pub tokens: Vec<String>,
    pub token_scores: Vec<f64>,
    pub score_f_x: f64,
    pub score_f_baseline: f64,
    pub residual: f64,
    pub config: IgConfig,
}

impl AttributionRecord {
    pub fn new(query_id: &str, doc_id: &str, r: &AttributionResult, cfg: &IgConfig) -> Self {
        Self {
            query_id: query_id.to_string(),
            doc_id: doc_id.to_string(),
            side: r.side,
            tokens: r.tokens.clone(),
            token_scores: r.token_scores.clone(),
            score_f_x: r.score_f_x,
            score_f_baseline: r.score_f_baseline,
            residual: r.completeness_residual,
            config: *cfg,
        }
    }
}

/// Element-wise `w ⊙ (x − x')`, the exact IG answer for a linear scorer.
pub fn linear_attribution(
    w: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    x_base: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    Zip::from(&mut out)
        .and(w)
        .and(x)
        .and(x_base)
        .for_each(|o, &w, &x, &b| *o = w * (x - b));
    out
}
