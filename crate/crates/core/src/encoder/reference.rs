//! A small, fully specified encoder with hand-derived gradients.
//!
//! Per-position output is `tanh(W·(E[token_t] + P[t]) + b)`; the text vector
//! is the mean over poolable positions. For `F = fixed · pooled` the gradient
//! at a poolable row is `(1/n) Wᵀ (fixed ⊙ (1 − h_t²))` and zero elsewhere.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};

use super::{
    check_shape, mean_pool, split_words, EncoderBackend, Side, SpecialTokens, TokenizedText,
    Vocabulary, DEFAULT_MAX_SEQ_LEN,
};

const MAGIC: &[u8; 4] = b"DIGE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceConfig {
    pub dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    vocab: Vocabulary,
    specials: SpecialTokens,
    seed: u64,
    token_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    proj: Array2<f64>,
    bias: Array1<f64>,
    fingerprint: String,
}

impl ReferenceEncoder {
    /// Draws every parameter uniformly from [-0.5, 0.5) with ChaCha8 seeded by
    /// `cfg.seed`, filling E, P, W, b in that order, row-major.
    pub fn new(vocab: Vocabulary, cfg: ReferenceConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-0.5..0.5))
        };
        let token_emb = draw(vocab.len(), cfg.dim);
        let pos_emb = draw(cfg.max_seq_len, cfg.dim);
        let proj = draw(cfg.dim, cfg.dim);
        let bias = draw(1, cfg.dim).index_axis_move(Axis(0), 0);
        Self::from_parts(vocab, cfg.seed, token_emb, pos_emb, proj, bias)
    }

    pub fn from_parts(
        vocab: Vocabulary,
        seed: u64,
        token_emb: Array2<f64>,
        pos_emb: Array2<f64>,
        proj: Array2<f64>,
        bias: Array1<f64>,
    ) -> Result<Self> {
        let d = bias.len();
        if d == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if pos_emb.nrows() < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        check_shape(token_emb.view(), vocab.len(), d)?;
        check_shape(pos_emb.view(), pos_emb.nrows(), d)?;
        check_shape(proj.view(), d, d)?;
        let specials = vocab.special_tokens()?;
        let mut enc = Self {
            vocab,
            specials,
            seed,
            token_emb,
            pos_emb,
            proj,
            bias,
            fingerprint: String::new(),
        };
        let digest = Sha256::digest(enc.to_bytes());
        enc.fingerprint = format!("reference-{}", binio::hex_prefix(&digest, 8));
        Ok(enc)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_embeddings(&self) -> &Array2<f64> {
        &self.token_emb
    }

    pub fn position_embeddings(&self) -> &Array2<f64> {
        &self.pos_emb
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.proj
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Per-position outputs `tanh(x Wᵀ + b)`.
    pub fn outputs(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.dot(&self.proj.t());
        h += &self.bias;
        h.mapv_inplace(f64::tanh);
        h
    }

    /// Header (magic, version, |V|, d, max_seq_len, seed), then E, P, W, b as
    /// little-endian f64, then the vocabulary as length-prefixed UTF-8 strings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.bias.len();
        let mut out =
            Vec::with_capacity(32 + 8 * d * (self.vocab.len() + self.pos_emb.nrows() + d + 1));
        out.extend_from_slice(MAGIC);
        binio::put_u32(&mut out, VERSION);
        binio::put_u64(&mut out, self.vocab.len() as u64);
        binio::put_u64(&mut out, d as u64);
        binio::put_u64(&mut out, self.pos_emb.nrows() as u64);
        binio::put_u64(&mut out, self.seed);
        binio::put_f64s(&mut out, self.token_emb.iter());
        binio::put_f64s(&mut out, self.pos_emb.iter());
        binio::put_f64s(&mut out, self.proj.iter());
        binio::put_f64s(&mut out, self.bias.iter());
        for t in self.vocab.tokens() {
            binio::put_string(&mut out, t);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "encoder parameters");
        if r.bytes(4)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let v = r.usize()?;
        let d = r.usize()?;
        let max_len = r.usize()?;
        let seed = r.u64()?;
        let matrix = |r: &mut Reader<'_>, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let n = binio::checked_area(r, rows, cols)?;
            let data = r.f64s(n)?;
            if data.iter().any(|x| !x.is_finite()) {
                return Err(r.corrupt("non-finite parameter"));
            }
            Array2::from_shape_vec((rows, cols), data).map_err(|e| r.corrupt(e.to_string()))
        };
        let token_emb = matrix(&mut r, v, d)?;
        let pos_emb = matrix(&mut r, max_len, d)?;
        let proj = matrix(&mut r, d, d)?;
        let bias = matrix(&mut r, 1, d)?.index_axis_move(Axis(0), 0);
        let mut tokens = Vec::with_capacity(v.min(r.remaining() / 4));
        for _ in 0..v {
            tokens.push(r.string()?);
        }
        r.finish()?;
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| r.corrupt(e.to_string()))?;
        Self::from_parts(vocab, seed, token_emb, pos_emb, proj, bias)
            .map_err(|e| r.corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>, tok: &TokenizedText) -> Result<()> {
        check_shape(x, tok.len(), self.embedding_dim())?;
        if tok.special_mask.len() != tok.len() || tok.attention_mask.len() != tok.len() {
            return Err(Error::Config(
                "malformed tokenization: mask lengths differ".into(),
            ));
        }
        Ok(())
    }
}

impl EncoderBackend for ReferenceEncoder {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn embedding_dim(&self) -> usize {
        self.bias.len()
    }

    fn max_seq_len(&self) -> usize {
        self.pos_emb.nrows()
    }

    fn special_tokens(&self) -> SpecialTokens {
        self.specials
    }

    fn tokenize(&self, text: &str, _side: Side) -> Result<TokenizedText> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::EmptyTokenization);
        }
        let cap = self.max_seq_len() - 2;
        let n = words.len().min(cap);
        let unk = self.specials.unk;
        let mut tok = TokenizedText {
            token_ids: Vec::with_capacity(n + 2),
            tokens: Vec::with_capacity(n + 2),
            special_mask: Vec::with_capacity(n + 2),
            attention_mask: vec![true; n + 2],
            title_span: None,
        };
        tok.token_ids.push(self.specials.cls);
        tok.tokens.push(super::CLS.to_string());
        tok.special_mask.push(true);
        for w in words.into_iter().take(n) {
            let (id, surface) = match self.vocab.id(&w) {
                Some(id) => (id, w),
                None => {
                    let id =
                        unk.ok_or_else(|| Error::Config(format!("token `{w}` not in vocabulary")))?;
                    (id, super::UNK.to_string())
                }
            };
            tok.token_ids.push(id);
            tok.tokens.push(surface);
            tok.special_mask.push(false);
        }
        tok.token_ids.push(self.specials.sep);
        tok.tokens.push(super::SEP.to_string());
        tok.special_mask.push(true);
        Ok(tok)
    }

    fn embed(&self, tok: &TokenizedText) -> Result<Array2<f64>> {
        if tok.len() > self.max_seq_len() {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tok.len(),
                self.max_seq_len()
            )));
        }
        let d = self.embedding_dim();
        let mut x = Array2::zeros((tok.len(), d));
        for (t, &id) in tok.token_ids.iter().enumerate() {
            if id as usize >= self.vocab.len() {
                return Err(Error::OutOfVocabulary {
                    id,
                    vocab_size: self.vocab.len(),
                });
            }
            let mut row = x.row_mut(t);
            row.assign(&self.token_emb.row(id as usize));
            row += &self.pos_emb.row(t);
        }
        Ok(x)
    }

    fn forward_pooled(&self, x: ArrayView2<'_, f64>, tok: &TokenizedText) -> Result<Array1<f64>> {
        self.check_input(x, tok)?;
        mean_pool(self.outputs(x).view(), tok)
    }

    fn gradient_wrt_embeddings(
        &self,
        tok: &TokenizedText,
        x: ArrayView2<'_, f64>,
        fixed: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.check_input(x, tok)?;
        let d = self.embedding_dim();
        if fixed.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: fixed.len(),
            });
        }
        let n = tok.poolable_count();
        if n == 0 {
            return Err(Error::NothingToPool);
        }
        let h = self.outputs(x);
        let mut upstream = Array2::<f64>::zeros((tok.len(), d));
        for t in (0..tok.len()).filter(|&t| tok.is_poolable(t)) {
            let mut row = upstream.row_mut(t);
            for j in 0..d {
                let hj = h[[t, j]];
                row[j] = fixed[j] * (1.0 - hj * hj) / n as f64;
            }
        }
        Ok(upstream.dot(&self.proj))
    }
}
