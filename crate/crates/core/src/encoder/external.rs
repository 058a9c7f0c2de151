//! Adapter for encoders that live in another runtime.
//!
//! The adapter speaks line-delimited JSON: one request object per line, one
//! response object per line. Every request carries an `op` field:
//!
//! | op               | request fields                                                | response fields                          |
//! |------------------|---------------------------------------------------------------|------------------------------------------|
//! | `info`           |                                                               | `fingerprint dim max_seq_len cls_id sep_id pad_id` |
//! | `tokenize`       | `text side`                                                   | `token_ids tokens special_mask [attention_mask]` |
//! | `embed`          | `token_ids`                                                   | `embeddings` (rows)                      |
//! | `forward_pooled` | `token_ids special_mask attention_mask embeddings`            | `pooled`                                 |
//! | `gradient`       | `token_ids special_mask attention_mask points fixed`          | `gradients` (one matrix per point)       |
//! | `encode`         | `text side`                                                   | `pooled`                                 |
//!
//! A response with an `error` string fails the call. [`serve_request`]
//! implements the server side on top of any in-process backend.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::{check_shape, EncoderBackend, Side, SpecialTokens, TokenId, TokenizedText};

pub trait Transport: Send {
    fn request(&mut self, req: &Value) -> Result<Value>;
}

/// Child process speaking the protocol on stdin/stdout.
pub struct ProcessTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessTransport {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = BufReader::new(child.stdout.take().expect("piped"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }
}

impl Transport for ProcessTransport {
    fn request(&mut self, req: &Value) -> Result<Value> {
        let mut line = serde_json::to_string(req).map_err(|e| Error::External(e.to_string()))?;
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;
        let mut resp = String::new();
        if self.stdout.read_line(&mut resp)? == 0 {
            return Err(Error::External("backend process closed its output".into()));
        }
        serde_json::from_str(&resp).map_err(|e| Error::External(format!("bad response: {e}")))
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalInfo {
    pub fingerprint: String,
    pub dim: usize,
    pub max_seq_len: usize,
    pub cls_id: TokenId,
    pub sep_id: TokenId,
    pub pad_id: Option<TokenId>,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    token_ids: Vec<TokenId>,
    tokens: Vec<String>,
    special_mask: Vec<bool>,
    #[serde(default)]
    attention_mask: Option<Vec<bool>>,
}

/// Calls are serialized through a mutex, so one instance is safe to share but
/// never runs requests concurrently.
pub struct ExternalEncoder {
    transport: Mutex<Box<dyn Transport>>,
    info: ExternalInfo,
}

impl std::fmt::Debug for ExternalEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEncoder")
            .field("info", &self.info)
            .finish()
    }
}

fn rows_to_array(rows: Vec<Vec<f64>>, cols: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                actual: r.len(),
            });
        }
        flat.extend(r);
    }
    Ok(Array2::from_shape_vec((n, cols), flat).expect("length checked"))
}

fn array_to_rows(x: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn field<T: for<'de> Deserialize<'de>>(resp: &mut Value, name: &str) -> Result<T> {
    let v = resp
        .get_mut(name)
        .map(Value::take)
        .ok_or_else(|| Error::External(format!("response lacks `{name}`")))?;
    serde_json::from_value(v).map_err(|e| Error::External(format!("field `{name}`: {e}")))
}

fn tok_fields(tok: &TokenizedText) -> Value {
    json!({
        "token_ids": tok.token_ids,
        "special_mask": tok.special_mask,
        "attention_mask": tok.attention_mask,
    })
}

impl ExternalEncoder {
    pub fn spawn(command: &str) -> Result<Self> {
        Self::with_transport(Box::new(ProcessTransport::spawn(command)?))
    }

    pub fn with_transport(mut transport: Box<dyn Transport>) -> Result<Self> {
        let mut resp = transport.request(&json!({"op": "info"}))?;
        check_error(&resp)?;
        let info: ExternalInfo = serde_json::from_value(resp.take())
            .map_err(|e| Error::External(format!("info: {e}")))?;
        if info.dim == 0 || info.max_seq_len < 3 {
            return Err(Error::External(
                "backend reported invalid dimensions".into(),
            ));
        }
        Ok(Self {
            transport: Mutex::new(transport),
            info,
        })
    }

    pub fn info(&self) -> &ExternalInfo {
        &self.info
    }

    fn call(&self, mut req: Value, op: &str) -> Result<Value> {
        req["op"] = Value::from(op);
        let resp = self
            .transport
            .lock()
            .map_err(|_| Error::External("transport poisoned".into()))?
            .request(&req)?;
        check_error(&resp)?;
        Ok(resp)
    }
}

fn check_error(resp: &Value) -> Result<()> {
    match resp.get("error") {
        Some(Value::String(msg)) => Err(Error::External(msg.clone())),
        Some(Value::Null) | None => Ok(()),
        Some(other) => Err(Error::External(other.to_string())),
    }
}

impl EncoderBackend for ExternalEncoder {
    fn fingerprint(&self) -> &str {
        &self.info.fingerprint
    }

    fn embedding_dim(&self) -> usize {
        self.info.dim
    }

    fn max_seq_len(&self) -> usize {
        self.info.max_seq_len
    }

    fn special_tokens(&self) -> SpecialTokens {
        SpecialTokens {
            cls: self.info.cls_id,
            sep: self.info.sep_id,
            pad: self.info.pad_id,
            unk: None,
        }
    }

    fn tokenize(&self, text: &str, side: Side) -> Result<TokenizedText> {
        let resp = self.call(json!({"text": text, "side": side}), "tokenize")?;
        let r: TokenizeResponse =
            serde_json::from_value(resp).map_err(|e| Error::External(format!("tokenize: {e}")))?;
        let n = r.token_ids.len();
        let tok = TokenizedText {
            attention_mask: r.attention_mask.unwrap_or_else(|| vec![true; n]),
            token_ids: r.token_ids,
            tokens: r.tokens,
            special_mask: r.special_mask,
            title_span: None,
        };
        tok.validate(self.info.max_seq_len)
            .map_err(|e| Error::External(format!("tokenize: {e}")))?;
        if tok.special_mask.iter().all(|&s| s) {
            return Err(Error::EmptyTokenization);
        }
        Ok(tok)
    }

    fn embed(&self, tok: &TokenizedText) -> Result<Array2<f64>> {
        let mut resp = self.call(json!({"token_ids": tok.token_ids}), "embed")?;
        let x = rows_to_array(field(&mut resp, "embeddings")?, self.info.dim)?;
        check_shape(x.view(), tok.len(), self.info.dim)?;
        Ok(x)
    }

    fn forward_pooled(&self, x: ArrayView2<'_, f64>, tok: &TokenizedText) -> Result<Array1<f64>> {
        check_shape(x, tok.len(), self.info.dim)?;
        let mut req = tok_fields(tok);
        req["embeddings"] = json!(array_to_rows(x));
        let mut resp = self.call(req, "forward_pooled")?;
        let pooled: Vec<f64> = field(&mut resp, "pooled")?;
        if pooled.len() != self.info.dim {
            return Err(Error::DimensionMismatch {
                expected: self.info.dim,
                actual: pooled.len(),
            });
        }
        Ok(Array1::from(pooled))
    }

    fn gradient_wrt_embeddings(
        &self,
        tok: &TokenizedText,
        x: ArrayView2<'_, f64>,
        fixed: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let mut g = self.gradient_batch(tok, &[x.to_owned()], fixed)?;
        Ok(g.pop().expect("one point in, one gradient out"))
    }

    fn gradient_batch(
        &self,
        tok: &TokenizedText,
        points: &[Array2<f64>],
        fixed: ArrayView1<'_, f64>,
    ) -> Result<Vec<Array2<f64>>> {
        if fixed.len() != self.info.dim {
            return Err(Error::DimensionMismatch {
                expected: self.info.dim,
                actual: fixed.len(),
            });
        }
        for p in points {
            check_shape(p.view(), tok.len(), self.info.dim)?;
        }
        let mut req = tok_fields(tok);
        req["points"] = json!(points
            .iter()
            .map(|p| array_to_rows(p.view()))
            .collect::<Vec<_>>());
        req["fixed"] = json!(fixed.to_vec());
        let mut resp = self.call(req, "gradient")?;
        let grads: Vec<Vec<Vec<f64>>> = field(&mut resp, "gradients")?;
        if grads.len() != points.len() {
            return Err(Error::External(format!(
                "asked for {} gradients, got {}",
                points.len(),
                grads.len()
            )));
        }
        grads
            .into_iter()
            .map(|g| {
                let g = rows_to_array(g, self.info.dim)?;
                check_shape(g.view(), tok.len(), self.info.dim)?;
                Ok(g)
            })
            .collect()
    }

    fn encode(&self, text: &str, side: Side) -> Result<Array1<f64>> {
        let mut resp = self.call(json!({"text": text, "side": side}), "encode")?;
        let pooled: Vec<f64> = field(&mut resp, "pooled")?;
        if pooled.len() != self.info.dim {
            return Err(Error::DimensionMismatch {
                expected: self.info.dim,
                actual: pooled.len(),
            });
        }
        Ok(Array1::from(pooled))
    }

    fn supports_parallel(&self) -> bool {
        false
    }
}

#[derive(Deserialize)]
struct TokFields {
    token_ids: Vec<TokenId>,
    special_mask: Vec<bool>,
    attention_mask: Vec<bool>,
}

impl TokFields {
    fn into_tok(self) -> TokenizedText {
        let n = self.token_ids.len();
        TokenizedText {
            token_ids: self.token_ids,
            tokens: vec![String::new(); n],
            special_mask: self.special_mask,
            attention_mask: self.attention_mask,
            title_span: None,
        }
    }
}

/// Answers one protocol request with `backend`. Errors become `{"error": ...}`.
pub fn serve_request<B: EncoderBackend + ?Sized>(backend: &B, req: &Value) -> Value {
    match dispatch(backend, req) {
        Ok(v) => v,
        Err(e) => json!({"error": e.to_string()}),
    }
}

fn dispatch<B: EncoderBackend + ?Sized>(backend: &B, req: &Value) -> Result<Value> {
    let mut req = req.clone();
    let op: String = field(&mut req, "op")?;
    let d = backend.embedding_dim();
    match op.as_str() {
        "info" => {
            let s = backend.special_tokens();
            Ok(json!(ExternalInfo {
                fingerprint: backend.fingerprint().to_string(),
                dim: d,
                max_seq_len: backend.max_seq_len(),
                cls_id: s.cls,
                sep_id: s.sep,
                pad_id: s.pad,
            }))
        }
        "tokenize" => {
            let text: String = field(&mut req, "text")?;
            let side: Side = field(&mut req, "side")?;
            let tok = backend.tokenize(&text, side)?;
            Ok(json!({
                "token_ids": tok.token_ids,
                "tokens": tok.tokens,
                "special_mask": tok.special_mask,
                "attention_mask": tok.attention_mask,
            }))
        }
        "embed" => {
            let ids: Vec<TokenId> = field(&mut req, "token_ids")?;
            let n = ids.len();
            let tok = TokFields {
                token_ids: ids,
                special_mask: vec![false; n],
                attention_mask: vec![true; n],
            }
            .into_tok();
            Ok(json!({"embeddings": array_to_rows(backend.embed(&tok)?.view())}))
        }
        "forward_pooled" => {
            let x = rows_to_array(field(&mut req, "embeddings")?, d)?;
            let tok = serde_json::from_value::<TokFields>(req)
                .map_err(|e| Error::External(e.to_string()))?
                .into_tok();
            Ok(json!({"pooled": backend.forward_pooled(x.view(), &tok)?.to_vec()}))
        }
        "gradient" => {
            let points: Vec<Vec<Vec<f64>>> = field(&mut req, "points")?;
            let fixed: Vec<f64> = field(&mut req, "fixed")?;
            let tok = serde_json::from_value::<TokFields>(req)
                .map_err(|e| Error::External(e.to_string()))?
                .into_tok();
            let points = points
                .into_iter()
                .map(|p| rows_to_array(p, d))
                .collect::<Result<Vec<_>>>()?;
            let grads = backend.gradient_batch(&tok, &points, Array1::from(fixed).view())?;
            Ok(
                json!({"gradients": grads.iter().map(|g| array_to_rows(g.view())).collect::<Vec<_>>()}),
            )
        }
        "encode" => {
            let text: String = field(&mut req, "text")?;
            let side: Side = field(&mut req, "side")?;
            Ok(json!({"pooled": backend.encode(&text, side)?.to_vec()}))
        }
        other => Err(Error::External(format!("unknown op `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ReferenceConfig, ReferenceEncoder, Vocabulary};
    use std::sync::Arc;

    struct Loopback(Arc<ReferenceEncoder>);

    impl Transport for Loopback {
        fn request(&mut self, req: &Value) -> Result<Value> {
            // through text, as a real process would see it
            let wire = serde_json::to_string(req).unwrap();
            let resp = serve_request(&*self.0, &serde_json::from_str(&wire).unwrap());
            Ok(serde_json::from_str(&serde_json::to_string(&resp).unwrap()).unwrap())
        }
    }

    fn pair() -> (Arc<ReferenceEncoder>, ExternalEncoder) {
        let v = Vocabulary::from_texts(["gold is a hedge against inflation"]);
        let r = Arc::new(
            ReferenceEncoder::new(
                v,
                ReferenceConfig {
                    dim: 6,
                    ..Default::default()
                },
            )
            .unwrap(),
        );
        let e = ExternalEncoder::with_transport(Box::new(Loopback(r.clone()))).unwrap();
        (r, e)
    }

    #[test]
    fn mirrors_in_process_backend_bitwise() {
        let (r, e) = pair();
        assert_eq!(e.fingerprint(), r.fingerprint());
        assert_eq!(e.special_tokens().pad, Some(0));
        let tok = e.tokenize("gold is a hedge", Side::Query).unwrap();
        assert_eq!(tok, r.tokenize("gold is a hedge", Side::Query).unwrap());
        let x = e.embed(&tok).unwrap();
        assert_eq!(x, r.embed(&tok).unwrap());
        assert_eq!(
            e.forward_pooled(x.view(), &tok).unwrap(),
            r.forward_pooled(x.view(), &tok).unwrap()
        );
        let fixed = r.encode("inflation", Side::Document).unwrap();
        assert_eq!(
            e.gradient_wrt_embeddings(&tok, x.view(), fixed.view())
                .unwrap(),
            r.gradient_wrt_embeddings(&tok, x.view(), fixed.view())
                .unwrap()
        );
        assert_eq!(
            e.encode("gold", Side::Query).unwrap(),
            r.encode("gold", Side::Query).unwrap()
        );
    }

    #[test]
    fn server_errors_surface() {
        let (_, e) = pair();
        assert!(matches!(
            e.tokenize("   ", Side::Query),
            Err(Error::External(_))
        ));
        let resp = serve_request(&*pair().0, &json!({"op": "bogus"}));
        assert!(resp["error"].as_str().unwrap().contains("bogus"));
    }
}
