//! Line-oriented request/reply server for driving the engine from a host
//! diffusion pipeline.
//!
//! Each request is `{"id": n, "op": "...", "payload": {...}}` on one line.
//! Successful replies are `{"id": n, "op": "<op>_ok", "payload": {...}}`;
//! failures are `{"id": n | null, "error": {"code": "...", "message": "..."}}`.
//! A session starts with `hello` and ends with `bye`. Ids must increase.
//!
//! Vectors travel as `{"f32le_b64": "..."}` or `{"path": "..."}` (raw
//! little-endian f32). Replies inline up to [`INLINE_LIMIT`] elements and
//! spill larger results to files.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::concept::{ConceptMap, PromptPlan};
use crate::embedding::{
    gram_schmidt_combine, lsm_combine, lsm_orthogonalize, lsm_orthogonalize_rows,
    pem_combine_detailed, project_out, select_attribute_index, EmbeddingVector, LsmParams,
    PemParams,
};
use crate::json::to_canonical_string;
use crate::scheduler::{SessionConfig, SessionState};
use crate::scoring::TokenScores;
use crate::tensor_file::{atomic_write, decode_f32le, encode_f32le};
use crate::trace::ENGINE_VERSION;

pub const PROTOCOL_VERSION: u32 = 1;
pub const INLINE_LIMIT: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub code: String,
    pub message: String,
}

impl Fault {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

macro_rules! fault_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for Fault {
            fn from(e: $ty) -> Self {
                Fault::new(e.code(), e.to_string())
            }
        }
    )*};
}

fault_from!(
    crate::embedding::EmbeddingError,
    crate::scheduler::SchedulerError,
    crate::scoring::ScoringError,
    crate::concept::ConceptError,
    crate::tensor_file::TensorFileError
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorRef {
    Inline { f32le_b64: String },
    Path { path: PathBuf },
}

impl VectorRef {
    pub fn inline(values: &[f32]) -> Self {
        Self::Inline {
            f32le_b64: B64.encode(encode_f32le(values)),
        }
    }

    pub fn load(&self) -> Result<EmbeddingVector, Fault> {
        let bytes = match self {
            Self::Inline { f32le_b64 } => B64
                .decode(f32le_b64)
                .map_err(|e| Fault::new("MalformedVector", e.to_string()))?,
            Self::Path { path } => std::fs::read(path)
                .map_err(|e| Fault::new("Io", format!("{}: {e}", path.display())))?,
        };
        Ok(EmbeddingVector::new(decode_f32le(&bytes)?)?)
    }
}

#[derive(Deserialize)]
struct Hello {
    version: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Configure {
    plan: ConceptMap,
    session: SessionConfig,
    #[serde(default)]
    pem: Option<PemParams>,
    #[serde(default)]
    lsm: Option<LsmParams>,
    #[serde(default)]
    n_tokens: Option<usize>,
    #[serde(default)]
    token_slots: Option<Vec<Vec<usize>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Choose {
    t: usize,
    #[serde(default, rename = "T")]
    total_steps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Observe {
    t: usize,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Pem {
    c_f: VectorRef,
    c_r: VectorRef,
    #[serde(default)]
    lambda_pool: Option<f64>,
    #[serde(default)]
    s: Option<f64>,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    epsilon: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Lsm {
    l_base: VectorRef,
    l_attr: VectorRef,
    l_null: VectorRef,
    #[serde(default)]
    lambda_attr: Option<f64>,
    #[serde(default)]
    row_len: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Project {
    a: VectorRef,
    b: VectorRef,
    #[serde(default)]
    gram_schmidt_lambda: Option<f64>,
}

enum Spill {
    Owned(tempfile::TempDir),
    Dir(PathBuf),
}

/// Protocol state machine for one generation session.
pub struct Bridge {
    greeted: bool,
    closed: bool,
    last_id: Option<u64>,
    session: Option<SessionState>,
    pem: PemParams,
    lsm: LsmParams,
    spill_dir: Option<Spill>,
}

impl Default for Bridge {
    fn default() -> Self {
        Self::new()
    }
}

impl Bridge {
    pub fn new() -> Self {
        Self {
            greeted: false,
            closed: false,
            last_id: None,
            session: None,
            pem: PemParams::default(),
            lsm: LsmParams::default(),
            spill_dir: None,
        }
    }

    /// Large result vectors are written under `dir` instead of a private
    /// temporary directory.
    pub fn with_spill_dir(mut self, dir: PathBuf) -> Self {
        self.spill_dir = Some(Spill::Dir(dir));
        self
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Handles one request line. Blank lines produce no reply.
    pub fn handle_line(&mut self, line: &str) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        let reply = match serde_json::from_str::<Value>(line) {
            Err(e) => error_reply(Value::Null, &Fault::new("MalformedJson", e.to_string())),
            Ok(request) => self.handle_value(request),
        };
        Some(reply)
    }

    fn handle_value(&mut self, request: Value) -> String {
        let Value::Object(mut obj) = request else {
            return error_reply(Value::Null, &Fault::new("InvalidRequest", "request must be an object"));
        };
        let Some(id) = obj.get("id").and_then(Value::as_u64) else {
            return error_reply(Value::Null, &Fault::new("InvalidRequest", "missing integer id"));
        };
        let id_value = Value::from(id);
        if let Some(last) = self.last_id {
            if id <= last {
                return error_reply(
                    id_value,
                    &Fault::new("NonMonotonicId", format!("id {id} does not follow {last}")),
                );
            }
        }
        self.last_id = Some(id);

        let Some(op) = obj.get("op").and_then(Value::as_str).map(str::to_string) else {
            return error_reply(id_value, &Fault::new("InvalidRequest", "missing op"));
        };
        let payload = obj.remove("payload").unwrap_or_else(|| json!({}));
        match self.dispatch(id, &op, payload) {
            Ok(out) => ok_reply(id, &op, out),
            Err(fault) => error_reply(id_value, &fault),
        }
    }

    fn dispatch(&mut self, id: u64, op: &str, payload: Value) -> Result<Value, Fault> {
        if self.closed {
            return Err(Fault::new("SessionClosed", "bye already received"));
        }
        if op != "hello" && !self.greeted {
            return Err(Fault::new("HandshakeRequired", "send hello first"));
        }
        match op {
            "hello" => self.hello(parse(payload)?),
            "configure" => self.configure(parse(payload)?),
            "aps_choose" => self.choose(parse(payload)?),
            "aps_observe" => self.observe(parse(payload)?),
            "pem" => self.pem(id, parse(payload)?),
            "lsm" => self.lsm(id, parse(payload)?),
            "project" => self.project(id, parse(payload)?),
            "bye" => {
                self.closed = true;
                Ok(json!({}))
            }
            other => Err(Fault::new("UnknownOp", format!("unknown op {other:?}"))),
        }
    }

    fn hello(&mut self, req: Hello) -> Result<Value, Fault> {
        if req.version != PROTOCOL_VERSION {
            return Err(Fault::new(
                "UnsupportedVersion",
                format!("protocol version {} requested, {PROTOCOL_VERSION} supported", req.version),
            ));
        }
        self.greeted = true;
        Ok(json!({
            "engine_version": ENGINE_VERSION,
            "protocol_version": PROTOCOL_VERSION,
        }))
    }

    fn configure(&mut self, req: Configure) -> Result<Value, Fault> {
        let plan = PromptPlan::try_from(req.plan)?;
        let mut state = SessionState::new(plan, req.session)?;
        if let Some(n) = req.n_tokens {
            state = state.with_token_count(n);
        }
        if let Some(slots) = req.token_slots {
            state = state.with_token_slots(slots)?;
        }
        self.pem = req.pem.unwrap_or_default();
        self.lsm = req.lsm.unwrap_or_default();
        let reply = json!({
            "m": state.plan().m(),
            "target": state.target_prompt(),
            "frequent": state.plan().frequent(),
            "stop_points": state.stop_points(),
        });
        self.session = Some(state);
        Ok(reply)
    }

    fn session(&mut self) -> Result<&mut SessionState, Fault> {
        self.session
            .as_mut()
            .ok_or_else(|| Fault::new("NotConfigured", "send configure first"))
    }

    fn choose(&mut self, req: Choose) -> Result<Value, Fault> {
        let state = self.session()?;
        if let Some(total) = req.total_steps {
            if total != state.config().total_steps {
                return Err(Fault::new(
                    "StepsMismatch",
                    format!("T = {total} but session has T = {}", state.config().total_steps),
                ));
            }
        }
        let choice = state.choose_prompt(req.t)?;
        let m = state.plan().m();
        let attr_index = if m == 0 {
            None
        } else {
            Some(select_attribute_index(state.p_trans(), m)?)
        };
        Ok(json!({
            "kind": choice.kind,
            "text": choice.text,
            "p_trans": choice.p_trans_at_choice,
            "attr_index": attr_index,
        }))
    }

    fn observe(&mut self, req: Observe) -> Result<Value, Fault> {
        let scores = TokenScores::from_values(req.scores)?;
        let state = self.session()?;
        let transition = state.observe_scores(req.t, &scores)?;
        Ok(json!({
            "transition": transition.map(|ev| json!({
                "slot": ev.slot,
                "p_trans": ev.p_trans,
                "k": ev.k,
                "statistic": ev.statistic,
            })),
            "p_trans": state.p_trans(),
            "locked": state.locked(),
        }))
    }

    fn pem(&mut self, id: u64, req: Pem) -> Result<Value, Fault> {
        let base = self.pem;
        let params = PemParams::new(
            req.lambda_pool.unwrap_or(base.lambda_pool()),
            req.s.unwrap_or(base.s()),
            req.p.unwrap_or(base.p()),
            req.epsilon.unwrap_or(base.epsilon()),
        )?;
        let out = pem_combine_detailed(&req.c_f.load()?, &req.c_r.load()?, &params)?;
        Ok(json!({
            "pooled": self.emit(id, "pooled", out.pooled.values())?,
            "gamma": out.gamma,
            "delta": out.delta,
        }))
    }

    fn lsm(&mut self, id: u64, req: Lsm) -> Result<Value, Fault> {
        let params = match req.lambda_attr {
            Some(l) => LsmParams::new(l)?,
            None => self.lsm,
        };
        let (attr, null) = (req.l_attr.load()?, req.l_null.load()?);
        let l_prime = match req.row_len {
            Some(r) => lsm_orthogonalize_rows(&attr, &null, r)?,
            None => lsm_orthogonalize(&attr, &null)?,
        };
        let l_hat = lsm_combine(&req.l_base.load()?, &l_prime, &params)?;
        Ok(json!({ "l_hat": self.emit(id, "l_hat", l_hat.values())? }))
    }

    fn project(&mut self, id: u64, req: Project) -> Result<Value, Fault> {
        let (a, b) = (req.a.load()?, req.b.load()?);
        let result = match req.gram_schmidt_lambda {
            Some(lambda) => gram_schmidt_combine(&a, &b, lambda)?,
            None => project_out(&a, &b)?,
        };
        Ok(json!({ "result": self.emit(id, "result", result.values())? }))
    }

    fn emit(&mut self, id: u64, field: &str, values: &[f32]) -> Result<VectorRef, Fault> {
        if values.len() <= INLINE_LIMIT {
            return Ok(VectorRef::inline(values));
        }
        let io_fault = |e: io::Error| Fault::new("Io", e.to_string());
        if self.spill_dir.is_none() {
            self.spill_dir = Some(Spill::Owned(tempfile::tempdir().map_err(io_fault)?));
        }
        let dir = match self.spill_dir.as_ref().expect("set above") {
            Spill::Owned(d) => d.path().to_path_buf(),
            Spill::Dir(d) => d.clone(),
        };
        let path = dir.join(format!("{id}-{field}.f32le"));
        atomic_write(&path, &encode_f32le(values)).map_err(io_fault)?;
        Ok(VectorRef::Path { path })
    }
}

fn parse<T: DeserializeOwned>(payload: Value) -> Result<T, Fault> {
    serde_json::from_value(payload).map_err(|e| Fault::new("InvalidPayload", e.to_string()))
}

fn ok_reply(id: u64, op: &str, payload: Value) -> String {
    let reply = json!({ "id": id, "op": format!("{op}_ok"), "payload": payload });
    to_canonical_string(&reply).expect("reply serializes")
}

fn error_reply(id: Value, fault: &Fault) -> String {
    let reply = json!({
        "id": id,
        "error": { "code": fault.code, "message": fault.message },
    });
    to_canonical_string(&reply).expect("reply serializes")
}

/// Serves requests until `bye` or end of input. Each reply is flushed
/// before the next request is read.
pub fn serve<R: BufRead, W: Write>(reader: R, writer: W) -> io::Result<()> {
    serve_with(Bridge::new(), reader, writer)
}

pub fn serve_with<R: BufRead, W: Write>(mut bridge: Bridge, reader: R, mut writer: W) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if let Some(reply) = bridge.handle_line(&line) {
            writer.write_all(reply.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        if bridge.is_closed() {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reply(b: &mut Bridge, line: &str) -> Value {
        serde_json::from_str(&b.handle_line(line).unwrap()).unwrap()
    }

    fn greeted() -> Bridge {
        let mut b = Bridge::new();
        let r = reply(&mut b, r#"{"id":1,"op":"hello","payload":{"version":1}}"#);
        assert_eq!(r["op"], "hello_ok");
        b
    }

    #[test]
    fn handshake_is_required() {
        let mut b = Bridge::new();
        let r = reply(&mut b, r#"{"id":1,"op":"pem","payload":{}}"#);
        assert_eq!(r["error"]["code"], "HandshakeRequired");
        let r = reply(&mut b, r#"{"id":2,"op":"hello","payload":{"version":2}}"#);
        assert_eq!(r["error"]["code"], "UnsupportedVersion");
        let r = reply(&mut b, r#"{"id":3,"op":"hello","payload":{"version":1}}"#);
        assert_eq!(r["payload"]["protocol_version"], 1);
        assert_eq!(r["id"], 3);
    }

    #[test]
    fn malformed_lines_keep_the_session() {
        let mut b = greeted();
        let r = reply(&mut b, "{oops");
        assert_eq!(r["id"], Value::Null);
        assert_eq!(r["error"]["code"], "MalformedJson");
        let r = reply(&mut b, r#"{"id":2,"op":"frobnicate"}"#);
        assert_eq!(r["error"]["code"], "UnknownOp");
        let r = reply(&mut b, r#"{"id":2,"op":"bye"}"#);
        assert_eq!(r["error"]["code"], "NonMonotonicId");
        let r = reply(&mut b, r#"{"id":3,"op":"bye"}"#);
        assert_eq!(r["op"], "bye_ok");
        assert!(b.is_closed());
    }

    #[test]
    fn pem_with_zero_weight_echoes_input() {
        let mut b = greeted();
        let c_f = VectorRef::inline(&[0.25, -1.5, 3.0]);
        let c_r = VectorRef::inline(&[1.0, 0.5, 0.0]);
        let req = json!({"id": 2, "op": "pem", "payload": {"c_f": c_f, "c_r": c_r, "lambda_pool": 0.0}});
        let r = reply(&mut b, &req.to_string());
        let out: VectorRef = serde_json::from_value(r["payload"]["pooled"].clone()).unwrap();
        assert_eq!(out, c_f);
    }

    #[test]
    fn large_vectors_spill_to_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = greeted().with_spill_dir(dir.path().to_path_buf());
        let n = INLINE_LIMIT + 1;
        let a: Vec<f32> = (0..n).map(|i| (i % 7) as f32).collect();
        let mut basis = vec![0.0f32; n];
        basis[0] = 1.0;
        let req = json!({"id": 2, "op": "project", "payload": {
            "a": VectorRef::inline(&a), "b": VectorRef::inline(&basis)}});
        let r = reply(&mut b, &req.to_string());
        let out: VectorRef = serde_json::from_value(r["payload"]["result"].clone()).unwrap();
        assert!(matches!(out, VectorRef::Path { .. }));
        let v = out.load().unwrap();
        assert_eq!(v.values()[0], 0.0);
        assert_eq!(&v.values()[1..], &a[1..]);
    }

    #[test]
    fn choose_before_configure_fails() {
        let mut b = greeted();
        let r = reply(&mut b, r#"{"id":2,"op":"aps_choose","payload":{"t":50}}"#);
        assert_eq!(r["error"]["code"], "NotConfigured");
    }
}
