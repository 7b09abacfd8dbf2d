//! Session traces as NDJSON: one header line, then one record per event.
//!
//! Within a step the order is `scores` (even offsets only), `transition`
//! (if one fired), then `step`. Every line is canonical JSON with sorted keys,
//! so identical sessions serialize to identical bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::PromptPlan;
use crate::embedding::{LsmParams, PemParams};
use crate::json::{sha256_hex, to_canonical_string};
use crate::mock::MockConfig;
use crate::scheduler::{PromptChoice, PromptKind, SchedulerKind, SessionConfig, TransitionEvent};
use crate::scoring::TokenScores;

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("trace invariant violated: {0}")]
    Invariant(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl TraceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Empty => "EmptyTrace",
            Self::Line { .. } => "MalformedTrace",
            Self::Invariant(_) => "TraceInvariant",
            Self::Serialize(_) => "Serialize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(offset: usize) -> Self {
        if offset.is_multiple_of(2) {
            Self::Even
        } else {
            Self::Odd
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Scores,
    Transition,
    Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub engine: String,
    pub trace_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    /// Always `"header"`.
    pub event: String,
    pub versions: Versions,
    pub config_hash: String,
    pub plan: PromptPlan,
    pub session: SessionConfig,
    pub mock: MockConfig,
    pub pem: PemParams,
    pub lsm: LsmParams,
    /// Baseline stop points in steps from the start (baseline scheduler only).
    pub stop_points: Vec<usize>,
    pub token_labels: Vec<String>,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    plan: &'a PromptPlan,
    session: &'a SessionConfig,
    mock: &'a MockConfig,
    pem: &'a PemParams,
    lsm: &'a LsmParams,
}

impl TraceHeader {
    pub fn new(
        plan: &PromptPlan,
        session: &SessionConfig,
        mock: &MockConfig,
        pem: &PemParams,
        lsm: &LsmParams,
        stop_points: Vec<usize>,
        token_labels: Vec<String>,
    ) -> Self {
        let hashed = HashedConfig {
            plan,
            session,
            mock,
            pem,
            lsm,
        };
        let canonical = to_canonical_string(&hashed).expect("config serializes");
        Self {
            event: "header".into(),
            versions: Versions {
                engine: ENGINE_VERSION.into(),
                trace_format: TRACE_FORMAT_VERSION,
            },
            config_hash: sha256_hex(canonical.as_bytes()),
            plan: plan.clone(),
            session: session.clone(),
            mock: mock.clone(),
            pem: *pem,
            lsm: *lsm,
            stop_points,
            token_labels,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.session.total_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PemRecord {
    pub gamma: f32,
    pub delta: f32,
    pub norm: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmRecord {
    pub attr_index: usize,
    /// False when the selected pair has no attribute text.
    pub applied: bool,
    pub l_prime_norm: f32,
    pub l_hat_norm: f32,
    pub l_hat_head: Vec<f32>,
}

impl LsmRecord {
    pub fn skipped(attr_index: usize) -> Self {
        Self {
            attr_index,
            applied: false,
            l_prime_norm: 0.0,
            l_hat_norm: 0.0,
            l_hat_head: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRecordOut {
    pub slot: usize,
    pub p_trans: usize,
    pub k: usize,
    pub statistic: f32,
}

impl From<&TransitionEvent> for TransitionRecordOut {
    fn from(ev: &TransitionEvent) -> Self {
        Self {
            slot: ev.slot,
            p_trans: ev.p_trans,
            k: ev.k,
            statistic: ev.statistic as f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub event: EventKind,
    pub t: usize,
    pub offset_parity: Parity,
    pub p_trans: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_kind: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionRecordOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pem: Option<PemRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsm: Option<LsmRecord>,
}

impl TraceEvent {
    fn bare(event: EventKind, t: usize, offset_parity: Parity, p_trans: usize) -> Self {
        Self {
            event,
            t,
            offset_parity,
            p_trans,
            prompt_kind: None,
            prompt_text: None,
            scores: None,
            transition: None,
            pem: None,
            lsm: None,
        }
    }

    pub fn scores(t: usize, parity: Parity, p_trans: usize, scores: &TokenScores) -> Self {
        Self {
            scores: Some(scores.values().iter().map(|&v| v as f32).collect()),
            ..Self::bare(EventKind::Scores, t, parity, p_trans)
        }
    }

    pub fn transition(t: usize, parity: Parity, p_trans: usize, record: TransitionRecordOut) -> Self {
        Self {
            transition: Some(record),
            ..Self::bare(EventKind::Transition, t, parity, p_trans)
        }
    }

    pub fn step(
        t: usize,
        parity: Parity,
        p_trans: usize,
        choice: &PromptChoice,
        pem: PemRecord,
        lsm: Option<LsmRecord>,
    ) -> Self {
        Self {
            prompt_kind: Some(choice.kind),
            prompt_text: Some(choice.text.clone()),
            pem: Some(pem),
            lsm,
            ..Self::bare(EventKind::Step, t, parity, p_trans)
        }
    }
}

/// A realized stop point in both step (`t`) and offset (`T − t`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopPoint {
    pub slot: usize,
    pub t: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn to_ndjson(&self) -> Result<String, TraceError> {
        let mut out = to_canonical_string(&self.header)?;
        out.push('\n');
        for ev in &self.events {
            out.push_str(&to_canonical_string(ev)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a trace. Blank lines are ignored.
    pub fn parse_ndjson(text: &str) -> Result<Self, TraceError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or(TraceError::Empty)?;
        let header: TraceHeader = serde_json::from_str(htext).map_err(|e| TraceError::Line {
            line: hline + 1,
            message: e.to_string(),
        })?;
        if header.event != "header" {
            return Err(TraceError::Line {
                line: hline + 1,
                message: format!("expected header record, found {:?}", header.event),
            });
        }
        let events = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| TraceError::Line {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<TraceEvent>, _>>()?;
        Ok(Self { header, events })
    }

    /// Checks ordering and record-shape invariants of a complete trace.
    pub fn validate(&self) -> Result<(), TraceError> {
        let total = self.header.total_steps();
        let bad = |msg: String| Err(TraceError::Invariant(msg));
        let mut expected_step = total;
        let mut last_t = usize::MAX;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.t == 0 || ev.t > total {
                return bad(format!("event {i} has t = {} outside 1..={total}", ev.t));
            }
            if ev.t > last_t {
                return bad(format!("event {i} increases t from {last_t} to {}", ev.t));
            }
            if ev.offset_parity != Parity::of(total - ev.t) {
                return bad(format!("event {i} has wrong parity"));
            }
            match ev.event {
                EventKind::Step => {
                    if ev.t != expected_step {
                        return bad(format!("step for t = {} where {expected_step} was due", ev.t));
                    }
                    if ev.prompt_kind.is_none() || ev.prompt_text.is_none() {
                        return bad(format!("step {i} lacks its prompt"));
                    }
                    expected_step -= 1;
                }
                EventKind::Scores => {
                    if ev.scores.is_none() {
                        return bad(format!("scores event {i} without scores"));
                    }
                }
                EventKind::Transition => {
                    let prev = i.checked_sub(1).map(|j| &self.events[j]);
                    if !matches!(prev, Some(p) if p.event == EventKind::Scores && p.t == ev.t) {
                        return bad(format!("transition at t = {} not preceded by scores", ev.t));
                    }
                    if ev.transition.is_none() {
                        return bad(format!("transition event {i} without payload"));
                    }
                }
            }
            last_t = ev.t;
        }
        if expected_step != 0 {
            return bad(format!("trace stops before t = {expected_step}"));
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.event == EventKind::Step)
    }

    /// Realized stop points: transitions for the adaptive scheduler,
    /// configured ones for the baseline.
    pub fn stop_points(&self) -> Vec<StopPoint> {
        let total = self.header.total_steps();
        match self.header.session.scheduler {
            SchedulerKind::Aps => self
                .events
                .iter()
                .filter_map(|e| {
                    e.transition.as_ref().map(|tr| StopPoint {
                        slot: tr.slot,
                        t: e.t,
                        offset: total - e.t,
                    })
                })
                .collect(),
            SchedulerKind::R2f => self
                .header
                .stop_points
                .iter()
                .enumerate()
                .map(|(i, &s)| StopPoint {
                    slot: i + 1,
                    t: total.saturating_sub(s),
                    offset: s,
                })
                .collect(),
            SchedulerKind::None => Vec::new(),
        }
    }

    /// Long-format CSV of token scores over time with the threshold column:
    /// `trace,t,offset,token_index,label,z,tau_s`.
    pub fn plot_rows(&self, name: &str, out: &mut String) {
        let total = self.header.total_steps();
        let tau = self.header.session.tau_s;
        for ev in self.events.iter().filter(|e| e.event == EventKind::Scores) {
            for (i, z) in ev.scores.iter().flatten().enumerate() {
                let label = self.header.token_labels.get(i).map(String::as_str).unwrap_or("");
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    csv_field(name),
                    ev.t,
                    total - ev.t,
                    i,
                    csv_field(label),
                    z,
                    tau
                ));
            }
        }
    }
}

pub const PLOT_CSV_HEADER: &str = "trace,t,offset,token_index,label,z,tau_s\n";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
