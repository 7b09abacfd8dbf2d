//! Step-aligned comparison of two traces.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::scheduler::{PromptKind, SchedulerKind};
use crate::trace::{EventKind, StopPoint, Trace, TraceEvent, PLOT_CSV_HEADER};

pub const DEFAULT_ATOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("traces have different step counts ({a} vs {b})")]
    IncompatibleSteps { a: usize, b: usize },
    #[error("tolerance must be finite and non-negative, got {0}")]
    InvalidTolerance(f64),
}

impl CompareError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::IncompatibleSteps { .. } => "IncompatibleHeaders",
            Self::InvalidTolerance(_) => "InvalidTolerance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptDivergence {
    pub t: usize,
    pub a_kind: Option<PromptKind>,
    pub b_kind: Option<PromptKind>,
    pub a_text: Option<String>,
    pub b_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericDivergence {
    pub t: usize,
    pub field: String,
    pub a: Option<f32>,
    pub b: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopPointDelta {
    pub slot: usize,
    pub a: Option<StopPoint>,
    pub b: Option<StopPoint>,
    /// `a.t - b.t`; positive when A stops later in the step countdown.
    pub delta_t: Option<i64>,
    /// `a.offset - b.offset`.
    pub delta_offset: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    #[serde(rename = "T")]
    pub total_steps: usize,
    pub atol: f64,
    pub same_config: bool,
    pub scheduler_a: SchedulerKind,
    pub scheduler_b: SchedulerKind,
    pub prompt_divergences: Vec<PromptDivergence>,
    pub numeric_divergences: Vec<NumericDivergence>,
    pub stop_points: Vec<StopPointDelta>,
}

impl CompareReport {
    pub fn is_identical(&self) -> bool {
        self.prompt_divergences.is_empty()
            && self.numeric_divergences.is_empty()
            && self.stop_points.iter().all(|d| d.a == d.b)
    }
}

fn by_t(trace: &Trace, kind: EventKind) -> BTreeMap<usize, &TraceEvent> {
    trace
        .events
        .iter()
        .filter(|e| e.event == kind)
        .map(|e| (e.t, e))
        .collect()
}

struct NumericDiff<'a> {
    atol: f64,
    t: usize,
    out: &'a mut Vec<NumericDivergence>,
}

impl NumericDiff<'_> {
    fn value(&mut self, field: &str, a: Option<f32>, b: Option<f32>) {
        let differs = match (a, b) {
            (Some(x), Some(y)) => {
                if x.is_nan() || y.is_nan() {
                    !(x.is_nan() && y.is_nan())
                } else {
                    (x as f64 - y as f64).abs() > self.atol
                }
            }
            (None, None) => false,
            _ => true,
        };
        if differs {
            self.out.push(NumericDivergence {
                t: self.t,
                field: field.to_string(),
                a,
                b,
            });
        }
    }

    fn slice(&mut self, field: &str, a: Option<&[f32]>, b: Option<&[f32]>) {
        let (a, b) = (a.unwrap_or(&[]), b.unwrap_or(&[]));
        for i in 0..a.len().max(b.len()) {
            self.value(&format!("{field}[{i}]"), a.get(i).copied(), b.get(i).copied());
        }
    }
}

/// Aligns two traces by `t` and lists where they disagree.
pub fn compare(a: &Trace, b: &Trace, atol: f64) -> Result<CompareReport, CompareError> {
    if !atol.is_finite() || atol < 0.0 {
        return Err(CompareError::InvalidTolerance(atol));
    }
    let total = a.header.total_steps();
    if total != b.header.total_steps() {
        return Err(CompareError::IncompatibleSteps {
            a: total,
            b: b.header.total_steps(),
        });
    }

    let (steps_a, steps_b) = (by_t(a, EventKind::Step), by_t(b, EventKind::Step));
    let (scores_a, scores_b) = (by_t(a, EventKind::Scores), by_t(b, EventKind::Scores));

    let mut prompt_divergences = Vec::new();
    let mut numeric_divergences = Vec::new();
    for t in (1..=total).rev() {
        let (sa, sb) = (steps_a.get(&t), steps_b.get(&t));
        let a_kind = sa.and_then(|e| e.prompt_kind);
        let b_kind = sb.and_then(|e| e.prompt_kind);
        let a_text = sa.and_then(|e| e.prompt_text.clone());
        let b_text = sb.and_then(|e| e.prompt_text.clone());
        if a_kind != b_kind || a_text != b_text {
            prompt_divergences.push(PromptDivergence {
                t,
                a_kind,
                b_kind,
                a_text,
                b_text,
            });
        }

        let mut diff = NumericDiff {
            atol,
            t,
            out: &mut numeric_divergences,
        };
        let pa = sa.and_then(|e| e.pem);
        let pb = sb.and_then(|e| e.pem);
        diff.value("pem.gamma", pa.map(|p| p.gamma), pb.map(|p| p.gamma));
        diff.value("pem.delta", pa.map(|p| p.delta), pb.map(|p| p.delta));
        diff.value("pem.norm", pa.map(|p| p.norm), pb.map(|p| p.norm));
        let la = sa.and_then(|e| e.lsm.as_ref());
        let lb = sb.and_then(|e| e.lsm.as_ref());
        diff.value("lsm.l_prime_norm", la.map(|l| l.l_prime_norm), lb.map(|l| l.l_prime_norm));
        diff.value("lsm.l_hat_norm", la.map(|l| l.l_hat_norm), lb.map(|l| l.l_hat_norm));
        diff.slice(
            "lsm.l_hat_head",
            la.map(|l| l.l_hat_head.as_slice()),
            lb.map(|l| l.l_hat_head.as_slice()),
        );
        diff.slice(
            "scores",
            scores_a.get(&t).and_then(|e| e.scores.as_deref()),
            scores_b.get(&t).and_then(|e| e.scores.as_deref()),
        );
    }

    let stops_a = a.stop_points();
    let stops_b = b.stop_points();
    let m = a.header.plan.m().max(b.header.plan.m());
    let find = |v: &[StopPoint], slot| v.iter().find(|s| s.slot == slot).copied();
    let stop_points = (1..=m)
        .map(|slot| {
            let (sa, sb) = (find(&stops_a, slot), find(&stops_b, slot));
            let both = sa.zip(sb);
            StopPointDelta {
                slot,
                a: sa,
                b: sb,
                delta_t: both.map(|(x, y)| x.t as i64 - y.t as i64),
                delta_offset: both.map(|(x, y)| x.offset as i64 - y.offset as i64),
            }
        })
        .collect();

    Ok(CompareReport {
        total_steps: total,
        atol,
        same_config: a.header.config_hash == b.header.config_hash,
        scheduler_a: a.header.session.scheduler,
        scheduler_b: b.header.session.scheduler,
        prompt_divergences,
        numeric_divergences,
        stop_points,
    })
}

/// Score curves of both traces in one CSV, tagged `a` and `b`.
pub fn plot_csv(a: &Trace, b: &Trace) -> String {
    let mut out = String::from(PLOT_CSV_HEADER);
    a.plot_rows("a", &mut out);
    b.plot_rows("b", &mut out);
    out
}
