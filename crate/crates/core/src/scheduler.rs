//! Prompt schedulers: the attention-driven adaptive scheduler, the
//! fixed-stop-point baseline, and a pass-through.
//!
//! Both schedulers alternate prompts by the parity of the step offset
//! `T − t`: even offsets always use the target prompt (all slots rare), odd
//! offsets use the progressive prompt. The adaptive scheduler observes token
//! scores on even offsets and switches one more slot to rare whenever the
//! threshold statistic drops below `tau_s`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::PromptPlan;
use crate::scoring::{ScoreAggregation, ScoringError, TokenScores};

/// Baseline stop-point fractions indexed by visual detail level 1..=5.
pub const R2F_ALPHA: [f64; 5] = [0.9, 0.8, 0.6, 0.4, 0.2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("step {t} outside 1..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("scores observed at step {t} with odd offset")]
    ParityViolation { t: usize },
    #[error("expected {expected} token scores, got {found}")]
    ScoreLengthMismatch { expected: usize, found: usize },
    #[error("visual detail level {0} outside 1..=5")]
    LevelOutOfRange(u8),
    #[error("{found} stop points for {expected} concept pairs")]
    StopPointCount { expected: usize, found: usize },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("slot-aware mode needs token-to-slot assignments")]
    MissingTokenSlots,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

impl SchedulerError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::StepOutOfRange { .. } => "StepOutOfRange",
            Self::ParityViolation { .. } => "ParityViolation",
            Self::ScoreLengthMismatch { .. } => "ScoreLengthMismatch",
            Self::LevelOutOfRange(_) => "LevelOutOfRange",
            Self::StopPointCount { .. } => "StopPointCount",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::MissingTokenSlots => "MissingTokenSlots",
            Self::Scoring(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Aps,
    R2f,
    /// Target prompt at every step.
    None,
}

/// Which slot the adaptive scheduler switches next.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionOrder {
    /// Lowest untransitioned slot index.
    #[default]
    Index,
    /// Untransitioned slot whose strongest token score is lowest.
    Saturation,
}

/// Which token scores feed the threshold statistic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    #[default]
    AllTokens,
    /// Only tokens inside slots that have not switched yet.
    Untransitioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(rename = "T")]
    pub total_steps: usize,
    pub tau_s: f64,
    #[serde(default)]
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub transition_order: TransitionOrder,
    #[serde(default)]
    pub r2f_levels: Vec<u8>,
    #[serde(default)]
    pub score_scope: ScoreScope,
    #[serde(default)]
    pub score_aggregation: ScoreAggregation,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            tau_s: 0.025,
            scheduler: SchedulerKind::Aps,
            transition_order: TransitionOrder::Index,
            r2f_levels: Vec::new(),
            score_scope: ScoreScope::AllTokens,
            score_aggregation: ScoreAggregation::Individual,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.total_steps == 0 {
            return Err(SchedulerError::InvalidConfig("T must be positive".into()));
        }
        if !self.tau_s.is_finite() || self.tau_s < 0.0 {
            return Err(SchedulerError::InvalidConfig(format!(
                "tau_s = {} must be a finite non-negative number",
                self.tau_s
            )));
        }
        for &level in &self.r2f_levels {
            if !(1..=5).contains(&level) {
                return Err(SchedulerError::LevelOutOfRange(level));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Target,
    Progressive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChoice {
    pub text: String,
    pub kind: PromptKind,
    pub p_trans_at_choice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub t: usize,
    pub slot: usize,
    pub p_trans: usize,
    pub k: usize,
    pub statistic: f64,
}

/// One realized stop point: slot `slot` switched to rare at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: usize,
    pub slot: usize,
}

/// Stop points `round(alpha[V] · T)` in steps from the start of sampling.
pub fn r2f_stop_points(levels: &[u8], total_steps: usize) -> Result<Vec<usize>, SchedulerError> {
    levels
        .iter()
        .map(|&v| {
            if !(1..=5).contains(&v) {
                return Err(SchedulerError::LevelOutOfRange(v));
            }
            Ok((R2F_ALPHA[v as usize - 1] * total_steps as f64).round() as usize)
        })
        .collect()
}

fn check_step(t: usize, total: usize) -> Result<usize, SchedulerError> {
    if t == 0 || t > total {
        return Err(SchedulerError::StepOutOfRange { t, total });
    }
    Ok(total - t)
}

/// Baseline choice: on odd offsets slot `i` stays frequent while the offset
/// is below its stop point.
pub fn r2f_choose_prompt(
    t: usize,
    total_steps: usize,
    plan: &PromptPlan,
    stop_points: &[usize],
) -> Result<PromptChoice, SchedulerError> {
    let offset = check_step(t, total_steps)?;
    if stop_points.len() != plan.m() {
        return Err(SchedulerError::StopPointCount {
            expected: plan.m(),
            found: stop_points.len(),
        });
    }
    let rare: BTreeSet<usize> = (1..=plan.m())
        .filter(|&i| offset >= stop_points[i - 1])
        .collect();
    if offset % 2 == 0 {
        return Ok(PromptChoice {
            text: plan.target(),
            kind: PromptKind::Target,
            p_trans_at_choice: rare.len(),
        });
    }
    Ok(PromptChoice {
        text: plan.reconstruct(&rare).expect("slots in range"),
        kind: PromptKind::Progressive,
        p_trans_at_choice: rare.len(),
    })
}

/// Mutable scheduler state for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    plan: PromptPlan,
    config: SessionConfig,
    /// Token indices (into observed scores) covered by each slot.
    token_slots: Option<Vec<Vec<usize>>>,
    n_tokens: Option<usize>,
    stop_points: Vec<usize>,
    p_trans: usize,
    transitioned: Vec<usize>,
    locked: bool,
    transition_log: Vec<TransitionRecord>,
}

impl SessionState {
    pub fn new(plan: PromptPlan, config: SessionConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        let stop_points = if config.scheduler == SchedulerKind::R2f {
            if config.r2f_levels.len() != plan.m() {
                return Err(SchedulerError::StopPointCount {
                    expected: plan.m(),
                    found: config.r2f_levels.len(),
                });
            }
            r2f_stop_points(&config.r2f_levels, config.total_steps)?
        } else {
            Vec::new()
        };
        let locked = plan.m() == 0;
        Ok(Self {
            plan,
            config,
            token_slots: None,
            n_tokens: None,
            stop_points,
            p_trans: 0,
            transitioned: Vec::new(),
            locked,
            transition_log: Vec::new(),
        })
    }

    /// Declares how many scores each observation carries.
    pub fn with_token_count(mut self, n: usize) -> Self {
        self.n_tokens = Some(n);
        self
    }

    /// Assigns token indices to slots (outer index 0 is slot 1).
    pub fn with_token_slots(mut self, slots: Vec<Vec<usize>>) -> Result<Self, SchedulerError> {
        if slots.len() != self.plan.m() {
            return Err(SchedulerError::InvalidConfig(format!(
                "{} token groups for {} slots",
                slots.len(),
                self.plan.m()
            )));
        }
        self.token_slots = Some(slots);
        Ok(self)
    }

    pub fn plan(&self) -> &PromptPlan {
        &self.plan
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn p_trans(&self) -> usize {
        self.p_trans
    }

    pub fn locked(&self) -> bool {
        self.locked
    }

    pub fn transition_log(&self) -> &[TransitionRecord] {
        &self.transition_log
    }

    /// Baseline stop points (empty unless the baseline scheduler is active).
    pub fn stop_points(&self) -> &[usize] {
        &self.stop_points
    }

    pub fn transitioned_slots(&self) -> &[usize] {
        &self.transitioned
    }

    pub fn target_prompt(&self) -> String {
        self.plan.target()
    }

    pub fn progressive_prompt(&self) -> String {
        if self.locked {
            return self.plan.target();
        }
        let selection: BTreeSet<usize> = self.transitioned.iter().copied().collect();
        self.plan.reconstruct(&selection).expect("slots in range")
    }

    pub fn choose_prompt(&self, t: usize) -> Result<PromptChoice, SchedulerError> {
        let offset = check_step(t, self.config.total_steps)?;
        match self.config.scheduler {
            SchedulerKind::R2f => {
                r2f_choose_prompt(t, self.config.total_steps, &self.plan, &self.stop_points)
            }
            SchedulerKind::None => Ok(PromptChoice {
                text: self.plan.target(),
                kind: PromptKind::Target,
                p_trans_at_choice: self.p_trans,
            }),
            SchedulerKind::Aps if offset % 2 == 0 => Ok(PromptChoice {
                text: self.plan.target(),
                kind: PromptKind::Target,
                p_trans_at_choice: self.p_trans,
            }),
            SchedulerKind::Aps => Ok(PromptChoice {
                text: self.progressive_prompt(),
                kind: PromptKind::Progressive,
                p_trans_at_choice: self.p_trans,
            }),
        }
    }

    /// Feeds the scores of a target-prompt pass at step `t`.
    ///
    /// At most one slot switches per call. Non-adaptive schedulers accept and
    /// ignore the scores.
    pub fn observe_scores(
        &mut self,
        t: usize,
        scores: &TokenScores,
    ) -> Result<Option<TransitionEvent>, SchedulerError> {
        let offset = check_step(t, self.config.total_steps)?;
        if offset % 2 != 0 {
            return Err(SchedulerError::ParityViolation { t });
        }
        if let Some(expected) = self.n_tokens {
            if scores.len() != expected {
                return Err(SchedulerError::ScoreLengthMismatch {
                    expected,
                    found: scores.len(),
                });
            }
        }
        if self.config.scheduler != SchedulerKind::Aps || self.locked {
            return Ok(None);
        }

        let m = self.plan.m();
        let k = m - self.p_trans;
        let statistic = match self.config.score_scope {
            ScoreScope::AllTokens => self.config.score_aggregation.statistic(scores, k)?,
            ScoreScope::Untransitioned => {
                let indices = self.untransitioned_tokens()?;
                let scoped = scores.subset(&indices)?;
                self.config.score_aggregation.statistic(&scoped, k)?
            }
        };
        if statistic >= self.config.tau_s {
            return Ok(None);
        }

        let slot = match self.config.transition_order {
            TransitionOrder::Index => self.p_trans + 1,
            TransitionOrder::Saturation => self.most_saturated_slot(scores)?,
        };
        self.transitioned.push(slot);
        self.p_trans += 1;
        self.transition_log.push(TransitionRecord { t, slot });
        if self.p_trans == m {
            self.locked = true;
        }
        Ok(Some(TransitionEvent {
            t,
            slot,
            p_trans: self.p_trans,
            k,
            statistic,
        }))
    }

    fn slots(&self) -> Result<&[Vec<usize>], SchedulerError> {
        self.token_slots
            .as_deref()
            .ok_or(SchedulerError::MissingTokenSlots)
    }

    fn untransitioned_tokens(&self) -> Result<Vec<usize>, SchedulerError> {
        let slots = self.slots()?;
        let mut out: Vec<usize> = (1..=self.plan.m())
            .filter(|i| !self.transitioned.contains(i))
            .flat_map(|i| slots[i - 1].iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    fn most_saturated_slot(&self, scores: &TokenScores) -> Result<usize, SchedulerError> {
        let slots = self.slots()?;
        let mut best: Option<(f64, usize)> = None;
        for slot in (1..=self.plan.m()).filter(|i| !self.transitioned.contains(i)) {
            let mut peak = f64::NEG_INFINITY;
            for &tok in &slots[slot - 1] {
                let v = *scores.values().get(tok).ok_or(ScoringError::IndexOutOfRange {
                    index: tok,
                    len: scores.len(),
                })?;
                peak = peak.max(v);
            }
            if best.is_none_or(|(b, _)| peak < b) {
                best = Some((peak, slot));
            }
        }
        Ok(best.expect("an untransitioned slot exists while unlocked").1)
    }
}
