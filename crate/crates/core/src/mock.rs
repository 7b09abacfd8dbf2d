//! Deterministic stand-in for a diffusion model.
//!
//! Token scores follow an exponential decay towards a per-token baseline as
//! sampling proceeds, plus hash-derived noise, so threshold crossings can be
//! solved in closed form. Text "embeddings" are hash-seeded unit vectors.
//! Nothing here touches platform RNGs, and transcendental functions go
//! through `libm` so traces are identical across targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptError, PromptPlan};
use crate::embedding::{
    lsm_combine, lsm_orthogonalize, pem_combine_detailed, select_attribute_index, EmbeddingError,
    EmbeddingVector, LsmParams, PemParams,
};
use crate::scheduler::{SchedulerError, SessionConfig, SessionState};
use crate::scoring::{token_scores, AttentionTensor, ScoringError, TokenScores};
use crate::trace::{
    LsmRecord, Parity, PemRecord, Trace, TraceEvent, TraceHeader, TransitionRecordOut,
};

/// Spatial size of synthesized attention maps.
const MAP_SIDE: usize = 2;
/// Dynamics of the start-of-sequence token, prepended at position 0.
pub const SOS_DYNAMICS: TokenDynamics = TokenDynamics {
    baseline: 0.6,
    amplitude: 0.3,
    kappa: 25.0,
    never_converges: true,
};
pub const SOS_LABEL: &str = "<sos>";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid mock config: {0}")]
    InvalidConfig(String),
    #[error("step {t} outside 1..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("target prompt has {prompt_tokens} tokens but config has {configured} dynamics")]
    TokenCountMismatch {
        prompt_tokens: usize,
        configured: usize,
    },
    #[error("session T = {session} differs from mock T = {mock}")]
    StepsMismatch { session: usize, mock: usize },
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

impl MockError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::StepOutOfRange { .. } => "StepOutOfRange",
            Self::TokenCountMismatch { .. } => "TokenCountMismatch",
            Self::StepsMismatch { .. } => "StepsMismatch",
            Self::Scheduler(e) => e.code(),
            Self::Scoring(e) => e.code(),
            Self::Embedding(e) => e.code(),
            Self::Concept(e) => e.code(),
        }
    }
}

/// `z(t) = baseline + amplitude · exp(−(T − t) / kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenDynamics {
    pub baseline: f64,
    pub amplitude: f64,
    pub kappa: f64,
    #[serde(default)]
    pub never_converges: bool,
}

impl TokenDynamics {
    pub fn new(baseline: f64, amplitude: f64, kappa: f64) -> Self {
        Self {
            baseline,
            amplitude,
            kappa,
            never_converges: false,
        }
    }

    pub fn validate(&self) -> Result<(), MockError> {
        let finite = [self.baseline, self.amplitude, self.kappa].iter().all(|v| v.is_finite());
        if !finite
            || self.baseline < 0.0
            || self.amplitude < 0.0
            || self.kappa <= 0.0
            || self.baseline + self.amplitude > 1.0
        {
            return Err(MockError::InvalidConfig(format!(
                "token dynamics {self:?} need b, a >= 0, b + a <= 1, kappa > 0"
            )));
        }
        Ok(())
    }

    /// Noise-free value at step offset `T − t`.
    pub fn value_at_offset(&self, offset: usize) -> f64 {
        self.baseline + self.amplitude * libm::exp(-(offset as f64) / self.kappa)
    }
}

fn default_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    #[serde(rename = "T")]
    pub total_steps: usize,
    /// One entry per whitespace token of the target prompt.
    pub tokens: Vec<TokenDynamics>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_scale: f64,
    /// Dimension of pseudo-embeddings.
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), MockError> {
        if self.total_steps == 0 {
            return Err(MockError::InvalidConfig("T must be positive".into()));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(MockError::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if self.dim < 2 {
            return Err(MockError::InvalidConfig("dim must be >= 2".into()));
        }
        self.tokens.iter().try_for_each(TokenDynamics::validate)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_interval_signed(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Deterministic noise in `[-1, 1]` for token `i` at step `t`.
pub fn noise(seed: u64, token: usize, t: usize) -> f64 {
    unit_interval_signed(mix64(seed ^ mix64(((token as u64) << 32) ^ t as u64)))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Hash-seeded unit vector standing in for a text embedding.
pub fn pseudo_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector, MockError> {
    if dim < 2 {
        return Err(MockError::InvalidConfig("embedding dim must be >= 2".into()));
    }
    let base = fnv1a64(text.as_bytes()) ^ mix64(seed);
    let raw: Vec<f64> = (0..dim as u64)
        .map(|j| unit_interval_signed(mix64(base.wrapping_add(j.wrapping_mul(0x9E37_79B9_7F4A_7C15)))))
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        raw.iter().map(|v| (v / norm) as f32).collect()
    } else {
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        e0
    };
    Ok(EmbeddingVector::new(values)?)
}

fn token_value(cfg: &MockConfig, dynamics: &TokenDynamics, token: usize, t: usize) -> f64 {
    let mut z = dynamics.value_at_offset(cfg.total_steps - t) + cfg.noise_scale * noise(cfg.seed, token, t);
    if dynamics.never_converges {
        z = z.max(0.5);
    }
    z.clamp(0.0, 1.0)
}

/// Head- and block-averaged attention map `[height, width, sequence]` with
/// the start token at sequence position 0.
pub fn synth_attention(cfg: &MockConfig, t: usize) -> Result<AttentionTensor, MockError> {
    if t == 0 || t > cfg.total_steps {
        return Err(MockError::StepOutOfRange {
            t,
            total: cfg.total_steps,
        });
    }
    let seq = cfg.tokens.len() + 1;
    let cells = MAP_SIDE * MAP_SIDE;
    let mut data = vec![0.0f32; cells * seq];
    let columns = std::iter::once(SOS_DYNAMICS).chain(cfg.tokens.iter().copied());
    for (pos, dynamics) in columns.enumerate() {
        let z = token_value(cfg, &dynamics, pos, t);
        let peak = (mix64(cfg.seed ^ pos as u64) % cells as u64) as usize;
        for cell in 0..cells {
            let v = if cell == peak { z } else { z * 0.25 };
            data[cell * seq + pos] = v as f32;
        }
    }
    Ok(AttentionTensor::spatial([MAP_SIDE, MAP_SIDE, seq], data)?)
}

/// Scores of the semantic tokens at step `t` (start token excluded).
pub fn synth_scores(cfg: &MockConfig, t: usize) -> Result<TokenScores, MockError> {
    let labels: Vec<String> = (1..=cfg.tokens.len()).map(|i| format!("t{i}")).collect();
    synth_scores_labelled(cfg, t, &labels)
}

fn synth_scores_labelled(cfg: &MockConfig, t: usize, labels: &[String]) -> Result<TokenScores, MockError> {
    let map = synth_attention(cfg, t)?;
    let positions: Vec<usize> = (1..=cfg.tokens.len()).collect();
    Ok(token_scores(&map, &positions, labels)?)
}

/// Whitespace tokens of `text` with their byte ranges.
pub fn whitespace_tokens(text: &str) -> Vec<(&str, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((&text[s..i], s..i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((&text[s..], s..text.len()));
    }
    out
}

/// Token indices of the target prompt covered by each slot.
pub fn slot_token_groups(plan: &PromptPlan) -> Vec<Vec<usize>> {
    let all = (1..=plan.m()).collect();
    let (text, spans) = plan.render_with_spans(&all);
    let tokens = whitespace_tokens(&text);
    let mut groups = vec![Vec::new(); plan.m()];
    for (slot, span) in spans {
        groups[slot - 1] = tokens
            .iter()
            .enumerate()
            .filter(|(_, (_, r))| r.start < span.end && span.start < r.end)
            .map(|(i, _)| i)
            .collect();
    }
    groups
}

/// Number of leading values of `l̂` copied into each trace record.
const LSM_HEAD: usize = 4;

/// Runs a full sampling loop `t = T..1` against the synthetic model.
pub fn run_session(
    cfg: &MockConfig,
    plan: &PromptPlan,
    session: &SessionConfig,
    pem: &PemParams,
    lsm: &LsmParams,
) -> Result<Trace, MockError> {
    cfg.validate()?;
    if session.total_steps != cfg.total_steps {
        return Err(MockError::StepsMismatch {
            session: session.total_steps,
            mock: cfg.total_steps,
        });
    }
    let target = plan.target();
    let labels: Vec<String> = whitespace_tokens(&target).iter().map(|(w, _)| w.to_string()).collect();
    if labels.len() != cfg.tokens.len() {
        return Err(MockError::TokenCountMismatch {
            prompt_tokens: labels.len(),
            configured: cfg.tokens.len(),
        });
    }
    let mut state = SessionState::new(plan.clone(), session.clone())?
        .with_token_count(labels.len())
        .with_token_slots(slot_token_groups(plan))?;

    let header = TraceHeader::new(plan, session, cfg, pem, lsm, state.stop_points().to_vec(), labels.clone());
    let total = cfg.total_steps;
    let c_f = pseudo_embed(&plan.frequent(), cfg.dim, cfg.seed)?;
    let c_r = pseudo_embed(&target, cfg.dim, cfg.seed)?;
    let mut events = Vec::with_capacity(total * 2);

    for t in (1..=total).rev() {
        let offset = total - t;
        let parity = Parity::of(offset);
        if parity == Parity::Even {
            let scores = synth_scores_labelled(cfg, t, &labels)?;
            events.push(TraceEvent::scores(t, parity, state.p_trans(), &scores));
            if let Some(ev) = state.observe_scores(t, &scores)? {
                events.push(TraceEvent::transition(
                    t,
                    parity,
                    state.p_trans(),
                    TransitionRecordOut::from(&ev),
                ));
            }
        }

        let choice = state.choose_prompt(t)?;
        let pem_out = pem_combine_detailed(&c_f, &c_r, pem)?;
        let pem_record = PemRecord {
            gamma: pem_out.gamma as f32,
            delta: pem_out.delta as f32,
            norm: pem_out.pooled.norm() as f32,
        };

        let lsm_record = if plan.m() == 0 {
            None
        } else {
            let attr_index = select_attribute_index(state.p_trans(), plan.m())?;
            let attr_text = plan.pair(attr_index).expect("index in range").attribute_text();
            if attr_text.is_empty() {
                Some(LsmRecord::skipped(attr_index))
            } else {
                let latent = |cond: &str| pseudo_embed(&format!("{cond}\u{1f}{t}"), cfg.dim, cfg.seed);
                let l_base = latent(&choice.text)?;
                let l_attr = latent(attr_text)?;
                let l_null = latent("")?;
                let l_prime = lsm_orthogonalize(&l_attr, &l_null)?;
                let l_hat = lsm_combine(&l_base, &l_prime, lsm)?;
                Some(LsmRecord {
                    attr_index,
                    applied: true,
                    l_prime_norm: l_prime.norm() as f32,
                    l_hat_norm: l_hat.norm() as f32,
                    l_hat_head: l_hat.values().iter().take(LSM_HEAD).copied().collect(),
                })
            }
        };

        events.push(TraceEvent::step(
            t,
            parity,
            state.p_trans(),
            &choice,
            pem_record,
            lsm_record,
        ));
    }
    Ok(Trace { header, events })
}
