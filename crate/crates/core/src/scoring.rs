//! Attention aggregation and per-token response scores.
//!
//! Attention maps are reduced by averaging over heads, then over blocks, and
//! each text token is scored by its spatial maximum. Schedulers test the
//! k-th largest token score against a threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_file::TensorFile;

pub const AXIS_HEAD: &str = "head";
pub const AXIS_HEIGHT: &str = "height";
pub const AXIS_WIDTH: &str = "width";
pub const AXIS_SEQUENCE: &str = "sequence";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("axis {0:?} missing")]
    AxisMissing(&'static str),
    #[error("tensor invalid: {0}")]
    InvalidTensor(String),
    #[error("no blocks to aggregate")]
    EmptyList,
    #[error("block {index} has dims {found:?}, expected {expected:?}")]
    DimMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("{values} scores but {labels} labels")]
    LabelMismatch { values: usize, labels: usize },
    #[error("score {value} at token {index} outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
}

impl ScoringError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::AxisMissing(_) => "AxisMissing",
            Self::InvalidTensor(_) => "InvalidTensor",
            Self::EmptyList => "EmptyList",
            Self::DimMismatch { .. } => "DimMismatch",
            Self::IndexOutOfRange { .. } => "IndexOutOfRange",
            Self::KOutOfRange { .. } => "KOutOfRange",
            Self::LabelMismatch { .. } => "LabelMismatch",
            Self::ScoreOutOfRange { .. } => "ScoreOutOfRange",
        }
    }
}

/// Dense row-major non-negative attention values with named axes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    axes: Vec<String>,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(axes: Vec<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self, ScoringError> {
        if axes.len() != dims.len() {
            return Err(ScoringError::InvalidTensor(format!(
                "{} axes for {} dims",
                axes.len(),
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(ScoringError::InvalidTensor("zero-sized dim".into()));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ScoringError::InvalidTensor("dims overflow".into()))?;
        if expected != data.len() {
            return Err(ScoringError::InvalidTensor(format!(
                "dims {dims:?} need {expected} values, found {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ScoringError::InvalidTensor(format!("entry {bad} not a finite non-negative value")));
        }
        Ok(Self { axes, dims, data })
    }

    /// Shorthand for `[head, height, width, sequence]`.
    pub fn with_heads(dims: [usize; 4], data: Vec<f32>) -> Result<Self, ScoringError> {
        Self::new(
            [AXIS_HEAD, AXIS_HEIGHT, AXIS_WIDTH, AXIS_SEQUENCE].map(String::from).to_vec(),
            dims.to_vec(),
            data,
        )
    }

    /// Shorthand for `[height, width, sequence]`.
    pub fn spatial(dims: [usize; 3], data: Vec<f32>) -> Result<Self, ScoringError> {
        Self::new(
            [AXIS_HEIGHT, AXIS_WIDTH, AXIS_SEQUENCE].map(String::from).to_vec(),
            dims.to_vec(),
            data,
        )
    }

    pub fn axes(&self) -> &[String] {
        &self.axes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn axis_index(&self, name: &'static str) -> Result<usize, ScoringError> {
        self.axes
            .iter()
            .position(|a| a == name)
            .ok_or(ScoringError::AxisMissing(name))
    }

    /// Returns `(outer, len, inner)` strides for splitting around `axis`.
    fn split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.dims[..axis].iter().product();
        let inner = self.dims[axis + 1..].iter().product();
        (outer, self.dims[axis], inner)
    }
}

impl TryFrom<TensorFile> for AttentionTensor {
    type Error = ScoringError;

    fn try_from(t: TensorFile) -> Result<Self, Self::Error> {
        Self::new(t.axes, t.dims, t.data)
    }
}

impl From<AttentionTensor> for TensorFile {
    fn from(t: AttentionTensor) -> Self {
        TensorFile {
            axes: t.axes,
            dims: t.dims,
            data: t.data,
        }
    }
}

/// Per-token attention response values for one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    values: Vec<f64>,
    token_labels: Vec<String>,
    #[serde(default)]
    excluded_indices: Vec<usize>,
}

impl TokenScores {
    pub fn new(
        values: Vec<f64>,
        token_labels: Vec<String>,
        excluded_indices: Vec<usize>,
    ) -> Result<Self, ScoringError> {
        if values.len() != token_labels.len() {
            return Err(ScoringError::LabelMismatch {
                values: values.len(),
                labels: token_labels.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ScoringError::ScoreOutOfRange { index, value });
        }
        Ok(Self {
            values,
            token_labels,
            excluded_indices,
        })
    }

    /// Scores labelled `t0`, `t1`, ...
    pub fn from_values(values: Vec<f64>) -> Result<Self, ScoringError> {
        let labels = (0..values.len()).map(|i| format!("t{i}")).collect();
        Self::new(values, labels, Vec::new())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn token_labels(&self) -> &[String] {
        &self.token_labels
    }

    pub fn excluded_indices(&self) -> &[usize] {
        &self.excluded_indices
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scores restricted to `indices` (positions into this score list).
    pub fn subset(&self, indices: &[usize]) -> Result<Self, ScoringError> {
        let mut values = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.values.len() {
                return Err(ScoringError::IndexOutOfRange {
                    index: i,
                    len: self.values.len(),
                });
            }
            values.push(self.values[i]);
            labels.push(self.token_labels[i].clone());
        }
        Ok(Self {
            values,
            token_labels: labels,
            excluded_indices: self.excluded_indices.clone(),
        })
    }
}

/// Mean over the `head` axis.
pub fn aggregate_heads(a: &AttentionTensor) -> Result<AttentionTensor, ScoringError> {
    let axis = a.axis_index(AXIS_HEAD)?;
    let (outer, heads, inner) = a.split(axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * heads * inner;
        for i in 0..inner {
            let sum: f64 = (0..heads).map(|h| a.data[base + h * inner + i] as f64).sum();
            out.push((sum / heads as f64) as f32);
        }
    }
    let mut axes = a.axes.clone();
    let mut dims = a.dims.clone();
    axes.remove(axis);
    dims.remove(axis);
    Ok(AttentionTensor {
        axes,
        dims,
        data: out,
    })
}

/// Elementwise mean over a list of per-block maps.
pub fn aggregate_blocks(blocks: &[AttentionTensor]) -> Result<AttentionTensor, ScoringError> {
    let first = blocks.first().ok_or(ScoringError::EmptyList)?;
    for (index, b) in blocks.iter().enumerate().skip(1) {
        if b.dims != first.dims || b.axes != first.axes {
            return Err(ScoringError::DimMismatch {
                index,
                expected: first.dims.clone(),
                found: b.dims.clone(),
            });
        }
    }
    let n = blocks.len() as f64;
    let data = (0..first.data.len())
        .map(|i| (blocks.iter().map(|b| b.data[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(AttentionTensor {
        axes: first.axes.clone(),
        dims: first.dims.clone(),
        data,
    })
}

/// Spatial maximum at each requested sequence position.
///
/// Every axis other than `sequence` is reduced with `max`, so a head axis
/// that was not aggregated is folded in too.
pub fn token_scores(
    a_c: &AttentionTensor,
    token_positions: &[usize],
    labels: &[String],
) -> Result<TokenScores, ScoringError> {
    if token_positions.len() != labels.len() {
        return Err(ScoringError::LabelMismatch {
            values: token_positions.len(),
            labels: labels.len(),
        });
    }
    let axis = a_c.axis_index(AXIS_SEQUENCE)?;
    let (outer, seq_len, inner) = a_c.split(axis);
    let mut values = Vec::with_capacity(token_positions.len());
    for &pos in token_positions {
        if pos >= seq_len {
            return Err(ScoringError::IndexOutOfRange {
                index: pos,
                len: seq_len,
            });
        }
        let mut best = f32::NEG_INFINITY;
        for o in 0..outer {
            let base = (o * seq_len + pos) * inner;
            for &v in &a_c.data[base..base + inner] {
                best = best.max(v);
            }
        }
        values.push(best as f64);
    }
    let excluded = (0..seq_len).filter(|p| !token_positions.contains(p)).collect();
    TokenScores::new(values, labels.to_vec(), excluded)
}

/// Sequence positions `0..seq_len` minus `excluded` (e.g. the start token).
pub fn semantic_positions(seq_len: usize, excluded: &[usize]) -> Vec<usize> {
    (0..seq_len).filter(|p| !excluded.contains(p)).collect()
}

/// k-th largest value, counting duplicates with multiplicity.
pub fn kth_largest_of(values: &[f64], k: usize) -> Result<f64, ScoringError> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(ScoringError::KOutOfRange { k, n });
    }
    let mut buf = values.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    Ok(*kth)
}

pub fn kth_largest(scores: &TokenScores, k: usize) -> Result<f64, ScoringError> {
    kth_largest_of(&scores.values, k)
}

/// True iff the k-th largest score is strictly below `tau_s`.
pub fn should_transition(scores: &TokenScores, k: usize, tau_s: f64) -> Result<bool, ScoringError> {
    Ok(kth_largest(scores, k)? < tau_s)
}

/// How token scores collapse into the single statistic compared with the
/// threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    /// k-th largest individual score.
    #[default]
    Individual,
    /// Mean of all token scores.
    Mean,
    /// Sum of all token scores.
    Cumulative,
}

impl ScoreAggregation {
    pub fn statistic(self, scores: &TokenScores, k: usize) -> Result<f64, ScoringError> {
        let n = scores.len();
        match self {
            Self::Individual => kth_largest(scores, k),
            Self::Mean if n == 0 => Err(ScoringError::KOutOfRange { k, n }),
            Self::Mean => Ok(scores.values.iter().sum::<f64>() / n as f64),
            Self::Cumulative => Ok(scores.values.iter().sum()),
        }
    }

    pub fn should_transition(
        self,
        scores: &TokenScores,
        k: usize,
        tau_s: f64,
    ) -> Result<bool, ScoringError> {
        Ok(self.statistic(scores, k)? < tau_s)
    }
}
