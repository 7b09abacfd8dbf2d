//! Vector operations behind pooled-embedding manipulation and latent-space
//! attribute guidance.
//!
//! Values are stored as `f32`; dot products and norms accumulate in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("projection base has zero norm")]
    ZeroNormBase,
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("embedding is empty")]
    Empty,
    #[error("non-finite entry at {0}")]
    NonFinite(usize),
    #[error("parameter {name} = {value} outside {range}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("row length {row_len} does not divide dimension {dim}")]
    RowLength { row_len: usize, dim: usize },
    #[error("p_trans = {p_trans} outside 0..={m}")]
    RangeViolation { p_trans: usize, m: usize },
}

impl EmbeddingError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::DimMismatch { .. } => "DimMismatch",
            Self::ZeroNormBase => "ZeroNormBase",
            Self::ZeroNorm => "ZeroNorm",
            Self::Empty => "EmptyEmbedding",
            Self::NonFinite(_) => "NonFinite",
            Self::InvalidParam { .. } => "InvalidParam",
            Self::RowLength { .. } => "RowLength",
            Self::RangeViolation { .. } => "RangeViolation",
        }
    }
}

/// Dense finite vector (pooled embedding, attribute embedding, or a flattened
/// attention-layer output).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self, EmbeddingError> {
        Self::new(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbeddingError> {
        check_dims(self, other)?;
        Ok(dot64(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot64(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|&v| (v as f64 * k) as f32).collect())
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(d)?;
        Self::new(values).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<(), EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_range(
    name: &'static str,
    value: f64,
    ok: bool,
    range: &'static str,
) -> Result<(), EmbeddingError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(EmbeddingError::InvalidParam { name, value, range })
    }
}

/// Interpolation weight and sigmoid shape of the cosine-gated shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPemParams")]
pub struct PemParams {
    lambda_pool: f64,
    s: f64,
    p: f64,
    epsilon: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPemParams {
    lambda_pool: f64,
    s: f64,
    p: f64,
    epsilon: f64,
}

impl TryFrom<RawPemParams> for PemParams {
    type Error = EmbeddingError;

    fn try_from(r: RawPemParams) -> Result<Self, Self::Error> {
        Self::new(r.lambda_pool, r.s, r.p, r.epsilon)
    }
}

impl Default for PemParams {
    fn default() -> Self {
        Self {
            lambda_pool: 0.3,
            s: 2.0,
            p: 100.0,
            epsilon: 0.93,
        }
    }
}

impl PemParams {
    pub fn new(lambda_pool: f64, s: f64, p: f64, epsilon: f64) -> Result<Self, EmbeddingError> {
        check_range("lambda_pool", lambda_pool, (0.0..=1.0).contains(&lambda_pool), "[0, 1]")?;
        check_range("s", s, s > 0.0, "(0, inf)")?;
        check_range("p", p, p > 0.0, "(0, inf)")?;
        check_range("epsilon", epsilon, epsilon > 0.0 && epsilon < 1.0, "(0, 1)")?;
        Ok(Self {
            lambda_pool,
            s,
            p,
            epsilon,
        })
    }

    pub fn lambda_pool(&self) -> f64 {
        self.lambda_pool
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLsmParams")]
pub struct LsmParams {
    lambda_attr: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLsmParams {
    lambda_attr: f64,
}

impl TryFrom<RawLsmParams> for LsmParams {
    type Error = EmbeddingError;

    fn try_from(r: RawLsmParams) -> Result<Self, Self::Error> {
        Self::new(r.lambda_attr)
    }
}

impl Default for LsmParams {
    fn default() -> Self {
        Self { lambda_attr: 0.15 }
    }
}

impl LsmParams {
    pub fn new(lambda_attr: f64) -> Result<Self, EmbeddingError> {
        check_range("lambda_attr", lambda_attr, (0.0..=1.0).contains(&lambda_attr), "[0, 1]")?;
        Ok(Self { lambda_attr })
    }

    pub fn lambda_attr(&self) -> f64 {
        self.lambda_attr
    }
}

/// Coefficient of `b` in the decomposition of `a`: `(b·a) / ‖b‖²`.
pub fn projection_coefficient(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    check_dims(a, b)?;
    let bb = dot64(&b.0, &b.0);
    if bb.sqrt() < MIN_NORM {
        return Err(EmbeddingError::ZeroNormBase);
    }
    Ok(dot64(&b.0, &a.0) / bb)
}

/// Component of `a` orthogonal to `b`: `a − ((b·a)/‖b‖²)·b`.
pub fn project_out(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
    let coef = projection_coefficient(a, b)?;
    Ok(EmbeddingVector(
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| (x as f64 - coef * y as f64) as f32)
            .collect(),
    ))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot64(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// `s / (1 + exp(−p (γ − ε)))`.
pub fn shift_factor(gamma: f64, params: &PemParams) -> f64 {
    params.s / (1.0 + libm::exp(-params.p * (gamma - params.epsilon)))
}

/// Result of pooled-embedding manipulation with its intermediate scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PemOutput {
    pub pooled: EmbeddingVector,
    pub gamma: f64,
    pub delta: f64,
}

/// `(1−λ)·c_f + λ·δ(γ)·Δ_r` with `Δ_r` the component of `c_r` orthogonal to
/// `c_f` and `γ = cos(c_r, c_f)`.
pub fn pem_combine_detailed(
    c_f: &EmbeddingVector,
    c_r: &EmbeddingVector,
    params: &PemParams,
) -> Result<PemOutput, EmbeddingError> {
    let delta_r = project_out(c_r, c_f)?;
    let gamma = cosine_similarity(c_r, c_f)?;
    let delta = shift_factor(gamma, params);
    let pooled = mix(c_f, &delta_r, 1.0 - params.lambda_pool, params.lambda_pool * delta);
    Ok(PemOutput {
        pooled,
        gamma,
        delta,
    })
}

pub fn pem_combine(
    c_f: &EmbeddingVector,
    c_r: &EmbeddingVector,
    params: &PemParams,
) -> Result<EmbeddingVector, EmbeddingError> {
    pem_combine_detailed(c_f, c_r, params).map(|o| o.pooled)
}

/// Pooled manipulation without cosine gating (shift fixed at 1).
pub fn pem_combine_fixed(
    c_f: &EmbeddingVector,
    c_r: &EmbeddingVector,
    lambda_pool: f64,
) -> Result<EmbeddingVector, EmbeddingError> {
    let delta_r = project_out(c_r, c_f)?;
    Ok(mix(c_f, &delta_r, 1.0 - lambda_pool, lambda_pool))
}

/// Attribute direction orthogonal to the null-prompt output.
pub fn lsm_orthogonalize(
    l_attr: &EmbeddingVector,
    l_null: &EmbeddingVector,
) -> Result<EmbeddingVector, EmbeddingError> {
    project_out(l_attr, l_null)
}

/// Row-wise variant for `[tokens × channels]` outputs flattened row-major.
pub fn lsm_orthogonalize_rows(
    l_attr: &EmbeddingVector,
    l_null: &EmbeddingVector,
    row_len: usize,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_dims(l_attr, l_null)?;
    if row_len == 0 || !l_attr.dim().is_multiple_of(row_len) {
        return Err(EmbeddingError::RowLength {
            row_len,
            dim: l_attr.dim(),
        });
    }
    let mut out = Vec::with_capacity(l_attr.dim());
    for (ra, rn) in l_attr.0.chunks(row_len).zip(l_null.0.chunks(row_len)) {
        let row = project_out(&EmbeddingVector(ra.to_vec()), &EmbeddingVector(rn.to_vec()))?;
        out.extend(row.0);
    }
    Ok(EmbeddingVector(out))
}

/// `l_base + λ_attr·l'`.
pub fn lsm_combine(
    l_base: &EmbeddingVector,
    l_prime: &EmbeddingVector,
    params: &LsmParams,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_dims(l_base, l_prime)?;
    let lambda = params.lambda_attr;
    Ok(EmbeddingVector(
        l_base
            .0
            .iter()
            .zip(&l_prime.0)
            .map(|(&b, &p)| if lambda == 0.0 || p == 0.0 { b } else { (b as f64 + lambda * p as f64) as f32 })
            .collect(),
    ))
}

/// Attribute slot used for guidance: `min(p_trans + 1, m)`.
pub fn select_attribute_index(p_trans: usize, m: usize) -> Result<usize, EmbeddingError> {
    if m == 0 || p_trans > m {
        return Err(EmbeddingError::RangeViolation { p_trans, m });
    }
    Ok((p_trans + 1).min(m))
}

/// `(1−λ)·c_prog + λ·(c_tar ⟂ c_prog)`.
pub fn gram_schmidt_combine(
    c_tar: &EmbeddingVector,
    c_prog: &EmbeddingVector,
    lambda: f64,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_range("lambda", lambda, (0.0..=1.0).contains(&lambda), "[0, 1]")?;
    if c_tar.norm() < MIN_NORM {
        return Err(EmbeddingError::ZeroNorm);
    }
    let ortho = project_out(c_tar, c_prog)?;
    Ok(mix(c_prog, &ortho, 1.0 - lambda, lambda))
}

/// `wa·a + wb·b`, returning `a` untouched when `wb = 0` and `wa = 1`.
fn mix(a: &EmbeddingVector, b: &EmbeddingVector, wa: f64, wb: f64) -> EmbeddingVector {
    if wb == 0.0 && wa == 1.0 {
        return a.clone();
    }
    EmbeddingVector(
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
            .collect(),
    )
}
