//! Word-level temporal scales.
//!
//! From the last-step attention of the edited prompt, every word gets an
//! embedding: its (masked, normalized) attention over the 32×32 grid applied
//! to the visual features. The key words' embeddings are pooled, each word
//! is scored by cosine similarity `A` against the pool, and the temporal
//! scale is `τ = λ_τ·(1 − exp(A − 1))`, zero for key words.

use std::collections::BTreeSet;

use crate::align::AlignmentMap;
use crate::backend::Branch;
use crate::error::{Error, Result};
use crate::record::AttnRecord;
use crate::tensor::{
    dot, l2_normalize_rows, mask_below, matmul, normalize_l2_in_place, normalize_rows_sum, MaskThreshold, Matrix,
};

/// Layer- and head-averaged word attention on the 32×32 grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedMap {
    /// `words × 1024` attention probabilities (not yet normalized per word).
    pub map: Matrix,
    pub source_step: usize,
}

impl AggregatedMap {
    /// Each word's map scaled to sum to one over the grid.
    pub fn normalized(&self) -> Matrix {
        normalize_rows_sum(&self.map)
    }

    /// Masked with `alpha_m`, then renormalized. Fully masked rows stay zero.
    pub fn discriminant(&self, alpha_m: MaskThreshold) -> Matrix {
        normalize_rows_sum(&mask_below(&self.map, alpha_m))
    }
}

pub fn aggregate_last_step(record: &AttnRecord, branch: Branch) -> Result<AggregatedMap> {
    record.last_step()?;
    Ok(AggregatedMap {
        map: record.word_maps(1, branch)?,
        source_step: 1,
    })
}

/// `E_c* = M × E_[V]`. Rows of `m` that are entirely zero fall back to the
/// unweighted mean of the visual features.
pub fn text_embed_from_attn(m: &Matrix, ev: &Matrix) -> Result<Matrix> {
    let mut e = matmul(m, ev)?;
    let fallback = ev.mean_row();
    for r in 0..m.rows() {
        if m.row(r).iter().all(|&v| v == 0.0) {
            e.row_mut(r).copy_from_slice(&fallback);
        }
    }
    Ok(e)
}

/// Unit-norm pooled embedding of the key words.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyEmbedding(Vec<f32>);

impl KeyEmbedding {
    pub fn new(mut v: Vec<f32>) -> Self {
        normalize_l2_in_place(&mut v);
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn pool_key_embedding(e_cstar: &Matrix, key_words: &BTreeSet<usize>) -> Result<KeyEmbedding> {
    if key_words.is_empty() {
        return Err(Error::NoOp);
    }
    let mut acc = vec![0f64; e_cstar.cols()];
    for &w in key_words {
        if w >= e_cstar.rows() {
            return Err(Error::dim("pool_key_embedding", format!("key word {w} out of range")));
        }
        for (a, &v) in acc.iter_mut().zip(e_cstar.row(w)) {
            *a += f64::from(v);
        }
    }
    let n = key_words.len() as f64;
    Ok(KeyEmbedding::new(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

/// Cosine similarity of every word embedding with the key embedding,
/// clamped to `[0, 1]`.
pub fn correlation(e_cstar: &Matrix, k: &KeyEmbedding) -> Result<Vec<f32>> {
    if e_cstar.cols() != k.dim() {
        return Err(Error::dim(
            "correlation",
            format!("embeddings have width {}, key has {}", e_cstar.cols(), k.dim()),
        ));
    }
    let unit = l2_normalize_rows(e_cstar);
    Ok(unit
        .iter_rows()
        .map(|r| (dot(r, k.as_slice()) as f32).clamp(0.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalScales {
    /// Per word of the edited prompt.
    pub tau: Vec<f32>,
    pub lambda_tau: f32,
}

impl TemporalScales {
    pub fn upper_bound(&self) -> f32 {
        self.lambda_tau * (1.0 - (-1.0f32).exp())
    }
}

pub fn temporal_scale(a: f32, lambda_tau: f32) -> f32 {
    (f64::from(lambda_tau) * (1.0 - (f64::from(a) - 1.0).exp())) as f32
}

pub fn temporal_scales(a: &[f32], key_set: &BTreeSet<usize>, lambda_tau: f32) -> Result<TemporalScales> {
    if !lambda_tau.is_finite() || lambda_tau < 0.0 {
        return Err(Error::Config(format!("lambda_tau must be ≥ 0, got {lambda_tau}")));
    }
    if let Some(bad) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("correlation {bad} outside [0, 1]")));
    }
    let tau = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| {
            if key_set.contains(&i) {
                0.0
            } else {
                temporal_scale(ai, lambda_tau)
            }
        })
        .collect();
    Ok(TemporalScales { tau, lambda_tau })
}

/// Everything computed from the last step of the collecting pass.
#[derive(Debug, Clone)]
pub struct FwtAnalysis {
    pub aggregated: AggregatedMap,
    /// Masked, renormalized word maps that fed the embeddings.
    pub discriminant: Matrix,
    pub visual_features: Matrix,
    pub embeddings: Matrix,
    pub key: KeyEmbedding,
    pub correlation: Vec<f32>,
    pub scales: TemporalScales,
}

pub fn analyze(
    record: &AttnRecord,
    alignment: &AlignmentMap,
    alpha_m: MaskThreshold,
    lambda_tau: f32,
) -> Result<FwtAnalysis> {
    let aggregated = aggregate_last_step(record, Branch::Edit)?;
    let discriminant = aggregated.discriminant(alpha_m);
    let visual_features = record.visual_features(aggregated.source_step, Branch::Edit)?;
    let embeddings = text_embed_from_attn(&discriminant, &visual_features)?;
    let key = pool_key_embedding(&embeddings, &alignment.key_set)?;
    let correlation = correlation(&embeddings, &key)?;
    let scales = temporal_scales(&correlation, &alignment.key_set, lambda_tau)?;
    Ok(FwtAnalysis {
        aggregated,
        discriminant,
        visual_features,
        embeddings,
        key,
        correlation,
        scales,
    })
}
