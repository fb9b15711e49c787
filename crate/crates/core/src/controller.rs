//! Two-pass edit orchestration.
//!
//! Pass 1 denoises both prompts side by side from the same latent without
//! touching attention and records every cross-attention map. Temporal and
//! spatial scales are derived from that record. Pass 2 replays the seed for
//! the edited branch and, at every step and layer, injects a map whose word
//! columns are either preserved from the original prompt or blended toward
//! the edited prompt's attention, as the gate schedule dictates.
//!
//! Gate rule: word `i` with threshold `k_i = round(τ_i·T)` is blended while
//! `t > k_i` and preserved for the last `k_i` steps. Key words (`τ = 0`)
//! are blended throughout.

use image::RgbImage;

use crate::align::{align, tokenize, AlignmentMap, TokenizedPrompt, Vocabulary};
use crate::backend::{Backend, Branch, LayerId, LayerMaps, SessionSpec};
use crate::dps::{blend_maps, spatial_scales, SpatialScales};
use crate::error::{Error, Result};
use crate::fwt::{self, FwtAnalysis, TemporalScales};
use crate::record::{visual_features, AttnRecord, BranchStep, StepRecord};
use crate::tensor::{MaskThreshold, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EditParams {
    pub lambda_tau: f32,
    pub lambda_sv: f32,
    pub lambda_s: f32,
    pub alpha_m: MaskThreshold,
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
    /// Recompute spatial scales from each step's recorded features.
    pub per_step_spatial: bool,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            lambda_tau: 1.0,
            lambda_sv: 1.0,
            lambda_s: 0.9,
            alpha_m: MaskThreshold::default(),
            steps: 50,
            guidance: 7.5,
            seed: 42,
            per_step_spatial: false,
        }
    }
}

impl EditParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.steps > usize::from(u16::MAX) {
            return bad(format!("steps must be in 1..=65535, got {}", self.steps));
        }
        if !self.lambda_tau.is_finite() || self.lambda_tau < 0.0 {
            return bad(format!("lambda_tau must be ≥ 0, got {}", self.lambda_tau));
        }
        if !self.lambda_sv.is_finite() || self.lambda_sv < 0.0 {
            return bad(format!("lambda_sv must be ≥ 0, got {}", self.lambda_sv));
        }
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return bad(format!("lambda_s must lie in [0, 1], got {}", self.lambda_s));
        }
        if !self.guidance.is_finite() {
            return bad("guidance must be finite".into());
        }
        Ok(())
    }

    fn session(&self, prompts: &Prompts) -> SessionSpec {
        SessionSpec {
            steps: self.steps,
            guidance: self.guidance,
            seed: self.seed,
            prompt: prompts.original.text.clone(),
            edit: prompts.edit.text.clone(),
            null_prompt: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompts {
    pub original: TokenizedPrompt,
    pub edit: TokenizedPrompt,
    pub alignment: AlignmentMap,
}

impl Prompts {
    pub fn new(c: &str, c_star: &str, vocab: &dyn Vocabulary) -> Result<Self> {
        let original = tokenize(c, vocab)?;
        let edit = tokenize(c_star, vocab)?;
        let alignment = align(&original, &edit);
        Ok(Self {
            original,
            edit,
            alignment,
        })
    }
}

/// Output of the no-injection pass.
#[derive(Debug, Clone)]
pub struct CollectedPass {
    pub original: RgbImage,
    /// The edited prompt generated without any attention control.
    pub edit_plain: RgbImage,
    pub record: AttnRecord,
}

fn at_step<T>(t: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Step {
        step: t,
        source: Box::new(e),
    })
}

pub fn collect_pass(prompts: &Prompts, params: &EditParams, backend: &mut dyn Backend) -> Result<CollectedPass> {
    params.validate()?;
    let layers = backend.init(&params.session(prompts))?;
    let mut record = AttnRecord::new(params.steps, layers, prompts.original.clone(), prompts.edit.clone());
    for t in (1..=params.steps).rev() {
        let o = at_step(t, backend.step(t, Branch::Original, &[]))?;
        let e = at_step(t, backend.step(t, Branch::Edit, &[]))?;
        record.push(StepRecord {
            t,
            original: BranchStep {
                maps: o.maps,
                features: o.features,
            },
            edit: BranchStep {
                maps: e.maps,
                features: e.features,
            },
        })?;
    }
    let original = backend.decode(Branch::Original)?;
    let edit_plain = backend.decode(Branch::Edit)?;
    backend.close()?;
    Ok(CollectedPass {
        original,
        edit_plain,
        record,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Preserve,
    Blend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSchedule {
    pub steps: usize,
    /// `k_i` per word of the edited prompt.
    pub thresholds: Vec<usize>,
    pub key: Vec<bool>,
}

impl GateSchedule {
    pub fn gate(&self, word: usize, t: usize) -> Gate {
        if self.key[word] || t > self.thresholds[word] {
            Gate::Blend
        } else {
            Gate::Preserve
        }
    }

    pub fn preserve_steps(&self, word: usize) -> usize {
        if self.key[word] {
            0
        } else {
            self.thresholds[word].min(self.steps)
        }
    }

    pub fn total_preserve_steps(&self) -> usize {
        (0..self.thresholds.len()).map(|w| self.preserve_steps(w)).sum()
    }

    pub fn words(&self) -> usize {
        self.thresholds.len()
    }
}

pub fn build_schedule(tau: &TemporalScales, alignment: &AlignmentMap, steps: usize) -> GateSchedule {
    let thresholds = tau
        .tau
        .iter()
        .map(|&t| ((f64::from(t) * steps as f64).round().max(0.0) as usize).min(steps))
        .collect();
    let key = (0..tau.tau.len()).map(|w| alignment.is_key(w)).collect();
    GateSchedule { steps, thresholds, key }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub fwt: FwtAnalysis,
    pub spatial: SpatialScales,
    pub schedule: GateSchedule,
}

pub fn analyze(pass: &CollectedPass, prompts: &Prompts, params: &EditParams) -> Result<Analysis> {
    params.validate()?;
    let fwt = fwt::analyze(&pass.record, &prompts.alignment, params.alpha_m, params.lambda_tau)?;
    let spatial =
        spatial_scales(&fwt.key, &fwt.visual_features, params.lambda_sv)?.with_interpolation(params.lambda_s)?;
    let schedule = build_schedule(&fwt.scales, &prompts.alignment, params.steps);
    Ok(Analysis { fwt, spatial, schedule })
}

/// Where each edited-prompt context column takes its original-prompt map
/// from, and which word owns it.
#[derive(Debug, Clone)]
pub struct TokenMapper {
    source: Vec<Option<usize>>,
    word: Vec<Option<usize>>,
    identity: bool,
}

impl TokenMapper {
    pub fn new(prompts: &Prompts, context: usize) -> Self {
        let (c, cs) = (&prompts.original, &prompts.edit);
        let mut source: Vec<Option<usize>> = Vec::with_capacity(context);
        let mut word = vec![None; context];
        let (cs_start, cs_end) = (cs.content_start(), cs.content_end());
        for (q, owner) in word.iter_mut().enumerate() {
            let src = if q < cs_start {
                Some(q)
            } else if q >= cs_end {
                Some((c.content_end() + (q - cs_end)).min(context - 1))
            } else {
                let w = cs.word_at(q).expect("spans cover content");
                *owner = Some(w);
                prompts.alignment.source_of(w).map(|s| {
                    let (tgt, src) = (&cs.word_spans[w], &c.word_spans[s]);
                    src.start + (q - tgt.start) * src.len() / tgt.len()
                })
            };
            source.push(src);
        }
        let identity = source.iter().enumerate().all(|(q, s)| *s == Some(q));
        Self { source, word, identity }
    }

    pub fn source(&self, col: usize) -> Option<usize> {
        self.source[col]
    }

    pub fn word(&self, col: usize) -> Option<usize> {
        self.word[col]
    }

    /// The original map re-indexed into the edited prompt's columns. Columns
    /// without a source (inserted words) take the edited map's values.
    pub fn gather(&self, m_c: &Matrix, m_cstar: &Matrix) -> Result<Matrix> {
        m_c.check_same_shape(m_cstar, "TokenMapper::gather")?;
        if m_c.cols() != self.source.len() {
            return Err(Error::dim("TokenMapper::gather", "context length differs from mapper"));
        }
        if self.identity {
            return Ok(m_c.clone());
        }
        let mut out = Matrix::zeros(m_c.rows(), m_c.cols());
        for p in 0..m_c.rows() {
            let (a, b) = (m_c.row(p), m_cstar.row(p));
            for (q, o) in out.row_mut(p).iter_mut().enumerate() {
                *o = match self.source[q] {
                    Some(s) => a[s],
                    None => b[q],
                };
            }
        }
        Ok(out)
    }
}

/// One map handed to the backend during the editing pass.
#[derive(Debug)]
pub struct InjectionEvent<'a> {
    pub t: usize,
    pub layer: LayerId,
    pub head: usize,
    pub injected: &'a Matrix,
    /// The recorded original map, aligned to the edited prompt's columns.
    pub source: &'a Matrix,
    /// The recorded edited-prompt map.
    pub edit: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct EditedPass {
    pub image: RgbImage,
    /// Sum over steps, layers and heads of `‖injected − aligned original‖_F`.
    pub map_divergence: f64,
}

pub fn edit_pass(
    pass: &CollectedPass,
    prompts: &Prompts,
    analysis: &Analysis,
    params: &EditParams,
    backend: &mut dyn Backend,
    observer: &mut dyn FnMut(&InjectionEvent<'_>),
) -> Result<EditedPass> {
    let record = &pass.record;
    if !record.is_complete() {
        return Err(Error::State("attention record is incomplete".into()));
    }
    backend.init(&params.session(prompts))?;
    let schedule = &analysis.schedule;
    let mut mapper: Option<TokenMapper> = None;
    let mut fixed_scales: Vec<(LayerId, SpatialScales)> = Vec::new();
    for info in &record.layers {
        fixed_scales.push((info.id, analysis.spatial.at_resolution(info.grid())));
    }
    let mut divergence = 0f64;

    for entry in record.entries() {
        let t = entry.t;
        let step_scales;
        let scales = if params.per_step_spatial {
            let ev = visual_features(&record.layers, &entry.edit.features)?;
            let s = spatial_scales(&analysis.fwt.key, &ev, params.lambda_sv)?.with_interpolation(params.lambda_s)?;
            step_scales = record
                .layers
                .iter()
                .map(|l| (l.id, s.at_resolution(l.grid())))
                .collect::<Vec<_>>();
            &step_scales
        } else {
            &fixed_scales
        };
        let mut injected = Vec::with_capacity(entry.edit.maps.len());
        for (orig, edit) in entry.original.maps.iter().zip(&entry.edit.maps) {
            if orig.layer != edit.layer || orig.heads.len() != edit.heads.len() {
                return Err(Error::State(format!("branch layouts differ at step {t}")));
            }
            let s = &scales
                .iter()
                .find(|(id, _)| *id == edit.layer)
                .ok_or_else(|| Error::State(format!("layer {} missing from catalog", edit.layer)))?
                .1;
            let mut heads = Vec::with_capacity(edit.heads.len());
            for (h, (m_c, m_cs)) in orig.heads.iter().zip(&edit.heads).enumerate() {
                let mapper = mapper.get_or_insert_with(|| TokenMapper::new(prompts, m_cs.cols()));
                let aligned = mapper.gather(m_c, m_cs)?;
                let cols: Vec<usize> = (0..m_cs.cols())
                    .filter(|&q| mapper.word(q).is_some_and(|w| schedule.gate(w, t) == Gate::Blend))
                    .collect();
                let mut out = aligned.clone();
                if !cols.is_empty() {
                    let c = blend_maps(&aligned, m_cs, s)?;
                    for p in 0..out.rows() {
                        let (dst, src) = (out.row_mut(p), c.row(p));
                        for &q in &cols {
                            dst[q] = src[q];
                        }
                    }
                }
                divergence += out.distance(&aligned)?;
                observer(&InjectionEvent {
                    t,
                    layer: edit.layer,
                    head: h,
                    injected: &out,
                    source: &aligned,
                    edit: m_cs,
                });
                heads.push(out);
            }
            injected.push(LayerMaps {
                layer: edit.layer,
                heads,
            });
        }
        at_step(t, backend.step(t, Branch::Edit, &injected))?;
    }
    let image = backend.decode(Branch::Edit)?;
    backend.close()?;
    Ok(EditedPass {
        image,
        map_divergence: divergence,
    })
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub prompts: Prompts,
    pub original: RgbImage,
    pub edited: RgbImage,
    pub record: AttnRecord,
    /// `None` when the edit is a no-op.
    pub analysis: Option<Analysis>,
    pub map_divergence: f64,
}

impl EditOutcome {
    pub fn is_noop(&self) -> bool {
        self.analysis.is_none()
    }
}

pub fn run_edit(c: &str, c_star: &str, params: &EditParams, backend: &mut dyn Backend) -> Result<EditOutcome> {
    run_edit_observed(c, c_star, params, backend, &mut |_| {})
}

pub fn run_edit_observed(
    c: &str,
    c_star: &str,
    params: &EditParams,
    backend: &mut dyn Backend,
    observer: &mut dyn FnMut(&InjectionEvent<'_>),
) -> Result<EditOutcome> {
    params.validate()?;
    let prompts = Prompts::new(c, c_star, backend.vocabulary())?;
    let pass = collect_pass(&prompts, params, backend)?;
    finish_edit(prompts, pass, params, backend, observer)
}

/// Runs analysis and the editing pass on top of an existing collecting pass.
pub fn finish_edit(
    prompts: Prompts,
    pass: CollectedPass,
    params: &EditParams,
    backend: &mut dyn Backend,
    observer: &mut dyn FnMut(&InjectionEvent<'_>),
) -> Result<EditOutcome> {
    if prompts.alignment.is_noop() {
        log::warn!("edited prompt has no modified words; returning the original image");
        return Ok(EditOutcome {
            original: pass.original.clone(),
            edited: pass.original,
            record: pass.record,
            prompts,
            analysis: None,
            map_divergence: 0.0,
        });
    }
    let analysis = analyze(&pass, &prompts, params)?;
    let edited = edit_pass(&pass, &prompts, &analysis, params, backend, observer)?;
    Ok(EditOutcome {
        original: pass.original,
        edited: edited.image,
        record: pass.record,
        prompts,
        analysis: Some(analysis),
        map_divergence: edited.map_divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::WordVocab;
    use std::collections::BTreeSet;

    fn alignment_with_keys(n: usize, keys: &[usize]) -> AlignmentMap {
        AlignmentMap {
            pairs: (0..n).map(crate::align::WordMatch::Kept).collect(),
            key_set: keys.iter().copied().collect::<BTreeSet<_>>(),
            dropped: vec![],
        }
    }

    fn scales(tau: Vec<f32>) -> TemporalScales {
        TemporalScales { tau, lambda_tau: 1.0 }
    }

    #[test]
    fn schedule_rule() {
        let s = build_schedule(&scales(vec![0.0, 0.3, 0.0, 1.0]), &alignment_with_keys(4, &[0]), 50);
        assert!((1..=50).all(|t| s.gate(0, t) == Gate::Blend));
        assert_eq!(s.thresholds[1], 15);
        assert!((16..=50).all(|t| s.gate(1, t) == Gate::Blend));
        assert!((1..=15).all(|t| s.gate(1, t) == Gate::Preserve));
        assert!((1..=50).all(|t| s.gate(2, t) == Gate::Blend));
        assert!((1..=50).all(|t| s.gate(3, t) == Gate::Preserve));
        assert_eq!(s.preserve_steps(0), 0);
        assert_eq!(s.total_preserve_steps(), 65);
    }

    #[test]
    fn each_word_switches_at_most_once() {
        let s = build_schedule(&scales(vec![0.11, 0.5, 0.93, 0.0]), &alignment_with_keys(4, &[3]), 37);
        for w in 0..4 {
            let gates: Vec<Gate> = (1..=37).rev().map(|t| s.gate(w, t)).collect();
            let switches = gates.windows(2).filter(|g| g[0] != g[1]).count();
            assert!(switches <= 1);
        }
    }

    #[test]
    fn mapper_handles_insertions_and_padding() {
        let p = Prompts::new("a photo of a cake", "a photo of a chocolate cake", &WordVocab).unwrap();
        let m = TokenMapper::new(&p, 10);
        // BOS a photo of a | chocolate | cake EOS pad...
        assert_eq!(m.source(0), Some(0));
        assert_eq!(m.source(4), Some(4));
        assert_eq!(m.source(5), None);
        assert_eq!(m.word(5), Some(4));
        assert_eq!(m.source(6), Some(5));
        assert_eq!(m.source(7), Some(6));
        assert_eq!(m.source(9), Some(8));
        assert_eq!(m.word(8), None);

        let same = Prompts::new("a dog standing", "a dog sitting", &WordVocab).unwrap();
        let m = TokenMapper::new(&same, 8);
        assert!(m.identity);
        let a = Matrix::filled(2, 8, 0.25);
        assert_eq!(m.gather(&a, &Matrix::zeros(2, 8)).unwrap(), a);
    }

    #[test]
    fn params_validation() {
        assert!(EditParams::default().validate().is_ok());
        let bad = EditParams {
            lambda_s: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EditParams {
            steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
