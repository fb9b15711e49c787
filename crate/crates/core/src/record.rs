//! Attention recorded during the no-injection pass, and its on-disk form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::align::TokenizedPrompt;
use crate::backend::protocol::{Reader, Writer};
use crate::backend::{nearest_feature_layers, Branch, LayerFeatures, LayerInfo, LayerMaps, FEATURE_GRID};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Resampler};

#[derive(Debug, Clone, PartialEq)]
pub struct BranchStep {
    pub maps: Vec<LayerMaps>,
    pub features: Vec<LayerFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub original: BranchStep,
    pub edit: BranchStep,
}

impl StepRecord {
    pub fn branch(&self, b: Branch) -> &BranchStep {
        match b {
            Branch::Original => &self.original,
            Branch::Edit => &self.edit,
        }
    }
}

/// Per-step cross-attention of both branches, filled in order `t = T … 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnRecord {
    pub steps: usize,
    pub layers: Vec<LayerInfo>,
    pub original: TokenizedPrompt,
    pub edit: TokenizedPrompt,
    entries: Vec<StepRecord>,
}

impl AttnRecord {
    pub fn new(steps: usize, layers: Vec<LayerInfo>, original: TokenizedPrompt, edit: TokenizedPrompt) -> Self {
        Self {
            steps,
            layers,
            original,
            edit,
            entries: Vec::with_capacity(steps),
        }
    }

    /// Appends the next step; steps must arrive as `T, T−1, …, 1`.
    pub fn push(&mut self, step: StepRecord) -> Result<()> {
        let expected = self.steps - self.entries.len();
        if self.entries.len() == self.steps || step.t != expected {
            return Err(Error::State(format!("record expects step {expected}, got {}", step.t)));
        }
        self.entries.push(step);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.steps
    }

    pub fn entries(&self) -> &[StepRecord] {
        &self.entries
    }

    pub fn at_step(&self, t: usize) -> Option<&StepRecord> {
        if t == 0 || t > self.steps {
            return None;
        }
        self.entries.get(self.steps - t)
    }

    /// The final denoising step (`t = 1`).
    pub fn last_step(&self) -> Result<&StepRecord> {
        self.at_step(1)
            .ok_or_else(|| Error::State("no final-step attention recorded".into()))
    }

    pub fn layer(&self, id: u16) -> Result<LayerInfo> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .copied()
            .ok_or_else(|| Error::State(format!("layer {id} missing from catalog")))
    }

    pub fn prompt(&self, b: Branch) -> &TokenizedPrompt {
        match b {
            Branch::Original => &self.original,
            Branch::Edit => &self.edit,
        }
    }

    /// Visual features `E_[V]` on the 32×32 grid: the layers nearest that
    /// resolution, resampled if needed and averaged.
    pub fn visual_features(&self, t: usize, branch: Branch) -> Result<Matrix> {
        let step = self
            .at_step(t)
            .ok_or_else(|| Error::State(format!("step {t} not recorded")))?;
        visual_features(&self.layers, &step.branch(branch).features)
    }

    /// Per-word attention over the 32×32 grid at step `t`: token columns of
    /// the word summed, heads and layers averaged. Entries are attention
    /// probabilities in `[0, 1]`.
    pub fn word_maps(&self, t: usize, branch: Branch) -> Result<Matrix> {
        let step = self
            .at_step(t)
            .ok_or_else(|| Error::State(format!("step {t} not recorded")))?;
        let prompt = self.prompt(branch);
        let maps = &step.branch(branch).maps;
        if maps.is_empty() {
            return Err(Error::State(format!("no attention maps at step {t}")));
        }
        let n = FEATURE_GRID * FEATURE_GRID;
        let mut acc = vec![0f64; prompt.words.len() * n];
        for lm in maps {
            let info = self.layer(lm.layer)?;
            let mean = lm.mean();
            if mean.rows() != info.pixels() {
                return Err(Error::dim(
                    "word_maps",
                    format!(
                        "layer {} map has {} rows, grid has {}",
                        lm.layer,
                        mean.rows(),
                        info.pixels()
                    ),
                ));
            }
            let resampler = Resampler::new(info.grid(), (FEATURE_GRID, FEATURE_GRID));
            for (w, span) in prompt.word_spans.iter().enumerate() {
                if span.end > mean.cols() {
                    return Err(Error::dim("word_maps", "word span beyond context"));
                }
                let col: Vec<f32> = mean.iter_rows().map(|r| r[span.clone()].iter().sum()).collect();
                for (a, v) in acc[w * n..(w + 1) * n].iter_mut().zip(resampler.resample(&col)) {
                    *a += f64::from(v);
                }
            }
        }
        let k = maps.len() as f64;
        Matrix::from_vec(prompt.words.len(), n, acc.into_iter().map(|v| (v / k) as f32).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(RECORD_MAGIC);
        w.u8(RECORD_VERSION);
        w.u16(self.steps as u16);
        write_prompt(&mut w, &self.original);
        write_prompt(&mut w, &self.edit);
        w.u16(self.layers.len() as u16);
        for l in &self.layers {
            w.u16(l.id);
            w.u16(l.height);
            w.u16(l.width);
            w.u16(l.heads);
        }
        w.u16(self.entries.len() as u16);
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&w.buf)?;
        for e in &self.entries {
            let mut w = Writer::default();
            w.u16(e.t as u16);
            for b in Branch::BOTH {
                let bs = e.branch(b);
                w.layer_tensors(&crate::backend::protocol::layer_maps_to_tensors(&bs.maps));
                let feats: Vec<_> = bs
                    .features
                    .iter()
                    .map(|f| (f.layer, crate::backend::protocol::Tensor::from_matrix(&f.features)))
                    .collect();
                w.layer_tensors(&feats);
            }
            out.write_all(&w.buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingRecord(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes)?;
        let mut r = Reader::new(&bytes);
        let corrupt = |what: &str| Error::State(format!("corrupt attention record: {what}"));
        if bytes.get(..4) != Some(&RECORD_MAGIC[..]) {
            return Err(corrupt("bad magic"));
        }
        for _ in 0..4 {
            r.u8()?;
        }
        if r.u8()? != RECORD_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let steps = usize::from(r.u16()?);
        let original = read_prompt(&mut r)?;
        let edit = read_prompt(&mut r)?;
        let n_layers = r.u16()?;
        let layers = (0..n_layers)
            .map(|_| {
                Ok(LayerInfo {
                    id: r.u16()?,
                    height: r.u16()?,
                    width: r.u16()?,
                    heads: r.u16()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_entries = r.u16()?;
        let mut rec = AttnRecord::new(steps, layers, original, edit);
        for _ in 0..n_entries {
            let t = usize::from(r.u16()?);
            let mut read_branch = || -> Result<BranchStep> {
                let maps = crate::backend::protocol::layer_maps_from_tensors(&r.layer_tensors()?)?;
                let features = r
                    .layer_tensors()?
                    .into_iter()
                    .map(|(layer, t)| {
                        Ok(LayerFeatures {
                            layer,
                            features: t.to_matrix()?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(BranchStep { maps, features })
            };
            let original = read_branch()?;
            let edit = read_branch()?;
            rec.push(StepRecord { t, original, edit })?;
        }
        if !r.is_done() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(rec)
    }
}

const RECORD_MAGIC: &[u8; 4] = b"ADPR";
const RECORD_VERSION: u8 = 1;

fn write_prompt(w: &mut Writer, p: &TokenizedPrompt) {
    w.string(&p.text);
    w.u16(p.words.len() as u16);
    for (word, span) in p.words.iter().zip(&p.word_spans) {
        w.string(word);
        w.u16(span.start as u16);
        w.u16(span.end as u16);
    }
    w.u16(p.token_ids.len() as u16);
    for &id in &p.token_ids {
        w.u32(id);
    }
}

fn read_prompt(r: &mut Reader<'_>) -> Result<TokenizedPrompt> {
    let text = r.string()?;
    let n = r.u16()?;
    let mut words = Vec::with_capacity(usize::from(n));
    let mut word_spans = Vec::with_capacity(usize::from(n));
    for _ in 0..n {
        words.push(r.string()?);
        word_spans.push(usize::from(r.u16()?)..usize::from(r.u16()?));
    }
    let n_ids = r.u16()?;
    let token_ids = (0..n_ids).map(|_| r.u32()).collect::<Result<_>>()?;
    Ok(TokenizedPrompt {
        text,
        words,
        token_ids,
        word_spans,
    })
}

/// `E_[V]` from one step's features.
pub fn visual_features(layers: &[LayerInfo], features: &[LayerFeatures]) -> Result<Matrix> {
    let available: Vec<LayerInfo> = layers
        .iter()
        .filter(|l| features.iter().any(|f| f.layer == l.id))
        .copied()
        .collect();
    let nearest = nearest_feature_layers(&available);
    if nearest.is_empty() {
        return Err(Error::State("no visual features recorded".into()));
    }
    let mut acc: Option<Matrix> = None;
    for info in &nearest {
        let f = &features.iter().find(|f| f.layer == info.id).expect("filtered").features;
        if f.rows() != info.pixels() {
            return Err(Error::dim("visual_features", "feature rows do not match layer grid"));
        }
        let on_grid = Resampler::new(info.grid(), (FEATURE_GRID, FEATURE_GRID))
            .resample_rows(&f.transpose())?
            .transpose();
        acc = Some(match acc {
            None => on_grid,
            Some(a) => a.add(&on_grid)?,
        });
    }
    let acc = acc.expect("non-empty");
    Ok(if nearest.len() > 1 {
        acc.scale(1.0 / nearest.len() as f32)
    } else {
        acc
    })
}
