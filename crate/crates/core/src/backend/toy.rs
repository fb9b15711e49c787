//! A small, fully deterministic latent-diffusion surrogate.
//!
//! The latent is 32×32×4. Token embeddings come from a seed-fixed random
//! table indexed by token id (width 32). Two cross-attention layers, one at
//! 32×32 and one at 16×16 with a single head each, attend from pixel queries
//! (3×3 latent patches plus a positional code, linearly projected) to the
//! padded 77-token context. The value mix of both layers is projected to the
//! four latent channels and squashed into a clean-latent estimate, from
//! which the noise prediction follows. Sampling is η = 0 on the linear
//! schedule `ᾱ_t = 1 − t/(T+1)`.

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sampler::{cfg_combine, reverse_step, NoiseSchedule};
use super::{Backend, Branch, LayerFeatures, LayerInfo, LayerMaps, SessionSpec, StepOutput};
use crate::align::{fnv1a, split_words, Vocabulary, WordVocab, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_transposed, softmax_in_place, Matrix, Resampler};

pub const LATENT_SIDE: usize = 32;
pub const LATENT_CHANNELS: usize = 4;
pub const WIDTH: usize = 32;

const PATCH_DIM: usize = 9 * LATENT_CHANNELS;
const POS_DIM: usize = 8;
const IN_DIM: usize = PATCH_DIM + POS_DIM;
const MODEL_SEED: u64 = 0xADA9_ED17;
const QUERY_GAIN: f32 = 2.5;
const OUTPUT_GAIN: f32 = 1.5;
const X0_SCALE: f64 = 0.5;

// Approximate latent-to-RGB factors of a Stable Diffusion VAE.
const DECODER: [[f32; LATENT_CHANNELS]; 3] = [
    [0.298, 0.187, -0.158, -0.184],
    [0.207, 0.286, 0.189, -0.271],
    [0.208, 0.173, 0.264, -0.473],
];

/// Six-character sub-word chunks hashed into a CLIP-sized id space.
#[derive(Debug, Clone, Default)]
pub struct ToyVocab;

impl ToyVocab {
    pub const BOS: u32 = 49_406;
    pub const EOS: u32 = 49_407;
}

impl Vocabulary for ToyVocab {
    fn encode_word(&self, word: &str) -> Vec<u32> {
        word.to_lowercase()
            .as_bytes()
            .chunks(6)
            .map(|c| fnv1a(c) % 49_000 + 1)
            .collect()
    }

    fn bos(&self) -> Option<u32> {
        Some(Self::BOS)
    }

    fn eos(&self) -> Option<u32> {
        Some(Self::EOS)
    }

    fn pad(&self) -> u32 {
        Self::EOS
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f32 = StandardNormal.sample(rng);
            v * std
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

struct ToyLayer {
    info: LayerInfo,
    w_q: Matrix,
    pos: Matrix,
    down: Resampler,
    up: Resampler,
}

struct Weights {
    layers: Vec<ToyLayer>,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    token_pos: Matrix,
}

impl Weights {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(MODEL_SEED);
        let layers = [(0u16, 32usize), (1, 16)]
            .into_iter()
            .map(|(id, side)| {
                let w_q = gaussian(&mut rng, IN_DIM, WIDTH, QUERY_GAIN / (IN_DIM as f32).sqrt());
                ToyLayer {
                    info: LayerInfo {
                        id,
                        height: side as u16,
                        width: side as u16,
                        heads: 1,
                    },
                    w_q,
                    pos: positional_code(side),
                    down: Resampler::new((LATENT_SIDE, LATENT_SIDE), (side, side)),
                    up: Resampler::new((side, side), (LATENT_SIDE, LATENT_SIDE)),
                }
            })
            .collect();
        let inv = 1.0 / (WIDTH as f32).sqrt();
        let w_k = gaussian(&mut rng, WIDTH, WIDTH, inv);
        let w_v = gaussian(&mut rng, WIDTH, WIDTH, inv);
        let w_o = gaussian(&mut rng, WIDTH, LATENT_CHANNELS, inv);
        let token_pos = gaussian(&mut rng, MAX_TOKENS, WIDTH, 0.5);
        Self {
            layers,
            w_k,
            w_v,
            w_o,
            token_pos,
        }
    }

    fn catalog(&self) -> Vec<LayerInfo> {
        self.layers.iter().map(|l| l.info).collect()
    }

    fn token_embedding(id: u32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(MODEL_SEED ^ u64::from(id).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..WIDTH).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn context(&self, ids: &[u32]) -> Context {
        let mut emb = Matrix::zeros(ids.len(), WIDTH);
        for (p, &id) in ids.iter().enumerate() {
            let e = Self::token_embedding(id);
            for ((o, v), q) in emb.row_mut(p).iter_mut().zip(e).zip(self.token_pos.row(p)) {
                *o = v + q;
            }
        }
        Context {
            keys: matmul(&emb, &self.w_k).expect("shapes"),
            values: matmul(&emb, &self.w_v).expect("shapes"),
        }
    }
}

fn positional_code(side: usize) -> Matrix {
    let mut m = Matrix::zeros(side * side, POS_DIM);
    for y in 0..side {
        for x in 0..side {
            let fx = (x as f64 + 0.5) / side as f64;
            let fy = (y as f64 + 0.5) / side as f64;
            let row = m.row_mut(y * side + x);
            for (k, f) in [1.0f64, 2.0].into_iter().enumerate() {
                let a = std::f64::consts::PI * f;
                row[4 * k] = (a * fx).sin() as f32;
                row[4 * k + 1] = (a * fx).cos() as f32;
                row[4 * k + 2] = (a * fy).sin() as f32;
                row[4 * k + 3] = (a * fy).cos() as f32;
            }
        }
    }
    m
}

struct Context {
    keys: Matrix,
    values: Matrix,
}

struct Session {
    spec: SessionSpec,
    schedule: NoiseSchedule,
    original: Context,
    edit: Context,
    null: Context,
    latents: [Matrix; 2],
    next_t: [usize; 2],
}

pub struct ToyBackend {
    vocab: Box<dyn Vocabulary + Send>,
    weights: Weights,
    session: Option<Session>,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyBackend {
    pub fn new() -> Self {
        Self::with_vocabulary(ToyVocab)
    }

    /// Tokenizes one token per word, matching what a remote client assumes.
    pub fn with_word_vocab() -> Self {
        Self::with_vocabulary(WordVocab)
    }

    pub fn with_vocabulary(vocab: impl Vocabulary + Send + 'static) -> Self {
        Self {
            vocab: Box::new(vocab),
            weights: Weights::build(),
            session: None,
        }
    }

    /// Current latent of a branch (`pixels × channels`).
    pub fn latent(&self, branch: Branch) -> Option<&Matrix> {
        self.session.as_ref().map(|s| &s.latents[usize::from(branch.code())])
    }

    /// Deterministic `N(0, I)` latent for a seed.
    pub fn initial_latent(seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian(&mut rng, LATENT_SIDE * LATENT_SIDE, LATENT_CHANNELS, 1.0)
    }

    fn context_ids(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(MAX_TOKENS);
        ids.extend(self.vocab.bos());
        for w in split_words(prompt) {
            ids.extend(self.vocab.encode_word(&w));
        }
        ids.extend(self.vocab.eos());
        if ids.len() > MAX_TOKENS {
            return Err(Error::Length {
                tokens: ids.len(),
                limit: MAX_TOKENS,
            });
        }
        ids.resize(MAX_TOKENS, self.vocab.pad());
        Ok(ids)
    }

    /// Query features `pixels × WIDTH` of a layer at the given latent.
    fn queries(&self, layer: &ToyLayer, z: &Matrix) -> Matrix {
        let side = usize::from(layer.info.width);
        let zl = if layer.down.is_identity() {
            z.clone()
        } else {
            layer
                .down
                .resample_rows(&z.transpose())
                .expect("latent grid")
                .transpose()
        };
        let mut input = Matrix::zeros(side * side, IN_DIM);
        for y in 0..side {
            for x in 0..side {
                let row = input.row_mut(y * side + x);
                let mut k = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, side as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, side as i64 - 1) as usize;
                        row[k..k + LATENT_CHANNELS].copy_from_slice(zl.row(yy * side + xx));
                        k += LATENT_CHANNELS;
                    }
                }
                row[PATCH_DIM..].copy_from_slice(layer.pos.row(y * side + x));
            }
        }
        matmul(&input, &layer.w_q).expect("shapes")
    }

    fn attention(queries: &Matrix, ctx: &Context) -> Matrix {
        let mut logits = matmul_transposed(queries, &ctx.keys).expect("shapes");
        let inv = 1.0 / (WIDTH as f32).sqrt();
        logits.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        logits
    }

    /// Clean-latent estimate from per-layer attention maps.
    fn predict_x0(&self, maps: &[&Matrix], ctx: &Context) -> Matrix {
        let n = LATENT_SIDE * LATENT_SIDE;
        let mut acc = Matrix::zeros(LATENT_CHANNELS, n);
        for (layer, attn) in self.weights.layers.iter().zip(maps) {
            let mixed = matmul(attn, &ctx.values).expect("shapes");
            let proj = matmul(&mixed, &self.weights.w_o).expect("shapes").transpose();
            let up = layer.up.resample_rows(&proj).expect("layer grid");
            for (a, v) in acc.as_mut_slice().iter_mut().zip(up.as_slice()) {
                *a += v;
            }
        }
        acc.transpose()
            .map(|v| (X0_SCALE * (f64::from(v * OUTPUT_GAIN)).tanh()) as f32)
    }

    fn noise_from_x0(z: &Matrix, x0: &Matrix, alpha_bar: f64) -> Matrix {
        let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        let data = z
            .as_slice()
            .iter()
            .zip(x0.as_slice())
            .map(|(&zt, &x)| ((f64::from(zt) - s * f64::from(x)) / n) as f32)
            .collect();
        Matrix::from_vec(z.rows(), z.cols(), data).expect("same shape")
    }

    fn validate_injection(&self, injected: &[LayerMaps]) -> Result<()> {
        for inj in injected {
            let layer = self
                .weights
                .layers
                .iter()
                .find(|l| l.info.id == inj.layer)
                .ok_or_else(|| Error::dim("toy_step", format!("unknown layer {}", inj.layer)))?;
            if inj.heads.len() != usize::from(layer.info.heads) {
                return Err(Error::dim(
                    "toy_step",
                    format!(
                        "layer {} expects {} heads, got {}",
                        inj.layer,
                        layer.info.heads,
                        inj.heads.len()
                    ),
                ));
            }
            for h in &inj.heads {
                if h.shape() != (layer.info.pixels(), MAX_TOKENS) {
                    return Err(Error::dim(
                        "toy_step",
                        format!(
                            "layer {} map must be {}x{}, got {}x{}",
                            inj.layer,
                            layer.info.pixels(),
                            MAX_TOKENS,
                            h.rows(),
                            h.cols()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Backend for ToyBackend {
    fn vocabulary(&self) -> &dyn Vocabulary {
        self.vocab.as_ref()
    }

    fn init(&mut self, spec: &SessionSpec) -> Result<Vec<LayerInfo>> {
        let schedule = NoiseSchedule::linear(spec.steps)?;
        let original = self.weights.context(&self.context_ids(&spec.prompt)?);
        let edit = self.weights.context(&self.context_ids(&spec.edit)?);
        let null = self.weights.context(&self.context_ids(&spec.null_prompt)?);
        let z = Self::initial_latent(spec.seed);
        self.session = Some(Session {
            spec: spec.clone(),
            schedule,
            original,
            edit,
            null,
            latents: [z.clone(), z],
            next_t: [spec.steps; 2],
        });
        Ok(self.weights.catalog())
    }

    fn step(&mut self, t: usize, branch: Branch, injected: &[LayerMaps]) -> Result<StepOutput> {
        self.validate_injection(injected)?;
        let session = self
            .session
            .as_ref()
            .ok_or_else(|| Error::State("step before init".into()))?;
        let b = usize::from(branch.code());
        if t == 0 || t != session.next_t[b] {
            return Err(Error::State(format!(
                "expected step {} for {branch:?}, got {t}",
                session.next_t[b]
            )));
        }
        let z = &session.latents[b];
        let ctx = match branch {
            Branch::Original => &session.original,
            Branch::Edit => &session.edit,
        };

        let queries: Vec<Matrix> = self.weights.layers.iter().map(|l| self.queries(l, z)).collect();
        let computed: Vec<Matrix> = queries.iter().map(|q| Self::attention(q, ctx)).collect();
        let used: Vec<&Matrix> = self
            .weights
            .layers
            .iter()
            .zip(&computed)
            .map(|(l, m)| {
                injected
                    .iter()
                    .find(|i| i.layer == l.info.id)
                    .map_or(m, |i| &i.heads[0])
            })
            .collect();
        let null_maps: Vec<Matrix> = queries.iter().map(|q| Self::attention(q, &session.null)).collect();
        let null_refs: Vec<&Matrix> = null_maps.iter().collect();

        let alpha_bar = session.schedule.alpha_bar(t)?;
        let eps_c = Self::noise_from_x0(z, &self.predict_x0(&used, ctx), alpha_bar);
        let eps_u = Self::noise_from_x0(z, &self.predict_x0(&null_refs, &session.null), alpha_bar);
        let noise_pred = cfg_combine(&eps_c, &eps_u, session.spec.guidance)?;
        let next = reverse_step(z, &noise_pred, t, &session.schedule)?;

        let maps = self
            .weights
            .layers
            .iter()
            .zip(computed)
            .map(|(l, m)| LayerMaps {
                layer: l.info.id,
                heads: vec![m],
            })
            .collect();
        let features = self
            .weights
            .layers
            .iter()
            .zip(queries)
            .filter(|(l, _)| l.info.pixels() == LATENT_SIDE * LATENT_SIDE)
            .map(|(l, q)| LayerFeatures {
                layer: l.info.id,
                features: q,
            })
            .collect();

        let session = self.session.as_mut().expect("checked");
        session.latents[b] = next;
        session.next_t[b] = t - 1;
        Ok(StepOutput {
            noise_pred,
            maps,
            features,
        })
    }

    fn decode(&mut self, branch: Branch) -> Result<RgbImage> {
        let session = self
            .session
            .as_ref()
            .ok_or_else(|| Error::State("decode before init".into()))?;
        let b = usize::from(branch.code());
        if session.next_t[b] != 0 {
            return Err(Error::State(format!(
                "{branch:?} branch still has {} steps to run",
                session.next_t[b]
            )));
        }
        Ok(decode_latent(&session.latents[b]))
    }

    fn close(&mut self) -> Result<()> {
        self.session = None;
        Ok(())
    }
}

/// Linear latent-to-RGB map around mid-gray.
pub fn decode_latent(z: &Matrix) -> RgbImage {
    let side = LATENT_SIDE as u32;
    RgbImage::from_fn(side, side, |x, y| {
        let px = z.row((y * side + x) as usize);
        let mut rgb = [0u8; 3];
        for (o, w) in rgb.iter_mut().zip(DECODER) {
            let v: f32 = w.iter().zip(px).map(|(a, b)| a * b).sum();
            *o = (127.5 + 64.0 * v).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(rgb)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(prompt: &str, edit: &str, steps: usize, seed: u64) -> SessionSpec {
        SessionSpec {
            steps,
            guidance: 7.5,
            seed,
            prompt: prompt.into(),
            edit: edit.into(),
            null_prompt: String::new(),
        }
    }

    #[test]
    fn catalog_and_row_stochastic_maps() {
        let mut b = ToyBackend::new();
        let cat = b.init(&spec("a dog standing", "a dog sitting", 3, 1)).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat[0].grid(), (32, 32));
        assert_eq!(cat[1].grid(), (16, 16));
        let out = b.step(3, Branch::Original, &[]).unwrap();
        assert_eq!(out.noise_pred.shape(), (1024, 4));
        for lm in &out.maps {
            for h in &lm.heads {
                for s in h.row_sums() {
                    assert!((s - 1.0).abs() <= 1e-5);
                }
            }
        }
        assert_eq!(out.features.len(), 1);
        assert_eq!(out.features[0].features.shape(), (1024, WIDTH));
    }

    #[test]
    fn deterministic_steps() {
        let run = || {
            let mut b = ToyBackend::new();
            b.init(&spec("a cat", "a dog", 2, 9)).unwrap();
            b.step(2, Branch::Edit, &[]).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn injecting_computed_maps_is_identity() {
        let s = spec("a red car", "a blue car", 2, 3);
        let mut a = ToyBackend::new();
        a.init(&s).unwrap();
        let plain = a.step(2, Branch::Edit, &[]).unwrap();
        let mut b = ToyBackend::new();
        b.init(&s).unwrap();
        let hooked = b.step(2, Branch::Edit, &plain.maps).unwrap();
        assert_eq!(plain, hooked);
        assert_eq!(a.latent(Branch::Edit), b.latent(Branch::Edit));
    }

    #[test]
    fn one_hot_injection_selects_value_rows() {
        let mut b = ToyBackend::new();
        b.init(&spec("a cat", "a cat", 1, 0)).unwrap();
        let ids = b.context_ids("a cat").unwrap();
        let ctx = b.weights.context(&ids);
        let mut one_hot = Matrix::zeros(1024, MAX_TOKENS);
        for p in 0..1024 {
            one_hot.set(p, p % 5, 1.0);
        }
        let mixed = matmul(&one_hot, &ctx.values).unwrap();
        for p in [0usize, 1, 7, 1023] {
            assert_eq!(mixed.row(p), ctx.values.row(p % 5));
        }
    }

    #[test]
    fn injection_shape_errors() {
        let mut b = ToyBackend::new();
        b.init(&spec("a cat", "a dog", 2, 0)).unwrap();
        let bad = LayerMaps {
            layer: 0,
            heads: vec![Matrix::zeros(256, MAX_TOKENS)],
        };
        assert!(matches!(b.step(2, Branch::Edit, &[bad]), Err(Error::Dimension { .. })));
        let unknown = LayerMaps {
            layer: 9,
            heads: vec![Matrix::zeros(1024, MAX_TOKENS)],
        };
        assert!(b.step(2, Branch::Edit, &[unknown]).is_err());
    }

    #[test]
    fn ordering_and_decode_state() {
        let mut b = ToyBackend::new();
        assert!(b.step(1, Branch::Original, &[]).is_err());
        b.init(&spec("a cat", "a dog", 2, 0)).unwrap();
        assert!(matches!(b.step(1, Branch::Original, &[]), Err(Error::State(_))));
        b.step(2, Branch::Original, &[]).unwrap();
        assert!(matches!(b.decode(Branch::Original), Err(Error::State(_))));
        b.step(1, Branch::Original, &[]).unwrap();
        let img = b.decode(Branch::Original).unwrap();
        assert_eq!(img.dimensions(), (32, 32));
        assert!(b.decode(Branch::Edit).is_err());
    }

    #[test]
    fn zero_latent_decodes_mid_gray() {
        let img = decode_latent(&Matrix::zeros(1024, 4));
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
        let z = ToyBackend::initial_latent(5);
        assert_eq!(decode_latent(&z), decode_latent(&z));
    }

    #[test]
    fn vocab_splits_long_words() {
        let v = ToyVocab;
        assert_eq!(v.encode_word("chocolate").len(), 2);
        assert_eq!(v.encode_word("standing").len(), v.encode_word("sitting").len());
        assert_eq!(v.encode_word("Dog"), v.encode_word("dog"));
    }
}
