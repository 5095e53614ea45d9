//! The grounding network: audio-conditioned video fusion, an encoder over the
//! joint video/query sequence, a decoder over the video rows, and four
//! per-moment prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GroundingSample;
use crate::dema::{BlockKind, DemaAttentionParams};
use crate::numerics::{Bound, LinearParams, NormParams, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_k: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_a: usize,
    /// Moments returned per sample at test time.
    pub l_m_test: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 32, d_k: 256, n_enc: 2, n_dec: 2, d_v: 32, d_q: 32, d_a: 16, l_m_test: 10 }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self { d: 8, d_k: 5, n_enc: 1, n_dec: 1, d_v: 7, d_q: 6, d_a: 4, l_m_test: 3 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [("d", self.d), ("d_k", self.d_k), ("d_v", self.d_v), ("d_q", self.d_q), ("d_a", self.d_a)];
        for (name, v) in dims {
            if v == 0 {
                return Err(format!("model.{name} must be >= 1"));
            }
        }
        if self.n_enc == 0 || self.n_dec == 0 {
            return Err("model.n_enc and model.n_dec must be >= 1".into());
        }
        if self.l_m_test == 0 {
            return Err("model.l_m_test must be >= 1".into());
        }
        Ok(())
    }
}

/// Structural switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub block: BlockKind,
    pub damping: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { block: BlockKind::Dema, damping: true }
    }
}

/// One encoder or decoder layer: `H = Norm(Block(X))`, `X' = Norm(ReLU(H) + H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub block: DemaAttentionParams,
    pub norm_block: NormParams,
    pub norm_out: NormParams,
}

impl Layer {
    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        let h = self.norm_block.forward(self.block.forward(x, p), p);
        self.norm_out.forward(h.relu().add(h), p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heads {
    pub salience: LinearParams,
    pub center: LinearParams,
    pub offset: LinearParams,
    pub width: LinearParams,
}

/// Head outputs on the tape, each `[L_v×1]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars<'t> {
    pub salience: Var<'t>,
    pub center: Var<'t>,
    pub offset: Var<'t>,
    pub width: Var<'t>,
}

impl<'t> HeadVars<'t> {
    pub fn values(&self) -> HeadOutputs {
        let col = |v: Var<'_>| v.value().into_values();
        HeadOutputs {
            salience: col(self.salience),
            center: col(self.center),
            offset: col(self.offset),
            width: col(self.width),
        }
    }
}

/// Per-moment predictions: salience `ŝ`, center `ĉ ∈ [0,1]`, offset `ĉo`, width `ŵ ∈ [0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub salience: Vec<f64>,
    pub center: Vec<f64>,
    pub offset: Vec<f64>,
    pub width: Vec<f64>,
}

impl HeadOutputs {
    pub fn len(&self) -> usize {
        self.salience.len()
    }

    pub fn is_empty(&self) -> bool {
        self.salience.is_empty()
    }
}

/// `F' = F + softmax(A Fᵀ / √d) · F`
pub fn audio_fuse<'t>(video: Var<'t>, audio: Var<'t>) -> Var<'t> {
    assert_eq!(video.rows(), audio.rows(), "audio and video lengths differ");
    assert_eq!(video.cols(), audio.cols(), "audio must be projected to the model dimension");
    let d = video.cols() as f64;
    let attn = audio.matmul_nt(video).scale(1.0 / d.sqrt()).softmax_rows();
    video.add(attn.matmul(video))
}

/// Runs the encoder stack over `[F'; T]`.
pub fn encode<'t>(layers: &[Layer], fused_video: Var<'t>, text: Var<'t>, p: &Bound<'t>) -> Var<'t> {
    layers.iter().fold(fused_video.concat_rows(text), |x, layer| layer.forward(x, p))
}

/// Runs the decoder stack over the first `video_len` encoder rows.
pub fn decode<'t>(layers: &[Layer], encoded: Var<'t>, video_len: usize, p: &Bound<'t>) -> Var<'t> {
    layers.iter().fold(encoded.slice_rows(0, video_len), |x, layer| layer.forward(x, p))
}

pub fn predict_heads<'t>(heads: &Heads, decoded: Var<'t>, p: &Bound<'t>) -> HeadVars<'t> {
    HeadVars {
        salience: heads.salience.forward(decoded, p),
        center: heads.center.forward(decoded, p).sigmoid(),
        offset: heads.offset.forward(decoded, p),
        width: heads.width.forward(decoded, p).sigmoid(),
    }
}

/// A scored temporal span in normalized video time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Span {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Self { start, end, score }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// One span per moment: `(ĉ + ĉo − ŵ/2, ĉ + ĉo + ŵ/2)` clamped to `[0, 1]`.
pub fn spans_from_heads(h: &HeadOutputs) -> Vec<Span> {
    (0..h.len())
        .map(|i| {
            let mid = h.center[i] + h.offset[i];
            let half = h.width[i] / 2.0;
            Span::new((mid - half).clamp(0.0, 1.0), (mid + half).clamp(0.0, 1.0), h.salience[i])
        })
        .collect()
}

/// Indices of the `count` highest-scoring spans; ties go to the earlier
/// start, then the smaller index.
pub fn top_moment_indices(spans: &[Span], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..spans.len()).collect();
    idx.sort_by(|&a, &b| {
        spans[b]
            .score
            .total_cmp(&spans[a].score)
            .then(spans[a].start.total_cmp(&spans[b].start))
    });
    idx.truncate(count);
    idx
}

pub fn top_moments(spans: &[Span], count: usize) -> Vec<Span> {
    top_moment_indices(spans, count).into_iter().map(|i| spans[i]).collect()
}

/// Tape values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs<'t> {
    pub encoded: Var<'t>,
    pub decoded: Var<'t>,
    pub heads: HeadVars<'t>,
    pub video_len: usize,
}

impl<'t> ModelOutputs<'t> {
    /// Encoder rows belonging to the query tokens.
    pub fn query_rows(&self) -> Var<'t> {
        self.encoded.slice_rows(self.video_len, self.encoded.rows())
    }

    pub fn video_rows(&self) -> Var<'t> {
        self.encoded.slice_rows(0, self.video_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemaFormer {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
    pub video_proj: LinearParams,
    pub audio_proj: LinearParams,
    pub text_proj: LinearParams,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub heads: Heads,
}

impl DemaFormer {
    pub fn new(config: ModelConfig, arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let video_proj = LinearParams::init(&mut store, "input.video", config.d_v, d, &mut rng);
        let audio_proj = LinearParams::init(&mut store, "input.audio", config.d_a, d, &mut rng);
        let text_proj = LinearParams::init(&mut store, "input.text", config.d_q, d, &mut rng);
        let layer = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| Layer {
            block: DemaAttentionParams::init(store, &format!("{name}.block"), d, config.d_k, arch.block, arch.damping, rng),
            norm_block: NormParams::init(store, &format!("{name}.norm_block"), d),
            norm_out: NormParams::init(store, &format!("{name}.norm_out"), d),
        };
        let encoder = (0..config.n_enc).map(|i| layer(&mut store, format!("enc.{i}"), &mut rng)).collect();
        let decoder = (0..config.n_dec).map(|i| layer(&mut store, format!("dec.{i}"), &mut rng)).collect();
        let heads = Heads {
            salience: LinearParams::init(&mut store, "head.salience", d, 1, &mut rng),
            center: LinearParams::init(&mut store, "head.center", d, 1, &mut rng),
            offset: LinearParams::init(&mut store, "head.offset", d, 1, &mut rng),
            width: LinearParams::init(&mut store, "head.width", d, 1, &mut rng),
        };
        Self { config, arch, params: store, video_proj, audio_proj, text_proj, encoder, decoder, heads }
    }

    /// Forward pass with parameters already bound on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, sample: &GroundingSample) -> ModelOutputs<'t> {
        self.forward_raw(tape, p, &sample.video, &sample.audio, &sample.text)
    }

    pub fn forward_raw<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        video: &Tensor,
        audio: &Tensor,
        text: &Tensor,
    ) -> ModelOutputs<'t> {
        let video_len = video.rows();
        let f = self.video_proj.forward(tape.constant(video.clone()), p);
        let a = self.audio_proj.forward(tape.constant(audio.clone()), p);
        let t = self.text_proj.forward(tape.constant(text.clone()), p);
        let fused = audio_fuse(f, a);
        let encoded = encode(&self.encoder, fused, t, p);
        let decoded = decode(&self.decoder, encoded, video_len, p);
        let heads = predict_heads(&self.heads, decoded, p);
        ModelOutputs { encoded, decoded, heads, video_len }
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, sample: &GroundingSample) -> HeadOutputs {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        self.forward(&tape, &p, sample).heads.values()
    }

    /// Top `l_m_test` spans for a sample, highest salience first.
    pub fn localize(&self, sample: &GroundingSample) -> (HeadOutputs, Vec<Span>) {
        let heads = self.predict(sample);
        let spans = top_moments(&spans_from_heads(&heads), self.config.l_m_test);
        (heads, spans)
    }
}
