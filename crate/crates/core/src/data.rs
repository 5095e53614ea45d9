//! Grounding samples, the synthetic generator, and the JSONL interchange
//! formats (dataset manifest and prediction files).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::model::Span;
use crate::numerics::Tensor;

/// A groundtruth moment: center, width and center offset, all in normalized time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Localization {
    pub c: f64,
    pub w: f64,
    pub co: f64,
}

impl Localization {
    pub fn span(&self) -> Span {
        let mid = self.c + self.co;
        Span::new(mid - self.w / 2.0, mid + self.w / 2.0, 0.0)
    }
}

/// One video/query instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    /// `[L_v×d_v]`
    pub video: Tensor,
    /// `[L_v×d_a]`
    pub audio: Tensor,
    /// `[L_q×d_q]`
    pub text: Tensor,
    pub gt: Vec<Localization>,
    /// Per-moment groundtruth salience, length `L_v`.
    pub salience: Vec<f64>,
}

impl GroundingSample {
    pub fn video_len(&self) -> usize {
        self.video.rows()
    }

    pub fn gt_spans(&self) -> Vec<Span> {
        self.gt.iter().map(Localization::span).collect()
    }

    /// Checks the sample invariants; `line` is only used for error reporting.
    pub fn validate(&self, line: usize) -> Result<(), DataError> {
        let bad = |field: &'static str, message: String| DataError::Invalid { line, field, message };
        let lv = self.video.rows();
        if lv == 0 || self.video.cols() == 0 {
            return Err(bad("video", "must be a non-empty matrix".into()));
        }
        if self.audio.rows() != lv || self.audio.cols() == 0 {
            return Err(bad("audio", format!("expected {lv} non-empty rows, got {}", self.audio.rows())));
        }
        if self.text.rows() == 0 || self.text.cols() == 0 {
            return Err(bad("text", "must be a non-empty matrix".into()));
        }
        if self.salience.len() != lv {
            return Err(bad("salience", format!("expected {lv} values, got {}", self.salience.len())));
        }
        for (name, t) in [("video", &self.video), ("audio", &self.audio), ("text", &self.text)] {
            if !t.is_finite() {
                return Err(bad(field_name(name), "contains a non-finite value".into()));
            }
        }
        if self.salience.iter().any(|v| !v.is_finite()) {
            return Err(bad("salience", "contains a non-finite value".into()));
        }
        if self.gt.is_empty() || self.gt.len() >= lv {
            return Err(bad("gt", format!("need between 1 and {} localizations, got {}", lv - 1, self.gt.len())));
        }
        for g in &self.gt {
            if !(0.0..=1.0).contains(&g.c) {
                return Err(bad("center", format!("{} outside [0, 1]", g.c)));
            }
            if !(0.0..=1.0).contains(&g.w) {
                return Err(bad("width", format!("{} outside [0, 1]", g.w)));
            }
            if !g.co.is_finite() {
                return Err(bad("offset", "not finite".into()));
            }
        }
        Ok(())
    }
}

fn field_name(name: &str) -> &'static str {
    match name {
        "video" => "video",
        "audio" => "audio",
        _ => "text",
    }
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub l_v: usize,
    pub l_q: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_a: usize,
    pub n_moments: usize,
    /// Strength of the query signal injected into in-span video features;
    /// also the groundtruth salience of in-span moments.
    pub snr: f64,
    /// Shortest and longest groundtruth span, in moments.
    pub min_span: usize,
    pub max_span: usize,
    /// Standard deviation of per-token noise around the query embedding.
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            l_v: 32,
            l_q: 8,
            d_v: 32,
            d_q: 32,
            d_a: 16,
            n_moments: 1,
            snr: 5.0,
            min_span: 4,
            max_span: 8,
            text_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Data shaped for [`crate::model::ModelConfig::tiny`].
    pub fn tiny() -> Self {
        Self { l_v: 6, l_q: 3, d_v: 7, d_q: 6, d_a: 4, min_span: 2, max_span: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.into()));
        if self.l_v == 0 || self.l_q == 0 || self.d_v == 0 || self.d_q == 0 || self.d_a == 0 {
            return err("all sizes must be >= 1");
        }
        if self.n_moments == 0 || self.n_moments >= self.l_v {
            return err("n_moments must satisfy 1 <= n_moments < l_v");
        }
        if !(self.snr >= 0.0) {
            return err("snr must be >= 0");
        }
        if self.min_span == 0 || self.min_span > self.max_span || self.max_span > self.l_v {
            return err("span lengths must satisfy 1 <= min_span <= max_span <= l_v");
        }
        if !(self.text_noise >= 0.0) {
            return err("text_noise must be >= 0");
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Generator for the synthetic grounding task.
///
/// Every dataset shares one random projection from query space into video
/// feature space; a sample's query embedding mapped through it (unit norm)
/// is its signature, and moments inside groundtruth spans carry
/// `snr × signature` on top of standard-normal background features.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: SynthConfig,
    /// `[d_v×d_q]`
    projection: Tensor,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (cfg.d_q as f64).sqrt();
        let proj = (0..cfg.d_v * cfg.d_q).map(|_| scale * normal(&mut rng)).collect();
        Ok(Self { projection: Tensor::new(vec![cfg.d_v, cfg.d_q], proj), cfg })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Unit-norm video-space direction for a query embedding.
    pub fn signature(&self, query: &[f64]) -> Vec<f64> {
        let (dv, dq) = (self.cfg.d_v, self.cfg.d_q);
        let mut s: Vec<f64> = (0..dv).map(|r| (0..dq).map(|c| self.projection.get(r, c) * query[c]).sum()).collect();
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            s.iter_mut().for_each(|v| *v /= norm);
        }
        s
    }

    /// The `index`-th sample; depends only on the config seed and `index`.
    pub fn sample(&self, index: usize) -> Result<(GroundingSample, Vec<f64>), DataError> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);

        let query: Vec<f64> = (0..cfg.d_q).map(|_| normal(&mut rng)).collect();
        let text_rows: Vec<Vec<f64>> = (0..cfg.l_q)
            .map(|_| query.iter().map(|q| q + cfg.text_noise * normal(&mut rng)).collect())
            .collect();
        let spans = self.place_spans(&mut rng)?;
        let signature = self.signature(&query);

        let mut salience = vec![0.0; cfg.l_v];
        let mut video: Vec<Vec<f64>> =
            (0..cfg.l_v).map(|_| (0..cfg.d_v).map(|_| normal(&mut rng)).collect()).collect();
        for &(start, len) in &spans {
            for i in start..start + len {
                salience[i] = cfg.snr;
                for (v, s) in video[i].iter_mut().zip(&signature) {
                    *v += cfg.snr * s;
                }
            }
        }
        let audio: Vec<Vec<f64>> = (0..cfg.l_v).map(|_| (0..cfg.d_a).map(|_| normal(&mut rng)).collect()).collect();
        let lv = cfg.l_v as f64;
        let gt = spans
            .iter()
            .map(|&(start, len)| Localization { c: (start as f64 + len as f64 / 2.0) / lv, w: len as f64 / lv, co: 0.0 })
            .collect();
        let sample = GroundingSample {
            id: format!("synth-{}-{index}", cfg.seed),
            video: Tensor::from_rows(&video),
            audio: Tensor::from_rows(&audio),
            text: Tensor::from_rows(&text_rows),
            gt,
            salience,
        };
        Ok((sample, signature))
    }

    /// Non-overlapping `(start, len)` spans sorted by start.
    fn place_spans(&self, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>, DataError> {
        let cfg = &self.cfg;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut spans: Vec<(usize, usize)> = Vec::with_capacity(cfg.n_moments);
            let mut ok = true;
            for _ in 0..cfg.n_moments {
                let len = rng.random_range(cfg.min_span..=cfg.max_span);
                let start = rng.random_range(0..=cfg.l_v - len);
                if spans.iter().any(|&(s, l)| start < s + l && s < start + len) {
                    ok = false;
                    break;
                }
                spans.push((start, len));
            }
            if ok {
                spans.sort_unstable();
                return Ok(spans);
            }
        }
        Err(DataError::SpanPlacement { n_moments: cfg.n_moments, len: cfg.l_v, attempts: MAX_PLACEMENT_ATTEMPTS })
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n_samples` synthetic samples from `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig, n_samples: usize) -> Result<Vec<GroundingSample>, DataError> {
    let synth = Synthesizer::new(cfg.clone())?;
    (0..n_samples).map(|i| synth.sample(i).map(|(s, _)| s)).collect()
}

/// Deterministic shuffle-and-split; the first `train_frac` share goes to training.
pub fn split_train_test(
    samples: &[GroundingSample],
    train_frac: f64,
    seed: u64,
) -> (Vec<GroundingSample>, Vec<GroundingSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((samples.len() as f64) * train_frac).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    video: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    gt: Vec<Localization>,
    salience: Vec<f64>,
}

fn matrix(rows: Vec<Vec<f64>>, line: usize, field: &'static str) -> Result<Tensor, DataError> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(DataError::Invalid { line, field, message: "ragged rows".into() });
    }
    let r = rows.len();
    Ok(Tensor::new(vec![r, c], rows.into_iter().flatten().collect()))
}

/// Parses manifest text, one JSON sample per non-blank line.
pub fn parse_manifest(text: &str) -> Result<Vec<GroundingSample>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(raw).map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        let sample = GroundingSample {
            id: m.id,
            video: matrix(m.video, line, "video")?,
            audio: matrix(m.audio, line, "audio")?,
            text: matrix(m.text, line, "text")?,
            gt: m.gt,
            salience: m.salience,
        };
        sample.validate(line)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<GroundingSample>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_manifest(&text)
}

pub fn manifest_line(s: &GroundingSample) -> String {
    let line = ManifestLine {
        id: s.id.clone(),
        video: s.video.to_rows(),
        audio: s.audio.to_rows(),
        text: s.text.to_rows(),
        gt: s.gt.clone(),
        salience: s.salience.clone(),
    };
    serde_json::to_string(&line).expect("manifest line serializes")
}

pub fn save_manifest(samples: &[GroundingSample], path: &Path) -> Result<(), DataError> {
    write_lines(path, samples.iter().map(manifest_line))
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Real number with 17 significant digits.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// One prediction line: `{"id": …, "moments": [[start, end, score], …]}`,
/// moments ordered by score, highest first.
pub fn prediction_line(id: &str, spans: &[Span]) -> String {
    let mut sorted = spans.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut s = String::new();
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(id).expect("string serializes"));
    s.push_str(",\"moments\":[");
    for (i, m) in sorted.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "[{},{},{}]", fmt_real(m.start), fmt_real(m.end), fmt_real(m.score));
    }
    s.push_str("]}");
    s
}

pub fn save_predictions(samples: &[GroundingSample], spans: &[Vec<Span>], path: &Path) -> Result<(), DataError> {
    assert_eq!(samples.len(), spans.len(), "one prediction list per sample");
    write_lines(path, samples.iter().zip(spans).map(|(s, p)| prediction_line(&s.id, p)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    id: String,
    moments: Vec<[f64; 3]>,
}

/// Reads a prediction file back into `(id, spans)` pairs.
pub fn load_predictions(path: &Path) -> Result<Vec<(String, Vec<Span>)>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(raw).map_err(|e| DataError::Parse { line: i + 1, message: e.to_string() })?;
        out.push((p.id, p.moments.iter().map(|m| Span::new(m[0], m[1], m[2])).collect()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rank_k_at_mu;

    #[test]
    fn zero_snr_has_no_salience() {
        let cfg = SynthConfig { snr: 0.0, ..SynthConfig::default() };
        for s in gen_synthetic(&cfg, 5).unwrap() {
            assert!(s.salience.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_moment_gives_one_contiguous_span() {
        let cfg = SynthConfig { l_v: 16, n_moments: 1, min_span: 2, max_span: 5, ..SynthConfig::default() };
        for s in gen_synthetic(&cfg, 50).unwrap() {
            let pos: Vec<usize> = (0..16).filter(|&i| s.salience[i] > 0.0).collect();
            assert!(!pos.is_empty());
            assert_eq!(pos.last().unwrap() - pos[0] + 1, pos.len());
            let g = s.gt[0];
            assert!((g.c * 16.0 - (pos[0] as f64 + pos.len() as f64 / 2.0)).abs() < 1e-12);
            assert!((g.w * 16.0 - pos.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_spans_satisfy_invariants() {
        let cfg = SynthConfig { l_v: 24, n_moments: 2, min_span: 2, max_span: 6, ..SynthConfig::default() };
        let samples = gen_synthetic(&cfg, 1000).unwrap();
        for (i, s) in samples.iter().enumerate() {
            s.validate(i + 1).unwrap();
            assert_eq!(s.gt.len(), 2);
            let spans = s.gt_spans();
            for sp in &spans {
                assert!(sp.start >= -1e-12 && sp.end <= 1.0 + 1e-12);
            }
            assert!(spans[0].end <= spans[1].start + 1e-12, "overlap in sample {i}");
            assert_eq!(s.gt[0].co, 0.0);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig { seed: 4, ..SynthConfig::default() };
        assert_eq!(gen_synthetic(&cfg, 3).unwrap(), gen_synthetic(&cfg, 3).unwrap());
        let other = SynthConfig { seed: 5, ..cfg.clone() };
        assert_ne!(gen_synthetic(&cfg, 1).unwrap(), gen_synthetic(&other, 1).unwrap());
    }

    #[test]
    fn impossible_placement_fails() {
        let cfg = SynthConfig { l_v: 10, n_moments: 3, min_span: 4, max_span: 4, ..SynthConfig::default() };
        assert!(matches!(gen_synthetic(&cfg, 1), Err(DataError::SpanPlacement { .. })));
    }

    #[test]
    fn correlation_detector_solves_high_snr_task() {
        let cfg = SynthConfig { snr: 5.0, seed: 21, ..SynthConfig::default() };
        let synth = Synthesizer::new(cfg.clone()).unwrap();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for i in 0..100 {
            let (s, sig) = synth.sample(i).unwrap();
            let score: Vec<f64> = (0..cfg.l_v).map(|r| s.video.row(r).iter().zip(&sig).map(|(a, b)| a * b).sum()).collect();
            // span maximizing the summed margin of correlation over half the injected strength
            let mut best = (0, 0, f64::NEG_INFINITY);
            for a in 0..cfg.l_v {
                let mut acc = 0.0;
                for b in a..cfg.l_v {
                    acc += score[b] - cfg.snr / 2.0;
                    if acc > best.2 {
                        best = (a, b + 1, acc);
                    }
                }
            }
            let span = Span::new(best.0 as f64 / cfg.l_v as f64, best.1 as f64 / cfg.l_v as f64, 1.0);
            preds.push(vec![span]);
            gts.push(s.gt_spans());
        }
        assert_eq!(rank_k_at_mu(&preds, &gts, 1, 0.5), 1.0);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let cfg = SynthConfig { l_v: 8, l_q: 3, d_v: 4, d_q: 3, d_a: 2, min_span: 2, max_span: 3, ..SynthConfig::default() };
        let samples = gen_synthetic(&cfg, 4).unwrap();
        save_manifest(&samples, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), samples);
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn invalid_width_is_rejected_by_name() {
        let cfg = SynthConfig { l_v: 8, l_q: 2, d_v: 2, d_q: 2, d_a: 2, min_span: 2, max_span: 3, ..SynthConfig::default() };
        let mut s = gen_synthetic(&cfg, 1).unwrap().remove(0);
        s.gt[0].w = 1.5;
        let text = format!("{}\n{}\n", manifest_line(&gen_synthetic(&cfg, 1).unwrap()[0]), manifest_line(&s));
        match parse_manifest(&text) {
            Err(DataError::Invalid { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "width");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_manifest("{not json}\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1:"));
    }

    #[test]
    fn predictions_round_trip_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let cfg = SynthConfig { l_v: 8, l_q: 2, d_v: 2, d_q: 2, d_a: 2, min_span: 2, max_span: 3, ..SynthConfig::default() };
        let samples = gen_synthetic(&cfg, 2).unwrap();
        let spans = vec![vec![Span::new(0.1, 0.7, 1.0 / 3.0), Span::new(0.0, 0.2, 2.0f64.sqrt())], vec![]];
        save_predictions(&samples, &spans, &path).unwrap();
        let back = load_predictions(&path).unwrap();
        assert_eq!(back[0].0, samples[0].id);
        // reordered by score
        assert_eq!(back[0].1, vec![spans[0][1], spans[0][0]]);
        assert!(back[1].1.is_empty());
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("\"moments\":[]}"));
        assert!(text.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let cfg = SynthConfig { l_v: 8, l_q: 2, d_v: 2, d_q: 2, d_a: 2, min_span: 2, max_span: 3, ..SynthConfig::default() };
        let samples = gen_synthetic(&cfg, 10).unwrap();
        let (a, b) = split_train_test(&samples, 0.8, 3);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_train_test(&samples, 0.8, 3), (a.clone(), b.clone()));
        assert!(b.iter().all(|s| !a.iter().any(|t| t.id == s.id)));
    }
}
