//! Target assignment, losses, Adam, and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroundingSample, Localization};
use crate::ebm::{alpha_neg, energy_rows, nll_loss, sample_negatives, select_positives, EbmConfig, EnergyFn, EnergyKind};
use crate::error::{NumericsError, TrainError};
use crate::metrics::{evaluate, rank_k_at_mu, EvalConfig, MetricsReport, SampleEval};
use crate::data::{gen_synthetic, SynthConfig};
use crate::dema::{DemaAttentionParams, DemaParams};
use crate::model::{Architecture, DemaFormer, HeadOutputs, HeadVars, Layer, ModelConfig};
use crate::numerics::{
    finite_diff_check, objective, Bound, GradCheckReport, NormParams, ParamStore, Tape, Tensor, Var, DEFAULT_FD_STEP,
};

/// Which residual the offset term regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetResidual {
    /// `|co − ĉo|`
    #[default]
    Direct,
    /// `|co − (ĉo − ĉ)|`
    CenterRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_nll: f64,
    /// Set from the run's ablation flags rather than the `loss` section.
    #[serde(skip)]
    pub offset: OffsetResidual,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0 / 3.0, lambda2: 0.01, lambda3: 1.0 / 3.0, lambda_nll: 0.1, offset: OffsetResidual::Direct }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_nll", self.lambda_nll),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss.{name} must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

/// Decoder position matched to each groundtruth, plus a per-position flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetAssignment {
    pub positions: Vec<usize>,
    pub matched: Vec<bool>,
}

/// Moment indices a localization overlaps.
fn covered(g: &Localization, len: usize) -> std::ops::Range<usize> {
    let s = g.span();
    let lo = (s.start.max(0.0) * len as f64).floor() as usize;
    let hi = ((s.end.min(1.0) * len as f64).ceil() as usize).min(len);
    lo.min(len)..hi.max(lo.min(len))
}

/// Matches groundtruth `i` to `floor(c_i · L_v)`; a taken slot moves to the
/// nearest free moment inside the groundtruth span, else the nearest free
/// moment overall. Distance ties go to the lower index.
pub fn assign_targets(gts: &[Localization], len: usize) -> TargetAssignment {
    assert!(gts.len() <= len, "{} groundtruths exceed {len} positions", gts.len());
    let mut matched = vec![false; len];
    let mut positions = Vec::with_capacity(gts.len());
    for g in gts {
        let home = ((g.c * len as f64).floor().max(0.0) as usize).min(len - 1);
        let pos = if !matched[home] {
            home
        } else {
            let inside = covered(g, len);
            let nearest = |allowed: &dyn Fn(usize) -> bool| {
                (1..len).find_map(|r| {
                    [home.checked_sub(r), Some(home + r)]
                        .into_iter()
                        .flatten()
                        .find(|&i| i < len && !matched[i] && allowed(i))
                })
            };
            nearest(&|i| inside.contains(&i)).or_else(|| nearest(&|_| true)).expect("a free position exists")
        };
        matched[pos] = true;
        positions.push(pos);
    }
    TargetAssignment { positions, matched }
}

/// Regression targets gathered at matched positions.
struct Targets<'t> {
    s: Var<'t>,
    c: Var<'t>,
    w: Var<'t>,
    co: Var<'t>,
    c_true: Var<'t>,
    w_true: Var<'t>,
    co_true: Var<'t>,
}

fn gather_targets<'t>(heads: &HeadVars<'t>, gts: &[Localization], a: &TargetAssignment) -> Targets<'t> {
    let tape = heads.salience.tape();
    let col = |f: fn(&Localization) -> f64| tape.constant(Tensor::vector(gts.iter().map(f).collect()));
    Targets {
        s: heads.salience.gather(&a.positions),
        c: heads.center.gather(&a.positions),
        w: heads.width.gather(&a.positions),
        co: heads.offset.gather(&a.positions),
        c_true: col(|g| g.c),
        w_true: col(|g| g.w),
        co_true: col(|g| g.co),
    }
}

fn offset_residual<'t>(t: &Targets<'t>, variant: OffsetResidual) -> Var<'t> {
    match variant {
        OffsetResidual::Direct => t.co_true.sub(t.co).abs(),
        OffsetResidual::CenterRelative => t.co_true.sub(t.co.sub(t.c)).abs(),
    }
}

/// `−(1/L_m) Σ (ŝ − λ₁|c−ĉ| − λ₂|w−ŵ| − λ₃ r_co)` over matched positions.
/// `None` when there is no groundtruth.
pub fn matching_loss<'t>(
    heads: &HeadVars<'t>,
    gts: &[Localization],
    a: &TargetAssignment,
    w: &LossWeights,
) -> Option<Var<'t>> {
    if gts.is_empty() {
        return None;
    }
    let t = gather_targets(heads, gts, a);
    let per = t
        .s
        .sub(t.c_true.sub(t.c).abs().scale(w.lambda1))
        .sub(t.w_true.sub(t.w).abs().scale(w.lambda2))
        .sub(offset_residual(&t, w.offset).scale(w.lambda3));
    Some(per.mean().scale(-1.0))
}

/// `(L_s, L_c, L_w, L_co)` means over matched positions.
pub fn component_losses<'t>(
    heads: &HeadVars<'t>,
    gts: &[Localization],
    a: &TargetAssignment,
    variant: OffsetResidual,
) -> Option<[Var<'t>; 4]> {
    if gts.is_empty() {
        return None;
    }
    let t = gather_targets(heads, gts, a);
    Some([
        t.s.mean().scale(-1.0),
        t.c_true.sub(t.c).abs().mean(),
        t.w_true.sub(t.w).abs().mean(),
        offset_residual(&t, variant).mean(),
    ])
}

pub fn total_loss(l_match: f64, l_nll: f64, lambda_nll: f64) -> f64 {
    l_match + lambda_nll * l_nll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One Adam update with decoupled weight decay. Returns `false` and leaves
/// everything untouched when a gradient is not finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, cfg: &AdamConfig) -> bool {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].values_mut(), state.v[i].values_mut());
        for (((x, &g), mi), vi) in p.values_mut().iter_mut().zip(grads[i].values()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *x -= cfg.lr * (update + cfg.weight_decay * *x);
        }
    }
    true
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.values_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Everything that shapes the per-sample objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub ebm: EbmConfig,
    pub energy: EnergyKind,
}

impl Objective {
    pub fn uses_ebm(&self) -> bool {
        self.weights.lambda_nll > 0.0
    }
}

/// Loss terms of one sample on the tape.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss<'t> {
    pub l_match: Var<'t>,
    pub l_nll: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Builds the loss of one sample. `negatives` maps the detached chain start
/// and energy snapshot to negative samples.
pub fn sample_loss<'t>(
    model: &DemaFormer,
    tape: &'t Tape,
    p: &Bound<'t>,
    sample: &GroundingSample,
    obj: &Objective,
    alpha: f64,
    negatives: &mut dyn FnMut(&Tensor, &EnergyFn) -> Result<Tensor, NumericsError>,
) -> Result<SampleLoss<'t>, NumericsError> {
    let out = model.forward(tape, p, sample);
    let assignment = assign_targets(&sample.gt, sample.video_len());
    let l_match = matching_loss(&out.heads, &sample.gt, &assignment, &obj.weights)
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let positives = select_positives(&sample.salience, obj.ebm.rho);
    if !obj.uses_ebm() || positives.is_empty() {
        return Ok(SampleLoss { l_match, l_nll: None, total: l_match });
    }
    let rows = obj.energy.chain_rows(&out);
    let query = out.query_rows();
    let energy = EnergyFn::snapshot(obj.energy, &out, &model.heads.salience, p);
    let negs = negatives(&rows.value(), &energy)?;
    let pos_e = energy_rows(obj.energy, rows, query, &model.heads.salience, p).gather(&positives);
    let neg_e = energy_rows(obj.energy, tape.constant(negs), query, &model.heads.salience, p);
    let l_nll = nll_loss(pos_e, neg_e, alpha).expect("positives are non-empty");
    let total = l_match.add(l_nll.scale(obj.weights.lambda_nll));
    Ok(SampleLoss { l_match, l_nll: Some(l_nll), total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Joint gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 4, optimizer: AdamConfig::default(), clip: Some(1.0) }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("train.batch_size must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err("train.optimizer needs lr > 0 and weight_decay >= 0".into());
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err("train.clip must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_match: f64,
    pub l_nll: f64,
    pub total: f64,
    pub rank1_05: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Steps dropped because a gradient was not finite.
    pub skipped_steps: usize,
}

impl TrainingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_match,l_nll,total,rank1_05\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.epoch, r.l_match, r.l_nll, r.total, r.rank1_05);
        }
        s
    }
}

/// Top spans and salience for every sample.
pub fn predict_all(model: &DemaFormer, samples: &[GroundingSample]) -> Vec<SampleEval> {
    samples
        .iter()
        .map(|s| {
            let (heads, ranked) = model.localize(s);
            SampleEval { ranked, gt: s.gt_spans(), pred_salience: heads.salience, gt_salience: s.salience.clone() }
        })
        .collect()
}

pub fn evaluate_model(model: &DemaFormer, samples: &[GroundingSample], cfg: &EvalConfig) -> MetricsReport {
    evaluate(&predict_all(model, samples), cfg)
}

fn rank1_05(model: &DemaFormer, samples: &[GroundingSample]) -> f64 {
    let evals = predict_all(model, samples);
    let preds: Vec<_> = evals.iter().map(|e| e.ranked.clone()).collect();
    let gts: Vec<_> = evals.iter().map(|e| e.gt.clone()).collect();
    rank_k_at_mu(&preds, &gts, 1, 0.5)
}

/// Trains `model` in place. The per-epoch `rank1_05` column is measured on
/// `monitor`, or on the training set when `monitor` is empty.
pub fn fit(
    model: &mut DemaFormer,
    train: &[GroundingSample],
    monitor: &[GroundingSample],
    obj: &Objective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain_rng = ChaCha8Rng::seed_from_u64(seed);
    chain_rng.set_stream(1);
    let mut state = OptimState::new(&model.params);
    let mut report = TrainingReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let alpha = alpha_neg(epoch, obj.ebm.alpha_min);
        let (mut sum_match, mut sum_nll, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let tape = Tape::new();
                let p = model.params.bind(&tape);
                let mut draw = |start: &Tensor, e: &EnergyFn| sample_negatives(start, e, &obj.ebm, &mut chain_rng);
                let loss = sample_loss(model, &tape, &p, &train[i], obj, alpha, &mut draw)?;
                let total = loss.total.item();
                if !total.is_finite() {
                    return Err(TrainError::Diverged { epoch, what: "loss" });
                }
                sum_match += loss.l_match.item();
                sum_nll += loss.l_nll.map_or(0.0, |v| v.item());
                sum_total += total;
                let g = loss.total.backward()?;
                let scale = 1.0 / batch.len() as f64;
                for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                    if let Some(gv) = g.get(v) {
                        acc.values_mut().iter_mut().zip(gv.values()).for_each(|(a, b)| *a += scale * b);
                    }
                }
            }
            if let Some(c) = cfg.clip {
                clip_grad_norm(&mut grads, c);
            }
            if !adam_step(&mut model.params, &grads, &mut state, &cfg.optimizer) {
                report.skipped_steps += 1;
            }
        }
        let n = train.len() as f64;
        let watched = if monitor.is_empty() { train } else { monitor };
        report.epochs.push(EpochRecord {
            epoch,
            l_match: sum_match / n,
            l_nll: sum_nll / n,
            total: sum_total / n,
            rank1_05: rank1_05(model, watched),
        });
    }
    Ok(report)
}

/// Central differences straddle the ReLU kink when a pre-activation lies
/// within the step of zero; layer inputs closer than this are redrawn.
const KINK_MARGIN: f64 = 1e3 * DEFAULT_FD_STEP;

fn min_abs_pre_relu(layer: &Layer, store: &ParamStore, x: &Tensor) -> f64 {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let h = layer.norm_block.forward(layer.block.forward(tape.constant(x.clone()), &p), &p).value();
    h.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Central-difference checks of every layer type and of the whole objective
/// on the tiny configuration, one report per component.
pub fn gradient_suite(arch: Architecture, obj: &Objective, seed: u64) -> Result<Vec<(String, GradCheckReport)>, TrainError> {
    let mc = ModelConfig::tiny();
    let sc = SynthConfig { seed, ..SynthConfig::tiny() };
    let sample = gen_synthetic(&sc, 1)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (len, d) = (sc.l_v, mc.d);
    let x = uniform(&mut rng, &[len, d]);
    let probe = uniform(&mut rng, &[len, d]);
    let negs = uniform(&mut rng, &[len, d]);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let dema = DemaParams::init(&mut store, "dema", d, arch.damping, &mut rng);
    let f = objective(|tape, p| dema.forward(tape.constant(x.clone()), p).mul(tape.constant(probe.clone())).sum());
    out.push(("dema".to_string(), finite_diff_check(&store, DEFAULT_FD_STEP, f)?));

    let mut store = ParamStore::new();
    let block = DemaAttentionParams::init(&mut store, "block", d, mc.d_k, arch.block, arch.damping, &mut rng);
    let f = objective(|tape, p| block.forward(tape.constant(x.clone()), p).mul(tape.constant(probe.clone())).sum());
    out.push(("attention_block".to_string(), finite_diff_check(&store, DEFAULT_FD_STEP, f)?));

    let mut store = ParamStore::new();
    let layer = Layer {
        block: DemaAttentionParams::init(&mut store, "layer.block", d, mc.d_k, arch.block, arch.damping, &mut rng),
        norm_block: NormParams::init(&mut store, "layer.norm_block", d),
        norm_out: NormParams::init(&mut store, "layer.norm_out", d),
    };
    let mut x = x;
    while min_abs_pre_relu(&layer, &store, &x) < KINK_MARGIN {
        x = uniform(&mut rng, &[len, d]);
    }
    let f = objective(|tape, p| layer.forward(tape.constant(x.clone()), p).mul(tape.constant(probe.clone())).sum());
    out.push(("layer".to_string(), finite_diff_check(&store, DEFAULT_FD_STEP, f)?));

    let model = DemaFormer::new(mc, arch, seed);
    let f = objective(|tape, p| {
        let mut fixed = |_: &Tensor, _: &EnergyFn| Ok(negs.clone());
        sample_loss(&model, tape, p, &sample, obj, 0.5, &mut fixed).expect("fixed negatives cannot fail").total
    });
    out.push(("model_objective".to_string(), finite_diff_check(&model.params, DEFAULT_FD_STEP, f)?));
    Ok(out)
}

/// Plain-value recomputation of the matching loss, for cross-checks.
pub fn matching_loss_reference(h: &HeadOutputs, gts: &[Localization], a: &TargetAssignment, w: &LossWeights) -> f64 {
    let mut acc = 0.0;
    for (g, &i) in gts.iter().zip(&a.positions) {
        let r_co = match w.offset {
            OffsetResidual::Direct => (g.co - h.offset[i]).abs(),
            OffsetResidual::CenterRelative => (g.co - (h.offset[i] - h.center[i])).abs(),
        };
        acc += h.salience[i] - w.lambda1 * (g.c - h.center[i]).abs() - w.lambda2 * (g.w - h.width[i]).abs() - w.lambda3 * r_co;
    }
    -acc / gts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn loc(c: f64, w: f64) -> Localization {
        Localization { c, w, co: 0.0 }
    }

    fn head_vars<'t>(tape: &'t Tape, h: &HeadOutputs) -> HeadVars<'t> {
        let col = |v: &Vec<f64>| tape.param(Tensor::new(vec![v.len(), 1], v.clone()));
        HeadVars { salience: col(&h.salience), center: col(&h.center), offset: col(&h.offset), width: col(&h.width) }
    }

    fn random_heads(rng: &mut ChaCha8Rng, n: usize) -> HeadOutputs {
        let mut v = |lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        HeadOutputs { salience: v(-3.0, 3.0), center: v(0.0, 1.0), offset: v(-0.2, 0.2), width: v(0.0, 1.0) }
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assign_targets(&[loc(0.05, 0.1), loc(0.55, 0.1)], 10).positions, vec![0, 5]);
        assert_eq!(assign_targets(&[loc(1.0, 0.1)], 10).positions, vec![9]);
        let a = assign_targets(&[loc(0.51, 0.2), loc(0.52, 0.2)], 10);
        assert_eq!(a.positions, vec![5, 4]);
        assert_eq!(a.matched.iter().filter(|&&m| m).count(), 2);
    }

    /// Exhaustive restatement of the assignment rule.
    fn assignment_oracle(gts: &[Localization], len: usize) -> Vec<usize> {
        let mut taken = vec![false; len];
        let mut out = Vec::new();
        for g in gts {
            let home = ((g.c * len as f64).floor() as usize).min(len - 1);
            let (s, e) = (g.c - g.w / 2.0, g.c + g.w / 2.0);
            let pos = (0..len)
                .filter(|&i| !taken[i])
                .min_by_key(|&i| {
                    let overlaps = (i as f64) < e * len as f64 && ((i + 1) as f64) > s * len as f64;
                    let preferred = i == home || overlaps;
                    (i != home, !preferred, home.abs_diff(i), i)
                })
                .unwrap();
            taken[pos] = true;
            out.push(pos);
        }
        out
    }

    #[test]
    fn assignment_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let len = rng.random_range(2..9);
            let n = rng.random_range(1..len);
            let gts: Vec<_> = (0..n).map(|_| loc(rng.random_range(0.0..=1.0), rng.random_range(0.01..0.6))).collect();
            let got = assign_targets(&gts, len);
            assert_eq!(got.positions, assignment_oracle(&gts, len), "{gts:?} len {len}");
            let mut uniq = got.positions.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), n);
        }
    }

    #[test]
    fn matching_loss_examples() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let h = HeadOutputs { salience: vec![0.0, 1.0], center: vec![0.0, 0.75], offset: vec![0.0; 2], width: vec![0.0, 0.5] };
        let gts = [loc(0.75, 0.5)];
        let a = assign_targets(&gts, 2);
        assert_eq!(matching_loss(&head_vars(&tape, &h), &gts, &a, &w).unwrap().item(), -1.0);
        let h = HeadOutputs { salience: vec![0.0, 0.0], center: vec![0.0, 0.45], offset: vec![0.0; 2], width: vec![0.0, 0.5] };
        let l = matching_loss(&head_vars(&tape, &h), &gts, &a, &w).unwrap().item();
        assert!((l - 0.1).abs() < 1e-15);
        assert!(matching_loss(&head_vars(&tape, &h), &[], &a, &w).is_none());
        let h = HeadOutputs { salience: vec![0.0, 2.0], center: vec![0.0, 0.75], offset: vec![0.0; 2], width: vec![0.0, 0.5] };
        let [ls, lc, lw, lco] = component_losses(&head_vars(&tape, &h), &gts, &a, OffsetResidual::Direct).unwrap();
        assert_eq!((ls.item(), lc.item(), lw.item(), lco.item()), (-2.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn decomposition_identity_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..200 {
            let len = rng.random_range(2..12);
            let n = rng.random_range(1..len);
            let h = random_heads(&mut rng, len);
            let gts: Vec<_> = (0..n)
                .map(|_| Localization { c: rng.random_range(0.0..1.0), w: rng.random_range(0.0..1.0), co: rng.random_range(-0.1..0.1) })
                .collect();
            let a = assign_targets(&gts, len);
            let w = LossWeights { lambda1: rng.random_range(0.0..1.0), lambda2: rng.random_range(0.0..1.0), lambda3: rng.random_range(0.0..1.0), ..LossWeights::default() };
            let variant = if trial % 2 == 0 { OffsetResidual::Direct } else { OffsetResidual::CenterRelative };
            let w = LossWeights { offset: variant, ..w };
            let tape = Tape::new();
            let hv = head_vars(&tape, &h);
            let l = matching_loss(&hv, &gts, &a, &w).unwrap().item();
            let [ls, lc, lw, lco] = component_losses(&hv, &gts, &a, variant).unwrap().map(|v| v.item());
            assert!((l - (ls + w.lambda1 * lc + w.lambda2 * lw + w.lambda3 * lco)).abs() < 1e-12);
            assert!((l - matching_loss_reference(&h, &gts, &a, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.7, 5.0, 0.0), 0.7);
        assert!((total_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(LossWeights::default().lambda_nll, 0.1);
    }

    proptest! {
        #[test]
        fn total_loss_increases_with_nll(m in -5.0f64..5.0, a in -5.0f64..5.0, b in -5.0f64..5.0, lam in 0.01f64..2.0) {
            prop_assume!(a < b);
            prop_assert!(total_loss(m, a, lam) < total_loss(m, b, lam));
        }
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![x]));
        s
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = scalar_store(0.3);
        let mut st = OptimState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::vector(vec![0.0])], &mut st, &cfg));
        assert_eq!(p.tensors()[0].values()[0], 0.3);
        let mut p = scalar_store(0.0);
        let mut st = OptimState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![1.0])], &mut st, &cfg);
        assert!((p.tensors()[0].values()[0] + 1e-3).abs() < 1e-10);
        assert_eq!(st.step, 1);
        assert!(!adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st, &cfg));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig { lr: 1e-2, weight_decay: 0.0, ..AdamConfig::default() };
        let target = [1.5, -2.0, 0.25];
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.0; 3]));
        let mut st = OptimState::new(&p);
        for _ in 0..5000 {
            let g: Vec<f64> = p.tensors()[0].values().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            adam_step(&mut p, &[Tensor::vector(g)], &mut st, &cfg);
        }
        for (x, t) in p.tensors()[0].values().iter().zip(&target) {
            assert!((x - t).abs() < 1e-6, "{x} vs {t}");
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].values()[0] - 0.6).abs() < 1e-15 && (g[1].values()[0] - 0.8).abs() < 1e-15);
    }

    fn tiny() -> (ModelConfig, SynthConfig) {
        (ModelConfig::tiny(), SynthConfig::tiny())
    }

    #[test]
    fn gradient_suite_passes_for_every_architecture() {
        for arch in [
            Architecture::default(),
            Architecture { damping: false, ..Architecture::default() },
            Architecture { block: crate::dema::BlockKind::PlainAttention, damping: true },
        ] {
            let obj = Objective { weights: LossWeights::default(), ebm: EbmConfig::default(), energy: EnergyKind::Salience };
            for (name, rep) in gradient_suite(arch, &obj, 1).unwrap() {
                assert!(rep.max_rel_err < 1e-4, "{arch:?} {name} {rep:?}");
            }
        }
    }

    #[test]
    fn whole_objective_gradient() {
        let (mc, sc) = tiny();
        let sample = gen_synthetic(&sc, 1).unwrap().remove(0);
        for kind in [EnergyKind::Salience, EnergyKind::ElementwiseCosine, EnergyKind::PooledCosine] {
            let model = DemaFormer::new(mc.clone(), Architecture::default(), 3);
            let obj = Objective { weights: LossWeights::default(), ebm: EbmConfig::default(), energy: kind };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let negs = Tensor::new(vec![6, 8], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
            let f = objective(|tape, p| {
                let mut fixed = |_: &Tensor, _: &EnergyFn| Ok(negs.clone());
                sample_loss(&model, tape, p, &sample, &obj, 0.5, &mut fixed).unwrap().total
            });
            let rep = finite_diff_check(&model.params, DEFAULT_FD_STEP, f).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{kind:?} {rep:?}");
        }
    }

    fn train_tiny(seed: u64, epochs: usize) -> (DemaFormer, TrainingReport) {
        let (mc, sc) = tiny();
        let data = gen_synthetic(&SynthConfig { seed, ..sc }, 6).unwrap();
        let mut model = DemaFormer::new(mc, Architecture::default(), seed);
        let obj = Objective { weights: LossWeights::default(), ebm: EbmConfig { k: 5, ..EbmConfig::default() }, energy: EnergyKind::Salience };
        let cfg = TrainConfig { epochs, batch_size: 2, ..TrainConfig::default() };
        let rep = fit(&mut model, &data, &[], &obj, &cfg, seed).unwrap();
        (model, rep)
    }

    #[test]
    fn fit_is_deterministic() {
        let (m1, r1) = train_tiny(4, 3);
        let (m2, r2) = train_tiny(4, 3);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.epochs.len(), 3);
        assert!(r1.to_csv().starts_with("epoch,l_match,l_nll,total,rank1_05\n"));
    }

    #[test]
    fn matching_loss_decreases_on_single_sample() {
        let (mc, sc) = tiny();
        let data = gen_synthetic(&sc, 1).unwrap();
        let mut model = DemaFormer::new(mc, Architecture::default(), 0);
        let obj = Objective { weights: LossWeights { lambda_nll: 0.0, ..LossWeights::default() }, ebm: EbmConfig::default(), energy: EnergyKind::Salience };
        let cfg = TrainConfig { epochs: 200, batch_size: 1, clip: None, ..TrainConfig::default() };
        let rep = fit(&mut model, &data, &data, &obj, &cfg, 0).unwrap();
        let curve: Vec<f64> = rep.epochs.iter().map(|r| r.l_match).collect();
        for w in 0..curve.len() - 50 {
            assert!(curve[w + 50] < curve[w], "window at {w}");
        }
        assert!(rep.epochs.iter().all(|r| r.l_nll == 0.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (mc, _) = tiny();
        let mut model = DemaFormer::new(mc, Architecture::default(), 0);
        let obj = Objective { weights: LossWeights::default(), ebm: EbmConfig::default(), energy: EnergyKind::Salience };
        assert!(matches!(fit(&mut model, &[], &[], &obj, &TrainConfig::default(), 0), Err(TrainError::EmptyDataset)));
    }
}
