//! Energy-based modeling of moment representations.
//!
//! Energies are available in two forms: on the tape (for the loss) and as
//! plain functions with analytic gradients (for the Langevin sampler, which
//! never touches the parameter graph).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::NumericsError;
use crate::model::ModelOutputs;
use crate::numerics::{dot, Bound, LinearParams, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbmConfig {
    /// Langevin steps per chain.
    pub k: usize,
    /// Step size; also the per-coordinate noise variance.
    pub gamma: f64,
    /// Positive threshold on groundtruth salience (strict).
    pub rho: f64,
    pub alpha_min: f64,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self { k: 100, gamma: 0.1, rho: 1.0, alpha_min: 0.1 }
    }
}

impl EbmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("ebm.k must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err("ebm.gamma must be positive".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0) {
            return Err("ebm.alpha_min must lie in (0, 1]".into());
        }
        if self.rho.is_nan() {
            return Err("ebm.rho must be a number".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    /// `E = −ŝ(o_d,i)`
    #[default]
    Salience,
    /// `E = −mean_j cos(o_e,i, o_e,j)` over query rows `j`
    ElementwiseCosine,
    /// `E = −cos(o_e,i, maxpool_j o_e,j)`
    PooledCosine,
}

impl EnergyKind {
    /// The representation each chain lives in.
    pub fn chain_rows<'t>(self, out: &ModelOutputs<'t>) -> Var<'t> {
        match self {
            EnergyKind::Salience => out.decoded,
            _ => out.video_rows(),
        }
    }
}

/// Energies of `rows` (`[n×d]`) on the tape, returned as `[n×1]`.
pub fn energy_rows<'t>(
    kind: EnergyKind,
    rows: Var<'t>,
    query: Var<'t>,
    salience_head: &LinearParams,
    p: &Bound<'t>,
) -> Var<'t> {
    match kind {
        EnergyKind::Salience => salience_head.forward(rows, p).scale(-1.0),
        EnergyKind::ElementwiseCosine => {
            let m = query.rows();
            let avg = rows.tape().constant(Tensor::full(&[m, 1], 1.0 / m as f64));
            rows.cosine_rows(query).matmul(avg).scale(-1.0)
        }
        EnergyKind::PooledCosine => rows.cosine_rows(query.col_max()).scale(-1.0),
    }
}

/// Energy with its gradient in the chain variable, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergyFn {
    Salience { weight: Vec<f64>, bias: f64 },
    ElementwiseCosine { query: Vec<Vec<f64>> },
    PooledCosine { pooled: Vec<f64> },
    /// `E(o) = ½‖o‖²`
    Quadratic,
    /// `E ≡ 0`
    Flat,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// `∂cos(a, b)/∂a`, zero wherever the cosine is pinned to 0.
fn cosine_grad(a: &[f64], b: &[f64], out: &mut [f64], weight: f64) {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let c = dot(a, b) / (na * nb);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += weight * (bi / (na * nb) - c * ai / (na * na));
    }
}

impl EnergyFn {
    /// Snapshot of the current energy for `kind`, reading the salience head
    /// and encoder query rows from tape values.
    pub fn snapshot<'t>(kind: EnergyKind, out: &ModelOutputs<'t>, head: &LinearParams, p: &Bound<'t>) -> Self {
        match kind {
            EnergyKind::Salience => EnergyFn::Salience {
                weight: p.var(head.weight).value().into_values(),
                bias: p.var(head.bias).item(),
            },
            EnergyKind::ElementwiseCosine => EnergyFn::ElementwiseCosine { query: out.query_rows().value().to_rows() },
            EnergyKind::PooledCosine => EnergyFn::PooledCosine { pooled: out.query_rows().col_max().value().into_values() },
        }
    }

    pub fn energy(&self, o: &[f64]) -> f64 {
        match self {
            EnergyFn::Salience { weight, bias } => -(dot(weight, o) + bias),
            EnergyFn::ElementwiseCosine { query } => {
                -query.iter().map(|q| cosine(o, q)).sum::<f64>() / query.len() as f64
            }
            EnergyFn::PooledCosine { pooled } => -cosine(o, pooled),
            EnergyFn::Quadratic => 0.5 * dot(o, o),
            EnergyFn::Flat => 0.0,
        }
    }

    pub fn grad(&self, o: &[f64]) -> Vec<f64> {
        match self {
            EnergyFn::Salience { weight, .. } => weight.iter().map(|w| -w).collect(),
            EnergyFn::ElementwiseCosine { query } => {
                let mut g = vec![0.0; o.len()];
                let w = -1.0 / query.len() as f64;
                for q in query {
                    cosine_grad(o, q, &mut g, w);
                }
                g
            }
            EnergyFn::PooledCosine { pooled } => {
                let mut g = vec![0.0; o.len()];
                cosine_grad(o, pooled, &mut g, -1.0);
                g
            }
            EnergyFn::Quadratic => o.to_vec(),
            EnergyFn::Flat => vec![0.0; o.len()],
        }
    }
}

/// `K` steps of `o ← o − (γ/2)∇E(o) + ε`, `ε ~ N(0, γ·I)`.
pub fn langevin_sample<R, G>(o0: &[f64], mut grad: G, k: usize, gamma: f64, rng: &mut R) -> Result<Vec<f64>, NumericsError>
where
    R: Rng + ?Sized,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let std = gamma.sqrt();
    let mut o = o0.to_vec();
    for _ in 0..k {
        let g = grad(&o);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("energy gradient"));
        }
        for (oi, gi) in o.iter_mut().zip(&g) {
            let eps: f64 = rng.sample(StandardNormal);
            *oi += -0.5 * gamma * gi + std * eps;
        }
    }
    Ok(o)
}

/// One chain per row of `start`, run in row order from a single RNG stream.
pub fn sample_negatives<R: Rng + ?Sized>(
    start: &Tensor,
    energy: &EnergyFn,
    cfg: &EbmConfig,
    rng: &mut R,
) -> Result<Tensor, NumericsError> {
    let mut values = Vec::with_capacity(start.len());
    for row in start.to_rows() {
        values.extend(langevin_sample(&row, |o| energy.grad(o), cfg.k, cfg.gamma, rng)?);
    }
    Ok(Tensor::new(start.shape().to_vec(), values))
}

/// Runs one chain per row for `steps` steps and records the mean energy over
/// rows before the first step and after each step (`steps + 1` values).
pub fn energy_trace<R: Rng + ?Sized>(
    start: &Tensor,
    energy: &EnergyFn,
    steps: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<f64>, NumericsError> {
    let mut rows = start.to_rows();
    let mean = |rows: &[Vec<f64>]| rows.iter().map(|r| energy.energy(r)).sum::<f64>() / rows.len().max(1) as f64;
    let mut trace = vec![mean(&rows)];
    for _ in 0..steps {
        for r in rows.iter_mut() {
            *r = langevin_sample(r, |o| energy.grad(o), 1, gamma, rng)?;
        }
        trace.push(mean(&rows));
    }
    Ok(trace)
}

/// Indices whose groundtruth salience is strictly above `rho`.
pub fn select_positives(salience_gt: &[f64], rho: f64) -> Vec<usize> {
    salience_gt.iter().enumerate().filter(|(_, &s)| s > rho).map(|(i, _)| i).collect()
}

/// `max(1 / (1 + n/2), α_min)`
pub fn alpha_neg(n_epoch: usize, alpha_min: f64) -> f64 {
    (1.0 / (1.0 + 0.5 * n_epoch as f64)).max(alpha_min)
}

/// `mean E(o⁺) − α · mean E(o⁻)`, or `None` with no positives.
pub fn nll_loss<'t>(pos_energy: Var<'t>, neg_energy: Var<'t>, alpha: f64) -> Option<Var<'t>> {
    if pos_energy.with_value(|t| t.is_empty()) {
        return None;
    }
    Some(pos_energy.mean().sub(neg_energy.mean().scale(alpha)))
}

/// Trapezoid-rule expectation of `f` under `exp(−θ f) / Z` on `grid`.
pub fn model_expectation_1d(theta: f64, f: impl Fn(f64) -> f64, grid: &[f64]) -> Result<f64, NumericsError> {
    let (mut z, mut m) = (0.0, 0.0);
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        let (fa, fb) = (f(w[0]), f(w[1]));
        let (pa, pb) = ((-theta * fa).exp(), (-theta * fb).exp());
        z += 0.5 * h * (pa + pb);
        m += 0.5 * h * (fa * pa + fb * pb);
    }
    if z.is_finite() && z > f64::MIN_POSITIVE {
        Ok(m / z)
    } else {
        Err(NumericsError::NonFinite("partition function"))
    }
}

/// Langevin sampling schedule for [`cd_gradient_oracle_1d`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSchedule {
    pub gamma: f64,
    pub chains: usize,
    pub burn_in: usize,
    pub samples_per_chain: usize,
    pub thin: usize,
}

/// Exact and contrastive-divergence estimates of `∂NLL/∂θ` for the 1-D
/// family `E_θ(o) = θ f(o)`. Returns `(exact, cd)`.
pub fn cd_gradient_oracle_1d<R: Rng + ?Sized>(
    theta: f64,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
    data: &[f64],
    grid: &[f64],
    schedule: ChainSchedule,
    rng: &mut R,
) -> Result<(f64, f64), NumericsError> {
    let data_mean = data.iter().map(|&o| f(o)).sum::<f64>() / data.len() as f64;
    let exact = data_mean - model_expectation_1d(theta, &f, grid)?;
    let grad = |o: &[f64]| vec![theta * df(o[0])];
    let mut acc = 0.0;
    let mut n = 0usize;
    for _ in 0..schedule.chains {
        let mut o = langevin_sample(&[0.0], grad, schedule.burn_in, schedule.gamma, rng)?;
        for _ in 0..schedule.samples_per_chain {
            o = langevin_sample(&o, grad, schedule.thin, schedule.gamma, rng)?;
            acc += f(o[0]);
            n += 1;
        }
    }
    Ok((exact, data_mean - acc / n as f64))
}
