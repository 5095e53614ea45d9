//! Damped exponential moving average and the gated attention block built on it.
//!
//! The recurrence runs per channel over the sequence:
//!
//! ```text
//! g_i  = in_proj(x_i)
//! l_i  = α ⊙ g_i + (1 − α ⊙ δ) ⊙ l_{i−1},   l_0 = 0
//! x'_i = out_proj(l_i)
//! ```
//!
//! `α` and `δ` are stored as unconstrained raws and squashed into the open
//! interval `(0, 1)` on every forward pass.

use rand::Rng;

use crate::numerics::{normal_vector, sigmoid, Bound, LinearParams, ParamId, ParamStore, Tensor, Var};

/// Margin keeping squashed coefficients strictly inside `(0, 1)` in `f64`.
pub const COEFF_MARGIN: f64 = 1e-9;

/// Maps an unconstrained raw value into `(COEFF_MARGIN, 1 − COEFF_MARGIN)`.
pub fn squash(raw: f64) -> f64 {
    COEFF_MARGIN + (1.0 - 2.0 * COEFF_MARGIN) * sigmoid(raw)
}

fn squash_var(raw: Var<'_>) -> Var<'_> {
    raw.sigmoid().affine(1.0 - 2.0 * COEFF_MARGIN, COEFF_MARGIN)
}

/// Learnable parameters of the damped EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct DemaParams {
    pub alpha_raw: ParamId,
    /// `None` pins `δ ≡ 1`, i.e. an undamped EMA.
    pub delta_raw: Option<ParamId>,
    pub in_proj: LinearParams,
    pub out_proj: LinearParams,
    pub dim: usize,
}

impl DemaParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, damping: bool, rng: &mut impl Rng) -> Self {
        let alpha_raw = store.insert(format!("{name}.alpha_raw"), normal_vector(d, rng));
        let delta_raw = damping.then(|| store.insert(format!("{name}.delta_raw"), normal_vector(d, rng)));
        let in_proj = LinearParams::init(store, &format!("{name}.in_proj"), d, d, rng);
        let out_proj = LinearParams::init(store, &format!("{name}.out_proj"), d, d, rng);
        Self { alpha_raw, delta_raw, in_proj, out_proj, dim: d }
    }

    pub fn effective_alpha(&self, store: &ParamStore) -> Tensor {
        store.get(self.alpha_raw).map(squash)
    }

    pub fn effective_delta(&self, store: &ParamStore) -> Tensor {
        match self.delta_raw {
            Some(id) => store.get(id).map(squash),
            None => Tensor::full(&[self.dim], 1.0),
        }
    }

    /// Per-channel retention factor `1 − α ⊙ δ`.
    pub fn decay(&self, store: &ParamStore) -> Tensor {
        let a = self.effective_alpha(store);
        let d = self.effective_delta(store);
        Tensor::vector(a.values().iter().zip(d.values()).map(|(a, d)| 1.0 - a * d).collect())
    }

    /// `dema_forward`: `[L×d] -> [L×d]`, causal in the sequence index.
    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        let tape_alpha = squash_var(p.var(self.alpha_raw));
        let tape_delta = match self.delta_raw {
            Some(id) => squash_var(p.var(id)),
            None => x.tape().constant(Tensor::full(&[self.dim], 1.0)),
        };
        let g = self.in_proj.forward(x, p);
        let l = g.ema_scan(tape_alpha, tape_delta);
        self.out_proj.forward(l, p)
    }
}

/// Element-by-element evaluation of the damped EMA with plain loops; a
/// reference for [`DemaParams::forward`].
pub fn dema_loop_oracle(x: &Tensor, store: &ParamStore, p: &DemaParams) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    assert!(n >= 1, "empty sequence");
    let alpha = p.effective_alpha(store);
    let delta = p.effective_delta(store);
    let affine = |lp: &LinearParams, v: &[f64]| -> Vec<f64> {
        let (w, b) = (store.get(lp.weight), store.get(lp.bias));
        (0..lp.out_dim)
            .map(|o| {
                let mut s = b.values()[o];
                for k in 0..lp.in_dim {
                    s += w.get(o, k) * v[k];
                }
                s
            })
            .collect()
    };
    let mut l = vec![0.0; d];
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let g = affine(&p.in_proj, x.row(i));
        for c in 0..d {
            let a = alpha.values()[c];
            l[c] = a * g[c] + (1.0 - a * delta.values()[c]) * l[c];
        }
        out.extend(affine(&p.out_proj, &l));
    }
    Tensor::new(vec![n, d], out)
}

/// Which token mixer an encoder/decoder layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Damped EMA feeding gated attention.
    Dema,
    /// Single-head softmax attention with `V = v_proj(X)`; no recurrence, no gate.
    PlainAttention,
}

/// All parameters of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct DemaAttentionParams {
    pub kind: BlockKind,
    pub dema: Option<DemaParams>,
    pub z_proj: Option<LinearParams>,
    pub q_proj: LinearParams,
    pub k_proj: LinearParams,
    pub v_proj: LinearParams,
    pub lambda_proj: Option<LinearParams>,
    pub p_left: Option<LinearParams>,
    pub p_right: Option<LinearParams>,
    pub d: usize,
    pub d_k: usize,
}

/// Intermediate tensors of one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace<'t> {
    pub x_prime: Var<'t>,
    pub z: Var<'t>,
    pub z_attn: Var<'t>,
    pub lambda: Var<'t>,
    pub p: Var<'t>,
    pub h: Var<'t>,
}

impl DemaAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_k: usize,
        kind: BlockKind,
        damping: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let lin = |store: &mut ParamStore, part: &str, i: usize, o: usize, rng: &mut _| {
            LinearParams::init(store, &format!("{name}.{part}"), i, o, rng)
        };
        match kind {
            BlockKind::Dema => {
                let dema = DemaParams::init(store, &format!("{name}.dema"), d, damping, rng);
                let z_proj = lin(store, "z_proj", d, d, rng);
                let q_proj = lin(store, "q_proj", d, d_k, rng);
                let k_proj = lin(store, "k_proj", d, d_k, rng);
                let v_proj = lin(store, "v_proj", d, d, rng);
                let lambda_proj = lin(store, "lambda_proj", d, d, rng);
                let p_left = lin(store, "p_left", d, d, rng);
                let p_right = lin(store, "p_right", d, d, rng);
                Self {
                    kind,
                    dema: Some(dema),
                    z_proj: Some(z_proj),
                    q_proj,
                    k_proj,
                    v_proj,
                    lambda_proj: Some(lambda_proj),
                    p_left: Some(p_left),
                    p_right: Some(p_right),
                    d,
                    d_k,
                }
            }
            BlockKind::PlainAttention => {
                let q_proj = lin(store, "q_proj", d, d_k, rng);
                let k_proj = lin(store, "k_proj", d, d_k, rng);
                let v_proj = lin(store, "v_proj", d, d, rng);
                Self {
                    kind,
                    dema: None,
                    z_proj: None,
                    q_proj,
                    k_proj,
                    v_proj,
                    lambda_proj: None,
                    p_left: None,
                    p_right: None,
                    d,
                    d_k,
                }
            }
        }
    }

    fn attend<'t>(&self, x: Var<'t>, values: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        let q = self.q_proj.forward(x, p);
        let k = self.k_proj.forward(x, p);
        let scores = q.matmul_nt(k).scale(1.0 / (self.d_k as f64).sqrt());
        scores.softmax_rows().matmul(values)
    }

    /// `dema_attention`: `[L×d] -> [L×d]`.
    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        match self.kind {
            BlockKind::Dema => self.trace(x, p).h,
            BlockKind::PlainAttention => {
                let v = self.v_proj.forward(x, p);
                self.attend(x, v, p)
            }
        }
    }

    /// Full evaluation of a [`BlockKind::Dema`] block, keeping intermediates.
    pub fn trace<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> AttentionTrace<'t> {
        assert_eq!(self.kind, BlockKind::Dema, "trace requires a DEMA block");
        assert_eq!(x.cols(), self.d, "block input dimension mismatch");
        let (dema, z_proj, lambda_proj, p_left, p_right) = (
            self.dema.as_ref().expect("dema params"),
            self.z_proj.expect("z_proj"),
            self.lambda_proj.expect("lambda_proj"),
            self.p_left.expect("p_left"),
            self.p_right.expect("p_right"),
        );
        let x_prime = dema.forward(x, p);
        let z = z_proj.forward(x_prime, p).silu();
        let v = self.v_proj.forward(z, p);
        let z_attn = self.attend(x, v, p);
        let lambda = lambda_proj.forward(x_prime, p).sigmoid();
        let mix = p_left.forward(x_prime, p).add(p_right.forward(z.mul(z_attn), p));
        let pv = mix.silu();
        let h = lambda.mul(pv).add(lambda.one_minus().mul(x));
        AttentionTrace { x_prime, z, z_attn, lambda, p: pv, h }
    }
}
