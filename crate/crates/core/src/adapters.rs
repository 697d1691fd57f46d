//! Low-rank adapters over a frozen linear layer `h = W·x`.
//!
//! Every variant adds a scaled low-rank term to the frozen product:
//!
//! | variant | update |
//! |---|---|
//! | `Vanilla` | `(α/r)·B·A·x` |
//! | `MultiHeadRouted` | `(α/r)·Σ ωᵢ(x)·Bᵢ·A·x`, `ω = softmax(W_r·x)` |
//! | `MultiHeadRandomized` | as routed, random head init, per-head dropout on `A·x` |
//! | `MultiHeadSum` | `(α/r)·(1/N)·Σ Bᵢ·Dropoutᵢ(A·x)`, no router |
//! | `MultiAdapter` | `(α/r)·Σ_{i∈TopK} sᵢ(x)·Bᵢ·Aᵢ·x` |
//!
//! The summed variant is the randomized one with its router removed, so the
//! heads are averaged with the uniform weights a zero router would give.
//!
//! Inputs are column-major batches: `x` is `n×B`, one sample per column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Variance of the random head initialization used by the randomized and summed variants.
pub const RANDOM_HEAD_VARIANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    MultiAdapter,
    MultiHeadRouted,
    MultiHeadRandomized,
    MultiHeadSum,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::MultiAdapter,
        Variant::MultiHeadRouted,
        Variant::MultiHeadRandomized,
        Variant::MultiHeadSum,
    ];

    pub fn has_router(self) -> bool {
        !matches!(self, Variant::Vanilla | Variant::MultiHeadSum)
    }

    /// Whether one down-projection `A` is shared by all heads.
    pub fn shares_down_projection(self) -> bool {
        self != Variant::MultiAdapter
    }

    /// Whether the weight delta is independent of the input, so it can be folded into `W`.
    pub fn is_mergeable(self) -> bool {
        matches!(self, Variant::Vanilla | Variant::MultiHeadSum)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::MultiAdapter => "multi_adapter",
            Variant::MultiHeadRouted => "multi_head_routed",
            Variant::MultiHeadRandomized => "multi_head_randomized",
            Variant::MultiHeadSum => "multi_head_sum",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_alpha() -> f64 {
    32.0
}

fn default_one() -> usize {
    1
}

/// Configuration of one adapted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub variant: Variant,
    pub rank: usize,
    #[serde(default = "default_one")]
    pub num_heads: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Experts kept per sample; only read by `MultiAdapter`.
    #[serde(default = "default_one")]
    pub top_k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AdapterSpec {
    pub fn new(variant: Variant, rank: usize, num_heads: usize) -> Self {
        Self {
            variant,
            rank,
            num_heads,
            alpha: default_alpha(),
            dropout: 0.0,
            top_k: num_heads.max(1),
            seed: 0,
        }
    }

    pub fn vanilla(rank: usize) -> Self {
        Self::new(Variant::Vanilla, rank, 1)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The `α/r` factor applied to every low-rank update.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be positive".into()));
        }
        if self.variant == Variant::Vanilla && self.num_heads != 1 {
            return Err(Error::Config(format!(
                "vanilla adapters have exactly one head, got num_heads = {}",
                self.num_heads
            )));
        }
        if self.variant == Variant::MultiAdapter && (self.top_k == 0 || self.top_k > self.num_heads) {
            return Err(Error::Config(format!(
                "top_k = {} must lie in [1, num_heads = {}]",
                self.top_k, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    /// Checks the spec against an `m×n` layer.
    pub fn validate_for(&self, m: usize, n: usize) -> Result<()> {
        self.validate()?;
        if self.rank > m.min(n) {
            return Err(Error::RankTooLarge { rank: self.rank, m, n });
        }
        Ok(())
    }
}

/// Trainable entries the spec adds to an `m×n` layer.
pub fn trainable_param_count(spec: &AdapterSpec, m: usize, n: usize) -> usize {
    let (r, heads) = (spec.rank, spec.num_heads);
    match spec.variant {
        Variant::Vanilla => r * (m + n),
        Variant::MultiHeadSum => r * n + heads * m * r,
        Variant::MultiHeadRouted | Variant::MultiHeadRandomized => r * n + heads * m * r + heads * n,
        Variant::MultiAdapter => heads * r * (m + n) + heads * n,
    }
}

/// Training or evaluation behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from `(seed, step, layer, head)`.
    Train { seed: u64, step: u64 },
}

/// Where a forward pass happens: mode plus the layer index used for dropout seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub layer: usize,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            layer: 0,
        }
    }

    pub fn train(seed: u64, step: u64, layer: usize) -> Self {
        Self {
            mode: Mode::Train { seed, step },
            layer,
        }
    }

    pub fn at_layer(self, layer: usize) -> Self {
        Self { layer, ..self }
    }
}

/// Learned matrices of one adapted layer plus its frozen base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub spec: AdapterSpec,
    /// Frozen `W`, `m×n`.
    pub base: Tensor,
    /// `A`, `r×n`: one shared matrix, or one per expert for `MultiAdapter`.
    pub down: Vec<Tensor>,
    /// `Bᵢ`, each `m×r`.
    pub heads: Vec<Tensor>,
    /// `W_r`, `N×n`.
    pub router: Option<Tensor>,
}

/// Tape handles of one adapter's tensors for a single forward pass.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub base: Var,
    pub down: Vec<Var>,
    pub heads: Vec<Var>,
    pub router: Option<Var>,
}

impl BoundAdapter {
    /// Trainable handles in [`AdapterState::params`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut v = self.down.clone();
        v.extend(&self.heads);
        v.extend(self.router);
        v
    }
}

/// Output of an adapter forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AdapterOutput {
    pub out: Var,
    /// Clean (dropout-free) `A·x`, `r×B`, for variants with a shared `A`.
    pub latent: Option<Var>,
}

/// `W′ = W + ΔW` for an input-independent `ΔW`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub merged: Tensor,
}

/// Initializes adapters around a frozen `base` of shape `m×n`.
///
/// `A ~ N(0, 1/n)`. Heads start at zero, except for the randomized and
/// summed variants whose heads are drawn from `N(0, 1e−4)` with one
/// independent stream per head. Routers start at zero.
pub fn init_adapter(spec: &AdapterSpec, base: Tensor, seed: u64) -> Result<AdapterState> {
    let &[m, n] = base.shape() else {
        return Err(Error::shape("init_adapter", base.shape(), &[]));
    };
    spec.validate_for(m, n)?;
    let r = spec.rank;
    let experts = if spec.variant.shares_down_projection() { 1 } else { spec.num_heads };
    let a_std = (1.0 / n as f64).sqrt();
    let down = (0..experts)
        .map(|e| {
            Tensor::randn(&[r, n], a_std, &mut stream(seed, &[0, e as u64])).with_requires_grad(true)
        })
        .collect();
    let random_heads = matches!(spec.variant, Variant::MultiHeadRandomized | Variant::MultiHeadSum);
    let heads = (0..spec.num_heads)
        .map(|i| {
            let t = if random_heads {
                Tensor::randn(&[m, r], RANDOM_HEAD_VARIANCE.sqrt(), &mut stream(seed, &[1, i as u64]))
            } else {
                Tensor::zeros(&[m, r])
            };
            t.with_requires_grad(true)
        })
        .collect();
    let router = spec
        .variant
        .has_router()
        .then(|| Tensor::zeros(&[spec.num_heads, n]).with_requires_grad(true));
    Ok(AdapterState {
        spec: spec.clone(),
        base: base.with_requires_grad(false),
        down,
        heads,
        router,
    })
}

impl AdapterState {
    pub fn dims(&self) -> (usize, usize) {
        (self.base.shape()[0], self.base.shape()[1])
    }

    /// Trainable tensors in a fixed order: down-projections, heads, router.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.down.iter().collect();
        v.extend(&self.heads);
        v.extend(&self.router);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.down.iter_mut().collect();
        v.extend(&mut self.heads);
        v.extend(&mut self.router);
        v
    }

    /// Number of entries with `requires_grad` set, counted from the realized tensors.
    pub fn trainable_entries(&self) -> usize {
        let mut all: Vec<&Tensor> = vec![&self.base];
        all.extend(self.params());
        all.iter().filter(|t| t.requires_grad()).map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapter {
        BoundAdapter {
            base: tape.leaf(&self.base),
            down: self.down.iter().map(|t| tape.leaf(t)).collect(),
            heads: self.heads.iter().map(|t| tape.leaf(t)).collect(),
            router: self.router.as_ref().map(|t| tape.leaf(t)),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let n = self.dims().1;
        if shape.len() != 2 || shape[0] != n {
            return Err(Error::shape("adapter forward", shape, &[n, 0]));
        }
        Ok(())
    }

    fn expect_variant(&self, op: &'static str, ok: &[Variant]) -> Result<()> {
        if ok.contains(&self.spec.variant) {
            Ok(())
        } else {
            Err(Error::Variant {
                op,
                variant: self.spec.variant.to_string(),
            })
        }
    }

    /// Inverted-dropout mask for one head, or `None` when dropout is inactive.
    fn dropout_mask(&self, ctx: ForwardCtx, head: usize, shape: &[usize]) -> Option<Tensor> {
        let p = self.spec.dropout;
        let Mode::Train { seed, step } = ctx.mode else { return None };
        if p == 0.0 {
            return None;
        }
        let mut rng = stream(seed, &[2, step, ctx.layer as u64, head as u64]);
        let keep = 1.0 / (1.0 - p);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Some(Tensor::new(shape, data).expect("mask shape"))
    }

    fn dropped(&self, tape: &mut Tape, latent: Var, ctx: ForwardCtx, head: usize) -> Result<Var> {
        let shape = tape.value(latent).shape().to_vec();
        match self.dropout_mask(ctx, head, &shape) {
            Some(mask) => {
                let m = tape.constant(mask);
                tape.mul(latent, m)
            }
            None => Ok(latent),
        }
    }

    fn finish(&self, tape: &mut Tape, bound: &BoundAdapter, x: Var, delta: Var) -> Result<Var> {
        let wx = tape.matmul(bound.base, x)?;
        let scaled = tape.scale(delta, self.spec.scaling())?;
        tape.add(wx, scaled)
    }

    /// `h = W·x + (α/r)·B·Dropout(A·x)`.
    pub fn vanilla_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundAdapter,
        x: Var,
        ctx: ForwardCtx,
    ) -> Result<AdapterOutput> {
        self.expect_variant("vanilla_forward", &[Variant::Vanilla])?;
        self.check_input(tape, x)?;
        let latent = tape.matmul(bound.down[0], x)?;
        let z = self.dropped(tape, latent, ctx, 0)?;
        let delta = tape.matmul(bound.heads[0], z)?;
        let out = self.finish(tape, bound, x, delta)?;
        Ok(AdapterOutput {
            out,
            latent: Some(latent),
        })
    }

    /// `h = W·x + (α/r)·Σ ωᵢ·Bᵢ·(A·x)` with `ω = softmax(W_r·x)` per column.
    ///
    /// The randomized variant applies an independent dropout mask per head
    /// to `A·x` during training.
    pub fn multihead_routed_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundAdapter,
        x: Var,
        ctx: ForwardCtx,
    ) -> Result<AdapterOutput> {
        self.expect_variant(
            "multihead_routed_forward",
            &[Variant::MultiHeadRouted, Variant::MultiHeadRandomized],
        )?;
        self.check_input(tape, x)?;
        let router = bound
            .router
            .ok_or_else(|| Error::State("routed variant without a router".into()))?;
        let logits = tape.matmul(router, x)?;
        let weights = tape.softmax_axis(logits, 0)?;
        let latent = tape.matmul(bound.down[0], x)?;
        let mut delta: Option<Var> = None;
        for (i, &head) in bound.heads.iter().enumerate() {
            let z = if self.spec.variant == Variant::MultiHeadRandomized {
                self.dropped(tape, latent, ctx, i)?
            } else {
                latent
            };
            let u = tape.matmul(head, z)?;
            let w = tape.select_row(weights, i)?;
            let c = tape.scale_columns(u, w)?;
            delta = Some(match delta {
                Some(d) => tape.add(d, c)?,
                None => c,
            });
        }
        let out = self.finish(tape, bound, x, delta.expect("at least one head"))?;
        Ok(AdapterOutput {
            out,
            latent: Some(latent),
        })
    }

    /// Top-K gated mixture of independent experts `Bᵢ·Aᵢ`.
    ///
    /// The softmax is taken over the K largest router logits of each column
    /// (ties go to the lower expert index); other experts get weight 0.
    pub fn multiadapter_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundAdapter,
        x: Var,
        _ctx: ForwardCtx,
    ) -> Result<AdapterOutput> {
        self.expect_variant("multiadapter_forward", &[Variant::MultiAdapter])?;
        self.check_input(tape, x)?;
        let (experts, k) = (self.spec.num_heads, self.spec.top_k);
        if k > experts {
            return Err(Error::Config(format!("top_k = {k} exceeds num_heads = {experts}")));
        }
        let router = bound
            .router
            .ok_or_else(|| Error::State("multi-adapter without a router".into()))?;
        let logits = tape.matmul(router, x)?;
        let mask = top_k_mask(tape.value(logits), k);
        let gates = tape.softmax_masked(logits, 0, Some(&mask))?;
        let mut delta: Option<Var> = None;
        for i in 0..experts {
            let ax = tape.matmul(bound.down[i], x)?;
            let u = tape.matmul(bound.heads[i], ax)?;
            let w = tape.select_row(gates, i)?;
            let c = tape.scale_columns(u, w)?;
            delta = Some(match delta {
                Some(d) => tape.add(d, c)?,
                None => c,
            });
        }
        let out = self.finish(tape, bound, x, delta.expect("at least one expert"))?;
        Ok(AdapterOutput { out, latent: None })
    }

    /// `h = W·x + (α/r)·(1/N)·Σᵢ Bᵢ·Dropoutᵢ(A·x)`; router-free.
    pub fn mlora_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundAdapter,
        x: Var,
        ctx: ForwardCtx,
    ) -> Result<AdapterOutput> {
        self.expect_variant("mlora_forward", &[Variant::MultiHeadSum])?;
        self.check_input(tape, x)?;
        let latent = tape.matmul(bound.down[0], x)?;
        let mut delta: Option<Var> = None;
        for (i, &head) in bound.heads.iter().enumerate() {
            let z = self.dropped(tape, latent, ctx, i)?;
            let u = tape.matmul(head, z)?;
            delta = Some(match delta {
                Some(d) => tape.add(d, u)?,
                None => u,
            });
        }
        let delta = tape.scale(delta.expect("at least one head"), 1.0 / bound.heads.len() as f64)?;
        let out = self.finish(tape, bound, x, delta)?;
        Ok(AdapterOutput {
            out,
            latent: Some(latent),
        })
    }

    /// Dispatches to the forward pass of this adapter's variant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundAdapter,
        x: Var,
        ctx: ForwardCtx,
    ) -> Result<AdapterOutput> {
        match self.spec.variant {
            Variant::Vanilla => self.vanilla_forward(tape, bound, x, ctx),
            Variant::MultiHeadRouted | Variant::MultiHeadRandomized => {
                self.multihead_routed_forward(tape, bound, x, ctx)
            }
            Variant::MultiAdapter => self.multiadapter_forward(tape, bound, x, ctx),
            Variant::MultiHeadSum => self.mlora_forward(tape, bound, x, ctx),
        }
    }

    /// Evaluation-mode forward on plain tensors.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, ForwardCtx::eval())?;
        Ok(tape.value(out.out).clone())
    }

    /// The input-independent weight delta `ΔW`, if this variant has one.
    pub fn delta_weight(&self) -> Result<Tensor> {
        let s = self.spec.scaling();
        match self.spec.variant {
            Variant::Vanilla => Ok(self.heads[0].matmul(&self.down[0])?.scale(s)),
            Variant::MultiHeadSum => {
                let mut sum = self.heads[0].clone().with_requires_grad(false);
                for h in &self.heads[1..] {
                    sum = sum.add(h)?;
                }
                let mean = sum.scale(1.0 / self.heads.len() as f64);
                Ok(mean.matmul(&self.down[0])?.scale(s))
            }
            _ => Err(Error::NotMergeable {
                reason: "input-dependent routing".into(),
            }),
        }
    }

    /// Folds the adapter into the base weight.
    ///
    /// The merged layer reproduces the evaluation-mode forward pass.
    pub fn merge(&self) -> Result<MergeResult> {
        let delta = self.delta_weight()?;
        Ok(MergeResult {
            merged: self.base.add(&delta)?.with_requires_grad(false),
        })
    }
}

/// Keeps the `k` largest entries of each column; ties go to the lower row.
pub fn top_k_mask(logits: &Tensor, k: usize) -> Vec<bool> {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut mask = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for j in 0..cols {
        order.clear();
        order.extend(0..rows);
        // Stable sort keeps lower indices first among equal logits.
        order.sort_by(|&a, &b| logits.at(b, j).total_cmp(&logits.at(a, j)));
        for &i in order.iter().take(k) {
            mask[i * cols + j] = true;
        }
    }
    mask
}
