//! Task adapters, attribute adapters with synthesized down-projections, and
//! the injector stack that chains them.
//!
//! Hidden states are row matrices `[n_tokens, d_h]`; every adapter acts on
//! each row independently. A down-projection weight is stored as
//! `[d_h, d_a]` and applied as `h · W`, mapping `R^{d_h} → R^{d_a}`.
//!
//! For one attribute label with embedding `z` the weight perturbation is
//!
//! ```text
//! g_weight(z) = Σ_{o=1..O} reshape(tanh((σ_o z) s_oᵀ ⊗ A_o))
//! ```
//!
//! where `σ_o: d_z → d_a`, `s_o ∈ R^{d_h/O²}` and `A_o ∈ R^{O×O}`; the
//! Kronecker product is `(d_a·O) × (d_h/O)` and is reshaped row-major to
//! `d_h × d_a`. Labels of a multi-label attribute are synthesized
//! separately and summed, then the shared `C_weight` / `c_bias` are added
//! once.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamLayout, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

/// How the labels of one attribute are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Synthesize per label, then sum.
    #[default]
    Post,
    /// Sum embeddings, then synthesize once.
    Pre,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    #[default]
    BiasAndWeight,
    /// Weight fixed to `C_weight`.
    BiasOnly,
    /// Bias fixed to `c_bias`.
    WeightOnly,
}

/// Construction of `g_weight`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSynthesis {
    /// Sum of Kronecker-expanded rank-one factors.
    #[default]
    Phm,
    /// A single rank-one `d_a × d_h` factor, reshaped.
    LowRankOnly,
    /// A dense `d_z × (d_h·d_a)` linear projection.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectorConfig {
    pub d_h: usize,
    pub d_a: usize,
    pub d_z: usize,
    /// Hypercomplex dimension count `O`.
    pub n_dims: usize,
    pub r_drop: f64,
    pub aggregation: Aggregation,
    pub injection: InjectionMode,
    pub synthesis: WeightSynthesis,
    /// Without it attribute adapters act directly on the sublayer output.
    pub task_adapter: bool,
    pub activation: Activation,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        Self {
            d_h: 768,
            d_a: 64,
            d_z: 768,
            n_dims: 4,
            r_drop: 0.2,
            aggregation: Aggregation::Post,
            injection: InjectionMode::BiasAndWeight,
            synthesis: WeightSynthesis::Phm,
            task_adapter: true,
            activation: Activation::Gelu,
        }
    }
}

impl InjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_a == 0 || self.d_z == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_a >= self.d_h {
            return Err(Error::Config(format!(
                "adapter width d_a = {} must be smaller than d_h = {}",
                self.d_a, self.d_h
            )));
        }
        check_dims(self.d_h, self.n_dims)?;
        if !(0.0..=1.0).contains(&self.r_drop) {
            return Err(Error::Config(format!(
                "r_drop = {} is not a probability",
                self.r_drop
            )));
        }
        Ok(())
    }

    /// `d_h / O²`, the length of each `s_o`.
    pub fn s_len(&self) -> usize {
        self.d_h / (self.n_dims * self.n_dims)
    }
}

fn check_dims(d_h: usize, n_dims: usize) -> Result<()> {
    if n_dims == 0 {
        return Err(Error::Config(
            "hypercomplex dimension count O must be at least 1".into(),
        ));
    }
    if !d_h.is_multiple_of(n_dims * n_dims) {
        return Err(Error::Config(format!(
            "O² = {} must divide d_h = {d_h}",
            n_dims * n_dims
        )));
    }
    Ok(())
}

fn activate<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, f: Activation) -> Var {
    match f {
        Activation::Gelu => ctx.tape.gelu(x),
        Activation::Relu => ctx.tape.relu(x),
        Activation::Tanh => ctx.tape.tanh(x),
        Activation::Identity => x,
    }
}

/// Bottleneck adapter with learned down- and up-projections.
#[derive(Clone, Debug)]
pub struct TaskAdapter {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl TaskAdapter {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, d_h: usize, d_a: usize) -> Self {
        let g = ParamGroup::TaskAdapter;
        Self {
            down_w: layout.add(format!("{prefix}.down_w"), [d_h, d_a], g, Init::fan_in(d_h)),
            down_b: layout.add(format!("{prefix}.down_b"), [d_a], g, Init::fan_in(d_h)),
            up_w: layout.add(format!("{prefix}.up_w"), [d_a, d_h], g, Init::Zeros),
            up_b: layout.add(format!("{prefix}.up_b"), [d_h], g, Init::Zeros),
        }
    }
}

/// `FFNet_up(f(FFNet_down(h))) + h`.
pub fn adapt<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    h: Var,
    adapter: &TaskAdapter,
    f: Activation,
) -> Result<Var> {
    let (w, b) = (ctx.p(adapter.down_w), ctx.p(adapter.down_b));
    let down = ctx.tape.matmul(h, w)?;
    let down = ctx.tape.add_row_bias(down, b)?;
    up_project(ctx, h, down, adapter.up_w, adapter.up_b, f)
}

fn up_project<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    h: Var,
    down: Var,
    up_w: ParamId,
    up_b: ParamId,
    f: Activation,
) -> Result<Var> {
    let act = activate(ctx, down, f);
    let (uw, ub) = (ctx.p(up_w), ctx.p(up_b));
    let up = ctx.tape.matmul(act, uw)?;
    let up = ctx.tape.add_row_bias(up, ub)?;
    ctx.tape.add(up, h)
}

/// Learned tensors that turn attribute embeddings into a down-projection.
#[derive(Clone, Debug)]
pub struct PhmSynthesizer {
    pub synthesis: WeightSynthesis,
    pub d_h: usize,
    pub d_a: usize,
    pub n_dims: usize,
    /// `σ_o`, each `[d_z, d_a]`.
    pub sigma: Vec<ParamId>,
    /// `s_o`, each `[d_h / O²]` (one `[d_h]` vector for low-rank-only).
    pub s: Vec<ParamId>,
    /// `A_o`, each `[O, O]`.
    pub a: Vec<ParamId>,
    /// Dense `[d_z, d_h·d_a]` projection, naive synthesis only.
    pub dense: Option<ParamId>,
    pub c_weight: ParamId,
    pub g_bias: ParamId,
    pub c_bias: ParamId,
}

impl PhmSynthesizer {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, cfg: &InjectorConfig) -> Self {
        let g = ParamGroup::AttrAdapter;
        let (d_h, d_a, d_z, o) = (cfg.d_h, cfg.d_a, cfg.d_z, cfg.n_dims);
        let mut sigma = Vec::new();
        let mut s = Vec::new();
        let mut a = Vec::new();
        let mut dense = None;
        match cfg.synthesis {
            WeightSynthesis::Phm => {
                for i in 1..=o {
                    sigma.push(layout.add(
                        format!("{prefix}.sigma_{i}"),
                        [d_z, d_a],
                        g,
                        Init::fan_in(d_z),
                    ));
                }
                for i in 1..=o {
                    s.push(layout.add(
                        format!("{prefix}.s_{i}"),
                        [cfg.s_len()],
                        g,
                        Init::fan_in(cfg.s_len()),
                    ));
                }
                for i in 1..=o {
                    a.push(layout.add(format!("{prefix}.A_{i}"), [o, o], g, Init::fan_in(o)));
                }
            }
            WeightSynthesis::LowRankOnly => {
                sigma.push(layout.add(
                    format!("{prefix}.sigma_1"),
                    [d_z, d_a],
                    g,
                    Init::fan_in(d_z),
                ));
                s.push(layout.add(format!("{prefix}.s_1"), [d_h], g, Init::fan_in(d_h)));
            }
            WeightSynthesis::Naive => {
                dense = Some(layout.add(
                    format!("{prefix}.g_weight"),
                    [d_z, d_h * d_a],
                    g,
                    Init::fan_in(d_z),
                ));
            }
        }
        Self {
            synthesis: cfg.synthesis,
            d_h,
            d_a,
            n_dims: o,
            sigma,
            s,
            a,
            dense,
            c_weight: layout.add(
                format!("{prefix}.C_weight"),
                [d_h, d_a],
                g,
                Init::fan_in(d_h),
            ),
            g_bias: layout.add(format!("{prefix}.g_bias"), [d_z, d_a], g, Init::fan_in(d_z)),
            c_bias: layout.add(format!("{prefix}.c_bias"), [d_a], g, Init::fan_in(d_h)),
        }
    }
}

fn as_row<T: Scalar>(ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
    match *ctx.tape.shape(z) {
        [n] => ctx.tape.reshape(z, [1, n]),
        [1, _] => Ok(z),
        ref s => Err(shape_err(
            "attribute embedding",
            format!("expected a vector, got {s:?}"),
        )),
    }
}

fn as_vector<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let n = ctx.tape.value(x).numel();
    if ctx.tape.shape(x) == [n] {
        Ok(x)
    } else {
        ctx.tape.reshape(x, [n])
    }
}

/// `[σ_1 z, …, σ_O z]`, each a length-`d_a` vector.
pub fn hypercomplex_project<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    z: Var,
    sigma: &[ParamId],
) -> Result<Vec<Var>> {
    let z = as_row(ctx, z)?;
    sigma
        .iter()
        .map(|&p| {
            let w = ctx.p(p);
            let y = ctx.tape.matmul(z, w)?;
            as_vector(ctx, y)
        })
        .collect()
}

/// `S_o = ẑ_o s_oᵀ`.
pub fn low_rank_outer<T: Scalar>(ctx: &mut Ctx<'_, T>, z_hat: Var, s: Var) -> Result<Var> {
    let z_hat = as_vector(ctx, z_hat)?;
    ctx.tape.outer(z_hat, s)
}

/// `reshape(tanh(S_o ⊗ A_o))` to `[d_h, d_a]`, row-major.
pub fn kron_expand<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    s_o: Var,
    a_o: Var,
    d_h: usize,
    d_a: usize,
) -> Result<Var> {
    let k = ctx.tape.kron(s_o, a_o)?;
    if ctx.tape.value(k).numel() != d_h * d_a {
        return Err(shape_err(
            "kron_expand",
            format!(
                "Kronecker product {:?} cannot be reshaped to [{d_h}, {d_a}]",
                ctx.tape.shape(k)
            ),
        ));
    }
    let t = ctx.tape.tanh(k);
    ctx.tape.reshape(t, [d_h, d_a])
}

/// `g_weight(z)` for one embedding.
pub fn g_weight<T: Scalar>(ctx: &mut Ctx<'_, T>, z: Var, syn: &PhmSynthesizer) -> Result<Var> {
    let (d_h, d_a) = (syn.d_h, syn.d_a);
    match syn.synthesis {
        WeightSynthesis::Phm => {
            let z_hat = hypercomplex_project(ctx, z, &syn.sigma)?;
            let mut terms = Vec::with_capacity(syn.n_dims);
            for ((zo, &s), &a) in z_hat.into_iter().zip(&syn.s).zip(&syn.a) {
                let (s, a) = (ctx.p(s), ctx.p(a));
                let s_o = low_rank_outer(ctx, zo, s)?;
                terms.push(kron_expand(ctx, s_o, a, d_h, d_a)?);
            }
            ctx.tape.add_n(&terms)
        }
        WeightSynthesis::LowRankOnly => {
            let z_hat = hypercomplex_project(ctx, z, &syn.sigma)?;
            let s = ctx.p(syn.s[0]);
            let outer = low_rank_outer(ctx, z_hat[0], s)?;
            let t = ctx.tape.tanh(outer);
            ctx.tape.reshape(t, [d_h, d_a])
        }
        WeightSynthesis::Naive => {
            let dense = syn
                .dense
                .expect("naive synthesis declares a dense projection");
            let z = as_row(ctx, z)?;
            let w = ctx.p(dense);
            let flat = ctx.tape.matmul(z, w)?;
            ctx.tape.reshape(flat, [d_h, d_a])
        }
    }
}

/// Sum of `g_weight` over the `O` hypercomplex dimensions; alias kept for
/// call sites that name the summation explicitly.
pub fn g_weight_sum<T: Scalar>(ctx: &mut Ctx<'_, T>, z: Var, syn: &PhmSynthesizer) -> Result<Var> {
    g_weight(ctx, z, syn)
}

fn g_bias<T: Scalar>(ctx: &mut Ctx<'_, T>, z: Var, syn: &PhmSynthesizer) -> Result<Var> {
    let z = as_row(ctx, z)?;
    let g = ctx.p(syn.g_bias);
    let y = ctx.tape.matmul(z, g)?;
    as_vector(ctx, y)
}

/// Labels ordered by embedding value, so sums do not depend on the order
/// labels were supplied in.
fn canonical<T: Scalar>(ctx: &Ctx<'_, T>, z_embs: &[Var]) -> Vec<Var> {
    let mut v = z_embs.to_vec();
    v.sort_by(|&a, &b| {
        let (x, y) = (ctx.tape.value(a).data(), ctx.tape.value(b).data());
        x.iter()
            .zip(y)
            .map(|(p, q)| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

fn aggregate<T: Scalar, F>(
    ctx: &mut Ctx<'_, T>,
    z_embs: &[Var],
    mode: Aggregation,
    constant: ParamId,
    mut synth: F,
) -> Result<Var>
where
    F: FnMut(&mut Ctx<'_, T>, Var) -> Result<Var>,
{
    let c = ctx.p(constant);
    if z_embs.is_empty() {
        return Ok(c);
    }
    let z_embs = canonical(ctx, z_embs);
    let summed = match mode {
        Aggregation::Post => {
            let parts = z_embs
                .iter()
                .map(|&z| synth(ctx, z))
                .collect::<Result<Vec<_>>>()?;
            ctx.tape.add_n(&parts)?
        }
        Aggregation::Pre => {
            let z = ctx.tape.add_n(&z_embs)?;
            synth(ctx, z)?
        }
    };
    ctx.tape.add(summed, c)
}

/// `b_z = Σ_k g_bias(z_k) + c_bias` (post) or `g_bias(Σ_k z_k) + c_bias` (pre).
pub fn synthesize_bias<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    z_embs: &[Var],
    syn: &PhmSynthesizer,
    mode: Aggregation,
) -> Result<Var> {
    aggregate(ctx, z_embs, mode, syn.c_bias, |ctx, z| g_bias(ctx, z, syn))
}

/// `W_z = Σ_k g_weight(z_k) + C_weight` (post) or `g_weight(Σ_k z_k) + C_weight` (pre).
pub fn synthesize_weight<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    z_embs: &[Var],
    syn: &PhmSynthesizer,
    mode: Aggregation,
) -> Result<Var> {
    aggregate(ctx, z_embs, mode, syn.c_weight, |ctx, z| {
        g_weight(ctx, z, syn)
    })
}

/// Adapter whose down-projection is synthesized from one attribute.
#[derive(Clone, Debug)]
pub struct AttrAdapter {
    pub attribute: String,
    pub synthesizer: PhmSynthesizer,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl AttrAdapter {
    pub fn declare(
        layout: &mut ParamLayout,
        prefix: &str,
        attribute: &str,
        cfg: &InjectorConfig,
    ) -> Self {
        let synthesizer = PhmSynthesizer::declare(layout, prefix, cfg);
        let g = ParamGroup::AttrAdapter;
        Self {
            attribute: attribute.to_string(),
            synthesizer,
            up_w: layout.add(format!("{prefix}.up_w"), [cfg.d_a, cfg.d_h], g, Init::Zeros),
            up_b: layout.add(format!("{prefix}.up_b"), [cfg.d_h], g, Init::Zeros),
        }
    }

    /// Synthesized `(W, b)` for the given embeddings, evaluated without
    /// gradient tracking.
    pub fn synthesize<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_embs: &[Tensor<T>],
        cfg: &InjectorConfig,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut ctx = Ctx::new(store, None);
        let zs: Vec<Var> = z_embs
            .iter()
            .map(|z| ctx.tape.constant(z.clone()))
            .collect();
        let (w, b) = synthesized_projection(&mut ctx, &zs, self, cfg)?;
        Ok((ctx.tape.value(w).clone(), ctx.tape.value(b).clone()))
    }
}

fn synthesized_projection<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    z_embs: &[Var],
    adapter: &AttrAdapter,
    cfg: &InjectorConfig,
) -> Result<(Var, Var)> {
    let syn = &adapter.synthesizer;
    let w = match cfg.injection {
        InjectionMode::BiasOnly => ctx.p(syn.c_weight),
        _ => synthesize_weight(ctx, z_embs, syn, cfg.aggregation)?,
    };
    let b = match cfg.injection {
        InjectionMode::WeightOnly => ctx.p(syn.c_bias),
        _ => synthesize_bias(ctx, z_embs, syn, cfg.aggregation)?,
    };
    Ok((w, b))
}

/// `FFNet_up(f(h · W_z + b_z)) + h`.
pub fn attr_adapt<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    h: Var,
    z_embs: &[Var],
    adapter: &AttrAdapter,
    cfg: &InjectorConfig,
) -> Result<Var> {
    let (w, b) = synthesized_projection(ctx, z_embs, adapter, cfg)?;
    let down = ctx.tape.matmul(h, w)?;
    let down = ctx.tape.add_row_bias(down, b)?;
    up_project(ctx, h, down, adapter.up_w, adapter.up_b, cfg.activation)
}

/// A task adapter followed by one attribute adapter per attribute.
#[derive(Clone, Debug)]
pub struct InjectorBlock {
    pub task_adapter: Option<TaskAdapter>,
    pub attr_adapters: Vec<AttrAdapter>,
}

impl InjectorBlock {
    pub fn declare(
        layout: &mut ParamLayout,
        prefix: &str,
        attributes: &[&str],
        cfg: &InjectorConfig,
    ) -> Self {
        let task_adapter = cfg
            .task_adapter
            .then(|| TaskAdapter::declare(layout, &format!("{prefix}.task"), cfg.d_h, cfg.d_a));
        let attr_adapters = attributes
            .iter()
            .map(|name| AttrAdapter::declare(layout, &format!("{prefix}.attr.{name}"), name, cfg))
            .collect();
        Self {
            task_adapter,
            attr_adapters,
        }
    }
}

/// `h' = adapt(h)`, then `h_{z_j} = attr_adapt(h_{z_{j-1}}, z_j)` in
/// schema order. `z_embs[j]` holds the embeddings of attribute `j`.
pub fn inject<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    h: Var,
    z_embs: &[Vec<Var>],
    block: &InjectorBlock,
    cfg: &InjectorConfig,
) -> Result<Var> {
    if z_embs.len() != block.attr_adapters.len() {
        return Err(Error::Schema(format!(
            "{} attribute embedding sets for {} attribute adapters",
            z_embs.len(),
            block.attr_adapters.len()
        )));
    }
    let mut h = match &block.task_adapter {
        Some(t) => adapt(ctx, h, t, cfg.activation)?,
        None => h,
    };
    for (adapter, zs) in block.attr_adapters.iter().zip(z_embs) {
        h = attr_adapt(ctx, h, zs, adapter, cfg)?;
    }
    Ok(h)
}

/// Eager `Σ_o S_o ⊗ A_o` before tanh and reshape, plus the individual
/// terms; used for rank analysis.
pub fn phm_kron_terms<T: Scalar>(
    store: &ParamStore<T>,
    syn: &PhmSynthesizer,
    z: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if syn.synthesis != WeightSynthesis::Phm {
        return Err(Error::Config(
            "Kronecker terms exist only for PHM synthesis".into(),
        ));
    }
    let z = z.reshape([1, z.numel()])?;
    let mut terms = Vec::with_capacity(syn.n_dims);
    for o in 0..syn.n_dims {
        let z_hat = z.matmul(store.get(syn.sigma[o]))?.reshape([syn.d_a])?;
        let s_o = Tensor::outer(&z_hat, store.get(syn.s[o]))?;
        terms.push(Tensor::kron(&s_o, store.get(syn.a[o]))?);
    }
    let mut sum = terms[0].clone();
    for t in &terms[1..] {
        sum.add_assign(t)?;
    }
    Ok((sum, terms))
}

/// Parameter counts of the attribute machinery for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    /// `d_z · d_h · d_a`: a dense projection of `z` onto `W`.
    pub naive_weight_synthesis: u64,
    /// `O · (d_z·d_a + d_h/O² + O²)`.
    pub phm_weight_synthesis: u64,
    pub ratio: f64,
    pub task_adapter: u64,
    pub attr_adapter: AttrAdapterCounts,
    /// One injector with `n_attributes` attribute adapters.
    pub injector_block: u64,
    pub n_attributes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrAdapterCounts {
    pub weight_synthesis: u64,
    pub c_weight: u64,
    pub g_bias: u64,
    pub c_bias: u64,
    pub up: u64,
    pub total: u64,
}

/// Weight-synthesis parameter counts `(naive, phm)` for raw dimensions.
/// Only `O² | d_h` is required.
pub fn weight_synthesis_counts(
    d_z: usize,
    d_h: usize,
    d_a: usize,
    n_dims: usize,
) -> Result<(u64, u64)> {
    check_dims(d_h, n_dims)?;
    let (d_z, d_h, d_a, o) = (d_z as u64, d_h as u64, d_a as u64, n_dims as u64);
    Ok((d_z * d_h * d_a, o * (d_z * d_a + d_h / (o * o) + o * o)))
}

/// Closed-form parameter report. With `naive`, attribute adapters are
/// counted with the dense projection in place of PHM synthesis.
pub fn count_parameters(
    cfg: &InjectorConfig,
    n_attributes: usize,
    naive: bool,
) -> Result<ParameterReport> {
    let (naive_count, phm) = weight_synthesis_counts(cfg.d_z, cfg.d_h, cfg.d_a, cfg.n_dims)?;
    let (d_h, d_a, d_z) = (cfg.d_h as u64, cfg.d_a as u64, cfg.d_z as u64);
    let weight_synthesis = if naive {
        naive_count
    } else {
        match cfg.synthesis {
            WeightSynthesis::Phm => phm,
            WeightSynthesis::LowRankOnly => d_z * d_a + d_h,
            WeightSynthesis::Naive => naive_count,
        }
    };
    let attr = AttrAdapterCounts {
        weight_synthesis,
        c_weight: d_h * d_a,
        g_bias: d_z * d_a,
        c_bias: d_a,
        up: d_a * d_h + d_h,
        total: weight_synthesis + d_h * d_a + d_z * d_a + d_a + d_a * d_h + d_h,
    };
    let task_adapter = if cfg.task_adapter {
        d_h * d_a + d_a + d_a * d_h + d_h
    } else {
        0
    };
    Ok(ParameterReport {
        naive_weight_synthesis: naive_count,
        phm_weight_synthesis: phm,
        ratio: naive_count as f64 / phm as f64,
        task_adapter,
        injector_block: task_adapter + n_attributes as u64 * attr.total,
        attr_adapter: attr,
        n_attributes,
    })
}
