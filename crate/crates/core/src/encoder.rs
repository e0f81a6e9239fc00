//! Small post-norm transformer encoder with injector insertion points after
//! every sublayer, classification heads, and the Tokens comparator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeAssignment, AttributeSchema};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_store, GradCheckConfig, GradCheckReport};
use crate::injector::{inject, InjectorBlock, InjectorConfig};
use crate::params::{Ctx, Init, ParamGroup, ParamId, ParamLayout, ParamSpec, ParamStore};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;
use crate::text::CLS_ID;

/// Which comparator a model realises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder and classifier only.
    Plain,
    /// Task adapters after every sublayer, no attributes.
    Adapters,
    /// Task adapter plus one attribute adapter per attribute.
    #[default]
    Injectors,
    /// Plain encoder reading attributes as prepended tokens.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Text vocabulary size, special tokens included.
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    /// Classes per task; more than one entry means one head per task.
    pub class_counts: Vec<usize>,
    /// Optional per-task class weights for the cross-entropy.
    pub class_weights: Option<Vec<Vec<f64>>>,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            max_len: 128,
            d_h: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            dropout_rate: 0.1,
            class_counts: vec![2],
            class_weights: None,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Dimensions of the 12-layer, 768-wide encoder the injector defaults
    /// are sized for.
    pub fn base_size(class_counts: Vec<usize>) -> Self {
        Self {
            vocab_size: 30_522,
            max_len: 512,
            d_h: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            dropout_rate: 0.1,
            class_counts,
            class_weights: None,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.max_len < 1 || self.d_h == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_h = {} is not divisible by n_heads = {}",
                self.d_h, self.n_heads
            )));
        }
        if self.class_counts.is_empty() || self.class_counts.iter().any(|&n| n < 2) {
            return Err(Error::Config(
                "every task needs at least two classes".into(),
            ));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.class_counts.len()
                || w.iter()
                    .zip(&self.class_counts)
                    .any(|(w, &n)| w.len() != n || w.iter().any(|&x| x < 0.0))
            {
                return Err(Error::Config(
                    "class_weights must give one nonnegative weight per class per task".into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_weight(&self, task: usize, class: usize) -> f64 {
        self.class_weights.as_ref().map_or(1.0, |w| w[task][class])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub injector: InjectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            kind: ModelKind::Injectors,
            injector: InjectorConfig {
                d_h: encoder.d_h,
                d_a: 8,
                d_z: encoder.d_h,
                n_dims: 2,
                ..InjectorConfig::default()
            },
            encoder,
        }
    }
}

impl ModelConfig {
    /// Injector model over the 12-layer, 768-wide encoder.
    pub fn base_size(class_counts: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Injectors,
            encoder: EncoderConfig::base_size(class_counts),
            injector: InjectorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if matches!(self.kind, ModelKind::Adapters | ModelKind::Injectors) {
            self.injector.validate()?;
            if self.injector.d_h != self.encoder.d_h {
                return Err(Error::Config(format!(
                    "injector d_h = {} differs from encoder d_h = {}",
                    self.injector.d_h, self.encoder.d_h
                )));
            }
        }
        Ok(())
    }

    pub fn uses_attributes(&self) -> bool {
        matches!(self.kind, ModelKind::Injectors | ModelKind::Tokens)
    }
}

#[derive(Clone, Debug)]
struct Head {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    heads: Vec<Head>,
    out_b: ParamId,
    ln1: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2: (ParamId, ParamId),
    attn_injector: Option<InjectorBlock>,
    ffn_injector: Option<InjectorBlock>,
}

/// Network structure with parameter handles; values live in a
/// [`ParamStore`] built from [`Model::layout`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    layout: ParamLayout,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln: (ParamId, ParamId),
    layers: Vec<Layer>,
    attr_emb: Vec<ParamId>,
    attr_tok: Option<(ParamId, Vec<usize>)>,
    classifiers: Vec<(ParamId, ParamId)>,
}

const EMBEDDING_STD: f64 = 0.02;
const ATTR_EMB_STD: f64 = 0.02;

/// Stand-in pretrained matrices keep unit gain at any width.
fn scaled(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

fn ln(layout: &mut ParamLayout, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        layout.add(
            format!("{prefix}.gamma"),
            [d],
            ParamGroup::LayerNorm,
            Init::Ones,
        ),
        layout.add(
            format!("{prefix}.beta"),
            [d],
            ParamGroup::LayerNorm,
            Init::Zeros,
        ),
    )
}

impl Model {
    /// Declares every parameter; allocates nothing.
    pub fn new(config: ModelConfig, schema: AttributeSchema) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        if config.kind == ModelKind::Injectors && schema.d_z != config.injector.d_z {
            return Err(Error::Config(format!(
                "schema d_z = {} differs from injector d_z = {}",
                schema.d_z, config.injector.d_z
            )));
        }
        let e = &config.encoder;
        let (d, dk) = (e.d_h, e.d_h / e.n_heads);
        let mut layout = ParamLayout::new();
        let bb = ParamGroup::Backbone;
        let emb = Init::Normal(EMBEDDING_STD);
        let tok_emb = layout.add(
            "embeddings.token",
            [e.vocab_size, d],
            ParamGroup::Embedding,
            emb,
        );
        let pos_emb = layout.add(
            "embeddings.position",
            [e.max_len, d],
            ParamGroup::Embedding,
            emb,
        );
        let emb_ln = ln(&mut layout, "embeddings.ln", d);
        let names: Vec<&str> = schema.attributes.iter().map(|a| a.name.as_str()).collect();
        let mut inj_cfg = config.injector.clone();
        let injector_attrs: &[&str] = match config.kind {
            ModelKind::Injectors => &names,
            ModelKind::Adapters => {
                inj_cfg.task_adapter = true;
                &[]
            }
            _ => &[],
        };
        let with_injectors = matches!(config.kind, ModelKind::Injectors | ModelKind::Adapters);
        let mut layers = Vec::with_capacity(e.n_layers);
        for l in 0..e.n_layers {
            let p = format!("layer{l}");
            let heads = (0..e.n_heads)
                .map(|h| Head {
                    q_w: layout.add(format!("{p}.attn.q_w.{h}"), [d, dk], bb, scaled(d)),
                    q_b: layout.add(format!("{p}.attn.q_b.{h}"), [dk], bb, Init::Zeros),
                    k_w: layout.add(format!("{p}.attn.k_w.{h}"), [d, dk], bb, scaled(d)),
                    k_b: layout.add(format!("{p}.attn.k_b.{h}"), [dk], bb, Init::Zeros),
                    v_w: layout.add(format!("{p}.attn.v_w.{h}"), [d, dk], bb, scaled(d)),
                    v_b: layout.add(format!("{p}.attn.v_b.{h}"), [dk], bb, Init::Zeros),
                    o_w: layout.add(format!("{p}.attn.o_w.{h}"), [dk, d], bb, scaled(d)),
                })
                .collect();
            let out_b = layout.add(format!("{p}.attn.o_b"), [d], bb, Init::Zeros);
            let attn_injector = with_injectors.then(|| {
                InjectorBlock::declare(
                    &mut layout,
                    &format!("{p}.attn.injector"),
                    injector_attrs,
                    &inj_cfg,
                )
            });
            let ln1 = ln(&mut layout, &format!("{p}.attn.ln"), d);
            let ff_w1 = layout.add(format!("{p}.ffn.w1"), [d, e.d_ff], bb, scaled(d));
            let ff_b1 = layout.add(format!("{p}.ffn.b1"), [e.d_ff], bb, Init::Zeros);
            let ff_w2 = layout.add(format!("{p}.ffn.w2"), [e.d_ff, d], bb, scaled(e.d_ff));
            let ff_b2 = layout.add(format!("{p}.ffn.b2"), [d], bb, Init::Zeros);
            let ffn_injector = with_injectors.then(|| {
                InjectorBlock::declare(
                    &mut layout,
                    &format!("{p}.ffn.injector"),
                    injector_attrs,
                    &inj_cfg,
                )
            });
            let ln2 = ln(&mut layout, &format!("{p}.ffn.ln"), d);
            layers.push(Layer {
                heads,
                out_b,
                ln1,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2,
                attn_injector,
                ffn_injector,
            });
        }
        let attr_emb = if config.kind == ModelKind::Injectors {
            schema
                .attributes
                .iter()
                .map(|a| {
                    layout.add(
                        format!("attr_emb.{}", a.name),
                        [a.vocab_size, schema.d_z],
                        ParamGroup::AttrEmbedding,
                        Init::Normal(ATTR_EMB_STD),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let attr_tok = (config.kind == ModelKind::Tokens && !schema.is_empty()).then(|| {
            let mut offsets = Vec::with_capacity(schema.len());
            let mut total = 0;
            for a in &schema.attributes {
                offsets.push(total);
                total += a.vocab_size;
            }
            let id = layout.add(
                "attr_tokens",
                [total, d],
                ParamGroup::AttrToken,
                Init::Normal(EMBEDDING_STD),
            );
            (id, offsets)
        });
        let classifiers = e
            .class_counts
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                (
                    layout.add(
                        format!("head.{t}.w"),
                        [d, n],
                        ParamGroup::Classifier,
                        Init::fan_in(d),
                    ),
                    layout.add(
                        format!("head.{t}.b"),
                        [n],
                        ParamGroup::Classifier,
                        Init::Zeros,
                    ),
                )
            })
            .collect();
        Ok(Self {
            config,
            schema,
            layout,
            tok_emb,
            pos_emb,
            emb_ln,
            layers,
            attr_emb,
            attr_tok,
            classifiers,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Fresh parameters. Embedding, backbone and layer-norm tensors are
    /// drawn from `backbone_seed` alone, so every model kind built with the
    /// same seed and encoder shares one backbone.
    pub fn init_params<T: Scalar>(&self, backbone_seed: u64, seed: u64) -> ParamStore<T> {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(backbone_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamStore::init_split(
            self.layout.clone(),
            &mut backbone_rng,
            &mut rng,
            is_backbone,
        )
    }

    pub fn n_tasks(&self) -> usize {
        self.config.encoder.n_tasks()
    }

    pub fn attr_embedding(&self, j: usize) -> Option<ParamId> {
        self.attr_emb.get(j).copied()
    }

    /// Final sequence fed to the encoder: `[CLS]`, attribute tokens (Tokens
    /// kind only, offset past the text vocabulary), then text truncated to
    /// fit `max_len`.
    pub fn input_sequence(
        &self,
        tokens: &[usize],
        attrs: &AttributeAssignment,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let e = &self.config.encoder;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= e.vocab_size) {
            return Err(Error::UnknownToken {
                id: bad,
                vocab_size: e.vocab_size,
            });
        }
        let mut attr_ids = Vec::new();
        if let Some((_, offsets)) = &self.attr_tok {
            attrs.validate(&self.schema)?;
            for (j, ids) in attrs.all().iter().enumerate() {
                attr_ids.extend(ids.iter().map(|&id| offsets[j] + id));
            }
            attr_ids.truncate(e.max_len - 1);
        }
        let room = e.max_len - 1 - attr_ids.len();
        let text = tokens[..tokens.len().min(room)].to_vec();
        Ok((attr_ids, text))
    }

    fn embed<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
    ) -> Result<Var> {
        let (attr_ids, text) = self.input_sequence(tokens, attrs)?;
        let tok = ctx.p(self.tok_emb);
        let mut parts = vec![ctx.tape.gather_rows(tok, &[CLS_ID])?];
        if !attr_ids.is_empty() {
            let (table, _) = self
                .attr_tok
                .as_ref()
                .expect("attribute ids imply a token table");
            let t = ctx.p(*table);
            parts.push(ctx.tape.gather_rows(t, &attr_ids)?);
        }
        if !text.is_empty() {
            parts.push(ctx.tape.gather_rows(tok, &text)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            ctx.tape.concat_rows(&parts)?
        };
        let len = ctx.tape.shape(x)[0];
        let pos = ctx.p(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let p = ctx.tape.gather_rows(pos, &positions)?;
        ctx.tape.add(x, p)
    }

    fn attribute_embeddings<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        attrs: &AttributeAssignment,
    ) -> Result<Vec<Vec<Var>>> {
        if self.config.kind != ModelKind::Injectors {
            return Ok(Vec::new());
        }
        attrs.validate(&self.schema)?;
        let mut out = Vec::with_capacity(self.schema.len());
        for (j, &table) in self.attr_emb.iter().enumerate() {
            let t = ctx.p(table);
            let rows = attrs
                .labels(j)
                .iter()
                .map(|&id| ctx.tape.gather_rows(t, &[id]))
                .collect::<Result<Vec<_>>>()?;
            out.push(rows);
        }
        Ok(out)
    }

    /// Pooled first-position representation, shape `[1, d_h]`.
    ///
    /// With `rng`, dropout is active (training mode).
    pub fn encode<T: Scalar, R: Rng>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let e = &self.config.encoder;
        let eps: T = c(e.layer_norm_eps);
        let drop = e.dropout_rate;
        let mut dropout = |ctx: &mut Ctx<'_, T>, x: Var| match rng.as_deref_mut() {
            Some(r) => ctx.tape.dropout(x, drop, r),
            None => x,
        };
        let z_embs = self.attribute_embeddings(ctx, attrs)?;
        let x = self.embed(ctx, tokens, attrs)?;
        let (g, b) = (ctx.p(self.emb_ln.0), ctx.p(self.emb_ln.1));
        let x = ctx.tape.layer_norm(x, g, b, eps)?;
        let mut x = dropout(ctx, x);
        let scale: T = c(1.0 / ((e.d_h / e.n_heads) as f64).sqrt());
        for layer in &self.layers {
            let mut head_outs = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let q = linear(ctx, x, h.q_w, h.q_b)?;
                let k = linear(ctx, x, h.k_w, h.k_b)?;
                let v = linear(ctx, x, h.v_w, h.v_b)?;
                let scores = ctx.tape.matmul_nt(q, k)?;
                let scores = ctx.tape.scale(scores, scale);
                let attn = ctx.tape.softmax_rows(scores)?;
                let ctxv = ctx.tape.matmul(attn, v)?;
                let o = ctx.p(h.o_w);
                head_outs.push(ctx.tape.matmul(ctxv, o)?);
            }
            let a = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                ctx.tape.add_n(&head_outs)?
            };
            let ob = ctx.p(layer.out_b);
            let a = ctx.tape.add_row_bias(a, ob)?;
            let a = dropout(ctx, a);
            let a = match &layer.attn_injector {
                Some(block) => inject(
                    ctx,
                    a,
                    &z_embs_for(block, &z_embs),
                    block,
                    &self.config.injector,
                )?,
                None => a,
            };
            let r = ctx.tape.add(x, a)?;
            let (g, b) = (ctx.p(layer.ln1.0), ctx.p(layer.ln1.1));
            x = ctx.tape.layer_norm(r, g, b, eps)?;

            let hdn = linear(ctx, x, layer.ff_w1, layer.ff_b1)?;
            let hdn = ctx.tape.gelu(hdn);
            let f = linear(ctx, hdn, layer.ff_w2, layer.ff_b2)?;
            let f = dropout(ctx, f);
            let f = match &layer.ffn_injector {
                Some(block) => inject(
                    ctx,
                    f,
                    &z_embs_for(block, &z_embs),
                    block,
                    &self.config.injector,
                )?,
                None => f,
            };
            let r = ctx.tape.add(x, f)?;
            let (g, b) = (ctx.p(layer.ln2.0), ctx.p(layer.ln2.1));
            x = ctx.tape.layer_norm(r, g, b, eps)?;
        }
        ctx.tape.slice_rows(x, 0, 1)
    }

    /// Logits per task, each `[1, n_classes]`.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
        rng: Option<&mut R>,
    ) -> Result<Vec<Var>> {
        let pooled = self.encode(ctx, tokens, attrs, rng)?;
        self.classifiers
            .iter()
            .map(|&(w, b)| linear(ctx, pooled, w, b))
            .collect()
    }

    /// Evaluation-mode logits.
    pub fn logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
    ) -> Result<Vec<Tensor<T>>> {
        let mut ctx = Ctx::new(store, None);
        let out = self.forward::<T, rand_chacha::ChaCha8Rng>(&mut ctx, tokens, attrs, None)?;
        Ok(out.iter().map(|&v| ctx.tape.value(v).clone()).collect())
    }

    /// Evaluation-mode pooled representation as a `[d_h]` vector.
    pub fn pooled<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
    ) -> Result<Tensor<T>> {
        let mut ctx = Ctx::new(store, None);
        let v = self.encode::<T, rand_chacha::ChaCha8Rng>(&mut ctx, tokens, attrs, None)?;
        ctx.tape.value(v).reshape([self.config.encoder.d_h])
    }

    /// Finite-difference check of the full training loss of one example
    /// with every parameter free.
    pub fn grad_check(
        &self,
        store: &ParamStore<f64>,
        tokens: &[usize],
        attrs: &AttributeAssignment,
        labels: &[usize],
        cfg: GradCheckConfig,
    ) -> Result<GradCheckReport> {
        let scales = batch_loss_scales(&self.config.encoder, &[labels])?.remove(0);
        grad_check_store(store, cfg, |ctx| {
            let logits = self.forward::<f64, rand_chacha::ChaCha8Rng>(ctx, tokens, attrs, None)?;
            example_loss(ctx, &logits, labels, &scales)
        })
    }
}

/// Pooled output of the Tokens comparator: one embedded token per attribute
/// label follows `[CLS]`, then the text, through the plain encoder.
pub fn tokens_baseline_encode<T: Scalar>(
    tokens: &[usize],
    attrs: &AttributeAssignment,
    model: &Model,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if model.config.kind != ModelKind::Tokens {
        return Err(Error::Config("model is not the Tokens comparator".into()));
    }
    model.pooled(store, tokens, attrs)
}

fn z_embs_for(block: &InjectorBlock, all: &[Vec<Var>]) -> Vec<Vec<Var>> {
    if block.attr_adapters.is_empty() {
        Vec::new()
    } else {
        all.to_vec()
    }
}

fn linear<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (ctx.p(w), ctx.p(b));
    let y = ctx.tape.matmul(x, wv)?;
    ctx.tape.add_row_bias(y, bv)
}

/// Parameters belonging to the frozen stand-in for a pretrained encoder.
pub fn is_backbone(spec: &ParamSpec) -> bool {
    matches!(
        spec.group,
        ParamGroup::Embedding | ParamGroup::Backbone | ParamGroup::LayerNorm
    )
}

/// Builds the per-example cross-entropy on the tape. `scales[t]` multiplies
/// task `t`'s negative log-likelihood (class weight and batch
/// normalisation folded in by the caller).
pub fn example_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    logits: &[Var],
    labels: &[usize],
    scales: &[T],
) -> Result<Var> {
    if logits.len() != labels.len() || labels.len() != scales.len() {
        return Err(Error::Contract(format!(
            "{} heads, {} labels, {} scales",
            logits.len(),
            labels.len(),
            scales.len()
        )));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (t, ((&l, &y), &s)) in logits.iter().zip(labels).zip(scales).enumerate() {
        let n = ctx.tape.value(l).numel();
        if y >= n {
            return Err(Error::LabelOutOfRange {
                task: t,
                label: y,
                n_classes: n,
            });
        }
        terms.push(ctx.tape.cross_entropy(l, y, s)?);
    }
    if terms.len() == 1 {
        Ok(terms[0])
    } else {
        ctx.tape.add_n(&terms)
    }
}

/// Per-example loss scales for a batch: `w_{t,y} / (T · Σ_i w_{t,y_i})`.
///
/// Each task contributes its class-weighted mean cross-entropy and tasks
/// are averaged.
pub fn batch_loss_scales(cfg: &EncoderConfig, labels: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    let n_tasks = cfg.n_tasks();
    let mut totals = vec![0.0; n_tasks];
    for ys in labels {
        if ys.len() != n_tasks {
            return Err(Error::Contract(format!(
                "{} labels for {n_tasks} tasks",
                ys.len()
            )));
        }
        for (t, &y) in ys.iter().enumerate() {
            if y >= cfg.class_counts[t] {
                return Err(Error::LabelOutOfRange {
                    task: t,
                    label: y,
                    n_classes: cfg.class_counts[t],
                });
            }
            totals[t] += cfg.class_weight(t, y);
        }
    }
    Ok(labels
        .iter()
        .map(|ys| {
            ys.iter()
                .enumerate()
                .map(|(t, &y)| {
                    if totals[t] > 0.0 {
                        cfg.class_weight(t, y) / (totals[t] * n_tasks as f64)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

/// Batch loss from precomputed logits: the class-weighted mean
/// cross-entropy per task, averaged over tasks.
pub fn loss<T: Scalar>(
    logits: &[Vec<Tensor<T>>],
    labels: &[Vec<usize>],
    cfg: &EncoderConfig,
) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Contract(
            "one label vector per example expected".into(),
        ));
    }
    let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
    let scales = batch_loss_scales(cfg, &refs)?;
    let mut total = 0.0;
    for ((ls, ys), ss) in logits.iter().zip(labels).zip(&scales) {
        for ((l, &y), &s) in ls.iter().zip(ys).zip(ss) {
            total += s * nll(l, y);
        }
    }
    Ok(total)
}

/// `−log softmax(logits)[y]`, computed in `f64`.
pub fn nll<T: Scalar>(logits: &Tensor<T>, y: usize) -> f64 {
    let v: Vec<f64> = logits.data().iter().map(|x| x.to_f64_lossy()).collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
    -(v[y] - m - z.ln())
}

/// Index of the largest logit (first on ties).
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}
