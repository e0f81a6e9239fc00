//! Toy-size model variants for whole-model gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::{AttributeAssignment, AttributeDef, AttributeSchema};
use crate::encoder::{EncoderConfig, Model, ModelConfig, ModelKind};
use crate::error::Result;
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::injector::{Aggregation, InjectionMode, InjectorConfig, WeightSynthesis};

/// Two attributes, the second multi-label.
pub fn toy_schema() -> AttributeSchema {
    AttributeSchema {
        attributes: vec![
            AttributeDef {
                name: "user".into(),
                vocab_size: 5,
                multi_label: false,
            },
            AttributeDef {
                name: "tags".into(),
                vocab_size: 6,
                multi_label: true,
            },
        ],
        d_z: 6,
    }
}

/// One layer, `d_h = 16`, `d_a = 4`, `O = 2`.
pub fn toy_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        encoder: EncoderConfig {
            vocab_size: 12,
            max_len: 8,
            d_h: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            dropout_rate: 0.0,
            class_counts: vec![3],
            class_weights: None,
            layer_norm_eps: 1e-5,
        },
        injector: InjectorConfig {
            d_h: 16,
            d_a: 4,
            d_z: 6,
            n_dims: 2,
            ..InjectorConfig::default()
        },
    }
}

/// Every model kind plus each injector variant.
pub fn toy_cases() -> Vec<(&'static str, ModelConfig)> {
    let inj = || toy_config(ModelKind::Injectors);
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = inj();
        f(&mut c);
        c
    };
    vec![
        ("injectors", inj()),
        (
            "injectors/pre-aggregation",
            with(&|c| c.injector.aggregation = Aggregation::Pre),
        ),
        (
            "injectors/bias-only",
            with(&|c| c.injector.injection = InjectionMode::BiasOnly),
        ),
        (
            "injectors/weight-only",
            with(&|c| c.injector.injection = InjectionMode::WeightOnly),
        ),
        (
            "injectors/no-task-adapter",
            with(&|c| c.injector.task_adapter = false),
        ),
        (
            "injectors/low-rank-only",
            with(&|c| c.injector.synthesis = WeightSynthesis::LowRankOnly),
        ),
        (
            "injectors/naive-synthesis",
            with(&|c| c.injector.synthesis = WeightSynthesis::Naive),
        ),
        (
            "injectors/multi-task-weighted",
            with(&|c| {
                c.encoder.class_counts = vec![3, 2];
                c.encoder.class_weights = Some(vec![vec![1.0, 0.5, 2.0], vec![0.5, 1.0]]);
            }),
        ),
        ("adapters", toy_config(ModelKind::Adapters)),
        ("tokens", toy_config(ModelKind::Tokens)),
        ("plain", toy_config(ModelKind::Plain)),
    ]
}

/// Runs [`Model::grad_check`] on every case with parameters drawn from
/// U(−0.3, 0.3), so that zero-initialised projections carry gradient too.
pub fn grad_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let schema = toy_schema();
    let attrs = AttributeAssignment::new(vec![vec![2], vec![1, 4]]);
    toy_cases()
        .into_iter()
        .map(|(name, mc)| {
            let model = Model::new(mc, schema.clone())?;
            let mut store = model.init_params::<f64>(seed, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in store.tensors_mut() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
            let labels: Vec<usize> = (0..model.n_tasks()).map(|t| (t + 1) % 2).collect();
            Ok((
                name,
                model.grad_check(&store, &[3, 7, 2], &attrs, &labels, cfg)?,
            ))
        })
        .collect()
}
