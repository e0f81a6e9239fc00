use injectors::attributes::{AttributeAssignment, AttributeDef, AttributeSchema};
use injectors::encoder::*;
use injectors::gradcheck::{grad_check_store, GradCheckConfig};
use injectors::injector::InjectorConfig;
use injectors::params::{Ctx, ParamStore};
use injectors::tensor::gelu;
use injectors::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> AttributeSchema {
    AttributeSchema::new(
        vec![
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
        6,
    )
    .unwrap()
}

fn toy(kind: ModelKind, n_heads: usize) -> ModelConfig {
    ModelConfig {
        kind,
        encoder: EncoderConfig {
            vocab_size: 12,
            max_len: 8,
            d_h: 16,
            n_layers: 1,
            n_heads,
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

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_assignment(rng: &mut ChaCha8Rng) -> AttributeAssignment {
    let user = if rng.random_bool(0.8) {
        vec![rng.random_range(0..5)]
    } else {
        vec![]
    };
    let n = rng.random_range(0..4);
    let tags = (0..n).map(|_| rng.random_range(0..6)).collect();
    AttributeAssignment::new(vec![user, tags])
}

#[test]
fn injected_model_at_init_equals_plain_model() {
    let plain = Model::new(toy(ModelKind::Plain, 2), schema()).unwrap();
    let inj = Model::new(toy(ModelKind::Injectors, 2), schema()).unwrap();
    let pp: ParamStore<f64> = plain.init_params(3, 4);
    let mut pi: ParamStore<f64> = inj.init_params(3, 5);
    // Classifier heads are adapter-seeded; share them.
    for name in ["head.0.w", "head.0.b"] {
        *pi.get_mut(pi.layout().id(name).unwrap()) = pp.by_name(name).unwrap().clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let len = rng.random_range(0..10);
        let toks: Vec<usize> = (0..len).map(|_| rng.random_range(2..12)).collect();
        let a = random_assignment(&mut rng);
        assert_eq!(
            plain.logits(&pp, &toks, &a).unwrap(),
            inj.logits(&pi, &toks, &a).unwrap()
        );
    }
}

#[test]
fn attribute_labels_change_the_output() {
    let m = Model::new(toy(ModelKind::Injectors, 2), schema()).unwrap();
    let mut p: ParamStore<f64> = m.init_params(0, 0);
    randomize(&mut p, 1, 0.5);
    let a = AttributeAssignment::new(vec![vec![1], vec![2]]);
    let b = AttributeAssignment::new(vec![vec![3], vec![2]]);
    let x = m.pooled(&p, &[4, 5, 6], &a).unwrap();
    let y = m.pooled(&p, &[4, 5, 6], &b).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() > 1e-6);
    assert_eq!(x.shape(), &[16]);
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| g * (v - mean) / (var + eps).sqrt() + b)
        .collect()
}

fn vecmat(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    (0..n)
        .map(|j| {
            (0..k).map(|i| x[i] * w.get(&[i, j])).sum::<f64>() + b.map_or(0.0, |b| b.data()[j])
        })
        .collect()
}

#[test]
fn single_token_matches_hand_stepped_oracle() {
    // With only the first position, attention weights are exactly 1 and the
    // layer reduces to value and output projections.
    let m = Model::new(toy(ModelKind::Plain, 1), schema()).unwrap();
    let mut p: ParamStore<f64> = m.init_params(0, 0);
    randomize(&mut p, 9, 0.4);
    let t = |n: &str| p.by_name(n).unwrap();
    let eps = 1e-5;
    let x: Vec<f64> = (0..16)
        .map(|i| t("embeddings.token").get(&[0, i]) + t("embeddings.position").get(&[0, i]))
        .collect();
    let x = layer_norm(
        &x,
        t("embeddings.ln.gamma").data(),
        t("embeddings.ln.beta").data(),
        eps,
    );
    let v = vecmat(&x, t("layer0.attn.v_w.0"), Some(t("layer0.attn.v_b.0")));
    let a = vecmat(&v, t("layer0.attn.o_w.0"), Some(t("layer0.attn.o_b")));
    let r: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
    let x = layer_norm(
        &r,
        t("layer0.attn.ln.gamma").data(),
        t("layer0.attn.ln.beta").data(),
        eps,
    );
    let h: Vec<f64> = vecmat(&x, t("layer0.ffn.w1"), Some(t("layer0.ffn.b1")))
        .into_iter()
        .map(gelu)
        .collect();
    let f = vecmat(&h, t("layer0.ffn.w2"), Some(t("layer0.ffn.b2")));
    let r: Vec<f64> = x.iter().zip(&f).map(|(x, f)| x + f).collect();
    let x = layer_norm(
        &r,
        t("layer0.ffn.ln.gamma").data(),
        t("layer0.ffn.ln.beta").data(),
        eps,
    );
    let logits = vecmat(&x, t("head.0.w"), Some(t("head.0.b")));
    let got = m.logits(&p, &[], &AttributeAssignment::empty(2)).unwrap();
    for (g, w) in got[0].data().iter().zip(&logits) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn full_model_gradients() {
    for kind in [ModelKind::Injectors, ModelKind::Tokens] {
        let mut cfg = toy(kind, 2);
        cfg.encoder.class_counts = vec![3, 2];
        cfg.encoder.class_weights = Some(vec![vec![1.0, 0.5, 2.0], vec![0.5, 1.0]]);
        let m = Model::new(cfg, schema()).unwrap();
        let mut p: ParamStore<f64> = m.init_params(0, 0);
        randomize(&mut p, 2, 0.3);
        let a = AttributeAssignment::new(vec![vec![2], vec![1, 4]]);
        let report = grad_check_store(&p, GradCheckConfig::default(), |ctx| {
            let logits = m.forward::<f64, ChaCha8Rng>(ctx, &[3, 7, 2], &a, None)?;
            example_loss(ctx, &logits, &[1, 0], &[0.5, 0.25])
        })
        .unwrap();
        assert!(report.passed(), "{kind:?}: {report:?}");
    }
}

#[test]
fn loss_cases() {
    let cfg = EncoderConfig {
        class_counts: vec![2],
        ..EncoderConfig::default()
    };
    let sharp = vec![vec![Tensor::<f64>::from_rows(&[vec![20.0, -20.0]]).unwrap()]];
    assert!(loss(&sharp, &[vec![0]], &cfg).unwrap() < 1e-3);

    // Weighted mean: (0.5·nll(a, 0) + 1.0·nll(b, 1)) / 1.5.
    let weighted = EncoderConfig {
        class_weights: Some(vec![vec![0.5, 1.0]]),
        ..cfg.clone()
    };
    let la = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let lb = Tensor::<f64>::from_rows(&[vec![0.2, 0.7]]).unwrap();
    let nll_a = (1.0f64.exp() + 1.0).ln() - 1.0;
    let nll_b = (0.2f64.exp() + 0.7f64.exp()).ln() - 0.7;
    let want = (0.5 * nll_a + nll_b) / 1.5;
    let got = loss(&[vec![la], vec![lb]], &[vec![0], vec![1]], &weighted).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn multi_task_loss_is_mean_of_task_losses() {
    let multi = EncoderConfig {
        class_counts: vec![3, 2],
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..7 {
        logits.push(vec![
            Tensor::<f64>::from_fn([1, 3], |_| rng.random_range(-2.0..2.0)),
            Tensor::<f64>::from_fn([1, 2], |_| rng.random_range(-2.0..2.0)),
        ]);
        labels.push(vec![rng.random_range(0..3), rng.random_range(0..2)]);
    }
    let total = loss(&logits, &labels, &multi).unwrap();
    let per_task: f64 = (0..2)
        .map(|t| {
            let cfg = EncoderConfig {
                class_counts: vec![multi.class_counts[t]],
                ..EncoderConfig::default()
            };
            let l: Vec<_> = logits.iter().map(|l| vec![l[t].clone()]).collect();
            let y: Vec<_> = labels.iter().map(|y| vec![y[t]]).collect();
            loss(&l, &y, &cfg).unwrap()
        })
        .sum::<f64>()
        / 2.0;
    assert!((total - per_task).abs() < 1e-12);
}

#[test]
fn tokens_baseline_without_attributes_matches_plain() {
    let plain = Model::new(toy(ModelKind::Plain, 2), schema()).unwrap();
    let toks = Model::new(toy(ModelKind::Tokens, 2), schema()).unwrap();
    let pp: ParamStore<f64> = plain.init_params(1, 2);
    let pt: ParamStore<f64> = toks.init_params(1, 2);
    let none = AttributeAssignment::empty(2);
    assert_eq!(
        plain.pooled(&pp, &[3, 4, 5], &none).unwrap(),
        toks.pooled(&pt, &[3, 4, 5], &none).unwrap()
    );
    let two = AttributeAssignment::new(vec![vec![1], vec![2]]);
    let (ids, _) = toks.input_sequence(&[3, 4, 5], &two).unwrap();
    assert_eq!(ids.len(), 2);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
    let mut cfg = toy(ModelKind::Injectors, 2);
    cfg.encoder.dropout_rate = 0.5;
    let m = Model::new(cfg, schema()).unwrap();
    let p: ParamStore<f64> = m.init_params(0, 0);
    let a = AttributeAssignment::new(vec![vec![1], vec![]]);
    let e1 = m.logits(&p, &[2, 3], &a).unwrap();
    assert_eq!(e1, m.logits(&p, &[2, 3], &a).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::new(&p, None);
    let t = m.forward(&mut ctx, &[2, 3], &a, Some(&mut rng)).unwrap();
    assert_ne!(ctx.tape.value(t[0]), &e1[0]);
}
