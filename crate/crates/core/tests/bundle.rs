use injectors::bundle::Bundle;
use injectors::config::{prepare, ExperimentConfig};
use injectors::data::save_jsonl;
use injectors::encoder::{Model, ModelKind};
use injectors::train::{evaluate, train};
use injectors::ParamStore32;

fn small_config(kind: ModelKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.generator.n_train = 300;
    cfg.data.generator.n_dev = 30;
    cfg.data.generator.n_test = 60;
    cfg.data.generator.marginal_pool = 16;
    cfg.model.kind = kind;
    cfg.plan.total_steps = 30;
    cfg.plan.warmup_steps = 3;
    cfg.plan.eval_every = 10;
    cfg
}

#[test]
fn saved_bundle_scores_like_the_trained_model() {
    for kind in [ModelKind::Injectors, ModelKind::Tokens] {
        let cfg = small_config(kind);
        let prep = prepare(&cfg).unwrap();
        let model = Model::new(prep.model.clone(), prep.data.schema.clone()).unwrap();
        let init: ParamStore32 = model.init_params(cfg.plan.backbone_seed, cfg.plan.seed);
        let out = train(&model, init, &prep.data.train, &prep.data.dev, &cfg.plan).unwrap();
        let before = evaluate(&model, &out.best, &prep.data.test, cfg.plan.metric).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let bundle = Bundle {
            model,
            params: out.best,
            tokenizer: prep.tokenizer.clone(),
            vocabs: prep.vocabs.clone(),
            metric: cfg.plan.metric,
            train_profile: prep.profile.clone(),
        };
        bundle.save(dir.path().join("ckpt")).unwrap();
        let loaded = Bundle::<f32>::load(dir.path().join("ckpt")).unwrap();
        assert_eq!(loaded.params.tensors(), bundle.params.tensors());
        assert_eq!(loaded.vocabs, bundle.vocabs);
        assert_eq!(loaded.train_profile, bundle.train_profile);

        // Re-read the raw test split through the bundle's own vocabularies.
        let synth = injectors::synthetic::generate_synthetic(&cfg.data.generator).unwrap();
        let path = dir.path().join("test.jsonl");
        save_jsonl(&path, &synth.test, &synth.vocabs).unwrap();
        let examples = loaded.encode(&loaded.ingest(&path).unwrap());
        assert_eq!(examples, prep.data.test);
        let after = evaluate(&loaded.model, &loaded.params, &examples, loaded.metric).unwrap();
        assert_eq!(after.predictions, before.predictions);
        assert_eq!(after.score, before.score);
    }
}

#[test]
fn loading_a_mismatched_checkpoint_fails() {
    let cfg = small_config(ModelKind::Injectors);
    let prep = prepare(&cfg).unwrap();
    let model = Model::new(prep.model.clone(), prep.data.schema.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bundle = Bundle {
        params: model.init_params::<f32>(1, 2),
        model,
        tokenizer: prep.tokenizer,
        vocabs: prep.vocabs,
        metric: cfg.plan.metric,
        train_profile: prep.profile,
    };
    bundle.save(dir.path()).unwrap();
    let meta = dir.path().join("model.json");
    let text = std::fs::read_to_string(&meta).unwrap();
    assert!(text.contains("\"kind\": \"injectors\""));
    let text = text.replace("\"kind\": \"injectors\"", "\"kind\": \"adapters\"");
    std::fs::write(&meta, text).unwrap();
    assert!(Bundle::<f32>::load(dir.path()).is_err());
}
