//! Subcommand implementations. Each one resolves the configuration, writes
//! its artifacts into a run directory and finishes with a manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use injectors::attributes::{AttributeDef, AttributeSchema};
use injectors::bundle::Bundle;
use injectors::config::{prepare, write_fields, ExperimentConfig};
use injectors::data::{bin_by_sparsity, save_jsonl, Metric};
use injectors::encoder::{Model, ModelConfig, ModelKind};
use injectors::gradcheck::GradCheckConfig;
use injectors::injector::count_parameters;
use injectors::synthetic::{generate_synthetic, GeneratorSpec};
use injectors::toy::grad_suite;
use injectors::train::{
    evaluate, mask_attributes, run_ablation, train as fit, trainable_mask, transfer_experiment,
    Ablation, AblationStatus, Evaluation, ParamCensus,
};
use injectors::{checkpoint, ParamStore32};
use serde::Serialize;

use crate::run::{load_config, Run};
use crate::{Global, Mode};

const CHECKPOINT_DIR: &str = "checkpoint";

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = load_config(g.config.as_deref(), &g.overrides)?;
    if let Some(s) = g.seed {
        cfg.plan.seed = s;
    }
    Ok(cfg)
}

fn start(g: &Global, command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Run> {
    Run::start(
        command,
        g.config.as_deref(),
        cfg,
        seed,
        g.out.as_deref(),
        &g.out_root,
    )
}

fn done(run: Run) -> Result<()> {
    let m = run.finish()?;
    println!("run {} -> {}", m.run_id, m.out_dir.display());
    Ok(())
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Accuracy => "accuracy",
        Metric::F1 => "f1",
        Metric::MultiTaskMeanAccuracy => "multi-task mean accuracy",
    }
}

pub fn generate_data(g: &Global, spec_path: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(g.config.as_deref(), &g.overrides)?;
    let mut spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading spec {}", p.display()))?;
            toml::from_str::<GeneratorSpec>(&text)
                .with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => cfg.data.generator.clone(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    cfg.data.generator = spec.clone();
    let data = generate_synthetic(&spec)?;
    let mut run = start(g, "generate-data", &cfg, spec.seed)?;
    for (name, split) in [
        ("train.jsonl", &data.train),
        ("dev.jsonl", &data.dev),
        ("test.jsonl", &data.test),
    ] {
        save_jsonl(run.artifact(name), split, &data.vocabs)?;
    }
    run.artifact(injectors::config::FIELDS_FILE);
    write_fields(&run.dir, &data.vocabs.fields)?;
    run.write_json("stats.json", &data.stats)?;
    let s = &data.stats;
    println!("train/dev/test: {}/{}/{}", s.n_train, s.n_dev, s.n_test);
    println!("bayes accuracy: {:.4}", s.bayes_accuracy);
    println!(
        "text-only bayes accuracy: {:.4}",
        s.text_only_bayes_accuracy
    );
    for (name, pct) in &s.pct_sparse {
        println!("%sparse {name}: {pct:.2}");
    }
    done(run)
}

#[derive(Serialize)]
struct TrainSummary {
    kind: ModelKind,
    best_step: usize,
    best_dev: Option<f64>,
    metric: Metric,
    test_score: f64,
    test_accuracy_per_task: Vec<f64>,
    n_params: usize,
    n_trainable: usize,
    bayes_accuracy: Option<f64>,
}

pub fn train(g: &Global, mode: Option<Mode>) -> Result<()> {
    let mut cfg = config(g)?;
    if let Some(m) = mode {
        cfg.model.kind = match m {
            Mode::Injectors => ModelKind::Injectors,
            Mode::Adapters => ModelKind::Adapters,
            Mode::Plain => ModelKind::Plain,
            Mode::TokensBaseline => ModelKind::Tokens,
        };
    }
    let prep = prepare(&cfg)?;
    let model = Model::new(prep.model.clone(), prep.data.schema.clone())?;
    let init: ParamStore32 = model.init_params(cfg.plan.backbone_seed, cfg.plan.seed);
    let mut run = start(g, "train", &cfg, cfg.plan.seed)?;
    let out = fit(&model, init, &prep.data.train, &prep.data.dev, &cfg.plan)?;

    let mut w = csv::Writer::from_path(run.artifact("metrics.csv"))?;
    w.write_record(["step", "split", "loss", metric_name(cfg.plan.metric)])?;
    for r in &out.log {
        w.write_record([
            r.step.to_string(),
            r.split.clone(),
            r.loss.to_string(),
            r.score.to_string(),
        ])?;
    }
    w.flush()?;

    let ev = evaluate(&model, &out.best, &prep.data.test, cfg.plan.metric)?;
    let labels: Vec<Vec<usize>> = prep.data.test.iter().map(|e| e.labels.clone()).collect();
    write_predictions(
        &run.artifact("test_predictions.csv"),
        &ev,
        &labels,
        &prep.vocabs.classes,
    )?;
    checkpoint::save(run.artifact("last.ckpt"), &out.last.named())?;
    let mask = trainable_mask(
        model.layout(),
        cfg.plan.freeze_policy,
        cfg.plan.train_layer_norm,
    );
    let census = ParamCensus::new(model.layout(), &mask);
    let summary = TrainSummary {
        kind: model.config.kind,
        best_step: out.best_step,
        best_dev: out.best_dev,
        metric: cfg.plan.metric,
        test_score: ev.score,
        test_accuracy_per_task: ev.accuracy_per_task.clone(),
        n_params: census.total,
        n_trainable: census.trainable,
        bayes_accuracy: prep.stats.as_ref().map(|s| s.bayes_accuracy),
    };
    let bundle = Bundle {
        model,
        params: out.best,
        tokenizer: prep.tokenizer,
        vocabs: prep.vocabs,
        metric: cfg.plan.metric,
        train_profile: prep.profile,
    };
    bundle.save(run.artifact(CHECKPOINT_DIR))?;
    if let Some(s) = &prep.stats {
        run.write_json("stats.json", s)?;
    }
    run.write_json("summary.json", &summary)?;
    println!("best step {} dev {:?}", summary.best_step, summary.best_dev);
    println!(
        "test {}: {:.4}",
        metric_name(summary.metric),
        summary.test_score
    );
    if let Some(b) = summary.bayes_accuracy {
        println!("bayes accuracy: {b:.4}");
    }
    println!(
        "parameters: {} total, {} trainable",
        summary.n_params, summary.n_trainable
    );
    done(run)
}

fn softmax_max(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    1.0 / z
}

fn write_predictions(
    path: &Path,
    ev: &Evaluation,
    gold: &[Vec<usize>],
    classes: &[injectors::attributes::Vocab],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "index",
        "task",
        "gold",
        "predicted",
        "correct",
        "confidence",
    ])?;
    let name = |t: usize, id: usize| classes[t].label(id).unwrap_or("?").to_string();
    for (i, (p, y)) in ev.predictions.iter().zip(gold).enumerate() {
        for t in 0..p.len() {
            w.write_record([
                i.to_string(),
                t.to_string(),
                name(t, y[t]),
                name(t, p[t]),
                u8::from(p[t] == y[t]).to_string(),
                format!("{:.6}", softmax_max(&ev.logits[i][t])),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    data: PathBuf,
    masked_attributes: bool,
    n_examples: usize,
    loss: f64,
    metric: Metric,
    score: f64,
    accuracy_per_task: Vec<f64>,
}

pub fn eval(g: &Global, ckpt: &Path, data: &Path, mask: bool) -> Result<()> {
    let cfg = config(g)?;
    let bundle = Bundle::<f32>::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let instances = bundle
        .ingest(data)
        .with_context(|| format!("reading {}", data.display()))?;
    let mut examples = bundle.encode(&instances);
    if mask {
        examples = mask_attributes(&examples);
    }
    let mut run = start(g, "eval", &cfg, cfg.plan.seed)?;
    let ev = evaluate(&bundle.model, &bundle.params, &examples, bundle.metric)?;
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    write_predictions(
        &run.artifact("predictions.csv"),
        &ev,
        &gold,
        &bundle.vocabs.classes,
    )?;
    let report = EvalReport {
        checkpoint: ckpt.to_path_buf(),
        data: data.to_path_buf(),
        masked_attributes: mask,
        n_examples: examples.len(),
        loss: ev.loss,
        metric: bundle.metric,
        score: ev.score,
        accuracy_per_task: ev.accuracy_per_task.clone(),
    };
    run.write_json("eval.json", &report)?;
    println!("examples: {}", report.n_examples);
    for (t, a) in report.accuracy_per_task.iter().enumerate() {
        println!("task {t} accuracy: {a:.4}");
    }
    println!("{}: {:.4}", metric_name(report.metric), report.score);
    done(run)
}

#[derive(Serialize)]
struct ParamCountReport {
    closed_form: injectors::injector::ParameterReport,
    n_attributes: usize,
    n_injector_blocks: usize,
    /// Task-adapter and attribute-adapter parameters of the built model.
    enumerated_injector_params: usize,
    census: ParamCensus,
    body_trainable_fraction: f64,
}

pub fn param_count(g: &Global, naive: bool, base: bool, attributes: Option<usize>) -> Result<()> {
    let cfg = config(g)?;
    let (mut model_cfg, fields): (ModelConfig, Vec<AttributeDef>) = if base {
        let defs = (0..attributes.unwrap_or(2))
            .map(|j| AttributeDef {
                name: format!("attr{j}"),
                vocab_size: 1000,
                multi_label: false,
            })
            .collect();
        (ModelConfig::base_size(vec![2]), defs)
    } else {
        let defs: Vec<AttributeDef> = cfg
            .data
            .generator
            .attributes
            .iter()
            .take(attributes.unwrap_or(usize::MAX))
            .map(|a| AttributeDef {
                name: a.name.clone(),
                vocab_size: a.vocab_size,
                multi_label: a.max_arity > 1,
            })
            .collect();
        if let Some(n) = attributes {
            if n > defs.len() {
                bail!("config defines {} attributes, {n} requested", defs.len());
            }
        }
        (cfg.model.clone(), defs)
    };
    if naive {
        model_cfg.injector.synthesis = injectors::injector::WeightSynthesis::Naive;
    }
    let report = count_parameters(&model_cfg.injector, fields.len(), naive)?;
    println!("weight synthesis per attribute adapter:");
    println!("  naive (d_z*d_h*d_a): {}", report.naive_weight_synthesis);
    println!("  PHM:                 {}", report.phm_weight_synthesis);
    println!("  ratio:               {:.2}x", report.ratio);
    println!("attribute adapter:     {}", report.attr_adapter.total);
    println!("task adapter:          {}", report.task_adapter);
    println!(
        "injector block ({} attributes): {}",
        report.n_attributes, report.injector_block
    );

    let schema = AttributeSchema::new(fields, model_cfg.injector.d_z)?;
    let model = Model::new(model_cfg, schema)?;
    let layout = model.layout();
    let enumerated = layout.total_in(&[
        injectors::params::ParamGroup::TaskAdapter,
        injectors::params::ParamGroup::AttrAdapter,
    ]);
    let n_blocks = 2 * model.config.encoder.n_layers;
    let mask = trainable_mask(layout, cfg.plan.freeze_policy, cfg.plan.train_layer_norm);
    let census = ParamCensus::new(layout, &mask);
    println!(
        "enumerated injector parameters: {enumerated} over {n_blocks} blocks ({} per block)",
        enumerated / n_blocks.max(1)
    );
    if model.config.kind == ModelKind::Injectors
        && enumerated != n_blocks * report.injector_block as usize
    {
        bail!(
            "closed-form block count {} disagrees with enumeration {}",
            report.injector_block,
            enumerated / n_blocks.max(1)
        );
    }
    println!(
        "model: {} parameters, {} trainable under {}",
        census.total, census.trainable, cfg.plan.freeze_policy
    );
    println!(
        "trainable share without lookup tables and classifier: {:.2}%",
        100.0 * census.body_fraction()
    );
    let out = ParamCountReport {
        closed_form: report,
        n_attributes: model.schema.len(),
        n_injector_blocks: n_blocks,
        enumerated_injector_params: enumerated,
        census,
        body_trainable_fraction: census.body_fraction(),
    };
    let mut run = start(g, "param-count", &cfg, cfg.plan.seed)?;
    run.write_json("param_count.json", &out)?;
    done(run)
}

pub fn analyze_sparsity(
    g: &Global,
    ckpts: &[PathBuf],
    data: &Path,
    attribute: &str,
    bins: Option<usize>,
) -> Result<()> {
    let cfg = config(g)?;
    let n_bins = bins.unwrap_or(cfg.analysis.n_bins);
    let mut rows = Vec::new();
    for ckpt in ckpts {
        let bundle = Bundle::<f32>::load(ckpt)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let Some(j) = bundle.model.schema.index_of(attribute) else {
            bail!(
                "attribute `{attribute}` is not in the schema of {}",
                ckpt.display()
            );
        };
        let examples = bundle.encode(&bundle.ingest(data)?);
        let ev = evaluate(&bundle.model, &bundle.params, &examples, bundle.metric)?;
        let counts = &bundle.train_profile.attributes[j].counts;
        let assignments: Vec<_> = examples.iter().map(|e| &e.attributes).collect();
        let binned = bin_by_sparsity(&assignments, j, counts, n_bins)?;
        for (b, idx) in binned.iter().enumerate() {
            let (mut correct, mut total, mut freq) = (0usize, 0usize, 0.0);
            for &i in idx {
                let e = &examples[i];
                freq += injectors::data::sparsity_score(&e.attributes, j, counts);
                for (p, y) in ev.predictions[i].iter().zip(&e.labels) {
                    correct += usize::from(p == y);
                    total += 1;
                }
            }
            rows.push((
                ckpt.display().to_string(),
                b,
                idx.len(),
                freq / idx.len().max(1) as f64,
                correct as f64 / total.max(1) as f64,
            ));
        }
    }
    let mut run = start(g, "analyze-sparsity", &cfg, cfg.plan.seed)?;
    let mut w = csv::Writer::from_path(run.artifact("sparsity.csv"))?;
    w.write_record([
        "model",
        "bin_index",
        "n_examples",
        "mean_train_frequency",
        "accuracy",
    ])?;
    for (m, b, n, f, a) in &rows {
        w.write_record([
            m.clone(),
            b.to_string(),
            n.to_string(),
            format!("{f:.3}"),
            format!("{a:.6}"),
        ])?;
        println!("{m}  bin {b}: n={n} mean freq {f:.1} accuracy {a:.4}");
    }
    w.flush()?;
    done(run)
}

pub fn ablate(g: &Global, variants: &[String]) -> Result<()> {
    let cfg = config(g)?;
    let variants: Vec<Ablation> = if variants.is_empty() {
        cfg.ablation.variants.clone()
    } else {
        variants
            .iter()
            .map(|v| v.parse())
            .collect::<Result<_, _>>()?
    };
    let prep = prepare(&cfg)?;
    let mut run = start(g, "ablate", &cfg, cfg.plan.seed)?;
    let rows = run_ablation::<f32>(
        &prep.model,
        &prep.data,
        &cfg.plan,
        &variants,
        cfg.ablation.memory_budget_bytes as u128,
    )?;
    let mut w = csv::Writer::from_path(run.artifact("ablation.csv"))?;
    w.write_record([
        "variant",
        "status",
        "dev",
        "test",
        "n_params",
        "n_trainable",
        "required_bytes",
    ])?;
    println!(
        "{:<20} {:>8} {:>8} {:>10} {:>10}",
        "variant", "dev", "test", "params", "trainable"
    );
    for r in &rows {
        match &r.result {
            AblationStatus::Completed {
                dev,
                test,
                n_params,
                n_trainable,
            } => {
                let dev_s = dev.map_or(String::new(), |d| format!("{d:.4}"));
                println!(
                    "{:<20} {:>8} {:>8.4} {:>10} {:>10}",
                    r.label, dev_s, test, n_params, n_trainable
                );
                w.write_record([
                    r.label.clone(),
                    "completed".into(),
                    dev.map_or(String::new(), |d| format!("{d:.6}")),
                    format!("{test:.6}"),
                    n_params.to_string(),
                    n_trainable.to_string(),
                    String::new(),
                ])?;
            }
            AblationStatus::OutOfMemory {
                required_bytes,
                budget_bytes,
            } => {
                let gib = |b: u128| b as f64 / (1u64 << 30) as f64;
                println!(
                    "{:<20} OOM: needs {:.1} GiB, budget {:.1} GiB",
                    r.label,
                    gib(*required_bytes),
                    gib(*budget_bytes)
                );
                w.write_record([
                    r.label.clone(),
                    "oom".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    required_bytes.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    run.write_json("ablation.json", &rows)?;
    done(run)
}

pub fn transfer(g: &Global) -> Result<()> {
    let cfg = config(g)?;
    let prep = prepare(&cfg)?;
    let n = prep.data.class_counts.len();
    let t = &cfg.transfer;
    if let Some(&bad) = t
        .source_tasks
        .iter()
        .chain(&t.target_tasks)
        .find(|&&x| x >= n)
    {
        bail!("task {bad} requested but the data has {n} tasks");
    }
    if t.source_tasks.is_empty() || t.target_tasks.is_empty() {
        bail!("transfer needs at least one source and one target task");
    }
    let source = prep.data.select(&t.source_tasks);
    let target = prep.data.select(&t.target_tasks);
    let mut run = start(g, "transfer", &cfg, cfg.plan.seed)?;
    let report = transfer_experiment::<f32>(&prep.model, &source, &target, &cfg.plan)?;
    let mut w = csv::Writer::from_path(run.artifact("transfer.csv"))?;
    w.write_record([
        "source_tasks",
        "target_tasks",
        "direct",
        "transferred",
        "delta_pct",
    ])?;
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    w.write_record([
        join(&t.source_tasks),
        join(&t.target_tasks),
        format!("{:.6}", report.direct),
        format!("{:.6}", report.transferred),
        format!("{:.4}", report.delta_pct),
    ])?;
    w.flush()?;
    run.write_json("transfer.json", &report)?;
    println!("source score: {:.4}", report.source_score);
    println!("direct:       {:.4}", report.direct);
    println!("transferred:  {:.4}", report.transferred);
    println!("delta:        {:+.2}%", report.delta_pct);
    println!(
        "copied {} attribute tensors, frozen unchanged: {}",
        report.n_copied, report.frozen_unchanged
    );
    done(run)
}

pub fn grad_check(g: &Global) -> Result<()> {
    let cfg = config(g)?;
    let seed = cfg.plan.seed;
    let mut run = start(g, "grad-check", &cfg, seed)?;
    let results = grad_suite(seed, GradCheckConfig::default())?;
    let mut w = csv::Writer::from_path(run.artifact("gradcheck.csv"))?;
    w.write_record([
        "case",
        "n_checked",
        "max_rel_error",
        "max_abs_error",
        "passed",
    ])?;
    let mut failed = Vec::new();
    for (name, r) in &results {
        println!(
            "{:<30} {:>6} entries  max rel {:.2e}  max abs {:.2e}  {}",
            name,
            r.n_checked,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        w.write_record([
            name.to_string(),
            r.n_checked.to_string(),
            format!("{:e}", r.max_rel_error),
            format!("{:e}", r.max_abs_error),
            r.passed().to_string(),
        ])?;
        if !r.passed() {
            failed.push(*name);
        }
    }
    w.flush()?;
    done(run)?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
