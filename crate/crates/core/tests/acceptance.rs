//! End-to-end acceptance run. Each check prints one PASS/FAIL line; the
//! process exits non-zero if any check fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use injectors::attributes::{AttributeAssignment, AttributeDef, AttributeSchema};
use injectors::autodiff::{Tape, Var};
use injectors::config::{prepare, ExperimentConfig, Prepared};
use injectors::data::{bin_by_sparsity, Metric};
use injectors::encoder::{Model, ModelConfig, ModelKind};
use injectors::error::Result;
use injectors::gradcheck::{grad_check, GradCheckConfig};
use injectors::injector::{
    count_parameters, phm_kron_terms, Aggregation, AttrAdapter, InjectorConfig,
};
use injectors::params::{ParamLayout, ParamStore};
use injectors::toy::{grad_suite, toy_config, toy_schema};
use injectors::train::{
    evaluate, fit_and_score, mask_attributes, run_ablation, trainable_mask, training_bytes,
    transfer_experiment, Ablation, AblationStatus, Evaluation, FreezePolicy, ParamCensus, TaskData,
    DEFAULT_MEMORY_BUDGET,
};
use injectors::{ParamStore32, Tensor64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Result<Check> {
    Ok(Check { pass, detail })
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn randomized(layout: ParamLayout, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::init(layout, rng);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    store
}

fn svd_rank(t: &Tensor64, tol: f64) -> usize {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(r, c, t.data()).rank(tol)
}

fn base_schema(n_attributes: usize, d_z: usize) -> Result<AttributeSchema> {
    let defs = (0..n_attributes)
        .map(|j| AttributeDef {
            name: format!("attr{j}"),
            vocab_size: 1000,
            multi_label: j == 1,
        })
        .collect();
    AttributeSchema::new(defs, d_z)
}

fn parameter_ratio() -> Result<Check> {
    let r = count_parameters(&InjectorConfig::default(), 2, false)?;
    check(
        r.naive_weight_synthesis == 37_748_736
            && r.phm_weight_synthesis == 196_864
            && (191.5..=192.0).contains(&r.ratio),
        format!(
            "naive {} vs PHM {}, ratio {:.2}x",
            r.naive_weight_synthesis, r.phm_weight_synthesis, r.ratio
        ),
    )
}

fn trainable_fraction() -> Result<Check> {
    let cfg = ModelConfig::base_size(vec![2]);
    let model = Model::new(cfg.clone(), base_schema(2, cfg.injector.d_z)?)?;
    let mask = trainable_mask(model.layout(), FreezePolicy::BackboneFrozen, true);
    let c = ParamCensus::new(model.layout(), &mask);
    let body = c.total - c.lookup_tables - c.classifier;
    let pct = 100.0 * c.body_fraction();
    check(
        (16.5..=20.5).contains(&pct) && (100e6..=110e6).contains(&(body as f64)),
        format!(
            "{pct:.2}% of {:.1}M body parameters trainable ({:.1}M total)",
            body as f64 / 1e6,
            c.total as f64 / 1e6
        ),
    )
}

/// Contracts `y` against a fixed random tensor of the same shape.
fn project<'a>(t: &mut Tape<'a, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = t.constant(rand_tensor(t.shape(y), &mut rng));
    let m = t.mul(y, c)?;
    Ok(t.sum_all(m))
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 2)
        }),
        ("transpose", vec![vec![3, 2]], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, 3)
        }),
        ("add/sub/mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let y = t.mul(a, s)?;
            project(t, y, 4)
        }),
        ("add_row_bias", vec![vec![3, 2], vec![2]], |t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            project(t, y, 5)
        }),
        ("scale/tanh", vec![vec![4]], |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.tanh(y);
            project(t, y, 6)
        }),
        ("gelu", vec![vec![6]], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, 7)
        }),
        ("outer", vec![vec![3], vec![2]], |t, v| {
            let y = t.outer(v[0], v[1])?;
            project(t, y, 8)
        }),
        ("kron", vec![vec![2, 2], vec![2, 3]], |t, v| {
            let y = t.kron(v[0], v[1])?;
            project(t, y, 9)
        }),
        ("reshape", vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], [3, 4])?;
            let y = t.tanh(y);
            project(t, y, 10)
        }),
        ("add_n", vec![vec![2, 2], vec![2, 2], vec![2, 2]], |t, v| {
            let y = t.add_n(v)?;
            let y = t.mul(y, y)?;
            project(t, y, 11)
        }),
        ("mean_all", vec![vec![3, 3]], |t, v| {
            let y = t.tanh(v[0]);
            Ok(t.mean_all(y))
        }),
        ("softmax_rows", vec![vec![2, 4]], |t, v| {
            let y = t.softmax_rows(v[0])?;
            project(t, y, 12)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 13)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            project(t, y, 14)
        }),
        ("concat/slice", vec![vec![2, 3], vec![1, 3]], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            let y = t.slice_rows(c, 1, 2)?;
            project(t, y, 15)
        }),
        ("cross_entropy", vec![vec![5]], |t, v| {
            t.cross_entropy(v[0], 3, 0.5)
        }),
    ]
}

fn gradient_suite() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = ("", 0.0f64);
    let mut all = true;
    for (name, shapes, f) in op_cases() {
        let params: Vec<Tensor64> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let r = grad_check(&params, GradCheckConfig::default(), f)?;
        all &= r.passed() && r.max_rel_error < 1e-4;
        if r.max_rel_error > worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    let suite = grad_suite(7, GradCheckConfig::default())?;
    for (name, r) in &suite {
        all &= r.passed() && r.max_rel_error < 1e-4;
        if r.max_rel_error > worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    check(
        all,
        format!(
            "{} ops and {} encoder variants, worst relative error {:.2e} ({})",
            op_cases().len(),
            suite.len(),
            worst.1,
            worst.0
        ),
    )
}

fn identity_at_init() -> Result<Check> {
    let plain = Model::new(toy_config(ModelKind::Plain), toy_schema())?;
    let inj = Model::new(toy_config(ModelKind::Injectors), toy_schema())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut equal = 0;
    for case in 0..100u64 {
        let pp: ParamStore<f64> = plain.init_params(case, case);
        let mut pi: ParamStore<f64> = inj.init_params(case, case + 1000);
        // Classifier heads are drawn from the adapter seed; share them.
        for name in ["head.0.w", "head.0.b"] {
            let id = pi.layout().id(name).expect("classifier head");
            *pi.get_mut(id) = pp.by_name(name).expect("classifier head").clone();
        }
        let len = rng.random_range(0..=8);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(2..12)).collect();
        let user = if rng.random_bool(0.8) {
            vec![rng.random_range(0..5)]
        } else {
            vec![]
        };
        let tags = (0..rng.random_range(0..4))
            .map(|_| rng.random_range(0..6))
            .collect();
        let attrs = AttributeAssignment::new(vec![user, tags]);
        if plain.logits(&pp, &tokens, &attrs)? == inj.logits(&pi, &tokens, &attrs)? {
            equal += 1;
        }
    }
    check(equal == 100, format!("{equal}/100 inputs bit-equal"))
}

fn rank_property() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ok, mut max_sum, mut max_term) = (0, 0, 0);
    for _ in 0..100 {
        let o = rng.random_range(1..=4);
        let cfg = InjectorConfig {
            d_h: o * o * rng.random_range(1..=4),
            d_a: rng.random_range(1..=8),
            d_z: rng.random_range(1..=12),
            n_dims: o,
            ..InjectorConfig::default()
        };
        let mut layout = ParamLayout::new();
        let a = AttrAdapter::declare(&mut layout, "a", "x", &cfg);
        let store = randomized(layout, &mut rng);
        let z = rand_tensor(&[cfg.d_z], &mut rng);
        let (sum, terms) = phm_kron_terms(&store, &a.synthesizer, &z)?;
        let rs = svd_rank(&sum, 1e-6);
        let rt = terms.iter().map(|t| svd_rank(t, 1e-6)).max().unwrap_or(0);
        max_sum = max_sum.max(rs);
        max_term = max_term.max(rt);
        if rs <= o * o && rt <= o {
            ok += 1;
        }
    }
    check(
        ok == 100,
        format!(
            "{ok}/100 configs within bounds (largest sum rank {max_sum}, term rank {max_term})"
        ),
    )
}

fn aggregation_properties() -> Result<Check> {
    let cfg = InjectorConfig {
        d_h: 16,
        d_a: 4,
        d_z: 6,
        n_dims: 2,
        ..InjectorConfig::default()
    };
    let pre = InjectorConfig {
        aggregation: Aggregation::Pre,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut invariant, mut differ, mut bias_max) = (0, 0, 0.0f64);
    for _ in 0..100 {
        let mut layout = ParamLayout::new();
        let a = AttrAdapter::declare(&mut layout, "a", "tags", &cfg);
        let store = randomized(layout, &mut rng);
        let n = rng.random_range(2..=5);
        let zs: Vec<Tensor64> = (0..n).map(|_| rand_tensor(&[cfg.d_z], &mut rng)).collect();
        let mut shuffled = zs.clone();
        shuffled.rotate_left(rng.random_range(1..n));
        shuffled.swap(0, n - 1);
        let (w_post, b_post) = a.synthesize(&store, &zs, &cfg)?;
        let (w_perm, b_perm) = a.synthesize(&store, &shuffled, &cfg)?;
        let (w_pre, b_pre) = a.synthesize(&store, &zs, &pre)?;
        if w_post == w_perm && b_post == b_perm {
            invariant += 1;
        }
        if w_post.max_abs_diff(&w_pre)? > 1e-6 {
            differ += 1;
        }
        bias_max = bias_max.max(b_post.max_abs_diff(&b_pre)?);
    }
    check(
        invariant == 100 && differ >= 95 && bias_max < 1e-10,
        format!("permutation-invariant {invariant}/100, weight pre != post {differ}/100, bias max diff {bias_max:.1e}"),
    )
}

struct Lift {
    prep: Prepared,
    bayes: f64,
    injectors: (Model, ParamStore32, Evaluation),
    adapters: (Model, ParamStore32, Evaluation),
    tokens: f64,
}

fn train_lift() -> Result<Lift> {
    let cfg = config("lift.toml");
    let prep = prepare(&cfg)?;
    let bayes = prep.stats.as_ref().expect("synthetic data").bayes_accuracy;
    let fit = |kind| -> Result<(Model, ParamStore32, Evaluation)> {
        let base = ModelConfig {
            kind,
            ..prep.model.clone()
        };
        let (model, out, ev) = fit_and_score::<f32>(&base, &prep.data, &cfg.plan)?;
        Ok((model, out.best, ev))
    };
    let injectors = fit(ModelKind::Injectors)?;
    let adapters = fit(ModelKind::Adapters)?;
    let tokens = fit(ModelKind::Tokens)?.2.score;
    Ok(Lift {
        prep,
        bayes,
        injectors,
        adapters,
        tokens,
    })
}

fn synthetic_lift(lift: &Lift) -> Result<Check> {
    let (inj, ada) = (lift.injectors.2.score, lift.adapters.2.score);
    check(
        inj - ada >= 0.10 && lift.bayes - inj <= 0.05 && lift.tokens <= inj,
        format!(
            "injectors {inj:.4}, adapters {ada:.4}, tokens {:.4}, Bayes {:.4}",
            lift.tokens, lift.bayes
        ),
    )
}

fn bin_accuracy(ev: &Evaluation, data: &TaskData, bin: &[usize]) -> f64 {
    let correct = bin
        .iter()
        .filter(|&&i| ev.predictions[i][0] == data.test[i].labels[0])
        .count();
    correct as f64 / bin.len() as f64
}

fn cold_start(lift: &Lift) -> Result<Check> {
    let data = &lift.prep.data;
    let (model, params, inj_ev) = &lift.injectors;
    let masked = evaluate(
        model,
        params,
        &mask_attributes(&data.test),
        Metric::Accuracy,
    )?
    .score;
    let baseline = lift.adapters.2.score;
    let refs: Vec<&AttributeAssignment> = data.test.iter().map(|e| &e.attributes).collect();
    let mut pass = masked >= baseline - 0.02;
    let mut bins = Vec::new();
    for (j, attr) in lift.prep.profile.attributes.iter().enumerate() {
        let bin0 = &bin_by_sparsity(&refs, j, &attr.counts, 10)?[0];
        let (i, a) = (
            bin_accuracy(inj_ev, data, bin0),
            bin_accuracy(&lift.adapters.2, data, bin0),
        );
        pass &= i >= a;
        bins.push(format!(
            "{} bin-0 {i:.3} vs {a:.3}",
            data.schema.attributes[j].name
        ));
    }
    check(
        pass,
        format!(
            "all-masked {masked:.4} vs no-attribute {baseline:.4}; {}",
            bins.join(", ")
        ),
    )
}

fn modularity() -> Result<Check> {
    let cfg = config("transfer.toml");
    let prep = prepare(&cfg)?;
    let source = prep.data.select(&cfg.transfer.source_tasks);
    let target = prep.data.select(&cfg.transfer.target_tasks);
    let r = transfer_experiment::<f32>(&prep.model, &source, &target, &cfg.plan)?;
    let gap = r.direct - r.transferred;
    check(
        gap <= 0.02 && r.frozen_unchanged,
        format!(
            "direct {:.4}, transferred {:.4} ({:+.2} points), {} frozen tensors unchanged: {}",
            r.direct,
            r.transferred,
            -100.0 * gap,
            r.n_copied,
            r.frozen_unchanged
        ),
    )
}

fn ablation_harness() -> Result<Check> {
    let cfg = config("ablate.toml");
    let prep = prepare(&cfg)?;
    let rows = run_ablation::<f32>(
        &prep.model,
        &prep.data,
        &cfg.plan,
        &Ablation::TOGGLES,
        DEFAULT_MEMORY_BUDGET,
    )?;
    let completed = rows
        .iter()
        .filter(|r| matches!(r.result, AblationStatus::Completed { .. }))
        .count();

    let base = ModelConfig::base_size(vec![5]);
    let full_size = TaskData {
        schema: base_schema(2, base.injector.d_z)?,
        class_counts: vec![5],
        train: vec![],
        dev: vec![],
        test: vec![],
    };
    let full = Model::new(base.clone(), full_size.schema.clone())?;
    let full_fits = training_bytes(full.layout(), 4) <= DEFAULT_MEMORY_BUDGET;
    let big = run_ablation::<f32>(
        &base,
        &full_size,
        &cfg.plan,
        &[Ablation::NoLowRank],
        DEFAULT_MEMORY_BUDGET,
    )?;
    let oom = match big[0].result {
        AblationStatus::OutOfMemory { required_bytes, .. } => Some(required_bytes),
        _ => None,
    };
    check(
        completed == Ablation::TOGGLES.len() && oom.is_some() && full_fits,
        format!(
            "{completed}/{} toggles completed at desk scale; no-low-rank at full size {}",
            Ablation::TOGGLES.len(),
            oom.map_or("was not flagged".to_string(), |b| format!(
                "flagged out of memory ({:.1} GiB)",
                b as f64 / (1u64 << 30) as f64
            ))
        ),
    )
}

fn report(
    id: usize,
    title: &str,
    limit: Option<Duration>,
    f: impl FnOnce() -> Result<Check>,
) -> bool {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let (pass, detail) = match outcome {
        Ok(c) => (c.pass, c.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {:.0?}", l));
    println!(
        "{} {id:>2} {title}: {detail} [{:.1?}{budget}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed
    );
    pass
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut pass = true;
    pass &= report(1, "parameter ratio", secs(1), parameter_ratio);
    pass &= report(2, "trainable fraction", secs(5), trainable_fraction);
    pass &= report(3, "gradient suite", secs(120), gradient_suite);
    pass &= report(4, "identity at init", None, identity_at_init);
    pass &= report(5, "rank bound", None, rank_property);
    pass &= report(6, "aggregation", None, aggregation_properties);

    let start = Instant::now();
    let lift = train_lift();
    let lift_time = start.elapsed();
    match &lift {
        Ok(l) => {
            pass &= report(7, "synthetic lift", None, || {
                let mut c = synthetic_lift(l)?;
                c.detail.push_str(&format!(", training {lift_time:.1?}"));
                c.pass &= lift_time <= Duration::from_secs(15 * 60);
                Ok(c)
            });
            pass &= report(8, "attribute dropout and cold start", None, || {
                cold_start(l)
            });
        }
        Err(e) => {
            println!("FAIL  7 synthetic lift: error: {e}");
            println!("FAIL  8 attribute dropout and cold start: error: {e}");
            pass = false;
        }
    }

    pass &= report(9, "modularity", None, modularity);
    pass &= report(10, "ablation harness", None, ablation_harness);
    if !pass {
        std::process::exit(1);
    }
}
