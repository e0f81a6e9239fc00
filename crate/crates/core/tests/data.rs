use std::collections::HashSet;

use injectors::attributes::{sparsity_profile, AttributeAssignment, Vocab};
use injectors::data::{
    bin_by_sparsity, infer_classes, ingest_jsonl, kfold_split, metrics, save_jsonl, sparsity_score,
    AttributeField, IngestMode, Metric, Vocabularies,
};
use injectors::synthetic::{generate_synthetic, GeneratorSpec};
use proptest::prelude::*;

fn author_area_fields() -> Vec<AttributeField> {
    vec![
        AttributeField {
            name: "authors".into(),
            multi_label: true,
        },
        AttributeField {
            name: "areas".into(),
            multi_label: true,
        },
    ]
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    let mut v = Vocabularies::new(author_area_fields(), vec![Vocab::from_labels(["x"])]);
    assert!(ingest_jsonl(&p, &mut v, IngestMode::Train)
        .unwrap()
        .is_empty());
}

#[test]
fn multi_label_research_areas() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("submissions.jsonl");
    std::fs::write(
        &p,
        r#"{"text": "a model of population dynamics", "attributes": {"authors": ["A. One"], "areas": ["q-bio.PE", "cs.DS"]}, "label": "accepted"}"#,
    )
    .unwrap();
    let mut v = Vocabularies::new(author_area_fields(), infer_classes(&p).unwrap());
    let data = ingest_jsonl(&p, &mut v, IngestMode::Train).unwrap();
    assert_eq!(data[0].attributes.labels(1).len(), 2);
    assert_eq!(v.attributes[1].labels(), ["q-bio.PE", "cs.DS"]);
}

#[test]
fn thousand_record_roundtrip_is_identity() {
    let spec = GeneratorSpec {
        n_train: 1000,
        n_dev: 1,
        n_test: 1,
        marginal_pool: 4,
        ..GeneratorSpec::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.jsonl");
    save_jsonl(&first, &d.train, &d.vocabs).unwrap();
    let mut v = d.vocabs.clone();
    let back = ingest_jsonl(&first, &mut v, IngestMode::Train).unwrap();
    assert_eq!(back, d.train);
    assert_eq!(v, d.vocabs);
    let second = dir.path().join("b.jsonl");
    save_jsonl(&second, &back, &v).unwrap();
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap()
    );

    // Fresh vocabularies assign new ids but keep every label string.
    let mut fresh = Vocabularies::new(d.vocabs.fields.clone(), infer_classes(&first).unwrap());
    let relabelled = ingest_jsonl(&first, &mut fresh, IngestMode::Train).unwrap();
    for (a, b) in d.train.iter().zip(&relabelled) {
        assert_eq!(a.text, b.text);
        for j in 0..2 {
            let la: HashSet<&str> = a
                .attributes
                .labels(j)
                .iter()
                .map(|&i| d.vocabs.attributes[j].label(i).unwrap())
                .collect();
            let lb: HashSet<&str> = b
                .attributes
                .labels(j)
                .iter()
                .map(|&i| fresh.attributes[j].label(i).unwrap())
                .collect();
            assert_eq!(la, lb);
        }
        assert_eq!(
            d.vocabs.classes[0].label(a.labels[0]),
            fresh.classes[0].label(b.labels[0])
        );
    }
}

#[test]
fn kfold_cases() {
    let folds = kfold_split(4500, 10, 1).unwrap();
    assert!(folds.iter().all(|(_, te)| te.len() == 450));
    let loo = kfold_split(7, 7, 2).unwrap();
    assert!(loo.iter().all(|(tr, te)| te.len() == 1 && tr.len() == 6));
    assert_eq!(
        kfold_split(50, 5, 9).unwrap(),
        kfold_split(50, 5, 9).unwrap()
    );
}

#[test]
fn three_class_confusion_metrics() {
    // Confusion (rows gold, columns predicted):
    //   gold 0: 3 1 0
    //   gold 1: 1 2 1
    //   gold 2: 0 2 2
    let pairs = [
        (0, 0, 3),
        (0, 1, 1),
        (1, 0, 1),
        (1, 1, 2),
        (1, 2, 1),
        (2, 1, 2),
        (2, 2, 2),
    ];
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for (g, p, n) in pairs {
        for _ in 0..n {
            gold.push(vec![g]);
            pred.push(vec![p]);
        }
    }
    assert!((metrics(&pred, &gold, Metric::Accuracy).unwrap() - 7.0 / 12.0).abs() < 1e-15);
    // Class 1: tp 2, fp 3, fn 2.
    let f1 = 2.0 * 2.0 / (2.0 * 2.0 + 3.0 + 2.0);
    assert!((metrics(&pred, &gold, Metric::F1).unwrap() - f1).abs() < 1e-15);
    assert_eq!(metrics(&gold, &gold, Metric::Accuracy).unwrap(), 1.0);
    assert_eq!(
        metrics(&gold, &gold, Metric::MultiTaskMeanAccuracy).unwrap(),
        1.0
    );
}

#[test]
fn multi_task_mean_is_unweighted() {
    let gold = vec![vec![0, 1], vec![1, 1], vec![0, 0], vec![1, 0]];
    let pred = vec![vec![0, 1], vec![1, 0], vec![1, 1], vec![1, 1]];
    // Task 0: 3/4, task 1: 1/4.
    assert_eq!(
        metrics(&pred, &gold, Metric::MultiTaskMeanAccuracy).unwrap(),
        0.5
    );
}

#[test]
fn bins_are_equal_and_tie_stable() {
    let a = AttributeAssignment::new(vec![vec![0]]);
    let refs: Vec<&AttributeAssignment> = (0..100).map(|_| &a).collect();
    let bins = bin_by_sparsity(&refs, 0, &[5], 10).unwrap();
    assert!(bins.iter().all(|b| b.len() == 10));
    let flat: Vec<usize> = bins.concat();
    assert_eq!(flat, (0..100).collect::<Vec<_>>());
    assert!(bin_by_sparsity(&refs[..5], 0, &[5], 10).is_err());
}

#[test]
fn zipf_bins_are_monotone_in_frequency() {
    let spec = GeneratorSpec {
        n_train: 4000,
        n_dev: 1,
        n_test: 1000,
        marginal_pool: 4,
        ..GeneratorSpec::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    let schema = d.vocabs.schema(4).unwrap();
    let profile = sparsity_profile(d.train.iter().map(|i| &i.attributes), &schema);
    for j in 0..2 {
        let counts = &profile.attributes[j].counts;
        let refs: Vec<&AttributeAssignment> = d.test.iter().map(|i| &i.attributes).collect();
        let bins = bin_by_sparsity(&refs, j, counts, 10).unwrap();
        let means: Vec<f64> = bins
            .iter()
            .map(|b| {
                b.iter()
                    .map(|&i| sparsity_score(refs[i], j, counts))
                    .sum::<f64>()
                    / b.len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
        assert!(means[0] < means[9]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kfold_partitions(n in 2usize..200, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 2 + ((n - 2) as f64 * k_frac) as usize;
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![false; n];
        for (train, test) in &folds {
            prop_assert_eq!(train.len() + test.len(), n);
            let t: HashSet<usize> = test.iter().copied().collect();
            prop_assert!(train.iter().all(|i| !t.contains(i)));
            for &i in test {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn bins_partition_with_nondecreasing_scores(
        labels in prop::collection::vec(0usize..20, 10..120),
        counts in prop::collection::vec(0usize..50, 20),
        n_bins in 1usize..10,
    ) {
        let assigns: Vec<AttributeAssignment> = labels.iter().map(|&l| AttributeAssignment::new(vec![vec![l]])).collect();
        let refs: Vec<&AttributeAssignment> = assigns.iter().collect();
        let bins = bin_by_sparsity(&refs, 0, &counts, n_bins).unwrap();
        let mut flat: Vec<usize> = bins.concat();
        let scores: Vec<f64> = flat.iter().map(|&i| counts[labels[i]] as f64).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] <= w[1]));
        let sizes: Vec<usize> = bins.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        flat.sort_unstable();
        prop_assert_eq!(flat, (0..labels.len()).collect::<Vec<_>>());
    }
}
