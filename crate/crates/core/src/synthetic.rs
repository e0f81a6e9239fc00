//! Synthetic attribute-dependent classification data with a known
//! label distribution.
//!
//! Each attribute label carries a latent class-bias vector and a subset of
//! the text vocabulary carries class-indicative vectors. A label is drawn
//! from a softmax over the mixed, standardised signals, smoothed with
//! uniform noise. Because the distribution is known, the accuracy of the
//! Bayes-optimal classifier can be reported alongside the data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::attributes::{sparsity_profile, AttributeAssignment, Vocab};
use crate::data::{AttributeField, Instance, Vocabularies};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGenSpec {
    pub name: String,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    /// Labels per instance are uniform in `1..=max_arity`; values above 1
    /// make the attribute multi-label.
    #[serde(default = "one")]
    pub max_arity: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_classes: usize,
    pub n_tasks: usize,
    /// Correlation of latent vectors across tasks, in `[0, 1]`.
    pub task_correlation: f64,
    /// Overrides `task_correlation` for attribute latents only.
    pub attribute_correlation: Option<f64>,
    pub attributes: Vec<AttributeGenSpec>,
    pub text_vocab_size: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    /// Fraction of text words that carry a class signal.
    pub indicative_fraction: f64,
    /// Mixing weights; nonnegative and summing to one.
    pub text_weight: f64,
    pub attribute_weight: f64,
    /// Logit scale applied to the mixed signal.
    pub signal_scale: f64,
    /// Probability mass spread uniformly over classes.
    pub label_noise: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Prior attribute draws used to marginalise attributes out of the
    /// text-only optimum.
    pub marginal_pool: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_tasks: 1,
            task_correlation: 1.0,
            attribute_correlation: None,
            attributes: vec![
                AttributeGenSpec {
                    name: "user".into(),
                    vocab_size: 200,
                    zipf_exponent: 1.0,
                    max_arity: 1,
                },
                AttributeGenSpec {
                    name: "tags".into(),
                    vocab_size: 30,
                    zipf_exponent: 1.0,
                    max_arity: 3,
                },
            ],
            text_vocab_size: 30,
            text_len_min: 8,
            text_len_max: 16,
            indicative_fraction: 0.34,
            text_weight: 0.4,
            attribute_weight: 0.6,
            signal_scale: 4.0,
            label_noise: 0.0,
            n_train: 5000,
            n_dev: 500,
            n_test: 1000,
            marginal_pool: 256,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.n_tasks == 0 {
            return bad("n_tasks must be positive");
        }
        if !(0.0..=1.0).contains(&self.task_correlation) {
            return bad("task_correlation must be in [0, 1]");
        }
        if self
            .attribute_correlation
            .is_some_and(|r| !(0.0..=1.0).contains(&r))
        {
            return bad("attribute_correlation must be in [0, 1]");
        }
        if self.text_vocab_size == 0 {
            return bad("text_vocab_size must be positive");
        }
        if self.text_len_min == 0 || self.text_len_min > self.text_len_max {
            return bad("text lengths must satisfy 1 <= text_len_min <= text_len_max");
        }
        if !(0.0..=1.0).contains(&self.indicative_fraction) {
            return bad("indicative_fraction must be in [0, 1]");
        }
        if self.text_weight < 0.0
            || self.attribute_weight < 0.0
            || (self.text_weight + self.attribute_weight - 1.0).abs() > 1e-9
        {
            return bad("mixing weights must be nonnegative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 1]");
        }
        if self.marginal_pool == 0 {
            return bad("marginal_pool must be positive");
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.vocab_size == 0 {
                return Err(Error::Config(format!(
                    "attribute `{}` has zero vocabulary",
                    a.name
                )));
            }
            if a.zipf_exponent < 0.0 || !a.zipf_exponent.is_finite() {
                return Err(Error::Config(format!(
                    "attribute `{}`: Zipf exponent must be >= 0",
                    a.name
                )));
            }
            if a.max_arity == 0 || a.max_arity > a.vocab_size {
                return Err(Error::Config(format!(
                    "attribute `{}`: max_arity must be in 1..=vocab_size",
                    a.name
                )));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> Vec<AttributeField> {
        self.attributes
            .iter()
            .map(|a| AttributeField {
                name: a.name.clone(),
                multi_label: a.max_arity > 1,
            })
            .collect()
    }
}

/// Latent generative parameters.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: GeneratorSpec,
    /// `text[t][w]`: class vector of word `w` for task `t` (`None` if the
    /// word is not indicative).
    pub text: Vec<Vec<Option<Vec<f64>>>>,
    /// `attr[t][j][l]`: class-bias vector of label `l` of attribute `j`.
    pub attr: Vec<Vec<Vec<Vec<f64>>>>,
    n_indicative: usize,
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn correlated(base: &[f64], rho: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = (1.0 - rho * rho).max(0.0).sqrt();
    base.iter()
        .map(|&b| {
            let e: f64 = StandardNormal.sample(rng);
            rho * b + k * e
        })
        .collect()
}

impl World {
    pub fn sample(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let c = spec.n_classes;
        let n_indicative =
            (spec.indicative_fraction * spec.text_vocab_size as f64).round() as usize;
        let base_text: Vec<Option<Vec<f64>>> = (0..spec.text_vocab_size)
            .map(|w| (w < n_indicative).then(|| normal_vec(c, rng)))
            .collect();
        let base_attr: Vec<Vec<Vec<f64>>> = spec
            .attributes
            .iter()
            .map(|a| (0..a.vocab_size).map(|_| normal_vec(c, rng)).collect())
            .collect();
        let rho = spec.task_correlation;
        let rho_attr = spec.attribute_correlation.unwrap_or(rho);
        let mut text = Vec::with_capacity(spec.n_tasks);
        let mut attr = Vec::with_capacity(spec.n_tasks);
        for t in 0..spec.n_tasks {
            if t == 0 {
                text.push(base_text.clone());
                attr.push(base_attr.clone());
                continue;
            }
            text.push(
                base_text
                    .iter()
                    .map(|v| v.as_ref().map(|v| correlated(v, rho, rng)))
                    .collect(),
            );
            attr.push(
                base_attr
                    .iter()
                    .map(|a| a.iter().map(|v| correlated(v, rho_attr, rng)).collect())
                    .collect(),
            );
        }
        Ok(Self {
            spec: spec.clone(),
            text,
            attr,
            n_indicative,
        })
    }

    /// Class distribution of task `task` given word ids and attributes.
    pub fn posterior(&self, task: usize, words: &[usize], attrs: &AttributeAssignment) -> Vec<f64> {
        let s = &self.spec;
        let c = s.n_classes;
        let mut text = vec![0.0; c];
        if self.n_indicative > 0 && !words.is_empty() {
            for &w in words {
                if let Some(v) = &self.text[task][w] {
                    for (a, b) in text.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
            let norm =
                (words.len() as f64 * self.n_indicative as f64 / s.text_vocab_size as f64).sqrt();
            text.iter_mut().for_each(|x| *x /= norm);
        }
        let mut attr = vec![0.0; c];
        let mut n_labels = 0usize;
        for (j, ids) in attrs.all().iter().enumerate() {
            for &l in ids {
                for (a, b) in attr.iter_mut().zip(&self.attr[task][j][l]) {
                    *a += b;
                }
                n_labels += 1;
            }
        }
        if n_labels > 0 {
            let norm = (n_labels as f64).sqrt();
            attr.iter_mut().for_each(|x| *x /= norm);
        }
        let logits: Vec<f64> = text
            .iter()
            .zip(&attr)
            .map(|(t, a)| s.signal_scale * (s.text_weight * t + s.attribute_weight * a))
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let eps = s.label_noise;
        e.iter()
            .map(|x| (1.0 - eps) * x / z + eps / c as f64)
            .collect()
    }

    fn sample_attributes(&self, zipfs: &[Zipf<f64>], rng: &mut ChaCha8Rng) -> AttributeAssignment {
        let labels = self
            .spec
            .attributes
            .iter()
            .zip(zipfs)
            .map(|(a, z)| {
                let k = rng.random_range(1..=a.max_arity);
                let mut ids: Vec<usize> = Vec::with_capacity(k);
                while ids.len() < k {
                    let id = z.sample(rng) as usize - 1;
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                ids
            })
            .collect();
        AttributeAssignment::new(labels)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    /// Mean over tasks of the expected Bayes-optimal test accuracy.
    pub bayes_accuracy: f64,
    pub bayes_accuracy_per_task: Vec<f64>,
    /// Same, for a classifier that sees only the text.
    pub text_only_bayes_accuracy: f64,
    pub text_only_bayes_per_task: Vec<f64>,
    /// Training-split percentage of observed labels seen fewer than ten times.
    pub pct_sparse: Vec<(String, f64)>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub vocabs: Vocabularies,
    pub stats: GeneratorStats,
    pub world: World,
}

pub fn word(id: usize) -> String {
    format!("w{id}")
}

/// Samples train, dev and test splits from one latent world.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::sample(spec, &mut rng)?;
    let zipfs = spec
        .attributes
        .iter()
        .map(|a| {
            Zipf::new(a.vocab_size as f64, a.zipf_exponent)
                .map_err(|e| Error::Config(format!("{}: {e}", a.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = |n: usize,
                  rng: &mut ChaCha8Rng|
     -> (Vec<Instance>, Vec<(Vec<usize>, AttributeAssignment)>) {
        let mut out = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(spec.text_len_min..=spec.text_len_max);
            let words: Vec<usize> = (0..len)
                .map(|_| rng.random_range(0..spec.text_vocab_size))
                .collect();
            let attrs = world.sample_attributes(&zipfs, rng);
            let labels = (0..spec.n_tasks)
                .map(|t| draw(&world.posterior(t, &words, &attrs), rng))
                .collect();
            let text = words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ");
            out.push(Instance {
                text,
                attributes: attrs.clone(),
                labels,
            });
            raw.push((words, attrs));
        }
        (out, raw)
    };
    let (train, _) = sample(spec.n_train, &mut rng);
    let (dev, _) = sample(spec.n_dev, &mut rng);
    let (test, test_raw) = sample(spec.n_test, &mut rng);

    let pool: Vec<AttributeAssignment> = (0..spec.marginal_pool)
        .map(|_| world.sample_attributes(&zipfs, &mut rng))
        .collect();
    let mut bayes = vec![0.0; spec.n_tasks];
    let mut text_only = vec![0.0; spec.n_tasks];
    for (words, attrs) in &test_raw {
        for t in 0..spec.n_tasks {
            let p = world.posterior(t, words, attrs);
            bayes[t] += p[argmax(&p)];
            let mut marg = vec![0.0; spec.n_classes];
            for z in &pool {
                for (m, q) in marg.iter_mut().zip(world.posterior(t, words, z)) {
                    *m += q;
                }
            }
            text_only[t] += marg[argmax(&marg)] / pool.len() as f64;
        }
    }
    let n_test = spec.n_test.max(1) as f64;
    bayes.iter_mut().for_each(|b| *b /= n_test);
    text_only.iter_mut().for_each(|b| *b /= n_test);

    let fields = spec.fields();
    let mut vocabs = Vocabularies::new(
        fields,
        (0..spec.n_tasks)
            .map(|_| Vocab::from_labels((0..spec.n_classes).map(|c| c.to_string())))
            .collect(),
    );
    for (j, a) in spec.attributes.iter().enumerate() {
        vocabs.attributes[j] =
            Vocab::from_labels((0..a.vocab_size).map(|l| format!("{}_{l}", a.name)));
    }
    let schema = vocabs.schema(1)?;
    let profile = sparsity_profile(train.iter().map(|i| &i.attributes), &schema);
    let stats = GeneratorStats {
        bayes_accuracy: bayes.iter().sum::<f64>() / bayes.len() as f64,
        bayes_accuracy_per_task: bayes,
        text_only_bayes_accuracy: text_only.iter().sum::<f64>() / text_only.len() as f64,
        text_only_bayes_per_task: text_only,
        pct_sparse: profile
            .attributes
            .iter()
            .map(|a| (a.name.clone(), a.pct_sparse))
            .collect(),
        n_train: spec.n_train,
        n_dev: spec.n_dev,
        n_test: spec.n_test,
    };
    Ok(SyntheticData {
        train,
        dev,
        test,
        vocabs,
        stats,
        world,
    })
}

/// Expected percentage of observed labels with fewer than `threshold`
/// occurrences among `n` Zipf draws over `vocab` labels (Poisson
/// approximation of each label's count).
pub fn expected_pct_sparse(vocab: usize, exponent: f64, n: usize, threshold: usize) -> f64 {
    let h: f64 = (1..=vocab).map(|k| (k as f64).powf(-exponent)).sum();
    let (mut observed, mut sparse) = (0.0, 0.0);
    for k in 1..=vocab {
        let lambda = n as f64 * (k as f64).powf(-exponent) / h;
        let p0 = (-lambda).exp();
        let mut term = p0;
        let mut below = p0;
        for j in 1..threshold {
            term *= lambda / j as f64;
            below += term;
        }
        observed += 1.0 - p0;
        sparse += below - p0;
    }
    100.0 * sparse / observed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            n_train: 300,
            n_dev: 50,
            n_test: 200,
            marginal_pool: 64,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn reproducible() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut s = small();
        s.text_vocab_size = 0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small();
        s.text_weight = 0.7;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small();
        s.attributes[0].zipf_exponent = -1.0;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn posterior_is_a_distribution() {
        let d = generate_synthetic(&small()).unwrap();
        let p = d.world.posterior(0, &[1, 2, 3], &d.train[0].attributes);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.stats.bayes_accuracy >= d.stats.text_only_bayes_accuracy);
    }
}
