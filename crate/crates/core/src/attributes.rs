//! Attribute vocabularies, per-instance assignments, attribute dropout and
//! sparsity statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Labels seen fewer times than this in training count as sparse.
pub const SPARSE_THRESHOLD: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub vocab_size: usize,
    #[serde(default)]
    pub multi_label: bool,
}

/// The attribute universe of a task. Order defines injection order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeDef>,
    pub d_z: usize,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<AttributeDef>, d_z: usize) -> Result<Self> {
        let s = Self { attributes, d_z };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 {
            return Err(Error::Config("d_z must be positive".into()));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.vocab_size == 0 {
                return Err(Error::Config(format!(
                    "attribute `{}` has an empty vocabulary",
                    a.name
                )));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Config(format!(
                    "duplicate attribute name `{}`",
                    a.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Same names, order and label arity; vocabulary sizes must also agree.
    pub fn compatible_with(&self, other: &Self) -> bool {
        self == other
    }
}

/// Label ids per attribute. Each set is kept sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AttributeAssignment {
    labels: Vec<Vec<usize>>,
}

impl AttributeAssignment {
    pub fn new(mut labels: Vec<Vec<usize>>) -> Self {
        for l in labels.iter_mut() {
            l.sort_unstable();
            l.dedup();
        }
        Self { labels }
    }

    pub fn empty(n_attributes: usize) -> Self {
        Self {
            labels: vec![Vec::new(); n_attributes],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self, j: usize) -> &[usize] {
        &self.labels[j]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn set(&mut self, j: usize, mut ids: Vec<usize>) {
        ids.sort_unstable();
        ids.dedup();
        self.labels[j] = ids;
    }

    pub fn clear(&mut self, j: usize) {
        self.labels[j].clear();
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.labels.len() != schema.len() {
            return Err(Error::Schema(format!(
                "assignment has {} attributes, schema has {}",
                self.labels.len(),
                schema.len()
            )));
        }
        for (ids, def) in self.labels.iter().zip(&schema.attributes) {
            if !def.multi_label && ids.len() > 1 {
                return Err(Error::Schema(format!(
                    "single-label attribute `{}` carries {} labels",
                    def.name,
                    ids.len()
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id >= def.vocab_size) {
                return Err(Error::Vocabulary {
                    attribute: def.name.clone(),
                    id: bad,
                    vocab_size: def.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Embedding rows for every label of attribute `j`.
pub fn lookup<T: Scalar>(
    table: &Tensor<T>,
    schema: &AttributeSchema,
    assignment: &AttributeAssignment,
    j: usize,
) -> Result<Vec<Tensor<T>>> {
    let def = schema
        .attributes
        .get(j)
        .ok_or_else(|| Error::Schema(format!("no attribute {j}")))?;
    if table.shape() != [def.vocab_size, schema.d_z] {
        return Err(Error::Schema(format!(
            "table for `{}` has shape {:?}, expected [{}, {}]",
            def.name,
            table.shape(),
            def.vocab_size,
            schema.d_z
        )));
    }
    assignment
        .labels(j)
        .iter()
        .map(|&id| {
            if id >= def.vocab_size {
                return Err(Error::Vocabulary {
                    attribute: def.name.clone(),
                    id,
                    vocab_size: def.vocab_size,
                });
            }
            table.row(id)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutGranularity {
    /// Empty the whole attribute.
    #[default]
    Attribute,
    /// Drop each label of the attribute independently.
    Label,
}

/// Masks attributes of a training instance with probability `rate`.
///
/// One uniform draw is consumed per attribute (or per label in
/// [`DropoutGranularity::Label`] mode) whether or not it is empty, so the
/// random stream does not depend on the data.
pub fn apply_attribute_dropout<R: Rng + ?Sized>(
    assignment: &AttributeAssignment,
    rate: f64,
    granularity: DropoutGranularity,
    rng: &mut R,
) -> AttributeAssignment {
    let mut out = assignment.clone();
    if rate <= 0.0 {
        return out;
    }
    for j in 0..out.len() {
        match granularity {
            DropoutGranularity::Attribute => {
                if rng.random::<f64>() < rate {
                    out.clear(j);
                }
            }
            DropoutGranularity::Label => {
                let kept = out.labels[j]
                    .iter()
                    .copied()
                    .filter(|_| rng.random::<f64>() >= rate)
                    .collect();
                out.labels[j] = kept;
            }
        }
    }
    out
}

/// Training frequency of every label of every attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub attributes: Vec<AttributeSparsity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSparsity {
    pub name: String,
    pub counts: Vec<usize>,
    /// Labels occurring at least once.
    pub n_observed: usize,
    /// Observed labels with fewer than [`SPARSE_THRESHOLD`] occurrences.
    pub n_sparse: usize,
    /// `100 · n_sparse / n_observed`.
    pub pct_sparse: f64,
}

/// Counts label occurrences over training assignments. Labels that never
/// occur are not part of the observed vocabulary and are not counted as
/// sparse.
pub fn sparsity_profile<'a, I>(assignments: I, schema: &AttributeSchema) -> SparsityProfile
where
    I: IntoIterator<Item = &'a AttributeAssignment>,
{
    let mut counts: Vec<Vec<usize>> = schema
        .attributes
        .iter()
        .map(|a| vec![0; a.vocab_size])
        .collect();
    for a in assignments {
        for (j, ids) in a.all().iter().enumerate() {
            for &id in ids {
                counts[j][id] += 1;
            }
        }
    }
    let attributes = schema
        .attributes
        .iter()
        .zip(counts)
        .map(|(def, counts)| {
            let n_observed = counts.iter().filter(|&&c| c > 0).count();
            let n_sparse = counts
                .iter()
                .filter(|&&c| c > 0 && c < SPARSE_THRESHOLD)
                .count();
            let pct_sparse = if n_observed == 0 {
                0.0
            } else {
                100.0 * n_sparse as f64 / n_observed as f64
            };
            AttributeSparsity {
                name: def.name.clone(),
                counts,
                n_observed,
                n_sparse,
                pct_sparse,
            }
        })
        .collect();
    SparsityProfile { attributes }
}

/// Bidirectional label-string ↔ id map; id is insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        let mut v = Self::new();
        for l in labels {
            v.insert(l.into());
        }
        v
    }

    /// Id of `label`, adding it if new.
    pub fn insert(&mut self, label: impl Into<String>) -> usize {
        let label = label.into();
        if let Some(&id) = self.index.get(&label) {
            return id;
        }
        let id = self.labels.len();
        self.index.insert(label.clone(), id);
        self.labels.push(label);
        id
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// One label per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        for l in &self.labels {
            s.push_str(l);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            if v.insert(line) != i {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate label `{line}`"),
                });
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> AttributeSchema {
        AttributeSchema::new(
            vec![
                AttributeDef {
                    name: "user".into(),
                    vocab_size: 4,
                    multi_label: false,
                },
                AttributeDef {
                    name: "tags".into(),
                    vocab_size: 10,
                    multi_label: true,
                },
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_empty_vocab() {
        let mut s = schema();
        s.attributes[1].name = "user".into();
        assert!(s.validate().is_err());
        let mut s = schema();
        s.attributes[0].vocab_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn assignment_set_semantics() {
        let a = AttributeAssignment::new(vec![vec![2], vec![7, 3, 7]]);
        assert_eq!(a.labels(1), &[3, 7]);
        assert!(a.validate(&schema()).is_ok());
        let bad = AttributeAssignment::new(vec![vec![1, 2], vec![]]);
        assert!(matches!(bad.validate(&schema()), Err(Error::Schema(_))));
        let oob = AttributeAssignment::new(vec![vec![4], vec![]]);
        assert!(matches!(
            oob.validate(&schema()),
            Err(Error::Vocabulary { id: 4, .. })
        ));
    }

    #[test]
    fn lookup_rows() {
        let s = schema();
        let table = Tensor::<f64>::from_fn([4, 3], |i| i as f64);
        let a = AttributeAssignment::new(vec![vec![], vec![]]);
        assert!(lookup(&table, &s, &a, 0).unwrap().is_empty());
        let a = AttributeAssignment::new(vec![vec![0], vec![]]);
        assert_eq!(
            lookup(&table, &s, &a, 0).unwrap(),
            vec![Tensor::vector(vec![0.0, 1.0, 2.0])]
        );
        let a = AttributeAssignment::new(vec![vec![9], vec![]]);
        let err = lookup(&table, &s, &a, 0).unwrap_err();
        assert!(err.to_string().contains("user") && err.to_string().contains('9'));
    }

    #[test]
    fn dropout_extremes() {
        let a = AttributeAssignment::new(vec![vec![1], vec![2, 5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            apply_attribute_dropout(&a, 0.0, DropoutGranularity::Attribute, &mut rng),
            a
        );
        assert_eq!(
            apply_attribute_dropout(&a, 1.0, DropoutGranularity::Attribute, &mut rng),
            AttributeAssignment::empty(2)
        );
        assert_eq!(
            apply_attribute_dropout(&a, 1.0, DropoutGranularity::Label, &mut rng),
            AttributeAssignment::empty(2)
        );
    }

    #[test]
    fn sparsity_extremes() {
        let s = schema();
        let many: Vec<_> = (0..400)
            .map(|i| AttributeAssignment::new(vec![vec![i % 4], vec![]]))
            .collect();
        assert_eq!(sparsity_profile(&many, &s).attributes[0].pct_sparse, 0.0);
        let once: Vec<_> = (0..4)
            .map(|i| AttributeAssignment::new(vec![vec![i], vec![]]))
            .collect();
        assert_eq!(sparsity_profile(&once, &s).attributes[0].pct_sparse, 100.0);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = Vocab::from_labels(["q-bio.PE", "cs.DS", "u 1"]);
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get("cs.DS"), Some(1));
    }
}
