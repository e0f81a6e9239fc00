//! Datasets: JSONL records, vocabularies, splits, metrics and sparsity bins.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attributes::{AttributeAssignment, AttributeDef, AttributeSchema, Vocab};
use crate::error::{Error, Result};

/// One `(text, attributes, labels)` record; `labels` holds one class id per task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub text: String,
    pub attributes: AttributeAssignment,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeField {
    pub name: String,
    #[serde(default)]
    pub multi_label: bool,
}

/// Attribute and class vocabularies of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub fields: Vec<AttributeField>,
    pub attributes: Vec<Vocab>,
    /// One class vocabulary per task.
    pub classes: Vec<Vocab>,
}

/// Whether unseen attribute labels extend the vocabulary or are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestMode {
    Train,
    Eval,
}

impl Vocabularies {
    pub fn new(fields: Vec<AttributeField>, classes: Vec<Vocab>) -> Self {
        let attributes = fields.iter().map(|_| Vocab::new()).collect();
        Self {
            fields,
            attributes,
            classes,
        }
    }

    /// Attribute schema sized to the current vocabularies. Empty
    /// vocabularies are given one slot so the schema stays valid.
    pub fn schema(&self, d_z: usize) -> Result<AttributeSchema> {
        AttributeSchema::new(
            self.fields
                .iter()
                .zip(&self.attributes)
                .map(|(f, v)| AttributeDef {
                    name: f.name.clone(),
                    vocab_size: v.len().max(1),
                    multi_label: f.multi_label,
                })
                .collect(),
            d_z,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vocab::len).collect()
    }

    /// Writes `attr.<name>.vocab` and `classes.<task>.vocab` files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (f, v) in self.fields.iter().zip(&self.attributes) {
            v.save(dir.join(format!("attr.{}.vocab", f.name)))?;
        }
        for (t, v) in self.classes.iter().enumerate() {
            v.save(dir.join(format!("classes.{t}.vocab")))?;
        }
        Ok(())
    }

    pub fn load(
        dir: impl AsRef<Path>,
        fields: Vec<AttributeField>,
        n_tasks: usize,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let attributes = fields
            .iter()
            .map(|f| Vocab::load(dir.join(format!("attr.{}.vocab", f.name))))
            .collect::<Result<_>>()?;
        let classes = (0..n_tasks)
            .map(|t| Vocab::load(dir.join(format!("classes.{t}.vocab"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            fields,
            attributes,
            classes,
        })
    }
}

fn strings(v: &Value) -> Option<Vec<&str>> {
    match v {
        Value::String(s) => Some(vec![s.as_str()]),
        Value::Array(xs) => xs.iter().map(Value::as_str).collect(),
        _ => None,
    }
}

/// Parses one JSONL record. `line` is 1-based and only used in errors.
pub fn parse_record(
    text: &str,
    line: usize,
    vocabs: &mut Vocabularies,
    mode: IngestMode,
) -> Result<Instance> {
    let perr = |msg: String| Error::Parse { line, msg };
    let v: Value = serde_json::from_str(text).map_err(|e| perr(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| perr("record is not an object".into()))?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| perr("missing string field `text`".into()))?
        .to_string();
    let empty = Map::new();
    let attrs = match obj.get("attributes") {
        None | Some(Value::Null) => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(perr("`attributes` must be an object".into())),
    };
    if let Some(k) = attrs
        .keys()
        .find(|k| !vocabs.fields.iter().any(|f| &f.name == *k))
    {
        return Err(perr(format!("unknown attribute `{k}`")));
    }
    let mut labels = Vec::with_capacity(vocabs.fields.len());
    for (f, vocab) in vocabs.fields.iter().zip(vocabs.attributes.iter_mut()) {
        let Some(raw) = attrs.get(&f.name) else {
            labels.push(Vec::new());
            continue;
        };
        let names = strings(raw).ok_or_else(|| {
            perr(format!(
                "attribute `{}` must be a string or list of strings",
                f.name
            ))
        })?;
        if !f.multi_label && names.len() > 1 {
            return Err(perr(format!(
                "single-label attribute `{}` has {} labels",
                f.name,
                names.len()
            )));
        }
        let ids = names
            .into_iter()
            .filter_map(|n| match mode {
                IngestMode::Train => Some(vocab.insert(n)),
                IngestMode::Eval => vocab.get(n),
            })
            .collect();
        labels.push(ids);
    }
    let raw_label = obj
        .get("label")
        .ok_or_else(|| perr("missing field `label`".into()))?;
    let names = strings(raw_label)
        .ok_or_else(|| perr("`label` must be a string or list of strings".into()))?;
    if names.len() != vocabs.classes.len() {
        return Err(perr(format!(
            "{} labels for {} tasks",
            names.len(),
            vocabs.classes.len()
        )));
    }
    let labels_y = names
        .iter()
        .zip(&vocabs.classes)
        .map(|(n, v)| {
            v.get(n)
                .ok_or_else(|| Error::UnknownClass(format!("line {line}: `{n}`")))
        })
        .collect::<Result<_>>()?;
    Ok(Instance {
        text,
        attributes: AttributeAssignment::new(labels),
        labels: labels_y,
    })
}

/// Reads a JSONL file. Blank lines are skipped.
pub fn ingest_jsonl(
    path: impl AsRef<Path>,
    vocabs: &mut Vocabularies,
    mode: IngestMode,
) -> Result<Vec<Instance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1, vocabs, mode)?);
    }
    Ok(out)
}

/// Class vocabularies from the distinct labels of a JSONL file, sorted.
pub fn infer_classes(path: impl AsRef<Path>) -> Result<Vec<Vocab>> {
    let r = BufReader::new(File::open(path)?);
    let mut seen: Vec<std::collections::BTreeSet<String>> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let names = v
            .get("label")
            .and_then(strings)
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "missing or malformed `label`".into(),
            })?;
        if seen.is_empty() {
            seen.resize(names.len(), Default::default());
        }
        for (t, n) in names.into_iter().enumerate() {
            seen.get_mut(t)
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "inconsistent number of labels".into(),
                })?
                .insert(n.to_string());
        }
    }
    Ok(seen.into_iter().map(Vocab::from_labels).collect())
}

/// The JSON record for an instance. Empty attributes are omitted; a
/// single-label attribute is written as a string, multi-label ones as lists.
pub fn record(inst: &Instance, vocabs: &Vocabularies) -> Result<Value> {
    let mut attrs = Map::new();
    for (j, (f, v)) in vocabs.fields.iter().zip(&vocabs.attributes).enumerate() {
        let ids = inst.attributes.labels(j);
        if ids.is_empty() {
            continue;
        }
        let names = ids
            .iter()
            .map(|&id| {
                v.label(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Vocabulary {
                        attribute: f.name.clone(),
                        id,
                        vocab_size: v.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let value = if f.multi_label {
            Value::from(names)
        } else {
            Value::from(names.into_iter().next().expect("non-empty"))
        };
        attrs.insert(f.name.clone(), value);
    }
    let mut labels = Vec::with_capacity(inst.labels.len());
    for (t, (&y, v)) in inst.labels.iter().zip(&vocabs.classes).enumerate() {
        let n = v.label(y).ok_or(Error::LabelOutOfRange {
            task: t,
            label: y,
            n_classes: v.len(),
        })?;
        labels.push(n.to_string());
    }
    let label = if labels.len() == 1 {
        Value::from(labels.pop().expect("one label"))
    } else {
        Value::from(labels)
    };
    let mut m = Map::new();
    m.insert("text".into(), Value::from(inst.text.clone()));
    m.insert("attributes".into(), Value::Object(attrs));
    m.insert("label".into(), label);
    Ok(Value::Object(m))
}

pub fn write_jsonl<W: Write>(
    mut w: W,
    instances: &[Instance],
    vocabs: &Vocabularies,
) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, &record(inst, vocabs)?)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(
    path: impl AsRef<Path>,
    instances: &[Instance],
    vocabs: &Vocabularies,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, instances, vocabs)?;
    w.flush()?;
    Ok(())
}

/// `k` `(train, test)` index pairs. Test folds are contiguous slices of a
/// seeded permutation, sizes differing by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("k = {k} is invalid for {n} records")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test = idx[start..start + len].to_vec();
        let train = idx[..start]
            .iter()
            .chain(&idx[start + len..])
            .copied()
            .collect();
        folds.push((train, test));
        start += len;
    }
    Ok(folds)
}

/// Splits `n` items into one consecutive range per fraction of a seeded
/// permutation.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).round() as usize).min(n)
        };
        out.push(idx[start..end].to_vec());
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    /// Binary F1 of class 1.
    F1,
    MultiTaskMeanAccuracy,
}

/// Exact-match rate.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_len(pred.len(), gold.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

/// F1 of `positive`; zero when there are no true positives.
pub fn f1(pred: &[usize], gold: &[usize], positive: usize) -> Result<f64> {
    check_len(pred.len(), gold.len())?;
    let tp = pred
        .iter()
        .zip(gold)
        .filter(|&(&p, &g)| p == positive && g == positive)
        .count() as f64;
    let fp = pred
        .iter()
        .zip(gold)
        .filter(|&(&p, &g)| p == positive && g != positive)
        .count() as f64;
    let fn_ = pred
        .iter()
        .zip(gold)
        .filter(|&(&p, &g)| p != positive && g == positive)
        .count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp / (2.0 * tp + fp + fn_))
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Score of per-task predictions. `pred[i]` and `gold[i]` hold one class
/// per task. Accuracy and F1 use task 0.
pub fn metrics(pred: &[Vec<usize>], gold: &[Vec<usize>], kind: Metric) -> Result<f64> {
    check_len(pred.len(), gold.len())?;
    let n_tasks = gold.first().map_or(1, Vec::len);
    if pred.iter().chain(gold).any(|p| p.len() != n_tasks) {
        return Err(Error::Contract("inconsistent number of tasks".into()));
    }
    let task = |t: usize| -> (Vec<usize>, Vec<usize>) {
        (
            pred.iter().map(|p| p[t]).collect(),
            gold.iter().map(|g| g[t]).collect(),
        )
    };
    match kind {
        Metric::Accuracy => {
            let (p, g) = task(0);
            accuracy(&p, &g)
        }
        Metric::F1 => {
            let (p, g) = task(0);
            f1(&p, &g, 1)
        }
        Metric::MultiTaskMeanAccuracy => {
            let mut s = 0.0;
            for t in 0..n_tasks {
                let (p, g) = task(t);
                s += accuracy(&p, &g)?;
            }
            Ok(s / n_tasks as f64)
        }
    }
}

/// Sparsity score of one instance for attribute `j`: mean training
/// frequency of its labels, 0 when it has none.
pub fn sparsity_score(assignment: &AttributeAssignment, j: usize, train_counts: &[usize]) -> f64 {
    let ids = assignment.labels(j);
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter()
        .map(|&id| train_counts.get(id).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / ids.len() as f64
}

/// Partitions example indices into `n_bins` equal-size bins ordered by
/// sparsity score; bin 0 is the sparsest. Ties are broken by smallest
/// label id, then example index. Sizes differ by at most one, larger bins
/// first.
pub fn bin_by_sparsity(
    assignments: &[&AttributeAssignment],
    j: usize,
    train_counts: &[usize],
    n_bins: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = assignments.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::Config(format!(
            "{n_bins} bins requested for {n} examples"
        )));
    }
    let mut keyed: Vec<(f64, usize, usize)> = assignments
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let first = a.labels(j).first().copied().unwrap_or(0);
            (sparsity_score(a, j, train_counts), first, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let len = base + usize::from(b < extra);
        bins.push(keyed[start..start + len].iter().map(|k| k.2).collect());
        start += len;
    }
    Ok(bins)
}
