//! Synthetic datasets, semi-supervised splits and equivalence classes.
//!
//! An equivalence class is a set of unlabeled examples known to share a
//! label without the label itself being known. In simulation the classes
//! are built from the hidden labels before they are removed; training code
//! only ever sees the class memberships.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ndgrad::Tensor;
use crate::rngs::{seeded, stream_rng, Stream};
use crate::{Error, Result};

/// Features with integer class labels `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim(
                "dataset",
                format!("features must be n × d, got {:?}", features.shape()),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} feature rows vs {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelDomain(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            seed,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        self.features.select_rows(indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Two interleaving half circles.
    TwoMoons { noise: f64 },
    /// Isotropic Gaussian clusters around centers drawn from `[-10, 10]^dim`.
    Blobs { classes: usize, spread: f64, dim: usize },
    /// Two concentric circles (inner radius half of the outer).
    Rings { noise: f64 },
}

impl DatasetKind {
    pub fn classes(&self) -> usize {
        match self {
            DatasetKind::Blobs { classes, .. } => *classes,
            _ => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::TwoMoons { .. } => "two-moons",
            DatasetKind::Blobs { .. } => "blobs",
            DatasetKind::Rings { .. } => "rings",
        }
    }
}

/// Class-balanced synthetic dataset; rows are shuffled.
pub fn make_dataset(kind: &DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    let k = kind.classes();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot draw {n} examples over {k} classes")));
    }
    let mut rng = seeded(seed);
    let labels_in_order: Vec<usize> = (0..n).map(|i| i * k / n).collect();
    let mut rows: Vec<(Vec<f64>, usize)> = match *kind {
        DatasetKind::TwoMoons { noise } => {
            check_nonneg("noise", noise)?;
            let noise = Normal::new(0.0, noise).expect("checked");
            let per: [usize; 2] = class_counts(&labels_in_order);
            let mut out = Vec::with_capacity(n);
            for (class, &count) in per.iter().enumerate() {
                for i in 0..count {
                    let t = if count > 1 {
                        PI * i as f64 / (count - 1) as f64
                    } else {
                        0.0
                    };
                    let (x, y) = if class == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    out.push((vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)], class));
                }
            }
            out
        }
        DatasetKind::Rings { noise } => {
            check_nonneg("noise", noise)?;
            let noise = Normal::new(0.0, noise).expect("checked");
            let per: [usize; 2] = class_counts(&labels_in_order);
            let mut out = Vec::with_capacity(n);
            for (class, &count) in per.iter().enumerate() {
                let radius = if class == 0 { 1.0 } else { 0.5 };
                for i in 0..count {
                    let t = 2.0 * PI * i as f64 / count as f64;
                    out.push((
                        vec![
                            radius * t.cos() + noise.sample(&mut rng),
                            radius * t.sin() + noise.sample(&mut rng),
                        ],
                        class,
                    ));
                }
            }
            out
        }
        DatasetKind::Blobs { classes, spread, dim } => {
            check_nonneg("spread", spread)?;
            if dim == 0 {
                return Err(Error::Config("blobs need dim ≥ 1".into()));
            }
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            labels_in_order
                .iter()
                .map(|&c| {
                    let x = centers[c]
                        .iter()
                        .map(|m| m + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect();
                    (x, c)
                })
                .collect()
        }
    };
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|(_, l)| *l).collect();
    let features = Tensor::from_rows(&rows.into_iter().map(|(x, _)| x).collect::<Vec<_>>())?;
    Dataset::new(features, labels, k, seed)
}

fn class_counts<const K: usize>(labels: &[usize]) -> [usize; K] {
    let mut c = [0; K];
    for &l in labels {
        c[l] += 1;
    }
    c
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")))
    }
}

/// Unlabeled examples known to share one hidden label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EquivalenceClass {
    pub id: usize,
    /// Positions into [`PartialDataset::unlabeled`].
    pub members: Vec<usize>,
}

impl EquivalenceClass {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn ordered_pairs(&self) -> u64 {
        let s = self.members.len() as u64;
        s * s.saturating_sub(1)
    }
}

/// A dataset split into labeled, unlabeled, validation and test subsets.
///
/// The unlabeled subset keeps its true labels only so simulations can
/// build and audit equivalence classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    data: Dataset,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    classes: Vec<EquivalenceClass>,
}

impl PartialDataset {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn validation(&self) -> &[usize] {
        &self.validation
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn equivalence_classes(&self) -> &[EquivalenceClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.data.classes
    }

    /// True label of the unlabeled example at `position`.
    pub fn hidden_label(&self, position: usize) -> usize {
        self.data.labels[self.unlabeled[position]]
    }

    pub fn labeled_xy(&self) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.data.rows(&self.labeled)?, self.data.labels_of(&self.labeled)))
    }

    pub fn test_xy(&self) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.data.rows(&self.test)?, self.data.labels_of(&self.test)))
    }

    pub fn validation_xy(&self) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.data.rows(&self.validation)?, self.data.labels_of(&self.validation)))
    }

    /// Features of unlabeled examples at the given positions.
    pub fn unlabeled_rows(&self, positions: &[usize]) -> Result<Tensor> {
        let idx: Vec<usize> = positions.iter().map(|&p| self.unlabeled[p]).collect();
        self.data.rows(&idx)
    }

    /// Whether any class can supply a pair.
    pub fn has_pairs(&self) -> bool {
        self.classes.iter().any(|c| c.len() >= 2)
    }
}

/// Stratified semi-supervised split.
///
/// The labeled subset takes `n_labeled / k` examples per class, with the
/// remainder spread over randomly chosen classes. Validation and test are
/// drawn from what is left; everything else becomes unlabeled.
pub fn split_semi(
    data: &Dataset,
    n_labeled: usize,
    n_validation: usize,
    n_test: usize,
    seed: u64,
) -> Result<PartialDataset> {
    let k = data.classes;
    let n = data.len();
    if n_labeled < k {
        return Err(Error::Config(format!(
            "{n_labeled} labeled examples cannot cover {k} classes"
        )));
    }
    if n_labeled + n_validation + n_test > n {
        return Err(Error::Config(format!(
            "{n_labeled} labeled + {n_validation} validation + {n_test} test exceeds {n} examples"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for group in &mut by_class {
        group.shuffle(&mut rng);
    }
    let mut quota = vec![n_labeled / k; k];
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    for &c in order.iter().take(n_labeled % k) {
        quota[c] += 1;
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut rest = Vec::with_capacity(n - n_labeled);
    for (c, group) in by_class.iter().enumerate() {
        if group.len() < quota[c] {
            return Err(Error::Config(format!(
                "class {c} has {} examples, {} needed for the labeled subset",
                group.len(),
                quota[c]
            )));
        }
        labeled.extend_from_slice(&group[..quota[c]]);
        rest.extend_from_slice(&group[quota[c]..]);
    }
    labeled.sort_unstable();
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let validation = rest[..n_validation].to_vec();
    let test = rest[n_validation..n_validation + n_test].to_vec();
    let mut unlabeled = rest[n_validation + n_test..].to_vec();
    unlabeled.sort_unstable();
    Ok(PartialDataset {
        data: data.clone(),
        labeled,
        unlabeled,
        validation,
        test,
        classes: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClassMode {
    /// One class per hidden label value.
    PerLabel,
    /// Each hidden-label group is cut into classes of `size` members; the
    /// last class of a group may be smaller.
    FixedSize { size: usize },
}

/// Simulates partial labels from the hidden labels of the unlabeled set.
pub fn build_equivalence_classes(partial: &PartialDataset, mode: ClassMode, seed: u64) -> Result<PartialDataset> {
    let k = partial.data.classes;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for pos in 0..partial.unlabeled.len() {
        groups[partial.hidden_label(pos)].push(pos);
    }
    let mut classes = Vec::new();
    match mode {
        ClassMode::PerLabel => {
            for members in groups.into_iter().filter(|g| !g.is_empty()) {
                classes.push(EquivalenceClass {
                    id: classes.len(),
                    members,
                });
            }
        }
        ClassMode::FixedSize { size } => {
            if size < 2 {
                return Err(Error::Config(format!("equivalence class size must be ≥ 2, got {size}")));
            }
            let mut rng = stream_rng(seed, Stream::Classes);
            for mut group in groups {
                group.shuffle(&mut rng);
                for chunk in group.chunks(size) {
                    let mut members = chunk.to_vec();
                    members.sort_unstable();
                    classes.push(EquivalenceClass {
                        id: classes.len(),
                        members,
                    });
                }
            }
        }
    }
    Ok(PartialDataset {
        classes,
        ..partial.clone()
    })
}

/// Ordered pairs `(j, k)`, `j ≠ k`, of unlabeled positions sharing a class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn firsts(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn seconds(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Draws `m` pairs uniformly over all ordered within-class pairs.
///
/// A class is picked with probability proportional to its number of
/// ordered pairs, then a distinct ordered pair inside it. Pairs within one
/// batch are distinct whenever the pool holds at least `m` pairs.
pub fn sample_equiv_pairs<R: Rng + ?Sized>(partial: &PartialDataset, m: usize, rng: &mut R) -> Result<PairBatch> {
    let weights: Vec<u64> = partial.classes.iter().map(EquivalenceClass::ordered_pairs).collect();
    let pool: u64 = weights.iter().sum();
    if pool == 0 {
        return Err(Error::EmptyPairPool(format!(
            "{} equivalence classes, none with two members",
            partial.classes.len()
        )));
    }
    let distinct = (m as u64) <= pool;
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(m);
    while pairs.len() < m {
        let mut ticket = rng.random_range(0..pool);
        let mut class = 0;
        while ticket >= weights[class] {
            ticket -= weights[class];
            class += 1;
        }
        let members = &partial.classes[class].members;
        let s = members.len();
        let a = rng.random_range(0..s);
        let mut b = rng.random_range(0..s - 1);
        if b >= a {
            b += 1;
        }
        let pair = (members[a], members[b]);
        if distinct && !seen.insert(pair) {
            continue;
        }
        pairs.push(pair);
    }
    Ok(PairBatch { pairs })
}

/// Stand-in for image augmentation on point-cloud data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentPolicy {
    Identity,
    /// Adds iid `N(0, sigma²)` noise to every feature.
    GaussianJitter {
        sigma: f64,
    },
    /// Negates each feature independently with probability `p`.
    AxisFlip {
        p: f64,
    },
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::GaussianJitter { sigma: 0.05 }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentPolicy::Identity => Ok(()),
            AugmentPolicy::GaussianJitter { sigma } => check_nonneg("sigma", sigma),
            AugmentPolicy::AxisFlip { p } if (0.0..=1.0).contains(&p) => Ok(()),
            AugmentPolicy::AxisFlip { p } => Err(Error::Config(format!("flip probability {p} outside [0, 1]"))),
        }
    }

    /// Whether two applications to the same input can differ.
    pub fn is_stochastic(&self) -> bool {
        match *self {
            AugmentPolicy::Identity => false,
            AugmentPolicy::GaussianJitter { sigma } => sigma > 0.0,
            AugmentPolicy::AxisFlip { p } => p > 0.0 && p < 1.0,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(x: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor> {
    policy.validate()?;
    Ok(match *policy {
        AugmentPolicy::Identity => x.clone(),
        AugmentPolicy::GaussianJitter { sigma } => {
            if sigma == 0.0 {
                x.clone()
            } else {
                x.map(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, rng))
            }
        }
        AugmentPolicy::AxisFlip { p } => x.map(|v| if rng.random_bool(p) { -v } else { v }),
    })
}

/// Reads `f0,...,f{d-1},label` rows. Labels must be `0..k` with every
/// value present.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let d = header.len().checked_sub(1).filter(|&d| d >= 1).ok_or(Error::Parse {
        line: 1,
        msg: "header needs at least one feature column and a label column".into(),
    })?;
    for (i, name) in header.iter().enumerate() {
        let expected = if i < d { format!("f{i}") } else { "label".to_string() };
        if name.trim() != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("column {i} is {name:?}, expected {expected:?}"),
            });
        }
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for cell in record.iter().take(d) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric feature {cell:?}"),
            })?;
            row.push(v);
        }
        let label_cell = record[d].trim();
        let label: usize = label_cell.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label {label_cell:?} is not a non-negative integer"),
        })?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; k];
    for &l in &labels {
        present[l] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::LabelDomain(format!(
            "labels must be contiguous from 0; {missing} is missing below the maximum {}",
            k - 1
        )));
    }
    Dataset::new(Tensor::from_rows(&rows)?, labels, k, 0)
}

/// Writes the format read by [`load_dataset_csv`]; floats use the
/// shortest representation that round-trips.
pub fn save_dataset_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..data.dim())
        .map(|i| format!("f{i}"))
        .chain(["label".to_string()])
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (row, label) in data.features.row_iter().zip(&data.labels) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{},{label}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
