//! Dataset ingestion, pool bookkeeping and the simulated oracle.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::{self, EmbeddingStore};

/// Default fraction of the pool labeled before the first selection step.
pub const DEFAULT_SEED_FRACTION: f64 = 0.001;
/// Seed fraction used for small datasets.
pub const SMALL_DATASET_SEED_FRACTION: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Labeling,
}

/// Gold annotation of one sample: a class, or one tag per token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Class(u32),
    Tags(Vec<u32>),
}

impl Label {
    /// Per-row targets, matching the rows of the encoded sample.
    pub fn targets(&self) -> &[u32] {
        match self {
            Label::Class(c) => std::slice::from_ref(c),
            Label::Tags(t) => t,
        }
    }

    pub fn class(&self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Tags(_) => None,
        }
    }

    fn parse(field: &str, task: TaskKind) -> Option<Label> {
        match task {
            TaskKind::Classification => field.trim().parse().ok().map(Label::Class),
            TaskKind::Labeling => field
                .split(',')
                .map(|t| t.trim().parse().ok())
                .collect::<Option<Vec<u32>>>()
                .filter(|t| !t.is_empty())
                .map(Label::Tags),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Tags(tags) => {
                for (i, t) in tags.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{t}")?;
                }
                Ok(())
            }
        }
    }
}

/// Reads an `id<TAB>label` file. Ids must be dense and in file order.
pub fn read_labels(path: &Path, task: TaskKind) -> Result<Vec<Label>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, task).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_labels(text: &str, task: TaskKind) -> Result<Vec<Label>> {
    let pairs = parse_id_labels(text, task)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (id, label) in pairs {
        if id as usize != out.len() {
            return Err(Error::Format(format!(
                "id {id} out of order, expected {}",
                out.len()
            )));
        }
        out.push(label);
    }
    Ok(out)
}

/// Parses `id<TAB>label` lines without constraints on the ids.
pub fn parse_id_labels(text: &str, task: TaskKind) -> Result<Vec<(u32, Label)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, field) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: missing tab", lineno + 1)))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad id {id:?}", lineno + 1)))?;
        let label = Label::parse(field, task)
            .ok_or_else(|| Error::Format(format!("line {}: bad label {field:?}", lineno + 1)))?;
        out.push((id, label));
    }
    Ok(out)
}

pub fn format_labels<'a>(rows: impl IntoIterator<Item = (u32, &'a Label)>) -> String {
    let mut s = String::new();
    for (id, label) in rows {
        s.push_str(&format!("{id}\t{label}\n"));
    }
    s
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let text = format_labels(labels.iter().enumerate().map(|(i, l)| (i as u32, l)));
    store::write_atomic(path, text.as_bytes())
}

/// File locations of one split, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    /// Number of classes (classification) or token labels (labeling).
    pub num_labels: usize,
    pub dim: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitFiles>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        store::write_atomic(path, text.as_bytes())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn train_files(&self) -> SplitFiles {
        SplitFiles {
            count: self.count,
            embeddings: self.embeddings.clone(),
            tokens: self.tokens.clone(),
            labels: self.labels.clone(),
        }
    }

    fn load_split(&self, files: &SplitFiles) -> Result<Split> {
        let store_path = match self.task {
            TaskKind::Classification => files.embeddings.as_ref(),
            TaskKind::Labeling => files.tokens.as_ref(),
        }
        .ok_or_else(|| {
            Error::Format(format!(
                "manifest {:?} lacks the {} file",
                self.name,
                match self.task {
                    TaskKind::Classification => "embeddings",
                    TaskKind::Labeling => "tokens",
                }
            ))
        })?;
        let store = EmbeddingStore::read(&self.resolve(store_path))?;
        let gold = read_labels(&self.resolve(&files.labels), self.task)?;
        Split::new(store, gold, self.task, self.num_labels, Some((files.count, self.dim)))
    }
}

/// Base representations plus gold labels of one split.
#[derive(Clone, Debug)]
pub struct Split {
    pub store: EmbeddingStore,
    pub gold: Vec<Label>,
}

impl Split {
    /// Validates shapes; `expect` carries header values (count, dim) to check against.
    pub fn new(
        store: EmbeddingStore,
        gold: Vec<Label>,
        task: TaskKind,
        num_labels: usize,
        expect: Option<(usize, usize)>,
    ) -> Result<Self> {
        if let Some((count, dim)) = expect {
            if store.count() != count || store.dim() != dim {
                return Err(Error::Format(format!(
                    "embedding file has count={} dim={}, manifest declares count={count} dim={dim}",
                    store.count(),
                    store.dim()
                )));
            }
        }
        if gold.len() != store.count() {
            return Err(Error::Format(format!(
                "{} labels for {} samples",
                gold.len(),
                store.count()
            )));
        }
        if (task == TaskKind::Labeling) != store.is_tokens() {
            return Err(Error::Format("store layout does not match task kind".into()));
        }
        for (id, label) in gold.iter().enumerate() {
            let id = id as u32;
            match (task, label) {
                (TaskKind::Classification, Label::Class(_)) => {}
                (TaskKind::Labeling, Label::Tags(t)) => {
                    let n = store.len_of(id)?;
                    if t.len() != n {
                        return Err(Error::Format(format!(
                            "sample {id}: {} tags for {n} tokens",
                            t.len()
                        )));
                    }
                }
                _ => return Err(Error::Format(format!("sample {id}: label kind mismatch"))),
            }
            if let Some(&bad) = label.targets().iter().find(|&&t| t as usize >= num_labels) {
                return Err(Error::Format(format!(
                    "sample {id}: label {bad} outside [0, {num_labels})"
                )));
            }
        }
        Ok(Split { store, gold })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Read-only view of one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleRecord<'a> {
    pub id: u32,
    pub task: TaskKind,
    /// Row-major `n x dim` base vectors (`n = 1` for classification).
    pub base_repr: &'a [f32],
    pub gold: &'a Label,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub num_labels: usize,
    pub train: Split,
    pub test: Option<Split>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.num_labels < 2 {
            return Err(Error::Config("num_labels must be at least 2".into()));
        }
        let train = manifest.load_split(&manifest.train_files())?;
        let test = manifest
            .test
            .as_ref()
            .map(|files| manifest.load_split(files))
            .transpose()?;
        Ok(Dataset {
            name: manifest.name.clone(),
            task: manifest.task,
            num_labels: manifest.num_labels,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.train.store.dim()
    }

    pub fn record(&self, id: u32) -> Result<SampleRecord<'_>> {
        let gold = self.train.gold.get(id as usize).ok_or(Error::Lookup(id))?;
        Ok(SampleRecord {
            id,
            task: self.task,
            base_repr: self.train.store.rows(id)?,
            gold,
        })
    }

    /// Distinct classes present among the gold labels (classification only).
    pub fn classes_present(&self) -> usize {
        self.train
            .gold
            .iter()
            .filter_map(Label::class)
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Simulated annotator backed by the gold labels.
#[derive(Debug)]
pub struct Oracle<'a> {
    gold: &'a [Label],
    queries: u64,
}

impl<'a> Oracle<'a> {
    pub fn new(gold: &'a [Label]) -> Self {
        Oracle { gold, queries: 0 }
    }

    pub fn label(&mut self, id: u32) -> Result<Label> {
        let label = self.gold.get(id as usize).ok_or(Error::Lookup(id))?.clone();
        self.queries += 1;
        Ok(label)
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }
}

const NOT_UNLABELED: u32 = u32::MAX;

/// Labeled set `D_i` and unlabeled set `T_i`.
///
/// Labeled pairs are kept in the order they were acquired, seed set first.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolState {
    labeled: Vec<(u32, Label)>,
    is_labeled: Vec<bool>,
    unlabeled: Vec<u32>,
    position: Vec<u32>,
    seed_size: usize,
    step: usize,
}

impl PoolState {
    /// Starts from an explicit seed set with its labels.
    pub fn from_seed(total: usize, seed: Vec<(u32, Label)>) -> Result<Self> {
        let mut is_labeled = vec![false; total];
        for (id, _) in &seed {
            let slot = is_labeled
                .get_mut(*id as usize)
                .ok_or(Error::Lookup(*id))?;
            if *slot {
                return Err(Error::Invariant(format!("seed id {id} repeated")));
            }
            *slot = true;
        }
        let unlabeled: Vec<u32> = (0..total as u32).filter(|&i| !is_labeled[i as usize]).collect();
        let mut position = vec![NOT_UNLABELED; total];
        for (p, &id) in unlabeled.iter().enumerate() {
            position[id as usize] = p as u32;
        }
        Ok(PoolState {
            seed_size: seed.len(),
            labeled: seed,
            is_labeled,
            unlabeled,
            position,
            step: 0,
        })
    }

    pub fn total(&self) -> usize {
        self.is_labeled.len()
    }

    pub fn labeled(&self) -> &[(u32, Label)] {
        &self.labeled
    }

    pub fn seed_size(&self) -> usize {
        self.seed_size
    }

    /// Unlabeled ids. Order is deterministic but not sorted.
    pub fn unlabeled(&self) -> &[u32] {
        &self.unlabeled
    }

    pub fn is_unlabeled(&self, id: u32) -> bool {
        self.position
            .get(id as usize)
            .is_some_and(|&p| p != NOT_UNLABELED)
    }

    pub fn is_labeled(&self, id: u32) -> bool {
        self.is_labeled.get(id as usize).copied().unwrap_or(false)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Labels `ids` through the oracle and moves them to the labeled set.
    /// Returns the new pairs `Q` in the order given. The state is untouched on error.
    pub fn commit_selection(
        &mut self,
        ids: &[u32],
        oracle: &mut Oracle<'_>,
    ) -> Result<Vec<(u32, Label)>> {
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.total() {
                return Err(Error::Lookup(id));
            }
            if !self.is_unlabeled(id) {
                return Err(Error::Invariant(format!("sample {id} is already labeled")));
            }
            if !seen.insert(id) {
                return Err(Error::Invariant(format!("sample {id} selected twice")));
            }
        }
        let mut q = Vec::with_capacity(ids.len());
        for &id in ids {
            let label = oracle.label(id)?;
            self.take_unlabeled(id);
            self.is_labeled[id as usize] = true;
            self.labeled.push((id, label.clone()));
            q.push((id, label));
        }
        self.step += 1;
        Ok(q)
    }

    fn take_unlabeled(&mut self, id: u32) {
        let p = self.position[id as usize] as usize;
        let last = *self.unlabeled.last().unwrap();
        self.unlabeled.swap_remove(p);
        if last != id {
            self.position[last as usize] = p as u32;
        }
        self.position[id as usize] = NOT_UNLABELED;
    }

    /// Checks conservation and disjointness of the two sets.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.total();
        if self.labeled.len() + self.unlabeled.len() != n {
            return Err(Error::Invariant(format!(
                "|D|={} + |T|={} != {n}",
                self.labeled.len(),
                self.unlabeled.len()
            )));
        }
        for (id, _) in &self.labeled {
            if self.is_unlabeled(*id) || !self.is_labeled[*id as usize] {
                return Err(Error::Invariant(format!("id {id} in both sets")));
            }
        }
        for (p, &id) in self.unlabeled.iter().enumerate() {
            if self.position[id as usize] as usize != p || self.is_labeled[id as usize] {
                return Err(Error::Invariant(format!("unlabeled index corrupt at {id}")));
            }
        }
        Ok(())
    }
}

/// Draws the seed set `D_0` uniformly and returns the initial pools.
pub fn initial_pool(dataset: &Dataset, seed_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(seed_fraction > 0.0 && seed_fraction < 1.0) {
        return Err(Error::Config(format!(
            "seed fraction {seed_fraction} outside (0, 1)"
        )));
    }
    let n = dataset.len();
    let size = (seed_fraction * n as f64).round() as usize;
    let needed = match dataset.task {
        TaskKind::Classification => dataset.classes_present().max(2),
        TaskKind::Labeling => 2,
    };
    if size < needed {
        return Err(Error::Config(format!(
            "seed fraction {seed_fraction} of {n} samples gives {size} seed samples, need at least {needed}"
        )));
    }
    let mut r = rng::stream(seed, rng::Stream::SeedSet);
    let mut ids: Vec<u32> = index::sample(&mut r, n, size)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    let seed_set = ids
        .into_iter()
        .map(|id| (id, dataset.train.gold[id as usize].clone()))
        .collect();
    PoolState::from_seed(n, seed_set)
}

/// Loads the manifest's files and draws the seed set.
pub fn load_dataset(
    manifest: &DatasetManifest,
    seed_fraction: f64,
    seed: u64,
) -> Result<(Dataset, PoolState)> {
    let dataset = Dataset::load(manifest)?;
    let pool = initial_pool(&dataset, seed_fraction, seed)?;
    Ok((dataset, pool))
}
