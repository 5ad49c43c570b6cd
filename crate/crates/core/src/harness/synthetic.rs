//! Synthetic corpora with analytically known class boundaries.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_labels, Dataset, DatasetManifest, Label, Split, SplitFiles, TaskKind};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::store::EmbeddingStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters with pairwise center distance `separation`.
    GaussianBlobs,
    /// Concentric shells of radius `k * separation`; class 0 is a disk.
    RingVsDisk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub kind: SyntheticKind,
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub spread: f64,
    pub separation: f64,
    /// Share of samples placed near a class boundary and labeled by the
    /// nearest class (the Bayes rule).
    pub boundary_noise: f64,
    /// Data lives in a random subspace of this dimension when set.
    pub intrinsic_dim: Option<usize>,
    /// Held-out samples per class; 0 writes no test split.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "blobs".into(),
            kind: SyntheticKind::GaussianBlobs,
            dim: 16,
            classes: 3,
            per_class: 10_000,
            spread: 1.0,
            separation: 8.0,
            boundary_noise: 0.0,
            intrinsic_dim: None,
            test_per_class: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.classes < 2 {
            return Err(Error::Config("synthetic data needs dim >= 2 and classes >= 2".into()));
        }
        if !(self.spread > 0.0) || !(self.separation > 0.0) {
            return Err(Error::Config("spread and separation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_noise) {
            return Err(Error::Config("boundary_noise outside [0, 1]".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if let Some(r) = self.intrinsic_dim {
            if r < 2 || r > self.dim {
                return Err(Error::Config(format!(
                    "intrinsic_dim {r} outside [2, {}]",
                    self.dim
                )));
            }
        }
        Ok(())
    }

    fn latent_dim(&self) -> usize {
        self.intrinsic_dim.unwrap_or(self.dim)
    }
}

struct Generator {
    spec: SyntheticSpec,
    r: usize,
    centers: Vec<Vec<f64>>,
    /// `dim x r` orthonormal columns; absent when the data is full rank.
    basis: Option<DMatrix<f64>>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl Generator {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let r = spec.latent_dim();
        let c = spec.classes;
        let centers = match spec.kind {
            SyntheticKind::GaussianBlobs if r >= c => (0..c)
                .map(|k| {
                    let mut v = vec![0.0; r];
                    v[k] = spec.separation / std::f64::consts::SQRT_2;
                    v
                })
                .collect(),
            SyntheticKind::GaussianBlobs => {
                // Regular polygon in the first two coordinates.
                let radius = spec.separation / (2.0 * (std::f64::consts::PI / c as f64).sin());
                (0..c)
                    .map(|k| {
                        let a = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                        let mut v = vec![0.0; r];
                        v[0] = radius * a.cos();
                        v[1] = radius * a.sin();
                        v
                    })
                    .collect()
            }
            SyntheticKind::RingVsDisk => Vec::new(),
        };
        let basis = spec.intrinsic_dim.filter(|&r| r < spec.dim).map(|r| {
            let g = DMatrix::from_fn(spec.dim, r, |_, _| gauss(rng));
            g.qr().q()
        });
        Generator {
            spec: spec.clone(),
            r,
            centers,
            basis,
        }
    }

    fn nearest_class(&self, z: &[f64]) -> u32 {
        match self.spec.kind {
            SyntheticKind::GaussianBlobs => {
                let mut best = (f64::INFINITY, 0);
                for (k, c) in self.centers.iter().enumerate() {
                    let d: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1 as u32
            }
            SyntheticKind::RingVsDisk => {
                let radius = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                ((radius / self.spec.separation).round() as usize).min(self.spec.classes - 1) as u32
            }
        }
    }

    fn direction(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.r).map(|_| gauss(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn regular(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.spec.spread;
        match self.spec.kind {
            SyntheticKind::GaussianBlobs => self.centers[class]
                .iter()
                .map(|c| c + s * gauss(rng))
                .collect(),
            SyntheticKind::RingVsDisk => {
                let radius = (class as f64 * self.spec.separation + s * gauss(rng)).abs();
                self.direction(rng).into_iter().map(|u| u * radius).collect()
            }
        }
    }

    fn boundary(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.spec.spread;
        let c = self.spec.classes;
        match self.spec.kind {
            SyntheticKind::GaussianBlobs => {
                let a = rng.random_range(0..c);
                let b = (a + rng.random_range(1..c)) % c;
                let (ca, cb) = (&self.centers[a], &self.centers[b]);
                let len = ca.iter().zip(cb).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
                let normal: Vec<f64> = ca.iter().zip(cb).map(|(x, y)| (y - x) / len).collect();
                let mut jitter: Vec<f64> = (0..self.r).map(|_| s * gauss(rng)).collect();
                let along: f64 = jitter.iter().zip(&normal).map(|(j, n)| j * n).sum();
                for (j, n) in jitter.iter_mut().zip(&normal) {
                    *j -= along * n;
                }
                let offset = 0.5 * s * gauss(rng);
                (0..self.r)
                    .map(|i| 0.5 * (ca[i] + cb[i]) + offset * normal[i] + jitter[i])
                    .collect()
            }
            SyntheticKind::RingVsDisk => {
                let k = rng.random_range(0..c - 1);
                let radius = ((k as f64 + 0.5) * self.spec.separation + 0.5 * s * gauss(rng)).abs();
                self.direction(rng).into_iter().map(|u| u * radius).collect()
            }
        }
    }

    fn embed(&self, z: Vec<f64>) -> Vec<f32> {
        match &self.basis {
            None => z.into_iter().map(|v| v as f32).collect(),
            Some(b) => (0..self.spec.dim)
                .map(|i| (0..self.r).map(|j| b[(i, j)] * z[j]).sum::<f64>() as f32)
                .collect(),
        }
    }

    fn split(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Split> {
        let c = self.spec.classes;
        let n = per_class * c;
        let n_boundary = (self.spec.boundary_noise * n as f64).round() as usize;
        let mut rows: Vec<(Vec<f32>, u32)> = Vec::with_capacity(n);
        for i in 0..n - n_boundary {
            let class = i % c;
            let z = self.regular(class, rng);
            let label = match self.spec.kind {
                SyntheticKind::GaussianBlobs => class as u32,
                SyntheticKind::RingVsDisk => self.nearest_class(&z),
            };
            rows.push((self.embed(z), label));
        }
        for _ in 0..n_boundary {
            let z = self.boundary(rng);
            let label = self.nearest_class(&z);
            rows.push((self.embed(z), label));
        }
        rows.shuffle(rng);
        let mut data = Vec::with_capacity(n * self.spec.dim);
        let mut gold = Vec::with_capacity(n);
        for (x, y) in rows {
            data.extend_from_slice(&x);
            gold.push(Label::Class(y));
        }
        Split::new(
            EmbeddingStore::dense(self.spec.dim, data)?,
            gold,
            TaskKind::Classification,
            c,
            None,
        )
    }
}

/// Builds the corpus in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthetic);
    let g = Generator::new(spec, &mut rng);
    let train = g.split(spec.per_class, &mut rng)?;
    let test = if spec.test_per_class > 0 {
        Some(g.split(spec.test_per_class, &mut rng)?)
    } else {
        None
    };
    Ok(Dataset {
        name: spec.name.clone(),
        task: TaskKind::Classification,
        num_labels: spec.classes,
        train,
        test,
    })
}

/// Writes the corpus files and manifest into `dir` and returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset.train.store.write(&dir.join("train.aemb"))?;
    write_labels(&dir.join("train.labels.tsv"), &dataset.train.gold)?;
    let test = match &dataset.test {
        Some(t) => {
            t.store.write(&dir.join("test.aemb"))?;
            write_labels(&dir.join("test.labels.tsv"), &t.gold)?;
            Some(SplitFiles {
                count: t.len(),
                embeddings: Some("test.aemb".into()),
                tokens: None,
                labels: "test.labels.tsv".into(),
            })
        }
        None => None,
    };
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        task: dataset.task,
        num_labels: dataset.num_labels,
        dim: dataset.dim(),
        count: dataset.len(),
        embeddings: Some("train.aemb".into()),
        tokens: None,
        labels: "train.labels.tsv".into(),
        test,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// [`synthesize`] followed by [`write_dataset`].
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    write_dataset(&synthesize(spec)?, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{train_to_plateau, Architecture, DecoderModel, Example, TrainConfig};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            per_class: 200,
            test_per_class: 50,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn header_arithmetic() {
        let ds = synthesize(&SyntheticSpec {
            test_per_class: 0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 30_000);
        assert_eq!(ds.dim(), 16);
        assert!(ds.test.is_none());
    }

    #[test]
    fn same_spec_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            boundary_noise: 0.1,
            intrinsic_dim: Some(4),
            ..small()
        };
        generate_synthetic(&spec, a.path()).unwrap();
        let m = generate_synthetic(&spec, b.path()).unwrap();
        for f in ["train.aemb", "train.labels.tsv", "test.aemb", "test.labels.tsv", "manifest.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let loaded = Dataset::load(&DatasetManifest::from_file(&m).unwrap()).unwrap();
        assert_eq!(loaded.len(), 600);
        assert_eq!(loaded.test.unwrap().len(), 150);
    }

    #[test]
    fn blobs_are_linearly_separable() {
        let ds = synthesize(&SyntheticSpec {
            spread: 0.5,
            ..small()
        })
        .unwrap();
        let rows: Vec<Vec<f64>> = (0..ds.len() as u32)
            .map(|i| ds.train.store.rows(i).unwrap().iter().map(|v| *v as f64).collect())
            .collect();
        let batch: Vec<Example<'_>> = rows
            .iter()
            .zip(&ds.train.gold)
            .map(|(r, l)| Example {
                rows: r,
                targets: l.targets(),
            })
            .collect();
        let mut m = DecoderModel::random(Architecture::Linear, 16, 3, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        train_to_plateau(&mut m, &batch, &cfg).unwrap();
        let correct = rows
            .iter()
            .zip(&ds.train.gold)
            .filter(|(r, l)| m.predict(r).unwrap() as u32 == l.class().unwrap())
            .count();
        assert!(correct as f64 / rows.len() as f64 >= 0.99);
    }

    #[test]
    fn low_rank_data_lives_in_a_subspace() {
        let ds = synthesize(&SyntheticSpec {
            dim: 12,
            intrinsic_dim: Some(3),
            ..small()
        })
        .unwrap();
        let n = ds.len();
        let mut m = DMatrix::<f64>::zeros(n, 12);
        for i in 0..n {
            for (j, v) in ds.train.store.rows(i as u32).unwrap().iter().enumerate() {
                m[(i, j)] = *v as f64;
            }
        }
        let sv = m.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[3] < 1e-4 * s[0], "{s:?}");
    }

    #[test]
    fn boundary_points_carry_bayes_labels() {
        let spec = SyntheticSpec {
            boundary_noise: 1.0,
            classes: 2,
            dim: 2,
            ..small()
        };
        let ds = synthesize(&spec).unwrap();
        // Centers at (s/√2, 0) and (0, s/√2): bisector x = y.
        for i in 0..ds.len() as u32 {
            let r = ds.train.store.rows(i).unwrap();
            let want = u32::from(r[1] > r[0]);
            assert_eq!(ds.train.gold[i as usize].class().unwrap(), want);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            SyntheticSpec { dim: 1, ..small() },
            SyntheticSpec { classes: 1, ..small() },
            SyntheticSpec { spread: 0.0, ..small() },
            SyntheticSpec { intrinsic_dim: Some(40), ..small() },
        ] {
            assert!(matches!(synthesize(&spec), Err(Error::Config(_))));
        }
    }
}
