//! Dataset records, their text file format, stratified splitting and
//! normalisation statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::image::{is_image_file, read_image};
use crate::data::preprocess::{resize_and_crop, Normalization, Preprocess};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub const CLASS_NAMES: [&str; 9] = [
    "Healthy",
    "Retinitis Pigmentosa",
    "Retinal Detachment",
    "Myopia",
    "Macular Scar",
    "Glaucoma",
    "Optic Disc Edema",
    "Diabetic Retinopathy",
    "Central Serous Chorioretinopathy",
];

/// Class names in label-index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap {
            names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() || names.is_empty() {
            return Err(Error::Config(
                "class names must be nonempty and distinct".into(),
            ));
        }
        Ok(LabelMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.names.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Relative to the manifest root (or absolute).
    pub path: PathBuf,
    pub label: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub stats: Option<Normalization>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        Manifest {
            root: root.into(),
            records,
            stats: None,
        }
    }

    pub fn full_path(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == Some(split))
            .collect()
    }

    pub fn is_split(&self) -> bool {
        self.records.iter().all(|r| r.split.is_some())
    }

    /// Record count per label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.label).or_insert(0) += 1;
        }
        m
    }

    /// Serialise with paths relative to `dir` when they live under the
    /// manifest root and `dir` is that root, otherwise as joined paths.
    pub fn to_text(&self, dir: &Path) -> String {
        let mut out = String::new();
        if let Some(s) = &self.stats {
            let _ = writeln!(
                out,
                "#stats {} {} {} {} {} {}",
                s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]
            );
        }
        for r in &self.records {
            let p = if dir == self.root {
                r.path.clone()
            } else {
                self.full_path(r)
            };
            let split = r.split.map_or("-", Split::as_str);
            let _ = writeln!(out, "{}\t{}\t{}", p.display(), r.label, split);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(dir)).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m = Manifest::new(root, Vec::new());
        for (n, line) in text.lines().enumerate() {
            let bad = |why: &str| Error::Data(format!("manifest line {}: {why}", n + 1));
            if let Some(rest) = line.strip_prefix("#stats") {
                let v: Vec<f64> = rest
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("unparsable stats"))?;
                if v.len() != 6
                    || v.iter().any(|x| !x.is_finite())
                    || v[3..].iter().any(|&s| s <= 0.0)
                {
                    return Err(bad("stats need 3 finite means and 3 positive stds"));
                }
                m.stats = Some(Normalization::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]));
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad("expected <path>\\t<label>\\t<split>"));
            }
            let label = cols[1]
                .parse()
                .map_err(|_| bad("label is not an integer"))?;
            let split = match cols[2] {
                "-" => None,
                s => Some(
                    Split::parse(s).ok_or_else(|| bad("split must be train, val, test or -"))?,
                ),
            };
            m.records.push(Record {
                path: PathBuf::from(cols[0]),
                label,
                split,
            });
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Every label below `classes`; at least one record.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Data(format!(
                "no images found under {}",
                self.root.display()
            )));
        }
        if let Some(r) = self.records.iter().find(|r| r.label >= classes) {
            return Err(Error::Data(format!(
                "record {} has label {} but only {classes} classes exist",
                r.path.display(),
                r.label
            )));
        }
        Ok(())
    }
}

/// Records from one subdirectory per class name, files sorted by name.
pub fn scan_dataset(dir: &Path, labels: &LabelMap) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let mut records = Vec::new();
    for (label, name) in labels.names().into_iter().enumerate() {
        let class_dir = dir.join(name);
        if !class_dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        records.extend(files.into_iter().map(|p| Record {
            path: p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p),
            label,
            split: None,
        }));
    }
    let m = Manifest::new(dir, records);
    m.validate(labels.len())?;
    Ok(m)
}

/// `dir/manifest.tsv` when present, otherwise a directory scan.
pub fn load_dataset(dir: &Path, labels: &LabelMap) -> Result<Manifest> {
    let file = dir.join(MANIFEST_FILE);
    let m = if file.is_file() {
        Manifest::read(&file)?
    } else {
        scan_dataset(dir, labels)?
    };
    m.validate(labels.len())?;
    Ok(m)
}

/// Stratified assignment: each class is shuffled with the seeded generator,
/// then `floor(n/10)` records go to val, `floor(n/10)` to test and the rest
/// to train (train first, val next, test last in shuffled order).
pub fn split(manifest: &Manifest, seed: u64) -> Manifest {
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in manifest.class_counts().into_keys() {
        let mut members: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].label == label)
            .collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let (n_val, n_test) = (n / 10, n / 10);
        let n_train = n - n_val - n_test;
        for (rank, &i) in members.iter().enumerate() {
            out.records[i].split = Some(if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsScope {
    All,
    Train,
}

impl StatsScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(StatsScope::All),
            "train" => Some(StatsScope::Train),
            _ => None,
        }
    }
}

/// Running per-channel mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl Moments {
    fn of(pixels: &[f32]) -> Self {
        let n = (pixels.len() / 3) as f64;
        let mut mean = [0.0; 3];
        for px in pixels.chunks_exact(3) {
            for c in 0..3 {
                mean[c] += px[c] as f64 / 255.0;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut m2 = [0.0; 3];
        for px in pixels.chunks_exact(3) {
            for c in 0..3 {
                let d = px[c] as f64 / 255.0 - mean[c];
                m2[c] += d * d;
            }
        }
        Moments { n, mean, m2 }
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let mut out = Moments { n, ..self };
        for c in 0..3 {
            let d = o.mean[c] - self.mean[c];
            out.mean[c] = self.mean[c] + d * o.n / n;
            out.m2[c] = self.m2[c] + o.m2[c] + d * d * self.n * o.n / n;
        }
        out
    }
}

/// Per-channel mean and population std of the `[0, 1]` pixels the network
/// sees (after resize and crop), over the records in `scope`.
pub fn compute_stats(
    manifest: &Manifest,
    scope: StatsScope,
    prep: &Preprocess,
) -> Result<Normalization> {
    let chosen: Vec<&Record> = manifest
        .records
        .iter()
        .filter(|r| scope == StatsScope::All || r.split == Some(Split::Train))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data(
            "no images in scope for normalisation statistics".into(),
        ));
    }
    let parts: Vec<Moments> = chosen
        .par_iter()
        .map(|r| {
            let path = manifest.full_path(r);
            let img = read_image(&path)?;
            let px =
                resize_and_crop(&img, prep).map_err(|reason| Error::Ingestion { path, reason })?;
            Ok(Moments::of(&px))
        })
        .collect::<Result<_>>()?;
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    let std = total.m2.map(|m| (m / total.n).sqrt());
    Ok(Normalization::new(total.mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(per_class: &[usize]) -> Manifest {
        let mut recs = Vec::new();
        for (label, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                recs.push(Record {
                    path: PathBuf::from(format!("{label}/{i}.ppm")),
                    label,
                    split: None,
                });
            }
        }
        Manifest::new("/data", recs)
    }

    #[test]
    fn split_counts() {
        let m = split(&records(&[10, 606, 3]), 7);
        let count = |label: usize, s: Split| {
            m.records
                .iter()
                .filter(|r| r.label == label && r.split == Some(s))
                .count()
        };
        assert_eq!(
            (
                count(0, Split::Train),
                count(0, Split::Val),
                count(0, Split::Test)
            ),
            (8, 1, 1)
        );
        assert_eq!(
            (
                count(1, Split::Train),
                count(1, Split::Val),
                count(1, Split::Test)
            ),
            (486, 60, 60)
        );
        assert_eq!(count(2, Split::Train), 3);
        assert_eq!(m, split(&records(&[10, 606, 3]), 7));
        assert_ne!(m, split(&records(&[10, 606, 3]), 8));
    }

    #[test]
    fn text_round_trip() {
        let mut m = split(&records(&[3, 2]), 1);
        m.stats = Some(Normalization::new([0.1, 0.2, 0.3], [0.4, 0.5, 0.25]));
        let back = Manifest::parse(&m.to_text(Path::new("/data")), "/data").unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("a.ppm\t1", "/").is_err());
        assert!(Manifest::parse("a.ppm\tx\ttrain", "/").is_err());
        assert!(Manifest::parse("a.ppm\t1\tdev", "/").is_err());
        assert!(Manifest::parse("#stats 0 0 0 0 1 1\n", "/").is_err());
    }

    #[test]
    fn label_map_is_bijective() {
        let l = LabelMap::default();
        assert_eq!(l.len(), 9);
        for (i, n) in CLASS_NAMES.iter().enumerate() {
            assert_eq!(l.index(n), Some(i));
            assert_eq!(l.name(i), Some(*n));
        }
        assert!(LabelMap::new(vec!["a".into(), "a".into()]).is_err());
    }
}
