//! Synthetic datasets, forget/retain/test splits and the dataset CSV format.
//!
//! CSV layout: header `idx,label,split,f0,...,f{d-1}` followed by one row per
//! sample in index order, `split` one of `forget`, `retain`, `test`. Reals are
//! written in shortest round-trip form, so load/save is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{row_cross_entropy, Tensor};
use crate::error::{Error, Result};
use crate::nets::{classify, ParamSet};
use crate::real::Real;
use crate::rng;

/// Feature rows with labels; may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet<T> {
    pub features: Vec<T>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// All rows as an `[n×d]` tensor.
    pub fn x(&self) -> Result<Tensor<T>> {
        if self.is_empty() {
            return Err(Error::Validation("empty set has no feature matrix".into()));
        }
        Tensor::matrix(self.len(), self.dim, self.features.clone())
    }

    /// Rows at positions `pos` (positions within this set).
    pub fn batch(&self, pos: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if pos.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut f = Vec::with_capacity(pos.len() * self.dim);
        let mut y = Vec::with_capacity(pos.len());
        for &p in pos {
            f.extend_from_slice(self.row(p));
            y.push(self.labels[p]);
        }
        Ok((Tensor::matrix(pos.len(), self.dim, f)?, y))
    }

    /// Concatenation of two sets with the same dimension.
    pub fn concat(&self, other: &Self) -> Self {
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self {
            features,
            dim: self.dim,
            labels,
        }
    }
}

/// Features, labels and the forget/retain/test index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub features: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub forget_idx: Vec<usize>,
    pub retain_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Which subsets an operation touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubsetSelector {
    pub forget: bool,
    pub retain: bool,
    pub test: bool,
}

impl SubsetSelector {
    pub const FORGET: Self = Self {
        forget: true,
        retain: false,
        test: false,
    };
    pub const TRAIN: Self = Self {
        forget: true,
        retain: true,
        test: false,
    };
    pub const ALL: Self = Self {
        forget: true,
        retain: true,
        test: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Forget,
    Retain,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forget" => Some(Split::Forget),
            "retain" => Some(Split::Retain),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl<T: Real> DatasetBundle<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Train indices (forget ∪ retain) in ascending order.
    pub fn train_idx(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .forget_idx
            .iter()
            .chain(&self.retain_idx)
            .copied()
            .collect();
        t.sort_unstable();
        t
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet<T> {
        let dim = self.dim();
        let mut features = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            features.extend_from_slice(self.features.row(i));
        }
        LabeledSet {
            features,
            dim,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn forget_set(&self) -> LabeledSet<T> {
        self.subset(&self.forget_idx)
    }

    pub fn retain_set(&self) -> LabeledSet<T> {
        self.subset(&self.retain_idx)
    }

    pub fn test_set(&self) -> LabeledSet<T> {
        self.subset(&self.test_idx)
    }

    pub fn train_set(&self) -> LabeledSet<T> {
        self.subset(&self.train_idx())
    }

    pub fn split_of(&self, i: usize) -> Option<Split> {
        if self.forget_idx.contains(&i) {
            Some(Split::Forget)
        } else if self.retain_idx.contains(&i) {
            Some(Split::Retain)
        } else if self.test_idx.contains(&i) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// Indices of every row in the selected subsets.
    pub fn selected_idx(&self, sel: SubsetSelector) -> Vec<usize> {
        let mut out = Vec::new();
        if sel.forget {
            out.extend(&self.forget_idx);
        }
        if sel.retain {
            out.extend(&self.retain_idx);
        }
        if sel.test {
            out.extend(&self.test_idx);
        }
        out.sort_unstable();
        out
    }

    /// Checks the partition and range invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.features.rows() != n {
            return Err(Error::dim("bundle", self.features.shape(), &[n]));
        }
        if self.labels.iter().any(|&y| y >= self.num_classes) {
            return Err(Error::Validation("label outside [0, C)".into()));
        }
        let mut seen = vec![false; n];
        for &i in self
            .forget_idx
            .iter()
            .chain(&self.retain_idx)
            .chain(&self.test_idx)
        {
            if i >= n || seen[i] {
                return Err(Error::Validation(format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("some rows belong to no split".into()));
        }
        if self
            .features
            .data()
            .iter()
            .any(|&v| !(v >= T::zero() && v <= T::one()))
        {
            return Err(Error::Validation("features must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Same rows with `forget` as the forget set and the other train rows as retain.
    pub fn with_forget(&self, mut forget: Vec<usize>) -> Self {
        forget.sort_unstable();
        let mut retain: Vec<usize> = self
            .train_idx()
            .into_iter()
            .filter(|i| forget.binary_search(i).is_err())
            .collect();
        retain.sort_unstable();
        Self {
            forget_idx: forget,
            retain_idx: retain,
            ..self.clone()
        }
    }
}

/// Parameters of the blob generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_test: 256,
            dim: 64,
            classes: 4,
            noise_sigma: 0.1,
        }
    }
}

/// Gaussian blobs around `C` templates drawn in `[0.2, 0.8]^d`, clipped into
/// `[0, 1]`. Labels cycle through the classes so counts differ by at most one.
/// All train rows start in the retain split.
pub fn make_synthetic<T: Real>(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetBundle<T>> {
    if cfg.dim < 4 || cfg.classes < 2 || cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::Validation(format!("invalid synthetic sizes {cfg:?}")));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::Validation("noise_sigma must be finite and >= 0".into()));
    }
    let mut tr = rng::stream(seed, rng::tags::DATA, 0);
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| tr.random_range(0.2..0.8)).collect())
        .collect();
    let mut nr = rng::stream(seed, rng::tags::DATA, 1);
    let n = cfg.n_train + cfg.n_test;
    let mut features = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let local = if i < cfg.n_train { i } else { i - cfg.n_train };
        let y = local % cfg.classes;
        labels.push(y);
        for &c in &templates[y] {
            let z: f64 = nr.sample(StandardNormal);
            features.push(T::lit((c + cfg.noise_sigma * z).clamp(0.0, 1.0)));
        }
    }
    Ok(DatasetBundle {
        features: Tensor::matrix(n, cfg.dim, features)?,
        labels,
        num_classes: cfg.classes,
        forget_idx: Vec::new(),
        retain_idx: (0..cfg.n_train).collect(),
        test_idx: (cfg.n_train..n).collect(),
    })
}

/// Forget `⌊ratio · N_train⌋` train rows drawn without replacement.
pub fn split_random<T: Real>(
    bundle: &DatasetBundle<T>,
    forget_ratio: f64,
    seed: u64,
) -> Result<DatasetBundle<T>> {
    if !(forget_ratio > 0.0 && forget_ratio < 1.0) {
        return Err(Error::Validation(format!(
            "forget ratio must be in (0, 1), got {forget_ratio}"
        )));
    }
    let mut train = bundle.train_idx();
    let count = (forget_ratio * train.len() as f64).floor() as usize;
    let mut r = rng::stream(seed, rng::tags::SPLIT, 0);
    train.shuffle(&mut r);
    train.truncate(count);
    Ok(bundle.with_forget(train))
}

/// Forget every train row of one class.
pub fn split_class<T: Real>(bundle: &DatasetBundle<T>, class_id: usize) -> Result<DatasetBundle<T>> {
    if class_id >= bundle.num_classes {
        return Err(Error::Validation(format!(
            "class {class_id} outside [0, {})",
            bundle.num_classes
        )));
    }
    let forget = bundle
        .train_idx()
        .into_iter()
        .filter(|&i| bundle.labels[i] == class_id)
        .collect();
    Ok(bundle.with_forget(forget))
}

/// The `count` entries of `idx` with the lowest losses, ties by index.
pub fn lowest_loss<T: Real>(idx: &[usize], losses: &[T], count: usize) -> Vec<usize> {
    let mut order: Vec<(T, usize)> = losses.iter().copied().zip(idx.iter().copied()).collect();
    order.sort_by(|a, b| a.0.as_f64().total_cmp(&b.0.as_f64()).then(a.1.cmp(&b.1)));
    order.into_iter().take(count).map(|(_, i)| i).collect()
}

/// Worst-case forget set: the train rows the original model fits most
/// confidently (lowest cross-entropy). `ratio` may be 1.
pub fn split_worst_case<T: Real>(
    bundle: &DatasetBundle<T>,
    theta_o: &ParamSet<T>,
    forget_ratio: f64,
) -> Result<DatasetBundle<T>> {
    if !(forget_ratio > 0.0 && forget_ratio <= 1.0) {
        return Err(Error::Validation(format!(
            "forget ratio must be in (0, 1], got {forget_ratio}"
        )));
    }
    let train = bundle.train_idx();
    let set = bundle.subset(&train);
    let logits = classify(theta_o, &set.x()?)?;
    let losses = row_cross_entropy(&logits, &set.labels);
    let count = (forget_ratio * train.len() as f64).floor() as usize;
    Ok(bundle.with_forget(lowest_loss(&train, &losses, count)))
}

pub fn to_csv_string<T: Real>(bundle: &DatasetBundle<T>) -> String {
    let d = bundle.dim();
    let mut s = String::from("idx,label,split");
    for j in 0..d {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for i in 0..bundle.len() {
        let split = bundle.split_of(i).map_or("test", Split::as_str);
        let _ = write!(s, "{i},{},{split}", bundle.labels[i]);
        for v in bundle.features.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn from_csv_str<T: Real>(text: &str) -> Result<DatasetBundle<T>> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.split_inclusive('\n').enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    if !header.ends_with('\n') {
        return Err(perr(1, "truncated header".into()));
    }
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[..3] != ["idx", "label", "split"] {
        return Err(perr(1, "expected header idx,label,split,f0,...".into()));
    }
    let d = cols.len() - 3;
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(perr(1, format!("unexpected column {c}")));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let (mut forget, mut retain, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (k, raw) in lines {
        let line = k + 1;
        if !raw.ends_with('\n') {
            return Err(perr(line, "truncated row (missing newline)".into()));
        }
        let fields: Vec<&str> = raw.trim_end().split(',').collect();
        if fields.len() != d + 3 {
            return Err(perr(line, format!("expected {} fields, got {}", d + 3, fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| perr(line, format!("bad idx {:?}", fields[0])))?;
        if idx != labels.len() {
            return Err(perr(line, format!("idx {idx} out of order")));
        }
        labels.push(
            fields[1]
                .parse::<usize>()
                .map_err(|_| perr(line, format!("bad label {:?}", fields[1])))?,
        );
        match Split::parse(fields[2]) {
            Some(Split::Forget) => forget.push(idx),
            Some(Split::Retain) => retain.push(idx),
            Some(Split::Test) => test.push(idx),
            None => return Err(perr(line, format!("bad split {:?}", fields[2]))),
        }
        for f in &fields[3..] {
            let v: T = f
                .parse()
                .map_err(|_| perr(line, format!("bad real {f:?}")))?;
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(perr(2, "no data rows".into()));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let bundle = DatasetBundle {
        features: Tensor::matrix(labels.len(), d, features)?,
        labels,
        num_classes,
        forget_idx: forget,
        retain_idx: retain,
        test_idx: test,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_csv<T: Real>(bundle: &DatasetBundle<T>, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(bundle))?;
    Ok(())
}

pub fn load_csv<T: Real>(path: &Path) -> Result<DatasetBundle<T>> {
    from_csv_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetBundle<f64> {
        make_synthetic(
            &SyntheticConfig {
                n_train: 10,
                n_test: 3,
                dim: 4,
                classes: 3,
                noise_sigma: 0.1,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_samples_equal_templates() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..SyntheticConfig::default()
        };
        let b: DatasetBundle<f64> = make_synthetic(&cfg, 3).unwrap();
        for i in 0..b.len() {
            let y = b.labels[i];
            assert_eq!(b.features.row(i), b.features.row(y));
        }
        b.validate().unwrap();
    }

    #[test]
    fn classes_are_balanced() {
        let b: DatasetBundle<f64> = make_synthetic(&SyntheticConfig::default(), 0).unwrap();
        let mut counts = [0usize; 4];
        for &i in &b.train_idx() {
            counts[b.labels[i]] += 1;
        }
        let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(mx - mn <= 1);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SyntheticConfig {
            dim: 3,
            ..SyntheticConfig::default()
        };
        assert!(make_synthetic::<f64>(&cfg, 0).is_err());
        let cfg = SyntheticConfig {
            classes: 1,
            ..SyntheticConfig::default()
        };
        assert!(make_synthetic::<f64>(&cfg, 0).is_err());
    }

    #[test]
    fn random_split_counts() {
        let b: DatasetBundle<f64> = make_synthetic(&SyntheticConfig::default(), 0).unwrap();
        let s = split_random(&b, 0.1, 4).unwrap();
        assert_eq!(s.forget_idx.len(), 102);
        assert_eq!(s.retain_idx.len(), 1024 - 102);
        assert_eq!(s, split_random(&b, 0.1, 4).unwrap());
        s.validate().unwrap();
        assert_eq!(s.features, b.features);

        let tiny = split_random(&small(), 0.05, 1).unwrap();
        assert!(tiny.forget_idx.is_empty());
        assert_eq!(tiny.retain_idx, small().train_idx());
        assert!(split_random(&b, 1.0, 0).is_err());
        assert!(split_random(&b, 0.0, 0).is_err());
    }

    #[test]
    fn class_split() {
        let mut b = small();
        b.labels[..4].copy_from_slice(&[0, 1, 0, 2]);
        let s = split_class(&b, 0).unwrap();
        assert!(s.forget_idx.iter().all(|&i| s.labels[i] == 0));
        assert_eq!(&s.forget_idx[..2], &[0, 2]);
        let mut all = s.forget_idx.clone();
        all.extend(&s.retain_idx);
        all.sort_unstable();
        assert_eq!(all, b.train_idx());
        assert!(split_class(&b, 3).is_err());
    }

    #[test]
    fn lowest_loss_selection() {
        assert_eq!(lowest_loss(&[0, 1, 2], &[0.1, 0.9, 0.5], 1), vec![0]);
        assert_eq!(lowest_loss(&[5, 3, 9], &[0.2, 0.2, 0.1], 2), vec![9, 3]);
        assert_eq!(lowest_loss(&[0, 1, 2], &[0.1, 0.9, 0.5], 3).len(), 3);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let b = split_random(&small(), 0.3, 2).unwrap();
        let text = to_csv_string(&b);
        assert!(text.starts_with("idx,label,split,f0,f1,f2,f3\n"));
        let back: DatasetBundle<f64> = from_csv_str(&text).unwrap();
        assert_eq!(back, b);

        let empty_forget: DatasetBundle<f64> = from_csv_str(&to_csv_string(&small())).unwrap();
        assert_eq!(empty_forget, small());

        let cut = &text[..text.len() - 5];
        let last_line = cut.lines().count();
        match from_csv_str::<f64>(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, last_line),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad = text.replacen("retain", "holdout", 1);
        assert!(matches!(from_csv_str::<f64>(&bad), Err(Error::Parse { .. })));
    }
}
