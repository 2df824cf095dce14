//! Dataset ingestion, split management, fold orchestration, and label-noise
//! injection.
//!
//! A [`DatasetBundle`] is immutable once assembled: the split/noise/fold
//! operations all consume a bundle and return a new one. The intended
//! pipeline is `generate/load -> carve_test -> split -> inject_noise`; the
//! meta/validation holdout is always carved before noise so trusted splits
//! stay clean (and [`split`] re-checks that).

use std::io::{Read, Write};
use std::path::Path;

use crate::labelbank::SoftLabelMatrix;
use crate::ndcore::{Rng, Tensor};
use crate::{Error, Result};

/// Per-instance split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Trusted held-out data: the meta set, doubling as the validation set.
    Meta,
    Validation,
    Test,
}

/// Features, annotations, optional clean annotations, and split tags.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    /// `[n, prod(feature_shape)]`, row per instance.
    pub features: Tensor,
    /// `[d]` for flat features, `[c, h, w]` for images.
    pub feature_shape: Vec<usize>,
    /// Annotated targets; possibly corrupted on the train split.
    pub targets: Vec<usize>,
    /// Clean targets, present once noise has been injected (or from birth
    /// for synthetic data).
    pub true_targets: Option<Vec<usize>>,
    pub splits: Vec<Split>,
    pub classes: usize,
    /// Per-channel (mean, std) applied by [`standardize`].
    pub channel_stats: Option<Vec<(f64, f64)>>,
    /// Realized corruption bookkeeping from [`inject_noise`].
    pub noise_stats: Option<NoiseStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub requested_p: f64,
    /// Fraction of train instances whose target was redrawn.
    pub redrawn_fraction: f64,
    /// Fraction of train instances whose target now differs from the truth.
    pub flipped_fraction: f64,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.targets.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if self.features.rank() != 2 || self.features.rows() != n {
            return Err(Error::dimension(
                "DatasetBundle",
                format!("features {:?} for {n} instances", self.features.shape()),
            ));
        }
        let flat: usize = self.feature_shape.iter().product();
        if flat != self.features.cols() {
            return Err(Error::dimension(
                "DatasetBundle",
                format!("feature_shape {:?} vs width {}", self.feature_shape, self.features.cols()),
            ));
        }
        if self.splits.len() != n {
            return Err(Error::dimension(
                "DatasetBundle",
                format!("{} split tags for {n} instances", self.splits.len()),
            ));
        }
        if let Some(t) = &self.true_targets {
            if t.len() != n {
                return Err(Error::dimension(
                    "DatasetBundle",
                    format!("{} true targets for {n} instances", t.len()),
                ));
            }
        }
        if self.targets.iter().any(|&y| y >= self.classes) {
            return Err(Error::contract("DatasetBundle", "target out of class range"));
        }
        Ok(())
    }

    /// Instance ids carrying the given split tag.
    pub fn ids_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Gathers feature rows for a set of instance ids.
    pub fn features_of(&self, ids: &[usize]) -> Tensor {
        let w = self.features.cols();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::new(vec![ids.len(), w], data).expect("ids validated by caller")
    }

    pub fn targets_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.targets[i]).collect()
    }

    /// True-vs-annotation disagreement mask, if clean targets are known.
    pub fn noisy_mask(&self) -> Option<Vec<bool>> {
        self.true_targets.as_ref().map(|truth| {
            truth
                .iter()
                .zip(&self.targets)
                .map(|(&t, &y)| t != y)
                .collect()
        })
    }
}

fn stratified_pick(bundle: &DatasetBundle, from: Split, frac: f64, rng: &mut Rng, op: &'static str) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&frac) || frac == 0.0 {
        return Err(Error::argument(op, format!("fraction {frac} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); bundle.classes];
    for (i, (&y, &s)) in bundle.targets.iter().zip(&bundle.splits).enumerate() {
        if s == from {
            by_class[y].push(i);
        }
    }
    let mut picked = Vec::new();
    for (k, ids) in by_class.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(Error::argument(
                op,
                format!("class {k} has {} instance(s); stratified split needs at least 2", ids.len()),
            ));
        }
        // Round to nearest keeps overall proportions within one instance
        // per class.
        let k_take = ((ids.len() as f64 * frac).round() as usize).clamp(1, ids.len() - 1);
        let chosen = rng.choice(ids.len(), k_take)?;
        picked.extend(chosen.into_iter().map(|j| ids[j]));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Tags a stratified fraction of the train portion as the meta/validation
/// holdout. Must run before noise injection; errors if any candidate holdout
/// instance already disagrees with its clean target.
pub fn split(bundle: &DatasetBundle, holdout_frac: f64, rng: &mut Rng) -> Result<DatasetBundle> {
    let picked = stratified_pick(bundle, Split::Train, holdout_frac, rng, "split")?;
    let mut out = bundle.clone();
    for &i in &picked {
        if let Some(truth) = &bundle.true_targets {
            if truth[i] != bundle.targets[i] {
                return Err(Error::Config(
                    "holdout would contain corrupted annotations; split before injecting noise".into(),
                ));
            }
        }
        out.splits[i] = Split::Meta;
    }
    out.validate()?;
    Ok(out)
}

/// Tags a stratified fraction of the train portion as the test split.
pub fn carve_test(bundle: &DatasetBundle, frac: f64, rng: &mut Rng) -> Result<DatasetBundle> {
    let picked = stratified_pick(bundle, Split::Train, frac, rng, "carve_test")?;
    let mut out = bundle.clone();
    for &i in &picked {
        out.splits[i] = Split::Test;
    }
    out.validate()?;
    Ok(out)
}

/// Keeps a stratified subset of `n_total` instances (train-tagged bundles
/// only), dropping the rest. Used to cut loaded corpora down to desk scale.
pub fn stratified_subset(bundle: &DatasetBundle, n_total: usize, rng: &mut Rng) -> Result<DatasetBundle> {
    if n_total == 0 || n_total > bundle.n() {
        return Err(Error::argument(
            "stratified_subset",
            format!("n_total {n_total} outside 1..={}", bundle.n()),
        ));
    }
    if n_total == bundle.n() {
        return Ok(bundle.clone());
    }
    let frac = n_total as f64 / bundle.n() as f64;
    let keep = stratified_pick(bundle, Split::Train, frac, rng, "stratified_subset")?;
    let out = DatasetBundle {
        features: bundle.features_of(&keep),
        feature_shape: bundle.feature_shape.clone(),
        targets: bundle.targets_of(&keep),
        true_targets: bundle
            .true_targets
            .as_ref()
            .map(|t| keep.iter().map(|&i| t[i]).collect()),
        splits: vec![Split::Train; keep.len()],
        classes: bundle.classes,
        channel_stats: bundle.channel_stats.clone(),
        noise_stats: bundle.noise_stats,
    };
    out.validate()?;
    Ok(out)
}

/// Replaces each train-split target, independently with probability `p`, by
/// a class drawn uniformly over all `classes` (the draw may equal the
/// original, so the realized flip fraction is about `p (c-1) / c`; both
/// fractions are recorded in [`NoiseStats`]). Meta, validation, and test
/// targets are never touched.
pub fn inject_noise(bundle: &DatasetBundle, p: f64, rng: &mut Rng) -> Result<DatasetBundle> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::argument("inject_noise", format!("p {p} outside [0, 1]")));
    }
    let mut out = bundle.clone();
    if out.true_targets.is_none() {
        out.true_targets = Some(bundle.targets.clone());
    }
    let mut redrawn = 0usize;
    let mut train = 0usize;
    for i in 0..out.n() {
        if out.splits[i] != Split::Train {
            continue;
        }
        train += 1;
        if rng.uniform() < p {
            redrawn += 1;
            out.targets[i] = rng.below(out.classes);
        }
    }
    let truth = out.true_targets.as_ref().unwrap();
    let flipped = out
        .splits
        .iter()
        .zip(truth.iter().zip(&out.targets))
        .filter(|(&s, (&t, &y))| s == Split::Train && t != y)
        .count();
    out.noise_stats = Some(NoiseStats {
        requested_p: p,
        redrawn_fraction: if train == 0 { 0.0 } else { redrawn as f64 / train as f64 },
        flipped_fraction: if train == 0 { 0.0 } else { flipped as f64 / train as f64 },
    });
    out.validate()?;
    Ok(out)
}

/// Gaussian blobs: `c` unit-variance clusters whose centroids sit on a
/// circle of radius `separation` in the first two feature dimensions.
/// All instances are train-tagged; true targets equal annotations.
pub fn gen_blobs(rng: &mut Rng, n_per_class: usize, c: usize, d: usize, separation: f64) -> Result<DatasetBundle> {
    if c < 2 {
        return Err(Error::argument("gen_blobs", format!("need c >= 2, got {c}")));
    }
    if d < 2 {
        return Err(Error::argument("gen_blobs", format!("need d >= 2, got {d}")));
    }
    if n_per_class == 0 {
        return Err(Error::argument("gen_blobs", "n_per_class must be positive"));
    }
    let n = n_per_class * c;
    let mut data = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for k in 0..c {
        let angle = std::f64::consts::TAU * k as f64 / c as f64;
        let (cx, cy) = (separation * angle.cos(), separation * angle.sin());
        for _ in 0..n_per_class {
            data.push(cx + rng.normal());
            data.push(cy + rng.normal());
            for _ in 2..d {
                data.push(rng.normal());
            }
            targets.push(k);
        }
    }
    let bundle = DatasetBundle {
        features: Tensor::new(vec![n, d], data)?,
        feature_shape: vec![d],
        targets: targets.clone(),
        true_targets: Some(targets),
        splits: vec![Split::Train; n],
        classes: c,
        channel_stats: None,
        noise_stats: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Class centroid positions used by [`gen_blobs`], for oracle checks.
pub fn blob_centroids(c: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..c)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / c as f64;
            let mut v = vec![0.0; d];
            v[0] = separation * angle.cos();
            v[1] = separation * angle.sin();
            v
        })
        .collect()
}

/// Two interleaved noisy spirals (2 classes, 2-d features).
pub fn gen_spirals(rng: &mut Rng, n_per_class: usize, turns: f64) -> Result<DatasetBundle> {
    if n_per_class == 0 {
        return Err(Error::argument("gen_spirals", "n_per_class must be positive"));
    }
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut targets = Vec::with_capacity(n);
    for k in 0..2usize {
        let phase = k as f64 * std::f64::consts::PI;
        for i in 0..n_per_class {
            let t = (i as f64 + 1.0) / n_per_class as f64;
            let angle = std::f64::consts::TAU * turns * t + phase;
            let r = 4.0 * t;
            data.push(r * angle.cos() + 0.15 * rng.normal());
            data.push(r * angle.sin() + 0.15 * rng.normal());
            targets.push(k);
        }
    }
    let bundle = DatasetBundle {
        features: Tensor::new(vec![n, 2], data)?,
        feature_shape: vec![2],
        targets: targets.clone(),
        true_targets: Some(targets),
        splits: vec![Split::Train; n],
        classes: 2,
        channel_stats: None,
        noise_stats: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

/// A raw IDX array (uint8 payload).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Reads an IDX file: big-endian magic `00 00 08 <rank>`, `rank` u32 dims,
/// then the uint8 payload. Rejects trailing or missing bytes.
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::format(path, 0, "file shorter than magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(path, 0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(path, 2, format!("unsupported element type 0x{:02x} (only uint8)", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format(path, 3, "zero rank"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(path, bytes.len() as u64, "truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let expect: usize = dims.iter().product();
    if bytes.len() != header + expect {
        return Err(Error::format(
            path,
            bytes.len().min(header + expect) as u64,
            format!("payload is {} bytes, dims {:?} need {expect}", bytes.len() - header, dims),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Writes an IDX uint8 file (the inverse of [`read_idx`]).
pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    let expect: usize = arr.dims.iter().product();
    if expect != arr.data.len() {
        return Err(Error::dimension(
            "write_idx",
            format!("dims {:?} vs {} bytes", arr.dims, arr.data.len()),
        ));
    }
    if arr.dims.len() > 255 {
        return Err(Error::argument("write_idx", "rank exceeds 255"));
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&[0, 0, 0x08, arr.dims.len() as u8])?;
    for &d in &arr.dims {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(&arr.data)?;
    Ok(())
}

/// Loads an IDX image/label pair (MNIST layout): rank-3 `[n, h, w]` images
/// and rank-1 `[n]` labels. Pixels are scaled to `[0, 1]`; all instances are
/// train-tagged.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetBundle> {
    let images = read_idx(images_path)?;
    let labels = read_idx(labels_path)?;
    if images.dims.len() != 3 {
        return Err(Error::format(
            images_path,
            3,
            format!("expected rank-3 images, got rank {}", images.dims.len()),
        ));
    }
    if labels.dims.len() != 1 {
        return Err(Error::format(
            labels_path,
            3,
            format!("expected rank-1 labels, got rank {}", labels.dims.len()),
        ));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::format(
            labels_path,
            4,
            format!("{} labels for {n} images", labels.dims[0]),
        ));
    }
    if n == 0 {
        return Err(Error::format(images_path, 4, "empty image set"));
    }
    let targets: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let classes = targets.iter().max().unwrap() + 1;
    let features = Tensor::new(
        vec![n, h * w],
        images.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let bundle = DatasetBundle {
        features,
        feature_shape: vec![1, h, w],
        targets,
        true_targets: None,
        splits: vec![Split::Train; n],
        classes,
        channel_stats: None,
        noise_stats: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// Records of 1 label byte + 3072 pixel bytes.
    Cifar10,
    /// Records of 2 label bytes (coarse, fine) + 3072 pixel bytes; the fine
    /// label is used.
    Cifar100,
}

impl CifarVariant {
    fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + 3072,
            CifarVariant::Cifar100 => 2 + 3072,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Loads a CIFAR binary batch file. Pixels are scaled to `[0, 1]` and kept
/// in the file's channel-major `[3, 32, 32]` layout; all instances are
/// train-tagged.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<DatasetBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::format(
            path,
            (bytes.len() / rec * rec) as u64,
            format!("size {} is not a positive multiple of the {rec}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut targets = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let base = r * rec;
        let label = match variant {
            CifarVariant::Cifar10 => bytes[base] as usize,
            CifarVariant::Cifar100 => bytes[base + 1] as usize,
        };
        if label >= variant.classes() {
            return Err(Error::format(
                path,
                base as u64,
                format!("label {label} out of range for {variant:?}"),
            ));
        }
        targets.push(label);
        let px = &bytes[base + rec - 3072..base + rec];
        data.extend(px.iter().map(|&b| b as f64 / 255.0));
    }
    let bundle = DatasetBundle {
        features: Tensor::new(vec![n, 3072], data)?,
        feature_shape: vec![3, 32, 32],
        targets,
        true_targets: None,
        splits: vec![Split::Train; n],
        classes: variant.classes(),
        channel_stats: None,
        noise_stats: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Standardizes features using statistics computed from the train split
/// only: per channel for `[c, h, w]` shapes, per feature dimension for flat
/// shapes. The constants are stored on the bundle.
pub fn standardize(bundle: &DatasetBundle) -> Result<DatasetBundle> {
    let train: Vec<usize> = bundle.ids_of(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("standardize needs a nonempty train split".into()));
    }
    let width = bundle.features.cols();
    // (start, len) feature ranges sharing one statistic.
    let groups: Vec<(usize, usize)> = if bundle.feature_shape.len() == 3 {
        let (c, h, w) = (
            bundle.feature_shape[0],
            bundle.feature_shape[1],
            bundle.feature_shape[2],
        );
        (0..c).map(|k| (k * h * w, h * w)).collect()
    } else {
        (0..width).map(|j| (j, 1)).collect()
    };
    let mut stats = Vec::with_capacity(groups.len());
    for &(start, len) in &groups {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &i in &train {
            for v in &bundle.features.row(i)[start..start + len] {
                sum += v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for &i in &train {
            for v in &bundle.features.row(i)[start..start + len] {
                ss += (v - mean) * (v - mean);
            }
        }
        let std = (ss / count as f64).sqrt();
        stats.push((mean, if std > 0.0 { std } else { 1.0 }));
    }
    let mut out = bundle.clone();
    for i in 0..out.n() {
        let row = out.features.row_mut(i);
        for (g, &(start, len)) in groups.iter().enumerate() {
            let (m, s) = stats[g];
            for v in &mut row[start..start + len] {
                *v = (*v - m) / s;
            }
        }
    }
    out.channel_stats = Some(stats);
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

/// Assignment of each train-split instance to one of `k` folds.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub k: usize,
    /// `Some(fold)` for train instances, `None` elsewhere.
    pub assignments: Vec<Option<usize>>,
}

/// Deals the shuffled train portion round-robin into `k` disjoint folds
/// whose sizes differ by at most one.
pub fn make_folds(bundle: &DatasetBundle, k: usize, rng: &mut Rng) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::argument("make_folds", format!("need k >= 2, got {k}")));
    }
    let mut train = bundle.ids_of(Split::Train);
    if train.len() < k {
        return Err(Error::argument(
            "make_folds",
            format!("{} train instances cannot fill {k} folds", train.len()),
        ));
    }
    rng.shuffle(&mut train);
    let mut assignments = vec![None; bundle.n()];
    for (pos, &id) in train.iter().enumerate() {
        assignments[id] = Some(pos % k);
    }
    Ok(FoldPlan { k, assignments })
}

/// View of the bundle for one fold run: fold `j` becomes the meta set, the
/// remaining folds stay train, non-train tags are preserved.
pub fn fold_view(bundle: &DatasetBundle, plan: &FoldPlan, fold: usize) -> Result<DatasetBundle> {
    if fold >= plan.k {
        return Err(Error::argument("fold_view", format!("fold {fold} of {}", plan.k)));
    }
    if plan.assignments.len() != bundle.n() {
        return Err(Error::dimension(
            "fold_view",
            format!("{} assignments for {} instances", plan.assignments.len(), bundle.n()),
        ));
    }
    let mut out = bundle.clone();
    for (i, assign) in plan.assignments.iter().enumerate() {
        if let Some(f) = assign {
            out.splits[i] = if *f == fold { Split::Meta } else { Split::Train };
        }
    }
    out.validate()?;
    Ok(out)
}

/// Mean of realized probability rows across folds, renormalized to sum 1.
pub fn average_fold_labels(realizations: &[SoftLabelMatrix]) -> Result<SoftLabelMatrix> {
    let first = realizations
        .first()
        .ok_or_else(|| Error::argument("average_fold_labels", "no realizations"))?;
    let (n, c) = (first.n(), first.c());
    for (i, m) in realizations.iter().enumerate() {
        if m.n() != n || m.c() != c {
            return Err(Error::dimension(
                "average_fold_labels",
                format!("realization {i} is {}x{}, expected {n}x{c}", m.n(), m.c()),
            ));
        }
    }
    let mut rows = Vec::with_capacity(n);
    let k = realizations.len() as f64;
    for i in 0..n {
        let mut row = vec![0.0; c];
        for m in realizations {
            for (acc, &v) in row.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        let sum: f64 = row.iter().sum();
        // Mean then renormalize; the k factor cancels but keep both steps
        // explicit so a future weighted variant stays local.
        for v in &mut row {
            *v = (*v / k) / (sum / k);
        }
        rows.push(row);
    }
    SoftLabelMatrix::from_rows(&rows)
}
