//! Learnable label parameters and their realization into probability rows.
//!
//! Two parameterizations:
//!
//! - [`ClassAlphas`]: one smoothing scalar per class. Realized rows put
//!   `1 - alpha` on the annotated class and spread `alpha` uniformly over the
//!   rest. Updates are projected gradient steps (clamp to `[0, 1]`).
//! - [`InstanceLogits`]: a free logit row per instance, realized through a
//!   softmax. Updates are plain gradient steps; the softmax keeps every
//!   realized row a valid distribution with no projection.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::ndcore::{softmax, Tensor};
use crate::{Error, Result};

/// How close a row's sum must be to 1 to count as a distribution.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Per-instance probability rows, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix {
    rows: Tensor,
}

impl SoftLabelMatrix {
    /// Wraps a rank-2 tensor whose rows are probability distributions.
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 {
            return Err(Error::dimension(
                "SoftLabelMatrix::new",
                format!("need rank 2, got shape {:?}", rows.shape()),
            ));
        }
        for i in 0..rows.rows() {
            let r = rows.row(i);
            if r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::contract(
                    "SoftLabelMatrix::new",
                    format!("row {i} has a negative or non-finite entry"),
                ));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::contract(
                    "SoftLabelMatrix::new",
                    format!("row {i} sums to {sum}, not 1"),
                ));
            }
        }
        Ok(SoftLabelMatrix { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        SoftLabelMatrix::new(Tensor::from_rows(rows)?)
    }

    /// One-hot rows for hard targets.
    pub fn one_hot(targets: &[usize], c: usize) -> Result<Self> {
        let mut rows = Tensor::zeros(&[targets.len(), c]);
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::argument(
                    "SoftLabelMatrix::one_hot",
                    format!("target {y} out of range for {c} classes"),
                ));
            }
            rows.row_mut(i)[y] = 1.0;
        }
        Ok(SoftLabelMatrix { rows })
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn c(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    /// Selects a sub-matrix of rows by index.
    pub fn gather(&self, ids: &[usize]) -> Result<SoftLabelMatrix> {
        let c = self.c();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= self.n() {
                return Err(Error::argument(
                    "SoftLabelMatrix::gather",
                    format!("row {i} out of range for {} rows", self.n()),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(SoftLabelMatrix {
            rows: Tensor::new(vec![ids.len(), c], data)?,
        })
    }
}

/// Per-class smoothing scalars, kept in `[0, 1]` by projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAlphas {
    pub alphas: Vec<f64>,
    pub lr: f64,
}

/// Per-instance free label logits; realized rows are `softmax(z_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLogits {
    pub z: Tensor,
    pub lr: f64,
}

/// The learnable label parameters in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelBank {
    Class(ClassAlphas),
    Instance(InstanceLogits),
}

/// Meta-gradients shaped like a bank's parameters.
#[derive(Debug, Clone)]
pub enum MetaGrads {
    /// Accumulated gradient per class (zero for classes absent from the batch).
    Class(Vec<f64>),
    /// One gradient row per batch instance, keyed by instance id.
    Instance { ids: Vec<usize>, rows: Tensor },
}

/// Smoothing rows for a batch of targets: `1 - alpha[y]` on the target,
/// `alpha[y] / (c - 1)` elsewhere.
pub fn realize_class(bank: &ClassAlphas, targets: &[usize]) -> Result<SoftLabelMatrix> {
    let c = bank.alphas.len();
    let mut rows = Tensor::zeros(&[targets.len(), c]);
    for (i, &y) in targets.iter().enumerate() {
        if y >= c {
            return Err(Error::argument(
                "realize_class",
                format!("target {y} out of range for {c} classes"),
            ));
        }
        let a = bank.alphas[y];
        let off = a / (c as f64 - 1.0);
        let row = rows.row_mut(i);
        for v in row.iter_mut() {
            *v = off;
        }
        row[y] = 1.0 - a;
    }
    Ok(SoftLabelMatrix { rows })
}

/// Softmax rows for a batch of instance ids.
pub fn realize_instance(bank: &InstanceLogits, ids: &[usize]) -> Result<SoftLabelMatrix> {
    let c = bank.z.cols();
    let mut data = Vec::with_capacity(ids.len() * c);
    for &i in ids {
        if i >= bank.z.rows() {
            return Err(Error::argument(
                "realize_instance",
                format!("instance id {i} out of range for {} rows", bank.z.rows()),
            ));
        }
        data.extend(softmax(bank.z.row(i)));
    }
    Ok(SoftLabelMatrix {
        rows: Tensor::new(vec![ids.len(), c], data)?,
    })
}

fn check_init_target(op: &'static str, c: usize, init_target: f64, allow_one: bool) -> Result<()> {
    let lo = 1.0 / c as f64;
    let ok = if allow_one {
        init_target > lo && init_target <= 1.0
    } else {
        init_target > lo && init_target < 1.0
    };
    if !ok {
        let hi = if allow_one { "1]" } else { "1)" };
        return Err(Error::argument(
            op,
            format!("init_target {init_target} outside ({lo}, {hi} for c={c}"),
        ));
    }
    Ok(())
}

/// Class-mode bank whose realized rows put `init_target` mass on the
/// annotated class: `alpha = 1 - init_target` for every class.
///
/// `init_target = 1` is allowed and gives `alpha = 0`, the one-hot start the
/// meta loop defaults to.
pub fn init_class(c: usize, init_target: f64, lr: f64) -> Result<ClassAlphas> {
    if c < 2 {
        return Err(Error::argument("init_class", format!("need c >= 2, got {c}")));
    }
    check_init_target("init_class", c, init_target, true)?;
    if lr < 0.0 {
        return Err(Error::argument("init_class", format!("negative lr {lr}")));
    }
    Ok(ClassAlphas {
        alphas: vec![1.0 - init_target; c],
        lr,
    })
}

/// Instance-mode bank whose realized rows put `init_target` mass on the
/// annotated class and spread the rest uniformly.
///
/// Solving `softmax([t, 0, ..., 0])[0] = s` gives `t = ln(s (c-1) / (1-s))`;
/// row `i` is `t` at the annotated class and 0 elsewhere.
pub fn init_instance(n: usize, c: usize, targets: &[usize], init_target: f64, lr: f64) -> Result<InstanceLogits> {
    if c < 2 {
        return Err(Error::argument("init_instance", format!("need c >= 2, got {c}")));
    }
    if targets.len() != n {
        return Err(Error::dimension(
            "init_instance",
            format!("{} targets for n={n}", targets.len()),
        ));
    }
    check_init_target("init_instance", c, init_target, false)?;
    if lr < 0.0 {
        return Err(Error::argument("init_instance", format!("negative lr {lr}")));
    }
    let t = (init_target * (c as f64 - 1.0) / (1.0 - init_target)).ln();
    let mut z = Tensor::zeros(&[n, c]);
    for (i, &y) in targets.iter().enumerate() {
        if y >= c {
            return Err(Error::argument(
                "init_instance",
                format!("target {y} out of range for {c} classes"),
            ));
        }
        z.row_mut(i)[y] = t;
    }
    Ok(InstanceLogits { z, lr })
}

impl LabelBank {
    pub fn class(c: usize, init_target: f64, lr: f64) -> Result<Self> {
        Ok(LabelBank::Class(init_class(c, init_target, lr)?))
    }

    pub fn instance(n: usize, c: usize, targets: &[usize], init_target: f64, lr: f64) -> Result<Self> {
        Ok(LabelBank::Instance(init_instance(n, c, targets, init_target, lr)?))
    }

    pub fn c(&self) -> usize {
        match self {
            LabelBank::Class(b) => b.alphas.len(),
            LabelBank::Instance(b) => b.z.cols(),
        }
    }

    pub fn label_lr(&self) -> f64 {
        match self {
            LabelBank::Class(b) => b.lr,
            LabelBank::Instance(b) => b.lr,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            LabelBank::Class(_) => "class",
            LabelBank::Instance(_) => "instance",
        }
    }

    /// Realized rows for a batch: class mode keys on the annotated targets,
    /// instance mode on the instance ids.
    pub fn realize(&self, ids: &[usize], targets: &[usize]) -> Result<SoftLabelMatrix> {
        if ids.len() != targets.len() {
            return Err(Error::dimension(
                "LabelBank::realize",
                format!("{} ids vs {} targets", ids.len(), targets.len()),
            ));
        }
        match self {
            LabelBank::Class(b) => realize_class(b, targets),
            LabelBank::Instance(b) => realize_instance(b, ids),
        }
    }

    /// Chains per-label-entry meta-gradients `M[i][k] = dL_meta/dp_{i,k}`
    /// back to the bank's parameters.
    ///
    /// Class mode: `dL/dalpha_{y_i} = -M[i][y_i] + mean_offtarget(M[i])`,
    /// summed over the batch instances sharing a class. Instance mode:
    /// `dL/dz_i = J_softmax(z_i)^T M[i]`.
    pub fn chain_to_params(
        &self,
        per_class_meta: &Tensor,
        ids: &[usize],
        targets: &[usize],
    ) -> Result<MetaGrads> {
        if per_class_meta.rank() != 2 {
            return Err(Error::dimension(
                "chain_to_params",
                format!("per_class_meta must be rank 2, got {:?}", per_class_meta.shape()),
            ));
        }
        let (n, c) = (per_class_meta.rows(), per_class_meta.cols());
        if c != self.c() {
            return Err(Error::dimension(
                "chain_to_params",
                format!("per_class_meta has {c} classes, bank has {}", self.c()),
            ));
        }
        if ids.len() != n || targets.len() != n {
            return Err(Error::dimension(
                "chain_to_params",
                format!("{n} gradient rows vs {} ids / {} targets", ids.len(), targets.len()),
            ));
        }
        match self {
            LabelBank::Class(bank) => {
                let mut grad = vec![0.0; bank.alphas.len()];
                for (i, &y) in targets.iter().enumerate() {
                    let m = per_class_meta.row(i);
                    let off: f64 = m
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != y)
                        .map(|(_, &v)| v)
                        .sum();
                    grad[y] += -m[y] + off / (c as f64 - 1.0);
                }
                Ok(MetaGrads::Class(grad))
            }
            LabelBank::Instance(bank) => {
                let mut rows = Tensor::zeros(&[n, c]);
                for (i, &id) in ids.iter().enumerate() {
                    let p = softmax(bank.z.row(id));
                    let m = per_class_meta.row(i);
                    let dot: f64 = p.iter().zip(m).map(|(&pj, &mj)| pj * mj).sum();
                    let out = rows.row_mut(i);
                    for j in 0..c {
                        out[j] = p[j] * (m[j] - dot);
                    }
                }
                Ok(MetaGrads::Instance {
                    ids: ids.to_vec(),
                    rows,
                })
            }
        }
    }

    /// First-order update with the bank's own learning rate. Class alphas are
    /// clamped back into `[0, 1]`; instance logits need no projection.
    pub fn apply_meta_update(&mut self, grads: &MetaGrads) -> Result<()> {
        match (self, grads) {
            (LabelBank::Class(bank), MetaGrads::Class(g)) => {
                if g.len() != bank.alphas.len() {
                    return Err(Error::dimension(
                        "apply_meta_update",
                        format!("{} grads for {} alphas", g.len(), bank.alphas.len()),
                    ));
                }
                for (a, &gi) in bank.alphas.iter_mut().zip(g) {
                    *a = (*a - bank.lr * gi).clamp(0.0, 1.0);
                }
                Ok(())
            }
            (LabelBank::Instance(bank), MetaGrads::Instance { ids, rows }) => {
                if rows.cols() != bank.z.cols() {
                    return Err(Error::dimension(
                        "apply_meta_update",
                        format!("{} grad cols for {} classes", rows.cols(), bank.z.cols()),
                    ));
                }
                for (i, &id) in ids.iter().enumerate() {
                    if id >= bank.z.rows() {
                        return Err(Error::argument(
                            "apply_meta_update",
                            format!("instance id {id} out of range"),
                        ));
                    }
                    let g = rows.row(i);
                    let zr = bank.z.row_mut(id);
                    for (zj, &gj) in zr.iter_mut().zip(g) {
                        *zj -= bank.lr * gj;
                    }
                }
                Ok(())
            }
            _ => Err(Error::contract(
                "apply_meta_update",
                "gradient kind does not match bank mode",
            )),
        }
    }
}

/// Renders an `f64` with 17 significant digits so it parses back bit-exact.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A parsed label export file.
#[derive(Debug, Clone)]
pub struct LabelFile {
    pub mode: String,
    pub step: usize,
    /// Class mode only: the raw smoothing scalars.
    pub alphas: Option<Vec<f64>>,
    /// Instance mode: one row per instance. Class mode: one realized row per class.
    pub labels: SoftLabelMatrix,
}

/// Writes realized labels in the text export format.
///
/// Layout: optional `#`-prefixed provenance lines, then a header line
/// `mode=<m> n=<rows> c=<classes> step=<t>`, then (class mode only) a line
/// `alphas=<a0>,...`, then one comma-separated probability row per line.
/// Values carry 17 significant digits.
pub fn write_labels<W: Write>(
    mut w: W,
    bank_mode: &str,
    step: usize,
    alphas: Option<&[f64]>,
    labels: &SoftLabelMatrix,
    provenance: &[String],
) -> Result<()> {
    for line in provenance {
        writeln!(w, "# {line}")?;
    }
    writeln!(
        w,
        "mode={bank_mode} n={} c={} step={step}",
        labels.n(),
        labels.c()
    )?;
    if let Some(a) = alphas {
        let joined: Vec<String> = a.iter().map(|&v| format_f64(v)).collect();
        writeln!(w, "alphas={}", joined.join(","))?;
    }
    let mut line = String::new();
    for i in 0..labels.n() {
        line.clear();
        for (j, &v) in labels.row(i).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            let _ = write!(line, "{}", format_f64(v));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Exports a bank's full realized state to a file.
///
/// Class mode writes the alphas plus one realized row per class; instance
/// mode writes one realized row per instance (`targets` is ignored there).
pub fn export_bank(
    path: &Path,
    bank: &LabelBank,
    targets: &[usize],
    step: usize,
    provenance: &[String],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    match bank {
        LabelBank::Class(b) => {
            let per_class: Vec<usize> = (0..b.alphas.len()).collect();
            let rows = realize_class(b, &per_class)?;
            write_labels(&mut w, "class", step, Some(&b.alphas), &rows, provenance)
        }
        LabelBank::Instance(b) => {
            let ids: Vec<usize> = (0..b.z.rows()).collect();
            let rows = realize_instance(b, &ids)?;
            let _ = targets;
            write_labels(&mut w, "instance", step, None, &rows, provenance)
        }
    }
}

/// Writes a bare probability matrix (e.g. fold-averaged labels) in the same
/// format, under mode `static`.
pub fn export_matrix(path: &Path, labels: &SoftLabelMatrix, step: usize, provenance: &[String]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_labels(std::io::BufWriter::new(file), "static", step, None, labels, provenance)
}

fn parse_kv(line: &str, path: &Path) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(path, 0, format!("bad header token {tok:?}")))
        })
        .collect()
}

/// Reads a label export file written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<LabelFile> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let mut header = None;
    for line in lines.by_ref() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        header = Some(line);
        break;
    }
    let header = header.ok_or_else(|| Error::format(path, 0, "missing header line"))?;
    let mut mode = None;
    let (mut n, mut c, mut step) = (None, None, 0usize);
    for (k, v) in parse_kv(&header, path)? {
        match k.as_str() {
            "mode" => mode = Some(v),
            "n" => n = Some(v.parse::<usize>().map_err(|e| Error::format(path, 0, format!("bad n: {e}")))?),
            "c" => c = Some(v.parse::<usize>().map_err(|e| Error::format(path, 0, format!("bad c: {e}")))?),
            "step" => step = v.parse::<usize>().map_err(|e| Error::format(path, 0, format!("bad step: {e}")))?,
            other => return Err(Error::format(path, 0, format!("unknown header key {other:?}"))),
        }
    }
    let mode = mode.ok_or_else(|| Error::format(path, 0, "header missing mode"))?;
    let n = n.ok_or_else(|| Error::format(path, 0, "header missing n"))?;
    let c = c.ok_or_else(|| Error::format(path, 0, "header missing c"))?;

    let mut alphas = None;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("alphas=") {
            let parsed: std::result::Result<Vec<f64>, _> = rest.split(',').map(str::parse).collect();
            alphas = Some(parsed.map_err(|e| Error::format(path, 0, format!("bad alphas: {e}")))?);
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        let row = parsed.map_err(|e| Error::format(path, 0, format!("bad row: {e}")))?;
        if row.len() != c {
            return Err(Error::format(
                path,
                0,
                format!("row has {} entries, expected {c}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::format(
            path,
            0,
            format!("expected {n} rows, found {}", rows.len()),
        ));
    }
    Ok(LabelFile {
        mode,
        step,
        alphas,
        labels: SoftLabelMatrix::from_rows(&rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;

    #[test]
    fn realize_class_zero_alpha_is_one_hot() {
        let bank = init_class(5, 1.0, 0.1).unwrap();
        assert!(bank.alphas.iter().all(|&a| a == 0.0));
        let rows = realize_class(&bank, &[2]).unwrap();
        assert_eq!(rows.row(0), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn realize_class_formula() {
        let bank = ClassAlphas {
            alphas: vec![0.2; 5],
            lr: 1.0,
        };
        let rows = realize_class(&bank, &[0]).unwrap();
        let expect = [0.8, 0.05, 0.05, 0.05, 0.05];
        for (a, b) in rows.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn realize_class_alpha_one_boundary() {
        let bank = ClassAlphas {
            alphas: vec![1.0; 3],
            lr: 1.0,
        };
        let rows = realize_class(&bank, &[1]).unwrap();
        assert_eq!(rows.row(0), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn realize_class_target_out_of_range() {
        let bank = init_class(3, 0.9, 0.1).unwrap();
        assert!(matches!(
            realize_class(&bank, &[3]),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn realize_instance_uniform_when_logits_equal() {
        let bank = InstanceLogits {
            z: Tensor::new(vec![1, 4], vec![2.5; 4]).unwrap(),
            lr: 1.0,
        };
        let rows = realize_instance(&bank, &[0]).unwrap();
        for &v in rows.row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn init_instance_puts_requested_target_mass() {
        let bank = init_instance(2, 3, &[0, 2], 0.7, 1.0).unwrap();
        let rows = realize_instance(&bank, &[0, 1]).unwrap();
        let expect0 = [0.7, 0.15, 0.15];
        for (a, b) in rows.row(0).iter().zip(&expect0) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((rows.row(1)[2] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn init_instance_c4_half_target() {
        let bank = init_instance(1, 4, &[0], 0.5, 1.0).unwrap();
        let rows = realize_instance(&bank, &[0]).unwrap();
        let expect = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in rows.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn init_instance_rejects_uniform_target() {
        // 0.5 == 1/c at c=2: degenerate.
        assert!(matches!(
            init_instance(1, 2, &[0], 0.5, 1.0),
            Err(Error::Argument { .. })
        ));
        assert!(matches!(
            init_instance(1, 3, &[0], 1.0, 1.0),
            Err(Error::Argument { .. })
        ));
    }

    #[test]
    fn init_class_grid_value() {
        let bank = init_class(10, 0.9, 0.1).unwrap();
        assert!((bank.alphas[0] - 0.1).abs() < 1e-15);
        let rows = realize_class(&bank, &[0]).unwrap();
        assert!((rows.row(0)[0] - 0.9).abs() < 1e-15);
        for &v in &rows.row(0)[1..] {
            assert!((v - 0.1 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn init_class_rejects_out_of_range() {
        assert!(init_class(10, 0.05, 0.1).is_err()); // below 1/c
        assert!(init_class(10, 0.1, 0.1).is_err()); // exactly 1/c
        assert!(init_class(10, 1.2, 0.1).is_err());
        assert!(init_class(10, 1.0, 0.1).is_ok()); // one-hot start
    }

    #[test]
    fn realize_instance_shift_invariant() {
        let mut rng = Rng::seed_from(5);
        let z = rng.normal_tensor(&[1, 6], 0.0, 2.0);
        let shifted = Tensor::new(
            vec![1, 6],
            z.data().iter().map(|v| v + 13.5).collect(),
        )
        .unwrap();
        let a = realize_instance(&InstanceLogits { z, lr: 1.0 }, &[0]).unwrap();
        let b = realize_instance(&InstanceLogits { z: shifted, lr: 1.0 }, &[0]).unwrap();
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_update_zero_grad_is_identity() {
        let mut bank = LabelBank::class(4, 0.7, 0.5).unwrap();
        let before = bank.clone();
        bank.apply_meta_update(&MetaGrads::Class(vec![0.0; 4])).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn apply_update_clamps_at_zero() {
        let mut bank = LabelBank::Class(ClassAlphas {
            alphas: vec![0.05],
            lr: 1.0,
        });
        // c=1 banks are rejected by init; construct directly for the arithmetic.
        bank.apply_meta_update(&MetaGrads::Class(vec![0.2])).unwrap();
        match &bank {
            LabelBank::Class(b) => assert_eq!(b.alphas[0], 0.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn apply_update_arithmetic() {
        let mut bank = LabelBank::Class(ClassAlphas {
            alphas: vec![0.3],
            lr: 0.1,
        });
        bank.apply_meta_update(&MetaGrads::Class(vec![-0.5])).unwrap();
        match &bank {
            LabelBank::Class(b) => assert!((b.alphas[0] - 0.35).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn chain_constant_row_gives_zero_grad_both_modes() {
        let m = Tensor::new(vec![1, 4], vec![0.7; 4]).unwrap();

        let class = LabelBank::class(4, 0.8, 1.0).unwrap();
        match class.chain_to_params(&m, &[0], &[1]).unwrap() {
            MetaGrads::Class(g) => {
                for v in g {
                    assert!(v.abs() < 1e-12);
                }
            }
            _ => unreachable!(),
        }

        let inst = LabelBank::instance(2, 4, &[1, 2], 0.8, 1.0).unwrap();
        match inst.chain_to_params(&m, &[1], &[1]).unwrap() {
            MetaGrads::Instance { rows, .. } => {
                for &v in rows.data() {
                    assert!(v.abs() < 1e-12);
                }
            }
            _ => unreachable!(),
        }
    }

    /// Finite differences of the composed map params -> rows -> <M, rows>.
    fn fd_class_grad(bank: &ClassAlphas, targets: &[usize], m: &Tensor, eps: f64) -> Vec<f64> {
        let mut grad = vec![0.0; bank.alphas.len()];
        for k in 0..bank.alphas.len() {
            let mut plus = bank.clone();
            plus.alphas[k] += eps;
            let mut minus = bank.clone();
            minus.alphas[k] -= eps;
            let f = |b: &ClassAlphas| -> f64 {
                let rows = realize_class(b, targets).unwrap();
                rows.tensor()
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(&p, &mm)| p * mm)
                    .sum()
            };
            grad[k] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grad
    }

    #[test]
    fn chain_class_matches_finite_differences() {
        let mut rng = Rng::seed_from(11);
        let targets = [0usize, 2, 2, 1];
        let bank = ClassAlphas {
            alphas: vec![0.3, 0.45, 0.2],
            lr: 1.0,
        };
        let m = rng.normal_tensor(&[4, 3], 0.0, 1.0);
        let analytic = match LabelBank::Class(bank.clone())
            .chain_to_params(&m, &[0, 1, 2, 3], &targets)
            .unwrap()
        {
            MetaGrads::Class(g) => g,
            _ => unreachable!(),
        };
        let numeric = fd_class_grad(&bank, &targets, &m, 1e-6);
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-8, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn chain_instance_matches_finite_differences() {
        let mut rng = Rng::seed_from(13);
        let z = rng.normal_tensor(&[3, 4], 0.0, 1.0);
        let bank = InstanceLogits { z: z.clone(), lr: 1.0 };
        let m = rng.normal_tensor(&[2, 4], 0.0, 1.0);
        let ids = [2usize, 0];
        let analytic = match LabelBank::Instance(bank.clone())
            .chain_to_params(&m, &ids, &[0, 0])
            .unwrap()
        {
            MetaGrads::Instance { rows, .. } => rows,
            _ => unreachable!(),
        };
        let eps = 1e-6;
        for (row_idx, &id) in ids.iter().enumerate() {
            for j in 0..4 {
                let mut zp = z.clone();
                zp.row_mut(id)[j] += eps;
                let mut zm = z.clone();
                zm.row_mut(id)[j] -= eps;
                let f = |zz: &Tensor| -> f64 {
                    softmax(zz.row(id))
                        .iter()
                        .zip(m.row(row_idx))
                        .map(|(&p, &mm)| p * mm)
                        .sum()
                };
                let fd = (f(&zp) - f(&zm)) / (2.0 * eps);
                let got = analytic.row(row_idx)[j];
                assert!((got - fd).abs() < 1e-8, "z[{id}][{j}]: {got} vs {fd}");
            }
        }
    }

    #[test]
    fn chain_accumulates_same_class_instances_identically() {
        // Two instances of class 1 with identical meta rows must contribute
        // identical alpha-gradients; total is their sum.
        let m_row = vec![0.4, -0.2, 0.9];
        let m2 = Tensor::from_rows(&[m_row.clone(), m_row.clone()]).unwrap();
        let m1 = Tensor::from_rows(&[m_row]).unwrap();
        let bank = LabelBank::class(3, 0.8, 1.0).unwrap();
        let g2 = match bank.chain_to_params(&m2, &[0, 1], &[1, 1]).unwrap() {
            MetaGrads::Class(g) => g,
            _ => unreachable!(),
        };
        let g1 = match bank.chain_to_params(&m1, &[0], &[1]).unwrap() {
            MetaGrads::Class(g) => g,
            _ => unreachable!(),
        };
        for (two, one) in g2.iter().zip(&g1) {
            assert!((two - 2.0 * one).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_stay_distributions_under_random_updates() {
        let mut rng = Rng::seed_from(17);
        let targets: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
        let mut class = LabelBank::class(4, 0.7, 0.8).unwrap();
        let mut inst = LabelBank::instance(6, 4, &targets, 0.7, 5.0).unwrap();
        let ids: Vec<usize> = (0..6).collect();
        for _ in 0..200 {
            let m = rng.normal_tensor(&[6, 4], 0.0, 2.0);
            let gc = class.chain_to_params(&m, &ids, &targets).unwrap();
            class.apply_meta_update(&gc).unwrap();
            let gi = inst.chain_to_params(&m, &ids, &targets).unwrap();
            inst.apply_meta_update(&gi).unwrap();
        }
        // realize() revalidates every row through SoftLabelMatrix::new.
        let rc = class.realize(&ids, &targets).unwrap();
        let ri = inst.realize(&ids, &targets).unwrap();
        for i in 0..6 {
            let sc: f64 = rc.row(i).iter().sum();
            let si: f64 = ri.row(i).iter().sum();
            assert!((sc - 1.0).abs() < 1e-9);
            assert!((si - 1.0).abs() < 1e-9);
        }
        if let LabelBank::Class(b) = &class {
            assert!(b.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn class_realization_mass_balances_exactly() {
        let bank = ClassAlphas {
            alphas: vec![0.37, 0.0, 1.0, 0.62],
            lr: 1.0,
        };
        for y in 0..4 {
            let rows = realize_class(&bank, &[y]).unwrap();
            let r = rows.row(0);
            let off = r.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| v).next().unwrap();
            assert_eq!(r[y] + 3.0 * off, 1.0);
        }
    }

    #[test]
    fn export_and_read_round_trip_instance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        let targets = [0usize, 1, 2];
        let bank = LabelBank::instance(3, 3, &targets, 0.7, 25.0).unwrap();
        export_bank(&path, &bank, &targets, 42, &["config=abc seed=1".into()]).unwrap();
        let parsed = read_labels(&path).unwrap();
        assert_eq!(parsed.mode, "instance");
        assert_eq!(parsed.step, 42);
        let want = bank.realize(&[0, 1, 2], &targets).unwrap();
        // 17 significant digits round-trip f64 exactly.
        assert_eq!(parsed.labels.tensor().data(), want.tensor().data());
    }

    #[test]
    fn export_and_read_round_trip_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        let bank = LabelBank::class(4, 0.83, 0.3).unwrap();
        export_bank(&path, &bank, &[], 7, &[]).unwrap();
        let parsed = read_labels(&path).unwrap();
        assert_eq!(parsed.mode, "class");
        assert_eq!(parsed.labels.n(), 4); // one realized row per class
        let alphas = parsed.alphas.unwrap();
        for a in alphas {
            assert_eq!(a, 1.0 - 0.83);
        }
    }

    mod props {
        use super::*;
        use crate::ndcore::Rng as SeededRng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn chain_is_linear_in_meta(seed in 0u64..500, scale in 0.1f64..4.0) {
                let mut rng = SeededRng::seed_from(seed);
                let targets: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
                let ids: Vec<usize> = (0..5).collect();
                let m1 = rng.normal_tensor(&[5, 3], 0.0, 1.0);
                let m2 = rng.normal_tensor(&[5, 3], 0.0, 1.0);
                let combo = m1.scale(0.5).add(&m2.scale(scale)).unwrap();
                for bank in [
                    LabelBank::class(3, 0.8, 1.0).unwrap(),
                    LabelBank::instance(5, 3, &targets, 0.8, 1.0).unwrap(),
                ] {
                    let flat = |g: MetaGrads| -> Vec<f64> {
                        match g {
                            MetaGrads::Class(v) => v,
                            MetaGrads::Instance { rows, .. } => rows.into_data(),
                        }
                    };
                    let g1 = flat(bank.chain_to_params(&m1, &ids, &targets).unwrap());
                    let g2 = flat(bank.chain_to_params(&m2, &ids, &targets).unwrap());
                    let gc = flat(bank.chain_to_params(&combo, &ids, &targets).unwrap());
                    for i in 0..g1.len() {
                        let expect = 0.5 * g1[i] + scale * g2[i];
                        prop_assert!((gc[i] - expect).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
