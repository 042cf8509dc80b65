//! Expression matrices on disk and the preprocessing protocol: quality
//! control, library-size normalization, highly-variable-gene selection and
//! the train/validation/test gene split.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Spatial transcriptomics: observations are spots.
    St,
    /// Single-cell RNA-seq: observations are cells.
    Sc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => Format::Tsv,
            _ => Format::Csv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            Format::Csv => b',',
            Format::Tsv => b'\t',
        }
    }
}

/// Genes × observations matrix of nonnegative expression values.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix<T> {
    gene_ids: Vec<String>,
    obs_ids: Vec<String>,
    values: Matrix<T>,
    modality: Modality,
}

impl<T: Scalar> ExpressionMatrix<T> {
    /// Validates ids and values. Values must be finite and nonnegative.
    pub fn new(
        gene_ids: Vec<String>,
        obs_ids: Vec<String>,
        values: Matrix<T>,
        modality: Modality,
    ) -> Result<Self> {
        if values.rows() != gene_ids.len() || values.cols() != obs_ids.len() {
            return Err(Error::shape(format!(
                "{} gene ids and {} observation ids for a {}x{} matrix",
                gene_ids.len(),
                obs_ids.len(),
                values.rows(),
                values.cols()
            )));
        }
        check_unique("gene", &gene_ids)?;
        check_unique("observation", &obs_ids)?;
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!(
                "non-finite value for gene {:?}",
                gene_ids[pos / values.cols().max(1)]
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|&v| v < T::zero()) {
            return Err(Error::Malformed(format!(
                "negative value for gene {:?}",
                gene_ids[pos / values.cols().max(1)]
            )));
        }
        Ok(ExpressionMatrix {
            gene_ids,
            obs_ids,
            values,
            modality,
        })
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_ids.len()
    }

    pub fn gene_index(&self, id: &str) -> Option<usize> {
        self.gene_ids.iter().position(|g| g == id)
    }

    /// Expression profile of gene `i` across observations.
    pub fn profile(&self, i: usize) -> &[T] {
        self.values.row(i)
    }

    /// Restricts to the given gene indices, in the given order.
    pub fn select_genes(&self, idx: &[usize]) -> Self {
        ExpressionMatrix {
            gene_ids: idx.iter().map(|&i| self.gene_ids[i].clone()).collect(),
            obs_ids: self.obs_ids.clone(),
            values: self.values.select_rows(idx),
            modality: self.modality,
        }
    }

    /// Restricts to the named genes, in the given order.
    pub fn select_gene_ids(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .gene_ids
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let idx = ids
            .iter()
            .map(|g| {
                index
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownGene(g.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_genes(&idx))
    }

    fn select_obs(&self, keep: &[usize]) -> Self {
        let values = Matrix::from_fn(self.n_genes(), keep.len(), |r, c| self.values[(r, keep[c])]);
        ExpressionMatrix {
            gene_ids: self.gene_ids.clone(),
            obs_ids: keep.iter().map(|&j| self.obs_ids[j].clone()).collect(),
            values,
            modality: self.modality,
        }
    }

    /// Writes the matrix in the canonical layout: header `gene_id,<obs...>`.
    pub fn write(&self, path: &Path, format: Format) -> Result<()> {
        let sep = format.delimiter() as char;
        let mut out = String::new();
        out.push_str("gene_id");
        for o in &self.obs_ids {
            out.push(sep);
            out.push_str(o);
        }
        out.push('\n');
        for (i, g) in self.gene_ids.iter().enumerate() {
            out.push_str(g);
            for v in self.values.row(i) {
                out.push(sep);
                let _ = write!(out, "{}", v.as_f64());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_unique(kind: &'static str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

/// Reads a delimited matrix: first row observation ids, first column gene ids.
pub fn load_matrix<T: Scalar>(
    path: &Path,
    format: Format,
    modality: Modality,
) -> Result<ExpressionMatrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?,
        None => return Err(Error::Malformed(format!("{}: empty file", path.display()))),
    };
    let expected = header.len();
    if expected < 2 {
        return Err(Error::Malformed(format!(
            "{}: header has no observation columns",
            path.display()
        )));
    }
    let obs_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();

    let mut gene_ids = Vec::new();
    let mut data = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() != expected {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                row,
                found: rec.len(),
                expected,
            });
        }
        gene_ids.push(rec[0].to_owned());
        for (col, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                col: col + 1,
                value: field.to_owned(),
            })?;
            data.push(T::of(v));
        }
    }
    let values = Matrix::from_vec(gene_ids.len(), obs_ids.len(), data);
    ExpressionMatrix::new(gene_ids, obs_ids, values, modality)
}

/// Drops observations with too few detected (nonzero) genes. The threshold
/// applied depends on the matrix modality.
pub fn qc_filter<T: Scalar>(
    m: &ExpressionMatrix<T>,
    min_genes_sc: usize,
    min_genes_st: usize,
) -> Result<ExpressionMatrix<T>> {
    let threshold = match m.modality {
        Modality::Sc => min_genes_sc,
        Modality::St => min_genes_st,
    };
    let keep: Vec<usize> = (0..m.n_obs())
        .filter(|&j| {
            let detected = (0..m.n_genes())
                .filter(|&i| m.values[(i, j)] != T::zero())
                .count();
            detected >= threshold
        })
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyResult);
    }
    Ok(m.select_obs(&keep))
}

pub const DEFAULT_MIN_GENES_SC: usize = 500;
pub const DEFAULT_MIN_GENES_ST: usize = 1;

/// Median with the even-count convention of averaging the two middle values.
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / T::of(2.0)
    })
}

/// Library-size normalization: `D = ln(N·C / total + 1)` per observation,
/// with `N` the median observation total.
pub fn normalize<T: Scalar>(m: &ExpressionMatrix<T>) -> Result<ExpressionMatrix<T>> {
    let totals: Vec<T> = (0..m.n_obs())
        .map(|j| (0..m.n_genes()).map(|i| m.values[(i, j)]).sum())
        .collect();
    if let Some(j) = totals.iter().position(|&t| t <= T::zero()) {
        return Err(Error::ZeroTotal {
            obs: m.obs_ids[j].clone(),
        });
    }
    let target = median(&totals).ok_or(Error::EmptyResult)?;
    normalize_with_target(m, &totals, target)
}

fn normalize_with_target<T: Scalar>(
    m: &ExpressionMatrix<T>,
    totals: &[T],
    target: T,
) -> Result<ExpressionMatrix<T>> {
    let values = Matrix::from_fn(m.n_genes(), m.n_obs(), |i, j| {
        (target * m.values[(i, j)] / totals[j]).ln_1p()
    });
    Ok(ExpressionMatrix {
        values,
        ..m.clone()
    })
}

/// Population variance (divides by the count).
pub fn population_variance<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let n = T::of_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
}

/// Keeps the `⌈fraction · n_genes⌉` genes of largest variance, preserving
/// input order. Ties at the cut go to the smaller original index.
pub fn select_hvg<T: Scalar>(
    m: &ExpressionMatrix<T>,
    top_fraction: f64,
) -> Result<ExpressionMatrix<T>> {
    let keep = hvg_indices(m, top_fraction)?;
    Ok(m.select_genes(&keep))
}

pub fn hvg_indices<T: Scalar>(m: &ExpressionMatrix<T>, top_fraction: f64) -> Result<Vec<usize>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "HVG fraction {top_fraction} outside (0, 1]"
        )));
    }
    let n = m.n_genes();
    let n_keep = ((top_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_keep = n_keep.min(n);
    let variances: Vec<T> = (0..n).map(|i| population_variance(m.profile(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .expect("finite variance")
            .then(a.cmp(&b))
    });
    let mut keep = order[..n_keep].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Disjoint train/validation/test gene index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

pub const MIN_SPLIT_GENES: usize = 10;

/// Seeded 70/20/10 split of `shared` gene indices. Each returned set is
/// sorted ascending.
pub fn split_genes(shared: &[usize], seed: u64) -> Result<SplitAssignment> {
    let n = shared.len();
    if n < MIN_SPLIT_GENES {
        return Err(Error::invalid(format!(
            "need at least {MIN_SPLIT_GENES} shared genes to split, got {n}"
        )));
    }
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let mut perm = shared.to_vec();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| {
        let mut v = perm[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitAssignment {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// Options for the full preprocessing pipeline applied to an ST/SC pair.
#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub min_genes_sc: usize,
    pub min_genes_st: usize,
    pub hvg_fraction: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            min_genes_sc: DEFAULT_MIN_GENES_SC,
            min_genes_st: DEFAULT_MIN_GENES_ST,
            hvg_fraction: 0.25,
        }
    }
}

/// QC, normalization (median computed after QC) and HVG selection on each
/// modality, then restriction to the shared genes in ST order.
pub fn preprocess_pair<T: Scalar>(
    st: &ExpressionMatrix<T>,
    sc: &ExpressionMatrix<T>,
    opts: &PreprocessOptions,
) -> Result<(ExpressionMatrix<T>, ExpressionMatrix<T>)> {
    let prep = |m: &ExpressionMatrix<T>| -> Result<ExpressionMatrix<T>> {
        let m = qc_filter(m, opts.min_genes_sc, opts.min_genes_st)?;
        let m = normalize(&m)?;
        select_hvg(&m, opts.hvg_fraction)
    };
    let st = prep(st)?;
    let sc = prep(sc)?;
    align_genes(&st, &sc)
}

/// Restricts both matrices to their shared gene ids, ordered as in `st`.
pub fn align_genes<T: Scalar>(
    st: &ExpressionMatrix<T>,
    sc: &ExpressionMatrix<T>,
) -> Result<(ExpressionMatrix<T>, ExpressionMatrix<T>)> {
    let sc_ids: HashSet<&str> = sc.gene_ids.iter().map(String::as_str).collect();
    let shared: Vec<String> = st
        .gene_ids
        .iter()
        .filter(|g| sc_ids.contains(g.as_str()))
        .cloned()
        .collect();
    if shared.is_empty() {
        return Err(Error::invalid("ST and SC matrices share no genes"));
    }
    Ok((st.select_gene_ids(&shared)?, sc.select_gene_ids(&shared)?))
}
