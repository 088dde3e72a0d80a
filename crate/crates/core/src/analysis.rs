//! Comparisons between activation-frequency matrices: pairwise similarity,
//! multilingual shared-expert maps and before/after frequency diffs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::FrequencyMatrix;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Additive smoothing applied to normalized rows before KL.
pub const KL_EPSILON: f64 = 1e-10;

/// Default high-frequency threshold.
pub const DEFAULT_TAU: f64 = 0.05;

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Frobenius distance `sqrt(Σ (a − b)²)`.
pub fn euclidean<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    same_shape(a, b)?;
    let ss: T = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(ss.sqrt())
}

/// Row normalized to a probability vector, smoothed by `eps` and renormalized.
/// An all-zero row becomes uniform.
pub fn smoothed_distribution<T: Scalar>(row: &[T], eps: T) -> Vec<T> {
    let n = T::of(row.len() as f64);
    let total: T = row.iter().copied().sum();
    let p: Vec<T> =
        if total > T::zero() { row.iter().map(|&v| v / total).collect() } else { vec![T::one() / n; row.len()] };
    let smoothed_total: T = p.iter().map(|&v| v + eps).sum();
    p.into_iter().map(|v| (v + eps) / smoothed_total).collect()
}

/// `KL(P‖Q) = Σ p log(p/q)`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter().zip(q).map(|(&pi, &qi)| if pi > T::zero() { pi * (pi / qi).ln() } else { T::zero() }).sum()
}

/// Sum over rows of `KL(A_ℓ ‖ B_ℓ)` after smoothing.
pub fn kl_rowwise<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, eps: T) -> Result<T> {
    same_shape(a, b)?;
    Ok((0..a.rows())
        .map(|r| kl_divergence(&smoothed_distribution(a.row(r), eps), &smoothed_distribution(b.row(r), eps)))
        .sum())
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let n = T::of(a.len() as f64);
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return None;
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Some(r.max(-T::one()).min(T::one()))
}

/// Mean row-wise Pearson correlation and the number of degenerate rows,
/// each of which contributes zero to the mean.
pub fn pearson_rowwise<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<(T, usize)> {
    same_shape(a, b)?;
    let mut total = T::zero();
    let mut degenerate = 0;
    for r in 0..a.rows() {
        match pearson(a.row(r), b.row(r)) {
            Some(v) => total += v,
            None => degenerate += 1,
        }
    }
    Ok((total / T::of(a.rows() as f64), degenerate))
}

fn check_dims(a: &FrequencyMatrix, b: &FrequencyMatrix) -> Result<()> {
    if (a.n_layers(), a.n_experts()) != (b.n_layers(), b.n_experts()) {
        return Err(Error::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.n_layers(),
            a.n_experts(),
            b.n_layers(),
            b.n_experts()
        )));
    }
    Ok(())
}

pub fn euclidean_distance(a: &FrequencyMatrix, b: &FrequencyMatrix) -> Result<f64> {
    check_dims(a, b)?;
    euclidean(&a.frequencies(), &b.frequencies())
}

/// `Σ_ℓ KL(A_ℓ ‖ B_ℓ)`; directional.
pub fn kl_divergence_rowwise(a: &FrequencyMatrix, b: &FrequencyMatrix) -> Result<f64> {
    check_dims(a, b)?;
    kl_rowwise(&a.frequencies(), &b.frequencies(), KL_EPSILON)
}

pub fn pearson_mean_rowwise(a: &FrequencyMatrix, b: &FrequencyMatrix) -> Result<f64> {
    check_dims(a, b)?;
    pearson_rowwise(&a.frequencies(), &b.frequencies()).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub language_tags: Vec<String>,
    pub euclidean: Vec<Vec<f64>>,
    /// Entry `[i][j]` is `KL(language i ‖ language j)`.
    pub kl: Vec<Vec<f64>>,
    pub kl_direction: String,
    pub pearson: Vec<Vec<f64>>,
    /// Rows that were constant in either matrix and contributed zero to the Pearson mean.
    pub pearson_degenerate_rows: Vec<Vec<usize>>,
}

impl SimilarityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        let l = r.language_tags.len();
        let ok = |g: &Vec<Vec<f64>>| g.len() == l && g.iter().all(|row| row.len() == l);
        if !(ok(&r.euclidean) && ok(&r.kl) && ok(&r.pearson)) {
            return Err(Error::DimMismatch(format!("similarity grids must be {l}x{l}")));
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Pairwise similarity grids over languages, in input order.
pub fn similarity_report(matrices: &[FrequencyMatrix]) -> Result<SimilarityReport> {
    if matrices.len() < 2 {
        return Err(Error::Empty("similarity needs at least two matrices".into()));
    }
    for m in &matrices[1..] {
        check_dims(&matrices[0], m)?;
    }
    let freqs: Vec<Matrix<f64>> = matrices.iter().map(FrequencyMatrix::frequencies).collect();
    let l = freqs.len();
    let mut euc = vec![vec![0.0; l]; l];
    let mut kl = vec![vec![0.0; l]; l];
    let mut pea = vec![vec![0.0; l]; l];
    let mut degenerate = vec![vec![0usize; l]; l];
    for i in 0..l {
        for j in 0..l {
            kl[i][j] = kl_rowwise(&freqs[i], &freqs[j], KL_EPSILON)?;
            if j < i {
                continue;
            }
            if j > i {
                let d = euclidean(&freqs[i], &freqs[j])?;
                euc[i][j] = d;
                euc[j][i] = d;
            }
            let (p, deg) = pearson_rowwise(&freqs[i], &freqs[j])?;
            pea[i][j] = p;
            pea[j][i] = p;
            degenerate[i][j] = deg;
            degenerate[j][i] = deg;
        }
    }
    Ok(SimilarityReport {
        language_tags: matrices.iter().map(|m| m.language_tag().to_string()).collect(),
        euclidean: euc,
        kl,
        kl_direction: "KL(row || column)".into(),
        pearson: pea,
        pearson_degenerate_rows: degenerate,
    })
}

/// Number of languages in which each expert is high-frequency (`freq ≥ τ`).
#[derive(Debug, Clone, PartialEq)]
pub struct SharedExpertMap {
    pub n_layers: usize,
    pub n_experts: usize,
    pub counts: Vec<usize>,
    pub tau: f64,
    pub n_languages: usize,
}

impl SharedExpertMap {
    pub fn count(&self, layer: usize, expert: usize) -> usize {
        self.counts[layer * self.n_experts + expert]
    }

    /// Experts that are high-frequency in every language.
    pub fn multilingual_shared(&self) -> Vec<(usize, usize)> {
        (0..self.counts.len())
            .filter(|&i| self.counts[i] == self.n_languages)
            .map(|i| (i / self.n_experts, i % self.n_experts))
            .collect()
    }

    pub fn grid(&self) -> Matrix<f64> {
        Matrix::from_vec(self.n_layers, self.n_experts, self.counts.iter().map(|&c| c as f64).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "MOEFREQ v1 layers={} experts={} kind=shared τ={} langs={}\n",
            self.n_layers, self.n_experts, self.tau, self.n_languages
        );
        for row in self.counts.chunks(self.n_experts) {
            out.push_str(&row.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

pub fn shared_expert_map(matrices: &[FrequencyMatrix], tau: f64) -> Result<SharedExpertMap> {
    let first = matrices.first().ok_or_else(|| Error::Empty("no frequency matrices".into()))?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::OutOfRange(format!("tau {tau} must be a non-negative finite value")));
    }
    for m in &matrices[1..] {
        check_dims(first, m)?;
    }
    let (n_layers, n_experts) = (first.n_layers(), first.n_experts());
    let mut counts = vec![0usize; n_layers * n_experts];
    for m in matrices {
        for (i, c) in counts.iter_mut().enumerate() {
            if m.frequency(i / n_experts, i % n_experts) >= tau {
                *c += 1;
            }
        }
    }
    Ok(SharedExpertMap { n_layers, n_experts, counts, tau, n_languages: matrices.len() })
}

/// Entrywise `tuned − base` frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMatrix {
    pub values: Matrix<f64>,
    pub language_tag: String,
    pub base_model: String,
    pub tuned_model: String,
}

impl DiffMatrix {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "MOEFREQ v1 layers={} experts={} kind=diff lang={} base={} tuned={}\n",
            self.values.rows(),
            self.values.cols(),
            self.language_tag,
            self.base_model,
            self.tuned_model
        );
        for r in 0..self.values.rows() {
            out.push_str(&self.values.row(r).iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

pub fn diff_matrix(base: &FrequencyMatrix, tuned: &FrequencyMatrix) -> Result<DiffMatrix> {
    check_dims(base, tuned)?;
    if base.language_tag() != tuned.language_tag() {
        return Err(Error::MetadataMismatch(format!(
            "language {} vs {}",
            base.language_tag(),
            tuned.language_tag()
        )));
    }
    if let (Some(a), Some(b)) = (base.partition_id(), tuned.partition_id()) {
        if a != b {
            return Err(Error::MetadataMismatch(format!("matrices use different expert splits ({a} vs {b})")));
        }
    }
    let (fb, ft) = (base.frequencies(), tuned.frequencies());
    let values = Matrix::from_fn(fb.rows(), fb.cols(), |r, c| ft.get(r, c) - fb.get(r, c));
    Ok(DiffMatrix {
        values,
        language_tag: base.language_tag().to_string(),
        base_model: base.model_id().to_string(),
        tuned_model: tuned.model_id().to_string(),
    })
}

/// Kind of a MOEFREQ grid file.
#[derive(Debug, Clone, PartialEq)]
pub enum GridKind {
    Frequency { total_tokens: u64 },
    Shared { tau: f64, n_languages: usize },
    Diff,
}

/// Any MOEFREQ grid file as real values; frequency files are converted to frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub kind: GridKind,
    pub header: String,
    pub values: Matrix<f64>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let header = text.lines().next().ok_or_else(|| Error::Parse("empty grid file".into()))?.to_string();
        if !header.contains(" kind=") {
            let m = FrequencyMatrix::from_text(text)?;
            return Ok(Self { kind: GridKind::Frequency { total_tokens: m.total_tokens() }, header, values: m.frequencies() });
        }
        let field = |key: &str| -> Result<&str> {
            header
                .split(' ')
                .find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| Error::Parse(format!("grid header lacks {key}=")))
        };
        if !header.starts_with("MOEFREQ v1 ") {
            return Err(Error::Parse(format!("not a MOEFREQ v1 header: {header:?}")));
        }
        let num = |key: &str| -> Result<usize> {
            field(key)?.parse().map_err(|_| Error::Parse(format!("bad {key} in grid header")))
        };
        let (rows, cols) = (num("layers")?, num("experts")?);
        let kind = match field("kind")? {
            "shared" => GridKind::Shared {
                tau: field("τ")?.parse().map_err(|_| Error::Parse("bad τ in grid header".into()))?,
                n_languages: num("langs")?,
            },
            "diff" => GridKind::Diff,
            other => return Err(Error::Parse(format!("unknown grid kind {other:?}"))),
        };
        let mut values = Vec::with_capacity(rows * cols);
        let mut n_rows = 0;
        for (i, line) in text.lines().skip(1).filter(|l| !l.is_empty()).enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| Error::Parse(format!("row {i}: bad value {c:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(Error::Parse(format!("row {i}: {} values, expected {cols}", row.len())));
            }
            values.extend(row);
            n_rows += 1;
        }
        if n_rows != rows {
            return Err(Error::Parse(format!("grid has {n_rows} rows, header declares {rows}")));
        }
        Ok(Self { kind, header, values: Matrix::from_vec(rows, cols, values) })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
