//! Embedding export and a two-component PCA for inspecting class separation.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::PromptedClassifier;
use crate::tensor::Tensor;

/// Principal axes of a point cloud, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions.
    pub axes: [Vec<f64>; 2],
    /// Variance along each axis.
    pub variances: [f64; 2],
}

impl Pca {
    /// Exact eigendecomposition of the `d x d` sample covariance.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Insufficient(format!("PCA needs two points, got {n}")));
        }
        let d = rows[0].len();
        if d < 2 {
            return Err(Error::Parameter(format!("PCA to 2-D needs dimension >= 2, got {d}")));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::shape("pca", &[r.len()], &[d]));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let axis = |k: usize| -> Vec<f64> {
            let col = eig.eigenvectors.column(order[k]);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| s * v).collect()
        };
        Ok(Self {
            mean,
            axes: [axis(0), axis(1)],
            variances: [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        })
    }

    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let c = |axis: &[f64]| {
            row.iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((v, m), a)| (v - m) * a)
                .sum()
        };
        [c(&self.axes[0]), c(&self.axes[1])]
    }

    /// Maps 2-D coordinates back into the original space.
    pub fn reconstruct(&self, coords: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|j| self.mean[j] + coords[0] * self.axes[0][j] + coords[1] * self.axes[1][j])
            .collect()
    }
}

/// Ratio of between-class to within-class scatter (traces of the scatter
/// matrices). Higher means tighter, better separated classes.
pub fn separability(rows: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::Contract(format!(
            "{} rows against {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let d = rows[0].len();
    let centroid = |members: &[&Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for r in members {
            for (c, v) in c.iter_mut().zip(r.iter()) {
                *c += v / members.len() as f64;
            }
        }
        c
    };
    let all: Vec<&Vec<f64>> = rows.iter().collect();
    let grand = centroid(&all);
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::UndefinedMetric("separability needs two classes".into()));
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (mut between, mut within) = (0.0, 0.0);
    for c in classes {
        let members: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let mu = centroid(&members);
        between += members.len() as f64 * dist2(&mu, &grand);
        within += members.iter().map(|r| dist2(r, &mu)).sum::<f64>();
    }
    if within <= 0.0 {
        return Err(Error::UndefinedMetric("no within-class scatter".into()));
    }
    Ok(between / within)
}

/// Rows of a tensor as `f64` vectors.
pub fn rows_f64(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

/// Writes `sample_id,class_id,e0..e{d-1}` and, with coordinates,
/// `pc1,pc2`; one row per sample after a header.
pub fn write_embeddings_csv<W: Write>(
    out: W,
    ids: &[usize],
    classes: &[u32],
    embeddings: &Tensor<f32>,
    coords: Option<&[[f64; 2]]>,
) -> Result<()> {
    let n = embeddings.rows();
    if ids.len() != n || classes.len() != n || coords.is_some_and(|c| c.len() != n) {
        return Err(Error::Contract("embedding export columns disagree in length".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string(), "class_id".to_string()];
    header.extend((0..embeddings.cols()).map(|j| format!("e{j}")));
    if coords.is_some() {
        header.extend(["pc1".to_string(), "pc2".to_string()]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..n {
        let mut rec = vec![ids[i].to_string(), classes[i].to_string()];
        rec.extend(embeddings.row(i).iter().map(|v| v.to_string()));
        if let Some(c) = coords {
            rec.extend(c[i].iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// What an export produced.
#[derive(Clone, Debug)]
pub struct EmbeddingExport {
    pub embeddings: Tensor<f32>,
    pub coords: Option<Vec<[f64; 2]>>,
    pub separability: Option<f64>,
}

/// Prompted image embeddings of the samples at `indices` in `ds` (the
/// indices become sample ids), written as CSV with optional PCA coordinates.
pub fn export_embeddings<W: Write>(
    clf: &PromptedClassifier<'_>,
    ds: &Dataset,
    indices: &[usize],
    pca: bool,
    out: W,
) -> Result<EmbeddingExport> {
    if indices.is_empty() {
        return Err(Error::Contract("nothing to export".into()));
    }
    let samples = indices
        .iter()
        .map(|&i| {
            ds.samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u32> = samples.iter().map(|s| s.class).collect();
    let embeddings = clf.image_embeddings(&images)?;
    let rows = rows_f64(&embeddings);
    let coords = if pca && rows.len() >= 2 {
        let p = Pca::fit(&rows)?;
        Some(rows.iter().map(|r| p.project(r)).collect::<Vec<_>>())
    } else {
        None
    };
    write_embeddings_csv(out, indices, &labels, &embeddings, coords.as_deref())?;
    Ok(EmbeddingExport {
        separability: separability(&rows, &labels).ok(),
        embeddings,
        coords,
    })
}
