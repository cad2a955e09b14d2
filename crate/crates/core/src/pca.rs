//! Linear flow-subspace baseline: least-squares fit of an orthonormal basis
//! to centered, flattened flow fields, plus projection/reconstruction and a
//! comparison hook against the auto-encoder.
//!
//! The fit works through the Gram matrix (samples × samples) so the flow
//! dimension never enters the eigenproblem; eigenvectors come from a cyclic
//! Jacobi sweep, which is deterministic and exact enough at desk scale.

use crate::flow::FlowField;
use crate::model::{ModelError, ModelGraph, TensorRecord};
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("{0}")]
    Contract(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PcaError>;

/// Mean flow plus an orthonormal basis whose columns span the subspace.
#[derive(Clone, Debug)]
pub struct SubspaceModel {
    pub height: usize,
    pub width: usize,
    /// Flattened mean flow (dim = height·width·2).
    pub mean: Vec<f64>,
    /// Row-major (dim, l); column j is basis vector j.
    pub basis: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub latent_dim: usize,
}

// ── Jacobi eigendecomposition ────────────────────────────────────────

/// Eigenvalues (descending) and matching eigenvectors (columns of the
/// returned row-major n×n matrix) of a symmetric matrix.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(1e-300, f64::max);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new_col] = v[k * n + old_col];
        }
    }
    (eigenvalues, vectors)
}

// ── Fit / project / reconstruct ──────────────────────────────────────

/// Top-`l` principal directions of the centered, flattened fields. Basis
/// columns follow a deterministic sign convention: the entry of largest
/// magnitude is positive.
pub fn fit(fields: &[FlowField], l: usize) -> Result<SubspaceModel> {
    if l == 0 {
        return Err(PcaError::Contract("latent dimension l must be >= 1".to_string()));
    }
    if fields.is_empty() {
        return Err(PcaError::Contract("no fields to fit".to_string()));
    }
    let (h, w) = (fields[0].height(), fields[0].width());
    let dim = h * w * 2;
    let n = fields.len();
    if fields.iter().any(|f| f.height() != h || f.width() != w) {
        return Err(PcaError::Contract("fields have mixed shapes".to_string()));
    }
    if l > n.min(dim) {
        return Err(PcaError::Contract(format!(
            "l = {l} exceeds min(samples = {n}, dim = {dim})"
        )));
    }

    let mut mean = vec![0.0; dim];
    for f in fields {
        for (m, &v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Centered data, row i = sample i.
    let mut centered = vec![0.0; n * dim];
    for (i, f) in fields.iter().enumerate() {
        for (k, &v) in f.data().iter().enumerate() {
            centered[i * dim + k] = v - mean[k];
        }
    }

    // Gram matrix X Xᵀ.
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..dim {
                s += centered[i * dim + k] * centered[j * dim + k];
            }
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(gram, n);
    let sigma_max = eigenvalues[0].max(0.0).sqrt();
    if sigma_max <= 0.0 || !sigma_max.is_finite() {
        return Err(PcaError::Degenerate(
            "data has zero variance; no principal directions exist".to_string(),
        ));
    }

    let mut basis = vec![0.0; dim * l];
    let mut singular_values = Vec::with_capacity(l);
    let rank_tol = 1e-12 * sigma_max;
    for j in 0..l {
        let sigma = eigenvalues[j].max(0.0).sqrt();
        singular_values.push(sigma);
        if sigma > rank_tol {
            // w_j = Xᵀ u_j / σ_j
            for i in 0..n {
                let u = vectors[i * n + j] / sigma;
                if u == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    basis[k * l + j] += u * centered[i * dim + k];
                }
            }
        } else {
            // Numerically rank-deficient direction: complete the basis with
            // an orthonormalized canonical vector so projections stay
            // well-defined and nested.
            complete_column(&mut basis, dim, l, j)?;
        }
        // Re-orthonormalize against previous columns (guards accumulation
        // at small singular values), then fix the sign.
        orthonormalize_column(&mut basis, dim, l, j)?;
        fix_sign(&mut basis, dim, l, j);
    }

    Ok(SubspaceModel {
        height: h,
        width: w,
        mean,
        basis,
        singular_values,
        latent_dim: l,
    })
}

fn complete_column(basis: &mut [f64], dim: usize, l: usize, j: usize) -> Result<()> {
    for candidate in 0..dim {
        for k in 0..dim {
            basis[k * l + j] = if k == candidate { 1.0 } else { 0.0 };
        }
        // Subtract projections onto previous columns and test the residual.
        let mut col: Vec<f64> = (0..dim).map(|k| basis[k * l + j]).collect();
        for prev in 0..j {
            let dot: f64 = (0..dim).map(|k| col[k] * basis[k * l + prev]).sum();
            for (k, c) in col.iter_mut().enumerate() {
                *c -= dot * basis[k * l + prev];
            }
        }
        let norm: f64 = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.5 {
            for (k, c) in col.iter().enumerate() {
                basis[k * l + j] = *c;
            }
            return Ok(());
        }
    }
    Err(PcaError::Degenerate(
        "cannot complete an orthonormal basis".to_string(),
    ))
}

fn orthonormalize_column(basis: &mut [f64], dim: usize, l: usize, j: usize) -> Result<()> {
    for prev in 0..j {
        let dot: f64 = (0..dim).map(|k| basis[k * l + j] * basis[k * l + prev]).sum();
        for k in 0..dim {
            basis[k * l + j] -= dot * basis[k * l + prev];
        }
    }
    let norm: f64 = (0..dim)
        .map(|k| basis[k * l + j] * basis[k * l + j])
        .sum::<f64>()
        .sqrt();
    if norm < 1e-12 {
        return Err(PcaError::Degenerate(format!(
            "basis column {j} collapsed during orthonormalization"
        )));
    }
    for k in 0..dim {
        basis[k * l + j] /= norm;
    }
    Ok(())
}

fn fix_sign(basis: &mut [f64], dim: usize, l: usize, j: usize) {
    let mut best = 0usize;
    let mut best_abs = -1.0f64;
    for k in 0..dim {
        let a = basis[k * l + j].abs();
        if a > best_abs {
            best_abs = a;
            best = k;
        }
    }
    if basis[best * l + j] < 0.0 {
        for k in 0..dim {
            basis[k * l + j] = -basis[k * l + j];
        }
    }
}

impl SubspaceModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Latent coordinates Wᵀ(x − mean).
    pub fn project(&self, field: &FlowField) -> Result<Vec<f64>> {
        if field.height() != self.height || field.width() != self.width {
            return Err(PcaError::Contract(format!(
                "field {}x{} does not match model {}x{}",
                field.height(),
                field.width(),
                self.height,
                self.width
            )));
        }
        let dim = self.dim();
        let l = self.latent_dim;
        let mut z = vec![0.0; l];
        for k in 0..dim {
            let centered = field.data()[k] - self.mean[k];
            if centered == 0.0 {
                continue;
            }
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += centered * self.basis[k * l + j];
            }
        }
        Ok(z)
    }

    /// mean + W·z.
    pub fn reconstruct(&self, z: &[f64]) -> Result<FlowField> {
        if z.len() != self.latent_dim {
            return Err(PcaError::Contract(format!(
                "latent vector length {} != l = {}",
                z.len(),
                self.latent_dim
            )));
        }
        let dim = self.dim();
        let l = self.latent_dim;
        let mut data = self.mean.clone();
        for k in 0..dim {
            let mut acc = 0.0;
            for (j, &zj) in z.iter().enumerate() {
                acc += self.basis[k * l + j] * zj;
            }
            data[k] += acc;
        }
        FlowField::new(self.height, self.width, data)
            .map_err(|e| PcaError::Contract(e.to_string()))
    }

    /// Max column-orthonormality deviation |WᵀW − I|.
    pub fn orthonormality_defect(&self) -> f64 {
        let dim = self.dim();
        let l = self.latent_dim;
        let mut worst = 0.0f64;
        for a in 0..l {
            for b in a..l {
                let dot: f64 = (0..dim).map(|k| self.basis[k * l + a] * self.basis[k * l + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

// ── Comparison against the auto-encoder ──────────────────────────────

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub pca_rmsle: f64,
    pub ae_rmsle: f64,
}

#[derive(Clone, Debug)]
pub struct SubspaceComparison {
    pub rows: Vec<ComparisonRow>,
    pub pca_mean: f64,
    pub ae_mean: f64,
}

/// Mean squared log-difference between two encoded tensors, matching the
/// reconstruction-loss metric.
fn rmsle_encoded(a: &Tensor, b: &Tensor) -> f64 {
    let channels = *a.shape().last().unwrap_or(&1);
    let pixels = a.len() / channels;
    let mut total = 0.0;
    for (x, y) in a.values().iter().zip(b.values()) {
        let d = x.ln_1p() - y.ln_1p();
        total += d * d;
    }
    total / pixels as f64
}

/// Per-field reconstruction scores (encoded-flow squared log error) for the
/// linear subspace and the auto-encoder.
pub fn compare_subspaces(
    model: &SubspaceModel,
    graph: &ModelGraph,
    fields: &[FlowField],
    encoding: &crate::flow::FlowEncoding,
) -> Result<SubspaceComparison> {
    let mut rows = Vec::with_capacity(fields.len());
    for field in fields {
        let encoded_input = crate::flow::encode_flow(field, encoding).field.to_tensor();

        let z = model.project(field)?;
        let pca_recon = model.reconstruct(&z)?;
        let encoded_pca = crate::flow::encode_flow(&pca_recon, encoding).field.to_tensor();
        let pca_rmsle = rmsle_encoded(&encoded_pca, &encoded_input);

        let batch = Tensor::new(
            vec![1, field.height(), field.width(), 2],
            encoded_input.values().to_vec(),
        )
        .map_err(ModelError::from)?;
        let pred = graph.predict(&batch)?;
        let recon = pred.reconstructions.ok_or_else(|| {
            PcaError::Contract("graph has no reconstruction output to compare".to_string())
        })?;
        let ae_rmsle = rmsle_encoded(&recon, &encoded_input);

        rows.push(ComparisonRow { pca_rmsle, ae_rmsle });
    }
    let n = rows.len().max(1) as f64;
    let pca_mean = rows.iter().map(|r| r.pca_rmsle).sum::<f64>() / n;
    let ae_mean = rows.iter().map(|r| r.ae_rmsle).sum::<f64>() / n;
    Ok(SubspaceComparison {
        rows,
        pca_mean,
        ae_mean,
    })
}

// ── Persistence ──────────────────────────────────────────────────────

/// Saves the model in the checkpoint container; the mean record's shape
/// carries the field dimensions.
pub fn save_subspace(model: &SubspaceModel, path: &Path) -> Result<()> {
    let records = vec![
        TensorRecord {
            name: "pca.mean".to_string(),
            shape: vec![model.height, model.width, 2],
            values: model.mean.clone(),
        },
        TensorRecord {
            name: "pca.basis".to_string(),
            shape: vec![model.dim(), model.latent_dim],
            values: model.basis.clone(),
        },
        TensorRecord {
            name: "pca.singvals".to_string(),
            shape: vec![model.latent_dim],
            values: model.singular_values.clone(),
        },
    ];
    crate::model::write_container(path, &records)?;
    Ok(())
}

pub fn load_subspace(path: &Path) -> Result<SubspaceModel> {
    let records = crate::model::read_container(path)?;
    let find = |name: &str| -> Result<&TensorRecord> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| PcaError::Model(ModelError::MissingRecord(name.to_string())))
    };
    let mean = find("pca.mean")?;
    let basis = find("pca.basis")?;
    let singvals = find("pca.singvals")?;
    if mean.shape.len() != 3 || mean.shape[2] != 2 {
        return Err(PcaError::Contract(format!(
            "pca.mean shape {:?} is not (h, w, 2)",
            mean.shape
        )));
    }
    let (h, w) = (mean.shape[0], mean.shape[1]);
    let l = *basis.shape.last().unwrap_or(&0);
    if basis.shape != [h * w * 2, l] || singvals.values.len() != l {
        return Err(PcaError::Contract(format!(
            "inconsistent subspace records: basis {:?}, {} singular values",
            basis.shape,
            singvals.values.len()
        )));
    }
    Ok(SubspaceModel {
        height: h,
        width: w,
        mean: mean.values.clone(),
        basis: basis.values.clone(),
        singular_values: singvals.values.clone(),
        latent_dim: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn field_from(h: usize, w: usize, data: Vec<f64>) -> FlowField {
        FlowField::new(h, w, data).unwrap()
    }

    /// Random orthonormal (dim, k) basis via Gram-Schmidt.
    fn random_basis(dim: usize, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < k {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, b) in v.iter_mut().zip(c) {
                    *x -= dot * b;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in &mut v {
                    *x /= norm;
                }
                cols.push(v);
            }
        }
        cols
    }

    fn linear_model_fields(
        h: usize,
        w: usize,
        k: usize,
        n: usize,
        seed: u64,
    ) -> (Vec<FlowField>, Vec<Vec<f64>>) {
        let dim = h * w * 2;
        let mut rng = Rng::seed_from(seed);
        let basis = random_basis(dim, k, &mut rng);
        let mean: Vec<f64> = (0..dim).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut fields = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..k).map(|_| rng.range(-3.0, 3.0)).collect();
            let mut data = mean.clone();
            for (j, col) in basis.iter().enumerate() {
                for (d, b) in data.iter_mut().zip(col) {
                    *d += z[j] * b;
                }
            }
            fields.push(field_from(h, w, data));
        }
        (fields, basis)
    }

    #[test]
    fn rank_one_data_recovers_direction() {
        let dim = 2 * 3 * 2;
        let mut w_vec: Vec<f64> = (1..=dim).map(|i| i as f64).collect();
        let norm: f64 = w_vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut w_vec {
            *x /= norm;
        }
        let fields: Vec<FlowField> = [-2.0, -0.5, 1.0, 3.0]
            .iter()
            .map(|&c| field_from(2, 3, w_vec.iter().map(|&x| c * x).collect()))
            .collect();
        let model = fit(&fields, 1).unwrap();
        for (k, &expect) in w_vec.iter().enumerate() {
            // Sign convention makes the largest entry positive; w_vec is
            // already all-positive.
            assert!((model.basis[k] - expect).abs() < 1e-12, "entry {k}");
        }
    }

    #[test]
    fn four_dimensional_linear_model_reconstructs_exactly() {
        let (fields, _) = linear_model_fields(4, 5, 4, 24, 7);
        let model = fit(&fields, 4).unwrap();
        assert!(model.orthonormality_defect() < 1e-9);
        for f in &fields {
            let z = model.project(f).unwrap();
            let recon = model.reconstruct(&z).unwrap();
            let rmse = (f
                .data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / f.data().len() as f64)
                .sqrt();
            assert!(rmse < 1e-9, "rmse {rmse}");
        }
    }

    #[test]
    fn l_zero_and_oversized_l_are_contract_errors() {
        let (fields, _) = linear_model_fields(2, 3, 2, 5, 3);
        assert!(matches!(fit(&fields, 0), Err(PcaError::Contract(_))));
        assert!(fit(&fields, 6).is_err()); // > #samples
    }

    #[test]
    fn zero_variance_data_is_degenerate() {
        let fields = vec![field_from(2, 2, vec![1.0; 8]); 4];
        assert!(matches!(fit(&fields, 1), Err(PcaError::Degenerate(_))));
    }

    #[test]
    fn mean_field_projects_to_zero() {
        let (fields, _) = linear_model_fields(3, 4, 3, 12, 9);
        let model = fit(&fields, 3).unwrap();
        let mean_field = field_from(3, 4, model.mean.clone());
        let z = model.project(&mean_field).unwrap();
        assert!(z.iter().all(|&v| v.abs() < 1e-9), "{z:?}");
    }

    #[test]
    fn residual_orthogonal_to_basis_and_projection_idempotent() {
        let mut rng = Rng::seed_from(21);
        let fields: Vec<FlowField> = (0..20)
            .map(|_| field_from(3, 4, (0..24).map(|_| rng.range(-2.0, 2.0)).collect()))
            .collect();
        let model = fit(&fields, 5).unwrap();
        for f in fields.iter().take(6) {
            let z = model.project(f).unwrap();
            let recon = model.reconstruct(&z).unwrap();
            // Residual ⟂ every basis column.
            let resid: Vec<f64> = f
                .data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| a - b)
                .collect();
            for j in 0..model.latent_dim {
                let dot: f64 = (0..model.dim())
                    .map(|k| resid[k] * model.basis[k * model.latent_dim + j])
                    .sum();
                assert!(dot.abs() < 1e-9, "column {j}: {dot}");
            }
            // project(reconstruct(z)) == z
            let z2 = model.project(&recon).unwrap();
            for (a, b) in z.iter().zip(&z2) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reconstruction_error_non_increasing_in_l() {
        let mut rng = Rng::seed_from(33);
        let fields: Vec<FlowField> = (0..16)
            .map(|_| field_from(4, 4, (0..32).map(|_| rng.range(-2.0, 2.0)).collect()))
            .collect();
        let mut last = f64::INFINITY;
        for l in 1..=8 {
            let model = fit(&fields, l).unwrap();
            let mut total = 0.0;
            for f in &fields {
                let z = model.project(f).unwrap();
                let recon = model.reconstruct(&z).unwrap();
                total += f
                    .data()
                    .iter()
                    .zip(recon.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            assert!(
                total <= last + 1e-9,
                "error increased at l = {l}: {total} > {last}"
            );
            last = total;
        }
    }

    #[test]
    fn comparison_report_shape_and_untrained_ae_loses_on_linear_data() {
        let (fields, _) = linear_model_fields(16, 16, 4, 30, 11);
        // Scale the synthetic flows into the encoder's range.
        let fields: Vec<FlowField> = fields
            .into_iter()
            .map(|f| {
                let data: Vec<f64> = f.data().iter().map(|v| 8.0 * v).collect();
                field_from(16, 16, data)
            })
            .collect();
        let model = fit(&fields, 4).unwrap();
        let graph = crate::model::build_lsvo(16, 16, 16, 1).unwrap();
        let enc = crate::flow::FlowEncoding::default();
        let report = compare_subspaces(&model, &graph, &fields[..8], &enc).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert!(
            report.pca_mean <= report.ae_mean,
            "pca {} vs untrained ae {}",
            report.pca_mean,
            report.ae_mean
        );
    }

    #[test]
    fn subspace_round_trips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.lsvo");
        let (fields, _) = linear_model_fields(3, 5, 3, 10, 17);
        let model = fit(&fields, 3).unwrap();
        save_subspace(&model, &path).unwrap();
        let back = load_subspace(&path).unwrap();
        assert_eq!(back.latent_dim, 3);
        assert_eq!((back.height, back.width), (3, 5));
        for (a, b) in model.basis.iter().zip(&back.basis) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
