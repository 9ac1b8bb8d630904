use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::NumericError;

const RANK_TOL: f64 = 1e-10;

/// Linear PCA projection: `components * (v - mean)`. Components are stored
/// row-wise, orthonormal, ordered by decreasing explained variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    components: DMatrix<f64>,
}

impl PcaModel {
    pub fn from_parts(mean: DVector<f64>, components: DMatrix<f64>) -> Result<Self, NumericError> {
        if components.ncols() != mean.len() {
            return Err(NumericError::DimensionMismatch {
                expected: mean.len(),
                got: components.ncols(),
            });
        }
        if components.nrows() > components.ncols() || components.nrows() == 0 {
            return Err(NumericError::ShapeMismatch(format!(
                "{} components for input dimension {}",
                components.nrows(),
                components.ncols()
            )));
        }
        Ok(Self { mean, components })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    /// Maps a projected vector back into the input space.
    pub fn reconstruct(&self, code: &[f64]) -> Result<DVector<f64>, NumericError> {
        if code.len() != self.out_dim() {
            return Err(NumericError::DimensionMismatch {
                expected: self.out_dim(),
                got: code.len(),
            });
        }
        Ok(&self.mean + self.components.tr_mul(&DVector::from_column_slice(code)))
    }

    /// Rounds every parameter to the nearest `f32`, matching what the model
    /// files store.
    pub fn round_to_f32(&mut self) {
        self.mean.iter_mut().for_each(|x| *x = *x as f32 as f64);
        self.components.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

/// Fits a PCA projection to the rows of `data` (n samples x d features).
///
/// Uses the eigendecomposition of the d x d covariance, or of the n x n Gram
/// matrix when there are fewer samples than features; both yield the same
/// principal directions. Each component's sign is fixed so its
/// largest-magnitude entry is positive.
pub fn pca_fit(data: &DMatrix<f64>, out_dim: usize) -> Result<PcaModel, NumericError> {
    let (n, d) = data.shape();
    if out_dim == 0 || n < out_dim {
        return Err(NumericError::InsufficientSamples {
            needed: out_dim.max(1),
            got: n,
        });
    }
    if d < out_dim {
        return Err(NumericError::ShapeMismatch(format!(
            "out_dim {out_dim} exceeds input dimension {d}"
        )));
    }
    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let mut components = if n >= d {
        let cov = centered.tr_mul(&centered) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let order = sorted_indices(&eig.eigenvalues);
        check_rank(&eig.eigenvalues, &order, out_dim)?;
        let mut c = DMatrix::zeros(out_dim, d);
        for (r, &i) in order.iter().take(out_dim).enumerate() {
            c.set_row(r, &eig.eigenvectors.column(i).transpose());
        }
        c
    } else {
        let gram = &centered * centered.transpose() / n as f64;
        let eig = SymmetricEigen::new(gram);
        let order = sorted_indices(&eig.eigenvalues);
        check_rank(&eig.eigenvalues, &order, out_dim)?;
        let mut c = DMatrix::zeros(out_dim, d);
        for (r, &i) in order.iter().take(out_dim).enumerate() {
            let v = centered.tr_mul(&eig.eigenvectors.column(i));
            let norm = v.norm();
            c.set_row(r, &(v / norm).transpose());
        }
        c
    };

    orthonormalize_rows(&mut components);
    orthonormalize_rows(&mut components);
    for mut row in components.row_iter_mut() {
        let (mut best, mut best_abs) = (0.0, -1.0);
        for &x in row.iter() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = x;
            }
        }
        if best < 0.0 {
            row.neg_mut();
        }
    }
    Ok(PcaModel { mean, components })
}

/// `components * (v - mean)`.
pub fn pca_apply(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>, NumericError> {
    if v.len() != model.in_dim() {
        return Err(NumericError::DimensionMismatch {
            expected: model.in_dim(),
            got: v.len(),
        });
    }
    let centered = DVector::from_iterator(v.len(), v.iter().zip(model.mean.iter()).map(|(a, m)| a - m));
    Ok((&model.components * centered).as_slice().to_vec())
}

fn sorted_indices(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn check_rank(values: &DVector<f64>, order: &[usize], out_dim: usize) -> Result<(), NumericError> {
    let top = values[order[0]];
    let last = values[order[out_dim - 1]];
    if !(top > 0.0) || last <= RANK_TOL * top {
        return Err(NumericError::DegenerateData(format!(
            "requested {out_dim} components but data variance has lower rank"
        )));
    }
    Ok(())
}

fn orthonormalize_rows(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).into_owned();
            let mut ri = m.row_mut(i);
            ri -= rj * proj;
        }
        let norm = m.row(i).norm();
        m.row_mut(i).unscale_mut(norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, "pca-test");
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    fn reconstruction_error(model: &PcaModel, data: &DMatrix<f64>) -> f64 {
        let mut err = 0.0;
        for row in data.row_iter() {
            let v: Vec<f64> = row.iter().copied().collect();
            let code = pca_apply(model, &v).unwrap();
            let back = model.reconstruct(&code).unwrap();
            err += (back - DVector::from_vec(v)).norm_squared();
        }
        err
    }

    #[test]
    fn exact_subspace_reconstructs() {
        // 40 points on a 3-dim affine subspace of R^8.
        let basis = random_matrix(3, 8, 1);
        let coeffs = random_matrix(40, 3, 2);
        let offset = DVector::from_fn(8, |i, _| i as f64);
        let mut data = &coeffs * &basis;
        for mut row in data.row_iter_mut() {
            row += offset.transpose();
        }
        let model = pca_fit(&data, 3).unwrap();
        assert!(reconstruction_error(&model, &data) < 1e-9 * data.norm_squared().max(1.0));
        // Gram route: fewer samples than features.
        let model = pca_fit(&data.rows(0, 5).into_owned(), 3).unwrap();
        assert!(reconstruction_error(&model, &data) < 1e-9 * data.norm_squared().max(1.0));
    }

    #[test]
    fn mean_maps_to_zero_and_component_to_unit() {
        let data = random_matrix(30, 6, 3);
        let model = pca_fit(&data, 4).unwrap();
        let mean: Vec<f64> = model.mean().iter().copied().collect();
        assert!(pca_apply(&model, &mean).unwrap().iter().all(|x| x.abs() < 1e-12));
        let v: Vec<f64> = (model.mean() + model.components().row(0).transpose())
            .iter()
            .copied()
            .collect();
        let code = pca_apply(&model, &v).unwrap();
        assert!((code[0] - 1.0).abs() < 1e-9);
        assert!(code[1..].iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn apply_matches_dense_oracle() {
        let data = random_matrix(25, 5, 4);
        let model = pca_fit(&data, 3).unwrap();
        let v = [0.3, -1.2, 2.0, 0.5, -0.7];
        let got = pca_apply(&model, &v).unwrap();
        for (r, g) in got.iter().enumerate() {
            let mut expect = 0.0;
            for c in 0..5 {
                expect += model.components()[(r, c)] * (v[c] - model.mean()[c]);
            }
            assert!((g - expect).abs() < 1e-12);
        }
        assert!(matches!(
            pca_apply(&model, &[1.0]),
            Err(NumericError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stretched_cloud_first_component() {
        // Oracle: covariance of the construction is diag-like along u with 100:1
        // variance ratio, so the leading eigenvector is u.
        let angle: f64 = 0.4;
        let u = [angle.cos(), angle.sin()];
        let w = [-angle.sin(), angle.cos()];
        let mut rng = RngStream::new(9, "cloud");
        let rows: Vec<f64> = (0..2000)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [10.0 * a * u[0] + b * w[0], 10.0 * a * u[1] + b * w[1]]
            })
            .collect();
        let data = DMatrix::from_row_slice(2000, 2, &rows);
        let model = pca_fit(&data, 1).unwrap();
        let c = model.components().row(0);
        // Direction of the sample covariance's top eigenvector, computed in closed form.
        let cov = {
            let centered = data.clone() - DMatrix::from_fn(2000, 2, |_, j| model.mean()[j]);
            centered.tr_mul(&centered) / 2000.0
        };
        let (a, b, d) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let lambda = 0.5 * (a + d) + ((0.5 * (a - d)).powi(2) + b * b).sqrt();
        let oracle = nalgebra::Vector2::new(b, lambda - a).normalize();
        assert!((c[0] * oracle[0] + c[1] * oracle[1]).abs() > 1.0 - 1e-6);
        assert!((c[0] * u[0] + c[1] * u[1]).abs() > 0.999);
    }

    #[test]
    fn errors() {
        let data = random_matrix(3, 5, 5);
        assert!(matches!(
            pca_fit(&data, 4),
            Err(NumericError::InsufficientSamples { .. })
        ));
        let same = DMatrix::from_fn(10, 4, |_, j| j as f64);
        assert!(matches!(pca_fit(&same, 1), Err(NumericError::DegenerateData(_))));
    }

    #[test]
    fn orthonormal_and_monotone_error() {
        let mut data = random_matrix(50, 12, 6);
        // Badly conditioned columns.
        for mut col in data.column_iter_mut().take(3) {
            col *= 1e-4;
        }
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let model = pca_fit(&data, k).unwrap();
            let c = model.components();
            let gram = c * c.transpose();
            assert!((gram - DMatrix::identity(k, k)).abs().max() < 1e-6);
            let err = reconstruction_error(&model, &data);
            assert!(err <= prev + 1e-9);
            prev = err;
            for row in c.row_iter() {
                let max = row
                    .iter()
                    .copied()
                    .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(max > 0.0);
            }
        }
    }
}
