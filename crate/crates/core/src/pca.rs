//! Two-component PCA of one layer's token cloud, for visual inspection.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::trace::{Element, Matrix};

/// Top-2 principal projection of a token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(pc1, pc2)` for every token, in token order.
    pub points: Vec<[f64; 2]>,
    /// Sample-covariance eigenvalues of the two components, descending.
    pub eigenvalues: [f64; 2],
    /// Unit principal directions.
    pub components: [Vec<f64>; 2],
}

/// Projects the centered rows onto the two leading eigenvectors of the
/// sample covariance (denominator `T - 1`).
///
/// Each component's sign is fixed so that its largest-magnitude entry is
/// positive. With fewer than two dimensions the missing component is zero.
pub fn pca_2d<S: Element>(layer: &Matrix<S>) -> Projection {
    let (t, d) = (layer.rows(), layer.cols());
    let center = crate::score::layer_center(layer);
    let centered = DMatrix::from_fn(t, d, |i, j| layer.get(i, j).to_f64() - center[j]);
    let denom = t.saturating_sub(1).max(1) as f64;
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let component = |rank: usize| -> (f64, Vec<f64>) {
        let Some(&idx) = order.get(rank) else {
            return (0.0, vec![0.0; d]);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = v.iter().enumerate().fold(
            0,
            |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
        );
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (eig.eigenvalues[idx], v)
    };
    let (l1, c1) = component(0);
    let (l2, c2) = component(1);

    let points = centered
        .row_iter()
        .map(|row| {
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&c1), dot(&c2)]
        })
        .collect();
    Projection {
        points,
        eigenvalues: [l1, l2],
        components: [c1, c2],
    }
}
