//! Four-way 2D traversal of a patch grid and its merge.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    RowMajor,
    ColMajor,
    RowMajorRev,
    ColMajorRev,
}

pub const ROUTES: [Route; 4] = [
    Route::RowMajor,
    Route::ColMajor,
    Route::RowMajorRev,
    Route::ColMajorRev,
];

/// Grid positions (row-major indices) in the order `route` visits them.
pub fn route_order(h: usize, w: usize, route: Route) -> Vec<usize> {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..h * w).map(|k| (k % h) * w + k / h).collect();
    match route {
        Route::RowMajor => row,
        Route::ColMajor => col,
        Route::RowMajorRev => row.into_iter().rev().collect(),
        Route::ColMajorRev => col.into_iter().rev().collect(),
    }
}

pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, &i) in p.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// `x: [D, H, W]` to four `[H*W, D]` token sequences, one per route.
pub fn cross_scan_2d(x: &Tensor) -> Result<[Tensor; 4]> {
    if x.rank() != 3 {
        return Err(Error::invalid(
            "cross_scan_2d",
            format!("expected [D, H, W], got {:?}", x.shape()),
        ));
    }
    let (d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let tokens = x.reshape(&[d, h * w])?.transpose()?;
    let seq = |r: Route| tokens.gather_axis(0, &route_order(h, w, r));
    Ok([
        seq(ROUTES[0])?,
        seq(ROUTES[1])?,
        seq(ROUTES[2])?,
        seq(ROUTES[3])?,
    ])
}

/// Inverse-permutes each route's `[H*W, D]` sequence back to grid order and
/// sums them into `[D, H, W]`.
pub fn cross_merge_2d(routes: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    if routes.len() != 4 {
        return Err(Error::invalid(
            "cross_merge_2d",
            format!("expected 4 routes, got {}", routes.len()),
        ));
    }
    let first = routes[0].shape().to_vec();
    if first.len() != 2 || first[0] != h * w {
        return Err(Error::shape("cross_merge_2d", &[h * w], &first));
    }
    let d = first[1];
    let mut grid = Tensor::zeros(&[h * w, d]);
    for (r, y) in ROUTES.iter().zip(routes) {
        if y.shape() != first.as_slice() {
            return Err(Error::shape("cross_merge_2d", &first, y.shape()));
        }
        let back = y.gather_axis(0, &inverse_permutation(&route_order(h, w, *r)))?;
        grid.add_assign(&back)?;
    }
    grid.transpose()?.reshape(&[d, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_routes() {
        let got: Vec<Vec<usize>> = ROUTES.iter().map(|&r| route_order(2, 2, r)).collect();
        assert_eq!(
            got,
            vec![
                vec![0, 1, 2, 3],
                vec![0, 2, 1, 3],
                vec![3, 2, 1, 0],
                vec![3, 1, 2, 0]
            ]
        );
    }

    #[test]
    fn single_cell_routes_coincide() {
        let x = Tensor::vector(vec![1.0, 2.0]).reshape(&[2, 1, 1]).unwrap();
        let seqs = cross_scan_2d(&x).unwrap();
        for s in &seqs {
            assert_eq!(s.shape(), &[1, 2]);
            assert_eq!(s, &seqs[0]);
        }
    }

    #[test]
    fn merge_of_scan_is_four_times_identity() {
        let x = Tensor::from_fn(&[3, 2, 5], |i| (i as f64).cos());
        let seqs = cross_scan_2d(&x).unwrap();
        let merged = cross_merge_2d(&seqs, 2, 5).unwrap();
        assert!(merged.max_abs_diff(&x.scale(4.0)) < 1e-15);
    }

    #[test]
    fn merge_rejects_length_mismatch() {
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(cross_merge_2d(&[a.clone(), a.clone(), a, b], 2, 2).is_err());
    }
}
