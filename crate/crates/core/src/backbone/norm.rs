//! Per-window Z-score normalization and patch tokenization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Divisor floor for flat windows.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation before flooring.
    pub std: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    pub fn identity(n_vars: usize) -> Self {
        NormStats {
            mean: vec![0.0; n_vars],
            std: vec![1.0; n_vars],
            eps: DEFAULT_EPS,
        }
    }

    pub fn divisor(&self, var: usize) -> f64 {
        self.std[var].max(self.eps)
    }
}

/// Normalizes a row-major `len×n_vars` slice per variable.
pub(crate) fn zscore_slice(values: &[f64], n_vars: usize, eps: f64) -> Result<(Vec<f64>, NormStats)> {
    let len = values.len() / n_vars.max(1);
    if len < 2 {
        return Err(Error::Window(format!(
            "normalization needs at least 2 time steps, got {len}"
        )));
    }
    let mut mean = vec![0.0; n_vars];
    for row in values.chunks(n_vars) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    let mut var = vec![0.0; n_vars];
    for row in values.chunks(n_vars) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / len as f64).sqrt()).collect();
    let stats = NormStats { mean, std, eps };
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(n_vars) {
        for (j, v) in row.iter().enumerate() {
            out.push((v - stats.mean[j]) / stats.divisor(j));
        }
    }
    Ok((out, stats))
}

/// Z-score each column of an `L×d` series.
pub fn zscore(series: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let d = series.cols();
    let (out, stats) = zscore_slice(series.data(), d, eps)?;
    Ok((Tensor::matrix(series.rows(), d, out)?, stats))
}

/// Inverse of [`zscore`] for any number of rows.
pub fn denormalize(series: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let d = series.cols();
    if d != stats.mean.len() {
        return Err(Error::dim("denormalize", series.shape(), &[stats.mean.len()]));
    }
    let data = series
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, v)| v * stats.divisor(j) + stats.mean[j])
        })
        .collect();
    Tensor::new(series.shape(), data)
}

/// Splits `L×d` into `N = L/P` tokens of width `P·d`; token `i` is the
/// row-major flattening of rows `iP..(i+1)P`.
pub fn patchify(series: &Tensor, patch: usize) -> Result<Tensor> {
    let (len, d) = (series.rows(), series.cols());
    if patch == 0 || len % patch != 0 {
        return Err(Error::Patch { length: len, patch });
    }
    series.reshape(&[len / patch, patch * d])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, n_vars: usize) -> Result<Tensor> {
    if n_vars == 0 || tokens.cols() % n_vars != 0 {
        return Err(Error::dim("unpatchify", tokens.shape(), &[n_vars]));
    }
    tokens.reshape(&[tokens.numel() / n_vars, n_vars])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zscore_hand_values() {
        let s = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let (z, st) = zscore(&s, DEFAULT_EPS).unwrap();
        assert_eq!(st.mean, vec![2.0]);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let want = [-1.2247, 0.0, 1.2247];
        for (a, b) in z.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let s = Tensor::matrix(4, 1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (z, _) = zscore(&s, DEFAULT_EPS).unwrap();
        assert!(z.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn constant_series_uses_floor() {
        let s = Tensor::matrix(3, 1, vec![5.0; 3]).unwrap();
        let (z, st) = zscore(&s, DEFAULT_EPS).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(st.std[0], 0.0);
        assert_eq!(st.divisor(0), DEFAULT_EPS);
        assert_eq!(denormalize(&z, &st).unwrap(), s);
    }

    #[test]
    fn too_short_window() {
        let s = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(zscore(&s, DEFAULT_EPS), Err(Error::Window(_))));
    }

    #[test]
    fn denormalize_affine_cases() {
        let id = NormStats::identity(1);
        let x = Tensor::matrix(2, 1, vec![0.3, -4.0]).unwrap();
        assert_eq!(denormalize(&x, &id).unwrap(), x);
        let st = NormStats {
            mean: vec![10.0],
            std: vec![2.0],
            eps: DEFAULT_EPS,
        };
        let out = denormalize(&Tensor::matrix(1, 1, vec![0.0]).unwrap(), &st).unwrap();
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn patch_examples() {
        let s = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = patchify(&s, 2).unwrap();
        assert_eq!(t, Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        assert_eq!(patchify(&s, 1).unwrap().shape(), &[4, 1]);
        let long = Tensor::zeros(&[336, 7]);
        assert_eq!(patchify(&long, 16).unwrap().rows(), 21);
        assert!(matches!(patchify(&s, 3), Err(Error::Patch { length: 4, patch: 3 })));
    }

    proptest! {
        #[test]
        fn zscore_moments_and_roundtrip(
            (len, d, data) in (2usize..40, 1usize..6)
                .prop_flat_map(|(l, d)| (Just(l), Just(d), prop::collection::vec(-50.0f64..50.0, l * d)))
        ) {
            let s = Tensor::matrix(len, d, data).unwrap();
            let (z, st) = zscore(&s, DEFAULT_EPS).unwrap();
            for j in 0..d {
                let col: Vec<f64> = (0..len).map(|i| z.get(i, j)).collect();
                let mean = col.iter().sum::<f64>() / len as f64;
                prop_assert!(mean.abs() < 1e-10);
                if st.std[j] > 1e-6 {
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                    prop_assert!((var.sqrt() - 1.0).abs() < 1e-8);
                }
            }
            let back = denormalize(&z, &st).unwrap();
            prop_assert!(back.max_abs_diff(&s) < 1e-10);
        }

        #[test]
        fn patch_roundtrip(n in 1usize..8, p in 1usize..6, d in 1usize..4) {
            let len = n * p;
            let s = Tensor::matrix(len, d, (0..len * d).map(|i| i as f64).collect()).unwrap();
            let tokens = patchify(&s, p).unwrap();
            prop_assert_eq!(tokens.shape(), &[n, p * d]);
            prop_assert_eq!(unpatchify(&tokens, d).unwrap(), s);
        }
    }
}
