use super::ModelGraph;
use crate::tensor::{Scalar, Tensor};

/// Symmetric 0/1 adjacency with zero diagonal.
pub fn build_adjacency<T: Scalar>(g: &ModelGraph) -> Tensor<T> {
    let l = g.len();
    let mut a = Tensor::zeros(&[l, l]);
    let data = a.data_mut();
    for &(i, j) in g.edges() {
        data[i * l + j] = T::one();
        data[j * l + i] = T::one();
    }
    a
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` holds the row sums of `A + I`.
pub fn renormalize_adjacency<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let l = a.shape()[0];
    let tilde = |i: usize, j: usize| {
        let v = a.data()[i * l + j];
        if i == j {
            v + T::one()
        } else {
            v
        }
    };
    let inv_sqrt: Vec<T> = (0..l)
        .map(|i| {
            let d: T = (0..l).map(|j| tilde(i, j)).sum();
            d.sqrt().recip()
        })
        .collect();
    Tensor::from_fn(&[l, l], |k| {
        let (i, j) = (k / l, k % l);
        inv_sqrt[i] * tilde(i, j) * inv_sqrt[j]
    })
}

/// Largest singular value of a square matrix, by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor<f64>, iterations: usize) -> f64 {
    let l = m.shape()[0];
    let mv = |v: &[f64]| -> Vec<f64> {
        (0..l)
            .map(|i| (0..l).map(|j| m.data()[i * l + j] * v[j]).sum())
            .collect()
    };
    let mtv = |v: &[f64]| -> Vec<f64> {
        (0..l)
            .map(|j| (0..l).map(|i| m.data()[i * l + j] * v[i]).sum())
            .collect()
    };
    // A non-uniform start avoids being orthogonal to the top vector by symmetry.
    let mut v: Vec<f64> = (0..l).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let w = mtv(&mv(&v));
        sigma = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().sqrt();
        v = w;
    }
    sigma
}
