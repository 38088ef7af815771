//! Vector kernels shared by both encoders and the retrieval index.
//!
//! The kernels are generic over the float width: the networks run in `f32`,
//! loss checks and oracles in `f64`. Reductions always accumulate in `f64`.

use num_traits::Float;

use crate::error::{check_dim, Error, Result};

pub fn norm<T: Float>(v: &[T]) -> f64 {
    v.iter()
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales `v` to unit L2 norm. A zero (or non-finite) norm is an error since it
/// signals a degenerate embedding.
pub fn l2_normalize<T: Float>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter()
        .map(|x| T::from(x.to_f64().unwrap_or(0.0) / n).unwrap_or_else(T::zero))
        .collect())
}

pub fn dot<T: Float>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) * y.to_f64().unwrap_or(f64::NAN))
        .sum()
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity<T: Float>(a: &[T], b: &[T]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Bilinear fusion of a 4-dim layout vector with a feature vector.
///
/// Output is layout-major: `out[i * d + j] = layout[i] * feature[j]`.
pub fn outer_product_flatten<T: Float>(layout: &[T], feature: &[T]) -> Result<Vec<T>> {
    check_dim(4, layout.len())?;
    let mut out = Vec::with_capacity(4 * feature.len());
    for &l in layout {
        out.extend(feature.iter().map(|&v| l * v));
    }
    Ok(out)
}

/// Gradients of `outer_product_flatten` given the upstream gradient.
/// Returns `(d_layout, d_feature)`.
pub fn outer_product_backward(layout: &[f32], feature: &[f32], grad: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let d = feature.len();
    let mut d_layout = vec![0.0f32; layout.len()];
    let mut d_feature = vec![0.0f32; d];
    for (i, &l) in layout.iter().enumerate() {
        let block = &grad[i * d..(i + 1) * d];
        d_layout[i] = block.iter().zip(feature).map(|(g, f)| g * f).sum();
        for (df, g) in d_feature.iter_mut().zip(block) {
            *df += l * g;
        }
    }
    (d_layout, d_feature)
}

/// Backpropagates through `y / ||y||` given the normalized output `unit`,
/// the pre-normalization norm and the upstream gradient.
pub fn normalize_backward(unit: &[f32], norm: f64, grad: &[f32]) -> Vec<f32> {
    let proj = dot(unit, grad);
    unit.iter()
        .zip(grad)
        .map(|(&u, &g)| ((g as f64 - u as f64 * proj) / norm) as f32)
        .collect()
}
