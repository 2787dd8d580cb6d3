use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// `(count, height, width)` of an image `[h, w]` or a batch `[n, h, w]`.
pub(crate) fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((1, h, w)),
        [n, h, w] => Ok((n, h, w)),
        ref other => Err(Error::invalid(format!(
            "expected an image [h, w] or batch [n, h, w], got shape {other:?}"
        ))),
    }
}

/// Anisotropic total variation: absolute differences of horizontally and
/// vertically adjacent pixels, summed over every image of a batch.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    let (n, h, w) = image_dims(x)?;
    Ok(tv_flat(x.data(), n, h, w))
}

pub(crate) fn tv_flat(data: &[f64], n: usize, h: usize, w: usize) -> f64 {
    let mut tv = 0.0;
    for img in data.chunks_exact(h * w).take(n) {
        for r in 0..h {
            for c in 0..w {
                let v = img[r * w + c];
                if c + 1 < w {
                    tv += (img[r * w + c + 1] - v).abs();
                }
                if r + 1 < h {
                    tv += (img[(r + 1) * w + c] - v).abs();
                }
            }
        }
    }
    tv
}

/// A subgradient of [`tv_flat`], using `sign(0) = 0`.
pub(crate) fn tv_subgradient(data: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0.0; data.len()];
    for k in 0..n {
        let off = k * h * w;
        for r in 0..h {
            for c in 0..w {
                let i = off + r * w + c;
                let mut push = |j: usize| {
                    let s = sign(data[j] - data[i]);
                    g[j] += s;
                    g[i] -= s;
                };
                if c + 1 < w {
                    push(i + 1);
                }
                if r + 1 < h {
                    push(i + w);
                }
            }
        }
    }
    g
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&x).unwrap(), 2.0);
        assert_eq!(total_variation(&Tensor::filled(vec![3, 4, 4], 0.7)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_vectors() {
        assert!(total_variation(&Tensor::zeros(vec![9])).is_err());
        assert!(total_variation(&Tensor::zeros(vec![1, 2, 3, 4])).is_err());
    }

    #[test]
    fn subgradient_matches_differences() {
        let data = [0.1, 0.5, 0.2, 0.9, 0.3, 0.35];
        let g = tv_subgradient(&data, 1, 2, 3);
        let eps = 1e-7;
        for i in 0..data.len() {
            let mut up = data;
            up[i] += eps;
            let fd = (tv_flat(&up, 1, 2, 3) - tv_flat(&data, 1, 2, 3)) / eps;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }
}
