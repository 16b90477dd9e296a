use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-channel batch statistics: `mean` and `std = sqrt(var + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

/// Axes reduced by batch normalization for a feature tensor of this rank.
pub(crate) fn batch_axes(rank: usize) -> Result<&'static [usize]> {
    match rank {
        2 => Ok(&[0]),
        4 => Ok(&[0, 2, 3]),
        r => Err(Error::Invalid(format!(
            "normalization expects rank-2 or rank-4 features, got rank {r}"
        ))),
    }
}

/// Channel mean and standard deviation over the selected rows (and all
/// spatial positions for rank-4 input). Variance is the biased population
/// estimate; `eps` is added under the square root.
pub fn compute_batch_stats<S: Scalar>(
    features: &Tensor<S>,
    rows: &[usize],
    eps: S,
) -> Result<ChannelStats<S>> {
    if rows.is_empty() {
        return Err(Error::EmptySubBatch);
    }
    batch_axes(features.rank())?;
    let shape = features.shape();
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let n = features.rows();
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Shape {
            op: "compute_batch_stats",
            lhs: shape.to_vec(),
            rhs: vec![bad],
        });
    }
    let data = features.data();
    let at = |r: usize, c: usize, p: usize| data[(r * channels + c) * spatial + p];
    let count = S::from_usize_lossy(rows.len() * spatial);
    let mut mean = vec![S::zero(); channels];
    let mut std = vec![S::zero(); channels];
    for c in 0..channels {
        let mut sum = S::zero();
        for &r in rows {
            for p in 0..spatial {
                sum = sum + at(r, c, p);
            }
        }
        let mu = sum / count;
        let mut sq = S::zero();
        for &r in rows {
            for p in 0..spatial {
                let d = at(r, c, p) - mu;
                sq = sq + d * d;
            }
        }
        mean[c] = mu;
        std[c] = (sq / count + eps).sqrt();
    }
    Ok(ChannelStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values() {
        let x = Tensor::new(vec![2, 1], vec![1.0f64, 3.0]).unwrap();
        let s = compute_batch_stats(&x, &[0, 1], 0.0).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn constant_column_keeps_eps() {
        let x = Tensor::new(vec![3, 1], vec![5.0f64; 3]).unwrap();
        let s = compute_batch_stats(&x, &[0, 1, 2], 1e-5).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.std, vec![1e-5f64.sqrt()]);
    }

    #[test]
    fn empty_rows() {
        let x = Tensor::new(vec![2, 1], vec![1.0f64, 3.0]).unwrap();
        let err = compute_batch_stats(&x, &[], 1e-5).unwrap_err();
        assert_eq!(err.to_string(), "empty sub-batch");
    }

    #[test]
    fn rank4_includes_spatial_positions() {
        // one sample, one channel, 2x2 spatial
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let s = compute_batch_stats(&x, &[0], 0.0).unwrap();
        assert_eq!(s.mean, vec![2.5]);
        assert!((s.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }
}
