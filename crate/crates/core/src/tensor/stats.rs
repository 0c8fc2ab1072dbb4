use super::Tensor;
use crate::error::{Error, Result};

/// Population mean and variance over `axes`.
///
/// The result keeps the remaining axes in order (`[1]` when every axis is
/// reduced). Two passes: the mean first, then the mean squared deviation.
/// Each statistic accumulates its elements in row-major order.
pub fn batch_stats(input: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let dims = input.dims();
    if axes.is_empty() {
        return Err(Error::dim("batch_stats: empty reduction"));
    }
    let mut reduced = vec![false; dims.len()];
    for &a in axes {
        if a >= dims.len() || reduced[a] {
            return Err(Error::dim(format!(
                "batch_stats: invalid axis list {axes:?} for {}",
                input.shape()
            )));
        }
        reduced[a] = true;
    }
    let kept: Vec<usize> = (0..dims.len()).filter(|&a| !reduced[a]).map(|a| dims[a]).collect();
    let features: usize = kept.iter().product();
    let count = input.numel() / features;

    // Stride of every axis in the kept-index space (0 for reduced axes).
    let mut kstride = vec![0usize; dims.len()];
    let mut s = 1;
    for a in (0..dims.len()).rev() {
        if !reduced[a] {
            kstride[a] = s;
            s *= dims[a];
        }
    }

    let feature_of = |visit: &mut dyn FnMut(usize, f64)| {
        let mut idx = vec![0usize; dims.len()];
        let mut f = 0usize;
        for &v in input.data() {
            visit(f, v);
            for a in (0..dims.len()).rev() {
                idx[a] += 1;
                f += kstride[a];
                if idx[a] < dims[a] {
                    break;
                }
                f -= kstride[a] * dims[a];
                idx[a] = 0;
            }
        }
    };

    let mut sums = vec![0.0; features];
    feature_of(&mut |f, v| sums[f] += v);
    let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; features];
    feature_of(&mut |f, v| {
        let d = v - means[f];
        sq[f] += d * d;
    });
    let vars: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();

    let out_dims = if kept.is_empty() { vec![1] } else { kept };
    let mean = Tensor::from_parts(&out_dims, means);
    let var = Tensor::from_parts(&out_dims, vars);
    mean.ensure_finite("batch_stats")?;
    var.ensure_finite("batch_stats")?;
    Ok((mean, var))
}

/// Per-channel statistics of data laid out as `[batch, channels, spatial]`.
///
/// Same summation order as `batch_stats(x, &[0, 2, 3])` (or `&[0]` for 2-D
/// input), so the two agree bitwise.
pub(crate) fn channel_stats(data: &[f64], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let row = &data[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
            for &v in row {
                mean[c] += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for b in 0..batch {
        for c in 0..channels {
            let row = &data[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
            let m = mean[c];
            for &v in row {
                let d = v - m;
                var[c] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    #[test]
    fn constant_batch_has_zero_variance() {
        let x = Tensor::full(&[5, 3], 2.5).unwrap();
        let (m, v) = batch_stats(&x, &[0]).unwrap();
        assert_eq!(m.data(), &[2.5; 3]);
        assert_eq!(v.data(), &[0.0; 3]);
    }

    #[test]
    fn two_point_case() {
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 2.0]).unwrap();
        let (m, v) = batch_stats(&x, &[0]).unwrap();
        assert_eq!(m.data(), &[1.0]);
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn matches_two_pass_oracle() {
        let x = random_tensor(&[128, 16], 77);
        let (m, v) = batch_stats(&x, &[0]).unwrap();
        for f in 0..16 {
            let col: Vec<f64> = (0..128).map(|b| x.data()[b * 16 + f]).collect();
            let mean = col.iter().sum::<f64>() / 128.0;
            let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 128.0;
            assert!((m.data()[f] - mean).abs() < 1e-12);
            assert!((v.data()[f] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_reduction_keeps_channels() {
        let x = random_tensor(&[4, 3, 2, 5], 5);
        let (m, v) = batch_stats(&x, &[0, 2, 3]).unwrap();
        assert_eq!(m.dims(), &[3]);
        let (fm, fv) = channel_stats(x.data(), 4, 3, 10);
        assert_eq!(m.data(), fm.as_slice());
        assert_eq!(v.data(), fv.as_slice());

        let (all, _) = batch_stats(&x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(all.dims(), &[1]);
    }

    #[test]
    fn rejects_empty_and_invalid_axes() {
        let x = random_tensor(&[4, 3], 1);
        assert!(batch_stats(&x, &[]).is_err());
        assert!(batch_stats(&x, &[2]).is_err());
        assert!(batch_stats(&x, &[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn variance_shift_and_scale(seed in 0u64..1000, shift in -10.0f64..10.0, scale in -3.0f64..3.0) {
            let x = random_tensor(&[16, 4], seed);
            let (_, v) = batch_stats(&x, &[0]).unwrap();
            let (_, vs) = batch_stats(&x.map(|e| e + shift).unwrap(), &[0]).unwrap();
            let (_, vm) = batch_stats(&x.map(|e| e * scale).unwrap(), &[0]).unwrap();
            for f in 0..4 {
                prop_assert!((vs.data()[f] - v.data()[f]).abs() < 1e-12);
                prop_assert!((vm.data()[f] - scale * scale * v.data()[f]).abs() < 1e-12);
                prop_assert!(v.data()[f] >= 0.0);
            }
        }
    }
}
