use super::{record, Element, Tensor};
use crate::error::{Error, Result};

pub struct BatchNormOutput<T: Element> {
    pub y: Tensor<T>,
    /// Running statistics after the momentum update (training mode only).
    pub updated_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel batch normalisation of `x[N,C,H,W]`.
///
/// Training mode normalises with the biased batch variance and blends the
/// unbiased variance into the running statistics with `momentum`;
/// inference mode uses the running statistics only.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    momentum: T,
    training: bool,
) -> Result<BatchNormOutput<T>> {
    let [n, c, h, w] = x.dims4("batch_norm")?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape("batch_norm", name, c, format!("{:?}", t.shape())));
        }
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("batch_norm: eps must be positive".into()));
    }
    if let Some(i) = running_var.data().iter().position(|v| *v < T::zero()) {
        return Err(Error::Data(format!("batch_norm: running variance of channel {i} is negative")));
    }
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let ch = |b: usize, ci: usize| &xd[(b * c + ci) * plane..(b * c + ci + 1) * plane];

    let (mean, var, updated) = if training {
        if count == 0 {
            return Err(Error::Usage("batch_norm: empty batch in training mode".into()));
        }
        let cnt = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = ch(b, ci).iter().fold(s, |a, v| a + *v);
            }
            let m = s / cnt;
            let mut ss = T::zero();
            for b in 0..n {
                ss = ch(b, ci).iter().fold(ss, |a, v| a + (*v - m) * (*v - m));
            }
            mean[ci] = m;
            var[ci] = ss / cnt;
        }
        let unbias = if count > 1 { cnt / T::lit((count - 1) as f64) } else { T::one() };
        let keep = T::one() - momentum;
        let new_mean = running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(r, m)| keep * *r + momentum * *m)
            .collect();
        let new_var = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(r, v)| keep * *r + momentum * *v * unbias)
            .collect();
        (mean, var, Some((new_mean, new_var)))
    } else {
        (running_mean.to_vec(), running_var.to_vec(), None)
    };

    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            for (i, v) in ch(b, ci).iter().enumerate() {
                let xh = (*v - mean[ci]) * inv_std[ci];
                xhat[off + i] = xh;
                y[off + i] = xh * gd[ci] + bd[ci];
            }
        }
    }

    let gamma_v = gamma.data_arc();
    let need = [x.requires_grad(), gamma.requires_grad(), beta.requires_grad()];
    let out = record("batch_norm", &[x, gamma, beta, running_mean, running_var], x.shape().to_vec(), y, move |g| {
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * plane;
                for i in 0..plane {
                    sum_g[ci] += g[off + i];
                    sum_gx[ci] += g[off + i] * xhat[off + i];
                }
            }
        }
        let gx = need[0].then(|| {
            let mut gx = vec![T::zero(); g.len()];
            let cnt = T::lit(count as f64);
            for b in 0..n {
                for ci in 0..c {
                    let off = (b * c + ci) * plane;
                    let scale = gamma_v[ci] * inv_std[ci];
                    for i in 0..plane {
                        gx[off + i] = if training {
                            scale * (g[off + i] - sum_g[ci] / cnt - xhat[off + i] * sum_gx[ci] / cnt)
                        } else {
                            scale * g[off + i]
                        };
                    }
                }
            }
            gx
        });
        vec![gx, need[1].then_some(sum_gx), need[2].then_some(sum_g), None, None]
    })?;
    Ok(BatchNormOutput {
        y: out,
        updated_stats: updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn neutral_parameters_are_identity() {
        let mut rng = Rng::seed(4);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 4, 4], 1.0);
        let ones = Tensor::ones(vec![3]);
        let zeros = Tensor::zeros(vec![3]);
        let out = batch_norm(&x, &ones, &zeros, &zeros, &ones, 1e-300, 0.1, false).unwrap();
        assert!(out.y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_channel_in_training_gives_beta() {
        let x = Tensor::full(vec![2, 1, 3, 3], 7.5f64);
        let gamma = Tensor::full(vec![1], 2.0);
        let beta = Tensor::full(vec![1], -0.25);
        let out = batch_norm(&x, &gamma, &beta, &Tensor::zeros(vec![1]), &Tensor::ones(vec![1]), 1e-3, 0.1, true).unwrap();
        assert!(out.y.data().iter().all(|v| *v == -0.25));
        let (m, v) = out.updated_stats.unwrap();
        assert!((m[0] - 0.75).abs() < 1e-12);
        assert!((v[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn inference_matches_elementwise_formula() {
        let mut rng = Rng::seed(9);
        let x: Tensor<f64> = rng.normal_tensor(&[2, 3, 2, 5], 2.0);
        let gamma = rng.normal_tensor(&[3], 1.0);
        let beta = rng.normal_tensor(&[3], 1.0);
        let mean = rng.normal_tensor(&[3], 1.0);
        let var = rng.uniform_tensor(&[3], 0.1, 3.0);
        let eps = 1e-3;
        let out = batch_norm(&x, &gamma, &beta, &mean, &var, eps, 0.1, false).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..5 {
                        let xv = x.at(&[b, c, i, j]);
                        let e = (xv - mean.data()[c]) / (var.data()[c] + eps).sqrt() * gamma.data()[c] + beta.data()[c];
                        assert!((out.y.at(&[b, c, i, j]) - e).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn negative_running_variance_is_data_error() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        let one = Tensor::ones(vec![1]);
        let neg = Tensor::full(vec![1], -1.0);
        assert!(matches!(
            batch_norm(&x, &one, &one, &one, &neg, 1e-3, 0.1, false),
            Err(Error::Data(_))
        ));
    }
}
