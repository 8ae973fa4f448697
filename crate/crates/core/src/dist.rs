//! Diagonal Gaussians, categorical and tanh-squashed Gaussian policies.
//!
//! All random draws come from caller-owned generators so that a training
//! run is a pure function of its seeds.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::softplus;
use crate::{Error, Result};

const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

/// Standard normal noise of the given shape.
pub fn normal_noise(shape: &[usize], dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Batch of diagonal Gaussians; `mean` and `std` have shape `(batch, dim)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub std: Tensor,
}

impl GaussianParams {
    /// Splits raw head outputs `(batch, 2·dim)` into mean and a positive
    /// stddev: `softplus(raw) + min_std`.
    pub fn from_raw(raw: &Tensor, min_std: f64) -> Result<Self> {
        let dim = raw.dim(D::Minus1)? / 2;
        let mean = raw.narrow(D::Minus1, 0, dim)?;
        let std = (softplus(&raw.narrow(D::Minus1, dim, dim)?)? + min_std)?;
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.dims().last().copied().unwrap_or(0)
    }

    /// Reparameterized sample `mean + std ⊙ ε` for a given ε.
    pub fn sample_with(&self, eps: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.std * eps)?)?)
    }

    pub fn rsample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let eps = normal_noise(self.mean.dims(), self.mean.dtype(), rng)?;
        self.sample_with(&eps)
    }

    pub fn detach(&self) -> Self {
        Self { mean: self.mean.detach(), std: self.std.detach() }
    }

    /// Per-row entropy, shape `(batch,)`.
    pub fn entropy(&self) -> Result<Tensor> {
        Ok((self.std.log()? + HALF_LN_2PI_E)?.sum(D::Minus1)?)
    }
}

/// Closed-form KL[q ‖ p] per row, summed over dimensions; shape `(batch,)`.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() || q.std.dims() != p.std.dims() {
        return Err(Error::Contract(format!(
            "KL between mismatched Gaussians {:?} and {:?}",
            q.mean.dims(),
            p.mean.dims()
        )));
    }
    let var_ratio = (&q.std / &p.std)?.sqr()?;
    let mean_term = ((&q.mean - &p.mean)? / &p.std)?.sqr()?;
    let log_ratio = (p.std.log()? - q.std.log()?)?;
    let per_dim = ((log_ratio + ((var_ratio + mean_term)? * 0.5)?)? - 0.5)?;
    Ok(per_dim.sum(D::Minus1)?)
}

/// Categorical distributions over the last dimension of `logits`.
#[derive(Debug, Clone)]
pub struct Categorical {
    pub log_probs: Tensor,
}

impl Categorical {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let lse = crate::nn::logsumexp_rows(logits)?;
        Ok(Self { log_probs: logits.broadcast_sub(&lse)? })
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.dims().last().copied().unwrap_or(0)
    }

    pub fn probs(&self) -> Result<Tensor> {
        Ok(self.log_probs.exp()?)
    }

    /// Exact entropy per row.
    pub fn entropy(&self) -> Result<Tensor> {
        Ok((self.probs()? * &self.log_probs)?.sum(D::Minus1)?.neg()?)
    }

    /// Draws one class per row by inverse-CDF sampling.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let probs = self.probs()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(probs
            .iter()
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                row.len() - 1
            })
            .collect())
    }

    pub fn mode(&self) -> Result<Vec<usize>> {
        Ok(self.log_probs.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|i| i as usize).collect())
    }

    /// log q(a) for the given class per row; shape `(batch,)`.
    pub fn log_prob(&self, actions: &[usize]) -> Result<Tensor> {
        let one_hot = one_hot(actions, self.num_classes(), self.log_probs.dtype())?;
        Ok((&self.log_probs * one_hot)?.sum(D::Minus1)?)
    }
}

pub fn one_hot(indices: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; indices.len() * classes];
    for (r, &i) in indices.iter().enumerate() {
        if i >= classes {
            return Err(Error::Contract(format!("class {i} out of range for {classes} classes")));
        }
        v[r * classes + i] = 1.0;
    }
    Ok(Tensor::from_vec(v, (indices.len(), classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Gaussian squashed through tanh, so samples lie in (-1, 1).
#[derive(Debug, Clone)]
pub struct SquashedGaussian {
    pub base: GaussianParams,
}

/// A reparameterized draw together with its pre-squash value.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub action: Tensor,
    pub pre_tanh: Tensor,
}

impl SquashedGaussian {
    pub fn rsample_with(&self, eps: &Tensor) -> Result<SquashedSample> {
        let pre_tanh = self.base.sample_with(eps)?;
        Ok(SquashedSample { action: pre_tanh.tanh()?, pre_tanh })
    }

    pub fn mode(&self) -> Result<Tensor> {
        Ok(self.base.mean.tanh()?)
    }

    /// Σ log(1 − tanh²(u)) per row, computed as 2·(ln 2 − u − softplus(−2u)).
    pub fn log_det_jacobian(pre_tanh: &Tensor) -> Result<Tensor> {
        let sp = softplus(&(pre_tanh * -2.0)?)?;
        let v = (((pre_tanh.neg()? - sp)? + std::f64::consts::LN_2)? * 2.0)?;
        Ok(v.sum(D::Minus1)?)
    }

    /// Single-sample entropy estimate: base entropy plus the log-Jacobian
    /// of the squashing at the drawn point.
    pub fn entropy_estimate(&self, sample: &SquashedSample) -> Result<Tensor> {
        Ok((self.base.entropy()? + Self::log_det_jacobian(&sample.pre_tanh)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(v: &[[f64; 2]]) -> Tensor {
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (v.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let g = GaussianParams { mean: t2(&[[0.3, -1.0]]), std: t2(&[[0.5, 2.0]]) };
        let kl = kl_gaussian(&g, &g).unwrap().to_vec1::<f64>().unwrap();
        assert!(kl[0].abs() < 1e-15);
    }

    #[test]
    fn kl_unit_std_mean_gap() {
        let q = GaussianParams { mean: t2(&[[1.0, -2.0]]), std: t2(&[[1.0, 1.0]]) };
        let p = GaussianParams { mean: t2(&[[0.0, 0.0]]), std: t2(&[[1.0, 1.0]]) };
        let kl = kl_gaussian(&q, &p).unwrap().to_vec1::<f64>().unwrap();
        assert!((kl[0] - (0.5 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let q = GaussianParams { mean: t2(&[[1.0, -2.0]]), std: t2(&[[1.0, 1.0]]) };
        let p = GaussianParams {
            mean: Tensor::new(&[[0.0f64]], &Device::Cpu).unwrap(),
            std: Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap(),
        };
        assert!(matches!(kl_gaussian(&q, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn min_std_floor() {
        let raw = t2(&[[0.0, -1e4]]);
        let g = GaussianParams::from_raw(&raw, 1e-4).unwrap();
        let s = g.std.to_vec2::<f64>().unwrap();
        assert!((s[0][0] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn categorical_entropy_and_sampling() {
        let logits = Tensor::new(&[[0.0f64, 0.0, 0.0], [100.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let c = Categorical::from_logits(&logits).unwrap();
        let h = c.entropy().unwrap().to_vec1::<f64>().unwrap();
        assert!((h[0] - 3f64.ln()).abs() < 1e-12);
        assert!(h[1].abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[c.sample(&mut rng).unwrap()[0]] += 1;
        }
        assert!(counts.iter().all(|&n| n > 900 && n < 1100), "{counts:?}");
        assert_eq!(c.mode().unwrap()[1], 0);
        let lp = c.log_prob(&[2, 0]).unwrap().to_vec1::<f64>().unwrap();
        assert!((lp[0] + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let g = GaussianParams { mean: t2(&[[0.0, 0.0]]), std: t2(&[[0.5, 3.0]]) };
        let h = g.entropy().unwrap().to_vec1::<f64>().unwrap()[0];
        let pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
        let expect = 0.5 * (pi_e * 0.25).ln() + 0.5 * (pi_e * 9.0).ln();
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn squash_log_det_matches_direct() {
        let u = Tensor::new(&[[0.3f64, -2.0], [0.0, 5.0]], &Device::Cpu).unwrap();
        let ld = SquashedGaussian::log_det_jacobian(&u).unwrap().to_vec1::<f64>().unwrap();
        let direct = |a: f64, b: f64| (1.0 - a.tanh().powi(2)).ln() + (1.0 - b.tanh().powi(2)).ln();
        assert!((ld[0] - direct(0.3, -2.0)).abs() < 1e-10);
        assert!((ld[1] - direct(0.0, 5.0)).abs() < 1e-8);
    }
}
