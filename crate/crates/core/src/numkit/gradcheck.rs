use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per input tensor, same order as `params`.
    pub per_tensor: Vec<f64>,
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences.
///
/// `loss` evaluates the scalar objective and `grad` returns one gradient per
/// entry of `params`. The relative error of a coordinate is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_difference_check<L, G>(
    params: &[Tensor],
    loss: L,
    grad: G,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let analytic = grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Argument(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;

    for (ti, p) in params.iter().enumerate() {
        if analytic[ti].len() != p.len() {
            return Err(Error::Argument(format!("gradient {ti} has wrong length")));
        }
        let n = p.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_tensor).into_vec()
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let orig = p.data()[c];
            work[ti].data_mut()[c] = orig + cfg.eps;
            let up = loss(&work)?;
            work[ti].data_mut()[c] = orig - cfg.eps;
            let down = loss(&work)?;
            work[ti].data_mut()[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_difference_check",
                });
            }
            let fd = (up - down) / (2.0 * cfg.eps);
            let ad = analytic[ti].data()[c];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
        per_tensor.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        coords_checked: checked,
    })
}
