//! The four training loss terms and their weighted total.
//!
//! All losses are built from graph ops, so gradients flow to whatever
//! produced the inputs. Conventions:
//!
//! - contrastive: anchors the RGB-side structure codes against the
//!   depth-side codes one-directionally, with the positive pair excluded
//!   from the denominator; rows are L2-normalized inside the loss only.
//! - anticontrastive: mean squared cosine between the appearance and
//!   structure codes of the same image, scaled by 1/(2B).
//! - kl: positive penalty toward the unit-normal prior, averaged over
//!   batch and latent dimension and halved.
//! - reconstruction: squared error summed over pixels, averaged over the
//!   batch and halved.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorError};

#[derive(Debug, Clone, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("loss term '{term}' is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
}

/// Loss weighting configuration. A lambda of 0 disables its term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_anti: f64,
    pub lambda_kl: f64,
    pub tau: f64,
    /// When true the positive pair joins the contrastive denominator
    /// (the standard InfoNCE form). Default false: the denominator sums
    /// over j != i only.
    pub include_positive_in_denominator: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_con: 0.02,
            lambda_anti: 0.0005,
            lambda_kl: 5e-5,
            tau: 0.1,
            include_positive_in_denominator: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.tau <= 0.0 {
            return Err(LossError::NonPositiveTau(self.tau));
        }
        assert!(
            self.lambda_con >= 0.0 && self.lambda_anti >= 0.0 && self.lambda_kl >= 0.0,
            "loss weights must be non-negative"
        );
        Ok(())
    }
}

/// Scalar values of one loss evaluation; component terms are recorded
/// unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub rec: f64,
    pub con: f64,
    pub anti: f64,
    pub kl: f64,
}

/// Batched one-directional contrastive loss between matched rows of
/// `za` (anchors) and `zb` (candidates), both (B, d):
///
/// -sum_i log[ exp(za_i . zb_i / tau) / sum_{j != i} exp(za_i . zb_j / tau) ]
///
/// Rows are L2-normalized before the dot products. Computed via stable
/// log-sum-exp.
pub fn contrastive_loss(
    za: &Tensor,
    zb: &Tensor,
    tau: f64,
    include_positive_in_denominator: bool,
) -> Result<Tensor, LossError> {
    if tau <= 0.0 {
        return Err(LossError::NonPositiveTau(tau));
    }
    if za.shape() != zb.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: za.shape().to_vec(),
            rhs: zb.shape().to_vec(),
        }
        .into());
    }
    let b = *za.shape().first().unwrap_or(&0);
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    let zan = za.l2_normalize_rows()?;
    let zbn = zb.l2_normalize_rows()?;
    let sim = zan.matmul(&zbn.transpose()?)?.mul_scalar(1.0 / tau);
    let pos = sim.diag_part()?;
    let lse = sim.logsumexp_rows(!include_positive_in_denominator)?;
    Ok(lse.sub(&pos)?.sum())
}

/// Mean squared cosine between matched rows of the appearance and
/// structure codes, times 1/2:
///
/// (1 / 2B) * sum_i cos^2(za_i, zs_i)
pub fn anticontrastive_loss(za: &Tensor, zs: &Tensor) -> Result<Tensor, LossError> {
    if za.shape() != zs.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "anticontrastive_loss",
            lhs: za.shape().to_vec(),
            rhs: zs.shape().to_vec(),
        }
        .into());
    }
    let b = *za.shape().first().unwrap_or(&0);
    for (name, t) in [("za", za), ("zs", zs)] {
        let d = t.numel() / b.max(1);
        for i in 0..b {
            if t.data()[i * d..(i + 1) * d].iter().all(|&v| v == 0.0) {
                let _ = name;
                return Err(TensorError::ZeroNormRow {
                    op: "anticontrastive_loss",
                    row: i,
                }
                .into());
            }
        }
    }
    let dots = za.batched_dot(zs)?;
    let norm_prod = za.batched_dot(za)?.mul(&zs.batched_dot(zs)?)?.sqrt()?;
    let cos = dots.mul(&norm_prod.recip()?)?;
    Ok(cos.square().sum().mul_scalar(0.5 / b as f64))
}

/// Positive KL penalty toward the unit-normal prior:
///
/// (1 / 2Bd) * sum_{i,j} (mu^2 + sigma^2 - log sigma^2 - 1),  sigma^2 = exp(logvar)
///
/// The caller sums this over all encoders it regularizes.
pub fn kl_loss(mus: &Tensor, logvars: &Tensor) -> Result<Tensor, LossError> {
    if mus.shape() != logvars.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_loss",
            lhs: mus.shape().to_vec(),
            rhs: logvars.shape().to_vec(),
        }
        .into());
    }
    let n = mus.numel().max(1) as f64;
    let term = mus
        .square()
        .add(&logvars.exp())?
        .sub(logvars)?
        .add_scalar(-1.0);
    Ok(term.sum().mul_scalar(0.5 / n))
}

/// Reconstruction loss: squared error summed over all non-batch dims,
/// averaged over the batch and halved:
///
/// (1 / 2B) * sum_i |x_i - xhat_i|^2
pub fn recon_loss(x: &Tensor, xhat: &Tensor) -> Result<Tensor, LossError> {
    if x.shape() != xhat.shape() || x.rank() == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            lhs: x.shape().to_vec(),
            rhs: xhat.shape().to_vec(),
        }
        .into());
    }
    let b = x.shape()[0].max(1) as f64;
    Ok(x.sub(xhat)?.square().sum().mul_scalar(0.5 / b))
}

/// Weighted total: rec + lambda_con * con + lambda_anti * anti + lambda_kl * kl.
///
/// Returns the graph scalar (for backward) plus a report of the raw
/// component values. Any non-finite component is rejected by name.
pub fn total_loss(
    rec: &Tensor,
    con: &Tensor,
    anti: &Tensor,
    kl: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport), LossError> {
    weights.validate()?;
    let mut values = [0.0; 4];
    for (slot, (term, t)) in values
        .iter_mut()
        .zip([("rec", rec), ("con", con), ("anti", anti), ("kl", kl)])
    {
        let v = t.item()?;
        if !v.is_finite() {
            return Err(LossError::NonFinite { term, value: v });
        }
        *slot = v;
    }
    let total = rec
        .add(&con.mul_scalar(weights.lambda_con))?
        .add(&anti.mul_scalar(weights.lambda_anti))?
        .add(&kl.mul_scalar(weights.lambda_kl))?;
    let report = LossReport {
        total: total.item()?,
        rec: values[0],
        con: values[1],
        anti: values[2],
        kl: values[3],
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, &[b, d]).unwrap()
    }

    // Unbatched per-sample reference: normalizes, then loops indices
    // exactly as the loss definition reads.
    fn contrastive_oracle(za: &Tensor, zb: &Tensor, tau: f64, include_positive: bool) -> f64 {
        let (b, d) = (za.shape()[0], za.shape()[1]);
        let norm_rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..b)
                .map(|i| {
                    let row = &t.data()[i * d..(i + 1) * d];
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let a = norm_rows(za);
        let bb = norm_rows(zb);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let mut loss = 0.0;
        for i in 0..b {
            let num = (dot(&a[i], &bb[i]) / tau).exp();
            let mut den = 0.0;
            for j in 0..b {
                if !include_positive && j == i {
                    continue;
                }
                den += (dot(&a[i], &bb[j]) / tau).exp();
            }
            loss -= (num / den).ln();
        }
        loss
    }

    fn anti_oracle(za: &Tensor, zs: &Tensor) -> f64 {
        let (b, d) = (za.shape()[0], za.shape()[1]);
        let mut s = 0.0;
        for i in 0..b {
            let x = &za.data()[i * d..(i + 1) * d];
            let y = &zs.data()[i * d..(i + 1) * d];
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = dot / (nx * ny);
            s += cos * cos;
        }
        s / (2.0 * b as f64)
    }

    fn kl_oracle(mus: &Tensor, logvars: &Tensor) -> f64 {
        let (b, d) = (mus.shape()[0], mus.shape()[1]);
        let mut s = 0.0;
        for i in 0..b {
            for j in 0..d {
                let mu = mus.data()[i * d + j];
                let lv = logvars.data()[i * d + j];
                s += mu * mu + lv.exp() - lv - 1.0;
            }
        }
        s / (2.0 * (b * d) as f64)
    }

    fn rec_oracle(x: &Tensor, xhat: &Tensor) -> f64 {
        let b = x.shape()[0] as f64;
        x.data()
            .iter()
            .zip(xhat.data())
            .map(|(a, p)| (a - p) * (a - p))
            .sum::<f64>()
            / (2.0 * b)
    }

    #[test]
    fn contrastive_identical_rows_is_zero() {
        let v = vec![0.6, 0.8];
        let z = Tensor::from_vec([v.clone(), v].concat(), &[2, 2]).unwrap();
        let loss = contrastive_loss(&z, &z, 0.37, false).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-12, "loss {}", loss);
    }

    #[test]
    fn contrastive_orthonormal_closed_form() {
        let e = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let loss = contrastive_loss(&e, &e, 0.1, false).unwrap().item().unwrap();
        assert!((loss - (-20.0)).abs() < 1e-9, "loss {}", loss);
    }

    #[test]
    fn contrastive_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let za = random_matrix(&mut rng, 8, 16);
            let zb = random_matrix(&mut rng, 8, 16);
            for include in [false, true] {
                let got = contrastive_loss(&za, &zb, 0.1, include).unwrap().item().unwrap();
                let want = contrastive_oracle(&za, &zb, 0.1, include);
                assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
            }
        }
    }

    #[test]
    fn contrastive_batch_and_tau_preconditions() {
        let z = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        assert!(matches!(
            contrastive_loss(&z, &z, 0.1, false),
            Err(LossError::BatchTooSmall(1))
        ));
        let z2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert!(matches!(
            contrastive_loss(&z2, &z2, 0.0, false),
            Err(LossError::NonPositiveTau(_))
        ));
    }

    #[test]
    fn anticontrastive_single_aligned_pair_is_half() {
        let v = Tensor::from_vec(vec![2.0, -1.0, 0.5], &[1, 3]).unwrap();
        let loss = anticontrastive_loss(&v, &v).unwrap().item().unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn anticontrastive_orthogonal_rows_is_zero() {
        let za = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let zs = Tensor::from_vec(vec![0.0, 3.0, -2.0, 0.0], &[2, 2]).unwrap();
        let loss = anticontrastive_loss(&za, &zs).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn anticontrastive_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let za = random_matrix(&mut rng, 8, 16);
            let zs = random_matrix(&mut rng, 8, 16);
            let got = anticontrastive_loss(&za, &zs).unwrap().item().unwrap();
            let want = anti_oracle(&za, &zs);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn anticontrastive_zero_row_errors() {
        let za = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let zs = Tensor::from_vec(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert!(matches!(
            anticontrastive_loss(&za, &zs),
            Err(LossError::Tensor(TensorError::ZeroNormRow { .. }))
        ));
    }

    #[test]
    fn kl_at_prior_is_zero() {
        let mu = Tensor::zeros(&[3, 4]);
        let lv = Tensor::zeros(&[3, 4]);
        assert_eq!(kl_loss(&mu, &lv).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_mean_closed_form() {
        let mu = Tensor::from_vec(vec![1.0], &[1, 1]).unwrap();
        let lv = Tensor::zeros(&[1, 1]);
        let v = kl_loss(&mu, &lv).unwrap().item().unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_oracle_and_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let mu = random_matrix(&mut rng, 6, 10);
            let lv = random_matrix(&mut rng, 6, 10);
            let got = kl_loss(&mu, &lv).unwrap().item().unwrap();
            let want = kl_oracle(&mu, &lv);
            assert!((got - want).abs() < 1e-12);
            assert!(got >= 0.0, "kl {}", got);
        }
    }

    #[test]
    fn recon_identical_is_zero_and_single_pixel_closed_form() {
        let x = Tensor::from_vec(vec![0.25; 12], &[1, 3, 2, 2]).unwrap();
        assert_eq!(recon_loss(&x, &x).unwrap().item().unwrap(), 0.0);
        let mut xhat = x.data().to_vec();
        xhat[5] += 0.5;
        let xhat = Tensor::from_vec(xhat, &[1, 3, 2, 2]).unwrap();
        let v = recon_loss(&x, &xhat).unwrap().item().unwrap();
        assert!((v - 0.125).abs() < 1e-15);
    }

    #[test]
    fn recon_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 4, 27);
            let y = random_matrix(&mut rng, 4, 27);
            let got = recon_loss(&x, &y).unwrap().item().unwrap();
            assert!((got - rec_oracle(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_weighted_sum_and_report() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda_con, w.lambda_anti, w.lambda_kl, w.tau),
            (0.02, 0.0005, 5e-5, 0.1)
        );
        let (total, report) = total_loss(
            &Tensor::scalar(1.0),
            &Tensor::scalar(2.0),
            &Tensor::scalar(4.0),
            &Tensor::scalar(8.0),
            &w,
        )
        .unwrap();
        assert!((total.item().unwrap() - 1.0424).abs() < 1e-12);
        assert_eq!(report.rec, 1.0);
        assert_eq!(report.con, 2.0);
        let identity = report.rec
            + w.lambda_con * report.con
            + w.lambda_anti * report.anti
            + w.lambda_kl * report.kl;
        assert!((report.total - identity).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_lambdas_equals_rec() {
        let w = LossWeights {
            lambda_con: 0.0,
            lambda_anti: 0.0,
            lambda_kl: 0.0,
            ..Default::default()
        };
        let (total, _) = total_loss(
            &Tensor::scalar(3.25),
            &Tensor::scalar(99.0),
            &Tensor::scalar(-7.0),
            &Tensor::scalar(2.0),
            &w,
        )
        .unwrap();
        assert_eq!(total.item().unwrap(), 3.25);
    }

    #[test]
    fn total_loss_rejects_non_finite_by_name() {
        let err = total_loss(
            &Tensor::scalar(1.0),
            &Tensor::scalar(f64::NAN),
            &Tensor::scalar(0.0),
            &Tensor::scalar(0.0),
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, LossError::NonFinite { term: "con", .. }));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::autodiff::finite_difference_check;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let za = random_matrix(&mut rng, 4, 8);
        let zb = random_matrix(&mut rng, 4, 8);

        let err = finite_difference_check(
            |t| contrastive_loss(t, &zb, 0.1, false).map_err(|_| unreachable_err()),
            &za,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "contrastive fd err {}", err);

        let err = finite_difference_check(
            |t| anticontrastive_loss(t, &zb).map_err(|_| unreachable_err()),
            &za,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "anticontrastive fd err {}", err);

        let err = finite_difference_check(
            |t| kl_loss(t, &zb).map_err(|_| unreachable_err()),
            &za,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "kl fd err {}", err);

        let err = finite_difference_check(
            |t| recon_loss(t, &zb).map_err(|_| unreachable_err()),
            &za,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "recon fd err {}", err);
    }

    fn unreachable_err() -> TensorError {
        TensorError::NoGraph
    }

    #[test]
    fn rotating_matched_pairs_away_increases_contrastive() {
        // 2-row orthonormal construction: rotate Zb rows away from Za rows.
        let za = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for step in 0..5 {
            let theta = step as f64 * 0.3;
            let zb = Tensor::from_vec(
                vec![theta.cos(), theta.sin(), -theta.sin(), theta.cos()],
                &[2, 2],
            )
            .unwrap();
            let loss = contrastive_loss(&za, &zb, 0.1, false).unwrap().item().unwrap();
            if step > 0 {
                assert!(loss > prev, "loss not strictly increasing: {} <= {}", loss, prev);
            }
            prev = loss;
        }
    }
}
