//! Training objectives: reconstruction loss on encoded flow, ego-motion
//! loss, and their weighted joint form.
//!
//! The reconstruction loss is the squared log-difference ||log(û+1) −
//! log(u+1)||² averaged over pixels and batch; inputs live in [0, 1] (encoded
//! flow), which keeps the logarithms valid. The ego-motion loss is
//! ||τ̂−τ||² + β·||θ̂−θ||² averaged over the batch, with β balancing angular
//! against translational error.

use crate::tensor::{Tape, TensorError, TensorId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("reconstruction loss input contains negative value {0}")]
    NegativeInput(f64),
    #[error("reconstruction output required when lambda > 0")]
    MissingReconstruction,
    #[error("motion tensors must be (N, 6): got {0:?} vs {1:?}")]
    MotionShape(Vec<usize>, Vec<usize>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Knobs shared by the training loop and the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Rotational error weight in the ego-motion loss.
    pub beta: f64,
    /// Reconstruction-loss weight in the joint objective; 0 trains the
    /// estimator alone.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early-stop patience in epochs, judged on validation ego-motion loss.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 20.0,
            lambda: 1.0,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 150,
            seed: 0,
            patience: 15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(LossError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(LossError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(LossError::Config("batch_size must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Squared log-difference reconstruction loss, mean over pixels and batch.
/// Both tensors must be non-negative (encoded flow in [0, 1]) and of equal
/// shape; the squared channel-wise differences are summed per pixel, then
/// averaged over all pixels.
pub fn loss_ae(tape: &mut Tape, reconstruction: TensorId, target: TensorId) -> Result<TensorId> {
    for id in [reconstruction, target] {
        if let Some(&bad) = tape.value(id).values().iter().find(|&&v| v < 0.0) {
            return Err(LossError::NegativeInput(bad));
        }
    }
    let shape = tape.value(reconstruction).shape().to_vec();
    if shape != tape.value(target).shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss_ae",
            detail: format!("{:?} vs {:?}", shape, tape.value(target).shape()),
        }));
    }
    // Pixel count excludes the channel axis; flat inputs count every element
    // as its own single-channel pixel.
    let pixels = if shape.len() >= 2 {
        tape.value(reconstruction).len() / shape.last().copied().unwrap_or(1)
    } else {
        tape.value(reconstruction).len()
    };
    let lr = tape.log1p(reconstruction)?;
    let lt = tape.log1p(target)?;
    let diff = tape.sub(lr, lt)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / pixels as f64))
}

/// Ego-motion loss ||τ̂−τ||² + β·||θ̂−θ||², mean over the batch. Inputs are
/// (N, 6) rows laid out [τx, τy, τz, θx, θy, θz].
pub fn loss_em(tape: &mut Tape, predicted: TensorId, label: TensorId, beta: f64) -> Result<TensorId> {
    let ps = tape.value(predicted).shape().to_vec();
    let ls = tape.value(label).shape().to_vec();
    if ps.len() != 2 || ps[1] != 6 || ps != ls {
        return Err(LossError::MotionShape(ps, ls));
    }
    let n = ps[0];
    let mut weights = Vec::with_capacity(n * 6);
    for _ in 0..n {
        weights.extend_from_slice(&[1.0, 1.0, 1.0, beta, beta, beta]);
    }
    let w = tape.leaf(crate::tensor::Tensor::new(vec![n, 6], weights)?);
    let diff = tape.sub(predicted, label)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Joint objective loss_em + λ·loss_ae. With λ = 0 the reconstruction term
/// (and its gradient) is skipped entirely.
pub fn loss_joint(
    tape: &mut Tape,
    motion: TensorId,
    motion_label: TensorId,
    reconstruction: Option<TensorId>,
    target: Option<TensorId>,
    config: &TrainConfig,
) -> Result<TensorId> {
    config.validate()?;
    let em = loss_em(tape, motion, motion_label, config.beta)?;
    if config.lambda == 0.0 {
        return Ok(em);
    }
    let (recon, tgt) = match (reconstruction, target) {
        (Some(r), Some(t)) => (r, t),
        _ => return Err(LossError::MissingReconstruction),
    };
    let ae = loss_ae(tape, recon, tgt)?;
    let weighted = tape.scale(ae, config.lambda);
    Ok(tape.add(em, weighted)?)
}

/// Finite-difference checks for both losses; complements
/// [`crate::layers::gradient_suite`].
pub fn gradient_suite(seeds: u64) -> crate::tensor::Result<crate::tensor::CheckReport> {
    use crate::tensor::{check_gradients, Tensor};

    let to_tensor_err = |e: LossError| match e {
        LossError::Tensor(t) => t,
        other => TensorError::Domain {
            op: "loss",
            detail: other.to_string(),
        },
    };

    let mut report = crate::tensor::CheckReport::default();
    for seed in 0..seeds {
        let mut rng = crate::rng::Rng::stream(0x10557, seed);
        let tag = |s: &str| format!("{s}[seed {seed}]");

        let shape = [2, 4, 5, 2];
        let n: usize = shape.iter().product();
        let recon = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.range(0.05, 0.95)).collect(),
        )
        .unwrap();
        let target = Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.range(0.05, 0.95)).collect(),
        )
        .unwrap();
        report.merge(check_gradients(
            &tag("loss-ae"),
            &[("recon", recon), ("target", target)],
            |tape, ids| loss_ae(tape, ids[0], ids[1]).map_err(to_tensor_err),
        )?);

        let pred = Tensor::new(vec![3, 6], (0..18).map(|_| rng.range(-2.0, 2.0)).collect()).unwrap();
        let label = Tensor::new(vec![3, 6], (0..18).map(|_| rng.range(-2.0, 2.0)).collect()).unwrap();
        report.merge(check_gradients(
            &tag("loss-em"),
            &[("pred", pred), ("label", label)],
            |tape, ids| loss_em(tape, ids[0], ids[1], 20.0).map_err(to_tensor_err),
        )?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_ae(recon: f64, target: f64) -> f64 {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::scalar(recon));
        let t = tape.leaf(Tensor::scalar(target));
        let l = loss_ae(&mut tape, r, t).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn ae_zero_for_identical_inputs() {
        assert_eq!(scalar_ae(0.37, 0.37), 0.0);
    }

    #[test]
    fn ae_scalar_log_two_squared() {
        let expected = std::f64::consts::LN_2 * std::f64::consts::LN_2;
        assert!((scalar_ae(1.0, 0.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn ae_rejects_negative_values() {
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::from_vec(vec![0.5, -0.1]));
        let t = tape.leaf(Tensor::from_vec(vec![0.5, 0.5]));
        assert!(matches!(
            loss_ae(&mut tape, r, t),
            Err(LossError::NegativeInput(_))
        ));
    }

    #[test]
    fn ae_nonnegative_and_zero_iff_equal() {
        let mut rng = crate::rng::Rng::seed_from(4);
        for _ in 0..50 {
            let a: Vec<f64> = (0..12).map(|_| rng.range(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.range(0.0, 1.0)).collect();
            let mut tape = Tape::new();
            let r = tape.leaf(Tensor::new(vec![3, 4], a.clone()).unwrap());
            let t = tape.leaf(Tensor::new(vec![3, 4], b.clone()).unwrap());
            let l = loss_ae(&mut tape, r, t).unwrap();
            let v = tape.value(l).item().unwrap();
            if a == b {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
    }

    fn em(pred: [f64; 6], label: [f64; 6], beta: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 6], pred.to_vec()).unwrap());
        let l = tape.leaf(Tensor::new(vec![1, 6], label.to_vec()).unwrap());
        let id = loss_em(&mut tape, p, l, beta).unwrap();
        tape.value(id).item().unwrap()
    }

    #[test]
    fn em_zero_for_equal_motion() {
        let y = [0.3, -0.2, 1.4, 0.01, 0.05, -0.02];
        assert_eq!(em(y, y, 20.0), 0.0);
    }

    #[test]
    fn em_hand_value() {
        // τ error (1,0,0), θ error (0,0.1,0), β = 20 -> 1 + 20·0.01 = 1.2
        let v = em([1.0, 0.0, 0.0, 0.0, 0.1, 0.0], [0.0; 6], 20.0);
        assert!((v - 1.2).abs() < 1e-15, "{v}");
    }

    #[test]
    fn em_beta_scales_only_rotation() {
        let pred = [1.0, 0.0, 0.0, 0.0, 0.1, 0.0];
        let base = em(pred, [0.0; 6], 1.0); // 1 + 0.01
        let scaled = em(pred, [0.0; 6], 3.0); // 1 + 0.03
        assert!((scaled - base - 2.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn em_symmetric_in_arguments_and_within_blocks() {
        let a = [0.4, -0.1, 0.9, 0.02, -0.03, 0.01];
        let b = [0.1, 0.3, 1.1, -0.01, 0.02, 0.04];
        assert_eq!(em(a, b, 20.0), em(b, a, 20.0));
        // Permute translation components and rotation components identically
        // in both arguments.
        let pa = [a[2], a[0], a[1], a[5], a[3], a[4]];
        let pb = [b[2], b[0], b[1], b[5], b[3], b[4]];
        assert!((em(a, b, 20.0) - em(pa, pb, 20.0)).abs() < 1e-15);
    }

    #[test]
    fn em_batch_mean() {
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::new(
                vec![2, 6],
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
        );
        let l = tape.leaf(Tensor::zeros(&[2, 6]));
        let id = loss_em(&mut tape, p, l, 20.0).unwrap();
        assert_eq!(tape.value(id).item().unwrap(), 0.5);
    }

    #[test]
    fn joint_lambda_zero_equals_em() {
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 6], vec![1.0, 0.0, 0.0, 0.0, 0.1, 0.0]).unwrap());
        let l = tape.leaf(Tensor::zeros(&[1, 6]));
        let j = loss_joint(&mut tape, p, l, None, None, &cfg).unwrap();
        assert!((tape.value(j).item().unwrap() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn joint_adds_weighted_ae() {
        // Both sub-losses 0.5 with λ = 1 -> 1.0.
        // em: τ error (sqrt(0.5), 0, 0) gives 0.5; ae: scalar pair chosen so
        // the squared log difference is 0.5.
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 6], vec![0.5f64.sqrt(), 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let l = tape.leaf(Tensor::zeros(&[1, 6]));
        // log(1+r) = sqrt(0.5) -> r = exp(sqrt(0.5)) - 1
        let r = tape.leaf(Tensor::scalar(0.5f64.sqrt().exp() - 1.0));
        let t = tape.leaf(Tensor::scalar(0.0));
        let j = loss_joint(&mut tape, p, l, Some(r), Some(t), &cfg).unwrap();
        assert!((tape.value(j).item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_requires_reconstruction_when_lambda_positive() {
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[1, 6]));
        let l = tape.leaf(Tensor::zeros(&[1, 6]));
        assert!(matches!(
            loss_joint(&mut tape, p, l, None, None, &cfg),
            Err(LossError::MissingReconstruction)
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        cfg.beta = 20.0;
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        let report = gradient_suite(3).unwrap();
        assert!(report.passed(), "{:?}", report.lines());
    }
}
