//! Loss functions with the right definitions, central-finite-difference
//! gradient verification, and a small Adam loop over only the mask-admitted
//! parameters.
//!
//! Everything is in nats. The loss/perplexity pair only lines up under the
//! natural log, which fixes the convention crate-wide.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backprop;
use crate::linalg::{Matrix, SeededRng, Vector};
use crate::math;
use crate::model::{HybridModel, ModelError};

/// Below this, a `q` probability is treated as zero support: the loss term
/// would be infinite, and that surfaces as an error instead of an Inf.
pub const Q_FLOOR: f64 = 1e-300;

/// Accumulated rounding in a KL sum over nearly-identical distributions can
/// land a few 1e-17 below zero even though the true value is nonnegative.
/// Negatives inside this band are floored to 0.0; anything more negative is
/// a formula bug and is passed through where it will fail loudly.
pub const KL_NOISE_FLOOR: f64 = 1e-12;

/// Absolute-difference fallback for gradient coordinates where both sides
/// are essentially zero and a relative comparison is meaningless.
pub const GRAD_ABS_FALLBACK: f64 = 1e-8;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("distribution lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("infinite loss: p[{index}] = {p} > 0 but q[{index}] = {q} has no support")]
    InfiniteLoss { index: usize, p: f64, q: f64 },
    #[error("probabilities must be finite and nonnegative, got {value} at {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1 within 1e-9")]
    NotNormalized { sum: f64 },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("logits have {rows} rows but there are {targets} targets")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("target id {id} at position {index} out of range for vocab {vocab}")]
    TargetOutOfRange {
        index: usize,
        id: usize,
        vocab: usize,
    },
    #[error("model has no trainable parameters under its mask")]
    NoTrainableParameters,
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("training data stream is empty")]
    EmptyData,
    #[error("batch contains a sequence pair of unequal lengths: {input} vs {target}")]
    UnequalPair { input: usize, target: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}; parameter norms: {norms:?}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        norms: Vec<(String, f64)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ─── Distributions and losses ────────────────────────────────────────────

/// A probability vector: finite, nonnegative, summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vector,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        let mut sum = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidProbability { index, value });
            }
            sum += value;
        }
        if math::abs(sum - 1.0) > 1e-9 {
            return Err(LossError::NotNormalized { sum });
        }
        Ok(Self {
            probs: Vector::new(probs).expect("finite checked above"),
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        self.probs.data()
    }
}

fn check_support(p: &Distribution, q: &Distribution) -> Result<(), LossError> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    for (index, (&pv, &qv)) in p.data().iter().zip(q.data()).enumerate() {
        if pv > 0.0 && qv < Q_FLOOR {
            return Err(LossError::InfiniteLoss {
                index,
                p: pv,
                q: qv,
            });
        }
    }
    Ok(())
}

/// Cross-entropy `-sum p ln q`, in nats.
pub fn cross_entropy(p: &Distribution, q: &Distribution) -> Result<f64, LossError> {
    check_support(p, q)?;
    let mut acc = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            acc -= pv * math::ln(qv);
        }
    }
    Ok(acc)
}

/// KL divergence `sum p ln(p/q)`, in nats; terms with `p = 0` contribute 0.
///
/// This is not cross-entropy: `CE(p, q) = H(p) + KL(p, q)`, and conflating
/// the two silently shifts every reported number by the entropy of `p`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, LossError> {
    check_support(p, q)?;
    let mut acc = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            acc += pv * (math::ln(pv) - math::ln(qv));
        }
    }
    if acc < 0.0 && acc >= -KL_NOISE_FLOOR {
        acc = 0.0;
    }
    Ok(acc)
}

/// Mean next-token negative log-likelihood over positions, natural log.
pub fn sequence_lm_loss(logits: &Matrix, targets: &[usize]) -> Result<f64, TrainError> {
    if logits.rows() != targets.len() {
        return Err(TrainError::ShapeMismatch {
            rows: logits.rows(),
            targets: targets.len(),
        });
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    for (index, &id) in targets.iter().enumerate() {
        if id >= vocab {
            return Err(TrainError::TargetOutOfRange { index, id, vocab });
        }
        let row = logits.row(index);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| math::max(m, v));
        let lse = math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
        total += lse - (row[id] - max);
    }
    Ok(total / targets.len() as f64)
}

// ─── Batches ─────────────────────────────────────────────────────────────

/// Paired input/target token sequences (targets are next-token shifted).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl TrainBatch {
    pub fn from_pairs(pairs: Vec<(Vec<usize>, Vec<usize>)>) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        for (input, target) in &pairs {
            if input.len() != target.len() {
                return Err(TrainError::UnequalPair {
                    input: input.len(),
                    target: target.len(),
                });
            }
            if input.is_empty() {
                return Err(TrainError::EmptyBatch);
            }
        }
        Ok(Self { pairs })
    }

    /// Builds next-token pairs from raw token sequences; each sequence must
    /// have at least two tokens.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self, TrainError> {
        let mut pairs = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.len() < 2 {
                return Err(TrainError::EmptyBatch);
            }
            pairs.push((seq[..seq.len() - 1].to_vec(), seq[1..].to_vec()));
        }
        Self::from_pairs(pairs)
    }

    pub fn pairs(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.pairs
    }

    pub fn positions(&self) -> usize {
        self.pairs.iter().map(|(_, t)| t.len()).sum()
    }
}

/// The bundled copy task: each sequence is one byte repeated, so the correct
/// next token is always the current one. A functioning gradient path learns
/// this quickly, which is what makes it a useful smoke signal.
pub fn copy_task_batches(
    n_batches: usize,
    seqs_per_batch: usize,
    seq_len: usize,
    vocab: usize,
    seed: u64,
) -> Vec<TrainBatch> {
    let mut rng = SeededRng::new(seed);
    (0..n_batches)
        .map(|_| {
            let seqs: Vec<Vec<usize>> = (0..seqs_per_batch)
                .map(|_| {
                    let byte = (rng.next_u64() % vocab as u64) as usize;
                    vec![byte; seq_len]
                })
                .collect();
            TrainBatch::from_sequences(&seqs).expect("copy task sequences are valid")
        })
        .collect()
}

// ─── Gradient verification ───────────────────────────────────────────────

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GradCheckEntry {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Largest relative error among coordinates whose gradient is big enough
    /// (either side at least 1e-6) for a relative comparison to mean
    /// anything.
    pub max_rel_error: f64,
    pub checked: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }
}

/// Verifies analytic gradients against central finite differences
/// `(f(x+h) - f(x-h)) / 2h` on the batch loss.
///
/// All gate scalars are checked; matrix tensors are checked at a seeded
/// sample of coordinates. A coordinate passes when the relative error is
/// under `tolerance` or the absolute difference is under
/// [`GRAD_ABS_FALLBACK`].
pub fn grad_check(
    model: &HybridModel,
    batch: &TrainBatch,
    step_size: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    grad_check_with_fault(model, batch, step_size, tolerance, 1.0)
}

/// [`grad_check`] with a multiplier applied to the analytic gradients.
///
/// `fault_scale = 1.0` is the honest check. Any other value deliberately
/// corrupts the analytic side; the check must then fail, which is how the
/// checker itself is tested (a verifier that cannot fail verifies nothing).
pub fn grad_check_with_fault(
    model: &HybridModel,
    batch: &TrainBatch,
    step_size: f64,
    tolerance: f64,
    fault_scale: f64,
) -> Result<GradCheckReport, TrainError> {
    let ids = model.trainable_param_ids();
    if ids.is_empty() {
        return Err(TrainError::NoTrainableParameters);
    }
    let (_, grads) = backprop::batch_loss_and_gradients(model, batch.pairs())?;

    let mut entries = Vec::new();
    let mut coord_rng = SeededRng::new(0x5eed_c0de);
    for &id in &ids {
        let len = model.param(id).len();
        let coords: Vec<usize> = if len <= 6 {
            (0..len).collect()
        } else {
            let mut set = alloc::collections::BTreeSet::new();
            while set.len() < 6 {
                set.insert((coord_rng.next_u64() % len as u64) as usize);
            }
            set.into_iter().collect()
        };
        let name = model.param_name(id);
        for coord in coords {
            let analytic = grads.get(id)[coord] * fault_scale;
            let mut plus = model.clone();
            plus.param_mut(id)[coord] += step_size;
            let f_plus = backprop::batch_loss(&plus, batch.pairs())?;
            let mut minus = model.clone();
            minus.param_mut(id)[coord] -= step_size;
            let f_minus = backprop::batch_loss(&minus, batch.pairs())?;
            let numeric = (f_plus - f_minus) / (2.0 * step_size);

            let abs_error = math::abs(analytic - numeric);
            let denom = math::max(math::abs(analytic), math::abs(numeric));
            let rel_error = if denom > 0.0 { abs_error / denom } else { 0.0 };
            let pass = abs_error <= GRAD_ABS_FALLBACK || rel_error <= tolerance;
            entries.push(GradCheckEntry {
                name: name.clone(),
                coord,
                analytic,
                numeric,
                rel_error,
                abs_error,
                pass,
            });
        }
    }

    let max_rel_error = entries
        .iter()
        .filter(|e| math::max(math::abs(e.analytic), math::abs(e.numeric)) >= 1e-6)
        .fold(0.0, |m, e| math::max(m, e.rel_error));
    let checked = entries.len();
    let pass = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        checked,
        pass,
    })
}

// ─── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TrainReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Always `exp(final_loss)`; nats.
    pub perplexity: f64,
}

/// Adam over the mask-admitted parameters only. Batches are cycled in order;
/// the loss curve records the pre-update loss of each step's batch.
///
/// `initial_loss`/`final_loss` are the mean loss over all provided batches
/// before and after training, so the pair is comparable even when batches
/// differ.
pub fn train(
    model: &mut HybridModel,
    batches: &[TrainBatch],
    steps: usize,
    lr: f64,
) -> Result<TrainReport, TrainError> {
    if model.trainable_param_ids().is_empty() {
        return Err(TrainError::NoTrainableParameters);
    }
    if steps == 0 {
        return Err(TrainError::NoSteps);
    }
    if batches.is_empty() {
        return Err(TrainError::EmptyData);
    }

    let dataset_loss = |m: &HybridModel| -> Result<f64, TrainError> {
        let mut acc = 0.0;
        for b in batches {
            acc += backprop::batch_loss(m, b.pairs())?;
        }
        Ok(acc / batches.len() as f64)
    };
    let initial_loss = dataset_loss(model)?;

    let ids = model.trainable_param_ids();
    let mut moment1: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| vec![0.0; model.param(id).len()])
        .collect();
    let mut moment2: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| vec![0.0; model.param(id).len()])
        .collect();

    let mut loss_curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let (loss, grads) = backprop::batch_loss_and_gradients(model, batch.pairs())?;
        if !loss.is_finite() {
            let norms = ids
                .iter()
                .map(|&id| {
                    let slot = model.param(id);
                    let norm = math::sqrt(slot.iter().map(|v| v * v).sum::<f64>());
                    (model.param_name(id), norm)
                })
                .collect();
            return Err(TrainError::NonFiniteLoss { step, loss, norms });
        }
        loss_curve.push(loss);

        let t = (step + 1) as i32;
        let bias1 = 1.0 - powi(ADAM_BETA1, t);
        let bias2 = 1.0 - powi(ADAM_BETA2, t);
        for (slot_idx, &id) in ids.iter().enumerate() {
            let g = grads.get(id);
            let m1 = &mut moment1[slot_idx];
            let m2 = &mut moment2[slot_idx];
            let w = model.param_mut(id);
            for i in 0..w.len() {
                m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g[i];
                m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m1[i] / bias1;
                let v_hat = m2[i] / bias2;
                w[i] -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPS);
            }
        }
    }

    let final_loss = dataset_loss(model)?;
    if !final_loss.is_finite() {
        let norms = ids
            .iter()
            .map(|&id| {
                let slot = model.param(id);
                (
                    model.param_name(id),
                    math::sqrt(slot.iter().map(|v| v * v).sum::<f64>()),
                )
            })
            .collect();
        return Err(TrainError::NonFiniteLoss {
            step: steps,
            loss: final_loss,
            norms,
        });
    }
    Ok(TrainReport {
        steps,
        loss_curve,
        initial_loss,
        final_loss,
        perplexity: math::exp(final_loss),
    })
}

fn powi(base: f64, exp: i32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrainableMask};
    use alloc::collections::BTreeSet;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let half = dist(&[0.5, 0.5]);
        let ce = cross_entropy(&half, &half).unwrap();
        assert!((ce - core::f64::consts::LN_2).abs() <= 1e-12);

        let point = dist(&[1.0, 0.0]);
        assert_eq!(cross_entropy(&point, &point).unwrap(), 0.0);

        let q = dist(&[0.25, 0.75]);
        let ce = cross_entropy(&half, &q).unwrap();
        assert!((ce - 0.836988).abs() <= 1e-6, "{ce}");
    }

    #[test]
    fn kl_examples() {
        let half = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);

        let q = dist(&[0.25, 0.75]);
        let kl = kl_divergence(&half, &q).unwrap();
        assert!((kl - 0.143841).abs() <= 1e-6, "{kl}");
    }

    #[test]
    fn infinite_loss_is_explicit() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert!(matches!(
            cross_entropy(&p, &q),
            Err(LossError::InfiniteLoss { index: 1, .. })
        ));
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(LossError::InfiniteLoss { .. })
        ));
    }

    #[test]
    fn ce_equals_entropy_plus_kl_on_random_pairs() {
        let mut rng = SeededRng::new(99);
        for _ in 0..1000 {
            let n = 2 + (rng.next_u64() % 12) as usize;
            let rand_dist = |rng: &mut SeededRng| {
                let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-3).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                Distribution::new(v).unwrap()
            };
            let p = rand_dist(&mut rng);
            let q = rand_dist(&mut rng);
            let ce = cross_entropy(&p, &q).unwrap();
            let h = cross_entropy(&p, &p).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            assert!((ce - h - kl).abs() <= 1e-10);
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn kl_zero_iff_equal() {
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let n = 4;
            let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            let p = Distribution::new(v.clone()).unwrap();
            assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);

            // Nudge one coordinate pair; divergence must become positive.
            let mut w = v.clone();
            w[0] += 0.05;
            w[1] -= 0.05;
            if w[1] > 0.0 {
                let q = Distribution::new(w).unwrap();
                assert!(kl_divergence(&p, &q).unwrap() > 1e-12);
            }
        }
    }

    #[test]
    fn lm_loss_uniform_logits_is_ln_vocab() {
        let logits = Matrix::zeros(3, 256);
        let loss = sequence_lm_loss(&logits, &[0, 100, 255]).unwrap();
        assert!((loss - math::ln(256.0)).abs() <= 1e-12);
    }

    #[test]
    fn lm_loss_vanishes_with_margin() {
        let mut logits = Matrix::zeros(2, 8);
        logits.set(0, 3, 60.0);
        logits.set(1, 5, 60.0);
        let loss = sequence_lm_loss(&logits, &[3, 5]).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn lm_loss_shape_mismatch_rejected() {
        let logits = Matrix::zeros(3, 8);
        assert!(matches!(
            sequence_lm_loss(&logits, &[1, 2]),
            Err(TrainError::ShapeMismatch {
                rows: 3,
                targets: 2
            })
        ));
    }

    #[test]
    fn reported_loss_perplexity_pair_is_consistent() {
        // exp(1.83) rounds to 6.2 at two significant figures.
        let perplexity = math::exp(1.83);
        assert!((perplexity - 6.2339).abs() <= 5e-4);
        assert!((perplexity - 6.2).abs() < 0.05);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            sidecar_layers: BTreeSet::from([0, 1]),
            ssm_channels: 3,
            n_states: 4,
            dt: 1.0,
            hippo_variant: crate::hippo::HippoVariant::UnscaledLegs,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_targets: BTreeSet::from([
                crate::model::LoraTarget::QProj,
                crate::model::LoraTarget::KProj,
                crate::model::LoraTarget::VProj,
                crate::model::LoraTarget::OProj,
            ]),
            seed: 13,
        }
    }

    fn tiny_batch() -> TrainBatch {
        TrainBatch::from_sequences(&[vec![1, 5, 9, 2, 2, 7], vec![3, 3, 3, 3]]).unwrap()
    }

    #[test]
    fn grad_check_passes_at_generic_point_for_all_classes() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::ALL);
        model.perturb_trainable(77, 0.05);
        let report = grad_check(&model, &tiny_batch(), 1e-5, 1e-4).unwrap();
        assert!(
            report.pass,
            "failures: {:?}",
            report
                .failures()
                .map(|e| (e.name.clone(), e.coord, e.rel_error))
                .collect::<Vec<_>>()
        );
        // Every parameter class shows up in the checked set.
        for prefix in [
            "sidecar0.gate",
            "sidecar0.w_in",
            "sidecar0.c_out",
            "sidecar0.w_out",
        ] {
            assert!(
                report.entries.iter().any(|e| e.name == prefix),
                "missing {prefix}"
            );
        }
        for suffix in ["lora_a", "lora_b"] {
            assert!(report.entries.iter().any(|e| e.name.ends_with(suffix)));
        }
    }

    #[test]
    fn grad_check_zero_gradients_pass_by_fallback() {
        // Fresh model: gates and LoRA B are exactly zero, so w_in/c_out/w_out
        // and LoRA A gradients vanish identically on both sides.
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::ALL);
        let report = grad_check(&model, &tiny_batch(), 1e-5, 1e-4).unwrap();
        assert!(report.pass);
        let w_in_entries: Vec<_> = report
            .entries
            .iter()
            .filter(|e| e.name == "sidecar0.w_in")
            .collect();
        assert!(!w_in_entries.is_empty());
        for e in w_in_entries {
            assert_eq!(e.analytic, 0.0);
            assert!(e.abs_error <= GRAD_ABS_FALLBACK);
        }
    }

    #[test]
    fn grad_check_detects_injected_fault() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::ALL);
        model.perturb_trainable(78, 0.05);
        let report = grad_check_with_fault(&model, &tiny_batch(), 1e-5, 1e-4, 2.0).unwrap();
        assert!(!report.pass);
        let failure = report
            .failures()
            .next()
            .expect("at least one failing coordinate");
        assert!(!failure.name.is_empty());
    }

    #[test]
    fn grad_check_requires_trainable_params() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::NONE);
        assert!(matches!(
            grad_check(&model, &tiny_batch(), 1e-5, 1e-4),
            Err(TrainError::NoTrainableParameters)
        ));
    }

    #[test]
    fn train_lr_zero_changes_nothing() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        let before = model.clone();
        let batch = tiny_batch();
        let report = train(&mut model, &[batch], 5, 0.0).unwrap();
        assert!(model.bit_identical(&before));
        let first = report.loss_curve[0];
        assert!(
            report.loss_curve.iter().all(|&l| l == first),
            "curve not flat"
        );
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn train_gates_only_touches_only_gates() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::GATES);
        let before = model.clone();
        train(&mut model, &[tiny_batch()], 3, 1e-2).unwrap();

        for (id_before, id_after) in before
            .extension_param_ids()
            .iter()
            .zip(model.extension_param_ids())
        {
            let name = model.param_name(id_after);
            let was = before.param(*id_before);
            let now = model.param(id_after);
            let same = was.iter().zip(now).all(|(a, b)| a.to_bits() == b.to_bits());
            if name.ends_with(".gate") {
                assert!(!same, "{name} should have moved");
            } else {
                assert!(same, "{name} should be untouched");
            }
        }
        // Backbone untouched regardless.
        for ((_, was), (_, now)) in before
            .backbone_parameters()
            .iter()
            .zip(model.backbone_parameters())
        {
            assert!(was
                .iter()
                .zip(now.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn train_reports_perplexity_consistent_with_loss() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        let report = train(&mut model, &[tiny_batch()], 4, 1e-3).unwrap();
        assert!((report.perplexity - math::exp(report.final_loss)).abs() <= 1e-9);
    }

    #[test]
    fn train_aborts_on_non_finite_loss_with_diagnostics() {
        // An absurd learning rate blows the extension parameters up until an
        // intermediate overflows; the abort must carry the step and norms.
        let mut model = HybridModel::init(tiny_config()).unwrap();
        model.set_trainable_mask(TrainableMask::ALL);
        let err = train(&mut model, &[tiny_batch()], 5, 1e150).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, loss, norms } => {
                assert!(!loss.is_finite());
                assert!(step <= 5, "step {step}");
                assert!(!norms.is_empty());
                assert!(norms.iter().any(|(_, n)| *n > 1e100 || !n.is_finite()));
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn train_rejects_bad_arguments() {
        let mut model = HybridModel::init(tiny_config()).unwrap();
        assert!(matches!(
            train(&mut model, &[tiny_batch()], 0, 1e-2),
            Err(TrainError::NoSteps)
        ));
        assert!(matches!(
            train(&mut model, &[], 1, 1e-2),
            Err(TrainError::EmptyData)
        ));
        model.set_trainable_mask(TrainableMask::NONE);
        assert!(matches!(
            train(&mut model, &[tiny_batch()], 1, 1e-2),
            Err(TrainError::NoTrainableParameters)
        ));
    }

    #[test]
    fn batch_construction_contracts() {
        assert!(matches!(
            TrainBatch::from_pairs(vec![]),
            Err(TrainError::EmptyBatch)
        ));
        assert!(matches!(
            TrainBatch::from_pairs(vec![(vec![1, 2], vec![3])]),
            Err(TrainError::UnequalPair {
                input: 2,
                target: 1
            })
        ));
        assert!(TrainBatch::from_sequences(&[vec![1]]).is_err());
        let b = TrainBatch::from_sequences(&[vec![4, 5, 6]]).unwrap();
        assert_eq!(b.pairs()[0], (vec![4, 5], vec![5, 6]));
    }

    #[test]
    fn copy_task_shapes() {
        let batches = copy_task_batches(3, 4, 10, 256, 1);
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(b.pairs().len(), 4);
            for (input, target) in b.pairs() {
                assert_eq!(input.len(), 9);
                assert_eq!(input[1..], target[..8]);
                assert!(input.iter().all(|&t| t == input[0]));
            }
        }
    }
}
