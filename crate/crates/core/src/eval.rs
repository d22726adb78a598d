//! Corrected evaluation and auditing: adapted-vs-base divergence (the right
//! comparison, never a model against its own layers), a gate-initialization
//! auditor, a budget gate, and the ordered validate-before-extend pipeline.
//!
//! Two design rules guard against quiet auto-passes. First, zero divergence
//! is reported as zero *with an explicit identical-models flag*, so "nothing
//! changed" can never read as "training worked". Second, the pipeline halts
//! at the first failing check and later checks are marked not-run rather
//! than absent-but-implied-green.

use alloc::format;
use alloc::string::String;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::{HybridModel, ModelError, ParamId};
use crate::train::{self, TrainBatch, TrainError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("not a base reference: {0}")]
    NotABaseReference(String),
    #[error("probe set must contain at least one sequence")]
    EmptyProbes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ─── Probes ──────────────────────────────────────────────────────────────

/// Fixed token sequences on which adapted and base models are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    name: String,
    sequences: Vec<Vec<usize>>,
}

impl ProbeSet {
    pub fn new(name: impl Into<String>, sequences: Vec<Vec<usize>>) -> Result<Self, EvalError> {
        if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
            return Err(EvalError::EmptyProbes);
        }
        Ok(Self {
            name: name.into(),
            sequences,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

// ─── Divergence evaluation ───────────────────────────────────────────────

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ProbeDivergence {
    pub mean_kl: f64,
    pub max_kl: f64,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DivergenceReport {
    pub per_probe: Vec<ProbeDivergence>,
    /// Mean over probes of the per-probe mean per-token KL, nats.
    pub mean_kl: f64,
    /// Largest single-position KL across all probes.
    pub max_kl: f64,
    /// Set when every parameter of the two models is bit-identical. A zero
    /// divergence with this flag raised is a non-result, not a pass.
    pub identical_models: bool,
}

/// Per-token `KL(adapted || base)` over a probe set.
///
/// `base` must be an actual zero reference: every gate exactly 0.0 and every
/// LoRA `B` exactly zero, so its forward equals its backbone's. Weighting is
/// by the adapted model's probabilities; the question answered is "what did
/// adaptation add relative to the base".
pub fn divergence_eval(
    adapted: &HybridModel,
    base: &HybridModel,
    probes: &ProbeSet,
) -> Result<DivergenceReport, EvalError> {
    let (ac, bc) = (adapted.config(), base.config());
    if ac.vocab_size != bc.vocab_size {
        return Err(EvalError::ConfigMismatch(format!(
            "vocab_size {} vs {}",
            ac.vocab_size, bc.vocab_size
        )));
    }
    if ac.max_seq_len != bc.max_seq_len {
        return Err(EvalError::ConfigMismatch(format!(
            "max_seq_len {} vs {}",
            ac.max_seq_len, bc.max_seq_len
        )));
    }
    check_base_reference(base)?;

    let identical_models = adapted.bit_identical(base);
    let mut per_probe = Vec::with_capacity(probes.len());
    let mut max_kl = 0.0_f64;
    let mut mean_acc = 0.0;
    for probe in probes.sequences() {
        let la = adapted.forward(probe)?;
        let lb = base.forward(probe)?;
        let mut probe_acc = 0.0;
        let mut probe_max = 0.0_f64;
        for t in 0..la.rows() {
            let kl = kl_between_logit_rows(la.row(t), lb.row(t));
            probe_acc += kl;
            probe_max = math::max(probe_max, kl);
        }
        let mean = probe_acc / la.rows() as f64;
        max_kl = math::max(max_kl, probe_max);
        mean_acc += mean;
        per_probe.push(ProbeDivergence {
            mean_kl: mean,
            max_kl: probe_max,
        });
    }
    Ok(DivergenceReport {
        mean_kl: mean_acc / per_probe.len() as f64,
        max_kl,
        per_probe,
        identical_models,
    })
}

fn check_base_reference(base: &HybridModel) -> Result<(), EvalError> {
    for id in base.extension_param_ids() {
        match id {
            ParamId::Gate(_) => {
                if base.param(id)[0] != 0.0 {
                    return Err(EvalError::NotABaseReference(format!(
                        "{} = {}, expected 0.0",
                        base.param_name(id),
                        base.param(id)[0]
                    )));
                }
            }
            ParamId::LoraB(_) if base.param(id).iter().any(|&v| v != 0.0) => {
                return Err(EvalError::NotABaseReference(format!(
                    "{} has nonzero entries",
                    base.param_name(id)
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// `KL(softmax(a) || softmax(b))` from raw logit rows. Computed from the
/// log-softmax difference, so bit-identical rows give exactly 0.0. Rounding
/// noise on nearly-identical rows is floored the same way as
/// [`crate::train::KL_NOISE_FLOOR`] describes.
fn kl_between_logit_rows(a: &[f64], b: &[f64]) -> f64 {
    let lse = |row: &[f64]| {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| math::max(m, v));
        max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>())
    };
    let lse_a = lse(a);
    let lse_b = lse(b);
    let mut acc = 0.0;
    for (&av, &bv) in a.iter().zip(b) {
        let log_pa = av - lse_a;
        let log_pb = bv - lse_b;
        acc += math::exp(log_pa) * (log_pa - log_pb);
    }
    if acc < 0.0 && acc >= -crate::train::KL_NOISE_FLOOR {
        acc = 0.0;
    }
    acc
}

// ─── Gate audit ──────────────────────────────────────────────────────────

/// Declares what each parameter group's initialization must have been.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePolicy {
    /// `(group name, expected initial value)` pairs.
    pub expected: Vec<(String, f64)>,
    /// Absolute tolerance on each recorded value.
    pub tolerance: f64,
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            expected: vec![("gates".to_string(), 0.0), ("lora_b".to_string(), 0.0)],
            tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GateViolation {
    pub group: String,
    pub index: usize,
    pub expected: f64,
    pub actual: f64,
    /// `|actual - expected|`; infinite when the group has no record at all.
    pub severity: f64,
}

/// Audits the recorded initialization values against a policy. The records
/// are the values captured at construction (and persisted in the model
/// file), so the audit still works after training has moved the live values.
/// Violations come back sorted most severe first; empty means clean.
pub fn gate_audit(model: &HybridModel, policy: &GatePolicy) -> Vec<GateViolation> {
    let mut violations = Vec::new();
    for (group, expected) in &policy.expected {
        let record = model.init_records().iter().find(|(name, _)| name == group);
        let Some((_, values)) = record else {
            violations.push(GateViolation {
                group: group.clone(),
                index: 0,
                expected: *expected,
                actual: f64::NAN,
                severity: f64::INFINITY,
            });
            continue;
        };
        for (index, &actual) in values.iter().enumerate() {
            let severity = math::abs(actual - expected);
            if severity > policy.tolerance {
                violations.push(GateViolation {
                    group: group.clone(),
                    index,
                    expected: *expected,
                    actual,
                    severity,
                });
            }
        }
    }
    violations.sort_by(|a, b| b.severity.total_cmp(&a.severity));
    violations
}

// ─── Budget gate ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct BudgetReport {
    pub planned_steps: u64,
    pub cost_per_kstep: f64,
    pub projected_cost: f64,
    pub cap: f64,
    pub pass: bool,
}

/// Projects `planned_steps / 1000 * cost_per_kstep` against a hard cap.
/// Exact arithmetic, no rounding before the comparison; hitting the cap
/// exactly passes, strictly exceeding it fails.
pub fn budget_gate(planned_steps: u64, cost_per_kstep: f64, cap: f64) -> BudgetReport {
    let projected_cost = planned_steps as f64 / 1000.0 * cost_per_kstep;
    BudgetReport {
        planned_steps,
        cost_per_kstep,
        projected_cost,
        cap,
        pass: projected_cost <= cap,
    }
}

// ─── Validation pipeline ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CheckKind {
    ZeroGateIdentity,
    GradCheck,
    TrainSmoke,
    DivergenceAfterTraining,
    GateAudit,
    BudgetGate,
}

impl CheckKind {
    pub const ORDER: [CheckKind; 6] = [
        CheckKind::ZeroGateIdentity,
        CheckKind::GradCheck,
        CheckKind::TrainSmoke,
        CheckKind::DivergenceAfterTraining,
        CheckKind::GateAudit,
        CheckKind::BudgetGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::ZeroGateIdentity => "zero_gate_identity",
            CheckKind::GradCheck => "grad_check",
            CheckKind::TrainSmoke => "train_smoke",
            CheckKind::DivergenceAfterTraining => "divergence_after_training",
            CheckKind::GateAudit => "gate_audit",
            CheckKind::BudgetGate => "budget_gate",
        }
    }
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CheckResult {
    pub check: CheckKind,
    pub pass: bool,
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ValidationReport {
    /// Results in execution order, up to and including the first failure.
    pub checks: Vec<CheckResult>,
    /// Checks that never ran because an earlier one failed.
    pub not_run: Vec<CheckKind>,
    pub overall_pass: bool,
}

impl ValidationReport {
    pub fn result(&self, kind: CheckKind) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.check == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationArgs {
    pub smoke_steps: usize,
    pub smoke_lr: f64,
    /// Required loss decrease as a fraction of the initial loss.
    pub smoke_decrease: f64,
    pub grad_step: f64,
    pub grad_tolerance: f64,
    pub planned_steps: u64,
    pub cost_per_kstep: f64,
    pub budget_cap: f64,
    /// Multiplier injected into the analytic gradients during the grad
    /// check; `None` is the honest pipeline. Exists so the pipeline's own
    /// halt-on-failure behavior can be exercised.
    pub inject_grad_fault: Option<f64>,
}

impl Default for ValidationArgs {
    fn default() -> Self {
        Self {
            smoke_steps: 200,
            smoke_lr: 0.01,
            smoke_decrease: 0.10,
            grad_step: 1e-5,
            grad_tolerance: 1e-4,
            planned_steps: 25_908,
            cost_per_kstep: 0.62,
            budget_cap: 20.0,
            inject_grad_fault: None,
        }
    }
}

/// Runs the ordered validation gates, halting at the first failure:
/// zero-gate identity, gradient check, training smoke, post-training
/// divergence, gate audit, budget gate.
///
/// The identity, gradient, and smoke checks run on a pristine re-init of the
/// model's config (the architecture under test), the smoke-trained copy
/// feeds the divergence check against `base`, and the gate audit reads the
/// passed model's own initialization records. Sub-operation errors are
/// recorded as check failures, never raised.
pub fn run_validation_gate(
    model: &HybridModel,
    base: &HybridModel,
    probes: &ProbeSet,
    batches: &[TrainBatch],
    args: &ValidationArgs,
) -> ValidationReport {
    let mut checks: Vec<CheckResult> = Vec::new();
    let mut trained_smoke: Option<HybridModel> = None;

    for kind in CheckKind::ORDER {
        let result = match kind {
            CheckKind::ZeroGateIdentity => check_zero_gate_identity(model, probes),
            CheckKind::GradCheck => check_gradients(model, batches, args),
            CheckKind::TrainSmoke => match check_train_smoke(model, batches, args) {
                Ok((result, trained)) => {
                    trained_smoke = Some(trained);
                    result
                }
                Err(result) => result,
            },
            CheckKind::DivergenceAfterTraining => {
                check_divergence(trained_smoke.as_ref(), base, probes)
            }
            CheckKind::GateAudit => check_gate_audit(model),
            CheckKind::BudgetGate => {
                let report = budget_gate(args.planned_steps, args.cost_per_kstep, args.budget_cap);
                CheckResult {
                    check: kind,
                    pass: report.pass,
                    value: report.projected_cost,
                    detail: format!(
                        "projected ${:.2} vs cap ${:.2}",
                        report.projected_cost, report.cap
                    ),
                }
            }
        };
        let failed = !result.pass;
        checks.push(result);
        if failed {
            break;
        }
    }

    let not_run = CheckKind::ORDER
        .into_iter()
        .filter(|k| !checks.iter().any(|c| c.check == *k))
        .collect();
    let overall_pass = checks.len() == CheckKind::ORDER.len() && checks.iter().all(|c| c.pass);
    ValidationReport {
        checks,
        not_run,
        overall_pass,
    }
}

fn check_zero_gate_identity(model: &HybridModel, probes: &ProbeSet) -> CheckResult {
    let kind = CheckKind::ZeroGateIdentity;
    let fresh = match HybridModel::init(model.config().clone()) {
        Ok(m) => m,
        Err(e) => return fail(kind, f64::NAN, format!("init failed: {e}")),
    };
    let mut max_diff = 0.0_f64;
    for probe in probes.sequences() {
        let full = match fresh.forward(probe) {
            Ok(l) => l,
            Err(e) => return fail(kind, f64::NAN, format!("forward failed: {e}")),
        };
        let backbone = match fresh.forward_backbone(probe) {
            Ok(l) => l,
            Err(e) => return fail(kind, f64::NAN, format!("forward failed: {e}")),
        };
        max_diff = math::max(max_diff, full.max_abs_diff(&backbone));
    }
    CheckResult {
        check: kind,
        pass: max_diff == 0.0,
        value: max_diff,
        detail: format!(
            "max |logit delta| over {} probes: {max_diff:e}",
            probes.len()
        ),
    }
}

fn check_gradients(
    model: &HybridModel,
    batches: &[TrainBatch],
    args: &ValidationArgs,
) -> CheckResult {
    let kind = CheckKind::GradCheck;
    let Some(batch) = batches.first() else {
        return fail(kind, f64::NAN, "no training data provided".into());
    };
    let mut subject = match HybridModel::init(model.config().clone()) {
        Ok(m) => m,
        Err(e) => return fail(kind, f64::NAN, format!("init failed: {e}")),
    };
    subject.set_trainable_mask(model.trainable_mask());
    // Move off the zero-init point so the check exercises real gradients.
    subject.perturb_trainable(0xa11ce, 0.05);
    let fault = args.inject_grad_fault.unwrap_or(1.0);
    match train::grad_check_with_fault(&subject, batch, args.grad_step, args.grad_tolerance, fault)
    {
        Ok(report) => {
            let detail = if report.pass {
                format!(
                    "{} coordinates, max rel error {:.3e}",
                    report.checked, report.max_rel_error
                )
            } else {
                let worst = report.failures().next();
                format!(
                    "gradient mismatch at {}",
                    worst
                        .map(|e| format!("{}[{}] rel {:.3e}", e.name, e.coord, e.rel_error))
                        .unwrap_or_else(|| "unknown coordinate".into())
                )
            };
            CheckResult {
                check: kind,
                pass: report.pass,
                value: report.max_rel_error,
                detail,
            }
        }
        Err(e) => fail(kind, f64::NAN, format!("gradient check failed to run: {e}")),
    }
}

fn check_train_smoke(
    model: &HybridModel,
    batches: &[TrainBatch],
    args: &ValidationArgs,
) -> Result<(CheckResult, HybridModel), CheckResult> {
    let kind = CheckKind::TrainSmoke;
    let mut smoke = match HybridModel::init(model.config().clone()) {
        Ok(m) => m,
        Err(e) => return Err(fail(kind, f64::NAN, format!("init failed: {e}"))),
    };
    smoke.set_trainable_mask(model.trainable_mask());
    let report = match train::train(&mut smoke, batches, args.smoke_steps, args.smoke_lr) {
        Ok(r) => r,
        Err(e) => return Err(fail(kind, f64::NAN, format!("training aborted: {e}"))),
    };
    let ratio = report.final_loss / report.initial_loss;
    let pass = report.final_loss <= (1.0 - args.smoke_decrease) * report.initial_loss;
    let detail = if pass {
        format!(
            "loss {:.4} -> {:.4} over {} steps",
            report.initial_loss, report.final_loss, report.steps
        )
    } else {
        format!(
            "loss did not decrease by {:.0}%: {:.4} -> {:.4}",
            args.smoke_decrease * 100.0,
            report.initial_loss,
            report.final_loss
        )
    };
    let result = CheckResult {
        check: kind,
        pass,
        value: ratio,
        detail,
    };
    if pass {
        Ok((result, smoke))
    } else {
        Err(result)
    }
}

fn check_divergence(
    trained: Option<&HybridModel>,
    base: &HybridModel,
    probes: &ProbeSet,
) -> CheckResult {
    let kind = CheckKind::DivergenceAfterTraining;
    let Some(trained) = trained else {
        return fail(kind, f64::NAN, "no smoke-trained model available".into());
    };
    match divergence_eval(trained, base, probes) {
        Ok(report) => {
            let pass = report.mean_kl > 0.0 && !report.identical_models;
            let detail = if report.identical_models {
                "identical models: divergence is vacuously zero".into()
            } else {
                format!(
                    "mean KL {:.6e} nats, max {:.6e}",
                    report.mean_kl, report.max_kl
                )
            };
            CheckResult {
                check: kind,
                pass,
                value: report.mean_kl,
                detail,
            }
        }
        Err(e) => fail(kind, f64::NAN, format!("divergence eval failed: {e}")),
    }
}

fn check_gate_audit(model: &HybridModel) -> CheckResult {
    let kind = CheckKind::GateAudit;
    let violations = gate_audit(model, &GatePolicy::default());
    let pass = violations.is_empty();
    let detail = if pass {
        "all initialization records match policy".into()
    } else {
        let worst = &violations[0];
        format!(
            "{} violations; worst: {}[{}] = {} (expected {})",
            violations.len(),
            worst.group,
            worst.index,
            worst.actual,
            worst.expected
        )
    };
    CheckResult {
        check: kind,
        pass,
        value: violations.len() as f64,
        detail,
    }
}

fn fail(check: CheckKind, value: f64, detail: String) -> CheckResult {
    CheckResult {
        check,
        pass: false,
        value,
        detail,
    }
}
