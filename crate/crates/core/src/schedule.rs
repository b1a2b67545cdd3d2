//! Module-wise weight decay assignment and the periodic re-assignment loop.
//!
//! The default assignment interpolates linearly between `s1·η` and `s2·η`
//! according to where each module's metric sits between the model-wide
//! minimum and maximum:
//!
//! ```text
//! f(i) = η · ((m_i − m_min) / (m_max − m_min) · (s2 − s1) + s1)
//! ```
//!
//! With the tail exponent as metric, heavier-tailed modules (smaller alpha)
//! get weaker decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{FitConfig, FitMethod, SpectralReport};
use crate::tensor_io::{ModuleId, ModuleKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid scheduler configuration: {0}")]
    Config(String),
    #[error("no metric values to assign from")]
    Empty,
    #[error("non-finite metric value {value} for module `{module}`")]
    NonFinite { module: ModuleId, value: f64 },
    #[error("metric value {value} for module `{module}` must be positive")]
    NonPositive { module: ModuleId, value: f64 },
    #[error("log-domain: metric value {value} for module `{module}` must exceed 1")]
    LogDomain { module: ModuleId, value: f64 },
    #[error("no spectral report for scheduled module `{0}`")]
    MissingReport(ModuleId),
    #[error("no gradient norm for scheduled module `{0}`")]
    MissingGradient(ModuleId),
    #[error("weight norm must be positive, got {0}")]
    ZeroWeightNorm(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignFn {
    Uniform,
    Linear { s1: f64, s2: f64 },
    Sqrt,
    Log2,
    SigmoidLike { beta: f64 },
}

impl AssignFn {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            AssignFn::Linear { s1, s2 } if !(s1 > 0.0 && s1 <= s2 && s2.is_finite()) => {
                Err(ScheduleError::Config(format!("linear needs 0 < s1 <= s2, got ({s1}, {s2})")))
            }
            AssignFn::SigmoidLike { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(ScheduleError::Config(format!("sigmoid_like needs beta > 0, got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    PlAlphaHill,
    GradNorm,
    FrobeniusNorm,
    SpectralNorm,
}

impl MetricKind {
    fn value(self, report: &SpectralReport) -> Option<f64> {
        match self {
            MetricKind::PlAlphaHill => Some(report.alpha.alpha),
            MetricKind::GradNorm => report.grad_norm,
            MetricKind::FrobeniusNorm => Some(report.frobenius_norm),
            MetricKind::SpectralNorm => Some(report.spectral_norm),
        }
    }
}

/// Decay coefficients in force from `step` until the next recomputation.
///
/// Only scheduled modules appear in `assignments`; everything else decays at
/// the base rate `eta` (see [`DecayPlan::decay_for`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPlan {
    pub step: usize,
    pub eta: f64,
    pub assignments: BTreeMap<ModuleId, f64>,
    pub metric_values: BTreeMap<ModuleId, f64>,
}

impl DecayPlan {
    pub fn uniform<'a>(step: usize, eta: f64, modules: impl IntoIterator<Item = &'a ModuleId>) -> Self {
        DecayPlan {
            step,
            eta,
            assignments: modules.into_iter().map(|m| (m.clone(), eta)).collect(),
            metric_values: BTreeMap::new(),
        }
    }

    pub fn decay_for(&self, module: &ModuleId) -> f64 {
        self.assignments.get(module).copied().unwrap_or(self.eta)
    }

    fn from_assignments(eta: f64, metrics: &BTreeMap<ModuleId, f64>, assignments: BTreeMap<ModuleId, f64>) -> Self {
        DecayPlan { step: 0, eta, assignments, metric_values: metrics.clone() }
    }
}

fn check_finite(metrics: &BTreeMap<ModuleId, f64>) -> Result<(), ScheduleError> {
    if metrics.is_empty() {
        return Err(ScheduleError::Empty);
    }
    match metrics.iter().find(|(_, v)| !v.is_finite()) {
        Some((m, &value)) => Err(ScheduleError::NonFinite { module: m.clone(), value }),
        None => Ok(()),
    }
}

fn linear_ratios(metrics: &BTreeMap<ModuleId, f64>, s1: f64, s2: f64) -> BTreeMap<ModuleId, f64> {
    let lo = metrics.values().copied().fold(f64::INFINITY, f64::min);
    let hi = metrics.values().copied().fold(f64::NEG_INFINITY, f64::max);
    metrics
        .iter()
        .map(|(m, &v)| {
            let ratio = if hi == lo {
                (s1 + s2) / 2.0
            } else {
                let frac = (v - lo) / (hi - lo);
                // frac == 1 only at the maximum; pin it so the upper endpoint is exact.
                if frac == 1.0 {
                    s2
                } else {
                    (frac * (s2 - s1) + s1).min(s2)
                }
            };
            (m.clone(), ratio)
        })
        .collect()
}

/// Linear interpolation between `s1·eta` (minimum metric) and `s2·eta`
/// (maximum metric). A flat metric map gets the midpoint `eta·(s1+s2)/2`.
pub fn assign_linear(
    metrics: &BTreeMap<ModuleId, f64>,
    eta: f64,
    s1: f64,
    s2: f64,
) -> Result<DecayPlan, ScheduleError> {
    check_finite(metrics)?;
    let assignments = linear_ratios(metrics, s1, s2).into_iter().map(|(m, r)| (m, eta * r)).collect();
    Ok(DecayPlan::from_assignments(eta, metrics, assignments))
}

fn mean_normalized(
    metrics: &BTreeMap<ModuleId, f64>,
    eta: f64,
    transform: impl Fn(f64) -> f64,
) -> BTreeMap<ModuleId, f64> {
    let transformed: Vec<(ModuleId, f64)> = metrics.iter().map(|(m, &v)| (m.clone(), transform(v))).collect();
    let mean = transformed.iter().map(|(_, t)| t).sum::<f64>() / transformed.len() as f64;
    transformed.into_iter().map(|(m, t)| (m, eta * t / mean)).collect()
}

/// `eta · √m_i / mean_j √m_j`; the mean assignment is `eta`.
pub fn assign_sqrt(metrics: &BTreeMap<ModuleId, f64>, eta: f64) -> Result<DecayPlan, ScheduleError> {
    check_finite(metrics)?;
    if let Some((m, &value)) = metrics.iter().find(|(_, &v)| v <= 0.0) {
        return Err(ScheduleError::NonPositive { module: m.clone(), value });
    }
    Ok(DecayPlan::from_assignments(eta, metrics, mean_normalized(metrics, eta, f64::sqrt)))
}

/// `eta · log2(m_i) / mean_j log2(m_j)`; requires every metric above 1.
pub fn assign_log2(metrics: &BTreeMap<ModuleId, f64>, eta: f64) -> Result<DecayPlan, ScheduleError> {
    check_finite(metrics)?;
    if let Some((m, &value)) = metrics.iter().find(|(_, &v)| v <= 1.0) {
        return Err(ScheduleError::LogDomain { module: m.clone(), value });
    }
    Ok(DecayPlan::from_assignments(eta, metrics, mean_normalized(metrics, eta, f64::log2)))
}

/// `eta · 2 / (1 + exp(−beta·z))` with `z` the per-layer z-score of `|g|`
/// (population standard deviation). A group with zero spread maps to `eta`.
pub fn assign_sigmoid_like(
    grad_norms: &BTreeMap<ModuleId, f64>,
    eta: f64,
    beta: f64,
) -> Result<DecayPlan, ScheduleError> {
    check_finite(grad_norms)?;
    let mut assignments = BTreeMap::new();
    for group in group_by_layer(grad_norms).values() {
        let n = group.len() as f64;
        let mean = group.values().map(|g| g.abs()).sum::<f64>() / n;
        let var = group.values().map(|g| (g.abs() - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for (m, g) in group {
            let z = if std > 0.0 { (g.abs() - mean) / std } else { 0.0 };
            assignments.insert(m.clone(), eta * 2.0 / (1.0 + (-beta * z).exp()));
        }
    }
    Ok(DecayPlan::from_assignments(eta, grad_norms, assignments))
}

fn group_by_layer(metrics: &BTreeMap<ModuleId, f64>) -> BTreeMap<usize, BTreeMap<ModuleId, f64>> {
    let mut groups: BTreeMap<usize, BTreeMap<ModuleId, f64>> = BTreeMap::new();
    for (m, &v) in metrics {
        groups.entry(m.layer_index).or_default().insert(m.clone(), v);
    }
    groups
}

/// Reflects each value inside its range: `v ↦ max + min − v`. Keeps the
/// range (and positivity) while reversing the order.
fn reflect(metrics: &BTreeMap<ModuleId, f64>) -> BTreeMap<ModuleId, f64> {
    let lo = metrics.values().copied().fold(f64::INFINITY, f64::min);
    let hi = metrics.values().copied().fold(f64::NEG_INFINITY, f64::max);
    metrics.iter().map(|(m, &v)| (m.clone(), hi + lo - v)).collect()
}

pub fn default_scheduled_kinds() -> Vec<ModuleKind> {
    ModuleKind::PROJECTIONS.to_vec()
}

fn default_interval() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub eta: f64,
    pub assign: AssignFn,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default = "default_fit")]
    pub fit: FitMethod,
    #[serde(default)]
    pub fit_config: FitConfig,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_scheduled_kinds")]
    pub scheduled_kinds: Vec<ModuleKind>,
    /// Reverse the metric's orientation (larger metric ⇒ smaller decay).
    #[serde(default)]
    pub invert_metric: bool,
    /// Take min/max per layer instead of model-wide (linear only).
    #[serde(default)]
    pub group_by_layer: bool,
}

fn default_metric() -> MetricKind {
    MetricKind::PlAlphaHill
}

fn default_fit() -> FitMethod {
    FitMethod::Median
}

impl SchedulerConfig {
    /// Linear interpolation on the tail exponent, median fit, every 500 steps.
    pub fn alpha_decay(eta: f64, s1: f64, s2: f64) -> Self {
        SchedulerConfig {
            eta,
            assign: AssignFn::Linear { s1, s2 },
            metric: MetricKind::PlAlphaHill,
            fit: FitMethod::Median,
            fit_config: FitConfig::default(),
            interval: default_interval(),
            scheduled_kinds: default_scheduled_kinds(),
            invert_metric: false,
            group_by_layer: false,
        }
    }

    pub fn uniform(eta: f64) -> Self {
        SchedulerConfig { assign: AssignFn::Uniform, ..Self::alpha_decay(eta, 1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(ScheduleError::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.interval == 0 {
            return Err(ScheduleError::Config("interval must be at least 1".into()));
        }
        self.assign.validate()
    }

    pub fn is_scheduled(&self, kind: ModuleKind) -> bool {
        self.scheduled_kinds.contains(&kind)
    }

    pub fn is_recompute_step(&self, t: usize) -> bool {
        t.is_multiple_of(self.interval)
    }
}

/// Builds a fresh plan from metric values, honoring orientation and grouping.
pub fn assign(cfg: &SchedulerConfig, metrics: &BTreeMap<ModuleId, f64>) -> Result<DecayPlan, ScheduleError> {
    check_finite(metrics)?;
    let oriented = |m: &BTreeMap<ModuleId, f64>| if cfg.invert_metric { reflect(m) } else { m.clone() };
    let eta = cfg.eta;
    let mut plan = match cfg.assign {
        AssignFn::Uniform => DecayPlan::uniform(0, eta, metrics.keys()),
        AssignFn::Linear { s1, s2 } if cfg.group_by_layer => {
            let mut assignments = BTreeMap::new();
            for group in group_by_layer(metrics).values() {
                assignments.extend(assign_linear(&oriented(group), eta, s1, s2)?.assignments);
            }
            DecayPlan::from_assignments(eta, metrics, assignments)
        }
        AssignFn::Linear { s1, s2 } => assign_linear(&oriented(metrics), eta, s1, s2)?,
        AssignFn::Sqrt => assign_sqrt(&oriented(metrics), eta)?,
        AssignFn::Log2 => assign_log2(&oriented(metrics), eta)?,
        AssignFn::SigmoidLike { beta } => {
            let mut assignments = BTreeMap::new();
            for group in group_by_layer(metrics).values() {
                assignments.extend(assign_sigmoid_like(&oriented(group), eta, beta)?.assignments);
            }
            DecayPlan::from_assignments(eta, metrics, assignments)
        }
    };
    // Record the metric as measured, not as reoriented.
    plan.metric_values = metrics.clone();
    Ok(plan)
}

/// One iteration of the periodic scheduler.
///
/// On steps where `t % interval == 0` (including `t = 0`) the plan is rebuilt
/// from the configured metric over `modules`; on every other step `previous`
/// is returned unchanged. When the metric is the gradient norm and no report
/// carries one yet (before the first backward pass), the rebuilt plan is
/// uniform.
pub fn scheduler_step(
    t: usize,
    cfg: &SchedulerConfig,
    modules: &[ModuleId],
    reports: &BTreeMap<ModuleId, SpectralReport>,
    previous: &DecayPlan,
) -> Result<DecayPlan, ScheduleError> {
    if !cfg.is_recompute_step(t) {
        return Ok(previous.clone());
    }
    let scheduled: Vec<&ModuleId> = modules.iter().filter(|m| cfg.is_scheduled(m.kind)).collect();
    if cfg.assign == AssignFn::Uniform {
        let mut plan = DecayPlan::uniform(t, cfg.eta, scheduled.iter().copied());
        for m in &scheduled {
            if let Some(v) = reports.get(*m).and_then(|r| cfg.metric.value(r)) {
                plan.metric_values.insert((*m).clone(), v);
            }
        }
        return Ok(plan);
    }

    let mut metrics = BTreeMap::new();
    let mut missing_gradient = None;
    for m in &scheduled {
        let report = reports.get(*m).ok_or_else(|| ScheduleError::MissingReport((*m).clone()))?;
        match cfg.metric.value(report) {
            Some(v) => {
                metrics.insert((*m).clone(), v);
            }
            None => missing_gradient = missing_gradient.or(Some((*m).clone())),
        }
    }
    if let Some(m) = missing_gradient {
        if metrics.is_empty() {
            return Ok(DecayPlan::uniform(t, cfg.eta, scheduled.iter().copied()));
        }
        return Err(ScheduleError::MissingGradient(m));
    }
    if metrics.is_empty() {
        return Ok(DecayPlan::uniform(t, cfg.eta, scheduled.iter().copied()));
    }
    let mut plan = assign(cfg, &metrics)?;
    plan.step = t;
    Ok(plan)
}

/// Time-wise decay `eta · r / r̄` where `r = ‖g‖ / ‖w‖` and `r̄` is the mean
/// ratio observed so far (current step included).
///
/// Approximate gradient-to-weight ratio baseline; one coefficient for the
/// whole model.
pub fn awd_global(grad_norm_total: f64, weight_norm_total: f64, eta: f64, mean_ratio: f64) -> Result<f64, ScheduleError> {
    if !(weight_norm_total > 0.0) {
        return Err(ScheduleError::ZeroWeightNorm(weight_norm_total));
    }
    let ratio = grad_norm_total / weight_norm_total;
    if mean_ratio > 0.0 {
        Ok(eta * ratio / mean_ratio)
    } else {
        Ok(eta)
    }
}

/// Running state for [`awd_global`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AwdBaseline {
    mean_ratio: f64,
    count: u64,
}

impl AwdBaseline {
    pub fn update(&mut self, grad_norm_total: f64, weight_norm_total: f64, eta: f64) -> Result<f64, ScheduleError> {
        if !(weight_norm_total > 0.0) {
            return Err(ScheduleError::ZeroWeightNorm(weight_norm_total));
        }
        let ratio = grad_norm_total / weight_norm_total;
        self.count += 1;
        self.mean_ratio += (ratio - self.mean_ratio) / self.count as f64;
        awd_global(grad_norm_total, weight_norm_total, eta, self.mean_ratio)
    }

    pub fn mean_ratio(&self) -> f64 {
        self.mean_ratio
    }
}

/// `step,module,metric_value,decay` rows, one per scheduled module per plan.
pub fn plans_to_csv(plans: &[DecayPlan]) -> String {
    let mut out = String::from("step,module,metric_value,decay\n");
    for plan in plans {
        for (m, decay) in &plan.assignments {
            let metric = plan.metric_values.get(m).map(|&v| crate::fmt_f64(v)).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", plan.step, m.raw_name, metric, crate::fmt_f64(*decay)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::HillFit;
    use crate::tensor_io::parse_module_name;
    use proptest::prelude::*;

    fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<ModuleId, f64> {
        pairs.iter().map(|(n, v)| (parse_module_name(n), *v)).collect()
    }

    fn get(plan: &DecayPlan, name: &str) -> f64 {
        plan.assignments[&parse_module_name(name)]
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn report(id: &ModuleId, alpha: f64, grad: Option<f64>) -> SpectralReport {
        SpectralReport {
            module: id.clone(),
            alpha: HillFit { alpha, k: 2, xmin: 1.0, method: Some(FitMethod::Median) },
            spectral_norm: alpha,
            frobenius_norm: 2.0 * alpha,
            grad_norm: grad,
        }
    }

    fn model_modules(layers: usize) -> Vec<ModuleId> {
        let mut v: Vec<ModuleId> = (0..layers)
            .flat_map(|l| ModuleKind::PROJECTIONS.iter().map(move |&k| ModuleId::projection(l, k)))
            .collect();
        v.push(ModuleId::other("lm_head"));
        v
    }

    #[test]
    fn linear_worked_example() {
        let m = metrics(&[("A", 2.0), ("B", 3.0), ("C", 4.0)]);
        let plan = assign_linear(&m, 5e-6, 0.67, 5.0).unwrap();
        assert_eq!(get(&plan, "A"), 5e-6 * 0.67);
        assert_eq!(get(&plan, "C"), 5e-6 * 5.0);
        assert!(rel(get(&plan, "A"), 3.35e-6) < 1e-15);
        assert!(rel(get(&plan, "C"), 2.5e-5) < 1e-15);
        assert!(rel(get(&plan, "B"), 1.4175e-5) < 1e-15);
    }

    #[test]
    fn linear_flat_metrics_take_midpoint() {
        let m = metrics(&[("A", 3.0), ("B", 3.0)]);
        let plan = assign_linear(&m, 2.0, 0.5, 1.5).unwrap();
        assert_eq!(get(&plan, "A"), 2.0);
        assert_eq!(get(&plan, "B"), 2.0);
    }

    #[test]
    fn linear_zero_width_range_is_uniform() {
        let plan = assign_linear(&metrics(&[("X", 1.0), ("Y", 2.0)]), 1.0, 1.0, 1.0).unwrap();
        assert_eq!(get(&plan, "X"), 1.0);
        assert_eq!(get(&plan, "Y"), 1.0);
    }

    #[test]
    fn sqrt_examples() {
        let plan = assign_sqrt(&metrics(&[("a", 1.0), ("b", 4.0)]), 1.0).unwrap();
        assert!((get(&plan, "a") - 2.0 / 3.0).abs() < 1e-15);
        assert!((get(&plan, "b") - 4.0 / 3.0).abs() < 1e-15);
        let plan = assign_sqrt(&metrics(&[("a", 7.0)]), 0.3).unwrap();
        assert!((get(&plan, "a") - 0.3).abs() < 1e-16);
        let plan = assign_sqrt(&metrics(&[("a", 2.0), ("b", 2.0)]), 0.3).unwrap();
        assert_eq!(get(&plan, "a"), 0.3);
        assert!(matches!(assign_sqrt(&metrics(&[("a", 0.0)]), 1.0), Err(ScheduleError::NonPositive { .. })));
    }

    #[test]
    fn log2_examples() {
        let plan = assign_log2(&metrics(&[("a", 2.0), ("b", 4.0)]), 1.0).unwrap();
        assert!((get(&plan, "a") - 2.0 / 3.0).abs() < 1e-15);
        assert!((get(&plan, "b") - 4.0 / 3.0).abs() < 1e-15);
        let plan = assign_log2(&metrics(&[("a", 3.0), ("b", 3.0)]), 0.5).unwrap();
        assert_eq!(get(&plan, "b"), 0.5);
        assert!(matches!(assign_log2(&metrics(&[("a", 1.0), ("b", 3.0)]), 1.0), Err(ScheduleError::LogDomain { .. })));
    }

    #[test]
    fn sigmoid_like_examples() {
        let plan = assign_sigmoid_like(&metrics(&[("layers.0.att.q", 1.0), ("layers.0.att.k", 3.0)]), 1.0, 4.0).unwrap();
        let lo = 2.0 / (1.0 + 4f64.exp());
        let hi = 2.0 / (1.0 + (-4f64).exp());
        assert!((get(&plan, "layers.0.att.q") - lo).abs() < 1e-15);
        assert!((get(&plan, "layers.0.att.k") - hi).abs() < 1e-15);
        assert!((lo - 0.0359).abs() < 1e-4 && (hi - 1.9641).abs() < 1e-4);

        // At the group mean the decay is exactly eta.
        let plan = assign_sigmoid_like(
            &metrics(&[("layers.1.att.q", 1.0), ("layers.1.att.k", 2.0), ("layers.1.att.v", 3.0)]),
            0.7,
            4.0,
        )
        .unwrap();
        assert_eq!(get(&plan, "layers.1.att.k"), 0.7);

        // Zero spread within a layer.
        let plan = assign_sigmoid_like(&metrics(&[("layers.0.att.q", 5.0), ("layers.0.att.k", 5.0)]), 0.7, 4.0).unwrap();
        assert_eq!(get(&plan, "layers.0.att.q"), 0.7);
    }

    #[test]
    fn sigmoid_like_normalizes_per_layer() {
        let m = metrics(&[
            ("layers.0.att.q", 1.0),
            ("layers.0.att.k", 3.0),
            ("layers.1.att.q", 100.0),
            ("layers.1.att.k", 300.0),
        ]);
        let plan = assign_sigmoid_like(&m, 1.0, 4.0).unwrap();
        assert!((get(&plan, "layers.0.att.q") - get(&plan, "layers.1.att.q")).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_approaches_two_eta() {
        let f = |z: f64| 2.0 / (1.0 + (-4.0 * z).exp());
        assert!(f(0.0) == 1.0);
        assert!((f(50.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scheduler_recomputes_on_interval_only() {
        let modules = model_modules(1);
        let reports: BTreeMap<ModuleId, SpectralReport> = modules
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), report(m, 2.0 + i as f64, None)))
            .collect();
        let mut cfg = SchedulerConfig::alpha_decay(1e-3, 0.67, 5.0);
        cfg.interval = 500;
        let initial = DecayPlan::uniform(0, cfg.eta, modules.iter());
        let p0 = scheduler_step(0, &cfg, &modules, &reports, &initial).unwrap();
        assert_ne!(p0, initial);
        assert_eq!(p0.step, 0);
        assert_eq!(p0.assignments.len(), 7);
        assert!(!p0.assignments.contains_key(&ModuleId::other("lm_head")));
        assert_eq!(p0.decay_for(&ModuleId::other("lm_head")), cfg.eta);

        let idle = scheduler_step(250, &cfg, &modules, &BTreeMap::new(), &p0).unwrap();
        assert_eq!(idle, p0);

        let mut plans = vec![];
        let mut current = initial;
        for t in 0..=2000 {
            let next = scheduler_step(t, &cfg, &modules, &reports, &current).unwrap();
            if cfg.is_recompute_step(t) {
                plans.push(next.step);
            } else {
                assert_eq!(next, current);
            }
            current = next;
        }
        assert_eq!(plans, vec![0, 500, 1000, 1500, 2000]);
    }

    #[test]
    fn scheduler_reports_missing_modules() {
        let modules = model_modules(1);
        let cfg = SchedulerConfig::alpha_decay(1.0, 0.5, 2.0);
        let prev = DecayPlan::uniform(0, 1.0, modules.iter());
        let err = scheduler_step(0, &cfg, &modules, &BTreeMap::new(), &prev).unwrap_err();
        assert!(matches!(err, ScheduleError::MissingReport(_)));
    }

    #[test]
    fn grad_norm_metric_falls_back_to_uniform_without_gradients() {
        let modules = model_modules(2);
        let reports: BTreeMap<ModuleId, SpectralReport> =
            modules.iter().map(|m| (m.clone(), report(m, 3.0, None))).collect();
        let mut cfg = SchedulerConfig::alpha_decay(0.1, 0.67, 5.0);
        cfg.metric = MetricKind::GradNorm;
        let prev = DecayPlan::uniform(0, 0.1, modules.iter());
        let plan = scheduler_step(0, &cfg, &modules, &reports, &prev).unwrap();
        assert!(plan.assignments.values().all(|&d| d == 0.1));
        assert_eq!(plan.assignments.len(), 14);
    }

    #[test]
    fn direction_smaller_alpha_gets_smaller_decay() {
        let modules = model_modules(1);
        let reports: BTreeMap<ModuleId, SpectralReport> = modules
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), report(m, 5.0 - 0.4 * i as f64, None)))
            .collect();
        let cfg = SchedulerConfig::alpha_decay(1.0, 0.67, 5.0);
        let plan = scheduler_step(0, &cfg, &modules, &reports, &DecayPlan::uniform(0, 1.0, [])).unwrap();
        let q = plan.assignments[&ModuleId::projection(0, ModuleKind::AttQ)];
        let down = plan.assignments[&ModuleId::projection(0, ModuleKind::MlpDown)];
        assert_eq!(q, 5.0);
        assert_eq!(down, 0.67);

        let mut inverted = cfg.clone();
        inverted.invert_metric = true;
        let plan = scheduler_step(0, &inverted, &modules, &reports, &DecayPlan::uniform(0, 1.0, [])).unwrap();
        assert_eq!(plan.assignments[&ModuleId::projection(0, ModuleKind::AttQ)], 0.67);
        assert_eq!(plan.metric_values[&ModuleId::projection(0, ModuleKind::AttQ)], 5.0);
    }

    #[test]
    fn awd_examples() {
        let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-15 * b, "{a} vs {b}");
        close(awd_global(2.0, 4.0, 0.1, 0.5).unwrap(), 0.1);
        close(awd_global(4.0, 4.0, 0.1, 0.5).unwrap(), 0.2);
        assert!(matches!(awd_global(1.0, 0.0, 0.1, 1.0), Err(ScheduleError::ZeroWeightNorm(_))));

        let mut awd = AwdBaseline::default();
        close(awd.update(3.0, 1.0, 0.1).unwrap(), 0.1);
        close(awd.update(1.0, 1.0, 0.1).unwrap(), 0.05);
        // ratios 3, 1, 8: mean 4, current 8 ⇒ 2·eta
        close(awd.update(8.0, 1.0, 0.1).unwrap(), 0.2);
        close(awd.mean_ratio(), 4.0);
    }

    #[test]
    fn config_validation() {
        assert!(AssignFn::Linear { s1: 2.0, s2: 1.0 }.validate().is_err());
        assert!(AssignFn::Linear { s1: 0.0, s2: 1.0 }.validate().is_err());
        assert!(AssignFn::SigmoidLike { beta: 0.0 }.validate().is_err());
        let mut cfg = SchedulerConfig::uniform(1e-4);
        assert!(cfg.validate().is_ok());
        cfg.interval = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let cfg: SchedulerConfig = serde_json::from_str(
            r#"{"eta":5e-6,"assign":{"kind":"linear","s1":0.67,"s2":5.0},"interval":100}"#,
        )
        .unwrap();
        assert_eq!(cfg.metric, MetricKind::PlAlphaHill);
        assert_eq!(cfg.fit, FitMethod::Median);
        assert_eq!(cfg.scheduled_kinds.len(), 7);
        assert_eq!(cfg.assign, AssignFn::Linear { s1: 0.67, s2: 5.0 });
    }

    #[test]
    fn csv_uses_round_trip_precision() {
        let plan = assign_linear(&metrics(&[("layers.0.att.q", 2.0), ("layers.0.att.k", 3.0)]), 0.1, 0.67, 5.0).unwrap();
        let csv = plans_to_csv(std::slice::from_ref(&plan));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,module,metric_value,decay"));
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            let decay: f64 = cols[3].parse().unwrap();
            assert_eq!(decay, plan.assignments[&parse_module_name(cols[1])]);
        }
    }

    fn metric_map() -> impl Strategy<Value = BTreeMap<ModuleId, f64>> {
        proptest::collection::vec(1.01f64..50.0, 1..30).prop_map(|vs| {
            vs.into_iter().enumerate().map(|(i, v)| (ModuleId::other(format!("m{i:02}")), v)).collect()
        })
    }

    proptest! {
        #[test]
        fn linear_bounds_and_monotonicity(m in metric_map(), eta in 0.0f64..1.0, s1 in 0.1f64..2.0, width in 0.0f64..5.0) {
            let s2 = s1 + width;
            let plan = assign_linear(&m, eta, s1, s2).unwrap();
            prop_assert_eq!(plan.assignments.len(), m.len());
            for (id, &d) in &plan.assignments {
                prop_assert!(d >= s1 * eta && d <= s2 * eta);
                for (id2, &d2) in &plan.assignments {
                    if m[id] <= m[id2] { prop_assert!(d <= d2); }
                }
            }
            let lo = m.values().copied().fold(f64::INFINITY, f64::min);
            let hi = m.values().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                for (id, &v) in &m {
                    if v == lo { prop_assert_eq!(plan.assignments[id], s1 * eta); }
                    if v == hi { prop_assert_eq!(plan.assignments[id], s2 * eta); }
                }
            }
        }

        #[test]
        fn linear_is_affine_invariant(
            eighths in proptest::collection::vec(8u32..400, 2..30),
            log_a in -3i32..4,
            b_eighths in -800i32..800,
        ) {
            // Dyadic metrics and coefficients keep every step exact.
            let m: BTreeMap<ModuleId, f64> = eighths.iter().enumerate()
                .map(|(i, &v)| (ModuleId::other(format!("m{i:02}")), f64::from(v) / 8.0)).collect();
            let (a, b) = (2f64.powi(log_a), f64::from(b_eighths) / 8.0);
            let base = assign_linear(&m, 1e-3, 0.67, 5.0).unwrap();
            let shifted: BTreeMap<ModuleId, f64> = m.iter().map(|(k, v)| (k.clone(), a * v + b)).collect();
            let moved = assign_linear(&shifted, 1e-3, 0.67, 5.0).unwrap();
            for (id, d) in &base.assignments {
                prop_assert!((d - moved.assignments[id]).abs() <= 1e-12 * d.abs());
            }
        }

        #[test]
        fn sqrt_and_log2_preserve_the_mean(m in metric_map(), eta in 1e-6f64..1.0) {
            for plan in [assign_sqrt(&m, eta).unwrap(), assign_log2(&m, eta).unwrap()] {
                let mean = plan.assignments.values().sum::<f64>() / plan.assignments.len() as f64;
                prop_assert!(rel(mean, eta) < 1e-12);
            }
        }

        #[test]
        fn sigmoid_like_stays_in_open_range(m in metric_map(), eta in 1e-6f64..1.0) {
            let plan = assign_sigmoid_like(&m, eta, 4.0).unwrap();
            for &d in plan.assignments.values() {
                prop_assert!(d > 0.0 && d < 2.0 * eta);
            }
        }
    }
}
