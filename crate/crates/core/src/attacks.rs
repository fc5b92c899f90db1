//! White-box attacks under a relative infinity-norm budget:
//! `‖x_adv − x‖∞ ≤ ε·‖x‖∞` per sample, with `x_adv ∈ [0,1]ⁿ`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::loss::TargetModel;
use crate::model::{attack_surrogate_loss, predict, MlpClassifier, SurrogateKind};

/// Slack allowed on the budget ratio for floating-point rounding.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Pgd,
    Tgsm,
    Jsma,
}

impl AttackKind {
    pub fn default_steps(self) -> usize {
        match self {
            Self::Pgd | Self::Tgsm => 5,
            Self::Jsma => 200,
        }
    }

    pub fn is_targeted(self) -> bool {
        !matches!(self, Self::Pgd)
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(Self::Pgd),
            "tgsm" => Ok(Self::Tgsm),
            "jsma" => Ok(Self::Jsma),
            other => Err(Error::config(format!(
                "unknown attack '{other}' (expected pgd | tgsm | jsma)"
            ))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pgd => "pgd",
            Self::Tgsm => "tgsm",
            Self::Jsma => "jsma",
        })
    }
}

/// Target class of a targeted attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// `(y + 1) mod D`.
    #[default]
    NextClass,
    Fixed(usize),
}

impl TargetRule {
    pub fn targets(self, labels: &[usize], classes: usize) -> Result<Vec<usize>> {
        match self {
            Self::NextClass => Ok(labels.iter().map(|&y| (y + 1) % classes).collect()),
            Self::Fixed(k) if k < classes => Ok(vec![k; labels.len()]),
            Self::Fixed(k) => Err(Error::config(format!(
                "target class {k} outside 0..{classes}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-iteration step as a fraction of each sample's `‖x₀‖∞`; defaults
    /// to `epsilon / steps` so the iterates can span the whole budget.
    pub step_size: Option<f64>,
    pub target_rule: TargetRule,
    pub pixels_per_step: usize,
    pub surrogate: SurrogateKind,
    /// PGD only: start from a uniform point in the ball.
    pub random_start: bool,
    /// JSMA only: move pixels in the direction of their saliency sign
    /// instead of increasing them.
    pub signed_theta: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::new(AttackKind::Pgd, 0.0)
    }
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        Self {
            kind,
            epsilon,
            steps: kind.default_steps(),
            step_size: None,
            target_rule: TargetRule::NextClass,
            pixels_per_step: 1,
            surrogate: SurrogateKind::default(),
            random_start: false,
            signed_theta: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack steps must be >= 1"));
        }
        if let Some(a) = self.step_size {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::config(format!("step size must be finite and >= 0, got {a}")));
            }
        }
        if self.pixels_per_step != 1 {
            return Err(Error::config("only 1-pixel saliency steps are supported"));
        }
        Ok(())
    }

    fn relative_step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / self.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub noise: Tensor,
    /// `‖n‖∞ / ‖x‖∞` per sample (0 when both are 0).
    pub ratios: Vec<f64>,
    /// Target class per sample for targeted attacks.
    pub targets: Option<Vec<usize>>,
    pub config: AttackConfig,
}

impl AdversarialBatch {
    fn assemble(original: &Tensor, perturbed: Tensor, targets: Option<Vec<usize>>, config: &AttackConfig) -> Result<Self> {
        let noise = Tensor::new(
            original.shape().to_vec(),
            perturbed
                .data()
                .iter()
                .zip(original.data())
                .map(|(a, x)| a - x)
                .collect(),
        )?;
        let ratios = ratios(original, &noise);
        Ok(Self {
            original: original.clone(),
            perturbed,
            noise,
            ratios,
            targets,
            config: config.clone(),
        })
    }
}

fn ratio(x: &[f64], n: &[f64]) -> f64 {
    let xn = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let nn = n.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if nn == 0.0 {
        0.0
    } else {
        nn / xn
    }
}

fn ratios(x: &Tensor, n: &Tensor) -> Vec<f64> {
    (0..x.rows()).map(|i| ratio(x.row(i), n.row(i))).collect()
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the attack named by `cfg.kind`. `labels` are the true classes.
pub fn attack(
    model: &MlpClassifier,
    target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    match cfg.kind {
        AttackKind::Pgd => pgd(model, target, x, labels, cfg),
        AttackKind::Tgsm => tgsm(model, target, x, labels, cfg),
        AttackKind::Jsma => jsma(model, target, x, labels, cfg),
    }
}

fn check_inputs(model: &MlpClassifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig, kind: AttackKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::config(format!("{kind} called with a {} config", cfg.kind)));
    }
    cfg.validate()?;
    if x.rank() != 2 || x.cols() != model.input_dim() || x.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "attack input",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len(), model.input_dim()],
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.latent_dim()) {
        return Err(Error::Data(format!("label {y} outside 0..{}", model.latent_dim())));
    }
    Ok(())
}

/// Gradient of the surrogate loss with respect to the input batch.
fn input_gradient(
    model: &MlpClassifier,
    target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    surrogate: SurrogateKind,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let z = model.forward_eval(&mut tape, &params, xv)?;
    let loss = attack_surrogate_loss(&mut tape, z, labels, surrogate, target)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Per-sample box `[lo, hi]` = ball of radius `ε·‖x₀‖∞` intersected with `[0,1]`.
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
    radius: Vec<f64>,
}

impl Bounds {
    fn new(x: &Tensor, epsilon: f64) -> Self {
        let mut lo = Vec::with_capacity(x.numel());
        let mut hi = Vec::with_capacity(x.numel());
        let mut radius = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let r = epsilon * row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            radius.push(r);
            for &v in row {
                lo.push((v - r).max(0.0).min(v));
                hi.push((v + r).min(1.0).max(v));
            }
        }
        Self { lo, hi, radius }
    }

    fn project(&self, data: &mut [f64]) {
        for ((v, &lo), &hi) in data.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Iterated signed-gradient steps: `direction = +1` ascends the loss of
/// `labels`, `-1` descends it.
fn signed_gradient_attack(
    model: &MlpClassifier,
    target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    direction: f64,
    random_start: bool,
) -> Result<Tensor> {
    let bounds = Bounds::new(x, cfg.epsilon);
    let mut adv = x.clone();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = x.cols();
        for (k, v) in adv.data_mut().iter_mut().enumerate() {
            let r = bounds.radius[k / n];
            *v += r * (2.0 * rng.gen::<f64>() - 1.0);
        }
        bounds.project(adv.data_mut());
    }
    let rel = cfg.relative_step();
    let steps: Vec<f64> = bounds
        .radius
        .iter()
        .map(|&r| if cfg.epsilon > 0.0 { rel * r / cfg.epsilon } else { 0.0 })
        .collect();
    let n = x.cols();
    for _ in 0..cfg.steps {
        let g = input_gradient(model, target, &adv, labels, cfg.surrogate)?;
        for (k, (v, &gk)) in adv.data_mut().iter_mut().zip(g.data()).enumerate() {
            *v += direction * steps[k / n] * sign(gk);
        }
        bounds.project(adv.data_mut());
    }
    Ok(adv)
}

/// Untargeted projected gradient ascent on the surrogate loss of the true class.
pub fn pgd(
    model: &MlpClassifier,
    target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(model, x, labels, cfg, AttackKind::Pgd)?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::assemble(x, x.clone(), None, cfg);
    }
    let adv = signed_gradient_attack(model, target, x, labels, cfg, 1.0, cfg.random_start)?;
    AdversarialBatch::assemble(x, adv, None, cfg)
}

/// Targeted gradient sign method: descends the surrogate loss of the target class.
pub fn tgsm(
    model: &MlpClassifier,
    target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(model, x, labels, cfg, AttackKind::Tgsm)?;
    let targets = cfg.target_rule.targets(labels, model.latent_dim())?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::assemble(x, x.clone(), Some(targets), cfg);
    }
    let adv = signed_gradient_attack(model, target, x, &targets, cfg, -1.0, false)?;
    AdversarialBatch::assemble(x, adv, Some(targets), cfg)
}

/// Jacobian `∂z_j/∂x` for every row: entry `[j][i*n + p]`.
fn latent_jacobian(model: &MlpClassifier, x: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let z = model.forward_eval(&mut tape, &params, xv)?;
    let (rows, d) = (x.rows(), model.latent_dim());
    let pred = predict(tape.value(z));
    let mut jac = Vec::with_capacity(d);
    for j in 0..d {
        let mut seed = Tensor::zeros(&[rows, d]);
        for i in 0..rows {
            seed.data_mut()[i * d + j] = 1.0;
        }
        let mut grads = tape.backward_with_seed(z, seed)?;
        jac.push(
            grads
                .take(xv)
                .map_or_else(|| vec![0.0; x.numel()], Tensor::into_data),
        );
    }
    Ok((jac, pred))
}

/// Single-pixel saliency-map attack. Each iteration scores every pixel by
/// `∂z_t/∂x_p − Σ_{j≠t} ∂z_j/∂x_p` and pushes the best unsaturated one to
/// the edge of its budget; a sample stops once it is classified as its
/// target.
pub fn jsma(
    model: &MlpClassifier,
    _target: &TargetModel,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_inputs(model, x, labels, cfg, AttackKind::Jsma)?;
    let targets = cfg.target_rule.targets(labels, model.latent_dim())?;
    if cfg.epsilon == 0.0 {
        return AdversarialBatch::assemble(x, x.clone(), Some(targets), cfg);
    }
    let bounds = Bounds::new(x, cfg.epsilon);
    let n = x.cols();
    let d = model.latent_dim();
    let mut adv = x.clone();
    let mut active: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.steps {
        if active.is_empty() {
            break;
        }
        let cur = adv.select_rows(&active);
        let (jac, pred) = latent_jacobian(model, &cur)?;
        let mut still = Vec::with_capacity(active.len());
        for (a, &i) in active.iter().enumerate() {
            let t = targets[i];
            if pred[a] == t {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for p in 0..n {
                let k = i * n + p;
                let jk = a * n + p;
                let off: f64 = (0..d).filter(|&j| j != t).map(|j| jac[j][jk]).sum();
                let score = jac[t][jk] - off;
                let v = adv.data()[k];
                let (value, open) = if cfg.signed_theta {
                    let open = (score > 0.0 && v < bounds.hi[k]) || (score < 0.0 && v > bounds.lo[k]);
                    (score.abs(), open)
                } else {
                    (score, v < bounds.hi[k])
                };
                if open && best.map_or(true, |(_, b)| value > b) {
                    best = Some((p, value));
                }
            }
            let Some((p, _)) = best else { continue };
            let k = i * n + p;
            let score_sign = {
                let jk = a * n + p;
                let off: f64 = (0..d).filter(|&j| j != t).map(|j| jac[j][jk]).sum();
                sign(jac[t][jk] - off)
            };
            let v = &mut adv.data_mut()[k];
            *v = if cfg.signed_theta && score_sign < 0.0 {
                bounds.lo[k]
            } else {
                bounds.hi[k]
            };
            still.push(i);
        }
        active = still;
    }
    AdversarialBatch::assemble(x, adv, Some(targets), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetReport {
    pub epsilon: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Samples whose ratio exceeds `ε + 1e-12`.
    pub violations: Vec<usize>,
    /// Samples with a perturbed value outside `[0,1]`.
    pub out_of_range: Vec<usize>,
}

impl BudgetReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty() && self.out_of_range.is_empty()
    }
}

/// Recomputes budget ratios from `original` and `perturbed` alone.
pub fn budget_check(batch: &AdversarialBatch) -> BudgetReport {
    let eps = batch.config.epsilon;
    let mut ratios = Vec::with_capacity(batch.original.rows());
    let mut violations = Vec::new();
    let mut out_of_range = Vec::new();
    for i in 0..batch.original.rows() {
        let x = batch.original.row(i);
        let a = batch.perturbed.row(i);
        let noise: Vec<f64> = a.iter().zip(x).map(|(p, q)| p - q).collect();
        let r = ratio(x, &noise);
        if !(r <= eps + BUDGET_TOLERANCE) {
            violations.push(i);
        }
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            out_of_range.push(i);
        }
        ratios.push(r);
    }
    BudgetReport {
        epsilon: eps,
        max_ratio: ratios.iter().fold(0.0, |m: f64, &r| m.max(r)),
        ratios,
        violations,
        out_of_range,
    }
}
