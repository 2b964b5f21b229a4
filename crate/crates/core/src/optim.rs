//! Update rules: SGD, naive SAM (one shared perturbation per batch), 1-SAM
//! (one perturbation per example), the logit-only and Jacobian-only hybrids,
//! and SGD with explicit activation/last-layer norm regularization.
//!
//! All rules share the same plumbing: a per-example "contribution" is
//! computed for every batch element, contributions are averaged with a
//! deterministic striped reduction, weight decay `λw` is added to the
//! average, and the result is applied with the learning rate. With `ρ = 0`
//! (and zero penalty coefficients) every rule runs the exact SGD code path,
//! so the collapse to SGD is bit-exact by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, DEGENERATE_NORM};
use crate::math::norm2;
use crate::models::Model;
use crate::runtime::par_fold_stripes;
use crate::synthdata::LabeledDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Sgd,
    NSam,
    Sam1,
    LSam,
    JSam,
    RegSgd,
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::NSam => "nsam",
            Rule::Sam1 => "sam1",
            Rule::LSam => "lsam",
            Rule::JSam => "jsam",
            Rule::RegSgd => "regsgd",
        }
    }

    pub const ALL: [Rule; 6] = [
        Rule::Sgd,
        Rule::NSam,
        Rule::Sam1,
        Rule::LSam,
        Rule::JSam,
        Rule::RegSgd,
    ];

    /// Whether the rule perturbs weights at all (i.e. uses `rho`).
    pub fn uses_rho(&self) -> bool {
        matches!(self, Rule::NSam | Rule::Sam1 | Rule::LSam | Rule::JSam)
    }
}

impl std::str::FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Rule::Sgd),
            "nsam" => Ok(Rule::NSam),
            "sam1" | "1sam" => Ok(Rule::Sam1),
            "lsam" => Ok(Rule::LSam),
            "jsam" => Ok(Rule::JSam),
            "regsgd" => Ok(Rule::RegSgd),
            other => Err(Error::InvalidConfig(format!("unknown rule '{other}'"))),
        }
    }
}

fn default_eval_batch() -> Option<usize> {
    None
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub rule: Rule,
    pub lr: f64,
    /// Perturbation radius; ignored by SGD and RegSGD.
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Activation-norm penalty coefficient (RegSGD only).
    #[serde(default)]
    pub gamma_z: f64,
    /// Last-layer ridge coefficient (RegSGD only).
    #[serde(default)]
    pub gamma_v: f64,
    /// `None` means full batch.
    #[serde(default = "default_eval_batch")]
    pub batch_size: Option<usize>,
}

impl OptimConfig {
    pub fn new(rule: Rule, lr: f64) -> Self {
        Self {
            rule,
            lr,
            rho: 0.0,
            weight_decay: 0.0,
            gamma_z: 0.0,
            gamma_v: 0.0,
            batch_size: None,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("weight_decay", self.weight_decay),
            ("gamma_z", self.gamma_z),
            ("gamma_v", self.gamma_v),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// The perturbation radius the rule actually applies.
    pub fn effective_rho(&self) -> f64 {
        if self.rule.uses_rho() {
            self.rho
        } else {
            0.0
        }
    }
}

/// Scratch buffers reused across examples: one gradient buffer (doubling as
/// the perturbation direction) and one model-shaped buffer for the perturbed
/// weights.
pub struct Workspace {
    grad: Vec<f64>,
    perturbed: Model,
}

impl Workspace {
    pub fn new(model: &Model) -> Self {
        Self {
            grad: vec![0.0; model.num_params()],
            perturbed: model.clone(),
        }
    }
}

/// The rule's per-example update term, written over `out`:
///
/// * SGD — `∇ℓ` at the current weights.
/// * 1-SAM — `∇ℓ` at `w + ε_i`, `ε_i = ρ·∇ℓ_i/‖∇ℓ_i‖` (joint norm).
/// * L-SAM — logit scale at `w + ε_i`, Jacobian at `w`.
/// * J-SAM — logit scale at `w`, Jacobian at `w + ε_i`.
/// * RegSGD — `∇ℓ` plus `γ_z·∂‖z‖/∂w` (the last-layer ridge is a batch-level
///   term, added by [`step`]).
///
/// Examples with a degenerate (numerically zero) gradient skip the
/// perturbation and contribute their unperturbed gradient.
pub fn per_example_update(
    rule: Rule,
    rho: f64,
    gamma_z: f64,
    model: &Model,
    x: &[f64],
    t: i64,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Result<()> {
    match rule {
        Rule::Sgd | Rule::NSam => {
            // NSam's shared perturbation is handled at batch level; per
            // example it contributes a plain gradient (at whichever weights
            // `model` holds).
            model.grad_into(x, t, out)?;
            Ok(())
        }
        Rule::RegSgd => {
            model.grad_into(x, t, out)?;
            if gamma_z != 0.0 {
                model.activation_norm_grad_into(x, gamma_z, out)?;
            }
            Ok(())
        }
        Rule::Sam1 | Rule::LSam | Rule::JSam => {
            if rho == 0.0 {
                model.grad_into(x, t, out)?;
                return Ok(());
            }
            let (cot_w, _) = model.cotangent(x, t)?;
            model.grad_with_cotangent_into(x, &cot_w, &mut ws.grad)?;
            let norm = norm2(&ws.grad);
            if norm < DEGENERATE_NORM {
                out.copy_from_slice(&ws.grad);
                return Ok(());
            }
            ws.perturbed.perturb_from(model, &ws.grad, rho / norm);
            match rule {
                Rule::Sam1 => {
                    ws.perturbed.grad_into(x, t, out)?;
                }
                Rule::LSam => {
                    let (cot_p, _) = ws.perturbed.cotangent(x, t)?;
                    model.grad_with_cotangent_into(x, &cot_p, out)?;
                }
                Rule::JSam => {
                    ws.perturbed.grad_with_cotangent_into(x, &cot_w, out)?;
                }
                _ => unreachable!(),
            }
            Ok(())
        }
    }
}

struct StripeState {
    sum: Vec<f64>,
    out: Vec<f64>,
    ws: Workspace,
    err: Option<Error>,
}

/// Mean per-example update over `batch`, evaluated with `model` as the
/// current weights. Deterministic: stripe-ordered reduction.
fn mean_update(
    rule: Rule,
    rho: f64,
    gamma_z: f64,
    model: &Model,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<Vec<f64>> {
    let p = model.num_params();
    let partials = par_fold_stripes(
        batch.len(),
        || StripeState {
            sum: vec![0.0; p],
            out: vec![0.0; p],
            ws: Workspace::new(model),
            err: None,
        },
        |state, bi| {
            if state.err.is_some() {
                return;
            }
            let i = batch[bi];
            let res = per_example_update(
                rule,
                rho,
                gamma_z,
                model,
                data.input(i),
                data.observed(i),
                &mut state.ws,
                &mut state.out,
            );
            match res {
                Ok(()) => {
                    for (s, &o) in state.sum.iter_mut().zip(&state.out) {
                        *s += o;
                    }
                }
                Err(e) => state.err = Some(e),
            }
        },
    );

    let mut total = vec![0.0; p];
    for part in partials {
        if let Some(e) = part.err {
            return Err(e);
        }
        for (t, &s) in total.iter_mut().zip(&part.sum) {
            *t += s;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in total.iter_mut() {
        *t *= inv;
    }
    Ok(total)
}

/// Shared-perturbation model for naive SAM: `w + ρ·∇L/‖∇L‖` with the mean
/// gradient over `batch`. Returns `None` when the mean gradient is
/// degenerate or `rho` is zero (callers fall back to plain SGD).
pub(crate) fn nsam_perturbed(
    rho: f64,
    model: &Model,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<Option<Model>> {
    if rho == 0.0 {
        return Ok(None);
    }
    let mean = mean_update(Rule::Sgd, 0.0, 0.0, model, data, batch)?;
    let norm = norm2(&mean);
    if norm < DEGENERATE_NORM {
        return Ok(None);
    }
    let mut pm = model.clone();
    pm.perturb_from(model, &mean, rho / norm);
    Ok(Some(pm))
}

/// One optimizer step over `batch`; returns the updated model.
pub fn step(
    cfg: &OptimConfig,
    model: &Model,
    data: &LabeledDataset,
    batch: &[usize],
) -> Result<Model> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if cfg.rule == Rule::RegSgd {
        // requires a hidden activation and a last layer
        model.last_layer_range()?;
    }

    let mut mean = match cfg.rule {
        Rule::NSam => match nsam_perturbed(cfg.rho, model, data, batch)? {
            Some(pm) => mean_update(Rule::Sgd, 0.0, 0.0, &pm, data, batch)?,
            None => mean_update(Rule::Sgd, 0.0, 0.0, model, data, batch)?,
        },
        rule => mean_update(rule, cfg.rho, cfg.gamma_z, model, data, batch)?,
    };

    if cfg.rule == Rule::RegSgd && cfg.gamma_v != 0.0 {
        let range = model.last_layer_range()?;
        let params = model.params();
        for j in range {
            mean[j] += 2.0 * cfg.gamma_v * params[j];
        }
    }

    let mut next = model.clone();
    let params = next.params_mut();
    for j in 0..params.len() {
        params[j] -= cfg.lr * (mean[j] + cfg.weight_decay * params[j]);
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{dot, rel_diff, sigmoid};
    use crate::models::{Activation, Dln2Model, LinearModel, MlpModel};
    use crate::rng::stream_rng;
    use crate::synthdata::{LabelEncoding, LabeledDataset};

    fn binary_data(inputs: Vec<f64>, n: usize, d: usize, obs: Vec<i64>) -> LabeledDataset {
        let truth = obs.clone();
        LabeledDataset::new(inputs, n, d, obs, truth, LabelEncoding::SignedBinary).unwrap()
    }

    fn multi_data(inputs: Vec<f64>, n: usize, d: usize, obs: Vec<i64>, k: usize) -> LabeledDataset {
        let truth = obs.clone();
        LabeledDataset::new(
            inputs,
            n,
            d,
            obs,
            truth,
            LabelEncoding::ClassIndex { num_classes: k },
        )
        .unwrap()
    }

    fn random_binary(n: usize, d: usize, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, 0);
        use rand::Rng;
        let inputs: Vec<f64> = (0..n * d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let obs: Vec<i64> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        binary_data(inputs, n, d, obs)
    }

    #[test]
    fn sgd_single_example_at_origin() {
        // w = 0 ⇒ σ = 0.5 ⇒ w ← η·t·0.5·x
        let model = Model::Linear(LinearModel::zeros(2));
        let data = binary_data(vec![2.0, -4.0], 1, 2, vec![1]);
        let cfg = OptimConfig::new(Rule::Sgd, 0.1);
        let next = step(&cfg, &model, &data, &[0]).unwrap();
        assert_eq!(next.params(), &[0.1 * 0.5 * 2.0, 0.1 * 0.5 * -4.0]);
    }

    #[test]
    fn sgd_symmetric_pair_cancels() {
        // t = ±1 on the same x at w = 0: gradients cancel exactly
        let model = Model::Linear(LinearModel::zeros(2));
        let data = binary_data(vec![1.0, 2.0, 1.0, 2.0], 2, 2, vec![1, -1]);
        let cfg = OptimConfig::new(Rule::Sgd, 0.5);
        let next = step(&cfg, &model, &data, &[0, 1]).unwrap();
        assert_eq!(next.params(), &[0.0, 0.0]);
    }

    #[test]
    fn rho_zero_collapses_to_sgd_bitwise() {
        let data = random_binary(12, 5, 31);
        let mut rng = stream_rng(32, 0);
        let models = [
            Model::Linear(LinearModel::random(5, 0.3, &mut rng)),
            Model::Dln2(Dln2Model::random(4, 5, 0.3, &mut rng)),
            Model::Mlp(MlpModel::random(4, 5, 1, Activation::Relu, 0.3, &mut rng)),
        ];
        let batch: Vec<usize> = (0..12).collect();
        for model in &models {
            let sgd = step(&OptimConfig::new(Rule::Sgd, 0.05), model, &data, &batch).unwrap();
            for rule in [Rule::NSam, Rule::Sam1, Rule::LSam, Rule::JSam] {
                let got = step(&OptimConfig::new(rule, 0.05), model, &data, &batch).unwrap();
                assert_eq!(got.params(), sgd.params(), "rule {rule:?}");
            }
        }
        // regsgd with zero penalties, on families that support it
        for model in &models[1..] {
            let sgd = step(&OptimConfig::new(Rule::Sgd, 0.05), model, &data, &batch).unwrap();
            let reg = step(&OptimConfig::new(Rule::RegSgd, 0.05), model, &data, &batch).unwrap();
            assert_eq!(reg.params(), sgd.params());
        }
    }

    #[test]
    fn linear_identities_sam1_lsam_and_jsam_sgd() {
        let data = random_binary(10, 4, 33);
        let mut rng = stream_rng(34, 0);
        let model = Model::Linear(LinearModel::random(4, 0.5, &mut rng));
        let batch: Vec<usize> = (0..10).collect();
        for rho in [0.05, 0.5, 2.0] {
            let cfg = |r| OptimConfig::new(r, 0.1).with_rho(rho);
            let sam1 = step(&cfg(Rule::Sam1), &model, &data, &batch).unwrap();
            let lsam = step(&cfg(Rule::LSam), &model, &data, &batch).unwrap();
            let jsam = step(&cfg(Rule::JSam), &model, &data, &batch).unwrap();
            let sgd = step(&cfg(Rule::Sgd), &model, &data, &batch).unwrap();
            assert!(rel_diff(sam1.params(), lsam.params(), 1e-12) <= 1e-12);
            assert!(rel_diff(jsam.params(), sgd.params(), 1e-12) <= 1e-12);
        }
    }

    #[test]
    fn lsam_differs_from_sam1_on_dln2() {
        let data = random_binary(8, 4, 35);
        let mut rng = stream_rng(36, 0);
        let model = Model::Dln2(Dln2Model::random(3, 4, 0.5, &mut rng));
        let batch: Vec<usize> = (0..8).collect();
        let cfg = |r| OptimConfig::new(r, 0.1).with_rho(0.3);
        let sam1 = step(&cfg(Rule::Sam1), &model, &data, &batch).unwrap();
        let lsam = step(&cfg(Rule::LSam), &model, &data, &batch).unwrap();
        assert!(rel_diff(sam1.params(), lsam.params(), 1e-12) > 1e-9);
    }

    #[test]
    fn sam1_linear_is_a_constant_margin_adjustment() {
        // per-example update = t·σ(−t⟨w,x⟩ + ρ‖x‖)·x
        let d = 3;
        let data = random_binary(6, d, 37);
        let mut rng = stream_rng(38, 0);
        let model = Model::Linear(LinearModel::random(d, 0.8, &mut rng));
        let rho = 0.4;
        let batch: Vec<usize> = (0..6).collect();
        let cfg = OptimConfig::new(Rule::Sam1, 0.1).with_rho(rho);
        let next = step(&cfg, &model, &data, &batch).unwrap();

        let w = model.params();
        let mut mean = vec![0.0; d];
        for i in 0..6 {
            let x = data.input(i);
            let t = data.observed(i) as f64;
            let s = sigmoid(-t * dot(w, x) + rho * crate::math::norm2(x));
            for j in 0..d {
                mean[j] += -t * s * x[j] / 6.0;
            }
        }
        let expect: Vec<f64> = (0..d).map(|j| w[j] - 0.1 * mean[j]).collect();
        assert!(rel_diff(next.params(), &expect, 1e-12) < 1e-12);
    }

    #[test]
    fn nsam_single_example_equals_sam1() {
        let data = random_binary(1, 4, 39);
        let mut rng = stream_rng(40, 0);
        let model = Model::Dln2(Dln2Model::random(3, 4, 0.4, &mut rng));
        let cfg_n = OptimConfig::new(Rule::NSam, 0.1).with_rho(0.2);
        let cfg_1 = OptimConfig::new(Rule::Sam1, 0.1).with_rho(0.2);
        let a = step(&cfg_n, &model, &data, &[0]).unwrap();
        let b = step(&cfg_1, &model, &data, &[0]).unwrap();
        assert!(rel_diff(a.params(), b.params(), 1e-12) < 1e-12);
    }

    #[test]
    fn nsam_zero_mean_gradient_falls_back_to_sgd() {
        // symmetric pair at w=0 has exactly zero mean gradient
        let model = Model::Linear(LinearModel::zeros(2));
        let data = binary_data(vec![1.0, 2.0, 1.0, 2.0], 2, 2, vec![1, -1]);
        let cfg = OptimConfig::new(Rule::NSam, 0.1).with_rho(0.5);
        let sgd = step(&OptimConfig::new(Rule::Sgd, 0.1), &model, &data, &[0, 1]).unwrap();
        let nsam = step(&cfg, &model, &data, &[0, 1]).unwrap();
        assert_eq!(nsam.params(), sgd.params());
    }

    #[test]
    fn jsam_dln2_matches_closed_form() {
        // first layer: −∇_W ℓ − (ρσ/J)·z xᵀ; second: −∇_v ℓ − (ρσ‖x‖²/J)·v
        let mut rng = stream_rng(41, 0);
        let h = 3;
        let d = 4;
        let model = Model::Dln2(Dln2Model::random(h, d, 0.6, &mut rng));
        let data = random_binary(5, d, 42);
        let rho = 0.7;
        let cfg = OptimConfig::new(Rule::JSam, 0.1).with_rho(rho);
        let next = step(&cfg, &model, &data, &(0..5).collect::<Vec<_>>()).unwrap();

        let (w, v) = match &model {
            Model::Dln2(m) => (m.first_layer().to_vec(), m.second_layer().to_vec()),
            _ => unreachable!(),
        };
        let mut mean = vec![0.0; model.num_params()];
        for i in 0..5 {
            let x = data.input(i);
            let t = data.observed(i) as f64;
            let z: Vec<f64> = (0..h).map(|r| dot(&w[r * d..(r + 1) * d], x)).collect();
            let f = dot(&v, &z);
            let s = sigmoid(-t * f);
            let xn2 = dot(x, x);
            let j = (dot(&z, &z) + xn2 * dot(&v, &v)).sqrt();
            // ∇ℓ plus the correction term
            for r in 0..h {
                for c in 0..d {
                    let grad = -t * s * v[r] * x[c] + (rho * s / j) * z[r] * x[c];
                    mean[r * d + c] += grad / 5.0;
                }
            }
            for r in 0..h {
                let grad = -t * s * z[r] + (rho * s * xn2 / j) * v[r];
                mean[h * d + r] += grad / 5.0;
            }
        }
        let expect: Vec<f64> = model
            .params()
            .iter()
            .zip(&mean)
            .map(|(&p, &g)| p - 0.1 * g)
            .collect();
        assert!(rel_diff(next.params(), &expect, 1e-12) < 1e-10);
    }

    #[test]
    fn regsgd_penalty_matches_finite_differences() {
        let mut rng = stream_rng(43, 0);
        for model in [
            Model::Dln2(Dln2Model::random(3, 4, 0.5, &mut rng)),
            Model::Mlp(MlpModel::random(3, 4, 3, Activation::Relu, 0.5, &mut rng)),
        ] {
            let x: Vec<f64> = (0..4).map(|i| 0.3 + 0.2 * i as f64).collect();
            let gamma = 0.7;
            let mut grad = vec![0.0; model.num_params()];
            model.activation_norm_grad_into(&x, gamma, &mut grad).unwrap();

            let h = 1e-6;
            let norm_z = |m: &Model| crate::math::norm2(&m.hidden_activation(&x).unwrap());
            for j in 0..model.num_params() {
                let mut plus = model.clone();
                plus.params_mut()[j] += h;
                let mut minus = model.clone();
                minus.params_mut()[j] -= h;
                let fd = gamma * (norm_z(&plus) - norm_z(&minus)) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() < 1e-5,
                    "param {j}: fd {fd} vs analytic {}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn regsgd_adds_last_layer_ridge() {
        let mut rng = stream_rng(44, 0);
        let model = Model::Dln2(Dln2Model::random(3, 4, 0.5, &mut rng));
        let data = random_binary(4, 4, 45);
        let batch: Vec<usize> = (0..4).collect();
        let lr = 0.1;
        let gamma_v = 0.3;
        let mut cfg = OptimConfig::new(Rule::RegSgd, lr);
        cfg.gamma_v = gamma_v;
        let with_ridge = step(&cfg, &model, &data, &batch).unwrap();
        let without = step(&OptimConfig::new(Rule::Sgd, lr), &model, &data, &batch).unwrap();
        let range = model.last_layer_range().unwrap();
        for j in 0..model.num_params() {
            let expected = if range.contains(&j) {
                without.params()[j] - lr * 2.0 * gamma_v * model.params()[j]
            } else {
                without.params()[j]
            };
            assert!((with_ridge.params()[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn regsgd_rejects_linear_and_zero_activation_contributes_nothing() {
        let data = random_binary(3, 4, 46);
        let lin = Model::Linear(LinearModel::zeros(4));
        let mut cfg = OptimConfig::new(Rule::RegSgd, 0.1);
        cfg.gamma_z = 0.5;
        assert!(matches!(
            step(&cfg, &lin, &data, &[0, 1]),
            Err(Error::UnsupportedModel { .. })
        ));

        // W = 0 ⇒ z = 0 ⇒ the ‖z‖ penalty has zero subgradient
        let dln = Model::Dln2(Dln2Model::zeros(3, 4));
        let reg = step(&cfg, &dln, &data, &[0, 1]).unwrap();
        let sgd = step(&OptimConfig::new(Rule::Sgd, 0.1), &dln, &data, &[0, 1]).unwrap();
        assert_eq!(reg.params(), sgd.params());
    }

    #[test]
    fn weight_decay_applies_to_raw_parameters_after_averaging() {
        let model = Model::Linear(LinearModel::new(vec![2.0, -1.0]));
        let data = binary_data(vec![1.0, 0.0], 1, 2, vec![1]);
        let mut cfg = OptimConfig::new(Rule::Sgd, 0.1);
        cfg.weight_decay = 0.5;
        let next = step(&cfg, &model, &data, &[0]).unwrap();
        // grad = −t σ(−2)·x; update_j = w_j − lr(grad_j + λ w_j)
        let s = sigmoid(-2.0);
        let g = [-s, 0.0];
        for j in 0..2 {
            let expect = model.params()[j] - 0.1 * (g[j] + 0.5 * model.params()[j]);
            assert!((next.params()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn reweighting_ratio_is_the_sigma_ratio_and_increases_with_margin() {
        // ‖∇ℓ(w+ε)‖/‖∇ℓ(w)‖ = σ(−m + ρ‖x‖)/σ(−m) for linear models
        let d = 3;
        let mut rng = stream_rng(47, 0);
        let model = Model::Linear(LinearModel::random(d, 0.9, &mut rng));
        let rho = 0.6;
        let mut ws = Workspace::new(&model);
        let mut out = vec![0.0; d];
        let mut prev_ratio = None;
        // equal-norm inputs with increasing margin
        for k in 0..20 {
            let m = -3.0 + 0.3 * k as f64;
            // construct x with ⟨w,x⟩ = m and ‖x‖ = 2 via a rotation trick
            let w = model.params();
            let wn = crate::math::norm2(w);
            let xn: f64 = 2.0;
            if m.abs() >= wn * xn {
                continue;
            }
            let alpha = m / wn; // component along w/‖w‖
            let beta = (xn * xn - alpha * alpha).sqrt();
            // orthogonal direction to w
            let mut u = vec![0.0; d];
            u[0] = -w[1];
            u[1] = w[0];
            let un = crate::math::norm2(&u);
            let x: Vec<f64> = (0..d)
                .map(|j| alpha * w[j] / wn + beta * u[j] / un)
                .collect();
            let t = 1i64;

            let mut base = vec![0.0; d];
            model.grad_into(&x, t, &mut base).unwrap();
            per_example_update(Rule::Sam1, rho, 0.0, &model, &x, t, &mut ws, &mut out).unwrap();
            let ratio = crate::math::norm2(&out) / crate::math::norm2(&base);
            let margin = dot(model.params(), &x);
            let expect = sigmoid(-margin + rho * xn) / sigmoid(-margin);
            assert!((ratio - expect).abs() / expect < 1e-12);
            if let Some(p) = prev_ratio {
                assert!(ratio > p, "ratio must increase with the margin");
            }
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn one_step_stays_finite_on_extreme_weights() {
        let model = Model::Linear(LinearModel::new(vec![1e8, -1e8]));
        let data = binary_data(vec![1e3, 2e3, -3e3, 1e3], 2, 2, vec![1, -1]);
        for rule in Rule::ALL {
            if rule == Rule::RegSgd {
                continue;
            }
            let cfg = OptimConfig::new(rule, 0.01).with_rho(0.1);
            let next = step(&cfg, &model, &data, &[0, 1]).unwrap();
            assert!(next.params().iter().all(|p| p.is_finite()), "{rule:?}");
        }
    }

    #[test]
    fn multiclass_rules_run_and_collapse() {
        let mut rng = stream_rng(48, 0);
        let model = Model::Mlp(MlpModel::random(4, 3, 5, Activation::Relu, 0.4, &mut rng));
        use rand::Rng;
        let inputs: Vec<f64> = (0..8 * 3)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let obs: Vec<i64> = (0..8).map(|_| rng.gen_range(0..5)).collect();
        let data = multi_data(inputs, 8, 3, obs, 5);
        let batch: Vec<usize> = (0..8).collect();
        let sgd = step(&OptimConfig::new(Rule::Sgd, 0.05), &model, &data, &batch).unwrap();
        for rule in [Rule::Sam1, Rule::LSam, Rule::JSam, Rule::NSam] {
            let zero = step(&OptimConfig::new(rule, 0.05), &model, &data, &batch).unwrap();
            assert_eq!(zero.params(), sgd.params());
            let hot = step(
                &OptimConfig::new(rule, 0.05).with_rho(0.2),
                &model,
                &data,
                &batch,
            )
            .unwrap();
            assert!(rel_diff(hot.params(), sgd.params(), 1e-12) > 0.0);
        }
    }

    #[test]
    fn empty_batch_and_bad_config_rejected() {
        let model = Model::Linear(LinearModel::zeros(2));
        let data = binary_data(vec![1.0, 0.0], 1, 2, vec![1]);
        assert!(step(&OptimConfig::new(Rule::Sgd, 0.1), &model, &data, &[]).is_err());
        assert!(step(&OptimConfig::new(Rule::Sgd, 0.0), &model, &data, &[0]).is_err());
        let mut bad = OptimConfig::new(Rule::Sam1, 0.1);
        bad.rho = -0.5;
        assert!(step(&bad, &model, &data, &[0]).is_err());
    }
}
