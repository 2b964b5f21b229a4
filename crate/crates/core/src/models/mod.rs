//! Model families with closed-form per-example gradient decomposition.
//!
//! Every sample-wise gradient factors as `logit scale × network Jacobian`:
//! for binary targets `t ∈ {−1,+1}` the gradient of the logistic loss is
//! `∇ℓ = −t · σ(−t·f) · ∇f`, and for multiclass cross-entropy it is
//! `∇ℓ = ⟨softmax(f) − e_t, ∇f⟩`. The decomposition is computed explicitly —
//! no autodiff graph — which keeps the factor pair available to the
//! optimizers and the oracle checks.
//!
//! Parameters are stored as one flat `f64` buffer per model so perturbations
//! and norms act on the joint parameter vector.

mod checkpoint;

pub use checkpoint::{read_snlm, write_snlm};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, DEGENERATE_NORM};
use crate::math::{dot, log_sum_exp, norm2, sigmoid, softmax_into, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(&self, u: f64) -> f64 {
        match self {
            Activation::Relu => u.max(0.0),
            Activation::Identity => u,
        }
    }

    /// Derivative at `u`; the ReLU subgradient at 0 is taken as 0.
    #[inline]
    fn deriv(&self, u: f64) -> f64 {
        match self {
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Linear,
    Dln2,
    Mlp,
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Linear => "linear",
            ModelFamily::Dln2 => "dln2",
            ModelFamily::Mlp => "mlp",
        }
    }
}

/// Scalar-output linear model `f(w, x) = ⟨w, x⟩` for binary targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    w: Vec<f64>,
}

/// Two-layer deep linear network `f(v, W, x) = ⟨v, Wx⟩` (scalar output,
/// binary targets). Parameter layout: `[W row-major (h×d) | v (h)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dln2Model {
    params: Vec<f64>,
    hidden: usize,
    dim: usize,
}

/// Two-layer perceptron `f(x) = W2 · act(W1 · x)` without biases.
/// `classes == 1` gives a scalar output trained with the logistic loss
/// (binary ±1 targets); `classes ≥ 2` gives softmax cross-entropy.
/// Parameter layout: `[W1 row-major (h×d) | W2 row-major (K×h)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    params: Vec<f64>,
    hidden: usize,
    dim: usize,
    classes: usize,
    activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Dln2(Dln2Model),
    Mlp(MlpModel),
}

/// Model output: a scalar logit (binary families) or one logit per class.
#[derive(Clone, Debug, PartialEq)]
pub enum Logits {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Logits {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Logits::Scalar(f) => Some(*f),
            Logits::Vector(_) => None,
        }
    }
}

/// The loss-side factor of the sample-wise gradient: `σ(−t·f)` for binary
/// targets (always in (0,1) for finite margins), `softmax(f) − e_t` for
/// multiclass.
#[derive(Clone, Debug, PartialEq)]
pub enum LogitScale {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl LogitScale {
    /// Euclidean norm of the factor (for the binary scalar, its value).
    pub fn norm(&self) -> f64 {
        match self {
            LogitScale::Scalar(s) => *s,
            LogitScale::Vector(g) => norm2(g),
        }
    }
}

/// `∂ℓ/∂f`: the quantity backpropagated through the network Jacobian.
/// Binary: the scalar `−t·σ(−t·f)`. Multiclass: `softmax(f) − e_t`.
#[derive(Clone, Debug, PartialEq)]
pub enum Cotangent {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Network Jacobian `∇_w f`, flattened to the parameter layout. Multiclass
/// models carry one parameter-shaped block per class.
#[derive(Clone, Debug, PartialEq)]
pub enum Jacobian {
    Single(Vec<f64>),
    PerClass(Vec<Vec<f64>>),
}

/// Per-example factor pair with the gradient assembled from it.
///
/// `grad` is defined as the assembly of `(logit_scale, jacobian)`, so
/// re-assembling reproduces it bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct GradDecomp {
    pub logit_scale: LogitScale,
    pub jacobian: Jacobian,
    pub grad: Vec<f64>,
    pub loss: f64,
}

/// Cheap per-example evaluation (single forward pass).
#[derive(Clone, Copy, Debug)]
pub struct ExampleEval {
    pub loss: f64,
    /// Norm of the logit-scale factor (binary: σ(−t·f) itself).
    pub scale_norm: f64,
    pub predicted: i64,
}

/// Summary returned by the fused gradient computation.
#[derive(Clone, Copy, Debug)]
pub struct GradInfo {
    pub loss: f64,
    pub scale_norm: f64,
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            what,
            expected,
            got,
        })
    }
}

fn check_binary_target(t: i64) -> Result<()> {
    if t == 1 || t == -1 {
        Ok(())
    } else {
        Err(Error::InvalidLabel {
            label: t,
            expected: "±1 for a scalar-output model".into(),
        })
    }
}

fn check_class_target(t: i64, k: usize) -> Result<usize> {
    if t >= 0 && (t as usize) < k {
        Ok(t as usize)
    } else {
        Err(Error::InvalidLabel {
            label: t,
            expected: format!("class index in 0..{k}"),
        })
    }
}

impl LinearModel {
    pub fn new(w: Vec<f64>) -> Self {
        Self { w }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim] }
    }

    pub fn random<R: Rng>(dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: (0..dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }
}

impl Dln2Model {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            params: vec![0.0; hidden * dim + hidden],
            hidden,
            dim,
        }
    }

    pub fn random<R: Rng>(hidden: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(hidden, dim);
        for p in m.params.iter_mut() {
            *p = std * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    pub fn from_parts(w: &[f64], v: &[f64], hidden: usize, dim: usize) -> Result<Self> {
        check_dim("first-layer weights", hidden * dim, w.len())?;
        check_dim("second-layer weights", hidden, v.len())?;
        let mut params = Vec::with_capacity(hidden * dim + hidden);
        params.extend_from_slice(w);
        params.extend_from_slice(v);
        Ok(Self {
            params,
            hidden,
            dim,
        })
    }

    pub fn first_layer(&self) -> &[f64] {
        &self.params[..self.hidden * self.dim]
    }

    pub fn second_layer(&self) -> &[f64] {
        &self.params[self.hidden * self.dim..]
    }

    fn intermediate(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            z[i] = dot(&self.params[i * self.dim..(i + 1) * self.dim], x);
        }
        z
    }
}

impl MlpModel {
    pub fn zeros(hidden: usize, dim: usize, classes: usize, activation: Activation) -> Self {
        Self {
            params: vec![0.0; hidden * dim + classes * hidden],
            hidden,
            dim,
            classes,
            activation,
        }
    }

    pub fn random<R: Rng>(
        hidden: usize,
        dim: usize,
        classes: usize,
        activation: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::zeros(hidden, dim, classes, activation);
        for p in m.params.iter_mut() {
            *p = std * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn first_layer(&self) -> &[f64] {
        &self.params[..self.hidden * self.dim]
    }

    pub fn second_layer(&self) -> &[f64] {
        &self.params[self.hidden * self.dim..]
    }

    /// Pre-activations `u = W1·x` and activations `a = act(u)`.
    fn hidden_parts(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            u[i] = dot(&self.params[i * self.dim..(i + 1) * self.dim], x);
        }
        let a = u.iter().map(|&ui| self.activation.apply(ui)).collect();
        (u, a)
    }

    fn logits_from_hidden(&self, a: &[f64]) -> Vec<f64> {
        let w2 = self.second_layer();
        (0..self.classes)
            .map(|k| dot(&w2[k * self.hidden..(k + 1) * self.hidden], a))
            .collect()
    }
}

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Linear(_) => ModelFamily::Linear,
            Model::Dln2(_) => ModelFamily::Dln2,
            Model::Mlp(_) => ModelFamily::Mlp,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.w.len(),
            Model::Dln2(m) => m.dim,
            Model::Mlp(m) => m.dim,
        }
    }

    /// 1 for scalar-output (binary) models, K for multiclass.
    pub fn output_classes(&self) -> usize {
        match self {
            Model::Linear(_) | Model::Dln2(_) => 1,
            Model::Mlp(m) => m.classes,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.output_classes() == 1
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::Linear(m) => &m.w,
            Model::Dln2(m) => &m.params,
            Model::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Linear(m) => &mut m.w,
            Model::Dln2(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        check_dim("input", self.input_dim(), x.len())?;
        Ok(match self {
            Model::Linear(m) => Logits::Scalar(dot(&m.w, x)),
            Model::Dln2(m) => {
                let z = m.intermediate(x);
                Logits::Scalar(dot(m.second_layer(), &z))
            }
            Model::Mlp(m) => {
                let (_, a) = m.hidden_parts(x);
                let logits = m.logits_from_hidden(&a);
                if m.classes == 1 {
                    Logits::Scalar(logits[0])
                } else {
                    Logits::Vector(logits)
                }
            }
        })
    }

    /// Predicted label. Binary: `sign(f)` with `sign(0) = +1`. Multiclass:
    /// argmax with ties resolved to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<i64> {
        Ok(match self.forward(x)? {
            Logits::Scalar(f) => {
                if f >= 0.0 {
                    1
                } else {
                    -1
                }
            }
            Logits::Vector(logits) => argmax(&logits) as i64,
        })
    }

    pub fn loss(&self, x: &[f64], t: i64) -> Result<f64> {
        Ok(self.eval_example(x, t)?.loss)
    }

    /// Loss, logit-scale norm, and prediction from one forward pass.
    pub fn eval_example(&self, x: &[f64], t: i64) -> Result<ExampleEval> {
        match self.forward(x)? {
            Logits::Scalar(f) => {
                check_binary_target(t)?;
                let margin = t as f64 * f;
                Ok(ExampleEval {
                    loss: softplus(-margin),
                    scale_norm: sigmoid(-margin),
                    predicted: if f >= 0.0 { 1 } else { -1 },
                })
            }
            Logits::Vector(logits) => {
                let ti = check_class_target(t, logits.len())?;
                let mut p = vec![0.0; logits.len()];
                softmax_into(&logits, &mut p);
                p[ti] -= 1.0;
                Ok(ExampleEval {
                    loss: log_sum_exp(&logits) - logits[ti],
                    scale_norm: norm2(&p),
                    predicted: argmax(&logits) as i64,
                })
            }
        }
    }

    /// `∂ℓ/∂f` at this model, plus the loss and logit-scale norm.
    pub fn cotangent(&self, x: &[f64], t: i64) -> Result<(Cotangent, GradInfo)> {
        match self.forward(x)? {
            Logits::Scalar(f) => {
                check_binary_target(t)?;
                let margin = t as f64 * f;
                let sigma = sigmoid(-margin);
                Ok((
                    Cotangent::Scalar(-(t as f64) * sigma),
                    GradInfo {
                        loss: softplus(-margin),
                        scale_norm: sigma,
                    },
                ))
            }
            Logits::Vector(logits) => {
                let ti = check_class_target(t, logits.len())?;
                let loss = log_sum_exp(&logits) - logits[ti];
                let mut g = vec![0.0; logits.len()];
                softmax_into(&logits, &mut g);
                g[ti] -= 1.0;
                let scale_norm = norm2(&g);
                Ok((
                    Cotangent::Vector(g),
                    GradInfo { loss, scale_norm },
                ))
            }
        }
    }

    /// Fused forward/backward: writes `∇_w ℓ(x, t)` over `out`.
    pub fn grad_into(&self, x: &[f64], t: i64, out: &mut [f64]) -> Result<GradInfo> {
        check_dim("gradient buffer", self.num_params(), out.len())?;
        let (cot, info) = self.cotangent(x, t)?;
        self.backward_into(x, &cot, out)?;
        Ok(info)
    }

    /// Backward pass with a caller-supplied cotangent: writes
    /// `Σ_k cot_k · ∇_w f_k` over `out` (binary: `cot · ∇_w f`). This is what
    /// lets the hybrid update rules freeze one factor of the decomposition
    /// while the other is evaluated at perturbed weights.
    pub fn grad_with_cotangent_into(
        &self,
        x: &[f64],
        cot: &Cotangent,
        out: &mut [f64],
    ) -> Result<()> {
        check_dim("gradient buffer", self.num_params(), out.len())?;
        self.backward_into(x, cot, out)
    }

    fn backward_into(&self, x: &[f64], cot: &Cotangent, out: &mut [f64]) -> Result<()> {
        check_dim("input", self.input_dim(), x.len())?;
        match (self, cot) {
            (Model::Linear(_), Cotangent::Scalar(c)) => {
                for (o, &xj) in out.iter_mut().zip(x) {
                    *o = c * xj;
                }
                Ok(())
            }
            (Model::Dln2(m), Cotangent::Scalar(c)) => {
                let z = m.intermediate(x);
                let v = m.second_layer();
                for i in 0..m.hidden {
                    let cv = c * v[i];
                    let row = &mut out[i * m.dim..(i + 1) * m.dim];
                    for (o, &xj) in row.iter_mut().zip(x) {
                        *o = cv * xj;
                    }
                }
                let v_out = &mut out[m.hidden * m.dim..];
                for (o, &zi) in v_out.iter_mut().zip(&z) {
                    *o = c * zi;
                }
                Ok(())
            }
            (Model::Mlp(m), cot) => {
                let (u, a) = m.hidden_parts(x);
                let w2 = m.second_layer();
                // back[i] = Σ_k cot_k W2[k,i] · act'(u_i)
                let mut back = vec![0.0; m.hidden];
                let w1_len = m.hidden * m.dim;
                match cot {
                    Cotangent::Scalar(c) => {
                        if m.classes != 1 {
                            return Err(Error::DimMismatch {
                                what: "cotangent",
                                expected: m.classes,
                                got: 1,
                            });
                        }
                        for i in 0..m.hidden {
                            back[i] = c * w2[i];
                            out[w1_len + i] = c * a[i];
                        }
                    }
                    Cotangent::Vector(g) => {
                        check_dim("cotangent", m.classes, g.len())?;
                        for k in 0..m.classes {
                            let row = &w2[k * m.hidden..(k + 1) * m.hidden];
                            let gk = g[k];
                            for i in 0..m.hidden {
                                back[i] += gk * row[i];
                            }
                            let out_row =
                                &mut out[w1_len + k * m.hidden..w1_len + (k + 1) * m.hidden];
                            for (o, &ai) in out_row.iter_mut().zip(&a) {
                                *o = gk * ai;
                            }
                        }
                    }
                }
                for i in 0..m.hidden {
                    let bi = back[i] * m.activation.deriv(u[i]);
                    let row = &mut out[i * m.dim..(i + 1) * m.dim];
                    for (o, &xj) in row.iter_mut().zip(x) {
                        *o = bi * xj;
                    }
                }
                Ok(())
            }
            _ => Err(Error::DimMismatch {
                what: "cotangent",
                expected: self.output_classes(),
                got: usize::MAX,
            }),
        }
    }

    /// Full factor pair for one example. `grad` is assembled from the two
    /// factors, so the decomposition identity holds by construction.
    pub fn grad_decomp(&self, x: &[f64], t: i64) -> Result<GradDecomp> {
        check_dim("input", self.input_dim(), x.len())?;
        if self.is_binary() {
            check_binary_target(t)?;
            let f = match self.forward(x)? {
                Logits::Scalar(f) => f,
                Logits::Vector(_) => unreachable!(),
            };
            let margin = t as f64 * f;
            let sigma = sigmoid(-margin);
            let jac = self.jacobian_single(x);
            let c = -(t as f64) * sigma;
            let grad = jac.iter().map(|&j| c * j).collect();
            Ok(GradDecomp {
                logit_scale: LogitScale::Scalar(sigma),
                jacobian: Jacobian::Single(jac),
                grad,
                loss: softplus(-margin),
            })
        } else {
            let m = match self {
                Model::Mlp(m) => m,
                _ => unreachable!(),
            };
            let ti = check_class_target(t, m.classes)?;
            let (u, a) = m.hidden_parts(x);
            let logits = m.logits_from_hidden(&a);
            let loss = log_sum_exp(&logits) - logits[ti];
            let mut g = vec![0.0; m.classes];
            softmax_into(&logits, &mut g);
            g[ti] -= 1.0;

            let w1_len = m.hidden * m.dim;
            let w2 = m.second_layer();
            let mut per_class = Vec::with_capacity(m.classes);
            for k in 0..m.classes {
                let mut jk = vec![0.0; m.params.len()];
                for i in 0..m.hidden {
                    let coeff = w2[k * m.hidden + i] * m.activation.deriv(u[i]);
                    let row = &mut jk[i * m.dim..(i + 1) * m.dim];
                    for (o, &xj) in row.iter_mut().zip(x) {
                        *o = coeff * xj;
                    }
                }
                for i in 0..m.hidden {
                    jk[w1_len + k * m.hidden + i] = a[i];
                }
                per_class.push(jk);
            }

            let mut grad = vec![0.0; m.params.len()];
            for k in 0..m.classes {
                for (gr, &jv) in grad.iter_mut().zip(&per_class[k]) {
                    *gr += g[k] * jv;
                }
            }
            Ok(GradDecomp {
                logit_scale: LogitScale::Vector(g),
                jacobian: Jacobian::PerClass(per_class),
                grad,
                loss,
            })
        }
    }

    /// Network Jacobian for scalar-output models, flattened to the parameter
    /// layout.
    fn jacobian_single(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Model::Linear(_) => x.to_vec(),
            Model::Dln2(m) => {
                let z = m.intermediate(x);
                let v = m.second_layer();
                let mut jac = vec![0.0; m.params.len()];
                for i in 0..m.hidden {
                    let vi = v[i];
                    let row = &mut jac[i * m.dim..(i + 1) * m.dim];
                    for (o, &xj) in row.iter_mut().zip(x) {
                        *o = vi * xj;
                    }
                }
                let v_jac = &mut jac[m.hidden * m.dim..];
                for (o, &zi) in v_jac.iter_mut().zip(&z) {
                    *o = zi;
                }
                jac
            }
            Model::Mlp(m) => {
                debug_assert_eq!(m.classes, 1);
                let (u, a) = m.hidden_parts(x);
                let w2 = m.second_layer();
                let w1_len = m.hidden * m.dim;
                let mut jac = vec![0.0; m.params.len()];
                for i in 0..m.hidden {
                    let coeff = w2[i] * m.activation.deriv(u[i]);
                    let row = &mut jac[i * m.dim..(i + 1) * m.dim];
                    for (o, &xj) in row.iter_mut().zip(x) {
                        *o = coeff * xj;
                    }
                    jac[w1_len + i] = a[i];
                }
                jac
            }
        }
    }

    /// Copy of the model with parameters shifted by `rho · direction /
    /// ‖direction‖` (joint norm over all parameter blocks). `rho = 0` returns
    /// the model unchanged; a zero-norm direction is reported as
    /// [`Error::DegenerateGradient`] so the caller can apply its policy.
    pub fn perturbed(&self, direction: &[f64], rho: f64) -> Result<Model> {
        check_dim("perturbation direction", self.num_params(), direction.len())?;
        if rho == 0.0 {
            return Ok(self.clone());
        }
        let norm = norm2(direction);
        if norm < DEGENERATE_NORM {
            return Err(Error::DegenerateGradient { norm });
        }
        let mut out = self.clone();
        out.perturb_from(self, direction, rho / norm);
        Ok(out)
    }

    /// `self = base + scale · direction`, reusing this model's buffer.
    /// Shapes must match `base`.
    pub(crate) fn perturb_from(&mut self, base: &Model, direction: &[f64], scale: f64) {
        let dst = self.params_mut();
        let src = base.params();
        for i in 0..src.len() {
            dst[i] = src[i] + scale * direction[i];
        }
    }

    /// Hidden activation `z` (DLN2: `Wx`; MLP: `act(W1·x)`). Linear models
    /// have none.
    pub fn hidden_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("input", self.input_dim(), x.len())?;
        match self {
            Model::Linear(_) => Err(Error::UnsupportedModel { family: "linear" }),
            Model::Dln2(m) => Ok(m.intermediate(x)),
            Model::Mlp(m) => Ok(m.hidden_parts(x).1),
        }
    }

    /// Norm of the last-layer weights (`‖v‖₂` / Frobenius for a matrix).
    pub fn last_layer_norm(&self) -> Result<f64> {
        Ok(norm2(self.last_layer_slice()?))
    }

    fn last_layer_slice(&self) -> Result<&[f64]> {
        match self {
            Model::Linear(_) => Err(Error::UnsupportedModel { family: "linear" }),
            Model::Dln2(m) => Ok(m.second_layer()),
            Model::Mlp(m) => Ok(m.second_layer()),
        }
    }

    /// Parameter-index range of the last layer within the flat layout.
    pub fn last_layer_range(&self) -> Result<std::ops::Range<usize>> {
        match self {
            Model::Linear(_) => Err(Error::UnsupportedModel { family: "linear" }),
            Model::Dln2(m) => Ok(m.hidden * m.dim..m.params.len()),
            Model::Mlp(m) => Ok(m.hidden * m.dim..m.params.len()),
        }
    }

    /// Accumulate `gamma · ∂‖z‖₂/∂params` for this example into `out`
    /// (the unsquared activation-norm penalty). `z = 0` contributes nothing
    /// (zero subgradient).
    pub fn activation_norm_grad_into(
        &self,
        x: &[f64],
        gamma: f64,
        out: &mut [f64],
    ) -> Result<()> {
        check_dim("gradient buffer", self.num_params(), out.len())?;
        check_dim("input", self.input_dim(), x.len())?;
        match self {
            Model::Linear(_) => Err(Error::UnsupportedModel { family: "linear" }),
            Model::Dln2(m) => {
                let z = m.intermediate(x);
                let nz = norm2(&z);
                if nz > 0.0 {
                    for i in 0..m.hidden {
                        let coeff = gamma * z[i] / nz;
                        let row = &mut out[i * m.dim..(i + 1) * m.dim];
                        for (o, &xj) in row.iter_mut().zip(x) {
                            *o += coeff * xj;
                        }
                    }
                }
                Ok(())
            }
            Model::Mlp(m) => {
                let (u, a) = m.hidden_parts(x);
                let na = norm2(&a);
                if na > 0.0 {
                    for i in 0..m.hidden {
                        let coeff = gamma * (a[i] / na) * m.activation.deriv(u[i]);
                        if coeff == 0.0 {
                            continue;
                        }
                        let row = &mut out[i * m.dim..(i + 1) * m.dim];
                        for (o, &xj) in row.iter_mut().zip(x) {
                            *o += coeff * xj;
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rel_diff;
    use crate::rng::stream_rng;

    #[test]
    fn linear_forward_is_dot_product() {
        let m = Model::Linear(LinearModel::new(vec![1.0, 2.0]));
        assert_eq!(m.forward(&[3.0, 4.0]).unwrap(), Logits::Scalar(11.0));
        assert!(m.forward(&[1.0]).is_err());
    }

    #[test]
    fn dln2_forward_picks_intermediate() {
        let m = Model::Dln2(
            Dln2Model::from_parts(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 2, 2).unwrap(),
        );
        assert_eq!(m.forward(&[0.0, 1.0]).unwrap(), Logits::Scalar(0.0));
    }

    #[test]
    fn mlp_relu_kills_negative_units() {
        // W1 = −I, W2 = I: all-positive inputs give zero logits
        let mut m = MlpModel::zeros(2, 2, 2, Activation::Relu);
        m.params[0] = -1.0;
        m.params[3] = -1.0;
        m.params[4] = 1.0;
        m.params[7] = 1.0;
        let m = Model::Mlp(m);
        assert_eq!(
            m.forward(&[0.5, 2.0]).unwrap(),
            Logits::Vector(vec![0.0, 0.0])
        );
    }

    #[test]
    fn zero_weights_give_half_logit_scale() {
        let m = Model::Linear(LinearModel::zeros(3));
        let d = m.grad_decomp(&[1.0, -2.0, 0.5], 1).unwrap();
        assert_eq!(d.logit_scale, LogitScale::Scalar(0.5));
        assert_eq!(d.loss, softplus(0.0));
    }

    #[test]
    fn dln2_jacobian_blocks_match_hand_computation() {
        // v=(1,0), W=I₂, x=(0,1), t=1: f=0, z=(0,1), ∇_W f = v xᵀ, ∇_v f = z
        let m = Model::Dln2(
            Dln2Model::from_parts(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 2, 2).unwrap(),
        );
        let d = m.grad_decomp(&[0.0, 1.0], 1).unwrap();
        match &d.jacobian {
            Jacobian::Single(j) => {
                assert_eq!(&j[..4], &[0.0, 1.0, 0.0, 0.0]); // v xᵀ rows
                assert_eq!(&j[4..], &[0.0, 1.0]); // z
            }
            _ => panic!("expected single-block jacobian"),
        }
        assert_eq!(d.logit_scale, LogitScale::Scalar(0.5));
    }

    #[test]
    fn multiclass_uniform_logits_scale_norm() {
        let m = Model::Mlp(MlpModel::zeros(4, 3, 10, Activation::Relu));
        let e = m.eval_example(&[0.1, 0.2, 0.3], 3).unwrap();
        assert!((e.scale_norm - 0.9f64.sqrt()).abs() < 1e-12);
        assert!((e.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decomposition_assembly_is_bit_exact() {
        let mut rng = stream_rng(5, 0);
        let m = Model::Mlp(MlpModel::random(4, 3, 5, Activation::Relu, 0.7, &mut rng));
        let x = [0.3, -1.2, 0.8];
        let d = m.grad_decomp(&x, 2).unwrap();
        let per_class = match &d.jacobian {
            Jacobian::PerClass(j) => j,
            _ => panic!(),
        };
        let g = match &d.logit_scale {
            LogitScale::Vector(g) => g,
            _ => panic!(),
        };
        let mut re = vec![0.0; m.num_params()];
        for k in 0..g.len() {
            for (r, &jv) in re.iter_mut().zip(&per_class[k]) {
                *r += g[k] * jv;
            }
        }
        assert_eq!(re, d.grad);
    }

    #[test]
    fn binary_decomposition_assembly_is_bit_exact() {
        let mut rng = stream_rng(6, 0);
        let m = Model::Dln2(Dln2Model::random(3, 4, 0.5, &mut rng));
        let x = [0.1, 0.9, -0.4, 2.0];
        let d = m.grad_decomp(&x, -1).unwrap();
        let jac = match &d.jacobian {
            Jacobian::Single(j) => j,
            _ => panic!(),
        };
        let s = match d.logit_scale {
            LogitScale::Scalar(s) => s,
            _ => panic!(),
        };
        let re: Vec<f64> = jac.iter().map(|&j| -(-1.0) * s * j * -1.0).collect();
        // assemble exactly as the library does: c = −t·σ, grad = c·jac
        let c = -(-1.0f64) * s;
        let re2: Vec<f64> = jac.iter().map(|&j| c * j).collect();
        assert_eq!(re2, d.grad);
        drop(re);
    }

    #[test]
    fn grad_into_matches_decomp_closely() {
        let mut rng = stream_rng(7, 0);
        for t in [1i64, -1] {
            let m = Model::Dln2(Dln2Model::random(3, 5, 0.4, &mut rng));
            let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.77).sin()).collect();
            let d = m.grad_decomp(&x, t).unwrap();
            let mut g = vec![0.0; m.num_params()];
            let info = m.grad_into(&x, t, &mut g).unwrap();
            assert!(rel_diff(&g, &d.grad, 1e-12) < 1e-14);
            assert!((info.loss - d.loss).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_and_logit_scale_move_together() {
        // larger loss ⇔ larger σ(−t·f) on the binary side
        let m = |w: f64| Model::Linear(LinearModel::new(vec![w]));
        let mut last = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for w in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let e = m(-w).eval_example(&[1.0], 1).unwrap();
            assert!(e.loss > last.0 && e.scale_norm > last.1);
            last = (e.loss, e.scale_norm);
        }
    }

    #[test]
    fn mlp_identity_single_class_reduces_to_dln2() {
        let mut rng = stream_rng(8, 0);
        let dln = Dln2Model::random(6, 4, 0.3, &mut rng);
        let mlp = MlpModel {
            params: dln.params.clone(),
            hidden: 6,
            dim: 4,
            classes: 1,
            activation: Activation::Identity,
        };
        let (md, mm) = (Model::Dln2(dln), Model::Mlp(mlp));
        let x = [0.5, -0.2, 0.9, 0.1];
        for t in [1i64, -1] {
            let mut gd = vec![0.0; md.num_params()];
            let mut gm = vec![0.0; mm.num_params()];
            md.grad_into(&x, t, &mut gd).unwrap();
            mm.grad_into(&x, t, &mut gm).unwrap();
            assert!(rel_diff(&gd, &gm, 1e-12) < 1e-12);
        }
    }

    #[test]
    fn perturbed_shifts_by_rho_over_norm() {
        let m = Model::Linear(LinearModel::new(vec![1.0, 1.0]));
        let p = m.perturbed(&[3.0, 4.0], 10.0).unwrap();
        assert_eq!(p.params(), &[7.0, 9.0]); // 1 + 10·(3,4)/5

        let same = m.perturbed(&[3.0, 4.0], 0.0).unwrap();
        assert_eq!(same.params(), m.params());

        assert!(matches!(
            m.perturbed(&[0.0, 0.0], 1.0),
            Err(Error::DegenerateGradient { .. })
        ));
    }

    #[test]
    fn dln2_joint_jacobian_norm() {
        // v=(1,0), W=I₂, x=(0,1): J = √(‖z‖² + ‖x‖²‖v‖²) = √2
        let m = Model::Dln2(
            Dln2Model::from_parts(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0], 2, 2).unwrap(),
        );
        let d = m.grad_decomp(&[0.0, 1.0], 1).unwrap();
        let j = match &d.jacobian {
            Jacobian::Single(j) => norm2(j),
            _ => panic!(),
        };
        assert!((j - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn linear_perturbation_is_label_scaled_example() {
        // ε = −ρ t x/‖x‖, so the perturbed margin is t⟨w,x⟩ − ρ‖x‖
        let m = Model::Linear(LinearModel::new(vec![0.7, -0.3]));
        let x = [3.0, 4.0];
        let t = 1i64;
        let rho = 0.5;
        let mut g = vec![0.0; 2];
        m.grad_into(&x, t, &mut g).unwrap();
        let p = m.perturbed(&g, rho).unwrap();
        let f = p.forward(&x).unwrap().scalar().unwrap();
        let f0 = m.forward(&x).unwrap().scalar().unwrap();
        let expect = t as f64 * f0 - rho * norm2(&x);
        assert!((t as f64 * f - expect).abs() < 1e-12);
    }

    #[test]
    fn extreme_margins_stay_finite() {
        let m = Model::Linear(LinearModel::new(vec![1e6]));
        for t in [1i64, -1] {
            let mut g = vec![0.0; 1];
            let info = m.grad_into(&[1.0], t, &mut g).unwrap();
            assert!(info.loss.is_finite());
            assert!(g[0].is_finite());
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let m = Model::Linear(LinearModel::zeros(2));
        assert!(m.eval_example(&[1.0, 2.0], 0).is_err());
        let mc = Model::Mlp(MlpModel::zeros(2, 2, 3, Activation::Relu));
        assert!(mc.eval_example(&[1.0, 2.0], 3).is_err());
        assert!(mc.eval_example(&[1.0, 2.0], -1).is_err());
    }

    #[test]
    fn hidden_activation_and_last_layer() {
        let m = Model::Dln2(
            Dln2Model::from_parts(&[1.0, 0.0, 0.0, 1.0], &[3.0, 4.0], 2, 2).unwrap(),
        );
        assert_eq!(m.hidden_activation(&[2.0, 5.0]).unwrap(), vec![2.0, 5.0]);
        assert_eq!(m.last_layer_norm().unwrap(), 5.0);
        let lin = Model::Linear(LinearModel::zeros(2));
        assert!(matches!(
            lin.hidden_activation(&[1.0, 1.0]),
            Err(Error::UnsupportedModel { .. })
        ));
    }
}
