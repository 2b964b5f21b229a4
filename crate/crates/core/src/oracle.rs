//! Independent brute-force references for every closed-form path.
//!
//! Each check validates a library code path against an implementation that
//! shares no code with it: finite differences of a straight-line loss
//! against the analytic gradients, the perturb-then-recompute Jacobian
//! update against its closed form, a direct dense solve for the ridge limit.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::math::{cosine, dot, norm2, rel_diff};
use crate::models::{Activation, Dln2Model, LinearModel, MlpModel, Model};
use crate::optim::{per_example_update, step, OptimConfig, Rule, Workspace};
use crate::rng::stream_rng;
use crate::synthdata::{sample_toy, LabelEncoding, LabeledDataset, ToyDataConfig};

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub instances: usize,
}

impl OracleReport {
    fn new(name: &str, max_rel_err: f64, tol: f64, instances: usize) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err,
            tol,
            pass: max_rel_err <= tol,
            instances,
        }
    }
}

/// Fixed-format table for terminal output.
pub fn report_table(reports: &[OracleReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<34} {:>12} {:>10} {:>6} {:>6}\n",
        "check", "max_rel_err", "tol", "n", "pass"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<34} {:>12.3e} {:>10.1e} {:>6} {:>6}\n",
            r.name,
            r.max_rel_err,
            r.tol,
            r.instances,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    out
}

pub fn reports_to_json(reports: &[OracleReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

// ───────────────────────── straight-line reference implementations ──────────

/// Forward + loss written independently of the library's fused paths.
fn reference_loss(model: &Model, x: &[f64], t: i64) -> f64 {
    match model {
        Model::Linear(_) => {
            let f = dot(model.params(), x);
            binary_loss(t, f)
        }
        Model::Dln2(m) => {
            let h = m.second_layer().len();
            let d = x.len();
            let w = m.first_layer();
            let v = m.second_layer();
            let mut f = 0.0;
            for i in 0..h {
                let mut zi = 0.0;
                for j in 0..d {
                    zi += w[i * d + j] * x[j];
                }
                f += v[i] * zi;
            }
            binary_loss(t, f)
        }
        Model::Mlp(m) => {
            let k = model.output_classes();
            let d = x.len();
            let w2 = m.second_layer();
            let h = w2.len() / k;
            let w1 = m.first_layer();
            let mut a = vec![0.0; h];
            for i in 0..h {
                let mut ui = 0.0;
                for j in 0..d {
                    ui += w1[i * d + j] * x[j];
                }
                a[i] = match m.activation() {
                    Activation::Relu => ui.max(0.0),
                    Activation::Identity => ui,
                };
            }
            let logits: Vec<f64> = (0..k)
                .map(|c| {
                    let mut f = 0.0;
                    for i in 0..h {
                        f += w2[c * h + i] * a[i];
                    }
                    f
                })
                .collect();
            if k == 1 {
                binary_loss(t, logits[0])
            } else {
                let z: f64 = logits.iter().map(|&l| l.exp()).sum();
                -(logits[t as usize].exp() / z).ln()
            }
        }
    }
}

fn binary_loss(t: i64, f: f64) -> f64 {
    (1.0 + (-(t as f64) * f).exp()).ln()
}

fn reference_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Dense solve by Gaussian elimination with partial pivoting (small systems).
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

// ─────────────────────────────── checks ─────────────────────────────────────

const FD_STEP: f64 = 1e-5;
/// Instances with a pre-activation inside this window of a ReLU kink are
/// resampled (central differences straddle the nondifferentiable point).
const KINK_WINDOW: f64 = 10.0 * FD_STEP;

/// Central finite differences of the reference loss against the analytic
/// per-example gradient, over random small instances of one model family.
pub fn fd_gradient_check(
    family: crate::models::ModelFamily,
    n_instances: usize,
    tol: f64,
    seed: u64,
) -> OracleReport {
    fd_gradient_check_with(family, n_instances, tol, seed, |m, x, t| {
        Ok(m.grad_decomp(x, t)?.grad)
    })
}

/// Same check with a caller-supplied gradient (lets tests verify the check
/// itself catches a wrong gradient).
pub fn fd_gradient_check_with<F>(
    family: crate::models::ModelFamily,
    n_instances: usize,
    tol: f64,
    seed: u64,
    grad_fn: F,
) -> OracleReport
where
    F: Fn(&Model, &[f64], i64) -> Result<Vec<f64>>,
{
    let name = format!("fd_gradient_{}", family.name());
    let mut worst = 0.0f64;
    for inst in 0..n_instances {
        let mut rng = stream_rng(seed, inst as u64 + 1);
        let (model, x, t) = loop {
            let candidate = random_instance(family, inst, &mut rng);
            if !has_relu_kink(&candidate.0, &candidate.1) {
                break candidate;
            }
        };
        let analytic = grad_fn(&model, &x, t).expect("gradient on a valid instance");
        let mut fd = vec![0.0; model.num_params()];
        for j in 0..fd.len() {
            let mut plus = model.clone();
            plus.params_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[j] -= FD_STEP;
            fd[j] = (reference_loss(&plus, &x, t) - reference_loss(&minus, &x, t))
                / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_diff(&fd, &analytic, 1e-12));
    }
    OracleReport::new(&name, worst, tol, n_instances)
}

fn random_instance<R: Rng>(
    family: crate::models::ModelFamily,
    inst: usize,
    rng: &mut R,
) -> (Model, Vec<f64>, i64) {
    use crate::models::ModelFamily::*;
    use rand_distr::StandardNormal;
    let normal = |rng: &mut R, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    match family {
        Linear => {
            let d = rng.gen_range(3..=10);
            let model = Model::Linear(LinearModel::random(d, 0.8, rng));
            let x = normal(rng, d);
            let t = if rng.gen::<bool>() { 1 } else { -1 };
            (model, x, t)
        }
        Dln2 => {
            let h = rng.gen_range(2..=5);
            let d = rng.gen_range(3..=8);
            let model = Model::Dln2(Dln2Model::random(h, d, 0.7, rng));
            let x = normal(rng, d);
            let t = if rng.gen::<bool>() { 1 } else { -1 };
            (model, x, t)
        }
        Mlp => {
            let h = rng.gen_range(3..=6);
            let d = rng.gen_range(3..=8);
            let activation = if inst % 3 == 2 {
                Activation::Identity
            } else {
                Activation::Relu
            };
            if inst % 2 == 0 {
                let model = Model::Mlp(MlpModel::random(h, d, 1, activation, 0.7, rng));
                let x = normal(rng, d);
                let t = if rng.gen::<bool>() { 1 } else { -1 };
                (model, x, t)
            } else {
                let k = rng.gen_range(3..=6);
                let model = Model::Mlp(MlpModel::random(h, d, k, activation, 0.7, rng));
                let x = normal(rng, d);
                let t = rng.gen_range(0..k) as i64;
                (model, x, t)
            }
        }
    }
}

fn has_relu_kink(model: &Model, x: &[f64]) -> bool {
    match model {
        Model::Mlp(m) if m.activation() == Activation::Relu => {
            let d = x.len();
            let h = m.first_layer().len() / d;
            (0..h).any(|i| dot(&m.first_layer()[i * d..(i + 1) * d], x).abs() < KINK_WINDOW)
        }
        _ => false,
    }
}

/// Perturb-then-recompute-Jacobian against the closed form on random
/// two-layer deep linear networks:
/// first layer `−∇_W ℓ − (ρσ/J)·z·xᵀ`, second layer `−∇_v ℓ − (ρσ‖x‖²/J)·v`,
/// with `J = √(‖z‖² + ‖x‖²‖v‖²)`.
pub fn jsam_identity_check(n_instances: usize, tol: f64, seed: u64) -> OracleReport {
    use rand_distr::StandardNormal;
    let mut worst = 0.0f64;
    for inst in 0..n_instances {
        let mut rng = stream_rng(seed, 1_000_000 + inst as u64);
        let h = rng.gen_range(2..=5);
        let d = rng.gen_range(3..=7);
        let model = Model::Dln2(Dln2Model::random(h, d, 0.7, &mut rng));
        let x: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t: i64 = if rng.gen::<bool>() { 1 } else { -1 };
        let rho = if inst == 0 { 0.0 } else { rng.gen_range(0.0..2.0) };

        // path (a): the library update (perturb, then recompute the Jacobian)
        let mut ws = Workspace::new(&model);
        let mut lib = vec![0.0; model.num_params()];
        per_example_update(Rule::JSam, rho, 0.0, &model, &x, t, &mut ws, &mut lib).unwrap();

        // path (b): straight-line closed form
        let (w, v) = match &model {
            Model::Dln2(m) => (m.first_layer(), m.second_layer()),
            _ => unreachable!(),
        };
        let tf = t as f64;
        let mut z = vec![0.0; h];
        for i in 0..h {
            for j in 0..d {
                z[i] += w[i * d + j] * x[j];
            }
        }
        let f: f64 = (0..h).map(|i| v[i] * z[i]).sum();
        let s = reference_sigmoid(-tf * f);
        let xn2 = dot(&x, &x);
        let j_norm = (dot(&z, &z) + xn2 * dot(v, v)).sqrt();
        let mut closed = vec![0.0; model.num_params()];
        for i in 0..h {
            for jj in 0..d {
                closed[i * d + jj] = -tf * s * v[i] * x[jj] + (rho * s / j_norm) * z[i] * x[jj];
            }
        }
        for i in 0..h {
            closed[h * d + i] = -tf * s * z[i] + (rho * s * xn2 / j_norm) * v[i];
        }

        worst = worst.max(rel_diff(&lib, &closed, 1e-12));
    }
    OracleReport::new("jsam_closed_form", worst, tol, n_instances)
}

/// The preferential-upweighting ratio `f(z, C) = σ(−z + C)/σ(−z)
/// = (1 + e^z)/(1 + e^{z−C})`.
pub fn upweight_ratio(z: f64, c: f64) -> f64 {
    (1.0 + z.exp()) / (1.0 + (z - c).exp())
}

/// Strict monotonicity of the upweighting ratio in the margin, for every
/// positive constant on the grid; also checks the central-difference
/// derivative stays positive.
pub fn lemma_monotonicity_check(z_points: usize, c_grid: &[f64]) -> OracleReport {
    let mut worst_violation = 0.0f64;
    let mut checked = 0usize;
    let (z_lo, z_hi) = (-10.0, 10.0);
    for &c in c_grid {
        assert!(c > 0.0, "the ratio is constant for C = 0");
        let mut prev = upweight_ratio(z_lo, c);
        for k in 1..z_points {
            let z = z_lo + (z_hi - z_lo) * k as f64 / (z_points - 1) as f64;
            let cur = upweight_ratio(z, c);
            if cur <= prev {
                worst_violation = worst_violation.max(prev - cur).max(f64::MIN_POSITIVE);
            }
            let h = 1e-5;
            let deriv = (upweight_ratio(z, c) - upweight_ratio(z - 2.0 * h, c)) / (2.0 * h);
            if deriv <= 0.0 {
                worst_violation = worst_violation.max(-deriv).max(f64::MIN_POSITIVE);
            }
            prev = cur;
            checked += 1;
        }
    }
    OracleReport::new("lemma_monotonicity", worst_violation, 0.0, checked)
}

/// Large-ρ limit of per-example SAM on the toy distribution, plus the ridge
/// regression limit. Returns one report per sub-check.
pub fn asymptotic_sam_check(cfg: &ToyDataConfig, rho_large: f64, seed: u64) -> Vec<OracleReport> {
    let (train, _) = sample_toy(cfg).expect("valid toy config");
    let n = train.len();
    let d = train.dim();

    // with w = 0 and a huge ρ the mean per-example SAM update aligns with Xᵀt
    let model = Model::Linear(LinearModel::zeros(d));
    let mut ws = Workspace::new(&model);
    let mut contrib = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for i in 0..n {
        per_example_update(
            Rule::Sam1,
            rho_large,
            0.0,
            &model,
            train.input(i),
            train.observed(i),
            &mut ws,
            &mut contrib,
        )
        .unwrap();
        for j in 0..d {
            mean[j] += contrib[j] / n as f64;
        }
    }
    let update: Vec<f64> = mean.iter().map(|&g| -g).collect();
    let mut xt_t = vec![0.0; d];
    for i in 0..n {
        let ti = train.observed(i) as f64;
        for j in 0..d {
            xt_t[j] += ti * train.input(i)[j];
        }
    }
    let cos_err = 1.0 - cosine(&update, &xt_t);

    // perturbed logit scales: the pairwise reweighting ratio tends to 1
    let sigmas: Vec<f64> = (0..n)
        .map(|i| reference_sigmoid(rho_large * norm2(train.input(i))))
        .collect();
    let s_max = sigmas.iter().cloned().fold(f64::MIN, f64::max);
    let s_min = sigmas.iter().cloned().fold(f64::MAX, f64::min);
    let spread = s_max / s_min - 1.0;

    // first coordinate of Xᵀt/n estimates (1 − 2Δ)·B
    let expected = (1.0 - 2.0 * cfg.noise_rate) * cfg.signal_b;
    let per_example: Vec<f64> = (0..n)
        .map(|i| train.observed(i) as f64 * train.input(i)[0])
        .collect();
    let est = crate::math::mean(&per_example);
    let se = crate::math::std_dev(&per_example) / (n as f64).sqrt();
    let first_coord_err = (est - expected).abs();

    // ridge limit on an independent dense instance: (XᵀX + λI)⁻¹Xᵀt ∝ Xᵀt
    let ridge_err = {
        use rand_distr::StandardNormal;
        let (rn, rd) = (20, 5);
        let mut rng = stream_rng(seed, 77);
        let x_mat: Vec<f64> = (0..rn * rd)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let t_vec: Vec<f64> = (0..rn).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let lambda = 1e8;
        let mut gram: Vec<Vec<f64>> = vec![vec![0.0; rd]; rd];
        for a in 0..rd {
            for b in 0..rd {
                let mut s = 0.0;
                for i in 0..rn {
                    s += x_mat[i * rd + a] * x_mat[i * rd + b];
                }
                gram[a][b] = s + if a == b { lambda } else { 0.0 };
            }
        }
        let mut rhs = vec![0.0; rd];
        for a in 0..rd {
            for i in 0..rn {
                rhs[a] += x_mat[i * rd + a] * t_vec[i];
            }
        }
        let target: Vec<f64> = rhs.iter().map(|&v| v / lambda).collect();
        let w_ridge = solve_dense(&mut gram, &mut rhs.clone());
        1.0 - cosine(&w_ridge, &target)
    };

    vec![
        OracleReport::new("asymptotic_sam_cosine", cos_err, 1e-6, n),
        OracleReport::new("asymptotic_sigma_ratio_spread", spread, 1e-3, n),
        OracleReport::new("asymptotic_mean_first_coord", first_coord_err, 3.0 * se, n),
        OracleReport::new("ridge_limit_cosine", ridge_err, 1e-6, 20),
    ]
}

/// ρ = 0 bit-collapse of every perturbation rule onto SGD, and the two
/// linear-model identities (1-SAM ≡ L-SAM, J-SAM ≡ SGD).
pub fn collapse_identity_checks(seed: u64) -> Vec<OracleReport> {
    use rand_distr::StandardNormal;
    let mut rng = stream_rng(seed, 99);
    let d = 6;
    let n = 10;
    let inputs: Vec<f64> = (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let obs: Vec<i64> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
    let data = LabeledDataset::new(
        inputs,
        n,
        d,
        obs.clone(),
        obs,
        LabelEncoding::SignedBinary,
    )
    .unwrap();
    let batch: Vec<usize> = (0..n).collect();

    let models = [
        Model::Linear(LinearModel::random(d, 0.5, &mut rng)),
        Model::Dln2(Dln2Model::random(4, d, 0.5, &mut rng)),
        Model::Mlp(MlpModel::random(4, d, 1, Activation::Relu, 0.5, &mut rng)),
    ];

    let mut collapse_err = 0.0f64;
    let mut collapse_n = 0;
    for model in &models {
        let sgd = step(&OptimConfig::new(Rule::Sgd, 0.05), model, &data, &batch).unwrap();
        for rule in [Rule::NSam, Rule::Sam1, Rule::LSam, Rule::JSam] {
            let other = step(&OptimConfig::new(rule, 0.05), model, &data, &batch).unwrap();
            let bit_equal = other
                .params()
                .iter()
                .zip(sgd.params())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !bit_equal {
                collapse_err = collapse_err.max(rel_diff(other.params(), sgd.params(), 1e-12));
            }
            collapse_n += 1;
        }
        if !matches!(model, Model::Linear(_)) {
            let reg = step(&OptimConfig::new(Rule::RegSgd, 0.05), model, &data, &batch).unwrap();
            let bit_equal = reg
                .params()
                .iter()
                .zip(sgd.params())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !bit_equal {
                collapse_err = collapse_err.max(rel_diff(reg.params(), sgd.params(), 1e-12));
            }
            collapse_n += 1;
        }
    }

    let mut identity_err = 0.0f64;
    let linear = &models[0];
    for rho in [0.05, 0.3, 1.5] {
        let cfg = |r| OptimConfig::new(r, 0.05).with_rho(rho);
        let sam1 = step(&cfg(Rule::Sam1), linear, &data, &batch).unwrap();
        let lsam = step(&cfg(Rule::LSam), linear, &data, &batch).unwrap();
        let jsam = step(&cfg(Rule::JSam), linear, &data, &batch).unwrap();
        let sgd = step(&cfg(Rule::Sgd), linear, &data, &batch).unwrap();
        identity_err = identity_err
            .max(rel_diff(sam1.params(), lsam.params(), 1e-12))
            .max(rel_diff(jsam.params(), sgd.params(), 1e-12));
    }

    vec![
        OracleReport::new("rho_zero_bit_collapse", collapse_err, 0.0, collapse_n),
        OracleReport::new("linear_hybrid_identities", identity_err, 1e-12, 6),
    ]
}

/// The full oracle suite with its standard instance counts and tolerances.
pub fn run_all(seed: u64) -> Vec<OracleReport> {
    use crate::models::ModelFamily::*;
    let mut reports = vec![
        fd_gradient_check(Linear, 100, 1e-6, seed),
        fd_gradient_check(Dln2, 100, 1e-5, seed),
        fd_gradient_check(Mlp, 100, 1e-5, seed),
        jsam_identity_check(1000, 1e-10, seed),
        lemma_monotonicity_check(1000, &[0.1, 0.5, 1.0, 2.0]),
    ];
    let toy = ToyDataConfig {
        seed,
        ..ToyDataConfig::default()
    };
    reports.extend(asymptotic_sam_check(&toy, 1e4, seed));
    reports.extend(collapse_identity_checks(seed));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelFamily;

    #[test]
    fn fd_checks_pass_at_reduced_count() {
        for (family, tol) in [
            (ModelFamily::Linear, 1e-6),
            (ModelFamily::Dln2, 1e-5),
            (ModelFamily::Mlp, 1e-5),
        ] {
            let r = fd_gradient_check(family, 25, tol, 5);
            assert!(r.pass, "{} err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn fd_check_catches_a_sign_flip() {
        let r = fd_gradient_check_with(ModelFamily::Linear, 10, 1e-6, 5, |m, x, t| {
            let mut g = m.grad_decomp(x, t)?.grad;
            for v in g.iter_mut() {
                *v = -*v;
            }
            Ok(g)
        });
        assert!(!r.pass, "a negated gradient must fail the check");
    }

    #[test]
    fn jsam_identity_reduced_count() {
        let r = jsam_identity_check(100, 1e-10, 5);
        assert!(r.pass, "err {:e}", r.max_rel_err);
    }

    #[test]
    fn jsam_hand_coefficient() {
        // v=(1,0), W=I₂, x=(0,1), t=1, ρ=√2: penalty coefficient ρσ(0)/J = 0.5
        let rho = 2f64.sqrt();
        let s = 0.5;
        let j = 2f64.sqrt();
        assert!((rho * s / j - 0.5).abs() < 1e-15);
    }

    #[test]
    fn upweight_ratio_reference_points() {
        for z in [-3.0, 0.0, 2.5] {
            assert_eq!(upweight_ratio(z, 0.0), 1.0);
        }
        assert!((upweight_ratio(0.0, 1.0) - 1.4621171572600098).abs() < 1e-12);
        assert!((upweight_ratio(1.0, 1.0) - 1.8591409142295225).abs() < 1e-12);
        // f(z, C) → e^C as z → ∞
        assert!((upweight_ratio(50.0, 1.0) - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn lemma_check_passes() {
        let r = lemma_monotonicity_check(200, &[0.1, 0.5, 1.0, 2.0]);
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn asymptotic_checks_pass_on_a_small_config() {
        let cfg = ToyDataConfig {
            dim: 100,
            n_train: 200,
            n_test: 10,
            seed: 9,
            ..ToyDataConfig::default()
        };
        for r in asymptotic_sam_check(&cfg, 1e4, 9) {
            assert!(r.pass, "{} err {:e} tol {:e}", r.name, r.max_rel_err, r.tol);
        }
    }

    #[test]
    fn collapse_checks_pass() {
        for r in collapse_identity_checks(3) {
            assert!(r.pass, "{} err {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn table_formats_every_report() {
        let reports = collapse_identity_checks(4);
        let table = report_table(&reports);
        for r in &reports {
            assert!(table.contains(&r.name));
        }
        let json = reports_to_json(&reports);
        assert!(json.contains("max_rel_err"));
    }
}
