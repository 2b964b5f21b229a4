//! Every tracked quantity: per-stratum training statistics, test accuracy,
//! the closed-form accuracy on the toy distribution, gradient-norm and
//! logit-upweighting ratios, activation/last-layer norms, and the CSV trace
//! schema.

use std::io::Write;

use crate::error::{Error, Result, DEGENERATE_NORM};
use crate::math::{norm2, normal_cdf};
use crate::models::{Model, ModelFamily};
use crate::optim::{nsam_perturbed, per_example_update, OptimConfig, Rule, Workspace};
use crate::runtime::par_fold_stripes;
use crate::synthdata::{LabeledDataset, ToyDataConfig};

/// Fixed CSV schema; missing metrics are emitted as empty fields.
pub const CSV_HEADER: &str = "epoch,rule,rho,lr,seed,train_acc_clean,train_acc_noisy,\
train_loss_clean,train_loss_noisy,test_acc,best_test_acc,closed_form_acc,grad_ratio,\
logit_ratio_clean,logit_ratio_noisy,act_norm,v_norm,acc_gap";

#[derive(Clone, Copy, Debug, Default)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc_clean: Option<f64>,
    /// Fraction of noisy examples predicted as their observed (wrong) label.
    pub train_acc_noisy: Option<f64>,
    pub train_loss_clean: Option<f64>,
    pub train_loss_noisy: Option<f64>,
    pub test_acc: f64,
    /// Running max of `test_acc`; maintained by [`MetricTrace::push`].
    pub best_test_acc: f64,
    pub closed_form_acc: Option<f64>,
    /// Mean per-example update norm, clean / noisy.
    pub grad_ratio: Option<f64>,
    pub logit_ratio_clean: Option<f64>,
    pub logit_ratio_noisy: Option<f64>,
    /// Mean hidden-activation norm over the probe subsample.
    pub act_norm: Option<f64>,
    pub v_norm: Option<f64>,
    /// `train_acc_clean − train_acc_noisy`.
    pub acc_gap: Option<f64>,
}

/// Per-run metric trace, one record per evaluated epoch.
#[derive(Clone, Debug)]
pub struct MetricTrace {
    pub rule: Rule,
    pub rho: f64,
    pub lr: f64,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl MetricTrace {
    pub fn new(rule: Rule, rho: f64, lr: f64, seed: u64) -> Self {
        Self {
            rule,
            rho,
            lr,
            seed,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, mut record: EpochRecord) {
        let prev = self.records.last().map(|r| r.best_test_acc).unwrap_or(0.0);
        record.best_test_acc = prev.max(record.test_acc);
        self.records.push(record);
    }

    /// `(epoch, accuracy)` of the best test accuracy (first epoch on ties).
    pub fn best(&self) -> Option<(usize, f64)> {
        let best = self
            .records
            .iter()
            .map(|r| r.test_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        self.records
            .iter()
            .find(|r| r.test_acc == best)
            .map(|r| (r.epoch, r.test_acc))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                self.rule.name(),
                self.rho,
                self.lr,
                self.seed,
                fmt_opt(r.train_acc_clean),
                fmt_opt(r.train_acc_noisy),
                fmt_opt(r.train_loss_clean),
                fmt_opt(r.train_loss_noisy),
                r.test_acc,
                r.best_test_acc,
                fmt_opt(r.closed_form_acc),
                fmt_opt(r.grad_ratio),
                fmt_opt(r.logit_ratio_clean),
                fmt_opt(r.logit_ratio_noisy),
                fmt_opt(r.act_norm),
                fmt_opt(r.v_norm),
                fmt_opt(r.acc_gap),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

fn fmt_opt(o: Option<f64>) -> String {
    o.map(|v| v.to_string()).unwrap_or_default()
}

/// Loss / accuracy / mean logit-scale norm over one stratum.
#[derive(Clone, Copy, Debug)]
pub struct Stratum {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_scale_norm: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StratifiedStats {
    pub clean: Stratum,
    pub noisy: Stratum,
}

/// Per-stratum statistics; accuracy on the noisy stratum is measured against
/// the observed (corrupted) labels. Errors if either stratum is empty.
pub fn stratified_stats(model: &Model, data: &LabeledDataset) -> Result<StratifiedStats> {
    let (clean, noisy) = stratum_stats_lenient(model, data)?;
    let clean = clean.ok_or(Error::EmptyStratum { stratum: "clean" })?;
    let noisy = noisy.ok_or(Error::EmptyStratum { stratum: "noisy" })?;
    Ok(StratifiedStats { clean, noisy })
}

/// Like [`stratified_stats`] but returns `None` for an empty stratum instead
/// of erroring; used when building traces for clean datasets.
pub(crate) fn stratum_stats_lenient(
    model: &Model,
    data: &LabeledDataset,
) -> Result<(Option<Stratum>, Option<Stratum>)> {
    #[derive(Clone, Copy, Default)]
    struct Acc {
        count: usize,
        loss: f64,
        correct: usize,
        scale: f64,
    }
    struct State {
        clean: Acc,
        noisy: Acc,
        err: Option<Error>,
    }
    let partials = par_fold_stripes(
        data.len(),
        || State {
            clean: Acc::default(),
            noisy: Acc::default(),
            err: None,
        },
        |state, i| {
            if state.err.is_some() {
                return;
            }
            match model.eval_example(data.input(i), data.observed(i)) {
                Ok(e) => {
                    let acc = if data.is_clean(i) {
                        &mut state.clean
                    } else {
                        &mut state.noisy
                    };
                    acc.count += 1;
                    acc.loss += e.loss;
                    acc.correct += usize::from(e.predicted == data.observed(i));
                    acc.scale += e.scale_norm;
                }
                Err(e) => state.err = Some(e),
            }
        },
    );
    let mut clean = Acc::default();
    let mut noisy = Acc::default();
    for p in partials {
        if let Some(e) = p.err {
            return Err(e);
        }
        for (dst, src) in [(&mut clean, p.clean), (&mut noisy, p.noisy)] {
            dst.count += src.count;
            dst.loss += src.loss;
            dst.correct += src.correct;
            dst.scale += src.scale;
        }
    }
    let finish = |a: Acc| -> Option<Stratum> {
        (a.count > 0).then(|| Stratum {
            count: a.count,
            loss: a.loss / a.count as f64,
            accuracy: a.correct as f64 / a.count as f64,
            mean_scale_norm: a.scale / a.count as f64,
        })
    };
    Ok((finish(clean), finish(noisy)))
}

/// Accuracy of the model's predictions against the true (`against_truth`)
/// or observed labels.
pub fn accuracy(model: &Model, data: &LabeledDataset, against_truth: bool) -> Result<f64> {
    struct State {
        correct: usize,
        err: Option<Error>,
    }
    let partials = par_fold_stripes(
        data.len(),
        || State {
            correct: 0,
            err: None,
        },
        |state, i| {
            if state.err.is_some() {
                return;
            }
            match model.predict(data.input(i)) {
                Ok(p) => {
                    let target = if against_truth {
                        data.truth(i)
                    } else {
                        data.observed(i)
                    };
                    state.correct += usize::from(p == target);
                }
                Err(e) => state.err = Some(e),
            }
        },
    );
    let mut correct = 0;
    for p in partials {
        if let Some(e) = p.err {
            return Err(e);
        }
        correct += p.correct;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Ratio of the mean per-example update norm on clean examples to that on
/// noisy examples, with the update term defined by the rule (SGD: `∇ℓᵢ`;
/// 1-SAM: `∇ℓ` at `w + εᵢ`; hybrids accordingly). Restricted to `indices`.
pub fn grad_norm_ratio(
    model: &Model,
    data: &LabeledDataset,
    cfg: &OptimConfig,
    indices: &[usize],
) -> Result<f64> {
    let any_clean = indices.iter().any(|&i| data.is_clean(i));
    let any_noisy = indices.iter().any(|&i| !data.is_clean(i));
    if !any_clean {
        return Err(Error::EmptyStratum { stratum: "clean" });
    }
    if !any_noisy {
        return Err(Error::EmptyStratum { stratum: "noisy" });
    }

    // naive SAM evaluates all gradients at one shared perturbation
    let (eval_model, rule, rho) = if cfg.rule == Rule::NSam {
        match nsam_perturbed(cfg.effective_rho(), model, data, indices)? {
            Some(pm) => (pm, Rule::Sgd, 0.0),
            None => (model.clone(), Rule::Sgd, 0.0),
        }
    } else {
        (model.clone(), cfg.rule, cfg.effective_rho())
    };

    struct State {
        clean_sum: f64,
        clean_n: usize,
        noisy_sum: f64,
        noisy_n: usize,
        ws: Workspace,
        out: Vec<f64>,
        err: Option<Error>,
    }
    let partials = par_fold_stripes(
        indices.len(),
        || State {
            clean_sum: 0.0,
            clean_n: 0,
            noisy_sum: 0.0,
            noisy_n: 0,
            ws: Workspace::new(&eval_model),
            out: vec![0.0; eval_model.num_params()],
            err: None,
        },
        |state, k| {
            if state.err.is_some() {
                return;
            }
            let i = indices[k];
            let res = per_example_update(
                rule,
                rho,
                cfg.gamma_z,
                &eval_model,
                data.input(i),
                data.observed(i),
                &mut state.ws,
                &mut state.out,
            );
            match res {
                Ok(()) => {
                    let n = norm2(&state.out);
                    if data.is_clean(i) {
                        state.clean_sum += n;
                        state.clean_n += 1;
                    } else {
                        state.noisy_sum += n;
                        state.noisy_n += 1;
                    }
                }
                Err(e) => state.err = Some(e),
            }
        },
    );
    let (mut cs, mut cn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for p in partials {
        if let Some(e) = p.err {
            return Err(e);
        }
        cs += p.clean_sum;
        cn += p.clean_n;
        ns += p.noisy_sum;
        nn += p.noisy_n;
    }
    Ok((cs / cn as f64) / (ns / nn as f64))
}

/// Logit-scale norm ratio after/before the per-example SAM perturbation:
/// `‖g(w + ε, x, t)‖ / ‖g(w, x, t)‖` (binary: the σ ratio). Returns exactly
/// 1.0 for `rho = 0`; a degenerate gradient is an error.
pub fn logit_upweight_ratio(model: &Model, x: &[f64], t: i64, rho: f64) -> Result<f64> {
    if rho == 0.0 {
        // validate the example anyway so bad labels still surface
        model.eval_example(x, t)?;
        return Ok(1.0);
    }
    let (cot, info) = model.cotangent(x, t)?;
    let mut grad = vec![0.0; model.num_params()];
    model.grad_with_cotangent_into(x, &cot, &mut grad)?;
    let norm = norm2(&grad);
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateGradient { norm });
    }
    let perturbed = model.perturbed(&grad, rho)?;
    let after = perturbed.eval_example(x, t)?.scale_norm;
    Ok(after / info.scale_norm)
}

/// Expected test accuracy of a linear classifier on the toy distribution:
/// `1 − Φ(−B·√(d−1)·w₁ / (γ‖w₁₊‖))`, where `w₁₊` is `w` without its first
/// entry. Degenerate cases: `w = 0` is undefined; a noiseless direction
/// (`γ = 0` or `‖w₁₊‖ = 0`) classifies by the sign of `w₁` alone.
pub fn closed_form_toy_accuracy(w: &[f64], cfg: &ToyDataConfig) -> Result<f64> {
    if w.len() != cfg.dim {
        return Err(Error::DimMismatch {
            what: "weight vector",
            expected: cfg.dim,
            got: w.len(),
        });
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedAccuracy);
    }
    let w1 = w[0];
    let rest_norm = norm2(&w[1..]);
    if cfg.gamma == 0.0 || rest_norm == 0.0 {
        return Ok(if w1 > 0.0 {
            1.0
        } else if w1 < 0.0 {
            0.0
        } else {
            0.5
        });
    }
    let arg = -cfg.signal_b * ((cfg.dim - 1) as f64).sqrt() * w1 / (cfg.gamma * rest_norm);
    Ok(1.0 - normal_cdf(arg))
}

/// Everything needed to evaluate one epoch into an [`EpochRecord`].
pub struct EvalSettings<'a> {
    pub optim: &'a OptimConfig,
    /// Fixed probe subsample of train indices for the ratio metrics.
    pub probe: &'a [usize],
    /// Set for toy linear runs; enables the closed-form accuracy column.
    pub toy: Option<&'a ToyDataConfig>,
}

/// Evaluate the (unperturbed) model at an epoch boundary.
pub fn evaluate_epoch(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    epoch: usize,
    settings: &EvalSettings<'_>,
) -> Result<EpochRecord> {
    let (clean, noisy) = stratum_stats_lenient(model, train)?;
    let test_acc = accuracy(model, test, true)?;

    let closed_form_acc = match (settings.toy, model.family()) {
        (Some(toy), ModelFamily::Linear) => match closed_form_toy_accuracy(model.params(), toy) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAccuracy) => None,
            Err(e) => return Err(e),
        },
        _ => None,
    };

    let grad_ratio = match grad_norm_ratio(model, train, settings.optim, settings.probe) {
        Ok(r) => Some(r),
        Err(Error::EmptyStratum { .. }) => None,
        Err(e) => return Err(e),
    };

    let rho = settings.optim.effective_rho();
    let (logit_ratio_clean, logit_ratio_noisy) = if rho > 0.0 {
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for &i in settings.probe {
            match logit_upweight_ratio(model, train.input(i), train.observed(i), rho) {
                Ok(r) => {
                    let s = usize::from(!train.is_clean(i));
                    sums[s] += r;
                    counts[s] += 1;
                }
                Err(Error::DegenerateGradient { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        (
            (counts[0] > 0).then(|| sums[0] / counts[0] as f64),
            (counts[1] > 0).then(|| sums[1] / counts[1] as f64),
        )
    } else {
        (None, None)
    };

    let (act_norm, v_norm) = match model.last_layer_norm() {
        Ok(vn) => {
            let mut sum = 0.0;
            for &i in settings.probe {
                sum += norm2(&model.hidden_activation(train.input(i))?);
            }
            (
                (!settings.probe.is_empty()).then(|| sum / settings.probe.len() as f64),
                Some(vn),
            )
        }
        Err(Error::UnsupportedModel { .. }) => (None, None),
        Err(e) => return Err(e),
    };

    let acc_gap = match (clean.as_ref(), noisy.as_ref()) {
        (Some(c), Some(n)) => Some(c.accuracy - n.accuracy),
        _ => None,
    };

    Ok(EpochRecord {
        epoch,
        train_acc_clean: clean.as_ref().map(|s| s.accuracy),
        train_acc_noisy: noisy.as_ref().map(|s| s.accuracy),
        train_loss_clean: clean.as_ref().map(|s| s.loss),
        train_loss_noisy: noisy.as_ref().map(|s| s.loss),
        test_acc,
        best_test_acc: 0.0,
        closed_form_acc,
        grad_ratio,
        logit_ratio_clean,
        logit_ratio_noisy,
        act_norm,
        v_norm,
        acc_gap,
    })
}
