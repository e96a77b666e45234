//! The unlearning objective `λf·ℓf(θ; Df) + λr·ℓr(θ; Dr)` and the
//! classifier-side methods built on it: Retrain, GA, FT, GradDiff, ℓ1-sparse
//! fine-tuning and a diagonal-Fisher influence update.
//!
//! All loops are plain mini-batch SGD. Batch order comes from the shuffle
//! stream of `(seed, epoch)`, so retraining with an empty forget set replays
//! original training exactly.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::LabeledSet;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{classify_graph, init_params, ArchSpec, Bound, ParamSet};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ForgetLoss {
    /// `-CE` on the forget set.
    #[default]
    NegCe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RetainLoss {
    #[default]
    Ce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MuConfig<T = f64> {
    pub lambda_f: T,
    pub lambda_r: T,
    pub forget_loss: ForgetLoss,
    pub retain_loss: RetainLoss,
    pub epochs: usize,
    pub lr: T,
    pub batch_size: usize,
    pub seed: u64,
    /// ℓ1 weight γ, Sparse only.
    pub sparse_gamma: T,
    /// Fisher damping α, IU only.
    pub iu_alpha: T,
}

impl<T: Real> MuConfig<T> {
    fn base(lambda_f: f64, lambda_r: f64, epochs: usize, lr: f64) -> Self {
        Self {
            lambda_f: T::lit(lambda_f),
            lambda_r: T::lit(lambda_r),
            forget_loss: ForgetLoss::NegCe,
            retain_loss: RetainLoss::Ce,
            epochs,
            lr: T::lit(lr),
            batch_size: 64,
            seed: 0,
            sparse_gamma: T::lit(1e-5),
            iu_alpha: T::lit(20f64.sqrt()),
        }
    }

    /// Gradient ascent: `λf = 1, λr = 0`.
    pub fn ga() -> Self {
        Self::base(1.0, 0.0, 5, 1e-4)
    }

    /// Fine-tuning: `λf = 0, λr = 1`.
    pub fn ft() -> Self {
        Self::base(0.0, 1.0, 10, 1e-2)
    }

    /// GradDiff: `λf = λr = 1`.
    pub fn graddiff() -> Self {
        Self::base(1.0, 1.0, 3, 1e-2)
    }

    pub fn sparse() -> Self {
        Self::base(0.0, 1.0, 10, 1e-2)
    }

    pub fn iu() -> Self {
        Self::base(1.0, 0.0, 0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: T| v >= T::zero() && v.is_finite();
        if !nonneg(self.lambda_f) || !nonneg(self.lambda_r) {
            return Err(Error::Validation("λf and λr must be finite and >= 0".into()));
        }
        if !nonneg(self.lr) || self.batch_size == 0 {
            return Err(Error::Validation("lr must be >= 0 and batch_size >= 1".into()));
        }
        if !nonneg(self.sparse_gamma) {
            return Err(Error::Validation("sparse_gamma must be >= 0".into()));
        }
        if !(self.iu_alpha > T::zero()) {
            return Err(Error::Validation("iu_alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Budget of a from-scratch training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T = f64> {
    pub epochs: usize,
    pub lr: T,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: T::lit(0.1),
            batch_size: 64,
            seed: 0,
        }
    }
}

/// One CE term of a mini-batch loss.
struct Term<'a, T> {
    set: &'a LabeledSet<T>,
    pos: &'a [usize],
    weight: T,
}

fn ce_on<T: Real>(g: &mut Graph<T>, theta: &Bound, set: &LabeledSet<T>, pos: &[usize]) -> Result<Var> {
    let (x, y) = set.batch(pos)?;
    let xv = g.constant(x);
    let logits = classify_graph(g, theta, xv)?;
    g.cross_entropy(logits, &y)
}

/// Weighted sum of CE terms; empty or zero-weight terms are skipped.
fn weighted_ce<T: Real>(g: &mut Graph<T>, theta: &Bound, terms: &[Term<'_, T>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms {
        if t.pos.is_empty() || t.weight == T::zero() {
            continue;
        }
        let ce = ce_on(g, theta, t.set, t.pos)?;
        let v = g.scale(ce, t.weight);
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

fn check_sets<T: Real>(df: &LabeledSet<T>, dr: &LabeledSet<T>, lf: T, lr: T) -> Result<()> {
    if df.is_empty() && dr.is_empty() && lf > T::zero() && lr > T::zero() {
        return Err(Error::Validation("both forget and retain sets are empty".into()));
    }
    Ok(())
}

fn full(set: &LabeledSet<impl Real>) -> Vec<usize> {
    (0..set.len()).collect()
}

/// Builds `λf·(-CE(Df)) + λr·CE(Dr)` on `g` over full sets.
pub fn mu_loss_graph<T: Real>(
    g: &mut Graph<T>,
    theta: &Bound,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    lambda_f: T,
    lambda_r: T,
) -> Result<Var> {
    check_sets(df, dr, lambda_f, lambda_r)?;
    let (pf, pr) = (full(df), full(dr));
    weighted_ce(
        g,
        theta,
        &[
            Term {
                set: df,
                pos: &pf,
                weight: -lambda_f,
            },
            Term {
                set: dr,
                pos: &pr,
                weight: lambda_r,
            },
        ],
    )
}

pub fn mu_loss<T: Real>(
    theta: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    cfg: &MuConfig<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let b = theta.bind_frozen(&mut g);
    let l = mu_loss_graph(&mut g, &b, df, dr, cfg.lambda_f, cfg.lambda_r)?;
    Ok(g.value(l).item())
}

/// Value and θ-gradient of the unlearning objective.
pub fn mu_loss_grad<T: Real>(
    theta: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    lambda_f: T,
    lambda_r: T,
) -> Result<(T, ParamSet<T>)> {
    let mut g = Graph::new();
    let b = theta.bind(&mut g);
    let l = mu_loss_graph(&mut g, &b, df, dr, lambda_f, lambda_r)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), theta.grads_of(&b, &grads)))
}

/// Mini-batch positions for one epoch: the driver set is shuffled and cut
/// into `batch`-sized chunks; the companion set is shuffled and spread
/// evenly over the same number of steps.
pub fn epoch_batches(
    n_driver: usize,
    n_companion: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut d: Vec<usize> = (0..n_driver).collect();
    d.shuffle(&mut rng::stream(seed, rng::tags::SHUFFLE, epoch as u64));
    let mut c: Vec<usize> = (0..n_companion).collect();
    c.shuffle(&mut rng::stream(seed, "shuffle-companion", epoch as u64));
    let steps = n_driver.div_ceil(batch);
    d.chunks(batch)
        .enumerate()
        .map(|(k, chunk)| {
            let lo = k * n_companion / steps;
            let hi = (k + 1) * n_companion / steps;
            (chunk.to_vec(), c[lo..hi].to_vec())
        })
        .collect()
}

/// Shared SGD loop over `(driver, companion)` batches.
#[allow(clippy::too_many_arguments)]
fn sgd<T: Real>(
    theta0: &ParamSet<T>,
    driver: &LabeledSet<T>,
    driver_w: T,
    companion: &LabeledSet<T>,
    companion_w: T,
    epochs: usize,
    lr: T,
    batch: usize,
    seed: u64,
    l1: T,
    context: &str,
) -> Result<ParamSet<T>> {
    let mut theta = theta0.clone();
    let mut step = 0usize;
    for epoch in 0..epochs {
        for (dp, cp) in epoch_batches(driver.len(), companion.len(), batch, seed, epoch) {
            let mut g = Graph::new();
            let b = theta.bind(&mut g);
            let terms = [
                Term {
                    set: driver,
                    pos: &dp,
                    weight: driver_w,
                },
                Term {
                    set: companion,
                    pos: &cp,
                    weight: companion_w,
                },
            ];
            let loss = weighted_ce(&mut g, &b, &terms)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::numeric(context.to_string(), step));
            }
            let mut grad = theta.grads_of(&b, &g.backward(loss)?);
            if l1 != T::zero() {
                let sub = theta.map_values(|v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                grad.axpy(l1, &sub);
            }
            theta.axpy(-lr, &grad);
            if !theta.is_finite() {
                return Err(Error::numeric(context.to_string(), step));
            }
            step += 1;
        }
    }
    Ok(theta)
}

/// Trains from `init_params(arch, seed)` with mini-batch CE descent.
pub fn train_original<T: Real>(
    arch: &ArchSpec<T>,
    data: &LabeledSet<T>,
    cfg: &TrainConfig<T>,
) -> Result<ParamSet<T>> {
    if data.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let theta0 = init_params(arch, cfg.seed)?;
    let none = LabeledSet {
        features: Vec::new(),
        dim: data.dim,
        labels: Vec::new(),
    };
    sgd(
        &theta0,
        data,
        T::one(),
        &none,
        T::zero(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        T::zero(),
        "train_original",
    )
}

/// Exact unlearning: training from scratch on the retain set.
pub fn retrain<T: Real>(
    arch: &ArchSpec<T>,
    dr: &LabeledSet<T>,
    cfg: &TrainConfig<T>,
) -> Result<ParamSet<T>> {
    train_original(arch, dr, cfg)
}

fn descend_mu<T: Real>(
    theta_o: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    cfg: &MuConfig<T>,
    l1: T,
    context: &str,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    check_sets(df, dr, cfg.lambda_f, cfg.lambda_r)?;
    let forget_w = -cfg.lambda_f;
    let (driver, dw, comp, cw) = if cfg.lambda_r > T::zero() && !dr.is_empty() {
        (dr, cfg.lambda_r, df, forget_w)
    } else if cfg.lambda_f > T::zero() && !df.is_empty() {
        (df, forget_w, dr, cfg.lambda_r)
    } else {
        return Err(Error::Validation(format!(
            "{context}: no non-empty set carries a positive weight"
        )));
    };
    sgd(
        theta_o,
        driver,
        dw,
        comp,
        cw,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        l1,
        context,
    )
}

/// Mini-batch descent on the unlearning objective from `θo`; GA, FT and
/// GradDiff differ only in `(λf, λr)`.
pub fn unlearn_gd<T: Real>(
    theta_o: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    cfg: &MuConfig<T>,
) -> Result<ParamSet<T>> {
    if cfg.epochs == 0 {
        cfg.validate()?;
        return Ok(theta_o.clone());
    }
    descend_mu(theta_o, df, dr, cfg, T::zero(), "unlearn_gd")
}

/// Fine-tuning on `CE(Dr) + γ‖θ‖₁` with subgradient `sign(θ)`.
pub fn unlearn_sparse<T: Real>(
    theta_o: &ParamSet<T>,
    dr: &LabeledSet<T>,
    cfg: &MuConfig<T>,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(theta_o.clone());
    }
    let ft = MuConfig {
        lambda_f: T::zero(),
        lambda_r: T::one(),
        ..cfg.clone()
    };
    let none = LabeledSet {
        features: Vec::new(),
        dim: dr.dim,
        labels: Vec::new(),
    };
    descend_mu(theta_o, &none, dr, &ft, cfg.sparse_gamma, "unlearn_sparse")
}

fn per_sample_grads<T: Real>(theta: &ParamSet<T>, set: &LabeledSet<T>) -> Result<Vec<Vec<T>>> {
    (0..set.len())
        .map(|i| {
            let mut g = Graph::new();
            let b = theta.bind(&mut g);
            let l = ce_on(&mut g, &b, set, &[i])?;
            Ok(theta.grads_of(&b, &g.backward(l)?).flatten())
        })
        .collect()
}

/// Influence update `θo + (1/|D|) Σ_{Df} F⁻¹ ∇ℓ(θo; x)` with the damped
/// diagonal empirical Fisher `F = mean_D(g ⊙ g) + α`.
pub fn unlearn_iu<T: Real>(
    theta_o: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    cfg: &MuConfig<T>,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    if df.is_empty() {
        return Ok(theta_o.clone());
    }
    let gf = per_sample_grads(theta_o, df)?;
    let gr = per_sample_grads(theta_o, dr)?;
    let p = theta_o.num_params();
    let n = T::lit((gf.len() + gr.len()) as f64);
    let mut fisher = vec![T::zero(); p];
    for g in gf.iter().chain(&gr) {
        for (f, &v) in fisher.iter_mut().zip(g) {
            *f = *f + v * v;
        }
    }
    let mut delta = vec![T::zero(); p];
    for g in &gf {
        for (d, &v) in delta.iter_mut().zip(g) {
            *d = *d + v;
        }
    }
    let mut flat = theta_o.flatten();
    for k in 0..p {
        let f = fisher[k] / n + cfg.iu_alpha;
        flat[k] = flat[k] + delta[k] / f / n;
    }
    let out = theta_o.with_flat(&flat)?;
    if !out.is_finite() {
        return Err(Error::numeric("unlearn_iu", 0));
    }
    Ok(out)
}

/// The unlearning methods under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Retrain,
    Ga,
    Ft,
    GradDiff,
    Sparse,
    Iu,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Retrain,
        Method::Ga,
        Method::Ft,
        Method::GradDiff,
        Method::Sparse,
        Method::Iu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Ga => "ga",
            Method::Ft => "ft",
            Method::GradDiff => "graddiff",
            Method::Sparse => "sparse",
            Method::Iu => "iu",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method {s:?}")))
    }
}

/// Per-method budgets used by [`apply_method`].
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSettings<T = f64> {
    pub retrain: TrainConfig<T>,
    pub ga: MuConfig<T>,
    pub ft: MuConfig<T>,
    pub graddiff: MuConfig<T>,
    pub sparse: MuConfig<T>,
    pub iu: MuConfig<T>,
}

impl<T: Real> Default for MethodSettings<T> {
    fn default() -> Self {
        Self {
            retrain: TrainConfig::default(),
            ga: MuConfig::ga(),
            ft: MuConfig::ft(),
            graddiff: MuConfig::graddiff(),
            sparse: MuConfig::sparse(),
            iu: MuConfig::iu(),
        }
    }
}

/// Runs one method from `θo` on the given (possibly watermarked) sets.
pub fn apply_method<T: Real>(
    method: Method,
    arch: &ArchSpec<T>,
    theta_o: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    s: &MethodSettings<T>,
) -> Result<ParamSet<T>> {
    match method {
        Method::Retrain => retrain(arch, dr, &s.retrain),
        Method::Ga => unlearn_gd(theta_o, df, dr, &s.ga),
        Method::Ft => unlearn_gd(theta_o, df, dr, &s.ft),
        Method::GradDiff => unlearn_gd(theta_o, df, dr, &s.graddiff),
        Method::Sparse => unlearn_sparse(theta_o, dr, &s.sparse),
        Method::Iu => unlearn_iu(theta_o, df, dr, &s.iu),
    }
}
