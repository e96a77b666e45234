//! Bi-level watermark design with implicit gradients.
//!
//! Lower level: GradDiff unlearning from `θo` on the forget/retain sets
//! watermarked by the encoder `ψ` with message `m`, giving `θu(ψ)`.
//! Upper level: `L̂(ψ, φ) = Lmu(θu(ψ); Df, Dr) + Lwm(ψ, φ; m, Df ∪ Dr)`, the
//! first term evaluated on the *unwatermarked* sets.
//!
//! With the lower-level Hessian replaced by `λI`, the implicit gradient is
//! `dθu/dψ = -(1/λ) ∇²ψθ ℓmu`, so
//!
//! ```text
//! dL̂/dψ = ∇ψ Lwm − c · ∂/∂ψ [ ∇θ ℓmu(θu, ψ)ᵀ g ],   g = ∇θ Lmu(θu; Df, Dr)
//! ```
//!
//! with `c = 1/λ` (or `c = 1` for the unit-scale reading). The mixed term is
//! a central finite difference of `∇ψ ℓmu` along `g`, so only first-order
//! derivatives are ever taken. The same machinery drives message selection
//! with the relaxed message logits `z` (`m = sigmoid(z)`) as upper variable.

use crate::data::LabeledSet;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalx;
use crate::nets::{classify_graph, encode, encode_graph, Bound, ParamSet};
use crate::real::Real;
use crate::unlearn::{mu_loss_grad, unlearn_gd, MuConfig};
use crate::watermark::{wm_loss_graph, WatermarkMessage, WmWeights};

/// Scale `c` applied to the mixed second-order correction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorrectionScale {
    /// `c = 1/λ`, from the diagonal-Hessian implicit gradient.
    #[default]
    OneOverLambda,
    /// `c = 1`.
    Unit,
    /// `c = 0`: no implicit path, only the direct watermark gradient.
    Disabled,
}

impl CorrectionScale {
    pub fn factor<T: Real>(self, lambda: T) -> T {
        match self {
            CorrectionScale::OneOverLambda => T::one() / lambda,
            CorrectionScale::Unit => T::one(),
            CorrectionScale::Disabled => T::zero(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionScale::OneOverLambda => "one_over_lambda",
            CorrectionScale::Unit => "unit",
            CorrectionScale::Disabled => "disabled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "one_over_lambda" => Some(CorrectionScale::OneOverLambda),
            "unit" => Some(CorrectionScale::Unit),
            "disabled" => Some(CorrectionScale::Disabled),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BloMode {
    #[default]
    NetworkTraining,
    MessageSelection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BloConfig<T = f64> {
    pub upper_epochs: usize,
    pub upper_lr: T,
    pub lower_epochs: usize,
    pub lower_lr: T,
    pub lower_batch_size: usize,
    /// Diagonal Hessian surrogate `λ`.
    pub lambda_diag: T,
    /// Finite-difference step `r` of the mixed term.
    pub fd_step: T,
    pub correction_scale: CorrectionScale,
    pub mode: BloMode,
    pub msg_lr: T,
    pub msg_epochs: usize,
    pub msg_lambda: T,
    pub rec_weight: T,
    pub dec_weight: T,
    pub seed: u64,
}

impl<T: Real> Default for BloConfig<T> {
    fn default() -> Self {
        Self {
            upper_epochs: 10,
            upper_lr: T::lit(1e-4),
            lower_epochs: 3,
            lower_lr: T::lit(1e-2),
            lower_batch_size: 64,
            lambda_diag: T::lit(1e-2),
            fd_step: T::lit(1e-3),
            correction_scale: CorrectionScale::OneOverLambda,
            mode: BloMode::NetworkTraining,
            msg_lr: T::lit(1e-3),
            msg_epochs: 20,
            msg_lambda: T::lit(1e-3),
            rec_weight: T::one(),
            dec_weight: T::one(),
            seed: 0,
        }
    }
}

impl<T: Real> BloConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !pos(self.lambda_diag) || !pos(self.msg_lambda) {
            return Err(Error::Validation("lambda_diag and msg_lambda must be > 0".into()));
        }
        if !pos(self.fd_step) {
            return Err(Error::Validation("fd_step must be > 0".into()));
        }
        let nonneg = |v: T| v >= T::zero() && v.is_finite();
        if !nonneg(self.upper_lr) || !nonneg(self.lower_lr) || !nonneg(self.msg_lr) {
            return Err(Error::Validation("learning rates must be >= 0".into()));
        }
        if self.lower_batch_size == 0 {
            return Err(Error::Validation("lower_batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn weights(&self) -> WmWeights<T> {
        WmWeights {
            rec: self.rec_weight,
            dec: self.dec_weight,
        }
    }

    fn lower_mu(&self) -> MuConfig<T> {
        MuConfig {
            epochs: self.lower_epochs,
            lr: self.lower_lr,
            batch_size: self.lower_batch_size,
            seed: self.seed,
            ..MuConfig::graddiff()
        }
    }
}

/// A bi-level problem seen through its coupling variable `u`.
pub trait BilevelProblem<T: Real> {
    /// Lower-level solution `θu(u)`, flattened.
    fn lower_solve(&self, upper: &[T]) -> Result<Vec<T>>;
    /// `∇θ` of the upper objective's θ-dependent term at `θ`.
    fn validation_grad(&self, theta: &[T]) -> Result<Vec<T>>;
    /// `∇u ℓlower(θ, u)`.
    fn lower_grad_upper(&self, theta: &[T], upper: &[T]) -> Result<Vec<T>>;
    /// `∇θ ℓlower(θ, u)`.
    fn lower_grad_theta(&self, theta: &[T], upper: &[T]) -> Result<Vec<T>>;
    /// Direct `∇u` of the upper objective (the θ-independent term).
    fn direct_grad(&self, upper: &[T]) -> Result<Vec<T>>;
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `∂/∂u [∇θ ℓ(θ, u)ᵀ g]` by central differences of `∇u ℓ` along `g`:
/// `‖g‖ · (∇u ℓ(θ + r ĝ, u) − ∇u ℓ(θ − r ĝ, u)) / 2r`, zero if `‖g‖ < 1e-12`.
pub fn mixed_hvp<T, P>(problem: &P, upper: &[T], theta: &[T], g: &[T], r: T) -> Result<Vec<T>>
where
    T: Real,
    P: BilevelProblem<T> + ?Sized,
{
    if !(r > T::zero()) {
        return Err(Error::Validation("fd step r must be > 0".into()));
    }
    if g.len() != theta.len() {
        return Err(Error::dim("mixed_hvp", &[theta.len()], &[g.len()]));
    }
    let gn = norm(g);
    if !(gn >= T::lit(1e-12)) {
        if !gn.is_finite() {
            return Err(Error::numeric("mixed_hvp direction", 0));
        }
        return Ok(vec![T::zero(); upper.len()]);
    }
    let shifted = |sign: T| -> Vec<T> {
        theta
            .iter()
            .zip(g)
            .map(|(&t, &gi)| t + sign * r * gi / gn)
            .collect()
    };
    let plus = problem.lower_grad_upper(&shifted(T::one()), upper)?;
    let minus = problem.lower_grad_upper(&shifted(-T::one()), upper)?;
    let two_r = r + r;
    let out: Vec<T> = plus
        .iter()
        .zip(&minus)
        .map(|(&p, &m)| gn * (p - m) / two_r)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("mixed_hvp", 0));
    }
    Ok(out)
}

/// Components of one implicit-gradient evaluation.
#[derive(Clone, Debug)]
pub struct Hypergradient<T> {
    pub grad: Vec<T>,
    pub theta_u: Vec<T>,
    /// `∇θ` of the validation term at `θu`.
    pub g: Vec<T>,
    /// The mixed term before scaling by `c`.
    pub mixed: Vec<T>,
}

/// `direct − c · mixed_hvp(θu(u), g)`.
pub fn implicit_hypergradient<T, P>(problem: &P, upper: &[T], c: T, r: T) -> Result<Hypergradient<T>>
where
    T: Real,
    P: BilevelProblem<T> + ?Sized,
{
    let theta_u = problem.lower_solve(upper)?;
    let g = problem.validation_grad(&theta_u)?;
    let direct = problem.direct_grad(upper)?;
    let mixed = if c == T::zero() {
        vec![T::zero(); upper.len()]
    } else {
        mixed_hvp(problem, upper, &theta_u, &g, r)?
    };
    let grad = direct
        .iter()
        .zip(&mixed)
        .map(|(&d, &m)| d - c * m)
        .collect();
    Ok(Hypergradient {
        grad,
        theta_u,
        g,
        mixed,
    })
}

/// Analytic test problem: lower `½‖θ − Aψ‖²`, upper `½‖θu(ψ) − b‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadBilevel<T> {
    /// Row-major `[p×q]`.
    pub a: Vec<T>,
    pub rows: usize,
    pub cols: usize,
    pub b: Vec<T>,
}

impl<T: Real> QuadBilevel<T> {
    pub fn new(a: Vec<T>, rows: usize, cols: usize, b: Vec<T>) -> Result<Self> {
        if a.len() != rows * cols || b.len() != rows || rows == 0 || cols == 0 {
            return Err(Error::dim("QuadBilevel", &[rows, cols], &[a.len(), b.len()]));
        }
        Ok(Self { a, rows, cols, b })
    }

    pub fn a_psi(&self, psi: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.a[i * self.cols + j] * psi[j]).sum())
            .collect()
    }

    /// `Aᵀ v`.
    pub fn at(&self, v: &[T]) -> Vec<T> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.a[i * self.cols + j] * v[i]).sum())
            .collect()
    }

    fn check(&self, psi: &[T]) -> Result<()> {
        if psi.len() != self.cols {
            return Err(Error::dim("QuadBilevel ψ", &[psi.len()], &[self.cols]));
        }
        Ok(())
    }

    /// `½‖Aψ − b‖²` at the exact lower solution.
    pub fn upper_objective(&self, psi: &[T]) -> Result<T> {
        self.check(psi)?;
        let half = T::lit(0.5);
        Ok(half
            * self
                .a_psi(psi)
                .iter()
                .zip(&self.b)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>())
    }
}

impl<T: Real> BilevelProblem<T> for QuadBilevel<T> {
    /// Gradient descent with step ½ from zero until the update vanishes.
    fn lower_solve(&self, psi: &[T]) -> Result<Vec<T>> {
        self.check(psi)?;
        let target = self.a_psi(psi);
        let mut theta = vec![T::zero(); self.rows];
        let half = T::lit(0.5);
        for _ in 0..4096 {
            let mut moved = false;
            for (t, &a) in theta.iter_mut().zip(&target) {
                let next = *t - half * (*t - a);
                moved |= next != *t;
                *t = next;
            }
            if !moved {
                break;
            }
        }
        Ok(theta)
    }

    fn validation_grad(&self, theta: &[T]) -> Result<Vec<T>> {
        Ok(theta.iter().zip(&self.b).map(|(&t, &b)| t - b).collect())
    }

    fn lower_grad_upper(&self, theta: &[T], psi: &[T]) -> Result<Vec<T>> {
        self.check(psi)?;
        let resid: Vec<T> = theta
            .iter()
            .zip(self.a_psi(psi))
            .map(|(&t, a)| t - a)
            .collect();
        Ok(self.at(&resid).into_iter().map(|v| -v).collect())
    }

    fn lower_grad_theta(&self, theta: &[T], psi: &[T]) -> Result<Vec<T>> {
        self.check(psi)?;
        Ok(theta
            .iter()
            .zip(self.a_psi(psi))
            .map(|(&t, a)| t - a)
            .collect())
    }

    fn direct_grad(&self, psi: &[T]) -> Result<Vec<T>> {
        self.check(psi)?;
        Ok(vec![T::zero(); psi.len()])
    }
}

/// Exact hypergradient `Aᵀ(Aψ − b)` of the quadratic problem.
pub fn quad_oracle_hypergrad<T: Real>(p: &QuadBilevel<T>, psi: &[T]) -> Result<Vec<T>> {
    p.check(psi)?;
    let r: Vec<T> = p.a_psi(psi).iter().zip(&p.b).map(|(&x, &y)| x - y).collect();
    Ok(p.at(&r))
}

/// Clean forget and retain sets shared by the upper and lower levels.
#[derive(Clone, Debug)]
pub struct UnlearnSplits<T> {
    pub forget: LabeledSet<T>,
    pub retain: LabeledSet<T>,
}

impl<T: Real> UnlearnSplits<T> {
    pub fn union(&self) -> LabeledSet<T> {
        self.forget.concat(&self.retain)
    }
}

/// Which variable couples the two levels.
#[derive(Clone, Debug)]
enum Coupling<T> {
    /// Upper variable: encoder weights; the message is fixed.
    Encoder { message: Vec<T> },
    /// Upper variable: message logits `z`; the encoder is frozen.
    Message { psi: ParamSet<T> },
}

/// The watermark/unlearning bi-level problem.
pub struct WatermarkBilevel<'a, T> {
    theta_o: &'a ParamSet<T>,
    splits: &'a UnlearnSplits<T>,
    /// Encoder layout (and frozen value in message mode).
    psi_layout: ParamSet<T>,
    phi: ParamSet<T>,
    coupling: Coupling<T>,
    cfg: BloConfig<T>,
    forget_x: Option<Tensor<T>>,
    retain_x: Option<Tensor<T>>,
    union_x: Tensor<T>,
}

fn sigmoid_vec<T: Real>(z: &[T]) -> Vec<T> {
    z.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect()
}

impl<'a, T: Real> WatermarkBilevel<'a, T> {
    fn build(
        theta_o: &'a ParamSet<T>,
        splits: &'a UnlearnSplits<T>,
        psi: &ParamSet<T>,
        phi: &ParamSet<T>,
        coupling: Coupling<T>,
        cfg: &BloConfig<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if splits.forget.is_empty() && splits.retain.is_empty() {
            return Err(Error::Validation("bi-level problem needs data".into()));
        }
        let opt = |s: &LabeledSet<T>| if s.is_empty() { Ok(None) } else { s.x().map(Some) };
        Ok(Self {
            theta_o,
            splits,
            psi_layout: psi.clone(),
            phi: phi.clone(),
            coupling,
            cfg: cfg.clone(),
            forget_x: opt(&splits.forget)?,
            retain_x: opt(&splits.retain)?,
            union_x: splits.union().x()?,
        })
    }

    /// Upper variable = encoder `ψ`, message fixed.
    pub fn for_network(
        theta_o: &'a ParamSet<T>,
        splits: &'a UnlearnSplits<T>,
        psi: &ParamSet<T>,
        phi: &ParamSet<T>,
        message: &[T],
        cfg: &BloConfig<T>,
    ) -> Result<Self> {
        if message.len() != psi.message_len() {
            return Err(Error::dim("message", &[message.len()], &[psi.message_len()]));
        }
        Self::build(
            theta_o,
            splits,
            psi,
            phi,
            Coupling::Encoder {
                message: message.to_vec(),
            },
            cfg,
        )
    }

    /// Upper variable = message logits `z`, codec frozen.
    pub fn for_message(
        theta_o: &'a ParamSet<T>,
        splits: &'a UnlearnSplits<T>,
        psi: &ParamSet<T>,
        phi: &ParamSet<T>,
        cfg: &BloConfig<T>,
    ) -> Result<Self> {
        Self::build(
            theta_o,
            splits,
            psi,
            phi,
            Coupling::Message { psi: psi.clone() },
            cfg,
        )
    }

    fn psi_and_message(&self, upper: &[T]) -> Result<(ParamSet<T>, Vec<T>)> {
        match &self.coupling {
            Coupling::Encoder { message } => {
                Ok((self.psi_layout.with_flat(upper)?, message.clone()))
            }
            Coupling::Message { psi } => {
                if upper.len() != psi.message_len() {
                    return Err(Error::dim("message logits", &[upper.len()], &[psi.message_len()]));
                }
                Ok((psi.clone(), sigmoid_vec(upper)))
            }
        }
    }

    /// Registers the upper variable; returns the encoder binding and the
    /// message node.
    fn bind_upper(&self, g: &mut Graph<T>, upper: &[T], trainable: bool) -> Result<(ParamSet<T>, Bound, Var, Var)> {
        match &self.coupling {
            Coupling::Encoder { message } => {
                let psi = self.psi_layout.with_flat(upper)?;
                let b = if trainable { psi.bind(g) } else { psi.bind_frozen(g) };
                let m = g.constant(Tensor::vector(message.clone())?);
                // The encoder leaves are the differentiated upper variable.
                let first = b.vars()[0];
                Ok((psi, b, m, first))
            }
            Coupling::Message { psi } => {
                let b = psi.bind_frozen(g);
                let mut zt = Tensor::vector(upper.to_vec())?;
                zt.requires_grad = trainable;
                let z = g.leaf("z", &zt);
                let m = g.sigmoid(z);
                Ok((psi.clone(), b, m, z))
            }
        }
    }

    fn upper_grad_from(&self, g: &Graph<T>, loss: Var, psi: &ParamSet<T>, b: &Bound, z: Var) -> Result<Vec<T>> {
        let grads = g.backward(loss)?;
        Ok(match &self.coupling {
            Coupling::Encoder { .. } => psi.grads_of(b, &grads).flatten(),
            Coupling::Message { .. } => grads
                .get(z)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![T::zero(); psi.message_len()]),
        })
    }

    /// Lower objective `-CE(θ; D̂f) + CE(θ; D̂r)` on the graph.
    fn lower_loss_graph(&self, g: &mut Graph<T>, theta: &Bound, psi: &ParamSet<T>, pb: &Bound, m: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (x, set, sign) in [
            (&self.forget_x, &self.splits.forget, -T::one()),
            (&self.retain_x, &self.splits.retain, T::one()),
        ] {
            let Some(x) = x else { continue };
            let xv = g.constant(x.clone());
            let xw = encode_graph(g, psi, pb, xv, m)?;
            let logits = classify_graph(g, theta, xw)?;
            let ce = g.cross_entropy(logits, &set.labels)?;
            let term = g.scale(ce, sign);
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or_else(|| Error::Validation("no lower-level data".into()))
    }

    /// Watermarked copies of the forget and retain sets for `upper`.
    pub fn watermarked_splits(&self, upper: &[T]) -> Result<UnlearnSplits<T>> {
        let (psi, m) = self.psi_and_message(upper)?;
        let wm = |x: &Option<Tensor<T>>, s: &LabeledSet<T>| -> Result<LabeledSet<T>> {
            Ok(match x {
                Some(x) => LabeledSet {
                    features: encode(&psi, x, &m)?.into_data(),
                    dim: s.dim,
                    labels: s.labels.clone(),
                },
                None => s.clone(),
            })
        };
        Ok(UnlearnSplits {
            forget: wm(&self.forget_x, &self.splits.forget)?,
            retain: wm(&self.retain_x, &self.splits.retain)?,
        })
    }

    pub fn lower_solve_params(&self, upper: &[T]) -> Result<ParamSet<T>> {
        let wm = self.watermarked_splits(upper)?;
        unlearn_gd(self.theta_o, &wm.forget, &wm.retain, &self.cfg.lower_mu())
    }

    /// Watermarking term `Lwm(ψ, φ; m, Df ∪ Dr)` with its gradients for the
    /// upper variable and for `φ`.
    pub fn wm_term(&self, upper: &[T], phi: &ParamSet<T>) -> Result<(T, Vec<T>, ParamSet<T>)> {
        let mut g = Graph::new();
        let (psi, pb, m, z) = self.bind_upper(&mut g, upper, true)?;
        let fb = phi.bind(&mut g);
        let x = g.constant(self.union_x.clone());
        let l = wm_loss_graph(&mut g, &psi, &pb, &fb, x, m, self.cfg.weights())?;
        let grads = g.backward(l)?;
        let gu = match &self.coupling {
            Coupling::Encoder { .. } => psi.grads_of(&pb, &grads).flatten(),
            Coupling::Message { .. } => grads
                .get(z)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![T::zero(); upper.len()]),
        };
        Ok((g.value(l).item(), gu, phi.grads_of(&fb, &grads)))
    }

    /// Validation term `Lmu(θ; Df, Dr)` on clean data.
    pub fn validation_value(&self, theta: &ParamSet<T>) -> Result<T> {
        Ok(mu_loss_grad(theta, &self.splits.forget, &self.splits.retain, T::one(), T::one())?.0)
    }

    /// `L̂` at `upper`, `φ` and a given lower solution.
    pub fn upper_objective(&self, upper: &[T], phi: &ParamSet<T>, theta_u: &ParamSet<T>) -> Result<T> {
        let (wm, _, _) = self.wm_term(upper, phi)?;
        Ok(self.validation_value(theta_u)? + wm)
    }

    pub fn theta_layout(&self) -> &ParamSet<T> {
        self.theta_o
    }
}

impl<T: Real> BilevelProblem<T> for WatermarkBilevel<'_, T> {
    fn lower_solve(&self, upper: &[T]) -> Result<Vec<T>> {
        Ok(self.lower_solve_params(upper)?.flatten())
    }

    fn validation_grad(&self, theta: &[T]) -> Result<Vec<T>> {
        let t = self.theta_o.with_flat(theta)?;
        Ok(mu_loss_grad(&t, &self.splits.forget, &self.splits.retain, T::one(), T::one())?
            .1
            .flatten())
    }

    fn lower_grad_upper(&self, theta: &[T], upper: &[T]) -> Result<Vec<T>> {
        let t = self.theta_o.with_flat(theta)?;
        let mut g = Graph::new();
        let tb = t.bind_frozen(&mut g);
        let (psi, pb, m, z) = self.bind_upper(&mut g, upper, true)?;
        let l = self.lower_loss_graph(&mut g, &tb, &psi, &pb, m)?;
        self.upper_grad_from(&g, l, &psi, &pb, z)
    }

    fn lower_grad_theta(&self, theta: &[T], upper: &[T]) -> Result<Vec<T>> {
        let t = self.theta_o.with_flat(theta)?;
        let mut g = Graph::new();
        let tb = t.bind(&mut g);
        let (psi, pb, m, _) = self.bind_upper(&mut g, upper, false)?;
        let l = self.lower_loss_graph(&mut g, &tb, &psi, &pb, m)?;
        Ok(t.grads_of(&tb, &g.backward(l)?).flatten())
    }

    fn direct_grad(&self, upper: &[T]) -> Result<Vec<T>> {
        Ok(self.wm_term(upper, &self.phi)?.1)
    }
}

/// `θu(ψ)`: watermark Df and Dr with `(ψ, m)`, then GradDiff from `θo`.
pub fn lower_solve<T: Real>(
    psi: &ParamSet<T>,
    m: &[T],
    theta_o: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    cfg: &BloConfig<T>,
) -> Result<ParamSet<T>> {
    if cfg.lower_epochs == 0 {
        return Ok(theta_o.clone());
    }
    // φ does not enter the lower level; any decoder layout works here.
    let phi = psi.clone();
    WatermarkBilevel::for_network(theta_o, splits, psi, &phi, m, cfg)?.lower_solve_params(&psi.flatten())
}

/// `Lmu(θu; Df, Dr) + Lwm(ψ, φ; m, Df ∪ Dr)`, with the unlearning term on
/// unwatermarked data.
pub fn upper_objective<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    theta_u: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    m: &[T],
    cfg: &BloConfig<T>,
) -> Result<T> {
    let p = WatermarkBilevel::for_network(theta_u, splits, psi, phi, m, cfg)?;
    p.upper_objective(&psi.flatten(), phi, theta_u)
}

/// Gradients of the upper objective for `ψ` (implicit) and `φ` (direct).
#[derive(Clone, Debug)]
pub struct UpperGradient<T> {
    pub psi: ParamSet<T>,
    pub phi: ParamSet<T>,
    pub theta_u: ParamSet<T>,
    pub objective: T,
}

pub fn upper_gradient<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    m: &[T],
    theta_o: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    cfg: &BloConfig<T>,
) -> Result<UpperGradient<T>> {
    let p = WatermarkBilevel::for_network(theta_o, splits, psi, phi, m, cfg)?;
    let u = psi.flatten();
    let c = cfg.correction_scale.factor(cfg.lambda_diag);
    let theta_u_flat = p.lower_solve(&u)?;
    let theta_u = theta_o.with_flat(&theta_u_flat)?;
    let g = p.validation_grad(&theta_u_flat)?;
    let (wm, direct, gphi) = p.wm_term(&u, phi)?;
    let mixed = if c == T::zero() {
        vec![T::zero(); u.len()]
    } else {
        mixed_hvp(&p, &u, &theta_u_flat, &g, cfg.fd_step)?
    };
    let grad: Vec<T> = direct.iter().zip(&mixed).map(|(&d, &h)| d - c * h).collect();
    let objective = p.validation_value(&theta_u)? + wm;
    Ok(UpperGradient {
        psi: psi.with_flat(&grad)?,
        phi: gphi,
        theta_u,
        objective,
    })
}

/// One upper-level epoch as recorded in a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub objective: T,
    /// UA and RA of `θu` on the clean forget/retain sets.
    pub ua: f64,
    pub ra: f64,
}

#[derive(Clone, Debug)]
pub struct Water4muResult<T> {
    pub psi: ParamSet<T>,
    pub phi: ParamSet<T>,
    /// Entry `k < upper_epochs` is taken before the `k`-th update; the last
    /// entry evaluates the returned codec.
    pub trace: Vec<EpochRecord<T>>,
}

fn snapshot<T: Real>(epoch: usize, objective: T, theta_u: &ParamSet<T>, splits: &UnlearnSplits<T>) -> Result<EpochRecord<T>> {
    if !objective.is_finite() {
        return Err(Error::numeric("upper objective", epoch));
    }
    let ua = if splits.forget.is_empty() {
        0.0
    } else {
        evalx::ua(theta_u, &splits.forget)?
    };
    let ra = if splits.retain.is_empty() {
        0.0
    } else {
        evalx::accuracy(theta_u, &splits.retain)?
    };
    Ok(EpochRecord {
        epoch,
        objective,
        ua,
        ra,
    })
}

/// Gradient descent on `(ψ, φ)` with implicit gradients.
pub fn water4mu_train<T: Real>(
    theta_o: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    psi0: &ParamSet<T>,
    phi0: &ParamSet<T>,
    m: &WatermarkMessage<T>,
    cfg: &BloConfig<T>,
) -> Result<Water4muResult<T>> {
    if cfg.mode != BloMode::NetworkTraining {
        return Err(Error::Contract("water4mu_train needs mode = network_training".into()));
    }
    cfg.validate()?;
    let msg = m.as_reals();
    let mut psi = psi0.clone();
    let mut phi = phi0.clone();
    let mut trace = Vec::with_capacity(cfg.upper_epochs + 1);
    for epoch in 0..cfg.upper_epochs {
        let ug = upper_gradient(&psi, &phi, &msg, theta_o, splits, cfg)?;
        trace.push(snapshot(epoch, ug.objective, &ug.theta_u, splits)?);
        psi.axpy(-cfg.upper_lr, &ug.psi);
        phi.axpy(-cfg.upper_lr, &ug.phi);
        if !psi.is_finite() || !phi.is_finite() {
            return Err(Error::numeric("water4mu codec update", epoch));
        }
    }
    if cfg.upper_epochs > 0 {
        let theta_u = lower_solve(&psi, &msg, theta_o, splits, cfg)?;
        let obj = upper_objective(&psi, &phi, &theta_u, splits, &msg, cfg)?;
        trace.push(snapshot(cfg.upper_epochs, obj, &theta_u, splits)?);
    }
    Ok(Water4muResult { psi, phi, trace })
}

#[derive(Clone, Debug)]
pub struct MessageSelection<T> {
    pub message: WatermarkMessage<T>,
    pub trace: Vec<EpochRecord<T>>,
}

/// Implicit-gradient descent over relaxed message logits with the codec
/// frozen; returns the binarised message.
pub fn message_select<T: Real>(
    psi_w: &ParamSet<T>,
    phi_w: &ParamSet<T>,
    theta_o: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    z0: &[T],
    cfg: &BloConfig<T>,
) -> Result<MessageSelection<T>> {
    if cfg.mode != BloMode::MessageSelection {
        return Err(Error::Contract("message_select needs mode = message_selection".into()));
    }
    cfg.validate()?;
    let p = WatermarkBilevel::for_message(theta_o, splits, psi_w, phi_w, cfg)?;
    let c = cfg.correction_scale.factor(cfg.msg_lambda);
    let mut z = z0.to_vec();
    let mut trace = Vec::with_capacity(cfg.msg_epochs);
    for epoch in 0..cfg.msg_epochs {
        let hg = implicit_hypergradient(&p, &z, c, cfg.fd_step)?;
        let theta_u = theta_o.with_flat(&hg.theta_u)?;
        let obj = p.upper_objective(&z, phi_w, &theta_u)?;
        trace.push(snapshot(epoch, obj, &theta_u, splits)?);
        for (zi, gi) in z.iter_mut().zip(&hg.grad) {
            *zi = *zi - cfg.msg_lr * *gi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("message logits", epoch));
        }
    }
    Ok(MessageSelection {
        message: WatermarkMessage::from_logits(z)?,
        trace,
    })
}

/// Upper objective with the lower level solved for a hard message.
pub fn objective_at_message<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    theta_o: &ParamSet<T>,
    splits: &UnlearnSplits<T>,
    m: &WatermarkMessage<T>,
    cfg: &BloConfig<T>,
) -> Result<(T, ParamSet<T>)> {
    let msg = m.as_reals();
    let theta_u = lower_solve(psi, &msg, theta_o, splits, cfg)?;
    let obj = upper_objective(psi, phi, &theta_u, splits, &msg, cfg)?;
    Ok((obj, theta_u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_identity_cases() {
        let p = QuadBilevel::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(quad_oracle_hypergrad(&p, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let p = QuadBilevel::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(quad_oracle_hypergrad(&p, &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(quad_oracle_hypergrad(&p, &[1.0]).is_err());
    }

    #[test]
    fn quad_lower_solve_reaches_fixed_point() {
        let p = QuadBilevel::<f64>::new(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], 3, 2, vec![0.0; 3]).unwrap();
        let psi = [0.3, -1.1];
        let th = p.lower_solve(&psi).unwrap();
        for (a, b) in th.iter().zip(p.a_psi(&psi)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((p.upper_objective(&psi).unwrap()
            - 0.5 * th.iter().map(|v| v * v).sum::<f64>())
        .abs()
            < 1e-12);
    }

    #[test]
    fn quad_mixed_hvp_is_minus_at_g() {
        let p = QuadBilevel::<f64>::new(vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75], 3, 2, vec![0.0; 3]).unwrap();
        let psi = [0.3, -1.1];
        let theta = [0.2, 0.1, -0.4];
        let g = [1.0, -2.0, 0.5];
        let h = mixed_hvp(&p, &psi, &theta, &g, 1e-3).unwrap();
        let expect: Vec<f64> = p.at(&g).iter().map(|v| -v).collect();
        for (a, b) in h.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(mixed_hvp(&p, &psi, &theta, &[0.0; 3], 1e-3).unwrap(), vec![0.0, 0.0]);
        assert!(mixed_hvp(&p, &psi, &theta, &g, 0.0).is_err());
    }

    #[test]
    fn correction_scale_factors() {
        assert_eq!(CorrectionScale::OneOverLambda.factor(1e-2), 100.0);
        assert_eq!(CorrectionScale::Unit.factor(1e-2), 1.0);
        assert_eq!(CorrectionScale::Disabled.factor(1e-2), 0.0);
        for c in [CorrectionScale::OneOverLambda, CorrectionScale::Unit, CorrectionScale::Disabled] {
            assert_eq!(CorrectionScale::parse(c.as_str()), Some(c));
        }
    }

    #[test]
    fn config_validation() {
        let bad = BloConfig::<f64> {
            lambda_diag: 0.0,
            ..BloConfig::default()
        };
        assert!(bad.validate().is_err());
        BloConfig::<f64>::default().validate().unwrap();
    }
}
