//! Dense networks: the classifier being unlearned and the residual
//! watermark encoder/decoder pair.

use rand::Rng;

use crate::diffcore::{finite_diff_grad, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Classifier,
    Encoder,
    Decoder,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Classifier => 0,
            ModelKind::Encoder => 1,
            ModelKind::Decoder => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ModelKind::Classifier),
            1 => Some(ModelKind::Encoder),
            2 => Some(ModelKind::Decoder),
            _ => None,
        }
    }

    fn default_name(self) -> &'static str {
        match self {
            ModelKind::Classifier => "theta",
            ModelKind::Encoder => "enc",
            ModelKind::Decoder => "dec",
        }
    }
}

/// Layer layout of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec<T> {
    pub kind: ModelKind,
    /// Feature dimension `d` (for the encoder, excluding the message).
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Classes `C`, message length `L`, or `d` for the encoder.
    pub output_dim: usize,
    /// Message length consumed by the encoder; unused otherwise.
    pub message_len: usize,
    /// Residual amplitude `s` of the encoder; unused otherwise.
    pub strength: T,
}

impl<T: Real> ArchSpec<T> {
    pub fn classifier(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Classifier,
            input_dim,
            hidden,
            output_dim: classes,
            message_len: 0,
            strength: T::zero(),
        }
    }

    pub fn encoder(input_dim: usize, hidden: Vec<usize>, message_len: usize, strength: T) -> Self {
        Self {
            kind: ModelKind::Encoder,
            input_dim,
            hidden,
            output_dim: input_dim,
            message_len,
            strength,
        }
    }

    pub fn decoder(input_dim: usize, hidden: Vec<usize>, message_len: usize) -> Self {
        Self {
            kind: ModelKind::Decoder,
            input_dim,
            hidden,
            output_dim: message_len,
            message_len,
            strength: T::zero(),
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let first = match self.kind {
            ModelKind::Encoder => self.input_dim + self.message_len,
            _ => self.input_dim,
        };
        let mut dims = vec![first];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims
    }

    fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) {
            return Err(Error::Validation(format!("non-positive layer size in {self:?}")));
        }
        if self.kind == ModelKind::Encoder && self.output_dim != self.input_dim {
            return Err(Error::Validation("encoder output must equal input dim".into()));
        }
        if self.kind != ModelKind::Classifier && self.message_len == 0 {
            return Err(Error::Validation("codec needs a positive message length".into()));
        }
        if !(self.strength >= T::zero()) {
            return Err(Error::Validation("encoder strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors of one network, weights `w{i}` `[in×out]` and
/// biases `b{i}` `[out]` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub name: String,
    pub kind: ModelKind,
    pub strength: T,
    entries: Vec<(String, Tensor<T>)>,
}

/// Graph handles of a bound [`ParamSet`], one per entry.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamSet<T> {
    pub fn from_entries(
        name: impl Into<String>,
        kind: ModelKind,
        strength: T,
        entries: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let set = Self {
            name: name.into(),
            kind,
            strength,
            entries,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len() / 2
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    fn weight(&self, i: usize) -> &Tensor<T> {
        &self.entries[2 * i].1
    }

    /// Rows of the first weight matrix.
    pub fn in_dim(&self) -> usize {
        self.weight(0).shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight(self.num_layers() - 1).shape()[1]
    }

    /// Feature dimension the network consumes (the encoder also takes `L`).
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::Encoder => self.out_dim(),
            _ => self.in_dim(),
        }
    }

    pub fn message_len(&self) -> usize {
        match self.kind {
            ModelKind::Encoder => self.in_dim() - self.out_dim(),
            ModelKind::Decoder => self.out_dim(),
            ModelKind::Classifier => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() || !self.entries.len().is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "{}: expected weight/bias pairs, got {} entries",
                self.name,
                self.entries.len()
            )));
        }
        for (i, (n, _)) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|(m, _)| m == n) {
                return Err(Error::Validation(format!("{}: duplicate entry {n}", self.name)));
            }
        }
        let mut prev: Option<usize> = None;
        for l in 0..self.num_layers() {
            let w = self.weight(l).shape();
            let b = self.entries[2 * l + 1].1.shape();
            if w.len() != 2 || b.iter().product::<usize>() != w[1] {
                return Err(Error::dim("param layer", w, b));
            }
            if let Some(p) = prev {
                if p != w[0] {
                    return Err(Error::dim("param chain", &[p], w));
                }
            }
            prev = Some(w[1]);
        }
        if self.kind == ModelKind::Encoder && self.in_dim() <= self.out_dim() {
            return Err(Error::Validation("encoder has no message inputs".into()));
        }
        Ok(())
    }

    /// Registers every entry as a trainable leaf named `{set}.{entry}`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    /// Registers every entry as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                if trainable {
                    let mut t = t.clone();
                    t.requires_grad = true;
                    g.leaf(format!("{}.{}", self.name, n), &t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradient of a bound set, shaped like `self`.
    pub fn grads_of(&self, bound: &Bound, grads: &Gradients<T>) -> Self {
        let entries = self
            .entries
            .iter()
            .zip(&bound.vars)
            .map(|((n, t), v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (n.clone(), g)
            })
            .collect();
        Self {
            name: self.name.clone(),
            kind: self.kind,
            strength: self.strength,
            entries,
        }
    }

    /// Copies gradient data into each tensor's `grad` slot.
    pub fn attach_grads(&mut self, grads: &Self) {
        for ((_, t), (_, g)) in self.entries.iter_mut().zip(&grads.entries) {
            t.grad = Some(g.data().to_vec());
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("with_flat", &[self.num_params()], &[flat.len()]));
        }
        let mut out = self.clone();
        let mut off = 0;
        for (_, t) in &mut out.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            t.grad = None;
            off += n;
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in &mut out.entries {
            *t = Tensor::zeros(t.shape());
        }
        out
    }

    /// `self += alpha * other`, entry by entry.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(&other.entries) {
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = *a + alpha * b;
            }
        }
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = self.clone();
        for (_, t) in &mut out.entries {
            for v in t.data_mut() {
                *v = f(*v);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n, t), (m, o))| n == m && t.shape() == o.shape())
    }

    /// Central-difference gradient of a scalar function of this set.
    pub fn finite_diff_grad<F>(&self, mut f: F, h: T) -> Result<Self>
    where
        F: FnMut(&Self) -> Result<T>,
    {
        let base = self.tensors();
        let mut scratch = self.clone();
        let grads = finite_diff_grad(
            |ts| {
                for ((_, t), src) in scratch.entries.iter_mut().zip(ts) {
                    t.data_mut().copy_from_slice(src.data());
                }
                f(&scratch)
            },
            &base,
            h,
        )?;
        let mut out = self.zeros_like();
        for ((_, t), g) in out.entries.iter_mut().zip(grads) {
            *t = g;
        }
        Ok(out)
    }
}

/// Glorot-uniform weights from the stream `(seed, kind, layer)`, zero biases.
pub fn init_params<T: Real>(arch: &ArchSpec<T>, seed: u64) -> Result<ParamSet<T>> {
    arch.validate()?;
    let dims = arch.layer_dims();
    let tag = format!("{}/{}", rng::tags::INIT, arch.kind.default_name());
    let mut entries = Vec::with_capacity(2 * (dims.len() - 1));
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::stream(seed, &tag, l as u64);
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(r.random_range(-bound..bound)))
            .collect();
        entries.push((format!("w{l}"), Tensor::matrix(fan_in, fan_out, data)?));
        entries.push((format!("b{l}"), Tensor::zeros(&[fan_out])));
    }
    ParamSet::from_entries(arch.kind.default_name(), arch.kind, arch.strength, entries)
}

/// Affine layers with tanh between them; optional tanh on the output.
fn mlp<T: Real>(g: &mut Graph<T>, b: &Bound, x: Var, tanh_out: bool) -> Result<Var> {
    let layers = b.vars.len() / 2;
    let mut h = x;
    for l in 0..layers {
        let z = g.matmul(h, b.vars[2 * l])?;
        let z = g.add_bias(z, b.vars[2 * l + 1])?;
        h = if l + 1 < layers || tanh_out { g.tanh(z) } else { z };
    }
    Ok(h)
}

fn check_features<T: Real>(op: &'static str, set: &ParamSet<T>, x: &Tensor<T>) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != set.feature_dim() {
        return Err(Error::dim(op, x.shape(), &[set.feature_dim()]));
    }
    Ok(())
}

/// Classifier logits for a bound parameter set.
pub fn classify_graph<T: Real>(g: &mut Graph<T>, theta: &Bound, x: Var) -> Result<Var> {
    mlp(g, theta, x, false)
}

pub fn classify<T: Real>(theta: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_features("classify", theta, x)?;
    let mut g = Graph::new();
    let b = theta.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let out = classify_graph(&mut g, &b, xv)?;
    Ok(g.value(out).clone())
}

/// `clip01(x + s * tanh-MLP([x, m]))` with `m` a graph node of length `L`.
pub fn encode_graph<T: Real>(
    g: &mut Graph<T>,
    psi: &ParamSet<T>,
    bound: &Bound,
    x: Var,
    m: Var,
) -> Result<Var> {
    let inp = g.concat_broadcast(x, m)?;
    if g.value(inp).cols() != psi.in_dim() {
        return Err(Error::dim("encode", g.value(inp).shape(), &[psi.in_dim()]));
    }
    let r = mlp(g, bound, inp, true)?;
    let r = g.scale(r, psi.strength);
    let sum = g.add(x, r)?;
    Ok(g.clip01(sum))
}

pub fn encode<T: Real>(psi: &ParamSet<T>, x: &Tensor<T>, m: &[T]) -> Result<Tensor<T>> {
    check_features("encode", psi, x)?;
    if m.len() != psi.message_len() {
        return Err(Error::dim("encode message", &[m.len()], &[psi.message_len()]));
    }
    let mut g = Graph::new();
    let b = psi.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let mv = g.constant(Tensor::vector(m.to_vec())?);
    let out = encode_graph(&mut g, psi, &b, xv, mv)?;
    Ok(g.value(out).clone())
}

pub fn decode_graph<T: Real>(g: &mut Graph<T>, phi: &Bound, xw: Var) -> Result<Var> {
    mlp(g, phi, xw, false)
}

/// Message logits `[n×L]`.
pub fn decode<T: Real>(phi: &ParamSet<T>, xw: &Tensor<T>) -> Result<Tensor<T>> {
    check_features("decode", phi, xw)?;
    let mut g = Graph::new();
    let b = phi.bind_frozen(&mut g);
    let xv = g.constant(xw.clone());
    let out = decode_graph(&mut g, &b, xv)?;
    Ok(g.value(out).clone())
}

/// Hard decisions `1[sigmoid(logit) > 0.5]`, one bit vector per row.
pub fn decode_bits<T: Real>(logits: &Tensor<T>) -> Vec<Vec<u8>> {
    let half = T::lit(0.5);
    logits
        .data()
        .chunks(logits.cols())
        .map(|row| {
            row.iter()
                .map(|&l| u8::from(T::one() / (T::one() + (-l).exp()) > half))
                .collect()
        })
        .collect()
}

/// Index of the largest logit per row, lowest index on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.cols())
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
