//! Watermark codec training, dataset embedding and fidelity metrics.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{DatasetBundle, SubsetSelector};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{decode, decode_bits, decode_graph, encode, encode_graph, Bound, ParamSet};
use crate::real::Real;
use crate::rng;

/// An `L`-bit message, optionally with the relaxed logits it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkMessage<T = f64> {
    pub bits: Vec<u8>,
    pub logits: Option<Vec<T>>,
}

impl<T: Real> WatermarkMessage<T> {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|&b| b > 1) {
            return Err(Error::Validation(format!("message bits must be 0/1, got {bits:?}")));
        }
        Ok(Self { bits, logits: None })
    }

    /// Uniform random bits from the message stream of `seed`.
    pub fn random(len: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, rng::tags::MESSAGE, 0);
        Self::new((0..len).map(|_| u8::from(r.random::<bool>())).collect())
    }

    /// Bits `1[sigmoid(z) > 0.5]`, keeping `z`.
    pub fn from_logits(z: Vec<T>) -> Result<Self> {
        let half = T::lit(0.5);
        let bits = z
            .iter()
            .map(|&v| u8::from(T::one() / (T::one() + (-v).exp()) > half))
            .collect();
        let mut m = Self::new(bits)?;
        m.logits = Some(z);
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn as_reals(&self) -> Vec<T> {
        self.bits.iter().map(|&b| T::lit(f64::from(b))).collect()
    }
}

/// How training picks the message of each mini-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MessageMode {
    /// Always the given message.
    #[default]
    Fixed,
    /// A fresh uniform message for every row of every mini-batch, so the
    /// codec works for any message.
    RandomPerRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WmTrainConfig<T = f64> {
    pub epochs: usize,
    pub lr: T,
    pub batch_size: usize,
    pub rec_weight: T,
    pub dec_weight: T,
    pub message_mode: MessageMode,
    pub seed: u64,
}

impl<T: Real> Default for WmTrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: T::lit(0.5),
            batch_size: 64,
            rec_weight: T::one(),
            dec_weight: T::one(),
            message_mode: MessageMode::Fixed,
            seed: 0,
        }
    }
}

impl<T: Real> WmTrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= T::zero()) || self.batch_size == 0 {
            return Err(Error::Validation("watermark config needs lr >= 0 and batch >= 1".into()));
        }
        Ok(())
    }
}

/// Loss weights of the two codec terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WmWeights<T> {
    pub rec: T,
    pub dec: T,
}

impl<T: Real> Default for WmWeights<T> {
    fn default() -> Self {
        Self {
            rec: T::one(),
            dec: T::one(),
        }
    }
}

impl<T: Real> From<&WmTrainConfig<T>> for WmWeights<T> {
    fn from(c: &WmTrainConfig<T>) -> Self {
        Self {
            rec: c.rec_weight,
            dec: c.dec_weight,
        }
    }
}

/// `rec·mse(x_w, x) + dec·bce(decode(x_w), m)` on the graph. `m` feeds both
/// the encoder and the decoding target, so a relaxed message receives
/// gradient through both.
pub fn wm_loss_graph<T: Real>(
    g: &mut Graph<T>,
    psi: &ParamSet<T>,
    psi_b: &Bound,
    phi_b: &Bound,
    x: Var,
    m: Var,
    w: WmWeights<T>,
) -> Result<Var> {
    let xw = encode_graph(g, psi, psi_b, x, m)?;
    let rec = g.mse(xw, x)?;
    let logits = decode_graph(g, phi_b, xw)?;
    let dec = g.bce_with_logits(logits, m)?;
    let rec = g.scale(rec, w.rec);
    let dec = g.scale(dec, w.dec);
    g.add(rec, dec)
}

fn check_message<T: Real>(psi: &ParamSet<T>, phi: &ParamSet<T>, m: &[T]) -> Result<()> {
    if m.len() != psi.message_len() || m.len() != phi.message_len() {
        return Err(Error::dim(
            "watermark message",
            &[m.len()],
            &[psi.message_len(), phi.message_len()],
        ));
    }
    Ok(())
}

pub fn wm_loss<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    m: &[T],
    batch: &Tensor<T>,
    w: WmWeights<T>,
) -> Result<T> {
    check_message(psi, phi, m)?;
    let mut g = Graph::new();
    let pb = psi.bind_frozen(&mut g);
    let fb = phi.bind_frozen(&mut g);
    let x = g.constant(batch.clone());
    let mv = g.constant(Tensor::vector(m.to_vec())?);
    let l = wm_loss_graph(&mut g, psi, &pb, &fb, x, mv, w)?;
    Ok(g.value(l).item())
}

/// Loss value with gradients for `psi` and `phi`.
pub fn wm_loss_grad<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    m: &[T],
    batch: &Tensor<T>,
    w: WmWeights<T>,
) -> Result<(T, ParamSet<T>, ParamSet<T>)> {
    check_message(psi, phi, m)?;
    codec_grad(psi, phi, Tensor::vector(m.to_vec())?, batch, w)
}

/// `m` is either one message `[L]` or one message per row `[n×L]`.
fn codec_grad<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    m: Tensor<T>,
    batch: &Tensor<T>,
    w: WmWeights<T>,
) -> Result<(T, ParamSet<T>, ParamSet<T>)> {
    let mut g = Graph::new();
    let pb = psi.bind(&mut g);
    let fb = phi.bind(&mut g);
    let x = g.constant(batch.clone());
    let mv = g.constant(m);
    let l = wm_loss_graph(&mut g, psi, &pb, &fb, x, mv, w)?;
    let grads = g.backward(l)?;
    Ok((
        g.value(l).item(),
        psi.grads_of(&pb, &grads),
        phi.grads_of(&fb, &grads),
    ))
}

/// Codec after training with its per-step loss history.
#[derive(Clone, Debug)]
pub struct TrainedCodec<T> {
    pub psi: ParamSet<T>,
    pub phi: ParamSet<T>,
    pub history: Vec<T>,
}

/// Mini-batch gradient descent on the codec loss, reshuffled every epoch.
pub fn train_watermark<T: Real>(
    psi0: &ParamSet<T>,
    phi0: &ParamSet<T>,
    data: &Tensor<T>,
    m: &WatermarkMessage<T>,
    cfg: &WmTrainConfig<T>,
) -> Result<TrainedCodec<T>> {
    cfg.validate()?;
    let mut psi = psi0.clone();
    let mut phi = phi0.clone();
    let n = data.rows();
    let w = WmWeights::from(cfg);
    let mut history = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut step = 0usize;
    let mut msg_rng = rng::stream(cfg.seed, rng::tags::MESSAGE, 1);
    let fixed = m.as_reals();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::tags::WM_SHUFFLE, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select_rows(chunk)?;
            let msg = match cfg.message_mode {
                MessageMode::Fixed => Tensor::vector(fixed.clone())?,
                MessageMode::RandomPerRow => {
                    let bits = (0..chunk.len() * m.len())
                        .map(|_| if msg_rng.random::<bool>() { T::one() } else { T::zero() })
                        .collect();
                    Tensor::matrix(chunk.len(), m.len(), bits)?
                }
            };
            let (loss, gpsi, gphi) = codec_grad(&psi, &phi, msg, &batch, w)?;
            if !loss.is_finite() {
                return Err(Error::numeric("watermark training loss", step));
            }
            psi.axpy(-cfg.lr, &gpsi);
            phi.axpy(-cfg.lr, &gphi);
            history.push(loss);
            step += 1;
        }
    }
    Ok(TrainedCodec { psi, phi, history })
}

/// Copy of `bundle` whose selected rows are replaced by their watermarked
/// version; labels and index lists are unchanged.
pub fn embed_dataset<T: Real>(
    psi: &ParamSet<T>,
    bundle: &DatasetBundle<T>,
    m: &[T],
    which: SubsetSelector,
) -> Result<DatasetBundle<T>> {
    let idx = bundle.selected_idx(which);
    let mut out = bundle.clone();
    if idx.is_empty() {
        return Ok(out);
    }
    let xw = encode(psi, &bundle.features.select_rows(&idx)?, m)?;
    let d = bundle.dim();
    for (k, &i) in idx.iter().enumerate() {
        out.features.data_mut()[i * d..(i + 1) * d].copy_from_slice(xw.row(k));
    }
    Ok(out)
}

/// Fraction of mismatching bits.
pub fn ber(decoded: &[u8], m: &[u8]) -> Result<f64> {
    if decoded.len() != m.len() || m.is_empty() {
        return Err(Error::dim("ber", &[decoded.len()], &[m.len()]));
    }
    let wrong = decoded.iter().zip(m).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / m.len() as f64)
}

/// Per-sample BER of `decode(encode(x, m))` averaged over rows.
pub fn mean_ber<T: Real>(
    psi: &ParamSet<T>,
    phi: &ParamSet<T>,
    x: &Tensor<T>,
    m: &WatermarkMessage<T>,
) -> Result<f64> {
    let xw = encode(psi, x, &m.as_reals())?;
    let bits = decode_bits(&decode(phi, &xw)?);
    let mut total = 0.0;
    for row in &bits {
        total += ber(row, &m.bits)?;
    }
    Ok(total / bits.len() as f64)
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(1/mse)` for signals in `[0, 1]`, capped at 99 dB.
pub fn psnr<T: Real>(x: &Tensor<T>, xw: &Tensor<T>) -> Result<f64> {
    if x.shape() != xw.shape() {
        return Err(Error::dim("psnr", x.shape(), xw.shape()));
    }
    let n = x.numel() as f64;
    let mse: f64 = x
        .data()
        .iter()
        .zip(xw.data())
        .map(|(&a, &b)| {
            let d = (a - b).as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}
