//! INI-style run configuration.
//!
//! ```text
//! # comment
//! [blo]
//! lambda_diag = 0.01
//! ```
//!
//! Every key has a default, so an empty file is a valid config. Unknown
//! sections or keys, duplicate keys and malformed values are reported with
//! their line number. [`emit_config`] writes every key in sorted order; the
//! config hash is the SHA-256 of that canonical text.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::blo::CorrectionScale;
use crate::error::{Error, Result};
use crate::evalx::Scenario;
use crate::unlearn::Method;
use crate::watermark::MessageMode;

use super::scenario::{ForgetMode, ScenarioSpec};

type Getter = fn(&ScenarioSpec) -> String;
type Setter = fn(&mut ScenarioSpec, &str) -> std::result::Result<(), String>;

struct Field {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn p_usize(s: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("expected a non-negative integer, got {s:?}"))
}

fn p_pos_usize(s: &str) -> std::result::Result<usize, String> {
    match p_usize(s)? {
        0 => Err("must be >= 1".into()),
        n => Ok(n),
    }
}

fn p_u64(s: &str) -> std::result::Result<u64, String> {
    s.parse().map_err(|_| format!("expected an unsigned integer, got {s:?}"))
}

fn p_real(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("expected a finite real, got {s:?}")),
    }
}

fn p_nonneg(s: &str) -> std::result::Result<f64, String> {
    let v = p_real(s)?;
    if v < 0.0 {
        return Err("must be >= 0".into());
    }
    Ok(v)
}

fn p_pos(s: &str) -> std::result::Result<f64, String> {
    let v = p_real(s)?;
    if v <= 0.0 {
        return Err("must be > 0".into());
    }
    Ok(v)
}

fn p_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {s:?}")),
    }
}

fn p_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| p_pos_usize(t.trim())).collect()
}

fn p_path(s: &str) -> std::result::Result<Option<PathBuf>, String> {
    Ok((!s.is_empty()).then(|| PathBuf::from(s)))
}

fn p_enum<E: FromStr<Err = Error>>(s: &str) -> std::result::Result<E, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn p_message_mode(s: &str) -> std::result::Result<MessageMode, String> {
    match s {
        "fixed" => Ok(MessageMode::Fixed),
        "random_per_row" => Ok(MessageMode::RandomPerRow),
        _ => Err(format!("expected fixed or random_per_row, got {s:?}")),
    }
}

fn message_mode_str(m: MessageMode) -> &'static str {
    match m {
        MessageMode::Fixed => "fixed",
        MessageMode::RandomPerRow => "random_per_row",
    }
}

macro_rules! field {
    ($section:literal, $key:literal, |$s:ident| $get:expr, |$t:ident, $v:ident| $set:expr) => {
        Field {
            section: $section,
            key: $key,
            get: |$s: &ScenarioSpec| $get,
            set: |$t: &mut ScenarioSpec, $v: &str| {
                $set;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        // [run]
        field!("run", "seed", |s| s.seed.to_string(), |t, v| t.seed = p_u64(v)?),
        field!("run", "scenario", |s| s.scenario.to_string(), |t, v| t.scenario = p_enum::<Scenario>(v)?),
        field!("run", "method", |s| s.method.to_string(), |t, v| t.method = p_enum::<Method>(v)?),
        field!("run", "forget_mode", |s| s.forget_mode.to_string(), |t, v| t.forget_mode = p_enum::<ForgetMode>(v)?),
        field!("run", "forget_ratio", |s| real(s.forget_ratio), |t, v| t.forget_ratio = p_nonneg(v)?),
        field!("run", "forget_class", |s| s.forget_class.to_string(), |t, v| t.forget_class = p_usize(v)?),
        field!("run", "use_water4mu", |s| s.use_water4mu.to_string(), |t, v| t.use_water4mu = p_bool(v)?),
        field!("run", "use_message_selection", |s| s.use_message_selection.to_string(), |t, v| t.use_message_selection = p_bool(v)?),
        field!("run", "watermarked_eval", |s| s.watermarked_eval.to_string(), |t, v| t.watermarked_eval = p_bool(v)?),
        field!("run", "theta_o_checkpoint", |s| path(&s.theta_o_checkpoint), |t, v| t.theta_o_checkpoint = p_path(v)?),
        field!("run", "codec_checkpoint", |s| path(&s.codec_checkpoint), |t, v| t.codec_checkpoint = p_path(v)?),
        // [data]
        field!("data", "n_train", |s| s.data.n_train.to_string(), |t, v| t.data.n_train = p_pos_usize(v)?),
        field!("data", "n_test", |s| s.data.n_test.to_string(), |t, v| t.data.n_test = p_pos_usize(v)?),
        field!("data", "dim", |s| s.data.dim.to_string(), |t, v| t.data.dim = p_pos_usize(v)?),
        field!("data", "classes", |s| s.data.classes.to_string(), |t, v| t.data.classes = p_pos_usize(v)?),
        field!("data", "noise_sigma", |s| real(s.data.noise_sigma), |t, v| t.data.noise_sigma = p_nonneg(v)?),
        // [classifier]
        field!("classifier", "hidden", |s| list(&s.classifier.hidden), |t, v| t.classifier.hidden = p_list(v)?),
        field!("classifier", "epochs", |s| s.classifier.epochs.to_string(), |t, v| t.classifier.epochs = p_usize(v)?),
        field!("classifier", "lr", |s| real(s.classifier.lr), |t, v| t.classifier.lr = p_nonneg(v)?),
        field!("classifier", "batch_size", |s| s.classifier.batch_size.to_string(), |t, v| t.classifier.batch_size = p_pos_usize(v)?),
        // [watermark]
        field!("watermark", "message_len", |s| s.watermark.message_len.to_string(), |t, v| t.watermark.message_len = p_pos_usize(v)?),
        field!("watermark", "strength", |s| real(s.watermark.strength), |t, v| t.watermark.strength = p_nonneg(v)?),
        field!("watermark", "enc_hidden", |s| list(&s.watermark.enc_hidden), |t, v| t.watermark.enc_hidden = p_list(v)?),
        field!("watermark", "dec_hidden", |s| list(&s.watermark.dec_hidden), |t, v| t.watermark.dec_hidden = p_list(v)?),
        field!("watermark", "epochs", |s| s.watermark.epochs.to_string(), |t, v| t.watermark.epochs = p_usize(v)?),
        field!("watermark", "lr", |s| real(s.watermark.lr), |t, v| t.watermark.lr = p_nonneg(v)?),
        field!("watermark", "batch_size", |s| s.watermark.batch_size.to_string(), |t, v| t.watermark.batch_size = p_pos_usize(v)?),
        field!("watermark", "rec_weight", |s| real(s.watermark.rec_weight), |t, v| t.watermark.rec_weight = p_nonneg(v)?),
        field!("watermark", "dec_weight", |s| real(s.watermark.dec_weight), |t, v| t.watermark.dec_weight = p_nonneg(v)?),
        field!("watermark", "message_mode", |s| message_mode_str(s.watermark.message_mode).to_string(), |t, v| t.watermark.message_mode = p_message_mode(v)?),
        // [unlearn]
        field!("unlearn", "batch_size", |s| s.unlearn.batch_size.to_string(), |t, v| t.unlearn.batch_size = p_pos_usize(v)?),
        field!("unlearn", "ga_epochs", |s| s.unlearn.ga_epochs.to_string(), |t, v| t.unlearn.ga_epochs = p_usize(v)?),
        field!("unlearn", "ga_lr", |s| real(s.unlearn.ga_lr), |t, v| t.unlearn.ga_lr = p_nonneg(v)?),
        field!("unlearn", "ft_epochs", |s| s.unlearn.ft_epochs.to_string(), |t, v| t.unlearn.ft_epochs = p_usize(v)?),
        field!("unlearn", "ft_lr", |s| real(s.unlearn.ft_lr), |t, v| t.unlearn.ft_lr = p_nonneg(v)?),
        field!("unlearn", "graddiff_epochs", |s| s.unlearn.graddiff_epochs.to_string(), |t, v| t.unlearn.graddiff_epochs = p_usize(v)?),
        field!("unlearn", "graddiff_lr", |s| real(s.unlearn.graddiff_lr), |t, v| t.unlearn.graddiff_lr = p_nonneg(v)?),
        field!("unlearn", "sparse_epochs", |s| s.unlearn.sparse_epochs.to_string(), |t, v| t.unlearn.sparse_epochs = p_usize(v)?),
        field!("unlearn", "sparse_lr", |s| real(s.unlearn.sparse_lr), |t, v| t.unlearn.sparse_lr = p_nonneg(v)?),
        field!("unlearn", "sparse_gamma", |s| real(s.unlearn.sparse_gamma), |t, v| t.unlearn.sparse_gamma = p_nonneg(v)?),
        field!("unlearn", "iu_alpha", |s| real(s.unlearn.iu_alpha), |t, v| t.unlearn.iu_alpha = p_pos(v)?),
        // [blo]
        field!("blo", "upper_epochs", |s| s.blo.upper_epochs.to_string(), |t, v| t.blo.upper_epochs = p_usize(v)?),
        field!("blo", "upper_lr", |s| real(s.blo.upper_lr), |t, v| t.blo.upper_lr = p_nonneg(v)?),
        field!("blo", "lower_epochs", |s| s.blo.lower_epochs.to_string(), |t, v| t.blo.lower_epochs = p_usize(v)?),
        field!("blo", "lower_lr", |s| real(s.blo.lower_lr), |t, v| t.blo.lower_lr = p_nonneg(v)?),
        field!("blo", "lower_batch_size", |s| s.blo.lower_batch_size.to_string(), |t, v| t.blo.lower_batch_size = p_pos_usize(v)?),
        field!("blo", "lambda_diag", |s| real(s.blo.lambda_diag), |t, v| t.blo.lambda_diag = p_pos(v)?),
        field!("blo", "fd_step", |s| real(s.blo.fd_step), |t, v| t.blo.fd_step = p_pos(v)?),
        field!("blo", "correction_scale", |s| s.blo.correction_scale.as_str().to_string(), |t, v| {
            t.blo.correction_scale = CorrectionScale::parse(v)
                .ok_or_else(|| format!("expected one_over_lambda, unit or disabled, got {v:?}"))?
        }),
        field!("blo", "msg_lr", |s| real(s.blo.msg_lr), |t, v| t.blo.msg_lr = p_nonneg(v)?),
        field!("blo", "msg_epochs", |s| s.blo.msg_epochs.to_string(), |t, v| t.blo.msg_epochs = p_usize(v)?),
        field!("blo", "msg_lambda", |s| real(s.blo.msg_lambda), |t, v| t.blo.msg_lambda = p_pos(v)?),
    ]
}

fn find(section: &str, key: &str) -> Option<Field> {
    fields().into_iter().find(|f| f.section == section && f.key == key)
}

/// Sets `section.key` (as written in a config file) on `spec`.
pub fn set_key(spec: &mut ScenarioSpec, dotted: &str, value: &str) -> Result<()> {
    let (section, key) = dotted
        .split_once('.')
        .ok_or_else(|| Error::Validation(format!("expected section.key, got {dotted:?}")))?;
    let f = find(section, key).ok_or_else(|| Error::Validation(format!("unknown key {dotted}")))?;
    (f.set)(spec, value.trim()).map_err(|msg| Error::Validation(format!("{dotted}: {msg}")))
}

/// Applies the assignments in `text` on top of `base`.
pub fn parse_config_onto(base: ScenarioSpec, text: &str) -> Result<ScenarioSpec> {
    let mut spec = base;
    let mut section: Option<String> = None;
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Config { line, msg };
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header {t:?}")))?
                .trim();
            if !fields().iter().any(|f| f.section == name) {
                return Err(err(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = t
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {t:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section
            .as_deref()
            .ok_or_else(|| err(format!("key {key:?} outside any section")))?;
        let f = find(sec, key).ok_or_else(|| err(format!("unknown key {key:?} in [{sec}]")))?;
        if !seen.insert((sec.to_string(), key.to_string())) {
            return Err(err(format!("duplicate key {key:?} in [{sec}]")));
        }
        (f.set)(&mut spec, value).map_err(|m| err(format!("{sec}.{key}: {m}")))?;
    }
    spec.validate()?;
    Ok(spec)
}

/// Parses config text over the defaults.
pub fn parse_config(text: &str) -> Result<ScenarioSpec> {
    parse_config_onto(ScenarioSpec::default(), text)
}

pub fn load_config(path: &Path) -> Result<ScenarioSpec> {
    parse_config(&fs::read_to_string(path)?)
}

/// Canonical text: sections and keys sorted, every key present.
pub fn emit_config(spec: &ScenarioSpec) -> String {
    let mut fs = fields();
    fs.sort_by(|a, b| (a.section, a.key).cmp(&(b.section, b.key)));
    let mut out = String::new();
    let mut current = "";
    for f in &fs {
        if f.section != current {
            if !current.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", f.section));
            current = f.section;
        }
        out.push_str(&format!("{} = {}\n", f.key, (f.get)(spec)));
    }
    out
}

/// Hex SHA-256 of [`emit_config`].
pub fn config_hash(spec: &ScenarioSpec) -> String {
    Sha256::digest(emit_config(spec).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = parse_config("").unwrap();
        assert_eq!(s, ScenarioSpec::default());
        assert_eq!(s.blo.upper_lr, 1e-4);
        assert_eq!(s.blo.upper_epochs, 10);
        assert_eq!(s.blo.lower_epochs, 3);
        assert_eq!(s.blo.lower_lr, 1e-2);
        assert_eq!(s.blo.lambda_diag, 1e-2);
    }

    #[test]
    fn zero_lambda_is_rejected_with_line() {
        let e = parse_config("[blo]\n\nlambda_diag = 0\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("[run]\nseed = 1\nseed = 2\n", 3),
            ("[run]\nbogus = 1\n", 2),
            ("[nope]\n", 1),
            ("seed = 1\n", 1),
            ("[data]\ndim = many\n", 2),
            ("[run]\nuse_water4mu = yes\n", 2),
            ("[classifier]\nhidden = 8,x\n", 2),
            ("[run]\nmethod = sgd\n", 2),
            ("[blo]\nnot an assignment\n", 2),
        ] {
            match parse_config(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn same_key_in_different_sections_is_fine() {
        let s = parse_config("[classifier]\nepochs = 3\n[watermark]\nepochs = 4\n").unwrap();
        assert_eq!((s.classifier.epochs, s.watermark.epochs), (3, 4));
    }

    #[test]
    fn emit_round_trip_and_order_independence() {
        let text = "[blo]\nlambda_diag = 0.001\ncorrection_scale = unit\n[run]\nscenario = S2\nuse_water4mu = true\nseed = 7\n[classifier]\nhidden = 32,16\n";
        let a = parse_config(text).unwrap();
        let reordered = "[classifier]\nhidden = 32,16\n[run]\nseed = 7\nuse_water4mu = true\nscenario = S2\n[blo]\ncorrection_scale = unit\nlambda_diag = 0.001\n";
        let b = parse_config(reordered).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = parse_config(&emit_config(&a)).unwrap();
        assert_eq!(a, c);
        assert_eq!(config_hash(&a), config_hash(&c));
        assert_ne!(config_hash(&a), config_hash(&ScenarioSpec::default()));
    }

    #[test]
    fn every_key_is_emitted_once() {
        let text = emit_config(&ScenarioSpec::default());
        let keys = text.lines().filter(|l| l.contains(" = ")).count();
        assert_eq!(keys, fields().len());
        let mut names: Vec<_> = fields().iter().map(|f| (f.section, f.key)).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), fields().len());
    }

    #[test]
    fn set_key_overrides() {
        let mut s = ScenarioSpec::default();
        set_key(&mut s, "blo.lambda_diag", "0.5").unwrap();
        assert_eq!(s.blo.lambda_diag, 0.5);
        assert!(set_key(&mut s, "blo.nope", "1").is_err());
        assert!(set_key(&mut s, "lambda_diag", "1").is_err());
    }
}
