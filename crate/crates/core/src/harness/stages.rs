//! Single-step jobs behind the command-line subcommands. Each one reads the
//! artifacts of earlier steps from the output directory and writes its own.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::blo::{self, BloMode, EpochRecord};
use crate::data;
use crate::error::{Error, Result};
use crate::evalx::{self, MetricsReport, Scenario};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::emit_config;
use super::scenario::{
    load_codec, load_theta_o, measure, pretrain_codec, split_bundle, unlearn_step, Codec, ForgetMode, Prepared,
    ScenarioSpec, METRICS_CSV, RESOLVED_CONFIG,
};

pub const DATA_CSV: &str = "data.csv";
pub const THETA_O: &str = "theta_o.ckpt";
pub const CODEC: &str = "codec.ckpt";
pub const CODEC_SELECTED: &str = "codec_selected.ckpt";
pub const CODEC_W4MU: &str = "codec_w4mu.ckpt";
pub const THETA_U: &str = "theta_u.ckpt";
pub const RTE: &str = "rte_sec.txt";
pub const SELECTION_TRACE: &str = "selection_trace.csv";
pub const W4MU_TRACE: &str = "water4mu_trace.csv";

fn need(out: &Path, name: &str, command: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact {
            path: p.display().to_string(),
            hint: format!("build it with `water4mu {command} --config <ini> --out {}`", out.display()),
        })
    }
}

fn write_snapshot(spec: &ScenarioSpec, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), emit_config(spec))?;
    Ok(())
}

fn trace_csv(trace: &[EpochRecord<f64>]) -> String {
    let mut s = String::from("epoch,objective,ua,ra\n");
    for r in trace {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.objective, r.ua, r.ra));
    }
    s
}

/// Codec used as input by the step after `stage`.
fn codec_path(spec: &ScenarioSpec, out: &Path, stage: &str) -> Result<PathBuf> {
    let w4mu = spec.use_water4mu && stage == "unlearn";
    let sel = spec.use_message_selection && (stage == "water4mu" || stage == "unlearn");
    if w4mu {
        need(out, CODEC_W4MU, "water4mu")
    } else if sel {
        need(out, CODEC_SELECTED, "select-message")
    } else if let Some(p) = &spec.codec_checkpoint {
        Ok(p.clone())
    } else {
        need(out, CODEC, "train-wm")
    }
}

fn theta_o_path(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    match &spec.theta_o_checkpoint {
        Some(p) => Ok(p.clone()),
        None => need(out, THETA_O, "train"),
    }
}

/// Data and `θo` from disk, plus the codec feeding `stage` when one is needed.
fn load_prepared(spec: &ScenarioSpec, out: &Path, stage: &str, with_codec: bool) -> Result<Prepared> {
    spec.validate()?;
    let theta_o = load_theta_o(spec, &theta_o_path(spec, out)?)?;
    let raw = data::make_synthetic(&spec.data, spec.seed)?;
    let bundle = split_bundle(spec, &raw, &theta_o)?;
    let codec = if with_codec {
        Some(load_codec(spec, &codec_path(spec, out, stage)?)?)
    } else {
        None
    };
    Ok(Prepared {
        bundle,
        theta_o,
        codec,
        selection_trace: Vec::new(),
        water4mu_trace: Vec::new(),
    })
}

/// Writes the generated dataset; the worst-case split needs `θo`, so that
/// mode writes the rows without a forget set (`train` writes the split).
pub fn gen_data(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    write_snapshot(spec, out)?;
    let raw = data::make_synthetic::<f64>(&spec.data, spec.seed)?;
    let bundle = match spec.forget_mode {
        ForgetMode::WorstCase => raw,
        _ => split_bundle(spec, &raw, &crate::nets::init_params(&spec.classifier_arch(), spec.seed)?)?,
    };
    let p = out.join(DATA_CSV);
    data::save_csv(&bundle, &p)?;
    Ok(p)
}

/// Trains `θo` and writes it with the split dataset.
pub fn train(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    write_snapshot(spec, out)?;
    let raw = data::make_synthetic(&spec.data, spec.seed)?;
    let theta_o = crate::unlearn::train_original(&spec.classifier_arch(), &raw.train_set(), &spec.train_config())?;
    data::save_csv(&split_bundle(spec, &raw, &theta_o)?, &out.join(DATA_CSV))?;
    let p = out.join(THETA_O);
    save_checkpoint(
        &Checkpoint {
            sets: vec![theta_o],
            message: None,
        },
        &p,
    )?;
    Ok(p)
}

/// Pre-trains the codec on the train rows.
pub fn train_wm(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    write_snapshot(spec, out)?;
    let raw = data::make_synthetic(&spec.data, spec.seed)?;
    let codec = pretrain_codec(spec, &raw)?;
    let p = out.join(CODEC);
    save_checkpoint(&codec.to_checkpoint(), &p)?;
    Ok(p)
}

/// Picks the message by bi-level descent on its logits, starting at zero.
pub fn select_message(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    let prep = load_prepared(spec, out, "select-message", true)?;
    write_snapshot(spec, out)?;
    let codec = prep.codec.clone().expect("loaded");
    let sel = blo::message_select(
        &codec.psi,
        &codec.phi,
        &prep.theta_o,
        &prep.splits(),
        &vec![0.0; spec.watermark.message_len],
        &spec.blo_config(BloMode::MessageSelection),
    )?;
    fs::write(out.join(SELECTION_TRACE), trace_csv(&sel.trace))?;
    let p = out.join(CODEC_SELECTED);
    save_checkpoint(
        &Codec {
            message: sel.message,
            ..codec
        }
        .to_checkpoint(),
        &p,
    )?;
    Ok(p)
}

/// Updates the codec with Water4MU.
pub fn water4mu(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    let prep = load_prepared(spec, out, "water4mu", true)?;
    write_snapshot(spec, out)?;
    let codec = prep.codec.clone().expect("loaded");
    let res = blo::water4mu_train(
        &prep.theta_o,
        &prep.splits(),
        &codec.psi,
        &codec.phi,
        &codec.message,
        &spec.blo_config(BloMode::NetworkTraining),
    )?;
    fs::write(out.join(W4MU_TRACE), trace_csv(&res.trace))?;
    let p = out.join(CODEC_W4MU);
    save_checkpoint(
        &Codec {
            psi: res.psi,
            phi: res.phi,
            message: codec.message,
        }
        .to_checkpoint(),
        &p,
    )?;
    Ok(p)
}

/// Runs the configured method and records its wall-clock time.
pub fn unlearn(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    let prep = load_prepared(spec, out, "unlearn", spec.scenario == Scenario::S2)?;
    write_snapshot(spec, out)?;
    let (mut theta_u, elapsed) = unlearn_step(spec, &prep)?;
    theta_u.name = "theta_u".into();
    fs::write(out.join(RTE), format!("{:?}\n", elapsed.as_secs_f64()))?;
    let p = out.join(THETA_U);
    save_checkpoint(
        &Checkpoint {
            sets: vec![theta_u],
            message: None,
        },
        &p,
    )?;
    Ok(p)
}

/// Scores `θu` and writes the metrics CSV.
pub fn eval(spec: &ScenarioSpec, out: &Path) -> Result<MetricsReport> {
    let prep = load_prepared(spec, out, "unlearn", spec.scenario != Scenario::S0)?;
    let theta_u = load_checkpoint(&need(out, THETA_U, "unlearn")?)?
        .sets
        .into_iter()
        .next()
        .ok_or_else(|| Error::Format("theta_u checkpoint holds no parameter set".into()))?;
    if !theta_u.same_layout(&prep.theta_o) {
        return Err(Error::Validation("theta_u does not match theta_o".into()));
    }
    let rte_path = need(out, RTE, "unlearn")?;
    let rte: f64 = fs::read_to_string(&rte_path)?
        .trim()
        .parse()
        .map_err(|_| Error::Parse {
            line: 1,
            msg: format!("{} is not a number", rte_path.display()),
        })?;
    write_snapshot(spec, out)?;
    let report = measure(spec, &prep, &theta_u, Duration::from_secs_f64(rte.max(0.0)))?;
    fs::write(out.join(METRICS_CSV), evalx::reports_to_csv(std::slice::from_ref(&report)))?;
    Ok(report)
}
