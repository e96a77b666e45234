//! Scenario pipeline: data, original model, split, codec, optional
//! Water4MU / message selection, unlearning and evaluation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::blo::{self, BloMode, EpochRecord, UnlearnSplits};
use crate::data::{self, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evalx::{self, build_report, MetricValues, MetricsReport, Scenario};
use crate::nets::{encode, init_params, ArchSpec};
use crate::unlearn::{apply_method, train_original, Method, MethodSettings, TrainConfig};
use crate::watermark::{self, MessageMode, WmTrainConfig, PSNR_CAP_DB};
use crate::{BloConfig, DatasetBundle, LabeledSet, MuConfig, ParamSet, WatermarkMessage};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{config_hash, emit_config};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ForgetMode {
    #[default]
    Random,
    Class,
    WorstCase,
}

impl ForgetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ForgetMode::Random => "random",
            ForgetMode::Class => "class",
            ForgetMode::WorstCase => "worst_case",
        }
    }
}

impl fmt::Display for ForgetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ForgetMode::Random),
            "class" => Ok(ForgetMode::Class),
            "worst_case" => Ok(ForgetMode::WorstCase),
            _ => Err(Error::Validation(format!("unknown forget mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            epochs: 200,
            lr: 0.1,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkSettings {
    pub message_len: usize,
    pub strength: f64,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rec_weight: f64,
    pub dec_weight: f64,
    pub message_mode: MessageMode,
}

impl Default for WatermarkSettings {
    fn default() -> Self {
        let t = WmTrainConfig::<f64>::default();
        Self {
            message_len: 10,
            strength: 0.1,
            enc_hidden: vec![64],
            dec_hidden: vec![64],
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            rec_weight: t.rec_weight,
            dec_weight: t.dec_weight,
            message_mode: t.message_mode,
        }
    }
}

/// Budgets of the unlearning methods; Retrain reuses the classifier budget.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnSettings {
    pub batch_size: usize,
    pub ga_epochs: usize,
    pub ga_lr: f64,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub graddiff_epochs: usize,
    pub graddiff_lr: f64,
    pub sparse_epochs: usize,
    pub sparse_lr: f64,
    pub sparse_gamma: f64,
    pub iu_alpha: f64,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        let (ga, ft, gd, sp, iu) = (
            MuConfig::ga(),
            MuConfig::ft(),
            MuConfig::graddiff(),
            MuConfig::sparse(),
            MuConfig::iu(),
        );
        Self {
            batch_size: gd.batch_size,
            ga_epochs: ga.epochs,
            ga_lr: ga.lr,
            ft_epochs: ft.epochs,
            ft_lr: ft.lr,
            graddiff_epochs: gd.epochs,
            graddiff_lr: gd.lr,
            sparse_epochs: sp.epochs,
            sparse_lr: sp.lr,
            sparse_gamma: sp.sparse_gamma,
            iu_alpha: iu.iu_alpha,
        }
    }
}

/// Everything one run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub forget_mode: ForgetMode,
    pub forget_ratio: f64,
    pub forget_class: usize,
    pub method: Method,
    pub use_water4mu: bool,
    pub use_message_selection: bool,
    /// S2 only: evaluate on watermarked forget/retain/test sets.
    pub watermarked_eval: bool,
    pub seed: u64,
    /// Load `θo` from here instead of training it.
    pub theta_o_checkpoint: Option<PathBuf>,
    /// Load the pre-trained codec from here instead of training it.
    pub codec_checkpoint: Option<PathBuf>,
    pub data: SyntheticConfig,
    pub classifier: ClassifierSettings,
    pub watermark: WatermarkSettings,
    pub unlearn: UnlearnSettings,
    pub blo: BloConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::S0,
            forget_mode: ForgetMode::Random,
            forget_ratio: 0.1,
            forget_class: 0,
            method: Method::GradDiff,
            use_water4mu: false,
            use_message_selection: false,
            watermarked_eval: false,
            seed: 0,
            theta_o_checkpoint: None,
            codec_checkpoint: None,
            data: SyntheticConfig::default(),
            classifier: ClassifierSettings::default(),
            watermark: WatermarkSettings::default(),
            unlearn: UnlearnSettings::default(),
            blo: BloConfig::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.data;
        if c.dim < 4 || c.classes < 2 || c.n_train == 0 || c.n_test == 0 {
            return Err(Error::Validation("data needs dim >= 4, classes >= 2, non-empty train/test".into()));
        }
        let ratio_ok = match self.forget_mode {
            ForgetMode::Random => (0.0..1.0).contains(&self.forget_ratio),
            ForgetMode::WorstCase => (0.0..=1.0).contains(&self.forget_ratio),
            ForgetMode::Class => true,
        };
        if !ratio_ok {
            return Err(Error::Validation(format!(
                "forget_ratio {} out of range for {}",
                self.forget_ratio, self.forget_mode
            )));
        }
        if self.forget_mode == ForgetMode::Class && self.forget_class >= c.classes {
            return Err(Error::Validation(format!("forget_class {} >= classes {}", self.forget_class, c.classes)));
        }
        if self.watermark.message_len == 0 || !(self.watermark.strength >= 0.0) {
            return Err(Error::Validation("watermark needs message_len >= 1 and strength >= 0".into()));
        }
        if self.use_message_selection && !self.use_water4mu && self.scenario == Scenario::S0 && self.codec_checkpoint.is_none() {
            return Err(Error::Validation(
                "message selection needs use_water4mu, a watermarked scenario or a codec_checkpoint".into(),
            ));
        }
        self.wm_train_config().validate()?;
        for m in Method::ALL {
            self.method_settings().mu(m).map(|c| c.validate()).transpose()?;
        }
        self.blo_config(BloMode::NetworkTraining).validate()
    }

    /// Whether a codec has to be trained for this run.
    pub fn needs_codec(&self) -> bool {
        self.scenario != Scenario::S0 || self.use_water4mu || self.use_message_selection
    }

    pub fn classifier_arch(&self) -> ArchSpec<f64> {
        ArchSpec::classifier(self.data.dim, self.classifier.hidden.clone(), self.data.classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.classifier.epochs,
            lr: self.classifier.lr,
            batch_size: self.classifier.batch_size,
            seed: self.seed,
        }
    }

    pub fn wm_train_config(&self) -> WmTrainConfig {
        let w = &self.watermark;
        WmTrainConfig {
            epochs: w.epochs,
            lr: w.lr,
            batch_size: w.batch_size,
            rec_weight: w.rec_weight,
            dec_weight: w.dec_weight,
            message_mode: w.message_mode,
            seed: self.seed,
        }
    }

    pub fn method_settings(&self) -> MethodSettings {
        let u = &self.unlearn;
        let with = |base: MuConfig, epochs: usize, lr: f64| MuConfig {
            epochs,
            lr,
            batch_size: u.batch_size,
            seed: self.seed,
            sparse_gamma: u.sparse_gamma,
            iu_alpha: u.iu_alpha,
            ..base
        };
        MethodSettings {
            retrain: self.train_config(),
            ga: with(MuConfig::ga(), u.ga_epochs, u.ga_lr),
            ft: with(MuConfig::ft(), u.ft_epochs, u.ft_lr),
            graddiff: with(MuConfig::graddiff(), u.graddiff_epochs, u.graddiff_lr),
            sparse: with(MuConfig::sparse(), u.sparse_epochs, u.sparse_lr),
            iu: with(MuConfig::iu(), 0, 0.0),
        }
    }

    pub fn blo_config(&self, mode: BloMode) -> BloConfig {
        BloConfig {
            mode,
            rec_weight: self.watermark.rec_weight,
            dec_weight: self.watermark.dec_weight,
            seed: self.seed,
            ..self.blo.clone()
        }
    }

    pub fn run_id(&self) -> String {
        let mut id = format!("{}-{}-{}-s{}", self.scenario, self.method, self.forget_mode, self.seed);
        if self.use_message_selection {
            id.push_str("-msel");
        }
        if self.use_water4mu {
            id.push_str(&format!("-w4mu-lam{:e}", self.blo.lambda_diag));
        }
        if self.watermarked_eval && self.scenario == Scenario::S2 {
            id.push_str("-wev");
        }
        id
    }
}

trait MuOf {
    fn mu(&self, m: Method) -> Option<&MuConfig>;
}

impl MuOf for MethodSettings {
    fn mu(&self, m: Method) -> Option<&MuConfig> {
        match m {
            Method::Retrain => None,
            Method::Ga => Some(&self.ga),
            Method::Ft => Some(&self.ft),
            Method::GradDiff => Some(&self.graddiff),
            Method::Sparse => Some(&self.sparse),
            Method::Iu => Some(&self.iu),
        }
    }
}

/// Encoder, decoder and the message they embed.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub psi: ParamSet,
    pub phi: ParamSet,
    pub message: WatermarkMessage,
}

impl Codec {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            sets: vec![self.psi.clone(), self.phi.clone()],
            message: Some(self.message.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::Format(format!("codec checkpoint has no {what}"));
        Ok(Self {
            psi: ck.get("enc").ok_or_else(|| missing("encoder"))?.clone(),
            phi: ck.get("dec").ok_or_else(|| missing("decoder"))?.clone(),
            message: ck.message.clone().ok_or_else(|| missing("message"))?,
        })
    }

    pub fn embed(&self, set: &LabeledSet) -> Result<LabeledSet> {
        if set.is_empty() {
            return Ok(set.clone());
        }
        Ok(LabeledSet {
            features: encode(&self.psi, &set.x()?, &self.message.as_reals())?.into_data(),
            dim: set.dim,
            labels: set.labels.clone(),
        })
    }
}

/// Artifacts shared by every method evaluated on the same preparation.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Generated data with the forget/retain split applied.
    pub bundle: DatasetBundle,
    pub theta_o: ParamSet,
    pub codec: Option<Codec>,
    pub selection_trace: Vec<EpochRecord<f64>>,
    pub water4mu_trace: Vec<EpochRecord<f64>>,
}

impl Prepared {
    pub fn splits(&self) -> UnlearnSplits<f64> {
        UnlearnSplits {
            forget: self.bundle.forget_set(),
            retain: self.bundle.retain_set(),
        }
    }
}

pub fn split_bundle(spec: &ScenarioSpec, bundle: &DatasetBundle, theta_o: &ParamSet) -> Result<DatasetBundle> {
    if spec.forget_mode != ForgetMode::Class && spec.forget_ratio == 0.0 {
        return Ok(bundle.with_forget(Vec::new()));
    }
    match spec.forget_mode {
        ForgetMode::Random => data::split_random(bundle, spec.forget_ratio, spec.seed),
        ForgetMode::Class => data::split_class(bundle, spec.forget_class),
        ForgetMode::WorstCase => data::split_worst_case(bundle, theta_o, spec.forget_ratio),
    }
}

/// Codec trained on the train rows with the run's seed message.
pub fn pretrain_codec(spec: &ScenarioSpec, bundle: &DatasetBundle) -> Result<Codec> {
    let w = &spec.watermark;
    let mut psi = init_params(
        &ArchSpec::encoder(spec.data.dim, w.enc_hidden.clone(), w.message_len, w.strength),
        spec.seed,
    )?;
    psi.name = "enc".into();
    let mut phi = init_params(&ArchSpec::decoder(spec.data.dim, w.dec_hidden.clone(), w.message_len), spec.seed)?;
    phi.name = "dec".into();
    let message = WatermarkMessage::random(w.message_len, spec.seed)?;
    let x = bundle.train_set().x()?;
    let trained = watermark::train_watermark(&psi, &phi, &x, &message, &spec.wm_train_config())?;
    Ok(Codec {
        psi: trained.psi,
        phi: trained.phi,
        message,
    })
}

fn missing(path: &Path, hint: String) -> Error {
    Error::MissingArtifact {
        path: path.display().to_string(),
        hint,
    }
}

/// Loads `θo` and checks it against the configured classifier.
pub fn load_theta_o(spec: &ScenarioSpec, path: &Path) -> Result<ParamSet> {
    if !path.exists() {
        return Err(missing(path, format!("build it with `water4mu train --config <ini> --out {}`", dir_of(path))));
    }
    let ck = load_checkpoint(path)?;
    let theta = ck
        .sets
        .into_iter()
        .next()
        .ok_or_else(|| Error::Format("checkpoint holds no parameter set".into()))?;
    if !theta.same_layout(&init_params(&spec.classifier_arch(), 0)?) {
        return Err(Error::Validation(format!("{} does not match the configured classifier", path.display())));
    }
    Ok(theta)
}

/// Loads a codec and checks it against the configured watermark settings.
pub fn load_codec(spec: &ScenarioSpec, path: &Path) -> Result<Codec> {
    if !path.exists() {
        return Err(missing(path, format!("build it with `water4mu train-wm --config <ini> --out {}`", dir_of(path))));
    }
    let codec = Codec::from_checkpoint(&load_checkpoint(path)?)?;
    let w = &spec.watermark;
    if codec.psi.feature_dim() != spec.data.dim || codec.message.len() != w.message_len || codec.phi.message_len() != w.message_len {
        return Err(Error::Validation(format!("{} does not match the configured codec", path.display())));
    }
    Ok(codec)
}

fn dir_of(path: &Path) -> String {
    path.parent()
        .map(|p| p.display().to_string())
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| ".".into())
}

/// Data, original model, split and the pre-trained codec (with message
/// selection applied when requested), but no Water4MU codec update.
pub fn prepare_base(spec: &ScenarioSpec) -> Result<Prepared> {
    spec.validate()?;
    let raw = data::make_synthetic(&spec.data, spec.seed)?;
    let theta_o = match &spec.theta_o_checkpoint {
        Some(p) => load_theta_o(spec, p)?,
        None => train_original(&spec.classifier_arch(), &raw.train_set(), &spec.train_config())?,
    };
    let bundle = split_bundle(spec, &raw, &theta_o)?;
    let mut prep = Prepared {
        bundle,
        theta_o,
        codec: None,
        selection_trace: Vec::new(),
        water4mu_trace: Vec::new(),
    };
    if spec.needs_codec() {
        let mut codec = match &spec.codec_checkpoint {
            Some(p) => load_codec(spec, p)?,
            None => pretrain_codec(spec, &prep.bundle)?,
        };
        if spec.use_message_selection {
            let z0 = vec![0.0; spec.watermark.message_len];
            let sel = blo::message_select(
                &codec.psi,
                &codec.phi,
                &prep.theta_o,
                &prep.splits(),
                &z0,
                &spec.blo_config(BloMode::MessageSelection),
            )?;
            codec.message = sel.message;
            prep.selection_trace = sel.trace;
        }
        prep.codec = Some(codec);
    }
    Ok(prep)
}

/// Applies the Water4MU codec update to a base preparation.
pub fn attach_water4mu(spec: &ScenarioSpec, base: &Prepared) -> Result<Prepared> {
    let codec = base
        .codec
        .as_ref()
        .ok_or_else(|| Error::Contract("Water4MU needs a pre-trained codec".into()))?;
    let res = blo::water4mu_train(
        &base.theta_o,
        &base.splits(),
        &codec.psi,
        &codec.phi,
        &codec.message,
        &spec.blo_config(BloMode::NetworkTraining),
    )?;
    Ok(Prepared {
        codec: Some(Codec {
            psi: res.psi,
            phi: res.phi,
            message: codec.message.clone(),
        }),
        water4mu_trace: res.trace,
        ..base.clone()
    })
}

pub fn prepare(spec: &ScenarioSpec) -> Result<Prepared> {
    let base = prepare_base(spec)?;
    if spec.use_water4mu {
        attach_water4mu(spec, &base)
    } else {
        Ok(base)
    }
}

/// Report plus the unlearned model.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: MetricsReport,
    pub theta_u: ParamSet,
}

fn codec_of<'a>(spec: &ScenarioSpec, prep: &'a Prepared) -> Result<&'a Codec> {
    prep.codec
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("scenario {} needs a codec", spec.scenario)))
}

/// Runs `spec.method` from `θo`, on watermarked forget/retain sets under S2.
/// Returns the unlearned model and the wall-clock time of the method call.
pub fn unlearn_step(spec: &ScenarioSpec, prep: &Prepared) -> Result<(ParamSet, Duration)> {
    let (df, dr) = (prep.bundle.forget_set(), prep.bundle.retain_set());
    let (uf, ur) = if spec.scenario == Scenario::S2 {
        let c = codec_of(spec, prep)?;
        (c.embed(&df)?, c.embed(&dr)?)
    } else {
        (df, dr)
    };
    let started = Instant::now();
    let theta_u = apply_method(
        spec.method,
        &spec.classifier_arch(),
        &prep.theta_o,
        &uf,
        &ur,
        &spec.method_settings(),
    )?;
    let elapsed = started.elapsed();
    if !theta_u.is_finite() {
        return Err(Error::numeric(format!("{} parameters", spec.method), 0));
    }
    Ok((theta_u, elapsed))
}

/// Metrics of `theta_u`; S1 (and S2 with `watermarked_eval`) scores the
/// watermarked forget/retain/test sets.
pub fn measure(spec: &ScenarioSpec, prep: &Prepared, theta_u: &ParamSet, elapsed: Duration) -> Result<MetricsReport> {
    let (df, dr, dt) = (
        prep.bundle.forget_set(),
        prep.bundle.retain_set(),
        prep.bundle.test_set(),
    );
    let watermarked_eval = spec.scenario == Scenario::S1 || (spec.scenario == Scenario::S2 && spec.watermarked_eval);
    let (ef, er, et) = if watermarked_eval {
        let c = codec_of(spec, prep)?;
        (c.embed(&df)?, c.embed(&dr)?, c.embed(&dt)?)
    } else {
        (df, dr, dt)
    };
    let (ua, mia) = if ef.is_empty() {
        (0.0, 0.0)
    } else {
        (
            evalx::ua(theta_u, &ef)?,
            evalx::mia_efficacy(theta_u, &ef, &er, &et, spec.seed)?,
        )
    };
    let (ber, psnr_db) = match &prep.codec {
        Some(c) if spec.scenario != Scenario::S0 => {
            let x = prep.bundle.test_set().x()?;
            let xw = encode(&c.psi, &x, &c.message.as_reals())?;
            (
                watermark::mean_ber(&c.psi, &c.phi, &x, &c.message)?,
                watermark::psnr(&x, &xw)?,
            )
        }
        _ => (0.0, PSNR_CAP_DB),
    };
    let values = MetricValues {
        ua,
        mia,
        ra: evalx::accuracy(theta_u, &er)?,
        ta: evalx::accuracy(theta_u, &et)?,
        ber,
        psnr_db,
    };
    build_report(
        &spec.run_id(),
        spec.scenario,
        spec.method.as_str(),
        spec.seed,
        &values,
        elapsed,
    )
}

/// Unlearns and measures.
pub fn evaluate(spec: &ScenarioSpec, prep: &Prepared) -> Result<Outcome> {
    let (theta_u, elapsed) = unlearn_step(spec, prep)?;
    let report = measure(spec, prep, &theta_u, elapsed)?;
    Ok(Outcome { report, theta_u })
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<MetricsReport> {
    Ok(evaluate(spec, &prepare(spec)?)?.report)
}

/// A finished run and where its artifacts went.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub spec: ScenarioSpec,
    pub config_hash: String,
    pub report: MetricsReport,
    pub artifacts: Vec<PathBuf>,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.ini";
pub const METRICS_CSV: &str = "metrics.csv";

/// Runs a scenario and writes the resolved config, the metrics CSV and the
/// model checkpoints into `out`.
pub fn run_scenario_in(spec: &ScenarioSpec, out: &Path) -> Result<RunRecord> {
    let prep = prepare(spec)?;
    let outcome = evaluate(spec, &prep)?;
    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    let mut write = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body)?;
        artifacts.push(p);
        Ok(())
    };
    write(RESOLVED_CONFIG, &emit_config(spec))?;
    write(METRICS_CSV, &evalx::reports_to_csv(std::slice::from_ref(&outcome.report)))?;
    let theta_o = Checkpoint {
        sets: vec![prep.theta_o.clone()],
        message: None,
    };
    let mut theta_u = outcome.theta_u.clone();
    theta_u.name = "theta_u".into();
    let theta_u = Checkpoint {
        sets: vec![theta_u],
        message: None,
    };
    let mut cks = vec![("theta_o.ckpt", theta_o), ("theta_u.ckpt", theta_u)];
    if let Some(c) = &prep.codec {
        cks.push(("codec.ckpt", c.to_checkpoint()));
    }
    for (name, ck) in cks {
        let p = out.join(name);
        save_checkpoint(&ck, &p)?;
        artifacts.push(p);
    }
    Ok(RunRecord {
        spec: spec.clone(),
        config_hash: config_hash(spec),
        report: outcome.report,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioSpec {
        let mut s = ScenarioSpec::default();
        s.data = SyntheticConfig {
            n_train: 64,
            n_test: 32,
            dim: 8,
            classes: 2,
            noise_sigma: 0.2,
        };
        s.classifier.hidden = vec![8];
        s.classifier.epochs = 5;
        s.watermark.enc_hidden = vec![8];
        s.watermark.dec_hidden = vec![8];
        s.watermark.epochs = 3;
        s.watermark.message_len = 4;
        s.forget_ratio = 0.25;
        s.blo.upper_epochs = 1;
        s
    }

    #[test]
    fn s0_skips_codec() {
        let spec = tiny();
        assert!(!spec.needs_codec());
        let prep = prepare(&spec).unwrap();
        assert!(prep.codec.is_none());
        let r = evaluate(&spec, &prep).unwrap().report;
        assert_eq!((r.ber, r.psnr_db), (0.0, PSNR_CAP_DB));
        assert!(r.rte_sec > 0.0);
    }

    #[test]
    fn s2_without_codec_is_contract_error() {
        let spec = tiny();
        let prep = prepare(&spec).unwrap();
        let s2 = ScenarioSpec {
            scenario: Scenario::S2,
            ..spec
        };
        assert!(matches!(evaluate(&s2, &prep), Err(Error::Contract(_))));
    }

    #[test]
    fn run_ids_encode_flags() {
        let mut s = tiny();
        s.scenario = Scenario::S2;
        s.use_water4mu = true;
        s.watermarked_eval = true;
        assert_eq!(s.run_id(), "S2-graddiff-random-s0-w4mu-lam1e-2-wev");
    }

    #[test]
    fn invalid_specs() {
        let mut s = tiny();
        s.forget_ratio = 1.0;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.forget_mode = ForgetMode::Class;
        s.forget_class = 2;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.blo.lambda_diag = 0.0;
        assert!(s.validate().is_err());
    }
}
