//! Unlearning metrics (UA, MIA-efficacy, RA, TA) and the metrics report row.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;

use crate::data::LabeledSet;
use crate::diffcore::row_cross_entropy;
use crate::error::{Error, Result};
use crate::nets::{argmax_rows, classify, ParamSet};
use crate::real::Real;
use crate::rng;

/// Percentage of rows whose arg-max prediction equals the label.
pub fn accuracy<T: Real>(theta: &ParamSet<T>, set: &LabeledSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let pred = argmax_rows(&classify(theta, &set.x()?)?);
    let hits = pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / set.len() as f64)
}

/// Unlearning accuracy: `100 - accuracy` on the forget set.
pub fn ua<T: Real>(theta: &ParamSet<T>, df: &LabeledSet<T>) -> Result<f64> {
    if df.is_empty() {
        return Err(Error::Validation("UA needs a non-empty forget set".into()));
    }
    Ok(100.0 - accuracy(theta, df)?)
}

pub fn per_sample_loss<T: Real>(theta: &ParamSet<T>, set: &LabeledSet<T>) -> Result<Vec<T>> {
    Ok(row_cross_entropy(&classify(theta, &set.x()?)?, &set.labels))
}

/// Loss threshold maximising balanced accuracy of "member iff loss ≤ τ".
/// Candidates are the pooled loss values; ties resolve to the smaller τ.
pub fn fit_threshold<T: Real>(members: &[T], nonmembers: &[T]) -> T {
    let mut pooled: Vec<(T, bool)> = members
        .iter()
        .map(|&v| (v, true))
        .chain(nonmembers.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite loss"));
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    let (mut m_le, mut n_le) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, pooled[0].0);
    let mut i = 0;
    while i < pooled.len() {
        let tau = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == tau {
            if pooled[i].1 {
                m_le += 1;
            } else {
                n_le += 1;
            }
            i += 1;
        }
        let bal = 0.5 * (m_le as f64 / nm + (nn - n_le as f64) / nn);
        if bal > best.0 {
            best = (bal, tau);
        }
    }
    best.1
}

/// Percentage of forget losses the fitted attacker calls non-members.
pub fn mia_from_losses<T: Real>(members: &[T], nonmembers: &[T], forget: &[T]) -> f64 {
    let tau = fit_threshold(members, nonmembers);
    let out = forget.iter().filter(|&&l| l > tau).count();
    100.0 * out as f64 / forget.len() as f64
}

/// Loss-threshold membership attack: fit on a retain sample (members) versus
/// the test set (non-members), report the forget rows judged non-members.
pub fn mia_efficacy<T: Real>(
    theta: &ParamSet<T>,
    df: &LabeledSet<T>,
    dr: &LabeledSet<T>,
    dtest: &LabeledSet<T>,
    attack_seed: u64,
) -> Result<f64> {
    if df.is_empty() || dr.is_empty() || dtest.is_empty() {
        return Err(Error::Validation("MIA needs non-empty forget, retain and test sets".into()));
    }
    let k = dr.len().min(dtest.len());
    let mut pos: Vec<usize> = (0..dr.len()).collect();
    pos.shuffle(&mut rng::stream(attack_seed, rng::tags::ATTACK, 0));
    pos.truncate(k);
    let (xm, ym) = dr.batch(&pos)?;
    let members = row_cross_entropy(&classify(theta, &xm)?, &ym);
    let nonmembers = per_sample_loss(theta, dtest)?;
    let forget = per_sample_loss(theta, df)?;
    Ok(mia_from_losses(&members, &nonmembers, &forget))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    /// Unwatermarked unlearning, unwatermarked evaluation.
    S0,
    /// Unwatermarked unlearning, watermarked evaluation.
    S1,
    /// Watermarked unlearning, unwatermarked evaluation.
    S2,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::S0 => "S0",
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S0" | "s0" => Ok(Scenario::S0),
            "S1" | "s1" => Ok(Scenario::S1),
            "S2" | "s2" => Ok(Scenario::S2),
            _ => Err(Error::Validation(format!("unknown scenario {s:?}"))),
        }
    }
}

pub const REPORT_HEADER: &str = "run_id,scenario,method,seed,ua,mia,ra,ta,ber,psnr_db,rte_sec";

/// One evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub run_id: String,
    pub scenario: Scenario,
    pub method: String,
    pub seed: u64,
    pub ua: f64,
    pub mia: f64,
    pub ra: f64,
    pub ta: f64,
    pub ber: f64,
    pub psnr_db: f64,
    pub rte_sec: f64,
}

/// Metric values gathered for [`build_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetricValues {
    pub ua: f64,
    pub mia: f64,
    pub ra: f64,
    pub ta: f64,
    pub ber: f64,
    pub psnr_db: f64,
}

/// Assembles and range-checks a report; `elapsed` is the wall-clock time of
/// the method call.
pub fn build_report(
    run_id: &str,
    scenario: Scenario,
    method: &str,
    seed: u64,
    v: &MetricValues,
    elapsed: Duration,
) -> Result<MetricsReport> {
    if run_id.contains([',', '\n']) || method.contains([',', '\n']) {
        return Err(Error::Contract("run_id and method may not contain ',' or newlines".into()));
    }
    for (name, p) in [("ua", v.ua), ("mia", v.mia), ("ra", v.ra), ("ta", v.ta)] {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::Contract(format!("{name} = {p} outside [0, 100]")));
        }
    }
    if !(0.0..=1.0).contains(&v.ber) || !v.psnr_db.is_finite() {
        return Err(Error::Contract(format!(
            "ber = {} / psnr = {} out of range",
            v.ber, v.psnr_db
        )));
    }
    Ok(MetricsReport {
        run_id: run_id.to_string(),
        scenario,
        method: method.to_string(),
        seed,
        ua: v.ua,
        mia: v.mia,
        ra: v.ra,
        ta: v.ta,
        ber: v.ber,
        psnr_db: v.psnr_db,
        // 1 ns floor keeps the field strictly positive on coarse clocks.
        rte_sec: elapsed.as_secs_f64().max(1e-9),
    })
}

impl MetricsReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.scenario,
            self.method,
            self.seed,
            self.ua,
            self.mia,
            self.ra,
            self.ta,
            self.ber,
            self.psnr_db,
            self.rte_sec
        )
    }

    /// The unlearning metric columns `ua,mia,ra,ta` as written to CSV.
    pub fn metric_fields(&self) -> String {
        format!("{},{},{},{}", self.ua, self.mia, self.ra, self.ta)
    }

    /// Every column except the wall-clock `rte_sec`.
    pub fn deterministic_fields(&self) -> String {
        let row = self.to_csv_row();
        row[..row.rfind(',').expect("csv row")].to_string()
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let perr = |msg: String| Error::Parse { line: 1, msg };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            return Err(perr(format!("expected 11 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| perr(format!("bad number {:?}", f[i])))
        };
        Ok(Self {
            run_id: f[0].to_string(),
            scenario: f[1].parse()?,
            method: f[2].to_string(),
            seed: f[3]
                .parse()
                .map_err(|_| perr(format!("bad seed {:?}", f[3])))?,
            ua: num(4)?,
            mia: num(5)?,
            ra: num(6)?,
            ta: num(7)?,
            ber: num(8)?,
            psnr_db: num(9)?,
            rte_sec: num(10)?,
        })
    }
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn reports_from_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: "missing metrics header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            MetricsReport::from_csv_row(l).map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse { line: i + 2, msg },
                other => other,
            })
        })
        .collect()
}
