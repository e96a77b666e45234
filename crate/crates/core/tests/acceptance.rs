//! Acceptance suite. Every criterion prints one `criterion N [PASS|FAIL]`
//! line with the measured numbers, then asserts.
//!
//! Run with `cargo test -p water4mu --test acceptance -- --nocapture` to see
//! the lines.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use water4mu::blo::{
    implicit_hypergradient, mixed_hvp, objective_at_message, quad_oracle_hypergrad, BilevelProblem, BloMode,
    CorrectionScale, QuadBilevel, UnlearnSplits, WatermarkBilevel,
};
use water4mu::data::{make_synthetic, SyntheticConfig};
use water4mu::diffcore::Graph;
use water4mu::evalx::{reports_from_csv, MetricsReport, Scenario};
use water4mu::harness::checkpoint::{decode_arrays, encode_arrays, load_checkpoint, save_checkpoint, Checkpoint};
use water4mu::harness::config::load_config;
use water4mu::harness::scenario::{
    attach_water4mu, evaluate, pretrain_codec, prepare_base, run_scenario_in, split_bundle, ForgetMode, Prepared,
    ScenarioSpec, METRICS_CSV,
};
use water4mu::harness::sweep::sweep_lambda;
use water4mu::nets::{classify, classify_graph, init_params, ArchSpec};
use water4mu::unlearn::{mu_loss_grad, Method};
use water4mu::watermark::{mean_ber, psnr, train_watermark, wm_loss_grad, MessageMode, WmTrainConfig, WmWeights};
use water4mu::{LabeledSet, ParamSet, Tensor, WatermarkMessage};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];
const LAMBDAS: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn desk_spec(seed: u64) -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.ini");
    let mut s = load_config(&path).expect("desk config");
    s.seed = seed;
    s
}

fn with(base: &ScenarioSpec, f: impl FnOnce(&mut ScenarioSpec)) -> ScenarioSpec {
    let mut s = base.clone();
    f(&mut s);
    s
}

fn par_map<T: Send, R: Send>(items: Vec<T>, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let handles: Vec<_> = items.into_iter().map(|it| s.spawn(|| f(it))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

// ---------------------------------------------------------------------------
// Desk fixture: per seed, θo + pre-trained codec, and the Water4MU codec.

struct DeskSeed {
    spec: ScenarioSpec,
    base: Prepared,
    w4mu: Prepared,
}

fn desk() -> &'static [DeskSeed] {
    static DESK: OnceLock<Vec<DeskSeed>> = OnceLock::new();
    DESK.get_or_init(|| {
        par_map(SEEDS.to_vec(), |seed| {
            let spec = with(&desk_spec(seed), |s| {
                s.scenario = Scenario::S2;
                s.use_water4mu = true;
            });
            let base = prepare_base(&spec).unwrap();
            let w4mu = attach_water4mu(&spec, &base).unwrap();
            DeskSeed { spec, base, w4mu }
        })
    })
}

struct Cell {
    ua: f64,
    mia: f64,
    ra: f64,
    ta: f64,
}

fn cell(reports: &[MetricsReport]) -> Cell {
    let m = |f: fn(&MetricsReport) -> f64| median(reports.iter().map(f).collect());
    Cell {
        ua: m(|r| r.ua),
        mia: m(|r| r.mia),
        ra: m(|r| r.ra),
        ta: m(|r| r.ta),
    }
}

fn s0_spec(d: &DeskSeed, method: Method) -> ScenarioSpec {
    with(&d.spec, |s| {
        s.scenario = Scenario::S0;
        s.use_water4mu = false;
        s.method = method;
    })
}

fn s2_spec(d: &DeskSeed, method: Method, watermarked_eval: bool) -> ScenarioSpec {
    with(&d.spec, |s| {
        s.method = method;
        s.watermarked_eval = watermarked_eval;
    })
}

const TABLE1_METHODS: [Method; 3] = [Method::GradDiff, Method::Ga, Method::Ft];

/// S0, S2+Water4MU and S2+Water4MU with watermarked evaluation, per method.
fn table1() -> &'static [(Method, Vec<MetricsReport>, Vec<MetricsReport>, Vec<MetricsReport>)] {
    static T: OnceLock<Vec<(Method, Vec<MetricsReport>, Vec<MetricsReport>, Vec<MetricsReport>)>> = OnceLock::new();
    T.get_or_init(|| {
        let runs = par_map(desk().iter().collect(), |d| {
            TABLE1_METHODS
                .iter()
                .map(|&m| {
                    (
                        evaluate(&s0_spec(d, m), &d.base).unwrap().report,
                        evaluate(&s2_spec(d, m, false), &d.w4mu).unwrap().report,
                        evaluate(&s2_spec(d, m, true), &d.w4mu).unwrap().report,
                    )
                })
                .collect::<Vec<_>>()
        });
        TABLE1_METHODS
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let pick = |f: fn(&(MetricsReport, MetricsReport, MetricsReport)) -> &MetricsReport| {
                    runs.iter().map(|r| f(&r[k]).clone()).collect::<Vec<_>>()
                };
                (m, pick(|t| &t.0), pick(|t| &t.1), pick(|t| &t.2))
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_autodiff_matches_finite_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1000 + i);
        let d = rng.random_range(2..6usize);
        let n = rng.random_range(2..6usize);
        let hidden: Vec<usize> = (0..rng.random_range(0..3usize)).map(|_| rng.random_range(2..6)).collect();
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.05..0.95)).collect();
        let xt = Tensor::matrix(n, d, x.clone()).unwrap();
        let (got, want) = match i % 3 {
            0 => {
                // Classifier under the GradDiff objective.
                let k = rng.random_range(2..5usize);
                let theta = init_params(&ArchSpec::classifier(d, hidden, k), i).unwrap();
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let cut = n / 2;
                let df = LabeledSet {
                    features: x[..cut * d].to_vec(),
                    dim: d,
                    labels: labels[..cut].to_vec(),
                };
                let dr = LabeledSet {
                    features: x[cut * d..].to_vec(),
                    dim: d,
                    labels: labels[cut..].to_vec(),
                };
                let (lf, lr) = (rng.random_range(0.0..1.0), rng.random_range(0.5..1.5));
                let (_, g) = mu_loss_grad(&theta, &df, &dr, lf, lr).unwrap();
                let fd = theta
                    .finite_diff_grad(|t| Ok(mu_loss_grad(t, &df, &dr, lf, lr)?.0), 1e-6)
                    .unwrap();
                (g.flatten(), fd.flatten())
            }
            1 => {
                // Encoder/decoder under the watermark loss.
                let l = rng.random_range(1..5usize);
                let psi = init_params(&ArchSpec::encoder(d, hidden.clone(), l, 0.1), i).unwrap();
                let phi = init_params(&ArchSpec::decoder(d, hidden, l), i).unwrap();
                let m: Vec<f64> = (0..l).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
                let w = WmWeights { rec: 1.0, dec: 1.0 };
                let (_, gp, gf) = wm_loss_grad(&psi, &phi, &m, &xt, w).unwrap();
                let fdp = psi
                    .finite_diff_grad(|p| Ok(wm_loss_grad(p, &phi, &m, &xt, w)?.0), 1e-6)
                    .unwrap();
                let fdf = phi
                    .finite_diff_grad(|f| Ok(wm_loss_grad(&psi, f, &m, &xt, w)?.0), 1e-6)
                    .unwrap();
                ([gp.flatten(), gf.flatten()].concat(), [fdp.flatten(), fdf.flatten()].concat())
            }
            _ => {
                // Classifier input gradient through the raw graph.
                let k = rng.random_range(2..5usize);
                let theta = init_params(&ArchSpec::classifier(d, hidden, k), i).unwrap();
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let loss = |xs: &Tensor, want_grad: bool| {
                    let mut g = Graph::new();
                    let tb = theta.bind_frozen(&mut g);
                    let xv = g.leaf("x", &xs.clone().with_grad());
                    let logits = classify_graph(&mut g, &tb, xv).unwrap();
                    let l = g.cross_entropy(logits, &labels).unwrap();
                    let grad = want_grad.then(|| g.backward(l).unwrap().get(xv).unwrap().data().to_vec());
                    (g.value(l).item(), grad)
                };
                let got = loss(&xt, true).1.unwrap();
                let fd = water4mu::diffcore::finite_diff_grad(|ts| Ok(loss(&ts[0], false).0), std::slice::from_ref(&xt), 1e-6)
                    .unwrap();
                (got, fd[0].data().to_vec())
            }
        };
        worst = worst.max(rel_err(&got, &want));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        "autodiff vs central differences, 100 random nets",
        worst < 1e-6 && secs < 10.0,
        &format!("max relative error {worst:.2e} (< 1e-6), {secs:.2} s (< 10 s)"),
    );
}

#[test]
fn criterion_02_hypergradient_matches_quadratic_oracle() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2000 + i);
        let (p, q) = (rng.random_range(1..6usize), rng.random_range(1..6usize));
        let a: Vec<f64> = (0..p * q).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let psi: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
        let prob = QuadBilevel::new(a, p, q, b).unwrap();
        // Lower Hessian is I, so the diagonal approximation is exact at λ = 1.
        let c = CorrectionScale::Unit.factor(1.0);
        let h = implicit_hypergradient(&prob, &psi, c, 1e-3).unwrap();
        let oracle = quad_oracle_hypergrad(&prob, &psi).unwrap();
        worst = worst.max(rel_err(&h.grad, &oracle));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        2,
        "implicit hypergradient vs QuadBilevel oracle, 50 instances",
        worst < 1e-5 && secs < 5.0,
        &format!("max relative error {worst:.2e} (< 1e-5), {secs:.3} s (< 5 s)"),
    );
}

#[test]
fn criterion_03_mixed_hvp_matches_coordinate_differences() {
    let d = 8;
    let cfg = SyntheticConfig {
        n_train: 24,
        n_test: 8,
        dim: d,
        classes: 3,
        noise_sigma: 0.2,
    };
    let bundle = make_synthetic::<f64>(&cfg, 3).unwrap();
    let train = bundle.train_set();
    let cut = 8 * d;
    let splits = UnlearnSplits {
        forget: LabeledSet {
            features: train.features[..cut].to_vec(),
            dim: d,
            labels: train.labels[..8].to_vec(),
        },
        retain: LabeledSet {
            features: train.features[cut..].to_vec(),
            dim: d,
            labels: train.labels[8..].to_vec(),
        },
    };
    let theta = init_params(&ArchSpec::classifier(d, vec![6], 3), 5).unwrap();
    let psi = init_params(&ArchSpec::encoder(d, vec![5], 4, 0.1), 5).unwrap();
    let phi = init_params(&ArchSpec::decoder(d, vec![5], 4), 5).unwrap();
    let m = [1.0, 0.0, 1.0, 1.0];
    let prob = WatermarkBilevel::for_network(&theta, &splits, &psi, &phi, &m, &Default::default()).unwrap();
    let (th, u) = (theta.flatten(), psi.flatten());

    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    let dir = |rng: &mut Xoshiro256StarStar| -> Vec<f64> { (0..th.len()).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (g1, g2) = (dir(&mut rng), dir(&mut rng));

    // Oracle: ∂/∂u_j of ∇θℓ(θ, u)ᵀg by central differences in u.
    let oracle = |g: &[f64]| -> Vec<f64> {
        let h = 1e-5;
        (0..u.len())
            .map(|j| {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                let dot = |v: &[f64]| -> f64 {
                    prob.lower_grad_theta(&th, v).unwrap().iter().zip(g).map(|(a, b)| a * b).sum()
                };
                (dot(&up) - dot(&um)) / (2.0 * h)
            })
            .collect()
    };
    let r = 1e-4;
    let h1 = mixed_hvp(&prob, &u, &th, &g1, r).unwrap();
    let e_fd = rel_err(&h1, &oracle(&g1));

    let g12: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + 2.0 * b).collect();
    let h2 = mixed_hvp(&prob, &u, &th, &g2, r).unwrap();
    let h12 = mixed_hvp(&prob, &u, &th, &g12, r).unwrap();
    let lin: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + 2.0 * b).collect();
    let e_lin = rel_err(&h12, &lin);
    report(
        3,
        "mixed_hvp vs coordinate differences on a d=8 net",
        e_fd < 1e-4 && e_lin < 1e-4,
        &format!("relative error {e_fd:.2e}, linearity error {e_lin:.2e} (both < 1e-4), {} upper coords", u.len()),
    );
}

#[test]
fn criterion_04_watermark_fidelity() {
    let started = Instant::now();
    let bundle = make_synthetic::<f64>(&SyntheticConfig::default(), 0).unwrap();
    let train = bundle.train_set().x().unwrap();
    let x = train.select_rows(&(0..512).collect::<Vec<_>>()).unwrap();
    let holdout = bundle
        .test_set()
        .x()
        .unwrap()
        .select_rows(&(0..128).collect::<Vec<_>>())
        .unwrap();
    let psi0 = init_params(&ArchSpec::encoder(64, vec![64], 10, 0.1), 0).unwrap();
    let phi0 = init_params(&ArchSpec::decoder(64, vec![64], 10), 0).unwrap();
    let m = WatermarkMessage::random(10, 0).unwrap();
    let codec = train_watermark(&psi0, &phi0, &x, &m, &WmTrainConfig::default()).unwrap();
    let ber = mean_ber(&codec.psi, &codec.phi, &holdout, &m).unwrap();
    let xw = water4mu::nets::encode(&codec.psi, &holdout, &m.as_reals()).unwrap();
    let db = psnr(&holdout, &xw).unwrap();
    let secs = started.elapsed().as_secs_f64();
    report(
        4,
        "watermark fidelity on the default dataset",
        ber <= 0.05 && db >= 25.0 && secs < 120.0,
        &format!("holdout BER {ber:.4} (<= 0.05), PSNR {db:.2} dB (>= 25), {secs:.1} s (< 120 s)"),
    );
}

/// CSV with the per-run identity columns (run_id, scenario) and the
/// wall-clock column removed.
fn comparable_csv(text: &str) -> String {
    reports_from_csv(text)
        .unwrap()
        .iter()
        .map(|r| {
            let row = r.deterministic_fields();
            let cols: Vec<&str> = row.split(',').collect();
            cols[2..].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_05_zero_strength_watermark_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let base = with(&desk_spec(0), |s| s.watermark.strength = 0.0);
    let csvs = par_map(vec![Scenario::S0, Scenario::S1, Scenario::S2], |sc| {
        let spec = with(&base, |s| s.scenario = sc);
        let out = dir.path().join(sc.to_string());
        run_scenario_in(&spec, &out).unwrap();
        std::fs::read_to_string(out.join(METRICS_CSV)).unwrap()
    });
    let (s0, s1, s2) = (comparable_csv(&csvs[0]), comparable_csv(&csvs[1]), comparable_csv(&csvs[2]));
    report(
        5,
        "S1/S2 with strength 0 reproduce S0",
        s0 == s1 && s0 == s2,
        &format!("S0 [{s0}] S1 [{s1}] S2 [{s2}]"),
    );
}

#[test]
fn criterion_06_water4mu_improves_unlearning() {
    let started = Instant::now();
    let t = table1();
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, s0, s2, _) in t {
        let (a, b) = (cell(s0), cell(s2));
        let ok = b.ua >= a.ua && b.mia >= a.mia && a.ra - b.ra <= 5.0 && a.ta - b.ta <= 5.0;
        pass &= ok;
        parts.push(format!(
            "{m}: UA {:.2}->{:.2} MIA {:.2}->{:.2} RA {:.2}->{:.2} TA {:.2}->{:.2}{}",
            a.ua,
            b.ua,
            a.mia,
            b.mia,
            a.ra,
            b.ra,
            a.ta,
            b.ta,
            if ok { "" } else { " (x)" }
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        6,
        "S2+Water4MU vs S0, medians over 5 seeds",
        pass && secs < 600.0,
        &format!("{} | {secs:.0} s (< 600 s)", parts.join(" | ")),
    );
}

#[test]
fn criterion_07_watermarked_evaluation_boost() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, _, s2, wev) in table1() {
        let (a, b) = (cell(s2), cell(wev));
        let ok = b.ua > a.ua && b.mia > a.mia;
        pass &= ok;
        parts.push(format!(
            "{m}: UA {:.2}->{:.2} MIA {:.2}->{:.2} RA {:.2}->{:.2} TA {:.2}->{:.2}{}",
            a.ua,
            b.ua,
            a.mia,
            b.mia,
            a.ra,
            b.ra,
            a.ta,
            b.ta,
            if ok { "" } else { " (x)" }
        ));
    }
    report(7, "watermarked vs unwatermarked evaluation of Water4MU runs", pass, &parts.join(" | "));
}

#[test]
fn criterion_08_challenging_forgets() {
    let rows = par_map(desk().iter().collect(), |d| {
        let random_s0 = evaluate(&s0_spec(d, Method::GradDiff), &d.base).unwrap().report;
        let spec = with(&d.spec, |s| {
            s.forget_mode = ForgetMode::WorstCase;
            s.method = Method::GradDiff;
        });
        // θo and the pre-trained codec do not depend on the split.
        let worst = Prepared {
            bundle: split_bundle(&spec, &d.base.bundle, &d.base.theta_o).unwrap(),
            ..d.base.clone()
        };
        let worst_s0 = evaluate(
            &with(&spec, |s| {
                s.scenario = Scenario::S0;
                s.use_water4mu = false;
            }),
            &worst,
        )
        .unwrap()
        .report;
        let worst_w = evaluate(&spec, &attach_water4mu(&spec, &worst).unwrap()).unwrap().report;
        (random_s0.ua, worst_s0.ua, worst_w.ua)
    });
    let r = median(rows.iter().map(|t| t.0).collect());
    let w = median(rows.iter().map(|t| t.1).collect());
    let ww = median(rows.iter().map(|t| t.2).collect());
    report(
        8,
        "worst-case split is harder and Water4MU raises its UA",
        w < r && ww > w,
        &format!("median UA random {r:.2}, worst-case {w:.2} (must be < random), worst-case + Water4MU {ww:.2} (must be > {w:.2})"),
    );
}

#[test]
fn criterion_09_message_selection() {
    let rows = par_map(desk().iter().collect(), |d| {
        let spec = with(&d.spec, |s| {
            s.use_water4mu = false;
            s.method = Method::GradDiff;
            s.watermark.message_mode = MessageMode::RandomPerRow;
        });
        let codec = pretrain_codec(&spec, &d.base.bundle).unwrap();
        let random = Prepared {
            codec: Some(codec.clone()),
            ..d.base.clone()
        };
        let sel_spec = with(&spec, |s| s.use_message_selection = true);
        let sel = water4mu::blo::message_select(
            &codec.psi,
            &codec.phi,
            &d.base.theta_o,
            &d.base.splits(),
            &vec![0.0; spec.watermark.message_len],
            &sel_spec.blo_config(BloMode::MessageSelection),
        )
        .unwrap();
        let selected = Prepared {
            codec: Some(water4mu::harness::scenario::Codec {
                message: sel.message.clone(),
                ..codec.clone()
            }),
            ..d.base.clone()
        };
        let cfg = spec.blo_config(BloMode::NetworkTraining);
        let splits = d.base.splits();
        let obj = |m: &WatermarkMessage| {
            objective_at_message(&codec.psi, &codec.phi, &d.base.theta_o, &splits, m, &cfg)
                .unwrap()
                .0
        };
        (
            obj(&codec.message),
            obj(&sel.message),
            evaluate(&spec, &random).unwrap().report.ua,
            evaluate(&sel_spec, &selected).unwrap().report.ua,
        )
    });
    let o_rand = median(rows.iter().map(|r| r.0).collect());
    let o_sel = median(rows.iter().map(|r| r.1).collect());
    let ua_rand = median(rows.iter().map(|r| r.2).collect());
    let ua_sel = median(rows.iter().map(|r| r.3).collect());
    report(
        9,
        "selected message vs random message, medians over 5 seeds",
        o_sel <= o_rand && ua_sel >= ua_rand,
        &format!("upper objective {o_rand:.5} -> {o_sel:.5} (must not rise), UA {ua_rand:.2} -> {ua_sel:.2} (must not fall)"),
    );
}

fn sweep_rows() -> &'static [Vec<MetricsReport>] {
    static S: OnceLock<Vec<Vec<MetricsReport>>> = OnceLock::new();
    S.get_or_init(|| {
        par_map(SWEEP_SEEDS.to_vec(), |seed| {
            let spec = with(&desk_spec(seed), |s| {
                s.forget_mode = ForgetMode::Class;
                s.forget_class = (seed % 4) as usize;
                s.method = Method::Ft;
            });
            sweep_lambda(&LAMBDAS, &spec, 0).unwrap()
        })
    })
}

#[test]
fn criterion_10_lambda_sweep_has_interior_peak() {
    let rows = sweep_rows();
    let mut interior = 0;
    let mut parts = Vec::new();
    for (seed, r) in SWEEP_SEEDS.iter().zip(rows) {
        let ua: Vec<f64> = r.iter().map(|x| x.ua).collect();
        let inner = ua[1..4].iter().cloned().fold(f64::MIN, f64::max);
        let peak = inner > ua[0].max(ua[4]);
        interior += usize::from(peak);
        parts.push(format!(
            "seed {seed}: UA {}{}",
            ua.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/"),
            if peak { " interior" } else { "" }
        ));
    }
    report(
        10,
        "λ sweep over 1e-4..1, interior UA peak",
        interior >= 2,
        &format!("{interior}/3 seeds peak inside (need >= 2); {}", parts.join("; ")),
    );
}

#[test]
fn sweep_mid_lambda_dominates_extremes() {
    let rows = sweep_rows();
    let med = |k: usize| median(rows.iter().map(|r| r[k].ua).collect());
    let (lo, mid, hi) = (med(0), med(2), med(4));
    println!("sweep median UA: λ=1e-4 {lo:.2}, λ=1e-2 {mid:.2}, λ=1 {hi:.2}");
    assert!(mid >= lo && mid >= hi, "{lo} {mid} {hi}");
}

fn file_bytes(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = with(&desk_spec(0), |s| {
        s.scenario = Scenario::S2;
        s.use_water4mu = true;
    });
    let outs = [dir.path().join("a"), dir.path().join("b")];
    let recs = par_map(outs.to_vec(), |o| run_scenario_in(&spec, &o).unwrap());
    let csv = |o: &std::path::Path| comparable_csv(&std::fs::read_to_string(o.join(METRICS_CSV)).unwrap());
    let same_csv = csv(&outs[0]) == csv(&outs[1]) && recs[0].report.deterministic_fields() == recs[1].report.deterministic_fields();
    let mut same_files = recs[0].config_hash == recs[1].config_hash;
    for name in ["config.resolved.ini", "theta_o.ckpt", "theta_u.ckpt", "codec.ckpt"] {
        same_files &= file_bytes(&outs[0].join(name)) == file_bytes(&outs[1].join(name));
    }

    // Checkpoint round trips.
    let mut round_trip = true;
    for name in ["theta_o.ckpt", "theta_u.ckpt", "codec.ckpt"] {
        let p = outs[0].join(name);
        let bytes = file_bytes(&p);
        round_trip &= encode_arrays(&decode_arrays(&bytes).unwrap()).unwrap() == bytes;
        let ck = load_checkpoint(&p).unwrap();
        let again = dir.path().join(format!("again-{name}"));
        save_checkpoint(&ck, &again).unwrap();
        round_trip &= file_bytes(&again) == bytes && load_checkpoint(&again).unwrap() == ck;
    }
    let theta: ParamSet = load_checkpoint(&outs[0].join("theta_o.ckpt")).unwrap().sets.remove(0);
    let x = make_synthetic::<f64>(&spec.data, 0).unwrap().test_set().x().unwrap();
    let original = prepare_base(&with(&spec, |s| s.use_water4mu = false)).unwrap().theta_o;
    let logits_equal = classify(&theta, &x).unwrap() == classify(&original, &x).unwrap();
    let ck = Checkpoint {
        sets: vec![original.clone()],
        message: None,
    };
    round_trip &= load_checkpoint(&{
        let p = dir.path().join("mem.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        p
    })
    .unwrap()
        == ck;

    // Thread count does not change a sweep.
    let small = with(&spec, |s| {
        s.data.n_train = 256;
        s.data.n_test = 64;
        s.classifier.epochs = 20;
        s.watermark.epochs = 20;
        s.blo.upper_epochs = 2;
    });
    let one = sweep_lambda(&[1e-2, 1e-3, 1e-1], &small, 1).unwrap();
    let three = sweep_lambda(&[1e-1, 1e-2, 1e-3], &small, 3).unwrap();
    let fields = |v: &[MetricsReport]| v.iter().map(|r| r.deterministic_fields()).collect::<Vec<_>>();
    let threads_equal = fields(&one) == fields(&three);

    report(
        11,
        "determinism and checkpoint round trips",
        same_csv && same_files && round_trip && logits_equal && threads_equal,
        &format!(
            "rerun metrics equal: {same_csv}, artifacts byte-equal: {same_files}, round trips exact: {round_trip}, reloaded logits equal: {logits_equal}, sweep 1 vs 3 threads equal: {threads_equal}"
        ),
    );
}
