use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use umid_core::auditor::{
    decide_batch, fit_baseline, invert_queries, AuditDecision, AuditPlan, Enhancement, MetricsReport,
};
use umid_core::baseline::{generate, GibberishConfig};
use umid_core::defenses::{
    eval_defense, filter_query, sigma_for, DefenseInputs, DefenseScenario, DpConfig, FilterConfig, FilterVerdict,
};
use umid_core::detectors::{fit, DetectorKind, DetectorParams, FeaturePoint};
use umid_core::enhancement::{RandomProjection, DEFAULT_EXTRACTOR_DIM};
use umid_core::linalg::{gaussian_vec, mean, random_unit};
use umid_core::rng::{derive_seed, stream};
use umid_core::testbed::{generate_dataset, grad_cosine_wrt_input, local_samples, train_contrastive};
use umid_core::theory::{verify_concentration, verify_theorem, TheoryParams};
use umid_core::{compute_stats, DualEncoder, EncoderPair, IdentityRecord, InversionConfig, TestbedConfig};

const SEEDS: u64 = 5;
const DEFENSE_QUERIES_PER_CLASS: usize = 20;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    limit_s: f64,
}

fn report(results: &mut Vec<Outcome>, name: &'static str, limit_s: f64, f: impl FnOnce() -> (bool, String)) {
    let t0 = Instant::now();
    let (pass, detail) = f();
    let secs = t0.elapsed().as_secs_f64();
    let pass = pass && secs <= limit_s;
    println!(
        "[{}] {name}: {detail} ({secs:.1}s, limit {limit_s:.0}s)",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(Outcome {
        name,
        pass,
        detail,
        limit_s,
    });
}

fn stats_oracle() -> (bool, String) {
    let mut rng = stream(1, "acceptance/stats", 0);
    let mut worst = 0.0f64;
    let mut worst_identity = 0.0f64;
    for case in 0..1000 {
        let n = 1 + case % 50;
        let d = 2 + (case * 7) % 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let t = random_unit(&mut rng, d);
        let m = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
        let s = compute_stats(Array1::from(t.clone()).view(), m.view()).unwrap();
        let mut ns = 0.0;
        let mut centre = vec![0.0; d];
        for r in &rows {
            for j in 0..d {
                ns += t[j] * r[j] / n as f64;
                centre[j] += r[j] / n as f64;
            }
        }
        let mut nd = 0.0;
        for r in &rows {
            for j in 0..d {
                nd += (r[j] - centre[j]).powi(2) / n as f64;
            }
        }
        worst = worst.max((s.similarity - ns).abs()).max((s.variability - nd).abs());
        let c2: f64 = centre.iter().map(|c| c * c).sum();
        worst_identity = worst_identity.max((s.variability - (1.0 - c2)).abs());
        if n == 1 && s.variability != 0.0 {
            return (false, format!("n=1 gives D_n2={}", s.variability));
        }
    }
    (
        worst < 1e-12 && worst_identity < 1e-9,
        format!("max |naive diff| {worst:.2e}, max |D2 - (1-|mean|^2)| {worst_identity:.2e} over 1000 inputs"),
    )
}

fn gradients(enc: &EncoderPair) -> (bool, String) {
    let mut rng = stream(2, "acceptance/grad", 0);
    let mut worst = 0.0f64;
    let h = 1e-5;
    for case in 0..100 {
        let text = format!("probe {case} {}", case * 31 % 97);
        let v_t = enc.embed_text(&text).unwrap();
        let v = v_t.as_slice().unwrap();
        let x = gaussian_vec(&mut rng, enc.input_dim());
        let (_, g) = grad_cosine_wrt_input(enc, &x, v).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|j| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = grad_cosine_wrt_input(enc, &xp, v).unwrap().0;
                let fm = grad_cosine_wrt_input(enc, &xm, v).unwrap().0;
                (fp - fm) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    (worst < 1e-4, format!("max relative error {worst:.2e} over 100 cases"))
}

fn theorem() -> (bool, String) {
    let r = verify_theorem(&TheoryParams::default(), 100, 1000).unwrap();
    (
        r.success_rate >= 0.99 && r.gap_s > 0.0 && r.gap_d > 0.0,
        format!(
            "success {:.4} (>= 0.99), gap_S {:.4}, gap_D {:.4}, rho {:.4}",
            r.success_rate, r.gap_s, r.gap_d, r.coherence
        ),
    )
}

fn concentration() -> (bool, String) {
    let r = verify_concentration(&TheoryParams::default(), &[10, 40, 160, 640], 1000).unwrap();
    (
        (r.slope_s + 0.5).abs() <= 0.1,
        format!("log-log slope of RMS S_n {:.4} (target -0.5 +/- 0.1), D_n2 {:.4}", r.slope_s, r.slope_d2),
    )
}

fn detector_sanity() -> (bool, String) {
    let mut rng = stream(3, "acceptance/blob", 0);
    let base: Vec<FeaturePoint> = (0..500)
        .map(|_| {
            let g = gaussian_vec(&mut rng, 2);
            FeaturePoint::new(0.6 + 0.05 * g[0], 0.3 + 0.05 * g[1])
        })
        .collect();
    let params = DetectorParams::default();
    let outlier = FeaturePoint::new(0.6 + 0.5, 0.3);
    let centroid = FeaturePoint::new(0.6, 0.3);
    let mut ok = true;
    let mut rates = Vec::new();
    for kind in DetectorKind::ALL {
        let m = fit(kind, &base, &params).unwrap();
        let rate = base.iter().filter(|p| m.vote(p).unwrap()).count() as f64 / base.len() as f64;
        ok &= m.vote(&outlier).unwrap() && !m.vote(&centroid).unwrap() && (rate - params.contamination).abs() <= 0.01;
        rates.push(format!("{kind} {rate:.3}"));
    }
    (ok, format!("10-sigma outlier flagged, centroid accepted; flag rates {}", rates.join(", ")))
}

struct Fixture {
    cfg: TestbedConfig,
    enc: EncoderPair,
    records: Vec<IdentityRecord>,
    queries: Vec<String>,
    truth: Vec<bool>,
}

fn fixture() -> Fixture {
    let cfg = TestbedConfig::default();
    let records = generate_dataset(&cfg).unwrap();
    let (enc, _) = train_contrastive(&records, &cfg).unwrap();
    let queries = records.iter().map(|r| r.text.clone()).collect();
    let truth = records.iter().map(|r| r.is_member).collect();
    Fixture {
        cfg,
        enc,
        records,
        queries,
        truth,
    }
}

struct SeedRun {
    root: u64,
    plan: AuditPlan,
    baseline: Vec<String>,
    text_only: Vec<AuditDecision>,
    text_metrics: MetricsReport,
    enhanced_metrics: MetricsReport,
}

fn class_means(decisions: &[AuditDecision], truth: &[bool], member: bool) -> (f64, f64) {
    let sel: Vec<FeaturePoint> = decisions
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t == member)
        .map(|(d, _)| d.feature)
        .collect();
    (
        mean(&sel.iter().map(|f| f.similarity).collect::<Vec<_>>()),
        mean(&sel.iter().map(|f| f.variability).collect::<Vec<_>>()),
    )
}

fn audit_seeds(fx: &Fixture) -> Vec<SeedRun> {
    let local: Vec<Array2<f64>> = fx
        .records
        .iter()
        .map(|r| {
            let s = local_samples(&fx.cfg, r.id, 1);
            Array2::from_shape_fn((s.len(), s[0].len()), |(i, j)| s[i][j])
        })
        .collect();
    (0..SEEDS)
        .map(|k| {
            let root = derive_seed(0, "audit/repeat", k);
            let plan = AuditPlan::from_seed(root, &InversionConfig::default());
            let baseline = generate(&GibberishConfig::plain(100, derive_seed(root, "baseline/strings", 0))).unwrap();
            let (_, ensemble) = fit_baseline(&fx.enc, &baseline, &plan).unwrap();
            let inv = InversionConfig {
                record_embeddings: true,
                ..plan.query_inversion.clone()
            };
            let inverted = invert_queries(&fx.enc, &fx.queries, &inv).unwrap();
            let (text_only, _) = decide_batch(&ensemble, &inverted, &plan.ensemble, None).unwrap();
            let extractor = RandomProjection::new(
                fx.enc.input_dim(),
                DEFAULT_EXTRACTOR_DIM,
                derive_seed(root, "enhancement/extractor", 0),
            );
            let enh = Enhancement {
                extractor: &extractor,
                local_samples: local.iter().map(|m| m.view()).collect(),
                seed: derive_seed(root, "enhancement/kmeans", 0),
            };
            let (enhanced, _) = decide_batch(&ensemble, &inverted, &plan.ensemble, Some(&enh)).unwrap();
            let text_metrics = MetricsReport::from_decisions(&text_only, &fx.truth);
            let enhanced_metrics = MetricsReport::from_decisions(&enhanced, &fx.truth);
            println!(
                "    seed {k}: text-only accuracy {:.3} recall {:.3} | enhanced accuracy {:.3} recall {:.3}",
                text_metrics.accuracy, text_metrics.recall, enhanced_metrics.accuracy, enhanced_metrics.recall
            );
            SeedRun {
                root,
                plan,
                baseline,
                text_only,
                text_metrics,
                enhanced_metrics,
            }
        })
        .collect()
}

fn end_to_end(fx: &Fixture, runs: &[SeedRun]) -> (bool, String) {
    let acc = mean(&runs.iter().map(|r| r.text_metrics.accuracy).collect::<Vec<_>>());
    let rec = mean(&runs.iter().map(|r| r.text_metrics.recall).collect::<Vec<_>>());
    let ordered = runs.iter().all(|r| {
        let (ms, md) = class_means(&r.text_only, &fx.truth, true);
        let (ns, nd) = class_means(&r.text_only, &fx.truth, false);
        ms > ns && md < nd
    });
    (
        acc >= 0.85 && rec >= 0.90 && ordered,
        format!(
            "mean accuracy {acc:.4} (>= 0.85), mean recall {rec:.4} (>= 0.90), class mean ordering on every seed: {ordered}"
        ),
    )
}

fn enhancement(runs: &[SeedRun]) -> (bool, String) {
    let text = mean(&runs.iter().map(|r| r.text_metrics.accuracy).collect::<Vec<_>>());
    let enh = mean(&runs.iter().map(|r| r.enhanced_metrics.accuracy).collect::<Vec<_>>());
    (enh >= text, format!("enhanced mean accuracy {enh:.4} vs text-only {text:.4}"))
}

/// Balanced subset: the first members and the first non-members.
fn subset(fx: &Fixture) -> Vec<usize> {
    let members = fx.truth.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i);
    let others = fx.truth.iter().enumerate().filter(|(_, &t)| !t).map(|(i, _)| i);
    members
        .take(DEFENSE_QUERIES_PER_CLASS)
        .chain(others.take(DEFENSE_QUERIES_PER_CLASS))
        .collect()
}

fn subset_clean(run: &SeedRun, fx: &Fixture, idx: &[usize]) -> MetricsReport {
    let d: Vec<AuditDecision> = idx.iter().map(|&i| run.text_only[i].clone()).collect();
    let t: Vec<bool> = idx.iter().map(|&i| fx.truth[i]).collect();
    MetricsReport::from_decisions(&d, &t)
}

fn dp_direction(fx: &Fixture, runs: &[SeedRun]) -> (bool, String) {
    let idx = subset(fx);
    let queries: Vec<String> = idx.iter().map(|&i| fx.queries[i].clone()).collect();
    let truth: Vec<bool> = idx.iter().map(|&i| fx.truth[i]).collect();
    let mut ok = true;
    let mut rows = Vec::new();
    for r in runs {
        let inputs = DefenseInputs {
            queries: &queries,
            truth: &truth,
            plain_baseline: &r.baseline,
            covert_baseline: &r.baseline,
            plan: &r.plan,
        };
        let cfg = DpConfig {
            seed: derive_seed(r.root, "defense/dp", 0),
            ..DpConfig::default()
        };
        let rep = eval_defense(&fx.enc, &DefenseScenario::Dp(cfg), &inputs, Some(subset_clean(r, fx, &idx))).unwrap();
        ok &= rep.defended.accuracy <= rep.clean.accuracy;
        rows.push(format!("{:.3}->{:.3}", rep.clean.accuracy, rep.defended.accuracy));
    }
    let grid = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let sigmas: Vec<f64> = grid.iter().map(|&e| sigma_for(e, 1e-5, 2.0)).collect();
    let monotone = sigmas.windows(2).all(|w| w[0] > w[1]);
    (
        ok && monotone,
        format!(
            "accuracy clean->dp at eps=1 (sigma {:.3}): {}; sigma strictly decreasing over eps grid: {monotone}",
            sigma_for(1.0, 1e-5, 2.0),
            rows.join(", ")
        ),
    )
}

fn covert(fx: &Fixture, runs: &[SeedRun]) -> (bool, String) {
    let filter = FilterConfig::default_filter();
    let seed = derive_seed(4, "acceptance/covert", 0);
    let cov = generate(&GibberishConfig::covert(1000, seed)).unwrap();
    let plain = generate(&GibberishConfig::plain(1000, seed)).unwrap();
    let pass = cov.iter().filter(|s| filter_query(&filter, s) == FilterVerdict::Pass).count() as f64 / 1000.0;
    let flagged = plain.iter().filter(|s| filter_query(&filter, s) == FilterVerdict::Flagged).count() as f64 / 1000.0;

    let run = &runs[0];
    let idx = subset(fx);
    let queries: Vec<String> = idx.iter().map(|&i| fx.queries[i].clone()).collect();
    let truth: Vec<bool> = idx.iter().map(|&i| fx.truth[i]).collect();
    let covert_baseline = generate(&GibberishConfig::covert(100, derive_seed(run.root, "baseline/strings", 0))).unwrap();
    let inputs = DefenseInputs {
        queries: &queries,
        truth: &truth,
        plain_baseline: &run.baseline,
        covert_baseline: &covert_baseline,
        plan: &run.plan,
    };
    let clean = subset_clean(run, fx, &idx);
    let filter_seed = derive_seed(run.root, "defense/filter", 0);
    let scenario = |covert| DefenseScenario::Filter {
        covert,
        seed: filter_seed,
    };
    let plain_rep = eval_defense(&fx.enc, &scenario(false), &inputs, Some(clean)).unwrap();
    let cg_rep = eval_defense(&fx.enc, &scenario(true), &inputs, Some(clean)).unwrap();
    (
        pass >= 0.95 && flagged >= 0.90 && cg_rep.accuracy_drop <= plain_rep.accuracy_drop,
        format!(
            "covert pass rate {pass:.3} (>= 0.95), plain flagged {flagged:.3} (>= 0.90); accuracy drop under filter: covert baseline {:.4}, plain baseline {:.4}",
            cg_rep.accuracy_drop, plain_rep.accuracy_drop
        ),
    )
}

fn umid(dir: &Path, args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_umid"))
        .args(args)
        .current_dir(dir)
        .env_remove("UMID_SEED")
        .output()
        .expect("spawn umid");
    if !out.status.success() {
        eprintln!("umid {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn timing_key(k: &str) -> bool {
    ["latency", "elapsed", "timestamp"].iter().any(|t| k.contains(t))
}

fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !timing_key(k));
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn masked_json(line: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(line) {
        Ok(mut v) => {
            strip_timing(&mut v);
            v.to_string()
        }
        Err(_) => line.to_string(),
    }
}

/// File contents with latency and timestamp fields removed.
fn masked(path: &Path, text: &str) -> String {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => masked_json(text),
        Some("jsonl") => text.lines().map(masked_json).collect::<Vec<_>>().join("\n"),
        Some("csv") => {
            let mut lines = text.lines();
            let Some(header) = lines.next() else { return String::new() };
            let cols: Vec<&str> = header.split(',').collect();
            let keep: Vec<bool> = cols.iter().map(|c| !timing_key(c)).collect();
            let row = |l: &str| -> String {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != cols.len() {
                    return l.to_string();
                }
                f.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect::<Vec<_>>().join(",")
            };
            std::iter::once(header).chain(lines).map(row).collect::<Vec<_>>().join("\n")
        }
        _ => text.to_string(),
    }
}

fn outputs(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut files: Vec<(PathBuf, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            let text = String::from_utf8(std::fs::read(&p).unwrap()).unwrap();
            let m = masked(&p, &text);
            (p, m)
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let inv = ["--runs", "8", "--iters", "60"];
    let with_inv = |head: &[&'static str]| [head, &inv[..]].concat();
    let steps: Vec<(&str, Vec<&str>)> = vec![
        (
            "train",
            vec![
                "train-testbed", "--seed", "3", "--epochs", "60", "--set", "num_members=20", "--set",
                "num_nonmembers=20", "--out", "train",
            ],
        ),
        (
            "base",
            with_inv(&["baseline", "--model", "train/model.json", "--seed", "4", "--count", "30", "--out", "base"]),
        ),
        (
            "audit",
            with_inv(&[
                "audit", "--model", "train/model.json", "--baseline", "base/baseline.jsonl", "--queries",
                "train/dataset.jsonl", "--seed", "5", "--repeat", "2", "--out", "audit",
            ]),
        ),
        (
            "enh",
            with_inv(&[
                "audit", "--model", "train/model.json", "--baseline", "base/baseline.jsonl", "--queries",
                "train/dataset.jsonl", "--seed", "5", "--enhanced", "--local-samples", "train/local_samples.jsonl",
                "--out", "enh",
            ]),
        ),
        (
            "metrics",
            vec![
                "metrics", "--decisions", "audit/decisions_0.jsonl", "--truth", "train/dataset.jsonl", "--threshold",
                "2", "--out", "metrics",
            ],
        ),
        (
            "theory",
            vec![
                "verify-theory", "--seed", "6", "--n", "20", "--trials", "50", "--set", "d=64", "--set", "m=8",
                "--out", "theory",
            ],
        ),
        (
            "conc",
            vec![
                "verify-concentration", "--seed", "7", "--trials", "50", "--n-grid", "5,20,80", "--set", "d=64",
                "--set", "m=8", "--out", "conc",
            ],
        ),
        (
            "dp",
            with_inv(&[
                "eval-defense", "--model", "train/model.json", "--queries", "train/dataset.jsonl", "--defense", "dp",
                "--sigma", "0.3", "--seed", "8", "--set", "count=30", "--out", "dp",
            ]),
        ),
        (
            "filter",
            with_inv(&[
                "eval-defense", "--model", "train/model.json", "--queries", "train/dataset.jsonl", "--defense",
                "filter", "--covert", "--seed", "8", "--set", "count=30", "--out", "filter",
            ]),
        ),
        ("gib", vec!["gen-gibberish", "--seed", "9", "--count", "50", "--mode", "covert", "--out", "gib"]),
    ];
    let mut checked = Vec::new();
    for (name, args) in &steps {
        if !umid(d, args) {
            return (false, format!("{name} did not run"));
        }
        let first = outputs(&d.join(name));
        let manifest = d.join(name).join("manifest.json");
        if !umid(d, &["rerun", "--manifest", manifest.to_str().unwrap()]) {
            return (false, format!("rerun of {name} failed"));
        }
        if first != outputs(&d.join(name)) {
            return (false, format!("{name} outputs differ on rerun"));
        }
        checked.push(format!("{name}({} files)", first.len()));
    }
    (true, format!("outputs identical after rerun (latency fields masked) for {}", checked.join(" ")))
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, "statistics oracle", 1.0, stats_oracle);
    let t0 = Instant::now();
    let fx = fixture();
    println!("    default testbed trained in {:.1}s", t0.elapsed().as_secs_f64());
    report(&mut results, "gradient correctness", 10.0, || gradients(&fx.enc));
    report(&mut results, "separation theorem", 120.0, theorem);
    report(&mut results, "concentration rate", 120.0, concentration);
    report(&mut results, "detector sanity", 30.0, detector_sanity);
    let t0 = Instant::now();
    let runs = audit_seeds(&fx);
    let shared = t0.elapsed().as_secs_f64();
    println!("    {SEEDS} audit seeds in {shared:.1}s (text-only and enhanced share the inversions)");
    report(&mut results, "end-to-end audit", 1800.0 - shared, || end_to_end(&fx, &runs));
    report(&mut results, "enhancement", 1800.0 - shared, || enhancement(&runs));
    report(&mut results, "dp defense direction", 1800.0, || dp_direction(&fx, &runs));
    report(&mut results, "covert gibberish", 1800.0, || covert(&fx, &runs));
    report(&mut results, "determinism", 600.0, determinism);

    let failed: Vec<&Outcome> = results.iter().filter(|r| !r.pass).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    for f in &failed {
        println!("  failed: {} ({}; limit {:.0}s)", f.name, f.detail, f.limit_s);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
