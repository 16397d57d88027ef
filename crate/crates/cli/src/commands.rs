use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView2;
use serde::Deserialize;
use umid_core::auditor::{
    audit_batch, AuditDecision, AuditPlan, Enhancement, EnsembleConfig, MetricsReport, RepeatedMetrics,
};
use umid_core::baseline::{
    build_baseline_features, generate, BaselineFile, BaselineHeader, GibberishConfig, GibberishMode,
};
use umid_core::defenses::{eval_defense, DefenseInputs, DefenseScenario, DpConfig};
use umid_core::detectors::{DetectorParams, Ensemble};
use umid_core::enhancement::{read_local_samples, RandomProjection, DEFAULT_EXTRACTOR_DIM};
use umid_core::rng::derive_seed;
use umid_core::testbed::io::{write_dataset, ModelFile};
use umid_core::testbed::{generate_dataset, local_samples, train_contrastive};
use umid_core::theory::{verify_concentration, verify_theorem, TheoryParams};
use umid_core::{DualEncoder, InversionConfig, TestbedConfig, UmidError};

use crate::error::{CliError, CliResult};
use crate::manifest::{load_manifest, Run};
use crate::params::{flag, Params};
use crate::{Command, Common, InversionFlags};

struct Ctx {
    argv: Vec<String>,
    env_seed: Option<String>,
}

pub fn dispatch(command: Command, argv: Vec<String>, env_seed: Option<String>) -> CliResult<()> {
    let ctx = Ctx { argv, env_seed };
    match command {
        Command::TrainTestbed { common, epochs } => train_testbed(&ctx, &common, epochs),
        Command::Baseline {
            common,
            model,
            count,
            mode,
            inversion,
        } => baseline(&ctx, &common, &model, count, mode, &inversion),
        Command::Audit {
            common,
            model,
            baseline,
            queries,
            inversion,
            threshold,
            enhanced,
            local_samples,
            repeat,
        } => audit(
            &ctx,
            &common,
            &AuditPaths {
                model,
                baseline,
                queries,
                local_samples,
            },
            &inversion,
            threshold,
            enhanced,
            repeat,
        ),
        Command::VerifyTheory { common, n, trials } => verify_theory_cmd(&ctx, &common, n, trials),
        Command::VerifyConcentration { common, n_grid, trials } => {
            verify_concentration_cmd(&ctx, &common, n_grid, trials)
        }
        Command::EvalDefense {
            common,
            model,
            queries,
            defense,
            epsilon,
            delta,
            sensitivity,
            sigma,
            covert,
            inversion,
        } => {
            let flags = vec![
                ("defense", defense),
                ("epsilon", flag(&epsilon)),
                ("delta", flag(&delta)),
                ("sensitivity", flag(&sensitivity)),
                ("sigma", flag(&sigma)),
                ("covert", covert.then(|| "true".to_string())),
            ];
            eval_defense_cmd(&ctx, &common, &model, &queries, flags, &inversion)
        }
        Command::Metrics {
            common,
            decisions,
            truth,
            threshold,
        } => metrics_cmd(&ctx, &common, &decisions, &truth, threshold),
        Command::GenGibberish { common, count, mode } => gen_gibberish(&ctx, &common, count, mode),
        Command::Rerun { manifest } => rerun(&manifest),
    }
}

fn resolve(
    ctx: &Ctx,
    common: &Common,
    allowed: &[&str],
    required: &[&str],
    mut flags: Vec<(&'static str, Option<String>)>,
) -> CliResult<Params> {
    flags.push(("seed", flag(&common.seed)));
    Params::resolve(
        allowed,
        required,
        common.config.as_deref(),
        ctx.env_seed.as_deref(),
        flags,
        &common.sets,
    )
}

fn start(ctx: &Ctx, command: &str, params: &Params, seeds: BTreeMap<String, u64>) -> Run {
    Run::start(command, ctx.argv.clone(), ctx.env_seed.clone(), params.snapshot().clone(), seeds)
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn load_model(path: &Path) -> CliResult<ModelFile> {
    if !path.exists() {
        return Err(CliError::missing(format!("model file {} not found", path.display())));
    }
    Ok(ModelFile::load(path)?)
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{what} {} not found", path.display())))
    }
}

fn inversion_flags(f: &InversionFlags) -> Vec<(&'static str, Option<String>)> {
    vec![("runs", flag(&f.runs)), ("iters", flag(&f.iters)), ("lr", flag(&f.lr))]
}

fn inversion_config(p: &Params, seed: u64) -> CliResult<InversionConfig> {
    let d = InversionConfig::default();
    let cfg = InversionConfig {
        runs: p.get("runs", d.runs)?,
        iters: p.get("iters", d.iters)?,
        learning_rate: p.get("lr", d.learning_rate)?,
        seed,
        record_embeddings: false,
    };
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

fn mode_of(p: &Params) -> CliResult<GibberishMode> {
    match p.get_str("mode", "plain").as_str() {
        "plain" => Ok(GibberishMode::Plain),
        "covert" => Ok(GibberishMode::Covert),
        other => Err(CliError::config(format!("invalid value {other:?} for key mode (plain or covert)"))),
    }
}

fn gibberish_config(p: &Params, seed: u64) -> CliResult<GibberishConfig> {
    let d = GibberishConfig::default();
    Ok(GibberishConfig {
        count: p.get("count", d.count)?,
        mode: mode_of(p)?,
        min_len: p.get("min_len", d.min_len)?,
        max_len: p.get("max_len", d.max_len)?,
        seed,
        lexicon: None,
    })
}

const TESTBED_KEYS: [&str; 15] = [
    "num_members",
    "num_nonmembers",
    "samples_per_identity",
    "identity_latent_dim",
    "text_feature_dim",
    "embed_dim",
    "hidden_dim",
    "temperature",
    "epochs",
    "batch_size",
    "learning_rate",
    "text_init_gain",
    "modality_init_gain",
    "seed",
    "local_samples",
];

fn testbed_config(p: &Params) -> CliResult<TestbedConfig> {
    let d = TestbedConfig::default();
    let cfg = TestbedConfig {
        num_members: p.get("num_members", d.num_members)?,
        num_nonmembers: p.get("num_nonmembers", d.num_nonmembers)?,
        samples_per_identity: p.get("samples_per_identity", d.samples_per_identity)?,
        identity_latent_dim: p.get("identity_latent_dim", d.identity_latent_dim)?,
        text_feature_dim: p.get("text_feature_dim", d.text_feature_dim)?,
        embed_dim: p.get("embed_dim", d.embed_dim)?,
        hidden_dim: p.get("hidden_dim", d.hidden_dim)?,
        temperature: p.get("temperature", d.temperature)?,
        epochs: p.get("epochs", d.epochs)?,
        batch_size: p.get("batch_size", d.batch_size)?,
        learning_rate: p.get("learning_rate", d.learning_rate)?,
        text_init_gain: p.get("text_init_gain", d.text_init_gain)?,
        modality_init_gain: p.get("modality_init_gain", d.modality_init_gain)?,
        seed: p.get("seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(serde::Serialize)]
struct LocalLine<'a> {
    text: &'a str,
    samples: Vec<Vec<f64>>,
}

fn train_testbed(ctx: &Ctx, common: &Common, epochs: Option<usize>) -> CliResult<()> {
    let p = resolve(ctx, common, &TESTBED_KEYS, &["seed"], vec![("epochs", flag(&epochs))])?;
    let cfg = testbed_config(&p)?;
    let per_identity: usize = p.get("local_samples", 1)?;
    let mut run = start(ctx, "train-testbed", &p, seeds(&[("testbed", cfg.seed)]));
    let records = generate_dataset(&cfg)?;
    let t0 = Instant::now();
    let (encoder, report) = train_contrastive(&records, &cfg)?;
    let mut model = ModelFile::new(encoder, cfg.clone(), &report);
    model.run_id = Some(run.run_id().to_string());
    run.write_json(&common.out.join("model.json"), &model)?;

    let tmp = common.out.join(".dataset.tmp");
    std::fs::create_dir_all(&common.out)?;
    write_dataset(&tmp, &records)?;
    let text = std::fs::read_to_string(&tmp)?;
    std::fs::remove_file(&tmp)?;
    run.write_lines(&common.out.join("dataset.jsonl"), &text)?;

    let local: Vec<LocalLine> = records
        .iter()
        .map(|r| LocalLine {
            text: &r.text,
            samples: local_samples(&cfg, r.id, per_identity),
        })
        .collect();
    run.write_jsonl(&common.out.join("local_samples.jsonl"), &local)?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    println!(
        "trained testbed: {} members, {} non-members, final loss {:.4} in {:.1}s",
        cfg.num_members,
        cfg.num_nonmembers,
        report.final_loss,
        t0.elapsed().as_secs_f64()
    );
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

fn baseline(
    ctx: &Ctx,
    common: &Common,
    model_path: &Path,
    count: Option<usize>,
    mode: Option<String>,
    inv: &InversionFlags,
) -> CliResult<()> {
    let allowed = ["count", "mode", "min_len", "max_len", "runs", "iters", "lr", "seed"];
    let mut flags = vec![("count", flag(&count)), ("mode", mode)];
    flags.extend(inversion_flags(inv));
    let p = resolve(ctx, common, &allowed, &["seed"], flags)?;
    let root: u64 = p.get("seed", 0)?;
    let gen_seed = derive_seed(root, "baseline/strings", 0);
    let inv_seed = derive_seed(root, "baseline/inversion", 0);
    let gen = gibberish_config(&p, gen_seed)?;
    let inv_cfg = inversion_config(&p, inv_seed)?;
    let model = load_model(model_path)?;
    let mut run = start(ctx, "baseline", &p, seeds(&[("root", root), ("strings", gen_seed), ("inversion", inv_seed)]));
    let strings = generate(&gen)?;
    let t0 = Instant::now();
    let features = build_baseline_features(&model.encoder, &strings, &inv_cfg)?;
    let file = BaselineFile::new(
        BaselineHeader {
            input_dim: model.encoder.input_dim(),
            embed_dim: model.encoder.embed_dim(),
            inversion: inv_cfg,
            generator: gen,
        },
        &strings,
        &features,
    );
    run.write_lines(&common.out.join("baseline.jsonl"), &file.to_jsonl()?)?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    let s: Vec<f64> = features.iter().map(|f| f.similarity).collect();
    let d: Vec<f64> = features.iter().map(|f| f.variability).collect();
    println!(
        "baseline of {} strings in {:.1}s: mean S_n {:.4}, mean D_n2 {:.4}",
        strings.len(),
        t0.elapsed().as_secs_f64(),
        umid_core::linalg::mean(&s),
        umid_core::linalg::mean(&d)
    );
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct QueryLine {
    text: String,
    #[serde(default)]
    is_member: Option<bool>,
}

fn read_queries(path: &Path) -> CliResult<(Vec<String>, Option<Vec<bool>>)> {
    require(path, "query file")?;
    let lines: Vec<QueryLine> = umid_core::io::read_jsonl(path)?;
    if lines.is_empty() {
        return Err(UmidError::Argument(format!("{} has no queries", path.display())).into());
    }
    let texts = lines.iter().map(|l| l.text.clone()).collect();
    let truth = lines.iter().map(|l| l.is_member).collect::<Option<Vec<bool>>>();
    Ok((texts, truth))
}

struct AuditPaths {
    model: PathBuf,
    baseline: PathBuf,
    queries: PathBuf,
    local_samples: Option<PathBuf>,
}

fn ensemble_config(p: &Params) -> CliResult<EnsembleConfig> {
    let d = EnsembleConfig::default();
    let detectors = p.get_list("detectors", d.detectors.clone())?;
    let cfg = EnsembleConfig {
        threshold: p.get("threshold", d.threshold)?,
        enhanced_threshold: p.get("enhanced_threshold", d.enhanced_threshold)?,
        detectors,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn audit(
    ctx: &Ctx,
    common: &Common,
    paths: &AuditPaths,
    inv: &InversionFlags,
    threshold: Option<usize>,
    enhanced: bool,
    repeat: Option<usize>,
) -> CliResult<()> {
    let allowed = [
        "runs",
        "iters",
        "lr",
        "threshold",
        "enhanced_threshold",
        "detectors",
        "contamination",
        "repeat",
        "enhanced",
        "extractor_dim",
        "seed",
    ];
    let mut flags = inversion_flags(inv);
    flags.push(("threshold", flag(&threshold)));
    flags.push(("repeat", flag(&repeat)));
    flags.push(("enhanced", enhanced.then(|| "true".to_string())));
    let p = resolve(ctx, common, &allowed, &["seed"], flags)?;
    let root: u64 = p.get("seed", 0)?;
    let ens_cfg = ensemble_config(&p)?;
    let repeat: usize = p.get("repeat", 1)?;
    if repeat == 0 {
        return Err(CliError::config("repeat must be at least 1"));
    }
    let enhanced: bool = p.get("enhanced", false)?;
    let base_inv = inversion_config(&p, 0)?;
    let contamination: f64 = p.get("contamination", DetectorParams::default().contamination)?;
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(CliError::config("contamination must be in (0, 1)"));
    }

    let model = load_model(&paths.model)?;
    require(&paths.baseline, "baseline file")?;
    let baseline = BaselineFile::load(&paths.baseline)?;
    let enc = &model.encoder;
    if baseline.header.input_dim != enc.input_dim() || baseline.header.embed_dim != enc.embed_dim() {
        return Err(CliError::dims(format!(
            "baseline was built on an encoder with dims {}->{}, model has {}->{}",
            baseline.header.input_dim,
            baseline.header.embed_dim,
            enc.input_dim(),
            enc.embed_dim()
        )));
    }
    let (queries, truth) = read_queries(&paths.queries)?;
    let local = if enhanced {
        let path = paths
            .local_samples
            .as_ref()
            .ok_or_else(|| CliError::config("--enhanced needs --local-samples"))?;
        require(path, "local samples file")?;
        let map = read_local_samples(path)?;
        let mut per_query = Vec::with_capacity(queries.len());
        for q in &queries {
            let m = map
                .get(q)
                .ok_or_else(|| CliError::missing(format!("no local samples for query {q:?}")))?;
            if m.ncols() != enc.input_dim() {
                return Err(CliError::dims(format!(
                    "local samples for {q:?} have dimension {}, model expects {}",
                    m.ncols(),
                    enc.input_dim()
                )));
            }
            per_query.push(m.clone());
        }
        Some(per_query)
    } else {
        None
    };
    let extractor_dim: usize = p.get("extractor_dim", DEFAULT_EXTRACTOR_DIM)?;
    let extractor_seed = derive_seed(root, "enhancement/extractor", 0);
    let extractor = RandomProjection::new(enc.input_dim(), extractor_dim, extractor_seed);

    let mut all_seeds = vec![("root", root), ("extractor", extractor_seed)];
    let rep_roots: Vec<u64> = (0..repeat).map(|k| derive_seed(root, "audit/repeat", k as u64)).collect();
    let labels: Vec<String> = (0..repeat).map(|k| format!("repeat_{k}")).collect();
    for (l, s) in labels.iter().zip(&rep_roots) {
        all_seeds.push((l.as_str(), *s));
    }
    let mut run = start(ctx, "audit", &p, seeds(&all_seeds));
    let features = baseline.features();
    let mut runs = Vec::new();
    for (k, &rep_root) in rep_roots.iter().enumerate() {
        let plan = AuditPlan::from_seed(rep_root, &base_inv);
        let params = DetectorParams {
            contamination,
            ..plan.detectors.clone()
        };
        let ensemble = Ensemble::fit(&ens_cfg.detectors, &features, &params)?;
        for d in &ensemble.detectors {
            for w in &d.warnings {
                eprintln!("warning: {}: {w}", d.kind);
            }
        }
        let enhancement = local.as_ref().map(|l| Enhancement {
            extractor: &extractor,
            local_samples: l.iter().map(|m| m.view()).collect::<Vec<ArrayView2<f64>>>(),
            seed: derive_seed(rep_root, "enhancement/kmeans", 0),
        });
        let outcome = audit_batch(
            enc,
            &ensemble,
            &queries,
            truth.as_deref(),
            &plan.query_inversion,
            &ens_cfg,
            enhancement.as_ref(),
        )?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        let name = if repeat == 1 {
            "decisions.jsonl".to_string()
        } else {
            format!("decisions_{k}.jsonl")
        };
        run.write_jsonl(&common.out.join(name), &outcome.decisions)?;
        let members = outcome.decisions.iter().filter(|d| d.decision.is_member()).count();
        match outcome.metrics {
            Some(m) => {
                println!(
                    "seed {rep_root}: accuracy {:.4} precision {:.4} recall {:.4} ({} of {} judged member), {:.1} ms/query",
                    m.accuracy,
                    m.precision,
                    m.recall,
                    members,
                    queries.len(),
                    m.mean_latency_ms
                );
                runs.push((rep_root, m));
            }
            None => println!("seed {rep_root}: {members} of {} judged member", queries.len()),
        }
    }
    if !runs.is_empty() {
        let summary = RepeatedMetrics::new(runs);
        run.write_lines(&common.out.join("metrics.csv"), &summary.to_csv())?;
        println!(
            "accuracy {} precision {} recall {}",
            summary.accuracy, summary.precision, summary.recall
        );
    }
    let m = run.finish(&common.out.join("manifest.json"))?;
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

const THEORY_KEYS: [&str; 9] = ["d", "m", "gamma_in", "leakage", "eps_opt", "n", "trials", "seed", "n_grid"];

fn theory_params(p: &Params) -> CliResult<TheoryParams> {
    let d = TheoryParams::default();
    let params = TheoryParams {
        dim: p.get("d", d.dim)?,
        num_prototypes: p.get("m", d.num_prototypes)?,
        gamma_in: p.get("gamma_in", d.gamma_in)?,
        leakage: p.get("leakage", d.leakage)?,
        eps_opt: p.get("eps_opt", d.eps_opt)?,
        seed: p.get("seed", d.seed)?,
    };
    params.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(params)
}

fn verify_theory_cmd(ctx: &Ctx, common: &Common, n: Option<usize>, trials: Option<usize>) -> CliResult<()> {
    let p = resolve(ctx, common, &THEORY_KEYS, &["seed"], vec![("n", flag(&n)), ("trials", flag(&trials))])?;
    let params = theory_params(&p)?;
    let n: usize = p.get("n", 100)?;
    let trials: usize = p.get("trials", 1000)?;
    if n == 0 || trials == 0 {
        return Err(CliError::config("n and trials must be positive"));
    }
    let mut run = start(ctx, "verify-theory", &p, seeds(&[("theory", params.seed)]));
    match verify_theorem(&params, n, trials) {
        Ok(report) => {
            run.write_lines(&common.out.join("theory.csv"), &report.to_csv())?;
            run.write_json(&common.out.join("theory.json"), &report)?;
            let m = run.finish(&common.out.join("manifest.json"))?;
            println!(
                "gaps: S {:.4}, D2 {:.4}; thresholds s {:.4}, d2 {:.4}; rho {:.4}",
                report.gap_s, report.gap_d, report.s_threshold, report.d2_threshold, report.coherence
            );
            println!("separation success {:.4} over {trials} trials at n={n}", report.success_rate);
            println!("run {} -> {}", m.run_id, common.out.display());
            Ok(())
        }
        Err(UmidError::NoSeparation { gap_s, gap_d }) => {
            run.write_json(
                &common.out.join("theory.json"),
                &serde_json::json!({"refused": true, "gap_s": gap_s, "gap_d": gap_d}),
            )?;
            run.finish(&common.out.join("manifest.json"))?;
            Err(UmidError::NoSeparation { gap_s, gap_d }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn verify_concentration_cmd(
    ctx: &Ctx,
    common: &Common,
    n_grid: Option<String>,
    trials: Option<usize>,
) -> CliResult<()> {
    let p = resolve(ctx, common, &THEORY_KEYS, &["seed"], vec![("n_grid", n_grid), ("trials", flag(&trials))])?;
    let params = theory_params(&p)?;
    let grid: Vec<usize> = p.get_list("n_grid", vec![10, 40, 160, 640])?;
    let trials: usize = p.get("trials", 1000)?;
    let mut run = start(ctx, "verify-concentration", &p, seeds(&[("theory", params.seed)]));
    let report = verify_concentration(&params, &grid, trials).map_err(|e| match e {
        UmidError::Argument(m) => CliError::config(m),
        other => other.into(),
    })?;
    run.write_lines(&common.out.join("concentration.csv"), &report.to_csv())?;
    run.write_json(&common.out.join("concentration.json"), &report)?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    for r in &report.rows {
        println!("n={:>5}  rms S_n {:.6}  rms D_n2 {:.6}", r.n, r.rms_s, r.rms_d2);
    }
    println!("log-log slope: S_n {:.4}, D_n2 {:.4}", report.slope_s, report.slope_d2);
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

fn eval_defense_cmd(
    ctx: &Ctx,
    common: &Common,
    model_path: &Path,
    queries_path: &Path,
    mut flags: Vec<(&'static str, Option<String>)>,
    inv: &InversionFlags,
) -> CliResult<()> {
    let allowed = [
        "defense",
        "epsilon",
        "delta",
        "sensitivity",
        "sigma",
        "covert",
        "count",
        "threshold",
        "runs",
        "iters",
        "lr",
        "seed",
    ];
    flags.extend(inversion_flags(inv));
    let p = resolve(ctx, common, &allowed, &["seed"], flags)?;
    let root: u64 = p.get("seed", 0)?;
    let d = DpConfig::default();
    let scenario = match p.get_str("defense", "dp").as_str() {
        "dp" => {
            let sigma = match p.snapshot().get("sigma") {
                Some(_) => Some(p.get("sigma", 0.0)?),
                None => None,
            };
            let cfg = DpConfig {
                epsilon: p.get("epsilon", d.epsilon)?,
                delta: p.get("delta", d.delta)?,
                sensitivity: p.get("sensitivity", d.sensitivity)?,
                sigma_override: sigma,
                seed: derive_seed(root, "defense/dp", 0),
            };
            cfg.validate()?;
            DefenseScenario::Dp(cfg)
        }
        "filter" => DefenseScenario::Filter {
            covert: p.get("covert", false)?,
            seed: derive_seed(root, "defense/filter", 0),
        },
        other => return Err(CliError::config(format!("invalid value {other:?} for key defense (dp or filter)"))),
    };
    let count: usize = p.get("count", 100)?;
    let inv_cfg = inversion_config(&p, 0)?;
    let mut plan = AuditPlan::from_seed(root, &inv_cfg);
    plan.ensemble.threshold = p.get("threshold", plan.ensemble.threshold)?;
    plan.ensemble.validate()?;

    let model = load_model(model_path)?;
    let (queries, truth) = read_queries(queries_path)?;
    let truth = truth.ok_or_else(|| CliError::config("eval-defense needs is_member labels on every query"))?;
    let strings_seed = derive_seed(root, "baseline/strings", 0);
    let plain = generate(&GibberishConfig::plain(count, strings_seed))?;
    let covert = generate(&GibberishConfig::covert(count, strings_seed))?;
    let mut run = start(ctx, "eval-defense", &p, seeds(&[("root", root), ("strings", strings_seed)]));
    let inputs = DefenseInputs {
        queries: &queries,
        truth: &truth,
        plain_baseline: &plain,
        covert_baseline: &covert,
        plan: &plan,
    };
    let report = eval_defense(&model.encoder, &scenario, &inputs, None)?;
    run.write_json(&common.out.join("defense.json"), &report)?;
    run.write_lines(&common.out.join("defense.csv"), &report.to_csv())?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    print!("{}", report.to_csv());
    if let Some(s) = report.sigma {
        println!("sigma {s:.4}");
    }
    if let Some(f) = report.flagged_baseline_fraction {
        println!("baseline strings flagged: {:.1}%", 100.0 * f);
    }
    println!("accuracy drop {:.4}, latency ratio {:.3}", report.accuracy_drop, report.latency_ratio);
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

fn metrics_cmd(ctx: &Ctx, common: &Common, decisions: &Path, truth: &Path, threshold: Option<usize>) -> CliResult<()> {
    let p = resolve(ctx, common, &["threshold", "seed"], &[], vec![("threshold", flag(&threshold))])?;
    require(decisions, "decisions file")?;
    let decided: Vec<AuditDecision> = umid_core::io::read_jsonl(decisions)?;
    let (texts, labels) = read_queries(truth)?;
    let labels = labels.ok_or_else(|| CliError::config("truth file needs is_member on every line"))?;
    let by_text: BTreeMap<&str, bool> = texts.iter().map(String::as_str).zip(labels.iter().copied()).collect();
    let mut aligned = Vec::with_capacity(decided.len());
    for d in &decided {
        let t = by_text
            .get(d.text.as_str())
            .ok_or_else(|| CliError::missing(format!("no ground truth for {:?}", d.text)))?;
        aligned.push(*t);
    }
    let report = match p.snapshot().get("threshold") {
        Some(_) => {
            let n: usize = p.get("threshold", 3)?;
            if n == 0 || decided.iter().any(|d| n > d.votes.len()) {
                return Err(CliError::config(format!("threshold {n} exceeds the recorded voters")));
            }
            MetricsReport::rethreshold(&decided, &aligned, n)
        }
        None => MetricsReport::from_decisions(&decided, &aligned),
    };
    let mut run = start(ctx, "metrics", &p, BTreeMap::new());
    let summary = RepeatedMetrics::new(vec![(0, report)]);
    run.write_lines(&common.out.join("metrics.csv"), &summary.to_csv())?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} (TP {} FP {} TN {} FN {})",
        report.accuracy, report.precision, report.recall, report.tp, report.fp, report.tn, report.fn_
    );
    println!("run {} -> {}", m.run_id, common.out.display());
    Ok(())
}

fn gen_gibberish(ctx: &Ctx, common: &Common, count: Option<usize>, mode: Option<String>) -> CliResult<()> {
    let p = resolve(
        ctx,
        common,
        &["count", "mode", "min_len", "max_len", "seed"],
        &["seed"],
        vec![("count", flag(&count)), ("mode", mode)],
    )?;
    let root: u64 = p.get("seed", 0)?;
    let cfg = gibberish_config(&p, derive_seed(root, "baseline/strings", 0))?;
    cfg.validate()?;
    let mut run = start(ctx, "gen-gibberish", &p, seeds(&[("root", root), ("strings", cfg.seed)]));
    let strings = generate(&cfg)?;
    let mut text = strings.join("\n");
    text.push('\n');
    run.write_lines(&common.out.join("gibberish.txt"), &text)?;
    let m = run.finish(&common.out.join("manifest.json"))?;
    println!("{} {:?} strings -> {}", strings.len(), cfg.mode, common.out.display());
    println!("run {}", m.run_id);
    Ok(())
}

fn rerun(manifest: &Path) -> CliResult<()> {
    let m = load_manifest(manifest)?;
    if m.command == "rerun" || m.argv.first().map(String::as_str) == Some("rerun") {
        return Err(CliError::config("a rerun manifest cannot be re-run"));
    }
    if !m.cwd.as_os_str().is_empty() {
        std::env::set_current_dir(&m.cwd)
            .map_err(|e| CliError::missing(format!("recorded working directory {}: {e}", m.cwd.display())))?;
    }
    println!("re-running {} (run {})", m.command, m.run_id);
    crate::run(m.argv, m.env_seed)
}
