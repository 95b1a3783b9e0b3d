//! One function per subcommand. Shared shape: load the config, stack the
//! flag overrides on top, print the reproducibility banner (seed, its
//! source, config hash, stream names), validate everything, and only then
//! touch the filesystem.

use std::fs;
use std::path::Path;

use langtopo_core::codebook::gumbel_max_equivalence_test;
use langtopo_core::experiment;
use langtopo_core::graph::{generate_sbm, load_graph, save_graph, Graph, GraphError, Split};
use langtopo_core::metrics::{write_jsonl, FinalReport};
use langtopo_core::rng;
use langtopo_core::stage1::{self, Stage1Artifacts, Stage1Error};
use langtopo_core::stage2::{self, Stage2Artifacts, Stage2Error};
use langtopo_core::student::{build_vocab, StudentDims, StudentError, StudentParams};
use rand::Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, SeedSource, STREAM_NAMES};
use crate::{
    AblateHopsArgs, CliError, CommonArgs, CompareLookupArgs, EvalArgs, GenSbmArgs, GumbelCheckArgs,
    TrainStage1Args, TrainStage2Args,
};

/// Loads the config and applies the shared overrides. The banner is
/// printed later, once command-specific overrides have landed, so the
/// reported hash is the effective one.
fn setup(common: &CommonArgs) -> Result<(ExperimentConfig, SeedSource), CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    let source = cfg.apply_seed_overrides(common.seed)?;
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok((cfg, source))
}

fn banner(name: &str, cfg: &ExperimentConfig, source: SeedSource) {
    eprintln!("{name}: seed {} (from {}), config {}", cfg.seed, source.as_str(), cfg.hash());
    eprintln!("rng streams: {}", STREAM_NAMES.join(" "));
}

/// The dataset named by the config: loaded from `data.dir` when set
/// (which must then exist), generated in memory otherwise.
fn resolve_graph(cfg: &ExperimentConfig) -> Result<Graph, CliError> {
    match &cfg.data.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Usage(format!(
                    "dataset directory {} does not exist (run gen-sbm first)",
                    dir.display()
                )));
            }
            load_graph(dir).map_err(from_graph)
        }
        None => generate_sbm(&cfg.data.sbm_spec(cfg.seed)).map_err(from_graph),
    }
}

fn from_graph(e: GraphError) -> CliError {
    match e {
        GraphError::BadSpec(_)
        | GraphError::Malformed { .. }
        | GraphError::LabelOutOfRange { .. }
        | GraphError::CountMismatch { .. }
        | GraphError::BadHops(_) => CliError::Usage(e.to_string()),
        GraphError::Io { .. } | GraphError::NodeOutOfRange { .. } | GraphError::Num(_) => {
            CliError::Runtime(e.to_string())
        }
    }
}

fn from_stage1(e: Stage1Error) -> CliError {
    match e {
        Stage1Error::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn from_stage2(e: Stage2Error) -> CliError {
    match e {
        Stage2Error::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn from_student(e: StudentError) -> CliError {
    match e {
        StudentError::Vocab(_) | StudentError::Malformed { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_sbm(args: GenSbmArgs) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    let d = &mut cfg.data;
    if let Some(v) = args.n {
        d.n = v;
    }
    if let Some(v) = args.blocks {
        d.blocks = v;
    }
    if let Some(v) = args.p_in {
        d.p_in = v;
    }
    if let Some(v) = args.p_out {
        d.p_out = v;
    }
    if let Some(v) = args.d_in {
        d.d_in = v;
    }
    if let Some(v) = args.d_pos {
        d.d_pos = v;
    }
    if let Some(v) = args.text_signal {
        d.text_signal = v;
    }
    if let Some(v) = args.train_ratio {
        d.train_ratio = v;
    }
    if let Some(v) = args.val_ratio {
        d.val_ratio = v;
    }
    if let Some(dir) = args.out.clone() {
        cfg.data.dir = Some(dir);
    }
    banner("gen-sbm", &cfg, source);

    let out = match &cfg.data.dir {
        Some(dir) => dir.clone(),
        None => cfg.out_dir.join("data"),
    };
    let graph = generate_sbm(&cfg.data.sbm_spec(cfg.seed)).map_err(from_graph)?;
    save_graph(&graph, &out).map_err(from_graph)?;
    eprintln!(
        "wrote {} ({} nodes, {} edges, {} classes)",
        out.display(),
        graph.n(),
        graph.num_edges(),
        graph.num_classes()
    );
    Ok(())
}

pub fn train_stage1(args: TrainStage1Args) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.stage1.epochs = v;
    }
    if let Some(v) = args.strategy.clone() {
        cfg.codebook.strategy = v;
    }
    banner("train-stage1", &cfg, source);

    let s1 = cfg.stage1_config()?;
    let graph = resolve_graph(&cfg)?;
    let outcome = stage1::train_stage1(&graph, &s1, cfg.seed).map_err(from_stage1)?;

    let dir = cfg.out_dir.join("stage1");
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    outcome.artifacts.save(&dir).map_err(from_stage1)?;
    write_jsonl(&dir.join("metrics.jsonl"), &outcome.metrics)
        .map_err(|e| CliError::Runtime(format!("cannot write metrics: {e}")))?;

    let last = outcome.metrics.last();
    eprintln!(
        "stage 1 done: {} epochs, best epoch {}, final loss {}",
        outcome.metrics.len(),
        outcome.best_epoch,
        last.map_or(f64::NAN, |m| m.loss_total),
    );
    eprintln!("checkpoint: {}", dir.display());
    Ok(())
}

/// The stage-1 checkpoint for a stage-2 run. Normally it must exist on
/// disk; with `--no-align` nothing is distilled from it, so a fresh
/// untrained model (deterministic in the seed) stands in when the
/// checkpoint is absent.
fn stage1_checkpoint(
    cfg: &ExperimentConfig,
    graph: &Graph,
    allow_untrained: bool,
) -> Result<Stage1Artifacts, CliError> {
    let dir = cfg.out_dir.join("stage1");
    if dir.is_dir() {
        return Stage1Artifacts::load(&dir).map_err(from_stage1);
    }
    if allow_untrained {
        let mut s1 = cfg.stage1_config()?;
        s1.epochs = 0;
        return Ok(stage1::train_stage1(graph, &s1, cfg.seed).map_err(from_stage1)?.artifacts);
    }
    Err(CliError::Usage(format!(
        "no stage-1 checkpoint at {} (run train-stage1 first)",
        dir.display()
    )))
}

fn student_init(
    cfg: &ExperimentConfig,
    graph: &Graph,
    artifacts: &Stage1Artifacts,
    s2: &langtopo_core::stage2::Stage2Config,
    vocab_size: usize,
) -> Result<StudentParams, CliError> {
    let dims = StudentDims {
        d_tok: s2.d_tok,
        d_h: s2.d_h,
        d_rep: s2.d_rep,
        d_code: artifacts.model.codebook.d_code(),
        num_classes: graph.num_classes(),
        attention: s2.attention,
    };
    StudentParams::init(vocab_size, &dims, cfg.seed).map_err(from_student)
}

pub fn train_stage2(args: TrainStage2Args) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    if args.no_align {
        cfg.stage2.alpha_mse = 0.0;
        cfg.stage2.beta_kl = 0.0;
    }
    if let Some(v) = args.epochs {
        cfg.stage2.epochs = v;
    }
    if let Some(v) = args.hops {
        cfg.stage2.hops = v;
    }
    banner("train-stage2", &cfg, source);

    let s2 = cfg.stage2_config()?;
    let graph = resolve_graph(&cfg)?;
    let artifacts = stage1_checkpoint(&cfg, &graph, args.no_align)?;
    let vocab = build_vocab(&graph, s2.bins, s2.vocab_max).map_err(from_student)?;
    let init = student_init(&cfg, &graph, &artifacts, &s2, vocab.len())?;
    let outcome =
        stage2::train_stage2(&graph, &artifacts, init, &vocab, &s2, cfg.seed).map_err(from_stage2)?;

    let dir = cfg.out_dir.join(if args.no_align { "stage2-noalign" } else { "stage2" });
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Stage2Artifacts { student: outcome.student, vocab }.save(&dir).map_err(from_stage2)?;
    write_jsonl(&dir.join("metrics.jsonl"), &outcome.metrics)
        .map_err(|e| CliError::Runtime(format!("cannot write metrics: {e}")))?;

    let last = outcome.metrics.last();
    eprintln!(
        "stage 2 done: {} epochs, best epoch {}, final val acc {}",
        outcome.metrics.len(),
        outcome.best_epoch,
        last.map_or(f64::NAN, |m| m.val_acc),
    );
    eprintln!("checkpoint: {}", dir.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    if args.no_align {
        cfg.stage2.alpha_mse = 0.0;
        cfg.stage2.beta_kl = 0.0;
    }
    banner("eval", &cfg, source);

    let s2 = cfg.stage2_config()?;
    let dir = cfg.out_dir.join(if args.no_align { "stage2-noalign" } else { "stage2" });
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "no student checkpoint at {} (run train-stage2 first)",
            dir.display()
        )));
    }
    let artifacts = Stage2Artifacts::load(&dir).map_err(from_stage2)?;
    let graph = resolve_graph(&cfg)?;
    let test_acc =
        stage2::evaluate_split(&artifacts.student, &artifacts.vocab, &graph, Split::Test, &s2)
            .map_err(from_stage2)?;
    let report = FinalReport { test_acc, seeds: vec![cfg.seed], config_hash: cfg.hash() };
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

pub fn compare_lookup(args: CompareLookupArgs) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.epochs {
        cfg.stage1.epochs = v;
    }
    banner("compare-lookup", &cfg, source);

    let base = cfg.stage1_config()?;
    let graph = resolve_graph(&cfg)?;
    let rows = experiment::compare_lookup(&graph, &base, &cfg.seed_list()).map_err(from_stage1)?;

    let mut csv = String::from("strategy,perplexity,usage,loss_node,loss_edge\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.strategy.as_str(),
            r.perplexity,
            r.usage,
            r.loss_node,
            r.loss_edge
        ));
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join("compare_lookup.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn ablate_hops(args: AblateHopsArgs) -> Result<(), CliError> {
    let (mut cfg, source) = setup(&args.common)?;
    if let Some(v) = args.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = args.epochs {
        cfg.stage2.epochs = v;
    }
    banner("ablate-hops", &cfg, source);

    let base = cfg.stage2_config()?;
    let graph = resolve_graph(&cfg)?;
    let artifacts = stage1_checkpoint(&cfg, &graph, false)?;
    let rows =
        experiment::ablate_hops(&graph, &artifacts, &base, &cfg.seed_list()).map_err(from_stage2)?;

    let mut csv = String::from("hops,aligned,test_acc\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.hops, r.aligned, r.test_acc));
    }
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join("ablate_hops.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// The printed report of one Monte Carlo agreement check.
#[derive(Serialize)]
struct GumbelCheckOutput {
    k: usize,
    samples: usize,
    tolerance: f64,
    logits: Vec<f64>,
    softmax: Vec<f64>,
    empirical: Vec<f64>,
    tv_distance: f64,
    pass: bool,
}

pub fn gumbel_check(args: GumbelCheckArgs) -> Result<(), CliError> {
    let (cfg, source) = setup(&args.common)?;
    banner("gumbel-check", &cfg, source);

    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        return Err(CliError::Usage(format!(
            "--tolerance must be positive and finite, got {}",
            args.tolerance
        )));
    }

    let mut r = rng::stream(cfg.seed, "gumbel-max-check");
    let logits: Vec<f64> = (0..args.k).map(|_| r.random_range(-2.0..2.0)).collect();
    let report = gumbel_max_equivalence_test(&logits, args.samples, &mut r)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let pass = report.tv_distance < args.tolerance;
    let out = GumbelCheckOutput {
        k: args.k,
        samples: args.samples,
        tolerance: args.tolerance,
        logits,
        softmax: report.softmax,
        empirical: report.empirical,
        tv_distance: report.tv_distance,
        pass,
    };
    println!("{}", serde_json::to_string(&out).expect("report serializes"));
    if pass {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "total variation {} exceeds tolerance {} ({} samples, K = {})",
            report.tv_distance, args.tolerance, args.samples, args.k
        )))
    }
}
