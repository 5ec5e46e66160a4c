use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use tdkd_core::corpus::{Dataset, SealedReferences, Split, Utterance};
use tdkd_core::decoding::{wer, Fusion, HypothesisRecord, WerReport};
use tdkd_core::harness::bench::{self, loglog_slope, measure};
use tdkd_core::harness::experiment::{self, MatrixOptions};
use tdkd_core::harness::targets::{fuse_with_lm, make_target, one_best_target, pseudo_transcribe};
use tdkd_core::harness::train::decode_all;
use tdkd_core::harness::{ExperimentConfig, KdTarget, ResultRow, ResultsTable, Strategy, TrainExample};
use tdkd_core::kd::{read_target_cache, write_target_cache, KdTargetSet, KdVariant};
use tdkd_core::lm::NgramLm;
use tdkd_core::nnet::TransducerModel;
use tdkd_core::Error;

#[derive(Parser)]
#[command(name = "tdkd", version, about = "Knowledge distillation for neural transducers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the JSON config.
#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// KD loss weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Frame delay of one-best targets.
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// LM fusion weight.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Beam width.
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// full | collapsed | onebest
    #[arg(long, global = true)]
    variant: Option<KdVariant>,
    /// baseline | pseudo | st1 | st2
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Causal student encoder.
    #[arg(long, global = true)]
    streaming: bool,
    /// Skip the transducer loss on pseudo-transcribed utterances.
    #[arg(long, global = true)]
    no_pseudo_nll: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the large non-streaming teacher on the labelled split.
    TrainTeacher {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the n-gram LM on the text split.
    TrainLm {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cache one-best KD targets (and pseudo-transcriptions for unlabelled data).
    MakeTargets {
        #[arg(long)]
        teacher: PathBuf,
        /// labelled | unlabelled
        #[arg(long, default_value = "labelled")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Fuse targets and pseudo-transcription search with the LM at this weight.
        #[arg(long)]
        fuse_lm: Option<f64>,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Write the pseudo-transcriptions as hypothesis JSON Lines.
        #[arg(long)]
        pseudo_out: Option<PathBuf>,
    },
    /// Train a student with the selected strategy and KD variant.
    TrainStudent {
        /// Target caches from make-targets.
        #[arg(long)]
        targets: Vec<PathBuf>,
        /// Initial checkpoint for st2.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Teacher checkpoint, needed by the full and collapsed variants.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split and score it.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// dev | test | unlabelled
        #[arg(long, default_value = "dev")]
        split: Split,
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Append a (dev, test) row to this results table.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        /// Write hypotheses as JSON Lines.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Measure stored target values and loss time per KD variant.
    Bench {
        /// Semicolon-separated T,U,K triples.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a results table, or run the full experiment matrix with --run.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        run: bool,
        /// Comma-separated seeds for --run.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(l) = common.lambda {
        cfg.kd.lambda = l;
    }
    if let Some(t) = common.tau {
        cfg.kd.tau = t;
    }
    if let Some(b) = common.beta {
        cfg.kd.beta_lm = b;
    }
    if let Some(b) = common.beam {
        cfg.beam = b;
        cfg.eval_beam = b;
    }
    if let Some(v) = common.variant {
        cfg.kd.variant = v;
    }
    if let Some(s) = common.strategy {
        cfg.strategy = s;
    }
    if common.streaming {
        cfg.streaming = true;
    }
    if common.no_pseudo_nll {
        cfg.pseudo_nll = false;
    }
    Ok(cfg)
}

fn require_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("--data (or data_dir in the config) is required".into()))?;
    Ok(Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?)
}

fn load_model(path: &Path) -> Result<TransducerModel> {
    Ok(TransducerModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            cfg.synth.validate()?;
            let (data, sealed) = tdkd_core::corpus::generate(&cfg.synth)?;
            data.save(&out, &sealed)?;
            info!(
                "wrote {} labelled, {} unlabelled, {} dev, {} test utterances to {}",
                data.labelled.len(),
                data.unlabelled.len(),
                data.dev.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::TrainTeacher { out } => {
            cfg.validate()?;
            let data = require_data(&cfg)?;
            let outcome = experiment::train_teacher(&cfg, &data)?;
            outcome.model.save(&out)?;
            info!(
                "teacher: best epoch {} dev WER {:.2}%",
                outcome.best_epoch,
                100.0 * outcome.best_dev_wer
            );
        }
        Command::TrainLm { out } => {
            let data = require_data(&cfg)?;
            experiment::train_lm(&cfg, &data)?.save(&out)?;
        }
        Command::MakeTargets {
            teacher,
            split,
            out,
            fuse_lm,
            lm,
            pseudo_out,
        } => make_targets(&cfg, &teacher, split, &out, fuse_lm, lm.as_deref(), pseudo_out.as_deref())?,
        Command::TrainStudent {
            targets,
            init,
            teacher,
            out,
        } => {
            cfg.init_checkpoint = init.clone();
            let cfg = cfg.normalized()?;
            let data = require_data(&cfg)?;
            let init = init.as_deref().map(load_model).transpose()?;
            let teacher = teacher.as_deref().map(load_model).transpose()?;
            let examples = student_examples(&cfg, &data, &targets, teacher.as_ref())?;
            let outcome = experiment::train_student(&cfg, &data, &examples, init.as_ref())?;
            outcome.model.save(&out)?;
            info!(
                "student ({}): best epoch {} dev WER {:.2}%",
                cfg.strategy.name(),
                outcome.best_epoch,
                100.0 * outcome.best_dev_wer
            );
        }
        Command::Eval {
            model,
            split,
            lm,
            results,
            label,
            hyps,
        } => eval(&cfg, &model, split, lm.as_deref(), results.as_deref(), label, hyps.as_deref())?,
        Command::Bench { sizes, reps, out } => run_bench(cfg.kd.variant, &cli.common, sizes.as_deref(), reps, out.as_deref())?,
        Command::Report {
            results,
            baseline,
            run,
            seeds,
            out_dir,
        } => {
            if run {
                run_matrix(&cfg, cli.common.beta, &seeds, out_dir.as_deref())?;
            } else {
                let path = results.ok_or_else(|| Error::Config("report needs --results or --run".into()))?;
                print!("{}", ResultsTable::load(&path)?.render(baseline.as_deref()));
            }
        }
    }
    Ok(())
}

fn fusion_lm(fuse_lm: Option<f64>, lm: Option<&Path>) -> Result<Option<(NgramLm, f64)>> {
    match fuse_lm {
        None => Ok(None),
        Some(beta) => {
            let path = lm.ok_or_else(|| Error::Config("--fuse-lm needs --lm".into()))?;
            if !(beta >= 0.0) {
                bail!(Error::Config(format!("fusion weight must be >= 0, got {beta}")));
            }
            Ok(Some((NgramLm::load(path)?, beta)))
        }
    }
}

fn make_targets(
    cfg: &ExperimentConfig,
    teacher: &Path,
    split: Split,
    out: &Path,
    fuse_lm: Option<f64>,
    lm: Option<&Path>,
    pseudo_out: Option<&Path>,
) -> Result<()> {
    let fused = fusion_lm(fuse_lm, lm)?;
    let data = require_data(cfg)?;
    let teacher = load_model(teacher)?;
    let fusion = fused.as_ref().map(|(lm, beta)| Fusion { lm, beta: *beta });
    let pairs: Vec<(String, tdkd_core::corpus::Features, tdkd_core::TokenSeq)> = match split {
        Split::Labelled => data
            .labelled
            .iter()
            .map(|u| (u.id.clone(), u.features.clone(), u.tokens.clone()))
            .collect(),
        Split::Unlabelled => {
            let pseudo = pseudo_transcribe(&teacher, &data.unlabelled, cfg.beam, fusion)?;
            if let Some(p) = pseudo_out {
                let feats: Vec<_> = data.unlabelled.iter().map(|u| &u.features).collect();
                let hyps = decode_all(&teacher, &feats, cfg.beam, fusion)?;
                let mut w = BufWriter::new(std::fs::File::create(p)?);
                for (u, h) in data.unlabelled.iter().zip(&hyps) {
                    writeln!(w, "{}", serde_json::to_string(&HypothesisRecord::new(&u.id, h))?)?;
                }
                w.flush()?;
            }
            data.unlabelled
                .iter()
                .zip(pseudo)
                .map(|(u, y)| (u.id.clone(), u.features.clone(), y))
                .collect()
        }
        other => bail!(Error::Config(format!("targets are built for labelled or unlabelled data, not {}", other.name()))),
    };
    let mut targets = Vec::with_capacity(pairs.len());
    for (id, x, y) in &pairs {
        let t = one_best_target(&teacher, id, x, y, None)?;
        targets.push(match fusion {
            Some(f) => fuse_with_lm(&t, y, f)?,
            None => t,
        });
    }
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    write_target_cache(&mut w, &targets)?;
    w.flush()?;
    let stored: usize = targets.iter().map(KdTargetSet::stored_values).sum();
    info!("wrote {} target sets ({stored} values) to {}", targets.len(), out.display());
    Ok(())
}

fn read_caches(paths: &[PathBuf]) -> Result<BTreeMap<String, KdTargetSet>> {
    let mut map = BTreeMap::new();
    for p in paths {
        let f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        for t in read_target_cache(BufReader::new(f))? {
            map.insert(t.id.clone(), t);
        }
    }
    Ok(map)
}

/// Assembles training examples from the dataset and target caches.
/// Unlabelled utterances take part when the caches hold targets for them.
fn student_examples(
    cfg: &ExperimentConfig,
    data: &Dataset,
    caches: &[PathBuf],
    teacher: Option<&TransducerModel>,
) -> Result<Vec<TrainExample>> {
    let targets = read_caches(caches)?;
    let kd = matches!(cfg.strategy, Strategy::St1 | Strategy::St2);
    if kd && cfg.kd.variant != KdVariant::OneBest && teacher.is_none() {
        bail!(Error::Config("full and collapsed variants need --teacher".into()));
    }
    let attach = |id: &str, x: &tdkd_core::corpus::Features, y: &tdkd_core::TokenSeq| -> Result<Option<KdTarget>> {
        if !kd {
            return Ok(None);
        }
        Ok(Some(match (cfg.kd.variant, teacher) {
            (KdVariant::OneBest, _) => KdTarget::OneBest(
                targets
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no target for {id}")))?,
            ),
            (v, Some(t)) => make_target(t, id, x, y, v, None)?,
            (_, None) => unreachable!("checked above"),
        }))
    };
    let mut out = Vec::new();
    for u in &data.labelled {
        out.push(TrainExample {
            target: attach(&u.id, &u.features, &u.tokens)?,
            ..TrainExample::supervised(u)
        });
    }
    if cfg.strategy != Strategy::Baseline {
        for u in &data.unlabelled {
            if let Some(t) = targets.get(&u.id) {
                let y = t.alignment.tokens();
                out.push(TrainExample {
                    id: u.id.clone(),
                    features: u.features.clone(),
                    target: attach(&u.id, &u.features, &y)?,
                    tokens: y,
                    nll: cfg.pseudo_nll,
                });
            }
        }
    }
    if cfg.strategy == Strategy::PseudoOnly && out.len() == data.labelled.len() {
        warn!("pseudo-only training without unlabelled targets reduces to the baseline");
    }
    Ok(out)
}

fn split_refs(data: &Dataset, dir: Option<&Path>, split: Split) -> Result<Vec<Utterance>> {
    match split {
        Split::Unlabelled => {
            let dir = dir.ok_or_else(|| Error::Config("dataset directory required".into()))?;
            let sealed = SealedReferences::load(dir).context("unlabelled scoring needs the sealed references")?;
            data.unlabelled
                .iter()
                .map(|u| {
                    let tokens = sealed
                        .0
                        .get(&u.id)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no sealed reference for {}", u.id)))?;
                    Ok(Utterance {
                        id: u.id.clone(),
                        features: u.features.clone(),
                        tokens,
                    })
                })
                .collect()
        }
        s => Ok(data.labelled_split(s)?.to_vec()),
    }
}

fn score_split(
    model: &TransducerModel,
    utts: &[Utterance],
    beam: usize,
    fusion: Option<Fusion<'_>>,
) -> Result<(WerReport, Vec<HypothesisRecord>)> {
    let feats: Vec<_> = utts.iter().map(|u| &u.features).collect();
    let hyps = decode_all(model, &feats, beam, fusion)?;
    let mut report = WerReport::default();
    let mut records = Vec::with_capacity(hyps.len());
    for (u, h) in utts.iter().zip(&hyps) {
        report.accumulate(&wer(u.tokens.as_slice(), h.tokens.as_slice()));
        records.push(HypothesisRecord::new(&u.id, h));
    }
    Ok((report, records))
}

fn eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    split: Split,
    lm: Option<&Path>,
    results: Option<&Path>,
    label: Option<String>,
    hyps_out: Option<&Path>,
) -> Result<()> {
    let data = require_data(cfg)?;
    let model = load_model(model_path)?;
    let lm = lm.map(NgramLm::load).transpose()?;
    let fusion = lm.as_ref().filter(|_| cfg.kd.beta_lm > 0.0).map(|lm| Fusion {
        lm,
        beta: cfg.kd.beta_lm,
    });
    let utts = split_refs(&data, cfg.data_dir.as_deref(), split)?;
    let (report, records) = score_split(&model, &utts, cfg.eval_beam, fusion)?;
    println!(
        "{}",
        serde_json::json!({
            "split": split.name(),
            "substitutions": report.substitutions,
            "deletions": report.deletions,
            "insertions": report.insertions,
            "ref_words": report.ref_words,
            "wer": report.wer(),
        })
    );
    if let Some(p) = hyps_out {
        let mut w = BufWriter::new(std::fs::File::create(p)?);
        for r in &records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
    }
    if let Some(table) = results {
        let score = |s: Split| -> Result<f64> {
            if s == split {
                return Ok(report.wer());
            }
            Ok(score_split(&model, data.labelled_split(s)?, cfg.eval_beam, fusion)?.0.wer())
        };
        let row = ResultRow {
            label: label.unwrap_or_else(|| {
                model_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
            dev_wer: score(Split::Dev)?,
            test_wer: score(Split::Test)?,
        };
        ResultsTable::append_row(table, &row)?;
    }
    Ok(())
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize, usize)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad size triple {p:?}")))?;
            match v[..] {
                [t, u, k] if t > 0 && k >= 2 => Ok((t, u, k)),
                _ => Err(Error::Config(format!("size triple must be T,U,K with T>0, K>=2: {p:?}")).into()),
            }
        })
        .collect()
}

fn run_bench(
    variant: KdVariant,
    common: &Common,
    sizes: Option<&str>,
    reps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let grid = match sizes {
        Some(s) => parse_sizes(s)?,
        None => bench::default_grid(),
    };
    let variants = if common.variant.is_some() {
        vec![variant]
    } else {
        vec![KdVariant::OneBest, KdVariant::Collapsed, KdVariant::FullLattice]
    };
    let mut rows = Vec::new();
    for v in variants {
        for &(t, u, k) in &grid {
            rows.push(measure(v, t, u, k, reps)?);
        }
    }
    let csv = bench::rows_to_csv(&rows);
    match out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    for v in [KdVariant::OneBest, KdVariant::Collapsed, KdVariant::FullLattice] {
        let rs: Vec<_> = rows.iter().filter(|r| r.variant == v).collect();
        if rs.len() < 2 {
            continue;
        }
        let size: Vec<f64> = rs
            .iter()
            .map(|r| match v {
                KdVariant::OneBest => (r.frames + r.labels) as f64,
                _ => (r.frames * (r.labels + 1)) as f64,
            })
            .collect();
        let mem: Vec<f64> = rs.iter().map(|r| r.stored_values as f64).collect();
        let time: Vec<f64> = rs.iter().map(|r| r.seconds.max(1e-12)).collect();
        let axis = if v == KdVariant::OneBest { "T+U" } else { "T(U+1)" };
        eprintln!(
            "{}: memory slope vs {axis} = {:.3}, time slope = {:.3}",
            bench::variant_name(v),
            loglog_slope(&size, &mem),
            loglog_slope(&size, &time)
        );
    }
    Ok(())
}

fn run_matrix(cfg: &ExperimentConfig, beta: Option<f64>, seeds: &str, out_dir: Option<&Path>) -> Result<()> {
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad seed list {seeds:?}")))?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    for seed in seeds {
        let c = ExperimentConfig { seed, ..cfg.clone() };
        let opts = MatrixOptions::full(&c, beta);
        let report = experiment::run_matrix(&c, &opts)?;
        let rendered = report.table.render(Some(experiment::labels::BASELINE));
        println!("seed {seed}");
        print!("{rendered}");
        if let Some(lag) = report.emission_lag {
            println!("streaming baseline emission lag: {lag:.2} frames");
        }
        if let Some(b) = report.fusion_beta {
            println!("fusion weight: {b}");
        }
        if let Some(d) = out_dir {
            std::fs::write(d.join(format!("results_seed{seed}.csv")), report.table.to_csv())?;
            std::fs::write(d.join(format!("results_seed{seed}.txt")), rendered)?;
        }
    }
    Ok(())
}
