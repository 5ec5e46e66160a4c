use log::{debug, info};

use crate::corpus::{generate, Dataset, SealedReferences, Utterance};
use crate::decoding::{emission_lag, Fusion};
use crate::error::{Error, Result};
use crate::kd::KdVariant;
use crate::lattice::TokenSeq;
use crate::lm::NgramLm;
use crate::nnet::{ModelConfig, TransducerModel};

use super::config::{ExperimentConfig, Strategy, TrainSchedule};
use super::results::ResultsTable;
use super::targets::{fusion_for, labelled_examples, pseudo_transcribe, unlabelled_examples};
use super::train::{decode_all, evaluate, train, Objective, TrainExample, TrainOutcome};

/// Seed for student initialisation and shuffling, shared by every student
/// of a run so that strategies differ only in their objective.
pub fn student_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_add(1)
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<(Dataset, Option<SealedReferences>)> {
    match &cfg.data_dir {
        Some(dir) => {
            let data = Dataset::load(dir)?;
            let sealed = SealedReferences::load(dir).ok();
            Ok((data, sealed))
        }
        None => {
            let (data, sealed) = generate(&cfg.synth)?;
            Ok((data, Some(sealed)))
        }
    }
}

pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    let model = TransducerModel::new(cfg.teacher_config(), cfg.seed)?;
    let examples: Vec<TrainExample> = data.labelled.iter().map(TrainExample::supervised).collect();
    train(model, &examples, &data.dev, &cfg.teacher_schedule, Objective::NLL_ONLY, cfg.seed)
}

pub fn train_lm(cfg: &ExperimentConfig, data: &Dataset) -> Result<NgramLm> {
    NgramLm::train(&data.lm_text, data.vocab(), cfg.lm_order, cfg.lm_alpha)
}

/// Training set for one student configuration.
///
/// Labelled utterances always contribute the transducer loss. With
/// `use_unlabelled`, teacher pseudo-transcriptions are added; their
/// transducer term follows `pseudo_nll`. Targets are attached when
/// `variant` is given.
pub fn student_examples(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher: &TransducerModel,
    variant: Option<KdVariant>,
    fusion: Option<Fusion<'_>>,
    pseudo: Option<&[TokenSeq]>,
) -> Result<Vec<TrainExample>> {
    let mut out = match variant {
        Some(v) => labelled_examples(teacher, &data.labelled, v, fusion)?,
        None => data.labelled.iter().map(TrainExample::supervised).collect(),
    };
    if cfg.use_unlabelled {
        let pseudo = pseudo.ok_or_else(|| Error::Config("unlabelled training needs pseudo-transcriptions".into()))?;
        out.extend(unlabelled_examples(
            teacher,
            &data.unlabelled,
            pseudo,
            variant,
            fusion,
            cfg.pseudo_nll,
        )?);
    }
    Ok(out)
}

/// Trains one student. ST2 continues from `init`; other strategies start
/// from a fresh seeded model.
pub fn train_student(
    cfg: &ExperimentConfig,
    data: &Dataset,
    examples: &[TrainExample],
    init: Option<&TransducerModel>,
) -> Result<TrainOutcome> {
    let seed = student_seed(cfg);
    let (model, schedule): (TransducerModel, &TrainSchedule) = match cfg.strategy {
        Strategy::St2 => {
            let init = init.ok_or_else(|| Error::Config("st2 requires an init checkpoint".into()))?;
            if init.config() != &cfg.student_config() {
                return Err(Error::Config("init checkpoint does not match the student configuration".into()));
            }
            (init.clone(), &cfg.finetune_schedule)
        }
        _ => (TransducerModel::new(cfg.student_config(), seed)?, &cfg.student_schedule),
    };
    if cfg.kd.tau > 0 && !cfg.streaming {
        log::warn!("tau = {} with a non-streaming student", cfg.kd.tau);
    }
    let lambda = match cfg.strategy {
        Strategy::Baseline | Strategy::PseudoOnly => 0.0,
        Strategy::St1 | Strategy::St2 => cfg.kd.lambda,
    };
    let obj = Objective {
        lambda,
        tau: cfg.kd.tau,
    };
    train(model, examples, &data.dev, schedule, obj, seed)
}

/// Dev and test WER with the configured evaluation beam.
pub fn score(cfg: &ExperimentConfig, model: &TransducerModel, data: &Dataset) -> Result<(f64, f64)> {
    let dev = evaluate(model, &data.dev, cfg.eval_beam, None)?.0.wer();
    let test = evaluate(model, &data.test, cfg.eval_beam, None)?.0.wer();
    Ok((dev, test))
}

/// Mean per-token emission lag of `streaming` behind `reference` over the
/// utterances where both decode to the same tokens.
pub fn mean_emission_lag(
    streaming: &TransducerModel,
    reference: &TransducerModel,
    utts: &[Utterance],
) -> Result<Option<f64>> {
    let feats: Vec<_> = utts.iter().map(|u| &u.features).collect();
    let a = decode_all(streaming, &feats, 1, None)?;
    let b = decode_all(reference, &feats, 1, None)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(&b) {
        if x.tokens == y.tokens && !x.tokens.is_empty() {
            sum += emission_lag(x, y)? * x.tokens.len() as f64;
            n += x.tokens.len();
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Labels used in the experiment tables.
pub mod labels {
    pub const TEACHER: &str = "teacher";
    pub const BASELINE: &str = "baseline";
    pub const COLLAPSED_ST2: &str = "collapsed st2";
    pub const KD_ST1: &str = "kd st1";
    pub const KD_ST2: &str = "kd st2";
    pub const KD_ST2_LM: &str = "kd st2 +lm";
    pub const PSEUDO: &str = "pseudo";
    pub const PSEUDO_LM: &str = "pseudo +lm";
    pub const UNL_KD_ST1: &str = "unl kd st1";
    pub const UNL_KD_ST2: &str = "unl kd st2";
    pub const UNL_KD_ST2_LM: &str = "unl kd st2 +lm";
    pub const STREAM_BASELINE: &str = "stream baseline";

    pub fn stream_tau(tau: usize) -> String {
        format!("stream kd st2 tau={tau}")
    }
}

/// Which rows of the experiment matrix to run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOptions {
    pub non_streaming: bool,
    pub unlabelled: bool,
    pub collapsed: bool,
    pub streaming_taus: Vec<usize>,
    /// LM weight for the fused rows; 0 skips them and `None` selects one
    /// from [`FUSION_BETA_GRID`] on dev.
    pub fusion_beta: Option<f64>,
}

impl MatrixOptions {
    /// Every row, with the delay sweep scaled to the frames per token.
    pub fn full(cfg: &ExperimentConfig, fusion_beta: Option<f64>) -> Self {
        Self {
            non_streaming: true,
            unlabelled: true,
            collapsed: false,
            streaming_taus: tau_sweep(cfg.synth.frames_per_token),
            fusion_beta,
        }
    }
}

/// Candidate LM weights for [`select_fusion_beta`].
pub const FUSION_BETA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

/// The grid weight whose fused teacher decoding has the lowest dev WER;
/// the smaller weight wins ties.
pub fn select_fusion_beta(teacher: &TransducerModel, lm: &NgramLm, dev: &[Utterance], beam: usize) -> Result<f64> {
    let mut best = (f64::INFINITY, FUSION_BETA_GRID[0]);
    for beta in FUSION_BETA_GRID {
        let wer = evaluate(teacher, dev, beam, fusion_for(Some(lm), beta))?.0.wer();
        debug!("fusion weight {beta}: teacher dev WER {:.2}%", 100.0 * wer);
        if wer < best.0 {
            best = (wer, beta);
        }
    }
    Ok(best.1)
}

/// `{0, f−2, f, f+2}` without duplicates.
pub fn tau_sweep(frames_per_token: usize) -> Vec<usize> {
    let f = frames_per_token;
    let mut taus = vec![0, f.saturating_sub(2), f, f + 2];
    taus.sort_unstable();
    taus.dedup();
    taus
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub seed: u64,
    pub table: ResultsTable,
    pub emission_lag: Option<f64>,
    /// LM weight used by the fused rows.
    pub fusion_beta: Option<f64>,
    pub teacher_params: usize,
    pub student_params: usize,
    /// Best checkpoints by row label, in table order.
    pub models: Vec<(String, TransducerModel)>,
}

/// Runs the teacher/student matrix for one seed.
pub fn run_matrix(base: &ExperimentConfig, opts: &MatrixOptions) -> Result<MatrixReport> {
    let mut cfg = base.clone();
    cfg.synth.seed = cfg.seed;
    cfg.data_dir = None;
    let (data, _) = load_or_generate(&cfg)?;
    let mut table = ResultsTable::default();
    let mut models: Vec<(String, TransducerModel)> = Vec::new();
    let mut record = |label: &str, m: &TransducerModel, table: &mut ResultsTable| -> Result<()> {
        let (dev, test) = score(&cfg, m, &data)?;
        info!("seed {} {label}: dev {:.2}% test {:.2}%", cfg.seed, 100.0 * dev, 100.0 * test);
        table.push(label, dev, test);
        models.push((label.to_string(), m.clone()));
        Ok(())
    };

    let teacher = train_teacher(&cfg, &data)?.model;
    record(labels::TEACHER, &teacher, &mut table)?;
    let lm = train_lm(&cfg, &data)?;
    let fusion_beta = match opts.fusion_beta {
        Some(b) => b,
        None if opts.non_streaming || opts.unlabelled => select_fusion_beta(&teacher, &lm, &data.dev, cfg.beam)?,
        None => 0.0,
    };
    let fusion = fusion_for(Some(&lm), fusion_beta);

    let with = |strategy: Strategy, streaming: bool, use_unlabelled: bool| ExperimentConfig {
        strategy,
        streaming,
        use_unlabelled,
        ..cfg.clone()
    };

    let mut baseline_ns = None;
    if opts.non_streaming {
        let c = with(Strategy::Baseline, false, false);
        let base_ex = student_examples(&c, &data, &teacher, None, None, None)?;
        let baseline = train_student(&c, &data, &base_ex, None)?.model;
        record(labels::BASELINE, &baseline, &mut table)?;

        let kd_ex = student_examples(&c, &data, &teacher, Some(KdVariant::OneBest), None, None)?;
        let st1 = train_student(&with(Strategy::St1, false, false), &data, &kd_ex, None)?.model;
        record(labels::KD_ST1, &st1, &mut table)?;
        let st2 = train_student(&with(Strategy::St2, false, false), &data, &kd_ex, Some(&baseline))?.model;
        record(labels::KD_ST2, &st2, &mut table)?;
        if fusion.is_some() {
            let ex = student_examples(&c, &data, &teacher, Some(KdVariant::OneBest), fusion, None)?;
            let m = train_student(&with(Strategy::St2, false, false), &data, &ex, Some(&baseline))?.model;
            record(labels::KD_ST2_LM, &m, &mut table)?;
        }
        if opts.collapsed {
            let ex = student_examples(&c, &data, &teacher, Some(KdVariant::Collapsed), None, None)?;
            let mut cc = with(Strategy::St2, false, false);
            cc.kd.lambda = 0.01 * cfg.kd.lambda;
            let m = train_student(&cc, &data, &ex, Some(&baseline))?.model;
            record(labels::COLLAPSED_ST2, &m, &mut table)?;
        }
        baseline_ns = Some(baseline);
    }

    if opts.unlabelled {
        let mut settings = vec![(None, labels::PSEUDO, labels::UNL_KD_ST2)];
        if fusion.is_some() {
            settings.push((fusion, labels::PSEUDO_LM, labels::UNL_KD_ST2_LM));
        }
        for (fusion, pseudo_label, st2_label) in settings {
            let pseudo = pseudo_transcribe(&teacher, &data.unlabelled, cfg.beam, fusion)?;
            let c = with(Strategy::PseudoOnly, false, true);
            let plain = student_examples(&c, &data, &teacher, None, None, Some(&pseudo))?;
            let pseudo_model = train_student(&c, &data, &plain, None)?.model;
            record(pseudo_label, &pseudo_model, &mut table)?;

            let c = with(Strategy::St2, false, true);
            let kd_ex = student_examples(&c, &data, &teacher, Some(KdVariant::OneBest), fusion, Some(&pseudo))?;
            if fusion.is_none() {
                let st1 = train_student(&with(Strategy::St1, false, true), &data, &kd_ex, None)?.model;
                record(labels::UNL_KD_ST1, &st1, &mut table)?;
            }
            let st2 = train_student(&c, &data, &kd_ex, Some(&pseudo_model))?.model;
            record(st2_label, &st2, &mut table)?;
        }
    }

    let mut emission_lag = None;
    if !opts.streaming_taus.is_empty() {
        let c = with(Strategy::Baseline, true, false);
        let base_ex = student_examples(&c, &data, &teacher, None, None, None)?;
        let stream_base = train_student(&c, &data, &base_ex, None)?.model;
        record(labels::STREAM_BASELINE, &stream_base, &mut table)?;
        if let Some(b) = &baseline_ns {
            emission_lag = mean_emission_lag(&stream_base, b, &data.dev)?;
        }
        let kd_ex = student_examples(&c, &data, &teacher, Some(KdVariant::OneBest), None, None)?;
        for &tau in &opts.streaming_taus {
            let mut st = with(Strategy::St2, true, false);
            st.kd.tau = tau;
            let m = train_student(&st, &data, &kd_ex, Some(&stream_base))?.model;
            record(&labels::stream_tau(tau), &m, &mut table)?;
        }
    }

    Ok(MatrixReport {
        seed: cfg.seed,
        table,
        emission_lag,
        fusion_beta: fusion.map(|f| f.beta),
        teacher_params: teacher.num_params(),
        student_params: TransducerModel::zeros(ModelConfig::student(
            cfg.synth.feature_dim,
            cfg.synth.vocab,
            false,
        ))?
        .num_params(),
        models,
    })
}
