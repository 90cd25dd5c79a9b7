//! Subcommand implementations. Each `cmd_*` reads a resolved [`RunConfig`];
//! the library-level helpers they call are public so tests can drive the
//! pipeline without spawning processes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use avparse::data::annotations::{self, PredictionRow};
use avparse::data::container::Dtype;
use avparse::data::synth::{gen_video, Prototypes, SyntheticSpec};
use avparse::data::{batch_indices, Dataset};
use avparse::grounding::{
    ExportMode, PretrainConfig, PretrainReport, PretrainSample, Pretrainer, SimilarityThresholds,
};
use avparse::losses::{AvgVariant, LossReport, MarginConfig};
use avparse::metrics::{self, Evaluation, MetricsReport, Modality, VideoCounts, VideoParse};
use avparse::parser::{decode, Parser, ParserConfig};
use avparse::tensorgrad::{rng, GradCheckConfig, GradCheckReport, OpKind, Optimizer, OptimizerState, UpdateRule};
use avparse::verify;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const MANIFEST: &str = "manifest.json";
pub const PARSER_CHECKPOINT: &str = "parser.avft";
pub const PRETRAIN_CHECKPOINT: &str = "pretrainer.avft";
pub const PREDICTIONS: &str = "predictions.tsv";
pub const METRICS: &str = "metrics.json";
pub const METRICS_POOLED: &str = "metrics_pooled.json";
pub const CATEGORY_SCORES: &str = "categories.tsv";
pub const TRAIN_LOG: &str = "train.log";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const SPLITS: [&str; 2] = ["train", "test"];

pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<(), CliError> {
    match name {
        "gen-synth" => cmd_gen_synth(cfg),
        "pretrain" => cmd_pretrain(cfg),
        "train" => cmd_train(cfg),
        "predict" => cmd_predict(cfg),
        "eval" => cmd_eval(cfg),
        "gradcheck" => cmd_gradcheck(cfg),
        other => Err(CliError::config(format!("unknown command `{other}`"))),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Output directory, created if needed, with the resolved config inside.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.path("out")?;
    create_dir(&out)?;
    cfg.write(&out, RESOLVED_CONFIG)?;
    Ok(out)
}

// ---------------------------------------------------------------- gen-synth

pub fn synthetic_spec(cfg: &RunConfig) -> Result<SyntheticSpec, CliError> {
    let spec = SyntheticSpec {
        seed: cfg.u64("seed")?,
        num_videos: cfg.usize("num_videos")?,
        num_categories: cfg.usize("num_categories")?,
        snippets: cfg.usize("snippets")?,
        feature_dim: cfg.usize("feature_dim")?,
        noise_sigma: cfg.f64("noise_sigma")?,
        min_events: cfg.usize("min_events")?,
        max_events: cfg.usize("max_events")?,
        audio_only_prob: cfg.f64("audio_only_prob")?,
        visual_only_prob: cfg.f64("visual_only_prob")?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Train and test splits; the last `test_videos` videos form the test split.
pub fn generate_splits(spec: &SyntheticSpec, test_videos: usize, parallel: bool) -> Result<(Dataset, Dataset), CliError> {
    spec.validate()?;
    if test_videos >= spec.num_videos {
        return Err(CliError::config(format!(
            "test_videos ({test_videos}) must be smaller than num_videos ({})",
            spec.num_videos
        )));
    }
    let protos = Prototypes::generate(spec);
    let mut videos: Vec<_> = if parallel {
        (0..spec.num_videos).into_par_iter().map(|i| gen_video(spec, &protos, i)).collect()
    } else {
        (0..spec.num_videos).map(|i| gen_video(spec, &protos, i)).collect()
    };
    let test = videos.split_off(spec.num_videos - test_videos);
    let vocab = spec.vocabulary()?;
    Ok((
        Dataset::from_synthetic(vocab.clone(), videos)?,
        Dataset::from_synthetic(vocab, test)?,
    ))
}

/// Writes both splits and a manifest of file hashes under `root`.
pub fn write_dataset(root: &Path, train: &Dataset, test: &Dataset, spec: &SyntheticSpec) -> Result<(), CliError> {
    let mut files = BTreeMap::new();
    for (name, ds) in SPLITS.iter().zip([train, test]) {
        let dir = root.join(name);
        ds.save(&dir, Dtype::F64)?;
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| CliError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        entries.sort();
        for f in entries {
            files.insert(format!("{name}/{f}"), sha256_hex(&dir.join(&f))?);
        }
    }
    let manifest = json!({
        "num_categories": spec.num_categories,
        "snippets": spec.snippets,
        "feature_dim": spec.feature_dim,
        "videos": { "train": train.len(), "test": test.len() },
        "files": files,
    });
    write_file(
        &root.join(MANIFEST),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )
}

pub fn cmd_gen_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = synthetic_spec(cfg)?;
    let (train, test) = generate_splits(&spec, cfg.usize("test_videos")?, cfg.bool("parallel")?)?;
    let out = prepare_out(cfg)?;
    write_dataset(&out, &train, &test, &spec)?;
    println!(
        "wrote {} train / {} test videos to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- loading

/// Loads `<data>/<split>`; a missing dataset is a configuration error.
pub fn load_split(data: &Path, split: &str) -> Result<Dataset, CliError> {
    if !SPLITS.contains(&split) {
        return Err(CliError::config(format!("split must be train or test, got `{split}`")));
    }
    let dir = data.join(split);
    if !dir.is_dir() {
        return Err(CliError::config(format!("dataset split not found: {}", dir.display())));
    }
    Ok(Dataset::load(&dir)?)
}

// --------------------------------------------------------------------- train

pub fn parser_config(cfg: &RunConfig, ds: &Dataset) -> Result<ParserConfig, CliError> {
    let pc = ParserConfig {
        num_categories: ds.num_categories(),
        snippets_per_video: ds.snippets,
        model_dim: ds.feature_dim,
        num_heads: cfg.usize("num_heads")?,
        lambda_g: cfg.f64("lambda_g")?,
        lambda_ad: cfg.f64("lambda_ad")?,
        decision_threshold: cfg.f64("decision_threshold")?,
        smoothing_eps: cfg.f64("smoothing_eps")?,
        use_skip: cfg.bool("skip")?,
        use_adv: cfg.bool("adv")?,
        use_gcaa: cfg.bool("gcaa")?,
        global_from_query: cfg.bool("global_from_query")?,
    };
    pc.validate()?;
    Ok(pc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rule: UpdateRule,
    pub schedule: OptimizerState,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let schedule = OptimizerState {
            base_lr: cfg.f64("lr")?,
            decay_factor: cfg.f64("decay_factor")?,
            decay_every_epochs: cfg.usize("decay_every")?,
            current_epoch: 0,
        };
        schedule.validate()?;
        let opts = TrainOptions {
            epochs: cfg.usize("epochs")?,
            batch_size: cfg.usize("batch_size")?,
            seed: cfg.u64("seed")?,
            rule: cfg.raw("optimizer").parse()?,
            schedule,
        };
        if opts.epochs == 0 || opts.batch_size == 0 {
            return Err(CliError::config("epochs and batch_size must be at least 1"));
        }
        Ok(opts)
    }
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub fn train_parser(
    ds: &Dataset,
    pcfg: ParserConfig,
    opts: &TrainOptions,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Parser, CliError> {
    if ds.is_empty() {
        return Err(CliError::config("training split is empty"));
    }
    let mut parser = Parser::new(pcfg, opts.seed)?;
    let mut optim = Optimizer::new(opts.rule, opts.schedule);
    for epoch in 0..opts.epochs {
        optim.set_epoch(epoch);
        let mut sum = LossReport::default();
        let batches = ds.batches(opts.batch_size, opts.seed, epoch)?;
        for idx in &batches {
            let report = parser.train_step(&ds.batch(idx)?, &mut optim)?;
            sum.accumulate(&report);
        }
        log(&EpochLog {
            epoch,
            lr: optim.schedule.effective_lr(),
            loss: LossReport::averaged(&sum, batches.len()),
        });
    }
    if !parser.params.all_finite() {
        return Err(CliError::divergence("parameters became non-finite"));
    }
    Ok(parser)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.path("data")?;
    let ds = load_split(&data, "train")?;
    let pcfg = parser_config(cfg, &ds)?;
    let opts = TrainOptions::from_config(cfg)?;
    let out = prepare_out(cfg)?;
    let mut log = String::from("epoch\tlr\tl_wsl\tl_g\tl_ad\tl_total\n");
    let parser = train_parser(&ds, pcfg, &opts, &mut |e| {
        let line = format!(
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            e.epoch, e.lr, e.loss.l_wsl, e.loss.l_g, e.loss.l_ad, e.loss.l_total
        );
        print!("{line}");
        log.push_str(&line);
    })?;
    write_file(&out.join(TRAIN_LOG), &log)?;
    checkpoint::save_parser(&out.join(PARSER_CHECKPOINT), &parser)?;
    println!("checkpoint written to {}", out.join(PARSER_CHECKPOINT).display());
    Ok(())
}

// ------------------------------------------------------------------- predict

/// Snippet decisions for every video of `ds`.
pub fn predict_parses(parser: &Parser, ds: &Dataset, threshold: f64) -> Result<Vec<VideoParse>, CliError> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in ds.chunks(64) {
        let dec = decode(&parser.predict(&ds.batch(&idx)?)?, threshold)?;
        for b in 0..idx.len() {
            out.push(VideoParse {
                audio: dec.audio[b].clone(),
                visual: dec.visual[b].clone(),
                audio_visual: dec.audio_visual[b].clone(),
            });
        }
    }
    Ok(out)
}

pub fn prediction_rows(ds: &Dataset, parses: &[VideoParse]) -> Vec<PredictionRow> {
    let mut rows = Vec::new();
    for (v, p) in ds.videos.iter().zip(parses) {
        for m in Modality::ALL {
            rows.extend(p.events(m).into_iter().map(|e| PredictionRow {
                video_id: v.id.clone(),
                modality: m,
                category: e.category,
                start: e.start,
                end: e.end,
            }));
        }
    }
    rows
}

fn check_compatible(parser: &Parser, ds: &Dataset) -> Result<(), CliError> {
    let c = parser.config();
    if ds.is_empty() {
        return Ok(());
    }
    if (c.num_categories, c.snippets_per_video, c.model_dim) != (ds.num_categories(), ds.snippets, ds.feature_dim) {
        return Err(CliError::config(format!(
            "checkpoint expects S={} T={} d={}, dataset has S={} T={} d={}",
            c.num_categories,
            c.snippets_per_video,
            c.model_dim,
            ds.num_categories(),
            ds.snippets,
            ds.feature_dim
        )));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = cfg.path("checkpoint")?;
    if !ckpt.is_file() {
        return Err(CliError::config(format!("checkpoint not found: {}", ckpt.display())));
    }
    let parser = checkpoint::load_parser(&ckpt)?;
    let ds = load_split(&cfg.path("data")?, cfg.raw("split"))?;
    check_compatible(&parser, &ds)?;
    let out = prepare_out(cfg)?;
    let parses = if ds.is_empty() {
        Vec::new()
    } else {
        predict_parses(&parser, &ds, parser.config().decision_threshold)?
    };
    let rows = prediction_rows(&ds, &parses);
    let path = out.join(PREDICTIONS);
    write_file(&path, &annotations::format_predictions(&rows, &ds.vocab))?;
    println!("{} events for {} videos written to {}", rows.len(), ds.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------- eval

/// Grids per dataset video from prediction rows. Rows naming videos outside
/// the dataset are rejected, listing the offenders.
pub fn parses_from_rows(rows: &[PredictionRow], ds: &Dataset) -> Result<Vec<VideoParse>, CliError> {
    let index: HashMap<&str, usize> = ds.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let mut parses = vec![VideoParse::empty(ds.snippets, ds.num_categories()); ds.len()];
    let mut unknown: Vec<&str> = Vec::new();
    for r in rows {
        match index.get(r.video_id.as_str()) {
            Some(&i) => {
                for row in &mut parses[i].grid_mut(r.modality)[r.start..=r.end] {
                    row[r.category] = true;
                }
            }
            None => unknown.push(&r.video_id),
        }
    }
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(CliError::config(format!(
            "predictions name videos absent from the ground truth: {}",
            unknown.join(", ")
        )));
    }
    Ok(parses)
}

pub fn evaluate_parses(
    pred: &[VideoParse],
    truth: &[VideoParse],
    iou: f64,
    parallel: bool,
) -> Result<Evaluation, CliError> {
    if !parallel {
        return Ok(metrics::evaluate(pred, truth, iou)?);
    }
    if pred.len() != truth.len() {
        return Err(CliError::config("prediction and truth video counts differ"));
    }
    let per_video = pred
        .par_iter()
        .zip(truth.par_iter())
        .map(|(p, t)| VideoCounts::compute(p, t, iou))
        .collect::<avparse::Result<Vec<_>>>()?;
    Ok(metrics::reduce(per_video))
}

/// The JSON document for a report, in percent with one decimal.
pub fn metrics_json(report: &MetricsReport) -> serde_json::Value {
    let p = report.as_percent();
    let level = |l: &metrics::LevelScores| {
        json!({
            "audio": l.audio,
            "visual": l.visual,
            "av": l.av,
            "type_at_av": l.type_at_av,
            "event_at_av": l.event_at_av,
        })
    };
    json!({ "segment": level(&p.segment), "event": level(&p.event) })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let pred_path = cfg.path("predictions")?;
    let ds = load_split(&cfg.path("data")?, cfg.raw("split"))?;
    if !ds.has_full {
        return Err(CliError::config(format!(
            "split `{}` has no full annotations to evaluate against",
            cfg.raw("split")
        )));
    }
    let iou = cfg.f64("iou_threshold")?;
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(CliError::config(format!("iou_threshold must lie in (0, 1], got {iou}")));
    }
    let rows = annotations::parse_predictions(&pred_path, &ds.vocab, ds.snippets.max(1))?;
    let pred = parses_from_rows(&rows, &ds)?;
    let truth: Vec<VideoParse> = (0..ds.len()).map(|i| ds.truth(i)).collect();
    let eval = evaluate_parses(&pred, &truth, iou, cfg.bool("parallel")?)?;
    let out = prepare_out(cfg)?;
    let doc = serde_json::to_string_pretty(&metrics_json(&eval.report)).expect("metrics serialize") + "\n";
    write_file(&out.join(METRICS), &doc)?;
    write_file(
        &out.join(METRICS_POOLED),
        &(serde_json::to_string_pretty(&metrics_json(&eval.pooled)).expect("metrics serialize") + "\n"),
    )?;
    let mut tsv = String::from("category\tmodality\tsegment_f\tevent_f\n");
    for c in metrics::category_scores(&pred, &truth, iou)? {
        tsv.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            ds.vocab.name(c.category),
            c.modality,
            c.segment_f,
            c.event_f
        ));
    }
    write_file(&out.join(CATEGORY_SCORES), &tsv)?;
    print!("{doc}");
    Ok(())
}

// ------------------------------------------------------------------ pretrain

pub fn pretrain_config(cfg: &RunConfig, ds: &Dataset) -> Result<PretrainConfig, CliError> {
    let pc = PretrainConfig {
        input_dim: ds.feature_dim,
        snippets: ds.snippets,
        num_layers: cfg.usize("pretrain_layers")?,
        model_dim: cfg.usize("pretrain_model_dim")?,
        num_heads: cfg.usize("pretrain_heads")?,
        ff_dim: cfg.usize("pretrain_ff_dim")?,
        margins: MarginConfig {
            p: cfg.f64("margin_pos")?,
            n: cfg.f64("margin_neg")?,
        },
        pairs_per_anchor: cfg.usize("pairs_per_anchor")?,
        thresholds: SimilarityThresholds {
            v_threshold: cfg.f64("v_threshold")?,
            a_threshold: cfg.f64("a_threshold")?,
        },
        variant: cfg.raw("variant").parse::<AvgVariant>()?,
        layer_norm_eps: 1e-5,
    };
    pc.validate()?;
    Ok(pc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PretrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let o = PretrainOptions {
            steps: cfg.usize("pretrain_steps")?,
            batch_size: cfg.usize("pretrain_batch_size")?,
            lr: cfg.f64("pretrain_lr")?,
            seed: cfg.u64("seed")?,
        };
        if o.steps == 0 || o.batch_size == 0 || !(o.lr > 0.0) {
            return Err(CliError::config("pretrain steps, batch size and learning rate must be positive"));
        }
        Ok(o)
    }
}

/// Runs `opts.steps` Adam steps over shuffled batches of `samples`.
pub fn pretrain(
    samples: &[PretrainSample],
    pcfg: PretrainConfig,
    opts: &PretrainOptions,
    log: &mut dyn FnMut(usize, &PretrainReport),
) -> Result<Pretrainer, CliError> {
    if samples.is_empty() {
        return Err(CliError::config("no videos to pretrain on"));
    }
    let mut model = Pretrainer::new(pcfg, opts.seed)?;
    let schedule = OptimizerState {
        base_lr: opts.lr,
        decay_factor: 1.0,
        decay_every_epochs: 1,
        current_epoch: 0,
    };
    let mut optim = Optimizer::new(UpdateRule::Adam, schedule);
    let mut pair_rng = rng::stream(opts.seed, u64::MAX);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut epoch = 0u64;
    for step in 0..opts.steps {
        if queue.is_empty() {
            queue = batch_indices(samples.len(), opts.batch_size, &mut rng::stream(opts.seed, epoch))?;
            queue.reverse();
            epoch += 1;
        }
        let idx = queue.pop().expect("refilled above");
        let batch: Vec<&PretrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let report = model.step(&batch, &mut optim, &mut pair_rng)?;
        log(step, &report);
    }
    if !model.params.all_finite() {
        return Err(CliError::divergence("pretraining parameters became non-finite"));
    }
    Ok(model)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.path("data")?;
    let train = load_split(&data, "train")?;
    let pcfg = pretrain_config(cfg, &train)?;
    let opts = PretrainOptions::from_config(cfg)?;
    let mode: ExportMode = cfg.raw("export_mode").parse()?;
    let out = prepare_out(cfg)?;
    let samples = train
        .videos
        .iter()
        .map(|v| PretrainSample::new(v.audio.clone(), v.visual.clone(), &pcfg.thresholds))
        .collect::<avparse::Result<Vec<_>>>()?;
    let variant = pcfg.variant.name();
    let mut log = String::from("step\tvariant\tloss\n");
    let model = pretrain(&samples, pcfg, &opts, &mut |step, r| {
        let line = format!("{step}\t{variant}\t{:.6}\n", r.loss);
        print!("{line}");
        log.push_str(&line);
    })?;
    write_file(&out.join(PRETRAIN_LOG), &log)?;
    checkpoint::save_pretrainer(&out.join(PRETRAIN_CHECKPOINT), &model)?;
    for split in SPLITS {
        if !data.join(split).is_dir() {
            continue;
        }
        let ds = if split == "train" {
            train.clone()
        } else {
            load_split(&data, split)?
        };
        let exported = model.export(&ds, mode)?;
        exported.save(&out.join("features").join(split), Dtype::F64)?;
    }
    println!("exported features written to {}", out.join("features").display());
    Ok(())
}

// ----------------------------------------------------------------- gradcheck

pub fn gradcheck_config(cfg: &RunConfig) -> Result<GradCheckConfig, CliError> {
    let fault = match cfg.raw("inject_fault") {
        "" | "none" => None,
        name => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::config(format!("unknown op `{name}`; known ops: {}", known.join(", ")))
        })?),
    };
    Ok(GradCheckConfig {
        fault,
        ..Default::default()
    })
}

pub fn render_gradcheck(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("suite\tchecked\tmax_rel_err\tstatus\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}\n",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    for r in reports {
        for f in &r.failures {
            out.push_str(&format!(
                "failure\t{}:{}[{}]\trel_err={:.3e}\tanalytic={:.6e}\tnumeric={:.6e}\n",
                r.name, f.input, f.index, f.rel_err, f.analytic, f.numeric
            ));
        }
    }
    out
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let gc = gradcheck_config(cfg)?;
    let n = cfg.u64("gradcheck_seeds")?;
    if n == 0 {
        return Err(CliError::config("gradcheck_seeds must be at least 1"));
    }
    let seed = cfg.u64("seed")?;
    let seeds: Vec<u64> = (0..n).map(|i| seed + i).collect();
    let reports = verify::run_all(&seeds, cfg.usize("gradcheck_picks")?, &gc)?;
    let text = render_gradcheck(&reports);
    print!("{text}");
    if !cfg.raw("out").is_empty() {
        let out = prepare_out(cfg)?;
        write_file(&out.join("gradcheck.tsv"), &text)?;
    }
    let failing: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("{}:{}", r.name, f.input)))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "gradient check failed for {}",
            failing.join(", ")
        )))
    }
}
