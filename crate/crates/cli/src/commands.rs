use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sdpn_core::data::{
    generate_synthetic_corpus, load_manifest_utterances, read_manifest, write_feature_file,
    write_manifest, CorpusConfig, ManifestEntry, Utterance,
};
use sdpn_core::metrics::evaluate;
use sdpn_core::model::forward_embed;
use sdpn_core::oracle::{run_cases, OracleKind, SuiteOptions};
use sdpn_core::scoring::{
    label_scores, normalize_trials, read_scores, Cohort, EmbeddingStore, NormMethod, Trial,
    TrialLabel, TrialList,
};
use sdpn_core::trainer::{read_checkpoint, steps_per_epoch, write_checkpoint, Trainer};
use sdpn_core::Error as CoreError;

use crate::cli::{
    Branch, Cli, Command, EmbedArgs, EvalArgs, GenDataArgs, GradCheckArgs, ScoreArgs, TrainArgs,
};
use crate::config::{CohortOverlap, RunConfig};
use crate::error::{CliError, CliResult, WithPath};

pub const CHECKPOINT_FILE: &str = "checkpoint.sdck";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Executes one parsed command line, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    match cli.command {
        Command::GenData(args) => gen_data(cfg, &args, out),
        Command::Train(args) => train(cfg, &args, out),
        Command::Embed(args) => embed(&args, out),
        Command::Score(args) => score(&cfg, &args, false, out),
        Command::Normalize(args) => score(&cfg, &args, true, out),
        Command::Eval(args) => eval(&cfg, &args, out),
        Command::GradCheck(args) => grad_check(&cfg, &args, out),
        Command::ShowConfig => {
            cfg.validate()?;
            writeln!(out, "{}", cfg.to_json()).map_err(CoreError::from)?;
            Ok(())
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(CoreError::from)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CoreError::from).at(dir)
}

fn rename_for_eval(mut utt: Utterance) -> Utterance {
    utt.utterance_id = format!("eval-{}", utt.utterance_id);
    utt.speaker_id = utt.speaker_id.map(|s| format!("eval-{s}"));
    utt
}

fn write_utterances(utts: &[&Utterance], dir: &Path, manifest: &Path) -> CliResult<()> {
    let feats = dir.join("feats");
    create_dir(&feats)?;
    let mut entries = Vec::with_capacity(utts.len());
    for utt in utts {
        let rel = PathBuf::from("feats").join(format!("{}.sdfk", utt.utterance_id));
        let path = dir.join(&rel);
        write_feature_file(utt, &path).at(&path)?;
        entries.push(ManifestEntry {
            utterance_id: utt.utterance_id.clone(),
            path: rel,
            speaker_id: utt.speaker_id.clone(),
        });
    }
    write_manifest(&entries, manifest).at(manifest)
}

/// Every unordered pair of evaluation utterances.
fn all_pair_trials(utts: &[Utterance]) -> TrialList {
    let mut trials = Vec::new();
    for (i, a) in utts.iter().enumerate() {
        for b in &utts[i + 1..] {
            let label = if a.speaker_id == b.speaker_id {
                TrialLabel::Target
            } else {
                TrialLabel::Nontarget
            };
            trials.push(Trial {
                enroll: a.utterance_id.clone(),
                test: b.utterance_id.clone(),
                label,
            });
        }
    }
    TrialList { trials }
}

fn gen_data(mut cfg: RunConfig, args: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = &mut cfg.data;
    if let Some(n) = args.speakers {
        data.train.num_speakers = n;
    }
    if let Some(n) = args.utts_per_speaker {
        data.train.utts_per_speaker = n;
    }
    if let Some(s) = args.spread {
        data.train.intra_speaker_spread = s;
    }
    cfg.validate()?;
    let data = &cfg.data;
    let per_speaker = data.train.utts_per_speaker;
    let pool = generate_synthetic_corpus(&CorpusConfig {
        utts_per_speaker: per_speaker + data.cohort_utts_per_speaker,
        ..data.train.clone()
    })?;
    let eval_utts: Vec<Utterance> = generate_synthetic_corpus(&CorpusConfig {
        num_speakers: data.eval_speakers,
        utts_per_speaker: data.eval_utts_per_speaker,
        seed: data.train.seed ^ 0x5EED_E7A1,
        ..data.train.clone()
    })?
    .into_iter()
    .map(rename_for_eval)
    .collect();

    let stride = per_speaker + data.cohort_utts_per_speaker;
    let (train, cohort): (Vec<_>, Vec<_>) = pool
        .iter()
        .enumerate()
        .partition(|(i, _)| i % stride < per_speaker);
    let train: Vec<&Utterance> = train.into_iter().map(|(_, u)| u).collect();
    let cohort: Vec<&Utterance> = cohort.into_iter().map(|(_, u)| u).collect();

    create_dir(&args.out)?;
    let manifest = args.out.join("manifest.tsv");
    write_utterances(&train, &args.out, &manifest)?;
    if !cohort.is_empty() {
        write_utterances(&cohort, &args.out, &args.out.join("cohort.tsv"))?;
    }
    write_utterances(&eval_utts.iter().collect::<Vec<_>>(), &args.out, &args.out.join("eval.tsv"))?;
    let trials_path = args.out.join("trials.txt");
    all_pair_trials(&eval_utts).write(&trials_path).at(&trials_path)?;
    let config_path = args.out.join("config.json");
    fs::write(&config_path, cfg.to_json() + "\n")
        .map_err(CoreError::from)
        .at(&config_path)?;
    say(out, manifest.display().to_string())
}

fn train(mut cfg: RunConfig, args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let corpus: Vec<_> = load_manifest_utterances(&args.manifest)
        .at(&args.manifest)?
        .iter()
        .map(Utterance::without_label)
        .collect();
    let mut trainer = match &args.resume {
        Some(path) => {
            if args.regularizer.is_some() || args.epochs.is_some() || args.lambda.is_some() {
                return Err(CliError::Usage(
                    "--resume uses the checkpoint's configuration; drop --regularizer/--epochs/--lambda"
                        .into(),
                ));
            }
            let trainer = read_checkpoint(path).at(path)?;
            let expected = trainer.cfg.epochs * steps_per_epoch(corpus.len(), trainer.cfg.batch_size);
            if expected != trainer.total_steps() {
                return Err(CliError::File {
                    path: args.manifest.display().to_string(),
                    source: CoreError::ShapeMismatch(format!(
                        "manifest yields {expected} total steps, checkpoint expects {}",
                        trainer.total_steps()
                    )),
                });
            }
            trainer
        }
        None => {
            if let Some(r) = args.regularizer {
                cfg.train.regularizer_kind = r.into();
            }
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
                cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e.saturating_sub(1));
            }
            if let Some(l) = args.lambda {
                cfg.train.weights.lambda = l;
            }
            cfg.validate()?;
            Trainer::new(cfg.model.clone(), cfg.train.clone(), corpus.len())?
        }
    };
    let feature_dim = trainer.pair.config.feature_dim;
    if let Some(u) = corpus.iter().find(|u| u.frames.cols() != feature_dim) {
        return Err(CliError::File {
            path: args.manifest.display().to_string(),
            source: CoreError::ShapeMismatch(format!(
                "utterance `{}` has {} features, model expects {feature_dim}",
                u.utterance_id,
                u.frames.cols()
            )),
        });
    }

    create_dir(&args.out)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let metrics = args.out.join(METRICS_FILE);
    if args.resume.is_none() {
        write_checkpoint(&trainer, &ckpt).at(&ckpt)?;
        fs::write(&metrics, b"").map_err(CoreError::from).at(&metrics)?;
    }
    let total = trainer.cfg.epochs;
    let budget = args.stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    while !trainer.is_finished() && ran < budget {
        let record = match trainer.run_epoch(&corpus) {
            Ok(record) => record,
            Err(e) => {
                say(out, format!("last good checkpoint: {}", ckpt.display()))?;
                return Err(e.into());
            }
        };
        ran += 1;
        let mut line = serde_json::to_string(&record).map_err(CoreError::from)?;
        line.push('\n');
        OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(CoreError::from)
            .at(&metrics)?;
        write_checkpoint(&trainer, &ckpt).at(&ckpt)?;
        if !args.quiet {
            say(
                out,
                format!(
                    "epoch {}/{total} loss {:.4} ce {:.4} re {:.4} dr {:.4} offdiag {:.4}",
                    record.epoch, record.loss, record.ce, record.re, record.dr, record.mean_abs_offdiag
                ),
            )?;
        }
    }
    say(out, ckpt.display().to_string())
}

fn embed(args: &EmbedArgs, out: &mut dyn Write) -> CliResult<()> {
    let trainer = read_checkpoint(&args.checkpoint).at(&args.checkpoint)?;
    let net = match args.branch {
        Branch::Teacher => &trainer.pair.teacher,
        Branch::Student => &trainer.pair.student,
    };
    let mut store = EmbeddingStore::new();
    for manifest in &args.manifest {
        for utt in load_manifest_utterances(manifest).at(manifest)? {
            if store.contains(&utt.utterance_id) {
                return Err(CliError::File {
                    path: manifest.display().to_string(),
                    source: CoreError::InvalidConfig(format!(
                        "utterance `{}` listed twice",
                        utt.utterance_id
                    )),
                });
            }
            if utt.frames.cols() != net.feature_dim() {
                return Err(CliError::File {
                    path: manifest.display().to_string(),
                    source: CoreError::ShapeMismatch(format!(
                        "utterance `{}` has {} features, checkpoint expects {}",
                        utt.utterance_id,
                        utt.frames.cols(),
                        net.feature_dim()
                    )),
                });
            }
            let (embedding, _) = forward_embed(net, &utt.frames)?;
            store.insert(utt.utterance_id, embedding)?;
        }
    }
    store.write(&args.out).at(&args.out)?;
    say(out, format!("{} embeddings -> {}", store.len(), args.out.display()))
}

fn score(cfg: &RunConfig, args: &ScoreArgs, normalize: bool, out: &mut dyn Write) -> CliResult<()> {
    let mut scoring = cfg.scoring;
    if let Some(m) = args.method {
        scoring.method = m.into();
    } else if normalize && scoring.method == NormMethod::Cosine {
        scoring.method = NormMethod::As;
    }
    if normalize && scoring.method == NormMethod::Cosine {
        return Err(CliError::Usage("normalize needs a method other than cosine".into()));
    }
    if args.top_k.is_some() {
        scoring.top_k = args.top_k;
    }
    if args.threads.is_some() {
        scoring.threads = args.threads;
    }
    if args.drop_overlap {
        scoring.cohort_overlap = CohortOverlap::Drop;
    }
    let store = EmbeddingStore::read(&args.store).at(&args.store)?;
    let trials = TrialList::read(&args.trials).at(&args.trials)?;
    let cohort = match (&args.cohort, scoring.method) {
        (_, NormMethod::Cosine) => None,
        (None, m) => return Err(CliError::Usage(format!("method `{m}` needs --cohort"))),
        (Some(path), _) => {
            let ids: Vec<String> = read_manifest(path)
                .at(path)?
                .into_iter()
                .map(|e| e.utterance_id)
                .collect();
            let (cohort, dropped) =
                Cohort::from_store(&store, &ids, &trials, scoring.overlap_policy())?;
            for id in dropped {
                eprintln!("warning: dropped cohort utterance `{id}` found in the trial list");
            }
            Some(cohort)
        }
    };
    let scores = normalize_trials(&trials, &store, cohort.as_ref(), &scoring.norm(), scoring.threads)?;
    scores.write(&args.out).at(&args.out)?;
    say(
        out,
        format!(
            "{} trials scored with {} ({} cohort stats, {} cache hits) -> {}",
            scores.trials.len(),
            scores.method,
            scores.stats_computed,
            scores.cache_hits,
            args.out.display()
        ),
    )
}

fn eval(cfg: &RunConfig, args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut params = cfg.metrics;
    if let Some(p) = args.p_target {
        params.p_target = p;
    }
    if let Some(c) = args.c_miss {
        params.c_miss = c;
    }
    if let Some(c) = args.c_fa {
        params.c_fa = c;
    }
    let lines = read_scores(&args.scores).at(&args.scores)?;
    let trials = TrialList::read(&args.trials).at(&args.trials)?;
    let report = evaluate(&label_scores(&lines, &trials)?, &params)?;
    let json = serde_json::to_string(&report).map_err(CoreError::from)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{json}\n")).map_err(CoreError::from).at(path)?;
    }
    say(out, json)
}

fn grad_check(cfg: &RunConfig, args: &GradCheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.min_rows < 2 || args.min_rows > args.max_rows || args.min_dim < 2 || args.min_dim > args.max_dim {
        return Err(CliError::Usage(
            "need 2 <= min-rows <= max-rows and 2 <= min-dim <= max-dim".into(),
        ));
    }
    let pattern = match args.loss.as_deref() {
        None => None,
        Some(l @ ("ce" | "re" | "odr" | "fdr" | "composite")) => Some(format!("fd_{l}")),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown loss `{other}` (expected ce, re, odr, fdr or composite)"
            )))
        }
    };
    let opts = SuiteOptions {
        seed: cfg.seed.unwrap_or(0),
        instances: args.trials,
        rows: (args.min_rows, args.max_rows),
        dims: (args.min_dim, args.max_dim),
    };
    let all = args.all;
    let report = run_cases(
        |c| {
            (all || c.kind == OracleKind::FiniteDifference)
                && pattern.as_deref().map_or(true, |p| c.name.starts_with(p))
        },
        &opts,
    );
    if report.cases.is_empty() {
        return Err(CliError::Usage("no oracle case matches".into()));
    }
    for c in &report.cases {
        say(
            out,
            format!(
                "{:<34} {:>4}  max_dev {:.3e}  tol {:.1e}  {}",
                c.name,
                c.instances,
                c.max_deviation,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ),
        )?;
    }
    if let Some(path) = &args.report {
        let mut buf = Vec::new();
        report.write_json_lines(&mut buf)?;
        fs::write(path, buf).map_err(CoreError::from).at(path)?;
    }
    let failed: Vec<&str> = report
        .cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
