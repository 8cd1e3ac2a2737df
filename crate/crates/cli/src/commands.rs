use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use mspt_core::decode::{beam_search, greedy_search, DecodeConfig, ModelScorer};
use mspt_core::frontend::{
    accumulate_speaker_stats, extract_logmel, normalize, stack_and_downsample, write_features, LogMelConfig,
    SourceKind,
};
use mspt_core::mask::sample_plan;
use mspt_core::nnet::{check_shapes, ModelParams, Parts};
use mspt_core::pipeline::{load_examples, run_ablation, AblationConfig, Preset, RunDir, ToyConfig};
use mspt_core::score::{edit_distance, error_rate, tokenize_for_metric, ErrorCounts, MetricMode};
use mspt_core::synthvoice::{build_templates, synthesize_corpus, SynthConfig};
use mspt_core::train::{
    average_checkpoints, mask_seed, run_stage, Checkpoint, DType, Stage, StageConfigFile, StageInit,
};
use mspt_core::{Error, FeatureMatrix, Manifest, UtteranceRecord, Vocab, Waveform};

use crate::{AblateArgs, AverageArgs, Cli, Command, DecodeArgs, FeaturizeArgs, ScoreArgs, SynthArgs, TrainArgs};

/// Bad flag combination or missing required input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 usage, 2 data, 3 numeric failure.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    for cause in e.chain() {
        if let Some(Error::Numeric { .. } | Error::NonFinite(_)) = cause.downcast_ref::<Error>() {
            return 3;
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Featurize(a) => featurize(a),
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Train(a) => train(a, seed),
        Command::Average(a) => average(a),
        Command::Decode(a) => decode(a),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn featurize(a: FeaturizeArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let cfg = LogMelConfig { n_mels: a.n_mels, win_ms: a.win_ms, hop_ms: a.hop_ms, ..LogMelConfig::default() };
    let extracted: Vec<(&UtteranceRecord, mspt_core::Result<FeatureMatrix>)> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let r = match rec.kind {
                SourceKind::Audio => {
                    Waveform::read_wav(&manifest.resolve(rec)).and_then(|w| extract_logmel(&w, &cfg))
                }
                SourceKind::Feat => Err(Error::Invalid("already a feature file".into())),
            };
            (rec, r)
        })
        .collect();

    let mut failures = 0;
    let mut ok = Vec::new();
    for (rec, r) in extracted {
        match r {
            Ok(f) => ok.push((rec, f)),
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", rec.id);
            }
        }
    }
    let stats = accumulate_speaker_stats(ok.iter().map(|(r, f)| (r.speaker.as_str(), f)))?;
    let by_speaker: BTreeMap<&str, _> = stats.iter().map(|s| (s.speaker_id.as_str(), s)).collect();

    fs::create_dir_all(&a.out)?;
    let written: Vec<UtteranceRecord> = ok
        .par_iter()
        .map(|(rec, f)| {
            let mut f = f.clone();
            if !a.no_normalize {
                f = normalize(&f, by_speaker[rec.speaker.as_str()])?;
            }
            f = stack_and_downsample(&f, a.stack_left, a.stack_factor)?;
            let name = format!("{}.feat", rec.id);
            write_features(&a.out.join(&name), &f)?;
            Ok(UtteranceRecord { source: name.into(), kind: SourceKind::Feat, ..(*rec).clone() })
        })
        .collect::<mspt_core::Result<_>>()?;
    Manifest::new(written).write(&a.out.join("feats.tsv"))?;
    log::info!("featurized {} of {} utterances into {}", ok.len(), manifest.len(), a.out.display());
    if failures > 0 {
        bail!("{failures} of {} utterances failed", manifest.len());
    }
    Ok(())
}

fn synth(a: SynthArgs, seed: u64) -> Result<()> {
    let manifest = Manifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let vocab = Vocab::read(&a.vocab).with_context(|| format!("reading {}", a.vocab.display()))?;
    let cfg = SynthConfig { frames_per_token: a.frames_per_token, feature_dim: a.dim, noise_std: a.noise, seed };
    let bank = build_templates(&vocab, &cfg)?;
    let items = manifest
        .records
        .iter()
        .map(|r| {
            vocab
                .encode_strict(&r.transcript)
                .map(|t| (r.id.clone(), t))
                .with_context(|| format!("utterance {}", r.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let feats = synthesize_corpus(&items, &bank)?;
    fs::create_dir_all(&a.out)?;
    let mut records = Vec::with_capacity(items.len());
    for (rec, f) in manifest.records.iter().zip(&feats) {
        let name = format!("{}.feat", rec.id);
        write_features(&a.out.join(&name), f)?;
        records.push(UtteranceRecord {
            speaker: "synth".into(),
            source: name.into(),
            kind: SourceKind::Feat,
            ..rec.clone()
        });
    }
    Manifest::new(records).write(&a.out.join("pairs.tsv"))?;
    log::info!("synthesized {} utterances into {}", feats.len(), a.out.display());
    Ok(())
}

fn parse_artifact(name: &str) -> Result<Option<&'static str>> {
    match name {
        "none" | "scratch" => Ok(None),
        "M0" => Ok(Some("M0")),
        "M1" => Ok(Some("M1")),
        "M2" => Ok(Some("M2")),
        other => Err(usage(format!("unknown init artifact {other:?}; expected none, M0, M1 or M2"))),
    }
}

fn find_artifact(name: &str, dirs: &[std::path::PathBuf]) -> Result<ModelParams> {
    for d in dirs {
        if let Ok(run) = RunDir::open(d) {
            if run.artifact_path(name).exists() {
                return Ok(run.read_artifact(name)?);
            }
        }
    }
    Err(Error::State(format!(
        "artifact {name} not found in {}",
        if dirs.is_empty() { "any run (pass --init-from)".to_string() } else { format!("{dirs:?}") }
    ))
    .into())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut file = StageConfigFile::read(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
        file.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        file.train.seed = s;
    }
    let stage = file.train.stage;
    let init_name = match (&a.preset, &a.init) {
        (Some(p), _) => p.required_artifact().map(|x| match x {
            mspt_core::pipeline::Artifact::M0 => "M0",
            mspt_core::pipeline::Artifact::M1 => "M1",
            mspt_core::pipeline::Artifact::M2 => "M2",
        }),
        (None, Some(name)) => parse_artifact(name)?,
        (None, None) => None,
    };
    if a.dump_masks.is_some() && stage != Stage::Acoustic {
        return Err(usage("--dump-masks applies to the acoustic stage only"));
    }
    let vocab = match &a.vocab {
        Some(p) => Some(Vocab::read(p).with_context(|| format!("reading {}", p.display()))?),
        None if stage.is_supervised() => return Err(usage(format!("the {stage} stage needs --vocab"))),
        None => None,
    };

    let init = init_name.map(|n| find_artifact(n, &a.init_from)).transpose()?;
    let manifest = Manifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let data = load_examples(&manifest, vocab.as_ref())?;
    let valid = match &a.valid {
        Some(p) => load_examples(&Manifest::read(p)?, vocab.as_ref())?,
        None => Vec::new(),
    };
    let first = data.first().ok_or_else(|| anyhow!("{} lists no utterances", a.manifest.display()))?;
    file.model.input_dim = first.feats.ncols();
    file.model.vocab_size = vocab.as_ref().map_or(1, Vocab::len);

    let run = RunDir::create(&a.run)?;
    if !run.list_checkpoints()?.is_empty() {
        return Err(Error::State(format!("{} already holds checkpoints", a.run.display())).into());
    }
    fs::write(a.run.join("model.cfg"), file.to_text())?;
    if let Some(v) = &vocab {
        v.write(&a.run.join("vocab.txt"))?;
    }
    if let Some(path) = &a.dump_masks {
        let mut out = String::new();
        for ex in &data {
            let plan = sample_plan(ex.feats.nrows(), &file.train.mask, mask_seed(file.train.seed, &ex.id, 1))?;
            out.push_str(&plan.dump_line(&ex.id));
            out.push('\n');
        }
        fs::write(path, out)?;
    }

    let stage_init = match (&init, init_name) {
        (None, _) => StageInit::Scratch,
        (Some(p), Some("M0")) => StageInit::Encoder(p),
        (Some(p), _) => StageInit::Full(p),
    };
    log::info!("{stage} stage: {} utterances, {} steps", data.len(), file.train.max_steps);
    let outcome = run_stage(&file.train, &file.model, &data, &valid, stage_init);
    let outcome = match outcome {
        Err(e @ Error::Numeric { .. }) => {
            log::error!("{e}");
            return Err(e.into());
        }
        other => other?,
    };

    let mut log_file = fs::File::create(run.logs().join("train.log"))?;
    for rec in &outcome.log {
        writeln!(log_file, "{rec}")?;
    }
    if !outcome.evals.is_empty() {
        let mut f = fs::File::create(run.logs().join("valid.log"))?;
        for e in &outcome.evals {
            writeln!(f, "{}\t{:.6}", e.step, e.loss)?;
        }
    }
    for ck in &outcome.checkpoints {
        ck.write(&run.checkpoint_path(ck.step), DType::F64)?;
    }
    let (name, params) = match stage {
        Stage::Acoustic => ("M0", outcome.artifacts.m0.as_ref().expect("acoustic stage yields M0")),
        Stage::Linguistic if init_name == Some("M0") => ("M1", &outcome.averaged),
        Stage::Linguistic => ("M2", &outcome.averaged),
        Stage::Posttrain => ("final", &outcome.averaged),
    };
    let path = run.write_artifact(name, params, stage)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn average(a: AverageArgs) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let cfg = StageConfigFile::read(&a.run.join("model.cfg"))?;
    let n = a.n.unwrap_or(cfg.train.avg_last_n);
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let paths = run.list_checkpoints()?;
    if paths.is_empty() {
        return Err(Error::State(format!("{} has no checkpoints", a.run.display())).into());
    }
    let tail = &paths[paths.len().saturating_sub(n)..];
    let ckpts = tail.iter().map(|p| Checkpoint::read(p)).collect::<mspt_core::Result<Vec<_>>>()?;
    let params = average_checkpoints(&ckpts)?;
    let last = ckpts.last().expect("non-empty");
    Checkpoint::new(params, None, last.step, last.stage).write(&a.out, DType::F64)?;
    log::info!("averaged {} checkpoints into {}", ckpts.len(), a.out.display());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let run = RunDir::open(&a.run)?;
    let mut cfg = StageConfigFile::read(&a.run.join("model.cfg"))?;
    let vocab = Vocab::read(&a.vocab)?;
    let manifest = Manifest::read(&a.manifest)?;
    let mut data = load_examples(&manifest, None)?;
    data.sort_by(|x, y| x.id.cmp(&y.id));
    let first = data.first().ok_or_else(|| anyhow!("{} lists no utterances", a.manifest.display()))?;
    cfg.model.input_dim = first.feats.ncols();
    cfg.model.vocab_size = vocab.len();

    let params = match &a.params {
        Some(p) => Checkpoint::read(p)?.params,
        None => {
            let paths = run.list_checkpoints()?;
            let tail = &paths[paths.len().saturating_sub(cfg.train.avg_last_n)..];
            let ckpts = tail.iter().map(|p| Checkpoint::read(p)).collect::<mspt_core::Result<Vec<_>>>()?;
            if ckpts.is_empty() {
                return Err(Error::State(format!("{} has no checkpoints", a.run.display())).into());
            }
            average_checkpoints(&ckpts)?
        }
    };
    check_shapes(&cfg.model, Parts::SEQ2SEQ, &params)?;
    let dc = DecodeConfig { beam_size: a.beam, alpha: a.alpha, max_len: a.max_len };
    dc.validate().map_err(|e| usage(e.to_string()))?;

    let lines: Vec<String> = data
        .par_iter()
        .map(|ex| {
            let scorer = ModelScorer::new(&cfg.model, &params, &ex.id, &ex.feats)?;
            let best = if a.greedy {
                greedy_search(&scorer, dc.max_len, dc.alpha)?
            } else {
                beam_search(&scorer, &dc)?.swap_remove(0)
            };
            if best.forced {
                log::warn!("{}: no hypothesis finished within {} tokens", ex.id, dc.max_len);
            }
            Ok(format!("{}\t{}\t{:.6}\n", ex.id, vocab.decode(best.content()), best.score))
        })
        .collect::<mspt_core::Result<_>>()?;
    fs::write(&a.out, lines.concat())?;
    log::info!("decoded {} utterances into {}", lines.len(), a.out.display());
    Ok(())
}

/// `id -> text` from `id<TAB>text...` lines or a five-column manifest.
fn read_texts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let body = match cols.len() {
            1 => "",
            5 => cols[4],
            _ => cols[1],
        };
        if out.insert(cols[0].to_string(), body.to_string()).is_some() {
            bail!("{}:{}: duplicate utterance id {}", path.display(), i + 1, cols[0]);
        }
    }
    Ok(out)
}

fn score(a: ScoreArgs) -> Result<()> {
    let vocab = a.vocab.as_deref().map(Vocab::read).transpose()?;
    if a.mode == MetricMode::Piece && vocab.is_none() {
        return Err(usage("--mode piece needs --vocab"));
    }
    let refs = read_texts(&a.reference)?;
    let hyps = read_texts(&a.hyp)?;
    let missing: Vec<&str> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        bail!("no hypothesis for {} utterance(s): {}", missing.len(), missing.join(", "));
    }
    let mut report = String::from("id\tsub\tins\tdel\tref_len\trate\n");
    let mut total = ErrorCounts::default();
    for (id, r) in &refs {
        let rt = tokenize_for_metric(r, a.mode, vocab.as_ref())?;
        let ht = tokenize_for_metric(&hyps[id], a.mode, vocab.as_ref())?;
        let c = edit_distance(&rt, &ht);
        let rate = error_rate(&c).map_or_else(|_| "-".to_string(), |x| format!("{x:.2}"));
        report.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\t{rate}\n",
            c.substitutions, c.insertions, c.deletions, c.reference_length
        ));
        total += c;
    }
    let rate = error_rate(&total)?;
    report.push_str(&format!(
        "corpus\t{}\t{}\t{}\t{}\t{rate:.2}\n",
        total.substitutions, total.insertions, total.deletions, total.reference_length
    ));
    print!("{report}");
    if let Some(p) = &a.out {
        fs::write(p, &report)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let mut toy = ToyConfig::default();
    let mut cfg = AblationConfig::toy(&toy);
    if a.quick {
        toy = ToyConfig {
            acoustic_utts: 40,
            linguistic_pairs: 40,
            posttrain_pairs: 12,
            valid_pairs: 6,
            test_pairs: 6,
            ..toy
        };
        for t in [&mut cfg.acoustic, &mut cfg.linguistic, &mut cfg.posttrain] {
            t.max_steps = 6;
            t.batch_size = 4;
            t.checkpoint_every = 2;
            t.eval_every = 3;
        }
    }
    cfg.presets = a.presets.clone();
    let seeds = match seed {
        Some(s) if a.seeds == [0, 1, 2, 3, 4] => vec![s],
        _ => a.seeds.clone(),
    };
    let report = run_ablation(&toy, &cfg, &seeds)?;
    let mut out = report.table();
    for &p in &a.presets {
        if p != Preset::A0 && a.presets.contains(&Preset::A0) {
            out.push_str(&format!(
                "# {p} vs A0: val_loss <= in {}/{} seeds, cer <= in {}/{} seeds\n",
                report.val_loss_wins(p, Preset::A0),
                seeds.len(),
                report.cer_wins(p, Preset::A0),
                seeds.len()
            ));
        }
    }
    print!("{out}");
    if let Some(p) = &a.out {
        fs::write(p, &out)?;
    }
    Ok(())
}
