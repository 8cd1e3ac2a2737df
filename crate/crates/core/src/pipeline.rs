//! Stage chaining: the synthetic toy corpus, the scratch-versus-pretrained
//! ablation presets, and the on-disk run layout shared by the command line.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::decode::{decode_utterance, BeamHypothesis, DecodeConfig};
use crate::error::{Error, Result};
use crate::frontend::{read_features, Manifest, SourceKind};
use crate::mask::MaskConfig;
use crate::nnet::{ModelConfig, ModelParams, NormPlacement};
use crate::rng;
use crate::score::{edit_distance, error_rate, ErrorCounts};
use crate::synthvoice::{build_templates, synthesize, utterance_seed, SynthConfig, TemplateBank};
use crate::train::{run_stage, Checkpoint, DType, EvalRecord, Example, Stage, StageInit, TrainConfig};
use crate::vocab::{Vocab, NUM_SPECIAL};

/// Sizes and noise levels of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_tokens: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub acoustic_utts: usize,
    pub linguistic_pairs: usize,
    pub posttrain_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub speakers: usize,
    /// Scale of the per-speaker linear distortion applied to in-domain speech.
    pub speaker_shift: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_tokens: 20,
            feature_dim: 8,
            frames_per_token: 4,
            noise_std: 0.02,
            acoustic_utts: 2000,
            linguistic_pairs: 2000,
            posttrain_pairs: 100,
            valid_pairs: 50,
            test_pairs: 50,
            min_len: 3,
            max_len: 8,
            speakers: 8,
            speaker_shift: 0.3,
        }
    }
}

/// First-order Markov chain over the corpus tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLanguage {
    start: Array1<f64>,
    transitions: Array2<f64>,
    min_len: usize,
    max_len: usize,
}

impl ToyLanguage {
    /// Each token strongly prefers three successors.
    pub fn new(n_tokens: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if n_tokens < 4 || min_len == 0 || max_len < min_len {
            return Err(Error::invalid("toy language needs >= 4 tokens and 1 <= min_len <= max_len"));
        }
        let mut r = rng::derived_rng(seed, "language", 0);
        let uniform = 0.05 / n_tokens as f64;
        let mut transitions = Array2::from_elem((n_tokens, n_tokens), uniform);
        for i in 0..n_tokens {
            let mut picks: Vec<usize> = (0..n_tokens).collect();
            for (k, w) in [0.6, 0.25, 0.1].into_iter().enumerate() {
                let j = r.random_range(k..n_tokens);
                picks.swap(k, j);
                transitions[[i, picks[k]]] += w;
            }
        }
        let start = Array1::from_elem(n_tokens, 1.0 / n_tokens as f64);
        Ok(Self { start, transitions, min_len, max_len })
    }

    pub fn n_tokens(&self) -> usize {
        self.start.len()
    }

    /// Token indices in `0..n_tokens`.
    pub fn sample(&self, r: &mut rng::Rng) -> Vec<usize> {
        let len = r.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len);
        let mut dist = self.start.view();
        for _ in 0..len {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut pick = dist.len() - 1;
            for (j, p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            out.push(pick);
            dist = self.transitions.row(pick);
        }
        out
    }
}

/// Linear distortion of one in-domain speaker: `x A^T + b`.
#[derive(Debug, Clone, PartialEq)]
struct Speaker {
    a: Array2<f64>,
    b: Array1<f64>,
}

impl Speaker {
    fn new(d: usize, shift: f64, seed: u64, index: u64) -> Self {
        let mut r = rng::derived_rng(seed, "speaker", index);
        let scale = shift / (d as f64).sqrt();
        let mut a = Array2::from_shape_simple_fn((d, d), || {
            let z: f64 = StandardNormal.sample(&mut r);
            scale * z
        });
        for i in 0..d {
            a[[i, i]] += 1.0;
        }
        let b = Array1::from_shape_simple_fn(d, || {
            let z: f64 = StandardNormal.sample(&mut r);
            shift * z
        });
        Self { a, b }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.a.t()) + &self.b
    }
}

/// All splits of the synthetic experiment.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub bank: TemplateBank,
    pub language: ToyLanguage,
    /// Unlabeled in-domain speech.
    pub acoustic: Vec<Example>,
    /// Single-speaker synthesized pairs.
    pub linguistic: Vec<Example>,
    /// Labeled in-domain speech.
    pub posttrain: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

fn token_symbol(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        char::from_u32(0x4e00 + i as u32).map(String::from).unwrap_or_else(|| format!("t{i}"))
    }
}

impl ToyCorpus {
    pub fn build(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::new((0..cfg.n_tokens).map(token_symbol))?;
        let synth = SynthConfig {
            frames_per_token: cfg.frames_per_token,
            feature_dim: cfg.feature_dim,
            noise_std: cfg.noise_std,
            seed: rng::derive_seed(seed, "templates", 0),
        };
        let bank = build_templates(&vocab, &synth)?;
        let language = ToyLanguage::new(cfg.n_tokens, cfg.min_len, cfg.max_len, seed)?;
        let speakers: Vec<Speaker> = (0..cfg.speakers.max(1) as u64)
            .map(|i| Speaker::new(cfg.feature_dim, cfg.speaker_shift, seed, i))
            .collect();

        let split = |label: &str, n: usize| -> Vec<(String, Vec<usize>)> {
            let mut r = rng::derived_rng(seed, label, 0);
            (0..n)
                .map(|i| {
                    let toks = language.sample(&mut r).into_iter().map(|t| t + NUM_SPECIAL).collect();
                    (format!("{label}{i:05}"), toks)
                })
                .collect()
        };
        let clean = |items: Vec<(String, Vec<usize>)>| -> Result<Vec<Example>> {
            items
                .into_par_iter()
                .map(|(id, toks)| {
                    let f = synthesize(&toks, &bank, utterance_seed(&synth, &id))?;
                    Ok(Example::labeled(id, f.into_frames(), toks))
                })
                .collect()
        };
        // In-domain frames are built from noiseless templates; their own
        // jitter is added after the speaker distortion.
        let noiseless_bank = build_templates(&vocab, &SynthConfig { noise_std: 0.0, ..synth })?;
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let in_domain = |items: Vec<(String, Vec<usize>)>, labeled: bool| {
            items
                .into_par_iter()
                .enumerate()
                .map(|(i, (id, toks))| {
                    let clean = synthesize(&toks, &noiseless_bank, 0)?.into_frames();
                    let mut x = speakers[i % speakers.len()].apply(&clean);
                    let mut r = rng::derived_rng(seed, &id, 1);
                    x.mapv_inplace(|v| v + normal.sample(&mut r));
                    Ok(if labeled { Example::labeled(id, x, toks) } else { Example::unlabeled(id, x) })
                })
                .collect::<Result<Vec<Example>>>()
        };

        Ok(Self {
            acoustic: in_domain(split("ac", cfg.acoustic_utts), false)?,
            linguistic: clean(split("ln", cfg.linguistic_pairs))?,
            posttrain: in_domain(split("pt", cfg.posttrain_pairs), true)?,
            valid: in_domain(split("va", cfg.valid_pairs), true)?,
            test: in_domain(split("te", cfg.test_pairs), true)?,
            vocab,
            bank,
            language,
        })
    }
}

/// Post-training initializations compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    /// From scratch.
    A0,
    /// From `M1`: acoustic then linguistic pre-training.
    A1,
    /// From `M0`: acoustic pre-training only.
    A2,
    /// From `M2`: linguistic pre-training only, encoder from scratch.
    A3,
}

/// Named pre-trained parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    M0,
    M1,
    M2,
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Artifact::M0 => "M0",
            Artifact::M1 => "M1",
            Artifact::M2 => "M2",
        })
    }
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::A0, Preset::A1, Preset::A2, Preset::A3];

    pub fn required_artifact(self) -> Option<Artifact> {
        match self {
            Preset::A0 => None,
            Preset::A1 => Some(Artifact::M1),
            Preset::A2 => Some(Artifact::M0),
            Preset::A3 => Some(Artifact::M2),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Preset::A0 => "scratch",
            Preset::A1 => "M1 init",
            Preset::A2 => "M0 init",
            Preset::A3 => "M2 init",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A0" | "a0" => Ok(Preset::A0),
            "A1" | "a1" => Ok(Preset::A1),
            "A2" | "a2" => Ok(Preset::A2),
            "A3" | "a3" => Ok(Preset::A3),
            other => Err(Error::invalid(format!("unknown preset {other:?}; expected A0, A1, A2 or A3"))),
        }
    }
}

/// Pre-trained parameter sets available to post-training.
#[derive(Debug, Clone, Default)]
pub struct Pretrained {
    pub m0: Option<ModelParams>,
    pub m1: Option<ModelParams>,
    pub m2: Option<ModelParams>,
}

impl Pretrained {
    pub fn get(&self, a: Artifact) -> Option<&ModelParams> {
        match a {
            Artifact::M0 => self.m0.as_ref(),
            Artifact::M1 => self.m1.as_ref(),
            Artifact::M2 => self.m2.as_ref(),
        }
    }

    /// Stage initialization for `preset`; fails if its artifact is missing.
    pub fn init_for(&self, preset: Preset) -> Result<StageInit<'_>> {
        let Some(a) = preset.required_artifact() else {
            return Ok(StageInit::Scratch);
        };
        let p = self
            .get(a)
            .ok_or_else(|| Error::State(format!("preset {preset} needs artifact {a}, which does not exist")))?;
        Ok(match a {
            Artifact::M0 => StageInit::Encoder(p),
            Artifact::M1 | Artifact::M2 => StageInit::Full(p),
        })
    }
}

/// Model, stage schedules and decoding settings of one ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub acoustic: TrainConfig,
    pub linguistic: TrainConfig,
    pub posttrain: TrainConfig,
    pub decode: DecodeConfig,
    pub presets: Vec<Preset>,
}

impl AblationConfig {
    /// Settings sized for the default toy corpus on a laptop CPU.
    pub fn toy(toy: &ToyConfig) -> Self {
        let model = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab_size: toy.n_tokens + NUM_SPECIAL,
            input_dim: toy.feature_dim,
            dropout: 0.1,
            norm: NormPlacement::Post,
            positional: true,
        };
        let stage = |stage: Stage, steps: usize| TrainConfig {
            batch_size: 16,
            max_steps: steps,
            warmup_steps: 100,
            checkpoint_every: 20,
            avg_last_n: 5,
            log_every: 10,
            eval_every: 50,
            ..TrainConfig::new(stage)
        };
        let mut acoustic = stage(Stage::Acoustic, 1500);
        acoustic.mask = MaskConfig { k: 2, w: 4, zero_prob: 0.8 };
        Self {
            model,
            acoustic,
            linguistic: stage(Stage::Linguistic, 800),
            posttrain: stage(Stage::Posttrain, 500),
            decode: DecodeConfig { beam_size: 4, alpha: 0.6, max_len: toy.max_len + 4 },
            presets: vec![Preset::A0, Preset::A1],
        }
    }

    fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig { seed: rng::derive_seed(seed, &cfg.stage.to_string(), 0), ..cfg.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (cfg, stage) in [
            (&self.acoustic, Stage::Acoustic),
            (&self.linguistic, Stage::Linguistic),
            (&self.posttrain, Stage::Posttrain),
        ] {
            cfg.validate()?;
            if cfg.stage != stage {
                return Err(Error::invalid(format!("{stage} schedule is tagged {}", cfg.stage)));
            }
        }
        self.decode.validate()?;
        if self.presets.is_empty() {
            return Err(Error::invalid("ablation needs at least one preset"));
        }
        Ok(())
    }
}

/// Runs the pre-training stages needed by `presets`.
pub fn pretrain(corpus: &ToyCorpus, cfg: &AblationConfig, presets: &[Preset], seed: u64) -> Result<Pretrained> {
    let needs = |a: Artifact| presets.iter().any(|p| p.required_artifact() == Some(a));
    let mut out = Pretrained::default();
    if needs(Artifact::M0) || needs(Artifact::M1) {
        let ac = run_stage(&AblationConfig::seeded(&cfg.acoustic, seed), &cfg.model, &corpus.acoustic, &[], StageInit::Scratch)?;
        out.m0 = ac.artifacts.m0;
    }
    let ling = AblationConfig::seeded(&cfg.linguistic, seed);
    if needs(Artifact::M1) {
        let m0 = out.m0.as_ref().expect("acoustic stage ran");
        out.m1 = run_stage(&ling, &cfg.model, &corpus.linguistic, &[], StageInit::Encoder(m0))?.artifacts.m1;
    }
    if needs(Artifact::M2) {
        out.m2 = run_stage(&ling, &cfg.model, &corpus.linguistic, &[], StageInit::Scratch)?.artifacts.m1;
    }
    Ok(out)
}

/// Best hypotheses for `examples`, in input order.
pub fn transcribe(
    model: &ModelConfig,
    params: &ModelParams,
    examples: &[Example],
    cfg: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>> {
    examples
        .par_iter()
        .map(|ex| decode_utterance(model, params, &ex.id, &ex.feats, cfg))
        .collect()
}

/// Character error counts of `hyps` against the transcripts of `examples`.
pub fn corpus_errors(vocab: &Vocab, examples: &[Example], hyps: &[BeamHypothesis]) -> Result<ErrorCounts> {
    if examples.len() != hyps.len() {
        return Err(Error::invalid("hypothesis count differs from example count"));
    }
    let mut total = ErrorCounts::default();
    for (ex, h) in examples.iter().zip(hyps) {
        let reference = ex
            .tokens
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("utterance {} has no transcript", ex.id)))?;
        let r: Vec<char> = vocab.decode(reference).chars().filter(|c| !c.is_whitespace()).collect();
        let y: Vec<char> = vocab.decode(h.content()).chars().filter(|c| !c.is_whitespace()).collect();
        total += edit_distance(&r, &y);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetResult {
    pub preset: Preset,
    /// Validation loss after the last post-training step.
    pub val_loss: f64,
    pub val_curve: Vec<EvalRecord>,
    pub errors: ErrorCounts,
    pub cer: f64,
}

/// Post-trains one preset and scores it on the test split.
pub fn posttrain_preset(
    corpus: &ToyCorpus,
    cfg: &AblationConfig,
    pretrained: &Pretrained,
    preset: Preset,
    seed: u64,
) -> Result<PresetResult> {
    let init = pretrained.init_for(preset)?;
    let stage = AblationConfig::seeded(&cfg.posttrain, seed);
    let out = run_stage(&stage, &cfg.model, &corpus.posttrain, &corpus.valid, init)?;
    let val_loss = out.evals.last().map_or(f64::NAN, |e| e.loss);
    let hyps = transcribe(&cfg.model, &out.averaged, &corpus.test, &cfg.decode)?;
    let errors = corpus_errors(&corpus.vocab, &corpus.test, &hyps)?;
    Ok(PresetResult { preset, val_loss, val_curve: out.evals, cer: error_rate(&errors)?, errors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub presets: Vec<PresetResult>,
}

impl SeedResult {
    pub fn get(&self, p: Preset) -> Option<&PresetResult> {
        self.presets.iter().find(|r| r.preset == p)
    }
}

/// One full seed: corpus, pre-training, and every configured preset.
pub fn run_ablation_seed(toy: &ToyConfig, cfg: &AblationConfig, seed: u64) -> Result<SeedResult> {
    cfg.validate()?;
    let corpus = ToyCorpus::build(toy, seed)?;
    let pretrained = pretrain(&corpus, cfg, &cfg.presets, seed)?;
    let presets = cfg
        .presets
        .par_iter()
        .map(|&p| posttrain_preset(&corpus, cfg, &pretrained, p, seed))
        .collect::<Result<_>>()?;
    Ok(SeedResult { seed, presets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<SeedResult>,
}

impl AblationReport {
    /// Seeds on which `better` reached a validation loss no higher than `base`.
    pub fn val_loss_wins(&self, better: Preset, base: Preset) -> usize {
        self.count(|s| Some(s.get(better)?.val_loss <= s.get(base)?.val_loss))
    }

    /// Seeds on which `better` had a CER no higher than `base`.
    pub fn cer_wins(&self, better: Preset, base: Preset) -> usize {
        self.count(|s| Some(s.get(better)?.cer <= s.get(base)?.cer))
    }

    fn count(&self, f: impl Fn(&SeedResult) -> Option<bool>) -> usize {
        self.seeds.iter().filter(|s| f(s).unwrap_or(false)).count()
    }

    /// One row per (seed, preset) plus a mean row per preset.
    pub fn table(&self) -> String {
        let mut out = String::from("seed\tpreset\tinit\tval_loss\tcer\n");
        let mut presets: Vec<Preset> = self.seeds.iter().flat_map(|s| s.presets.iter().map(|r| r.preset)).collect();
        presets.sort();
        presets.dedup();
        for s in &self.seeds {
            for r in &s.presets {
                let _ = writeln!(out, "{}\t{}\t{}\t{:.4}\t{:.2}", s.seed, r.preset, r.preset.describe(), r.val_loss, r.cer);
            }
        }
        for p in presets {
            let rs: Vec<&PresetResult> = self.seeds.iter().filter_map(|s| s.get(p)).collect();
            let n = rs.len() as f64;
            let vl = rs.iter().map(|r| r.val_loss).sum::<f64>() / n;
            let errors: ErrorCounts = rs.iter().map(|r| r.errors).sum();
            let cer = error_rate(&errors).unwrap_or(f64::NAN);
            let _ = writeln!(out, "mean\t{p}\t{}\t{vl:.4}\t{cer:.2}", p.describe());
        }
        out
    }
}

/// Runs every seed; seeds are independent and evaluated in parallel.
pub fn run_ablation(toy: &ToyConfig, cfg: &AblationConfig, seeds: &[u64]) -> Result<AblationReport> {
    let seeds = seeds
        .par_iter()
        .map(|&s| run_ablation_seed(toy, cfg, s))
        .collect::<Result<_>>()?;
    Ok(AblationReport { seeds })
}

/// `<root>/checkpoints`, `<root>/logs`, `<root>/artifacts/<name>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

const ARTIFACT_FILE: &str = "params.mskc";

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self { root: root.into() };
        for d in [dir.checkpoints(), dir.logs(), dir.root.join("artifacts")] {
            fs::create_dir_all(d)?;
        }
        Ok(dir)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self { root: root.into() };
        if !dir.checkpoints().is_dir() {
            return Err(Error::State(format!("{} is not a run directory", dir.root.display())));
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.root.join("artifacts").join(name).join(ARTIFACT_FILE)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step:08}.mskc"))
    }

    /// Checkpoint files ordered by step.
    pub fn list_checkpoints(&self) -> Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(self.checkpoints())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mskc"))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Artifacts are written once; an existing one is never replaced.
    pub fn write_artifact(&self, name: &str, params: &ModelParams, stage: Stage) -> Result<PathBuf> {
        let path = self.artifact_path(name);
        if path.exists() {
            return Err(Error::State(format!("artifact {} already exists", path.display())));
        }
        fs::create_dir_all(path.parent().expect("artifact path has a parent"))?;
        Checkpoint::new(params.clone(), None, 0, stage).write(&path, DType::F64)?;
        Ok(path)
    }

    pub fn read_artifact(&self, name: &str) -> Result<ModelParams> {
        let path = self.artifact_path(name);
        if !path.exists() {
            return Err(Error::State(format!("artifact {name} not found at {}", path.display())));
        }
        Ok(Checkpoint::read(&path)?.params)
    }
}

/// Loads feature-file utterances; transcripts are encoded with `vocab` when
/// given. Audio entries must be featurized first.
pub fn load_examples(manifest: &Manifest, vocab: Option<&Vocab>) -> Result<Vec<Example>> {
    manifest
        .records
        .par_iter()
        .map(|rec| {
            if rec.kind != SourceKind::Feat {
                return Err(Error::invalid(format!("utterance {} is audio; run featurize first", rec.id)));
            }
            let path = manifest.resolve(rec);
            let feats = read_features(&path)?;
            let tokens = match vocab {
                Some(v) if rec.has_transcript() => Some(
                    v.encode_strict(&rec.transcript)
                        .map_err(|e| Error::invalid(format!("utterance {}: {e}", rec.id)))?,
                ),
                _ => None,
            };
            Ok(Example::from_features(rec.id.clone(), &feats, tokens))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_toy() -> ToyConfig {
        ToyConfig {
            acoustic_utts: 30,
            linguistic_pairs: 30,
            posttrain_pairs: 10,
            valid_pairs: 4,
            test_pairs: 4,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn toy_corpus_shapes_and_determinism() {
        let cfg = small_toy();
        let a = ToyCorpus::build(&cfg, 3).unwrap();
        let b = ToyCorpus::build(&cfg, 3).unwrap();
        assert_eq!(a.acoustic, b.acoustic);
        assert_eq!(a.linguistic, b.linguistic);
        assert_eq!(a.vocab.len(), 24);
        assert!(a.acoustic.iter().all(|e| e.tokens.is_none()));
        for ex in a.linguistic.iter().chain(&a.posttrain).chain(&a.test) {
            let t = ex.tokens.as_ref().unwrap();
            assert!((3..=8).contains(&t.len()));
            assert!(t.iter().all(|&id| (NUM_SPECIAL..24).contains(&id)));
            assert_eq!(ex.feats.dim(), (4 * t.len(), 8));
        }
        let c = ToyCorpus::build(&cfg, 4).unwrap();
        assert_ne!(a.linguistic, c.linguistic);
    }

    #[test]
    fn language_prefers_few_successors() {
        let lang = ToyLanguage::new(20, 3, 8, 1).unwrap();
        for row in lang.transitions.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let mut p: Vec<f64> = row.to_vec();
            p.sort_by(|a, b| b.total_cmp(a));
            assert!(p[0] + p[1] + p[2] >= 0.95 - 1e-12);
        }
    }

    #[test]
    fn in_domain_speech_differs_from_synthesis() {
        let toy = ToyCorpus::build(&small_toy(), 0).unwrap();
        let ex = &toy.posttrain[0];
        let clean = synthesize(ex.tokens.as_ref().unwrap(), &toy.bank, 0).unwrap();
        let diff = (&ex.feats - clean.frames()).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.05, "mean abs difference {diff}");
    }

    #[test]
    fn presets_and_artifacts() {
        assert_eq!("A2".parse::<Preset>().unwrap(), Preset::A2);
        assert!("A9".parse::<Preset>().is_err());
        let none = Pretrained::default();
        assert!(matches!(none.init_for(Preset::A0), Ok(StageInit::Scratch)));
        assert!(matches!(none.init_for(Preset::A1), Err(Error::State(_))));
    }

    #[test]
    fn run_dir_layout_is_append_only() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDir::create(tmp.path().join("run")).unwrap();
        assert!(run.logs().is_dir() && run.checkpoints().is_dir());
        let model = ModelConfig::tiny(3, 6);
        let params = crate::nnet::init_params(&model, 0).unwrap();
        run.write_artifact("M1", &params, Stage::Linguistic).unwrap();
        assert!(matches!(run.write_artifact("M1", &params, Stage::Linguistic), Err(Error::State(_))));
        assert_eq!(run.read_artifact("M1").unwrap(), params);
        assert!(run.read_artifact("M0").is_err());
        assert!(RunDir::open(tmp.path()).is_err());
    }

    #[test]
    fn tiny_ablation_runs_end_to_end() {
        let toy = small_toy();
        let mut cfg = AblationConfig::toy(&toy);
        for (stage, steps) in [(&mut cfg.acoustic, 4), (&mut cfg.linguistic, 4), (&mut cfg.posttrain, 4)] {
            stage.max_steps = steps;
            stage.checkpoint_every = 2;
            stage.eval_every = 2;
            stage.batch_size = 4;
        }
        cfg.presets = Preset::ALL.to_vec();
        let a = run_ablation(&toy, &cfg, &[1]).unwrap();
        let b = run_ablation(&toy, &cfg, &[1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seeds[0].presets.len(), 4);
        assert!(a.table().lines().count() == 1 + 4 + 4);
        for r in &a.seeds[0].presets {
            assert!(r.val_loss.is_finite() && r.cer >= 0.0);
            assert_eq!(r.val_curve.len(), 2);
        }
    }
}
