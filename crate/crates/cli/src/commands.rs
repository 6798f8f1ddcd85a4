//! Subcommands. Every value flag can also come from `EMPATH_<KEY>` or the config file,
//! where the key is the long flag name with dashes replaced by underscores.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use empathy_core::analytics::{
    annotate_logs, empathy_over_time, feedback_by_level, follow_analysis, gender_crosstab, load_log, log_to_string,
    CohortSpec, GroupStats,
};
use empathy_core::labels::{Level, Mechanism};
use empathy_core::pipeline::encode_for;
use empathy_core::text::{encode_pair, load_corpus, split_dataset, AnnotatedPair, TokenizedPair, DEFAULT_RATIOS};
use empathy_core::train::checkpoint::{file_digest, load_model, save_model, CheckpointMeta};
use empathy_core::train::gradcheck::{gradient_check, GradCheckOptions};
use empathy_core::train::mlm::pretrain_model;
use empathy_core::train::train_with;
use empathy_core::{
    evaluate, fixtures, generate_feedback, score_delta, BiEncoderModel, EncoderConfig, FeedbackReport,
    FeedbackTemplateSet, LossWeights, MlmConfig, ModelFlags, Pipeline, Prediction, TrainConfig, Vocabulary,
};

use crate::config::Settings;
use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "empathy", version, about = "Empathy mechanism classification, feedback and log analytics")]
pub struct Cli {
    /// `key = value` settings file (also EMPATH_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from the texts of an annotated corpus.
    BuildVocab(BuildVocabArgs),
    /// Masked-LM pretraining of both encoders on corpus texts.
    Pretrain(PretrainArgs),
    /// Fine-tune one mechanism model.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Levels and rationales for one (seeker, response) pair.
    Predict(PredictArgs),
    /// Templated writing feedback for one response.
    Feedback(FeedbackArgs),
    /// Aggregate statistics over an interaction log.
    Analyze(AnalyzeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output path [default: vocab.txt].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Drop tokens seen fewer times [default: 1].
    #[arg(long)]
    pub min_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Encoder layers [default: 2].
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads [default: 2].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Model width [default: 64].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Feed-forward width [default: 128].
    #[arg(long)]
    pub ff_dim: Option<usize>,
    /// Tokens per side including [CLS] and [SEP] [default: 64].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Concatenate the two [CLS] vectors instead of attending.
    #[arg(long)]
    pub no_attention: bool,
    /// Ignore the seeker post.
    #[arg(long)]
    pub no_seeker: bool,
    /// Drop the rationale loss.
    #[arg(long)]
    pub no_rationales: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Annotated corpus (TSV).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file [default: vocab.txt].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Seed of the 75:5:20 train/dev/test split [default: 12].
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output checkpoint [default: <mechanism>.pretrained.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 3]
    #[arg(long)]
    pub mlm_epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub mlm_batch_size: Option<usize>,
    /// [default: 0.15]
    #[arg(long)]
    pub mask_prob: Option<f64>,
    /// [default: 0.001]
    #[arg(long)]
    pub mlm_lr: Option<f64>,
    /// [default: 12]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start from the encoders of this checkpoint (e.g. a pretrained one).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output checkpoint [default: <mechanism>.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 4]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Identification loss weight [default: 1].
    #[arg(long)]
    pub lambda_ei: Option<f64>,
    /// Rationale loss weight [default: 0.5].
    #[arg(long)]
    pub lambda_re: Option<f64>,
    /// [default: 12]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// train, dev, test or all [default: test].
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelSet {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Emotional reactions checkpoint.
    #[arg(long)]
    pub checkpoint_er: Option<PathBuf>,
    /// Interpretations checkpoint.
    #[arg(long)]
    pub checkpoint_ip: Option<PathBuf>,
    /// Explorations checkpoint.
    #[arg(long)]
    pub checkpoint_ex: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub seeker: String,
    #[arg(long)]
    pub response: String,
    #[command(flatten)]
    pub models: ModelSet,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FeedbackArgs {
    #[arg(long)]
    pub seeker: String,
    #[arg(long)]
    pub response: String,
    /// An earlier draft; the score change is reported.
    #[arg(long)]
    pub previous: Option<String>,
    #[command(flatten)]
    pub models: ModelSet,
    /// Template file replacing the bundled wording.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Interaction log (TSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// cohorts, engagement, follow, gender or all [default: all].
    #[arg(long)]
    pub report: Option<String>,
    /// [default: 10]
    #[arg(long)]
    pub min_posts: Option<usize>,
    /// [default: 1.0]
    #[arg(long)]
    pub min_tenure_years: Option<f64>,
    /// Comma-separated join years to keep.
    #[arg(long)]
    pub join_years: Option<String>,
    /// Fill missing levels with the three models.
    #[arg(long)]
    pub annotate: bool,
    #[command(flatten)]
    pub models: ModelSet,
    /// Write the annotated log here.
    #[arg(long)]
    pub annotated_out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// [default: 127.0.0.1:8080]
    #[arg(long)]
    pub bind: Option<String>,
    #[command(flatten)]
    pub models: ModelSet,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// [default: 65536]
    #[arg(long)]
    pub max_body_bytes: Option<usize>,
    /// [default: 10000]
    #[arg(long)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check this checkpoint instead of a freshly initialized model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// [default: emotional_reactions]
    #[arg(long)]
    pub mechanism: Option<Mechanism>,
    /// [default: 0.0001]
    #[arg(long)]
    pub eps: Option<f64>,
    /// [default: 0.001]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Coordinates per tensor [default: 200].
    #[arg(long)]
    pub samples: Option<usize>,
    /// [default: 12]
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&s, a, out),
        Command::Pretrain(a) => pretrain(&s, a, out),
        Command::Train(a) => train(&s, a, out),
        Command::Eval(a) => eval(&s, a, out),
        Command::Predict(a) => predict(&s, a, out),
        Command::Feedback(a) => feedback(&s, a, out),
        Command::Analyze(a) => analyze(&s, a, out),
        Command::Serve(a) => serve(&s, a),
        Command::Gradcheck(a) => gradcheck(&s, a, out),
    }
}

fn vocab_path(s: &Settings, flag: Option<PathBuf>) -> Result<PathBuf> {
    s.get("vocab", flag, PathBuf::from("vocab.txt"))
}

fn corpus_texts(pairs: &[AnnotatedPair]) -> impl Iterator<Item = &str> {
    pairs.iter().flat_map(|p| [p.seeker.as_str(), p.response.as_str()])
}

fn build_vocab(s: &Settings, a: BuildVocabArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = load_corpus(s.require::<PathBuf>("corpus", a.corpus)?)?;
    let path = vocab_path(s, a.vocab)?;
    let vocab = Vocabulary::build(corpus_texts(&corpus), s.get("min_count", a.min_count, 1)?);
    vocab.save(&path)?;
    writeln!(out, "wrote {} tokens to {} (sha256 {})", vocab.len(), path.display(), vocab.hash())?;
    Ok(())
}

/// Loads the vocabulary, building and saving it from `corpus` when the file does not exist.
fn vocab_for(path: &Path, corpus: &[AnnotatedPair], out: &mut dyn Write) -> Result<Vocabulary> {
    if path.exists() {
        return Ok(Vocabulary::load(path)?);
    }
    let vocab = Vocabulary::build(corpus_texts(corpus), 1);
    vocab.save(path)?;
    writeln!(out, "built vocabulary of {} tokens at {}", vocab.len(), path.display())?;
    Ok(vocab)
}

fn encoder_config(s: &Settings, a: &ModelArgs, vocab_size: usize) -> Result<EncoderConfig> {
    let d = EncoderConfig::toy(vocab_size);
    let c = EncoderConfig {
        num_layers: s.get("layers", a.layers, d.num_layers)?,
        num_heads: s.get("heads", a.heads, d.num_heads)?,
        model_dim: s.get("dim", a.dim, d.model_dim)?,
        ff_dim: s.get("ff_dim", a.ff_dim, d.ff_dim)?,
        max_len: s.get("max_len", a.max_len, d.max_len)?,
        vocab_size,
        dropout_prob: s.get("dropout", a.dropout, d.dropout_prob)?,
    };
    c.validate()?;
    Ok(c)
}

fn model_flags(s: &Settings, a: &ModelArgs) -> Result<ModelFlags> {
    Ok(ModelFlags {
        use_attention: !s.switch("no_attention", a.no_attention)?,
        use_seeker: !s.switch("no_seeker", a.no_seeker)?,
        use_rationales: !s.switch("no_rationales", a.no_rationales)?,
    })
}

struct Data {
    vocab: Vocabulary,
    split: empathy_core::text::Split<AnnotatedPair>,
}

fn load_data(s: &Settings, a: DataArgs, out: &mut dyn Write) -> Result<Data> {
    let corpus_path: PathBuf = s.require("corpus", a.corpus)?;
    let corpus = load_corpus(&corpus_path)?;
    let vocab = vocab_for(&vocab_path(s, a.vocab)?, &corpus, out)?;
    let split = split_dataset(corpus, DEFAULT_RATIOS, s.get("split_seed", a.split_seed, 12)?)?;
    Ok(Data { vocab, split })
}

fn encode_all(pairs: &[AnnotatedPair], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenizedPair>> {
    Ok(pairs
        .iter()
        .map(|p| encode_pair(p, vocab, max_len))
        .collect::<empathy_core::Result<_>>()?)
}

fn fmt_curve(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn pretrain(s: &Settings, a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let mechanism: Mechanism = s.require("mechanism", a.mechanism)?;
    let data = load_data(s, a.data, out)?;
    let config = encoder_config(s, &a.model, data.vocab.len())?;
    let seed = s.get("seed", a.seed, 12)?;
    let d = MlmConfig::default();
    let mlm = MlmConfig {
        epochs: s.get("mlm_epochs", a.mlm_epochs, d.epochs)?,
        batch_size: s.get("mlm_batch_size", a.mlm_batch_size, d.batch_size)?,
        mask_prob: s.get("mask_prob", a.mask_prob, d.mask_prob)?,
        learning_rate: s.get("mlm_lr", a.mlm_lr, d.learning_rate)?,
    };
    let mut model = BiEncoderModel::<f32>::with_config(mechanism, config, model_flags(s, &a.model)?, seed)?;
    let seekers: Vec<&str> = data.split.train.iter().map(|p| p.seeker.as_str()).collect();
    let responses: Vec<&str> = data.split.train.iter().map(|p| p.response.as_str()).collect();
    let (sc, rc) = pretrain_model(&mut model, &seekers, &responses, &data.vocab, &mlm, seed)?;
    writeln!(out, "seeker mlm loss per epoch: {}", fmt_curve(&sc))?;
    writeln!(out, "response mlm loss per epoch: {}", fmt_curve(&rc))?;
    let path = s.get("out", a.out, PathBuf::from(format!("{}.pretrained.ckpt", mechanism.code())))?;
    let meta = CheckpointMeta {
        epoch: mlm.epochs,
        loss_curve: rc,
    };
    save_model(&path, &model, &meta, &data.vocab.hash())?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn train(s: &Settings, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mechanism: Mechanism = s.require("mechanism", a.mechanism)?;
    let data = load_data(s, a.data, out)?;
    let seed = s.get("seed", a.seed, 12)?;
    let flags = model_flags(s, &a.model)?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        batch_size: s.get("batch_size", a.batch_size, d.batch_size)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        loss: LossWeights {
            identification: s.get("lambda_ei", a.lambda_ei, d.loss.identification)?,
            rationale: s.get("lambda_re", a.lambda_re, d.loss.rationale)?,
        },
        seed,
        mlm: d.mlm,
        flags,
    };
    let model = match s.opt::<PathBuf>("init", a.init)? {
        Some(init) => {
            let (pre, _) = load_model::<f32>(&init, Some(&data.vocab.hash()))?;
            let mut m = BiEncoderModel::new(
                mechanism,
                pre.seeker_encoder.config.clone(),
                pre.response_encoder.config.clone(),
                flags,
                seed,
            )?;
            m.seeker_encoder = pre.seeker_encoder;
            m.response_encoder = pre.response_encoder;
            writeln!(out, "initialized encoders from {}", init.display())?;
            m
        }
        None => BiEncoderModel::with_config(mechanism, encoder_config(s, &a.model, data.vocab.len())?, flags, seed)?,
    };
    let max_len = model.response_encoder.config.max_len;
    let train_set = encode_all(&data.split.train, &data.vocab, max_len)?;
    let dev_set = encode_all(&data.split.dev, &data.vocab, max_len)?;
    writeln!(
        out,
        "training {} on {} pairs ({} dev), {} epochs",
        mechanism,
        train_set.len(),
        dev_set.len(),
        config.epochs
    )?;
    let mut log_err = Ok(());
    let outcome = train_with(&train_set, &dev_set, model, &config, |m| {
        let dev = match &m.dev {
            Some(r) => format!(
                " dev_accuracy={:.4} dev_macro_f1={:.4} dev_token_f1={:.4} dev_iou_f1={:.4}",
                r.accuracy, r.macro_f1, r.token_f1, r.iou_f1
            ),
            None => String::new(),
        };
        if log_err.is_ok() {
            log_err = writeln!(out, "epoch {} train_loss={:.4}{dev}", m.epoch, m.train_loss);
        }
    })?;
    log_err?;
    let path = s.get("out", a.out, PathBuf::from(format!("{}.ckpt", mechanism.code())))?;
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        loss_curve: outcome.history.iter().map(|m| m.train_loss).collect(),
    };
    save_model(&path, &outcome.model, &meta, &data.vocab.hash())?;
    writeln!(out, "best epoch {}; wrote {}", outcome.best_epoch, path.display())?;
    Ok(())
}

fn eval(s: &Settings, a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let path: PathBuf = s.require("checkpoint", a.checkpoint)?;
    let split_name = s.get("split", a.split, "test".to_string())?;
    let data = load_data(s, a.data, out)?;
    let (model, _) = load_model::<f32>(&path, Some(&data.vocab.hash()))?;
    let Data { vocab, split } = data;
    let pairs = match split_name.as_str() {
        "train" => split.train,
        "dev" => split.dev,
        "test" => split.test,
        "all" => split.train.into_iter().chain(split.dev).chain(split.test).collect(),
        other => bail!("unknown split {other:?} (expected train, dev, test or all)"),
    };
    if pairs.is_empty() {
        bail!("the {split_name} split is empty");
    }
    let set = encode_all(&pairs, &vocab, model.response_encoder.config.max_len)?;
    let report = evaluate(&model, &set)?;
    writeln!(out, "mechanism = {}", model.mechanism)?;
    writeln!(out, "split = {split_name}")?;
    writeln!(out, "examples = {}", set.len())?;
    write!(out, "{report}")?;
    Ok(())
}

/// Checkpoints named on the command line or in settings, ER, IP, EX order.
fn checkpoint_paths(s: &Settings, m: &ModelSet) -> Result<[Option<PathBuf>; 3]> {
    Ok([
        s.opt("checkpoint_er", m.checkpoint_er.clone())?,
        s.opt("checkpoint_ip", m.checkpoint_ip.clone())?,
        s.opt("checkpoint_ex", m.checkpoint_ex.clone())?,
    ])
}

fn all_checkpoints(s: &Settings, m: &ModelSet) -> Result<[PathBuf; 3]> {
    let [er, ip, ex] = checkpoint_paths(s, m)?;
    let need = |p: Option<PathBuf>, key: &str| p.ok_or_else(|| anyhow!("missing --{}", key.replace('_', "-")));
    Ok([need(er, "checkpoint_er")?, need(ip, "checkpoint_ip")?, need(ex, "checkpoint_ex")?])
}

fn load_pipeline(s: &Settings, m: &ModelSet) -> Result<Pipeline<f32>> {
    let vocab = vocab_path(s, m.vocab.clone())?;
    let [er, ip, ex] = all_checkpoints(s, m)?;
    Ok(service::load_pipeline(&vocab, [&er, &ip, &ex])?.pipeline)
}

fn describe_prediction(p: &Prediction, response: &str) -> String {
    let probs: Vec<String> = p.level_probs.iter().map(|x| format!("{x:.4}")).collect();
    let spans: Vec<String> = p
        .rationale_spans
        .iter()
        .map(|sp| format!("[{}, {}) {:?}", sp.start, sp.end, sp.slice(response).unwrap_or("")))
        .collect();
    format!(
        "{} level={} probs=[{}] rationale={}",
        p.mechanism,
        p.level,
        probs.join(", "),
        if spans.is_empty() { "-".to_string() } else { spans.join("; ") }
    )
}

fn predict(s: &Settings, a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = Vocabulary::load(vocab_path(s, a.models.vocab.clone())?)?;
    let paths = checkpoint_paths(s, &a.models)?;
    if paths.iter().all(Option::is_none) {
        bail!("give at least one of --checkpoint-er, --checkpoint-ip, --checkpoint-ex");
    }
    let mut preds = Vec::new();
    for (m, path) in Mechanism::ALL.into_iter().zip(paths) {
        let Some(path) = path else { continue };
        let (model, _) = load_model::<f32>(&path, Some(&vocab.hash()))?;
        if model.mechanism != m {
            bail!("{} holds a {} model, expected {}", path.display(), model.mechanism, m);
        }
        preds.push(model.predict(&encode_for(&model, &vocab, &a.seeker, &a.response)?)?);
    }
    if s.switch("json", a.json)? {
        let total: Option<u8> = (preds.len() == 3).then(|| preds.iter().map(|p| p.level as u8).sum());
        let body = serde_json::json!({
            "mechanisms": service::mechanism_outputs(&a.response, &preds).map_err(|e| anyhow!(e))?,
            "total_score": total,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&body)?)?;
        return Ok(());
    }
    for p in &preds {
        writeln!(out, "{}", describe_prediction(p, &a.response))?;
    }
    if preds.len() == 3 {
        let total: u8 = preds.iter().map(|p| p.level as u8).sum();
        writeln!(out, "total_score = {total}")?;
    }
    Ok(())
}

fn render_report(r: &FeedbackReport, out: &mut dyn Write) -> Result<()> {
    for m in &r.mechanisms {
        writeln!(out, "{} = {}", m.mechanism, m.level)?;
    }
    writeln!(out, "total_score = {}", r.total_score)?;
    if r.offer_rewrite {
        writeln!(out, "consider rewriting this response")?;
    }
    for item in &r.items {
        writeln!(out, "- {}", item.text)?;
    }
    Ok(())
}

fn feedback(s: &Settings, a: FeedbackArgs, out: &mut dyn Write) -> Result<()> {
    let pipeline = load_pipeline(s, &a.models)?;
    let templates = match s.opt::<PathBuf>("templates", a.templates)? {
        Some(p) => FeedbackTemplateSet::load(p)?,
        None => FeedbackTemplateSet::default(),
    };
    let report = generate_feedback(&a.response, &pipeline.predict(&a.seeker, &a.response)?, &templates)?;
    let previous = match &a.previous {
        Some(prev) => Some(generate_feedback(prev, &pipeline.predict(&a.seeker, prev)?, &templates)?),
        None => None,
    };
    let delta = previous.as_ref().map(|p| score_delta(p, &report));
    if s.switch("json", a.json)? {
        let body = service::FeedbackResponse {
            previous_total_score: previous.as_ref().map(|p| p.total_score),
            score_delta: delta,
            report,
        };
        writeln!(out, "{}", serde_json::to_string_pretty(&body)?)?;
        return Ok(());
    }
    render_report(&report, out)?;
    if let (Some(p), Some(d)) = (&previous, delta) {
        writeln!(out, "score_delta = {d:+} (previous total {})", p.total_score)?;
    }
    Ok(())
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{:+.1}%", 100.0 * v))
}

fn group(g: &Option<GroupStats>) -> String {
    match g {
        Some(g) => format!("n={} like_rate={:.4} mean_replies={:.4}", g.count, g.like_rate, g.mean_replies),
        None => "n=0".into(),
    }
}

fn analyze(s: &Settings, a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let mut records = load_log(s.require::<PathBuf>("log", a.log)?)?;
    if s.switch("annotate", a.annotate)? {
        let pipeline = load_pipeline(s, &a.models)?;
        records = annotate_logs(&records, &pipeline)?;
        if let Some(p) = s.opt::<PathBuf>("annotated_out", a.annotated_out)? {
            std::fs::write(&p, log_to_string(&records)).with_context(|| format!("writing {}", p.display()))?;
            writeln!(out, "wrote annotated log to {}", p.display())?;
        }
    }
    let which = s.get("report", a.report, "all".to_string())?;
    let wanted = |name: &str| which == "all" || which == name;
    if !["all", "cohorts", "engagement", "follow", "gender"].contains(&which.as_str()) {
        bail!("unknown report {which:?} (expected cohorts, engagement, follow, gender or all)");
    }
    let join_years = match s.opt::<String>("join_years", a.join_years)? {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|y| y.trim().parse::<i32>().map_err(|e| anyhow!("join year {y:?}: {e}")))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let d = CohortSpec::default();
    let spec = CohortSpec {
        join_years,
        min_posts: s.get("min_posts", a.min_posts, d.min_posts)?,
        min_tenure_years: s.get("min_tenure_years", a.min_tenure_years, d.min_tenure_years)?,
    };
    let json = s.switch("json", a.json)?;
    let mut doc = serde_json::Map::new();

    if wanted("cohorts") {
        let series = empathy_over_time(&records, &spec)?;
        if json {
            doc.insert("cohorts".into(), serde_json::to_value(&series)?);
        } else {
            writeln!(out, "# mean level by cohort and year (er ip ex)")?;
            for c in &series {
                writeln!(out, "cohort {} ({} responders)", c.join_year, c.responders)?;
                for p in &c.years {
                    let [er, ip, ex] = p.mean_levels;
                    writeln!(out, "  {} posts={} {er:.4} {ip:.4} {ex:.4}", p.year, p.posts)?;
                }
            }
        }
    }
    if wanted("engagement") {
        let lv = feedback_by_level(&records)?;
        if json {
            doc.insert("engagement".into(), serde_json::to_value(&lv)?);
        } else {
            writeln!(out, "# likes and replies by level")?;
            for (m, r) in Mechanism::ALL.iter().zip(&lv.mechanisms) {
                for l in Level::ALL {
                    writeln!(out, "{m} level {l}: {}", group(&r.by_level[l.index()]))?;
                }
                writeln!(out, "{m} strong vs none: likes {} replies {}", pct(r.like_change), pct(r.reply_change))?;
            }
            for (t, g) in lv.by_total.iter().enumerate() {
                writeln!(out, "total {t}: {}", group(g))?;
            }
        }
    }
    if wanted("follow") {
        let f = follow_analysis(&records)?;
        if json {
            doc.insert("follow".into(), serde_json::to_value(&f)?);
        } else {
            writeln!(out, "# follows within 24h")?;
            let rg = |g: &Option<empathy_core::analytics::RateGroup>| {
                g.map_or("n=0".into(), |g| format!("n={} rate={:.4}", g.count, g.rate))
            };
            writeln!(out, "some empathy: {}", rg(&f.empathic))?;
            writeln!(out, "no empathy: {}", rg(&f.baseline))?;
            writeln!(out, "change: {}", pct(f.relative_change))?;
        }
    }
    if wanted("gender") {
        let g = gender_crosstab(&records)?;
        if json {
            doc.insert("gender".into(), serde_json::to_value(&g)?);
        } else {
            writeln!(out, "# mean total score by responder -> seeker gender")?;
            for c in &g.cells {
                writeln!(out, "{} -> {}: n={} mean_total={:.4}", c.responder_gender, c.seeker_gender, c.count, c.mean_total)?;
            }
        }
    }
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

fn serve(s: &Settings, a: ServeArgs) -> Result<()> {
    let bind = s.get("bind", a.bind, service::DEFAULT_BIND.to_string())?;
    let config = ServiceConfig {
        bind: bind.parse().map_err(|e| anyhow!("bind address {bind:?}: {e}"))?,
        vocab: vocab_path(s, a.models.vocab.clone())?,
        checkpoints: all_checkpoints(s, &a.models)?,
        templates: s.opt("templates", a.templates)?,
        max_body_bytes: s.get("max_body_bytes", a.max_body_bytes, service::DEFAULT_MAX_BODY_BYTES)?,
        timeout: Duration::from_millis(s.get("timeout_ms", a.timeout_ms, service::DEFAULT_TIMEOUT_MS)?),
    };
    tokio::runtime::Runtime::new()?.block_on(service::serve(config))
}

fn gradcheck(s: &Settings, a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let seed = s.get("seed", a.seed, 12)?;
    let pair = fixtures::demo_corpus(1, seed).remove(0);
    let vocab = Vocabulary::build([pair.seeker.as_str(), pair.response.as_str()], 1);
    let model: BiEncoderModel<f64> = match s.opt::<PathBuf>("checkpoint", a.checkpoint)? {
        Some(p) => {
            writeln!(out, "checkpoint {} sha256 {}", p.display(), file_digest(&p)?)?;
            load_model::<f64>(&p, None)?.0
        }
        None => {
            let m = s.get("mechanism", a.mechanism, Mechanism::EmotionalReactions)?;
            BiEncoderModel::with_config(m, encoder_config(s, &a.model, vocab.len())?, model_flags(s, &a.model)?, seed)?
        }
    };
    // A loaded checkpoint may use another vocabulary; any valid ids exercise the same graph.
    let vocab_size = model.response_encoder.config.vocab_size;
    let mut tp = encode_pair(&pair, &vocab, model.response_encoder.config.max_len)?;
    for id in tp.seeker_ids.iter_mut().chain(tp.response_ids.iter_mut()) {
        *id %= vocab_size;
    }
    let d = GradCheckOptions::default();
    let opts = GradCheckOptions {
        eps: s.get("eps", a.eps, d.eps)?,
        tolerance: s.get("tol", a.tol, d.tolerance)?,
        samples_per_tensor: s.get("samples", a.samples, d.samples_per_tensor)?,
        seed,
        weights: d.weights,
    };
    let report = gradient_check(&model, &tp, &opts)?;
    for (name, err) in &report.per_tensor {
        writeln!(out, "{name} max_error={err:.3e}")?;
    }
    writeln!(out, "checked {} coordinates, max_error={:.3e}", report.checked, report.max_error)?;
    if !report.passed() {
        for f in report.failures.iter().take(20) {
            writeln!(
                out,
                "FAIL {}[{}] analytic={:.6e} numeric={:.6e} error={:.3e}",
                f.tensor, f.index, f.analytic, f.numeric, f.error
            )?;
        }
        bail!("gradient check failed in {}", report.failing_tensors().join(", "));
    }
    writeln!(out, "PASS")?;
    Ok(())
}
