use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use xmutest::agreement::corpus_agreement;
use xmutest::corpus::{parse_corpus, split_corpus, write_corpus};
use xmutest::fusion::LlmClient;
use xmutest::metrics::TokenF1Mode;
use xmutest::pipeline::{
    ablate_arm, alpha_sweep, content_hash, evaluate, explain_corpus, fuse_explanations, mean_agreement, read_jsonl,
    write_jsonl, write_sweep_csv, AblationArm, AblationResult, Explanation, FusedRecord,
};
use xmutest::synthetic::{mini_corpus, mini_llm_fixture, trigger_corpus};
use xmutest::trainer::{stage1_train, stage2_train, write_trace_csv};
use xmutest::{Corpus, Label, MetricReport, Predictor, ReferenceAttentionClassifier, StubPredictor};

use crate::failure::{classify, Context, Failure, Kind, ResultExt};
use crate::manifest::Run;

pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRACE: &str = "trace.csv";
pub const EXPLANATIONS: &str = "explanations.jsonl";
pub const FUSED: &str = "fused.jsonl";
pub const REPORT: &str = "report.json";
pub const SWEEP: &str = "sweep.csv";
pub const ABLATION: &str = "ablation.json";
pub const AGREEMENT: &str = "agreement.json";
pub const INGESTED: &str = "corpus.jsonl";
pub const LLM_FIXTURE: &str = "llm_fixture.json";

/// Suffix of the file recording which corpus rows an artifact was built from.
pub const CORPUS_HASH_SUFFIX: &str = ".corpus-sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Synthetic {
    /// 60-sample trilingual corpus with three annotators per sample.
    Mini,
    /// English corpus with planted trigger words and gold rationales.
    Trigger,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Generate a synthetic corpus instead of reading `corpus`.
    #[arg(long, value_enum)]
    pub synthetic: Option<Synthetic>,
    /// Sample count for the trigger corpus.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictorArgs {
    /// Trained checkpoint (default: <output_dir>/checkpoint.json).
    #[arg(long, conflicts_with = "stub")]
    pub checkpoint: Option<PathBuf>,
    /// Lookup-table predictor JSON used instead of a checkpoint.
    #[arg(long)]
    pub stub: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub explanations: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long)]
    pub explanations: Option<PathBuf>,
    /// Fused explanations; plausibility then scores their final sets.
    #[arg(long)]
    pub fused: Option<PathBuf>,
    /// Micro-average Token-F1 over all tokens instead of the per-sample mean.
    #[arg(long)]
    pub micro: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
    )]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_corpus(run: &mut Run) -> Result<Corpus, Failure> {
    let path = run.cfg.corpus_path()?.to_path_buf();
    let bytes = run.read_input(&path, Kind::Data)?;
    let text = String::from_utf8(bytes)
        .with_context(|| format!("{} is not UTF-8", path.display()))
        .kind(Kind::Data)?;
    parse_corpus(&text, run.cfg.language)
        .with_context(|| format!("loading {}", path.display()))
        .kind(Kind::Data)
}

fn split(run: &Run, corpus: &Corpus) -> Result<(Corpus, Corpus), Failure> {
    split_corpus(corpus, run.cfg.test_fraction, run.cfg.seed).kind(Kind::Config)
}

fn select(run: &Run, corpus: Corpus, which: Split) -> Result<Corpus, Failure> {
    Ok(match which {
        Split::All => corpus,
        Split::Train => split(run, &corpus)?.0,
        Split::Test => split(run, &corpus)?.1,
    })
}

fn corpus_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf).expect("writing to memory");
    buf
}

fn subset_hash(corpus: &Corpus) -> String {
    content_hash(&corpus_bytes(corpus))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(CORPUS_HASH_SUFFIX);
    PathBuf::from(s)
}

fn check_hash(artifact: &Path, expected: &str) -> Result<(), Failure> {
    let side = sidecar(artifact);
    let recorded = std::fs::read_to_string(&side)
        .with_context(|| format!("{} has no corpus hash record ({})", artifact.display(), side.display()))
        .kind(Kind::HashMismatch)?;
    if recorded.trim() != expected {
        return Err(Failure::new(
            Kind::HashMismatch,
            anyhow::anyhow!(
                "{} was built from a different corpus selection (recorded {}, current {expected})",
                artifact.display(),
                recorded.trim()
            ),
        ));
    }
    Ok(())
}

fn write_jsonl_artifact<T: Serialize>(run: &mut Run, path: &Path, items: &[T], hash: &str) -> Result<(), Failure> {
    let mut buf = Vec::new();
    write_jsonl(items, &mut buf).kind(Kind::Data)?;
    run.write_to(path, &buf)?;
    run.write_to(&sidecar(path), format!("{hash}\n").as_bytes())
}

fn read_jsonl_input<T: for<'de> serde::Deserialize<'de>>(run: &mut Run, path: &Path) -> Result<Vec<T>, Failure> {
    let bytes = run.read_input(path, Kind::Data)?;
    read_jsonl(bytes.as_slice())
        .with_context(|| format!("parsing {}", path.display()))
        .kind(Kind::Data)
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<ReferenceAttentionClassifier, Failure> {
    let bytes = run.read_input(path, Kind::Checkpoint)?;
    let ckpt = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
        .kind(Kind::Checkpoint)?;
    let model = ReferenceAttentionClassifier::from_checkpoint(ckpt)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .kind(Kind::Checkpoint)?;
    if model.mask_token() != run.cfg.mask_token {
        return Err(Failure::new(
            Kind::Checkpoint,
            anyhow::anyhow!(
                "checkpoint mask token {:?} differs from configured {:?}",
                model.mask_token(),
                run.cfg.mask_token
            ),
        ));
    }
    Ok(model)
}

fn load_predictor(run: &mut Run, args: &PredictorArgs) -> Result<Box<dyn Predictor>, Failure> {
    if let Some(path) = &args.stub {
        let bytes = run.read_input(path, Kind::Checkpoint)?;
        let text = String::from_utf8(bytes).kind(Kind::Checkpoint)?;
        let stub = StubPredictor::from_json(&text)
            .with_context(|| format!("loading stub predictor {}", path.display()))
            .kind(Kind::Checkpoint)?;
        return Ok(Box::new(stub));
    }
    let path = args.checkpoint.clone().unwrap_or_else(|| run.cfg.artifact(CHECKPOINT));
    Ok(Box::new(load_checkpoint(run, &path)?))
}

fn emit(run: &mut Run, out: Option<&Path>, default: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.cfg.artifact(default));
    run.write_to(&path, bytes)?;
    Ok(path)
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    n_samples: usize,
    n_hate: usize,
    n_not_hate: usize,
    n_tokens: usize,
    n_with_gold: usize,
    n_with_annotators: usize,
    sha256: String,
}

pub fn ingest(run: &mut Run, args: &IngestArgs) -> Result<(), Failure> {
    let corpus = match args.synthetic {
        Some(Synthetic::Mini) => {
            let c = mini_corpus(run.cfg.seed);
            let fixture = mini_llm_fixture(&c, run.cfg.seed);
            let json = serde_json::to_string_pretty(&fixture).kind(Kind::Data)? + "\n";
            run.write_artifact(LLM_FIXTURE, json.as_bytes())?;
            c
        }
        Some(Synthetic::Trigger) => trigger_corpus(args.n, run.cfg.seed),
        None => load_corpus(run)?,
    };
    let bytes = corpus_bytes(&corpus);
    emit(run, args.out.as_deref(), INGESTED, &bytes)?;
    let summary = IngestSummary {
        n_samples: corpus.len(),
        n_hate: corpus.count(Label::Hate),
        n_not_hate: corpus.count(Label::NotHate),
        n_tokens: corpus.samples.iter().map(|s| s.tokens.len()).sum(),
        n_with_gold: corpus.samples.iter().filter(|s| s.gold().is_some()).count(),
        n_with_annotators: corpus
            .samples
            .iter()
            .filter(|s| s.annotator_rationales.is_some())
            .count(),
        sha256: content_hash(&bytes),
    };
    println!("{}", serde_json::to_string_pretty(&summary).kind(Kind::Data)?);
    Ok(())
}

pub fn agree(run: &mut Run, args: &OutArgs) -> Result<(), Failure> {
    let corpus = load_corpus(run)?;
    let report = run.phase("agreement", || corpus_agreement(&corpus));
    let json = serde_json::to_string_pretty(&report).kind(Kind::Data)? + "\n";
    emit(run, args.out.as_deref(), AGREEMENT, json.as_bytes())?;
    print!("{json}");
    Ok(())
}

pub fn train(run: &mut Run, args: &OutArgs) -> Result<(), Failure> {
    let corpus = load_corpus(run)?;
    let (train, test) = split(run, &corpus)?;
    log::info!("train {} samples, test {} samples", train.len(), test.len());
    let cfg = run.cfg.clone();
    let mut model =
        ReferenceAttentionClassifier::for_corpus(&train, cfg.dim, cfg.seed, &cfg.mask_token).kind(Kind::Config)?;
    let mut trace = run
        .phase("stage1", || stage1_train(&mut model, &train, &cfg.training))
        .map_err(|e| classify(e, Kind::Data))?;
    trace.extend(
        run.phase("stage2", || {
            stage2_train(&mut model, &train, &cfg.training, &cfg.explainer)
        })
        .map_err(|e| classify(e, Kind::Data))?,
    );
    let ckpt = serde_json::to_vec(&model.to_checkpoint()).kind(Kind::Checkpoint)?;
    emit(run, args.out.as_deref(), CHECKPOINT, &ckpt)?;
    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv).kind(Kind::Data)?;
    run.write_artifact(TRACE, &csv)?;
    if let Some(last) = trace.last() {
        println!(
            "final epoch: l_total {:.6} train_accuracy {:.4}",
            last.l_total, last.train_accuracy
        );
    }
    Ok(())
}

pub fn explain(run: &mut Run, args: &ExplainArgs) -> Result<(), Failure> {
    let predictor = load_predictor(run, &args.predictor)?;
    let corpus = load_corpus(run)?;
    let subset = select(run, corpus, args.predictor.split)?;
    let explainer = run.cfg.explainer;
    let explanations = run
        .phase("explain", || explain_corpus(predictor.as_ref(), &subset, &explainer))
        .map_err(|e| classify(e, Kind::Data))?;
    let path = args.out.clone().unwrap_or_else(|| run.cfg.artifact(EXPLANATIONS));
    write_jsonl_artifact(run, &path, &explanations, &subset_hash(&subset))?;
    println!("{} explanations written to {}", explanations.len(), path.display());
    Ok(())
}

pub fn fuse(run: &mut Run, args: &FuseArgs) -> Result<(), Failure> {
    let client = LlmClient::from_config(&run.cfg.llm).map_err(|e| match e {
        xmutest::Error::Io(_) | xmutest::Error::Json(_) => Failure::new(Kind::Data, e),
        other => classify(other, Kind::Config),
    })?;
    let corpus = load_corpus(run)?;
    let subset = select(run, corpus, args.split)?;
    let hash = subset_hash(&subset);
    let input = args
        .explanations
        .clone()
        .unwrap_or_else(|| run.cfg.artifact(EXPLANATIONS));
    check_hash(&input, &hash)?;
    let explanations: Vec<Explanation> = read_jsonl_input(run, &input)?;
    let fused = run
        .phase("fuse", || fuse_explanations(&explanations, &subset, &client))
        .map_err(|e| classify(e, Kind::Data))?;
    let path = args.out.clone().unwrap_or_else(|| run.cfg.artifact(FUSED));
    write_jsonl_artifact(run, &path, &fused, &hash)?;
    match mean_agreement(&fused) {
        Some(a) => println!("mean agreement {a:.4} over {} samples", fused.len()),
        None => println!("mean agreement n/a (no samples)"),
    }
    Ok(())
}

pub fn eval(run: &mut Run, args: &EvalArgs) -> Result<(), Failure> {
    let predictor = load_predictor(run, &args.predictor)?;
    let corpus = load_corpus(run)?;
    let subset = select(run, corpus, args.predictor.split)?;
    let hash = subset_hash(&subset);
    let expl_path = args
        .explanations
        .clone()
        .unwrap_or_else(|| run.cfg.artifact(EXPLANATIONS));
    check_hash(&expl_path, &hash)?;
    let explanations: Vec<Explanation> = read_jsonl_input(run, &expl_path)?;
    let fused: Option<Vec<FusedRecord>> = match &args.fused {
        Some(p) => {
            check_hash(p, &hash)?;
            Some(read_jsonl_input(run, p)?)
        }
        None => None,
    };
    let mode = if args.micro {
        TokenF1Mode::Micro
    } else {
        TokenF1Mode::Mean
    };
    let report = run
        .phase("evaluate", || {
            evaluate(predictor.as_ref(), &subset, &explanations, fused.as_deref(), mode)
        })
        .map_err(|e| classify(e, Kind::Data))?;
    let json = serde_json::to_string_pretty(&report).kind(Kind::Data)? + "\n";
    emit(run, args.out.as_deref(), REPORT, json.as_bytes())?;
    let name = if fused.is_some() { "fused" } else { "model" };
    print!("{}", MetricReport::table([(name, &report)]));
    Ok(())
}

pub fn sweep(run: &mut Run, args: &SweepArgs) -> Result<(), Failure> {
    if args.alphas.is_empty() || args.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Failure::new(
            Kind::Config,
            anyhow::anyhow!("alphas {:?} must be nonempty and within [0, 1]", args.alphas),
        ));
    }
    let corpus = load_corpus(run)?;
    let (train, test) = split(run, &corpus)?;
    let cfg = run.cfg.clone();
    let mut model =
        ReferenceAttentionClassifier::for_corpus(&train, cfg.dim, cfg.seed, &cfg.mask_token).kind(Kind::Config)?;
    run.phase("stage1", || stage1_train(&mut model, &train, &cfg.training))
        .map_err(|e| classify(e, Kind::Data))?;
    let rows = run
        .phase("sweep", || {
            alpha_sweep(&model, &train, &test, &cfg.training, &cfg.explainer, &args.alphas)
        })
        .map_err(|e| classify(e, Kind::Data))?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv).kind(Kind::Data)?;
    emit(run, args.out.as_deref(), SWEEP, &csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

#[derive(Serialize)]
struct AblationFile<'a> {
    arms: &'a [AblationResult],
}

pub fn ablation(run: &mut Run, args: &OutArgs) -> Result<(), Failure> {
    let corpus = load_corpus(run)?;
    let (train, test) = split(run, &corpus)?;
    let cfg = run.cfg.clone();
    let init =
        ReferenceAttentionClassifier::for_corpus(&train, cfg.dim, cfg.seed, &cfg.mask_token).kind(Kind::Config)?;
    let mut results = Vec::with_capacity(AblationArm::ALL.len());
    for arm in AblationArm::ALL {
        let result = run
            .phase(&format!("arm:{}", arm.name()), || {
                ablate_arm(arm, &init, &train, &test, &cfg.training, &cfg.explainer)
            })
            .map_err(|e| classify(e, Kind::Data))?;
        results.push(result);
    }
    let json = serde_json::to_string_pretty(&AblationFile { arms: &results }).kind(Kind::Data)? + "\n";
    emit(run, args.out.as_deref(), ABLATION, json.as_bytes())?;
    print!(
        "{}",
        MetricReport::table(results.iter().map(|r| (r.arm.name(), &r.report)))
    );
    Ok(())
}
