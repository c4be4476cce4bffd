use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use craft_core::clustering::{default_cluster_count, DEFAULT_DIAMETER_EXACT_CAP};
use craft_core::corpus_io::{
    load_corpus, load_selection, load_vectors, save_selection, save_vectors, split_head, CorpusFormat,
};
use craft_core::pipeline::{self, ClusterState, Method, PipelineConfig, PipelineInputs};
use craft_core::stats::DEFAULT_LIPSCHITZ;
use craft_core::synthgen::{emit_scatter, Generator, Split, SyntheticConfig};
use craft_core::vectorizer::{fit_tfidf, transform_tfidf, DEFAULT_MAX_VOCAB};
use craft_core::VectorSet;

const VAL_SRC: &str = "validation_source.vec";
const VAL_TGT: &str = "validation_target.vec";
const POOL_SRC: &str = "pool_source.vec";
const POOL_TGT: &str = "pool_target.vec";
const SELECTION: &str = "selection.txt";

#[derive(Parser, Debug)]
#[command(name = "craft", version, about = "Conditional data selection for parallel corpora")]
struct Cli {
    /// Worker threads; defaults to the number of cores. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a corpus into validation and pool vectors for both sides.
    Vectorize(VectorizeArgs),
    /// Cluster, select and write the selection with its diagnostics.
    Select(SelectArgs),
    /// Recompute diagnostics of an existing selection as JSON on stdout.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VectorizerKind {
    Tfidf,
    DenseFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Craft,
    Random,
    JointAblation,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Craft => Method::Craft,
            MethodArg::Random => Method::Random,
            MethodArg::JointAblation => Method::JointAblation,
        }
    }
}

#[derive(Args, Debug)]
struct VectorizeArgs {
    /// TSV (source<TAB>target) or JSONL corpus; the first rows form the validation set.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    validation_size: usize,
    #[arg(long, value_enum, default_value = "tfidf")]
    vectorizer: VectorizerKind,
    #[arg(long, default_value_t = DEFAULT_MAX_VOCAB)]
    max_vocab: usize,
    /// Pre-computed source vectors, one row per corpus pair (dense-file mode).
    #[arg(long)]
    source_vectors: Option<PathBuf>,
    /// Pre-computed target vectors, one row per corpus pair (dense-file mode).
    #[arg(long)]
    target_vectors: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Directory holding the four vector files written by `vectorize` or `synth`.
    #[arg(long)]
    vectors_dir: PathBuf,
    /// Source clusters; defaults to min(100, floor(sqrt(validation size))).
    #[arg(long)]
    ms: Option<usize>,
    /// Target clusters; same default as --ms.
    #[arg(long)]
    mt: Option<usize>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "craft")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_LIPSCHITZ)]
    lipschitz: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    vectors_dir: PathBuf,
    #[arg(long)]
    selection: PathBuf,
    /// Directory with the saved cluster models; defaults to the selection's directory.
    #[arg(long)]
    models_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LIPSCHITZ)]
    lipschitz: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    components: usize,
    #[arg(long, default_value_t = 0.8)]
    coupling: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 1_000)]
    n_validation: usize,
    #[arg(long, default_value_t = 10_000)]
    n_pool: usize,
    #[arg(long, default_value_t = 1)]
    dim_s: usize,
    #[arg(long, default_value_t = 1)]
    dim_t: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also select this many pool pairs and write scatter.csv (1-D data only).
    #[arg(long)]
    scatter_k: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_vectors(dir: &Path, name: &str, vs: &VectorSet) -> Result<()> {
    save_vectors(vs, &dir.join(name)).with_context(|| format!("writing {name}"))
}

fn read_vectors(dir: &Path, name: &str) -> Result<VectorSet> {
    load_vectors(&dir.join(name)).with_context(|| format!("reading {name}"))
}

fn vectorize(args: VectorizeArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, CorpusFormat::from_path(&args.corpus)).context("loading corpus")?;
    let (validation, pool) = split_head(&corpus, args.validation_size).context("splitting corpus")?;
    create_dir(&args.out_dir)?;
    let start = Instant::now();
    let sides: [(VectorSet, VectorSet); 2] = match args.vectorizer {
        VectorizerKind::Tfidf => {
            ensure!(
                args.source_vectors.is_none() && args.target_vectors.is_none(),
                "--source-vectors/--target-vectors need --vectorizer dense-file"
            );
            let mut out = Vec::with_capacity(2);
            for (name, val_docs, pool_docs) in [
                (
                    "source",
                    validation.sources().collect::<Vec<_>>(),
                    pool.sources().collect::<Vec<_>>(),
                ),
                (
                    "target",
                    validation.targets().collect::<Vec<_>>(),
                    pool.targets().collect::<Vec<_>>(),
                ),
            ] {
                let vocab = fit_tfidf(val_docs.iter().chain(&pool_docs).copied(), args.max_vocab)
                    .with_context(|| format!("fitting {name} vocabulary"))?;
                vocab.save(&args.out_dir.join(format!("vocab_{name}.json")))?;
                let v = transform_tfidf(&vocab, &val_docs);
                let p = transform_tfidf(&vocab, &pool_docs);
                let zero = v.zero_rows.len() + p.zero_rows.len();
                if zero > 0 {
                    log::warn!("{zero} {name} sentences have no in-vocabulary terms");
                }
                out.push((v.vectors, p.vectors));
            }
            let tgt = out.pop().expect("two sides");
            let src = out.pop().expect("two sides");
            [src, tgt]
        }
        VectorizerKind::DenseFile => {
            let (Some(src), Some(tgt)) = (&args.source_vectors, &args.target_vectors) else {
                bail!("dense-file mode needs --source-vectors and --target-vectors");
            };
            let mut out = Vec::with_capacity(2);
            for path in [src, tgt] {
                let vs = load_vectors(path).with_context(|| format!("reading {}", path.display()))?;
                ensure!(
                    vs.count() == corpus.len(),
                    "{} has {} rows but the corpus has {} pairs",
                    path.display(),
                    vs.count(),
                    corpus.len()
                );
                out.push(vs.split_at(args.validation_size));
            }
            let tgt = out.pop().expect("two sides");
            let src = out.pop().expect("two sides");
            [src, tgt]
        }
    };
    let [(val_src, pool_src), (val_tgt, pool_tgt)] = sides;
    write_vectors(&args.out_dir, VAL_SRC, &val_src)?;
    write_vectors(&args.out_dir, VAL_TGT, &val_tgt)?;
    write_vectors(&args.out_dir, POOL_SRC, &pool_src)?;
    write_vectors(&args.out_dir, POOL_TGT, &pool_tgt)?;
    println!("vectorize_seconds={:.6}", start.elapsed().as_secs_f64());
    Ok(())
}

fn select(args: SelectArgs) -> Result<()> {
    let val_src = read_vectors(&args.vectors_dir, VAL_SRC)?;
    let val_tgt = read_vectors(&args.vectors_dir, VAL_TGT)?;
    let pool_src = read_vectors(&args.vectors_dir, POOL_SRC)?;
    let pool_tgt = read_vectors(&args.vectors_dir, POOL_TGT)?;
    let default_m = default_cluster_count(val_src.count());
    let mut cfg = PipelineConfig::new(
        args.ms.unwrap_or(default_m),
        args.mt.unwrap_or(default_m),
        args.k,
        args.seed,
    )
    .with_method(args.method.into());
    cfg.lipschitz = args.lipschitz;
    create_dir(&args.out_dir)?;

    let start = Instant::now();
    let inputs = PipelineInputs {
        val_src: &val_src,
        val_tgt: &val_tgt,
        pool_src: &pool_src,
        pool_tgt: &pool_tgt,
    };
    let out = pipeline::run(inputs, &cfg).context("selection")?;
    out.state.save(&args.out_dir).context("writing cluster models")?;
    let path = args.out_dir.join(SELECTION);
    save_selection(&out.result, &path).context("writing selection")?;
    println!("select_seconds={:.6}", start.elapsed().as_secs_f64());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let models_dir = match args.models_dir {
        Some(d) => d,
        None => args
            .selection
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let indices = load_selection(&args.selection).context("reading selection")?;
    let val_src = read_vectors(&args.vectors_dir, VAL_SRC)?;
    let val_tgt = read_vectors(&args.vectors_dir, VAL_TGT)?;
    let pool_src = read_vectors(&args.vectors_dir, POOL_SRC)?;
    let pool_tgt = read_vectors(&args.vectors_dir, POOL_TGT)?;
    let (s, t) = ClusterState::load_models(&models_dir).context("loading cluster models")?;
    let state = ClusterState::from_models(s, t, &val_src, &val_tgt, DEFAULT_DIAMETER_EXACT_CAP)?;
    let pool = state.assign_pool(&pool_src, &pool_tgt)?;
    let diagnostics = pipeline::evaluate(&state, &pool, &indices, None, args.lipschitz).context("evaluation")?;
    println!("{}", serde_json::to_string_pretty(&diagnostics)?);
    Ok(())
}

fn write_labels(path: &Path, source: &[usize], target: &[usize]) -> Result<()> {
    let mut text = String::from("source\ttarget\n");
    for (s, t) in source.iter().zip(target) {
        text.push_str(&format!("{s}\t{t}\n"));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_components: args.components,
        dim_s: args.dim_s,
        dim_t: args.dim_t,
        coupling: args.coupling,
        noise_sigma: args.noise,
        n_validation: args.n_validation,
        n_pool: args.n_pool,
        seed: args.seed,
    };
    let generator = Generator::new(&cfg)?;
    create_dir(&args.out_dir)?;
    let validation = generator.split(Split::Validation);
    let pool = generator.split(Split::Pool);
    write_vectors(&args.out_dir, VAL_SRC, &validation.vectors.source)?;
    write_vectors(&args.out_dir, VAL_TGT, &validation.vectors.target)?;
    write_vectors(&args.out_dir, POOL_SRC, &pool.vectors.source)?;
    write_vectors(&args.out_dir, POOL_TGT, &pool.vectors.target)?;
    write_labels(
        &args.out_dir.join("validation_labels.tsv"),
        &validation.source_labels,
        &validation.target_labels,
    )?;
    write_labels(&args.out_dir.join("pool_labels.tsv"), &pool.source_labels, &pool.target_labels)?;

    if let Some(k) = args.scatter_k {
        ensure!(
            cfg.dim_s == 1 && cfg.dim_t == 1,
            "--scatter-k needs --dim-s 1 --dim-t 1; project the data first"
        );
        let m = cfg.n_components;
        let inputs = PipelineInputs {
            val_src: &validation.vectors.source,
            val_tgt: &validation.vectors.target,
            pool_src: &pool.vectors.source,
            pool_tgt: &pool.vectors.target,
        };
        let out = pipeline::run(inputs, &PipelineConfig::new(m, m, k, cfg.seed))?;
        let selected = pool.vectors.select(&out.result.indices);
        emit_scatter(&validation.vectors, &selected, &args.out_dir.join("scatter.csv"))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRAFT_LOG", "warn")).init();
    let cli = Cli::parse();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker threads")?;
    pool.install(|| match cli.command {
        Command::Vectorize(a) => vectorize(a),
        Command::Select(a) => select(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
    })
}
