use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use transferlab::embed::{fisher_taskemb, textemb, tupate_embed, EmbedKind, TaskEmbedding};
use transferlab::lab::{
    correlation_study, datasize_matrix, default_variants, early_vs_best_study, evaluate_predictor,
    families, init_rng, train_task, transfer_gain_matrix, Checkpoint, TrainConfig, TrainOutcome,
};
use transferlab::model::ModelConfig;
use transferlab::peft::{init_adapter, AdapterConfig, Method};
use transferlab::rank::{ensemble, similarity_matrix, Grouping, Predictions, Regime, ScoreMatrix};
use transferlab::store::{
    load_checkpoint, load_embeddings, load_suite, save_checkpoint, save_embeddings, save_suite,
    save_toml, write_atomic, LoadedSuite, Manifest,
};
use transferlab::tasks::{gen_suite, Suite, SuiteConfig};

/// Parameter-efficient tuning, tuned-parameter task embeddings and
/// transferability evaluation on synthetic task suites.
#[derive(Parser)]
#[command(name = "transferlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered task suite and its frozen base model.
    GenTasks(GenArgs),
    /// Tune every task (or the listed ones) and write early and best checkpoints.
    Train(TrainCmd),
    /// Build one embedding per task and write them to a container.
    Embed(EmbedArgs),
    /// Rank sources by embedding similarity.
    Rank(RankArgs),
    /// Measure transfer gains between every ordered pair of tasks.
    TransferMatrix(TransferArgs),
    /// Score a predictor's rankings against measured gains.
    Eval(EvalArgs),
    /// Average several score matrices.
    Ensemble(EnsembleArgs),
    /// Checkpoint studies.
    #[command(subcommand)]
    Study(StudyCmd),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    tasks_per_cluster: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    task_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
}

/// Tuning options; defaults follow the BERT-scale recipe.
#[derive(Args, Clone)]
struct TuneArgs {
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    early_epoch: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning-rate grid; defaults to the method's grid.
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
    /// Multiplier applied to every grid point.
    #[arg(long, default_value_t = 1.0)]
    lr_scale: f64,
    #[arg(long, default_value_t = 20)]
    prefix_len: usize,
    #[arg(long, default_value_t = 8)]
    lora_rank: usize,
    #[arg(long, default_value_t = 8.0)]
    lora_alpha: f64,
    /// Training seed; defaults to the suite seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap every training split at this many examples.
    #[arg(long)]
    limit: Option<usize>,
}

impl TuneArgs {
    fn config(&self, suite_seed: u64) -> TrainConfig {
        let grid = if self.lr.is_empty() {
            TrainConfig::default_grid(self.method)
        } else {
            self.lr.clone()
        };
        TrainConfig {
            method: self.method,
            lr_grid: grid,
            batch_size: self.batch_size,
            epochs: self.epochs,
            early_epoch: self.early_epoch,
            seed: self.seed.unwrap_or(suite_seed),
            adapter: AdapterConfig {
                prefix_len: self.prefix_len,
                lora_rank: self.lora_rank,
                lora_alpha: self.lora_alpha,
            },
        }
        .scaled(self.lr_scale)
    }

    fn suite(&self, loaded: &LoadedSuite) -> Result<Suite> {
        limited(loaded, self.limit)
    }
}

fn limited(loaded: &LoadedSuite, limit: Option<usize>) -> Result<Suite> {
    Ok(match limit {
        Some(n) => loaded.suite.limited(n, loaded.suite.seed)?,
        None => loaded.suite.clone(),
    })
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only these tasks.
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Tupate,
    Textemb,
    Taskemb,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WhichArg {
    Best,
    Early,
}

impl WhichArg {
    fn as_str(self) -> &'static str {
        match self {
            WhichArg::Best => "best",
            WhichArg::Early => "early",
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Checkpoint directory (tupate, taskemb).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = WhichArg::Best)]
    which: WhichArg,
    /// Use the capped training split (textemb, taskemb).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GainArgs {
    /// Gain matrix CSV.
    #[arg(long)]
    gains: PathBuf,
    /// Suite directory, needed for in-class grouping.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, default_value = "all-class")]
    grouping: Grouping,
    #[arg(long, default_value = "full-to-full")]
    regime: Regime,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Report path: rankings, plus metrics when gains are given.
    #[arg(long)]
    out: PathBuf,
    /// Also write the similarity matrix as CSV.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long)]
    gains: Option<PathBuf>,
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long, default_value = "all-class")]
    grouping: Grouping,
    #[arg(long, default_value = "full-to-full")]
    regime: Regime,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Source checkpoints from `train`.
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run (source, target) jobs on all cores.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictor score matrix CSV.
    #[arg(long, required_unless_present = "datasize")]
    scores: Option<PathBuf>,
    /// Use training-set sizes from `--suite` as scores.
    #[arg(long, requires = "suite")]
    datasize: bool,
    /// Name recorded in the report; defaults to `datasize` or `predictor`.
    #[arg(long)]
    predictor: Option<String>,
    #[command(flatten)]
    gains: GainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum StudyCmd {
    /// Relate mean task accuracy to ranking quality across runs.
    Correlate(CorrelateArgs),
    /// Compare early and best checkpoints as embeddings.
    EarlyVsBest(EarlyArgs),
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    gains: PathBuf,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value = "all-class")]
    grouping: Grouping,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args)]
struct EarlyArgs {
    #[arg(long)]
    checkpoints: PathBuf,
    /// Gains, grouping and regime; `--suite` is required here.
    #[command(flatten)]
    gains: GainArgs,
    #[arg(long)]
    out: PathBuf,
}

fn read_matrix(path: &Path) -> Result<ScoreMatrix> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScoreMatrix::from_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_matrix(path: &Path, m: &ScoreMatrix) -> Result<()> {
    write_atomic(path, m.to_csv()?.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn open_suite(path: &Path) -> Result<LoadedSuite> {
    load_suite(path).with_context(|| format!("loading suite {}", path.display()))
}

fn family_map(
    suite: Option<&Path>,
    grouping: Grouping,
) -> Result<std::collections::HashMap<String, transferlab::tasks::Family>> {
    match suite {
        Some(p) => Ok(families(&open_suite(p)?.suite)),
        None if grouping == Grouping::InClass => {
            bail!("in-class grouping needs --suite for task families")
        }
        None => Ok(Default::default()),
    }
}

fn gen_tasks(a: GenArgs) -> Result<()> {
    let cfg = SuiteConfig {
        n_clusters: a.clusters,
        tasks_per_cluster: a.tasks_per_cluster,
        cluster_spread: a.spread,
        task_dim: a.task_dim,
        vocab_size: a.vocab,
        seq_len: a.seq_len,
        n_classes: a.classes,
        signal: a.signal,
        train_size: a.train,
        val_size: a.val,
        test_size: a.test,
        ..SuiteConfig::default()
    };
    let model = ModelConfig {
        vocab_size: a.vocab,
        max_seq_len: a.seq_len,
        hidden_size: a.hidden,
        n_heads: a.heads,
        n_layers: a.layers,
        ffn_size: a.ffn,
        n_classes: a.classes,
    };
    let suite = gen_suite(&cfg, a.seed)?;
    let base = transferlab::lab::base_model(&model, a.seed)?;
    save_suite(&a.out, &suite, &model, &base)
        .with_context(|| format!("writing suite {}", a.out.display()))
}

fn save_outcome(
    dir: &Path,
    out: &TrainOutcome,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<()> {
    for (which, ck) in [("best", &out.best), ("early", &out.early)] {
        let m = Manifest::for_checkpoint(ck, cfg, model, &out.curve);
        save_checkpoint(dir, which, ck, &m)
            .with_context(|| format!("writing checkpoint {} in {}", ck.task, dir.display()))?;
    }
    Ok(())
}

fn train(a: TrainCmd) -> Result<()> {
    let loaded = open_suite(&a.suite)?;
    let suite = a.tune.suite(&loaded)?;
    let cfg = a.tune.config(suite.seed);
    for id in &a.tasks {
        if suite.task(id).is_none() {
            bail!("unknown task `{id}`");
        }
    }
    for task in &suite.tasks {
        if !a.tasks.is_empty() && !a.tasks.contains(&task.spec.id) {
            continue;
        }
        let out = train_task(&loaded.base, &task.spec.id, &task.data, &cfg, None)
            .with_context(|| format!("training `{}`", task.spec.id))?;
        save_outcome(&a.out, &out, &cfg, &loaded.manifest.model)?;
    }
    Ok(())
}

fn load_ck(dir: &Path, id: &str, which: &str, model: &ModelConfig) -> Result<Checkpoint> {
    Ok(load_checkpoint(dir, id, which, model)
        .with_context(|| {
            format!(
                "loading {which} checkpoint of `{id}` from {}",
                dir.display()
            )
        })?
        .0)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let loaded = open_suite(&a.suite)?;
    let suite = limited(&loaded, a.limit)?;
    let model = &loaded.manifest.model;
    let need_ckpts = || {
        a.checkpoints
            .as_deref()
            .context("--checkpoints is required for this kind")
    };
    let mut out: Vec<TaskEmbedding> = Vec::new();
    for task in &suite.tasks {
        let id = &task.spec.id;
        let e = match a.kind {
            KindArg::Textemb => textemb(&loaded.base, &task.data.train, id)?,
            KindArg::Tupate => {
                let dir = need_ckpts()?;
                let (ck, m) =
                    load_checkpoint(dir, id, a.which.as_str(), model).with_context(|| {
                        format!("loading checkpoint of `{id}` from {}", dir.display())
                    })?;
                let adapter = ck.adapter().with_context(|| {
                    format!("`{id}` is a {} checkpoint, not an adapter", ck.method)
                })?;
                let initial = init_adapter(
                    ck.method,
                    model,
                    &m.adapter_config(),
                    &mut init_rng(m.seed, ck.method),
                )?;
                let x = tupate_embed(adapter, Some(&initial), id)
                    .with_context(|| format!("embedding `{id}`"))?;
                for w in &x.warnings {
                    eprintln!("warning: `{id}`: {w}");
                }
                x.embedding
            }
            KindArg::Taskemb => {
                let ck = load_ck(need_ckpts()?, id, a.which.as_str(), model)?;
                if ck.method != Method::Full {
                    bail!(
                        "taskemb needs fully tuned checkpoints, `{id}` is {}",
                        ck.method
                    );
                }
                let (params, _) = ck.materialize(&loaded.base);
                fisher_taskemb(&params, &task.data.train, id)?
            }
        };
        out.push(e);
    }
    save_embeddings(&a.out, &out, model).with_context(|| format!("writing {}", a.out.display()))
}

fn rank(a: RankArgs) -> Result<()> {
    let embs = load_embeddings(&a.embeddings)
        .with_context(|| format!("loading {}", a.embeddings.display()))?;
    let scores = similarity_matrix(&embs)?;
    let name = embs
        .first()
        .map_or(EmbedKind::TextEmb, |e| e.kind)
        .to_string();
    if let Some(p) = &a.scores_out {
        write_matrix(p, &scores)?;
    }
    let text = match &a.gains {
        Some(g) => {
            let gains = read_matrix(g)?;
            let fam = family_map(a.suite.as_deref(), a.grouping)?;
            evaluate_predictor(&name, &scores, &gains, a.grouping, &fam, a.regime)?.to_toml()?
        }
        None => Predictions::from_scores(&name, &scores)?.to_toml()?,
    };
    write_atomic(&a.out, text.as_bytes()).with_context(|| format!("writing {}", a.out.display()))
}

fn transfer(a: TransferArgs) -> Result<()> {
    let loaded = open_suite(&a.suite)?;
    let targets = a.tune.suite(&loaded)?;
    let cfg = a.tune.config(targets.seed);
    let model = &loaded.manifest.model;
    let sources = targets
        .ids()
        .iter()
        .map(|id| load_ck(&a.checkpoints, id, "best", model))
        .collect::<Result<Vec<_>>>()?;
    let r = transfer_gain_matrix(&loaded.base, &sources, &targets, &cfg, a.parallel)?;
    write_matrix(&a.out, &r.gains)
}

fn eval(a: EvalArgs) -> Result<()> {
    let gains = read_matrix(&a.gains.gains)?;
    let scores = if a.datasize {
        let p = a
            .gains
            .suite
            .as_deref()
            .context("--datasize needs --suite")?;
        datasize_matrix(&open_suite(p)?.suite)?
    } else {
        read_matrix(a.scores.as_deref().expect("clap enforces --scores"))?
    };
    let name = a
        .predictor
        .clone()
        .unwrap_or_else(|| if a.datasize { "datasize" } else { "predictor" }.into());
    let fam = family_map(a.gains.suite.as_deref(), a.gains.grouping)?;
    let report = evaluate_predictor(
        &name,
        &scores,
        &gains,
        a.gains.grouping,
        &fam,
        a.gains.regime,
    )?;
    write_atomic(&a.out, report.to_toml()?.as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))
}

fn ensemble_cmd(a: EnsembleArgs) -> Result<()> {
    let ms = a
        .inputs
        .iter()
        .map(|p| read_matrix(p))
        .collect::<Result<Vec<_>>>()?;
    write_matrix(&a.out, &ensemble(&ms)?)
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let loaded = open_suite(&a.suite)?;
    let suite = a.tune.suite(&loaded)?;
    let cfg = a.tune.config(suite.seed);
    let gains = read_matrix(&a.gains)?;
    let variants = default_variants(&cfg, a.runs);
    let r = correlation_study(&loaded.base, &suite, &gains, &cfg, &variants, a.grouping)?;
    save_toml(&a.out, &r).with_context(|| format!("writing {}", a.out.display()))
}

fn early_vs_best(a: EarlyArgs) -> Result<()> {
    let loaded = open_suite(
        a.gains
            .suite
            .as_deref()
            .context("early-vs-best needs --suite")?,
    )?;
    let gains = read_matrix(&a.gains.gains)?;
    let model = &loaded.manifest.model;
    let mut outcomes = Vec::new();
    for id in loaded.suite.ids() {
        let early = load_ck(&a.checkpoints, &id, "early", model)?;
        let (best, m) = load_checkpoint(&a.checkpoints, &id, "best", model)?;
        outcomes.push(TrainOutcome {
            early,
            best,
            curve: m.curve,
            diverged: Vec::new(),
        });
    }
    let fam = match a.gains.grouping {
        Grouping::InClass => families(&loaded.suite),
        Grouping::AllClass => Default::default(),
    };
    let r = early_vs_best_study(&outcomes, &gains, a.gains.grouping, &fam, a.gains.regime)?;
    save_toml(&a.out, &r).with_context(|| format!("writing {}", a.out.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Rank(a) => rank(a),
        Command::TransferMatrix(a) => transfer(a),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Study(StudyCmd::Correlate(a)) => correlate(a),
        Command::Study(StudyCmd::EarlyVsBest(a)) => early_vs_best(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
