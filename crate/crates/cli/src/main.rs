use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use solar_core::decoder::{read_decoder, write_decoder, DecoderParams};
use solar_core::embedding::{embed, EmbedderConfig};
use solar_core::harness::{
    adaptation_prompts, collect_checkpoints, gen_task, read_metrics, run_experiment, run_solar, summarize, task_seed,
    train_generator, CheckpointSet, Drift, ExperimentConfig, MetricsRow, Perturbation, Rule, SyntheticTaskSpec,
    TaskBundle,
};
use solar_core::meta::write_run_log;
use solar_core::select::{select_prompts, write_selection};
use solar_core::Sample;

#[derive(Parser, Debug)]
#[command(name = "solar", version, about = "Adapter generation and adaptation-strategy search on synthetic drifted tasks")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML). Without it a single drifted keyword task is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides the config's seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Full-scale checkpoint recipe: learning rates 1e-4 / 1e-5, 5000 samples, batch 32.
    #[arg(long, global = true)]
    paper_scale: bool,

    /// Snapshot only the finetune phase.
    #[arg(long, global = true)]
    finetune_only_checkpoints: bool,

    /// Record wall-clock times in metrics (breaks byte-identical reruns).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task splits.
    GenTask(TaskArg),
    /// Train on the task and save an adapter snapshot after every step.
    Collect(TaskArg),
    /// Train the adapter generator on prompt-checkpoint pairs.
    TrainDecoder(TaskArg),
    /// Pick unlabeled prompts by influence with a diversity penalty.
    SelectPrompts {
        #[command(flatten)]
        task: TaskArg,
        /// Number of prompts to keep.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run the configured meta-loop levels on top of the generated adapter.
    Meta {
        #[command(flatten)]
        task: TaskArg,
        /// Adapt on the prompts chosen by select-prompts instead of all of them.
        #[arg(long)]
        selected: bool,
    },
    /// Run every task and seed end to end and write metrics.csv.
    Eval {
        /// Add the influence-vs-random prompt batch rows.
        #[arg(long)]
        ablation: bool,
    },
    /// Summarize metrics files with per-task and average deltas.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write long-format plot data here.
        #[arg(long, value_name = "PATH")]
        plot: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TaskArg {
    /// Task id from the config; defaults to the first task.
    #[arg(long)]
    task: Option<String>,
}

fn demo_config() -> ExperimentConfig {
    let task = SyntheticTaskSpec::new("keyword-drift", Rule::KeywordMatch, 0).with_drift(vec![Drift {
        step: 1000,
        perturbation: Perturbation::ShiftLabels { by: 1 },
    }]);
    ExperimentConfig {
        tasks: vec![task],
        ..ExperimentConfig::default()
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => demo_config(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    cfg.paper_scale |= g.paper_scale;
    cfg.checkpoints.finetune_only |= g.finetune_only_checkpoints;
    cfg.timing |= g.timing;
    cfg.check()?;
    Ok(cfg)
}

/// Artifacts of one (task, seed) pair built step by step by the subcommands.
struct Stage<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a SyntheticTaskSpec,
    seed: u64,
    dir: PathBuf,
}

impl<'a> Stage<'a> {
    fn new(cfg: &'a ExperimentConfig, out: &Path, task: &Option<String>) -> Result<Self> {
        let spec = match task {
            None => &cfg.tasks[0],
            Some(id) => cfg
                .tasks
                .iter()
                .find(|t| &t.task_id == id)
                .ok_or_else(|| anyhow!("no task {id:?} in the config"))?,
        };
        let seed = cfg.seeds[0];
        let dir = out.join("tasks").join(&spec.task_id).join(format!("seed-{seed}"));
        Ok(Self { cfg, spec, seed, dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("missing {}; run `solar {producer}` first", p.display());
        }
        Ok(p)
    }

    fn bundle(&self) -> Result<TaskBundle> {
        let p = self.require("bundle.json", "gen-task")?;
        let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", p.display()))
    }

    fn checkpoints(&self) -> Result<CheckpointSet> {
        let p = self.require("checkpoints", "collect")?;
        Ok(CheckpointSet::load(&p)?)
    }

    fn decoder(&self) -> Result<DecoderParams> {
        let p = self.require("decoder.bin", "train-decoder")?;
        Ok(read_decoder(&fs::read(&p)?)?)
    }

    fn selected(&self, pool: &[Sample]) -> Result<Vec<Sample>> {
        let p = self.require("selection.txt", "select-prompts")?;
        fs::read_to_string(&p)?
            .lines()
            .map(|l| {
                let i: usize = l.trim().parse().with_context(|| format!("bad prompt index {l:?} in {}", p.display()))?;
                pool.get(i).cloned().ok_or_else(|| anyhow!("prompt index {i} out of range"))
            })
            .collect()
    }
}

fn gen_task_cmd(st: &Stage) -> Result<()> {
    let spec = SyntheticTaskSpec {
        seed: task_seed(st.spec, st.seed),
        ..st.spec.clone()
    };
    let bundle = gen_task(&spec)?;
    fs::create_dir_all(&st.dir)?;
    fs::write(st.path("bundle.json"), serde_json::to_vec(&bundle)?)?;
    println!(
        "{}: {} train, {} eval, {} test, {} unlabeled -> {}",
        spec.task_id,
        bundle.train.samples.len(),
        bundle.eval.samples.len(),
        bundle.test.samples.len(),
        bundle.unlabeled.samples.len(),
        st.path("bundle.json").display()
    );
    Ok(())
}

fn collect_cmd(st: &Stage) -> Result<()> {
    let bundle = st.bundle()?;
    let model = st.cfg.model();
    let set = collect_checkpoints(&model, &st.spec.task_id, &bundle.train.samples, &st.cfg.recipe(st.seed))?;
    set.save(&st.path("checkpoints"))?;
    println!(
        "{} snapshots ({} pretrain, {} finetune) -> {}",
        set.checkpoints.len(),
        set.count(solar_core::harness::Phase::Pretrain),
        set.count(solar_core::harness::Phase::Finetune),
        st.path("checkpoints").display()
    );
    Ok(())
}

fn train_decoder_cmd(st: &Stage) -> Result<()> {
    let bundle = st.bundle()?;
    let set = st.checkpoints()?;
    let params = train_generator(&bundle, &set, &st.cfg.decoder, st.seed)?;
    fs::write(st.path("decoder.bin"), write_decoder(&params))?;
    println!("{} decoder parameters -> {}", params.decoder.num_params(), st.path("decoder.bin").display());
    Ok(())
}

fn select_cmd(st: &Stage, size: Option<usize>) -> Result<()> {
    let bundle = st.bundle()?;
    let pool = adaptation_prompts(&bundle.unlabeled)?;
    let embedder = if st.path("decoder.bin").exists() {
        st.decoder()?.embedder
    } else {
        EmbedderConfig::default()
    };
    let embeddings: Vec<Vec<f64>> = pool
        .iter()
        .map(|s| embed(&s.prompt_text, &embedder).map(|e| e.vector))
        .collect::<solar_core::Result<_>>()?;
    let mut sel = st.cfg.selection.clone();
    sel.target_size = size.unwrap_or(st.cfg.ablation.batch_size);
    sel.seed = st.seed;
    let picked = select_prompts(&embeddings, &sel)?;
    let ids: Vec<String> = picked.iter().map(usize::to_string).collect();
    fs::create_dir_all(&st.dir)?;
    write_selection(&ids, fs::File::create(st.path("selection.txt"))?)?;
    println!("{} of {} prompts -> {}", ids.len(), pool.len(), st.path("selection.txt").display());
    Ok(())
}

fn meta_cmd(st: &Stage, selected: bool) -> Result<()> {
    let bundle = st.bundle()?;
    let generator = Arc::new(st.decoder()?);
    let pool = adaptation_prompts(&bundle.unlabeled)?;
    let prompts = if selected { st.selected(pool)? } else { pool.to_vec() };
    let model = st.cfg.model();
    let mut kb = st.cfg.initial_kb()?;
    let out = run_solar(&model, &generator, &bundle, &prompts, &st.cfg.level_configs(), &mut kb, st.seed)?;

    let dir = st.path("meta");
    fs::create_dir_all(&dir)?;
    let mut log = Vec::new();
    write_run_log(&out.log, &mut log)?;
    fs::write(dir.join("run_log.jsonl"), log)?;
    let mut kb_bytes = Vec::new();
    kb.save(&mut kb_bytes)?;
    fs::write(dir.join("kb.jsonl"), kb_bytes)?;
    let best = json!({
        "chosen": format!("{:?}", out.chosen),
        "eval_accuracy": out.eval_accuracy,
        "adapter_free_eval": out.adapter_free_eval,
        "generated_eval": out.generated_eval,
        "strategy": out.plan.as_ref().map(|p| p.to_value()),
        "strategy_digest": out.plan.as_ref().map(|p| p.id()),
    });
    fs::write(dir.join("best.json"), serde_json::to_vec_pretty(&best)?)?;
    let accepted = out.log.iter().filter(|r| r.reward == 1).count();
    println!(
        "{} proposals, {accepted} accepted; eval accuracy {:.4} ({:?}), KB size {} -> {}",
        out.log.len(),
        out.eval_accuracy,
        out.chosen,
        kb.len(),
        dir.display()
    );
    Ok(())
}

fn eval_cmd(cfg: &mut ExperimentConfig, out: &Path, ablation: bool) -> Result<()> {
    cfg.ablation.enabled |= ablation;
    let runs = run_experiment(cfg, Some(out))?;
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    print!("{}", summarize(&rows)?.render());
    println!("{} rows -> {}", rows.len(), out.join("metrics.csv").display());
    Ok(())
}

fn report_cmd(files: &[PathBuf], plot: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for f in files {
        let file = fs::File::open(f).with_context(|| format!("opening {}", f.display()))?;
        rows.extend(read_metrics(file).with_context(|| format!("reading {}", f.display()))?);
    }
    let summary = summarize(&rows)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(summary.render().as_bytes())?;
    if let Some(p) = plot {
        fs::write(p, summary.plot_csv())?;
        writeln!(stdout, "plot data -> {}", p.display())?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Command::Report { files, plot } = &cli.command {
        return report_cmd(files, plot.as_deref());
    }
    let mut cfg = load_config(&cli.global)?;
    let out = &cli.global.out;
    match &cli.command {
        Command::GenTask(t) => gen_task_cmd(&Stage::new(&cfg, out, &t.task)?),
        Command::Collect(t) => collect_cmd(&Stage::new(&cfg, out, &t.task)?),
        Command::TrainDecoder(t) => train_decoder_cmd(&Stage::new(&cfg, out, &t.task)?),
        Command::SelectPrompts { task, size } => select_cmd(&Stage::new(&cfg, out, &task.task)?, *size),
        Command::Meta { task, selected } => meta_cmd(&Stage::new(&cfg, out, &task.task)?, *selected),
        Command::Eval { ablation } => eval_cmd(&mut cfg, out, *ablation),
        Command::Report { .. } => unreachable!(),
    }
}
