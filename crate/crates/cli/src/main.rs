//! `desne`: coreset selection by t-SNE embedding and grid sampling.

mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use desne::dataset::{read_selection, selection_to_string};
use desne::energy::{compare, EnergyCoefficients, Method, PassTable, PICOJOULE};
use desne::pipeline::{bench_optimizers, run_embed, run_sample};
use desne::report::{bench_csv, embedding_csv, parse_embedding_csv, scatter_csv, scatter_svg};
use desne::{json, Error, OptimizerKind, Result, RunConfig};
use serde_json::{json, Value};

use crate::output::{meta_path, Staged};

// A closed stdout (e.g. piped into `head`) is not an error for a summary line.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser, Debug)]
#[command(
    name = "desne",
    version,
    about = "Coreset selection by t-SNE embedding and grid sampling"
)]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a dataset and write the selected coreset manifest
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Manifest JSON path
        #[arg(long, short)]
        output: PathBuf,
        /// Also write the embedding CSV here
        #[arg(long)]
        embedding_out: Option<PathBuf>,
    },
    /// Embed a dataset and write the embedding CSV
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Calibrate every row with each bandwidth optimizer and report errors
    BenchOptimizers {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, short)]
        output: PathBuf,
        /// Comma-separated optimizer tags
        #[arg(long, default_value = "bs,de,sa", value_delimiter = ',')]
        optimizers: Vec<String>,
    },
    /// DDR transfer-energy comparison against near-memory sampling
    Energy(EnergyArgs),
    /// Join an embedding with a manifest into a scatter CSV and SVG
    ExportScatter {
        /// Embedding CSV written by `embed` or `sample --embedding-out`
        #[arg(long)]
        embedding: PathBuf,
        /// Manifest JSON written by `sample`
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Pipeline knobs. Unset flags fall back to the config file, then defaults.
#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key = value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// cifar-binary, raw-f32 or csv
    #[arg(long)]
    format: Option<String>,
    /// unit-range, per-feature-standardize or none
    #[arg(long)]
    normalize: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// de, bs or sa
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    de_pop: Option<usize>,
    #[arg(long)]
    de_iters: Option<usize>,
    #[arg(long)]
    de_f: Option<f64>,
    #[arg(long)]
    de_cr: Option<f64>,
    /// log or linear
    #[arg(long)]
    de_space: Option<String>,
    #[arg(long)]
    tsne_iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keeping ratio in (0, 1]
    #[arg(long)]
    keep: Option<f64>,
    /// Grid cells per axis
    #[arg(long)]
    grid: Option<usize>,
    /// Embed and sample each label separately
    #[arg(long)]
    per_class: bool,
    /// reference or cordic-newton
    #[arg(long)]
    math_backend: Option<String>,
    /// Largest N embedded in one block
    #[arg(long)]
    max_n: Option<usize>,
}

impl RunArgs {
    fn resolve(&self, threads: Option<usize>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let mut kv: Vec<(&str, String)> = Vec::new();
        let mut put = |k, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        put(
            "input",
            self.input.as_ref().map(|p| p.display().to_string()),
        );
        put("format", self.format.clone());
        put("normalize", self.normalize.clone());
        put("perplexity", self.perplexity.map(|v| v.to_string()));
        put("optimizer", self.optimizer.clone());
        put("de.pop", self.de_pop.map(|v| v.to_string()));
        put("de.iters", self.de_iters.map(|v| v.to_string()));
        put("de.f", self.de_f.map(|v| v.to_string()));
        put("de.cr", self.de_cr.map(|v| v.to_string()));
        put("de.space", self.de_space.clone());
        put(
            "tsne.iterations",
            self.tsne_iterations.map(|v| v.to_string()),
        );
        put(
            "tsne.learning_rate",
            self.learning_rate.map(|v| v.to_string()),
        );
        put("seed", self.seed.map(|v| v.to_string()));
        put("keep", self.keep.map(|v| v.to_string()));
        put("grid", self.grid.map(|v| v.to_string()));
        put("per_class", self.per_class.then(|| "true".to_string()));
        put("math_backend", self.math_backend.clone());
        put("max_n", self.max_n.map(|v| v.to_string()));
        put("threads", threads.map(|v| v.to_string()));
        for (k, v) in kv {
            cfg.apply_kv(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EnergyArgs {
    /// Comma-separated methods compared against nms
    #[arg(long, default_value = "dq,nessa", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value = "0.1,0.2,0.3", value_delimiter = ',')]
    keep_list: Vec<f64>,
    /// 32x32x3 bytes per image by default
    #[arg(long, default_value_t = 24_576)]
    bits_per_image: u64,
    #[arg(long, default_value_t = 50_000)]
    n_images: u64,
    /// Board link energy, pJ/bit
    #[arg(long, default_value_t = 10.0)]
    e_pcb: f64,
    /// Near-memory link energy, pJ/bit
    #[arg(long, default_value_t = 0.5)]
    e_nm: f64,
    /// `method=passes` or `method.{pcb,nm,kept}=passes`; repeatable
    #[arg(long)]
    passes_override: Vec<String>,
    /// CSV report path
    #[arg(long, short)]
    output: PathBuf,
    /// JSON report path
    #[arg(long)]
    json: Option<PathBuf>,
}

fn meta(config: &BTreeMap<String, String>, hash: &str, extra: Value) -> Result<String> {
    let mut v = json!({ "config": config, "config_hash": hash });
    if let (Value::Object(m), Value::Object(x)) = (&mut v, extra) {
        m.extend(x);
    }
    json::to_canonical_string(&v)
}

fn cmd_sample(
    run: &RunArgs,
    threads: Option<usize>,
    out: &Path,
    emb_out: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_with(run, threads, Some(out), emb_out)?;
    let (m, res) = with_pool(cfg.threads, || run_sample(&cfg))?;
    let mut staged = Staged::default();
    staged.add(out, &selection_to_string(&res.selection)?)?;
    if let Some(path) = emb_out {
        staged.add(path, &embedding_csv(&res.embedding, m.labels())?)?;
        let extra = json!({
            "kind": "embedding",
            "n": m.n(),
            "final_kl": res.final_kl,
            "mean_perplexity_error": res.mean_perplexity_error,
        });
        staged.add(
            &meta_path(path),
            &meta(&cfg.canonical(), &res.selection.config_hash, extra)?,
        )?;
    }
    staged.commit()?;
    say!(
        "N={} keep={} selected={} mean_perplexity_error={:.3e} final_kl={:.6} cells_covered={}/{} config_hash={}",
        m.n(),
        cfg.keeping_ratio,
        res.selection.indices.len(),
        res.mean_perplexity_error,
        res.final_kl,
        res.covered_cells,
        res.nonempty_cells,
        res.selection.config_hash
    );
    Ok(())
}

fn cmd_embed(run: &RunArgs, threads: Option<usize>, out: &Path) -> Result<()> {
    let cfg = resolve_with(run, threads, None, Some(out))?;
    let (m, res) = with_pool(cfg.threads, || run_embed(&cfg))?;
    if res.embedding.d != 2 {
        return Err(Error::Config(
            "embedding CSV output needs tsne.dim = 2".into(),
        ));
    }
    let hash = cfg.config_hash();
    let mut staged = Staged::default();
    staged.add(out, &embedding_csv(&res.embedding, m.labels())?)?;
    let extra = json!({
        "kind": "embedding",
        "n": m.n(),
        "final_kl": res.trace.final_kl(),
        "mean_perplexity_error": res.sigmas.mean_error(),
    });
    staged.add(&meta_path(out), &meta(&cfg.canonical(), &hash, extra)?)?;
    staged.commit()?;
    say!(
        "N={} mean_perplexity_error={:.3e} final_kl={:.6} config_hash={hash}",
        m.n(),
        res.sigmas.mean_error(),
        res.trace.final_kl()
    );
    Ok(())
}

fn cmd_bench(
    run: &RunArgs,
    threads: Option<usize>,
    out: &Path,
    optimizers: &[String],
) -> Result<()> {
    let cfg = resolve_with(run, threads, None, Some(out))?;
    let kinds: Vec<OptimizerKind> = optimizers
        .iter()
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("no optimizers requested".into()));
    }
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("no input dataset given".into()))?;
    let results = with_pool(cfg.threads, || {
        let raw = desne::dataset::load_dataset(&input, cfg.format)?;
        let m = desne::dataset::normalize(&raw, cfg.normalize);
        bench_optimizers(&m, &cfg, &kinds)
    })?;
    let hash = cfg.config_hash();
    let mut summary = BTreeMap::new();
    for r in &results {
        let mean = r.mean_error();
        summary.insert(
            r.optimizer_tag.clone(),
            json!({
                "mean_abs_error": mean,
                "log10_mean_abs_error": mean.log10(),
                "total_evals": r.evals.iter().sum::<u64>(),
            }),
        );
        say!(
            "{}: mean_abs_error={mean:.3e} log10={:.2} evals={}",
            r.optimizer_tag,
            mean.log10(),
            r.evals.iter().sum::<u64>()
        );
    }
    let mut staged = Staged::default();
    staged.add(out, &bench_csv(&results))?;
    let extra = json!({ "kind": "bench-optimizers", "optimizers": summary });
    staged.add(&meta_path(out), &meta(&cfg.canonical(), &hash, extra)?)?;
    staged.commit()?;
    say!("config_hash={hash}");
    Ok(())
}

fn cmd_energy(a: &EnergyArgs) -> Result<()> {
    let methods: Vec<Method> = a.methods.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let mut passes = PassTable::default();
    for o in &a.passes_override {
        passes.apply_override(o)?;
    }
    let coeffs = EnergyCoefficients {
        e_pcb: a.e_pcb * PICOJOULE,
        e_nm: a.e_nm * PICOJOULE,
    };
    let bits = a
        .bits_per_image
        .checked_mul(a.n_images)
        .filter(|&b| b > 0)
        .ok_or_else(|| {
            Error::Config("dataset size in bits must be positive and fit in 64 bits".into())
        })?;
    let report = compare(&methods, &a.keep_list, bits, &coeffs, &passes)?;

    let mut canonical = BTreeMap::new();
    canonical.insert("methods".to_string(), a.methods.join(","));
    canonical.insert(
        "keep_list".to_string(),
        a.keep_list
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    canonical.insert("bits_per_image".to_string(), a.bits_per_image.to_string());
    canonical.insert("n_images".to_string(), a.n_images.to_string());
    canonical.insert("e_pcb_pj".to_string(), format!("{:?}", a.e_pcb));
    canonical.insert("e_nm_pj".to_string(), format!("{:?}", a.e_nm));
    canonical.insert("passes_override".to_string(), a.passes_override.join(";"));
    // energy runs hash their own flag set
    let hash = json::canonical_hash(&canonical)?;

    let mut staged = Staged::default();
    staged.add(&a.output, &report.to_csv())?;
    staged.add(
        &meta_path(&a.output),
        &meta(&canonical, &hash, json!({ "kind": "energy" }))?,
    )?;
    if let Some(path) = &a.json {
        let body = serde_json::to_value(&report).map_err(|e| Error::Data(e.to_string()))?;
        staged.add(
            path,
            &meta(
                &canonical,
                &hash,
                json!({ "kind": "energy", "report": body }),
            )?,
        )?;
    }
    staged.commit()?;
    for r in &report.rows {
        say!(
            "{} keep={} ratio_vs_nms={:.3} ({})",
            r.method,
            r.keeping_ratio,
            r.ratio_vs_nms,
            r.model
        );
    }
    Ok(())
}

fn cmd_scatter(embedding: &Path, manifest: &Path, out: &Path, svg: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(embedding).map_err(|source| Error::Io {
        path: embedding.to_path_buf(),
        source,
    })?;
    let table = parse_embedding_csv(&text)?;
    let sel = read_selection(manifest)?;
    let mut staged = Staged::default();
    staged.add(out, &scatter_csv(&table, &sel)?)?;
    let extra = json!({ "kind": "scatter", "selected": sel.indices.len(), "n": sel.n });
    staged.add(
        &meta_path(out),
        &meta(&sel.config, &sel.config_hash, extra)?,
    )?;
    if let Some(path) = svg {
        let body = scatter_svg(&table, &sel)?;
        staged.add(
            path,
            &format!("<!-- config_hash: {} -->\n{body}", sel.config_hash),
        )?;
    }
    staged.commit()?;
    say!(
        "N={} selected={} config_hash={}",
        sel.n,
        sel.indices.len(),
        sel.config_hash
    );
    Ok(())
}

fn resolve_with(
    run: &RunArgs,
    threads: Option<usize>,
    output: Option<&Path>,
    embedding_output: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = run.resolve(threads)?;
    cfg.output = output.map(Path::to_path_buf);
    cfg.embedding_output = embedding_output.map(Path::to_path_buf);
    Ok(cfg)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match &cli.command {
        Command::Sample {
            run,
            output,
            embedding_out,
        } => cmd_sample(run, threads, output, embedding_out.as_deref()),
        Command::Embed { run, output } => cmd_embed(run, threads, output),
        Command::BenchOptimizers {
            run,
            output,
            optimizers,
        } => cmd_bench(run, threads, output, optimizers),
        Command::Energy(a) => with_pool(threads, || cmd_energy(a)),
        Command::ExportScatter {
            embedding,
            manifest,
            output,
            svg,
        } => cmd_scatter(embedding, manifest, output, svg.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("desne: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
