//! Run configuration and the end-to-end selection pipeline:
//! load, normalize, distances, bandwidths, joint affinities, t-SNE, grid,
//! quotas, per-cell sampling.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{
    load_dataset, normalize, target_count, CoresetSelection, DatasetFormat, DatasetMatrix,
    NormalizeMode,
};
use crate::distance::{pairwise_sq_dist, DistanceMatrix};
use crate::embedding::{run_tsne, Embedding, LossTrace, TsneConfig};
use crate::error::{Error, Result};
use crate::grid::{
    allocate_quotas_for_target, covered_cells, grid_partition, largest_remainder, sample_cells,
    GridSpec, DEFAULT_CELLS_PER_AXIS,
};
use crate::json;
use crate::kernels::{Backend, KernelConfig};
use crate::perplexity::{
    conditional_matrix, joint_affinities, solve_sigmas, DEConfig, DifferentialEvolution, Optimizer,
    OptimizerKind, SearchSpace, SigmaVector, DEFAULT_PERPLEXITY,
};

/// Largest N processed in one block unless raised explicitly.
pub const DEFAULT_MAX_N: usize = 20_000;

/// Every knob of a run. Output locations and the worker count are not part
/// of the canonical form: they cannot change any result.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub format: DatasetFormat,
    pub normalize: NormalizeMode,
    pub perplexity: f64,
    pub optimizer: OptimizerKind,
    pub de: DEConfig,
    pub de_space: SearchSpace,
    pub tsne: TsneConfig,
    pub grid: usize,
    pub keeping_ratio: f64,
    pub per_class: bool,
    pub math: KernelConfig,
    pub seed: u64,
    pub max_n: usize,
    pub output: Option<PathBuf>,
    pub embedding_output: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            format: DatasetFormat::Csv,
            normalize: NormalizeMode::UnitRange,
            perplexity: DEFAULT_PERPLEXITY,
            optimizer: OptimizerKind::De,
            de: DEConfig::default(),
            de_space: SearchSpace::default(),
            tsne: TsneConfig::default(),
            grid: DEFAULT_CELLS_PER_AXIS,
            keeping_ratio: 0.1,
            per_class: false,
            math: KernelConfig::default(),
            seed: 0,
            max_n: DEFAULT_MAX_N,
            output: None,
            embedding_output: None,
            threads: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Debug,
{
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

/// Shortest round-trip text of a float.
fn f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Set one knob from its text form. Keys match [`RunConfig::canonical`].
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "input" => self.input = Some(PathBuf::from(value.trim())),
            "format" => self.format = value.trim().parse()?,
            "normalize" => self.normalize = value.trim().parse()?,
            "perplexity" => self.perplexity = parse(key, value)?,
            "optimizer" => self.optimizer = value.trim().parse()?,
            "de.f" => self.de.f_weight = parse(key, value)?,
            "de.cr" => self.de.cr = parse(key, value)?,
            "de.pop" => self.de.pop_size = parse(key, value)?,
            "de.iters" => self.de.max_iter = parse(key, value)?,
            "de.epsilon" => self.de.epsilon = parse(key, value)?,
            "de.lb" => self.de.lb = parse(key, value)?,
            "de.ub" => self.de.ub = parse(key, value)?,
            "de.space" => self.de_space = value.trim().parse()?,
            "tsne.dim" => self.tsne.d = parse(key, value)?,
            "tsne.iterations" => self.tsne.iterations = parse(key, value)?,
            "tsne.learning_rate" => self.tsne.learning_rate = parse(key, value)?,
            "tsne.momentum_early" => self.tsne.momentum_early = parse(key, value)?,
            "tsne.momentum_late" => self.tsne.momentum_late = parse(key, value)?,
            "tsne.momentum_switch_iter" => self.tsne.momentum_switch_iter = parse(key, value)?,
            "tsne.exaggeration" => self.tsne.early_exaggeration_factor = parse(key, value)?,
            "tsne.exaggeration_iters" => self.tsne.early_exaggeration_iters = parse(key, value)?,
            "tsne.init_std" => self.tsne.init_std = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "keep" => self.keeping_ratio = parse(key, value)?,
            "per_class" => self.per_class = parse_bool(key, value)?,
            "math_backend" => self.math.backend = value.trim().parse::<Backend>()?,
            "cordic_iterations" => self.math.cordic_iterations = parse(key, value)?,
            "newton_iterations" => self.math.newton_iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_n" => self.max_n = parse(key, value)?,
            "output" => self.output = Some(PathBuf::from(value.trim())),
            "embedding_output" => self.embedding_output = Some(PathBuf::from(value.trim())),
            "threads" => self.threads = Some(parse(key, value)?),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file (TOML syntax; `[de]` tables and
    /// dotted keys flatten to `de.pop` style names).
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat)?;
        for (k, v) in flat {
            self.apply_kv(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_file_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keeping_ratio > 0.0 && self.keeping_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keeping ratio {} outside (0, 1]",
                self.keeping_ratio
            )));
        }
        if !(self.perplexity > 1.0 && self.perplexity.is_finite()) {
            return Err(Error::Config(format!(
                "perplexity must exceed 1, got {}",
                self.perplexity
            )));
        }
        if self.grid == 0 {
            return Err(Error::Config(
                "grid needs at least one cell per axis".into(),
            ));
        }
        if self.max_n < 2 {
            return Err(Error::Config("max_n must be >= 2".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.de.validate()?;
        self.tsne.validate()?;
        self.math.validate()
    }

    /// Result-affecting settings as sorted text pairs.
    pub fn canonical(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put(
            "input",
            self.input
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        put("format", self.format.to_string());
        put("normalize", self.normalize.to_string());
        put("perplexity", f(self.perplexity));
        put("optimizer", self.optimizer.to_string());
        put("de.f", f(self.de.f_weight));
        put("de.cr", f(self.de.cr));
        put("de.pop", self.de.pop_size.to_string());
        put("de.iters", self.de.max_iter.to_string());
        put("de.epsilon", f(self.de.epsilon));
        put("de.lb", f(self.de.lb));
        put("de.ub", f(self.de.ub));
        put("de.space", self.de_space.to_string());
        put("tsne.dim", self.tsne.d.to_string());
        put("tsne.iterations", self.tsne.iterations.to_string());
        put("tsne.learning_rate", f(self.tsne.learning_rate));
        put("tsne.momentum_early", f(self.tsne.momentum_early));
        put("tsne.momentum_late", f(self.tsne.momentum_late));
        put(
            "tsne.momentum_switch_iter",
            self.tsne.momentum_switch_iter.to_string(),
        );
        put("tsne.exaggeration", f(self.tsne.early_exaggeration_factor));
        put(
            "tsne.exaggeration_iters",
            self.tsne.early_exaggeration_iters.to_string(),
        );
        put("tsne.init_std", f(self.tsne.init_std));
        put("grid", self.grid.to_string());
        put("keep", f(self.keeping_ratio));
        put("per_class", self.per_class.to_string());
        put("math_backend", self.math.backend.to_string());
        put("cordic_iterations", self.math.cordic_iterations.to_string());
        put("newton_iterations", self.math.newton_iterations.to_string());
        put("seed", self.seed.to_string());
        put("max_n", self.max_n.to_string());
        m
    }

    /// Hex SHA-256 of the canonical form serialized as canonical JSON.
    pub fn config_hash(&self) -> String {
        json::canonical_hash(&self.canonical()).expect("string map serializes")
    }

    pub fn optimizer_instance(&self) -> Optimizer {
        match Optimizer::with_defaults(self.optimizer, self.de) {
            Optimizer::DifferentialEvolution(_) => {
                Optimizer::DifferentialEvolution(DifferentialEvolution {
                    config: self.de,
                    space: self.de_space,
                })
            }
            other => other,
        }
    }

    fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            seed: self.seed,
            ..self.tsne
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, String>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let text = match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(x) => f(*x),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            other => {
                return Err(Error::Config(format!(
                    "config key {key} has unsupported value {other}"
                )))
            }
        };
        out.insert(key, text);
    }
    Ok(())
}

/// Embedding stage output for one block of points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutcome {
    pub embedding: Embedding,
    pub trace: LossTrace,
    pub sigmas: SigmaVector,
}

fn check_size(n: usize, cfg: &RunConfig) -> Result<()> {
    if n > cfg.max_n {
        return Err(Error::Config(format!(
            "N={n} exceeds the limit of {} points per block ({} MiB distance matrix); \
             use per-class mode or raise max_n",
            cfg.max_n,
            DistanceMatrix::memory_bytes(n) >> 20
        )));
    }
    Ok(())
}

/// Bandwidth calibration and t-SNE on an already-normalized matrix.
pub fn embed_matrix(m: &DatasetMatrix, cfg: &RunConfig) -> Result<EmbedOutcome> {
    check_size(m.n(), cfg)?;
    let d2 = pairwise_sq_dist(m)?;
    let search = cfg.optimizer_instance();
    let sigmas = solve_sigmas(&d2, cfg.perplexity, &search, cfg.seed, cfg.math)?;
    let cond = conditional_matrix(&d2, &sigmas.sigma, cfg.math)?;
    drop(d2);
    let p = joint_affinities(&cond, m.n())?;
    drop(cond);
    let (mut embedding, trace) = run_tsne(&p, &cfg.tsne_config(), cfg.math)?;
    embedding.config_hash = cfg.config_hash();
    Ok(EmbedOutcome {
        embedding,
        trace,
        sigmas,
    })
}

/// Full-pipeline result.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub selection: CoresetSelection,
    /// Embedding in dataset order; per-class blocks share one array but
    /// each class has its own coordinate frame.
    pub embedding: Embedding,
    pub mean_perplexity_error: f64,
    /// Final KL, averaged over blocks.
    pub final_kl: f64,
    pub nonempty_cells: usize,
    pub covered_cells: usize,
    pub blocks: usize,
}

fn load(cfg: &RunConfig) -> Result<DatasetMatrix> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("no input dataset given".into()))?;
    let raw = load_dataset(input, cfg.format)?;
    Ok(normalize(&raw, cfg.normalize))
}

/// Load and normalize the configured input, then [`embed_matrix`].
pub fn run_embed(cfg: &RunConfig) -> Result<(DatasetMatrix, EmbedOutcome)> {
    cfg.validate()?;
    let m = load(cfg)?;
    let out = embed_matrix(&m, cfg)?;
    Ok((m, out))
}

/// Load and normalize the configured input, then [`sample_matrix`].
pub fn run_sample(cfg: &RunConfig) -> Result<(DatasetMatrix, SampleOutcome)> {
    cfg.validate()?;
    let m = load(cfg)?;
    let out = sample_matrix(&m, cfg)?;
    Ok((m, out))
}

/// Select a coreset from an already-normalized matrix.
pub fn sample_matrix(m: &DatasetMatrix, cfg: &RunConfig) -> Result<SampleOutcome> {
    cfg.validate()?;
    if cfg.tsne.d != 2 {
        return Err(Error::Config(format!(
            "grid sampling needs a 2-D embedding, tsne.dim is {}",
            cfg.tsne.d
        )));
    }
    let n = m.n();
    let total = target_count(cfg.keeping_ratio, n);
    if total == 0 {
        return Err(Error::Config(format!(
            "keeping ratio {} selects no samples out of N={n}",
            cfg.keeping_ratio
        )));
    }
    let blocks: Vec<Vec<usize>> = if cfg.per_class {
        let labels = m
            .labels()
            .ok_or_else(|| Error::Config("per-class mode needs a labeled dataset".into()))?;
        let mut by_label: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        by_label.into_values().collect()
    } else {
        check_size(n, cfg)?;
        vec![(0..n).collect()]
    };
    let sizes: Vec<usize> = blocks.iter().map(Vec::len).collect();
    let targets = largest_remainder(&sizes, total);
    let cells_per_block = cfg.grid * cfg.grid;

    let mut y = vec![0.0; n * 2];
    let mut picked: Vec<(usize, usize)> = Vec::with_capacity(total);
    let mut err_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut nonempty = 0;
    let mut covered = 0;
    for (b, (members, &target)) in blocks.iter().zip(&targets).enumerate() {
        let sub = if blocks.len() == 1 {
            m.clone()
        } else {
            m.subset(members)?
        };
        let out = embed_matrix(&sub, cfg)?;
        err_sum += out.sigmas.per_row_error.iter().sum::<f64>();
        kl_sum += out.trace.final_kl();
        for (k, &i) in members.iter().enumerate() {
            y[i * 2..i * 2 + 2].copy_from_slice(out.embedding.point(k));
        }
        let spec = GridSpec::fit(&out.embedding, cfg.grid)?;
        let assign = grid_partition(&out.embedding, &spec)?;
        nonempty += assign.occupancy.len();
        if target == 0 {
            continue;
        }
        let quotas = allocate_quotas_for_target(&assign, target)?;
        let block_seed = cfg.seed ^ (b as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        let sel = sample_cells(&assign, &quotas, cfg.keeping_ratio, block_seed)?;
        covered += covered_cells(&sel);
        let offset = b * cells_per_block;
        picked.extend(
            sel.indices
                .iter()
                .zip(&sel.cells)
                .map(|(&k, &c)| (members[k], c + offset)),
        );
    }
    picked.sort_unstable();

    let hash = cfg.config_hash();
    let mut selection = CoresetSelection {
        indices: picked.iter().map(|p| p.0).collect(),
        cells: picked.iter().map(|p| p.1).collect(),
        labels: Vec::new(),
        keeping_ratio: cfg.keeping_ratio,
        n,
        seed: cfg.seed,
        source_id: m.source_id().to_string(),
        config: cfg.canonical(),
        config_hash: hash.clone(),
    };
    selection.attach_labels(m);
    selection.validate()?;

    let mut embedding = Embedding::new(y, n, 2)?;
    embedding.config_hash = hash;
    embedding.seed = cfg.seed;
    Ok(SampleOutcome {
        selection,
        embedding,
        mean_perplexity_error: err_sum / n as f64,
        final_kl: kl_sum / blocks.len() as f64,
        nonempty_cells: nonempty,
        covered_cells: covered,
        blocks: blocks.len(),
    })
}

/// Calibrate every row with each optimizer on the same distances and seed.
pub fn bench_optimizers(
    m: &DatasetMatrix,
    cfg: &RunConfig,
    kinds: &[OptimizerKind],
) -> Result<Vec<SigmaVector>> {
    cfg.validate()?;
    check_size(m.n(), cfg)?;
    let d2 = pairwise_sq_dist(m)?;
    kinds
        .iter()
        .map(|&k| {
            let c = RunConfig {
                optimizer: k,
                ..cfg.clone()
            };
            solve_sigmas(
                &d2,
                cfg.perplexity,
                &c.optimizer_instance(),
                cfg.seed,
                cfg.math,
            )
        })
        .collect()
}
