//! Experiment stages behind the `acanas` binary. Each stage reads its inputs
//! from and writes its artifacts to one run directory.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nas_core::allocation::{allocate_network, deserialize_allocation, serialize_allocation, ChannelAllocation};
use nas_core::checkpoint;
use nas_core::data::{generate, load_raw, split, write_raw, Dataset, Normalizer};
use nas_core::dot::export_dot;
use nas_core::genotype::{derive_genotype, deserialize_genotype, serialize_genotype, Genotype};
use nas_core::search::{run_search, search_csv};
use nas_core::seed::{derive_seed, stage_rng};
use nas_core::space::{build_topology, CellType, SearchSpace};
use nas_core::supernet::arch_from_tensors;
use nas_core::targetnet::{eval_csv, evaluate, train_target, TargetNet};

pub use config::{ExperimentConfig, RUN_ROOT_ENV};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEARCH_CHECKPOINT: &str = "search.ckpt";
pub const SEARCH_CSV: &str = "search.csv";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const ALLOCATION_FILE: &str = "allocation.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const TARGET_CHECKPOINT: &str = "target.ckpt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const NORMAL_DOT: &str = "normal.dot";
pub const REDUCE_DOT: &str = "reduce.dot";

/// A resolved configuration bound to its run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

impl Run {
    pub fn new(config: ExperimentConfig, dir: PathBuf) -> Self {
        Run { config, dir }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Creates the run directory and echoes the resolved configuration.
    pub fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        write(&self.path(CONFIG_FILE), self.config.to_toml()?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.config.dataset;
        let data = match d.source {
            config::DataSource::Synthetic => generate(&self.config.synthetic_config())?,
            config::DataSource::Raw => load_raw(Path::new(&d.images), Path::new(&d.labels), Some(d.classes))
                .with_context(|| format!("loading {} and {}", d.images, d.labels))?,
        };
        if data.height != data.width {
            bail!(
                "images are {}x{}, only square images are supported",
                data.height,
                data.width
            );
        }
        Ok(data)
    }

    /// The training and validation parts of the dataset.
    pub fn parts(&self) -> Result<(Dataset, Dataset)> {
        let data = self.dataset()?;
        Ok(split(
            &data,
            self.config.dataset.train_fraction,
            derive_seed(self.config.seed, "data.split"),
        )?)
    }
}

#[derive(Clone, Debug)]
pub struct SearchSummary {
    pub genotype: Genotype,
    pub final_val_acc: f64,
    pub skip_fraction: f64,
}

/// Searches on the training part; writes the checkpoint, the trace and the
/// final genotype.
pub fn cmd_search(run: &Run) -> Result<SearchSummary> {
    run.prepare()?;
    let (train, _) = run.parts()?;
    let net_cfg = run.config.supernet_config(train.classes, train.channels)?;
    let out = run_search(&train, &net_cfg, &run.config.search_config(), run.config.seed)?;
    checkpoint::save(&run.path(SEARCH_CHECKPOINT), &out.net.checkpoint_tensors())
        .with_context(|| format!("writing {}", run.path(SEARCH_CHECKPOINT).display()))?;
    write(&run.path(SEARCH_CSV), search_csv(&out.trace))?;
    write(&run.path(GENOTYPE_FILE), serialize_genotype(&out.genotype))?;
    let last = out.trace.last().expect("at least one epoch");
    Ok(SearchSummary {
        genotype: out.genotype,
        final_val_acc: last.val_acc,
        skip_fraction: last.skip_fraction,
    })
}

/// Where `derive` takes the architecture from.
#[derive(Clone, Debug)]
pub enum DeriveSource {
    Checkpoint(PathBuf),
    Genotype(PathBuf),
}

/// Genotype of a search checkpoint, checked against the configured space.
pub fn genotype_from_checkpoint(run: &Run, path: &Path) -> Result<Genotype> {
    let tensors = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let arch = arch_from_tensors(&tensors)?;
    let space = SearchSpace::new(run.config.space()?);
    let topology = build_topology(run.config.search.nodes)?;
    if arch.num_ops() != space.len() || arch.num_edges() != topology.edges.len() {
        bail!(
            "checkpoint has {} edges x {} operations, space {} with {} nodes expects {} x {}",
            arch.num_edges(),
            arch.num_ops(),
            space.id,
            run.config.search.nodes,
            topology.edges.len(),
            space.len()
        );
    }
    Ok(derive_genotype(&arch, &space, &topology)?)
}

/// Derives (or re-reads) the genotype and allocates channels for the
/// target network. The genotype passes through its text form first, so the
/// allocation is exactly what `genotype.txt` implies.
pub fn cmd_derive(run: &Run, source: &DeriveSource) -> Result<(Genotype, ChannelAllocation)> {
    let genotype = match source {
        DeriveSource::Checkpoint(p) => genotype_from_checkpoint(run, p)?,
        DeriveSource::Genotype(p) => {
            deserialize_genotype(&read(p)?).with_context(|| format!("parsing {}", p.display()))?
        }
    };
    let text = serialize_genotype(&genotype);
    let genotype = deserialize_genotype(&text)?;
    let data = run.dataset()?;
    let layout = run
        .config
        .target_config(data.classes, data.channels, data.height)
        .layout()?;
    let allocation = allocate_network(&genotype, &layout, run.config.allocation_mode())?;
    run.prepare()?;
    write(&run.path(GENOTYPE_FILE), text)?;
    write(
        &run.path(ALLOCATION_FILE),
        serialize_allocation(&allocation, &genotype)?,
    )?;
    Ok((genotype, allocation))
}

/// Genotype and allocation files consumed by `train`, `eval` and
/// `export-dot`; defaults are the run directory's own.
#[derive(Clone, Debug, Default)]
pub struct Inputs {
    pub genotype: Option<PathBuf>,
    pub allocation: Option<PathBuf>,
}

impl Inputs {
    pub fn load(&self, run: &Run) -> Result<(Genotype, ChannelAllocation)> {
        let gp = self.genotype.clone().unwrap_or_else(|| run.path(GENOTYPE_FILE));
        let ap = self.allocation.clone().unwrap_or_else(|| run.path(ALLOCATION_FILE));
        let g = deserialize_genotype(&read(&gp)?).with_context(|| format!("parsing {}", gp.display()))?;
        let a = deserialize_allocation(&read(&ap)?, &g).with_context(|| format!("parsing {}", ap.display()))?;
        Ok((g, a))
    }
}

/// Final figures of a trained target network.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub params: usize,
    pub multiply_adds: u64,
}

impl Metrics {
    pub fn to_text(&self) -> String {
        format!(
            "accuracy {:.6}\nloss {:.6}\nparams {}\nmultiply_adds {}\n",
            self.accuracy, self.loss, self.params, self.multiply_adds
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
                .with_context(|| format!("metrics lack `{key}`"))
        };
        Ok(Metrics {
            accuracy: field("accuracy")?.parse()?,
            loss: field("loss")?.parse()?,
            params: field("params")?.parse()?,
            multiply_adds: field("multiply_adds")?.parse()?,
        })
    }
}

fn build_target(run: &Run, g: &Genotype, a: &ChannelAllocation, like: &Dataset) -> Result<TargetNet> {
    let cfg = run.config.target_config(like.classes, like.channels, like.height);
    Ok(TargetNet::build(
        g,
        a,
        &cfg,
        &mut stage_rng(run.config.seed, "target.init"),
    )?)
}

fn metrics(net: &TargetNet, train: &Dataset, val: &Dataset, batch_size: usize) -> Result<Metrics> {
    let norm = Normalizer::fit(train)?;
    let (accuracy, loss) = evaluate(net, val, &norm, batch_size)?;
    let (params, multiply_adds) = net.count_params_flops()?;
    Ok(Metrics {
        accuracy,
        loss,
        params,
        multiply_adds,
    })
}

/// Trains the target network on the training part and evaluates it on the
/// validation part; normalization statistics come from the training part.
pub fn cmd_train(run: &Run, inputs: &Inputs) -> Result<Metrics> {
    run.prepare()?;
    let (g, a) = inputs.load(run)?;
    let (train, val) = run.parts()?;
    let mut net = build_target(run, &g, &a, &train)?;
    let norm = Normalizer::fit(&train)?;
    let records = train_target(
        &mut net,
        &train,
        &val,
        &norm,
        &run.config.train_config(),
        &mut stage_rng(run.config.seed, "target.order"),
    )?;
    write(&run.path(EVAL_CSV), eval_csv(&records))?;
    checkpoint::save(&run.path(TARGET_CHECKPOINT), &net.checkpoint_tensors())
        .with_context(|| format!("writing {}", run.path(TARGET_CHECKPOINT).display()))?;
    let m = metrics(&net, &train, &val, run.config.eval.batch_size)?;
    write(&run.path(METRICS_FILE), m.to_text())?;
    Ok(m)
}

/// Re-evaluates a trained target checkpoint on the validation part.
pub fn cmd_eval(run: &Run, inputs: &Inputs, weights: Option<&Path>) -> Result<Metrics> {
    run.prepare()?;
    let (g, a) = inputs.load(run)?;
    let (train, val) = run.parts()?;
    let mut net = build_target(run, &g, &a, &train)?;
    let path = weights
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.path(TARGET_CHECKPOINT));
    let tensors = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    net.load_tensors(&tensors)?;
    let m = metrics(&net, &train, &val, run.config.eval.batch_size)?;
    write(&run.path(METRICS_FILE), m.to_text())?;
    Ok(m)
}

/// Writes `normal.dot` and `reduce.dot` into `out`.
pub fn cmd_export_dot(run: &Run, inputs: &Inputs, out: &Path) -> Result<[PathBuf; 2]> {
    let (g, a) = inputs.load(run)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let normal = out.join(NORMAL_DOT);
    let reduce = out.join(REDUCE_DOT);
    write(&normal, export_dot(&g, &a, CellType::Normal)?)?;
    write(&reduce, export_dot(&g, &a, CellType::Reduction)?)?;
    Ok([normal, reduce])
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub search: SearchSummary,
    pub metrics: Metrics,
}

/// Search, derivation, target training and cell export in one run
/// directory.
pub fn cmd_pipeline(run: &Run) -> Result<PipelineSummary> {
    let search = cmd_search(run)?;
    cmd_derive(run, &DeriveSource::Checkpoint(run.path(SEARCH_CHECKPOINT)))?;
    let metrics = cmd_train(run, &Inputs::default())?;
    cmd_export_dot(run, &Inputs::default(), &run.dir)?;
    Ok(PipelineSummary { search, metrics })
}

/// Writes the configured dataset in the raw format.
pub fn cmd_gen_data(run: &Run, images: &Path, labels: &Path) -> Result<Dataset> {
    let data = run.dataset()?;
    for p in [images, labels] {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    write_raw(&data, images, labels)
        .with_context(|| format!("writing {} and {}", images.display(), labels.display()))?;
    Ok(data)
}

/// Process exit status for an error: 3 for numerical divergence, 4 for I/O
/// failures, 2 for everything else (configuration, parse and load errors).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nas_core::Error>() {
            return match e {
                nas_core::Error::Divergence(_) => 3,
                nas_core::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}
