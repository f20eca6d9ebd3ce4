//! The subcommands, as library functions writing to any `Write`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unishuffle::attack::{self, AttackError, AttackReport, AttackedRun, ComparisonTable};
use unishuffle::codec::{self, BitBudget, CodecError};
use unishuffle::data::{self, ClientDataset, DataError, Dataset, PartitionSpec};
use unishuffle::federation::{self, FederationError, RoundMetrics, RunOutput};
use unishuffle::nn::{NnError, ParamVector};
use unishuffle::rng;

use crate::config::{ConfigError, DataSource, DumpRounds, ExperimentConfig};
use crate::transcript::{self, TranscriptError};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ATTACK_CSV: &str = "attack.csv";
pub const ATTACK_TEXT: &str = "attack.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Transcript {
        path: PathBuf,
        source: TranscriptError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("output: {0}")]
    Output(#[from] std::io::Error),
    #[error("{0} not found")]
    Missing(PathBuf),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub mode: String,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub u_bits: u64,
    pub h_bits: u64,
}

impl From<&RoundMetrics> for MetricsRow {
    fn from(m: &RoundMetrics) -> Self {
        MetricsRow {
            round: m.round,
            mode: m.mode.to_string(),
            train_loss: m.train_loss,
            test_loss: m.test_loss,
            test_acc: m.test_acc,
            u_bits: m.u_bits,
            h_bits: m.h_bits,
        }
    }
}

/// Data, partition and initial model for a config.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Vec<ClientDataset>,
    pub initial: ParamVector,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    rng::derive(seed, &[tag]).next_u64()
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    match d.source {
        DataSource::Mnist => {
            let dir = &d.mnist_dir;
            let file = |name: &str| {
                let p = dir.join(name);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(CliError::Missing(p))
                }
            };
            let mut train = data::load_idx(
                &file("train-images-idx3-ubyte")?,
                &file("train-labels-idx1-ubyte")?,
            )?;
            if d.subset != 0 {
                train = train.head(d.subset);
            }
            let test = data::load_idx(
                &file("t10k-images-idx3-ubyte")?,
                &file("t10k-labels-idx1-ubyte")?,
            )?;
            Ok((train, test))
        }
        DataSource::Synthetic => {
            let seed = sub_seed(cfg.run.seed, rng::SUBSET);
            let train = data::synthetic_gaussian(d.per_class, d.classes, d.dim, seed)?;
            let test =
                data::synthetic_gaussian(d.test_per_class, d.classes, d.dim, seed.wrapping_add(1))?;
            Ok((train, test))
        }
    }
}

pub fn partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<ClientDataset>, CliError> {
    Ok(data::dirichlet_partition(
        train,
        &PartitionSpec {
            n_clients: cfg.federation.clients,
            alpha: cfg.data.alpha,
            seed: sub_seed(cfg.run.seed, rng::PARTITION),
        },
    )?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let (train, test) = load_data(cfg)?;
    let partition = partition(cfg, &train)?;
    let initial = ParamVector::init(cfg.layout()?, &mut rng::derive(cfg.run.seed, &[rng::INIT]));
    Ok(Prepared {
        train,
        test,
        partition,
        initial,
    })
}

/// Result of [`cmd_run`]: where it wrote and what it computed.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub output: RunOutput,
}

impl RunArtifacts {
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.output.rounds.last().map(|(m, _)| m)
    }
}

pub fn write_metrics(
    path: &Path,
    rounds: &[(RoundMetrics, federation::RoundTranscript)],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (m, _) in rounds {
        w.serialize(MetricsRow::from(m)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(CliError::Missing(path));
    }
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(csv_err(&path))
}

/// Train, then persist config, seed, metrics and transcripts into
/// `cfg.run.out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    let dir = cfg.run.out.clone();
    let prepared = prepare(cfg)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    let path = dir.join(SEED_FILE);
    fs::write(&path, format!("{}\n", cfg.run.seed)).map_err(io_err(&path))?;

    let output = federation::run_rounds(
        &cfg.fl_config(),
        prepared.initial,
        &prepared.partition,
        &prepared.train,
        &prepared.test,
    )?;
    write_metrics(&dir.join(METRICS_FILE), &output.rounds)?;
    let last = output.rounds.len();
    for (m, t) in &output.rounds {
        let dump = match cfg.run.dump_rounds {
            DumpRounds::None => false,
            DumpRounds::Final => m.round == last,
            DumpRounds::All => true,
        };
        if dump {
            let path = dir.join(transcript::file_name(m.round));
            let mut order = rng::derive(cfg.run.seed, &[rng::SHUFFLE, m.round as u64, 1]);
            transcript::write(&path, t, cfg.run.full_unary_dump, &mut order)
                .map_err(|source| CliError::Transcript { path, source })?;
        }
    }
    for (m, _) in &output.rounds {
        writeln!(
            out,
            "round {:>3}  train_loss {:.4}  test_loss {:.4}  test_acc {:.4}",
            m.round, m.train_loss, m.test_loss, m.test_acc
        )?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(RunArtifacts {
        dir,
        config: cfg.clone(),
        output,
    })
}

fn load_run_config(dir: &Path) -> Result<ExperimentConfig, CliError> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(CliError::Missing(path));
    }
    Ok(ExperimentConfig::load(&path)?)
}

/// Attack the transcripts of finished runs and tabulate the results.
///
/// All runs must share their data and partition settings. The table is
/// written to `out_dir`, or to the first run directory.
pub fn cmd_attack(
    run_dirs: &[PathBuf],
    out_dir: Option<&Path>,
    round: Option<usize>,
    out: &mut dyn Write,
) -> Result<(ComparisonTable, Vec<AttackReport>), CliError> {
    let first_dir = run_dirs
        .first()
        .ok_or_else(|| CliError::Mismatch("no run directories given".into()))?;
    let configs = run_dirs
        .iter()
        .map(|d| load_run_config(d))
        .collect::<Result<Vec<_>, _>>()?;
    let base = &configs[0];
    for (dir, c) in run_dirs.iter().zip(&configs) {
        if c.data != base.data
            || c.run.seed != base.run.seed
            || c.federation.clients != base.federation.clients
            || c.model != base.model
        {
            return Err(CliError::Mismatch(format!(
                "{} differs from {} in data, seed, clients or model",
                dir.display(),
                first_dir.display()
            )));
        }
    }
    let (train, _) = load_data(base)?;
    let partition = partition(base, &train)?;

    let mut transcripts = Vec::new();
    let mut accuracies = Vec::new();
    for (dir, c) in run_dirs.iter().zip(&configs) {
        let t = round.or(c.attack.round).unwrap_or(c.federation.rounds);
        let path = dir.join(transcript::file_name(t));
        if !path.exists() {
            return Err(CliError::Missing(path));
        }
        let transcript = transcript::read(&path, &c.layout()?)
            .map_err(|source| CliError::Transcript { path, source })?;
        let acc = read_metrics(dir)?
            .iter()
            .find(|m| m.round == t)
            .map(|m| m.test_acc)
            .ok_or_else(|| CliError::Missing(dir.join(METRICS_FILE)))?;
        transcripts.push(transcript);
        accuracies.push(acc);
    }
    let runs: Vec<AttackedRun<'_>> = configs
        .iter()
        .zip(&transcripts)
        .zip(&accuracies)
        .map(|((c, t), &acc)| AttackedRun {
            label: c.label(),
            transcript: t,
            model_accuracy: acc,
            codec: Some((c.federation.r, c.federation.k)),
        })
        .collect();
    let (table, reports) = attack::evaluate_attacks(
        &runs,
        &partition,
        base.attack.targets_per_client,
        base.attack.pairing_budget,
        base.attack.known_stats,
        &mut rng::derive(base.run.seed, &[rng::ATTACK]),
    )?;
    let dest = out_dir.unwrap_or(first_dir);
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let path = dest.join(ATTACK_CSV);
    fs::write(&path, table.to_csv()).map_err(io_err(&path))?;
    let path = dest.join(ATTACK_TEXT);
    fs::write(&path, table.to_text()).map_err(io_err(&path))?;
    out.write_all(table.to_text().as_bytes())?;
    for (run, report) in runs.iter().zip(&reports) {
        if !report.note.is_empty() {
            writeln!(out, "{}: {}", run.label, report.note)?;
        }
    }
    Ok((table, reports))
}

/// Bits one client sends per round. `params` overrides the model size.
pub fn cmd_budget(
    cfg: &ExperimentConfig,
    params: Option<u64>,
    out: &mut dyn Write,
) -> Result<BitBudget, CliError> {
    cfg.validate()?;
    let lambda = match params {
        Some(p) => p,
        None => cfg.layout()?.len() as u64,
    };
    let id_bits = u64::from(lambda.max(2).next_power_of_two().trailing_zeros());
    let budget = codec::bit_budget(lambda, cfg.federation.r as u64, id_bits, 64)?;
    writeln!(out, "parameters        {lambda}")?;
    writeln!(out, "code length r     {}", cfg.federation.r)?;
    writeln!(out, "unary bits        {}", budget.unary_bits)?;
    writeln!(out, "residual bits     {}", budget.quant_payload_bits)?;
    writeln!(
        out,
        "metadata bits     {} ({id_bits}-bit parameter ids)",
        budget.metadata_bits
    )?;
    writeln!(out, "total bits        {}", budget.total())?;
    Ok(budget)
}

/// Merge per-round losses of several runs into one wide CSV.
///
/// Columns: `round`, then `<label>_train_loss,<label>_test_loss` per run.
/// Runs that share a label get the directory name appended.
pub fn cmd_loss_curve(run_dirs: &[PathBuf], out: &mut dyn Write) -> Result<String, CliError> {
    let mut series = Vec::new();
    for dir in run_dirs {
        let label = load_run_config(dir)?.label();
        series.push((label, read_metrics(dir)?, dir));
    }
    let labels: Vec<String> = series
        .iter()
        .map(|(label, _, dir)| {
            if series.iter().filter(|(l, _, _)| l == label).count() > 1 {
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                format!("{label}_{name}")
            } else {
                label.clone()
            }
        })
        .collect();
    let mut rows: BTreeMap<usize, Vec<Option<(f64, f64)>>> = BTreeMap::new();
    for (i, (_, metrics, _)) in series.iter().enumerate() {
        for m in metrics {
            rows.entry(m.round)
                .or_insert_with(|| vec![None; series.len()])[i] = Some((m.train_loss, m.test_loss));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["round".to_string()];
    for l in &labels {
        header.push(format!("{l}_train_loss"));
        header.push(format!("{l}_test_loss"));
    }
    w.write_record(&header)
        .map_err(|e| CliError::Mismatch(e.to_string()))?;
    for (round, cells) in rows {
        let mut record = vec![round.to_string()];
        for cell in cells {
            match cell {
                Some((train, test)) => {
                    record.push(train.to_string());
                    record.push(test.to_string());
                }
                None => record.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&record)
            .map_err(|e| CliError::Mismatch(e.to_string()))?;
    }
    let text = String::from_utf8(
        w.into_inner()
            .map_err(|e| CliError::Output(e.into_error()))?,
    )
    .expect("csv output is UTF-8");
    out.write_all(text.as_bytes())?;
    Ok(text)
}

/// Per-client sizes and class histograms as CSV.
pub fn cmd_partition_stats(
    cfg: &ExperimentConfig,
    out: &mut dyn Write,
) -> Result<Vec<ClientDataset>, CliError> {
    cfg.validate()?;
    let (train, _) = load_data(cfg)?;
    let parts = partition(cfg, &train)?;
    let classes = train.classes();
    write!(out, "client,size")?;
    for c in 0..classes {
        write!(out, ",class_{c}")?;
    }
    writeln!(out)?;
    for (i, p) in parts.iter().enumerate() {
        write!(out, "{i},{}", p.len())?;
        for n in &p.class_histogram {
            write!(out, ",{n}")?;
        }
        writeln!(out)?;
    }
    Ok(parts)
}
