use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use v1t_core::attention_analysis::{
    center_of_mass, com_csv, emit_heatmap, mean_map, pupil_attention_correlation, rollout_trials,
};
use v1t_core::config::{CorrelationMode, ModelMode, RunConfig};
use v1t_core::dataio::{load_dataset, prepare, write_synthetic, Dataset, PreparedData, Split, SynthConfig};
use v1t_core::evaluation::{evaluate, Predictor};
use v1t_core::gradcheck_suite::{format_table, run_component_checks};
use v1t_core::model::{Head, Model, MouseSpec};
use v1t_core::readout::export_readout_positions;
use v1t_core::training::{fit, train_ensemble, Ensemble, FitOptions};
use v1t_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "v1t", version, about = "Train and analyse vision-transformer models of mouse V1 responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// `key=value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// v1t, vit or linear.
    #[arg(long)]
    mode: Option<String>,
    /// Center-crop factor applied before resizing.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Generator setting such as `n_neurons=50` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model (or an ensemble) and write checkpoints and loss curves.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train N models with consecutive seeds and keep the best.
        #[arg(long, value_name = "N")]
        ensemble: Option<usize>,
        /// Members kept from an ensemble (default: half, rounded up).
        #[arg(long, value_name = "K")]
        keep: Option<usize>,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Single-trial correlation report, including the pupil-dilation split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// per_neuron or pooled.
        #[arg(long)]
        correlation: Option<String>,
    },
    /// Attention rollout heatmaps, center-of-mass series and their pupil correlation.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Multiply head-averaged attention without the identity term.
        #[arg(long)]
        no_residual: bool,
        /// Heatmaps written per mouse.
        #[arg(long, default_value_t = 8)]
        heatmaps: usize,
    },
    /// Finite-difference check of every trainable component.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learned readout positions against anatomical coordinates.
    ExportPositions {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    GradcheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            e => Failure::Core(e),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => EXIT_USAGE,
        Failure::GradcheckFailed => EXIT_NUMERIC,
        Failure::Core(e) => match e {
            Error::NonFinite(_) | Error::Domain(_) | Error::Diverged { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        },
    }
}

fn resolve(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        cfg.apply_override(kv)?;
    }
    if let Some(m) = &args.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = args.alpha {
        cfg.preprocess.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| Failure::Core(io_error(out, e)))?;
    cfg.save(&out.join("resolved_config.txt"))?;
    eprintln!("resolved config:\n{}", indent(&cfg.to_text()));
    Ok(())
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::Core(io_error(path, e)))
}

fn load_data(path: &Path, cfg: &RunConfig) -> CliResult<(Dataset, PreparedData)> {
    let ds = load_dataset(path)?;
    let data = prepare(&ds, &cfg.preprocess)?;
    Ok((ds, data))
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Failure::Usage(format!("unknown split '{s}' (train, val or test)"))),
    }
}

/// A checkpoint directory holds either one model or an ensemble.
enum Loaded {
    Single(Box<Model>),
    Ensemble(Ensemble),
}

impl Loaded {
    fn open(dir: &Path) -> CliResult<Loaded> {
        if Ensemble::is_ensemble_dir(dir) {
            Ok(Loaded::Ensemble(Ensemble::load(dir)?))
        } else {
            Ok(Loaded::Single(Box::new(Model::load(dir)?.0)))
        }
    }

    fn first(&self) -> &Model {
        match self {
            Loaded::Single(m) => m,
            Loaded::Ensemble(e) => &e.members[0],
        }
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Loaded::Single(m) => m.as_ref(),
            Loaded::Ensemble(e) => e,
        }
    }
}

fn cmd_synth(out: &Path, seed: Option<u64>, set: &[String]) -> CliResult<()> {
    let mut cfg = SynthConfig::default();
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("expected key=value, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = write_synthetic(&cfg, out)?;
    eprintln!(
        "wrote {} mice × {} neurons, {} trials each, to {}",
        ds.mice.len(),
        cfg.n_neurons,
        cfg.n_trials(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_dir: &Path,
    out: &Path,
    args: &ConfigArgs,
    ensemble: Option<usize>,
    keep: Option<usize>,
    max_epochs: Option<usize>,
    quiet: bool,
) -> CliResult<()> {
    let cfg = resolve(args)?;
    echo_config(&cfg, out)?;
    let (_, data) = load_data(data_dir, &cfg)?;
    let opts = FitOptions {
        verbose: !quiet,
        checkpoint_dir: None,
        epoch_limit: max_epochs,
    };
    let ids: Vec<&str> = data.mice.iter().map(|m| m.record.id.as_str()).collect();
    match ensemble {
        None => {
            let specs = MouseSpec::from_prepared(&data);
            let mut model = Model::new(&cfg, (data.channels, data.height, data.width), &specs)?;
            let report = fit(&mut model, &data, &opts)?;
            model.save(&out.join("checkpoint"), report.best_epoch, report.best_val_loss)?;
            write(&out.join("curves.csv"), &report.curves_csv(&ids))?;
            eprintln!(
                "best epoch {} (validation loss {:.3}, correlation {:.4})",
                report.best_epoch, report.best_val_loss, report.best_val_corr
            );
        }
        Some(n) => {
            let k = keep.unwrap_or(n.div_ceil(2));
            let ens = train_ensemble(&cfg, &data, n, k, &opts)?;
            ens.save(&out.join("checkpoint"))?;
            eprintln!("kept {} of {n} models; validation correlations {:?}", k, ens.scores);
        }
    }
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data_dir: &Path, out: &Path, split: &str, corr: Option<&str>) -> CliResult<()> {
    let loaded = Loaded::open(ckpt)?;
    let mut cfg = loaded.first().cfg.clone();
    if let Some(c) = corr {
        cfg.correlation = c
            .parse::<CorrelationMode>()
            .map_err(|_| Failure::Usage(format!("unknown correlation mode '{c}'")))?;
    }
    echo_config(&cfg, out)?;
    let (_, data) = load_data(data_dir, &cfg)?;
    let report = evaluate(loaded.predictor(), &data, parse_split(split)?, cfg.correlation)?;
    let name = match &loaded {
        Loaded::Single(m) => m.cfg.mode.to_string(),
        Loaded::Ensemble(e) => format!("{} ×{}", e.members[0].cfg.mode, e.members.len()),
    };
    report.write(out, &name)?;
    print!("{}", report.table(&name));
    Ok(())
}

fn cmd_rollout(ckpt: &Path, data_dir: &Path, out: &Path, split: &str, no_residual: bool, heatmaps: usize) -> CliResult<()> {
    let loaded = Loaded::open(ckpt)?;
    let model = loaded.first();
    if model.cfg.mode == ModelMode::Linear {
        return Err(Failure::Usage("the linear baseline has no attention to roll out".into()));
    }
    echo_config(&model.cfg, out)?;
    let (_, data) = load_data(data_dir, &model.cfg)?;
    let split = parse_split(split)?;
    let mut summary = String::from("mouse_id,n,mean_com_row,mean_com_col,grid_rows,grid_cols,corr_x,p_x,corr_y,p_y\n");
    for pm in &data.mice {
        let rec = &pm.record;
        let idx = rec.indices(split);
        let maps = rollout_trials(model, &rec.id, rec, &idx, !no_residual)?;
        let coms: Vec<(f64, f64)> = maps.iter().map(center_of_mass).collect::<Result<_, _>>()?;
        let pupil: Vec<(f64, f64)> = idx
            .iter()
            .map(|&t| (rec.pupil_center.get(&[t, 0]), rec.pupil_center.get(&[t, 1])))
            .collect();
        write(&out.join(format!("com_{}.csv", rec.id)), &com_csv(&maps, &coms, &pupil))?;
        let dir = out.join(format!("heatmaps_{}", rec.id));
        for (m, &t) in maps.iter().zip(&idx).take(heatmaps) {
            let stim = rec.image(t).index_first(0);
            emit_heatmap(m, &stim, &dir, &format!("trial_{t:05}"))?;
        }
        let mean = mean_map(&maps)?;
        let (mr, mc) = center_of_mass(&mean)?;
        let corr = pupil_attention_correlation(&coms, &pupil)?;
        let axis = |a: &Option<v1t_core::attention_analysis::AxisCorrelation>| match a {
            Some(a) => format!("{},{}", a.corr, a.p_value),
            None => ",".into(),
        };
        summary.push_str(&format!(
            "{},{},{mr},{mc},{},{},{},{}\n",
            rec.id,
            corr.n,
            mean.rows,
            mean.cols,
            axis(&corr.x),
            axis(&corr.y)
        ));
        for d in &corr.diagnostics {
            eprintln!("mouse {}: {d}", rec.id);
        }
    }
    write(&out.join("rollout_summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<&Path>) -> CliResult<()> {
    let rows = run_component_checks(seed)?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::Core(io_error(dir, e)))?;
        write(&dir.join("gradcheck.txt"), &table)?;
    }
    if rows.iter().all(|r| r.passes()) {
        Ok(())
    } else {
        Err(Failure::GradcheckFailed)
    }
}

fn cmd_export_positions(ckpt: &Path, data_dir: &Path, out: &Path) -> CliResult<()> {
    let loaded = Loaded::open(ckpt)?;
    let model = loaded.first();
    echo_config(&model.cfg, out)?;
    let ds = load_dataset(data_dir)?;
    for head in &model.heads {
        let Head::Gaussian(readout) = &head.head else {
            return Err(Failure::Usage("the linear baseline has no readout positions".into()));
        };
        let rec = ds
            .mice
            .iter()
            .find(|m| m.id == head.id)
            .ok_or_else(|| Failure::Core(Error::MissingReadout(head.id.clone())))?;
        let path = out.join(format!("positions_{}.csv", head.id));
        export_readout_positions(readout, &model.params, &rec.coordinates, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { out, seed, set } => cmd_synth(&out, seed, &set),
        Command::Train {
            data,
            out,
            cfg,
            ensemble,
            keep,
            max_epochs,
            quiet,
        } => cmd_train(&data, &out, &cfg, ensemble, keep, max_epochs, quiet),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            split,
            correlation,
        } => cmd_evaluate(&checkpoint, &data, &out, &split, correlation.as_deref()),
        Command::Rollout {
            checkpoint,
            data,
            out,
            split,
            no_residual,
            heatmaps,
        } => cmd_rollout(&checkpoint, &data, &out, &split, no_residual, heatmaps),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out.as_deref()),
        Command::ExportPositions { checkpoint, data, out } => cmd_export_positions(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}\n(run `v1t --help` for usage)"),
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::GradcheckFailed => eprintln!("error: gradient check failed"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
