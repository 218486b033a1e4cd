mod analyze;
mod check;
mod error;
mod run;
mod spec;

use clap::{Args, Parser, Subcommand};
use error::{CliError, CliResult, ExitStatus};
use spec::{apply_data_flag, default_out_dir, load_config, ExperimentSpec, ModelPatch, RawConfig, Source, TrainPatch};
use std::path::PathBuf;
use tcct_core::data::{synth_series, write_csv, SynthKind};

#[derive(Parser)]
#[command(name = "tcct", version, about = "Train, evaluate and analyze convolutional-transformer forecasters")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one variant over every prediction length and repeat.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Train repeats on a thread pool; outputs are identical to a serial run.
        #[arg(long)]
        parallel_repeats: bool,
        /// Also save one checkpoint per run under `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: bool,
        /// Invariant suites to run after training (`all` or a comma list); any
        /// failure makes the exit status non-zero.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<String>,
    },
    /// Cost sweep of canonical vs CSP attention plus connector receptive fields.
    Analyze {
        /// Comma-separated sequence lengths; defaults to 48, 96, ..., 432.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        enc_blocks: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = spec::OUT_DIR_ENV)]
        out: Option<PathBuf>,
        /// Also draw the ratio curve as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Write a synthetic series as CSV.
    Synth {
        #[arg(long, default_value = "sine_mix")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 3)]
        n_series: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant suites.
    Check {
        /// Restrict to these suites (complexity, receptive, causality, gradients, metrics).
        #[arg(long)]
        only: Vec<String>,
    },
}

#[derive(Args, Default)]
struct ExperimentArgs {
    /// TOML experiment file, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Informer, Informer+, TCCT_I .. TCCT_VI.
    #[arg(long)]
    variant: Option<String>,
    /// `synth:sine_mix`, `synth:ar_noise`, or a CSV path.
    #[arg(long)]
    data: Option<String>,
    /// Target column of a CSV (default: OT, else the last column).
    #[arg(long)]
    target: Option<String>,
    /// uni or multi.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    input_len: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pred_len: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = spec::OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// ett, ecl, months:a,b,c or three fractions.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Feed calendar features to the embeddings.
    #[arg(long)]
    time_marks: bool,
}

impl ExperimentArgs {
    fn resolve(self) -> CliResult<ExperimentSpec> {
        let mut raw = match &self.config {
            None => RawConfig::default(),
            Some(p) => match load_config(p)? {
                Source::Raw(r) => r,
                Source::Spec(s) => RawConfig::from_spec(&s),
            },
        };
        macro_rules! over {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = Some(v);
                }
            };
        }
        over!(raw.variant, self.variant);
        over!(raw.mode, self.mode);
        over!(raw.input_len, self.input_len);
        over!(raw.pred_len, self.pred_len);
        over!(raw.repeats, self.repeats);
        over!(raw.seed, self.seed);
        over!(raw.out, self.out);
        over!(raw.split, self.split);
        if let Some(d) = &self.data {
            apply_data_flag(&mut raw.data, d)?;
        }
        over!(raw.data.target, self.target);
        let t = raw.train.get_or_insert_with(TrainPatch::default);
        over!(t.epochs, self.epochs);
        over!(t.batch, self.batch);
        over!(t.lr0, self.lr0);
        over!(t.patience, self.patience);
        let m = raw.model.get_or_insert_with(ModelPatch::default);
        over!(m.d_model, self.d_model);
        over!(m.heads, self.heads);
        if self.time_marks {
            m.time_marks = Some(true);
        }
        raw.resolve(default_out_dir())
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { exp, parallel_repeats, checkpoints, checks } => {
            let spec = exp.resolve()?;
            let files = run::run(&spec, &run::RunOptions { parallel_repeats, checkpoints })?;
            for f in files {
                println!("{}", spec.out.join(f).display());
            }
            if !checks.is_empty() {
                let only: Vec<String> = checks.into_iter().filter(|c| c != "all").collect();
                check::check(&only)?;
            }
        }
        Command::Analyze { lengths, d_model, heads, enc_blocks, kernel, seed, out, svg } => {
            let args = analyze::AnalyzeArgs {
                lengths: match lengths {
                    Some(l) => analyze::parse_lengths(&l)?,
                    None => analyze::default_lengths(),
                },
                d_model,
                heads,
                enc_blocks,
                kernel,
                seed,
                out: out.unwrap_or_else(default_out_dir),
                svg,
            };
            for f in analyze::analyze(&args)? {
                println!("{}", f.display());
            }
        }
        Command::Synth { kind, length, n_series, seed, noise, out } => {
            let kind: SynthKind = kind.parse().map_err(|e: tcct_core::Error| CliError::Config(e.to_string()))?;
            let frame = synth_series(kind, length, n_series, seed, noise)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            write_csv(&frame, &out)?;
            println!("{}", out.display());
        }
        Command::Check { only } => check::check(&only)?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let status = match dispatch(cli.command) {
        Ok(()) => ExitStatus::Ok,
        Err(e) => {
            eprintln!("error: {e}");
            e.status()
        }
    };
    std::process::exit(status as i32);
}
