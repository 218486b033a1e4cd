use crate::error::{CliError, CliResult};
use crate::spec::{DataSource, ExperimentSpec, Split};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use tcct_core::attention::AttentionSpec;
use tcct_core::complexity::{measure_block, BlockMeasurement};
use tcct_core::data::{
    load_csv, make_windows, split_by_months, split_by_time, synth_series, zscore, SeriesFrame,
    WindowSpec, Windows,
};
use tcct_core::model::{save_checkpoint, Model};
use tcct_core::train::{evaluate, naive_baseline, repeat_stats, train, EpochRecord, Metrics, RepeatStats};

pub const METRIC_HEADER: [&str; 10] = [
    "variant", "dataset", "mode", "pred_len", "input_len", "run_seed", "mse", "mae", "msd", "cv_percent",
];

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub pred_len: usize,
    pub run_seed: u64,
    pub test: Metrics,
    pub naive: Metrics,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub toolkit: &'static str,
    pub version: &'static str,
    pub spec_sha256: String,
    pub spec: &'a ExperimentSpec,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub pred_len: usize,
    pub mse: RepeatStats,
    pub mae_mean: f64,
}

#[derive(Debug, Serialize)]
struct ComplexityFile<'a> {
    variant: &'a str,
    spec_sha256: &'a str,
    attention: String,
    /// Closed forms next to the multiplies counted on one forward pass.
    measurement: BlockMeasurement,
    ratios: Ratios,
}

#[derive(Debug, Serialize)]
struct Ratios {
    l2_vs_canonical: f64,
    l1_vs_canonical: f64,
    params_vs_canonical: f64,
}

pub struct Splits {
    pub train: Windows,
    pub val: Windows,
    pub test: Windows,
}

pub fn load_frame(data: &DataSource) -> CliResult<SeriesFrame> {
    match data {
        DataSource::Csv { path, target } => {
            if !path.exists() {
                return Err(CliError::Data(format!("{} does not exist", path.display())));
            }
            Ok(load_csv(path, target.as_deref())?)
        }
        DataSource::Synth { kind, length, n_series, seed, noise } => {
            Ok(synth_series(*kind, *length, *n_series, *seed, *noise)?)
        }
    }
}

/// Normalized train/val/test windows for one prediction length.
pub fn prepare(spec: &ExperimentSpec, frame: &SeriesFrame, pred_len: usize) -> CliResult<Splits> {
    let frame = frame.select(spec.mode);
    let (tr, va, te) = match spec.split {
        Split::Fractions(f) => split_by_time(&frame, f)?,
        Split::Months(m) => split_by_months(&frame, m)?,
    };
    let (tr, state) = zscore(&tr, None)?;
    let (va, _) = zscore(&va, Some(&state))?;
    let (te, _) = zscore(&te, Some(&state))?;
    let mut ws = WindowSpec::new(spec.input_len, pred_len, spec.mode);
    ws.token_len = spec.model.token_len.unwrap_or(spec.input_len);
    let marks = spec.model.time_marks;
    let win = |f: &SeriesFrame, what: &str| {
        make_windows(f, ws, marks).map_err(|e| CliError::Data(format!("{what} segment: {e}")))
    };
    Ok(Splits {
        train: win(&tr, "train")?,
        val: win(&va, "validation")?,
        test: win(&te, "test")?,
    })
}

pub fn run_one(spec: &ExperimentSpec, splits: &Splits, pred_len: usize, run_seed: u64) -> CliResult<(RunRecord, Model)> {
    let n = splits.train.n_series();
    let mut model = Model::new(spec.model_config(pred_len, n, run_seed))?;
    let outcome = train(&mut model, &splits.train, &splits.val, &spec.train_config(run_seed))?;
    let test = evaluate(&model, &splits.test, spec.train.batch)?;
    log::info!("{} T={pred_len} seed {run_seed}: test mse {:.6}", spec.variant, test.mse);
    Ok((
        RunRecord {
            pred_len,
            run_seed,
            test,
            naive: naive_baseline(&splits.test)?,
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            history: outcome.history,
        },
        model,
    ))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// RFC-4180 metric table: one row per run, then an aggregate row.
pub fn metric_csv(spec: &ExperimentSpec, pred_len: usize, runs: &[RunRecord], agg: &Aggregate) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(METRIC_HEADER)?;
    let (variant, dataset, mode) = (spec.variant.to_string(), spec.data.label(), spec.mode.to_string());
    let fixed = [variant, dataset, mode, pred_len.to_string(), spec.input_len.to_string()];
    for r in runs {
        let mut row = fixed.to_vec();
        row.extend([r.run_seed.to_string(), num(r.test.mse), num(r.test.mae), String::new(), String::new()]);
        w.write_record(&row)?;
    }
    let mut row = fixed.to_vec();
    row.extend([
        "aggregate".to_string(),
        num(agg.mse.mean),
        num(agg.mae_mean),
        num(agg.mse.msd),
        agg.mse.cv_percent.map(num).unwrap_or_default(),
    ]);
    w.write_record(&row)?;
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn write_file(out: &Path, name: &str, bytes: &[u8], files: &mut Vec<FileEntry>) -> CliResult<()> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    files.push(FileEntry {
        path: name.to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    });
    Ok(())
}

pub fn metric_file_name(spec: &ExperimentSpec, pred_len: usize) -> String {
    format!("metrics_{}_{}_{}_in{}_T{pred_len}.csv", spec.variant, spec.data.label(), spec.mode, spec.input_len)
}

fn complexity_file(spec: &ExperimentSpec, hash: &str) -> CliResult<Vec<u8>> {
    let flags = spec.variant.flags();
    let attn = AttentionSpec::new(flags.inner, spec.model.d_model, spec.model.heads)
        .with_csp(flags.csp)
        .with_sampling_factor(spec.model.sampling_factor);
    let m = measure_block(&attn, spec.input_len, spec.seed)?;
    let canonical = AttentionSpec::new(flags.inner, spec.model.d_model, spec.model.heads);
    let c = measure_block(&canonical, spec.input_len, spec.seed)?;
    let a = &m.analytic;
    let file = ComplexityFile {
        variant: spec.variant.name(),
        spec_sha256: hash,
        attention: a.variant.clone(),
        ratios: Ratios {
            l2_vs_canonical: a.l2_coefficient as f64 / c.analytic.l2_coefficient as f64,
            l1_vs_canonical: a.l1_coefficient as f64 / c.analytic.l1_coefficient as f64,
            params_vs_canonical: a.param_count as f64 / c.analytic.param_count as f64,
        },
        measurement: m,
    };
    Ok(serde_json::to_vec_pretty(&file)?)
}

pub struct RunOptions {
    pub parallel_repeats: bool,
    pub checkpoints: bool,
}

/// Trains every (pred_len, seed) pair and writes the report files; returns
/// the output paths relative to `spec.out`.
pub fn run(spec: &ExperimentSpec, opts: &RunOptions) -> CliResult<Vec<PathBuf>> {
    spec.validate()?;
    let hash = spec.hash();
    let frame = load_frame(&spec.data)?;
    let out = spec.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut files = Vec::new();
    let mut all_runs = Vec::new();
    let mut aggregates = Vec::new();
    for &t in &spec.pred_len {
        let splits = prepare(spec, &frame, t)?;
        let seeds = spec.run_seeds();
        let work = |&s: &u64| run_one(spec, &splits, t, s);
        // rayon's collect keeps seed order, so parallel output is identical
        let results: Vec<CliResult<(RunRecord, Model)>> = if opts.parallel_repeats {
            seeds.par_iter().map(work).collect()
        } else {
            seeds.iter().map(work).collect()
        };
        let mut runs = Vec::with_capacity(results.len());
        for r in results {
            let (record, model) = r?;
            if opts.checkpoints {
                let name = format!("checkpoints/{}_T{t}_seed{}.ckpt", spec.variant, record.run_seed);
                let path = out.join(&name);
                std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| CliError::io(&out, e))?;
                save_checkpoint(&path, &model, serde_json::to_value(&record.history)?)?;
                let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
                files.push(FileEntry {
                    path: name,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                });
            }
            runs.push(record);
        }
        let mses: Vec<f64> = runs.iter().map(|r| r.test.mse).collect();
        let agg = Aggregate {
            pred_len: t,
            mse: repeat_stats(&mses)?,
            mae_mean: runs.iter().map(|r| r.test.mae).sum::<f64>() / runs.len() as f64,
        };
        let bytes = metric_csv(spec, t, &runs, &agg)?;
        write_file(&out, &metric_file_name(spec, t), &bytes, &mut files)?;
        aggregates.push(agg);
        all_runs.extend(runs);
    }
    let cx = complexity_file(spec, &hash)?;
    write_file(&out, &format!("complexity_{}.json", spec.variant), &cx, &mut files)?;

    let manifest = Manifest {
        toolkit: "tcct",
        version: env!("CARGO_PKG_VERSION"),
        spec_sha256: hash,
        spec,
        runs: all_runs,
        aggregates,
        files: files.clone(),
    };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| CliError::io(&path, e))?;
    let mut written: Vec<PathBuf> = files.iter().map(|f| PathBuf::from(&f.path)).collect();
    written.push(PathBuf::from("manifest.json"));
    Ok(written)
}
