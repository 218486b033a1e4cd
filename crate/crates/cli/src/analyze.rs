use crate::error::{CliError, CliResult};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use tcct_core::complexity::{receptive_report, sweep, ReceptiveReport, SweepRow};

pub fn default_lengths() -> Vec<usize> {
    (48..=432).step_by(48).collect()
}

/// `"48,96"`; blank entries are skipped, so `""` is an empty sweep.
pub fn parse_lengths(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| CliError::Config(format!("bad length `{p}`"))))
        .collect()
}

pub struct AnalyzeArgs {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub kernel: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub svg: bool,
}

#[derive(Debug, Serialize)]
struct SweepFile<'a> {
    rows: &'a [SweepRow],
    receptive: &'a ReceptiveReport,
}

const COLUMNS: [&str; 14] = [
    "L",
    "d",
    "H",
    "analytic_canonical",
    "analytic_csp",
    "analytic_ratio",
    "implementation_canonical",
    "implementation_csp",
    "empirical_canonical",
    "empirical_csp",
    "empirical_ratio",
    "params_canonical",
    "params_csp",
    "params_ratio",
];

fn sweep_csv(rows: &[SweepRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.l.to_string(),
            r.d.to_string(),
            r.h.to_string(),
            r.analytic_canonical.to_string(),
            r.analytic_csp.to_string(),
            format!("{}", r.analytic_ratio),
            r.implementation_canonical.to_string(),
            r.implementation_csp.to_string(),
            r.empirical_canonical.to_string(),
            r.empirical_csp.to_string(),
            format!("{}", r.empirical_ratio),
            r.params_canonical.to_string(),
            r.params_csp.to_string(),
            format!("{}", r.params_csp as f64 / r.params_canonical as f64),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

/// Cost ratio (CSP over canonical) against L, analytic and counted.
pub fn ratio_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let lmax = rows.iter().map(|r| r.l).max().unwrap_or(1).max(1) as f64;
    let x = |l: u64| pad + (w - 2.0 * pad) * l as f64 / lmax;
    // ratios live in (0, 1)
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{b} H{r}" stroke="black" fill="none"/>"#,
        b = h - pad,
        r = w - pad
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end">{t}</text><line x1="{pad}" x2="{}" y1="{yy}" y2="{yy}" stroke="#ddd"/>"##,
            pad - 6.0,
            y(t) + 4.0,
            w - pad,
            yy = y(t)
        );
    }
    for r in rows {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(r.l), h - pad + 16.0, r.l);
    }
    let series: [(&str, &str, fn(&SweepRow) -> f64); 2] = [
        ("analytic", "#1f77b4", |r| r.analytic_ratio),
        ("counted", "#d62728", |r| r.empirical_ratio),
    ];
    for (i, (name, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", x(r.l), y(f(r)))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, pts.join(" "));
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, w - pad - 80.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">L</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {0})" text-anchor="middle">CSP / canonical</text>"#, h / 2.0);
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult<Vec<PathBuf>> {
    if args.lengths.is_empty() {
        return Err(CliError::Config("the length sweep is empty".into()));
    }
    let rows = sweep(&args.lengths, args.d_model, args.heads, args.seed)?;
    let receptive = receptive_report(args.enc_blocks, args.kernel)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut written = Vec::new();
    let csv_path = args.out.join("complexity_sweep.csv");
    write(&csv_path, &sweep_csv(&rows)?)?;
    written.push(csv_path);
    let json_path = args.out.join("complexity_sweep.json");
    let file = SweepFile { rows: &rows, receptive: &receptive };
    write(&json_path, &serde_json::to_vec_pretty(&file)?)?;
    written.push(json_path);
    if args.svg {
        let p = args.out.join("complexity_ratio.svg");
        write(&p, ratio_svg(&rows).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
