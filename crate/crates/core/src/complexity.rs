//! Multiply-count cost model of attention blocks, parameter accounting and
//! receptive-field reports.
//!
//! Two closed forms are kept side by side. The published per-head accounting
//! uses the full width `d` in the `L²` terms (`4d²L + 2HdL²` for a canonical
//! block). Heads in this crate attend over `d/H` channels each, so what the
//! tape actually counts is `4Ld² + 2L²d`. Both halve under CSP.

use crate::attention::{AttentionBlock, AttentionKind, AttentionSpec};
use crate::connectors::{conv_only_span, receptive_span, ConnectorConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{SeqTensor, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Cost of one block as `l2_coefficient·L² + l1_coefficient·L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub variant: String,
    #[serde(rename = "L")]
    pub l: u64,
    pub d: u64,
    #[serde(rename = "H")]
    pub h: u64,
    pub analytic_mults: u64,
    pub empirical_mults: Option<u64>,
    pub param_count: u64,
    pub l2_coefficient: u64,
    pub l1_coefficient: u64,
}

impl ComplexityReport {
    fn closed_form(variant: &str, l: u64, d: u64, h: u64, l2: u64, l1: u64, params: u64) -> Self {
        ComplexityReport {
            variant: variant.to_string(),
            l,
            d,
            h,
            analytic_mults: l2 * l * l + l1 * l,
            empirical_mults: None,
            param_count: params,
            l2_coefficient: l2,
            l1_coefficient: l1,
        }
    }
}

fn check_dims(d: u64, h: u64, csp: bool) -> Result<()> {
    let unit = if csp { 2 * h } else { h };
    if h == 0 || d == 0 || d % unit != 0 {
        return Err(Error::Config(format!(
            "d = {d} must be a positive multiple of {unit} (H = {h}{})",
            if csp { ", CSP" } else { "" }
        )));
    }
    Ok(())
}

/// `4d²L + 2HdL²`.
pub fn analytic_canonical(l: u64, d: u64, h: u64) -> Result<ComplexityReport> {
    check_dims(d, h, false)?;
    Ok(ComplexityReport::closed_form(
        "canonical",
        l,
        d,
        h,
        2 * h * d,
        4 * d * d,
        4 * d * d,
    ))
}

/// `1.25d²L + HdL²`.
pub fn analytic_csp(l: u64, d: u64, h: u64) -> Result<ComplexityReport> {
    check_dims(d, h, true)?;
    Ok(ComplexityReport::closed_form(
        "csp",
        l,
        d,
        h,
        h * d,
        5 * d * d / 4,
        5 * (d / 2) * (d / 2),
    ))
}

/// `4Ld² + 2L²d`: what a canonical block with `d/H`-wide heads executes.
pub fn implementation_canonical(l: u64, d: u64, h: u64) -> Result<ComplexityReport> {
    check_dims(d, h, false)?;
    Ok(ComplexityReport::closed_form(
        "canonical",
        l,
        d,
        h,
        2 * d,
        4 * d * d,
        4 * d * d,
    ))
}

/// `1.25Ld² + L²d`: the 1×1 convolution on one half plus a canonical block
/// on the other.
pub fn implementation_csp(l: u64, d: u64, h: u64) -> Result<ComplexityReport> {
    check_dims(d, h, true)?;
    Ok(ComplexityReport::closed_form(
        "csp",
        l,
        d,
        h,
        d,
        5 * d * d / 4,
        5 * (d / 2) * (d / 2),
    ))
}

/// Weight scalars of one attention block without biases: `4d²` canonical,
/// `4(d/2)² + (d/2)²` with CSP.
pub fn memory_accounting(spec: &AttentionSpec) -> Result<u64> {
    spec.validate()?;
    let (d1, d2) = spec.split_dims();
    Ok((4 * d2 * d2 + d1 * d1) as u64)
}

/// Counts the multiplies executed by one self-attention forward of `block`
/// over `x`.
pub fn empirical_count(
    block: &AttentionBlock,
    store: &ParamStore,
    x: &SeqTensor,
    seed: u64,
) -> Result<u64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    tape.set_counting(true);
    block.forward_self(&mut tape, &bound, xv, seed)?;
    Ok(tape.take_mults()?)
}

/// Builds a fresh block of `spec` (no biases) and reports its analytic cost,
/// implementation-true cost and counted multiplies on a random `[1 × L × d]`
/// input.
pub fn measure_block(spec: &AttentionSpec, l: usize, seed: u64) -> Result<BlockMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "block", spec.clone(), false, &mut rng)?;
    let d = spec.model_dim;
    let data = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = SeqTensor::new(crate::tensor::Shape::new(1, l, d), data)?;
    let counted = empirical_count(&block, &store, &x, seed)?;
    let (lu, du, hu) = (l as u64, d as u64, spec.heads as u64);
    let (mut analytic, mut implementation) = if spec.csp {
        (analytic_csp(lu, du, hu)?, implementation_csp(lu, du, hu)?)
    } else {
        (analytic_canonical(lu, du, hu)?, implementation_canonical(lu, du, hu)?)
    };
    let params = block.param_count(&store) as u64;
    for r in [&mut analytic, &mut implementation] {
        r.variant = label(spec);
        r.empirical_mults = Some(counted);
        r.param_count = params;
    }
    Ok(BlockMeasurement {
        analytic,
        implementation,
    })
}

fn label(spec: &AttentionSpec) -> String {
    let base = match spec.inner {
        AttentionKind::Canonical => "canonical",
        AttentionKind::ProbSparse => "probsparse",
        AttentionKind::LogSparse => "logsparse",
    };
    if spec.csp {
        format!("csp-{base}")
    } else {
        base.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMeasurement {
    pub analytic: ComplexityReport,
    pub implementation: ComplexityReport,
}

/// One row of an L sweep comparing canonical and CSP blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "L")]
    pub l: u64,
    pub d: u64,
    #[serde(rename = "H")]
    pub h: u64,
    pub analytic_canonical: u64,
    pub analytic_csp: u64,
    pub analytic_ratio: f64,
    pub implementation_canonical: u64,
    pub implementation_csp: u64,
    pub empirical_canonical: u64,
    pub empirical_csp: u64,
    pub empirical_ratio: f64,
    pub params_canonical: u64,
    pub params_csp: u64,
}

/// Analytic and counted costs of canonical vs CSP blocks for each `L`.
pub fn sweep(lengths: &[usize], d: usize, h: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if lengths.is_empty() {
        return Err(Error::Config("empty length sweep".into()));
    }
    let canon = AttentionSpec::new(AttentionKind::Canonical, d, h);
    let csp = canon.clone().with_csp(true);
    lengths
        .iter()
        .map(|&l| {
            let a = measure_block(&canon, l, seed)?;
            let b = measure_block(&csp, l, seed)?;
            let e_a = a.analytic.empirical_mults.unwrap_or(0);
            let e_b = b.analytic.empirical_mults.unwrap_or(0);
            Ok(SweepRow {
                l: l as u64,
                d: d as u64,
                h: h as u64,
                analytic_canonical: a.analytic.analytic_mults,
                analytic_csp: b.analytic.analytic_mults,
                analytic_ratio: ratio(b.analytic.analytic_mults, a.analytic.analytic_mults),
                implementation_canonical: a.implementation.analytic_mults,
                implementation_csp: b.implementation.analytic_mults,
                empirical_canonical: e_a,
                empirical_csp: e_b,
                empirical_ratio: ratio(e_b, e_a),
                params_canonical: a.analytic.param_count,
                params_csp: b.analytic.param_count,
            })
        })
        .collect()
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Constant,
    Linear,
    Exponential,
}

/// Classifies a sequence by its successive differences: equal differences
/// are linear, differences that keep a common ratio above one are
/// exponential.
pub fn classify_growth(values: &[usize]) -> Growth {
    let diffs: Vec<i64> = values
        .windows(2)
        .map(|w| w[1] as i64 - w[0] as i64)
        .collect();
    if diffs.iter().all(|&d| d == 0) {
        return Growth::Constant;
    }
    if diffs.windows(2).all(|w| w[0] == w[1]) {
        return Growth::Linear;
    }
    let geometric = diffs.windows(2).all(|w| w[0] > 0 && w[1] == 2 * w[0])
        || diffs
            .windows(3)
            .all(|w| w[0] > 0 && w[1] * w[1] == w[0] * w[2] && w[1] > w[0]);
    if geometric {
        Growth::Exponential
    } else {
        Growth::Linear
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveReport {
    /// Entry `j` is the span after `j` distilling stages.
    pub dilated: Vec<usize>,
    pub canonical: Vec<usize>,
    /// Convolution-only spans, which expose the tap growth under each mode.
    pub dilated_conv_only: Vec<usize>,
    pub canonical_conv_only: Vec<usize>,
    pub dilated_growth: Growth,
    pub canonical_growth: Growth,
}

/// Spans for `0..enc_blocks` connector stages under both connector modes.
pub fn receptive_report(enc_blocks: usize, kernel: usize) -> Result<ReceptiveReport> {
    if enc_blocks == 0 {
        return Err(Error::Config("enc_blocks must be >= 1".into()));
    }
    let dil = ConnectorConfig {
        kernel,
        ..ConnectorConfig::dilated()
    };
    let can = ConnectorConfig {
        kernel,
        ..ConnectorConfig::canonical()
    };
    let spans = |cfg: ConnectorConfig, f: fn(&[ConnectorConfig]) -> usize| -> Vec<usize> {
        (0..enc_blocks).map(|n| f(&vec![cfg; n])).collect()
    };
    let dilated_conv_only = spans(dil, conv_only_span);
    let canonical_conv_only = spans(can, conv_only_span);
    Ok(ReceptiveReport {
        dilated: spans(dil, receptive_span),
        canonical: spans(can, receptive_span),
        dilated_growth: classify_growth(&dilated_conv_only),
        canonical_growth: classify_growth(&canonical_conv_only),
        dilated_conv_only,
        canonical_conv_only,
    })
}
