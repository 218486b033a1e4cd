//! Connectors between encoder attention blocks: causal (optionally dilated)
//! distilling stages that halve the sequence, and the passthrough pyramid
//! fusion that concatenates every scale along channels.

use crate::error::{Error, TensorError};
use crate::nn::{Bound, CausalConv, Linear, ParamStore};
use crate::tensor::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorMode {
    /// Causal convolution with dilation 1 at every stage.
    CanonicalConv,
    DilatedCausal,
}

/// How stage `i` (1-based) picks its dilation in dilated mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DilationSchedule {
    /// `2^(i-1)`: skips `2^(i-1) - 1` elements between taps.
    PowerOfTwo,
    /// `i`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub kernel: usize,
    pub mode: ConnectorMode,
    pub schedule: DilationSchedule,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            kernel: 3,
            mode: ConnectorMode::DilatedCausal,
            schedule: DilationSchedule::PowerOfTwo,
        }
    }
}

impl ConnectorConfig {
    pub fn canonical() -> Self {
        ConnectorConfig {
            mode: ConnectorMode::CanonicalConv,
            ..Self::default()
        }
    }

    pub fn dilated() -> Self {
        Self::default()
    }

    /// Dilation of 1-based stage `i`.
    pub fn dilation(&self, stage: usize) -> usize {
        let i = stage.max(1);
        match (self.mode, self.schedule) {
            (ConnectorMode::CanonicalConv, _) => 1,
            (ConnectorMode::DilatedCausal, DilationSchedule::PowerOfTwo) => 1 << (i - 1),
            (ConnectorMode::DilatedCausal, DilationSchedule::Linear) => i,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.kernel == 0 {
            return Err(Error::Config("connector kernel must be >= 1".into()));
        }
        Ok(())
    }
}

/// One distilling stage: causal conv → ELU → causal max-pool (kernel 3,
/// stride 2).
#[derive(Debug, Clone)]
pub struct DistillStage {
    pub conv: CausalConv,
    pub stage: usize,
}

impl DistillStage {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        stage: usize,
        config: &ConnectorConfig,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, Error> {
        config.validate()?;
        let conv = CausalConv::new(
            store,
            name,
            config.kernel,
            dim,
            dim,
            config.dilation(stage),
            bias,
            rng,
        );
        Ok(DistillStage { conv, stage })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        distill_stage(tape, bound, &self.conv, x)
    }
}

pub fn distill_stage(
    tape: &mut Tape,
    bound: &Bound,
    conv: &CausalConv,
    x: Var,
) -> Result<Var, TensorError> {
    if tape.shape(x).len % 2 != 0 {
        return Err(TensorError::dim(
            "distill_stage",
            format!("odd sequence length {}", tape.shape(x).len),
        ));
    }
    let y = conv.forward(tape, bound, x)?;
    let y = tape.elu(y)?;
    tape.maxpool_causal(y)
}

/// Number of original positions the last element of a stack of distilling
/// stages depends on, found by propagating index sets back through each
/// pool and convolution.
pub fn receptive_span(stages: &[ConnectorConfig]) -> usize {
    dependency_set(stages, true).len()
}

/// Same as [`receptive_span`] with the pooling removed; isolates how the
/// convolution taps alone grow with depth.
pub fn conv_only_span(stages: &[ConnectorConfig]) -> usize {
    dependency_set(stages, false).len()
}

fn dependency_set(stages: &[ConnectorConfig], pool: bool) -> BTreeSet<i64> {
    // Work on an unbounded past so the front edge never clips the count.
    let mut set = BTreeSet::from([0i64]);
    for (idx, cfg) in stages.iter().enumerate().rev() {
        let dil = cfg.dilation(idx + 1) as i64;
        if pool {
            set = set
                .iter()
                .flat_map(|&m| [2 * m - 1, 2 * m, 2 * m + 1])
                .collect();
        }
        set = set
            .iter()
            .flat_map(|&n| (0..cfg.kernel as i64).map(move |j| n - j * dil))
            .collect();
    }
    set
}

/// Ordered list of same-width feature maps whose lengths halve exactly.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    maps: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(tape: &Tape, maps: Vec<Var>) -> Result<Self, Error> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Pyramid("empty pyramid".into()))?;
        let s0 = tape.shape(*first);
        for (k, pair) in maps.windows(2).enumerate() {
            let (a, b) = (tape.shape(pair[0]), tape.shape(pair[1]));
            if b.dim != s0.dim || b.batch != s0.batch {
                return Err(Error::Pyramid(format!(
                    "map {} has shape {b}, expected batch {} and dim {}",
                    k + 2,
                    s0.batch,
                    s0.dim
                )));
            }
            if a.len != 2 * b.len {
                return Err(Error::Pyramid(format!(
                    "map {} length {} is not half of {}",
                    k + 2,
                    b.len,
                    a.len
                )));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn maps(&self) -> &[Var] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Splits map `k` (1-based) of an `n`-map pyramid into `2^(n-k)` chunks of
/// length `L / 2^(n-1)` and concatenates every chunk along channels: map 1
/// chunks in time order first, map `n` last.
pub fn passthrough_fuse(tape: &mut Tape, pyramid: &FeaturePyramid) -> Result<Var, TensorError> {
    let n = pyramid.len();
    let out_len = tape.shape(pyramid.maps[n - 1]).len;
    let mut chunks = Vec::with_capacity((1 << n) - 1);
    for (k, &map) in pyramid.maps.iter().enumerate() {
        let pieces = 1usize << (n - 1 - k);
        if pieces == 1 {
            chunks.push(map);
            continue;
        }
        for c in 0..pieces {
            chunks.push(tape.slice_len(map, c * out_len, out_len)?);
        }
    }
    if chunks.len() == 1 {
        return Ok(chunks[0]);
    }
    tape.concat_dim(&chunks)
}

/// Pointwise projection from the fused width back to the model width.
#[derive(Debug, Clone)]
pub struct Transition {
    pub proj: Linear,
}

impl Transition {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Transition {
            proj: Linear::new(store, name, d_in, d_out, bias, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        if tape.shape(x).dim != self.proj.d_in {
            return Err(TensorError::dim(
                "transition",
                format!("input dim {} but layer expects {}", tape.shape(x).dim, self.proj.d_in),
            ));
        }
        self.proj.forward(tape, bound, x)
    }
}
