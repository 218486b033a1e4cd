use super::ForwardCtx;
use crate::attention::{AttentionBlock, AttentionKind, AttentionSpec};
use crate::connectors::{passthrough_fuse, DistillStage, FeaturePyramid, Transition};
use crate::error::{Error, Result, TensorError};
use crate::model::ModelConfig;
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::{SeqTensor, Shape, Tape, Var};
use rand::Rng;

/// Fixed sinusoidal table: even columns `sin(pos / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(len: usize, dim: usize) -> SeqTensor {
    let mut pe = SeqTensor::zeros(Shape::new(1, len, dim));
    for pos in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * i / dim as f64);
            pe.set(0, pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Value projection plus optional positional and calendar terms.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub value: Linear,
    pub marks: Option<Linear>,
    pub positional: bool,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Embedding {
            value: Linear::new(store, &format!("{name}.value"), cfg.n_series, d, true, rng),
            marks: (cfg.time_marks > 0)
                .then(|| Linear::new(store, &format!("{name}.marks"), cfg.time_marks, d, false, rng)),
            positional: cfg.positional,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        marks: Option<Var>,
    ) -> Result<Var, TensorError> {
        let mut y = self.value.forward(tape, bound, x)?;
        if self.positional {
            let s = tape.shape(y);
            let pe = tape.constant(positional_encoding(s.len, s.dim));
            y = tape.add(y, pe)?;
        }
        match (&self.marks, marks) {
            (Some(layer), Some(m)) => {
                let t = layer.forward(tape, bound, m)?;
                tape.add(y, t)
            }
            (Some(_), None) => Err(TensorError::dim("embedding", "time marks expected")),
            _ => Ok(y),
        }
    }
}

/// `d → ff → d` with an ELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            up: Linear::new(store, &format!("{name}.up"), d, ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), ff, d, true, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        residual: bool,
    ) -> Result<Var, TensorError> {
        let h = self.norm.forward(tape, bound, x)?;
        let h = self.up.forward(tape, bound, h)?;
        let h = tape.elu(h)?;
        let h = self.down.forward(tape, bound, h)?;
        if residual {
            tape.add(x, h)
        } else {
            Ok(h)
        }
    }
}

fn attention_spec(cfg: &ModelConfig, inner: AttentionKind, csp: bool, masked: bool) -> AttentionSpec {
    AttentionSpec::new(inner, cfg.d_model, cfg.heads)
        .with_csp(csp)
        .with_masked(masked)
        .with_sampling_factor(cfg.sampling_factor)
}

/// Self-attention sub-layer followed by a feedforward sub-layer.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm: LayerNorm,
    pub attn: AttentionBlock,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = attention_spec(cfg, cfg.flags.inner, cfg.flags.csp, false);
        Ok(EncoderBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model),
            attn: AttentionBlock::new(store, &format!("{name}.attn"), spec, cfg.attention_bias, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, cfg.feedforward_dim, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        residual: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let h = self.norm.forward(tape, bound, x)?;
        let h = ctx.attend(tape, |tape, seed| self.attn.forward_self(tape, bound, h, seed))?;
        let x = if residual { tape.add(x, h)? } else { h };
        self.ff.forward(tape, bound, x, residual)
    }
}

/// Attention blocks joined by distilling stages, with optional passthrough
/// fusion, closed by a layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub stages: Vec<DistillStage>,
    pub transition: Option<Transition>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        n_blocks: usize,
        passthrough: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let connector = cfg.connector();
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut stages = Vec::with_capacity(n_blocks.saturating_sub(1));
        for i in 0..n_blocks {
            blocks.push(EncoderBlock::new(store, &format!("{name}.block{i}"), cfg, rng)?);
            if i + 1 < n_blocks {
                stages.push(DistillStage::new(
                    store,
                    &format!("{name}.distill{i}"),
                    cfg.d_model,
                    i + 1,
                    &connector,
                    true,
                    rng,
                )?);
            }
        }
        let fused = ((1usize << n_blocks) - 1) * cfg.d_model;
        let transition = passthrough
            .then(|| Transition::new(store, &format!("{name}.transition"), fused, cfg.d_model, true, rng));
        Ok(Encoder {
            blocks,
            stages,
            transition,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        residual: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut x = x;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, bound, x, residual, ctx)?;
            taps.push(x);
            if let Some(stage) = self.stages.get(i) {
                x = stage.forward(tape, bound, x)?;
            }
        }
        if let Some(t) = &self.transition {
            let pyramid = FeaturePyramid::new(tape, taps)?;
            let fused = passthrough_fuse(tape, &pyramid)?;
            x = t.forward(tape, bound, fused)?;
        }
        Ok(self.norm.forward(tape, bound, x)?)
    }
}

/// Either a single encoder or the main encoder plus suffix encoders fused
/// by channel concatenation.
#[derive(Debug, Clone)]
pub enum EncoderStack {
    Single(Encoder),
    Full {
        main: Encoder,
        extras: Vec<Encoder>,
        fuse: Transition,
    },
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let k = cfg.enc_blocks;
        if !cfg.flags.full_distilling {
            return Ok(EncoderStack::Single(Encoder::new(
                store,
                "encoder",
                cfg,
                k,
                cfg.flags.passthrough,
                rng,
            )?));
        }
        if k < 2 {
            return Err(Error::Config("full distilling needs at least two blocks".into()));
        }
        let main = Encoder::new(store, "encoder", cfg, k, false, rng)?;
        let extras = (1..k)
            .map(|i| Encoder::new(store, &format!("encoder_extra{i}"), cfg, k - i, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Transition::new(store, "encoder_fuse", k * cfg.d_model, cfg.d_model, true, rng);
        Ok(EncoderStack::Full { main, extras, fuse })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        residual: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        match self {
            EncoderStack::Single(enc) => enc.forward(tape, bound, x, residual, ctx),
            EncoderStack::Full { main, extras, fuse } => {
                let len = tape.shape(x).len;
                let mut outs = vec![main.forward(tape, bound, x, residual, ctx)?];
                for (i, enc) in extras.iter().enumerate() {
                    let part = len >> (i + 1);
                    let suffix = tape.slice_len(x, len - part, part)?;
                    outs.push(enc.forward(tape, bound, suffix, residual, ctx)?);
                }
                let cat = tape.concat_dim(&outs)?;
                Ok(fuse.forward(tape, bound, cat)?)
            }
        }
    }
}

/// Masked self-attention, cross-attention over the encoder output, then a
/// feedforward sub-layer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: AttentionBlock,
    pub cross_norm: LayerNorm,
    pub cross_attn: AttentionBlock,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let self_spec = attention_spec(cfg, cfg.flags.inner, cfg.flags.csp, true);
        let cross_spec = attention_spec(cfg, AttentionKind::Canonical, false, false);
        Ok(DecoderLayer {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: AttentionBlock::new(store, &format!("{name}.self"), self_spec, cfg.attention_bias, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross_attn: AttentionBlock::new(store, &format!("{name}.cross"), cross_spec, cfg.attention_bias, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.feedforward_dim, rng),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        enc_out: Var,
        residual: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let h = self.self_norm.forward(tape, bound, x)?;
        let h = ctx.attend(tape, |tape, seed| self.self_attn.forward_self(tape, bound, h, seed))?;
        let x = if residual { tape.add(x, h)? } else { h };
        let h = self.cross_norm.forward(tape, bound, x)?;
        let h = ctx.attend(tape, |tape, seed| {
            self.cross_attn.forward_cross(tape, bound, h, enc_out, seed)
        })?;
        let x = if residual { tape.add(x, h)? } else { h };
        self.ff.forward(tape, bound, x, residual)
    }
}
