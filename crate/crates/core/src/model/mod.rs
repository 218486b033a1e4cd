//! Encoder/decoder assembly for the eight variants, single-pass generative
//! inference, rolling forecasts and checkpoints.

mod checkpoint;
mod config;
mod layers;
mod rolling;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{ModelConfig, VariantFlags, VariantPreset};
pub use layers::{
    positional_encoding, DecoderLayer, Embedding, Encoder, EncoderBlock, EncoderStack, FeedForward,
};
pub use rolling::{rolling_plan, rolling_predict, RollStep};

use crate::error::{Error, Result, TensorError};
use crate::nn::{mix_seed, Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::{SeqTensor, Shape, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Per-forward state: the ProbSparse sampling seed and, optionally, the
/// tape ranges occupied by each attention call.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    seed: u64,
    calls: u64,
    spans: Option<Vec<Range<usize>>>,
}

impl ForwardCtx {
    pub fn new(seed: u64) -> Self {
        ForwardCtx {
            seed,
            calls: 0,
            spans: None,
        }
    }

    /// Like [`ForwardCtx::new`] but records where attention ops sit on the tape.
    pub fn tracing(seed: u64) -> Self {
        ForwardCtx {
            spans: Some(Vec::new()),
            ..Self::new(seed)
        }
    }

    pub fn attention_spans(&self) -> &[Range<usize>] {
        self.spans.as_deref().unwrap_or(&[])
    }

    pub(crate) fn attend<F>(&mut self, tape: &mut Tape, f: F) -> Result<Var, TensorError>
    where
        F: FnOnce(&mut Tape, u64) -> Result<Var, TensorError>,
    {
        let seed = mix_seed(self.seed, self.calls);
        self.calls += 1;
        let start = tape.len();
        let out = f(tape, seed)?;
        if let Some(spans) = &mut self.spans {
            spans.push(start..tape.len());
        }
        Ok(out)
    }
}

/// One mini-batch of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B × input_len × N]`
    pub input: SeqTensor,
    /// `[B × pred_len × N]`
    pub target: SeqTensor,
    /// `[B × input_len × M]` calendar features of the input rows.
    pub marks_in: Option<SeqTensor>,
    /// `[B × (token_len + pred_len) × M]` calendar features of the decoder rows.
    pub marks_dec: Option<SeqTensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub enc_embed: Embedding,
    pub dec_embed: Embedding,
    pub encoder: EncoderStack,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let enc_embed = Embedding::new(&mut store, "enc_embed", &config, &mut rng);
        let dec_embed = Embedding::new(&mut store, "dec_embed", &config, &mut rng);
        let encoder = EncoderStack::new(&mut store, &config, &mut rng)?;
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", config.d_model);
        let head = Linear::new(&mut store, "head", config.d_model, config.n_series, true, &mut rng);
        Ok(Model {
            config,
            store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Encoder path on an already-embedded `[B × L × d]` input.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.encoder.forward(tape, bound, x, self.config.residual, ctx)
    }

    /// Decoder layers and the closing norm on an embedded decoder input.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        dec_in: Var,
        enc_out: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (sd, se) = (tape.shape(dec_in), tape.shape(enc_out));
        if se.dim != sd.dim || se.batch != sd.batch {
            return Err(Error::Config(format!(
                "encoder output {se} does not match decoder input {sd}"
            )));
        }
        let mut x = dec_in;
        for layer in &self.decoder {
            x = layer.forward(tape, bound, x, enc_out, self.config.residual, ctx)?;
        }
        Ok(self.dec_norm.forward(tape, bound, x)?)
    }

    /// Raw decoder input: the last `token_len` input rows followed by zero
    /// placeholders for the `pred_len` targets.
    pub fn decoder_input(&self, input: &SeqTensor) -> Result<SeqTensor> {
        let s = input.shape();
        let (tok, t) = (self.config.token_len, self.config.pred_len);
        let token = input.slice_len(s.len - tok, tok)?;
        let mut data = Vec::with_capacity(s.batch * (tok + t) * s.dim);
        for b in 0..s.batch {
            for l in 0..tok {
                data.extend_from_slice(token.row(b, l));
            }
            data.extend(std::iter::repeat_n(0.0, t * s.dim));
        }
        Ok(SeqTensor::new(Shape::new(s.batch, tok + t, s.dim), data)?)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let s = batch.input.shape();
        if s.len != c.input_len || s.dim != c.n_series {
            return Err(Error::Config(format!(
                "input {s} does not match input_len {} and n_series {}",
                c.input_len, c.n_series
            )));
        }
        if (c.time_marks > 0) != (batch.marks_in.is_some() && batch.marks_dec.is_some()) {
            return Err(Error::Config(
                "time marks must be supplied exactly when the model uses them".into(),
            ));
        }
        Ok(())
    }

    /// One generative forward pass; returns the `[B × pred_len × N]` forecast.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let marks_in = batch.marks_in.clone().map(|m| tape.constant(m));
        let marks_dec = batch.marks_dec.clone().map(|m| tape.constant(m));
        let x = tape.constant(batch.input.clone());
        let enc_in = self.enc_embed.forward(tape, bound, x, marks_in)?;
        let enc_out = self.encoder_forward(tape, bound, enc_in, ctx)?;
        let dec_raw = tape.constant(self.decoder_input(&batch.input)?);
        let dec_in = self.dec_embed.forward(tape, bound, dec_raw, marks_dec)?;
        let dec_out = self.decoder_forward(tape, bound, dec_in, enc_out, ctx)?;
        let y = self.head.forward(tape, bound, dec_out)?;
        Ok(tape.slice_len(y, self.config.token_len, self.config.pred_len)?)
    }

    /// Forward without gradients; returns the forecast values.
    pub fn predict(&self, batch: &Batch, seed: u64) -> Result<SeqTensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let y = self.forward(&mut tape, &bound, batch, &mut ForwardCtx::new(seed))?;
        Ok(tape.value(y).clone())
    }
}
