//! Named parameter storage and the small layers shared by every block.

use crate::error::TensorError;
use crate::tensor::{SeqTensor, Shape, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of weight tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<SeqTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: SeqTensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &SeqTensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut SeqTensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SeqTensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[SeqTensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [SeqTensor] {
        &mut self.values
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(SeqTensor::numel).sum()
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.data_mut().fill(0.0);
        }
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), requires_grad))
                .collect(),
        }
    }

    /// Binds caller-supplied values in place of the stored ones (same order).
    pub fn bind_values(&self, values: &[Var]) -> Bound {
        assert_eq!(values.len(), self.values.len(), "bind_values length");
        Bound {
            vars: values.to_vec(),
        }
    }
}

/// Tape handles of a [`ParamStore`]'s tensors for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` initialization.
pub fn uniform_init(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> SeqTensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    SeqTensor::new(shape, data).expect("init shape")
}

/// Pointwise projection `x · W (+ b)`, i.e. a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, Shape::new(1, d_in, d_out), d_in),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_init(rng, Shape::new(1, 1, d_out), d_in),
            )
        });
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        linear(tape, x, bound.get(self.weight), self.bias.map(|b| bound.get(b)))
    }
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(
                format!("{name}.gain"),
                SeqTensor::full(Shape::new(1, 1, dim), 1.0),
            ),
            bias: store.add(format!("{name}.bias"), SeqTensor::zeros(Shape::new(1, 1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, bound.get(self.gain), bound.get(self.bias))
    }
}

/// Causal convolution layer with kernel `[k × d_in × d_out]`.
#[derive(Debug, Clone)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

impl CausalConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        d_in: usize,
        d_out: usize,
        dilation: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * d_in;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, Shape::new(kernel, d_in, d_out), fan_in),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_init(rng, Shape::new(1, 1, d_out), fan_in),
            )
        });
        CausalConv {
            weight,
            bias,
            dilation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.conv1d_causal(
            x,
            bound.get(self.weight),
            self.bias.map(|b| bound.get(b)),
            self.dilation,
        )
    }
}

/// Mixes a seed with a salt (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
