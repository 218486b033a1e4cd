//! Attention kernels: canonical scaled dot-product, ProbSparse, LogSparse,
//! their multi-head wrapper, and the cross-stage-partial (CSP) block that
//! routes half of the channels through a 1×1 convolution instead of
//! attention.

use crate::error::{Error, TensorError};
use crate::nn::{linear, mix_seed, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Mask, SeqTensor, Tape, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Canonical,
    ProbSparse,
    LogSparse,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Canonical => "canonical",
            AttentionKind::ProbSparse => "probsparse",
            AttentionKind::LogSparse => "logsparse",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" | "full" => Ok(AttentionKind::Canonical),
            "probsparse" | "prob" => Ok(AttentionKind::ProbSparse),
            "logsparse" | "log" => Ok(AttentionKind::LogSparse),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Declarative description of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub inner: AttentionKind,
    pub csp: bool,
    pub masked: bool,
    pub heads: usize,
    pub model_dim: usize,
    /// ProbSparse sampling factor `c`.
    pub sampling_factor: f64,
    /// Fraction of channels routed through the 1×1 convolution when `csp`.
    pub csp_split: f64,
}

impl AttentionSpec {
    pub fn new(inner: AttentionKind, model_dim: usize, heads: usize) -> Self {
        AttentionSpec {
            inner,
            csp: false,
            masked: false,
            heads,
            model_dim,
            sampling_factor: 5.0,
            csp_split: 0.5,
        }
    }

    pub fn with_csp(mut self, csp: bool) -> Self {
        self.csp = csp;
        self
    }

    pub fn with_masked(mut self, masked: bool) -> Self {
        self.masked = masked;
        self
    }

    pub fn with_sampling_factor(mut self, c: f64) -> Self {
        self.sampling_factor = c;
        self
    }

    /// `(convolution part, attention part)` channel counts.
    pub fn split_dims(&self) -> (usize, usize) {
        if !self.csp {
            return (0, self.model_dim);
        }
        let d1 = (self.model_dim as f64 * self.csp_split).round() as usize;
        (d1, self.model_dim.saturating_sub(d1))
    }

    /// Width of the Q/K/V/output projections.
    pub fn attention_dim(&self) -> usize {
        self.split_dims().1
    }

    pub fn head_dim(&self) -> usize {
        self.attention_dim() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let d = self.model_dim;
        if self.heads == 0 || d == 0 {
            return Err(Error::Config("heads and model_dim must be positive".into()));
        }
        if !(self.sampling_factor > 0.0) {
            return Err(Error::Config(format!(
                "sampling factor must be > 0, got {}",
                self.sampling_factor
            )));
        }
        if self.csp {
            if !(self.csp_split > 0.0 && self.csp_split < 1.0) {
                return Err(Error::Config(format!(
                    "csp split must lie in (0, 1), got {}",
                    self.csp_split
                )));
            }
            let exact = d as f64 * self.csp_split;
            let (d1, d2) = self.split_dims();
            if (exact - d1 as f64).abs() > 1e-9 || d1 == 0 || d2 == 0 || d2 % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model dim {d} cannot be split {}:{} across {} heads",
                    self.csp_split,
                    1.0 - self.csp_split,
                    self.heads
                )));
            }
        } else if d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Tape handles of one attention block's weights.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// Projection biases in Q, K, V, O order.
    pub proj_bias: Option<[Var; 4]>,
    /// 1×1 convolution of the CSP bypass path.
    pub wc: Option<Var>,
    pub bc: Option<Var>,
}

// ----- single-head kernels -------------------------------------------------

/// `softmax(Q·Kᵀ/√d_h)·V`, optionally masked.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var, TensorError> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.dim != sk.dim || sk.len != sv.len || sk.batch != sv.batch {
        return Err(TensorError::dim(
            "scaled_dot_attention",
            format!("q {sq}, k {sk}, v {sv}"),
        ));
    }
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq.dim as f64).sqrt())?;
    let probs = tape.softmax(scores, mask)?;
    tape.matmul(probs, v)
}

/// `max(1, min(⌈c·ln n⌉, n))`: ProbSparse sample and selection budget.
pub fn sparse_budget(n: usize, c: f64) -> usize {
    let raw = (c * (n as f64).ln()).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Uniform sample without replacement of `sparse_budget(l_k, c)` key
/// indices, returned in ascending order.
pub fn sample_keys(l_k: usize, c: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, l_k, sparse_budget(l_k, c)).into_vec();
    idx.sort_unstable();
    idx
}

/// Query sparsity measure: for each query, the max minus the mean of its
/// scaled scores against the sampled keys. Returns one score list per batch
/// item.
pub fn probsparse_measure(
    q: &SeqTensor,
    k_sampled: &SeqTensor,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let (sq, sk) = (q.shape(), k_sampled.shape());
    if sk.len == 0 {
        return Err(TensorError::Degenerate {
            op: "probsparse_measure",
            detail: "empty key sample".into(),
        });
    }
    if sq.dim != sk.dim || sq.batch != sk.batch {
        return Err(TensorError::dim(
            "probsparse_measure",
            format!("q {sq}, k {sk}"),
        ));
    }
    let keys: Vec<usize> = (0..sk.len).collect();
    Ok(measure_scores(q, k_sampled, &keys, false))
}

/// Max-minus-mean measure over the key rows listed in `keys`. With `causal`,
/// query `i` only sees listed keys `j <= i` (score 0 when none).
fn measure_scores(q: &SeqTensor, k: &SeqTensor, keys: &[usize], causal: bool) -> Vec<Vec<f64>> {
    let (sq, dh) = (q.shape(), q.shape().dim);
    let scale = 1.0 / (dh as f64).sqrt();
    (0..sq.batch)
        .map(|b| {
            (0..sq.len)
                .map(|i| {
                    let qi = q.row(b, i);
                    let (mut max, mut sum, mut n) = (f64::NEG_INFINITY, 0.0, 0usize);
                    for &j in keys.iter().filter(|&&j| !causal || j <= i) {
                        let s = scale * qi.iter().zip(k.row(b, j)).map(|(a, c)| a * c).sum::<f64>();
                        max = max.max(s);
                        sum += s;
                        n += 1;
                    }
                    if n == 0 {
                        0.0
                    } else {
                        max - sum / n as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// The `u` highest scores (ties to the lower index), in ascending index order.
pub fn top_u(scores: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(u).collect();
    picked.sort_unstable();
    picked
}

/// Prefix-stable selection used by masked ProbSparse attention: query `i` is
/// selected when it ranks within the top `sparse_budget(i + 1, c)` of the
/// scores `0..=i` (earlier index wins ties). Whether `i` is selected never
/// depends on later queries, and the last query obeys the global budget.
pub fn causal_select(scores: &[f64], c: f64) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let rank = scores[..i].iter().filter(|&&s| s >= scores[i]).count();
            rank < sparse_budget(i + 1, c)
        })
        .collect()
}

/// ProbSparse attention: the dominant queries get exact attention, the rest
/// receive the mean of `V` (or its running mean when `masked`).
pub fn probsparse_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    sampling_factor: f64,
    masked: bool,
    seed: u64,
) -> Result<Var, TensorError> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.dim != sk.dim || sk.len != sv.len || sq.batch != sk.batch || sk.batch != sv.batch {
        return Err(TensorError::dim(
            "probsparse_attention",
            format!("q {sq}, k {sk}, v {sv}"),
        ));
    }
    if masked && sq.len != sk.len {
        return Err(TensorError::dim(
            "probsparse_attention",
            "masked attention needs equal query and key lengths",
        ));
    }
    let keys = sample_keys(sk.len, sampling_factor, seed);
    let scores = measure_scores(tape.value(q), tape.value(k), &keys, masked);
    tape.record_mults(sq.batch * sq.len * keys.len() * sq.dim);
    let scale = 1.0 / (sq.dim as f64).sqrt();

    if !masked {
        let u = sparse_budget(sq.len, sampling_factor);
        let idx: Vec<Vec<usize>> = scores.iter().map(|s| top_u(s, u)).collect();
        let mut base = tape.mean_len(v)?;
        if sq.len != sv.len {
            base = tape.gather_rows(base, vec![vec![0; sq.len]; sq.batch])?;
        }
        let q_sel = tape.gather_rows(q, idx.clone())?;
        let kt = tape.transpose_last(k)?;
        let s = tape.matmul(q_sel, kt)?;
        let s = tape.scale(s, scale)?;
        let p = tape.softmax(s, None)?;
        let rows = tape.matmul(p, v)?;
        return tape.scatter_rows(base, rows, idx);
    }

    // Causal selection differs in size across batch items: run each alone.
    let mut outs = Vec::with_capacity(sq.batch);
    for (b, item_scores) in scores.iter().enumerate() {
        let selected = causal_select(item_scores, sampling_factor);
        let (qb, kb, vb) = (
            tape.slice_batch(q, b)?,
            tape.slice_batch(k, b)?,
            tape.slice_batch(v, b)?,
        );
        let base = tape.cummean_len(vb)?;
        let mask = Mask::from_fn(selected.len(), sk.len, |r, j| j <= selected[r]);
        let q_sel = tape.gather_rows(qb, vec![selected.clone()])?;
        let kt = tape.transpose_last(kb)?;
        let s = tape.matmul(q_sel, kt)?;
        let s = tape.scale(s, scale)?;
        let p = tape.softmax(s, Some(&mask))?;
        let rows = tape.matmul(p, vb)?;
        outs.push(tape.scatter_rows(base, rows, vec![selected])?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_batch(&outs)
    }
}

/// LogSparse pattern: position `i` attends to `i` and `i - 2^m` for `m >= 0`.
pub fn logsparse_mask(rows: usize, cols: usize) -> Mask {
    Mask::from_fn(rows, cols, |i, j| {
        j <= i && {
            let gap = i - j;
            gap == 0 || gap.is_power_of_two()
        }
    })
}

// ----- multi-head and CSP blocks --------------------------------------------

/// Project → attend per head (kind and mask per `spec`) → concat → project.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    seed: u64,
) -> Result<Var, TensorError> {
    let bias = |i: usize| w.proj_bias.map(|b| b[i]);
    let q = linear(tape, x_q, w.wq, bias(0))?;
    let k = linear(tape, x_kv, w.wk, bias(1))?;
    let v = linear(tape, x_kv, w.wv, bias(2))?;
    let width = tape.shape(q).dim;
    let heads = spec.heads.max(1);
    if width % heads != 0 {
        return Err(TensorError::dim(
            "multi_head_attention",
            format!("width {width} across {heads} heads"),
        ));
    }
    let dh = width / heads;
    let (l_q, l_k) = (tape.shape(q).len, tape.shape(k).len);
    let mask = match (spec.inner, spec.masked) {
        (AttentionKind::LogSparse, _) => Some(logsparse_mask(l_q, l_k)),
        (AttentionKind::Canonical, true) => Some(Mask::causal(l_q, l_k)),
        _ => None,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_dim(q, h * dh, dh)?,
                tape.slice_dim(k, h * dh, dh)?,
                tape.slice_dim(v, h * dh, dh)?,
            )
        };
        let out = match spec.inner {
            AttentionKind::ProbSparse => probsparse_attention(
                tape,
                qh,
                kh,
                vh,
                spec.sampling_factor,
                spec.masked,
                mix_seed(seed, h as u64),
            )?,
            _ => scaled_dot_attention(tape, qh, kh, vh, mask.as_ref())?,
        };
        outs.push(out);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_dim(&outs)?
    };
    linear(tape, merged, w.wo, bias(3))
}

/// CSP attention: the first channel part goes through the 1×1 convolution
/// `W_c`, the second through multi-head attention; outputs are concatenated
/// in that order.
pub fn csp_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    spec: &AttentionSpec,
    seed: u64,
) -> Result<Var, TensorError> {
    let wc = match (spec.csp, w.wc) {
        (true, Some(wc)) => wc,
        _ => {
            return Err(TensorError::dim(
                "csp_attention",
                "spec or weights lack the CSP convolution",
            ))
        }
    };
    let (d1, d2) = spec.split_dims();
    let parts = tape.split_dim(x, &[d1, d2])?;
    let y1 = linear(tape, parts[0], wc, w.bc)?;
    let y2 = multi_head_attention(tape, parts[1], parts[1], w, spec, seed)?;
    tape.concat_dim(&[y1, y2])
}

/// Parameters of one (possibly CSP-wrapped) attention block.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub spec: AttentionSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub conv: Option<Linear>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: AttentionSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, Error> {
        spec.validate()?;
        let (d1, d2) = spec.split_dims();
        let conv = spec
            .csp
            .then(|| Linear::new(store, &format!("{name}.conv"), d1, d1, bias, rng));
        let mut proj = |tag: &str| Linear::new(store, &format!("{name}.{tag}"), d2, d2, bias, rng);
        let (q, k, v, o) = (proj("q"), proj("k"), proj("v"), proj("o"));
        Ok(AttentionBlock {
            spec,
            q,
            k,
            v,
            o,
            conv,
        })
    }

    pub fn weights(&self, bound: &Bound) -> AttentionWeights {
        let proj_bias = match (self.q.bias, self.k.bias, self.v.bias, self.o.bias) {
            (Some(a), Some(b), Some(c), Some(d)) => {
                Some([bound.get(a), bound.get(b), bound.get(c), bound.get(d)])
            }
            _ => None,
        };
        AttentionWeights {
            wq: bound.get(self.q.weight),
            wk: bound.get(self.k.weight),
            wv: bound.get(self.v.weight),
            wo: bound.get(self.o.weight),
            proj_bias,
            wc: self.conv.as_ref().map(|c| bound.get(c.weight)),
            bc: self
                .conv
                .as_ref()
                .and_then(|c| c.bias)
                .map(|b| bound.get(b)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.conv.iter().chain([&self.q, &self.k, &self.v, &self.o]) {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        ids
    }

    /// Literal number of weight scalars held by this block.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Self-attention over `x`, CSP-wrapped when the spec says so.
    pub fn forward_self(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        seed: u64,
    ) -> Result<Var, TensorError> {
        let w = self.weights(bound);
        if self.spec.csp {
            csp_attention(tape, x, &w, &self.spec, seed)
        } else {
            multi_head_attention(tape, x, x, &w, &self.spec, seed)
        }
    }

    /// Cross-attention of `x_q` over `x_kv` (never CSP-wrapped).
    pub fn forward_cross(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_q: Var,
        x_kv: Var,
        seed: u64,
    ) -> Result<Var, TensorError> {
        multi_head_attention(tape, x_q, x_kv, &self.weights(bound), &self.spec, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use approx::assert_abs_diff_eq;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> SeqTensor {
        let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SeqTensor::new(shape, data).unwrap()
    }

    /// Naive double-loop softmax attention on one batch item.
    fn naive_attention(q: &SeqTensor, k: &SeqTensor, v: &SeqTensor, causal: bool) -> Vec<Vec<f64>> {
        let dh = q.shape().dim as f64;
        (0..q.shape().len)
            .map(|i| {
                let keys: Vec<usize> = (0..k.shape().len).filter(|&j| !causal || j <= i).collect();
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| q.row(0, i).iter().zip(k.row(0, j)).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v.shape().dim)
                    .map(|c| keys.iter().zip(&e).map(|(&j, w)| w / z * v.at(0, j, c)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(SeqTensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.1]]).unwrap());
        let k = tape.constant(SeqTensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let v = tape.constant(SeqTensor::from_rows(&[vec![7.0, -3.0]]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        for i in 0..2 {
            assert_eq!(tape.value(out).row(0, i), &[7.0, -3.0]);
        }
    }

    #[test]
    fn equal_scores_average_the_values() {
        let mut tape = Tape::new();
        let q = tape.constant(SeqTensor::zeros(Shape::new(1, 2, 3)));
        let k = tape.constant(SeqTensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap());
        let v = tape.constant(SeqTensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 6.0, 9.0]]).unwrap());
        let out = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert_abs_diff_eq!(tape.value(out).row(0, 1), &[2.0, 4.0, 6.0][..], epsilon = 1e-15);
    }

    #[test]
    fn random_instance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for causal in [false, true] {
            let q = rand_tensor(&mut rng, Shape::new(1, 3, 4));
            let k = rand_tensor(&mut rng, Shape::new(1, 3, 4));
            let v = rand_tensor(&mut rng, Shape::new(1, 3, 4));
            let oracle = naive_attention(&q, &k, &v, causal);
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let mask = causal.then(|| Mask::causal(3, 3));
            let out = scaled_dot_attention(&mut tape, qv, kv, vv, mask.as_ref()).unwrap();
            for (i, row) in oracle.iter().enumerate() {
                assert_abs_diff_eq!(tape.value(out).row(0, i), &row[..], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn measure_symmetry_and_orthogonality() {
        let q = SeqTensor::from_rows(&vec![vec![0.4, -0.2, 1.0]; 4]).unwrap();
        let k = SeqTensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![-0.3, 2.0, 1.0]]).unwrap();
        let s = probsparse_measure(&q, &k).unwrap();
        assert!(s[0].iter().all(|&x| x == s[0][0]));

        let q = SeqTensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let k = SeqTensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(probsparse_measure(&q, &k).unwrap()[0][0], 0.0);

        let empty = SeqTensor::zeros(Shape::new(1, 0, 3));
        assert!(matches!(
            probsparse_measure(&q, &empty),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn measure_ranking_matches_exhaustive_oracle() {
        let q = SeqTensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.2, 0.2],
            vec![-2.0, 1.5],
            vec![0.0, 3.0],
        ])
        .unwrap();
        let k = SeqTensor::from_rows(&[
            vec![1.0, 1.0],
            vec![-1.0, 0.5],
            vec![0.5, -2.0],
            vec![2.0, 0.0],
        ])
        .unwrap();
        let scores = probsparse_measure(&q, &k).unwrap().remove(0);
        // exhaustive: max_j - mean_j of q_i·k_j/√2 over all four keys
        let oracle: Vec<f64> = (0..4)
            .map(|i| {
                let s: Vec<f64> = (0..4)
                    .map(|j| (q.at(0, i, 0) * k.at(0, j, 0) + q.at(0, i, 1) * k.at(0, j, 1)) / 2f64.sqrt())
                    .collect();
                s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().sum::<f64>() / 4.0
            })
            .collect();
        for (a, b) in scores.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        let mut ranked: Vec<usize> = (0..4).collect();
        ranked.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]));
        assert_eq!(top_u(&scores, 2), {
            let mut t = ranked[..2].to_vec();
            t.sort();
            t
        });
    }

    #[test]
    fn budget_and_tie_breaking() {
        assert_eq!(sparse_budget(1, 5.0), 1);
        assert_eq!(sparse_budget(8, 1.0), 3);
        assert_eq!(sparse_budget(32, 5.0), 18);
        assert_eq!(sparse_budget(8, 100.0), 8);
        assert_eq!(top_u(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_u(&[1.0, 1.0, 1.0], 1), vec![0]);
        let keys = sample_keys(32, 5.0, 9);
        assert_eq!(keys.len(), 18);
        assert_eq!(keys, sample_keys(32, 5.0, 9));
    }

    #[test]
    fn probsparse_with_full_budget_equals_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for masked in [false, true] {
            let shape = Shape::new(2, 6, 4);
            let (q, k, v) = (
                rand_tensor(&mut rng, shape),
                rand_tensor(&mut rng, shape),
                rand_tensor(&mut rng, shape),
            );
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let sparse = probsparse_attention(&mut tape, qv, kv, vv, 1e6, masked, 1).unwrap();
            let mask = masked.then(|| Mask::causal(6, 6));
            let full = scaled_dot_attention(&mut tape, qv, kv, vv, mask.as_ref()).unwrap();
            assert!(tape.value(sparse).max_abs_diff(tape.value(full)) <= 1e-10);
        }
    }

    #[test]
    fn single_query_is_always_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, Shape::new(1, 1, 4));
        let k = rand_tensor(&mut rng, Shape::new(1, 5, 4));
        let v = rand_tensor(&mut rng, Shape::new(1, 5, 4));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let sparse = probsparse_attention(&mut tape, qv, kv, vv, 0.1, false, 2).unwrap();
        let full = scaled_dot_attention(&mut tape, qv, kv, vv, None).unwrap();
        assert!(tape.value(sparse).max_abs_diff(tape.value(full)) <= 1e-12);
    }

    #[test]
    fn selection_matches_exhaustive_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape::new(1, 8, 4);
        let (q, k, v) = (
            rand_tensor(&mut rng, shape),
            rand_tensor(&mut rng, shape),
            rand_tensor(&mut rng, shape),
        );
        let seed = 17;
        let keys = sample_keys(8, 1.0, seed);
        // oracle: brute-force ranking of every query's measure on the sample
        let scores: Vec<f64> = (0..8)
            .map(|i| {
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..4).map(|c| q.at(0, i, c) * k.at(0, j, c)).sum::<f64>() / 2.0)
                    .collect();
                s.iter().cloned().fold(f64::MIN, f64::max) - s.iter().sum::<f64>() / s.len() as f64
            })
            .collect();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let expected: Vec<usize> = order[..3].to_vec();

        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = probsparse_attention(&mut tape, qv, kv, vv, 1.0, false, seed).unwrap();
        let full = scaled_dot_attention(&mut tape, qv, kv, vv, None).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..8).map(|j| v.at(0, j, c)).sum::<f64>() / 8.0).collect();
        for i in 0..8 {
            let row = tape.value(out).row(0, i);
            if expected.contains(&i) {
                assert_abs_diff_eq!(row, tape.value(full).row(0, i), epsilon = 1e-12);
            } else {
                assert_abs_diff_eq!(row, &mean[..], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn causal_selection_is_prefix_stable() {
        let scores = [0.5, 0.1, 0.9, 0.3, 0.2, 0.8, 0.7, 0.05];
        let full = causal_select(&scores, 1.0);
        for t in 1..scores.len() {
            let prefix = causal_select(&scores[..t], 1.0);
            let restricted: Vec<usize> = full.iter().copied().filter(|&i| i < t).collect();
            assert_eq!(prefix, restricted);
        }
        assert!(full.contains(&0));
    }

    #[test]
    fn logsparse_pattern() {
        let m = logsparse_mask(9, 9);
        let allowed = |i: usize| (0..9).filter(|&j| m.allowed(0, i, j)).collect::<Vec<_>>();
        assert_eq!(allowed(0), vec![0]);
        assert_eq!(allowed(5), vec![1, 3, 4, 5]);
        assert_eq!(allowed(8), vec![0, 4, 6, 7, 8]);
        assert!(m.is_causal());
    }

    #[test]
    fn spec_validation() {
        let ok = AttentionSpec::new(AttentionKind::Canonical, 8, 2).with_csp(true);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.split_dims(), (4, 4));
        assert!(AttentionSpec::new(AttentionKind::Canonical, 6, 4).validate().is_err());
        assert!(AttentionSpec::new(AttentionKind::Canonical, 12, 4)
            .with_csp(true)
            .validate()
            .is_err());
        assert!(AttentionSpec::new(AttentionKind::ProbSparse, 8, 2)
            .with_sampling_factor(0.0)
            .validate()
            .is_err());
        assert_eq!("ProbSparse".parse::<AttentionKind>().unwrap(), AttentionKind::ProbSparse);
    }

    fn block(spec: AttentionSpec, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = AttentionBlock::new(&mut store, "attn", spec, false, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn csp_output_shape_and_zero_input() {
        let spec = AttentionSpec::new(AttentionKind::Canonical, 8, 2).with_csp(true);
        let (store, b) = block(spec, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(SeqTensor::zeros(Shape::new(1, 5, 8)));
        let y = b.forward_self(&mut tape, &bound, x, 0).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 5, 8));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csp_bypass_columns_ignore_attention_half() {
        let spec = AttentionSpec::new(AttentionKind::ProbSparse, 8, 2).with_csp(true);
        let (store, b) = block(spec, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, Shape::new(2, 6, 8));
        let mut x2 = x.clone();
        for bi in 0..2 {
            for l in 0..6 {
                for d in 4..8 {
                    x2.set(bi, l, d, rng.random_range(-5.0..5.0));
                }
            }
        }
        let run = |x: SeqTensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let xv = tape.constant(x);
            let y = b.forward_self(&mut tape, &bound, xv, 3).unwrap();
            tape.value(y).clone()
        };
        let (y, y2) = (run(x), run(x2));
        for bi in 0..2 {
            for l in 0..6 {
                assert_eq!(&y.row(bi, l)[..4], &y2.row(bi, l)[..4]);
            }
        }
    }

    fn bound_weights(tape: &mut Tape, store: &ParamStore, b: &AttentionBlock) -> AttentionWeights {
        let bound = store.bind(tape, false);
        b.weights(&bound)
    }

    #[test]
    fn single_head_is_projected_scaled_dot() {
        let spec = AttentionSpec::new(AttentionKind::Canonical, 4, 1);
        let (store, b) = block(spec.clone(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, Shape::new(1, 5, 4));
        let mut tape = Tape::new();
        let w = bound_weights(&mut tape, &store, &b);
        let xv = tape.constant(x);
        let y = multi_head_attention(&mut tape, xv, xv, &w, &spec, 0).unwrap();
        let q = tape.matmul(xv, w.wq).unwrap();
        let k = tape.matmul(xv, w.wk).unwrap();
        let v = tape.matmul(xv, w.wv).unwrap();
        let a = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let expect = tape.matmul(a, w.wo).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-15);

        let z = tape.constant(SeqTensor::zeros(Shape::new(1, 5, 4)));
        let yz = multi_head_attention(&mut tape, z, z, &w, &spec, 0).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    fn naive_matmul(x: &[Vec<f64>], w: &SeqTensor) -> Vec<Vec<f64>> {
        let (din, dout) = (w.shape().len, w.shape().dim);
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| (0..din).map(|i| row[i] * w.at(0, i, o)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_heads_match_naive_oracle() {
        let spec = AttentionSpec::new(AttentionKind::Canonical, 8, 2).with_masked(true);
        let (store, b) = block(spec.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, Shape::new(1, 4, 8));
        let mut tape = Tape::new();
        let w = bound_weights(&mut tape, &store, &b);
        let xv = tape.constant(x.clone());
        let y = multi_head_attention(&mut tape, xv, xv, &w, &spec, 0).unwrap();

        let rows: Vec<Vec<f64>> = (0..4).map(|l| x.row(0, l).to_vec()).collect();
        let [q, k, v] = [w.wq, w.wk, w.wv].map(|m| naive_matmul(&rows, tape.value(m)));
        let mut merged = vec![Vec::new(); 4];
        for h in 0..2 {
            let cut = |m: &Vec<Vec<f64>>| {
                let data: Vec<f64> = m.iter().flat_map(|r| r[h * 4..h * 4 + 4].to_vec()).collect();
                SeqTensor::new(Shape::new(1, 4, 4), data).unwrap()
            };
            let out = naive_attention(&cut(&q), &cut(&k), &cut(&v), true);
            for (m, o) in merged.iter_mut().zip(out) {
                m.extend(o);
            }
        }
        let expect = naive_matmul(&merged, tape.value(w.wo));
        for (l, row) in expect.iter().enumerate() {
            for (d, &e) in row.iter().enumerate() {
                assert_abs_diff_eq!(tape.value(y).at(0, l, d), e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn block_parameter_counts() {
        for d in [8usize, 16, 64, 512] {
            let (s1, canon) = block(AttentionSpec::new(AttentionKind::Canonical, d, 4), 1);
            let (s2, csp) = block(AttentionSpec::new(AttentionKind::Canonical, d, 4).with_csp(true), 1);
            assert_eq!(canon.param_count(&s1), 4 * d * d);
            assert_eq!(csp.param_count(&s2), 5 * (d / 2) * (d / 2));
            // 31.25 % exactly
            assert_eq!(csp.param_count(&s2) * 10_000, canon.param_count(&s1) * 3125);
        }
    }

    #[test]
    fn csp_conv_gradient_ignores_attention_half() {
        let spec = AttentionSpec::new(AttentionKind::Canonical, 8, 2).with_csp(true);
        let (store, b) = block(spec, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, Shape::new(1, 6, 8));
        let upstream = rand_tensor(&mut rng, Shape::new(1, 6, 8));
        let conv_grad = |x: SeqTensor| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let xv = tape.constant(x);
            let y = b.forward_self(&mut tape, &bound, xv, 0).unwrap();
            let g = tape.constant(upstream.clone());
            let p = tape.mul(y, g).unwrap();
            let loss = tape.sum(p).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(bound.get(b.conv.as_ref().unwrap().weight)).unwrap()
        };
        let reference = conv_grad(x.clone());
        for trial in 0..5 {
            let mut x2 = x.clone();
            for l in 0..6 {
                for d in 4..8 {
                    x2.set(0, l, d, rng.random_range(-3.0..3.0) * (trial + 1) as f64);
                }
            }
            assert_eq!(conv_grad(x2), reference);
        }
    }

    fn ancestors(tape: &Tape, v: Var) -> std::collections::HashSet<Var> {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![v];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(tape.inputs_of(n));
            }
        }
        seen
    }

    #[test]
    fn csp_columns_have_one_gradient_path() {
        let spec = AttentionSpec::new(AttentionKind::ProbSparse, 8, 2).with_csp(true);
        let (store, b) = block(spec, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let xv = tape.param(rand_tensor(&mut rng, Shape::new(1, 6, 8)));
        let y = b.forward_self(&mut tape, &bound, xv, 0).unwrap();
        assert_eq!(tape.op_name(y), "concat_dim");
        let parts = tape.inputs_of(y);
        assert_eq!(parts.len(), 2);
        let (a1, a2) = (ancestors(&tape, parts[0]), ancestors(&tape, parts[1]));
        let conv_w = bound.get(b.conv.as_ref().unwrap().weight);
        let attn_w: Vec<Var> = [b.q.weight, b.k.weight, b.v.weight, b.o.weight]
            .iter()
            .map(|&id| bound.get(id))
            .collect();
        assert!(a1.contains(&conv_w) && attn_w.iter().all(|w| !a1.contains(w)));
        assert!(!a2.contains(&conv_w) && attn_w.iter().all(|w| a2.contains(w)));
        // the two paths share only the input and read disjoint column slices
        assert!(a1.intersection(&a2).all(|&n| n == xv));
        let readers = |set: &std::collections::HashSet<Var>| {
            set.iter()
                .filter(|&&n| tape.inputs_of(n).contains(&xv))
                .map(|&n| tape.shape(n).dim)
                .collect::<Vec<_>>()
        };
        assert_eq!(readers(&a1), vec![4]);
        assert_eq!(readers(&a2), vec![4]);
    }

    fn all_masked_specs() -> Vec<AttentionSpec> {
        let mut specs = Vec::new();
        for kind in [AttentionKind::Canonical, AttentionKind::ProbSparse, AttentionKind::LogSparse] {
            for csp in [false, true] {
                specs.push(AttentionSpec::new(kind, 8, 2).with_csp(csp).with_masked(true));
            }
        }
        specs
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn masked_blocks_are_causal(seed in proptest::prelude::any::<u64>(), t in 0usize..11, fwd in 0u64..4) {
            for spec in all_masked_specs() {
                let (store, b) = block(spec.clone(), seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
                let x = rand_tensor(&mut rng, Shape::new(2, 12, 8));
                let mut x2 = x.clone();
                for bi in 0..2 {
                    for l in t + 1..12 {
                        for d in 0..8 {
                            x2.set(bi, l, d, rng.random_range(-4.0..4.0));
                        }
                    }
                }
                let run = |x: SeqTensor| {
                    let mut tape = Tape::new();
                    let bound = store.bind(&mut tape, false);
                    let xv = tape.constant(x);
                    let y = b.forward_self(&mut tape, &bound, xv, fwd).unwrap();
                    tape.value(y).clone()
                };
                let (y, y2) = (run(x), run(x2));
                for bi in 0..2 {
                    for l in 0..=t {
                        proptest::prop_assert_eq!(y.row(bi, l), y2.row(bi, l), "{:?}", spec);
                    }
                }
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut specs = all_masked_specs();
        specs.push(AttentionSpec::new(AttentionKind::Canonical, 8, 2));
        specs.push(AttentionSpec::new(AttentionKind::ProbSparse, 8, 2).with_csp(true));
        for (si, spec) in specs.into_iter().enumerate() {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(20 + si as u64);
            let b = AttentionBlock::new(&mut store, "attn", spec.clone(), true, &mut rng).unwrap();
            let x = rand_tensor(&mut rng, Shape::new(2, 7, 8));
            let probe = rand_tensor(&mut rng, Shape::new(2, 7, 8));
            let mut params = store.values().to_vec();
            params.push(x);
            let report = crate::tensor::finite_diff_check::<TensorError, _>(
                |tape, p| {
                    let bound = store.bind_values(&p[..p.len() - 1]);
                    let y = b.forward_self(tape, &bound, p[p.len() - 1], 5)?;
                    let w = tape.constant(probe.clone());
                    let m = tape.mul(y, w)?;
                    tape.sum(m)
                },
                &params,
                1e-5,
                1e-4,
                None,
            )
            .unwrap();
            assert!(report.pass, "{spec:?}: {report}");
        }
    }
}
