//! Neural components: the trajectory encoder `f` with its linear regression
//! head `h`, and the parameter emulator `g_hat`.
//!
//! The encoder is a stack of strided 1-D temporal convolutions with circular
//! padding, global average pooling, one dense layer to the shared hidden
//! vector, a purely affine regression head, and a residual out-projection
//! onto the unit sphere. The emulator embeds each parameter component
//! independently through a residual in-projection, concatenates, applies
//! width-preserving residual blocks, and projects back down onto the sphere.

mod adamw;
mod checkpoint;

pub use adamw::{LrSchedule, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Wrap the temporal axis; respects the periodic structure of the
    /// simulated systems.
    Circular,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Temporal length of input crops.
    pub crop_len: usize,
    /// Input channels (state dimension d).
    pub channels: usize,
    /// Output widths of the temporal conv layers.
    pub conv_widths: Vec<usize>,
    /// Odd kernel size shared by all conv layers.
    pub kernel: usize,
    /// Temporal stride shared by all conv layers.
    pub stride: usize,
    /// Width of the shared hidden vector feeding both output branches.
    pub hidden_dim: usize,
    /// Embedding dimension p.
    pub embed_dim: usize,
    pub padding: PaddingMode,
    /// Regression output dimension k.
    pub regression_dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() {
            return Err(CoreError::config("encoder needs at least one conv layer"));
        }
        if self.kernel % 2 == 0 {
            return Err(CoreError::config("encoder kernel size must be odd"));
        }
        if self.embed_dim < self.regression_dim {
            return Err(CoreError::config(
                "embedding dim must be >= regression dim",
            ));
        }
        let div = self.stride.pow(self.conv_widths.len() as u32);
        if self.stride == 0 || self.crop_len % div != 0 {
            return Err(CoreError::config(format!(
                "crop length {} must be divisible by stride^layers = {div}",
                self.crop_len
            )));
        }
        Ok(())
    }

    /// `(name, shape)` of every trainable tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut cin = self.channels;
        for (i, &cout) in self.conv_widths.iter().enumerate() {
            shapes.push((format!("encoder.conv{i}.w"), vec![cout, cin, self.kernel]));
            shapes.push((format!("encoder.conv{i}.b"), vec![cout]));
            cin = cout;
        }
        let h = self.hidden_dim;
        shapes.push(("encoder.hidden.w".into(), vec![cin, h]));
        shapes.push(("encoder.hidden.b".into(), vec![h]));
        shapes.push(("encoder.head.w".into(), vec![h, self.regression_dim]));
        shapes.push(("encoder.head.b".into(), vec![self.regression_dim]));
        let p = self.embed_dim;
        shapes.push(("encoder.proj.w1".into(), vec![h, h]));
        shapes.push(("encoder.proj.b1".into(), vec![h]));
        shapes.push(("encoder.proj.w2".into(), vec![h, p]));
        shapes.push(("encoder.proj.b2".into(), vec![p]));
        shapes.push(("encoder.proj.skip".into(), vec![h, p]));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorSpec {
    /// Parameter dimension k.
    pub param_dim: usize,
    /// Per-component latent width of the residual in-projection.
    pub comp_embed: usize,
    /// Number of width-preserving residual blocks.
    pub blocks: usize,
    /// Embedding dimension p (matches the encoder).
    pub embed_dim: usize,
}

impl EmulatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.param_dim == 0 || self.comp_embed == 0 || self.embed_dim == 0 {
            return Err(CoreError::config("emulator dimensions must be positive"));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.param_dim * self.comp_embed
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let w = self.comp_embed;
        for j in 0..self.param_dim {
            shapes.push((format!("emulator.in{j}.w1"), vec![1, w]));
            shapes.push((format!("emulator.in{j}.b1"), vec![w]));
            shapes.push((format!("emulator.in{j}.w2"), vec![w, w]));
            shapes.push((format!("emulator.in{j}.b2"), vec![w]));
            shapes.push((format!("emulator.in{j}.skip"), vec![1, w]));
        }
        let wide = self.width();
        for b in 0..self.blocks {
            shapes.push((format!("emulator.block{b}.w1"), vec![wide, wide]));
            shapes.push((format!("emulator.block{b}.b1"), vec![wide]));
            shapes.push((format!("emulator.block{b}.w2"), vec![wide, wide]));
            shapes.push((format!("emulator.block{b}.b2"), vec![wide]));
        }
        let p = self.embed_dim;
        shapes.push(("emulator.out.w1".into(), vec![wide, wide]));
        shapes.push(("emulator.out.b1".into(), vec![wide]));
        shapes.push(("emulator.out.w2".into(), vec![wide, p]));
        shapes.push(("emulator.out.b2".into(), vec![p]));
        shapes.push(("emulator.out.skip".into(), vec![wide, p]));
        shapes
    }
}

/// He-style fan-in init: weights `N(0, 2/fan_in)`, biases zero. Fan-in is
/// the product of all but the last dimension for linear weights and
/// `Cin * k` for conv weights.
fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor {
    let is_bias = name.ends_with(".b")
        || name.ends_with(".b1")
        || name.ends_with(".b2");
    if is_bias {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = match shape.len() {
        3 => shape[1] * shape[2],
        2 => shape[0],
        _ => shape.iter().product(),
    };
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn init_params(shapes: &[(String, Vec<usize>)], rng: &mut ChaCha12Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|(name, shape)| init_tensor(name, shape, rng))
        .collect()
}

/// Param leaves registered in a graph, in the owner's storage order.
pub struct Binding {
    pub ids: Vec<NodeId>,
}

fn bind_params(g: &mut Graph, params: &[Tensor]) -> Binding {
    Binding {
        ids: params.iter().map(|t| g.param(t.clone())).collect(),
    }
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = g.matmul(x, w);
    g.add_row_bias(y, b)
}

/// `y = W2 silu(W1 x + b1) + b2 + P x` (projection with a linear skip).
fn residual_projection(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    skip: NodeId,
) -> NodeId {
    let t = linear(g, x, w1, b1);
    let t = g.silu(t);
    let t = linear(g, t, w2, b2);
    let s = g.matmul(x, skip);
    g.add(t, s)
}

/// `y = x + W2 silu(W1 x + b1) + b2` (width-preserving block, identity skip).
fn residual_block(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> NodeId {
    let t = linear(g, x, w1, b1);
    let t = g.silu(t);
    let t = linear(g, t, w2, b2);
    g.add(x, t)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: Vec<Tensor>,
}

impl Encoder {
    pub fn init(spec: EncoderSpec, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.param_shapes(), rng);
        Ok(Self { spec, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Binding {
        bind_params(g, &self.params)
    }

    /// Forward pass through bound parameters. Returns `(embedding, regression)`
    /// node ids; the embedding rows are unit-norm.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, input: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.value(input).shape().to_vec();
        let expect = [0, self.spec.channels, self.spec.crop_len];
        if shape.len() != 3 || shape[1] != expect[1] || shape[2] != expect[2] {
            return Err(CoreError::invalid(format!(
                "encoder input shape {shape:?} does not match (B, {}, {})",
                expect[1], expect[2]
            )));
        }
        let ids = &bind.ids;
        let zero_pad = self.spec.padding == PaddingMode::Zero;
        let mut x = input;
        let mut at = 0;
        for _ in 0..self.spec.conv_widths.len() {
            let c = g.conv1d(x, ids[at], ids[at + 1], self.spec.stride, zero_pad);
            x = g.silu(c);
            at += 2;
        }
        let pooled = g.global_avg_pool(x);
        let pre = linear(g, pooled, ids[at], ids[at + 1]);
        let hidden = g.silu(pre);
        at += 2;
        // Affine head: no nonlinearity past the shared hidden vector.
        let regression = linear(g, hidden, ids[at], ids[at + 1]);
        at += 2;
        let raw = residual_projection(
            g,
            hidden,
            ids[at],
            ids[at + 1],
            ids[at + 2],
            ids[at + 3],
            ids[at + 4],
        );
        let embedding = g.normalize_rows(raw);
        Ok((embedding, regression))
    }

    /// Inference without keeping the tape around.
    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let bind = self.bind(&mut g);
        let (emb, reg) = self.forward(&mut g, &bind, x)?;
        Ok((g.value(emb).clone(), g.value(reg).clone()))
    }
}

#[derive(Debug, Clone)]
pub struct Emulator {
    pub spec: EmulatorSpec,
    pub params: Vec<Tensor>,
}

impl Emulator {
    pub fn init(spec: EmulatorSpec, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.param_shapes(), rng);
        Ok(Self { spec, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Binding {
        bind_params(g, &self.params)
    }

    /// Forward pass: `(B, k)` parameters to `(B, p)` unit-norm embeddings.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, input: NodeId) -> Result<NodeId> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.param_dim {
            return Err(CoreError::invalid(format!(
                "emulator input shape {shape:?} does not match (B, {})",
                self.spec.param_dim
            )));
        }
        let ids = &bind.ids;
        let mut at = 0;
        let mut limbs = Vec::with_capacity(self.spec.param_dim);
        for j in 0..self.spec.param_dim {
            let xj = g.slice_cols(input, j, 1);
            let y = residual_projection(
                g,
                xj,
                ids[at],
                ids[at + 1],
                ids[at + 2],
                ids[at + 3],
                ids[at + 4],
            );
            limbs.push(y);
            at += 5;
        }
        let mut x = g.concat_cols(&limbs);
        for _ in 0..self.spec.blocks {
            x = residual_block(g, x, ids[at], ids[at + 1], ids[at + 2], ids[at + 3]);
            at += 4;
        }
        let raw = residual_projection(
            g,
            x,
            ids[at],
            ids[at + 1],
            ids[at + 2],
            ids[at + 3],
            ids[at + 4],
        );
        Ok(g.normalize_rows(raw))
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let bind = self.bind(&mut g);
        let out = self.forward(&mut g, &bind, x)?;
        Ok(g.value(out).clone())
    }
}

/// Fixed per-feature affine normalization computed on the training set and
/// frozen into the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit from an iterator of feature rows.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let d = v - *m;
                *m += d / n as f64;
                *s += d * (v - *m);
            }
        }
        let std = m2
            .iter()
            .map(|s| (s / n.max(1) as f64).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for i in 0..row.len() {
            out[i] = (row[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn apply_vec(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; row.len()];
        self.apply(row, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn small_encoder() -> Encoder {
        let spec = EncoderSpec {
            crop_len: 8,
            channels: 3,
            conv_widths: vec![4, 6],
            kernel: 3,
            stride: 2,
            hidden_dim: 10,
            embed_dim: 5,
            padding: PaddingMode::Circular,
            regression_dim: 4,
        };
        Encoder::init(spec, &mut derive_rng(1, &[1])).unwrap()
    }

    fn small_emulator() -> Emulator {
        let spec = EmulatorSpec {
            param_dim: 4,
            comp_embed: 3,
            blocks: 3,
            embed_dim: 5,
        };
        Emulator::init(spec, &mut derive_rng(1, &[2])).unwrap()
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, &[3]);
        use rand::Rng;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn encoder_embedding_is_unit_norm() {
        let enc = small_encoder();
        let input = random_input(&[3, 3, 8], 10);
        let (emb, reg) = enc.infer(&input).unwrap();
        assert_eq!(emb.shape(), &[3, 5]);
        assert_eq!(reg.shape(), &[3, 4]);
        for r in 0..3 {
            let norm: f64 = emb.data()[r * 5..(r + 1) * 5].iter().map(|v| v * v).sum();
            assert!((norm.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_head_outputs_zero_regression() {
        let mut enc = small_encoder();
        // head.w and head.b sit right after the conv layers and hidden layer.
        let shapes = enc.spec.param_shapes();
        for (i, (name, _)) in shapes.iter().enumerate() {
            if name.starts_with("encoder.head.") {
                enc.params[i] = Tensor::zeros(enc.params[i].shape());
            }
        }
        let (_, reg) = enc.infer(&random_input(&[2, 3, 8], 11)).unwrap();
        assert!(reg.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_is_affine_in_hidden_vector() {
        // h(a*u) - h(0) = a * (h(u) - h(0)) for the isolated head map.
        let enc = small_encoder();
        let shapes = enc.spec.param_shapes();
        let wi = shapes.iter().position(|(n, _)| n == "encoder.head.w").unwrap();
        let head = |u: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.constant(u.clone());
            let w = g.constant(enc.params[wi].clone());
            let b = g.constant(enc.params[wi + 1].clone());
            let y = linear(&mut g, x, w, b);
            g.value(y).data().to_vec()
        };
        let u = random_input(&[1, 10], 12);
        let zero = Tensor::zeros(&[1, 10]);
        let alpha = 2.75;
        let scaled = Tensor::from_vec(&[1, 10], u.data().iter().map(|v| alpha * v).collect());
        let h_u = head(&u);
        let h_0 = head(&zero);
        let h_au = head(&scaled);
        for j in 0..4 {
            let lhs = h_au[j] - h_0[j];
            let rhs = alpha * (h_u[j] - h_0[j]);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn emulator_output_is_unit_and_deterministic() {
        let emu = small_emulator();
        let phi = Tensor::from_vec(&[2, 4], vec![0.5, -1.0, 0.2, 0.8, 1.5, 0.0, -0.3, 0.4]);
        let a = emu.infer(&phi).unwrap();
        let b = emu.infer(&phi).unwrap();
        assert_eq!(a, b);
        for r in 0..2 {
            let norm: f64 = a.data()[r * 5..(r + 1) * 5].iter().map(|v| v * v).sum();
            assert!((norm.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn emulator_is_continuous_in_inputs() {
        let emu = small_emulator();
        let base = vec![0.5, -1.0, 0.2, 0.8];
        let out0 = emu
            .infer(&Tensor::from_vec(&[1, 4], base.clone()))
            .unwrap();
        let mut prev_dist = f64::INFINITY;
        for &delta in &[1e-1, 1e-2, 1e-3, 1e-4] {
            let mut bumped = base.clone();
            bumped[2] += delta;
            let out = emu.infer(&Tensor::from_vec(&[1, 4], bumped)).unwrap();
            let dist: f64 = out
                .data()
                .iter()
                .zip(out0.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < prev_dist, "distance should shrink with delta");
            prev_dist = dist;
        }
        assert!(prev_dist < 1e-3);
    }

    #[test]
    fn standardizer_normalizes_training_rows() {
        let rows = [
            vec![1.0, 10.0],
            vec![3.0, 30.0],
            vec![5.0, 20.0],
        ];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice()), 2);
        assert!((s.mean[0] - 3.0).abs() < 1e-12);
        assert!((s.mean[1] - 20.0).abs() < 1e-12);
        let z = s.apply_vec(&rows[0]);
        assert!(z[0] < 0.0 && z[1] < 0.0);
        // Degenerate feature keeps a floor std instead of dividing by zero.
        let s2 = Standardizer::fit([vec![2.0, 2.0]].iter().map(|r| r.as_slice()), 2);
        assert!(s2.std.iter().all(|v| *v >= 1e-8));
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let enc = small_encoder();
        assert!(enc.infer(&random_input(&[2, 3, 6], 13)).is_err());
        let emu = small_emulator();
        assert!(emu.infer(&random_input(&[2, 3], 14)).is_err());
    }
}
