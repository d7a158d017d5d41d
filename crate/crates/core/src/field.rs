//! The radiance field: sinusoidal encodings feeding a small ReLU network that
//! predicts density from position and color from position plus view direction.
//!
//! Parameters live in one flat vector so they can be handed to the optimizer
//! and the gradient tape without copies. Layer `l` occupies a `(in × out)`
//! row-major weight block followed by an `out`-long bias.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{self, encode_tensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Highest position frequency index K; `K + 1` octaves are emitted.
    pub k_pos: usize,
    pub k_dir: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { k_pos: 6, k_dir: 2 }
    }
}

impl EncodingConfig {
    pub fn pos_dim(&self) -> usize {
        3 * 2 * (self.k_pos + 1)
    }

    pub fn dir_dim(&self) -> usize {
        3 * 2 * (self.k_dir + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Width of the view-dependent color branch.
    pub color_width: usize,
    /// World positions are multiplied by this before encoding so the scene
    /// fits inside the encoding's period of 2.
    pub pos_scale: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            hidden_width: 64,
            hidden_layers: 4,
            color_width: 32,
            pos_scale: 1.0,
            seed: 42,
        }
    }
}

impl FieldConfig {
    /// `(in, out)` of every affine layer in evaluation order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.hidden_width;
        let mut shapes = vec![(self.encoding.pos_dim(), w)];
        for _ in 1..self.hidden_layers {
            shapes.push((w, w));
        }
        shapes.push((w, 1));
        shapes.push((w + self.encoding.dir_dim(), self.color_width));
        shapes.push((self.color_width, 3));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.color_width == 0 {
            return Err(Error::Invalid("field layers and widths must be positive".into()));
        }
        if !(self.pos_scale.is_finite() && self.pos_scale > 0.0) {
            return Err(Error::Invalid(format!("pos_scale must be positive, got {}", self.pos_scale)));
        }
        Ok(())
    }
}

/// One query point of the field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSample {
    pub position: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl PointSample {
    pub fn new(position: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "sample direction must be unit length, |d| = {}",
                direction.norm()
            )));
        }
        Ok(Self { position, direction })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub layers: Vec<(usize, usize)>,
    pub data: Vec<f64>,
}

/// Batched field outputs; `colors` is `n×3`, `sigmas` has `n` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub colors: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Tape handles for a recorded field evaluation.
pub struct FieldVars {
    pub color: Var,
    pub sigma: Var,
}

pub fn layer_len((i, o): (usize, usize)) -> usize {
    i * o + o
}

/// Per-component sinusoidal encoding of `x` with frequencies `2^k π`, `k = 0..=K`.
pub fn encode(x: &[f64], k: usize) -> Vec<f64> {
    encode_tensor(&Tensor::row(x.to_vec()), k + 1).data
}

impl FieldParams {
    /// He-style uniform initialization, deterministic in `config.seed`.
    pub fn init(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut data = Vec::with_capacity(layers.iter().map(|&l| layer_len(l)).sum());
        for &(i, o) in &layers {
            let bound = (6.0 / i as f64).sqrt();
            data.extend((0..i * o).map(|_| rng.gen_range(-bound..bound)));
            data.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Self { config, layers, data })
    }

    pub fn zeros(config: FieldConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        p.data.iter_mut().for_each(|v| *v = 0.0);
        Ok(p)
    }

    pub fn from_parts(config: FieldConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layers = config.layer_shapes();
        let want: usize = layers.iter().map(|&l| layer_len(l)).sum();
        if data.len() != want {
            return Err(Error::Shape(format!("field expects {want} parameters, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite("field parameters", format!("entry {i}")));
        }
        Ok(Self { config, layers, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Start offset of every layer's weight block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|&l| {
                let o = off;
                off += layer_len(l);
                o
            })
            .collect()
    }

    fn depth(&self) -> usize {
        self.config.hidden_layers
    }

    /// Evaluates a single point.
    pub fn eval(&self, s: &PointSample) -> Result<(Vector3<f64>, f64)> {
        let out = self.eval_batch(s.position.as_slice(), s.direction.as_slice())?;
        Ok((Vector3::from_row_slice(&out.colors), out.sigmas[0]))
    }

    /// Evaluates `n` points given as `n×3` row-major positions and directions.
    pub fn eval_batch(&self, positions: &[f64], directions: &[f64]) -> Result<FieldOutput> {
        let n = positions.len() / 3;
        assert_eq!(directions.len(), positions.len(), "positions/directions length");
        let enc = self.config.encoding;
        let scaled: Vec<f64> = positions.iter().map(|p| p * self.config.pos_scale).collect();
        let mut h = encode_tensor(&Tensor::new(n, 3, scaled), enc.k_pos + 1);
        let offsets = self.offsets();
        let depth = self.depth();
        for l in 0..depth {
            h = self.dense(&h, l, offsets[l]);
            self.check_layer(&h, l)?;
            h.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let sigma_raw = self.dense(&h, depth, offsets[depth]);
        let denc = encode_tensor(&Tensor::new(n, 3, directions.to_vec()), enc.k_dir + 1);
        let cat = concat_cols(&h, &denc);
        let mut c = self.dense(&cat, depth + 1, offsets[depth + 1]);
        self.check_layer(&c, depth + 1)?;
        c.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let rgb = self.dense(&c, depth + 2, offsets[depth + 2]);
        let colors: Vec<f64> = rgb.data.iter().map(|&v| tape::sigmoid(v)).collect();
        let sigmas: Vec<f64> = sigma_raw.data.iter().map(|&v| tape::softplus(v)).collect();
        if let Some(i) = sigmas.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("field layer {depth} (density head)"), format!("sample {i}")));
        }
        if let Some(i) = colors.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("field layer {} (color head)", depth + 2), format!("entry {i}")));
        }
        Ok(FieldOutput { colors, sigmas })
    }

    fn dense(&self, x: &Tensor, layer: usize, off: usize) -> Tensor {
        let (i, o) = self.layers[layer];
        assert_eq!(x.cols, i, "layer {layer} expects {i} inputs");
        let m = x.rows;
        let bias = &self.data[off + i * o..off + i * o + o];
        let mut out = Vec::with_capacity(m * o);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        tape::gemm(m, i, o, 1.0, &x.data, (i, 1), &self.data[off..off + i * o], (o, 1), 1.0, &mut out, (o, 1));
        Tensor::new(m, o, out)
    }

    fn check_layer(&self, t: &Tensor, layer: usize) -> Result<()> {
        match t.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::non_finite(format!("field layer {layer}"), format!("activation {i} is {}", t.data[i]))),
            None => Ok(()),
        }
    }

    /// Records the network on `tape`. `positions` is `n×3` world coordinates;
    /// `dir_enc` holds the already-encoded directions (`n × dir_dim`). With
    /// `param_offset = Some(o)` the weights become parameters whose gradient
    /// lands at `o..o + len()`; with `None` they are constants.
    pub fn record(
        &self,
        tape: &mut Tape,
        param_offset: Option<usize>,
        positions: Var,
        dir_enc: Var,
    ) -> Result<FieldVars> {
        let offsets = self.offsets();
        let leaf = |tape: &mut Tape, l: usize| -> (Var, Var) {
            let (i, o) = self.layers[l];
            let off = offsets[l];
            let w = Tensor::new(i, o, self.data[off..off + i * o].to_vec());
            let b = Tensor::new(1, o, self.data[off + i * o..off + i * o + o].to_vec());
            match param_offset {
                Some(base) => (tape.param(w, base + off), tape.param(b, base + off + i * o)),
                None => (tape.constant(w), tape.constant(b)),
            }
        };
        let depth = self.depth();
        let scaled = tape.scale(positions, self.config.pos_scale);
        let mut h = tape.encode(scaled, self.config.encoding.k_pos + 1);
        for l in 0..depth {
            let (w, b) = leaf(tape, l);
            let z = tape.affine(h, w, Some(b));
            self.check_layer(tape.value(z), l)?;
            h = tape.relu(z);
        }
        let (w, b) = leaf(tape, depth);
        let sigma_raw = tape.affine(h, w, Some(b));
        let sigma = tape.softplus(sigma_raw);
        let cat = tape.concat_cols(&[h, dir_enc]);
        let (w, b) = leaf(tape, depth + 1);
        let z = tape.affine(cat, w, Some(b));
        self.check_layer(tape.value(z), depth + 1)?;
        let c = tape.relu(z);
        let (w, b) = leaf(tape, depth + 2);
        let rgb = tape.affine(c, w, Some(b));
        let color = tape.sigmoid(rgb);
        self.check_layer(tape.value(sigma), depth)?;
        self.check_layer(tape.value(color), depth + 2)?;
        Ok(FieldVars { color, sigma })
    }
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for r in 0..a.rows {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Tensor::new(a.rows, cols, data)
}
