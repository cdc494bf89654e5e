//! Multilayer perceptron with an exposed representation layer.
//!
//! The network is `x -> [affine -> relu]* -> affine -> logits`. The output of
//! the last relu is the representation `z` that alignment penalties and
//! representation diagnostics attach to; the logits feed `log_softmax` for the
//! posterior. With no hidden layers `z` is the input itself.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HirError, Result};

pub const CHECKPOINT_MAGIC: &str = "HIRNET-CKPT-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dim, hidden dims..., class count.
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self { layer_sizes, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(HirError::Config(format!(
                "an MLP needs at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(HirError::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(HirError::Config("class count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Layer weights stored flat as `[W0, b0, W1, b1, ...]`, where `Wl` is
/// `fan_in x fan_out` and `bl` is `1 x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layer_sizes: Vec<usize>,
    tensors: Vec<Tensor>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub z: Var,
    pub logits: Var,
}

/// Glorot-uniform weights, zero biases, deterministic in `spec.seed`.
pub fn init(spec: &MlpSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensors = Vec::with_capacity(2 * (spec.layer_sizes.len() - 1));
    for pair in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        tensors.push(Tensor::new(fan_in, fan_out, data)?);
        tensors.push(Tensor::zeros(1, fan_out));
    }
    Ok(ModelParams {
        layer_sizes: spec.layer_sizes.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Assembles parameters from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(HirError::Config("at least one layer required".into()));
        }
        let mut sizes = vec![layers[0].0.rows()];
        let mut tensors = Vec::with_capacity(layers.len() * 2);
        for (l, (w, b)) in layers.into_iter().enumerate() {
            if w.rows() != *sizes.last().unwrap() {
                return Err(HirError::Shape(format!(
                    "layer {l} weight has {} rows, previous layer emits {}",
                    w.rows(),
                    sizes.last().unwrap()
                )));
            }
            if b.shape() != (1, w.cols()) {
                return Err(HirError::Shape(format!(
                    "layer {l} bias is {}x{}, expected 1x{}",
                    b.rows(),
                    b.cols(),
                    w.cols()
                )));
            }
            sizes.push(w.cols());
            tensors.push(w);
            tensors.push(b);
        }
        Ok(Self {
            layer_sizes: sizes,
            tensors,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn attach(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn attach_frozen(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Representation and logits without keeping a graph around.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.attach_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &vars, xv)?;
        Ok((g.value(out.z).clone(), g.value(out.logits).clone()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x).map(|(_, logits)| logits)
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_checkpoint_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }

    /// Text checkpoint: magic line, layer sizes, then each tensor as a
    /// `weight|bias <layer> <rows> <cols>` header followed by one line of
    /// row-major values per row.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        writeln!(s, "layers {}", sizes.join(" ")).unwrap();
        for (i, t) in self.tensors.iter().enumerate() {
            let kind = if i % 2 == 0 { "weight" } else { "bias" };
            writeln!(s, "{kind} {} {} {}", i / 2, t.rows(), t.cols()).unwrap();
            for row in t.iter_rows() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(s, "{}", vals.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn read_checkpoint(reader: impl Read) -> Result<Self> {
        let bad = |msg: String| HirError::Format(format!("checkpoint: {msg}"));
        let mut lines = BufReader::new(reader).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(HirError::from)
        };

        let magic = next()?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic header {magic:?}")));
        }
        let header = next()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("layers") {
            return Err(bad("missing layers line".into()));
        }
        let sizes = parts
            .map(|p| p.parse::<usize>().map_err(|e| bad(format!("layer size {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        MlpSpec::new(sizes.clone(), 0)
            .validate()
            .map_err(|e| bad(e.to_string()))?;

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let mut read_tensor = |kind: &str, rows: usize, cols: usize| -> Result<Tensor> {
                let head = next()?;
                let expected = format!("{kind} {l} {rows} {cols}");
                if head.split_whitespace().collect::<Vec<_>>().join(" ") != expected {
                    return Err(bad(format!("expected {expected:?}, found {head:?}")));
                }
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let line = next()?;
                    let before = data.len();
                    for tok in line.split_whitespace() {
                        data.push(
                            tok.parse::<f64>()
                                .map_err(|e| bad(format!("value {tok:?}: {e}")))?,
                        );
                    }
                    if data.len() - before != cols {
                        return Err(bad(format!("{kind} {l}: row has wrong length")));
                    }
                }
                Tensor::new(rows, cols, data)
            };
            let w = read_tensor("weight", sizes[l], sizes[l + 1])?;
            let b = read_tensor("bias", 1, sizes[l + 1])?;
            layers.push((w, b));
        }
        let params = Self::from_layers(layers)?;
        if !params.is_finite() {
            return Err(bad("non-finite parameter values".into()));
        }
        Ok(params)
    }
}

/// Records one forward pass. `x` must have `input_dim` columns.
pub fn forward(g: &mut Graph, params: &ParamVars, x: Var) -> Result<Forward> {
    let vars = params.as_slice();
    let layers = vars.len() / 2;
    let input_dim = vars[0].rows();
    if x.cols() != input_dim {
        return Err(HirError::Shape(format!(
            "input has {} features, model expects {input_dim}",
            x.cols()
        )));
    }
    let mut h = x;
    for l in 0..layers - 1 {
        let a = g.matmul(h, vars[2 * l])?;
        let a = g.add_row_bias(a, vars[2 * l + 1])?;
        h = g.relu(a);
    }
    let z = h;
    let a = g.matmul(z, vars[2 * (layers - 1)])?;
    let logits = g.add_row_bias(a, vars[2 * layers - 1])?;
    Ok(Forward { z, logits })
}
