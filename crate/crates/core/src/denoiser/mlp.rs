use std::fmt::Write as _;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::data::Condition;
use crate::error::{Error, Result};
use crate::rng::{self, standard_normal};

pub const CHECKPOINT_MAGIC: &str = "difftune-mlp v1";

/// Shape of an [`MlpDenoiser`]. The network input is the noisy point, the
/// sinusoidal time embedding (`2 * time_freqs` features) and the learned
/// condition embedding (`cond_dim` features).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub cond_dim: usize,
    pub num_classes: usize,
}

impl MlpArch {
    /// Three hidden layers of width 128 and 16 time frequencies.
    pub fn standard(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            hidden: vec![128; 3],
            time_freqs: 16,
            cond_dim: 8,
            num_classes,
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim + 2 * self.time_freqs + self.cond_dim
    }

    /// Rows in the condition table: one per class plus the unconditional row.
    pub fn cond_rows(&self) -> usize {
        self.num_classes + 1
    }

    /// `(fan_out, fan_in)` for each affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_width();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.dim, fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.cond_rows() * self.cond_dim
            + self
                .layer_shapes()
                .iter()
                .map(|(o, i)| o * i + o)
                .sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(
                "MLP dimension and hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        let hidden = self
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join("x");
        format!(
            "d={},hidden={},freqs={},cond_dim={},classes={},params={}",
            self.dim,
            hidden,
            self.time_freqs,
            self.cond_dim,
            self.num_classes,
            self.param_count()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    w: usize,
    b: usize,
    fan_out: usize,
    fan_in: usize,
}

/// A batch of regression examples: noisy states, their timesteps and
/// conditions, and the noise each prediction is compared against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub xt: Vec<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<Condition>,
    pub target: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, xt: &[f64], t: usize, cond: Condition, target: &[f64]) {
        self.xt.extend_from_slice(xt);
        self.t.push(t);
        self.cond.push(cond);
        self.target.extend_from_slice(target);
    }

    pub fn extend(&mut self, other: &Batch) {
        self.xt.extend_from_slice(&other.xt);
        self.t.extend_from_slice(&other.t);
        self.cond.extend_from_slice(&other.cond);
        self.target.extend_from_slice(&other.target);
    }
}

/// Noise-predicting multilayer perceptron with SiLU hidden activations and a
/// linear output layer. Parameters live in one flat vector: the condition
/// table first, then each layer's row-major weights followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: MlpArch,
    params: Vec<f64>,
    layers: Vec<LayerSlot>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl MlpDenoiser {
    /// Fan-in scaled Gaussian hidden weights, zero biases, zero output layer,
    /// unit-normal condition embeddings.
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = rng::stream(seed, &[rng::label::INIT]);
        let table = model.arch.cond_rows() * model.arch.cond_dim;
        for v in &mut model.params[..table] {
            *v = standard_normal(&mut rng);
        }
        let hidden = model.layers.len() - 1;
        for slot in model.layers[..hidden].iter().copied() {
            let scale = (1.0 / slot.fan_in as f64).sqrt();
            for v in &mut model.params[slot.w..slot.w + slot.fan_out * slot.fan_in] {
                *v = scale * standard_normal(&mut rng);
            }
        }
        Ok(model)
    }

    fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let mut offset = arch.cond_rows() * arch.cond_dim;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_out, fan_in)| {
                let slot = LayerSlot {
                    w: offset,
                    b: offset + fan_out * fan_in,
                    fan_out,
                    fan_in,
                };
                offset = slot.b + fan_out;
                slot
            })
            .collect();
        Ok(Self {
            params: vec![0.0; arch.param_count()],
            arch,
            layers,
        })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if params.len() != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                actual: params.len(),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Overwrites one row of the condition-embedding table.
    pub fn set_condition_embedding(&mut self, cond: Condition, values: &[f64]) -> Result<()> {
        let row = self.cond_row(cond)?;
        let e = self.arch.cond_dim;
        if values.len() != e {
            return Err(Error::DimensionMismatch {
                expected: e,
                actual: values.len(),
            });
        }
        self.params[row * e..(row + 1) * e].copy_from_slice(values);
        Ok(())
    }

    fn cond_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Unconditional => Ok(self.arch.num_classes),
            Condition::Class(c) if c < self.arch.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::UnknownCondition {
                index: c,
                classes: self.arch.num_classes,
            }),
        }
    }

    fn input_matrix(&self, xt: &[f64], ts: &[usize], conds: &[Condition]) -> Result<Array2<f64>> {
        let d = self.arch.dim;
        let n = ts.len();
        if xt.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                actual: xt.len(),
            });
        }
        if conds.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: conds.len(),
            });
        }
        let k = self.arch.time_freqs;
        let e = self.arch.cond_dim;
        let freqs: Vec<f64> = (0..k)
            .map(|i| (-(10_000f64.ln()) * i as f64 / k as f64).exp())
            .collect();
        let mut input = Array2::zeros((n, self.arch.input_width()));
        for (r, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            row[..d].copy_from_slice(&xt[r * d..(r + 1) * d]);
            let t = ts[r] as f64;
            for (i, f) in freqs.iter().enumerate() {
                row[d + i] = (t * f).sin();
                row[d + k + i] = (t * f).cos();
            }
            let c = self.cond_row(conds[r])?;
            row[d + 2 * k..].copy_from_slice(&self.params[c * e..(c + 1) * e]);
        }
        Ok(input)
    }

    fn weights(&self, slot: LayerSlot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (slot.fan_out, slot.fan_in),
            &self.params[slot.w..slot.w + slot.fan_out * slot.fan_in],
        )
        .expect("layer layout")
    }

    fn affine(&self, slot: LayerSlot, a: &Array2<f64>) -> Array2<f64> {
        let mut z = a.dot(&self.weights(slot).t());
        let b = &self.params[slot.b..slot.b + slot.fan_out];
        for mut row in z.axis_iter_mut(Axis(0)) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        z
    }

    /// Runs the network, keeping every pre-activation for the backward pass.
    fn forward_cached(&self, input: Array2<f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
        let hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden);
        let mut act = input;
        let mut acts = Vec::with_capacity(hidden + 1);
        for (l, &slot) in self.layers[..hidden].iter().enumerate() {
            let z = self.affine(slot, &act);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
            let a = z.mapv(silu);
            acts.push(std::mem::replace(&mut act, a));
            pre.push(z);
        }
        let out = self.affine(self.layers[hidden], &act);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: hidden });
        }
        acts.push(act);
        // acts[l] is the input to layer l; pre[l] is layer l's pre-activation.
        let mut cache = acts;
        cache.extend(pre);
        Ok((cache, out))
    }

    /// Predicted noise for each row of `xt` (row-major, `n x d`).
    pub fn predict(&self, xt: &[f64], ts: &[usize], conds: &[Condition]) -> Result<Vec<f64>> {
        let input = self.input_matrix(xt, ts, conds)?;
        let hidden = self.layers.len() - 1;
        let mut act = input;
        for (l, &slot) in self.layers[..hidden].iter().enumerate() {
            let z = self.affine(slot, &act);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
            act = z.mapv(silu);
        }
        let out = self.affine(self.layers[hidden], &act);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: hidden });
        }
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Predicted noise for a single state.
    pub fn forward(&self, xt: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        self.predict(xt, &[t], &[cond])
    }

    /// Weighted squared error `sum_i w_i * |f(x_i) - target_i|^2` and its
    /// gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, batch: &Batch, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = batch.len();
        let d = self.arch.dim;
        if n == 0 {
            return Err(Error::InvalidDataset("empty training batch".into()));
        }
        if weights.len() != n || batch.target.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Config(format!(
                "example weights must be finite and nonnegative, got {w}"
            )));
        }
        let input = self.input_matrix(&batch.xt, &batch.t, &batch.cond)?;
        let (cache, out) = self.forward_cached(input)?;
        let hidden = self.layers.len() - 1;
        let (acts, pre) = cache.split_at(hidden + 1);

        let mut loss = 0.0;
        let mut dz = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let mut sq = 0.0;
            for j in 0..d {
                let r = out[[i, j]] - batch.target[i * d + j];
                sq += r * r;
                dz[[i, j]] = 2.0 * weights[i] * r;
            }
            loss += weights[i] * sq;
        }

        let mut grad = vec![0.0; self.params.len()];
        for l in (0..=hidden).rev() {
            let slot = self.layers[l];
            let a_in = &acts[l];
            {
                let (head, tail) = grad.split_at_mut(slot.b);
                let mut gw = ArrayViewMut2::from_shape(
                    (slot.fan_out, slot.fan_in),
                    &mut head[slot.w..slot.w + slot.fan_out * slot.fan_in],
                )
                .expect("layer layout");
                general_mat_mul(1.0, &dz.t(), a_in, 0.0, &mut gw);
                for (g, s) in tail[..slot.fan_out].iter_mut().zip(dz.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            let da = dz.dot(&self.weights(slot));
            if l == 0 {
                self.scatter_condition_grad(&batch.cond, &da, &mut grad)?;
            } else {
                let z = &pre[l - 1];
                dz = da;
                dz.zip_mut_with(z, |g, &zv| *g *= silu_grad(zv));
            }
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok((loss, grad))
    }

    fn scatter_condition_grad(
        &self,
        conds: &[Condition],
        d_input: &Array2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        let e = self.arch.cond_dim;
        let start = self.arch.dim + 2 * self.arch.time_freqs;
        for (i, &c) in conds.iter().enumerate() {
            let row = self.cond_row(c)?;
            for k in 0..e {
                grad[row * e + k] += d_input[[i, start + k]];
            }
        }
        Ok(())
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn predict_eps(&self, xt: &[f64], t: usize, cond: Condition, out: &mut [f64]) -> Result<()> {
        let n = xt.len() / self.arch.dim;
        let pred = self.predict(xt, &vec![t; n], &vec![cond; n])?;
        if out.len() != pred.len() {
            return Err(Error::DimensionMismatch {
                expected: pred.len(),
                actual: out.len(),
            });
        }
        out.copy_from_slice(&pred);
        Ok(())
    }
}

pub fn format_checkpoint(model: &MlpDenoiser) -> String {
    let mut out = String::with_capacity(model.params.len() * 24 + 64);
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&model.arch.descriptor());
    out.push('\n');
    for v in &model.params {
        let _ = writeln!(out, "{v:?}");
    }
    out
}

pub fn save_checkpoint(model: &MlpDenoiser, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpDenoiser> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text).map_err(|m| Error::format(path, m))
}

pub fn parse_checkpoint(text: &str) -> std::result::Result<MlpDenoiser, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == CHECKPOINT_MAGIC => {}
        Some(l) => {
            return Err(format!(
                "expected `{CHECKPOINT_MAGIC}`, found `{}`",
                l.trim()
            ))
        }
        None => return Err("empty checkpoint".into()),
    }
    let desc = lines.next().ok_or("missing architecture descriptor")?;
    let mut arch = MlpArch {
        dim: 0,
        hidden: Vec::new(),
        time_freqs: 0,
        cond_dim: 0,
        num_classes: 0,
    };
    let mut declared = None;
    for field in desc.trim().split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed descriptor field `{field}`"))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| format!("invalid value `{v}` for `{k}`"))
        };
        match k {
            "d" => arch.dim = num(v)?,
            "hidden" => {
                arch.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split('x')
                        .map(num)
                        .collect::<std::result::Result<_, _>>()?
                }
            }
            "freqs" => arch.time_freqs = num(v)?,
            "cond_dim" => arch.cond_dim = num(v)?,
            "classes" => arch.num_classes = num(v)?,
            "params" => declared = Some(num(v)?),
            other => return Err(format!("unknown descriptor field `{other}`")),
        }
    }
    let params = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("parameter {i}: invalid value `{}`", l.trim()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if declared.is_some_and(|n| n != arch.param_count()) {
        return Err(format!(
            "descriptor declares {} parameters but the architecture has {}",
            declared.unwrap_or(0),
            arch.param_count()
        ));
    }
    MlpDenoiser::from_params(arch, params).map_err(|e| e.to_string())
}
