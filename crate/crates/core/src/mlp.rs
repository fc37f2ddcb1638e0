//! Small dense feed-forward networks with hand-written reverse- and
//! forward-mode derivatives, spectral normalization and a flat binary
//! checkpoint format.
//!
//! Parameters are ordered canonically: layer by layer, the weight matrix in
//! row-major `(out, in)` order followed by the bias vector. [`FlatGrad`] and
//! the checkpoint payload use the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `(n_out, n_in)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// One activation per hidden layer; the output layer is linear.
    pub activations: Vec<Activation>,
    /// Persistent left singular vector estimate per layer for power iteration.
    pub spectral_state: Vec<Option<Vec<f64>>>,
}

/// Parameter-space vector in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad(pub Vec<f64>);

impl FlatGrad {
    pub fn zeros(n: usize) -> Self {
        FlatGrad(vec![0.0; n])
    }

    pub fn dot(&self, other: &FlatGrad) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Activations recorded by [`MlpParams::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub batch: usize,
    /// Input to each layer, `batch x n_in`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer, `batch x n_out`.
    pre: Vec<Vec<f64>>,
}

impl BatchCache {
    /// Network output, `batch x n_out` row-major.
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has layers")
    }
}

impl MlpParams {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation)?;
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        let layers: Vec<Layer> = sizes
            .windows(2)
            .map(|w| Layer {
                n_in: w[0],
                n_out: w[1],
                weight: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
            })
            .collect();
        let n = layers.len();
        Ok(MlpParams {
            layers,
            activations: vec![activation; n - 1],
            spectral_state: vec![None; n],
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("network has no layers"));
        }
        if self.activations.len() + 1 != self.layers.len() {
            return Err(Error::domain("need one activation per hidden layer"));
        }
        for w in self.layers.windows(2) {
            if w[0].n_out != w[1].n_in {
                return Err(Error::domain("layer dimensions do not compose"));
            }
        }
        for l in &self.layers {
            if l.weight.len() != l.n_in * l.n_out || l.bias.len() != l.n_out {
                return Err(Error::domain("layer buffer has wrong size"));
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::domain("non-finite parameter"));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> FlatGrad {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        FlatGrad(out)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::domain(format!(
                "flat vector has {} entries, network has {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    /// `self += alpha * dir`.
    pub fn axpy(&mut self, alpha: f64, dir: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w += alpha * dir[k];
                k += 1;
            }
        }
    }

    /// Polyak averaging `self <- tau * online + (1 - tau) * self`.
    pub fn polyak_from(&mut self, online: &MlpParams, tau: f64) {
        if tau == 1.0 {
            self.layers.clone_from(&online.layers);
            return;
        }
        if tau == 0.0 {
            return;
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            for (a, b) in t
                .weight
                .iter_mut()
                .chain(t.bias.iter_mut())
                .zip(o.weight.iter().chain(&o.bias))
            {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.n_in() {
            return Err(Error::domain(format!(
                "input has {} entries, network expects {}",
                input.len(),
                self.n_in()
            )));
        }
        Ok(self.forward_batch(input, 1).output().to_vec())
    }

    /// Forward pass over `batch` inputs stored row-major in `x`.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> BatchCache {
        debug_assert_eq!(x.len(), batch * self.n_in());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; batch * l.n_out];
            for b in 0..batch {
                let xin = &current[b * l.n_in..(b + 1) * l.n_in];
                let zout = &mut z[b * l.n_out..(b + 1) * l.n_out];
                for (o, zo) in zout.iter_mut().enumerate() {
                    let row = &l.weight[o * l.n_in..(o + 1) * l.n_in];
                    let mut acc = l.bias[o];
                    for (w, xi) in row.iter().zip(xin) {
                        acc += w * xi;
                    }
                    *zo = acc;
                }
            }
            let next = match self.activations.get(li) {
                Some(&act) => z.iter().map(|&v| act.apply(v)).collect(),
                None => Vec::new(),
            };
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        BatchCache { batch, inputs, pre }
    }

    /// Accumulates `sum_b J_b^T cot_b` into `grad` (canonical order).
    pub fn backward_batch(&self, cache: &BatchCache, cot: &[f64], grad: &mut [f64]) {
        let batch = cache.batch;
        let offsets = self.layer_offsets();
        let mut delta = cot.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let xin = &cache.inputs[li];
            let off = offsets[li];
            let (gw, rest) = grad[off..off + l.n_params()].split_at_mut(l.weight.len());
            for b in 0..batch {
                let d = &delta[b * l.n_out..(b + 1) * l.n_out];
                let xi = &xin[b * l.n_in..(b + 1) * l.n_in];
                for o in 0..l.n_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    rest[o] += dv;
                    let row = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                    for (g, x) in row.iter_mut().zip(xi) {
                        *g += dv * x;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let act = self.activations[li - 1];
            let zprev = &cache.pre[li - 1];
            let mut next = vec![0.0; batch * l.n_in];
            for b in 0..batch {
                let d = &delta[b * l.n_out..(b + 1) * l.n_out];
                let nd = &mut next[b * l.n_in..(b + 1) * l.n_in];
                for o in 0..l.n_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &l.weight[o * l.n_in..(o + 1) * l.n_in];
                    for (n, w) in nd.iter_mut().zip(row) {
                        *n += dv * w;
                    }
                }
                for (i, n) in nd.iter_mut().enumerate() {
                    *n *= act.slope(zprev[b * l.n_in + i]);
                }
            }
            delta = next;
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offs.push(k);
            k += l.n_params();
        }
        offs
    }

    /// Reverse-mode parameter gradient `J(x)^T cotangent`.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<FlatGrad> {
        if input.len() != self.n_in() || cotangent.len() != self.n_out() {
            return Err(Error::domain("vjp shape mismatch"));
        }
        let cache = self.forward_batch(input, 1);
        let mut g = vec![0.0; self.n_params()];
        self.backward_batch(&cache, cotangent, &mut g);
        Ok(FlatGrad(g))
    }

    /// Forward-mode product `J(x) tangent` with respect to the parameters.
    pub fn jvp_params(&self, input: &[f64], tangent: &FlatGrad) -> Result<Vec<f64>> {
        if input.len() != self.n_in() {
            return Err(Error::domain("jvp input shape mismatch"));
        }
        if tangent.0.len() != self.n_params() {
            return Err(Error::domain(format!(
                "tangent has {} entries, network has {} parameters",
                tangent.0.len(),
                self.n_params()
            )));
        }
        let mut x = input.to_vec();
        let mut dx = vec![0.0; input.len()];
        let mut k = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let dw = &tangent.0[k..k + l.weight.len()];
            let db = &tangent.0[k + l.weight.len()..k + l.n_params()];
            k += l.n_params();
            let mut z = vec![0.0; l.n_out];
            let mut dz = vec![0.0; l.n_out];
            for o in 0..l.n_out {
                let row = &l.weight[o * l.n_in..(o + 1) * l.n_in];
                let drow = &dw[o * l.n_in..(o + 1) * l.n_in];
                let mut acc = l.bias[o];
                let mut dacc = db[o];
                for i in 0..l.n_in {
                    acc += row[i] * x[i];
                    dacc += drow[i] * x[i] + row[i] * dx[i];
                }
                z[o] = acc;
                dz[o] = dacc;
            }
            match self.activations.get(li) {
                Some(&act) => {
                    dx = dz
                        .iter()
                        .zip(&z)
                        .map(|(d, &zz)| d * act.slope(zz))
                        .collect();
                    x = z.iter().map(|&zz| act.apply(zz)).collect();
                }
                None => {
                    x = z;
                    dx = dz;
                }
            }
        }
        let _ = x;
        Ok(dx)
    }

    /// Divides each weight matrix by its estimated largest singular value when
    /// that estimate exceeds 1. The estimate comes from `power_iters` rounds of
    /// power iteration, continued from the stored vector when there is one.
    pub fn spectral_normalize(&self, power_iters: usize) -> MlpParams {
        let mut out = self.clone();
        out.spectral_normalize_in_place(power_iters);
        out
    }

    pub fn spectral_normalize_in_place(&mut self, power_iters: usize) {
        let iters = power_iters.max(1);
        for (li, l) in self.layers.iter_mut().enumerate() {
            let state = self.spectral_state[li].take();
            let (sigma, u) = top_singular(l, state, iters);
            if sigma > 1.0 {
                l.weight.iter_mut().for_each(|w| *w /= sigma);
            }
            self.spectral_state[li] = Some(u);
        }
    }

    /// Largest singular value estimate of each layer's weight.
    pub fn spectral_norms(&self, power_iters: usize) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| top_singular(l, None, power_iters.max(1)).0)
            .collect()
    }

    /// Writes the binary parameter file and a `<path>.json` metadata sidecar.
    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (li, l) in self.layers.iter().enumerate() {
            w.write_all(&(l.n_in as u32).to_le_bytes())?;
            w.write_all(&(l.n_out as u32).to_le_bytes())?;
            let code = self
                .activations
                .get(li)
                .map(|a| a.code())
                .unwrap_or(LINEAR_CODE);
            w.write_all(&[code])?;
        }
        for v in self.flatten().0 {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            seed,
            sizes: self.sizes(),
            activations: self.activations.clone(),
            n_params: self.n_params(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(MlpParams, CheckpointMeta)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_layers = read_u32(&mut r)? as usize;
        let mut sizes = Vec::with_capacity(n_layers + 1);
        let mut activations = Vec::new();
        for li in 0..n_layers {
            let n_in = read_u32(&mut r)? as usize;
            let n_out = read_u32(&mut r)? as usize;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            if li == 0 {
                sizes.push(n_in);
            } else if sizes.last() != Some(&n_in) {
                return Err(Error::Format("layer shapes do not compose".into()));
            }
            sizes.push(n_out);
            if li + 1 < n_layers {
                activations.push(Activation::from_code(code[0])?);
            } else if code[0] != LINEAR_CODE {
                return Err(Error::Format("output layer must be linear".into()));
            }
        }
        let act = activations.first().copied().unwrap_or(Activation::Tanh);
        let mut p = MlpParams::zeros(&sizes, act).map_err(|e| Error::Format(e.to_string()))?;
        p.activations = activations;
        let mut flat = vec![0.0; p.n_params()];
        let mut buf = [0u8; 8];
        for v in &mut flat {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        p.set_flat(&flat)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if meta.sizes != p.sizes() || meta.n_params != p.n_params() {
            return Err(Error::Format(
                "sidecar metadata does not match payload".into(),
            ));
        }
        Ok((p, meta))
    }
}

/// Checkpoint byte layout (all integers little-endian):
///
/// ```text
/// magic        4 bytes  "PXQM"
/// version      u32      = 1
/// n_layers     u32
/// per layer:   n_in u32, n_out u32, activation u8 (0 tanh, 1 relu, 255 linear)
/// payload      f64 x n_params, canonical order
/// ```
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PXQM";
pub const CHECKPOINT_VERSION: u32 = 1;
const LINEAR_CODE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub n_params: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn top_singular(l: &Layer, state: Option<Vec<f64>>, iters: usize) -> (f64, Vec<f64>) {
    let (m, n) = (l.n_out, l.n_in);
    let mut u = match state {
        Some(u) if u.len() == m && u.iter().any(|v| *v != 0.0) => u,
        // deterministic start with no zero components
        _ => (0..m).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect(),
    };
    normalize(&mut u);
    let mut v = vec![0.0; n];
    for _ in 0..iters {
        v.fill(0.0);
        for o in 0..m {
            let row = &l.weight[o * n..(o + 1) * n];
            for (vi, w) in v.iter_mut().zip(row) {
                *vi += w * u[o];
            }
        }
        if normalize(&mut v) == 0.0 {
            return (0.0, u);
        }
        for o in 0..m {
            let row = &l.weight[o * n..(o + 1) * n];
            u[o] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        if normalize(&mut u) == 0.0 {
            return (0.0, u);
        }
    }
    let mut sigma = 0.0;
    for o in 0..m {
        let row = &l.weight[o * n..(o + 1) * n];
        sigma += u[o] * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    }
    (sigma.abs(), u)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n_params: usize) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut MlpParams, grad: &[f64]) {
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v + g;
        }
        params.axpy(-self.lr, &self.velocity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(sizes: &[usize], seed: u64) -> MlpParams {
        MlpParams::new(
            sizes,
            Activation::Tanh,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[2, 8, 3], Activation::Tanh).unwrap();
        assert_eq!(p.forward(&[0.3, -1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut p = MlpParams::zeros(&[2, 2], Activation::Tanh).unwrap();
        p.layers[0].weight = vec![1.0, 2.0, -1.0, 0.5];
        p.layers[0].bias = vec![0.1, -0.2];
        let y = p.forward(&[3.0, 4.0]).unwrap();
        assert!(
            (y[0] - 11.1).abs() < 1e-14 && (y[1] + 1.2).abs() < 1e-14,
            "{y:?}"
        );
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = net(&[2, 4, 1], 0);
        assert!(p.forward(&[1.0]).is_err());
        assert!(p.vjp(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(p.jvp_params(&[1.0, 2.0], &FlatGrad::zeros(3)).is_err());
    }

    #[test]
    fn linear_vjp_and_jvp_closed_form() {
        let mut p = MlpParams::zeros(&[2, 2], Activation::Tanh).unwrap();
        p.layers[0].weight = vec![0.5, -1.0, 2.0, 0.0];
        let x = [3.0, -2.0];
        let g = p.vjp(&x, &[1.5, -0.5]).unwrap();
        // dW = c x^T, db = c
        assert_eq!(g.0, vec![4.5, -3.0, -1.5, 1.0, 1.5, -0.5]);
        let t = FlatGrad(vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(p.jvp_params(&x, &t).unwrap(), vec![3.0, -4.0]);
        assert_eq!(p.vjp(&x, &[0.0, 0.0]).unwrap().0, vec![0.0; 6]);
        assert_eq!(p.jvp_params(&x, &FlatGrad::zeros(6)).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let p = net(&[2, 16, 16, 1], 7);
        let x = [0.3, 0.7];
        let g = p.vjp(&x, &[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir: Vec<f64> = (0..p.n_params())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let h = 1e-5;
        let mut pp = p.clone();
        pp.axpy(h, &dir);
        let mut pm = p.clone();
        pm.axpy(-h, &dir);
        let fd = (pp.forward(&x).unwrap()[0] - pm.forward(&x).unwrap()[0]) / (2.0 * h);
        let an: f64 = g.0.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
    }

    #[test]
    fn relu_backward_masks_inactive_units() {
        let mut p = MlpParams::zeros(&[1, 2, 1], Activation::Relu).unwrap();
        p.layers[0].weight = vec![1.0, -1.0];
        p.layers[1].weight = vec![1.0, 1.0];
        let g = p.vjp(&[2.0], &[1.0]).unwrap();
        // only the first hidden unit is active
        assert_eq!(g.0, vec![2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn spectral_examples() {
        let mut p = MlpParams::zeros(&[2, 2], Activation::Tanh).unwrap();
        p.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(
            p.spectral_normalize(30).layers[0].weight,
            vec![1.0, 0.0, 0.0, 1.0]
        );
        p.layers[0].weight = vec![2.0, 0.0, 0.0, 1.0];
        let n = p.spectral_normalize(30).layers[0].weight.clone();
        for (a, b) in n.iter().zip([1.0, 0.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-9, "{n:?}");
        }
        let mut s = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        s.layers[0].weight = vec![3.0];
        assert!((s.spectral_normalize(1).layers[0].weight[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn polyak_extremes() {
        let online = net(&[2, 4, 5], 1);
        let mut target = net(&[2, 4, 5], 2);
        let frozen = target.clone();
        target.polyak_from(&online, 0.0);
        assert_eq!(target.layers, frozen.layers);
        target.polyak_from(&online, 1.0);
        assert_eq!(target.layers, online.layers);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("critic.bin");
        let p = net(&[2, 6, 5], 4);
        p.save(&path, 42).unwrap();
        let (q, meta) = MlpParams::load(&path).unwrap();
        assert_eq!(q.layers, p.layers);
        assert_eq!(meta.seed, 42);
        assert_eq!(meta.sizes, vec![2, 6, 5]);
        let bytes = std::fs::read(&path).unwrap();
        let header = 4 + 4 + 4 + 2 * 9;
        assert_eq!(bytes.len(), header + 8 * p.n_params());
        assert_eq!(&bytes[..4], b"PXQM");
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        net(&[2, 3, 1], 0).save(&path, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(MlpParams::load(&path).is_err());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MlpParams::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let mut opt = Sgd::new(0.1, 0.5, 2);
        opt.step(&mut p, &[1.0, 0.0]);
        opt.step(&mut p, &[1.0, 0.0]);
        // v1 = 1, v2 = 0.5 * 1 + 1
        assert!((p.layers[0].weight[0] + 0.25).abs() < 1e-12);
    }
}
