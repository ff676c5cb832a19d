//! U-Net noise predictor with sinusoidal time conditioning.
//!
//! Layout for `L` levels of widths `w_l = base_width * width_mult[l]`:
//!
//! ```text
//! conv_in -> [res blocks (+attn) -> stride-2 conv] x (L-1) -> res blocks (+attn)
//!         -> mid res block (+attn)
//!         -> [res blocks on concat(h, skip) (+attn) -> upsample + conv] x (L-1) -> ...
//!         -> group norm -> SiLU -> conv_out (zero-initialised)
//! ```
//!
//! Every residual block receives a projection of the time embedding, added per
//! channel after its second normalisation so the shift is not normalised away.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{time_embeddings, Graph, ParameterStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Total packed channels; the network predicts noise for all of them.
    pub in_channels: usize,
    pub base_width: usize,
    pub width_mult: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    /// Self-attention after the residual blocks of each level.
    pub attention: Vec<bool>,
    /// Number of diffusion steps the model is conditioned on; valid `t` is `1..=timesteps`.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 2,
            base_width: 32,
            width_mult: vec![1, 2],
            res_blocks: 1,
            time_dim: 32,
            attention: vec![false, true],
            timesteps: 1000,
        }
    }
}

/// Group count used by every normalisation layer of a given width.
pub fn norm_groups(channels: usize) -> usize {
    channels.min(8)
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.width_mult.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.width_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("denoiser: {m}")));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.levels() < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels()));
        }
        if self.attention.len() != self.levels() {
            return bad(format!(
                "attention has {} entries for {} levels",
                self.attention.len(),
                self.levels()
            ));
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be positive".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim must be even, got {}", self.time_dim));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive".into());
        }
        for l in 0..self.levels() {
            let w = self.width(l);
            if w == 0 || w % norm_groups(w) != 0 {
                return bad(format!("level {l} width {w} not divisible by {} groups", norm_groups(w)));
            }
        }
        Ok(())
    }

    /// Spatial extents must survive `levels - 1` halvings.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.levels() - 1);
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {h}x{w} not divisible by {f} for {} levels",
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Parameter shapes for a config, in construction order.
fn layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let t = cfg.time_dim;
    let conv = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize, k: usize, init: Init| {
        out.push((format!("{name}.w"), vec![cout, cin, k, k], init));
        out.push((format!("{name}.b"), vec![cout], Init::Zero));
    };
    let linear = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, din: usize, dout: usize| {
        out.push((format!("{name}.w"), vec![dout, din], Init::FanIn));
        out.push((format!("{name}.b"), vec![dout], Init::Zero));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize| {
        out.push((format!("{name}.gain"), vec![c], Init::One));
        out.push((format!("{name}.bias"), vec![c], Init::Zero));
    };
    let res = |out: &mut Vec<_>, name: &str, cin: usize, cout: usize| {
        norm(out, &format!("{name}.norm1"), cin);
        conv(out, &format!("{name}.conv1"), cin, cout, 3, Init::FanIn);
        linear(out, &format!("{name}.time"), t, cout);
        norm(out, &format!("{name}.norm2"), cout);
        conv(out, &format!("{name}.conv2"), cout, cout, 3, Init::FanIn);
        if cin != cout {
            conv(out, &format!("{name}.skip"), cin, cout, 1, Init::FanIn);
        }
    };
    let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize| {
        norm(out, &format!("{name}.norm"), c);
        for part in ["q", "k", "v", "proj"] {
            out.push((format!("{name}.{part}.w"), vec![c, c, 1, 1], Init::FanIn));
            // A key bias shifts every score of a query equally, which softmax ignores.
            if part != "k" {
                out.push((format!("{name}.{part}.b"), vec![c], Init::Zero));
            }
        }
    };

    linear(&mut out, "time.fc1", t, t);
    linear(&mut out, "time.fc2", t, t);
    conv(&mut out, "conv_in", cfg.in_channels, cfg.width(0), 3, Init::FanIn);
    let levels = cfg.levels();
    let mut ch = cfg.width(0);
    for l in 0..levels {
        let w = cfg.width(l);
        for r in 0..cfg.res_blocks {
            res(&mut out, &format!("down.{l}.res.{r}"), ch, w);
            ch = w;
            if cfg.attention[l] {
                attn(&mut out, &format!("down.{l}.attn.{r}"), w);
            }
        }
        if l + 1 < levels {
            conv(&mut out, &format!("down.{l}.downsample"), w, w, 3, Init::FanIn);
        }
    }
    res(&mut out, "mid.res", ch, ch);
    if cfg.attention[levels - 1] {
        attn(&mut out, "mid.attn", ch);
    }
    for l in (0..levels).rev() {
        let w = cfg.width(l);
        for r in 0..cfg.res_blocks {
            res(&mut out, &format!("up.{l}.res.{r}"), ch + w, w);
            ch = w;
            if cfg.attention[l] {
                attn(&mut out, &format!("up.{l}.attn.{r}"), w);
            }
        }
        if l > 0 {
            let below = cfg.width(l - 1);
            conv(&mut out, &format!("up.{l}.upsample"), w, below, 3, Init::FanIn);
            ch = below;
        }
    }
    norm(&mut out, "out.norm", ch);
    conv(&mut out, "out.conv", ch, cfg.in_channels, 3, Init::Zero);
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zero,
    One,
    FanIn,
}

/// Noise-prediction network `f(z_t, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParameterStore,
}

impl DenoiserModel {
    /// Fan-in scaled normal initialisation; the output convolution starts at zero.
    pub fn build(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Zero => Tensor::zeros(shape),
                Init::One => Tensor::ones(shape),
                Init::FanIn => {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (1.0 / fan_in as f64).sqrt();
                    rng.normal_tensor(shape).map(|v| v * std)
                }
            };
            params.insert(name, t)?;
        }
        Ok(DenoiserModel { config, params })
    }

    /// Wrap existing parameters, checking them against the config's layout.
    pub fn from_params(config: DenoiserConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Data(format!(
                "denoiser expects {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let p = params.get(name)?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("denoiser parameter", shape, p.shape()));
            }
        }
        Ok(DenoiserModel { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, shape: &[usize], ts: &[usize]) -> Result<()> {
        let (n, c, h, w) = match *shape {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("predict_noise", shape, &[0, self.config.in_channels, 0, 0])),
        };
        if c != self.config.in_channels {
            return Err(Error::shape("predict_noise", shape, &[n, self.config.in_channels, h, w]));
        }
        if ts.len() != n {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {n}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.timesteps) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.config.timesteps
            )));
        }
        self.config.check_resolution(h, w)
    }

    /// Record the forward pass on `g`. Parameters become graph variables when
    /// `trainable`, constants otherwise.
    pub fn forward(&self, g: &mut Graph, z: Var, ts: &[usize], trainable: bool) -> Result<Var> {
        self.check_input(g.value(z).shape(), ts)?;
        let temb = time_embeddings(ts, self.config.time_dim)?;
        let mut b = Binder { g, params: &self.params, vars: HashMap::new(), trainable };
        unet(&mut b, &self.config, z, temb)
    }

    /// Inference without gradient tracking.
    pub fn predict_noise(&self, z: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone())?;
        let out = self.forward(&mut g, zv, ts, false)?;
        Ok(g.value(out).clone())
    }
}

struct Binder<'a> {
    g: &'a mut Graph,
    params: &'a ParameterStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl Binder<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.trainable { self.g.param(name, t)? } else { self.g.constant(t)? };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let bias = format!("{name}.b");
        let b = if self.has(&bias) {
            self.p(&bias)?
        } else {
            let k = self.g.value(w).shape()[0];
            self.g.constant(Tensor::zeros(vec![k]))?
        };
        let k = self.g.value(w).shape()[2];
        self.g.conv2d(x, w, b, stride, k / 2)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gain = self.p(&format!("{name}.gain"))?;
        let bias = self.p(&format!("{name}.bias"))?;
        let c = self.g.value(x).shape()[1];
        self.g.group_norm(x, norm_groups(c), gain, bias)
    }

    fn has(&self, name: &str) -> bool {
        self.params.get(name).is_ok()
    }

    fn res_block(&mut self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = self.g.silu(h)?;
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let t = self.linear(&format!("{name}.time"), temb)?;
        let h = self.g.add_channel(h, t)?;
        let h = self.g.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let skip = if self.has(&format!("{name}.skip.w")) {
            self.conv(&format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        self.g.add(h, skip)
    }

    /// Single-head self-attention over spatial positions.
    fn attention(&mut self, name: &str, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.g.value(x).dims4("attention")?;
        let l = h * w;
        let xn = self.norm(&format!("{name}.norm"), x)?;
        let q = self.conv(&format!("{name}.q"), xn, 1)?;
        let k = self.conv(&format!("{name}.k"), xn, 1)?;
        let v = self.conv(&format!("{name}.v"), xn, 1)?;
        let q = self.g.reshape(q, &[n, c, l])?;
        let k = self.g.reshape(k, &[n, c, l])?;
        let v = self.g.reshape(v, &[n, c, l])?;
        let qt = self.g.transpose(q)?;
        let scores = self.g.matmul(qt, k)?;
        let scores = self.g.scale(scores, 1.0 / (c as f64).sqrt())?;
        let attn = self.g.softmax(scores)?;
        let attn_t = self.g.transpose(attn)?;
        let out = self.g.matmul(v, attn_t)?;
        let out = self.g.reshape(out, &[n, c, h, w])?;
        let out = self.conv(&format!("{name}.proj"), out, 1)?;
        self.g.add(x, out)
    }
}

fn unet(b: &mut Binder, cfg: &DenoiserConfig, z: Var, temb: Tensor) -> Result<Var> {
    let temb = b.g.constant(temb)?;
    let t = b.linear("time.fc1", temb)?;
    let t = b.g.silu(t)?;
    let t = b.linear("time.fc2", t)?;
    let temb = b.g.silu(t)?;

    let levels = cfg.levels();
    let mut h = b.conv("conv_in", z, 1)?;
    let mut skips = Vec::new();
    for l in 0..levels {
        for r in 0..cfg.res_blocks {
            h = b.res_block(&format!("down.{l}.res.{r}"), h, temb)?;
            if cfg.attention[l] {
                h = b.attention(&format!("down.{l}.attn.{r}"), h)?;
            }
            skips.push(h);
        }
        if l + 1 < levels {
            h = b.conv(&format!("down.{l}.downsample"), h, 2)?;
        }
    }
    h = b.res_block("mid.res", h, temb)?;
    if cfg.attention[levels - 1] {
        h = b.attention("mid.attn", h)?;
    }
    for l in (0..levels).rev() {
        for r in 0..cfg.res_blocks {
            let skip = skips.pop().expect("one skip per down block");
            let cat = b.g.concat_channels(h, skip)?;
            h = b.res_block(&format!("up.{l}.res.{r}"), cat, temb)?;
            if cfg.attention[l] {
                h = b.attention(&format!("up.{l}.attn.{r}"), h)?;
            }
        }
        if l > 0 {
            let up = b.g.upsample2x(h)?;
            h = b.conv(&format!("up.{l}.upsample"), up, 1)?;
        }
    }
    let h = b.norm("out.norm", h)?;
    let h = b.g.silu(h)?;
    b.conv("out.conv", h, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2,
            base_width: 8,
            width_mult: vec![1, 2],
            res_blocks: 1,
            time_dim: 8,
            attention: vec![false, true],
            timesteps: 10,
        }
    }

    #[test]
    fn fresh_model_predicts_zero_with_input_shape() {
        let m = DenoiserModel::build(tiny(), &mut Rng::new(0, 0)).unwrap();
        let z = Rng::new(1, 0).normal_tensor(vec![3, 2, 8, 8]);
        let out = m.predict_noise(&z, &[1, 5, 10]).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = DenoiserModel::build(tiny(), &mut Rng::new(3, 0)).unwrap();
        let b = DenoiserModel::build(tiny(), &mut Rng::new(3, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_parameters(), b.num_parameters());
        let default = DenoiserModel::build(DenoiserConfig::default(), &mut Rng::new(3, 0)).unwrap();
        assert!(default.num_parameters() > a.num_parameters());
    }

    #[test]
    fn input_validation() {
        let m = DenoiserModel::build(tiny(), &mut Rng::new(0, 0)).unwrap();
        let z = Tensor::zeros(vec![1, 3, 8, 8]);
        assert!(matches!(m.predict_noise(&z, &[1]), Err(Error::Shape { .. })));
        let z = Tensor::zeros(vec![1, 2, 8, 8]);
        assert!(m.predict_noise(&z, &[0]).is_err());
        assert!(m.predict_noise(&z, &[11]).is_err());
        let z = Tensor::zeros(vec![1, 2, 7, 7]);
        assert!(m.predict_noise(&z, &[1]).is_err());
    }

    #[test]
    fn invalid_width_rejected() {
        let cfg = DenoiserConfig { base_width: 12, ..tiny() };
        assert!(DenoiserModel::build(cfg, &mut Rng::new(0, 0)).is_err());
        let cfg = DenoiserConfig { width_mult: vec![1], attention: vec![false], ..tiny() };
        assert!(DenoiserModel::build(cfg, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn from_params_round_trip() {
        let m = DenoiserModel::build(tiny(), &mut Rng::new(0, 0)).unwrap();
        let again = DenoiserModel::from_params(tiny(), m.params().clone()).unwrap();
        assert_eq!(m, again);
        let other = DenoiserConfig { base_width: 16, ..tiny() };
        assert!(DenoiserModel::from_params(other, m.params().clone()).is_err());
    }
}
