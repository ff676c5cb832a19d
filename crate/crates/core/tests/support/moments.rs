//! Monte-Carlo moments of the forward process and of the random-noise guiding
//! construction.
//!
//! Each chain is a four-pixel image; residuals `x_t - sqrt(abar_t) x_0` share one
//! law across pixels and are pooled before comparing with the closed form.

use chandiff::denoiser::{DenoiserConfig, DenoiserModel};
use chandiff::diffusion::{sample_guided, ChannelMask, Guidance, NoiseSchedule, StepView};
use chandiff::numerics::{Rng, Tensor};

pub const CHAINS: usize = 10_000;
pub const TOL: f64 = 2e-2;
pub const PROBES: [usize; 3] = [5, 30, 100];
const PIXELS: [f64; 4] = [-1.0, -0.3, 0.5, 1.0];

/// One comparison against the closed-form marginal at step `t`.
#[derive(Debug)]
pub struct Deviation {
    pub label: &'static str,
    pub t: usize,
    pub mean: f64,
    pub var: f64,
}

impl Deviation {
    pub fn worst(&self) -> f64 {
        self.mean.abs().max(self.var.abs())
    }
}

pub fn desk_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
}

fn images(shape: Vec<usize>) -> Tensor {
    Tensor::new(shape, (0..CHAINS).flat_map(|_| PIXELS).collect()).unwrap()
}

/// Residual mean and unbiased variance of `x` against `sqrt(abar) * x0`.
pub fn residual_moments(x: &[f64], x0: &[f64], abar: f64) -> (f64, f64) {
    let r: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - abar.sqrt() * b).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn deviation(label: &'static str, t: usize, x: &[f64], x0: &[f64], s: &NoiseSchedule) -> Deviation {
    let ab = s.alpha_bar(t);
    let (m, v) = residual_moments(x, x0, ab);
    Deviation { label, t, mean: m, var: v - (1.0 - ab) }
}

/// Iterated single steps and the closed form, both against the closed-form moments.
pub fn forward_process() -> Vec<Deviation> {
    let s = desk_schedule();
    let x0 = images(vec![CHAINS, 4]);
    let mut rng = Rng::new(2024, 0);
    let mut closed_rng = Rng::new(2024, 1);
    let mut x = x0.clone();
    let mut out = Vec::new();
    for t in 1..=s.timesteps() {
        x = s.forward_step(&x, t, &mut rng).unwrap();
        if PROBES.contains(&t) {
            out.push(deviation("iterated forward", t, x.data(), x0.data(), &s));
            let q = s.q_sample(&x0, t, &closed_rng.normal_tensor(x0.shape().to_vec())).unwrap();
            out.push(deviation("closed form", t, q.data(), x0.data(), &s));
        }
    }
    out
}

/// The guiding channels the model sees under random-noise guidance, and the
/// forward chain run from the clean condition.
pub fn random_guidance() -> Vec<Deviation> {
    let s = desk_schedule();
    let cfg = DenoiserConfig {
        in_channels: 2,
        base_width: 4,
        width_mult: vec![1, 1],
        res_blocks: 1,
        time_dim: 8,
        attention: vec![false, false],
        timesteps: 100,
    };
    let model = DenoiserModel::build(cfg, &mut Rng::new(1, 0)).unwrap();
    let mask = ChannelMask::new(vec![1], vec![0], 2).unwrap();
    let cond = images(vec![CHAINS, 1, 2, 2]);
    let mut seen: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut obs = |v: &StepView| {
        if PROBES.contains(&v.t) {
            seen.push((v.t, v.z.select_channels(&[0]).unwrap().into_data()));
        }
    };
    sample_guided(&model, &s, &mask, &cond, Guidance::Random, &mut Rng::new(77, 0), Some(&mut obs)).unwrap();
    assert_eq!(seen.len(), PROBES.len());

    let mut out = Vec::new();
    let mut chain = cond.clone();
    let mut rng = Rng::new(78, 0);
    for t in 1..=s.timesteps() {
        chain = s.forward_step(&chain, t, &mut rng).unwrap();
        if let Some((_, guide)) = seen.iter().find(|(st, _)| *st == t) {
            out.push(deviation("guided sampler", t, guide, cond.data(), &s));
            out.push(deviation("precomputed chain", t, chain.data(), cond.data(), &s));
        }
    }
    out
}
