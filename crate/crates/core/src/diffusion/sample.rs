//! Reverse samplers: unconditional joint generation and three ways of pinning
//! guiding channels to a conditioning image.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::NoiseSchedule;

/// Partition of the packed channels into generated and guiding sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    generation: Vec<usize>,
    guiding: Vec<usize>,
}

impl ChannelMask {
    /// Both sets must be nonempty, disjoint and together cover `0..total`.
    pub fn new(generation: Vec<usize>, guiding: Vec<usize>, total: usize) -> Result<Self> {
        if generation.is_empty() || guiding.is_empty() {
            return Err(Error::InvalidArgument(
                "guided sampling needs nonempty generation and guiding channel sets".into(),
            ));
        }
        Self::checked(generation, guiding, total)
    }

    /// Every channel generated, none guiding.
    pub fn unconditional(total: usize) -> Self {
        ChannelMask { generation: (0..total).collect(), guiding: Vec::new() }
    }

    fn checked(generation: Vec<usize>, guiding: Vec<usize>, total: usize) -> Result<Self> {
        let mut seen = vec![false; total];
        for &c in generation.iter().chain(&guiding) {
            if c >= total || seen[c] {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} repeated or outside [0, {total})"
                )));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "generation {generation:?} and guiding {guiding:?} do not cover [0, {total})"
            )));
        }
        Ok(ChannelMask { generation, guiding })
    }

    pub fn generation(&self) -> &[usize] {
        &self.generation
    }

    pub fn guiding(&self) -> &[usize] {
        &self.guiding
    }

    pub fn total(&self) -> usize {
        self.generation.len() + self.guiding.len()
    }
}

/// How the guiding channels track the conditioning image across steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Forward-noise the condition to level `t` with fresh noise every step.
    Random,
    /// Noise the condition to level `t - 1` with the model's own guiding-channel prediction.
    Predicted,
    /// Hold the clean condition fixed at every step.
    Constant,
}

impl Guidance {
    pub fn name(self) -> &'static str {
        match self {
            Guidance::Random => "random",
            Guidance::Predicted => "predicted",
            Guidance::Constant => "constant",
        }
    }
}

/// What a sampler fed to the model at one reverse step.
pub struct StepView<'a> {
    pub t: usize,
    pub z: &'a Tensor,
    pub eps_hat: &'a Tensor,
}

pub type Observer<'o> = Option<&'o mut dyn FnMut(&StepView)>;

/// Guiding channels noised to `level`: `sqrt(abar) * condition + sqrt(1 - abar) * noise`.
pub fn noised_condition(schedule: &NoiseSchedule, condition: &Tensor, level: usize, noise: &Tensor) -> Result<Tensor> {
    schedule.q_sample(condition, level, noise)
}

fn eval_model(model: &DenoiserModel, z: &Tensor, t: usize) -> Result<Tensor> {
    let n = z.shape()[0];
    model.predict_noise(z, &vec![t; n])
}

fn check_schedule(model: &DenoiserModel, schedule: &NoiseSchedule) -> Result<()> {
    if model.config().timesteps != schedule.timesteps() {
        return Err(Error::Config(format!(
            "model conditioned on {} steps, schedule has {}",
            model.config().timesteps,
            schedule.timesteps()
        )));
    }
    Ok(())
}

/// Ancestral sampling of every channel from pure noise; `shape` is `[N, C, H, W]`.
pub fn sample_unconditional(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_unconditional_observed(model, schedule, shape, rng, None)
}

pub fn sample_unconditional_observed(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    shape: &[usize],
    rng: &mut Rng,
    mut observer: Observer,
) -> Result<Tensor> {
    check_schedule(model, schedule)?;
    let mut x = rng.normal_tensor(shape.to_vec());
    for t in (1..=schedule.timesteps()).rev() {
        let eps = eval_model(model, &x, t)?;
        if let Some(obs) = observer.as_mut() {
            obs(&StepView { t, z: &x, eps_hat: &eps });
        }
        let xi = (t > 1).then(|| rng.normal_tensor(shape.to_vec()));
        x = schedule.reverse_step(&x, t, &eps, xi.as_ref())?;
        if !x.is_finite() {
            return Err(Error::NonFiniteState { t });
        }
    }
    Ok(x)
}

/// Guided generation with freshly noised guiding channels at every step.
pub fn sample_guided_random(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    mask: &ChannelMask,
    condition: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_guided(model, schedule, mask, condition, Guidance::Random, rng, None)
}

/// Guided generation where the model's predicted guiding-channel noise drives
/// the next step's guiding channels.
pub fn sample_guided_predicted(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    mask: &ChannelMask,
    condition: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_guided(model, schedule, mask, condition, Guidance::Predicted, rng, None)
}

/// Guided generation with the clean condition held fixed.
pub fn sample_guided_constant(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    mask: &ChannelMask,
    condition: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    sample_guided(model, schedule, mask, condition, Guidance::Constant, rng, None)
}

/// Shared guided sampler. `condition` is `[N, |guiding|, H, W]`; the result is
/// `[N, |generation|, H, W]`.
///
/// Random-number consumption per run: the initial generation noise, then for
/// [`Guidance::Predicted`] one initial guiding draw; per step `t`, one guiding
/// draw for [`Guidance::Random`] and one generation draw when `t > 1`.
pub fn sample_guided(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    mask: &ChannelMask,
    condition: &Tensor,
    scheme: Guidance,
    rng: &mut Rng,
    mut observer: Observer,
) -> Result<Tensor> {
    check_schedule(model, schedule)?;
    let (n, gc, h, w) = condition.dims4("sample_guided")?;
    if mask.guiding().is_empty() || gc != mask.guiding().len() || mask.total() != model.config().in_channels {
        return Err(Error::shape(
            "sample_guided",
            condition.shape(),
            &[n, mask.guiding().len(), h, w],
        ));
    }
    let gen_shape = vec![n, mask.generation().len(), h, w];
    let mut z = Tensor::zeros(vec![n, mask.total(), h, w]);
    let mut gen = rng.normal_tensor(gen_shape.clone());
    let mut guide = match scheme {
        Guidance::Predicted => {
            let noise = rng.normal_tensor(condition.shape().to_vec());
            noised_condition(schedule, condition, schedule.timesteps(), &noise)?
        }
        _ => condition.clone(),
    };
    for t in (1..=schedule.timesteps()).rev() {
        if scheme == Guidance::Random {
            let noise = rng.normal_tensor(condition.shape().to_vec());
            guide = noised_condition(schedule, condition, t, &noise)?;
        }
        z.assign_channels(mask.generation(), &gen)?;
        z.assign_channels(mask.guiding(), &guide)?;
        let eps = eval_model(model, &z, t)?;
        if let Some(obs) = observer.as_mut() {
            obs(&StepView { t, z: &z, eps_hat: &eps });
        }
        let eps_gen = eps.select_channels(mask.generation())?;
        if scheme == Guidance::Predicted {
            let eps_guide = eps.select_channels(mask.guiding())?;
            guide = noised_condition(schedule, condition, t - 1, &eps_guide)?;
        }
        let xi = (t > 1).then(|| rng.normal_tensor(gen_shape.clone()));
        gen = schedule.reverse_step(&gen, t, &eps_gen, xi.as_ref())?;
        if !gen.is_finite() || !guide.is_finite() {
            return Err(Error::NonFiniteState { t });
        }
    }
    Ok(gen)
}
