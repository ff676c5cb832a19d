//! Joint denoising training over all packed channels.

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::numerics::{
    adamw_step, AdamWConfig, Container, Graph, OptimizerState, ParameterStore, Precision, Rng, Tensor,
};

use super::NoiseSchedule;

/// Stream ids of the three training generators.
pub const NOISE_STREAM: u64 = 1;
pub const TIMESTEP_STREAM: u64 = 2;
pub const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub model: DenoiserModel,
    pub optimizer: OptimizerState,
    pub schedule: NoiseSchedule,
    pub epoch: u64,
    pub global_step: u64,
    pub noise_rng: Rng,
    pub timestep_rng: Rng,
    pub shuffle_rng: Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub steps: Vec<StepRecord>,
}

impl TrainingState {
    pub fn new(
        config: DenoiserConfig,
        optim: AdamWConfig,
        schedule: NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        if config.timesteps != schedule.timesteps() {
            return Err(Error::Config(format!(
                "denoiser conditioned on {} steps but schedule has {}",
                config.timesteps,
                schedule.timesteps()
            )));
        }
        let model = DenoiserModel::build(config, &mut Rng::new(seed, 0))?;
        let optimizer = OptimizerState::new(optim, model.params());
        Ok(TrainingState {
            model,
            optimizer,
            schedule,
            epoch: 0,
            global_step: 0,
            noise_rng: Rng::new(seed, NOISE_STREAM),
            timestep_rng: Rng::new(seed, TIMESTEP_STREAM),
            shuffle_rng: Rng::new(seed, SHUFFLE_STREAM),
        })
    }

    /// One optimisation step on a batch `x0: [N, C, H, W]`; returns `(loss, lr)`.
    pub fn train_step(&mut self, x0: &Tensor) -> Result<(f64, f64)> {
        let (n, c, h, w) = x0.dims4("train_step")?;
        let t_max = self.schedule.timesteps() as u64;
        let ts: Vec<usize> = (0..n).map(|_| 1 + self.timestep_rng.below(t_max) as usize).collect();
        let eps = self.noise_rng.normal_tensor(vec![n, c, h, w]);
        let plane = c * h * w;
        let mut xt = Tensor::zeros(vec![n, c, h, w]);
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let (s, k) = (ab.sqrt(), (1.0 - ab).sqrt());
            let range = i * plane..(i + 1) * plane;
            for ((o, &x), &e) in xt.data_mut()[range.clone()]
                .iter_mut()
                .zip(&x0.data()[range.clone()])
                .zip(&eps.data()[range])
            {
                *o = s * x + k * e;
            }
        }
        let mut g = Graph::new();
        let zv = g.constant(xt)?;
        let target = g.constant(eps)?;
        let pred = self.model.forward(&mut g, zv, &ts, true)?;
        let loss = g.mse(pred, target).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: self.global_step },
            other => other,
        })?;
        let loss_value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let grads = g.param_grads(&grads);
        let lr = adamw_step(self.model.params_mut(), &grads, &mut self.optimizer)?;
        self.global_step += 1;
        Ok((loss_value, lr))
    }

    /// One shuffled pass over `data: [N, C, H, W]` in batches of `batch_size`.
    pub fn train_epoch(&mut self, data: &Tensor, batch_size: usize) -> Result<LossStats> {
        self.train_epoch_with(data, batch_size, |_| {})
    }

    pub fn train_epoch_with(
        &mut self,
        data: &Tensor,
        batch_size: usize,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<LossStats> {
        let (n, c, h, w) = data.dims4("train_epoch")?;
        if c != self.model.config().in_channels {
            return Err(Error::shape("train_epoch", data.shape(), &[n, self.model.config().in_channels, h, w]));
        }
        if n == 0 || batch_size == 0 {
            return Err(Error::InvalidArgument("empty dataset or zero batch size".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle_rng.shuffle(&mut order);
        let plane = c * h * w;
        let mut steps = Vec::new();
        for chunk in order.chunks(batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * plane);
            for &i in chunk {
                batch.extend_from_slice(&data.data()[i * plane..(i + 1) * plane]);
            }
            let batch = Tensor::new(vec![chunk.len(), c, h, w], batch)?;
            let step = self.global_step;
            let (loss, lr) = self.train_step(&batch)?;
            let rec = StepRecord { step, epoch: self.epoch, loss, lr };
            on_step(&rec);
            steps.push(rec);
        }
        self.epoch += 1;
        let losses = steps.iter().map(|s| s.loss);
        Ok(LossStats {
            mean: losses.clone().sum::<f64>() / steps.len() as f64,
            min: losses.clone().fold(f64::INFINITY, f64::min),
            max: losses.fold(f64::NEG_INFINITY, f64::max),
            steps,
        })
    }

    /// Serialise everything needed to continue training bit-exactly.
    pub fn to_container(&self, precision: Precision) -> Result<Container> {
        let mut c = Container::new();
        c.push_str(
            "meta.denoiser_config",
            &serde_json::to_string(self.model.config()).expect("config serialises"),
        )?;
        self.model.params().write_to(&mut c, "param.", precision)?;
        write_optimizer(&mut c, &self.optimizer)?;
        c.push_tensor("schedule.betas", &Tensor::from_vec(self.schedule.betas().to_vec()), Precision::F64)?;
        c.push_u64s("state.counters", vec![self.epoch, self.global_step])?;
        for (name, rng) in [
            ("rng.noise", &self.noise_rng),
            ("rng.timestep", &self.timestep_rng),
            ("rng.shuffle", &self.shuffle_rng),
        ] {
            c.push_u64s(name, rng_words(rng))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let model = model_from_container(c)?;
        let schedule = NoiseSchedule::from_betas(c.tensor("schedule.betas")?.into_data())?;
        let optimizer = read_optimizer(c, model.params())?;
        let counters = c.u64s("state.counters")?;
        if counters.len() != 2 {
            return Err(Error::Data("state.counters must hold epoch and step".into()));
        }
        Ok(TrainingState {
            model,
            optimizer,
            schedule,
            epoch: counters[0],
            global_step: counters[1],
            noise_rng: rng_from_words(c.u64s("rng.noise")?)?,
            timestep_rng: rng_from_words(c.u64s("rng.timestep")?)?,
            shuffle_rng: rng_from_words(c.u64s("rng.shuffle")?)?,
        })
    }
}

/// Load the denoiser (config and parameters) from a training checkpoint.
pub fn model_from_container(c: &Container) -> Result<DenoiserModel> {
    let config: DenoiserConfig = serde_json::from_str(&c.string("meta.denoiser_config")?)
        .map_err(|e| Error::Data(format!("denoiser config: {e}")))?;
    DenoiserModel::from_params(config, ParameterStore::read_from(c, "param.")?)
}

/// The noise schedule stored alongside a checkpoint.
pub fn schedule_from_container(c: &Container) -> Result<NoiseSchedule> {
    NoiseSchedule::from_betas(c.tensor("schedule.betas")?.into_data())
}

fn write_optimizer(c: &mut Container, s: &OptimizerState) -> Result<()> {
    let k = &s.config;
    let hyper = vec![k.lr, k.warmup_steps as f64, k.weight_decay, k.beta1, k.beta2, k.eps];
    c.push_tensor("opt.config", &Tensor::from_vec(hyper), Precision::F64)?;
    c.push_u64s("opt.step", vec![s.step])?;
    for (name, t) in &s.first_moment {
        c.push_tensor(format!("opt.m.{name}"), t, Precision::F64)?;
    }
    for (name, t) in &s.second_moment {
        c.push_tensor(format!("opt.v.{name}"), t, Precision::F64)?;
    }
    Ok(())
}

fn read_optimizer(c: &Container, params: &ParameterStore) -> Result<OptimizerState> {
    let h = c.tensor("opt.config")?;
    let h = h.data();
    if h.len() != 6 {
        return Err(Error::Data("opt.config must have 6 entries".into()));
    }
    let config = AdamWConfig {
        lr: h[0],
        warmup_steps: h[1] as u64,
        weight_decay: h[2],
        beta1: h[3],
        beta2: h[4],
        eps: h[5],
    };
    let mut s = OptimizerState::new(config, params);
    s.step = *c
        .u64s("opt.step")?
        .first()
        .ok_or_else(|| Error::Data("empty opt.step".into()))?;
    for name in params.names() {
        s.first_moment.insert(name.clone(), c.tensor(&format!("opt.m.{name}"))?);
        s.second_moment.insert(name.clone(), c.tensor(&format!("opt.v.{name}"))?);
    }
    Ok(s)
}

fn rng_words(r: &Rng) -> Vec<u64> {
    let pos = r.word_pos();
    vec![r.seed(), r.stream(), pos as u64, (pos >> 64) as u64]
}

fn rng_from_words(w: &[u64]) -> Result<Rng> {
    if w.len() != 4 {
        return Err(Error::Data("rng record must hold 4 words".into()));
    }
    let mut r = Rng::new(w[0], w[1]);
    r.set_word_pos(u128::from(w[2]) | (u128::from(w[3]) << 64));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state(seed: u64) -> TrainingState {
        let cfg = DenoiserConfig {
            in_channels: 2,
            base_width: 8,
            width_mult: vec![1, 2],
            res_blocks: 1,
            time_dim: 8,
            attention: vec![false, false],
            timesteps: 20,
        };
        let optim = AdamWConfig { lr: 1e-3, warmup_steps: 5, ..Default::default() };
        TrainingState::new(cfg, optim, NoiseSchedule::linear(20, 1e-3, 0.2).unwrap(), seed).unwrap()
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let data = Rng::new(9, 0).normal_tensor(vec![6, 2, 8, 8]).map(|v| v.tanh());
        let mut full = tiny_state(1);
        full.train_epoch(&data, 4).unwrap();
        let ckpt = full.to_container(Precision::F64).unwrap();
        let bytes = ckpt.to_bytes();
        let continued = full.train_epoch(&data, 4).unwrap();

        let restored = Container::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let mut resumed = TrainingState::from_container(&restored).unwrap();
        let again = resumed.train_epoch(&data, 4).unwrap();
        assert_eq!(continued, again);
        assert_eq!(full, resumed);
    }

    #[test]
    fn schedule_length_must_match_model() {
        let cfg = DenoiserConfig { timesteps: 10, ..DenoiserConfig::default() };
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        assert!(TrainingState::new(cfg, AdamWConfig::default(), sched, 0).is_err());
    }
}
