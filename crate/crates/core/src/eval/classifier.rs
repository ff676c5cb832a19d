use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{softmax_in_place, Var};
use crate::numerics::{adamw_step, AdamWConfig, Container, Graph, OptimizerState, ParameterStore, Precision, Rng, Tensor};

const INFER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { width: 8, feature_dim: 16, epochs: 6, batch_size: 32, lr: 3e-3, holdout: 0.2 }
    }
}

/// Small CNN: three 3x3 convolutions (two strided), global mean pool as the
/// feature layer, then a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClassifier {
    pub in_channels: usize,
    pub classes: usize,
    pub config: ClassifierConfig,
    params: ParameterStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
    pub train_count: usize,
    pub heldout_count: usize,
}

fn init(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    rng.normal_tensor(shape).map(|v| v * std)
}

impl FeatureClassifier {
    pub fn new(in_channels: usize, classes: usize, config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if in_channels == 0 || classes < 2 || config.width == 0 || config.feature_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs channels > 0 and at least two classes (got {in_channels} channels, {classes} classes)"
            )));
        }
        let (w, f) = (config.width, config.feature_dim);
        let mut p = ParameterStore::new();
        for (name, cin, cout) in [("conv1", in_channels, w), ("conv2", w, 2 * w), ("conv3", 2 * w, f)] {
            p.insert(format!("{name}.w"), init(vec![cout, cin, 3, 3], cin * 9, rng))?;
            p.insert(format!("{name}.b"), Tensor::zeros(vec![cout]))?;
        }
        p.insert("head.w", init(vec![classes, f], f, rng))?;
        p.insert("head.b", Tensor::zeros(vec![classes]))?;
        Ok(FeatureClassifier { in_channels, classes, config, params: p })
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn bind(&self, g: &mut Graph, name: &str, trainable: bool) -> Result<Var> {
        let t = self.params.get(name)?.clone();
        if trainable {
            g.param(name, t)
        } else {
            g.constant(t)
        }
    }

    /// Returns `(features [N, d], logits [N, K])`.
    fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let (_, c, _, _) = g.value(x).dims4("classifier")?;
        if c != self.in_channels {
            let s = g.value(x).shape().to_vec();
            return Err(Error::shape("classifier", &s, &[s[0], self.in_channels, s[2], s[3]]));
        }
        let mut h = x;
        for (name, stride) in [("conv1", 1), ("conv2", 2), ("conv3", 2)] {
            let w = self.bind(g, &format!("{name}.w"), trainable)?;
            let b = self.bind(g, &format!("{name}.b"), trainable)?;
            h = g.conv2d(h, w, b, stride, 1)?;
            h = g.silu(h)?;
        }
        let feats = g.mean_pool(h)?;
        let hw = self.bind(g, "head.w", trainable)?;
        let hb = self.bind(g, "head.b", trainable)?;
        let logits = g.linear(feats, hw, hb)?;
        Ok((feats, logits))
    }

    fn infer(&self, x: &Tensor, want_features: bool) -> Result<Tensor> {
        let (n, _, _, _) = x.dims4("classifier")?;
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let rows: Vec<Tensor> = (start..end).map(|i| x.index(i)).collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::stack(&rows)?)?;
            let (f, l) = self.forward(&mut g, xv, false)?;
            let t = g.value(if want_features { f } else { l });
            width = t.shape()[1];
            out.extend_from_slice(t.data());
        }
        Tensor::new(vec![n, width], out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, false)
    }

    /// Penultimate-layer embeddings `[N, feature_dim]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.infer(x, true)
    }

    /// Softmax rows `[N, K]`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut l = self.logits(x)?;
        let k = self.classes;
        for row in l.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(l)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok(l.data().chunks(self.classes).map(argmax).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(x)?;
        if p.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images but {} labels", p.len(), labels.len())));
        }
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) -> Result<()> {
        let meta = serde_json::json!({
            "in_channels": self.in_channels,
            "classes": self.classes,
            "config": self.config,
        });
        c.push_str(format!("{prefix}meta"), &meta.to_string())?;
        self.params.write_to(c, &format!("{prefix}param."), Precision::F64)
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&c.string(&format!("{prefix}meta"))?)
            .map_err(|e| Error::Data(format!("bad classifier header: {e}")))?;
        let field = |k: &str| meta.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let (Some(in_channels), Some(classes)) = (field("in_channels"), field("classes")) else {
            return Err(Error::Data("classifier header lacks in_channels/classes".into()));
        };
        let config: ClassifierConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Data(format!("bad classifier config: {e}")))?;
        let params = ParameterStore::read_from(c, &format!("{prefix}param."))?;
        let fresh = FeatureClassifier::new(in_channels, classes, config, &mut Rng::new(0, 0))?;
        for (name, t) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("classifier parameter", t.shape(), got.shape()));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Data("classifier checkpoint has unexpected parameters".into()));
        }
        Ok(FeatureClassifier { params, ..fresh })
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| x.index(i)).collect::<Vec<_>>())
}

/// Cross-entropy training with AdamW on a shuffled split; the last `holdout`
/// fraction of the permutation is held out.
pub fn train_classifier(
    images: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(FeatureClassifier, ClassifierReport)> {
    let (n, c, _, _) = images.dims4("train_classifier")?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Data("classifier training needs at least two classes".into()));
    }
    if !(0.0..1.0).contains(&config.holdout) || config.batch_size == 0 {
        return Err(Error::Config("holdout must be in [0, 1) and batch_size positive".into()));
    }
    let mut model = FeatureClassifier::new(c, classes, config.clone(), rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_hold = ((n as f64) * config.holdout).round() as usize;
    let (train_idx, hold_idx) = order.split_at(n - n_hold);
    if train_idx.is_empty() {
        return Err(Error::Data("no training samples after holdout split".into()));
    }
    let optim = AdamWConfig { lr: config.lr, warmup_steps: 1, weight_decay: 0.0, ..AdamWConfig::default() };
    let mut state = OptimizerState::new(optim, &model.params);
    let mut epoch_order = train_idx.to_vec();
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        rng.shuffle(&mut epoch_order);
        for chunk in epoch_order.chunks(config.batch_size) {
            let x = gather(images, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let (_, logits) = model.forward(&mut g, xv, true)?;
            let loss = g.cross_entropy(logits, &y)?;
            final_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            adamw_step(&mut model.params, &g.param_grads(&grads), &mut state)?;
        }
    }
    let acc = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        model.accuracy(&gather(images, idx)?, &y)
    };
    let report = ClassifierReport {
        train_accuracy: acc(train_idx)?,
        heldout_accuracy: acc(hold_idx)?,
        final_loss,
        train_count: train_idx.len(),
        heldout_count: hold_idx.len(),
    };
    Ok((model, report))
}
