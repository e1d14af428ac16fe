use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{gat_loss_grad, history_features, AdamConfig, AdamState, GatWeights, MlpWeights, NnError};
use crate::dataset::{SceneHistory, TrainingSample};
use crate::geometry::Point2;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Mlp,
    Gat,
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictorKind::Mlp => "mlp",
            PredictorKind::Gat => "gat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "weights", rename_all = "lowercase")]
pub enum PredictorWeights {
    Mlp(MlpWeights),
    Gat(GatWeights),
}

impl PredictorWeights {
    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorWeights::Mlp(_) => PredictorKind::Mlp,
            PredictorWeights::Gat(_) => PredictorKind::Gat,
        }
    }

    pub fn history_len(&self) -> usize {
        match self {
            PredictorWeights::Mlp(w) => w.input_dim() / 2 + 1,
            PredictorWeights::Gat(w) => w.history_len(),
        }
    }

    pub fn into_mlp(self) -> Result<MlpWeights, NnError> {
        match self {
            PredictorWeights::Mlp(w) => Ok(w),
            other => Err(NnError::KindMismatch {
                expected: PredictorKind::Mlp,
                found: other.kind(),
            }),
        }
    }

    pub fn into_gat(self) -> Result<GatWeights, NnError> {
        match self {
            PredictorWeights::Gat(w) => Ok(w),
            other => Err(NnError::KindMismatch {
                expected: PredictorKind::Gat,
                found: other.kind(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub history_len: usize,
    /// Attention neighbourhood radius, meters.
    pub radius: f64,
    /// Simulation step; history displacements are divided by it.
    pub dt: f64,
    pub latent_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub fhist_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Std of Gaussian jitter added to every history position, redrawn each
    /// epoch, m. Targets stay exact. Zero trains on clean histories.
    pub history_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            history_len: 8,
            radius: 4.0,
            dt: 0.1,
            latent_dim: 32,
            mlp_hidden: vec![64, 32],
            fhist_hidden: vec![64],
            head_hidden: vec![64, 32],
            history_noise: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.history_len < 2 {
            return bad("history_len must be at least 2");
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.history_noise.is_finite() && self.history_noise >= 0.0) {
            return bad("history_noise must be non-negative");
        }
        if self.latent_dim == 0 || self.mlp_hidden.contains(&0) || self.fhist_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: PredictorWeights,
    /// Mean squared error per output component, one entry per epoch.
    pub loss_curve: Vec<f64>,
}

/// Fits a next-velocity predictor with teacher forcing and Adam. The GAT is
/// trained scene by scene so every agent sees its true neighbours.
pub fn train_predictor(
    kind: PredictorKind,
    samples: &[TrainingSample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, NnError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.history().len() != config.history_len) {
        return Err(NnError::Shape(format!(
            "sample history of length {}, config expects {}",
            s.history().len(),
            config.history_len
        )));
    }
    let mut init_rng = rng::stream(seed, &[0x696e_6974]);
    let scale = 1.0 / config.dt;
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    match kind {
        PredictorKind::Mlp => {
            let mut dims = vec![2 * (config.history_len - 1)];
            dims.extend_from_slice(&config.mlp_hidden);
            dims.push(2);
            let w = MlpWeights::init(&dims, scale, &mut init_rng);
            let (w, curve) = train_mlp(w, samples, config, adam, seed)?;
            Ok(TrainOutcome {
                weights: PredictorWeights::Mlp(w),
                loss_curve: curve,
            })
        }
        PredictorKind::Gat => {
            let w = GatWeights::init(
                config.history_len,
                config.latent_dim,
                &config.fhist_hidden,
                &config.head_hidden,
                scale,
                &mut init_rng,
            );
            let (w, curve) = train_gat(w, samples, config, adam, seed)?;
            Ok(TrainOutcome {
                weights: PredictorWeights::Gat(w),
                loss_curve: curve,
            })
        }
    }
}

fn check_finite(loss: f64, grad: &[f64], epoch: usize) -> Result<(), NnError> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NnError::Diverged { epoch });
    }
    Ok(())
}

fn train_mlp(
    mut w: MlpWeights,
    samples: &[TrainingSample],
    config: &TrainConfig,
    adam: AdamConfig,
    seed: u64,
) -> Result<(MlpWeights, Vec<f64>), NnError> {
    let mut features: Vec<Vec<f64>> = samples.iter().map(|s| history_features(s.history(), 1.0)).collect();
    let mut params = Vec::with_capacity(w.param_count());
    w.write_params(&mut params);
    let mut opt = AdamState::new(params.len(), adam);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[0x7368_7566, epoch as u64]));
        if config.history_noise > 0.0 {
            let mut r = rng::stream(seed, &[0x6a69_7474, epoch as u64]);
            for (f, s) in features.iter_mut().zip(samples) {
                *f = history_features(&jitter(s.history(), config.history_noise, &mut r), 1.0);
            }
        }
        let mut epoch_sse = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let norm = 2.0 * batch.len() as f64;
            let mut sse = 0.0;
            for &i in batch {
                let cache = w.forward_cached(&features[i]);
                let t = samples[i].target;
                let e = [cache.output[0] - t[0], cache.output[1] - t[1]];
                sse += e[0] * e[0] + e[1] * e[1];
                w.backward(&cache, &[2.0 * e[0] / norm, 2.0 * e[1] / norm], &mut grad, None);
            }
            check_finite(sse, &grad, epoch)?;
            epoch_sse += sse;
            opt.step(&mut params, &grad)?;
            w.read_params(&params);
        }
        curve.push(epoch_sse / (2.0 * samples.len() as f64));
    }
    Ok((w, curve))
}

fn jitter(history: &[Point2], sigma: f64, r: &mut Rng) -> Vec<Point2> {
    history
        .iter()
        .map(|p| {
            let dx: f64 = StandardNormal.sample(r);
            let dy: f64 = StandardNormal.sample(r);
            p.offset(sigma * dx, sigma * dy)
        })
        .collect()
}

struct SceneGroup {
    scene: Arc<SceneHistory>,
    features: Vec<Vec<f64>>,
    positions: Vec<Point2>,
    targets: Vec<Option<[f64; 2]>>,
    count: usize,
}

fn group_by_scene(samples: &[TrainingSample]) -> Vec<SceneGroup> {
    let mut index: HashMap<*const SceneHistory, usize> = HashMap::new();
    let mut groups: Vec<SceneGroup> = Vec::new();
    for s in samples {
        let key = Arc::as_ptr(&s.scene);
        let g = *index.entry(key).or_insert_with(|| {
            let scene = &s.scene;
            groups.push(SceneGroup {
                scene: scene.clone(),
                features: scene.histories.iter().map(|h| history_features(h, 1.0)).collect(),
                positions: scene.histories.iter().map(|h| *h.last().expect("non-empty history")).collect(),
                targets: vec![None; scene.histories.len()],
                count: 0,
            });
            groups.len() - 1
        });
        let group = &mut groups[g];
        if group.targets[s.target_index].is_none() {
            group.count += 1;
        }
        group.targets[s.target_index] = Some(s.target);
    }
    groups
}

fn train_gat(
    mut w: GatWeights,
    samples: &[TrainingSample],
    config: &TrainConfig,
    adam: AdamConfig,
    seed: u64,
) -> Result<(GatWeights, Vec<f64>), NnError> {
    let mut groups = group_by_scene(samples);
    let total: usize = groups.iter().map(|g| g.count).sum();
    let mut params = Vec::with_capacity(w.param_count());
    w.write_params(&mut params);
    let mut opt = AdamState::new(params.len(), adam);
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[0x7368_7566, epoch as u64]));
        if config.history_noise > 0.0 {
            let mut r = rng::stream(seed, &[0x6a69_7474, epoch as u64]);
            for g in &mut groups {
                for (k, h) in g.scene.histories.iter().enumerate() {
                    let noisy = jitter(h, config.history_noise, &mut r);
                    g.features[k] = history_features(&noisy, 1.0);
                    g.positions[k] = noisy[noisy.len() - 1];
                }
            }
        }
        let mut epoch_sse = 0.0;
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut count = 0;
            while end < order.len() && count < config.batch_size {
                count += groups[order[end]].count;
                end += 1;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let norm = 2.0 * count as f64;
            let mut sse = 0.0;
            for &gi in &order[start..end] {
                let g = &groups[gi];
                sse += gat_loss_grad(&w, &g.features, &g.positions, config.radius, &g.targets, norm, &mut grad);
            }
            check_finite(sse, &grad, epoch)?;
            epoch_sse += sse;
            opt.step(&mut params, &grad)?;
            w.read_params(&params);
            start = end;
        }
        curve.push(epoch_sse / (2.0 * total as f64));
    }
    Ok((w, curve))
}
