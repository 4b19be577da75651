use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{grid_tensor, loss, Model, SampleWindow};
use crate::autodiff::{AdamConfig, Graph, ParamId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Learning rate multiplier applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Train D2D-Net alone for `pretrain_steps` before joint training.
    pub pretrain_d2d: bool,
    pub pretrain_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            steps: 2000,
            decay: 0.96,
            decay_every: 1000,
            seed: 0,
            pretrain_d2d: false,
            pretrain_steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::Config(format!("lr must be positive and batch at least 1 (lr {}, batch {})", self.lr, self.batch)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::Config(format!("invalid decay {} every {} steps", self.decay, self.decay_every)));
        }
        Ok(())
    }

    /// Staircase schedule `lr * decay^floor(step / decay_every)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.refill();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    PretrainD2d,
    Joint,
}

/// Loss of one window; gradients are accumulated into the model.
fn accumulate(model: &mut Model, window: &SampleWindow, phase: Phase, scale: f64) -> Result<f64> {
    let target = window
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidValue("training window has no target".into()))?;
    let mut g = Graph::new();
    let pred = match phase {
        Phase::Joint => model.forward(&mut g, window)?.prediction,
        Phase::PretrainD2d => model.d2d_pretrain_forward(&mut g, window)?,
    };
    let t = g.constant(grid_tensor(target.grid(), 1.0));
    let l = loss(&mut g, pred, t, &model.config().loss)?;
    let scaled = g.affine(l, scale, 0.0);
    let value = g.value(l).data()[0];
    g.backward(scaled, model.params_mut());
    Ok(value)
}

/// Adam training with a staircase learning-rate decay. `on_step` sees every
/// record as it is produced. Returns the full loss curve.
pub fn train(model: &mut Model, data: &[SampleWindow], tcfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidValue("training data is empty".into()));
    }
    for w in data {
        w.validate(model.config())?;
        if w.target.is_none() {
            return Err(Error::InvalidValue("training window has no target".into()));
        }
    }
    let mut phases = Vec::new();
    if tcfg.pretrain_d2d && tcfg.pretrain_steps > 0 {
        phases.push((Phase::PretrainD2d, tcfg.pretrain_steps, Some(model.d2d_param_ids())));
    }
    phases.push((Phase::Joint, tcfg.steps, None::<Vec<ParamId>>));

    let adam = AdamConfig::default();
    let mut sampler = Sampler::new(data.len(), tcfg.seed);
    let mut records = Vec::with_capacity(phases.iter().map(|p| p.1).sum());
    let mut step = 0;
    for (phase, steps, only) in phases {
        for _ in 0..steps {
            model.params_mut().zero_grads();
            let mut total = 0.0;
            for _ in 0..tcfg.batch {
                let i = sampler.next();
                total += accumulate(model, &data[i], phase, 1.0 / tcfg.batch as f64)?;
            }
            let mean = total / tcfg.batch as f64;
            if !mean.is_finite() || !model.params().grads_finite() {
                return Err(Error::Diverged { step, loss: mean });
            }
            let lr = tcfg.lr_at(step);
            model.params_mut().adam_step(lr, &adam, only.as_deref());
            let rec = StepRecord { step, loss: mean, lr };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
    }
    Ok(records)
}
