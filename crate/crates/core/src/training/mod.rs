//! Focal loss, AdamW, the warmup/cosine schedule, batch gradients and the
//! training loop.

mod run;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{focal_loss_value, Tape};
use crate::backbone::{Backbone, ForwardCtx};
use crate::data::Key;
use crate::params::ParamSet;
use crate::{Error, Real, Result};

pub use run::{
    score_dataset, score_features, train_run, CheckpointRecord, EarlyStopping, EpochRecord, RunLog, TopK,
};

/// Denominator guard of the AdamW update.
pub const ADAM_EPS: f64 = 1e-8;

fn default_peak_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_warmup_frac() -> f64 {
    0.1
}
fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    7
}
fn default_batch_size() -> usize {
    32
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_focal_alpha() -> [f64; 2] {
    [0.75, 0.25]
}
fn default_topk() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    /// Class weights `[bonafide, spoof]`.
    #[serde(default = "default_focal_alpha")]
    pub focal_alpha: [f64; 2],
    #[serde(default = "default_topk")]
    pub topk: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: default_peak_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: default_weight_decay(),
            warmup_frac: default_warmup_frac(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            focal_gamma: default_focal_gamma(),
            focal_alpha: default_focal_alpha(),
            topk: default_topk(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be finite and >= 0, got {}", self.peak_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac must lie in (0, 1), got {}", self.warmup_frac));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.topk == 0 {
            return fail("max_epochs, batch_size and topk must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return fail(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !self.focal_alpha.iter().all(|&a| a > 0.0 && a <= 1.0) {
            return fail(format!("focal_alpha entries must lie in (0, 1], got {:?}", self.focal_alpha));
        }
        Ok(())
    }

    pub fn alpha(&self, key: Key) -> f64 {
        self.focal_alpha[key.class()]
    }
}

/// `−α (1 − p)^γ log p` for the true-class probability `p`.
pub fn focal_loss(logits: [f64; 2], label: Key, gamma: f64, alpha: f64) -> f64 {
    focal_loss_value(logits[0], logits[1], label.class(), gamma, alpha)
}

/// Mean focal loss of a batch of logit pairs.
pub fn batch_focal_loss(logits: &[[f64; 2]], labels: &[Key], cfg: &TrainConfig) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Data(format!(
            "batch of {} logits and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&l, &k)| focal_loss(l, k, cfg.focal_gamma, cfg.alpha(k)))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Learning rate at optimiser step `step` of `total_steps`: linear warmup
/// to `peak_lr` over `round(warmup_frac·total)` steps, then cosine decay
/// to zero at the final step.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("lr_schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} exceeds {total_steps} total steps")));
    }
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    if step <= warmup {
        return Ok(if warmup == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / warmup as f64
        });
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW moments in declaration order of the parameter set.
#[derive(Clone, Debug)]
pub struct OptimizerState<R: Real> {
    pub m: Vec<Array2<R>>,
    pub v: Vec<Array2<R>>,
    pub step: u64,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(params: &ParamSet<R>) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.value.dim())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay; only
/// parameters whose role decays receive the decay term.  A non-finite or
/// mis-shaped gradient rejects the whole step and leaves everything as it
/// was.
pub fn adamw_step<R: Real>(
    params: &mut ParamSet<R>,
    grads: &[Array2<R>],
    state: &mut OptimizerState<R>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.dim() != p.value.dim() {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient {:?} for {} {:?}", g.dim(), p.name, p.value.dim()),
            ));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (R::of(cfg.beta1), R::of(cfg.beta2));
    let c1 = R::one() - R::of(cfg.beta1.powi(t));
    let c2 = R::one() - R::of(cfg.beta2.powi(t));
    let (lr_r, eps, decay) = (R::of(lr), R::of(ADAM_EPS), R::of(lr * cfg.weight_decay));
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let decays = params.get(id).role.decays();
        let theta = params.value_mut(id);
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        ndarray::Zip::from(theta).and(m).and(v).and(g).for_each(|th, m, v, &g| {
            *m = b1 * *m + (R::one() - b1) * g;
            *v = b2 * *v + (R::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let mut next = *th - lr_r * m_hat / (v_hat.sqrt() + eps);
            if decays {
                next -= decay * *th;
            }
            *th = next;
        });
    }
    Ok(())
}

/// Mean focal loss of a batch and its gradient with respect to every
/// parameter, in declaration order.  Each utterance gets its own tape and
/// contributions are summed in batch order.  Dropout is active only when
/// `rng` is supplied.
pub fn loss_and_grads<R: Real>(
    model: &Backbone,
    params: &ParamSet<R>,
    batch: &[(&Array2<R>, Key)],
    cfg: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Array2<R>>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = R::of(1.0 / batch.len() as f64);
    let mut grads: Vec<Array2<R>> = params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
    let mut total = 0.0;
    for &(x, key) in batch {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut ctx = match rng.as_deref_mut() {
            Some(r) => ForwardCtx::train(r),
            None => ForwardCtx::eval(),
        };
        let trace = model.forward(&mut tape, &p, xv, &mut ctx)?;
        let loss = tape.focal_loss(
            trace.logits,
            key.class(),
            R::of(cfg.focal_gamma),
            R::of(cfg.alpha(key)),
        )?;
        let value = tape.scalar(loss).f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        total += value;
        let mut g = tape.backward(loss, scale);
        for (acc, &var) in grads.iter_mut().zip(p.vars()) {
            if let Some(gv) = g.take(var) {
                *acc += &gv;
            }
        }
    }
    Ok((total / batch.len() as f64, grads))
}

/// Mean focal loss of a batch without gradients or dropout.
pub fn batch_loss<R: Real>(
    model: &Backbone,
    params: &ParamSet<R>,
    batch: &[(&Array2<R>, Key)],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &(x, key) in batch {
        let l = model.evaluate(params, x)?.logits;
        logits.push([l[0].f64(), l[1].f64()]);
        labels.push(key);
    }
    batch_focal_loss(&logits, &labels, cfg)
}

#[cfg(test)]
mod tests;
