//! Adam with global gradient-norm clipping, and an exponential moving average
//! of the parameter store.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::nn::Params;
use crate::tape::Grads;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clip applied across all gradients before the update;
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// What one optimizer step saw, for logging.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient this step (branches the
    /// loss never touched) are left unchanged and do not advance their moment
    /// estimates.
    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> StepStats {
        self.step += 1;
        let t = self.step as i32;

        let mut sq = 0.0;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            if let Some(g) = grads.by_name(name) {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for name in &names {
            let Some(g) = grads.by_name(name) else { continue };
            let g = g.mapv(|v| v * scale);
            let p = params.get_mut(name).expect("param disappeared mid-step");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                    *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
        StepStats { grad_norm: norm, clipped: scale != 1.0 }
    }
}

/// Exponential moving average of a parameter store:
/// `shadow <- decay * shadow + (1 - decay) * param`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Params,
}

impl Ema {
    pub fn new(decay: f64, params: &Params) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0, 1)");
        Self { decay, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &Params) {
        for (name, s) in self.shadow.iter_mut() {
            let p = params
                .get(name)
                .unwrap_or_else(|| panic!("EMA shadow has `{name}` but live params do not"));
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            });
        }
    }

    /// Rebuild an EMA around a previously saved shadow store.
    pub fn from_shadow(decay: f64, shadow: Params) -> Self {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0, 1)");
        Self { decay, shadow }
    }

    pub fn shadow(&self) -> &Params {
        &self.shadow
    }

    pub fn into_shadow(self) -> Params {
        self.shadow
    }
}
