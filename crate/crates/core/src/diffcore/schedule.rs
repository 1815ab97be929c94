use candle_core::Tensor;

use crate::error::{Error, Result};

/// Linear variance schedule. `alpha_bar(0) = 1`, so step 0 is the clean
/// sample and training draws `t` from `1..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid beta range {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        alpha_bar.push(1.0);
        for t in 1..steps {
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - betas[t]));
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn from_config(cfg: &crate::config::ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.train_timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Range(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with one timestep per batch item.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let b = x0.dim(0)?;
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let mut a = Vec::with_capacity(b);
        let mut s = Vec::with_capacity(b);
        for &t in ts {
            self.check(t)?;
            a.push(self.alpha_bar[t].sqrt());
            s.push((1.0 - self.alpha_bar[t]).sqrt());
        }
        let shape = [b, 1, 1, 1];
        let a = Tensor::from_vec(a, &shape, x0.device())?.to_dtype(x0.dtype())?;
        let s = Tensor::from_vec(s, &shape, x0.device())?.to_dtype(x0.dtype())?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// Uniformly strided ascending timesteps ending at `T - 1`.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n < 1 || n > t {
            return Err(Error::Config(format!("sampling steps must be in 1..={t}, got {n}")));
        }
        let stride = t / n;
        Ok((0..n).map(|s| t - 1 - (n - 1 - s) * stride).collect())
    }

    /// One deterministic DDIM update from `t` to the level `alpha_bar_prev`.
    pub fn ddim_step(&self, x: &Tensor, eps: &Tensor, t: usize, alpha_bar_prev: f64) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        let x0 = ((x - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        Ok(((x0 * alpha_bar_prev.sqrt())? + (eps * (1.0 - alpha_bar_prev).sqrt())?)?)
    }
}

/// Runs DDIM from `x_t` at the largest step down to the clean level.
/// `eps_fn(x, t)` returns the (already guided) noise prediction.
pub fn ddim_loop<F>(schedule: &NoiseSchedule, steps: usize, x_t: Tensor, mut eps_fn: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let ts = schedule.ddim_timesteps(steps)?;
    let mut x = x_t;
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab_prev = if i > 0 { schedule.alpha_bar(ts[i - 1]) } else { 1.0 };
        let eps = eps_fn(&x, t)?;
        x = schedule.ddim_step(&x, &eps, t, ab_prev)?;
    }
    Ok(x)
}
