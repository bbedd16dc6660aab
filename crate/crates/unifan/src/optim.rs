//! Adam with bias correction, organized block-per-block so the moment
//! arrays stay congruent with the model parameters (including the sparse
//! head's column-contiguous weight array), plus the plateau-driven
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{GradientSet, Model, ParamBlock};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment arrays for one parameter block. Entry `i`
/// belongs to parameter `i` of the block, so for the sparse head the
/// moments live per (column, slot) exactly like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamMoments<S> {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![S::ZERO; len],
            v: vec![S::ZERO; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Forgets the history of one parameter, as required when a pruned
    /// connection's slot is handed to a freshly regrown one.
    pub fn reset(&mut self, i: usize) {
        self.m[i] = S::ZERO;
        self.v[i] = S::ZERO;
    }
}

/// One Adam update on a flat block. `t` is the 1-based step count shared by
/// all blocks of the model:
/// `m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2;`
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_update_block<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    moments: &mut AdamMoments<S>,
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || moments.len() != params.len() {
        return Err(Error::shape(
            "adam_update",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                moments.len()
            ),
        ));
    }
    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let one_m_b1 = S::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = S::from_f64(1.0 - hyper.beta2);
    let eps = S::from_f64(hyper.eps);
    let bc1 = S::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let step = S::from_f64(lr);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        *m = b1 * *m + one_m_b1 * g;
        *v = b2 * *v + one_m_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= step * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state for a whole model: one moment pair per parameter block and a
/// single shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAdamState<S> {
    pub hyper: AdamHyper,
    t: u64,
    blocks: Vec<(ParamBlock, AdamMoments<S>)>,
}

impl<S: Scalar> ModelAdamState<S> {
    pub fn new(model: &Model<S>, hyper: AdamHyper) -> Self {
        let blocks = model
            .blocks()
            .into_iter()
            .map(|b| {
                let len = model.block_values(b).map_or(0, <[S]>::len);
                (b, AdamMoments::zeros(len))
            })
            .collect();
        ModelAdamState {
            hyper,
            t: 0,
            blocks,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments_mut(&mut self, block: ParamBlock) -> Option<&mut AdamMoments<S>> {
        self.blocks
            .iter_mut()
            .find(|(b, _)| *b == block)
            .map(|(_, m)| m)
    }

    pub fn moments(&self, block: ParamBlock) -> Option<&AdamMoments<S>> {
        self.blocks
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, m)| m)
    }
}

/// One optimizer step over every block of the model. The step counter
/// increments exactly once per call. Parameters are checked for blow-ups
/// afterwards so a divergence fails fast with the offending block named.
pub fn adam_step<S: Scalar>(
    model: &mut Model<S>,
    grads: &GradientSet<S>,
    state: &mut ModelAdamState<S>,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let hyper = state.hyper;
    for (block, moments) in state.blocks.iter_mut() {
        let grad = grads
            .block(*block)
            .ok_or_else(|| Error::shape("adam_step", format!("gradients missing block {}", block.name())))?;
        let params = model
            .block_values_mut(*block)
            .ok_or_else(|| Error::shape("adam_step", format!("model missing block {}", block.name())))?;
        adam_update_block(params, grad, moments, t, lr, &hyper)?;
        for (i, p) in params.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("{} at {i} after step {t}: {p}", block.name())));
            }
        }
    }
    Ok(())
}

/// What the schedule decided after seeing one more validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleDecision {
    /// New best score (by at least `min_delta`); training continues.
    Improved,
    /// No meaningful improvement yet, patience not exhausted.
    Stale,
    /// Patience ran out; the learning rate was halved (and clamped to the
    /// floor).
    Decayed,
    /// Patience ran out while already at the floor; stop training.
    Stop,
}

/// Halve-on-plateau schedule over a validation score where higher is
/// better. An observation "improves" when it beats the best seen so far by
/// at least `min_delta` (absolute). After `patience` consecutive
/// non-improving observations the learning rate is halved, clamping at
/// `floor`; a plateau at the floor stops the run.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    lr: f64,
    floor: f64,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, floor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !initial_lr.is_finite() || !floor.is_finite() || initial_lr <= 0.0 || floor <= 0.0 || floor > initial_lr {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < floor <= initial, got initial {initial_lr}, floor {floor}"
            )));
        }
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !min_delta.is_finite() || min_delta < 0.0 {
            return Err(Error::config(format!("min_delta {min_delta} must be non-negative")));
        }
        Ok(LrSchedule {
            lr: initial_lr,
            floor,
            patience,
            min_delta,
            best: None,
            stale: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> ScheduleDecision {
        let improved = match self.best {
            None => true,
            Some(best) => score >= best + self.min_delta,
        };
        if improved {
            self.best = Some(score);
            self.stale = 0;
            return ScheduleDecision::Improved;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleDecision::Stale;
        }
        self.stale = 0;
        if self.lr <= self.floor {
            return ScheduleDecision::Stop;
        }
        self.lr = (self.lr / 2.0).max(self.floor);
        ScheduleDecision::Decayed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, HeadKind, ModelConfig};

    /// Scalar reference Adam, kept deliberately naive.
    fn scalar_adam(g: &[f64], hyper: &AdamHyper, lr: f64, steps: usize, p0: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps {
            let gt = g[t - 1];
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * gt;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * gt * gt;
            let m_hat = m / (1.0 - hyper.beta1.powi(t as i32));
            let v_hat = v / (1.0 - hyper.beta2.powi(t as i32));
            p -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
        p
    }

    #[test]
    fn block_update_matches_scalar_reference() {
        let hyper = AdamHyper::default();
        let grads_per_step = [0.3, -0.7, 0.1, 0.9, -0.2];
        let mut params = vec![1.5f64];
        let mut moments = AdamMoments::zeros(1);
        for (t, &g) in grads_per_step.iter().enumerate() {
            adam_update_block(&mut params, &[g], &mut moments, t as u64 + 1, 1e-3, &hyper).unwrap();
        }
        let want = scalar_adam(&grads_per_step, &hyper, 1e-3, grads_per_step.len(), 1.5);
        assert!((params[0] - want).abs() < 1e-15, "{} vs {want}", params[0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes |step 1| ~ lr regardless of gradient scale.
        let hyper = AdamHyper::default();
        for &g in &[1e-4f64, 1.0, 1e4] {
            let mut params = vec![0.0f64];
            let mut moments = AdamMoments::zeros(1);
            adam_update_block(&mut params, &[g], &mut moments, 1, 1e-3, &hyper).unwrap();
            let moved = params[0].abs();
            assert!((moved - 1e-3).abs() < 1e-5, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn update_rejects_mismatched_lengths() {
        let mut params = vec![0.0f64; 3];
        let mut moments = AdamMoments::zeros(3);
        assert!(adam_update_block(&mut params, &[0.0; 2], &mut moments, 1, 1e-3, &AdamHyper::default()).is_err());
    }

    #[test]
    fn model_step_counter_and_divergence_detection() {
        let config = ModelConfig {
            feature_dim: 4,
            num_labels: 6,
            intermediate_dim: None,
            head: HeadKind::UniformSparse { fan_in: 2 },
            activation: Activation::Identity,
            dropout: 0.0,
            seed: 1,
        };
        let mut model: Model<f64> = Model::init(config).unwrap();
        let mut state = ModelAdamState::new(&model, AdamHyper::default());
        let n = model.block_values(ParamBlock::HeadWeights).unwrap().len();
        let grads = GradientSet {
            intermediate_weights: None,
            intermediate_bias: None,
            head_weights: vec![0.5; n],
            skip: Default::default(),
        };
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(state.step_count(), 2);

        let bad = GradientSet {
            intermediate_weights: None,
            intermediate_bias: None,
            head_weights: vec![f64::INFINITY; n],
            skip: Default::default(),
        };
        let err = adam_step(&mut model, &bad, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn schedule_walks_the_expected_decay_path() {
        let mut sched = LrSchedule::new(1e-3, 1e-4, 2, 1e-4).unwrap();
        assert_eq!(sched.observe(0.50), ScheduleDecision::Improved);
        let mut lrs = vec![];
        let mut decision = ScheduleDecision::Improved;
        for _ in 0..32 {
            decision = sched.observe(0.50); // flat forever
            if decision == ScheduleDecision::Decayed {
                lrs.push(sched.lr());
            }
            if decision == ScheduleDecision::Stop {
                break;
            }
        }
        assert_eq!(decision, ScheduleDecision::Stop);
        assert_eq!(lrs, vec![5e-4, 2.5e-4, 1.25e-4, 1e-4]);
    }

    #[test]
    fn improvement_below_min_delta_counts_as_stagnation() {
        let mut sched = LrSchedule::new(1e-3, 1e-4, 2, 1e-4).unwrap();
        assert_eq!(sched.observe(0.500), ScheduleDecision::Improved);
        // +5e-5 is below min_delta = 1e-4.
        assert_eq!(sched.observe(0.50005), ScheduleDecision::Stale);
        assert_eq!(sched.observe(0.50009), ScheduleDecision::Decayed);
        assert_eq!(sched.lr(), 5e-4);
        // A real improvement resets both patience and best.
        assert_eq!(sched.observe(0.51), ScheduleDecision::Improved);
        assert_eq!(sched.best(), Some(0.51));
    }

    #[test]
    fn schedule_rejects_bad_settings() {
        assert!(LrSchedule::new(0.0, 1e-4, 2, 1e-4).is_err());
        assert!(LrSchedule::new(1e-3, 0.0, 2, 1e-4).is_err());
        assert!(LrSchedule::new(1e-4, 1e-3, 2, 1e-4).is_err());
        assert!(LrSchedule::new(1e-3, 1e-4, 0, 1e-4).is_err());
        assert!(LrSchedule::new(1e-3, 1e-4, 2, -1.0).is_err());
    }
}
