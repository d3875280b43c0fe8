//! Adam optimizer with bias correction, one moment pair per parameter
//! tensor, plus the learning-rate schedule and global-norm gradient clip
//! used by pre-training and fine-tuning.

use ndarray::Zip;

use crate::encoder::{s, EncoderParams, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates, shaped exactly like the parameters they
/// track, and the update counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub m: EncoderParams<F>,
    pub v: EncoderParams<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &EncoderParams<F>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One Adam update in place. `lr == 0` leaves the parameters bitwise
    /// unchanged (the moments still advance).
    pub fn step(&mut self, params: &mut EncoderParams<F>, grads: &EncoderParams<F>, lr: f64) {
        self.t += 1;
        let b1 = s::<F>(BETA1);
        let b2 = s::<F>(BETA2);
        let c1 = s::<F>(1.0 - BETA1);
        let c2 = s::<F>(1.0 - BETA2);
        // Bias-corrected step size, folded into a single scalar.
        let corr1 = 1.0 - BETA1.powi(self.t as i32);
        let corr2 = 1.0 - BETA2.powi(self.t as i32);
        let alpha = s::<F>(lr / corr1);
        let vscale = s::<F>(1.0 / corr2);
        let eps = s::<F>(EPS);
        let zero_lr = lr == 0.0;

        let mut pviews = params.tensor_views_mut();
        let gviews = grads.tensor_views();
        let mut mviews = self.m.tensor_views_mut();
        let mut vviews = self.v.tensor_views_mut();
        assert_eq!(pviews.len(), gviews.len(), "parameter/gradient tensor count mismatch");
        for i in 0..pviews.len() {
            let (pname, pv) = &mut pviews[i];
            let (gname, gv) = &gviews[i];
            assert_eq!(pname, gname, "parameter/gradient manifest order diverged");
            Zip::from(pv)
                .and(gv)
                .and(&mut mviews[i].1)
                .and(&mut vviews[i].1)
                .for_each(|p, &g, mm, vv| {
                    *mm = b1 * *mm + c1 * g;
                    *vv = b2 * *vv + c2 * g * g;
                    if !zero_lr {
                        *p = *p - alpha * *mm / ((*vv * vscale).sqrt() + eps);
                    }
                });
        }
    }
}

/// Linear warmup over the first 1% of the run (at least one step), then a
/// constant rate. `step` is zero-based.
pub fn scheduled_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    let warmup = (total_steps / 100).max(1);
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        base_lr
    }
}

/// Scale the gradients down so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut EncoderParams<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > max_norm {
        grads.scale_all(s::<F>(max_norm / norm));
    }
    norm
}
