//! AdamW with decoupled weight decay plus a cosine-annealing schedule.

/// Moment buffers and schedule settings for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub total_epochs: usize,
    pub min_lr: f32,
    /// Steps taken with an all-zero gradient (permitted, but worth surfacing).
    pub zero_grad_steps: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize, base_lr: f32, weight_decay: f32, total_epochs: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_epochs,
            min_lr: 0.0,
            zero_grad_steps: 0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        cosine_lr(epoch, self.total_epochs, self.base_lr, self.min_lr)
    }
}

/// One AdamW update of `params` in place. `lr` is the (already scheduled)
/// learning rate for this step.
pub fn adamw_step(params: &mut [f32], grads: &[f32], lr: f32, st: &mut OptimizerState) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient length mismatch: {} vs {}",
        params.len(),
        grads.len()
    );
    assert_eq!(params.len(), st.m.len(), "optimizer state sized for a different parameter count");
    st.step += 1;
    if grads.iter().all(|g| *g == 0.0) {
        st.zero_grad_steps += 1;
    }
    let t = st.step as f32;
    let bc1 = 1.0 - st.beta1.powf(t);
    let bc2 = 1.0 - st.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        params[i] -= lr * (mhat / (vhat.sqrt() + st.eps) + st.weight_decay * params[i]);
    }
}

/// Cosine annealing from `base_lr` at epoch 0 down to `min_lr` at
/// `total_epochs`; monotone nonincreasing in between.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f32, min_lr: f32) -> f32 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = (epoch.min(total_epochs) as f32) / (total_epochs as f32);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f32::consts::PI * t).cos())
}
