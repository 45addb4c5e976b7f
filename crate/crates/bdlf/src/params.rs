//! Central parameter store plus the SGD-with-momentum optimizer and the
//! exponential moving average shadow used for evaluation.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Gradients, NodeId};

/// Handle to one named parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable arrays of a model, registered in construction order so that
/// a fixed seed yields a fixed initialization regardless of which losses are
/// later toggled on.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries across all blocks.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

// ── Initializers ────────────────────────────────────────────────────────

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Fan-in scaled normal, the default for weight matrices and conv kernels.
pub fn fan_in_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    normal(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Plain SGD with momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &Params, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    /// Apply one update from the gradients recorded on a tape. Parameters the
    /// tape never touched keep their velocity decaying toward zero.
    pub fn step(&mut self, params: &mut Params, bindings: &[(ParamId, NodeId)], grads: &Gradients, lr: f64) {
        let mut touched = vec![false; params.len()];
        for &(pid, nid) in bindings {
            touched[pid.index()] = true;
            if let Some(g) = grads.wrt(nid) {
                let v = &mut self.velocity[pid.index()];
                v.mapv_inplace(|x| x * self.momentum);
                *v += g;
                params.values[pid.index()].scaled_add(-lr, v);
            }
        }
        for (i, t) in touched.iter().enumerate() {
            if !t {
                self.velocity[i].mapv_inplace(|x| x * self.momentum);
            }
        }
    }
}

// ── EMA ─────────────────────────────────────────────────────────────────

/// Shadow copy of all parameters: `shadow <- decay * shadow + (1 - decay) * live`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    shadow: Params,
}

impl EmaState {
    pub fn new(params: &Params, decay: f64) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "ema decay must lie in (0, 1]");
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, live: &Params) {
        let d = self.decay;
        for (s, l) in self.shadow.values.iter_mut().zip(live.values.iter()) {
            s.zip_mut_with(l, |sv, lv| *sv = d * *sv + (1.0 - d) * lv);
        }
    }

    pub fn shadow(&self) -> &Params {
        &self.shadow
    }

    pub fn into_shadow(self) -> Params {
        self.shadow
    }

    pub(crate) fn from_parts(shadow: Params, decay: f64) -> Self {
        Self { decay, shadow }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use crate::tape::Tape;

    #[test]
    fn ema_with_unit_decay_never_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let id = params.register("w", normal(&mut rng, &[3, 3], 1.0));
        let initial = params.value(id).clone();
        let mut ema = EmaState::new(&params, 1.0);
        params.value_mut(id).mapv_inplace(|v| v + 1.0);
        ema.update(&params);
        ema.update(&params);
        assert_eq!(ema.shadow().value(id), &initial);
    }

    #[test]
    fn ema_tracks_live_parameters() {
        let mut params = Params::new();
        let id = params.register("w", zeros(&[2]));
        let mut ema = EmaState::new(&params, 0.5);
        params.value_mut(id).fill(1.0);
        ema.update(&params);
        assert!((ema.shadow().value(id)[[0]] - 0.5).abs() < 1e-15);
        ema.update(&params);
        assert!((ema.shadow().value(id)[[0]] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut params = Params::new();
        let id = params.register("x", ArrayD::from_elem(IxDyn(&[1]), 4.0));
        let mut opt = SgdMomentum::new(&params, 0.9);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.param_leaf(params.value(id).clone(), id);
            let sq = tape.mul(x, x);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            let bindings = tape.param_bindings().to_vec();
            opt.step(&mut params, &bindings, &grads, 0.05);
        }
        assert!(params.value(id)[[0]].abs() < 1e-3);
    }
}
