//! Belief critic `V_phi(o, vec(B))`, a separate network from the policy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::BeliefMatrix;
use crate::error::{check_len, DbosError, Result};
use crate::tensor::{
    mlp_backward_into, mlp_forward, mlp_forward_cached, Mat64, MlpSpec, Optimizer, ParamVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticArch {
    pub obs_dim: usize,
    pub n_observers: usize,
    pub n_roles: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

/// One regression sample: the observation and flattened beliefs at `t + k`
/// and the return stored at that same index.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSample {
    pub obs: Vec<f64>,
    pub beliefs: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainStats {
    pub loss_before: f64,
    pub loss_after: f64,
    pub samples: usize,
}

impl CriticArch {
    pub fn new(
        obs_dim: usize,
        n_observers: usize,
        n_roles: usize,
        hidden: usize,
        hidden_layers: usize,
    ) -> Result<Self> {
        let arch = Self {
            obs_dim,
            n_observers,
            n_roles,
            hidden,
            hidden_layers,
        };
        arch.spec().validate()?;
        Ok(arch)
    }

    pub fn belief_dim(&self) -> usize {
        self.n_observers * self.n_roles
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            input: self.obs_dim + self.belief_dim(),
            hidden: self.hidden,
            output: 1,
            hidden_layers: self.hidden_layers,
            activation: crate::tensor::Activation::Tanh,
        }
    }

    pub fn zeros(&self) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        self.spec().register(&mut pv, "critic.")?;
        Ok(pv)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamVector> {
        let mut pv = self.zeros()?;
        self.spec().init_uniform(pv.as_mut_slice(), rng)?;
        Ok(pv)
    }

    fn input(&self, o: &[f64], beliefs: &[f64]) -> Result<Vec<f64>> {
        check_len("critic observation", self.obs_dim, o.len())?;
        check_len("critic beliefs", self.belief_dim(), beliefs.len())?;
        let mut x = Vec::with_capacity(o.len() + beliefs.len());
        x.extend_from_slice(o);
        x.extend_from_slice(beliefs);
        Ok(x)
    }

    pub fn value_flat(&self, phi: &[f64], o: &[f64], beliefs: &[f64]) -> Result<f64> {
        Ok(mlp_forward(phi, &self.spec(), &self.input(o, beliefs)?)?[0])
    }

    pub fn critic_value(&self, phi: &[f64], o: &[f64], b: &BeliefMatrix) -> Result<f64> {
        self.value_flat(phi, o, b.as_flat())
    }

    /// `dV / d vec(B)` as a flat row-major vector.
    pub fn grad_wrt_belief_flat(&self, phi: &[f64], o: &[f64], beliefs: &[f64]) -> Result<Vec<f64>> {
        let spec = self.spec();
        let x = self.input(o, beliefs)?;
        let cache = mlp_forward_cached(phi, &spec, &x)?;
        let mut scratch = vec![0.0; phi.len()];
        let gx = mlp_backward_into(phi, &spec, &cache, &[1.0], &mut scratch)?;
        Ok(gx[self.obs_dim..].to_vec())
    }

    /// `dV / dB` in the observer-by-role layout.
    pub fn critic_grad_wrt_belief(&self, phi: &[f64], o: &[f64], b: &BeliefMatrix) -> Result<Mat64> {
        let g = self.grad_wrt_belief_flat(phi, o, b.as_flat())?;
        Mat64::from_vec(self.n_observers, self.n_roles, g)
    }

    pub fn mse(&self, phi: &[f64], data: &[CriticSample]) -> Result<f64> {
        let mut s = 0.0;
        for d in data {
            let e = self.value_flat(phi, &d.obs, &d.beliefs)? - d.target;
            s += e * e;
        }
        Ok(s / data.len().max(1) as f64)
    }

    /// Minibatch MSE regression. Each epoch shuffles the data and takes one
    /// optimizer step per minibatch.
    pub fn train_critic<R: Rng>(
        &self,
        phi: &mut ParamVector,
        data: &[CriticSample],
        opt: &mut Optimizer,
        epochs: usize,
        minibatches: usize,
        rng: &mut R,
    ) -> Result<CriticTrainStats> {
        if data.is_empty() {
            return Err(DbosError::Data("critic dataset is empty".into()));
        }
        if let Some(i) = data.iter().position(|d| !d.target.is_finite()) {
            return Err(DbosError::Data(format!("non-finite critic target at sample {i}")));
        }
        let spec = self.spec();
        let loss_before = self.mse(phi.as_slice(), data)?;
        let mut idx: Vec<usize> = (0..data.len()).collect();
        let mb = minibatches.max(1).min(data.len());
        let mut grad = vec![0.0; phi.len()];
        for _ in 0..epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(data.len().div_ceil(mb)) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 2.0 / chunk.len() as f64;
                for &i in chunk {
                    let d = &data[i];
                    let x = self.input(&d.obs, &d.beliefs)?;
                    let cache = mlp_forward_cached(phi.as_slice(), &spec, &x)?;
                    let err = cache.output()[0] - d.target;
                    mlp_backward_into(phi.as_slice(), &spec, &cache, &[scale * err], &mut grad)?;
                }
                opt.step(phi.as_mut_slice(), &grad)?;
            }
        }
        let loss_after = self.mse(phi.as_slice(), data)?;
        if !loss_after.is_finite() {
            return Err(DbosError::NonFinite {
                context: "critic loss",
                coordinate: 0,
            });
        }
        Ok(CriticTrainStats {
            loss_before,
            loss_after,
            samples: data.len(),
        })
    }
}
