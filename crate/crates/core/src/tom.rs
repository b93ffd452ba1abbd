//! Observation proxies for the observers' likelihood model.
//!
//! In canonical mode every observer is assumed to see what the shaper sees.
//! In estimated mode an LSTM reads the shaper's observation stream together
//! with an observer-slot embedding and an observer-role embedding and
//! predicts that observer's local observation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{check_len, DbosError, Result};
use crate::tensor::{axpy, dot, Optimizer, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyMode {
    Canonical,
    Estimated,
}

impl ProxyMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProxyMode::Canonical => "canonical",
            ProxyMode::Estimated => "estimated",
        }
    }
}

impl FromStr for ProxyMode {
    type Err = DbosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(ProxyMode::Canonical),
            "estimated" => Ok(ProxyMode::Estimated),
            other => Err(DbosError::Config(format!("unknown proxy mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub obs_dim: usize,
    pub hidden: usize,
    pub emb: usize,
    pub n_slots: usize,
    pub n_labels: usize,
}

/// One observer slot's training stream from a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSequence {
    pub slot: usize,
    /// Observer role label at each step (can change across episodes).
    pub labels: Vec<usize>,
    /// Shaper observation at each step.
    pub inputs: Vec<Vec<f64>>,
    /// Observer's true local observation at each step.
    pub targets: Vec<Vec<f64>>,
    /// Recurrent state is zeroed before steps flagged here.
    pub resets: Vec<bool>,
    /// State carried in from before the sequence, treated as a constant.
    pub init: LstmState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainStats {
    pub loss_before: f64,
    pub loss_after: f64,
}

struct StepCache {
    x: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PredictorArch {
    pub fn new(obs_dim: usize, hidden: usize, emb: usize, n_slots: usize, n_labels: usize) -> Result<Self> {
        if obs_dim == 0 || hidden == 0 || n_slots == 0 || n_labels == 0 {
            return Err(DbosError::Config("predictor dims must be >= 1".into()));
        }
        Ok(Self {
            obs_dim,
            hidden,
            emb,
            n_slots,
            n_labels,
        })
    }

    /// Width of `[obs, slot_emb, role_emb, h_prev]`.
    fn gate_input(&self) -> usize {
        self.obs_dim + 2 * self.emb + self.hidden
    }

    pub fn zeros(&self) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        pv.register("tom.slot_emb", &[self.n_slots, self.emb])?;
        pv.register("tom.role_emb", &[self.n_labels, self.emb])?;
        pv.register("tom.lstm.w", &[4 * self.hidden, self.gate_input()])?;
        pv.register("tom.lstm.b", &[4 * self.hidden])?;
        pv.register("tom.out.w", &[self.obs_dim, self.hidden])?;
        pv.register("tom.out.b", &[self.obs_dim])?;
        Ok(pv)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamVector> {
        let mut pv = self.zeros()?;
        let fan_in = self.gate_input() as f64;
        let bound_gate = 1.0 / fan_in.sqrt();
        let bound_out = 1.0 / (self.hidden as f64).sqrt();
        for e in pv.registry().to_vec() {
            let bound = match e.name.as_str() {
                "tom.slot_emb" | "tom.role_emb" => 1.0,
                "tom.out.w" | "tom.out.b" => bound_out,
                _ => bound_gate,
            };
            for v in &mut pv.as_mut_slice()[e.range()] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(pv)
    }

    fn offsets(&self) -> [usize; 6] {
        let h = self.hidden;
        let slot = 0;
        let role = slot + self.n_slots * self.emb;
        let w = role + self.n_labels * self.emb;
        let b = w + 4 * h * self.gate_input();
        let ow = b + 4 * h;
        let ob = ow + self.obs_dim * h;
        [slot, role, w, b, ow, ob]
    }

    fn param_count(&self) -> usize {
        self.offsets()[5] + self.obs_dim
    }

    fn forward_step(
        &self,
        theta: &[f64],
        state: &LstmState,
        obs: &[f64],
        slot: usize,
        label: usize,
    ) -> Result<StepCache> {
        check_len("predictor params", self.param_count(), theta.len())?;
        check_len("predictor obs", self.obs_dim, obs.len())?;
        if slot >= self.n_slots || label >= self.n_labels {
            return Err(DbosError::Config(format!(
                "predictor slot {slot} / label {label} out of range"
            )));
        }
        let [o_slot, o_role, o_w, o_b, o_ow, o_ob] = self.offsets();
        let (h, e, n_in) = (self.hidden, self.emb, self.gate_input());
        let mut x = Vec::with_capacity(n_in);
        x.extend_from_slice(obs);
        x.extend_from_slice(&theta[o_slot + slot * e..o_slot + (slot + 1) * e]);
        x.extend_from_slice(&theta[o_role + label * e..o_role + (label + 1) * e]);
        x.extend_from_slice(&state.h);
        let pre = |r: usize| theta[o_b + r] + dot(&theta[o_w + r * n_in..o_w + (r + 1) * n_in], &x);
        let i: Vec<f64> = (0..h).map(|r| sigmoid(pre(r))).collect();
        let f: Vec<f64> = (0..h).map(|r| sigmoid(pre(h + r))).collect();
        let g: Vec<f64> = (0..h).map(|r| pre(2 * h + r).tanh()).collect();
        let o: Vec<f64> = (0..h).map(|r| sigmoid(pre(3 * h + r))).collect();
        let c: Vec<f64> = (0..h).map(|r| f[r] * state.c[r] + i[r] * g[r]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|r| o[r] * tanh_c[r]).collect();
        let y: Vec<f64> = (0..self.obs_dim)
            .map(|d| theta[o_ob + d] + dot(&theta[o_ow + d * h..o_ow + (d + 1) * h], &hn))
            .collect();
        Ok(StepCache {
            x,
            i,
            f,
            g,
            o,
            c_prev: state.c.clone(),
            tanh_c,
            h: hn,
            y,
        })
    }

    /// Advances the recurrent state by one shaper observation and returns the
    /// predicted observer observation.
    pub fn step(
        &self,
        theta: &[f64],
        state: &LstmState,
        obs: &[f64],
        slot: usize,
        label: usize,
    ) -> Result<(LstmState, Vec<f64>)> {
        let sc = self.forward_step(theta, state, obs, slot, label)?;
        let c: Vec<f64> = (0..self.hidden)
            .map(|r| sc.f[r] * sc.c_prev[r] + sc.i[r] * sc.g[r])
            .collect();
        Ok((LstmState { h: sc.h, c }, sc.y))
    }

    fn check_sequence(&self, seq: &PredictorSequence) -> Result<usize> {
        let t = seq.inputs.len();
        check_len("predictor targets", t, seq.targets.len())?;
        check_len("predictor labels", t, seq.labels.len())?;
        check_len("predictor resets", t, seq.resets.len())?;
        check_len("predictor init h", self.hidden, seq.init.h.len())?;
        check_len("predictor init c", self.hidden, seq.init.c.len())?;
        Ok(t)
    }

    fn run(&self, theta: &[f64], seq: &PredictorSequence) -> Result<Vec<StepCache>> {
        let t = self.check_sequence(seq)?;
        let mut state = seq.init.clone();
        let mut caches = Vec::with_capacity(t);
        for s in 0..t {
            if seq.resets[s] {
                state = LstmState::zeros(self.hidden);
            }
            let sc = self.forward_step(theta, &state, &seq.inputs[s], seq.slot, seq.labels[s])?;
            let c: Vec<f64> = (0..self.hidden)
                .map(|r| sc.f[r] * sc.c_prev[r] + sc.i[r] * sc.g[r])
                .collect();
            state = LstmState { h: sc.h.clone(), c };
            caches.push(sc);
        }
        Ok(caches)
    }

    /// Mean squared error over steps and dimensions.
    pub fn sequence_loss(&self, theta: &[f64], seq: &PredictorSequence) -> Result<f64> {
        let caches = self.run(theta, seq)?;
        let n = (caches.len() * self.obs_dim).max(1) as f64;
        let mut s = 0.0;
        for (sc, tgt) in caches.iter().zip(&seq.targets) {
            check_len("predictor target", self.obs_dim, tgt.len())?;
            s += sc.y.iter().zip(tgt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(s / n)
    }

    /// Squared error per observation dimension, averaged over steps.
    pub fn per_dim_error(&self, theta: &[f64], seqs: &[PredictorSequence]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.obs_dim];
        let mut n = 0usize;
        for seq in seqs {
            for (sc, tgt) in self.run(theta, seq)?.iter().zip(&seq.targets) {
                for d in 0..self.obs_dim {
                    acc[d] += (sc.y[d] - tgt[d]).powi(2);
                }
                n += 1;
            }
        }
        acc.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        Ok(acc)
    }

    /// Full backpropagation through time of [`Self::sequence_loss`] scaled by
    /// `weight`, accumulated into `grad`. Returns the unscaled loss.
    pub fn accumulate_sequence_grad(
        &self,
        theta: &[f64],
        seq: &PredictorSequence,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_len("predictor grad", self.param_count(), grad.len())?;
        let caches = self.run(theta, seq)?;
        let t = caches.len();
        if t == 0 {
            return Ok(0.0);
        }
        let [o_slot, o_role, o_w, o_b, o_ow, o_ob] = self.offsets();
        let (h, e, n_in, d_obs) = (self.hidden, self.emb, self.gate_input(), self.obs_dim);
        let scale = 2.0 * weight / (t * d_obs) as f64;
        let mut loss = 0.0;
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        for s in (0..t).rev() {
            let sc = &caches[s];
            let tgt = &seq.targets[s];
            check_len("predictor target", d_obs, tgt.len())?;
            let mut dh = dh_next.clone();
            for d in 0..d_obs {
                let err = sc.y[d] - tgt[d];
                loss += err * err;
                let dy = scale * err;
                grad[o_ob + d] += dy;
                axpy(dy, &sc.h, &mut grad[o_ow + d * h..o_ow + (d + 1) * h]);
                axpy(dy, &theta[o_ow + d * h..o_ow + (d + 1) * h], &mut dh);
            }
            for r in 0..h {
                let dc = dc_next[r] + dh[r] * sc.o[r] * (1.0 - sc.tanh_c[r] * sc.tanh_c[r]);
                let d_o = dh[r] * sc.tanh_c[r];
                let d_i = dc * sc.g[r];
                let d_g = dc * sc.i[r];
                let d_f = dc * sc.c_prev[r];
                da[r] = d_i * sc.i[r] * (1.0 - sc.i[r]);
                da[h + r] = d_f * sc.f[r] * (1.0 - sc.f[r]);
                da[2 * h + r] = d_g * (1.0 - sc.g[r] * sc.g[r]);
                da[3 * h + r] = d_o * sc.o[r] * (1.0 - sc.o[r]);
                dc_next[r] = dc * sc.f[r];
            }
            let mut dx = vec![0.0; n_in];
            for (row, &a) in da.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                grad[o_b + row] += a;
                axpy(a, &sc.x, &mut grad[o_w + row * n_in..o_w + (row + 1) * n_in]);
                axpy(a, &theta[o_w + row * n_in..o_w + (row + 1) * n_in], &mut dx);
            }
            let slot = seq.slot;
            let label = seq.labels[s];
            axpy(1.0, &dx[d_obs..d_obs + e], &mut grad[o_slot + slot * e..o_slot + (slot + 1) * e]);
            axpy(1.0, &dx[d_obs + e..d_obs + 2 * e], &mut grad[o_role + label * e..o_role + (label + 1) * e]);
            dh_next.copy_from_slice(&dx[d_obs + 2 * e..]);
            if seq.resets[s] {
                // the state entering this step was zeroed, nothing flows further back
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                dc_next.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(loss / (t * d_obs) as f64)
    }

    pub fn mean_loss(&self, theta: &[f64], seqs: &[PredictorSequence]) -> Result<f64> {
        let mut s = 0.0;
        for q in seqs {
            s += self.sequence_loss(theta, q)?;
        }
        Ok(s / seqs.len().max(1) as f64)
    }

    /// One optimizer step per sequence per epoch, in shuffled order.
    pub fn train_predictor<R: Rng>(
        &self,
        params: &mut ParamVector,
        seqs: &[PredictorSequence],
        opt: &mut Optimizer,
        epochs: usize,
        minibatches: usize,
        rng: &mut R,
    ) -> Result<PredictorTrainStats> {
        if seqs.is_empty() {
            return Err(DbosError::Data("predictor dataset is empty".into()));
        }
        let loss_before = self.mean_loss(params.as_slice(), seqs)?;
        let mut idx: Vec<usize> = (0..seqs.len()).collect();
        let mb = minibatches.max(1).min(seqs.len());
        let mut grad = vec![0.0; params.len()];
        for _ in 0..epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(seqs.len().div_ceil(mb)) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let w = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    self.accumulate_sequence_grad(params.as_slice(), &seqs[i], w, &mut grad)?;
                }
                opt.step(params.as_mut_slice(), &grad)?;
            }
        }
        let loss_after = self.mean_loss(params.as_slice(), seqs)?;
        Ok(PredictorTrainStats {
            loss_before,
            loss_after,
        })
    }
}

/// Proxy observation for one observer at the current step.
///
/// Canonical mode returns the shaper's observation. Estimated mode advances
/// `state` through the predictor and returns its output.
pub fn proxy_observation(
    mode: ProxyMode,
    shaper_obs: &[f64],
    slot: usize,
    label: usize,
    predictor: Option<(&PredictorArch, &[f64])>,
    state: &mut LstmState,
) -> Result<Vec<f64>> {
    match mode {
        ProxyMode::Canonical => Ok(shaper_obs.to_vec()),
        ProxyMode::Estimated => {
            let (arch, theta) = predictor.ok_or_else(|| {
                DbosError::Config("estimated proxy mode requires a predictor".into())
            })?;
            let (next, y) = arch.step(theta, state, shaper_obs, slot, label)?;
            *state = next;
            Ok(y)
        }
    }
}
