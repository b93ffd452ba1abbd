use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{axpy, dot, ParamVector};
use crate::error::{check_len, DbosError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Shape of a fully connected network with `hidden_layers` tanh layers of
/// width `hidden` followed by a linear output layer.
///
/// `hidden_layers = 0` gives a single affine map. Parameters are laid out as
/// `[W0, b0, W1, b1, ..., Wout, bout]` with every `W` row-major `(out, in)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: usize, output: usize, hidden_layers: usize) -> Result<Self> {
        let spec = Self {
            input,
            hidden,
            output,
            hidden_layers,
            activation: Activation::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(DbosError::Config(format!(
                "mlp dims must be >= 1, got in={} hidden={} out={}",
                self.input, self.hidden, self.output
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden));
            fan_in = self.hidden;
        }
        dims.push((fan_in, self.output));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Registers the hidden layers as `{prefix}l{i}.w` / `{prefix}l{i}.b`.
    /// The output layer is left for the caller, who may split it into heads.
    pub fn register_hidden(&self, pv: &mut ParamVector, prefix: &str) -> Result<()> {
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().take(self.hidden_layers).enumerate() {
            pv.register(format!("{prefix}l{i}.w"), &[fan_out, fan_in])?;
            pv.register(format!("{prefix}l{i}.b"), &[fan_out])?;
        }
        Ok(())
    }

    /// Registers all layers, the output layer as `{prefix}out.w` / `{prefix}out.b`.
    pub fn register(&self, pv: &mut ParamVector, prefix: &str) -> Result<()> {
        self.register_hidden(pv, prefix)?;
        let fan_in = self.layer_dims().last().map(|d| d.0).unwrap_or(self.input);
        pv.register(format!("{prefix}out.w"), &[self.output, fan_in])?;
        pv.register(format!("{prefix}out.b"), &[self.output])?;
        Ok(())
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_uniform<R: Rng>(&self, params: &mut [f64], rng: &mut R) -> Result<()> {
        check_len("MlpSpec::init_uniform", self.param_count(), params.len())?;
        let mut off = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = fan_in * fan_out + fan_out;
            for p in &mut params[off..off + n] {
                *p = rng.gen_range(-bound..=bound);
            }
            off += n;
        }
        Ok(())
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        check_len("mlp params", self.param_count(), params.len())?;
        check_len("mlp input", self.input, x.len())
    }
}

/// Layer activations from a forward pass. `acts[0]` is the input and the
/// last entry is the (linear) network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let n_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, bo)| bo + dot(&w[o * n_in..(o + 1) * n_in], x)));
}

pub fn mlp_forward_cached(params: &[f64], spec: &MlpSpec, x: &[f64]) -> Result<MlpCache> {
    spec.check(params, x)?;
    let dims = spec.layer_dims();
    let mut acts = Vec::with_capacity(dims.len() + 1);
    acts.push(x.to_vec());
    let mut off = 0;
    for (li, (fan_in, fan_out)) in dims.iter().copied().enumerate() {
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let mut h = Vec::with_capacity(fan_out);
        affine(w, b, &acts[li], &mut h);
        if li < spec.hidden_layers {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(h);
    }
    Ok(MlpCache { acts })
}

pub fn mlp_forward(params: &[f64], spec: &MlpSpec, x: &[f64]) -> Result<Vec<f64>> {
    let mut cache = mlp_forward_cached(params, spec, x)?;
    Ok(cache.acts.pop().expect("non-empty"))
}

/// Backward pass of `upstreamᵀ · f(x)`, accumulating parameter gradients into
/// `grad` and returning the gradient with respect to `x`.
pub fn mlp_backward_into(
    params: &[f64],
    spec: &MlpSpec,
    cache: &MlpCache,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    check_len("mlp params", spec.param_count(), params.len())?;
    check_len("mlp grad", spec.param_count(), grad.len())?;
    check_len("mlp upstream", spec.output, upstream.len())?;
    let dims = spec.layer_dims();
    check_len("mlp cache", dims.len() + 1, cache.acts.len())?;

    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for (fan_in, fan_out) in &dims {
        offsets.push(off);
        off += fan_in * fan_out + fan_out;
    }

    let mut delta = upstream.to_vec();
    for li in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[li];
        let w_off = offsets[li];
        let b_off = w_off + fan_in * fan_out;
        let x = &cache.acts[li];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            axpy(d, x, &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in]);
            grad[b_off + o] += d;
        }
        let mut dx = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(d, &params[w_off + o * fan_in..w_off + (o + 1) * fan_in], &mut dx);
            }
        }
        if li > 0 {
            // input to this layer is tanh output of the previous one
            for (g, h) in dx.iter_mut().zip(x) {
                *g *= 1.0 - h * h;
            }
        }
        delta = dx;
    }
    Ok(delta)
}

/// Convenience wrapper returning `(grad_params, grad_x)`.
pub fn mlp_backward(
    params: &[f64],
    spec: &MlpSpec,
    x: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = mlp_forward_cached(params, spec, x)?;
    let mut grad = vec![0.0; params.len()];
    let gx = mlp_backward_into(params, spec, &cache, upstream, &mut grad)?;
    Ok((grad, gx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64) -> (MlpSpec, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..5),
            rng.gen_range(0..3),
        )
        .unwrap();
        let mut p = vec![0.0; spec.param_count()];
        spec.init_uniform(&mut p, &mut rng).unwrap();
        // widen the weights so tanh leaves its linear regime
        p.iter_mut().for_each(|v| *v *= 2.0);
        let x: Vec<f64> = (0..spec.input).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let u: Vec<f64> = (0..spec.output).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (spec, p, x, u)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(3, 4, 2, 2).unwrap();
        let y = mlp_forward(&vec![0.0; spec.param_count()], &spec, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn one_unit_identity_net() {
        let spec = MlpSpec::new(1, 1, 1, 1).unwrap();
        // W0=1, b0=0, Wout=1, bout=0
        let y = mlp_forward(&[1.0, 0.0, 1.0, 0.0], &spec, &[0.0]).unwrap();
        assert_eq!(y, vec![0.0]);
        let y = mlp_forward(&[1.0, 0.0, 1.0, 0.0], &spec, &[0.5]).unwrap();
        assert!((y[0] - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_hand_recomputation() {
        // in=2, hidden=2, out=1, one hidden layer
        let spec = MlpSpec::new(2, 2, 1, 1).unwrap();
        let p = [0.1, -0.2, 0.3, 0.4, 0.05, -0.05, 0.7, -0.6, 0.2];
        let x = [1.0, 2.0];
        let h0 = (0.1 * 1.0 - 0.2 * 2.0 + 0.05f64).tanh();
        let h1 = (0.3 * 1.0 + 0.4 * 2.0 - 0.05f64).tanh();
        let expected = 0.7 * h0 - 0.6 * h1 + 0.2;
        let y = mlp_forward(&p, &spec, &x).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::new(2, 3, 1, 1).unwrap();
        let p = vec![0.0; spec.param_count()];
        assert!(mlp_forward(&p, &spec, &[1.0]).is_err());
        assert!(mlp_forward(&p[1..], &spec, &[1.0, 2.0]).is_err());
        assert!(mlp_backward(&p, &spec, &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(MlpSpec::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn linear_layer_weight_gradient() {
        let spec = MlpSpec::new(3, 1, 2, 0).unwrap();
        let p: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.1).collect();
        let x = [0.5, -1.0, 2.0];
        let u = [0.3, -0.7];
        let (g, _) = mlp_backward(&p, &spec, &x, &u).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(g[i * 3 + j], u[i] * x[j]);
            }
            assert_eq!(g[6 + i], u[i]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (spec, p, x, _) = random_instance(3);
        let (g, gx) = mlp_backward(&p, &spec, &x, &vec![0.0; spec.output]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..120 {
            let (spec, p, x, u) = random_instance(seed);
            let (g, gx) = mlp_backward(&p, &spec, &x, &u).unwrap();
            let f = |q: &[f64]| dot(&mlp_forward(q, &spec, &x).unwrap(), &u);
            let fd = finite_diff_grad(f, &p, 1e-6).unwrap();
            worst = worst.max(max_rel_error(&g, &fd, 1e-4));
            let fx = |xx: &[f64]| dot(&mlp_forward(&p, &spec, xx).unwrap(), &u);
            let fdx = finite_diff_grad(fx, &x, 1e-6).unwrap();
            worst = worst.max(max_rel_error(&gx, &fdx, 1e-4));
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let (spec, p, x, _) = random_instance(11);
        let a = mlp_forward(&p, &spec, &x).unwrap();
        let b = mlp_forward(&p, &spec, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
