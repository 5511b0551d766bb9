//! Input-dependent SSM parameters and the gated Mamba block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::discretize::discretize;
use crate::error::{ensure, Result};
use crate::numerics::ops::{layer_norm, linear};
use crate::numerics::{BoundParams, ParamId, ParamStore, Real, Var};

/// Shape knobs for one Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// State size `N` per channel.
    pub state: usize,
    /// Inner width as a multiple of the token width.
    pub expand: usize,
    /// Depthwise convolution kernel size along the token axis.
    pub conv_kernel: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            state: 8,
            expand: 1,
            conv_kernel: 3,
        }
    }
}

/// Learnable state-space parameters for a diagonal selective SSM.
///
/// `A = -exp(a_log)` keeps the continuous system stable; `delta_tilde` is the
/// learnable offset inside `Δ = softplus(Δ̃ + Linear(x))`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub delta_tilde: ParamId,
    pub proj_b: (ParamId, ParamId),
    pub proj_c: (ParamId, ParamId),
    pub proj_delta: ParamId,
    pub state: usize,
    pub channels: usize,
    pub token_dim: usize,
}

impl SsmParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        token_dim: usize,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        // A_n = -(n + 1) for every channel.
        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{prefix}.a_log"),
            crate::numerics::DiffArray::from_f64(&[channels, state], &a_log)
                .expect("a_log shape"),
        );
        // Step sizes spread log-uniformly over [1e-2, 1e-1], stored as inverse softplus.
        let delta_tilde: Vec<f64> = (0..channels)
            .map(|_| {
                let dt: f64 = (rng.random::<f64>() * (0.1f64.ln() - 0.01f64.ln()) + 0.01f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let delta_tilde = store.add(
            format!("{prefix}.delta_tilde"),
            crate::numerics::DiffArray::from_f64(&[channels], &delta_tilde).expect("dt shape"),
        );
        let std = 1.0 / (token_dim as f64).sqrt();
        let proj_b = (
            store.normal(format!("{prefix}.proj_b.w"), &[token_dim, state], std, rng),
            store.zeros(format!("{prefix}.proj_b.b"), &[state]),
        );
        let proj_c = (
            store.normal(format!("{prefix}.proj_c.w"), &[token_dim, state], std, rng),
            store.zeros(format!("{prefix}.proj_c.b"), &[state]),
        );
        let proj_delta = store.normal(
            format!("{prefix}.proj_delta.w"),
            &[token_dim, channels],
            0.1 * std,
            rng,
        );
        Self {
            a_log,
            delta_tilde,
            proj_b,
            proj_c,
            proj_delta,
            state,
            channels,
            token_dim,
        }
    }

    /// `A = -exp(A_log)`, shape [channels, N].
    pub fn a<'t, T: Real>(&self, p: &BoundParams<'t, T>) -> Var<'t, T> {
        -p.get(self.a_log).exp()
    }
}

/// Per-token `B` [T, N], `C` [T, N] and `Δ` [T, channels].
pub fn input_params<'t, T: Real>(
    tokens: Var<'t, T>,
    params: &SsmParams,
    p: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let shape = tokens.shape();
    ensure!(
        shape.len() == 2 && shape[0] >= 1,
        "tokens must be a non-empty [T, dim] array, got {shape:?}"
    );
    ensure!(
        shape[1] == params.token_dim,
        "token width {} does not match projection width {}",
        shape[1],
        params.token_dim
    );
    let b = linear(tokens, p.get(params.proj_b.0), Some(p.get(params.proj_b.1)));
    let c = linear(tokens, p.get(params.proj_c.0), Some(p.get(params.proj_c.1)));
    let delta = (tokens.matmul(p.get(params.proj_delta)) + p.get(params.delta_tilde)).softplus();
    Ok((b, c, delta))
}

/// Parameters of one gated Mamba block with a residual connection.
#[derive(Clone, Debug)]
pub struct MambaBlockParams {
    pub norm: (ParamId, ParamId),
    pub in_proj: (ParamId, ParamId),
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub gate_proj: (ParamId, ParamId),
    pub ssm: SsmParams,
    pub out_proj: (ParamId, ParamId),
    pub dim: usize,
    pub inner: usize,
}

impl MambaBlockParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Self {
        let inner = dim * cfg.expand;
        let std = 1.0 / (dim as f64).sqrt();
        let norm = (
            store.full(format!("{prefix}.norm.gain"), &[dim], 1.0),
            store.zeros(format!("{prefix}.norm.bias"), &[dim]),
        );
        let in_proj = (
            store.normal(format!("{prefix}.in_proj.w"), &[dim, inner], std, rng),
            store.zeros(format!("{prefix}.in_proj.b"), &[inner]),
        );
        let conv_weight = store.normal(
            format!("{prefix}.conv.w"),
            &[inner, cfg.conv_kernel],
            1.0 / (cfg.conv_kernel as f64).sqrt(),
            rng,
        );
        let conv_bias = store.zeros(format!("{prefix}.conv.b"), &[inner]);
        let gate_proj = (
            store.normal(format!("{prefix}.gate_proj.w"), &[dim, inner], std, rng),
            store.zeros(format!("{prefix}.gate_proj.b"), &[inner]),
        );
        let ssm = SsmParams::new(store, &format!("{prefix}.ssm"), inner, inner, cfg.state, rng);
        let out_proj = (
            store.normal(
                format!("{prefix}.out_proj.w"),
                &[inner, dim],
                0.5 / (inner as f64).sqrt(),
                rng,
            ),
            store.zeros(format!("{prefix}.out_proj.b"), &[dim]),
        );
        Self {
            norm,
            in_proj,
            conv_weight,
            conv_bias,
            gate_proj,
            ssm,
            out_proj,
            dim,
            inner,
        }
    }

    /// Zeroes the output projection so the block reduces to its residual path.
    pub fn make_pass_through<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.out_proj.0, self.out_proj.1] {
            store.get_mut(id).data_mut().fill(T::zero());
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// layer-norm → input projection → causal depthwise conv → SiLU → selective
/// scan, gated by SiLU of a parallel projection, then output projection and
/// residual. Output shape equals input shape.
pub fn mamba_block<'t, T: Real>(
    tokens: Var<'t, T>,
    params: &MambaBlockParams,
    p: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = tokens.shape();
    ensure!(
        shape.len() == 2 && shape[0] >= 1 && shape[1] == params.dim,
        "mamba_block expects [T >= 1, {}], got {shape:?}",
        params.dim
    );
    let h = layer_norm(
        tokens,
        p.get(params.norm.0),
        p.get(params.norm.1),
        LAYER_NORM_EPS,
    );
    let x = linear(h, p.get(params.in_proj.0), Some(p.get(params.in_proj.1)));
    let x = (x.depthwise_conv_causal(p.get(params.conv_weight)) + p.get(params.conv_bias)).silu();
    let (b, c, delta) = input_params(x, &params.ssm, p)?;
    let (a_bar, b_bar) = discretize(params.ssm.a(p), b, delta)?;
    let y = x.tape().selective_scan(x, a_bar, b_bar, c);
    let gate = linear(h, p.get(params.gate_proj.0), Some(p.get(params.gate_proj.1))).silu();
    let out = linear(y * gate, p.get(params.out_proj.0), Some(p.get(params.out_proj.1)));
    Ok(tokens + out)
}

/// Applies a stack of blocks in order.
pub fn mamba_stack<'t, T: Real>(
    tokens: Var<'t, T>,
    blocks: &[MambaBlockParams],
    p: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    blocks
        .iter()
        .try_fold(tokens, |x, block| mamba_block(x, block, p))
}

/// Stability check used by tests: `|exp(Δ·A)| < 1` for every positive Δ.
pub fn a_bar_is_contractive<T: Real>(a_log: &[T], delta: T) -> bool {
    a_log
        .iter()
        .all(|&al| (-(al.exp()) * delta).exp().abs() < T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DiffArray, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParamStore<f64>, MambaBlockParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let block = MambaBlockParams::new(&mut store, "b", dim, BlockConfig::default(), &mut rng);
        (store, block)
    }

    #[test]
    fn zero_tokens_give_bias_only_parameters() {
        let (mut store, block) = setup(4);
        store.get_mut(block.ssm.delta_tilde).data_mut().fill(0.0);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tokens = tape.zeros(&[3, 4]);
        let (b, c, delta) = input_params(tokens, &block.ssm, &p).unwrap();
        assert!(b.value().iter().all(|&v| v == 0.0));
        assert!(c.value().iter().all(|&v| v == 0.0));
        let ln2 = std::f64::consts::LN_2;
        assert!(delta.value().iter().all(|&v| (v - ln2).abs() < 1e-15));
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, block) = setup(6);
        for t in [1, 7, 64] {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let x = tape.constant(&[t, 6], (0..t * 6).map(|i| (i as f64 * 0.37).sin()).collect());
            let y = mamba_block(x, &block, &p).unwrap();
            assert_eq!(y.shape(), vec![t, 6]);
        }
    }

    #[test]
    fn pass_through_block_is_identity() {
        let (mut store, block) = setup(4);
        block.make_pass_through(&mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let data: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let x = tape.constant(&[5, 4], data.clone());
        assert_eq!(mamba_block(x, &block, &p).unwrap().value(), data);
    }

    #[test]
    fn wrong_width_is_a_contract_violation() {
        let (store, block) = setup(4);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.zeros(&[3, 5]);
        assert!(mamba_block(x, &block, &p).is_err());
    }

    #[test]
    fn initial_a_is_contractive() {
        let (store, block) = setup(4);
        let a_log: &DiffArray<f64> = store.get(block.ssm.a_log);
        for delta in [1e-3, 0.1, 1.0, 10.0] {
            assert!(a_bar_is_contractive(a_log.data(), delta));
        }
    }
}
