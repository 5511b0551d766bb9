//! Finite-difference verification of every differentiable operation.
//!
//! Each check scalarises its output with fixed random weights so that every
//! output coordinate contributes to the compared gradient.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::gradcheck::{DEFAULT_STEP, DEFAULT_THRESHOLD};
use crate::numerics::ops::{layer_norm, softmax_last, variance_axis};
use crate::numerics::{grad_check_many, BoundParams, DiffArray, ParamStore, Primitive, Tape, Var};
use crate::rdloss::{diversify_term, rd_loss, tracking_loss, variance_term, DiversifyPooling, RdLossConfig, TrackingTarget};
use crate::registers::{deinterleave, extract, interleave, retrieve, InsertMode, RegisterTemplate};
use crate::ssm::{discretize, input_params, mamba_block, BlockConfig, MambaBlockParams};
use crate::tracker::{cross_attention_head, Model, TrackerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Primitive,
    Composite,
}

/// Result of one operation's check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub kind: CheckKind,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub passed: bool,
    /// Set when the check could not run (non-finite value, contract error).
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckAllReport {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub checks: Vec<OpCheck>,
    pub passed: bool,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> DiffArray<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DiffArray::from_f64(shape, &v).expect("shape matches data")
}

/// Values bounded away from zero, with random sign.
fn signed_away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> DiffArray<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    DiffArray::from_f64(shape, &v).expect("shape matches data")
}

/// Σ out ⊙ w with fixed weights `w`.
fn scalarize<'t>(out: Var<'t, f64>, weights: &[f64]) -> Var<'t, f64> {
    let tape = out.tape();
    let shape = out.shape();
    assert_eq!(weights.len(), out.len(), "scalarisation weights");
    (out * tape.constant(&shape, weights.to_vec())).sum()
}

fn weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Binds `store` with every parameter replaced by the matching var.
fn bind_vars<'t>(store: &ParamStore<f64>, tape: &'t Tape<f64>, vars: &[Var<'t, f64>]) -> BoundParams<'t, f64> {
    let mut p = store.bind_frozen(tape);
    for (id, v) in store.ids().zip(vars) {
        p.set(id, *v);
    }
    p
}

fn param_inputs(store: &ParamStore<f64>) -> Vec<DiffArray<f64>> {
    store.entries().iter().map(|e| e.array.clone()).collect()
}

fn run(
    op: &str,
    kind: CheckKind,
    inputs: &[DiffArray<f64>],
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
) -> OpCheck {
    match grad_check_many(f, inputs, DEFAULT_STEP) {
        Ok(r) => OpCheck {
            op: op.to_string(),
            kind,
            max_relative_error: r.max_relative_error,
            coordinates: r.coordinates,
            passed: r.max_relative_error < DEFAULT_THRESHOLD,
            error: None,
        },
        Err(e) => OpCheck {
            op: op.to_string(),
            kind,
            max_relative_error: f64::INFINITY,
            coordinates: 0,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

/// Checks one tape primitive at small random shapes.
pub fn check_primitive(prim: Primitive, seed: u64) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(prim as u64 + 1);
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let name = format!("{prim}");
    let k = CheckKind::Primitive;
    let w = weights(&mut rng, r * c);
    let unary = |x: DiffArray<f64>, f: fn(Var<'_, f64>) -> Var<'_, f64>| {
        let w = w.clone();
        run(&name, k, &[x], move |_, v| scalarize(f(v[0]), &w))
    };
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let a = uniform(&mut rng, &[r, c], -1.0, 1.0);
            // The right operand broadcasts over rows.
            let b = uniform(&mut rng, &[c], -1.0, 1.0);
            let w = w.clone();
            run(&name, k, &[a, b], move |_, v| {
                let out = match prim {
                    Primitive::Add => v[0] + v[1],
                    Primitive::Sub => v[0] - v[1],
                    _ => v[0] * v[1],
                };
                scalarize(out, &w)
            })
        }
        Primitive::Scale => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            unary(x, |v| v.scale(-1.7))
        }
        Primitive::Shift => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            unary(x, |v| v.shift(0.3).square())
        }
        Primitive::MatMul => {
            let inner = rng.random_range(2..5);
            let a = uniform(&mut rng, &[r, inner], -1.0, 1.0);
            let b = uniform(&mut rng, &[inner, c], -1.0, 1.0);
            let w = w.clone();
            run(&name, k, &[a, b], move |_, v| scalarize(v[0].matmul(v[1]), &w))
        }
        Primitive::Exp => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            unary(x, |v| v.exp())
        }
        Primitive::Ln => {
            let x = uniform(&mut rng, &[r, c], 0.3, 2.0);
            unary(x, |v| v.ln())
        }
        Primitive::Sqrt => {
            let x = uniform(&mut rng, &[r, c], 0.3, 2.0);
            unary(x, |v| v.sqrt())
        }
        Primitive::Recip => {
            let x = signed_away_from_zero(&mut rng, &[r, c]);
            unary(x, |v| v.recip())
        }
        Primitive::Abs => {
            let x = signed_away_from_zero(&mut rng, &[r, c]);
            unary(x, |v| v.abs())
        }
        Primitive::Softplus => {
            let x = uniform(&mut rng, &[r, c], -3.0, 3.0);
            unary(x, |v| v.softplus())
        }
        Primitive::Sigmoid => {
            let x = uniform(&mut rng, &[r, c], -3.0, 3.0);
            unary(x, |v| v.sigmoid())
        }
        Primitive::Silu => {
            let x = uniform(&mut rng, &[r, c], -3.0, 3.0);
            unary(x, |v| v.silu())
        }
        Primitive::Exprel => {
            // Straddles both the direct and the series branch.
            let mut x = uniform(&mut rng, &[r, c], -2.0, 2.0);
            x.data_mut()[0] = 1e-9;
            unary(x, |v| v.exprel())
        }
        Primitive::SumLast => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            let w = weights(&mut rng, r);
            run(&name, k, &[x], move |_, v| scalarize(v[0].sum_last(), &w))
        }
        Primitive::SumAll => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            run(&name, k, &[x], move |_, v| v[0].square().sum())
        }
        Primitive::Gather => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            let n = r * c + 3;
            // Repeats and zero-fill entries exercise scatter-add and skips.
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..r * c)).collect();
            idx[1] = crate::numerics::GATHER_ZERO;
            let idx: Rc<[usize]> = idx.into();
            let w = weights(&mut rng, n);
            run(&name, k, &[x], move |_, v| scalarize(v[0].gather(idx.clone(), &[n]), &w))
        }
        Primitive::Concat => {
            let a = uniform(&mut rng, &[r, c], -1.0, 1.0);
            let b = uniform(&mut rng, &[2, c], -1.0, 1.0);
            let w = weights(&mut rng, (r + 2) * c);
            run(&name, k, &[a, b], move |t, v| scalarize(t.concat(&[v[0], v[1]]), &w))
        }
        Primitive::Reshape => {
            let x = uniform(&mut rng, &[r, c], -1.0, 1.0);
            let w = w.clone();
            run(&name, k, &[x], move |_, v| scalarize(v[0].reshape(&[c, r]).square(), &w))
        }
        Primitive::DepthwiseConv => {
            let t = rng.random_range(3..7);
            let ks = rng.random_range(2..4);
            let x = uniform(&mut rng, &[t, c], -1.0, 1.0);
            let kw = uniform(&mut rng, &[c, ks], -1.0, 1.0);
            let w = weights(&mut rng, t * c);
            run(&name, k, &[x, kw], move |_, v| scalarize(v[0].depthwise_conv_causal(v[1]), &w))
        }
        Primitive::SelectiveScan => {
            let (t, n) = (rng.random_range(3..7), rng.random_range(2..4));
            let u = uniform(&mut rng, &[t, c], -1.0, 1.0);
            let a = uniform(&mut rng, &[t, c, n], 0.2, 0.95);
            let b = uniform(&mut rng, &[t, c, n], -1.0, 1.0);
            let cc = uniform(&mut rng, &[t, n], -1.0, 1.0);
            let w = weights(&mut rng, t * c);
            run(&name, k, &[u, a, b, cc], move |tape, v| {
                scalarize(tape.selective_scan(v[0], v[1], v[2], v[3]), &w)
            })
        }
    }
}

fn small_block_store(rng: &mut ChaCha8Rng, dim: usize, depth: usize) -> (ParamStore<f64>, Vec<MambaBlockParams>) {
    let mut store = ParamStore::new();
    let cfg = BlockConfig {
        state: 3,
        expand: 1,
        conv_kernel: 3,
    };
    let blocks = (0..depth)
        .map(|i| MambaBlockParams::new(&mut store, &format!("b{i}"), dim, cfg, rng))
        .collect();
    // Move away from the initialisation: non-zero biases, and step sizes of
    // order one so the A and Δ gradients are not buried under roundoff.
    for e in store.entries_mut() {
        let range = if e.name.ends_with(".b") || e.name.ends_with(".bias") {
            Some(-0.3..0.3)
        } else if e.name.ends_with(".a_log") {
            Some(-1.0..0.5)
        } else if e.name.ends_with(".delta_tilde") {
            Some(0.0..1.0)
        } else {
            None
        };
        if let Some(range) = range {
            for v in e.array.data_mut() {
                *v = rng.random_range(range.clone());
            }
        }
    }
    (store, blocks)
}

/// Checks the composite operations with all their inputs and parameters.
pub fn check_composites(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    let k = CheckKind::Composite;
    let mut out = Vec::new();

    // layer_norm
    {
        let (r, d) = (rng.random_range(2..5), rng.random_range(3..6));
        let x = uniform(&mut rng, &[r, d], -1.0, 1.0);
        let g = uniform(&mut rng, &[d], 0.5, 1.5);
        let b = uniform(&mut rng, &[d], -0.5, 0.5);
        let w = weights(&mut rng, r * d);
        out.push(run("layer_norm", k, &[x, g, b], move |_, v| {
            scalarize(layer_norm(v[0], v[1], v[2], 1e-5), &w)
        }));
    }
    // softmax_last
    {
        let (r, d) = (rng.random_range(2..5), rng.random_range(2..6));
        let x = uniform(&mut rng, &[r, d], -2.0, 2.0);
        let w = weights(&mut rng, r * d);
        out.push(run("softmax_last", k, &[x], move |_, v| scalarize(softmax_last(v[0]), &w)));
    }
    // variance_axis
    {
        let (a, b, c) = (rng.random_range(2..4), rng.random_range(2..5), rng.random_range(2..4));
        let x = uniform(&mut rng, &[a, b, c], -1.0, 1.0);
        let w = weights(&mut rng, a * c);
        out.push(run("variance_axis", k, &[x], move |_, v| scalarize(variance_axis(v[0], 1), &w)));
    }
    // discretize
    {
        let (t, ch, n) = (rng.random_range(2..4), rng.random_range(2..4), rng.random_range(2..4));
        let a = uniform(&mut rng, &[ch, n], -2.0, -0.1);
        let b = uniform(&mut rng, &[t, n], -1.0, 1.0);
        let d = uniform(&mut rng, &[t, ch], 0.1, 1.0);
        let (w1, w2) = (weights(&mut rng, t * ch * n), weights(&mut rng, t * ch * n));
        out.push(run("discretize", k, &[a, b, d], move |_, v| {
            let (ab, bb) = discretize(v[0], v[1], v[2]).expect("valid discretize inputs");
            scalarize(ab, &w1) + scalarize(bb, &w2)
        }));
    }
    // selective_scan_seq end to end from continuous parameters
    {
        let (t, ch, n) = (rng.random_range(3..7), rng.random_range(2..4), rng.random_range(2..4));
        let u = uniform(&mut rng, &[t, ch], -1.0, 1.0);
        let a_log = uniform(&mut rng, &[ch, n], -1.0, 0.5);
        let b = uniform(&mut rng, &[t, n], -1.0, 1.0);
        let c = uniform(&mut rng, &[t, n], -1.0, 1.0);
        let d = uniform(&mut rng, &[t, ch], 0.1, 1.0);
        let w = weights(&mut rng, t * ch);
        out.push(run("selective_scan_seq", k, &[u, a_log, b, c, d], move |tape, v| {
            let (ab, bb) = discretize(-v[1].exp(), v[2], v[4]).expect("valid discretize inputs");
            scalarize(tape.selective_scan(v[0], ab, bb, v[3]), &w)
        }));
    }
    // input_params
    {
        let dim = rng.random_range(3..5);
        let t = rng.random_range(2..5);
        let (store, blocks) = small_block_store(&mut rng, dim, 1);
        let ssm = blocks[0].ssm.clone();
        let x = uniform(&mut rng, &[t, dim], -1.0, 1.0);
        let mut inputs = vec![x];
        inputs.extend(param_inputs(&store));
        let (w1, w2, w3) = (weights(&mut rng, t * 3), weights(&mut rng, t * 3), weights(&mut rng, t * dim));
        out.push(run("input_params", k, &inputs, move |tape, v| {
            let p = bind_vars(&store, tape, &v[1..]);
            let (b, c, d) = input_params(v[0], &ssm, &p).expect("valid tokens");
            scalarize(b, &w1) + scalarize(c, &w2) + scalarize(d, &w3)
        }));
    }
    // mamba_block
    {
        // Two-wide layer norms are degenerate (output ±gain), so dim ≥ 3.
        let dim = rng.random_range(3..5);
        let t = rng.random_range(3..6);
        let (store, blocks) = small_block_store(&mut rng, dim, 1);
        let x = uniform(&mut rng, &[t, dim], -1.0, 1.0);
        let mut inputs = vec![x];
        inputs.extend(param_inputs(&store));
        let w = weights(&mut rng, t * dim);
        out.push(run("mamba_block", k, &inputs, move |tape, v| {
            let p = bind_vars(&store, tape, &v[1..]);
            scalarize(mamba_block(v[0], &blocks[0], &p).expect("valid block input"), &w)
        }));
    }
    // interleave / deinterleave round trip with a non-identity interior
    {
        let (t, kk, d) = (rng.random_range(4..8), rng.random_range(2..4), rng.random_range(2..4));
        let x = uniform(&mut rng, &[t, d], -1.0, 1.0);
        let r = uniform(&mut rng, &[kk, d], -1.0, 1.0);
        let (w1, w2) = (weights(&mut rng, t * d), weights(&mut rng, kk * d));
        out.push(run("interleave", k, &[x, r], move |_, v| {
            let (fused, layout) = interleave(v[0], v[1], InsertMode::Behind).expect("valid interleave");
            let (xi, ri) = deinterleave(fused.square(), &layout).expect("valid layout");
            scalarize(xi, &w1) + scalarize(ri, &w2)
        }));
    }
    // extract
    {
        let d = rng.random_range(3..5);
        let kk = 2;
        let t = rng.random_range(4..7);
        let (mut store, blocks) = small_block_store(&mut rng, d, 1);
        let reg = RegisterTemplate::new(&mut store, "register", kk, d, &mut rng);
        let x = uniform(&mut rng, &[t, d], -1.0, 1.0);
        let mut inputs = vec![x];
        inputs.extend(param_inputs(&store));
        let (w1, w2) = (weights(&mut rng, t * d), weights(&mut rng, kk * d));
        out.push(run("extract", k, &inputs, move |tape, v| {
            let p = bind_vars(&store, tape, &v[1..]);
            let (xh, r) = extract(v[0], &reg, &blocks, &p).expect("valid extract");
            scalarize(xh, &w1) + scalarize(r, &w2)
        }));
    }
    // retrieve with two bank entries
    {
        let d = rng.random_range(3..5);
        let (kk, tz) = (2, 4);
        let (store, blocks) = small_block_store(&mut rng, d, 1);
        let z = uniform(&mut rng, &[tz, d], -1.0, 1.0);
        let e1 = uniform(&mut rng, &[kk, d], -1.0, 1.0);
        let e2 = uniform(&mut rng, &[kk, d], -1.0, 1.0);
        let mut inputs = vec![z, e1, e2];
        inputs.extend(param_inputs(&store));
        let w = weights(&mut rng, tz * d);
        out.push(run("retrieve", k, &inputs, move |tape, v| {
            let p = bind_vars(&store, tape, &v[3..]);
            scalarize(retrieve(v[0], &[v[1], v[2]], &blocks, &p).expect("valid retrieve"), &w)
        }));
    }
    // RD loss terms
    let rd_cfg = RdLossConfig {
        alpha: 0.7,
        beta: 1.3,
        ..Default::default()
    };
    {
        let regs = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let cfg = rd_cfg.clone();
        out.push(run("variance_term", k, &[regs], move |_, v| {
            variance_term(v[0], &cfg).expect("valid registers")
        }));
    }
    for (name, pooling) in [("diversify_term", DiversifyPooling::Mean), ("diversify_term_flatten", DiversifyPooling::Flatten)] {
        let bank = uniform(&mut rng, &[4, 2, 3], -1.0, 1.0);
        out.push(run(name, k, &[bank], move |_, v| diversify_term(v[0], pooling).expect("valid bank")));
    }
    {
        let regs = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let bank = uniform(&mut rng, &[3, 3, 4], -1.0, 1.0);
        let cfg = rd_cfg.clone();
        out.push(run("rd_loss", k, &[regs, bank], move |_, v| rd_loss(v[0], v[1], &cfg).expect("valid rd inputs")));
    }
    // cross_attention_head and tracking_loss
    {
        let cfg = TrackerConfig {
            search_size: 32,
            template_size: 16,
            patch: 8,
            channels: 2,
            k: 2,
            attn_dim: 3,
            head_channels: 3,
            mamba_depth: 1,
            ..Default::default()
        };
        let model = Model::<f64>::new(cfg.clone(), &mut rng).expect("valid tiny config");
        let h = &model.head;
        let mut ids = vec![h.q, h.k, h.v, h.o, h.conv.0, h.conv.1, h.out.0, h.out.1];
        if let Some((g, b)) = h.norm {
            ids.extend([g, b]);
        }
        let wd = cfg.width();
        let (gs, gz) = (cfg.search_grid(), cfg.template_grid());
        let zh = uniform(&mut rng, &[gz * gz, wd], -1.0, 1.0);
        let xh = uniform(&mut rng, &[gs * gs, wd], -1.0, 1.0);
        let mut store = model.store.clone();
        // Randomise zero-initialised biases.
        for &id in &ids {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let mut inputs = vec![zh, xh];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let (w1, w2) = (weights(&mut rng, gs * gs), weights(&mut rng, gs * gs * 2));
        let head = h.clone();
        let (s1, ids1) = (store.clone(), ids.clone());
        out.push(run("cross_attention_head", k, &inputs, move |tape, v| {
            let mut p = s1.bind_frozen(tape);
            for (id, var) in ids1.iter().zip(&v[2..]) {
                p.set(*id, *var);
            }
            let (s, o) = cross_attention_head(v[0], v[1], &head, &p).expect("valid head inputs");
            scalarize(s, &w1) + scalarize(o, &w2)
        }));
        let target = TrackingTarget {
            tip: [rng.random_range(1.0..31.0), rng.random_range(1.0..31.0)],
            sigma: 6.0,
            cell: 8.0,
        };
        let score = uniform(&mut rng, &[gs, gs], -1.0, 1.0);
        let offset = uniform(&mut rng, &[gs, gs, 2], -1.0, 1.0);
        out.push(run("tracking_loss", k, &[score, offset], move |_, v| {
            tracking_loss(v[0], v[1], &target).expect("valid target")
        }));
    }
    out
}

/// Runs every primitive and composite check.
pub fn gradcheck_all(seed: u64) -> Result<GradcheckAllReport> {
    let mut checks: Vec<OpCheck> = Primitive::ALL.iter().map(|&p| check_primitive(p, seed)).collect();
    checks.extend(check_composites(seed));
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckAllReport {
        seed,
        step: DEFAULT_STEP,
        threshold: DEFAULT_THRESHOLD,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::inject_backward_fault;

    #[test]
    fn default_seed_passes() {
        let report = gradcheck_all(0).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} failed: {:e} {:?}", c.op, c.max_relative_error, c.error);
        }
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        for prim in [Primitive::Mul, Primitive::Softplus, Primitive::SelectiveScan] {
            assert!(check_primitive(prim, 3).passed, "{prim} fails without a fault");
            inject_backward_fault(Some(prim));
            let c = check_primitive(prim, 3);
            inject_backward_fault(None);
            assert!(!c.passed, "fault in {prim} went unnoticed");
        }
    }
}
