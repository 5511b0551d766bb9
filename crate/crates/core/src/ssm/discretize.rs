//! Zero-order-hold discretisation of a diagonal continuous system.

use crate::error::{ensure, Result};
use crate::numerics::ops::{broadcast_to, expand_last};
use crate::numerics::{Real, Var};

/// Below this magnitude of `Δ·A` the `(e^x - 1)/x` factor uses its Taylor
/// limit, so `B_bar → Δ·B` continuously as `A → 0`.
pub const SMALL_A_THRESHOLD: f64 = 1e-8;

/// Discretises `A` [ch, N] with per-token inputs `B` [T, N] and step sizes
/// `delta` [T, ch].
///
/// Returns `(A_bar, B_bar)`, both [T, ch, N], with `A_bar = exp(Δ·A)` and
/// `B_bar = (exp(Δ·A) - 1)/A · B`, evaluated as `Δ·B·exprel(Δ·A)`.
pub fn discretize<'t, T: Real>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    delta: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (a_shape, b_shape, d_shape) = (a.shape(), b.shape(), delta.shape());
    ensure!(a_shape.len() == 2, "A must be [channels, N], got {a_shape:?}");
    ensure!(b_shape.len() == 2, "B must be [T, N], got {b_shape:?}");
    ensure!(d_shape.len() == 2, "delta must be [T, channels], got {d_shape:?}");
    let (ch, n) = (a_shape[0], a_shape[1]);
    let t = d_shape[0];
    ensure!(
        d_shape[1] == ch && b_shape == [t, n],
        "inconsistent shapes: A {a_shape:?}, B {b_shape:?}, delta {d_shape:?}"
    );
    ensure!(
        delta.value().iter().all(|&d| d > T::zero()),
        "delta must be strictly positive"
    );

    let delta_full = expand_last(delta, n);
    let delta_a = delta_full * a;
    let a_bar = delta_a.exp();
    let b_full = broadcast_to(b.reshape(&[t, 1, n]), &[t, ch, n]);
    let b_bar = delta_full * delta_a.exprel() * b_full;
    Ok((a_bar, b_bar))
}
