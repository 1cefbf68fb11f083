//! Minimal f64 neural-network building blocks with hand-written backward
//! passes.
//!
//! Layers own their parameters and accumulate gradients into them; callers
//! keep whatever activations the backward pass needs. Everything runs in
//! double precision so finite-difference checks remain meaningful.

mod adamw;
mod conv;
mod linear;
mod ops;
mod param;

pub use adamw::AdamW;
pub use conv::Conv2d;
pub use linear::{Activation, Linear, Mlp, MlpCache};
pub use ops::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_bias_backward, silu, silu_backward,
    upsample2, upsample2_backward,
};
pub use param::{Param, Parameterized};

/// Row-major `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserted lengths cover every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
