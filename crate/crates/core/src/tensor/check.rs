//! Finite-difference gradient verification used as the test oracle for every
//! differentiable operation and for whole models.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::{Error, Result};

/// Compares backward-pass gradients of a scalar-valued function against
/// central finite differences on `coords` sampled coordinates of `x`.
///
/// `build` must construct the function inside the supplied graph starting
/// from the given input node and return the scalar root; it is re-invoked for
/// every probe evaluation and therefore must be deterministic (fix dropout
/// seeds and any internally created weights).
///
/// Returns the maximum relative error, with the denominator floored at 1 so
/// near-zero gradient pairs compare absolutely instead of amplifying f32
/// rounding noise.
pub fn finite_diff_check<F>(build: &F, x: &Tensor, eps: f32, coords: usize, seed: u64) -> Result<f32>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.param(x.clone());
    let root = build(&mut g, xid)?;
    if g.tensor(root).numel() != 1 {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("function must be scalar-valued, got shape {:?}", g.shape(root)),
        ));
    }
    g.backward(root)?;
    let analytic = g
        .grad(xid)
        .ok_or_else(|| Error::Graph("input received no gradient; function does not depend on it".into()))?
        .to_vec();

    let eval = |probe: &Tensor| -> Result<f32> {
        let mut g = Graph::new();
        let xid = g.constant(probe.clone());
        let root = build(&mut g, xid)?;
        Ok(g.tensor(root).item())
    };

    let n = x.numel();
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n <= coords {
        (0..n).collect()
    } else {
        (0..coords).map(|_| rng.random_range(0..n)).collect()
    };

    let mut max_rel = 0.0f32;
    for i in picks {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    /// Shifts values away from 0 so ReLU/maxpool kinks sit farther than eps
    /// from every probe point.
    fn randn_off_kink(shape: &[usize], seed: u64) -> Tensor {
        let mut t = randn(shape, seed);
        for v in &mut t.data {
            *v += 0.2 * v.signum();
        }
        t
    }

    /// Small-magnitude readout coefficients. Keeping the reduction scalar
    /// near zero keeps f32 rounding in the probe evaluations well below the
    /// finite-difference step; op inputs stay N(0,1).
    fn probe(shape: &[usize], seed: u64) -> Tensor {
        let mut t = randn(shape, seed);
        for v in &mut t.data {
            *v *= 0.1;
        }
        t
    }

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = randn(&[4, 4], 1);
        let err = finite_diff_check(&|g, x| Ok(g.sum(x)), &x, 1e-3, 10, 1).unwrap();
        assert!(err < 1e-3, "sum FD error {err}");
    }

    #[test]
    fn mse_gradient_is_near_exact() {
        let x = randn(&[4, 3], 2);
        let t = randn(&[4, 3], 3);
        let err = finite_diff_check(
            &|g, x| {
                let tgt = g.constant(t.clone());
                g.mse(x, tgt)
            },
            &x,
            1e-3,
            10,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "mse FD error {err}");
    }

    #[test]
    fn conv2d_gradients_pass_fd_for_all_three_inputs() {
        let x = randn(&[2, 6, 6], 4);
        let w = randn(&[3, 2, 3, 3], 5);
        let b = randn(&[3], 6);
        // Vary the input.
        let err = finite_diff_check(
            &|g, xid| {
                let wid = g.param(w.clone());
                let bid = g.param(b.clone());
                let y = g.conv2d(xid, wid, bid)?;
                let c = g.constant(probe(&[3, 6, 6], 7));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
            10,
            4,
        )
        .unwrap();
        assert!(err < 1e-3, "conv2d dX FD error {err}");
        // Vary the weight.
        let err = finite_diff_check(
            &|g, wid| {
                let xid = g.constant(x.clone());
                let bid = g.constant(b.clone());
                let y = g.conv2d(xid, wid, bid)?;
                let c = g.constant(probe(&[3, 6, 6], 7));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &w,
            1e-3,
            10,
            5,
        )
        .unwrap();
        assert!(err < 1e-3, "conv2d dW FD error {err}");
        // Vary the bias.
        let err = finite_diff_check(
            &|g, bid| {
                let xid = g.constant(x.clone());
                let wid = g.constant(w.clone());
                let y = g.conv2d(xid, wid, bid)?;
                let c = g.constant(probe(&[3, 6, 6], 7));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &b,
            1e-3,
            10,
            6,
        )
        .unwrap();
        assert!(err < 1e-3, "conv2d dB FD error {err}");
    }

    #[test]
    fn maxpool_and_relu_gradients_pass_fd_off_the_kink() {
        let x = randn_off_kink(&[2, 4, 4], 8);
        let err = finite_diff_check(
            &|g, xid| {
                let p = g.maxpool2(xid)?;
                let r = g.relu(p);
                let c = g.constant(randn(&[2, 2, 2], 9));
                let m = g.mul(r, c)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
            10,
            7,
        )
        .unwrap();
        assert!(err < 1e-3, "maxpool+relu FD error {err}");
    }

    #[test]
    fn linear_gradients_pass_fd() {
        let x = randn(&[5, 8], 10);
        let w = randn(&[4, 8], 11);
        let b = randn(&[4], 12);
        for (tag, which) in [("x", 0usize), ("w", 1), ("b", 2)] {
            let varied = [&x, &w, &b][which].clone();
            let err = finite_diff_check(
                &|g, vid| {
                    let mut ids = [NodeId(0); 3];
                    for (i, t) in [&x, &w, &b].iter().enumerate() {
                        ids[i] = if i == which { vid } else { g.constant((*t).clone()) };
                    }
                    let y = g.linear(ids[0], ids[1], ids[2])?;
                    let c = g.constant(probe(&[5, 4], 13));
                    let m = g.mul(y, c)?;
                    Ok(g.sum(m))
                },
                &varied,
                1e-3,
                10,
                20 + which as u64,
            )
            .unwrap();
            assert!(err < 1e-3, "linear d{tag} FD error {err}");
        }
    }

    #[test]
    fn softmax_gradient_passes_fd() {
        let x = randn(&[3, 7], 14);
        let err = finite_diff_check(
            &|g, xid| {
                let s = g.softmax_rows(xid)?;
                let c = g.constant(randn(&[3, 7], 15));
                let m = g.mul(s, c)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
            10,
            8,
        )
        .unwrap();
        assert!(err < 1e-3, "softmax FD error {err}");
    }

    #[test]
    fn attention_gradients_pass_fd_for_all_four_inputs() {
        let (n, d) = (4usize, 8usize);
        let x = randn(&[n, d], 16);
        let wq = randn(&[d, d], 17);
        let wk = randn(&[d, d], 18);
        let wv = randn(&[d, d], 19);
        let readout = probe(&[n, d], 20);
        for (tag, which) in [("x", 0usize), ("Wq", 1), ("Wk", 2), ("Wv", 3)] {
            let varied = [&x, &wq, &wk, &wv][which].clone();
            let err = finite_diff_check(
                &|g, vid| {
                    let mut ids = [NodeId(0); 4];
                    for (i, t) in [&x, &wq, &wk, &wv].iter().enumerate() {
                        ids[i] = if i == which { vid } else { g.constant((*t).clone()) };
                    }
                    let y = g.self_attention(ids[0], ids[1], ids[2], ids[3])?;
                    let c = g.constant(readout.clone());
                    let m = g.mul(y, c)?;
                    Ok(g.sum(m))
                },
                &varied,
                1e-3,
                10,
                30 + which as u64,
            )
            .unwrap();
            assert!(err < 1e-3, "attention d{tag} FD error {err}");
        }
    }

    #[test]
    fn dropout_concat_transpose_gradients_pass_fd() {
        let a = randn(&[2, 5, 5], 21);
        let b = randn(&[3, 5, 5], 22);
        let err = finite_diff_check(
            &|g, aid| {
                let bid = g.constant(b.clone());
                let cat = g.concat_channels(aid, bid)?;
                let dp = g.dropout(cat, 0.3, Mode::Train, 99)?;
                let c = g.constant(randn(&[5, 5, 5], 23));
                let m = g.mul(dp, c)?;
                Ok(g.sum(m))
            },
            &a,
            1e-3,
            10,
            9,
        )
        .unwrap();
        assert!(err < 1e-3, "concat+dropout FD error {err}");

        let x = randn(&[3, 6], 24);
        let err = finite_diff_check(
            &|g, xid| {
                let t = g.transpose2(xid)?;
                let r = g.reshape(t, &[2, 9])?;
                let s = g.scale(r, 1.7);
                let c = g.constant(randn(&[2, 9], 25));
                let m = g.mul(s, c)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
            10,
            10,
        )
        .unwrap();
        assert!(err < 1e-3, "transpose+reshape+scale FD error {err}");
    }

    #[test]
    fn matmul_variants_pass_fd() {
        let a = randn(&[4, 6], 26);
        let b = randn(&[6, 5], 27);
        let bt = randn(&[5, 6], 28);
        let err = finite_diff_check(
            &|g, aid| {
                let bid = g.constant(b.clone());
                let y = g.matmul(aid, bid)?;
                let c = g.constant(probe(&[4, 5], 29));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &a,
            1e-3,
            10,
            11,
        )
        .unwrap();
        assert!(err < 1e-3, "matmul dA FD error {err}");
        let err = finite_diff_check(
            &|g, bid| {
                let aid = g.constant(a.clone());
                let y = g.matmul(aid, bid)?;
                let c = g.constant(probe(&[4, 5], 29));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &b,
            1e-3,
            10,
            12,
        )
        .unwrap();
        assert!(err < 1e-3, "matmul dB FD error {err}");
        let err = finite_diff_check(
            &|g, bid| {
                let aid = g.constant(a.clone());
                let y = g.matmul_nt(aid, bid)?;
                let c = g.constant(probe(&[4, 5], 29));
                let m = g.mul(y, c)?;
                Ok(g.sum(m))
            },
            &bt,
            1e-3,
            10,
            13,
        )
        .unwrap();
        assert!(err < 1e-3, "matmul_nt dB FD error {err}");
    }

    #[test]
    fn add_mul_gradients_pass_fd() {
        let x = randn(&[3, 3], 31);
        let other = randn(&[3, 3], 32);
        let err = finite_diff_check(
            &|g, xid| {
                let o = g.constant(other.clone());
                let a = g.add(xid, o)?;
                let m = g.mul(a, xid)?;
                Ok(g.sum(m))
            },
            &x,
            1e-3,
            10,
            14,
        )
        .unwrap();
        assert!(err < 1e-3, "add+mul FD error {err}");
    }
}
