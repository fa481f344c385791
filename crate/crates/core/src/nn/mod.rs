//! Minimal reverse-mode autodiff for the attention model.

mod attention;
pub mod check;
mod norm;
mod params;
mod real;
mod tape;
mod tensor;

pub use norm::NORM_EPS;
pub use params::{clip_grad_norm, Adam, ParamSet};
pub use real::{gemm, Real};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::check::check_gradients;
    use super::*;

    const TOL: f64 = 1e-6;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        rnd(&[n], seed ^ 0xabc).data().to_vec()
    }

    /// Reduces any value to a scalar with fixed random weights.
    fn reduce(t: &mut Tape<f64>, v: Var) -> Var {
        let n = t.value(v).len();
        t.weighted_sum(v, weights(n, n as u64))
    }

    fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let err = check_gradients(inputs, &|t, v| {
            let y = f(t, v);
            reduce(t, y)
        }, 1e-6);
        assert!(err < TOL, "relative gradient error {err}");
    }

    #[test]
    fn matmul_and_bias() {
        check(&[rnd(&[2, 3, 4], 1), rnd(&[4, 5], 2), rnd(&[5], 3)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            t.add_bias(y, v[2])
        });
    }

    #[test]
    fn elementwise_ops() {
        let a = rnd(&[3, 4], 4);
        let b = rnd(&[3, 4], 5);
        check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check(&[a.clone(), b.clone()], |t, v| t.minimum(v[0], v[1]));
        check(std::slice::from_ref(&a), |t, v| t.scale(v[0], 1.7));
        check(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.3));
        check(std::slice::from_ref(&a), |t, v| t.relu(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.tanh(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.exp(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.square(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.clamp(v[0], -0.5, 0.4));
    }

    #[test]
    fn reductions() {
        let a = rnd(&[2, 3, 4], 6);
        check(std::slice::from_ref(&a), |t, v| t.sum(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.mean(v[0]));
        check(std::slice::from_ref(&a), |t, v| t.mean_nodes(v[0]));
        check(&[rnd(&[6], 7)], |t, v| t.segment_sum(v[0], vec![0, 2, 0, 1, 2, 2], 3));
    }

    #[test]
    fn mean_nodes_value() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]));
        let m = t.mean_nodes(x);
        assert_eq!(t.data(m), &[2.0, 4.0]);
    }

    #[test]
    fn indexing_and_layout() {
        let x = rnd(&[3, 4, 2], 8);
        check(std::slice::from_ref(&x), |t, v| t.gather_rows(v[0], Arc::new(vec![2, 0, 2, 1])));
        check(std::slice::from_ref(&x), |t, v| t.gather_nodes(v[0], Arc::new(vec![0, 2, 2]), Arc::new(vec![3, 1, 1])));
        check(&[rnd(&[4, 3], 9), rnd(&[3], 10)], |t, v| {
            t.replace_rows(v[0], v[1], Arc::new(vec![true, false, true, false]))
        });
        check(&[rnd(&[2, 3], 11), rnd(&[2, 1], 12), rnd(&[2, 2], 13)], |t, v| t.concat_last(&[v[0], v[1], v[2]]));
        check(std::slice::from_ref(&x), |t, v| t.slice_last(v[0], 1, 1));
        check(&[rnd(&[2, 1, 3], 14), rnd(&[2, 4, 3], 15)], |t, v| t.concat_nodes(v[0], v[1]));
        check(std::slice::from_ref(&x), |t, v| t.reshape(v[0], vec![12, 2]));
    }

    #[test]
    fn mha_gradients_shared_rows_and_mask() {
        // five queries over two key rows, two heads, one fully masked query
        let mut mask = vec![false; 5 * 3];
        mask[1] = true;
        mask[3 * 3..4 * 3].fill(true);
        let mask = Arc::new(mask);
        check(&[rnd(&[5, 1, 4], 16), rnd(&[2, 3, 4], 17), rnd(&[2, 3, 4], 18)], |t, v| {
            t.mha(v[0], v[1], v[2], Arc::new(vec![0, 1, 1, 0, 1]), Some(mask.clone()), 2)
        });
        // encoder-style self attention
        check(&[rnd(&[2, 3, 4], 19), rnd(&[2, 3, 4], 20), rnd(&[2, 3, 4], 21)], |t, v| {
            t.mha(v[0], v[1], v[2], Arc::new(vec![0, 1]), None, 4)
        });
    }

    #[test]
    fn mha_matches_loop_oracle() {
        let (q, k, v) = (rnd(&[1, 1, 4], 30), rnd(&[1, 3, 4], 31), rnd(&[1, 3, 4], 32));
        let mut t = Tape::<f64>::no_grad();
        let (qv, kv, vv) = (t.input(q.clone()), t.input(k.clone()), t.input(v.clone()));
        let out = t.mha(qv, kv, vv, Arc::new(vec![0]), None, 2);
        let (q, k, v) = (q.data(), k.data(), v.data());
        for h in 0..2 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| q[h * 2 + c] * k[j * 4 + h * 2 + c]).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| s[j].exp() / z * v[j * 4 + h * 2 + c]).sum();
                assert!((t.data(out)[h * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_attention_is_zero() {
        let mut t = Tape::<f64>::no_grad();
        let q = t.input(rnd(&[1, 1, 2], 1));
        let k = t.input(rnd(&[1, 2, 2], 2));
        let out = t.mha(q, k, k, Arc::new(vec![0]), Some(Arc::new(vec![true, true])), 1);
        assert_eq!(t.data(out), &[0.0, 0.0]);
    }

    #[test]
    fn clipped_score_and_log_softmax() {
        let mask = Arc::new(vec![false, true, false, false, false, false, true, false, false]);
        let pick = Arc::new(vec![0, 2, 1]);
        check(&[rnd(&[3, 4], 22), rnd(&[2, 3, 4], 23)], |t, v| {
            let s = t.clipped_score(v[0], v[1], Arc::new(vec![1, 0, 1]), Some(mask.clone()), 10.0);
            let lp = t.log_softmax(s);
            let e = t.exp(lp);
            let a = reduce(t, e);
            let p = t.pick(lp, pick.clone());
            let b = t.sum(p);
            let h = t.entropy(lp);
            let c = t.sum(h);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn clipped_score_values() {
        let mut t = Tape::<f64>::no_grad();
        let q = t.input(Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]));
        let k = t.input(Tensor::new(vec![1, 2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let s = t.clipped_score(q, k, Arc::new(vec![0]), None, 10.0);
        assert!((t.data(s)[0] - 10.0 * 1f64.tanh()).abs() < 1e-12);
        assert_eq!(t.data(s)[1], 0.0);
    }

    #[test]
    fn log_softmax_masks_exactly() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.input(Tensor::new(vec![1, 3], vec![0.2, f64::NEG_INFINITY, 1.5]));
        let y = t.log_softmax(x);
        let p: Vec<f64> = t.data(y).iter().map(|v| v.exp()).collect();
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalizations() {
        let x = rnd(&[2, 4, 3], 24);
        let (g, b) = (rnd(&[3], 25), rnd(&[3], 26));
        check(&[x.clone(), g.clone(), b.clone()], |t, v| t.instance_norm(v[0], v[1], v[2]));
        check(&[x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm(v[0], v[1], v[2], None).0);
        let (rm, rv) = (vec![0.1, -0.2, 0.0], vec![1.5, 0.5, 2.0]);
        check(&[x, g, b], |t, v| t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv))).0);
    }

    #[test]
    fn batch_norm_reports_statistics() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]));
        let g = t.input(Tensor::new(vec![1], vec![1.0]));
        let b = t.input(Tensor::new(vec![1], vec![0.0]));
        let (_, stats) = t.batch_norm(x, g, b, None);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn parameters_are_deduplicated() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::new(vec![1], vec![2.0]));
        let mut t = Tape::new();
        let a = t.param(&ps, 0);
        let b = t.param(&ps, 0);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let l = t.sum(y);
        let g = t.backward(l).for_params(&t, &ps);
        assert_eq!(g[0].as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn no_grad_tape_records_no_ops() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.input(rnd(&[2], 1));
        let y = t.square(x);
        let l = t.sum(y);
        assert!(t.backward(l).wrt(x).is_none());
    }
}
