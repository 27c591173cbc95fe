//! Minimal dense-tensor arithmetic, reverse-mode autodiff and AdamW.

mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{gelu, DenominatorForm, Graph, RopeSpec, Var};
pub(crate) use graph::rational_parts;
pub use optim::{AdamW, AdamWConfig};
pub use param::{Gradients, Group, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of every trainable parameter against the
    /// analytic gradient of `build`. Returns the worst relative error.
    fn fd_check(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) -> f64 {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::inference(s);
            let loss = build(&mut g);
            g.value(loss).item().unwrap()
        };
        let h = 1e-5;
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            let n = store.value(id).numel();
            let mut num = vec![0.0; n];
            for (i, slot) in num.iter_mut().enumerate() {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let fp = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let fm = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                *slot = (fp - fm) / (2.0 * h);
            }
            let an = analytic.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; n]);
            let diff: f64 = an.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            let rel = if scale < 1e-10 { diff } else { diff / scale };
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn softmax_examples() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::row(vec![0.0, 2f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data().to_vec();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);

        let u = g.constant(Tensor::row(vec![0.3; 5]));
        let yu = g.softmax(u, 1).unwrap();
        assert!(g.value(yu).data().iter().all(|p| (p - 0.2).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, 3, 6);
        let shifted = Tensor::new(vec![3, 6], t.data().iter().map(|v| v + 17.25).collect()).unwrap();
        let (a, b) = (g.constant(t), g.constant(shifted));
        let (sa, sb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        for i in 0..3 {
            let s: f64 = g.value(sa).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let c = g.softmax(a, 0).unwrap();
        let tc = g.value(c).transpose();
        for i in 0..6 {
            assert!((tc.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut s = ParamStore::new();
        let x = Tensor::row(vec![1.0, -2.0, 0.5]);
        let id = s.add("x", x.clone(), Group::Omega, true);
        let mut g = Graph::new(&s);
        let v = g.param(id);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_and_frozen_params_get_no_grad() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::row(vec![1.0, 2.0]), Group::Omega, true);
        let frozen = s.add("f", Tensor::row(vec![3.0, 4.0]), Group::Omega, false);
        let mut g = Graph::new(&s);
        let c = g.constant(Tensor::row(vec![5.0, 6.0]));
        let (wv, fv) = (g.param(w), g.param(frozen));
        let a = g.mul(wv, c).unwrap();
        let b = g.mul(a, fv).unwrap();
        let l = g.sum(b).unwrap();
        assert!(!g.needs_grad(c));
        let grads = g.backward(l).unwrap();
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[15.0, 24.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::row(vec![1.0, 2.0]), Group::Omega, true);
        let mut g = Graph::new(&s);
        let v = g.param(id);
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::row(vec![3.0]), Group::Omega, true);
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&s);
                let v = g.param(id);
                let l = g.sum(v).unwrap();
                g.backward(l).unwrap()
            };
            s.accumulate(grads);
        }
        assert_eq!(s.get(id).grad().data(), &[2.0]);
        s.zero_grad();
        assert_eq!(s.get(id).grad().data(), &[0.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let z = g.constant(Tensor::row(vec![0.0]));
        assert!(matches!(g.recip(z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::full(3, 3, 1.0));
        let y = g.causal_softmax(x, 0).unwrap();
        let v = g.value(y);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn max_rows_hand_example() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 2.0]]).unwrap());
        let m = g.max_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_norm_and_position_zero() {
        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_tensor(&mut rng, 3, 8);
        let x = g.constant(t.clone());
        let y = g.rope(x, RopeSpec { pos0: 0, n_heads: 2, base: 10000.0 }).unwrap();
        assert_eq!(g.value(y).row_slice(0), t.row_slice(0));
        for i in 0..3 {
            let n0: f64 = t.row_slice(i).iter().map(|v| v * v).sum();
            let n1: f64 = g.value(y).row_slice(i).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    // Every differentiable op, each checked at 10 random points.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..10 {
            let mut s = ParamStore::new();
            let a = s.add("a", rand_tensor(&mut rng, 3, 4), Group::Omega, true);
            let b = s.add("b", rand_tensor(&mut rng, 4, 4), Group::Omega, true);
            let w = s.add("w", rand_tensor(&mut rng, 1, 4), Group::Omega, true);
            let ca = s.add("ca", rand_tensor(&mut rng, 1, 4), Group::Theta, true);
            let cb = s.add("cb", rand_tensor(&mut rng, 1, 3), Group::Theta, true);
            let form = if trial % 2 == 0 { DenominatorForm::AbsOfSum } else { DenominatorForm::SumOfAbs };
            let err = fd_check(&mut s, |g| {
                let (av, bv, wv) = (g.param(a), g.param(b), g.param(w));
                let ab = g.matmul(av, bv).unwrap();
                let n = g.rms_norm(ab, wv, 1e-6).unwrap();
                let r = g.rope(n, RopeSpec { pos0: trial, n_heads: 2, base: 100.0 }).unwrap();
                let sc = g.matmul_nt(r, av).unwrap();
                let sm = g.causal_softmax(sc, 0).unwrap();
                let mix = g.matmul(sm, av).unwrap();
                let s1 = g.silu(mix).unwrap();
                let s2 = g.gelu(ab).unwrap();
                let prod = g.mul(s1, s2).unwrap();
                let (cav, cbv) = (g.param(ca), g.param(cb));
                let rat = g.rational(prod, cav, cbv, form).unwrap();
                let row = g.add_row(rat, wv).unwrap();
                let t = g.transpose(row).unwrap();
                let sm0 = g.softmax(t, 0).unwrap();
                let mr = g.mean_rows(sm0).unwrap();
                let mx = g.max_rows(row).unwrap();
                let lst = g.select_rows(row, &[2, 0]).unwrap();
                let sl = g.slice_cols(lst, 1, 2).unwrap();
                let mx2 = g.select_rows(mx, &[0, 0]).unwrap();
                let cc = g.concat_cols(&[sl, mx2]).unwrap();
                let cr = g.concat_rows(&[cc, cc]).unwrap();
                let pick = g.select_cols(mr, &[0, 2]).unwrap();
                let denom = g.sum(pick).unwrap();
                let inv = g.recip(denom).unwrap();
                let scaled = g.scale_by(cr, inv).unwrap();
                let ce = g.cross_entropy(scaled, &[Some(1), None, Some(3), Some(0)]).unwrap();
                let tail = g.relu(row).unwrap();
                let tail = g.mean(tail).unwrap();
                let tail = g.scale(tail, 0.5).unwrap();
                g.add(ce, tail).unwrap()
            });
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }
}
