//! LoRA experts: one low-rank `(W_A, W_B)` pair per base linear module.
//!
//! The forward rule is `x·W + gate·(x·W_A)·W_B + b`, with no `α/r`
//! scaling. `W_A` starts Gaussian with variance `1/r` and `W_B` at zero, so
//! a fresh expert leaves its host module unchanged.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::ModuleId;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Group, ParamId, ParamStore, Tensor, Var};
use crate::router::RoutingDecision;

/// A single expert attached to one base module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraExpert {
    pub module: ModuleId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraExpert {
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    /// Multiply-accumulates through the low-rank path for `rows` inputs.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.param_count()) as u64
    }
}

/// The seven experts of one Transformer layer, indexed like [`ModuleId`].
#[derive(Debug, Clone)]
pub struct LayerExpertSet {
    pub experts: [LoraExpert; ModuleId::COUNT],
}

impl LayerExpertSet {
    pub fn get(&self, module: ModuleId) -> &LoraExpert {
        &self.experts[module.index()]
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(LoraExpert::param_count).sum()
    }
}

/// Strength with which an active expert is applied.
#[derive(Debug, Clone, Copy)]
pub enum Gate {
    Const(f64),
    /// Differentiable `[1×1]` gate from the router.
    Var(Var),
}

impl Gate {
    pub fn value(&self, g: &Graph) -> f64 {
        match self {
            Gate::Const(v) => *v,
            Gate::Var(v) => g.value(*v).data()[0],
        }
    }
}

pub fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be positive"));
    }
    if 2 * rank > d_in.min(d_out) {
        return Err(Error::config(format!(
            "LoRA rank {rank} too large for a {d_in}x{d_out} module (max {})",
            d_in.min(d_out) / 2
        )));
    }
    Ok(())
}

pub fn init_expert<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    module: ModuleId,
    (d_in, d_out): (usize, usize),
    rank: usize,
    rng: &mut R,
) -> Result<LoraExpert> {
    check_rank(rank, d_in, d_out)?;
    let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("valid std");
    let a_data = (0..d_in * rank).map(|_| normal.sample(rng)).collect();
    let a = store.add(
        format!("{prefix}.lora_{}.a", module.name()),
        Tensor::new(vec![d_in, rank], a_data)?,
        Group::Omega,
        true,
    );
    let b = store.add(
        format!("{prefix}.lora_{}.b", module.name()),
        Tensor::zeros(rank, d_out),
        Group::Omega,
        true,
    );
    Ok(LoraExpert {
        module,
        a,
        b,
        rank,
        d_in,
        d_out,
    })
}

/// Adapted linear module. Returns the output and the multiply-accumulates
/// spent in the low-rank path.
pub fn lora_forward(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    adapter: Option<(&LoraExpert, Gate)>,
) -> Result<(Var, u64)> {
    let base = g.matmul(x, weight)?;
    let base = g.add_row(base, bias)?;
    let Some((expert, gate)) = adapter else {
        return Ok((base, 0));
    };
    if let Gate::Const(c) = gate {
        if c == 0.0 {
            return Ok((base, 0));
        }
    }
    let (a, b) = (g.param(expert.a), g.param(expert.b));
    let down = g.matmul(x, a)?;
    let up = g.matmul(down, b)?;
    let scaled = match gate {
        Gate::Const(c) if c == 1.0 => up,
        Gate::Const(c) => g.scale(up, c)?,
        Gate::Var(s) => g.scale_by(up, s)?,
    };
    let out = g.add(base, scaled)?;
    Ok((out, expert.macs(g.value(x).rows())))
}

/// Adapter parameters activated by `decision` plus every router parameter.
pub fn activated_param_count(
    decision: &RoutingDecision,
    experts: &[LayerExpertSet],
    router_params: usize,
) -> usize {
    let adapters: usize = decision
        .layers
        .iter()
        .zip(experts)
        .map(|(route, set)| {
            route
                .selected
                .iter()
                .map(|&i| set.experts[i].param_count())
                .sum::<usize>()
        })
        .sum();
    adapters + router_params
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_in: usize, d_out: usize, rank: usize) -> (ParamStore, ParamId, ParamId, LoraExpert) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let normal = Normal::new(0.0, 0.5).unwrap();
        let w = s.add(
            "w",
            Tensor::new(vec![d_in, d_out], (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect()).unwrap(),
            Group::Omega,
            false,
        );
        let b = s.add(
            "b",
            Tensor::new(vec![1, d_out], (0..d_out).map(|_| normal.sample(&mut rng)).collect()).unwrap(),
            Group::Omega,
            false,
        );
        let e = init_expert(&mut s, "t", ModuleId::Q, (d_in, d_out), rank, &mut rng).unwrap();
        (s, w, b, e)
    }

    fn randomize_b(s: &mut ParamStore, e: &LoraExpert, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = e.rank * e.d_out;
        s.set_value(e.b, Tensor::new(vec![e.rank, e.d_out], (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap())
            .unwrap();
    }

    fn run(s: &ParamStore, w: ParamId, b: ParamId, e: &LoraExpert, x: &Tensor, gate: Option<f64>) -> Tensor {
        let mut g = Graph::inference(s);
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.param(w), g.param(b));
        let (y, _) = lora_forward(&mut g, xv, wv, bv, gate.map(|c| (e, Gate::Const(c)))).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn hand_example() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::eye(2), Group::Omega, false);
        let b = s.add("b", Tensor::zeros(1, 2), Group::Omega, false);
        let a = s.add("a", Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(), Group::Omega, true);
        let bb = s.add("bb", Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap(), Group::Omega, true);
        let e = LoraExpert { module: ModuleId::Q, a, b: bb, rank: 1, d_in: 2, d_out: 2 };
        let y = run(&s, w, b, &e, &Tensor::row(vec![1.0, 3.0]), Some(1.0));
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn fresh_expert_is_identity() {
        let (s, w, b, e) = setup(8, 6, 2);
        let x = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(run(&s, w, b, &e, &x, Some(1.0)), run(&s, w, b, &e, &x, None));
    }

    #[test]
    fn matches_dense_merge_and_is_linear_in_gate() {
        let (mut s, w, b, e) = setup(8, 6, 3);
        randomize_b(&mut s, &e, 9);
        let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let base = run(&s, w, b, &e, &x, None);
        let full = run(&s, w, b, &e, &x, Some(1.0));
        for gate in [0.0, 0.25, 0.6, 1.0] {
            // dense-merge oracle: x (W + gate·A B) + b
            let ab = s.value(e.a).matmul(s.value(e.b)).unwrap();
            let mut merged = s.value(w).clone();
            for (m, d) in merged.data_mut().iter_mut().zip(ab.data()) {
                *m += gate * d;
            }
            let mut oracle = x.matmul(&merged).unwrap();
            let c = oracle.cols();
            for (i, v) in oracle.data_mut().iter_mut().enumerate() {
                *v += s.value(b).data()[i % c];
            }
            let y = run(&s, w, b, &e, &x, Some(gate));
            assert!(y.max_abs_diff(&oracle) < 1e-12);

            let lin: Vec<f64> = y.data().iter().zip(base.data()).map(|(a, b)| a - b).collect();
            let ref_: Vec<f64> = full.data().iter().zip(base.data()).map(|(a, b)| gate * (a - b)).collect();
            assert!(lin.iter().zip(&ref_).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_gate_short_circuits() {
        let (mut s, w, b, e) = setup(8, 6, 2);
        randomize_b(&mut s, &e, 1);
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::full(2, 8, 0.3));
        let (wv, bv) = (g.param(w), g.param(b));
        let (_, macs) = lora_forward(&mut g, x, wv, bv, Some((&e, Gate::Const(0.0)))).unwrap();
        assert_eq!(macs, 0);
        let (_, macs) = lora_forward(&mut g, x, wv, bv, Some((&e, Gate::Const(1.0)))).unwrap();
        assert_eq!(macs, 2 * 2 * (8 + 6));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let (s, w, b, e) = setup(8, 6, 2);
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::zeros(2, 5));
        let (wv, bv) = (g.param(w), g.param(b));
        assert!(matches!(
            lora_forward(&mut g, x, wv, bv, Some((&e, Gate::Const(1.0)))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn param_counts() {
        let (_, _, _, e) = setup(8, 6, 2);
        assert_eq!(e.param_count(), 2 * (8 + 6));
        let big = LoraExpert { module: ModuleId::Q, a: e.a, b: e.b, rank: 32, d_in: 4096, d_out: 4096 };
        assert_eq!(big.param_count(), 262_144);
    }

    #[test]
    fn rank_validation() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            init_expert(&mut s, "x", ModuleId::K, (8, 8), 0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(init_expert(&mut s, "x", ModuleId::K, (8, 8), 5, &mut rng).is_err());
        assert!(init_expert(&mut s, "x", ModuleId::K, (8, 8), 4, &mut rng).is_ok());
    }
}
