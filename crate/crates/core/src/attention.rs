//! Scaled dot-product attention, multi-head attention and the additive masks.

use rand_chacha::ChaCha8Rng;

use crate::layers::uniform_matrix;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// `Q·Kᵀ/√d_h` over the last two axes, before masking.
pub fn attention_logits(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() < 2 || sk.len() < 2 || sq.last() != sk.last() {
        return Err(TensorError::ShapeMismatch {
            op: "att",
            lhs: sq,
            rhs: sk,
        });
    }
    let d_h = *sq.last().unwrap();
    let rank = sk.len();
    let kt = g.swap_axes(k, rank - 2, rank - 1)?;
    let scores = g.matmul(q, kt)?;
    Ok(g.scale(scores, 1.0 / (d_h as f64).sqrt()))
}

/// `softmax(Q·Kᵀ/√d_h + M)·V`; `mask` broadcasts to the score shape.
pub fn att(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
    let logits = attention_logits(g, q, k)?;
    let weights = g.masked_softmax(logits, mask)?;
    g.matmul(weights, v)
}

/// Exchanges the first two axes, moving between per-step and per-subspace views.
pub fn subspace_switch(g: &mut Graph, x: Var) -> Result<Var> {
    g.swap_axes(x, 0, 1)
}

/// Multi-head attention with per-head projections packed column-wise into
/// `d × d` matrices (head `i` owns columns `i·d_h .. (i+1)·d_h`).
#[derive(Debug, Clone, Copy)]
pub struct Msa {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl Msa {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "model dim {d} not divisible by {heads} heads"
        );
        let mut mat = |suffix: &str| store.insert(format!("{name}.{suffix}"), uniform_matrix(rng, d, d));
        Self {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            d,
            heads,
        }
    }

    pub fn num_params(d: usize) -> usize {
        4 * d * d
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, [s[0], s[1], self.heads, self.d / self.heads])?;
        g.swap_axes(x, 1, 2)
    }

    /// `q`: `B × L_q × d`, `k`/`v`: `B × L_k × d`, `mask`: `B' × L_q × L_k` with
    /// `B'` either `B` or 1. Returns `B × L_q × d`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        for x in [q, k, v] {
            let s = g.shape(x);
            if s.len() != 3 || s[2] != self.d {
                return Err(TensorError::ShapeMismatch {
                    op: "msa",
                    lhs: s.to_vec(),
                    rhs: vec![self.d],
                });
            }
        }
        let (batch, lq) = (g.shape(q)[0], g.shape(q)[1]);
        let head_mask = match mask {
            Some(m) if m.rank() == 3 => {
                let s = m.shape();
                Some(m.reshape([s[0], 1, s[1], s[2]])?)
            }
            Some(m) => {
                return Err(TensorError::ShapeMismatch {
                    op: "msa mask",
                    lhs: m.shape().to_vec(),
                    rhs: vec![batch, lq, g.shape(k)[1]],
                })
            }
            None => None,
        };
        let qp = g.matmul(q, p.var(self.wq))?;
        let kp = g.matmul(k, p.var(self.wk))?;
        let vp = g.matmul(v, p.var(self.wv))?;
        let qh = self.split_heads(g, qp)?;
        let kh = self.split_heads(g, kp)?;
        let vh = self.split_heads(g, vp)?;
        let heads = att(g, qh, kh, vh, head_mask.as_ref())?;
        let merged = g.swap_axes(heads, 1, 2)?;
        let merged = g.reshape(merged, [batch, lq, self.d])?;
        g.matmul(merged, p.var(self.wo))
    }
}

fn row_is_nonempty(features: &[f64]) -> bool {
    features.iter().sum::<f64>() > 0.0
}

/// Per-key mask over `x: T × N × b`: column `i` at time `t` is `-inf` when the
/// features of position `i` at `t` sum to zero. Returns `T × N × N`.
pub fn threshold_mask(x: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 3, "threshold_mask expects T × N × b");
    let (t, n, b) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros([t, n, n]);
    let data = out.data_mut();
    for ti in 0..t {
        for key in 0..n {
            let off = (ti * n + key) * b;
            if !row_is_nonempty(&x.data()[off..off + b]) {
                for query in 0..n {
                    data[(ti * n + query) * n + key] = f64::NEG_INFINITY;
                }
            }
        }
    }
    out
}

/// Look-ahead mask over a decoder input `x: 1 × f × b`, repeated `copies` times.
/// Query `i` may attend to key `j` only if `j ≤ i` and position `j` is non-empty.
pub fn lookahead_threshold_mask(x: &Tensor, copies: usize) -> Tensor {
    let s = x.shape();
    assert!(s.len() == 3 && s[0] == 1, "lookahead mask expects 1 × f × b");
    let (f, b) = (s[1], s[2]);
    let open: Vec<bool> = (0..f).map(|j| row_is_nonempty(&x.data()[j * b..(j + 1) * b])).collect();
    let one = Tensor::from_fn([f, f], |idx| {
        let (i, j) = (idx / f, idx % f);
        if j <= i && open[j] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    });
    one.reshape([1, f, f])
        .and_then(|m| m.broadcast_to(&[copies, f, f]))
        .expect("lookahead shape")
}

/// Every mask one sample needs, built from raw features before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// `h × N × N` over the whole map.
    pub global: Tensor,
    /// `h × N_D × N_D` over the local block.
    pub local: Tensor,
    /// `1 × f × f` look-ahead mask for the decoder; broadcasts over subspaces.
    pub decoder: Tensor,
}

impl MaskSet {
    pub fn build(x: &Tensor, x_local: &Tensor, x_decoder: &Tensor) -> Self {
        Self {
            global: threshold_mask(x),
            local: threshold_mask(x_local),
            decoder: lookahead_threshold_mask(x_decoder, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    const NEG: f64 = f64::NEG_INFINITY;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn run_att(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = att(&mut g, q, k, v, mask).unwrap();
        g.value(out).clone()
    }

    /// Batched attention written as explicit loops.
    fn reference_att(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let (h, lq, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (lk, dv) = (k.shape()[1], v.shape()[2]);
        let mut out = Tensor::zeros([h, lq, dv]);
        for b in 0..h {
            for i in 0..lq {
                let logits: Vec<f64> = (0..lk)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| q.at(&[b, i, c]) * k.at(&[b, j, c])).sum();
                        dot / (dh as f64).sqrt() + mask.map_or(0.0, |m| m.at(&[b, i, j]))
                    })
                    .collect();
                let max = logits.iter().cloned().fold(NEG, f64::max);
                let e: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in 0..dv {
                    let val: f64 = (0..lk).map(|j| e[j] / total * v.at(&[b, j, c])).sum();
                    out.set(&[b, i, c], val);
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = random(&mut rng, &[2, 3, 4]);
        let k = random(&mut rng, &[2, 1, 4]);
        let v = random(&mut rng, &[2, 1, 5]);
        let out = run_att(&q, &k, &v, Some(&Tensor::zeros([2, 3, 1])));
        for b in 0..2 {
            for i in 0..3 {
                for c in 0..5 {
                    assert_eq!(out.at(&[b, i, c]), v.at(&[b, 0, c]));
                }
            }
        }
    }

    #[test]
    fn masked_second_key_selects_first_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, &[1, 1, 4]);
        let k = random(&mut rng, &[1, 2, 4]);
        let v = random(&mut rng, &[1, 2, 3]);
        let mask = Tensor::new([1, 1, 2], vec![0.0, NEG]).unwrap();
        let out = run_att(&q, &k, &v, Some(&mask));
        assert_eq!(out.data(), &v.data()[..3]);
    }

    #[test]
    fn matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, &[2, 3, 4]);
        let k = random(&mut rng, &[2, 3, 4]);
        let v = random(&mut rng, &[2, 3, 4]);
        let out = run_att(&q, &k, &v, None);
        assert!(out.max_abs_diff(&reference_att(&q, &k, &v, None)) < 1e-12);

        let mask = Tensor::new(
            [2, 3, 3],
            vec![
                0.0, NEG, 0.0, 0.0, NEG, 0.0, 0.0, NEG, NEG, 0.0, 0.0, 0.0, NEG, 0.0, 0.0, 0.0, 0.0, NEG,
            ],
        )
        .unwrap();
        let out = run_att(&q, &k, &v, Some(&mask));
        assert!(out.max_abs_diff(&reference_att(&q, &k, &v, Some(&mask))) < 1e-12);
    }

    #[test]
    fn head_dimension_mismatch_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros([1, 2, 4]));
        let k = g.constant(Tensor::zeros([1, 2, 3]));
        assert!(matches!(
            att(&mut g, q, k, k, None),
            Err(TensorError::ShapeMismatch { op: "att", .. })
        ));
    }

    #[test]
    fn causal_output_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = 5;
        let q = random(&mut rng, &[1, f, 4]);
        let k = random(&mut rng, &[1, f, 4]);
        let v = random(&mut rng, &[1, f, 4]);
        let mask = lookahead_threshold_mask(&Tensor::full([1, f, 1], 1.0), 1);
        let base = run_att(&q, &k, &v, Some(&mask));
        for pos in 0..f {
            let (mut k2, mut v2) = (k.clone(), v.clone());
            for c in 0..4 {
                k2.set(&[0, pos, c], 9.0);
                v2.set(&[0, pos, c], -7.0);
            }
            let out = run_att(&q, &k2, &v2, Some(&mask));
            for i in 0..pos {
                for c in 0..4 {
                    assert_eq!(out.at(&[0, i, c]).to_bits(), base.at(&[0, i, c]).to_bits());
                }
            }
        }
    }

    #[test]
    fn logit_variance_is_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, dh) = (101, 256);
        let x = Tensor::from_fn([1, n, dh], |_| rng.sample(StandardNormal));
        let mut g = Graph::new();
        let q = g.constant(x);
        let logits = attention_logits(&mut g, q, q).unwrap();
        let l = g.value(logits);
        let off: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| l.at(&[0, i, j]))
            .collect();
        assert!(off.len() >= 10_000);
        let mean = off.iter().sum::<f64>() / off.len() as f64;
        let var = off.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / off.len() as f64;
        assert!((var - 1.0).abs() < 0.2, "logit variance {var}");
    }

    fn msa_fixture(seed: u64, d: usize, heads: usize) -> (ParamStore, Msa) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let msa = Msa::new(&mut store, "msa", d, heads, &mut rng);
        (store, msa)
    }

    #[test]
    fn identity_single_head_equals_att() {
        let (mut store, msa) = msa_fixture(5, 6, 1);
        for id in [msa.wq, msa.wk, msa.wv, msa.wo] {
            *store.get_mut(id) = Tensor::eye(6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (
            random(&mut rng, &[3, 2, 6]),
            random(&mut rng, &[3, 4, 6]),
            random(&mut rng, &[3, 4, 6]),
        );
        let mask = threshold_mask(&Tensor::from_fn([3, 4, 1], |i| (i % 3) as f64));
        let mask = Tensor::new([3, 2, 4], mask.data()[..24].to_vec()).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = msa.forward(&mut g, &p, qv, kv, vv, Some(&mask)).unwrap();
        assert_eq!(g.shape(out), &[3, 2, 6]);
        assert!(g.value(out).bit_eq(&run_att(&q, &k, &v, Some(&mask))));
    }

    #[test]
    fn two_heads_match_sliced_reference() {
        let (store, msa) = msa_fixture(7, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (
            random(&mut rng, &[2, 3, 8]),
            random(&mut rng, &[2, 5, 8]),
            random(&mut rng, &[2, 5, 8]),
        );
        let mut g = Graph::new();
        let p = g.bind(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = msa.forward(&mut g, &p, qv, kv, vv, None).unwrap();

        let matmul = |x: &Tensor, w: &Tensor, cols: std::ops::Range<usize>| -> Tensor {
            let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let width = cols.len();
            Tensor::from_fn([b, l, width], |idx| {
                let (bl, c) = (idx / width, idx % width);
                (0..d).map(|i| x.data()[bl * d + i] * w.at(&[i, cols.start + c])).sum()
            })
        };
        let w = |id| store.get(id);
        let mut concat = Tensor::zeros([2, 3, 8]);
        for head in 0..2 {
            let cols = head * 4..head * 4 + 4;
            let qh = matmul(&q, w(msa.wq), cols.clone());
            let kh = matmul(&k, w(msa.wk), cols.clone());
            let vh = matmul(&v, w(msa.wv), cols.clone());
            let oh = reference_att(&qh, &kh, &vh, None);
            for b in 0..2 {
                for i in 0..3 {
                    for c in 0..4 {
                        concat.set(&[b, i, head * 4 + c], oh.at(&[b, i, c]));
                    }
                }
            }
        }
        let expect = matmul(&concat, w(msa.wo), 0..8);
        assert!(g.value(out).max_abs_diff(&expect) < 1e-12);
        assert_eq!(store.numel(), Msa::num_params(8));
    }

    #[test]
    fn threshold_mask_cases() {
        let x = Tensor::full([2, 4, 3], 0.5);
        assert!(threshold_mask(&x).data().iter().all(|&v| v == 0.0));

        let mut x = Tensor::full([2, 4, 2], 1.0);
        x.set(&[1, 3, 0], 0.0);
        x.set(&[1, 3, 1], 0.0);
        let m = threshold_mask(&x);
        for t in 0..2 {
            for q in 0..4 {
                for k in 0..4 {
                    let expect = if t == 1 && k == 3 { NEG } else { 0.0 };
                    assert_eq!(m.at(&[t, q, k]), expect);
                }
            }
        }
    }

    #[test]
    fn lookahead_cases() {
        let m = lookahead_threshold_mask(&Tensor::full([1, 3, 2], 1.0), 2);
        assert_eq!(m.shape(), &[2, 3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at(&[1, i, j]), if j <= i { 0.0 } else { NEG });
            }
        }
        let mut x = Tensor::full([1, 3, 2], 1.0);
        x.set(&[0, 1, 0], 0.0);
        x.set(&[0, 1, 1], 0.0);
        let m = lookahead_threshold_mask(&x, 1);
        for i in 0..3 {
            assert_eq!(m.at(&[0, i, 1]), NEG);
            assert_eq!(m.at(&[0, i, 0]), 0.0);
        }
        let m = lookahead_threshold_mask(&Tensor::full([1, 1, 2], 1.0), 1);
        assert_eq!(m.data(), &[0.0]);
    }

    #[test]
    fn switch_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([4, 3, 8], |i| i as f64));
        let s = subspace_switch(&mut g, x).unwrap();
        assert_eq!(g.shape(s), &[3, 4, 8]);
        assert_eq!(g.value(s).at(&[2, 1, 5]), g.value(x).at(&[1, 2, 5]));
        let back = subspace_switch(&mut g, s).unwrap();
        assert!(g.value(back).bit_eq(g.value(x)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masked_value_rows_never_leak(
            seed in any::<u64>(),
            lk in 2usize..6,
            masked in proptest::collection::vec(any::<bool>(), 6),
            junk in -1e6f64..1e6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, &[2, 3, 4]);
            let k = random(&mut rng, &[2, lk, 4]);
            let v = random(&mut rng, &[2, lk, 4]);
            let x = Tensor::from_fn([2, lk, 1], |i| if masked[i % lk] { 0.0 } else { 1.0 });
            let full = threshold_mask(&x);
            let mask = Tensor::new([2, lk, lk], full.into_data()).unwrap();
            let mask = Tensor::from_fn([2, 3, lk], |i| mask.data()[(i / (3 * lk)) * lk * lk + i % lk]);
            let base = run_att(&q, &k, &v, Some(&mask));
            let mut v2 = v.clone();
            let mut k2 = k.clone();
            for b in 0..2 {
                for (j, _) in masked.iter().enumerate().take(lk).filter(|(_, m)| **m) {
                    for c in 0..4 {
                        v2.set(&[b, j, c], junk);
                        k2.set(&[b, j, c], -junk);
                    }
                }
            }
            prop_assert!(run_att(&q, &k2, &v2, Some(&mask)).bit_eq(&base));
        }

        #[test]
        fn switch_is_involution(a in 1usize..5, b in 1usize..5, d in 1usize..4) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn([a, b, d], |i| i as f64 * 0.5));
            let s = subspace_switch(&mut g, x).unwrap();
            let s2 = subspace_switch(&mut g, s).unwrap();
            prop_assert!(g.value(s2).bit_eq(g.value(x)));
        }
    }
}
