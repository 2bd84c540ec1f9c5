//! Finite-difference checks for every differentiable op, the attention and
//! encoding modules built from them, and the complete model on a tiny config.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{att, lookahead_threshold_mask, threshold_mask, Msa};
use crate::encodings::{stack_external, ExternalVector, GridCoord, TemporalEncoder};
use crate::layers::LAYER_NORM_EPS;
use crate::model::{extract_local_block, Dsan, EncGLayer, ModelConfig, Sample};
use crate::tensor::check::{check_gradients, DEFAULT_STEP};
use crate::tensor::{Bound, Graph, Mode, OpKind, ParamStore, Result, Tensor, Var};
use crate::training::weighted_mse;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    /// Worst relative error over the suite's inputs.
    pub rel_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// The smallest configuration that exercises every stack: one layer,
/// `d = 8`, two heads, two historical steps, a 5×5 map, a 3×3 local block,
/// three future steps and two features.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        proj_layers: 2,
        local_radius: 1,
        dropout: 0.0,
        weeks: 0,
        days: 1,
        recent: 1,
        horizon: 3,
        rows: 5,
        cols: 5,
        features: 2,
        externals: 1,
        steps_per_day: 4,
        ..ModelConfig::default()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinks stay outside the difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn suite<F>(name: &str, inputs: &[Tensor], tolerance: f64, fault: Option<OpKind>, build: F) -> Result<SuiteReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let reports = check_gradients(inputs, build, DEFAULT_STEP, fault)?;
    Ok(SuiteReport {
        name: name.to_string(),
        rel_error: reports.iter().map(|r| r.rel_error).fold(0.0, f64::max),
        tolerance,
    })
}

fn op_suites(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Vec<SuiteReport>> {
    let t = OP_TOLERANCE;
    let mut out = Vec::new();
    let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0));
    out.push(suite("matmul", &[a, b], t, fault, |g, v| g.matmul(v[0], v[1]))?);
    let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[1, 4], -1.0, 1.0));
    out.push(suite("add", &[a, b], t, fault, |g, v| g.add(v[0], v[1]))?);
    let (a, b) = (uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0));
    out.push(suite("sub", &[a, b], t, fault, |g, v| g.sub(v[0], v[1]))?);
    let (a, b) = (uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 1, 4], -1.0, 1.0));
    out.push(suite("mul", &[a, b], t, fault, |g, v| g.mul(v[0], v[1]))?);
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    out.push(suite("scale", &[x], t, fault, |g, v| Ok(g.scale(v[0], -0.7)))?);
    let x = off_zero(rng, &[3, 4]);
    out.push(suite("relu", &[x], t, fault, |g, v| Ok(g.relu(v[0])))?);
    let x = uniform(rng, &[3, 4], -3.0, 3.0);
    out.push(suite("sigmoid", &[x], t, fault, |g, v| Ok(g.sigmoid(v[0])))?);

    let x = uniform(rng, &[2, 3, 4], -2.0, 2.0);
    let neg = f64::NEG_INFINITY;
    let mask = Tensor::new(
        [2, 3, 4],
        vec![
            0.0, neg, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, neg, neg, neg, neg, //
            0.0, 0.0, neg, neg, neg, 0.0, 0.0, 0.0, 0.0, neg, 0.0, neg,
        ],
    )?;
    out.push(suite("masked_softmax", &[x], t, fault, move |g, v| {
        g.masked_softmax(v[0], Some(&mask))
    })?);

    let (x, gain, bias) = (
        uniform(rng, &[3, 5], -2.0, 2.0),
        uniform(rng, &[5], 0.5, 1.5),
        uniform(rng, &[5], -0.5, 0.5),
    );
    out.push(suite("layer_norm", &[x, gain, bias], t, fault, |g, v| {
        g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
    })?);
    let x = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    out.push(suite("swap_axes", &[x], t, fault, |g, v| g.swap_axes(v[0], 0, 2))?);
    let x = uniform(rng, &[2, 6], -1.0, 1.0);
    out.push(suite("reshape", &[x], t, fault, |g, v| g.reshape(v[0], [3, 4]))?);
    let x = uniform(rng, &[1, 3], -1.0, 1.0);
    out.push(suite("broadcast_to", &[x], t, fault, |g, v| {
        g.broadcast_to(v[0], &[4, 3])
    })?);
    let (a, b) = (uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0));
    out.push(suite("concat", &[a, b], t, fault, |g, v| g.concat(&[v[0], v[1]], 1))?);
    let x = uniform(rng, &[4, 3], -1.0, 1.0);
    out.push(suite("slice", &[x], t, fault, |g, v| g.slice(v[0], 0, 1, 2))?);
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    let keep: Vec<f64> = (0..12)
        .map(|_| if rng.random::<f64>() < 0.7 { 1.0 / 0.7 } else { 0.0 })
        .collect();
    out.push(suite("dropout", &[x], t, fault, move |g, v| {
        Ok(g.dropout_with_mask(v[0], keep.clone()))
    })?);
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    out.push(suite("sum", &[x], t, fault, |g, v| Ok(g.sum(v[0])))?);
    Ok(out)
}

fn bound(vars: &[Var]) -> Bound {
    Bound(vars.to_vec())
}

fn store_tensors(store: &ParamStore) -> Vec<Tensor> {
    store.tensors().cloned().collect()
}

fn module_suites(rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<Vec<SuiteReport>> {
    let t = OP_TOLERANCE;
    let mut out = Vec::new();

    let x = uniform(rng, &[2, 4, 1], 0.0, 1.0);
    let mut mask = threshold_mask(&x);
    mask.data_mut()[..16].iter_mut().for_each(|m| *m = 0.0);
    let mask = Tensor::new([2, 4, 4], mask.into_data())?;
    let inputs = [
        uniform(rng, &[2, 3, 4], -1.0, 1.0),
        uniform(rng, &[2, 4, 4], -1.0, 1.0),
        uniform(rng, &[2, 4, 4], -1.0, 1.0),
    ];
    let m3 = Tensor::new(
        [2, 3, 4],
        mask.data()[..12].iter().chain(&mask.data()[16..28]).copied().collect(),
    )?;
    out.push(suite("attention", &inputs, t, fault, move |g, v| {
        att(g, v[0], v[1], v[2], Some(&m3))
    })?);

    let mut store = ParamStore::new();
    let msa = Msa::new(&mut store, "msa", 8, 2, rng);
    let n_params = store.len();
    let mut inputs = store_tensors(&store);
    inputs.push(uniform(rng, &[2, 3, 8], -1.0, 1.0));
    inputs.push(uniform(rng, &[2, 5, 8], -1.0, 1.0));
    let causal = lookahead_threshold_mask(&Tensor::full([1, 3, 1], 1.0), 1);
    let causal = Tensor::new([1, 3, 3], causal.into_data())?;
    out.push(suite("msa", &inputs, t, fault, |g, v| {
        let p = bound(&v[..n_params]);
        let (q, kv) = (v[n_params], v[n_params + 1]);
        let s = msa.forward(g, &p, q, q, q, Some(&causal))?;
        let c = msa.forward(g, &p, s, kv, kv, None)?;
        g.add(s, c)
    })?);

    let mut store = ParamStore::new();
    let tpe = TemporalEncoder::new(&mut store, "tpe", 7 + 4 + 1, 6, rng);
    let mut inputs = store_tensors(&store);
    let vecs: Vec<ExternalVector> = (0..3)
        .map(|i| ExternalVector::new(i, i % 4, 4, &[0.3 * i as f64]).expect("valid slots"))
        .collect();
    inputs.push(stack_external(&vecs).expect("uniform length"));
    let n = inputs.len() - 1;
    out.push(suite("temporal_encoding", &inputs, t, fault, |g, v| {
        let p = bound(&v[..n]);
        tpe.forward(g, &p, v[n])
    })?);

    let mut store = ParamStore::new();
    let layer = EncGLayer::new(&mut store, "enc_g", 8, 16, 2, rng);
    let mut inputs = store_tensors(&store);
    let n = inputs.len();
    inputs.push(uniform(rng, &[2, 4, 8], -1.0, 1.0));
    out.push(suite("enc_g_layer", &inputs, t, fault, move |g, v| {
        let p = bound(&v[..n]);
        layer.forward(g, &p, v[n], &mask, 0.0, &mut Mode::Eval)
    })?);
    Ok(out)
}

/// A random sample for `cfg` with one all-empty grid at every historical step.
pub fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sample {
    let (h, n, b) = (cfg.history(), cfg.grids(), cfg.features);
    let empty = rng.random_range(0..n);
    let x = Tensor::from_fn([h, n, b], |i| {
        if (i / b) % n == empty {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let target = GridCoord::new(rng.random_range(0..cfg.rows), rng.random_range(0..cfg.cols));
    let x_local = extract_local_block(&x, cfg.rows, cfg.cols, target, cfg.local_radius).expect("target in map");
    let mut calendar = |rows: usize, externals: bool| {
        let vecs: Vec<ExternalVector> = (0..rows)
            .map(|_| {
                let ext: Vec<f64> = (0..cfg.externals)
                    .map(|_| if externals { rng.random_range(0.0..1.0) } else { 0.0 })
                    .collect();
                ExternalVector::new(
                    rng.random_range(0..7),
                    rng.random_range(0..cfg.steps_per_day),
                    cfg.steps_per_day,
                    &ext,
                )
                .expect("valid slots")
            })
            .collect();
        stack_external(&vecs).expect("uniform length")
    };
    let history_calendar = Arc::new(calendar(h, true));
    let future_calendar = Arc::new(calendar(cfg.horizon, false));
    Sample {
        t1: 0,
        target,
        x: Arc::new(x),
        x_local,
        history_calendar,
        future_calendar,
        y: Tensor::from_fn([cfg.horizon, b], |_| rng.random_range(0.05..0.95)),
    }
}

fn model_suite(rng: &mut ChaCha8Rng, seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let cfg = tiny_model_config();
    let model = Dsan::new(cfg.clone(), seed).expect("tiny config is valid");
    let sample = random_sample(&cfg, rng);
    let weights = vec![0.5, 0.3, 0.2];
    // Zero-initialized biases would put zero-padded cells exactly on a ReLU kink.
    let inputs: Vec<Tensor> = store_tensors(model.params())
        .into_iter()
        .map(|t| {
            let shape = t.shape().to_vec();
            let data = t.data().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            Tensor::new(shape, data).expect("same shape")
        })
        .collect();
    suite("full_model", &inputs, MODEL_TOLERANCE, fault, |g, v| {
        let p = bound(v);
        let pred = model.forward(g, &p, &sample, &mut Mode::Eval)?;
        weighted_mse(g, pred, &sample.y, &weights, 1)
    })
}

/// Runs every suite. With `fault` set, that op's backward rule is corrupted
/// on the analytic side so the suites that rely on it should fail.
pub fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_suites(&mut rng, fault)?;
    out.extend(module_suites(&mut rng, fault)?);
    out.push(model_suite(&mut rng, seed, fault)?);
    Ok(out)
}
