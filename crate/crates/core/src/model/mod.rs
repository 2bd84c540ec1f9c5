//! The full encoder-decoder: input projections, positional encodings, the
//! dynamic attention encoder, the switch-attention decoder and the output head.

mod blocks;
mod checkpoint;
mod config;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{CrossLayer, EncGLayer};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use config::{ConfigError, ModelConfig};

use crate::attention::{lookahead_threshold_mask, threshold_mask};
use crate::encodings::{spatial_encoding, stpe, CoordinateMatrix, GridCoord, TemporalEncoder};
use crate::layers::{Linear, Projection};
use crate::tensor::{Bound, Graph, Mode, ParamStore, Result, Tensor, TensorError, Var};

/// One training or evaluation instance for target grid `target` at first
/// future step `t1`. All feature tensors are in normalized space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t1: usize,
    pub target: GridCoord,
    /// `h × N × b` historical maps, shared by every target at the same `t1`.
    pub x: Arc<Tensor>,
    /// `h × N_D × b` local block around the target, zero outside the map.
    pub x_local: Tensor,
    /// `h × (7+a+c)` external vectors of the historical steps.
    pub history_calendar: Arc<Tensor>,
    /// `F × (7+a+c)` calendar of the future steps with external features zeroed.
    pub future_calendar: Arc<Tensor>,
    /// `F × b` ground truth at the target.
    pub y: Tensor,
}

impl Sample {
    pub fn features(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[0]
    }

    /// Latest historical features of the target grid: the decoder's first input.
    pub fn seed(&self, cols: usize) -> Vec<f64> {
        let s = self.x.shape();
        let (h, n, b) = (s[0], s[1], s[2]);
        let grid = self.target.row * cols + self.target.col;
        let off = ((h - 1) * n + grid) * b;
        self.x.data()[off..off + b].to_vec()
    }

    /// `1 × f × b` decoder input: the seed followed by `previous` (flat `(f-1) × b`).
    pub fn decoder_input(&self, cols: usize, previous: &[f64]) -> Tensor {
        let mut data = self.seed(cols);
        data.extend_from_slice(previous);
        let b = self.features();
        let f = data.len() / b;
        Tensor::new([1, f, b], data).expect("decoder input shape")
    }

    /// Decoder input for teacher forcing: seed then the first `F-1` targets.
    pub fn teacher_input(&self, cols: usize) -> Tensor {
        let b = self.features();
        let prev = &self.y.data()[..(self.horizon() - 1) * b];
        self.decoder_input(cols, prev)
    }
}

/// Error for a target outside the map.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("grid ({row}, {col}) lies outside the {rows}x{cols} map")]
pub struct OutOfGrid {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The `(2r+1)²` window of `x: h × (rows·cols) × b` centred on `center`,
/// with zeros where the window leaves the map.
pub fn extract_local_block(
    x: &Tensor,
    rows: usize,
    cols: usize,
    center: GridCoord,
    radius: usize,
) -> std::result::Result<Tensor, OutOfGrid> {
    if center.row >= rows || center.col >= cols {
        return Err(OutOfGrid {
            row: center.row,
            col: center.col,
            rows,
            cols,
        });
    }
    let s = x.shape();
    let (h, n, b) = (s[0], s[1], s[2]);
    assert_eq!(n, rows * cols, "map size");
    let side = 2 * radius + 1;
    let mut out = Tensor::zeros([h, side * side, b]);
    let data = out.data_mut();
    for dr in 0..side {
        let r = center.row as i64 + dr as i64 - radius as i64;
        if r < 0 || r >= rows as i64 {
            continue;
        }
        for dc in 0..side {
            let c = center.col as i64 + dc as i64 - radius as i64;
            if c < 0 || c >= cols as i64 {
                continue;
            }
            let src_grid = r as usize * cols + c as usize;
            let dst_grid = dr * side + dc;
            for t in 0..h {
                let src = (t * n + src_grid) * b;
                let dst = (t * side * side + dst_grid) * b;
                data[dst..dst + b].copy_from_slice(&x.data()[src..src + b]);
            }
        }
    }
    Ok(out)
}

/// Masks of the encoder side, built from raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMasks {
    /// `h × N × N`
    pub global: Tensor,
    /// `h × 1 × N`: the per-key global mask for queries from the local block.
    pub global_keys: Tensor,
    /// `h × N_D × N_D`
    pub local: Tensor,
}

impl EncoderMasks {
    pub fn build(x: &Tensor, x_local: &Tensor) -> Self {
        let global = threshold_mask(x);
        let s = global.shape();
        let (h, n) = (s[0], s[1]);
        let global_keys = Tensor::from_fn([h, 1, n], |i| global.data()[(i / n) * n * n + i % n]);
        Self {
            global,
            global_keys,
            local: threshold_mask(x_local),
        }
    }
}

/// Post-projection, post-encoding inputs of the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInputs {
    /// `h × N × d`
    pub global: Var,
    /// `h × N_D × d`
    pub local: Var,
}

/// Model parameters and the layer layout that reads them.
#[derive(Debug, Clone)]
pub struct Dsan {
    cfg: ModelConfig,
    params: ParamStore,
    tpe: TemporalEncoder,
    proj_global: Projection,
    proj_local: Projection,
    proj_decoder: Projection,
    enc_g: Vec<EncGLayer>,
    enc_d: Vec<CrossLayer>,
    dec_s: Vec<CrossLayer>,
    dec_t: Vec<CrossLayer>,
    head: Linear,
}

fn shape_check(op: &'static str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: actual.to_vec(),
            rhs: expected.to_vec(),
        })
    }
}

impl Dsan {
    /// Builds a model with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, d_ff, heads, b) = (cfg.d_model, cfg.d_ff, cfg.heads, cfg.features);
        let tpe = TemporalEncoder::new(&mut s, "tpe", cfg.external_dim(), d, &mut rng);
        let proj_global = Projection::new(&mut s, "proj.global", b, d, cfg.proj_layers, &mut rng);
        let proj_local = Projection::new(&mut s, "proj.local", b, d, cfg.proj_layers, &mut rng);
        let proj_decoder = Projection::new(&mut s, "proj.decoder", b, d, cfg.proj_layers, &mut rng);
        let enc_g = (0..cfg.layers)
            .map(|l| EncGLayer::new(&mut s, &format!("enc_g.{l}"), d, d_ff, heads, &mut rng))
            .collect();
        let mut stack = |s: &mut ParamStore, name: &str| -> Vec<CrossLayer> {
            (0..cfg.layers)
                .map(|l| CrossLayer::new(s, &format!("{name}.{l}"), d, d_ff, heads, &mut rng))
                .collect()
        };
        let enc_d = stack(&mut s, "enc_d");
        let dec_s = stack(&mut s, "dec_s");
        let dec_t = stack(&mut s, "dec_t");
        let head = Linear::new(&mut s, "head", d, b, true, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            tpe,
            proj_global,
            proj_local,
            proj_decoder,
            enc_g,
            enc_d,
            dec_s,
            dec_t,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_head(&self) -> Linear {
        self.head
    }

    /// Scalar parameter count implied by a configuration.
    pub fn num_params(cfg: &ModelConfig) -> usize {
        let (d, d_ff, b) = (cfg.d_model, cfg.d_ff, cfg.features);
        TemporalEncoder::num_params(cfg.external_dim(), d)
            + 3 * Projection::num_params(b, d, cfg.proj_layers)
            + cfg.layers * EncGLayer::num_params(d, d_ff)
            + 3 * cfg.layers * CrossLayer::num_params(d, d_ff)
            + Linear::num_params(d, b, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn embed(
        &self,
        g: &mut Graph,
        p: &Bound,
        proj: &Projection,
        raw: &Tensor,
        spe: Tensor,
        tpe: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let x = g.constant(raw.clone());
        let x = proj.forward(g, p, x)?;
        let spe = g.constant(spe);
        let pos = stpe(g, spe, tpe)?;
        let e = g.add(x, pos)?;
        Ok(g.dropout(e, self.cfg.dropout, mode))
    }

    fn spe(&self, coords: &CoordinateMatrix) -> Tensor {
        spatial_encoding(coords, self.cfg.d_model).expect("d_model validated even")
    }

    /// Projects the historical map and local block and adds their positional encodings.
    pub fn embed_encoder(
        &self,
        g: &mut Graph,
        p: &Bound,
        sample: &Sample,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderInputs> {
        let c = &self.cfg;
        let (h, b) = (c.history(), c.features);
        shape_check("sample.x", sample.x.shape(), &[h, c.grids(), b])?;
        shape_check("sample.x_local", sample.x_local.shape(), &[h, c.block_grids(), b])?;
        shape_check(
            "sample.history_calendar",
            sample.history_calendar.shape(),
            &[h, c.external_dim()],
        )?;
        let r = g.constant((*sample.history_calendar).clone());
        let tpe = self.tpe.forward(g, p, r)?;
        let grid = CoordinateMatrix::grid(c.rows, c.cols, sample.target, c.coord_scheme);
        let block = CoordinateMatrix::block(sample.target, c.local_radius, c.coord_scheme);
        let global = self.embed(g, p, &self.proj_global, &sample.x, self.spe(&grid), tpe, mode)?;
        let local = self.embed(g, p, &self.proj_local, &sample.x_local, self.spe(&block), tpe, mode)?;
        Ok(EncoderInputs { global, local })
    }

    /// Embeds a `1 × f × b` decoder input using the first `f` rows of `calendar`.
    pub fn embed_decoder(
        &self,
        g: &mut Graph,
        p: &Bound,
        target: GridCoord,
        input: &Tensor,
        calendar: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let f = input.shape()[1];
        shape_check("decoder input", input.shape(), &[1, f, self.cfg.features])?;
        if calendar.rank() != 2 || calendar.shape()[0] < f || calendar.shape()[1] != self.cfg.external_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "future calendar",
                lhs: calendar.shape().to_vec(),
                rhs: vec![f, self.cfg.external_dim()],
            });
        }
        let r = g.constant(Tensor::new(
            [f, self.cfg.external_dim()],
            calendar.data()[..f * self.cfg.external_dim()].to_vec(),
        )?);
        let tpe = self.tpe.forward(g, p, r)?;
        let tpe = g.reshape(tpe, [1, f, self.cfg.d_model])?;
        let point = CoordinateMatrix::point(target, self.cfg.coord_scheme);
        self.embed(g, p, &self.proj_decoder, input, self.spe(&point), tpe, mode)
    }

    /// Runs both encoder stacks and returns the local representation `h × N_D × d`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: EncoderInputs,
        masks: &EncoderMasks,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let rate = self.cfg.dropout;
        let mut h_g = inputs.global;
        for layer in &self.enc_g {
            h_g = layer.forward(g, p, h_g, &masks.global, rate, mode)?;
        }
        let mut h_d = inputs.local;
        for layer in &self.enc_d {
            h_d = layer.forward(g, p, h_d, h_g, Some(&masks.local), Some(&masks.global_keys), rate, mode)?;
        }
        Ok(h_d)
    }

    /// Runs both decoder stacks and the output head; returns `f × b` predictions.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        encoded: Var,
        decoder: Var,
        mask: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let rate = self.cfg.dropout;
        let h = g.shape(encoded)[0];
        let (f, d) = (g.shape(decoder)[1], self.cfg.d_model);
        let mut h_s = g.broadcast_to(decoder, &[h, f, d])?;
        for layer in &self.dec_s {
            h_s = layer.forward(g, p, h_s, encoded, Some(mask), None, rate, mode)?;
        }
        let switched = g.swap_axes(h_s, 0, 1)?;
        let mut h_t = decoder;
        for layer in &self.dec_t {
            h_t = layer.forward_switched(g, p, h_t, switched, mask, rate, mode)?;
        }
        let y = self.head.forward(g, p, h_t)?;
        let y = g.sigmoid(y);
        g.reshape(y, [f, self.cfg.features])
    }

    /// Teacher-forced pass: the decoder sees the seed followed by the shifted targets.
    pub fn forward(&self, g: &mut Graph, p: &Bound, sample: &Sample, mode: &mut Mode<'_>) -> Result<Var> {
        let input = sample.teacher_input(self.cfg.cols);
        self.forward_with_input(g, p, sample, &input, mode)
    }

    /// Full pass with an explicit `1 × f × b` decoder input.
    pub fn forward_with_input(
        &self,
        g: &mut Graph,
        p: &Bound,
        sample: &Sample,
        input: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let masks = EncoderMasks::build(&sample.x, &sample.x_local);
        let enc_in = self.embed_encoder(g, p, sample, mode)?;
        let encoded = self.encode(g, p, enc_in, &masks, mode)?;
        let dec = self.embed_decoder(g, p, sample.target, input, &sample.future_calendar, mode)?;
        self.decode(g, p, encoded, dec, &lookahead_threshold_mask(input, 1), mode)
    }

    /// Evaluation-mode teacher-forced prediction.
    pub fn predict_teacher(&self, sample: &Sample) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let y = self.forward(&mut g, &p, sample, &mut Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Encodes once, then decodes `steps` times, each time appending the newest
    /// prediction to the decoder input. Returns `steps × b`.
    pub fn autoregressive_predict(&self, sample: &Sample, steps: usize) -> Result<Tensor> {
        let b = self.cfg.features;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let mut mode = Mode::Eval;
        let masks = EncoderMasks::build(&sample.x, &sample.x_local);
        let enc_in = self.embed_encoder(&mut g, &p, sample, &mut mode)?;
        let encoded = self.encode(&mut g, &p, enc_in, &masks, &mut mode)?;
        let mut out: Vec<f64> = Vec::with_capacity(steps * b);
        for f in 1..=steps {
            let input = sample.decoder_input(self.cfg.cols, &out);
            let dec = self.embed_decoder(&mut g, &p, sample.target, &input, &sample.future_calendar, &mut mode)?;
            let mask = lookahead_threshold_mask(&input, 1);
            let y = self.decode(&mut g, &p, encoded, dec, &mask, &mut mode)?;
            out.extend_from_slice(&g.value(y).data()[(f - 1) * b..f * b]);
        }
        Tensor::new([steps, b], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::ExternalVector;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
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
            rows: 3,
            cols: 3,
            features: 2,
            externals: 0,
            steps_per_day: 4,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_sample(cfg: &ModelConfig, rng: &mut ChaCha8Rng, target: GridCoord) -> Sample {
        let (h, n, b) = (cfg.history(), cfg.grids(), cfg.features);
        let x = Tensor::from_fn([h, n, b], |_| rng.random_range(0.0..1.0));
        let x_local = extract_local_block(&x, cfg.rows, cfg.cols, target, cfg.local_radius).unwrap();
        let cal = |rng: &mut ChaCha8Rng, rows: usize| {
            let v: Vec<ExternalVector> = (0..rows)
                .map(|_| {
                    ExternalVector::new(
                        rng.random_range(0..7),
                        rng.random_range(0..cfg.steps_per_day),
                        cfg.steps_per_day,
                        &[],
                    )
                    .unwrap()
                })
                .collect();
            crate::encodings::stack_external(&v).unwrap()
        };
        Sample {
            t1: 0,
            target,
            x: Arc::new(x),
            x_local,
            history_calendar: Arc::new(cal(rng, h)),
            future_calendar: Arc::new(cal(rng, cfg.horizon)),
            y: Tensor::from_fn([cfg.horizon, b], |_| rng.random_range(0.05..1.0)),
        }
    }

    #[test]
    fn local_block_padding_counts() {
        let x = Tensor::from_fn([2, 81, 1], |i| 1.0 + i as f64);
        let nonzero = |t: &Tensor| t.data().iter().filter(|&&v| v != 0.0).count();
        let inner = extract_local_block(&x, 9, 9, GridCoord::new(4, 4), 3).unwrap();
        assert_eq!(nonzero(&inner), 2 * 49);
        let corner = extract_local_block(&x, 9, 9, GridCoord::new(0, 0), 3).unwrap();
        let in_grid = (-3i64..=3)
            .flat_map(|r| (-3i64..=3).map(move |c| (r, c)))
            .filter(|&(r, c)| (0..9).contains(&r) && (0..9).contains(&c))
            .count();
        assert_eq!(49 - in_grid, 33);
        assert_eq!(nonzero(&corner), 2 * in_grid);
        assert_eq!(corner.at(&[1, 24, 0]), x.at(&[1, 0, 0]));
        let single = extract_local_block(&x, 9, 9, GridCoord::new(2, 5), 0).unwrap();
        assert_eq!(single.shape(), &[2, 1, 1]);
        assert_eq!(single.at(&[0, 0, 0]), x.at(&[0, 2 * 9 + 5, 0]));
        assert!(extract_local_block(&x, 9, 9, GridCoord::new(9, 0), 1).is_err());
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = tiny_config();
        let model = Dsan::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.params().numel(), Dsan::num_params(&cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = random_sample(&cfg, &mut rng, GridCoord::new(0, 2));
        let y = model.predict_teacher(&sample).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(model.predict_teacher(&sample).unwrap().bit_eq(&y));
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let cfg = tiny_config();
        let mut model = Dsan::new(cfg.clone(), 0).unwrap();
        let head = model.output_head();
        model.params_mut().get_mut(head.weight).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = random_sample(&cfg, &mut rng, GridCoord::new(1, 1));
        let y = model.predict_teacher(&sample).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_sample_shape_rejected() {
        let cfg = tiny_config();
        let model = Dsan::new(cfg.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sample = random_sample(&cfg, &mut rng, GridCoord::new(1, 1));
        sample.x = Arc::new(Tensor::zeros([2, 8, 2]));
        assert!(matches!(
            model.predict_teacher(&sample),
            Err(TensorError::ShapeMismatch { op: "sample.x", .. })
        ));
    }

    #[test]
    fn autoregressive_matches_single_pass_on_own_outputs() {
        let cfg = tiny_config();
        let model = Dsan::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = random_sample(&cfg, &mut rng, GridCoord::new(2, 0));
        let auto = model.autoregressive_predict(&sample, 3).unwrap();
        let b = cfg.features;
        let input = sample.decoder_input(cfg.cols, &auto.data()[..2 * b]);
        let mut g = Graph::new();
        let p = g.bind(model.params());
        let once = model
            .forward_with_input(&mut g, &p, &sample, &input, &mut Mode::Eval)
            .unwrap();
        assert!(g.value(once).bit_eq(&auto));
        let short = model.autoregressive_predict(&sample, 1).unwrap();
        assert_eq!(short.data(), &auto.data()[..b]);
    }
}
