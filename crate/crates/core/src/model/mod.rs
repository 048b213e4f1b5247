//! Toy vision-language decoder.
//!
//! A frozen patch encoder and projector feed a small pre-norm causal transformer.
//! The trainable latent head `g` maps decoder hidden states back into the visual
//! token space; during latent decoding its output is re-projected and fed as the
//! next input embedding.

mod checkpoint;
mod decode;
mod sequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, TrainingState, CHECKPOINT_VERSION};
pub use decode::{
    generate, text_mask, DecodeConfig, DecoderMode, DecoderState, ReplayLayout, Response, Slot, StepOutput,
};
pub use sequence::{SequenceBuilder, SequenceInputs};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub visual_dim: usize,
    pub max_seq_len: usize,
    pub latent_budget: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::new().len(),
            embed_dim: 48,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 96,
            patch_size: 8,
            image_size: 32,
            visual_dim: 48,
            max_seq_len: 64,
            latent_budget: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.latent_budget == 0 {
            return bad("latent_budget must be at least 1".into());
        }
        if self.vocab_size < Vocab::new().len() {
            return bad(format!(
                "vocab_size {} smaller than the tokenizer ({})",
                self.vocab_size,
                Vocab::new().len()
            ));
        }
        if self.max_seq_len <= self.num_visual_tokens() {
            return bad("max_seq_len leaves no room after the visual tokens".into());
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `N`, the number of visual tokens per image.
    pub fn num_visual_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Per-patch visual embeddings in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokenGrid {
    pub tokens: Matrix,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VisualTokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn token(&self, j: usize) -> &[f64] {
        self.tokens.row(j)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub encoder_w: ParamId,
    pub encoder_b: ParamId,
    pub projector_w: ParamId,
    pub projector_b: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub lm_w: ParamId,
    pub lm_b: ParamId,
    pub latent_w: ParamId,
    pub latent_b: ParamId,
}

impl ParamIds {
    fn resolve(store: &ParamStore, num_layers: usize) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let layers = (0..num_layers)
            .map(|i| {
                let p = |s: &str| get(&format!("layers.{i}.{s}"));
                Ok(LayerParams {
                    ln1_g: p("ln1.gamma")?,
                    ln1_b: p("ln1.beta")?,
                    wq: p("attn.wq")?,
                    wk: p("attn.wk")?,
                    wv: p("attn.wv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.gamma")?,
                    ln2_b: p("ln2.beta")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder_w: get("encoder.weight")?,
            encoder_b: get("encoder.bias")?,
            projector_w: get("projector.weight")?,
            projector_b: get("projector.bias")?,
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            layers,
            lnf_g: get("ln_f.gamma")?,
            lnf_b: get("ln_f.beta")?,
            lm_w: get("lm_head.weight")?,
            lm_b: get("lm_head.bias")?,
            latent_w: get("latent_head.weight")?,
            latent_b: get("latent_head.bias")?,
        })
    }
}

/// Outputs of a teacher-forced pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `n × embed_dim`, final-norm outputs fed to the vocabulary head.
    pub hidden: Var,
    /// `n × vocab_size`
    pub logits: Var,
}

/// Random filter bank over a flattened `(py, px, c)` patch: the last three
/// columns read the mean of each channel, the rest are unit-norm filters with
/// zero response to flat colour.
fn encoder_filters(patch_dim: usize, visual_dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let channels = CHANNELS;
    let pixels = patch_dim / channels;
    let mean_cols = channels.min(visual_dim);
    let mut w = Matrix::randn(patch_dim, visual_dim, 1.0, rng);
    for j in 0..visual_dim - mean_cols {
        for c in 0..channels {
            let mean = (0..pixels).map(|p| w.get(p * channels + c, j)).sum::<f64>() / pixels as f64;
            for p in 0..pixels {
                let v = w.get(p * channels + c, j) - mean;
                w.set(p * channels + c, j, v);
            }
        }
        let norm = (0..patch_dim).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..patch_dim {
            let v = w.get(i, j) * ENCODER_GAIN / norm;
            w.set(i, j, v);
        }
    }
    for k in 0..mean_cols {
        let j = visual_dim - mean_cols + k;
        for i in 0..patch_dim {
            let v = if i % channels == k { 1.0 / pixels as f64 } else { 0.0 };
            w.set(i, j, v);
        }
    }
    w
}

const ENCODER_GAIN: f64 = 4.0;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) ids: ParamIds,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let v = config.vocab_size;

        // The frozen pathway has its own stream so it depends only on the seed.
        let mut frozen_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d_0000_0001);
        let pd = config.patch_dim();
        let enc_w = encoder_filters(pd, config.visual_dim, &mut frozen_rng);
        let enc_b = Matrix::randn(1, config.visual_dim, 0.1, &mut frozen_rng);
        let proj_w = Matrix::randn(
            config.visual_dim,
            d,
            1.0 / (config.visual_dim as f64).sqrt(),
            &mut frozen_rng,
        );
        let proj_b = Matrix::randn(1, d, 0.1, &mut frozen_rng);
        store.add("encoder.weight", enc_w, false);
        store.add("encoder.bias", enc_b, false);
        store.add("projector.weight", proj_w, false);
        store.add("projector.bias", proj_b, false);

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = 1.0 / ((2 * config.num_layers) as f64).sqrt();
        store.add("tok_emb", Matrix::randn(v, d, 0.3, &mut rng), true);
        store.add("pos_emb", Matrix::randn(config.max_seq_len, d, 0.1, &mut rng), true);
        for i in 0..config.num_layers {
            let n = |s: &str| format!("layers.{i}.{s}");
            store.add(n("ln1.gamma"), Matrix::filled(1, d, 1.0), true);
            store.add(n("ln1.beta"), Matrix::zeros(1, d), true);
            store.add(n("attn.wq"), Matrix::randn(d, d, lin(d), &mut rng), true);
            store.add(n("attn.wk"), Matrix::randn(d, d, lin(d), &mut rng), true);
            store.add(n("attn.wv"), Matrix::randn(d, d, lin(d), &mut rng), true);
            store.add(n("attn.wo"), Matrix::randn(d, d, lin(d) * resid, &mut rng), true);
            store.add(n("attn.bo"), Matrix::zeros(1, d), true);
            store.add(n("ln2.gamma"), Matrix::filled(1, d, 1.0), true);
            store.add(n("ln2.beta"), Matrix::zeros(1, d), true);
            store.add(n("mlp.w1"), Matrix::randn(d, config.mlp_dim, lin(d), &mut rng), true);
            store.add(n("mlp.b1"), Matrix::zeros(1, config.mlp_dim), true);
            store.add(
                n("mlp.w2"),
                Matrix::randn(config.mlp_dim, d, lin(config.mlp_dim) * resid, &mut rng),
                true,
            );
            store.add(n("mlp.b2"), Matrix::zeros(1, d), true);
        }
        store.add("ln_f.gamma", Matrix::filled(1, d, 1.0), true);
        store.add("ln_f.beta", Matrix::zeros(1, d), true);
        store.add("lm_head.weight", Matrix::randn(d, v, 0.5 * lin(d), &mut rng), true);
        store.add("lm_head.bias", Matrix::zeros(1, v), true);
        store.add(
            "latent_head.weight",
            Matrix::randn(d, config.visual_dim, 0.1 * lin(d), &mut rng),
            true,
        );
        store.add("latent_head.bias", Matrix::zeros(1, config.visual_dim), true);

        let ids = ParamIds::resolve(&store, config.num_layers)?;
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    /// Rebuilds a model around an existing parameter store (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::resolve(&params, config.num_layers)?;
        let model = Self { config, params, ids };
        let expect = Model::new(model.config.clone())?;
        for (id, p) in expect.params.iter() {
            let got = model.params.get(model.params.find(&p.name).unwrap_or(id));
            if got.value.shape() != p.value.shape() || got.trainable != p.trainable {
                return Err(Error::Checkpoint(format!("parameter {} has wrong shape or role", p.name)));
            }
        }
        Ok(model)
    }

    /// Patch flattening followed by the frozen affine encoder.
    pub fn encode_image(&self, image: &Image) -> Result<VisualTokenGrid> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size || image.channels() != CHANNELS {
            return Err(Error::Shape(format!(
                "expected a {0}x{0}x{CHANNELS} image, got {1}x{2}x{3}",
                c.image_size,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        let g = c.grid_size();
        let p = c.patch_size;
        let mut patches = Matrix::zeros(g * g, c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                let row = patches.row_mut(gy * g + gx);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..CHANNELS {
                            row[k] = image.get(gx * p + px, gy * p + py, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut tokens = patches.matmul(self.params.value(self.ids.encoder_w));
        tokens.add_row_assign(self.params.value(self.ids.encoder_b).row(0));
        Ok(VisualTokenGrid {
            tokens,
            grid_h: g,
            grid_w: g,
        })
    }

    /// Frozen affine projector into decoder space, one row per visual token.
    pub fn project_visual(&self, grid: &VisualTokenGrid) -> Result<Matrix> {
        self.project_rows(&grid.tokens)
    }

    pub fn project_rows(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.config.visual_dim {
            return Err(Error::Shape(format!(
                "projector expects width {}, got {}",
                self.config.visual_dim,
                rows.cols()
            )));
        }
        let mut out = rows.matmul(self.params.value(self.ids.projector_w));
        out.add_row_assign(self.params.value(self.ids.projector_b).row(0));
        Ok(out)
    }

    pub fn project_vector(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.params.value(self.ids.projector_w).vec_mul(v);
        for (o, b) in out.iter_mut().zip(self.params.value(self.ids.projector_b).row(0)) {
            *o += b;
        }
        out
    }

    /// `g(h)`: the trainable affine map from decoder space into visual-token space.
    pub fn latent_head(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.params.value(self.ids.latent_w).vec_mul(h);
        for (o, b) in out.iter_mut().zip(self.params.value(self.ids.latent_b).row(0)) {
            *o += b;
        }
        out
    }

    /// Tape version of `g` over the selected hidden rows.
    pub fn latent_head_tape(&self, tape: &mut Tape, hidden_rows: Var) -> Var {
        let w = tape.param(&self.params, self.ids.latent_w);
        let b = tape.param(&self.params, self.ids.latent_b);
        let out = tape.matmul(hidden_rows, w);
        tape.add_row(out, b)
    }

    pub fn token_embedding(&self, id: usize) -> &[f64] {
        self.params.value(self.ids.tok_emb).row(id)
    }

    /// Full causal pass over an assembled sequence, recorded on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, inputs: &SequenceInputs) -> Result<ForwardVars> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let c = &self.config;
        let ps = &self.params;
        let tok = tape.param(ps, self.ids.tok_emb);
        let x = tape.assemble(tok, inputs.token_ids.clone(), inputs.constants.clone());
        let pos = tape.param(ps, self.ids.pos_emb);
        let pos = tape.select_rows(pos, (0..n).collect());
        let mut x = tape.add(x, pos);
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        for layer in &self.ids.layers {
            let g1 = tape.param(ps, layer.ln1_g);
            let b1 = tape.param(ps, layer.ln1_b);
            let h = tape.layer_norm(x, g1, b1);
            let wq = tape.param(ps, layer.wq);
            let wk = tape.param(ps, layer.wk);
            let wv = tape.param(ps, layer.wv);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let heads: Vec<Var> = (0..c.num_heads)
                .map(|hd| {
                    let start = hd * c.head_dim();
                    let qh = tape.slice_cols(q, start, c.head_dim());
                    let kh = tape.slice_cols(k, start, c.head_dim());
                    let vh = tape.slice_cols(v, start, c.head_dim());
                    let s = tape.matmul_bt(qh, kh);
                    let s = tape.scale(s, scale);
                    let p = tape.causal_softmax(s);
                    tape.matmul(p, vh)
                })
                .collect();
            let attn = tape.concat_cols(&heads);
            let wo = tape.param(ps, layer.wo);
            let bo = tape.param(ps, layer.bo);
            let attn = tape.matmul(attn, wo);
            let attn = tape.add_row(attn, bo);
            x = tape.add(x, attn);

            let g2 = tape.param(ps, layer.ln2_g);
            let b2 = tape.param(ps, layer.ln2_b);
            let h = tape.layer_norm(x, g2, b2);
            let w1 = tape.param(ps, layer.w1);
            let bb1 = tape.param(ps, layer.b1);
            let w2 = tape.param(ps, layer.w2);
            let bb2 = tape.param(ps, layer.b2);
            let m = tape.matmul(h, w1);
            let m = tape.add_row(m, bb1);
            let m = tape.gelu(m);
            let m = tape.matmul(m, w2);
            let m = tape.add_row(m, bb2);
            x = tape.add(x, m);
        }
        let gf = tape.param(ps, self.ids.lnf_g);
        let bf = tape.param(ps, self.ids.lnf_b);
        let hidden = tape.layer_norm(x, gf, bf);
        let lw = tape.param(ps, self.ids.lm_w);
        let lb = tape.param(ps, self.ids.lm_b);
        let logits = tape.matmul(hidden, lw);
        let logits = tape.add_row(logits, lb);
        Ok(ForwardVars { hidden, logits })
    }

    /// Teacher-forced pass without gradients: `(logits, hidden)` for every position.
    pub fn forward_teacher_forced(&self, inputs: &SequenceInputs) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, inputs)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.hidden).clone()))
    }

    /// Copies every parameter from `other`; used to refresh snapshots.
    pub fn load_params_from(&mut self, other: &Model) {
        self.params = other.params.clone();
    }
}
