// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen patch encoder, projector, causal decoder and prediction head.

use super::config::MllmConfig;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{matmul, RngStream, Tensor};
use crate::synth::{qa::unpad_answer, Example};

const LN_EPS: f64 = 1e-5;

/// One model input: an image plus the token sequences around it.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub pixels: &'a Tensor,
    pub prompt: &'a [u16],
    /// Answer tokens; trailing ignore-padding is allowed and skipped.
    pub answer: &'a [u16],
}

impl<'a> From<&'a Example> for Sample<'a> {
    fn from(ex: &'a Example) -> Self {
        Sample {
            pixels: &ex.image.pixels,
            prompt: &ex.qa.prompt,
            answer: &ex.qa.answer,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_qkv: ParamId,
    pub w_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub w_v: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub pred_w1: ParamId,
    pub pred_b1: ParamId,
    pub pred_w2: ParamId,
    pub pred_b2: ParamId,
}

/// Model weights together with the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Mllm {
    pub config: MllmConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
    pos_code: Tensor,
}

impl AsRef<ParamStore> for Mllm {
    fn as_ref(&self) -> &ParamStore {
        &self.store
    }
}

impl AsMut<ParamStore> for Mllm {
    fn as_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// Encoder output `N_p × d_v`.
    pub z: Var,
    /// Projected visual tokens `N_p × d_l`.
    pub hv0: Var,
    /// Residual stream after each block; index 0 is the decoder input.
    pub hidden: Vec<Var>,
    /// Logits at the answer-predicting positions, `n_answer × V`.
    pub logits: Var,
    pub visual_start: usize,
    pub n_visual: usize,
    /// Answer tokens the logits are scored against, ignore-padding removed.
    pub targets: Vec<usize>,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub z: Tensor,
    pub hv0: Tensor,
    /// `L + 1` full-sequence hidden states.
    pub hidden: Vec<Tensor>,
    pub logits: Tensor,
    pub visual_start: usize,
    pub n_visual: usize,
    pub targets: Vec<usize>,
}

impl ForwardTrace {
    /// Visual segment of layer `l`.
    pub fn visual(&self, l: usize) -> Tensor {
        self.hidden[l].slice_rows(self.visual_start, self.n_visual)
    }
}

/// Fixed 2-D sinusoidal code: the first half of the columns encodes the patch
/// row, the second half the patch column.
pub fn position_code(grid: usize, d: usize, scale: f64) -> Tensor {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|k| 1.0 / 10_000f64.powf(2.0 * k as f64 / half as f64))
        .collect();
    Tensor::from_fn(grid * grid, d, |i, j| {
        let (pos, local) = if j < half {
            (i / grid, j)
        } else {
            (i % grid, j - half)
        };
        let angle = pos as f64 * freqs[local / 2];
        scale
            * if local % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
    })
}

/// Splits a `g·p × g·p` image into row-major flattened patches, one per row.
pub fn patchify(pixels: &Tensor, patch: usize) -> Result<Tensor> {
    if pixels.rank() != 2 || patch == 0 {
        return Err(Error::InvalidShape {
            shape: pixels.shape().to_vec(),
            reason: "patchify expects a square image".into(),
        });
    }
    let (h, w) = (pixels.rows(), pixels.cols());
    if h != w || h % patch != 0 {
        return Err(Error::InvalidShape {
            shape: pixels.shape().to_vec(),
            reason: format!("image side must be a multiple of the patch size {patch}"),
        });
    }
    let g = h / patch;
    Ok(Tensor::from_fn(g * g, patch * patch, |q, k| {
        let (pr, pc) = (q / g, q % g);
        pixels.get(pr * patch + k / patch, pc * patch + k % patch)
    }))
}

impl Mllm {
    pub fn new(config: MllmConfig) -> Result<Self> {
        config.validate()?;
        let rng = RngStream::new(config.seed).substream("init");
        let mut store = ParamStore::new();
        let c = &config;
        let w_v = store.add_scaled_normal(
            &rng,
            "vision.w_v",
            &[c.d_patch(), c.d_v],
            1.0 / (c.d_patch() as f64).sqrt(),
            false,
        );
        let proj_w = store.add_normal(&rng, "proj.w", &[c.d_v, c.d_l], true);
        let proj_b = store.add_const("proj.b", &[c.d_l], 0.0);
        let tok_emb = store.add_normal(&rng, "embed.tok", &[c.vocab, c.d_l], true);
        let pos_emb = store.add_normal(
            &rng,
            "embed.pos",
            &[c.prompt_len() + c.max_answer_len, c.d_l],
            true,
        );
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let n = |s: &str| format!("llm.layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: store.add_const(&n("ln1.g"), &[c.d_l], 1.0),
                ln1_b: store.add_const(&n("ln1.b"), &[c.d_l], 0.0),
                w_qkv: store.add_normal(&rng, &n("attn.w_qkv"), &[c.d_l, 3 * c.d_l], true),
                w_o: store.add_normal(&rng, &n("attn.w_o"), &[c.d_l, c.d_l], true),
                ln2_g: store.add_const(&n("ln2.g"), &[c.d_l], 1.0),
                ln2_b: store.add_const(&n("ln2.b"), &[c.d_l], 0.0),
                w1: store.add_normal(&rng, &n("mlp.w1"), &[c.d_l, c.d_ff], true),
                b1: store.add_const(&n("mlp.b1"), &[c.d_ff], 0.0),
                w2: store.add_normal(&rng, &n("mlp.w2"), &[c.d_ff, c.d_l], true),
                b2: store.add_const(&n("mlp.b2"), &[c.d_l], 0.0),
            });
        }
        let lnf_g = store.add_const("llm.ln_f.g", &[c.d_l], 1.0);
        let lnf_b = store.add_const("llm.ln_f.b", &[c.d_l], 0.0);
        let head_w = store.add_normal(&rng, "head.w", &[c.d_l, c.vocab], true);
        let head_b = store.add_const("head.b", &[c.vocab], 0.0);
        // The prediction head is always built so that runs with and without
        // the auxiliary loss draw identical initial weights elsewhere.
        let pred_w1 = store.add_normal(&rng, "pred.w1", &[c.d_l, c.d_l], true);
        let pred_b1 = store.add_const("pred.b1", &[c.d_l], 0.0);
        let pred_w2 = store.add_normal(&rng, "pred.w2", &[c.d_l, c.d_target()], true);
        let pred_b2 = store.add_const("pred.b2", &[c.d_target()], 0.0);
        let pos_code = position_code(c.grid, c.d_v, c.pos_scale);
        Ok(Self {
            ids: ParamIds {
                w_v,
                proj_w,
                proj_b,
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
                pred_w1,
                pred_b1,
                pred_w2,
                pred_b2,
            },
            config,
            store,
            pos_code,
        })
    }

    pub fn pos_code(&self) -> &Tensor {
        &self.pos_code
    }

    /// Patch features `Z = patchify(img) · W_v + positions`.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        self.check_image(pixels)?;
        let patches = patchify(pixels, self.config.patch)?;
        matmul(&patches, self.store.value(self.ids.w_v))?.add(&self.pos_code)
    }

    fn check_image(&self, pixels: &Tensor) -> Result<()> {
        let side = self.config.grid * self.config.patch;
        if pixels.shape() != [side, side] {
            return Err(Error::InvalidShape {
                shape: pixels.shape().to_vec(),
                reason: format!("expected a {side}×{side} image"),
            });
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = tape.param(&self.store, w);
        let bv = tape.param(&self.store, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
        let gv = tape.param(&self.store, g);
        let bv = tape.param(&self.store, b);
        tape.layer_norm(x, gv, bv, LN_EPS)
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, pixels: &Tensor) -> Result<Var> {
        self.check_image(pixels)?;
        let patches = tape.constant(patchify(pixels, self.config.patch)?);
        let w_v = tape.param(&self.store, self.ids.w_v);
        let z = tape.matmul(patches, w_v)?;
        let pos = tape.constant(self.pos_code.clone());
        tape.add(z, pos)
    }

    pub fn project_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.linear(tape, z, self.ids.proj_w, self.ids.proj_b)
    }

    fn text_embed(&self, tape: &mut Tape, tokens: &[u16], first_pos: usize) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (first_pos..first_pos + tokens.len()).collect();
        let tok = tape.param(&self.store, self.ids.tok_emb);
        let pos = tape.param(&self.store, self.ids.pos_emb);
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        tape.add(te, pe)
    }

    fn attention(&self, tape: &mut Tape, x: Var, ids: &LayerIds) -> Result<Var> {
        let (d, h, dh) = (self.config.d_l, self.config.heads, self.config.head_dim());
        let w_qkv = tape.param(&self.store, ids.w_qkv);
        let qkv = tape.matmul(x, w_qkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for k in 0..h {
            let q = tape.slice_cols(qkv, k * dh, dh)?;
            let q = tape.scale(q, scale);
            let kk = tape.slice_cols(qkv, d + k * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + k * dh, dh)?;
            let s = tape.matmul_nt(q, kk)?;
            let p = tape.causal_softmax(s)?;
            heads.push(tape.matmul(p, v)?);
        }
        let o = tape.concat_cols(&heads)?;
        let w_o = tape.param(&self.store, ids.w_o);
        tape.matmul(o, w_o)
    }

    /// One pre-norm decoder block.
    pub fn block(&self, tape: &mut Tape, x: Var, layer: usize) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let h = self.layer_norm(tape, x, ids.ln1_g, ids.ln1_b)?;
        let a = self.attention(tape, h, ids)?;
        let x = tape.add(x, a)?;
        let h = self.layer_norm(tape, x, ids.ln2_g, ids.ln2_b)?;
        let h = self.linear(tape, h, ids.w1, ids.b1)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, h, ids.w2, ids.b2)?;
        tape.add(x, h)
    }

    /// Final layer norm and output head.
    pub fn decode_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.layer_norm(tape, x, self.ids.lnf_g, self.ids.lnf_b)?;
        self.linear(tape, h, self.ids.head_w, self.ids.head_b)
    }

    /// `f_pred`: Linear → GELU → Linear.
    pub fn predict_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.linear(tape, x, self.ids.pred_w1, self.ids.pred_b1)?;
        let h = tape.gelu(h);
        self.linear(tape, h, self.ids.pred_w2, self.ids.pred_b2)
    }

    fn check_tokens(&self, tokens: &[u16], what: &str) -> Result<()> {
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::InvalidArgument(format!(
                "{what} token {t} outside vocabulary"
            )));
        }
        Ok(())
    }

    /// Builds the full forward pass on `tape`: the prompt, then the visual
    /// tokens, then the teacher-forced answer inputs.
    pub fn forward_on_tape(&self, tape: &mut Tape, sample: Sample<'_>) -> Result<TapeForward> {
        let c = &self.config;
        if sample.prompt.len() != c.prompt_len() {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} tokens, expected {}",
                sample.prompt.len(),
                c.prompt_len()
            )));
        }
        let answer = unpad_answer(sample.answer);
        if answer.is_empty() {
            return Err(Error::InvalidArgument("empty answer".into()));
        }
        if answer.len() > c.max_answer_len {
            return Err(Error::InvalidArgument(format!(
                "answer of {} tokens exceeds the maximum of {}",
                answer.len(),
                c.max_answer_len
            )));
        }
        self.check_tokens(sample.prompt, "prompt")?;
        self.check_tokens(&answer, "answer")?;

        let z = self.encode_on_tape(tape, sample.pixels)?;
        let hv0 = self.project_on_tape(tape, z)?;
        let prompt = self.text_embed(tape, sample.prompt, 0)?;
        let mut parts = vec![prompt, hv0];
        let inputs = &answer[..answer.len() - 1];
        if !inputs.is_empty() {
            parts.push(self.text_embed(tape, inputs, c.prompt_len())?);
        }
        let x = tape.concat_rows(&parts)?;
        let targets = answer.iter().map(|&t| t as usize).collect();
        self.finish_on_tape(tape, z, hv0, vec![x], targets)
    }

    /// Resumes a forward pass from the residual stream entering `start`,
    /// taking everything upstream from `prefix` as constants. `start` may equal
    /// the layer count, in which case only the output head runs.
    pub fn forward_from_layer(
        &self,
        tape: &mut Tape,
        prefix: &ForwardTrace,
        start: usize,
    ) -> Result<TapeForward> {
        if start > self.config.layers || prefix.hidden.len() != self.config.layers + 1 {
            return Err(Error::InvalidArgument(format!(
                "cannot resume at layer {start} of a {}-layer trace",
                prefix.hidden.len().saturating_sub(1)
            )));
        }
        let z = tape.constant(prefix.z.clone());
        let hv0 = tape.constant(prefix.hv0.clone());
        let hidden = prefix.hidden[..=start]
            .iter()
            .map(|h| tape.constant(h.clone()))
            .collect();
        self.finish_on_tape(tape, z, hv0, hidden, prefix.targets.clone())
    }

    fn finish_on_tape(
        &self,
        tape: &mut Tape,
        z: Var,
        hv0: Var,
        mut hidden: Vec<Var>,
        targets: Vec<usize>,
    ) -> Result<TapeForward> {
        let c = &self.config;
        let mut x = *hidden.last().expect("non-empty residual history");
        for l in hidden.len() - 1..c.layers {
            x = self.block(tape, x, l)?;
            hidden.push(x);
        }
        let visual_start = c.prompt_len();
        let n_visual = c.num_patches();
        let rows = tape.slice_rows(x, visual_start + n_visual - 1, targets.len())?;
        let logits = self.decode_on_tape(tape, rows)?;
        Ok(TapeForward {
            z,
            hv0,
            hidden,
            logits,
            visual_start,
            n_visual,
            targets,
        })
    }

    /// First layer whose output depends on `id`: the layer index for block
    /// weights, the layer count for the output and prediction heads, `None`
    /// for anything feeding the embedding.
    pub fn first_dependent_layer(&self, id: ParamId) -> Option<usize> {
        let ids = &self.ids;
        let tail = [
            ids.lnf_g,
            ids.lnf_b,
            ids.head_w,
            ids.head_b,
            ids.pred_w1,
            ids.pred_b1,
            ids.pred_w2,
            ids.pred_b2,
        ];
        if tail.contains(&id) {
            return Some(self.config.layers);
        }
        ids.layers.iter().position(|l| {
            [
                l.ln1_g, l.ln1_b, l.w_qkv, l.w_o, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]
            .contains(&id)
        })
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&self, sample: Sample<'_>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let f = self.forward_on_tape(&mut tape, sample)?;
        Ok(ForwardTrace {
            z: tape.value(f.z).clone(),
            hv0: tape.value(f.hv0).clone(),
            hidden: f.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(f.logits).clone(),
            visual_start: f.visual_start,
            n_visual: f.n_visual,
            targets: f.targets,
        })
    }

    /// Output-head logits for arbitrary hidden states (the logit lens).
    pub fn decode(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(hidden.clone());
        let y = self.decode_on_tape(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}
