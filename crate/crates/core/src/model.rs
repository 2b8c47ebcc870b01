//! Toy multimodal decoder.
//!
//! A tiny vision encoder turns a color grid into a prefix of visual
//! tokens; a rotary-attention decoder with a KV cache consumes the
//! prefix plus a text query and greedily generates an answer token.
//! The decoder receives position IDs explicitly, which is the surface
//! pruning realignment manipulates.
//!
//! Sequence layout fed to the decoder:
//! `[BOS] visual_0 .. visual_{N-1} text_0 .. text_{T-1}` with BOS fixed
//! at position ID 0 and the visual block starting at ID 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, layer_norm, softmax_in_place, Matrix, Rng};
use crate::prune::{
    align_gap, align_shifted, gather, permute_by_score, retained_count, score_cls_visual,
    score_random, score_text_visual, select_spatial, topk_select, Alignment, PruneSelection,
    ScoreVector, Strategy,
};
use crate::rope::{rotate_in_place, sequential_ids, PositionIds, RopeConfig};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Architecture and vocabulary layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Grid side length G; the image has G*G cells and the encoder emits
    /// G*G visual tokens.
    pub grid_size: usize,
    pub num_colors: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope: RopeConfig,
}

impl Default for ModelConfig {
    /// The locked desk-scale configuration used by the benchmark.
    fn default() -> Self {
        ModelConfig {
            grid_size: 4,
            num_colors: 8,
            d_model: 64,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            vocab_size: 8 + 16 + 2,
            max_seq_len: 64,
            rope: RopeConfig::new(16, 4),
        }
    }
}

impl ModelConfig {
    pub fn num_visual(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn head_dim(&self) -> usize {
        self.rope.head_dim
    }

    /// Token id of color `c`.
    pub fn color_token(&self, c: usize) -> usize {
        c
    }

    /// Token id of grid cell `i`.
    pub fn cell_token(&self, i: usize) -> usize {
        self.num_colors + i
    }

    pub fn end_token(&self) -> usize {
        self.num_colors + self.num_visual()
    }

    pub fn bos_token(&self) -> usize {
        self.num_colors + self.num_visual() + 1
    }

    /// Position ID of the first visual token (BOS owns 0).
    pub fn visual_base(&self) -> usize {
        1
    }

    /// Position ID of the first text token in the unpruned layout.
    pub fn text_base(&self) -> usize {
        self.visual_base() + self.num_visual()
    }

    pub fn validate(&self) -> Result<()> {
        self.rope.validate()?;
        if self.d_model != self.num_heads * self.rope.head_dim {
            return Err(Error::config(format!(
                "d_model {} != num_heads {} * head_dim {}",
                self.d_model, self.num_heads, self.rope.head_dim
            )));
        }
        if self.rope.num_heads != self.num_heads {
            return Err(Error::config("rope.num_heads != num_heads"));
        }
        if self.grid_size == 0 || self.num_colors < 2 {
            return Err(Error::config("need grid_size >= 1 and num_colors >= 2"));
        }
        if self.vocab_size < self.num_colors + self.num_visual() + 2 {
            return Err(Error::config(format!(
                "vocab_size {} too small for {} colors + {} cells + 2 specials",
                self.vocab_size,
                self.num_colors,
                self.num_visual()
            )));
        }
        if self.max_seq_len < self.text_base() + 4 {
            return Err(Error::config("max_seq_len too small for prompt + generation"));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("need at least one encoder and decoder layer"));
        }
        Ok(())
    }
}

/// One pre-norm transformer block (attention + MLP, ratio 4).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl BlockWeights {
    fn init(d: usize, rng: &mut Rng) -> Self {
        let mut mat = |r: usize, c: usize| {
            let mut m = Matrix::zeros(r, c);
            rng.fill_gaussian(m.as_mut_slice(), INIT_STD);
            m
        };
        BlockWeights {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w1: mat(d, 4 * d),
            b1: vec![0.0; 4 * d],
            w2: mat(4 * d, d),
            b2: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        BlockWeights {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: Matrix::zeros(d, 4 * d),
            b1: vec![0.0; 4 * d],
            w2: Matrix::zeros(4 * d, d),
            b2: vec![0.0; d],
        }
    }
}

/// All model parameters.
///
/// The encoder uses learned additive positional embeddings; the decoder
/// is rotary-only. The score head (`score_q`, `score_t`, `score_k`)
/// produces the pruning score queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub color_emb: Matrix,
    pub pos_emb: Matrix,
    pub cls_emb: Vec<f64>,
    pub enc_blocks: Vec<BlockWeights>,
    pub enc_lnf_g: Vec<f64>,
    pub enc_lnf_b: Vec<f64>,
    pub score_q: Matrix,
    pub score_t: Matrix,
    pub score_k: Matrix,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub tok_emb: Matrix,
    pub dec_blocks: Vec<BlockWeights>,
    pub dec_lnf_g: Vec<f64>,
    pub dec_lnf_b: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let mut mat = |r: usize, c: usize| {
            let mut m = Matrix::zeros(r, c);
            rng.fill_gaussian(m.as_mut_slice(), INIT_STD);
            m
        };
        let color_emb = mat(cfg.num_colors, d);
        let pos_emb = mat(cfg.num_visual(), d);
        let cls_emb = mat(1, d).as_slice().to_vec();
        let score_q = mat(d, d);
        let score_t = mat(d, d);
        let score_k = mat(d, d);
        let proj_w = mat(d, d);
        let tok_emb = mat(cfg.vocab_size, d);
        let head_w = mat(d, cfg.vocab_size);
        ModelWeights {
            color_emb,
            pos_emb,
            cls_emb,
            enc_blocks: (0..cfg.encoder_layers).map(|_| BlockWeights::init(d, rng)).collect(),
            enc_lnf_g: vec![1.0; d],
            enc_lnf_b: vec![0.0; d],
            score_q,
            score_t,
            score_k,
            proj_w,
            proj_b: vec![0.0; d],
            tok_emb,
            dec_blocks: (0..cfg.decoder_layers).map(|_| BlockWeights::init(d, rng)).collect(),
            dec_lnf_g: vec![1.0; d],
            dec_lnf_b: vec![0.0; d],
            head_w,
            head_b: vec![0.0; cfg.vocab_size],
        }
    }

    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        ModelWeights {
            color_emb: Matrix::zeros(cfg.num_colors, d),
            pos_emb: Matrix::zeros(cfg.num_visual(), d),
            cls_emb: vec![0.0; d],
            enc_blocks: (0..cfg.encoder_layers).map(|_| BlockWeights::zeros(d)).collect(),
            enc_lnf_g: vec![0.0; d],
            enc_lnf_b: vec![0.0; d],
            score_q: Matrix::zeros(d, d),
            score_t: Matrix::zeros(d, d),
            score_k: Matrix::zeros(d, d),
            proj_w: Matrix::zeros(d, d),
            proj_b: vec![0.0; d],
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            dec_blocks: (0..cfg.decoder_layers).map(|_| BlockWeights::zeros(d)).collect(),
            dec_lnf_g: vec![0.0; d],
            dec_lnf_b: vec![0.0; d],
            head_w: Matrix::zeros(d, cfg.vocab_size),
            head_b: vec![0.0; cfg.vocab_size],
        }
    }

    /// Named tensors in a fixed order (checkpoint layout and optimizer
    /// iteration both rely on this order being stable).
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = Vec::new();
        let m = |m: &'_ Matrix| (m.rows(), m.cols());
        macro_rules! mat {
            ($name:expr, $field:expr) => {{
                let (r, c) = m(&$field);
                out.push(($name.to_string(), r, c, $field.as_slice()));
            }};
        }
        macro_rules! vecf {
            ($name:expr, $field:expr) => {
                out.push(($name.to_string(), 1, $field.len(), &$field));
            };
        }
        mat!("color_emb", self.color_emb);
        mat!("pos_emb", self.pos_emb);
        vecf!("cls_emb", self.cls_emb);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            let p = format!("enc.{i}");
            vecf!(format!("{p}.ln1_g"), b.ln1_g);
            vecf!(format!("{p}.ln1_b"), b.ln1_b);
            mat!(format!("{p}.wq"), b.wq);
            mat!(format!("{p}.wk"), b.wk);
            mat!(format!("{p}.wv"), b.wv);
            mat!(format!("{p}.wo"), b.wo);
            vecf!(format!("{p}.ln2_g"), b.ln2_g);
            vecf!(format!("{p}.ln2_b"), b.ln2_b);
            mat!(format!("{p}.w1"), b.w1);
            vecf!(format!("{p}.b1"), b.b1);
            mat!(format!("{p}.w2"), b.w2);
            vecf!(format!("{p}.b2"), b.b2);
        }
        vecf!("enc_lnf_g", self.enc_lnf_g);
        vecf!("enc_lnf_b", self.enc_lnf_b);
        mat!("score_q", self.score_q);
        mat!("score_t", self.score_t);
        mat!("score_k", self.score_k);
        mat!("proj_w", self.proj_w);
        vecf!("proj_b", self.proj_b);
        mat!("tok_emb", self.tok_emb);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            let p = format!("dec.{i}");
            vecf!(format!("{p}.ln1_g"), b.ln1_g);
            vecf!(format!("{p}.ln1_b"), b.ln1_b);
            mat!(format!("{p}.wq"), b.wq);
            mat!(format!("{p}.wk"), b.wk);
            mat!(format!("{p}.wv"), b.wv);
            mat!(format!("{p}.wo"), b.wo);
            vecf!(format!("{p}.ln2_g"), b.ln2_g);
            vecf!(format!("{p}.ln2_b"), b.ln2_b);
            mat!(format!("{p}.w1"), b.w1);
            vecf!(format!("{p}.b1"), b.b1);
            mat!(format!("{p}.w2"), b.w2);
            vecf!(format!("{p}.b2"), b.b2);
        }
        vecf!("dec_lnf_g", self.dec_lnf_g);
        vecf!("dec_lnf_b", self.dec_lnf_b);
        mat!("head_w", self.head_w);
        vecf!("head_b", self.head_b);
        out
    }

    /// Mutable view of the same tensors in the same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("color_emb".to_string(), self.color_emb.as_mut_slice()));
        out.push(("pos_emb".to_string(), self.pos_emb.as_mut_slice()));
        out.push(("cls_emb".to_string(), &mut self.cls_emb));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            let p = format!("enc.{i}");
            out.push((format!("{p}.ln1_g"), &mut b.ln1_g));
            out.push((format!("{p}.ln1_b"), &mut b.ln1_b));
            out.push((format!("{p}.wq"), b.wq.as_mut_slice()));
            out.push((format!("{p}.wk"), b.wk.as_mut_slice()));
            out.push((format!("{p}.wv"), b.wv.as_mut_slice()));
            out.push((format!("{p}.wo"), b.wo.as_mut_slice()));
            out.push((format!("{p}.ln2_g"), &mut b.ln2_g));
            out.push((format!("{p}.ln2_b"), &mut b.ln2_b));
            out.push((format!("{p}.w1"), b.w1.as_mut_slice()));
            out.push((format!("{p}.b1"), &mut b.b1));
            out.push((format!("{p}.w2"), b.w2.as_mut_slice()));
            out.push((format!("{p}.b2"), &mut b.b2));
        }
        out.push(("enc_lnf_g".to_string(), &mut self.enc_lnf_g));
        out.push(("enc_lnf_b".to_string(), &mut self.enc_lnf_b));
        out.push(("score_q".to_string(), self.score_q.as_mut_slice()));
        out.push(("score_t".to_string(), self.score_t.as_mut_slice()));
        out.push(("score_k".to_string(), self.score_k.as_mut_slice()));
        out.push(("proj_w".to_string(), self.proj_w.as_mut_slice()));
        out.push(("proj_b".to_string(), &mut self.proj_b));
        out.push(("tok_emb".to_string(), self.tok_emb.as_mut_slice()));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            let p = format!("dec.{i}");
            out.push((format!("{p}.ln1_g"), &mut b.ln1_g));
            out.push((format!("{p}.ln1_b"), &mut b.ln1_b));
            out.push((format!("{p}.wq"), b.wq.as_mut_slice()));
            out.push((format!("{p}.wk"), b.wk.as_mut_slice()));
            out.push((format!("{p}.wv"), b.wv.as_mut_slice()));
            out.push((format!("{p}.wo"), b.wo.as_mut_slice()));
            out.push((format!("{p}.ln2_g"), &mut b.ln2_g));
            out.push((format!("{p}.ln2_b"), &mut b.ln2_b));
            out.push((format!("{p}.w1"), b.w1.as_mut_slice()));
            out.push((format!("{p}.b1"), &mut b.b1));
            out.push((format!("{p}.w2"), b.w2.as_mut_slice()));
            out.push((format!("{p}.b2"), &mut b.b2));
        }
        out.push(("dec_lnf_g".to_string(), &mut self.dec_lnf_g));
        out.push(("dec_lnf_b".to_string(), &mut self.dec_lnf_b));
        out.push(("head_w".to_string(), self.head_w.as_mut_slice()));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }
}

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_matrix(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v = gelu(*v);
    }
    out
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows() {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Multi-head attention over a full sequence.
///
/// `ids` enables rotary rotation of q/k rows; `None` means no rope
/// (encoder). `causal` masks key positions after the query's sequence
/// index. Returns the attention output and, on request, the per-head
/// pre-softmax logit matrices (unmasked).
fn attention_full(
    a: &Matrix,
    bw: &BlockWeights,
    ids: Option<&PositionIds>,
    rope: &RopeConfig,
    num_heads: usize,
    causal: bool,
    want_logits: bool,
) -> (Matrix, Option<Vec<Matrix>>) {
    let n = a.rows();
    let d = a.cols();
    let hd = d / num_heads;
    let q = a.matmul(&bw.wq);
    let k = a.matmul(&bw.wk);
    let v = a.matmul(&bw.wv);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut logits_out = if want_logits { Some(Vec::with_capacity(num_heads)) } else { None };
    for h in 0..num_heads {
        let lo = h * hd;
        let mut qh = q.col_slice(lo, lo + hd);
        let mut kh = k.col_slice(lo, lo + hd);
        let vh = v.col_slice(lo, lo + hd);
        if let Some(ids) = ids {
            for r in 0..n {
                rotate_in_place(qh.row_mut(r), ids.0[r], rope);
                rotate_in_place(kh.row_mut(r), ids.0[r], rope);
            }
        }
        let logits = qh.matmul(&kh.transpose()).scale(scale);
        if let Some(list) = logits_out.as_mut() {
            list.push(logits.clone());
        }
        let mut probs = logits;
        for i in 0..n {
            let row = probs.row_mut(i);
            if causal {
                for item in row.iter_mut().skip(i + 1) {
                    *item = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let ctxh = probs.matmul(&vh);
        ctx.set_col_slice(lo, &ctxh);
    }
    (ctx.matmul(&bw.wo), logits_out)
}

fn mlp_forward(h: &Matrix, bw: &BlockWeights) -> Matrix {
    let mut u = h.matmul(&bw.w1);
    add_bias(&mut u, &bw.b1);
    let g = gelu_matrix(&u);
    let mut out = g.matmul(&bw.w2);
    add_bias(&mut out, &bw.b2);
    out
}

/// One pre-norm block: `h + Attn(LN1(h))` then `h + MLP(LN2(h))`.
fn block_forward(
    h: &Matrix,
    bw: &BlockWeights,
    ids: Option<&PositionIds>,
    rope: &RopeConfig,
    num_heads: usize,
    causal: bool,
    want_logits: bool,
) -> (Matrix, Option<Vec<Matrix>>) {
    let a = layer_norm(h, &bw.ln1_g, &bw.ln1_b, LN_EPS);
    let (attn, logits) = attention_full(&a, bw, ids, rope, num_heads, causal, want_logits);
    let mut mid = h.clone();
    mid.add_assign(&attn);
    let m = layer_norm(&mid, &bw.ln2_g, &bw.ln2_b, LN_EPS);
    let mlp = mlp_forward(&m, bw);
    let mut out = mid;
    out.add_assign(&mlp);
    (out, logits)
}

/// Per-layer token features, `layers[0]` being embeddings + positional.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// One `(N+1) x d` matrix per layer; row 0 is CLS.
    pub layers: Vec<Matrix>,
}

/// Output of the vision encoder for one image.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Final visual token features (encoder space, post final LN), `N x d`.
    pub visual: Matrix,
    /// Score-head query projected from the final CLS feature.
    pub cls_query: Vec<f64>,
    pub trace: EncoderTrace,
}

/// Encode a `G x G` grid of color ids into visual tokens.
pub fn encode_image(image: &[usize], w: &ModelWeights, cfg: &ModelConfig) -> Result<EncodeOutput> {
    let n = cfg.num_visual();
    if image.len() != n {
        return Err(Error::invalid(format!(
            "image has {} cells, expected {}",
            image.len(),
            n
        )));
    }
    let d = cfg.d_model;
    let mut h = Matrix::zeros(n + 1, d);
    h.row_mut(0).copy_from_slice(&w.cls_emb);
    for (i, &c) in image.iter().enumerate() {
        if c >= cfg.num_colors {
            return Err(Error::invalid(format!("color {c} out of range (<{})", cfg.num_colors)));
        }
        let row = h.row_mut(i + 1);
        for (out, (ce, pe)) in row
            .iter_mut()
            .zip(w.color_emb.row(c).iter().zip(w.pos_emb.row(i)))
        {
            *out = ce + pe;
        }
    }
    let mut trace = vec![h.clone()];
    for bw in &w.enc_blocks {
        let (next, _) = block_forward(&h, bw, None, &cfg.rope, cfg.num_heads, false, false);
        h = next;
        trace.push(h.clone());
    }
    let out = layer_norm(&h, &w.enc_lnf_g, &w.enc_lnf_b, LN_EPS);
    let mut visual = Matrix::zeros(n, d);
    for i in 0..n {
        visual.row_mut(i).copy_from_slice(out.row(i + 1));
    }
    let cls_query = Matrix::from_vec(1, d, out.row(0).to_vec()).matmul(&w.score_q);
    Ok(EncodeOutput {
        visual,
        cls_query: cls_query.as_slice().to_vec(),
        trace: EncoderTrace { layers: trace },
    })
}

/// Per-layer cached keys/values and the position IDs each key was
/// rotated with. Keys are stored post-rotation; append-only.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct KVCache {
    pub layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn max_id(&self) -> Option<usize> {
        self.layers.first().and_then(|l| l.ids.iter().copied().max())
    }
}

/// State handed from prefill to greedy generation.
#[derive(Clone, Debug)]
pub struct PrefilledState {
    pub last_logits: Vec<f64>,
    pub cache: KVCache,
    /// Position ID the next generated token will receive.
    pub next_id: usize,
    /// Per-head pre-softmax logits of the first decoder layer, if traced.
    pub first_layer_logits: Option<Vec<Matrix>>,
}

/// Decoder input embeddings plus the position ID of every row.
#[derive(Clone, Debug)]
pub struct PromptEmbedding {
    pub x: Matrix,
    pub ids: PositionIds,
}

/// Build the decoder input for `[BOS] visual text`: projector on the
/// visual rows, token embeddings elsewhere, explicit position IDs.
pub fn embed_prompt(
    visual: &Matrix,
    visual_ids: &PositionIds,
    text_tokens: &[usize],
    text_ids: &PositionIds,
    w: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<PromptEmbedding> {
    cfg.validate()?;
    if visual.rows() != visual_ids.len() {
        return Err(Error::shape(format!(
            "prefill: {} visual tokens but {} visual ids",
            visual.rows(),
            visual_ids.len()
        )));
    }
    if text_tokens.len() != text_ids.len() {
        return Err(Error::shape(format!(
            "prefill: {} text tokens but {} text ids",
            text_tokens.len(),
            text_ids.len()
        )));
    }
    let d = cfg.d_model;
    let nv = visual.rows();
    let n = 1 + nv + text_tokens.len();
    let mut ids = Vec::with_capacity(n);
    ids.push(0usize);
    ids.extend_from_slice(&visual_ids.0);
    ids.extend_from_slice(&text_ids.0);
    for &id in &ids {
        if id >= cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "position id {id} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
    }
    let ids = PositionIds(ids);

    let mut x = Matrix::zeros(n, d);
    x.row_mut(0).copy_from_slice(w.tok_emb.row(cfg.bos_token()));
    let mut vproj = visual.matmul(&w.proj_w);
    add_bias(&mut vproj, &w.proj_b);
    for i in 0..nv {
        x.row_mut(1 + i).copy_from_slice(vproj.row(i));
    }
    for (t, &tok) in text_tokens.iter().enumerate() {
        if tok >= cfg.vocab_size {
            return Err(Error::invalid(format!("token {tok} out of vocab")));
        }
        x.row_mut(1 + nv + t).copy_from_slice(w.tok_emb.row(tok));
    }
    Ok(PromptEmbedding { x, ids })
}

/// Run the decoder stack over an embedded prompt, filling a KV cache.
pub fn prefill_embedded(
    prompt: &PromptEmbedding,
    w: &ModelWeights,
    cfg: &ModelConfig,
    trace_first_layer: bool,
) -> Result<PrefilledState> {
    let n = prompt.x.rows();
    let d = cfg.d_model;
    let ids = &prompt.ids;
    let mut cache = KVCache { layers: Vec::with_capacity(cfg.decoder_layers) };
    let mut first_layer_logits = None;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut h = prompt.x.clone();
    for (li, bw) in w.dec_blocks.iter().enumerate() {
        let a = layer_norm(&h, &bw.ln1_g, &bw.ln1_b, LN_EPS);
        let mut q_rot = a.matmul(&bw.wq);
        let mut k_rot = a.matmul(&bw.wk);
        let v = a.matmul(&bw.wv);
        for r in 0..n {
            for head in 0..cfg.num_heads {
                let lo = head * hd;
                rotate_in_place(&mut q_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
                rotate_in_place(&mut k_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
            }
        }
        let mut ctx = Matrix::zeros(n, d);
        let want = trace_first_layer && li == 0;
        let mut logits_trace = if want { Some(Vec::with_capacity(cfg.num_heads)) } else { None };
        for head in 0..cfg.num_heads {
            let lo = head * hd;
            let qh = q_rot.col_slice(lo, lo + hd);
            let kh = k_rot.col_slice(lo, lo + hd);
            let vh = v.col_slice(lo, lo + hd);
            let logits = qh.matmul(&kh.transpose()).scale(scale);
            if let Some(list) = logits_trace.as_mut() {
                list.push(logits.clone());
            }
            let mut probs = logits;
            for i in 0..n {
                let row = probs.row_mut(i);
                for item in row.iter_mut().skip(i + 1) {
                    *item = f64::NEG_INFINITY;
                }
                softmax_in_place(row);
            }
            ctx.set_col_slice(lo, &probs.matmul(&vh));
        }
        if want {
            first_layer_logits = logits_trace;
        }
        cache.layers.push(LayerCache { keys: k_rot, values: v, ids: ids.0.clone() });
        let attn = ctx.matmul(&bw.wo);
        h.add_assign(&attn);
        let m = layer_norm(&h, &bw.ln2_g, &bw.ln2_b, LN_EPS);
        let mlp = mlp_forward(&m, bw);
        h.add_assign(&mlp);
    }
    let out = layer_norm(&h, &w.dec_lnf_g, &w.dec_lnf_b, LN_EPS);
    let last = Matrix::from_vec(1, d, out.row(n - 1).to_vec());
    let mut logits = last.matmul(&w.head_w);
    add_bias(&mut logits, &w.head_b);
    let next_id = 1 + ids.0.iter().copied().max().unwrap_or(0);
    Ok(PrefilledState {
        last_logits: logits.as_slice().to_vec(),
        cache,
        next_id,
        first_layer_logits,
    })
}

/// Causal prefill over `[BOS] visual text` with explicit position IDs.
///
/// `visual` is in encoder space; the projector is applied here. Text
/// tokens cover the prompt and any already-generated continuation.
pub fn prefill(
    visual: &Matrix,
    visual_ids: &PositionIds,
    text_tokens: &[usize],
    text_ids: &PositionIds,
    w: &ModelWeights,
    cfg: &ModelConfig,
    trace_first_layer: bool,
) -> Result<PrefilledState> {
    let prompt = embed_prompt(visual, visual_ids, text_tokens, text_ids, w, cfg)?;
    prefill_embedded(&prompt, w, cfg, trace_first_layer)
}

/// Append one token to the cache and return the next-token logits.
pub fn decode_step(
    token: usize,
    cache: &mut KVCache,
    next_id: usize,
    w: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    if token >= cfg.vocab_size {
        return Err(Error::invalid(format!("token {token} out of vocab")));
    }
    if next_id >= cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "position id {next_id} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(max) = cache.max_id() {
        if next_id <= max {
            return Err(Error::invalid(format!(
                "non-monotone position id {next_id} (cache max {max})"
            )));
        }
    }
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = Matrix::from_vec(1, d, w.tok_emb.row(token).to_vec());
    for (li, bw) in w.dec_blocks.iter().enumerate() {
        let a = layer_norm(&x, &bw.ln1_g, &bw.ln1_b, LN_EPS);
        let q = a.matmul(&bw.wq);
        let k = a.matmul(&bw.wk);
        let v = a.matmul(&bw.wv);
        let mut k_rot = k.clone();
        let mut q_rot = q.clone();
        for head in 0..cfg.num_heads {
            let lo = head * hd;
            rotate_in_place(&mut k_rot.row_mut(0)[lo..lo + hd], next_id, &cfg.rope);
            rotate_in_place(&mut q_rot.row_mut(0)[lo..lo + hd], next_id, &cfg.rope);
        }
        let layer = &mut cache.layers[li];
        layer.keys = layer.keys.vstack(&k_rot);
        layer.values = layer.values.vstack(&v);
        layer.ids.push(next_id);
        let mut ctx = Matrix::zeros(1, d);
        for head in 0..cfg.num_heads {
            let lo = head * hd;
            let qh = q_rot.col_slice(lo, lo + hd);
            let kh = layer.keys.col_slice(lo, lo + hd);
            let vh = layer.values.col_slice(lo, lo + hd);
            let mut logits = qh.matmul(&kh.transpose()).scale(scale);
            softmax_in_place(logits.row_mut(0));
            let ctxh = logits.matmul(&vh);
            ctx.set_col_slice(lo, &ctxh);
        }
        let attn = ctx.matmul(&bw.wo);
        x.add_assign(&attn);
        let m = layer_norm(&x, &bw.ln2_g, &bw.ln2_b, LN_EPS);
        let mlp = mlp_forward(&m, bw);
        x.add_assign(&mlp);
    }
    let out = layer_norm(&x, &w.dec_lnf_g, &w.dec_lnf_b, LN_EPS);
    let mut logits = out.matmul(&w.head_w);
    add_bias(&mut logits, &w.head_b);
    Ok(logits.as_slice().to_vec())
}

/// Greedy decoding until the end token or `max_new` tokens.
///
/// Generated tokens receive position IDs continuing from the state's
/// `next_id`, i.e. the numbering the prompt layout established.
pub fn generate_greedy(
    state: &mut PrefilledState,
    max_new: usize,
    w: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tok = argmax(&state.last_logits)?;
        out.push(tok);
        if tok == cfg.end_token() {
            break;
        }
        if out.len() == max_new {
            break;
        }
        state.last_logits = decode_step(tok, &mut state.cache, state.next_id, w, cfg)?;
        state.next_id += 1;
    }
    Ok(out)
}

/// Full pruning pipeline: encode, score, select, gather, realign, prefill.
///
/// Text position IDs follow the alignment mode: `gap` keeps the
/// unpruned offsets (text starts at `1 + N`), `shifted` compacts them to
/// start right after the survivors.
#[allow(clippy::too_many_arguments)]
pub fn prefill_with_pruning(
    image: &[usize],
    text_tokens: &[usize],
    strategy: Strategy,
    ratio: f64,
    alignment: Alignment,
    rng: &mut Rng,
    w: &ModelWeights,
    cfg: &ModelConfig,
    trace_first_layer: bool,
) -> Result<(PrefilledState, PruneSelection)> {
    let enc = encode_image(image, w, cfg)?;
    let n = cfg.num_visual();
    let base = cfg.visual_base();

    if strategy == Strategy::None {
        let state = prefill(
            &enc.visual,
            &sequential_ids(base, n),
            text_tokens,
            &sequential_ids(cfg.text_base(), text_tokens.len()),
            w,
            cfg,
            trace_first_layer,
        )?;
        let sel = PruneSelection {
            strategy,
            ratio: 1.0,
            indices: (0..n).collect(),
            alignment: Alignment::Gap,
        };
        return Ok((state, sel));
    }

    let scores = |rng: &mut Rng| -> Result<Option<ScoreVector>> {
        Ok(match strategy {
            Strategy::ClsVisual => {
                let keys = enc.visual.matmul(&w.score_k);
                Some(score_cls_visual(&enc.cls_query, &keys, cfg.d_model)?)
            }
            Strategy::TextVisual => {
                let keys = enc.visual.matmul(&w.score_k);
                let mut tq = Matrix::zeros(text_tokens.len(), cfg.d_model);
                for (i, &tok) in text_tokens.iter().enumerate() {
                    tq.row_mut(i).copy_from_slice(w.tok_emb.row(tok));
                }
                let tq = tq.matmul(&w.score_t);
                Some(score_text_visual(&tq, &keys, cfg.d_model)?)
            }
            Strategy::Random => Some(score_random(n, rng)),
            Strategy::Spatial | Strategy::None => None,
        })
    };

    match alignment {
        Alignment::Permuted => {
            // isolation experiment: reorder the full sequence, no removal
            if (ratio - 1.0).abs() > 1e-12 {
                return Err(Error::config(
                    "permuted alignment keeps all tokens; ratio must be 1.0",
                ));
            }
            let s = scores(rng)?.ok_or_else(|| {
                Error::config(format!("strategy '{strategy}' has no scores to permute by"))
            })?;
            let (vperm, ids0, perm) = permute_by_score(&enc.visual, &s)?;
            let visual_ids = PositionIds(ids0.0.iter().map(|&i| base + i).collect());
            let state = prefill(
                &vperm,
                &visual_ids,
                text_tokens,
                &sequential_ids(cfg.text_base(), text_tokens.len()),
                w,
                cfg,
                trace_first_layer,
            )?;
            let sel = PruneSelection { strategy, ratio, indices: perm, alignment };
            Ok((state, sel))
        }
        Alignment::Gap | Alignment::Shifted => {
            let indices = match strategy {
                Strategy::Spatial => select_spatial(n, ratio)?,
                _ => {
                    let s = scores(rng)?.expect("scored strategy");
                    let k = retained_count(n, ratio)?;
                    topk_select(&s, k)?
                }
            };
            let gathered = gather(&enc.visual, &indices)?;
            let k = indices.len();
            let (visual_ids, text_ids) = match alignment {
                Alignment::Gap => (
                    align_gap(&indices, base),
                    sequential_ids(cfg.text_base(), text_tokens.len()),
                ),
                Alignment::Shifted => (
                    align_shifted(&indices, base),
                    sequential_ids(base + k, text_tokens.len()),
                ),
                Alignment::Permuted => unreachable!(),
            };
            let state =
                prefill(&gathered, &visual_ids, text_tokens, &text_ids, w, cfg, trace_first_layer)?;
            let sel = PruneSelection { strategy, ratio, indices, alignment };
            Ok((state, sel))
        }
    }
}
