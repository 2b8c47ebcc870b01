//! Training loop for the toy model: hand-written reverse-mode gradients
//! and Adam, fully deterministic for a given seed.
//!
//! The loss per example is
//!
//! ```text
//! CE(answer | prompt) + CE(end | prompt+answer)
//!   + w_s * [CE(cls scores -> target cell) + CE(text scores -> target cell)]
//! ```
//!
//! The language-model terms use the unpruned layout. The salience terms
//! supervise the score head so its attention singles out the referred
//! cell, playing the role CLIP pretraining plays for real encoders
//! (whose CLS attention arrives already object-salient).

use serde::{Deserialize, Serialize};

use crate::bench::data::RecExample;
use crate::bench::eval::{evaluate, EvalOptions};
use crate::error::{Error, Result};
use crate::math::{dot, softmax_in_place, Matrix, Rng};
use crate::model::{gelu_deriv, gelu_matrix, BlockWeights, ModelConfig, ModelWeights, LN_EPS};
use crate::prune::{Alignment, Strategy};
use crate::rope::{rotate_in_place, rotate_in_place_inverse, PositionIds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the score-head supervision terms.
    pub salience_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            salience_weight: 2.0,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
}

// ---------------------------------------------------------------------
// layer norm with cached statistics
// ---------------------------------------------------------------------

struct LnActs {
    xhat: Matrix,
    rstd: Vec<f64>,
    out: Matrix,
}

fn ln_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> LnActs {
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rs;
        }
        rstd.push(rs);
    }
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for (v, (g, b)) in out.row_mut(r).iter_mut().zip(gain.iter().zip(bias)) {
            *v = *v * g + b;
        }
    }
    LnActs { xhat, rstd, out }
}

fn ln_backward(
    dout: &Matrix,
    acts: &LnActs,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Matrix {
    let rows = dout.rows();
    let cols = dout.cols();
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let do_r = dout.row(r);
        let xh = acts.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; cols];
        for j in 0..cols {
            dgain[j] += do_r[j] * xh[j];
            dbias[j] += do_r[j];
            dxhat[j] = do_r[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        let n = cols as f64;
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let dx_r = dx.row_mut(r);
        for j in 0..cols {
            dx_r[j] = acts.rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

// ---------------------------------------------------------------------
// transformer block with cached activations
// ---------------------------------------------------------------------

struct BlockActs {
    ln1: LnActs,
    q_rot: Matrix,
    k_rot: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    ln2: LnActs,
    u: Matrix,
    g: Matrix,
    h_out: Matrix,
}

fn block_forward_acts(
    h: &Matrix,
    bw: &BlockWeights,
    ids: Option<&PositionIds>,
    cfg: &ModelConfig,
    causal: bool,
) -> BlockActs {
    let n = h.rows();
    let d = h.cols();
    let heads = cfg.num_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let ln1 = ln_forward(h, &bw.ln1_g, &bw.ln1_b);
    let mut q_rot = ln1.out.matmul(&bw.wq);
    let mut k_rot = ln1.out.matmul(&bw.wk);
    let v = ln1.out.matmul(&bw.wv);
    if let Some(ids) = ids {
        for r in 0..n {
            for head in 0..heads {
                let lo = head * hd;
                rotate_in_place(&mut q_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
                rotate_in_place(&mut k_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
            }
        }
    }
    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Matrix::zeros(n, d);
    for head in 0..heads {
        let lo = head * hd;
        let qh = q_rot.col_slice(lo, lo + hd);
        let kh = k_rot.col_slice(lo, lo + hd);
        let vh = v.col_slice(lo, lo + hd);
        let mut p = qh.matmul(&kh.transpose()).scale(scale);
        for i in 0..n {
            let row = p.row_mut(i);
            if causal {
                for item in row.iter_mut().skip(i + 1) {
                    *item = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let ctxh = p.matmul(&vh);
        ctx.set_col_slice(lo, &ctxh);
        probs.push(p);
    }
    let attn_out = ctx.matmul(&bw.wo);
    let mut h_mid = h.clone();
    h_mid.add_assign(&attn_out);

    let ln2 = ln_forward(&h_mid, &bw.ln2_g, &bw.ln2_b);
    let mut u = ln2.out.matmul(&bw.w1);
    for r in 0..n {
        for (uv, b) in u.row_mut(r).iter_mut().zip(&bw.b1) {
            *uv += b;
        }
    }
    let g = gelu_matrix(&u);
    let mut mlp = g.matmul(&bw.w2);
    for r in 0..n {
        for (mv, b) in mlp.row_mut(r).iter_mut().zip(&bw.b2) {
            *mv += b;
        }
    }
    let mut h_out = h_mid.clone();
    h_out.add_assign(&mlp);

    BlockActs { ln1, q_rot, k_rot, v, probs, ctx, ln2, u, g, h_out }
}

fn colsum_into(m: &Matrix, out: &mut [f64]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

/// Returns the gradient with respect to the block input.
fn block_backward(
    dh_out: &Matrix,
    acts: &BlockActs,
    bw: &BlockWeights,
    grads: &mut BlockWeights,
    ids: Option<&PositionIds>,
    cfg: &ModelConfig,
) -> Matrix {
    let n = dh_out.rows();
    let d = dh_out.cols();
    let heads = cfg.num_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch
    let dmlp = dh_out; // residual: also flows to h_mid below
    let dg = dmlp.matmul(&bw.w2.transpose());
    grads.w2.add_assign(&acts.g.transpose().matmul(dmlp));
    colsum_into(dmlp, &mut grads.b2);
    let mut du = dg;
    for r in 0..n {
        let urow = acts.u.row(r).to_vec();
        for (dv, uv) in du.row_mut(r).iter_mut().zip(urow) {
            *dv *= gelu_deriv(uv);
        }
    }
    grads.w1.add_assign(&acts.ln2.out.transpose().matmul(&du));
    colsum_into(&du, &mut grads.b1);
    let dm = du.matmul(&bw.w1.transpose());
    let dh_mid_ln = ln_backward(&dm, &acts.ln2, &bw.ln2_g, &mut grads.ln2_g, &mut grads.ln2_b);
    let mut dh_mid = dh_out.clone();
    dh_mid.add_assign(&dh_mid_ln);

    // attention branch
    let dattn = &dh_mid; // residual also passes dh_mid to the input below
    let dctx = dattn.matmul(&bw.wo.transpose());
    grads.wo.add_assign(&acts.ctx.transpose().matmul(dattn));

    let mut dq_rot = Matrix::zeros(n, d);
    let mut dk_rot = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for head in 0..heads {
        let lo = head * hd;
        let dctxh = dctx.col_slice(lo, lo + hd);
        let p = &acts.probs[head];
        let vh = acts.v.col_slice(lo, lo + hd);
        let qh = acts.q_rot.col_slice(lo, lo + hd);
        let kh = acts.k_rot.col_slice(lo, lo + hd);

        let dp = dctxh.matmul(&vh.transpose());
        dv.set_col_slice(lo, &p.transpose().matmul(&dctxh));
        // softmax backward per row; masked entries have p = 0 so their
        // gradient vanishes automatically
        let mut dlogits = Matrix::zeros(n, n);
        for i in 0..n {
            let pi = p.row(i);
            let dpi = dp.row(i);
            let s = dot(pi, dpi);
            let dl = dlogits.row_mut(i);
            for j in 0..n {
                dl[j] = pi[j] * (dpi[j] - s);
            }
        }
        dq_rot.set_col_slice(lo, &dlogits.matmul(&kh).scale(scale));
        dk_rot.set_col_slice(lo, &dlogits.transpose().matmul(&qh).scale(scale));
    }
    if let Some(ids) = ids {
        for r in 0..n {
            for head in 0..heads {
                let lo = head * hd;
                rotate_in_place_inverse(&mut dq_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
                rotate_in_place_inverse(&mut dk_rot.row_mut(r)[lo..lo + hd], ids.0[r], &cfg.rope);
            }
        }
    }
    let a = &acts.ln1.out;
    grads.wq.add_assign(&a.transpose().matmul(&dq_rot));
    grads.wk.add_assign(&a.transpose().matmul(&dk_rot));
    grads.wv.add_assign(&a.transpose().matmul(&dv));
    let mut da = dq_rot.matmul(&bw.wq.transpose());
    da.add_assign(&dk_rot.matmul(&bw.wk.transpose()));
    da.add_assign(&dv.matmul(&bw.wv.transpose()));
    let dh_in_ln = ln_backward(&da, &acts.ln1, &bw.ln1_g, &mut grads.ln1_g, &mut grads.ln1_b);
    let mut dh_in = dh_mid;
    dh_in.add_assign(&dh_in_ln);
    dh_in
}

// ---------------------------------------------------------------------
// full example forward/backward
// ---------------------------------------------------------------------

struct ScoreActs {
    query: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
}

/// Scaled-dot softmax scores of `query` against `keys` with CE toward
/// `target`.
fn score_forward(query: &[f64], keys: &Matrix, target: usize) -> ScoreActs {
    let d = query.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs: Vec<f64> = (0..keys.rows()).map(|i| dot(query, keys.row(i)) * scale).collect();
    softmax_in_place(&mut probs);
    let loss = -probs[target].max(1e-300).ln();
    ScoreActs { query: query.to_vec(), probs, loss }
}

/// Backward of [`score_forward`]: accumulates `dquery` and `dkeys`.
fn score_backward(
    acts: &ScoreActs,
    keys: &Matrix,
    target: usize,
    weight: f64,
    dquery: &mut [f64],
    dkeys: &mut Matrix,
) {
    let d = acts.query.len();
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..keys.rows() {
        let mut dl = acts.probs[i] * weight;
        if i == target {
            dl -= weight;
        }
        let dl = dl * scale;
        for j in 0..d {
            dquery[j] += dl * keys.get(i, j);
            dkeys.set(i, j, dkeys.get(i, j) + dl * acts.query[j]);
        }
    }
}

pub(crate) struct ExampleLoss {
    pub total: f64,
}

/// Forward + backward for one example; gradients accumulate into `grads`.
/// Pass `None` for `grads` to get the loss only.
pub(crate) fn example_forward_backward(
    ex: &RecExample,
    w: &ModelWeights,
    cfg: &ModelConfig,
    salience_weight: f64,
    mut grads: Option<&mut ModelWeights>,
) -> Result<ExampleLoss> {
    let n = cfg.num_visual();
    let d = cfg.d_model;
    ex.check(cfg)?;

    // ---- encoder forward
    let mut h = Matrix::zeros(n + 1, d);
    h.row_mut(0).copy_from_slice(&w.cls_emb);
    for (i, &c) in ex.image.iter().enumerate() {
        let row = h.row_mut(i + 1);
        for (o, (ce, pe)) in row.iter_mut().zip(w.color_emb.row(c).iter().zip(w.pos_emb.row(i))) {
            *o = ce + pe;
        }
    }
    let mut enc_acts = Vec::with_capacity(cfg.encoder_layers);
    let mut cur = h;
    for bw in &w.enc_blocks {
        let acts = block_forward_acts(&cur, bw, None, cfg, false);
        cur = acts.h_out.clone();
        enc_acts.push(acts);
    }
    let enc_lnf = ln_forward(&cur, &w.enc_lnf_g, &w.enc_lnf_b);
    let mut visual = Matrix::zeros(n, d);
    for i in 0..n {
        visual.row_mut(i).copy_from_slice(enc_lnf.out.row(i + 1));
    }
    let cls_final = enc_lnf.out.row(0).to_vec();

    // ---- score head forward
    let keys = visual.matmul(&w.score_k);
    let cls_query = Matrix::from_vec(1, d, cls_final.clone()).matmul(&w.score_q);
    let cls_score = score_forward(cls_query.row(0), &keys, ex.answer_cell);
    let qtok = cfg.color_token(ex.query_color);
    let text_query = Matrix::from_vec(1, d, w.tok_emb.row(qtok).to_vec()).matmul(&w.score_t);
    let text_score = score_forward(text_query.row(0), &keys, ex.answer_cell);

    // ---- decoder forward (teacher forced)
    let ans_tok = cfg.cell_token(ex.answer_cell);
    let end_tok = cfg.end_token();
    let seq_tokens = [cfg.bos_token(), qtok, ans_tok]; // BOS, text, answer
    let s = n + 3;
    let mut x0 = Matrix::zeros(s, d);
    x0.row_mut(0).copy_from_slice(w.tok_emb.row(seq_tokens[0]));
    let mut vproj = visual.matmul(&w.proj_w);
    for i in 0..n {
        for (v, b) in vproj.row_mut(i).iter_mut().zip(&w.proj_b) {
            *v += b;
        }
        x0.row_mut(1 + i).copy_from_slice(vproj.row(i));
    }
    x0.row_mut(1 + n).copy_from_slice(w.tok_emb.row(seq_tokens[1]));
    x0.row_mut(2 + n).copy_from_slice(w.tok_emb.row(seq_tokens[2]));
    let ids = PositionIds((0..s).collect());

    let mut dec_acts = Vec::with_capacity(cfg.decoder_layers);
    let mut cur = x0;
    for bw in &w.dec_blocks {
        let acts = block_forward_acts(&cur, bw, Some(&ids), cfg, true);
        cur = acts.h_out.clone();
        dec_acts.push(acts);
    }
    let dec_lnf = ln_forward(&cur, &w.dec_lnf_g, &w.dec_lnf_b);
    let logits = {
        let mut l = dec_lnf.out.matmul(&w.head_w);
        for r in 0..s {
            for (v, b) in l.row_mut(r).iter_mut().zip(&w.head_b) {
                *v += b;
            }
        }
        l
    };

    // LM loss at the text position (predict answer) and the answer
    // position (predict end)
    let pos_text = 1 + n;
    let pos_ans = 2 + n;
    let mut probs_text = logits.row(pos_text).to_vec();
    softmax_in_place(&mut probs_text);
    let mut probs_ans = logits.row(pos_ans).to_vec();
    softmax_in_place(&mut probs_ans);
    let lm_loss = -probs_text[ans_tok].max(1e-300).ln() - probs_ans[end_tok].max(1e-300).ln();
    let sal_loss = cls_score.loss + text_score.loss;
    let total = lm_loss + salience_weight * sal_loss;
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {total}")));
    }

    let Some(grads) = grads.as_deref_mut() else {
        return Ok(ExampleLoss { total });
    };

    // ---- backward: LM head
    let mut dlogits = Matrix::zeros(s, cfg.vocab_size);
    for (j, p) in probs_text.iter().enumerate() {
        dlogits.set(pos_text, j, p - if j == ans_tok { 1.0 } else { 0.0 });
    }
    for (j, p) in probs_ans.iter().enumerate() {
        dlogits.set(pos_ans, j, p - if j == end_tok { 1.0 } else { 0.0 });
    }
    grads.head_w.add_assign(&dec_lnf.out.transpose().matmul(&dlogits));
    colsum_into(&dlogits, &mut grads.head_b);
    let dh = dlogits.matmul(&w.head_w.transpose());
    let mut dcur = ln_backward(&dh, &dec_lnf, &w.dec_lnf_g, &mut grads.dec_lnf_g, &mut grads.dec_lnf_b);
    for (acts, (bw, gb)) in dec_acts
        .iter()
        .rev()
        .zip(w.dec_blocks.iter().rev().zip(grads.dec_blocks.iter_mut().rev()))
    {
        dcur = block_backward(&dcur, acts, bw, gb, Some(&ids), cfg);
    }
    // split decoder input gradient into embeddings and projector
    let dx0 = dcur;
    for (row, tok) in [(0usize, seq_tokens[0]), (1 + n, seq_tokens[1]), (2 + n, seq_tokens[2])] {
        for (ge, dv) in grads.tok_emb.row_mut(tok).iter_mut().zip(dx0.row(row)) {
            *ge += dv;
        }
    }
    let mut dvproj = Matrix::zeros(n, d);
    for i in 0..n {
        dvproj.row_mut(i).copy_from_slice(dx0.row(1 + i));
    }
    grads.proj_w.add_assign(&visual.transpose().matmul(&dvproj));
    colsum_into(&dvproj, &mut grads.proj_b);
    let mut dvisual = dvproj.matmul(&w.proj_w.transpose());

    // ---- backward: score head
    let mut dkeys = Matrix::zeros(n, d);
    let mut dcls_query = vec![0.0; d];
    let mut dtext_query = vec![0.0; d];
    score_backward(&cls_score, &keys, ex.answer_cell, salience_weight, &mut dcls_query, &mut dkeys);
    score_backward(&text_score, &keys, ex.answer_cell, salience_weight, &mut dtext_query, &mut dkeys);
    // keys = visual . score_k
    grads.score_k.add_assign(&visual.transpose().matmul(&dkeys));
    dvisual.add_assign(&dkeys.matmul(&w.score_k.transpose()));
    // cls_query = cls_final . score_q
    let dcq = Matrix::from_vec(1, d, dcls_query);
    grads
        .score_q
        .add_assign(&Matrix::from_vec(1, d, cls_final.clone()).transpose().matmul(&dcq));
    let dcls_final = dcq.matmul(&w.score_q.transpose());
    // text_query = tok_emb[qtok] . score_t
    let dtq = Matrix::from_vec(1, d, dtext_query);
    grads
        .score_t
        .add_assign(&Matrix::from_vec(1, d, w.tok_emb.row(qtok).to_vec()).transpose().matmul(&dtq));
    let dtext_emb = dtq.matmul(&w.score_t.transpose());
    for (ge, dv) in grads.tok_emb.row_mut(qtok).iter_mut().zip(dtext_emb.row(0)) {
        *ge += dv;
    }

    // ---- backward: encoder
    let mut denc_out = Matrix::zeros(n + 1, d);
    denc_out.row_mut(0).copy_from_slice(dcls_final.row(0));
    for i in 0..n {
        denc_out.row_mut(i + 1).copy_from_slice(dvisual.row(i));
    }
    let mut dcur =
        ln_backward(&denc_out, &enc_lnf, &w.enc_lnf_g, &mut grads.enc_lnf_g, &mut grads.enc_lnf_b);
    for (acts, (bw, gb)) in enc_acts
        .iter()
        .rev()
        .zip(w.enc_blocks.iter().rev().zip(grads.enc_blocks.iter_mut().rev()))
    {
        dcur = block_backward(&dcur, acts, bw, gb, None, cfg);
    }
    for (ge, dv) in grads.cls_emb.iter_mut().zip(dcur.row(0)) {
        *ge += dv;
    }
    for (i, &c) in ex.image.iter().enumerate() {
        for (j, dv) in dcur.row(i + 1).iter().enumerate() {
            grads.color_emb.set(c, j, grads.color_emb.get(c, j) + dv);
            grads.pos_emb.set(i, j, grads.pos_emb.get(i, j) + dv);
        }
    }

    Ok(ExampleLoss { total })
}

// ---------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------

struct Adam {
    m: ModelWeights,
    v: ModelWeights,
    t: u64,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Adam { m: ModelWeights::zeros_like(cfg), v: ModelWeights::zeros_like(cfg), t: 0 }
    }

    fn step(&mut self, w: &mut ModelWeights, grads: &ModelWeights, tc: &TrainConfig) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - tc.adam_beta1.powf(t);
        let bc2 = 1.0 - tc.adam_beta2.powf(t);
        let mut wt = w.tensors_mut();
        let gt = grads.tensors();
        let mut mt = self.m.tensors_mut();
        let mut vt = self.v.tensors_mut();
        for i in 0..wt.len() {
            debug_assert_eq!(wt[i].0, gt[i].0);
            let wv = &mut wt[i].1;
            let gv = gt[i].3;
            let mv = &mut mt[i].1;
            let vv = &mut vt[i].1;
            for j in 0..wv.len() {
                mv[j] = tc.adam_beta1 * mv[j] + (1.0 - tc.adam_beta1) * gv[j];
                vv[j] = tc.adam_beta2 * vv[j] + (1.0 - tc.adam_beta2) * gv[j] * gv[j];
                let mhat = mv[j] / bc1;
                let vhat = vv[j] / bc2;
                wv[j] -= tc.learning_rate * mhat / (vhat.sqrt() + tc.adam_eps);
            }
        }
    }
}

fn zero_grads(g: &mut ModelWeights) {
    for (_, slot) in g.tensors_mut() {
        slot.fill(0.0);
    }
}

/// Train on the unpruned layout; deterministic given the seed.
pub fn train_model(
    train: &[RecExample],
    val: &[RecExample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(ModelWeights, TrainSummary)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    cfg.validate()?;
    let mut rng = Rng::new(tc.seed);
    let mut weights = ModelWeights::init(cfg, &mut rng);
    let mut grads = ModelWeights::zeros_like(cfg);
    let mut adam = Adam::new(cfg);
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size.max(1)) {
            zero_grads(&mut grads);
            let mut batch_loss = 0.0;
            for &i in batch {
                let l = example_forward_backward(
                    &train[i],
                    &weights,
                    cfg,
                    tc.salience_weight,
                    Some(&mut grads),
                )?;
                batch_loss += l.total;
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, slot) in grads.tensors_mut() {
                for v in slot.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut weights, &grads, tc);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("epoch loss {mean}")));
        }
        epoch_losses.push(mean);
    }
    let opts = EvalOptions::default();
    let final_train_accuracy = evaluate(
        &weights,
        cfg,
        &train[..train.len().min(500)],
        Strategy::None,
        1.0,
        Alignment::Gap,
        &opts,
    )?;
    let final_val_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        evaluate(&weights, cfg, val, Strategy::None, 1.0, Alignment::Gap, &opts)?
    };
    Ok((weights, TrainSummary { epoch_losses, final_train_accuracy, final_val_accuracy }))
}
