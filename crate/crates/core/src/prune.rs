//! Score computation, top-k token selection, and position-ID alignment.
//!
//! Pruning reduces a visual token sequence of length `N` to
//! `k = max(1, floor(N*r))` tokens chosen by a score function, then
//! assigns the survivors position IDs in one of three modes:
//!
//! * `gap` — every survivor keeps its pre-pruning ID, so relative
//!   distances between retained tokens (and to the text that follows)
//!   are unchanged;
//! * `shifted` — survivors are renumbered consecutively from the visual
//!   base, compressing the original gaps;
//! * `permuted` — no tokens are removed; tokens are reordered by score
//!   and given sequential IDs, scrambling the token/ID correspondence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, softmax_in_place, Matrix, Rng};
use crate::rope::PositionIds;

/// Per-token importance scores, length `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How the score vector is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ClsVisual,
    TextVisual,
    Random,
    Spatial,
    None,
}

impl Strategy {
    pub const ALL_SCORED: [Strategy; 4] =
        [Strategy::ClsVisual, Strategy::TextVisual, Strategy::Random, Strategy::Spatial];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::ClsVisual => "cls_visual",
            Strategy::TextVisual => "text_visual",
            Strategy::Random => "random",
            Strategy::Spatial => "spatial",
            Strategy::None => "none",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_visual" => Ok(Strategy::ClsVisual),
            "text_visual" => Ok(Strategy::TextVisual),
            "random" => Ok(Strategy::Random),
            "spatial" => Ok(Strategy::Spatial),
            "none" => Ok(Strategy::None),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// How survivors are assigned position IDs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Gap,
    Shifted,
    Permuted,
}

impl Alignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alignment::Gap => "gap",
            Alignment::Shifted => "shifted",
            Alignment::Permuted => "permuted",
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Alignment::Gap),
            "shifted" => Ok(Alignment::Shifted),
            "permuted" => Ok(Alignment::Permuted),
            other => Err(Error::config(format!("unknown alignment '{other}'"))),
        }
    }
}

/// A resolved pruning decision: which tokens survive and how their
/// position IDs are assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSelection {
    pub strategy: Strategy,
    pub ratio: f64,
    /// Ascending distinct original indices in `[0, N)`.
    pub indices: Vec<usize>,
    pub alignment: Alignment,
}

/// `k = max(1, floor(n * ratio))`.
///
/// A tiny epsilon is added before flooring so ratios stored as the
/// nearest f64 to a rational (1/3, 0.1, ...) floor to the intended value.
pub fn retained_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("ratio must be in (0, 1], got {ratio}")));
    }
    if n == 0 {
        return Err(Error::invalid("retained_count of zero tokens"));
    }
    let k = (n as f64 * ratio + 1e-9).floor() as usize;
    Ok(k.max(1).min(n))
}

/// Indices of the `k` highest scores, ties broken by lower index,
/// returned in ascending original-index order.
pub fn topk_select(s: &ScoreVector, k: usize) -> Result<Vec<usize>> {
    let n = s.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("topk_select: k={k} out of range for n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort by descending score keeps the lower index first on ties
    order.sort_by(|&a, &b| s.0[b].partial_cmp(&s.0[a]).expect("non-finite score"));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Rows of `v` at `indices`, in that order.
pub fn gather(v: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(indices.len(), v.cols());
    for (r, &i) in indices.iter().enumerate() {
        if i >= v.rows() {
            return Err(Error::invalid(format!("gather index {i} out of range ({} rows)", v.rows())));
        }
        out.row_mut(r).copy_from_slice(v.row(i));
    }
    Ok(out)
}

/// CLS-visual similarity scores: `softmax(q_cls . K^T / sqrt(d_k))`.
pub fn score_cls_visual(cls_query: &[f64], keys: &Matrix, d_k: usize) -> Result<ScoreVector> {
    if cls_query.len() != keys.cols() || keys.cols() != d_k {
        return Err(Error::shape(format!(
            "score_cls_visual: query len {}, key cols {}, d_k {d_k}",
            cls_query.len(),
            keys.cols()
        )));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut scores: Vec<f64> = (0..keys.rows())
        .map(|i| dot(cls_query, keys.row(i)) * scale)
        .collect();
    softmax_in_place(&mut scores);
    Ok(ScoreVector(scores))
}

/// Text-visual similarity scores: per text query a softmax over visual
/// keys, summed over text queries without renormalizing. Entries sum to
/// the number of text queries.
pub fn score_text_visual(text_queries: &Matrix, visual_keys: &Matrix, d_k: usize) -> Result<ScoreVector> {
    if text_queries.rows() == 0 {
        return Err(Error::invalid("score_text_visual: no text queries"));
    }
    if text_queries.cols() != visual_keys.cols() || visual_keys.cols() != d_k {
        return Err(Error::shape(format!(
            "score_text_visual: query cols {}, key cols {}, d_k {d_k}",
            text_queries.cols(),
            visual_keys.cols()
        )));
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let n = visual_keys.rows();
    let mut total = vec![0.0; n];
    for t in 0..text_queries.rows() {
        let mut row: Vec<f64> = (0..n)
            .map(|i| dot(text_queries.row(t), visual_keys.row(i)) * scale)
            .collect();
        softmax_in_place(&mut row);
        for (acc, v) in total.iter_mut().zip(&row) {
            *acc += v;
        }
    }
    Ok(ScoreVector(total))
}

/// `n` i.i.d. uniform(0,1) scores from the seeded generator.
pub fn score_random(n: usize, rng: &mut Rng) -> ScoreVector {
    ScoreVector((0..n).map(|_| rng.next_f64()).collect())
}

/// Evenly strided indices: `i_m = floor(m / ratio)` for `m = 0..k-1`.
pub fn select_spatial(n: usize, ratio: f64) -> Result<Vec<usize>> {
    let k = retained_count(n, ratio)?;
    let mut out = Vec::with_capacity(k);
    for m in 0..k {
        let i = ((m as f64 / ratio) + 1e-9).floor() as usize;
        out.push(i.min(n - 1));
    }
    Ok(out)
}

/// GAP alignment: each survivor keeps its pre-pruning position ID.
pub fn align_gap(indices: &[usize], visual_base: usize) -> PositionIds {
    PositionIds(indices.iter().map(|&i| visual_base + i).collect())
}

/// Shifted alignment: survivors renumbered consecutively from the base.
pub fn align_shifted(indices: &[usize], visual_base: usize) -> PositionIds {
    PositionIds((0..indices.len()).map(|j| visual_base + j).collect())
}

/// Permuted misalignment: all tokens kept, reordered by descending score
/// (ties by lower index), with position IDs assigned sequentially
/// `0..N-1` in the new order. Returns the reordered matrix, the IDs, and
/// the permutation (`perm[j]` = original index of output row `j`).
pub fn permute_by_score(v: &Matrix, s: &ScoreVector) -> Result<(Matrix, PositionIds, Vec<usize>)> {
    if s.len() != v.rows() {
        return Err(Error::shape(format!(
            "permute_by_score: {} scores for {} rows",
            s.len(),
            v.rows()
        )));
    }
    let mut perm: Vec<usize> = (0..v.rows()).collect();
    perm.sort_by(|&a, &b| s.0[b].partial_cmp(&s.0[a]).expect("non-finite score"));
    let permuted = gather(v, &perm)?;
    Ok((permuted, PositionIds((0..v.rows()).collect()), perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_count_cases() {
        assert_eq!(retained_count(576, 0.5).unwrap(), 288);
        assert_eq!(retained_count(5, 1.0).unwrap(), 5);
        assert_eq!(retained_count(10, 0.05).unwrap(), 1);
        assert_eq!(retained_count(6, 1.0 / 3.0).unwrap(), 2);
        assert!(retained_count(5, 0.0).is_err());
        assert!(retained_count(5, 1.5).is_err());
    }

    #[test]
    fn topk_paper_example() {
        // S = [4, 2, 1, 5, 3], k = 2 -> scores 5 and 4 at indices 3 and 0
        let s = ScoreVector(vec![4.0, 2.0, 1.0, 5.0, 3.0]);
        assert_eq!(topk_select(&s, 2).unwrap(), vec![0, 3]);
    }

    #[test]
    fn topk_keep_all_and_ties() {
        let s = ScoreVector(vec![1.0, 2.0, 3.0]);
        assert_eq!(topk_select(&s, 3).unwrap(), vec![0, 1, 2]);
        let t = ScoreVector(vec![7.0, 7.0, 7.0]);
        assert_eq!(topk_select(&t, 2).unwrap(), vec![0, 1]);
        assert!(topk_select(&t, 4).is_err());
    }

    #[test]
    fn gather_cases() {
        let v = Matrix::from_rows(&[
            vec![0.0, 0.1],
            vec![1.0, 1.1],
            vec![2.0, 2.1],
            vec![3.0, 3.1],
            vec![4.0, 4.1],
        ]);
        let all = gather(&v, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(all, v);
        // paper's worked case: remove v1, v2 (0-indexed 0,1), keep rows 2..5
        let tail = gather(&v, &[2, 3, 4]).unwrap();
        assert_eq!(tail.row(0), v.row(2));
        assert_eq!(tail.row(2), v.row(4));
        assert!(gather(&v, &[5]).is_err());
    }

    #[test]
    fn gather_matches_per_row_copy_oracle() {
        let mut rng = Rng::new(31);
        let mut v = Matrix::zeros(8, 3);
        rng.fill_gaussian(v.as_mut_slice(), 1.0);
        let idx = [1, 4, 6];
        let g = gather(&v, &idx).unwrap();
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(g.get(r, c), v.get(i, c));
            }
        }
    }

    #[test]
    fn cls_scores_pick_aligned_key() {
        // orthogonal keys of equal norm; query aligned with key 2
        let keys = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let q = [0.0, 0.0, 3.0, 0.0];
        let s = score_cls_visual(&q, &keys, 4).unwrap();
        let best = crate::math::argmax(&s.0).unwrap();
        assert_eq!(best, 2);
        let sum: f64 = s.0.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cls_scores_uniform_for_identical_keys() {
        let keys = Matrix::from_rows(&[vec![0.3, -0.5], vec![0.3, -0.5], vec![0.3, -0.5]]);
        let s = score_cls_visual(&[1.0, 2.0], &keys, 2).unwrap();
        for v in &s.0 {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_scores_match_direct_formula() {
        let mut rng = Rng::new(41);
        let mut keys = Matrix::zeros(6, 4);
        rng.fill_gaussian(keys.as_mut_slice(), 1.0);
        let q: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let s = score_cls_visual(&q, &keys, 4).unwrap();
        // oracle: direct formula with explicit exp/sum
        let logits: Vec<f64> = (0..6).map(|i| dot(&q, keys.row(i)) / 2.0).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..6 {
            assert!((s.0[i] - e[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn text_scores_single_query_equals_cls() {
        let mut rng = Rng::new(43);
        let mut keys = Matrix::zeros(5, 4);
        rng.fill_gaussian(keys.as_mut_slice(), 1.0);
        let q: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let a = score_cls_visual(&q, &keys, 4).unwrap();
        let b = score_text_visual(&Matrix::from_vec(1, 4, q), &keys, 4).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn text_scores_duplicate_query_doubles() {
        let mut rng = Rng::new(47);
        let mut keys = Matrix::zeros(5, 4);
        rng.fill_gaussian(keys.as_mut_slice(), 1.0);
        let q: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let single = score_text_visual(&Matrix::from_vec(1, 4, q.clone()), &keys, 4).unwrap();
        let mut two = q.clone();
        two.extend_from_slice(&q);
        let double = score_text_visual(&Matrix::from_vec(2, 4, two), &keys, 4).unwrap();
        for (s, d) in single.0.iter().zip(&double.0) {
            assert!((d - 2.0 * s).abs() < 1e-12);
        }
        let sum: f64 = double.0.iter().sum();
        assert!((sum - 2.0).abs() < 1e-10);
        assert!(score_text_visual(&Matrix::zeros(0, 4), &keys, 4).is_err());
    }

    #[test]
    fn random_scores_deterministic_and_in_range() {
        let a = score_random(10, &mut Rng::new(42));
        let b = score_random(10, &mut Rng::new(42));
        assert_eq!(a, b);
        let one = score_random(1, &mut Rng::new(1));
        assert!(one.0[0] >= 0.0 && one.0[0] < 1.0);
    }

    #[test]
    fn random_scores_mean_near_half() {
        let s = score_random(100_000, &mut Rng::new(42));
        let mean: f64 = s.0.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn spatial_cases() {
        assert_eq!(select_spatial(8, 0.5).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(select_spatial(5, 1.0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_spatial(6, 1.0 / 3.0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn spatial_even_spacing_property() {
        for n in 1..=64usize {
            for r10 in 1..=10usize {
                let ratio = r10 as f64 / 10.0;
                let idx = select_spatial(n, ratio).unwrap();
                assert!(idx.windows(2).all(|w| w[0] < w[1]), "not ascending: n={n} r={ratio}");
                assert!(*idx.last().unwrap() < n);
                let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
                if let (Some(max), Some(min)) = (gaps.iter().max(), gaps.iter().min()) {
                    assert!(max - min <= 1, "uneven spacing: n={n} r={ratio} idx={idx:?}");
                }
            }
        }
    }

    #[test]
    fn align_gap_cases() {
        assert_eq!(align_gap(&[2, 3, 4], 0).0, vec![2, 3, 4]);
        assert_eq!(align_gap(&[0, 1, 2], 0), crate::rope::sequential_ids(0, 3));
        assert_eq!(align_gap(&[0, 4], 10).0, vec![10, 14]);
    }

    #[test]
    fn align_shifted_cases() {
        assert_eq!(align_shifted(&[2, 3, 4], 0).0, vec![0, 1, 2]);
        assert_eq!(align_shifted(&[0, 1, 2], 0), align_gap(&[0, 1, 2], 0));
        assert_eq!(align_shifted(&[0, 4], 10).0, vec![10, 11]);
    }

    #[test]
    fn gap_preserves_pairwise_gaps_shifted_compresses() {
        let idx = [1, 4, 5, 9];
        let gap = align_gap(&idx, 3);
        let shifted = align_shifted(&idx, 3);
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                assert_eq!(gap.0[b] - gap.0[a], idx[b] - idx[a]);
                assert_eq!(shifted.0[b] - shifted.0[a], b - a);
            }
        }
    }

    #[test]
    fn permute_identity_on_equal_scores() {
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let s = ScoreVector(vec![5.0, 5.0, 5.0]);
        let (p, ids, perm) = permute_by_score(&v, &s).unwrap();
        assert_eq!(p, v);
        assert_eq!(ids.0, vec![0, 1, 2]);
        assert_eq!(perm, vec![0, 1, 2]);
    }

    #[test]
    fn permute_descending_order() {
        let v = Matrix::from_rows(&[vec![10.0], vec![20.0], vec![30.0]]);
        let s = ScoreVector(vec![1.0, 3.0, 2.0]);
        let (p, ids, perm) = permute_by_score(&v, &s).unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
        assert_eq!(p.row(0), v.row(1));
        assert_eq!(p.row(1), v.row(2));
        assert_eq!(p.row(2), v.row(0));
        assert_eq!(ids.0, vec![0, 1, 2]);
    }

    #[test]
    fn permute_inverse_recovers_input() {
        let mut rng = Rng::new(53);
        let mut v = Matrix::zeros(6, 2);
        rng.fill_gaussian(v.as_mut_slice(), 1.0);
        let s = score_random(6, &mut rng);
        let (p, _ids, perm) = permute_by_score(&v, &s).unwrap();
        let mut recovered = Matrix::zeros(6, 2);
        for (j, &orig) in perm.iter().enumerate() {
            recovered.row_mut(orig).copy_from_slice(p.row(j));
        }
        assert_eq!(recovered, v);
    }

    #[test]
    fn selection_size_invariant_across_strategies() {
        let mut rng = Rng::new(59);
        for n in [1usize, 2, 5, 16, 64] {
            for r10 in 1..=10usize {
                let ratio = r10 as f64 / 10.0;
                let k = retained_count(n, ratio).unwrap();
                let s = score_random(n, &mut rng);
                let idx = topk_select(&s, k).unwrap();
                assert_eq!(idx.len(), k);
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                let sp = select_spatial(n, ratio).unwrap();
                assert_eq!(sp.len(), k);
            }
        }
    }
}
