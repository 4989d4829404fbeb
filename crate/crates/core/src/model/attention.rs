use threadsum_tensor::{Tape, Tensor, Var};

use crate::conv::{clip, ThreadRelation};
use crate::model::ModelError;

/// Added to attention logits that must receive no weight.
pub const MASK_VALUE: f64 = -1e9;

/// Sine/cosine position table of shape `[length, dim]`.
pub fn sinusoidal_pe(length: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; length * dim];
    for p in 0..length {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[p * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[length, dim], data).expect("non-empty table")
}

/// Row of the relation table used for `rel`. Row 0 is the unrelated
/// embedding; rows `1..=2k+1` hold offsets `-k..=k`.
pub fn relation_index(rel: ThreadRelation, k: usize) -> usize {
    match rel {
        ThreadRelation::Unrelated => 0,
        ThreadRelation::SamePath(d) => (clip(d, k as i64) + k as i64) as usize + 1,
    }
}

pub fn relation_indices(relations: &[ThreadRelation], k: usize) -> Vec<usize> {
    relations.iter().map(|&r| relation_index(r, k)).collect()
}

pub fn select_relative_embedding(rel: ThreadRelation, table: &Tensor, k: usize) -> &[f64] {
    table.row(relation_index(rel, k))
}

/// Per-head intermediates of one thread-aware attention call.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `[n, n]` logits before the softmax.
    pub scores: Var,
    /// `[n, n]` attention weights.
    pub weights: Var,
    /// `[n, d_z]` attended values.
    pub z: Var,
}

/// Multi-head attention over utterance states whose query/key interaction is
/// shifted by a relation embedding per utterance pair. `w_q`, `w_k`, `w_v` are
/// `[d_h, d_h]`; head `m` uses columns `m*d_z..(m+1)*d_z`. The same `[2k+2, d_z]`
/// table serves every head.
pub fn thread_aware_attention(
    tape: &mut Tape,
    h: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    table: Var,
    relations: &[ThreadRelation],
    k: usize,
    num_heads: usize,
) -> Result<Vec<HeadOutputs>, ModelError> {
    let n = tape.value(h).rows();
    if relations.len() != n * n {
        return Err(ModelError::Relations { got: relations.len(), expected: n * n });
    }
    let rel = relation_indices(relations, k);
    let q = tape.matmul(h, w_q)?;
    let kk = tape.matmul(h, w_k)?;
    let v = tape.matmul(h, w_v)?;
    let d = tape.value(q).cols();
    let dz = d / num_heads;
    let scale = 1.0 / (dz as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for m in 0..num_heads {
        let qh = tape.slice(q, 1, m * dz, dz)?;
        let kh = tape.slice(kk, 1, m * dz, dz)?;
        let vh = tape.slice(v, 1, m * dz, dz)?;
        let scores = tape.relation_scores(qh, kh, table, &rel, scale)?;
        let weights = tape.softmax(scores);
        let z = tape.matmul(weights, vh)?;
        heads.push(HeadOutputs { scores, weights, z });
    }
    Ok(heads)
}

/// Standard multi-head scaled dot-product attention with an optional
/// additive mask. Inputs are already projected.
pub(crate) fn dot_product_heads(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    num_heads: usize,
) -> Result<Var, ModelError> {
    let d = tape.value(q).cols();
    let dz = d / num_heads;
    let scale = 1.0 / (dz as f64).sqrt();
    let mut zs = Vec::with_capacity(num_heads);
    for m in 0..num_heads {
        let qh = tape.slice(q, 1, m * dz, dz)?;
        let kh = tape.slice(k, 1, m * dz, dz)?;
        let vh = tape.slice(v, 1, m * dz, dz)?;
        let s = tape.matmul_bt(qh, kh)?;
        let mut s = tape.scale(s, scale);
        if let Some(mask) = mask {
            s = tape.add(s, mask)?;
        }
        let a = tape.softmax(s);
        zs.push(tape.matmul(a, vh)?);
    }
    if zs.len() == 1 {
        return Ok(zs[0]);
    }
    Ok(tape.concat(&zs, 1)?)
}

/// `[n, n]` mask hiding positions after the query.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_VALUE;
        }
    }
    Tensor::new(&[n, n], data).expect("non-empty mask")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::tests::chain;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pe_rows() {
        let pe = sinusoidal_pe(5, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|x| x.abs() <= 1.0));
        let p4 = sinusoidal_pe(4, 4);
        let expected = [3f64.sin(), 3f64.cos(), (3.0 / 100.0f64).sin(), (3.0 / 100.0f64).cos()];
        for (a, b) in p4.row(3).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn relative_embedding_selection() {
        let k = 9;
        let table = Tensor::new(&[20, 1], (0..20).map(|x| x as f64).collect()).unwrap();
        let w = |d: i64| table.row(1 + (d + 9) as usize)[0];
        assert_eq!(select_relative_embedding(ThreadRelation::SamePath(0), &table, k)[0], w(0));
        assert_eq!(select_relative_embedding(ThreadRelation::SamePath(15), &table, k)[0], w(9));
        assert_eq!(select_relative_embedding(ThreadRelation::SamePath(-15), &table, k)[0], w(-9));
        assert_eq!(select_relative_embedding(ThreadRelation::Unrelated, &table, k)[0], 0.0);
    }

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    #[test]
    fn scalar_oracle_on_three_chain() {
        let tree = chain(3);
        let rels = tree.relation_matrix();
        let k = 3;
        let (h, wq, wk, wv, table) = (mat(3, 2, 1), mat(2, 2, 2), mat(2, 2, 3), mat(2, 2, 4), mat(8, 2, 5));
        let mut tape = Tape::new();
        let vars = [&h, &wq, &wk, &wv, &table].map(|t| tape.constant(t.clone()));
        let heads = thread_aware_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], &rels, k, 1).unwrap();
        let e = tape.value(heads[0].scores);
        for i in 0..3 {
            for j in 0..3 {
                let mut qi = [0.0; 2];
                let mut kj = [0.0; 2];
                for c in 0..2 {
                    for r in 0..2 {
                        qi[c] += h.at(i, r) * wq.at(r, c);
                        kj[c] += h.at(j, r) * wk.at(r, c);
                    }
                }
                let d = i as i64 - j as i64;
                let row = 1 + (d + 3) as usize;
                let rr = [table.at(row, 0), table.at(row, 1)];
                let expected = ((qi[0] + rr[0]) * (kj[0] + rr[0]) + (qi[1] + rr[1]) * (kj[1] + rr[1])
                    - rr[0] * rr[0]
                    - rr[1] * rr[1])
                    / 2f64.sqrt();
                assert_abs_diff_eq!(e.at(i, j), expected, epsilon = 1e-10);
            }
        }
        let a = tape.value(heads[0].weights);
        for i in 0..3 {
            assert_abs_diff_eq!(a.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_relations_reduce_to_dot_product() {
        let tree = chain(4);
        let rels = tree.relation_matrix();
        let (h, wq, wk, wv) = (mat(4, 4, 11), mat(4, 4, 12), mat(4, 4, 13), mat(4, 4, 14));
        let mut tape = Tape::new();
        let vars = [&h, &wq, &wk, &wv].map(|t| tape.constant(t.clone()));
        let table = tape.constant(Tensor::zeros(&[8, 2]));
        let heads = thread_aware_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], table, &rels, 3, 2).unwrap();
        let q = h.matmul(&wq).unwrap();
        let kk = h.matmul(&wk).unwrap();
        for (m, head) in heads.iter().enumerate() {
            let e = tape.value(head.scores);
            for i in 0..4 {
                for j in 0..4 {
                    let dot: f64 = (0..2).map(|c| q.at(i, 2 * m + c) * kk.at(j, 2 * m + c)).sum();
                    assert_abs_diff_eq!(e.at(i, j), dot / 2f64.sqrt(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.row(0), &[0.0, MASK_VALUE, MASK_VALUE]);
        assert_eq!(m.row(2), &[0.0, 0.0, 0.0]);
    }
}
