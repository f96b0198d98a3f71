//! Dense softmax attention: the fast row-parallel kernel, and a 64-bit path
//! whose reductions over keys are order-independent (used as an oracle and
//! for attention probing).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{axpy, canonical_sum, dot, Matrix, Real};

pub(crate) fn check_qkv<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.cols() == 0 {
        return Err(Error::Shape("head dimension must be at least 1".into()));
    }
    if k.rows() == 0 {
        return Err(Error::EmptyKeySet);
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

pub(crate) fn check_finite<T: Real>(mats: &[(&str, &Matrix<T>)]) -> Result<()> {
    for (name, m) in mats {
        if !m.all_finite() {
            return Err(Error::NonFinite(format!("{name} contains NaN or Inf")));
        }
    }
    Ok(())
}

pub fn softmax_scale<T: Real>(dim: usize) -> T {
    T::one() / T::from_usize(dim).unwrap().sqrt()
}

/// `softmax(Q Kᵀ / √d) V` with max subtraction, one query row at a time.
pub fn dense_attention<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let scale = softmax_scale::<T>(q.cols());
    Ok(streamed_attention(q, k, v, scale, |_, _, _| {}).0)
}

fn transpose<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let (r, c) = (m.rows(), m.cols());
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for (j, &x) in m.row(i).iter().enumerate() {
            data[j * r + i] = x;
        }
    }
    Matrix::from_vec(c, r, data).expect("sized")
}

pub(crate) const KEY_TILE: usize = 128;
pub(crate) const QUERY_BLOCK: usize = 16;

/// Blocked streaming softmax attention over contiguous `keys`/`values`.
/// Each block of queries walks the key tiles together so a tile is reused
/// from cache; `extras` may push further components per query afterwards.
pub(crate) fn streamed_attention<T, F>(
    q: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    scale: T,
    extras: F,
) -> (Matrix<T>, Vec<QueryStats>)
where
    T: Real,
    F: Fn(usize, &[T], &mut OnlineSoftmax<'_, T>) + Sync,
{
    let dv = values.cols();
    let mut out = Matrix::zeros(q.rows(), dv);
    let mut stats = vec![QueryStats::default(); q.rows()];
    if dv == 0 {
        return (out, stats);
    }
    let kt = transpose(keys);
    out.as_mut_slice()
        .par_chunks_mut(QUERY_BLOCK * dv)
        .zip(stats.par_chunks_mut(QUERY_BLOCK))
        .enumerate()
        .for_each_init(
            || (vec![T::zero(); KEY_TILE], vec![T::zero(); q.cols()]),
            |(logits, qs), (block, (out_block, stat_block))| {
                let first = block * QUERY_BLOCK;
                let mut states: Vec<OnlineSoftmax<'_, T>> =
                    out_block.chunks_mut(dv).map(OnlineSoftmax::new).collect();
                for start in (0..keys.rows()).step_by(KEY_TILE) {
                    let end = (start + KEY_TILE).min(keys.rows());
                    let tile = &mut logits[..end - start];
                    for (r, sm) in states.iter_mut().enumerate() {
                        // Logits as a sum of scaled key-feature rows: contiguous
                        // over keys, no horizontal reductions.
                        qs.iter_mut().zip(q.row(first + r)).for_each(|(s, &x)| *s = x * scale);
                        tile.iter_mut().for_each(|l| *l = T::zero());
                        for (c, &qc) in qs.iter().enumerate() {
                            axpy(qc, &kt.row(c)[start..end], tile);
                        }
                        sm.push_tile(tile, values, start);
                    }
                }
                for (r, (mut sm, stat)) in states.into_iter().zip(stat_block).enumerate() {
                    extras(first + r, q.row(first + r), &mut sm);
                    *stat = sm.finish();
                }
            },
        );
    (out, stats)
}

/// Per-query softmax accumulators of the streaming kernel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryStats {
    /// Running maximum logit after all components.
    pub max_logit: f64,
    /// Unnormalized mass (relative to `max_logit`) of kept columns.
    pub kept_mass: f64,
    pub diagonal_mass: f64,
    pub mean_mass: f64,
    /// The single shared normalizer.
    pub normalizer: f64,
}

impl QueryStats {
    pub fn kept_weight(&self) -> f64 {
        self.kept_mass / self.normalizer
    }

    pub fn diagonal_weight(&self) -> f64 {
        self.diagonal_mass / self.normalizer
    }

    pub fn mean_weight(&self) -> f64 {
        self.mean_mass / self.normalizer
    }

    pub fn total_weight(&self) -> f64 {
        self.kept_weight() + self.diagonal_weight() + self.mean_weight()
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Component {
    Kept,
    Diagonal,
    Mean,
}

/// Online softmax over logits arriving in any grouping; only rescales when
/// the running maximum grows.
pub(crate) struct OnlineSoftmax<'a, T> {
    max: T,
    masses: [T; 3],
    acc: &'a mut [T],
}

impl<'a, T: Real> OnlineSoftmax<'a, T> {
    pub(crate) fn new(acc: &'a mut [T]) -> Self {
        acc.iter_mut().for_each(|a| *a = T::zero());
        Self {
            max: T::neg_infinity(),
            masses: [T::zero(); 3],
            acc,
        }
    }

    fn raise_max(&mut self, candidate: T) {
        if candidate > self.max {
            let factor = (self.max - candidate).exp();
            self.masses.iter_mut().for_each(|m| *m = *m * factor);
            self.acc.iter_mut().for_each(|a| *a = *a * factor);
            self.max = candidate;
        }
    }

    pub(crate) fn push(&mut self, logit: T, value: &[T], part: Component) {
        self.raise_max(logit);
        let w = (logit - self.max).exp();
        self.masses[part as usize] = self.masses[part as usize] + w;
        axpy(w, value, self.acc);
    }

    /// A tile of kept columns whose logits are already in `logits`.
    /// A tile of kept columns whose logits are in `logits` (overwritten
    /// with their weights).
    pub(crate) fn push_tile(&mut self, logits: &mut [T], values: &Matrix<T>, first_row: usize) {
        let tile_max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        self.raise_max(tile_max);
        let max = self.max;
        logits.iter_mut().for_each(|l| *l = (*l - max).exp_nonpositive());
        let mut mass = T::zero();
        for (j, &w) in logits.iter().enumerate() {
            mass = mass + w;
            axpy(w, values.row(first_row + j), self.acc);
        }
        self.masses[Component::Kept as usize] = self.masses[Component::Kept as usize] + mass;
    }

    pub(crate) fn finish(self) -> QueryStats {
        let total = self.masses[0] + self.masses[1] + self.masses[2];
        let inv = T::one() / total;
        self.acc.iter_mut().for_each(|a| *a = *a * inv);
        QueryStats {
            max_logit: self.max.to_f64(),
            kept_mass: self.masses[0].to_f64(),
            diagonal_mass: self.masses[1].to_f64(),
            mean_mass: self.masses[2].to_f64(),
            normalizer: total.to_f64(),
        }
    }
}


/// Post-softmax probabilities `softmax(Q Kᵀ / √d)`, one row per query.
pub fn attention_probabilities<T: Real>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    check_qkv(q, k, k)?;
    let scale = softmax_scale::<T>(q.cols());
    let m = k.rows();
    let mut out = Matrix::zeros(q.rows(), m);
    out.as_mut_slice()
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, row)| {
            let qi = q.row(i);
            for (j, l) in row.iter_mut().enumerate() {
                *l = dot(qi, k.row(j)) * scale;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for l in row.iter_mut() {
                *l = (*l - max).exp();
                sum = sum + *l;
            }
            row.iter_mut().for_each(|x| *x = *x / sum);
        });
    Ok(out)
}

/// Probabilities whose per-row normalizer is a canonical (order-independent)
/// sum, so permuting the keys permutes each row exactly.
pub fn attention_probabilities_exact(q: &Matrix<f64>, k: &Matrix<f64>) -> Result<Matrix<f64>> {
    check_qkv(q, k, k)?;
    let scale = softmax_scale::<f64>(q.cols());
    let m = k.rows();
    let mut out = Matrix::zeros(q.rows(), m);
    out.as_mut_slice()
        .par_chunks_mut(m)
        .enumerate()
        .for_each_init(
            || vec![0.0; m],
            |scratch, (i, row)| {
                let qi = q.row(i);
                for (j, l) in row.iter_mut().enumerate() {
                    *l = dot(qi, k.row(j)) * scale;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for l in row.iter_mut() {
                    *l = (*l - max).exp();
                }
                scratch.copy_from_slice(row);
                let sum = canonical_sum(scratch);
                row.iter_mut().for_each(|x| *x /= sum);
            },
        );
    Ok(out)
}

/// 64-bit attention whose output is invariant (bitwise) under any joint
/// permutation of key and value rows.
pub fn dense_attention_exact(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
) -> Result<Matrix<f64>> {
    check_qkv(q, k, v)?;
    let probs = attention_probabilities_exact(q, k)?;
    Ok(weighted_values_exact(&probs, v))
}

/// `P V` with canonical sums over the key axis.
pub(crate) fn weighted_values_exact(probs: &Matrix<f64>, v: &Matrix<f64>) -> Matrix<f64> {
    let dv = v.cols();
    let m = v.rows();
    let mut out = Matrix::zeros(probs.rows(), dv);
    if dv == 0 {
        return out;
    }
    out.as_mut_slice()
        .par_chunks_mut(dv)
        .enumerate()
        .for_each_init(
            || vec![0.0; m],
            |terms, (i, out_row)| {
                let p = probs.row(i);
                for (c, o) in out_row.iter_mut().enumerate() {
                    for (j, t) in terms.iter_mut().enumerate() {
                        *t = p[j] * v.get(j, c);
                    }
                    *o = canonical_sum(terms);
                }
            },
        );
    out
}

/// Splits (M, H·d) into H matrices of shape (M, d).
pub fn split_heads<T: Real>(x: &Matrix<T>, heads: usize) -> Vec<Matrix<T>> {
    let d = x.cols() / heads;
    (0..heads).map(|h| x.column_block(h * d, d)).collect()
}

pub fn merge_heads<T: Real>(parts: &[Matrix<T>]) -> Matrix<T> {
    let rows = parts.first().map_or(0, Matrix::rows);
    let d = parts.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(rows, d * parts.len());
    for (h, p) in parts.iter().enumerate() {
        out.set_column_block(h * d, p);
    }
    out
}

/// Runs a single-head kernel independently on each head and concatenates.
pub fn multi_head<T, F>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    mut kernel: F,
) -> Result<Matrix<T>>
where
    T: Real,
    F: FnMut(&Matrix<T>, &Matrix<T>, &Matrix<T>) -> Result<Matrix<T>>,
{
    if heads == 0 || q.cols() % heads != 0 {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide width {}",
            q.cols()
        )));
    }
    let (qs, ks, vs) = (split_heads(q, heads), split_heads(k, heads), split_heads(v, heads));
    let outs = qs
        .iter()
        .zip(&ks)
        .zip(&vs)
        .map(|((qh, kh), vh)| kernel(qh, kh, vh))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_heads(&outs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = m(&[&[0.3, -2.0], &[5.0, 1.0]]);
        let k = m(&[&[1.0, 1.0]]);
        let v = m(&[&[4.0, -7.0]]);
        let out = dense_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), &[4.0, -7.0]);
        }
    }

    #[test]
    fn zero_logits_average_values() {
        let q = m(&[&[0.0, 0.0]]);
        let k = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let v = m(&[&[1.0], &[2.0], &[6.0]]);
        let out = dense_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_three_quarters() {
        // logits (ln 3, 0) -> weights (3/4, 1/4)
        let q = m(&[&[1.0]]);
        let k = m(&[&[3f64.ln()], &[0.0]]);
        let v = m(&[&[1.0], &[0.0]]);
        let fast = dense_attention(&q, &k, &v).unwrap();
        let exact = dense_attention_exact(&q, &k, &v).unwrap();
        assert!((fast.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((exact.get(0, 0) - 0.75).abs() < 1e-12);
        let q32: Matrix<f32> = q.cast();
        let out32 = dense_attention(&q32, &k.cast(), &v.cast()).unwrap();
        assert!((out32.get(0, 0) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn empty_keys_rejected() {
        let q = m(&[&[1.0]]);
        let k = Matrix::<f64>::zeros(0, 1);
        assert!(matches!(dense_attention(&q, &k, &k), Err(Error::EmptyKeySet)));
    }

    #[test]
    fn probabilities_rows_sum_to_one() {
        let q = m(&[&[0.1, 0.9], &[-1.0, 2.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let p = attention_probabilities(&q, &k).unwrap();
        let pe = attention_probabilities_exact(&q, &k).unwrap();
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((pe.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_merge_roundtrip() {
        let x = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let parts = split_heads(&x, 2);
        assert_eq!(parts[1].row(0), &[3.0, 4.0]);
        assert_eq!(merge_heads(&parts), x);
    }
}
