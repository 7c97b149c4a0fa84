//! Dense similarity kernels and deterministic top-k selection.
//!
//! Every dot product uses the same fixed summation tree: eight lane
//! accumulators updated with fused multiply-adds, a pairwise reduction, then
//! the tail. A fused multiply-add is exactly rounded, so the SIMD paths and
//! the portable path agree bit for bit, and a similarity does not depend on
//! batch composition, instruction set or thread count.

use std::cmp::Ordering;

const LANES: usize = 8;

/// Queries sharing one pass over the bank rows.
pub const QUERY_BLOCK: usize = 32;

const TILE_ROWS: usize = 4;
const TILE_QUERIES: usize = 4;

#[inline(always)]
fn reduce(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn tail(a: &[f64], b: &[f64], from: usize) -> f64 {
    let mut t = 0.0f64;
    for i in from..a.len() {
        t = a[i].mul_add(b[i], t);
    }
    t
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let full = a.len() - a.len() % LANES;
    for (x, y) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = x[l].mul_add(y[l], acc[l]);
        }
    }
    reduce(&acc) + tail(a, b, full)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature is present on this CPU.
            return unsafe { simd::dot_fma(a, b) };
        }
    }
    dot_body(a, b)
}

/// Lane accumulators of one tile, `[row][query][lane]`.
type Acc = [[[f64; LANES]; TILE_QUERIES]; TILE_ROWS];

const ZERO_ACC: Acc = [[[0.0; LANES]; TILE_QUERIES]; TILE_ROWS];

type Rows<'a> = [&'a [f64]; TILE_ROWS];
type Queries<'a> = [&'a [f64]; TILE_QUERIES];

/// Advances every query tile's accumulators over elements `0..full` of one
/// row tile. `full` is a multiple of `LANES` and at most the row length.
type RowTile = fn(&Rows<'_>, &[Queries<'_>], usize, &mut [Acc]);

/// Elements per pass over a row tile, sized so the rows stay in L1 while
/// every query tile visits them.
const D_CHUNK: usize = 256;

/// Visits `(query tile, element range)` pairs chunk by chunk. Each lane
/// still sees its elements in ascending order.
#[inline(always)]
fn sweep(q_tiles: &[Queries<'_>], full: usize, accs: &mut [Acc], mut step: impl FnMut(&Queries<'_>, usize, usize, &mut Acc)) {
    let mut from = 0;
    while from < full {
        let to = (from + D_CHUNK).min(full);
        for (q, acc) in q_tiles.iter().zip(accs.iter_mut()) {
            step(q, from, to, acc);
        }
        from = to;
    }
}

fn portable_row_tile(rows: &Rows<'_>, q_tiles: &[Queries<'_>], full: usize, accs: &mut [Acc]) {
    sweep(q_tiles, full, accs, |q, from, to, acc| {
        for i in (from..to).step_by(LANES) {
            for (r, row) in rows.iter().enumerate() {
                for (j, qj) in q.iter().enumerate() {
                    for l in 0..LANES {
                        acc[r][j][l] = qj[i + l].mul_add(row[i + l], acc[r][j][l]);
                    }
                }
            }
        }
    });
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{dot_body, sweep, Acc, Queries, Rows, LANES, TILE_QUERIES, TILE_ROWS};
    use std::arch::x86_64::*;

    #[target_feature(enable = "fma")]
    pub(super) fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
        dot_body(a, b)
    }

    fn check(rows: &Rows<'_>, q_tiles: &[Queries<'_>], full: usize) {
        assert!(full.is_multiple_of(LANES));
        assert!(rows.iter().chain(q_tiles.iter().flatten()).all(|s| s.len() >= full));
    }

    // Lane `l` of accumulator `(r, j)` runs `acc = fma(q_j[i], row_r[i], acc)`
    // over `i = l (mod 8)` in ascending order, exactly like `dot_body`.

    #[target_feature(enable = "avx512f")]
    pub(super) fn row_tile_avx512(rows: &Rows<'_>, q_tiles: &[Queries<'_>], full: usize, accs: &mut [Acc]) {
        check(rows, q_tiles, full);
        sweep(q_tiles, full, accs, |q, from, to, acc| {
            // SAFETY: `check` bounds every slice by `full >= to`, and each
            // accumulator lane array holds exactly one vector.
            unsafe {
                let mut a: [[__m512d; TILE_QUERIES]; TILE_ROWS] =
                    std::array::from_fn(|r| std::array::from_fn(|j| _mm512_loadu_pd(acc[r][j].as_ptr())));
                let mut i = from;
                while i < to {
                    let x: [__m512d; TILE_QUERIES] = std::array::from_fn(|j| _mm512_loadu_pd(q[j].as_ptr().add(i)));
                    for (ar, row) in a.iter_mut().zip(rows) {
                        let y = _mm512_loadu_pd(row.as_ptr().add(i));
                        for j in 0..TILE_QUERIES {
                            ar[j] = _mm512_fmadd_pd(x[j], y, ar[j]);
                        }
                    }
                    i += LANES;
                }
                for r in 0..TILE_ROWS {
                    for j in 0..TILE_QUERIES {
                        _mm512_storeu_pd(acc[r][j].as_mut_ptr(), a[r][j]);
                    }
                }
            }
        });
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) fn row_tile_avx2(rows: &Rows<'_>, q_tiles: &[Queries<'_>], full: usize, accs: &mut [Acc]) {
        check(rows, q_tiles, full);
        sweep(q_tiles, full, accs, |q, from, to, acc| {
            // SAFETY: as in `row_tile_avx512`; lanes 0..4 and 4..8 are two vectors.
            unsafe {
                let mut lo: [[__m256d; TILE_QUERIES]; TILE_ROWS] =
                    std::array::from_fn(|r| std::array::from_fn(|j| _mm256_loadu_pd(acc[r][j].as_ptr())));
                let mut hi: [[__m256d; TILE_QUERIES]; TILE_ROWS] =
                    std::array::from_fn(|r| std::array::from_fn(|j| _mm256_loadu_pd(acc[r][j].as_ptr().add(4))));
                let mut i = from;
                while i < to {
                    for r in 0..TILE_ROWS {
                        let r0 = _mm256_loadu_pd(rows[r].as_ptr().add(i));
                        let r1 = _mm256_loadu_pd(rows[r].as_ptr().add(i + 4));
                        for j in 0..TILE_QUERIES {
                            let x0 = _mm256_loadu_pd(q[j].as_ptr().add(i));
                            let x1 = _mm256_loadu_pd(q[j].as_ptr().add(i + 4));
                            lo[r][j] = _mm256_fmadd_pd(x0, r0, lo[r][j]);
                            hi[r][j] = _mm256_fmadd_pd(x1, r1, hi[r][j]);
                        }
                    }
                    i += LANES;
                }
                for r in 0..TILE_ROWS {
                    for j in 0..TILE_QUERIES {
                        _mm256_storeu_pd(acc[r][j].as_mut_ptr(), lo[r][j]);
                        _mm256_storeu_pd(acc[r][j].as_mut_ptr().add(4), hi[r][j]);
                    }
                }
            }
        });
    }
}

fn select_row_tile() -> RowTile {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature is present on this CPU.
            return |r, q, f, a| unsafe { simd::row_tile_avx512(r, q, f, a) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return |r, q, f, a| unsafe { simd::row_tile_avx2(r, q, f, a) };
        }
    }
    portable_row_tile
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / |v|`, or `None` for a zero (or non-finite) norm.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let norm = l2_norm(v);
    if norm > 0.0 && norm.is_finite() {
        Some(v.iter().map(|x| x / norm).collect())
    } else {
        None
    }
}

fn block_impl(rows: &[f64], queries: &[f64], d: usize, out: &mut [f64], row_tile: RowTile) {
    let n = rows.len() / d;
    let m = queries.len() / d;
    debug_assert_eq!(out.len(), n * m);
    let q = |j: usize| &queries[j * d..(j + 1) * d];
    let row = |r: usize| &rows[r * d..(r + 1) * d];
    let full_q = m - m % TILE_QUERIES;
    let full_r = n - n % TILE_ROWS;
    let full_d = d - d % LANES;
    let q_tiles: Vec<Queries<'_>> = (0..full_q)
        .step_by(TILE_QUERIES)
        .map(|j| std::array::from_fn(|t| q(j + t)))
        .collect();
    let mut accs = vec![ZERO_ACC; q_tiles.len()];
    for r in (0..full_r).step_by(TILE_ROWS) {
        let rs: Rows<'_> = std::array::from_fn(|t| row(r + t));
        accs.fill(ZERO_ACC);
        row_tile(&rs, &q_tiles, full_d, &mut accs);
        for (t, (qs, acc)) in q_tiles.iter().zip(&accs).enumerate() {
            for (dr, acc_r) in acc.iter().enumerate() {
                for (dj, lanes) in acc_r.iter().enumerate() {
                    out[(t * TILE_QUERIES + dj) * n + r + dr] = reduce(lanes) + tail(qs[dj], rs[dr], full_d);
                }
            }
        }
    }
    for j in 0..m {
        let first = if j < full_q { full_r } else { 0 };
        for r in first..n {
            out[j * n + r] = dot(q(j), row(r));
        }
    }
}

/// `out[q * n + r] = dot(queries[q], rows[r])` for `m` queries and `n` rows.
pub fn similarity_block(rows: &[f64], queries: &[f64], d: usize, out: &mut [f64]) {
    block_impl(rows, queries, d, out, select_row_tile())
}

/// Bank row paired with the value it was ranked by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub value: f64,
}

/// Descending value, ascending row on ties. Values are finite.
#[inline]
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.value
        .partial_cmp(&a.value)
        .unwrap_or(Ordering::Equal)
        .then(a.row.cmp(&b.row))
}

const INSERTION_LIMIT: usize = 64;

/// The `k` largest entries of `values` (row id = position), descending, ties
/// by ascending row. `k` is clamped to `values.len()`.
pub fn top_k(values: &[f64], k: usize) -> Vec<Neighbor> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    if k <= INSERTION_LIMIT {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        for (row, &value) in values.iter().enumerate() {
            if best.len() == k && value <= best[k - 1].value {
                continue;
            }
            // later rows lose ties, so the slot goes after every equal value
            let at = best.partition_point(|b| b.value >= value);
            best.insert(at, Neighbor { row, value });
            best.truncate(k);
        }
        best
    } else {
        let mut all: Vec<Neighbor> = values
            .iter()
            .enumerate()
            .map(|(row, &value)| Neighbor { row, value })
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank);
            all.truncate(k);
        }
        all.sort_unstable_by(rank);
        all
    }
}
