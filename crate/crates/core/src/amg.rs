//! Adjacency matrix generation over the concatenated modality tokens.
//!
//! The adjacency combines scaled dot-product similarity (through learned
//! projections) with cosine similarity, masks weak pairs, row-normalizes,
//! keeps the top-k per row, and symmetrizes. The hard mask and top-k make
//! the whole block non-differentiable, so it runs on plain values and the
//! result enters the fusion tape as a constant; the projections stay at
//! their initialization.

use fusetrack_tensor::Tensor;

use crate::{Result, TrackError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyMode {
    /// Full pipeline: combined similarity, mask, softmax, top-k, symmetrize.
    Amg,
    /// Identity matrix, ignoring inputs.
    Identity,
    /// Top-k of the row-softmaxed dot-product similarity alone.
    Qkv,
    /// Top-k of the raw cosine similarity alone.
    Cosine,
}

impl AdjacencyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "amg" => Ok(Self::Amg),
            "identity" => Ok(Self::Identity),
            "qkv" => Ok(Self::Qkv),
            "cosine" => Ok(Self::Cosine),
            _ => Err(TrackError::Config(format!("unknown adjacency mode {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Amg => "amg",
            Self::Identity => "identity",
            Self::Qkv => "qkv",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AmgConfig {
    pub d_k: usize,
    pub theta: f64,
    pub top_k: usize,
    pub mode: AdjacencyMode,
}

#[derive(Debug, Clone)]
pub struct SimilarityBundle {
    /// Scaled dot-product similarity, 2N x 2N.
    pub s1: Tensor,
    /// Cosine similarity, 2N x 2N.
    pub s2: Tensor,
    /// Combined mask source (S1 + S2 + 1) / 2.
    pub m: Tensor,
    /// Masked, row-softmaxed similarity; fully masked rows are all-zero.
    pub s_prime: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adjacency {
    /// Pre-symmetrization matrix with exactly k ones per row (or a lone
    /// self-loop for fully masked rows).
    pub a_prime: Tensor,
    /// Symmetrized adjacency, entries in {0, 0.5, 1}.
    pub a: Tensor,
}

impl Adjacency {
    /// Connectivity flags (A > 0), row-major, for the GAT's masked softmax.
    pub fn keep_flags(&self) -> Vec<bool> {
        self.a.data().iter().map(|&v| v > 0.0).collect()
    }

    pub fn nodes(&self) -> usize {
        self.a.rows()
    }
}

/// Stack the two modality token matrices: rows 0..N are the first input,
/// rows N..2N the second.
pub fn concat_modalities(f_v: &Tensor, f_i: &Tensor) -> Result<Tensor> {
    if f_v.shape() != f_i.shape() || f_v.rank() != 2 {
        return Err(TrackError::ShapeMismatch(format!(
            "concat_modalities: {:?} vs {:?}",
            f_v.shape(),
            f_i.shape()
        )));
    }
    let (n, d) = (f_v.rows(), f_v.cols());
    let mut out = Tensor::zeros(&[2 * n, d]);
    out.data_mut()[..n * d].copy_from_slice(f_v.data());
    out.data_mut()[n * d..].copy_from_slice(f_i.data());
    Ok(out)
}

/// S1 = (f W_Q)(f W_K)^T / sqrt(d_k); S2 = row cosine similarity
/// (zero-norm rows give 0); M = (S1 + S2 + 1) / 2.
pub fn modality_similarity(
    f_vi: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    d_k: usize,
) -> (Tensor, Tensor, Tensor) {
    let q = f_vi.matmul(w_q);
    let k = f_vi.matmul(w_k);
    let s1 = q.matmul(&k.transpose()).scale(1.0 / (d_k as f64).sqrt());

    let n = f_vi.rows();
    let d = f_vi.cols();
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            f_vi.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut s2 = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = (0..d).map(|c| f_vi.at2(i, c) * f_vi.at2(j, c)).sum();
                s2.set2(i, j, dot / (norms[i] * norms[j]));
            }
        }
    }
    let m = s1.zip(&s2, |a, b| (a + b + 1.0) / 2.0);
    (s1, s2, m)
}

/// Keep S1 where M > theta, send the rest to -inf, then row-softmax.
/// Rows that lose every entry become all-zero.
pub fn mask_normalize(s1: &Tensor, m: &Tensor, theta: f64) -> Tensor {
    let (n, cols) = (s1.rows(), s1.cols());
    let mut out = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..cols {
            if m.at2(i, j) > theta && s1.at2(i, j) > mx {
                mx = s1.at2(i, j);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if m.at2(i, j) > theta {
                let e = (s1.at2(i, j) - mx).exp();
                out.set2(i, j, e);
                sum += e;
            }
        }
        for j in 0..cols {
            out.set2(i, j, out.at2(i, j) / sum);
        }
    }
    out
}

/// Indices of the k largest row entries; ties break toward the lowest
/// column index.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-row top-k binarization followed by symmetrization A = (A' + A'^T)/2.
/// All-zero rows turn into self-loops instead.
pub fn binarize_adjacency(s_prime: &Tensor, k: usize) -> Result<Adjacency> {
    let (n, cols) = (s_prime.rows(), s_prime.cols());
    if n != cols {
        return Err(TrackError::ShapeMismatch(format!(
            "binarize_adjacency needs a square matrix, got {n}x{cols}"
        )));
    }
    if k == 0 || k > cols {
        return Err(TrackError::Config(format!("top_k {k} out of range 1..={cols}")));
    }
    let mut a_prime = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        let row = &s_prime.data()[i * cols..(i + 1) * cols];
        if row.iter().all(|&v| v == 0.0) {
            a_prime.set2(i, i, 1.0);
            continue;
        }
        for j in top_k_indices(row, k) {
            a_prime.set2(i, j, 1.0);
        }
    }
    let a = a_prime.add(&a_prime.transpose()).scale(0.5);
    Ok(Adjacency { a_prime, a })
}

/// Full adjacency generation, with the ablation variants selected by mode.
pub fn generate_adjacency(
    f_v: &Tensor,
    f_i: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    cfg: &AmgConfig,
) -> Result<(Adjacency, SimilarityBundle)> {
    let f_vi = concat_modalities(f_v, f_i)?;
    let (s1, s2, m) = modality_similarity(&f_vi, w_q, w_k, cfg.d_k);
    let nodes = f_vi.rows();
    match cfg.mode {
        AdjacencyMode::Amg => {
            let s_prime = mask_normalize(&s1, &m, cfg.theta);
            let adj = binarize_adjacency(&s_prime, cfg.top_k)?;
            Ok((adj, SimilarityBundle { s1, s2, m, s_prime }))
        }
        AdjacencyMode::Identity => {
            let a = Tensor::eye(nodes);
            let adj = Adjacency { a_prime: a.clone(), a };
            let s_prime = Tensor::zeros(&[nodes, nodes]);
            Ok((adj, SimilarityBundle { s1, s2, m, s_prime }))
        }
        AdjacencyMode::Qkv => {
            // Softmax of S1 with no mask: a threshold below every M entry
            // keeps everything.
            let s_prime = mask_normalize(&s1, &m, f64::NEG_INFINITY);
            let adj = binarize_adjacency(&s_prime, cfg.top_k)?;
            Ok((adj, SimilarityBundle { s1, s2, m, s_prime }))
        }
        AdjacencyMode::Cosine => {
            let adj = binarize_adjacency(&s2, cfg.top_k)?;
            let s_prime = s2.clone();
            Ok((adj, SimilarityBundle { s1, s2, m, s_prime }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed), shape)
    }

    #[test]
    fn dot_similarity_single_token() {
        let f = Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let eye = Tensor::eye(4);
        let (s1, _, _) = modality_similarity(&f, &eye, &eye, 4);
        assert_eq!(s1.data(), &[0.5]);
    }

    #[test]
    fn cosine_of_orthogonal_unit_rows() {
        let f = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let eye = Tensor::eye(2);
        let (_, s2, _) = modality_similarity(&f, &eye, &eye, 2);
        assert_eq!(s2.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mask_source_arithmetic() {
        // M = (S1 + S2 + 1) / 2 at single cells.
        let combine = |s1: f64, s2: f64| (s1 + s2 + 1.0) / 2.0;
        assert_eq!(combine(0.0, 1.0), 1.0);
        assert_eq!(combine(0.0, -1.0), 0.0);
    }

    #[test]
    fn mask_normalize_follows_threshold() {
        // Fully masked row collapses to zero.
        let s1 = Tensor::new(&[1, 1], vec![2.0]);
        let m = Tensor::new(&[1, 1], vec![0.4]);
        assert_eq!(mask_normalize(&s1, &m, 0.5).data(), &[0.0]);

        // One entry masked, two equal survivors split the row.
        let s1 = Tensor::new(&[1, 3], vec![5.0, 0.0, 0.0]);
        let m = Tensor::new(&[1, 3], vec![0.1, 0.9, 0.9]);
        let sp = mask_normalize(&s1, &m, 0.5);
        assert_eq!(sp.data(), &[0.0, 0.5, 0.5]);

        // Threshold below everything: ordinary softmax of S1.
        let s1 = Tensor::new(&[1, 2], vec![1.0, 1.0]);
        let m = Tensor::new(&[1, 2], vec![0.0, 0.0]);
        let sp = mask_normalize(&s1, &m, f64::NEG_INFINITY);
        assert!((sp.data()[0] - 0.5).abs() < 1e-12);
        assert!((sp.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binarize_selects_top_k_with_low_index_ties() {
        let row = |r: &[f64]| {
            let mut t = Tensor::zeros(&[3, 3]);
            for (j, &v) in r.iter().enumerate() {
                t.set2(0, j, v);
                t.set2(1, j, v);
                t.set2(2, j, v);
            }
            t
        };
        let adj = binarize_adjacency(&row(&[0.5, 0.3, 0.2]), 2).unwrap();
        assert_eq!(&adj.a_prime.data()[..3], &[1.0, 1.0, 0.0]);

        let adj = binarize_adjacency(&row(&[0.4, 0.4, 0.2]), 1).unwrap();
        assert_eq!(&adj.a_prime.data()[..3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetrization_halves_one_sided_edges() {
        let sp = Tensor::new(&[2, 2], vec![0.6, 0.4, 0.1, 0.9]);
        // k=1: row 0 picks col 0, row 1 picks col 1 -> A' = I -> A = I.
        let adj = binarize_adjacency(&sp, 1).unwrap();
        assert_eq!(adj.a.data(), &[1.0, 0.0, 0.0, 1.0]);

        // Construct A' = [[1,1],[0,1]] directly via k=2 on row 0 only.
        let sp = Tensor::new(&[2, 2], vec![0.6, 0.4, 0.0, 0.9]);
        let a_prime = {
            let mut t = Tensor::zeros(&[2, 2]);
            t.set2(0, 0, 1.0);
            t.set2(0, 1, 1.0);
            t.set2(1, 1, 1.0);
            t
        };
        let a = a_prime.add(&a_prime.transpose()).scale(0.5);
        assert_eq!(a.data(), &[1.0, 0.5, 0.5, 1.0]);
        let _ = sp;
    }

    #[test]
    fn fully_masked_rows_get_self_loops() {
        let sp = Tensor::zeros(&[3, 3]);
        let adj = binarize_adjacency(&sp, 2).unwrap();
        assert_eq!(adj.a, Tensor::eye(3));
    }

    #[test]
    fn identity_mode_ignores_inputs() {
        let f_v = randn(&[4, 8], 1);
        let f_i = randn(&[4, 8], 2);
        let w = randn(&[8, 8], 3);
        let cfg = AmgConfig { d_k: 8, theta: 0.5, top_k: 2, mode: AdjacencyMode::Identity };
        let (adj, _) = generate_adjacency(&f_v, &f_i, &w, &w, &cfg).unwrap();
        assert_eq!(adj.a, Tensor::eye(8));
    }

    #[test]
    fn saturated_k_gives_full_support() {
        let f_v = randn(&[4, 8], 4);
        let f_i = randn(&[4, 8], 5);
        let w_q = randn(&[8, 8], 6);
        let w_k = randn(&[8, 8], 7);
        let cfg = AmgConfig { d_k: 8, theta: f64::NEG_INFINITY, top_k: 8, mode: AdjacencyMode::Amg };
        let (adj, _) = generate_adjacency(&f_v, &f_i, &w_q, &w_k, &cfg).unwrap();
        assert!(adj.a.data().iter().all(|&v| v == 0.5 || v == 1.0));
    }

    #[test]
    fn masked_set_grows_with_theta() {
        let f_v = randn(&[4, 8], 8);
        let f_i = randn(&[4, 8], 9);
        let w_q = randn(&[8, 8], 10);
        let w_k = randn(&[8, 8], 11);
        let f_vi = concat_modalities(&f_v, &f_i).unwrap();
        let (s1, _, m) = modality_similarity(&f_vi, &w_q, &w_k, 8);
        let masked_set = |theta: f64| -> Vec<bool> {
            let sp = mask_normalize(&s1, &m, theta);
            sp.data().iter().map(|&v| v == 0.0).collect()
        };
        let mut prev = masked_set(-1.0);
        for theta in [0.0, 0.4, 0.7, 1.2] {
            let cur = masked_set(theta);
            for (p, c) in prev.iter().zip(&cur) {
                assert!(!p | c, "masked entry un-masked as theta rose");
            }
            prev = cur;
        }
    }

    /// Straight-line scalar recomputation of the full pipeline on nested
    /// vectors, sharing no code with the implementation above.
    fn scalar_oracle(
        f_v: &[Vec<f64>],
        f_i: &[Vec<f64>],
        w_q: &[Vec<f64>],
        w_k: &[Vec<f64>],
        d_k: usize,
        theta: f64,
        k: usize,
    ) -> Vec<Vec<f64>> {
        let n2 = f_v.len() * 2;
        let d = f_v[0].len();
        let dk_cols = w_q[0].len();
        let mut f = Vec::with_capacity(n2);
        for row in f_v.iter().chain(f_i.iter()) {
            f.push(row.clone());
        }
        let project = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut out = vec![vec![0.0; dk_cols]; n2];
            for i in 0..n2 {
                for j in 0..dk_cols {
                    for c in 0..d {
                        out[i][j] += f[i][c] * w[c][j];
                    }
                }
            }
            out
        };
        let q = project(w_q);
        let kk = project(w_k);
        let mut s1 = vec![vec![0.0; n2]; n2];
        for i in 0..n2 {
            for j in 0..n2 {
                for c in 0..dk_cols {
                    s1[i][j] += q[i][c] * kk[j][c];
                }
                s1[i][j] /= (d_k as f64).sqrt();
            }
        }
        let mut s2 = vec![vec![0.0; n2]; n2];
        for i in 0..n2 {
            for j in 0..n2 {
                let ni: f64 = f[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj: f64 = f[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                if ni > 0.0 && nj > 0.0 {
                    let dot: f64 = (0..d).map(|c| f[i][c] * f[j][c]).sum();
                    s2[i][j] = dot / (ni * nj);
                }
            }
        }
        let mut sp = vec![vec![0.0; n2]; n2];
        for i in 0..n2 {
            let kept: Vec<usize> = (0..n2)
                .filter(|&j| (s1[i][j] + s2[i][j] + 1.0) / 2.0 > theta)
                .collect();
            if kept.is_empty() {
                continue;
            }
            let mx = kept.iter().map(|&j| s1[i][j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &j in &kept {
                sp[i][j] = (s1[i][j] - mx).exp();
                sum += sp[i][j];
            }
            for &j in &kept {
                sp[i][j] /= sum;
            }
        }
        let mut ap = vec![vec![0.0; n2]; n2];
        for i in 0..n2 {
            if sp[i].iter().all(|&v| v == 0.0) {
                ap[i][i] = 1.0;
                continue;
            }
            let mut idx: Vec<usize> = (0..n2).collect();
            idx.sort_by(|&a, &b| sp[i][b].partial_cmp(&sp[i][a]).unwrap().then(a.cmp(&b)));
            for &j in idx.iter().take(k) {
                ap[i][j] = 1.0;
            }
        }
        let mut a = vec![vec![0.0; n2]; n2];
        for i in 0..n2 {
            for j in 0..n2 {
                a[i][j] = (ap[i][j] + ap[j][i]) / 2.0;
            }
        }
        a
    }

    #[test]
    fn amg_matches_scalar_oracle() {
        for seed in 0..10u64 {
            let n = 4;
            let d = 8;
            let f_v = randn(&[n, d], seed * 4 + 100);
            let f_i = randn(&[n, d], seed * 4 + 101);
            let w_q = randn(&[d, d], seed * 4 + 102);
            let w_k = randn(&[d, d], seed * 4 + 103);
            let cfg = AmgConfig { d_k: d, theta: 0.5, top_k: 3, mode: AdjacencyMode::Amg };
            let (adj, _) = generate_adjacency(&f_v, &f_i, &w_q, &w_k, &cfg).unwrap();

            let rows = |t: &Tensor| -> Vec<Vec<f64>> {
                (0..t.rows())
                    .map(|i| t.data()[i * t.cols()..(i + 1) * t.cols()].to_vec())
                    .collect()
            };
            let oracle = scalar_oracle(
                &rows(&f_v), &rows(&f_i), &rows(&w_q), &rows(&w_k), d, 0.5, 3,
            );
            for i in 0..2 * n {
                for j in 0..2 * n {
                    assert!(
                        (adj.a.at2(i, j) - oracle[i][j]).abs() < 1e-10,
                        "seed {seed} cell ({i},{j}): {} vs {}",
                        adj.a.at2(i, j),
                        oracle[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn adjacency_invariants_hold_over_random_inputs() {
        for seed in 0..20u64 {
            let n = 8;
            let d = 8;
            let f_v = randn(&[n, d], seed * 4 + 500);
            let f_i = randn(&[n, d], seed * 4 + 501);
            let w_q = randn(&[d, d], seed * 4 + 502);
            let w_k = randn(&[d, d], seed * 4 + 503);
            let k = 1 + (seed as usize % (2 * n));
            let cfg = AmgConfig { d_k: d, theta: 0.5, top_k: k, mode: AdjacencyMode::Amg };
            let (adj, bundle) = generate_adjacency(&f_v, &f_i, &w_q, &w_k, &cfg).unwrap();

            // Bit-exact symmetry and the {0, 0.5, 1} entry domain.
            let at = adj.a.transpose();
            assert_eq!(adj.a.data(), at.data());
            for &v in adj.a.data() {
                assert!(v == 0.0 || v == 0.5 || v == 1.0, "entry {v}");
            }
            // Degree: k ones per A' row, or a lone self-loop.
            for i in 0..2 * n {
                let ones = (0..2 * n).filter(|&j| adj.a_prime.at2(i, j) == 1.0).count();
                let sp_zero = (0..2 * n).all(|j| bundle.s_prime.at2(i, j) == 0.0);
                if sp_zero {
                    assert_eq!(ones, 1);
                    assert_eq!(adj.a_prime.at2(i, i), 1.0);
                } else {
                    assert_eq!(ones, k);
                }
            }
            // Unmasked rows of S' sum to 1.
            for i in 0..2 * n {
                let sum: f64 = (0..2 * n).map(|j| bundle.s_prime.at2(i, j)).sum();
                assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-6);
            }
            // S2 symmetric with unit diagonal.
            for i in 0..2 * n {
                assert!((bundle.s2.at2(i, i) - 1.0).abs() < 1e-12);
                for j in 0..2 * n {
                    assert!((bundle.s2.at2(i, j) - bundle.s2.at2(j, i)).abs() < 1e-12);
                }
            }
        }
    }
}
