//! Graph fusion over the concatenated modality tokens, and the corner
//! head that turns fused tokens into a box.
//!
//! Two graph-attention layers run under the fixed adjacency, the two
//! modality halves of the output are summed, and a linear projection of
//! f_v + f_i is added back as a residual.

use fusetrack_tensor::{Graph, ParamStore, TapeBindings, Tensor, Var};

use crate::amg::Adjacency;
use crate::boxes::BoundingBox;
use crate::{Result, TrackError};

/// Hidden width of the corner head's conv stacks.
const HEAD_CHANNELS: usize = 16;

#[derive(Debug, Clone)]
pub struct MdgfConfig {
    pub d_model: usize,
    pub nhid: usize,
    pub out_model: usize,
    /// Attention heads per GAT layer; layer 1 concatenates, layer 2 averages.
    pub n_heads: usize,
    pub leaky_slope: f64,
    /// Search token grid side; the token count N is grid^2.
    pub grid: usize,
    /// Search crop side in pixels, for scaling corner coordinates.
    pub crop_side: usize,
}

impl MdgfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.nhid % self.n_heads != 0 {
            return Err(TrackError::Config(format!(
                "nhid {} must divide by gat heads {}",
                self.nhid, self.n_heads
            )));
        }
        if self.grid == 0 || self.crop_side % self.grid != 0 {
            return Err(TrackError::Config(format!(
                "crop side {} must divide by token grid {}",
                self.crop_side, self.grid
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

/// Register fusion parameters under `mdgf.` plus the tracking head under
/// `mdgf.head.`.
pub fn init_mdgf_params(store: &mut ParamStore, cfg: &MdgfConfig, seed: u64) {
    let per_head1 = cfg.nhid / cfg.n_heads;
    for j in 0..cfg.n_heads {
        store.insert_uniform(
            &format!("mdgf.gat1.h{j}.w"),
            &[cfg.d_model, per_head1],
            cfg.d_model,
            seed,
        );
        store.insert_uniform(&format!("mdgf.gat1.h{j}.a"), &[2 * per_head1, 1], 2 * per_head1, seed);
        store.insert_uniform(
            &format!("mdgf.gat2.h{j}.w"),
            &[cfg.nhid, cfg.out_model],
            cfg.nhid,
            seed,
        );
        store.insert_uniform(
            &format!("mdgf.gat2.h{j}.a"),
            &[2 * cfg.out_model, 1],
            2 * cfg.out_model,
            seed,
        );
    }
    store.insert_uniform("mdgf.proj.w", &[cfg.d_model, cfg.out_model], cfg.d_model, seed);
    store.insert_zeros("mdgf.proj.b", &[cfg.out_model]);
    init_corner_head_params(store, "mdgf.head", cfg.out_model, seed);
}

/// Register one corner head (two conv stacks) under the given prefix.
pub fn init_corner_head_params(store: &mut ParamStore, prefix: &str, in_channels: usize, seed: u64) {
    for corner in ["tl", "br"] {
        let p = format!("{prefix}.{corner}");
        store.insert_uniform(
            &format!("{p}.conv1.w"),
            &[HEAD_CHANNELS, in_channels, 3, 3],
            in_channels * 9,
            seed,
        );
        store.insert_zeros(&format!("{p}.conv1.b"), &[HEAD_CHANNELS]);
        store.insert_ones(&format!("{p}.norm1.gain"), &[HEAD_CHANNELS]);
        store.insert_zeros(&format!("{p}.norm1.bias"), &[HEAD_CHANNELS]);
        store.insert_uniform(
            &format!("{p}.conv2.w"),
            &[HEAD_CHANNELS, HEAD_CHANNELS, 3, 3],
            HEAD_CHANNELS * 9,
            seed,
        );
        store.insert_zeros(&format!("{p}.conv2.b"), &[HEAD_CHANNELS]);
        store.insert_ones(&format!("{p}.norm2.gain"), &[HEAD_CHANNELS]);
        store.insert_zeros(&format!("{p}.norm2.bias"), &[HEAD_CHANNELS]);
        store.insert_uniform(&format!("{p}.conv3.w"), &[1, HEAD_CHANNELS, 1, 1], HEAD_CHANNELS, seed);
        store.insert_zeros(&format!("{p}.conv3.b"), &[1]);
    }
}

/// One graph-attention head. Edge weights come from the features; the
/// adjacency supplies connectivity only.
///
/// Returns (aggregated features, attention matrix).
pub fn gat_head(
    g: &mut Graph,
    h: Var,
    w: Var,
    a: Var,
    keep: &[bool],
    slope: f64,
) -> (Var, Var) {
    let nodes = g.value(h).rows();
    let f_out = g.value(w).cols();
    assert_eq!(g.value(a).shape(), &[2 * f_out, 1], "attention vector shape");
    assert_eq!(keep.len(), nodes * nodes, "connectivity mask size");

    let gh = g.matmul(h, w);
    let a_left = g.slice(a, 0, 0, f_out);
    let a_right = g.slice(a, 0, f_out, f_out);
    let left = g.matmul(gh, a_left);
    let right = g.matmul(gh, a_right);
    let ones_row = g.leaf(Tensor::full(&[1, nodes], 1.0));
    let left_grid = g.matmul(left, ones_row);
    let right_grid = g.matmul(right, ones_row);
    let right_grid_t = g.transpose(right_grid);
    let e = g.add(left_grid, right_grid_t);
    let e = g.leaky_relu(e, slope);
    let alpha = g.masked_softmax_rows(e, keep);
    (g.matmul(alpha, gh), alpha)
}

fn gat_layer(
    g: &mut Graph,
    p: &TapeBindings,
    layer: usize,
    h: Var,
    keep: &[bool],
    cfg: &MdgfConfig,
) -> Var {
    let mut outs = Vec::with_capacity(cfg.n_heads);
    for j in 0..cfg.n_heads {
        let w = p.get(&format!("mdgf.gat{layer}.h{j}.w"));
        let a = p.get(&format!("mdgf.gat{layer}.h{j}.a"));
        let (out, _) = gat_head(g, h, w, a, keep, cfg.leaky_slope);
        outs.push(out);
    }
    if layer == 1 {
        g.concat(1, &outs)
    } else {
        // Final layer: heads are averaged, not concatenated.
        let mut sum = outs[0];
        for &o in &outs[1..] {
            sum = g.add(sum, o);
        }
        g.affine(sum, 1.0 / cfg.n_heads as f64, 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    /// First-layer output, (2N, nhid * heads).
    pub f_l1: Var,
    /// First-layer output reduced to the N search cells by summing the
    /// modality halves; this is what conditions the diffusion model.
    pub f_l1_search: Var,
    /// Second-layer output, (2N, out_model).
    pub f_l2: Var,
    /// Fused search feature, (N, out_model).
    pub f_s1: Var,
}

/// Two GAT layers under the adjacency, modality halves summed, plus a
/// linear residual of f_v + f_i.
pub fn mdgf_forward(
    g: &mut Graph,
    p: &TapeBindings,
    cfg: &MdgfConfig,
    f_v: Var,
    f_i: Var,
    adj: &Adjacency,
) -> Result<FusionVars> {
    cfg.validate()?;
    let n = g.value(f_v).rows();
    if adj.nodes() != 2 * n {
        return Err(TrackError::ShapeMismatch(format!(
            "adjacency over {} nodes, features give {}",
            adj.nodes(),
            2 * n
        )));
    }
    let keep = adj.keep_flags();
    let f_vi = g.concat(0, &[f_v, f_i]);
    let l1 = gat_layer(g, p, 1, f_vi, &keep, cfg);
    let f_l1 = g.elu(l1);
    let l1_top = g.slice(f_l1, 0, 0, n);
    let l1_bottom = g.slice(f_l1, 0, n, n);
    let f_l1_search = g.add(l1_top, l1_bottom);
    let f_l2 = gat_layer(g, p, 2, f_l1, &keep, cfg);
    let top = g.slice(f_l2, 0, 0, n);
    let bottom = g.slice(f_l2, 0, n, n);
    let merged = g.add(top, bottom);
    let sum_vi = g.add(f_v, f_i);
    let proj_w = p.get("mdgf.proj.w");
    let proj_b = p.get("mdgf.proj.b");
    let resid = g.matmul(sum_vi, proj_w);
    let resid = g.add_row_vec(resid, proj_b);
    let f_s1 = g.add(merged, resid);
    Ok(FusionVars { f_l1, f_l1_search, f_l2, f_s1 })
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Corner coordinates in crop pixels, each a (1,1) tape node, already
    /// reordered so (x1,y1) <= (x2,y2) with at least 1 px extent.
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
    /// Corner probability maps, each (1, N), rows summing to 1.
    pub prob_tl: Var,
    pub prob_br: Var,
    /// Geometric mean of the two maps' maxima (off-tape report value).
    pub score: f64,
}

impl HeadOutput {
    /// Current box value in crop pixels.
    pub fn to_box(&self, g: &Graph) -> BoundingBox {
        let x1 = g.value(self.x1).item();
        let y1 = g.value(self.y1).item();
        let x2 = g.value(self.x2).item();
        let y2 = g.value(self.y2).item();
        BoundingBox::from_corners(x1, y1, x2, y2)
    }
}

/// Expected coordinates under a (1, N) probability map over the token
/// grid, in crop pixels (token centers).
pub fn soft_argmax(g: &mut Graph, probs: Var, grid: usize, crop_side: usize) -> (Var, Var) {
    let n = grid * grid;
    assert_eq!(g.value(probs).shape(), &[1, n]);
    let scale = crop_side as f64 / grid as f64;
    let mut cx = Tensor::zeros(&[n, 1]);
    let mut cy = Tensor::zeros(&[n, 1]);
    for i in 0..n {
        let ty = i / grid;
        let tx = i % grid;
        cx.data_mut()[i] = (tx as f64 + 0.5) * scale;
        cy.data_mut()[i] = (ty as f64 + 0.5) * scale;
    }
    let cx = g.leaf(cx);
    let cy = g.leaf(cy);
    (g.matmul(probs, cx), g.matmul(probs, cy))
}

fn corner_stack(g: &mut Graph, p: &TapeBindings, prefix: &str, x: Var) -> Var {
    let c1w = p.get(&format!("{prefix}.conv1.w"));
    let c1b = p.get(&format!("{prefix}.conv1.b"));
    let n1g = p.get(&format!("{prefix}.norm1.gain"));
    let n1b = p.get(&format!("{prefix}.norm1.bias"));
    let c2w = p.get(&format!("{prefix}.conv2.w"));
    let c2b = p.get(&format!("{prefix}.conv2.b"));
    let n2g = p.get(&format!("{prefix}.norm2.gain"));
    let n2b = p.get(&format!("{prefix}.norm2.bias"));
    let c3w = p.get(&format!("{prefix}.conv3.w"));
    let c3b = p.get(&format!("{prefix}.conv3.b"));
    let h = g.conv2d(x, c1w, c1b, 1, 1);
    let h = g.channel_norm(h, n1g, n1b);
    let h = g.relu(h);
    let h = g.conv2d(h, c2w, c2b, 1, 1);
    let h = g.channel_norm(h, n2g, n2b);
    let h = g.relu(h);
    g.conv2d(h, c3w, c3b, 1, 0)
}

/// Corner head: two conv stacks over the token grid, softmax over all
/// cells, soft-argmax corners scaled to crop pixels.
pub fn corner_head(
    g: &mut Graph,
    p: &TapeBindings,
    prefix: &str,
    f_s1: Var,
    cfg: &MdgfConfig,
) -> Result<HeadOutput> {
    let n = cfg.tokens();
    if g.value(f_s1).shape() != [n, cfg.out_model] {
        return Err(TrackError::ShapeMismatch(format!(
            "corner head input {:?}, expected ({n}, {})",
            g.value(f_s1).shape(),
            cfg.out_model
        )));
    }
    let x = g.tokens_to_grid(f_s1, cfg.grid, cfg.grid);
    let mut corners = Vec::with_capacity(2);
    let mut probs = Vec::with_capacity(2);
    for corner in ["tl", "br"] {
        let logits = corner_stack(g, p, &format!("{prefix}.{corner}"), x);
        let flat = g.reshape(logits, &[1, n]);
        let prob = g.softmax_rows(flat);
        let (cx, cy) = soft_argmax(g, prob, cfg.grid, cfg.crop_side);
        corners.push((cx, cy));
        probs.push(prob);
    }
    let (ax, ay) = corners[0];
    let (bx, by) = corners[1];
    let x1 = g.min(ax, bx);
    let y1 = g.min(ay, by);
    let x2 = g.max(ax, bx);
    let y2 = g.max(ay, by);
    // Guarantee at least 1 px extent so GIoU stays defined.
    let x1p = g.affine(x1, 1.0, 1.0);
    let y1p = g.affine(y1, 1.0, 1.0);
    let x2 = g.max(x2, x1p);
    let y2 = g.max(y2, y1p);

    let max_of = |g: &Graph, v: Var| g.value(v).data().iter().cloned().fold(f64::MIN, f64::max);
    let score = (max_of(g, probs[0]) * max_of(g, probs[1])).sqrt();
    Ok(HeadOutput { x1, y1, x2, y2, prob_tl: probs[0], prob_br: probs[1], score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amg::binarize_adjacency;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed), shape)
    }

    /// Random symmetric connectivity with guaranteed self-loops.
    fn random_keep(nodes: usize, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = vec![false; nodes * nodes];
        for i in 0..nodes {
            keep[i * nodes + i] = true;
            for j in (i + 1)..nodes {
                if rng.gen_bool(0.4) {
                    keep[i * nodes + j] = true;
                    keep[j * nodes + i] = true;
                }
            }
        }
        keep
    }

    #[test]
    fn singleton_self_loop_passes_features_through() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(&[1, 3], vec![0.3, -0.7, 2.0]));
        let w = g.leaf(Tensor::eye(3));
        let a = g.leaf(randn(&[6, 1], 1));
        let (out, alpha) = gat_head(&mut g, h, w, a, &[true], 0.2);
        assert_eq!(g.value(out).data(), &[0.3, -0.7, 2.0]);
        assert_eq!(g.value(alpha).data(), &[1.0]);
    }

    #[test]
    fn identity_adjacency_maps_each_node_alone() {
        let nodes = 5;
        let mut g = Graph::new();
        let ht = randn(&[nodes, 4], 2);
        let wt = randn(&[4, 3], 3);
        let h = g.leaf(ht.clone());
        let w = g.leaf(wt.clone());
        let a = g.leaf(randn(&[6, 1], 4));
        let keep: Vec<bool> = (0..nodes * nodes).map(|i| i / nodes == i % nodes).collect();
        let (out, _) = gat_head(&mut g, h, w, a, &keep, 0.2);
        let want = ht.matmul(&wt);
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_over_neighbors() {
        for nodes in [6, 9, 12] {
            let mut g = Graph::new();
            let h = g.leaf(randn(&[nodes, 5], nodes as u64));
            let w = g.leaf(randn(&[5, 4], nodes as u64 + 1));
            let a = g.leaf(randn(&[8, 1], nodes as u64 + 2));
            let keep = random_keep(nodes, nodes as u64 + 3);
            let (_, alpha) = gat_head(&mut g, h, w, a, &keep, 0.2);
            let av = g.value(alpha);
            for i in 0..nodes {
                let sum: f64 = (0..nodes).map(|j| av.at2(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
                for j in 0..nodes {
                    if !keep[i * nodes + j] {
                        assert_eq!(av.at2(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        for nodes in 6..=12usize {
            let seed = nodes as u64 * 10;
            let ht = randn(&[nodes, 5], seed);
            let wt = randn(&[5, 4], seed + 1);
            let at = randn(&[8, 1], seed + 2);
            let keep = random_keep(nodes, seed + 3);

            // Reversal permutation p(i) = nodes-1-i.
            let perm: Vec<usize> = (0..nodes).rev().collect();
            let mut hp = Tensor::zeros(&[nodes, 5]);
            for i in 0..nodes {
                for c in 0..5 {
                    hp.set2(i, c, ht.at2(perm[i], c));
                }
            }
            let mut keep_p = vec![false; nodes * nodes];
            for i in 0..nodes {
                for j in 0..nodes {
                    keep_p[i * nodes + j] = keep[perm[i] * nodes + perm[j]];
                }
            }

            let run = |hin: &Tensor, k: &[bool]| -> Tensor {
                let mut g = Graph::new();
                let h = g.leaf(hin.clone());
                let w = g.leaf(wt.clone());
                let a = g.leaf(at.clone());
                let (out, _) = gat_head(&mut g, h, w, a, k, 0.2);
                g.value(out).clone()
            };
            let base = run(&ht, &keep);
            let permuted = run(&hp, &keep_p);
            for i in 0..nodes {
                for c in 0..4 {
                    assert!(
                        (permuted.at2(i, c) - base.at2(perm[i], c)).abs() < 1e-5,
                        "nodes={nodes} out[{i}][{c}]"
                    );
                }
            }
        }
    }

    #[test]
    fn non_neighbor_features_cannot_reach_a_node() {
        let nodes = 7;
        let ht = randn(&[nodes, 5], 70);
        let wt = randn(&[5, 4], 71);
        let at = randn(&[8, 1], 72);
        let mut keep = random_keep(nodes, 73);
        // Make node 6 isolated from node 0.
        keep[6 * nodes] = false;
        keep[6] = false;

        let run = |hin: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let h = g.leaf(hin.clone());
            let w = g.leaf(wt.clone());
            let a = g.leaf(at.clone());
            let (out, _) = gat_head(&mut g, h, w, a, &keep, 0.2);
            g.value(out).clone()
        };
        let base = run(&ht);
        let mut zeroed = ht.clone();
        for c in 0..5 {
            zeroed.set2(6, c, 0.0);
        }
        let changed = run(&zeroed);
        for c in 0..4 {
            assert!((base.at2(0, c) - changed.at2(0, c)).abs() < 1e-12);
        }
    }

    fn tiny_mdgf() -> MdgfConfig {
        MdgfConfig {
            d_model: 8,
            nhid: 6,
            out_model: 4,
            n_heads: 1,
            leaky_slope: 0.2,
            grid: 2,
            crop_side: 16,
        }
    }

    #[test]
    fn zero_projection_leaves_pure_graph_sum() {
        let cfg = tiny_mdgf();
        let n = cfg.tokens();
        let mut store = ParamStore::new();
        init_mdgf_params(&mut store, &cfg, 5);
        *store.tensor_mut("mdgf.proj.w") = Tensor::zeros(&[cfg.d_model, cfg.out_model]);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f_v = g.leaf(randn(&[n, cfg.d_model], 80));
        let f_i = g.leaf(randn(&[n, cfg.d_model], 81));
        let sp = randn(&[2 * n, 2 * n], 82).map(f64::abs);
        let adj = binarize_adjacency(&sp, 3).unwrap();
        let fused = mdgf_forward(&mut g, &p, &cfg, f_v, f_i, &adj).unwrap();
        let l2 = g.value(fused.f_l2).clone();
        let out = g.value(fused.f_s1);
        for i in 0..n {
            for c in 0..cfg.out_model {
                let want = l2.at2(i, c) + l2.at2(i + n, c);
                assert!((out.at2(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modality_symmetric_inputs_give_equal_halves() {
        let cfg = tiny_mdgf();
        let n = cfg.tokens();
        let mut store = ParamStore::new();
        init_mdgf_params(&mut store, &cfg, 6);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let feat = randn(&[n, cfg.d_model], 90);
        let f_v = g.leaf(feat.clone());
        let f_i = g.leaf(feat);
        // A = [[B, C], [C, B]] with symmetric blocks: swap-invariant.
        let b = Tensor::eye(n);
        let mut c = Tensor::zeros(&[n, n]);
        for i in 0..n {
            c.set2(i, (i + 1) % n, 0.5);
            c.set2((i + 1) % n, i, 0.5);
        }
        let mut a = Tensor::zeros(&[2 * n, 2 * n]);
        for i in 0..n {
            for j in 0..n {
                a.set2(i, j, b.at2(i, j));
                a.set2(i + n, j + n, b.at2(i, j));
                a.set2(i, j + n, c.at2(i, j));
                a.set2(i + n, j, c.at2(i, j));
            }
        }
        let adj = Adjacency { a_prime: a.clone(), a };
        let fused = mdgf_forward(&mut g, &p, &cfg, f_v, f_i, &adj).unwrap();
        let l2 = g.value(fused.f_l2);
        for i in 0..n {
            for ch in 0..cfg.out_model {
                assert!((l2.at2(i, ch) - l2.at2(i + n, ch)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fused_output_has_search_token_shape() {
        let cfg = MdgfConfig { n_heads: 2, ..tiny_mdgf() };
        let n = cfg.tokens();
        let mut store = ParamStore::new();
        init_mdgf_params(&mut store, &cfg, 7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f_v = g.leaf(randn(&[n, cfg.d_model], 100));
        let f_i = g.leaf(randn(&[n, cfg.d_model], 101));
        let sp = randn(&[2 * n, 2 * n], 102).map(f64::abs);
        let adj = binarize_adjacency(&sp, 2).unwrap();
        let fused = mdgf_forward(&mut g, &p, &cfg, f_v, f_i, &adj).unwrap();
        assert_eq!(g.value(fused.f_s1).shape(), &[n, cfg.out_model]);
        assert_eq!(g.value(fused.f_l1).shape(), &[2 * n, cfg.nhid]);
        assert!(g.value(fused.f_s1).all_finite());
    }

    #[test]
    fn soft_argmax_reads_delta_and_uniform_maps() {
        let grid = 8;
        let n = grid * grid;
        // Delta at token (ty=0, tx=0) and at (7,7), crop 64 px.
        let mut g = Graph::new();
        let mut d0 = Tensor::zeros(&[1, n]);
        d0.set2(0, 0, 1.0);
        let p0 = g.leaf(d0);
        let (x, y) = soft_argmax(&mut g, p0, grid, 64);
        assert!((g.value(x).item() - 4.0).abs() < 1e-12);
        assert!((g.value(y).item() - 4.0).abs() < 1e-12);

        let mut d1 = Tensor::zeros(&[1, n]);
        d1.set2(0, n - 1, 1.0);
        let p1 = g.leaf(d1);
        let (x, y) = soft_argmax(&mut g, p1, grid, 64);
        assert!((g.value(x).item() - 60.0).abs() < 1e-12);
        assert!((g.value(y).item() - 60.0).abs() < 1e-12);

        let u = g.leaf(Tensor::full(&[1, n], 1.0 / n as f64));
        let (x, y) = soft_argmax(&mut g, u, grid, 64);
        assert!((g.value(x).item() - 32.0).abs() < 1e-9);
        assert!((g.value(y).item() - 32.0).abs() < 1e-9);
    }

    #[test]
    fn corner_head_emits_valid_distributions_and_ordered_box() {
        let cfg = MdgfConfig { grid: 4, crop_side: 32, ..tiny_mdgf() };
        let mut store = ParamStore::new();
        init_mdgf_params(&mut store, &cfg, 8);
        for seed in 0..5u64 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let f = g.leaf(randn(&[cfg.tokens(), cfg.out_model], 200 + seed));
            let head = corner_head(&mut g, &p, "mdgf.head", f, &cfg).unwrap();
            for probs in [head.prob_tl, head.prob_br] {
                let pv = g.value(probs);
                assert!(pv.data().iter().all(|&v| v >= 0.0));
                let sum: f64 = pv.data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            let b = head.to_box(&g);
            // The 1 px floor holds up to one rounding step of x1 + 1.
            assert!(b.w >= 1.0 - 1e-9 && b.h >= 1.0 - 1e-9);
            assert!(b.x >= 0.0 && b.y >= 0.0);
            assert!(b.x + b.w <= cfg.crop_side as f64 + 1.0);
            assert!(head.score > 0.0 && head.score <= 1.0);
        }
    }
}
