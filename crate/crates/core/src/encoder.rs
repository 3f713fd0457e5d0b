//! Shared-weight patch encoder.
//!
//! Both modalities run through the same parameters: crops are cut into
//! patches, linearly embedded, given positional embeddings, and the
//! template and search tokens attend jointly inside each transformer
//! block. Only the search tokens come back out.

use fusetrack_tensor::{Graph, ParamStore, TapeBindings, Tensor, Var};

use crate::image::CropF;
use crate::{Result, TrackError};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub template_side: usize,
    pub search_side: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.template_side % self.patch != 0 || self.search_side % self.patch != 0 {
            return Err(TrackError::Config(format!(
                "crop sides {}x{} must divide by patch {}",
                self.template_side, self.search_side, self.patch
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(TrackError::Config(format!(
                "d_model {} must divide by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(TrackError::Config("encoder needs at least one block".into()));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Cut a crop into non-overlapping patches: row (ty*grid + tx) holds patch
/// (tx, ty) flattened in (channel, y, x) order. Single-channel crops are
/// replicated to three channels so the shared embedding sees equal widths.
pub fn patchify(crop: &CropF, patch: usize) -> Result<Tensor> {
    if crop.side % patch != 0 {
        return Err(TrackError::ShapeMismatch(format!(
            "crop side {} not divisible by patch {}",
            crop.side, patch
        )));
    }
    let grid = crop.side / patch;
    let mut out = Tensor::zeros(&[grid * grid, 3 * patch * patch]);
    for ty in 0..grid {
        for tx in 0..grid {
            let row = ty * grid + tx;
            for c in 0..3 {
                let src_c = if crop.channels == 1 { 0 } else { c };
                for py in 0..patch {
                    for px in 0..patch {
                        let v = crop.at(src_c, ty * patch + py, tx * patch + px);
                        out.set2(row, (c * patch + py) * patch + px, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Register all encoder parameters under the `enc.` namespace.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let d = cfg.d_model;
    store.insert_uniform("enc.embed.w", &[cfg.patch_dim(), d], cfg.patch_dim(), seed);
    store.insert_zeros("enc.embed.b", &[d]);
    store.insert_uniform("enc.pos.template", &[cfg.template_tokens(), d], d, seed);
    store.insert_uniform("enc.pos.search", &[cfg.search_tokens(), d], d, seed);
    for i in 0..cfg.n_blocks {
        let pre = format!("enc.block{i}");
        store.insert_ones(&format!("{pre}.ln1.gain"), &[d]);
        store.insert_zeros(&format!("{pre}.ln1.bias"), &[d]);
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert_uniform(&format!("{pre}.attn.{w}"), &[d, d], d, seed);
        }
        store.insert_ones(&format!("{pre}.ln2.gain"), &[d]);
        store.insert_zeros(&format!("{pre}.ln2.bias"), &[d]);
        store.insert_uniform(&format!("{pre}.ff.w1"), &[d, 2 * d], d, seed);
        store.insert_zeros(&format!("{pre}.ff.b1"), &[2 * d]);
        store.insert_uniform(&format!("{pre}.ff.w2"), &[2 * d, d], 2 * d, seed);
        store.insert_zeros(&format!("{pre}.ff.b2"), &[d]);
    }
    store.insert_ones("enc.ln_out.gain", &[d]);
    store.insert_zeros("enc.ln_out.bias", &[d]);
}

fn attention(g: &mut Graph, p: &TapeBindings, prefix: &str, x: Var, n_heads: usize, d: usize) -> Var {
    let q = {
        let w = p.get(&format!("{prefix}.wq"));
        g.matmul(x, w)
    };
    let k = {
        let w = p.get(&format!("{prefix}.wk"));
        g.matmul(x, w)
    };
    let v = {
        let w = p.get(&format!("{prefix}.wv"));
        g.matmul(x, w)
    };
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice(q, 1, h * dh, dh);
        let kh = g.slice(k, 1, h * dh, dh);
        let vh = g.slice(v, 1, h * dh, dh);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.affine(logits, scale, 0.0);
        let att = g.softmax_rows(logits);
        heads.push(g.matmul(att, vh));
    }
    let cat = g.concat(1, &heads);
    let wo = p.get(&format!("{prefix}.wo"));
    g.matmul(cat, wo)
}

fn feed_forward(g: &mut Graph, p: &TapeBindings, prefix: &str, x: Var) -> Var {
    let w1 = p.get(&format!("{prefix}.w1"));
    let b1 = p.get(&format!("{prefix}.b1"));
    let w2 = p.get(&format!("{prefix}.w2"));
    let b2 = p.get(&format!("{prefix}.b2"));
    let h = g.matmul(x, w1);
    let h = g.add_row_vec(h, b1);
    // ELU keeps the activation C1, which keeps finite-difference gradient
    // checks away from kink noise.
    let h = g.elu(h);
    let h = g.matmul(h, w2);
    g.add_row_vec(h, b2)
}

fn layer_norm(g: &mut Graph, p: &TapeBindings, prefix: &str, x: Var) -> Var {
    let gain = p.get(&format!("{prefix}.gain"));
    let bias = p.get(&format!("{prefix}.bias"));
    g.layer_norm_rows(x, gain, bias)
}

/// Run one modality through the shared trunk; returns the search tokens,
/// shape (search_tokens, d_model).
pub fn encode_modality(
    g: &mut Graph,
    p: &TapeBindings,
    cfg: &EncoderConfig,
    template_tokens: Tensor,
    search_tokens: Tensor,
) -> Var {
    let nt = cfg.template_tokens();
    let ns = cfg.search_tokens();
    let embed_w = p.get("enc.embed.w");
    let embed_b = p.get("enc.embed.b");

    let t_in = g.leaf(template_tokens);
    let s_in = g.leaf(search_tokens);
    let t = g.matmul(t_in, embed_w);
    let t = g.add_row_vec(t, embed_b);
    let pos_t = p.get("enc.pos.template");
    let t = g.add(t, pos_t);
    let s = g.matmul(s_in, embed_w);
    let s = g.add_row_vec(s, embed_b);
    let pos_s = p.get("enc.pos.search");
    let s = g.add(s, pos_s);

    let mut x = g.concat(0, &[t, s]);
    for i in 0..cfg.n_blocks {
        let pre = format!("enc.block{i}");
        let normed = layer_norm(g, p, &format!("{pre}.ln1"), x);
        let att = attention(g, p, &format!("{pre}.attn"), normed, cfg.n_heads, cfg.d_model);
        x = g.add(x, att);
        let normed = layer_norm(g, p, &format!("{pre}.ln2"), x);
        let ff = feed_forward(g, p, &format!("{pre}.ff"), normed);
        x = g.add(x, ff);
    }
    let x = layer_norm(g, p, "enc.ln_out", x);
    g.slice(x, 0, nt, ns)
}

/// Encode both modalities with the one shared parameter set.
/// Returns (f_v, f_i), each (search_tokens, d_model).
pub fn encode_pair(
    g: &mut Graph,
    p: &TapeBindings,
    cfg: &EncoderConfig,
    template_rgb: &CropF,
    template_ir: &CropF,
    search_rgb: &CropF,
    search_ir: &CropF,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    if template_rgb.side != cfg.template_side || search_rgb.side != cfg.search_side {
        return Err(TrackError::ShapeMismatch(format!(
            "crop sides ({}, {}) do not match encoder config ({}, {})",
            template_rgb.side, search_rgb.side, cfg.template_side, cfg.search_side
        )));
    }
    let f_v = encode_modality(
        g,
        p,
        cfg,
        patchify(template_rgb, cfg.patch)?,
        patchify(search_rgb, cfg.patch)?,
    );
    let f_i = encode_modality(
        g,
        p,
        cfg,
        patchify(template_ir, cfg.patch)?,
        patchify(search_ir, cfg.patch)?,
    );
    Ok((f_v, f_i))
}
