//! Parameter initialization for the full model and the shared forward
//! pipeline used by training and tracking.

use fusetrack_tensor::{Graph, ParamStore, TapeBindings, Var};

use crate::amg::{generate_adjacency, Adjacency};
use crate::boxes::BoundingBox;
use crate::config::{FusionMode, RunConfig};
use crate::encoder::{encode_pair, init_encoder_params};
use crate::image::CropF;
use crate::mdgf::{corner_head, init_corner_head_params, init_mdgf_params, mdgf_forward, FusionVars, HeadOutput};
use crate::synthgen::{crop_regions, CropAffine, CropKind, SequenceRecord};
use crate::tgid::init_tgid_params;
use crate::{Result, TrackError};

/// Initialize every parameter of the pipeline. The adjacency projections
/// are frozen from the start: the mask/top-k step is a gradient barrier,
/// so no training signal can reach them.
pub fn init_params(cfg: &RunConfig) -> ParamStore {
    let seed = cfg.seed;
    let mut store = ParamStore::new();
    init_encoder_params(&mut store, &cfg.encoder(), seed);
    store.insert_uniform("amg.wq", &[cfg.d_model, cfg.d_k], cfg.d_model, seed);
    store.insert_uniform("amg.wk", &[cfg.d_model, cfg.d_k], cfg.d_model, seed);
    store.set_trainable_prefix("amg.", false);
    init_mdgf_params(&mut store, &cfg.mdgf(), seed);
    init_tgid_params(&mut store, &cfg.tgid(), seed);
    init_corner_head_params(&mut store, "diffhead", cfg.out_model, seed);
    store
}

/// The four crops feeding one forward pass, plus the affine mapping the
/// search crop back to frame coordinates.
#[derive(Debug, Clone)]
pub struct CropSet {
    pub template_rgb: CropF,
    pub template_ir: CropF,
    pub search_rgb: CropF,
    pub search_ir: CropF,
    pub search_affine: CropAffine,
}

/// Cut template crops around `template_box` in `template_frame` and search
/// crops around `search_center` in `search_frame`.
pub fn make_crops(
    record: &SequenceRecord,
    cfg: &RunConfig,
    template_frame: usize,
    template_box: &BoundingBox,
    search_frame: usize,
    search_center: &BoundingBox,
) -> Result<CropSet> {
    let geom = cfg.crop_geometry();
    let (template_rgb, template_ir, _) =
        crop_regions(record, template_frame, template_box, &geom, CropKind::Template)?;
    let (search_rgb, search_ir, search_affine) =
        crop_regions(record, search_frame, search_center, &geom, CropKind::Search)?;
    Ok(CropSet { template_rgb, template_ir, search_rgb, search_ir, search_affine })
}

/// Everything the first stage produces for one search frame.
pub struct StageOne {
    pub f_v: Var,
    pub f_i: Var,
    /// Fused search feature feeding the head (and diffusion).
    pub f_s1: Var,
    /// Graph fusion internals; absent in baseline mode.
    pub fusion: Option<FusionVars>,
    pub adjacency: Option<Adjacency>,
    pub head: HeadOutput,
}

/// Encoder -> adjacency -> fusion -> corner head. In baseline mode the
/// graph step is skipped and the projection alone fuses the modalities.
pub fn run_stage1(
    g: &mut Graph,
    p: &TapeBindings,
    store: &ParamStore,
    cfg: &RunConfig,
    crops: &CropSet,
) -> Result<StageOne> {
    let enc_cfg = cfg.encoder();
    let mdgf_cfg = cfg.mdgf();
    let (f_v, f_i) = encode_pair(
        g,
        p,
        &enc_cfg,
        &crops.template_rgb,
        &crops.template_ir,
        &crops.search_rgb,
        &crops.search_ir,
    )?;

    let (f_s1, fusion, adjacency) = match cfg.fusion {
        FusionMode::Graph => {
            let fv_val = g.value(f_v).clone();
            let fi_val = g.value(f_i).clone();
            let (adj, _) = generate_adjacency(
                &fv_val,
                &fi_val,
                store.tensor("amg.wq"),
                store.tensor("amg.wk"),
                &cfg.amg(),
            )?;
            let fusion = mdgf_forward(g, p, &mdgf_cfg, f_v, f_i, &adj)?;
            (fusion.f_s1, Some(fusion), Some(adj))
        }
        FusionMode::Baseline => {
            let sum = g.add(f_v, f_i);
            let w = p.get("mdgf.proj.w");
            let b = p.get("mdgf.proj.b");
            let proj = g.matmul(sum, w);
            let f_s1 = g.add_row_vec(proj, b);
            (f_s1, None, None)
        }
    };
    let head = corner_head(g, p, "mdgf.head", f_s1, &mdgf_cfg)?;
    Ok(StageOne { f_v, f_i, f_s1, fusion, adjacency, head })
}

/// Fusion internals or an error: stage two cannot run in baseline mode.
pub fn require_fusion(stage1: &StageOne) -> Result<&FusionVars> {
    stage1.fusion.as_ref().ok_or_else(|| {
        TrackError::Config("diffusion stage needs graph fusion (fusion=graph)".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_sequence;

    fn desk_tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        // Shrink the trunk so the test stays fast; geometry stays real.
        cfg.n_blocks = 1;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_k = 16;
        cfg.nhid = 8;
        cfg.out_model = 8;
        cfg
    }

    #[test]
    fn init_covers_every_namespace_and_freezes_projections() {
        let cfg = desk_tiny();
        let store = init_params(&cfg);
        for prefix in ["enc.", "amg.", "mdgf.", "tgid.", "diffhead."] {
            assert!(
                store.names().any(|n| n.starts_with(prefix)),
                "no parameters under {prefix}"
            );
        }
        assert!(!store.get("amg.wq").unwrap().trainable);
        assert!(!store.get("amg.wk").unwrap().trainable);
        assert!(store.get("enc.embed.w").unwrap().trainable);
    }

    #[test]
    fn stage1_runs_in_both_fusion_modes() {
        let mut cfg = desk_tiny();
        let record = generate_sequence(&cfg.scene()).unwrap();
        let store = init_params(&cfg);
        let gt0 = record.gt_track[0];
        let crops = make_crops(&record, &cfg, 0, &gt0, 1, &record.gt_track[1]).unwrap();

        for mode in [FusionMode::Graph, FusionMode::Baseline] {
            cfg.fusion = mode;
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let out = run_stage1(&mut g, &p, &store, &cfg, &crops).unwrap();
            let n = cfg.encoder().search_tokens();
            assert_eq!(g.value(out.f_s1).shape(), &[n, cfg.out_model]);
            let b = out.head.to_box(&g);
            assert!(b.is_valid());
            assert_eq!(out.fusion.is_some(), mode == FusionMode::Graph);
        }
    }

    #[test]
    fn baseline_mode_rejects_diffusion() {
        let mut cfg = desk_tiny();
        cfg.fusion = FusionMode::Baseline;
        let record = generate_sequence(&cfg.scene()).unwrap();
        let store = init_params(&cfg);
        let crops =
            make_crops(&record, &cfg, 0, &record.gt_track[0], 1, &record.gt_track[1]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = run_stage1(&mut g, &p, &store, &cfg, &crops).unwrap();
        assert!(require_fusion(&out).is_err());
    }
}
