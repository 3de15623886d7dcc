//! Toy vision-transformer trunk: frozen base weights, mixture-of-encoder
//! adapters in selected blocks, a shuffled positional embedding on the
//! chromaticity branch, one linear head per cue, and min-aggregation of the
//! per-cue probabilities.

use crate::cues::CueBundle;
use crate::error::{Error, Result};
use crate::image::ImagePlanes;
use crate::mat::{Mat, Real};
use crate::moea::{
    build_moea_forward, ExpertBank, GateRecord, MoeaLayer, MoeaNodes, RouterParams, DEFAULT_TAU,
};
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub img_size: usize,
    pub patch_size: usize,
    /// embedding dimension
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    /// block indices carrying an adapter
    pub moea_blocks: Vec<usize>,
    pub n_experts: usize,
    pub seed: u64,
    /// positional embeddings are frozen by default
    pub train_pos: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            img_size: 32,
            patch_size: 4,
            d: 32,
            depth: 4,
            heads: 2,
            moea_blocks: vec![2, 3],
            n_experts: 4,
            seed: 0,
            train_pos: false,
        }
    }
}

impl BackboneConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        BackboneConfig {
            img_size: 8,
            patch_size: 4,
            d: 8,
            depth: 2,
            heads: 2,
            moea_blocks: vec![1],
            n_experts: 3,
            seed: 0,
            train_pos: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        if self.moea_blocks.iter().any(|&b| b >= self.depth) {
            return Err(Error::Config(format!(
                "moea_blocks {:?} out of range for depth {}",
                self.moea_blocks, self.depth
            )));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of patch tokens L.
    pub fn n_patches(&self) -> usize {
        let side = self.img_size / self.patch_size;
        side * side
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Router projection dimension.
    pub fn d_router(&self) -> usize {
        (self.d / 4).max(2)
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d
    }
}

/// Class-token embedding plus per-patch embeddings.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub p_cls: Vec<f32>,
    /// L×d
    pub p_patch: Mat<f32>,
}

/// Pre-sigmoid per-cue outputs; positive means "real".
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MultiCueLogits {
    pub img_logit: f32,
    pub hf_logit: f32,
    pub ci_logit: f32,
}

impl MultiCueLogits {
    pub fn as_array(&self) -> [f32; 3] {
        [self.img_logit, self.hf_logit, self.ci_logit]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Real,
    Fake,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Real => write!(f, "real"),
            Decision::Fake => write!(f, "fake"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueKind {
    Img,
    Hf,
    Ci,
}

impl CueKind {
    pub const ALL: [CueKind; 3] = [CueKind::Img, CueKind::Hf, CueKind::Ci];

    pub fn name(&self) -> &'static str {
        match self {
            CueKind::Img => "img",
            CueKind::Hf => "hf",
            CueKind::Ci => "ci",
        }
    }
}

fn sigmoid(z: f32) -> f64 {
    1.0 / (1.0 + (-z as f64).exp())
}

/// Minimum per-cue probability-of-real; any cue can veto realness. Ties at
/// the threshold count as real.
pub fn aggregate_min(logits: &MultiCueLogits, threshold: f64) -> (Decision, f64) {
    let score = logits
        .as_array()
        .iter()
        .map(|&z| sigmoid(z))
        .fold(f64::INFINITY, f64::min);
    let decision = if score >= threshold {
        Decision::Real
    } else {
        Decision::Fake
    };
    (decision, score)
}

/// Uniform random permutation of the patch embeddings, drawn once from
/// `seed`; the class token stays at index 0.
pub fn make_shuffled_positions(pe: &PositionalEmbedding, seed: u64) -> PositionalEmbedding {
    let l = pe.p_patch.rows();
    let perm = patch_permutation(seed, l);
    let mut shuffled = Mat::zeros(l, pe.p_patch.cols());
    for (dst, &src) in perm.iter().enumerate() {
        shuffled.row_mut(dst).copy_from_slice(pe.p_patch.row(src));
    }
    PositionalEmbedding {
        p_cls: pe.p_cls.clone(),
        p_patch: shuffled,
    }
}

// stream tag keeping the shuffle rng independent of the init rng
const SHUFFLE_STREAM: u64 = 0x53_48_55_46_46_4c_45_31;

/// Fisher-Yates permutation of `0..l` from a dedicated seeded stream.
pub fn patch_permutation(seed: u64, l: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut rng);
    perm
}

/// One learnable (or frozen) tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat<f32>,
    pub trainable: bool,
}

/// Ordered parameter registry; order is the checkpoint payload order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn push(&mut self, name: String, value: Mat<f32>, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct MoeaLayout {
    pub w_u: usize,
    pub router_w1: usize,
    /// stored row-per-expert (N×d_e)
    pub router_we_rows: usize,
    pub tau: usize,
    pub full_expert: usize,
    pub lowrank: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
    pub moea: Option<MoeaLayout>,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<BlockLayout>,
    pub ln_f_g: usize,
    pub ln_f_b: usize,
    /// (w, b) per cue in [img, hf, ci] order
    pub heads: [(usize, usize); 3],
}

/// The full detector: config, parameters, layout, and the fixed patch
/// shuffle for the chromaticity branch.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    pub layout: Layout,
    /// permutation over patch indices (length L)
    pub shuffle_perm: Vec<usize>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f32> {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

fn small_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f32> {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-0.02..=0.02f32))
}

impl Model {
    /// Build and initialize a model; every random draw comes from one
    /// seeded stream in declaration order, so construction is
    /// deterministic.
    pub fn new(cfg: &BackboneConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d;
        let mut params = ParamSet::default();

        let patch_w = params.push("patch.w".into(), xavier(&mut rng, cfg.patch_dim(), d), false);
        let patch_b = params.push("patch.b".into(), Mat::zeros(1, d), false);
        let cls = params.push("cls".into(), small_uniform(&mut rng, 1, d), false);
        let pos = params.push(
            "pos".into(),
            small_uniform(&mut rng, cfg.seq_len(), d),
            cfg.train_pos,
        );

        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = |s: &str| format!("block{b}.{s}");
            let ln1_g = params.push(p("ln1.g"), ones(1, d), false);
            let ln1_b = params.push(p("ln1.b"), Mat::zeros(1, d), false);
            let wq = params.push(p("attn.wq"), xavier(&mut rng, d, d), false);
            let bq = params.push(p("attn.bq"), Mat::zeros(1, d), false);
            let wk = params.push(p("attn.wk"), xavier(&mut rng, d, d), false);
            let bk = params.push(p("attn.bk"), Mat::zeros(1, d), false);
            let wv = params.push(p("attn.wv"), xavier(&mut rng, d, d), false);
            let bv = params.push(p("attn.bv"), Mat::zeros(1, d), false);
            let wo = params.push(p("attn.wo"), xavier(&mut rng, d, d), false);
            let bo = params.push(p("attn.bo"), Mat::zeros(1, d), false);
            let ln2_g = params.push(p("ln2.g"), ones(1, d), false);
            let ln2_b = params.push(p("ln2.b"), Mat::zeros(1, d), false);
            let mlp_w1 = params.push(p("mlp.w1"), xavier(&mut rng, d, cfg.mlp_dim()), false);
            let mlp_b1 = params.push(p("mlp.b1"), Mat::zeros(1, cfg.mlp_dim()), false);
            let mlp_w2 = params.push(p("mlp.w2"), xavier(&mut rng, cfg.mlp_dim(), d), false);
            let mlp_b2 = params.push(p("mlp.b2"), Mat::zeros(1, d), false);

            let moea = if cfg.moea_blocks.contains(&b) {
                // adapter starts as the identity map: w_u is zero
                let w_u = params.push(p("moea.w_u"), Mat::zeros(d, d), true);
                let router_w1 = params.push(
                    p("moea.router.w1"),
                    small_uniform(&mut rng, d, cfg.d_router()),
                    true,
                );
                let router_we_rows = params.push(
                    p("moea.router.we"),
                    small_uniform(&mut rng, cfg.n_experts, cfg.d_router()),
                    true,
                );
                let tau = params.push(p("moea.router.tau"), Mat::scalar(DEFAULT_TAU), true);
                let full_expert =
                    params.push(p("moea.expert0"), small_uniform(&mut rng, d, d), true);
                let mut lowrank = Vec::new();
                for i in 1..cfg.n_experts {
                    let r = ExpertBank::rank_bound(d, i);
                    let down = params.push(
                        p(&format!("moea.expert{i}.down")),
                        small_uniform(&mut rng, d, r),
                        true,
                    );
                    let up = params.push(
                        p(&format!("moea.expert{i}.up")),
                        small_uniform(&mut rng, r, d),
                        true,
                    );
                    lowrank.push((down, up));
                }
                Some(MoeaLayout {
                    w_u,
                    router_w1,
                    router_we_rows,
                    tau,
                    full_expert,
                    lowrank,
                })
            } else {
                None
            };

            blocks.push(BlockLayout {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
                moea,
            });
        }

        let ln_f_g = params.push("ln_f.g".into(), ones(1, d), false);
        let ln_f_b = params.push("ln_f.b".into(), Mat::zeros(1, d), false);
        let mut heads = [(0usize, 0usize); 3];
        for (slot, cue) in CueKind::ALL.iter().enumerate() {
            let w = params.push(format!("head.{}.w", cue.name()), Mat::zeros(1, d), true);
            let b = params.push(format!("head.{}.b", cue.name()), Mat::zeros(1, 1), true);
            heads[slot] = (w, b);
        }

        let shuffle_perm = patch_permutation(cfg.seed, cfg.n_patches());

        Ok(Model {
            cfg: cfg.clone(),
            params,
            layout: Layout {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                ln_f_g,
                ln_f_b,
                heads,
            },
            shuffle_perm,
        })
    }

    pub fn positional_embedding(&self) -> PositionalEmbedding {
        let pos = &self.params.entries[self.layout.pos].value;
        let mut p_patch = Mat::zeros(pos.rows() - 1, pos.cols());
        for i in 1..pos.rows() {
            p_patch.row_mut(i - 1).copy_from_slice(pos.row(i));
        }
        PositionalEmbedding {
            p_cls: pos.row(0).to_vec(),
            p_patch,
        }
    }

    /// Pure view of one block's adapter (spec contract types).
    pub fn moea_layer(&self, block: usize) -> Option<MoeaLayer> {
        let ml = self.layout.blocks[block].moea.as_ref()?;
        let v = |i: usize| self.params.entries[i].value.clone();
        Some(MoeaLayer {
            w_u: v(ml.w_u),
            router: RouterParams {
                w1: v(ml.router_w1),
                w_e: v(ml.router_we_rows).transpose(),
                tau: self.params.entries[ml.tau].value.item(),
            },
            bank: ExpertBank {
                full_expert: v(ml.full_expert),
                lowrank_experts: ml.lowrank.iter().map(|&(d, u)| (v(d), v(u))).collect(),
            },
        })
    }

    /// Linear patch embedding with the class token prepended (before
    /// positions are added).
    pub fn patch_embed(&self, img: &ImagePlanes) -> Result<Mat<f32>> {
        if img.height() != self.cfg.img_size || img.width() != self.cfg.img_size {
            return Err(Error::InvalidArgument(format!(
                "image is {}×{}, model expects {0}×{0} = {}",
                img.height(),
                img.width(),
                self.cfg.img_size
            )));
        }
        let patches = image_to_patches(img, self.cfg.patch_size);
        let w = &self.params.entries[self.layout.patch_w].value;
        let b = &self.params.entries[self.layout.patch_b].value;
        let projected = patches.matmul(w);
        let mut tokens = Mat::zeros(self.cfg.seq_len(), self.cfg.d);
        tokens
            .row_mut(0)
            .copy_from_slice(self.params.entries[self.layout.cls].value.row(0));
        for i in 0..projected.rows() {
            for j in 0..self.cfg.d {
                tokens.set(i + 1, j, projected.get(i, j) + b.get(0, j));
            }
        }
        Ok(tokens)
    }

    /// Plant every parameter as a tape leaf; returned ids are parallel to
    /// `params.entries`.
    pub fn plant_params<T: Real>(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params
            .entries
            .iter()
            .map(|e| tape.leaf_from_f32(&e.value))
            .collect()
    }

    /// Full permutation over the L+1 token positions used by the CI branch
    /// (class token fixed at 0).
    pub fn token_permutation(&self) -> Vec<usize> {
        let mut perm = Vec::with_capacity(self.cfg.seq_len());
        perm.push(0);
        perm.extend(self.shuffle_perm.iter().map(|&p| p + 1));
        perm
    }

    /// Run all three cues through the trunk (f32, no gradients) and return
    /// logits plus every gate record.
    pub fn forward_multicue(&self, bundle: &CueBundle) -> Result<ForwardOutput> {
        let mut tape: Tape<f32> = Tape::new();
        let param_nodes = self.plant_params(&mut tape);
        let mut logits = [0.0f32; 3];
        let mut gates = Vec::new();
        for (slot, cue) in CueKind::ALL.iter().enumerate() {
            let img = match cue {
                CueKind::Img => &bundle.img,
                CueKind::Hf => &bundle.hf,
                CueKind::Ci => &bundle.ci,
            };
            let patches = image_to_patches(img, self.cfg.patch_size);
            let fwd = build_cue_forward(&mut tape, self, &param_nodes, &patches, *cue)?;
            logits[slot] = tape.value(fwd.logit).item();
            for (block, gnode) in fwd.gates {
                let gm = tape.value(gnode);
                for t in 0..gm.rows() {
                    gates.push((
                        *cue,
                        GateRecord {
                            gates: gm.row(t).to_vec(),
                            token_index: t,
                            layer_index: block,
                        },
                    ));
                }
            }
        }
        Ok(ForwardOutput {
            logits: MultiCueLogits {
                img_logit: logits[0],
                hf_logit: logits[1],
                ci_logit: logits[2],
            },
            gates,
        })
    }
}

fn ones(rows: usize, cols: usize) -> Mat<f32> {
    Mat::from_fn(rows, cols, |_, _| 1.0)
}

pub struct ForwardOutput {
    pub logits: MultiCueLogits,
    pub gates: Vec<(CueKind, GateRecord)>,
}

/// Flatten non-overlapping patches row-major over the grid; within a patch
/// the layout is (dy, dx, channel) interleaved.
pub fn image_to_patches(img: &ImagePlanes, patch: usize) -> Mat<f32> {
    let side_y = img.height() / patch;
    let side_x = img.width() / patch;
    let pd = patch * patch * 3;
    let mut out = Mat::zeros(side_y * side_x, pd);
    for py in 0..side_y {
        for px in 0..side_x {
            let row = out.row_mut(py * side_x + px);
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..3 {
                        row[(dy * patch + dx) * 3 + c] =
                            img.get(c, py * patch + dy, px * patch + dx);
                    }
                }
            }
        }
    }
    out
}

/// Graph nodes produced by one cue's forward pass.
pub struct CueForward {
    pub logit: NodeId,
    /// (block index, gates node (S×N)) per adapter block
    pub gates: Vec<(usize, NodeId)>,
    /// per-block, per-head attention probability nodes
    pub attn_probs: Vec<NodeId>,
}

/// One transformer block on the tape. Pre-norm attention and MLP with
/// residuals; the adapter (when present) wraps the block output and carries
/// its own residual.
pub fn build_block<T: Real>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    bl: &BlockLayout,
    block_idx: usize,
    heads: usize,
    x: NodeId,
) -> (NodeId, Option<(usize, NodeId)>, Vec<NodeId>) {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let ln1 = tape.layernorm_rows(x, params[bl.ln1_g], params[bl.ln1_b]);
    let q0 = tape.matmul(ln1, params[bl.wq]);
    let q = tape.add_row_broadcast(q0, params[bl.bq]);
    let k0 = tape.matmul(ln1, params[bl.wk]);
    let k = tape.add_row_broadcast(k0, params[bl.bk]);
    let v0 = tape.matmul(ln1, params[bl.wv]);
    let v = tape.add_row_broadcast(v0, params[bl.bv]);

    let mut ctx_heads = Vec::with_capacity(heads);
    let mut attn_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scaled);
        attn_probs.push(probs);
        ctx_heads.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&ctx_heads);
    let proj0 = tape.matmul(ctx, params[bl.wo]);
    let proj = tape.add_row_broadcast(proj0, params[bl.bo]);
    let x = tape.add(x, proj);

    let ln2 = tape.layernorm_rows(x, params[bl.ln2_g], params[bl.ln2_b]);
    let h0 = tape.matmul(ln2, params[bl.mlp_w1]);
    let h1 = tape.add_row_broadcast(h0, params[bl.mlp_b1]);
    let act = tape.gelu(h1);
    let m0 = tape.matmul(act, params[bl.mlp_w2]);
    let mlp = tape.add_row_broadcast(m0, params[bl.mlp_b2]);
    let x = tape.add(x, mlp);

    match &bl.moea {
        None => (x, None, attn_probs),
        Some(ml) => {
            let nodes = MoeaNodes {
                w_u: params[ml.w_u],
                router_w1: params[ml.router_w1],
                router_we_rows: params[ml.router_we_rows],
                tau: params[ml.tau],
                full_expert: params[ml.full_expert],
                lowrank: ml.lowrank.iter().map(|&(d, u)| (params[d], params[u])).collect(),
            };
            let (out, gates) = build_moea_forward(tape, &nodes, x);
            (out, Some((block_idx, gates)), attn_probs)
        }
    }
}

/// One cue's full forward pass on the tape. The chromaticity branch uses
/// the shuffled positional embedding; the other two use it as stored.
pub fn build_cue_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    params: &[NodeId],
    patches: &Mat<f32>,
    cue: CueKind,
) -> Result<CueForward> {
    let cfg = &model.cfg;
    let lay = &model.layout;
    if patches.shape() != (cfg.n_patches(), cfg.patch_dim()) {
        return Err(Error::InvalidArgument(format!(
            "patch matrix is {:?}, model expects {:?}",
            patches.shape(),
            (cfg.n_patches(), cfg.patch_dim())
        )));
    }
    let patches_node = tape.leaf_from_f32(patches);
    let projected = tape.matmul(patches_node, params[lay.patch_w]);
    let embedded = tape.add_row_broadcast(projected, params[lay.patch_b]);
    let tokens = tape.concat_rows(&[params[lay.cls], embedded]);

    let pos = match cue {
        CueKind::Ci => {
            let perm = model.token_permutation();
            tape.permute_rows(params[lay.pos], &perm)
        }
        _ => params[lay.pos],
    };
    let mut x = tape.add(tokens, pos);

    let mut gates = Vec::new();
    let mut attn_all = Vec::new();
    for (b, bl) in lay.blocks.iter().enumerate() {
        let (nx, g, attn) = build_block(tape, params, bl, b, cfg.heads, x);
        x = nx;
        if let Some(g) = g {
            gates.push(g);
        }
        attn_all.extend(attn);
    }

    let normed = tape.layernorm_rows(x, params[lay.ln_f_g], params[lay.ln_f_b]);
    let feat = tape.slice_rows(normed, 0, 1);
    let slot = CueKind::ALL.iter().position(|c| c == &cue).unwrap();
    let (hw, hb) = lay.heads[slot];
    let raw = tape.matmul_nt(feat, params[hw]);
    let logit = tape.add(raw, params[hb]);

    Ok(CueForward {
        logit,
        gates,
        attn_probs: attn_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cues::extract_cues;

    fn test_image(seed: u64, size: usize) -> ImagePlanes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImagePlanes::new(size, size);
        for v in img.data_mut() {
            *v = rng.random_range(0.0..=1.0f32);
        }
        img
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        cfg = BackboneConfig::default();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg = BackboneConfig::default();
        cfg.moea_blocks = vec![7];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patch_embed_zero_image_zero_params_is_zero() {
        let cfg = BackboneConfig::tiny();
        let mut model = Model::new(&cfg).unwrap();
        let lay = model.layout.clone();
        model.params.entries[lay.patch_w].value = Mat::zeros(cfg.patch_dim(), cfg.d);
        model.params.entries[lay.cls].value = Mat::zeros(1, cfg.d);
        let img = ImagePlanes::constant(cfg.img_size, cfg.img_size, 0.0);
        let tokens = model.patch_embed(&img).unwrap();
        assert_eq!(tokens.shape(), (cfg.seq_len(), cfg.d));
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_matches_naive_per_patch_oracle() {
        let cfg = BackboneConfig::tiny();
        let model = Model::new(&cfg).unwrap();
        let img = test_image(3, cfg.img_size);
        let tokens = model.patch_embed(&img).unwrap();
        assert_eq!(tokens.shape(), (cfg.n_patches() + 1, cfg.d));

        let w = &model.params.entries[model.layout.patch_w].value;
        let b = &model.params.entries[model.layout.patch_b].value;
        let side = cfg.img_size / cfg.patch_size;
        for py in 0..side {
            for px in 0..side {
                for j in 0..cfg.d {
                    let mut acc = 0.0f64;
                    for dy in 0..cfg.patch_size {
                        for dx in 0..cfg.patch_size {
                            for c in 0..3 {
                                let pix =
                                    img.get(c, py * cfg.patch_size + dy, px * cfg.patch_size + dx);
                                let wrow = (dy * cfg.patch_size + dx) * 3 + c;
                                acc += pix as f64 * w.get(wrow, j) as f64;
                            }
                        }
                    }
                    acc += b.get(0, j) as f64;
                    let got = tokens.get(1 + py * side + px, j) as f64;
                    assert!((got - acc).abs() < 1e-6, "patch ({py},{px}) dim {j}");
                }
            }
        }
    }

    #[test]
    fn shuffled_positions_single_patch_is_identity() {
        let pe = PositionalEmbedding {
            p_cls: vec![1.0, 2.0],
            p_patch: Mat::from_vec(1, 2, vec![3.0, 4.0]),
        };
        let out = make_shuffled_positions(&pe, 123);
        assert_eq!(out.p_cls, pe.p_cls);
        assert_eq!(out.p_patch, pe.p_patch);
    }

    #[test]
    fn shuffled_positions_deterministic_and_valid() {
        let l = 4;
        let pe = PositionalEmbedding {
            p_cls: vec![9.0; 3],
            p_patch: Mat::from_fn(l, 3, |i, j| (i * 3 + j) as f32),
        };
        let a = make_shuffled_positions(&pe, 7);
        let b = make_shuffled_positions(&pe, 7);
        assert_eq!(a.p_patch, b.p_patch);
        assert_eq!(a.p_cls, pe.p_cls);

        // permutation validity: the multiset of rows is preserved
        let mut orig: Vec<Vec<u32>> = (0..l)
            .map(|i| pe.p_patch.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut got: Vec<Vec<u32>> = (0..l)
            .map(|i| a.p_patch.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        orig.sort();
        got.sort();
        assert_eq!(orig, got);

        let perm = patch_permutation(7, 64);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..64).collect::<Vec<_>>());
        assert_ne!(perm, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn block_attention_rows_sum_to_one() {
        let cfg = BackboneConfig::tiny();
        let model = Model::new(&cfg).unwrap();
        let img = test_image(5, cfg.img_size);
        let mut tape: Tape<f32> = Tape::new();
        let params = model.plant_params(&mut tape);
        let patches = image_to_patches(&img, cfg.patch_size);
        let fwd = build_cue_forward(&mut tape, &model, &params, &patches, CueKind::Img).unwrap();
        assert!(!fwd.attn_probs.is_empty());
        for probs in fwd.attn_probs {
            let m = tape.value(probs);
            for i in 0..m.rows() {
                let sum: f32 = m.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    /// Hand-unrolled single-block oracle at 2 tokens, d=4, 1 head,
    /// computed in f64 directly from the parameter matrices.
    #[test]
    fn block_forward_matches_scalar_oracle() {
        let cfg = BackboneConfig {
            img_size: 8,
            patch_size: 4,
            d: 4,
            depth: 1,
            heads: 1,
            moea_blocks: vec![],
            n_experts: 2,
            seed: 42,
            train_pos: false,
        };
        let model = Model::new(&cfg).unwrap();
        let x_in = Mat::from_vec(2, 4, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.8, 0.05, -0.6]);

        let mut tape: Tape<f32> = Tape::new();
        let params = model.plant_params(&mut tape);
        let x = tape.leaf(x_in.clone());
        let (out, _, _) = build_block(&mut tape, &params, &model.layout.blocks[0], 0, 1, x);
        let got = tape.value(out).clone();

        // oracle in f64
        let val = |i: usize| model.params.entries[i].value.cast::<f64>();
        let bl = &model.layout.blocks[0];
        let ln = |x: &Mat<f64>, g: &Mat<f64>, b: &Mat<f64>| {
            let mut out = Mat::<f64>::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let var =
                    row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for j in 0..x.cols() {
                    out.set(i, j, (row[j] - mean) * inv * g.get(0, j) + b.get(0, j));
                }
            }
            out
        };
        let addb = |x: &Mat<f64>, b: &Mat<f64>| {
            let mut o = x.clone();
            for i in 0..o.rows() {
                for j in 0..o.cols() {
                    let v = o.get(i, j) + b.get(0, j);
                    o.set(i, j, v);
                }
            }
            o
        };
        let xf = x_in.cast::<f64>();
        let n1 = ln(&xf, &val(bl.ln1_g), &val(bl.ln1_b));
        let q = addb(&n1.matmul(&val(bl.wq)), &val(bl.bq));
        let k = addb(&n1.matmul(&val(bl.wk)), &val(bl.bk));
        let v = addb(&n1.matmul(&val(bl.wv)), &val(bl.bv));
        // single head: scores = q k^T / 2
        let mut probs = Mat::<f64>::zeros(2, 2);
        for i in 0..2 {
            let mut row = [0.0f64; 2];
            for j in 0..2 {
                let mut dot = 0.0;
                for l in 0..4 {
                    dot += q.get(i, l) * k.get(j, l);
                }
                row[j] = dot / 2.0;
            }
            let mx = row[0].max(row[1]);
            let e0 = (row[0] - mx).exp();
            let e1 = (row[1] - mx).exp();
            probs.set(i, 0, e0 / (e0 + e1));
            probs.set(i, 1, e1 / (e0 + e1));
        }
        let ctx = probs.matmul(&v);
        let proj = addb(&ctx.matmul(&val(bl.wo)), &val(bl.bo));
        let mut x1 = xf.clone();
        for i in 0..2 {
            for j in 0..4 {
                let v = x1.get(i, j) + proj.get(i, j);
                x1.set(i, j, v);
            }
        }
        let n2 = ln(&x1, &val(bl.ln2_g), &val(bl.ln2_b));
        let h = addb(&n2.matmul(&val(bl.mlp_w1)), &val(bl.mlp_b1));
        let mut act = h.clone();
        for vv in act.data_mut() {
            let x = *vv;
            let u = (2.0f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            *vv = 0.5 * x * (1.0 + u.tanh());
        }
        let mlp = addb(&act.matmul(&val(bl.mlp_w2)), &val(bl.mlp_b2));
        let mut expect = x1.clone();
        for i in 0..2 {
            for j in 0..4 {
                let v = expect.get(i, j) + mlp.get(i, j);
                expect.set(i, j, v);
            }
        }

        for i in 0..2 {
            for j in 0..4 {
                let g = got.get(i, j) as f64;
                let e = expect.get(i, j);
                assert!((g - e).abs() < 1e-5, "({i},{j}): {g} vs {e}");
            }
        }
    }

    #[test]
    fn forward_identical_bundle_members_share_img_hf_logits() {
        let cfg = BackboneConfig::tiny();
        let model = Model::new(&cfg).unwrap();
        let img = test_image(11, cfg.img_size);
        let bundle = CueBundle {
            img: img.clone(),
            hf: img.clone(),
            ci: img.clone(),
        };
        let out = model.forward_multicue(&bundle).unwrap();
        // identical inputs and zero-init heads: all logits are exactly 0,
        // so img and hf agree; the ci branch sees shuffled positions
        assert_eq!(out.logits.img_logit, out.logits.hf_logit);
        assert_eq!(out.logits.img_logit, 0.0);
        assert_eq!(out.logits.ci_logit, 0.0);
    }

    #[test]
    fn forward_gate_records_bookkeeping() {
        let cfg = BackboneConfig::tiny();
        let model = Model::new(&cfg).unwrap();
        let bundle = extract_cues(&test_image(13, cfg.img_size), 1e-3);
        let out = model.forward_multicue(&bundle).unwrap();
        let expected = cfg.moea_blocks.len() * 3 * cfg.seq_len();
        assert_eq!(out.gates.len(), expected);
        for (_, rec) in &out.gates {
            assert_eq!(rec.gates.len(), cfg.n_experts);
            let sum: f32 = rec.gates.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(rec.gates.iter().all(|&g| g >= 0.0));
            assert!(cfg.moea_blocks.contains(&rec.layer_index));
        }
    }

    #[test]
    fn forward_deterministic() {
        let cfg = BackboneConfig::tiny();
        let model = Model::new(&cfg).unwrap();
        let bundle = extract_cues(&test_image(17, cfg.img_size), 1e-3);
        let a = model.forward_multicue(&bundle).unwrap();
        let b = model.forward_multicue(&bundle).unwrap();
        assert_eq!(a.logits.img_logit.to_bits(), b.logits.img_logit.to_bits());
        assert_eq!(a.logits.hf_logit.to_bits(), b.logits.hf_logit.to_bits());
        assert_eq!(a.logits.ci_logit.to_bits(), b.logits.ci_logit.to_bits());
    }

    #[test]
    fn ci_branch_differs_only_via_shuffle() {
        // with an identity shuffle the ci logit must equal the img logit
        // when fed the same image and sharing heads
        let cfg = BackboneConfig::tiny();
        let mut model = Model::new(&cfg).unwrap();
        model.shuffle_perm = (0..cfg.n_patches()).collect();
        // make ci head equal to img head (both start zero; give them the
        // same nonzero weights)
        let (img_w, img_b) = model.layout.heads[0];
        let (ci_w, ci_b) = model.layout.heads[2];
        let w = Mat::from_fn(1, cfg.d, |_, j| 0.1 * (j as f32 + 1.0));
        model.params.entries[img_w].value = w.clone();
        model.params.entries[ci_w].value = w;
        model.params.entries[img_b].value = Mat::scalar(0.37);
        model.params.entries[ci_b].value = Mat::scalar(0.37);
        let img = test_image(19, cfg.img_size);
        let bundle = CueBundle {
            img: img.clone(),
            hf: img.clone(),
            ci: img.clone(),
        };
        let out = model.forward_multicue(&bundle).unwrap();
        assert_eq!(out.logits.img_logit.to_bits(), out.logits.ci_logit.to_bits());
    }

    #[test]
    fn aggregate_min_examples() {
        // probabilities (0.9, 0.2, 0.8) → min 0.2 → fake
        let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
        let l = MultiCueLogits {
            img_logit: logit(0.9),
            hf_logit: logit(0.2),
            ci_logit: logit(0.8),
        };
        let (d, s) = aggregate_min(&l, 0.5);
        assert_eq!(d, Decision::Fake);
        assert!((s - 0.2).abs() < 1e-9);

        // all 0.5 → boundary is inclusive → real
        let l = MultiCueLogits {
            img_logit: 0.0,
            hf_logit: 0.0,
            ci_logit: 0.0,
        };
        let (d, s) = aggregate_min(&l, 0.5);
        assert_eq!(d, Decision::Real);
        assert!((s - 0.5).abs() < 1e-12);

        // one saturated-low prob dominates
        let l = MultiCueLogits {
            img_logit: 50.0,
            hf_logit: -80.0,
            ci_logit: 50.0,
        };
        let (d, s) = aggregate_min(&l, 0.5);
        assert_eq!(d, Decision::Fake);
        assert!(s < 1e-20);
    }

    #[test]
    fn aggregate_min_invariant_under_monotone_logit_shift() {
        // decisions depend only on the ordering of per-cue probabilities
        // vs the threshold; applying the same strictly increasing map to
        // all three logits never changes which cue attains the min
        let l = MultiCueLogits {
            img_logit: 1.2,
            hf_logit: -0.3,
            ci_logit: 0.4,
        };
        let (_, base) = aggregate_min(&l, 0.5);
        for shift in [-2.0f32, -0.5, 0.5, 2.0] {
            let shifted = MultiCueLogits {
                img_logit: l.img_logit + shift,
                hf_logit: l.hf_logit + shift,
                ci_logit: l.ci_logit + shift,
            };
            let (_, s) = aggregate_min(&shifted, 0.5);
            // min is still attained by the hf cue
            assert!((s - sigmoid(l.hf_logit + shift)).abs() < 1e-12);
            if shift > 0.0 {
                assert!(s > base);
            } else {
                assert!(s < base);
            }
        }
    }
}
