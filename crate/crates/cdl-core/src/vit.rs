//! Small vision transformer with prefix-tuning insertion points.
//!
//! The backbone is a standard pre-LN ViT over flattened image patches with a
//! class token. Two kinds of prefixes can extend each block's attention keys
//! and values without changing the token sequence length: a continual-
//! learning prefix placed in front of the keys and a distillation prefix
//! appended after them. An optional distillation token is appended to the
//! token sequence after the first block and carried through the remaining
//! blocks.

use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
/// -inf surrogate for masked-out class logits; large enough to zero the
/// softmax mass in double precision.
pub const NEG_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Query/key dimension of the prompt-pool matching space; equals
    /// `embed_dim` for a model that encodes its own queries.
    pub key_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub class_capacity: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(CdlError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(CdlError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.blocks == 0 {
            return Err(CdlError::Config("need at least one block".into()));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    /// Patch tokens plus the class token.
    pub fn base_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Desk-scale student: 32-dim, 4 heads, 4 blocks on 16x16x3 inputs.
    pub fn desk_student(class_capacity: usize) -> ViTConfig {
        ViTConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            key_dim: 32,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            class_capacity,
        }
    }

    /// Desk-scale teacher: 64-dim, 4 heads, 6 blocks on 16x16x3 inputs.
    pub fn desk_teacher(class_capacity: usize) -> ViTConfig {
        ViTConfig {
            embed_dim: 64,
            key_dim: 64,
            blocks: 6,
            ..ViTConfig::desk_student(class_capacity)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Key/value prefix halves for one block's attention, already on the tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockPrefix {
    /// Continual-learning prefix, concatenated in front of the keys/values.
    pub cl: Option<(TensorId, TensorId)>,
    /// Distillation prefix, concatenated after the keys/values.
    pub kd: Option<(TensorId, TensorId)>,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockIds {
    fn all(&self) -> Vec<ParamId> {
        vec![
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// The frozen-by-default transformer weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ViTConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub kd_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
}

/// Result of a full forward pass.
pub struct ForwardOutput {
    /// Class-token embedding after the final layer norm, shape (1, D).
    pub cls_embed: TensorId,
    /// Distillation-token embedding after the final layer norm, if enabled.
    pub kd_embed: Option<TensorId>,
    /// Token features after each block, class token included, distillation
    /// token and prefixes excluded; shape (base_tokens, D).
    pub block_features: Vec<TensorId>,
    /// Fused attention node per block; per-head post-softmax rows are
    /// readable via [`Tape::attn_probs`].
    pub attn_cores: Vec<TensorId>,
}

pub struct AttnOutput {
    pub out: TensorId,
    /// The fused attention node; per-head post-softmax rows are readable via
    /// [`Tape::attn_probs`].
    pub core: TensorId,
}

impl Backbone {
    /// Initializes fresh weights: Xavier-scaled projections, sigma=0.02
    /// token and positional embeddings. The distillation token starts as a
    /// copy of the class token plus small Gaussian noise to break the
    /// symmetry.
    pub fn init(cfg: ViTConfig, store: &mut ParamStore, rng: &mut SeededRng) -> Result<Backbone> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let sigma = 0.02;
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng.split("backbone");
        let patch_w = store.insert(
            "backbone/patch_embed/w",
            Tensor::randn(&[cfg.patch_dim(), d], xavier(cfg.patch_dim(), d), &mut r),
            true,
        );
        let patch_b = store.insert("backbone/patch_embed/b", Tensor::zeros(&[d]), true);
        let cls_init = Tensor::randn(&[1, d], sigma, &mut r);
        let cls = store.insert("backbone/cls", cls_init.clone(), true);
        let mut kd_init = cls_init.data().to_vec();
        for v in kd_init.iter_mut() {
            *v += r.normal() * sigma;
        }
        let kd_token = store.insert("backbone/kd_token", Tensor::from_vec(vec![1, d], kd_init), true);
        let pos = store.insert(
            "backbone/pos",
            Tensor::randn(&[cfg.base_tokens(), d], sigma, &mut r),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("backbone/block{b}");
            let hidden = d * cfg.mlp_ratio;
            blocks.push(BlockIds {
                ln1_g: store.insert(format!("{p}/ln1/gamma"), Tensor::full(&[d], 1.0), true),
                ln1_b: store.insert(format!("{p}/ln1/beta"), Tensor::zeros(&[d]), true),
                wq: store.insert(format!("{p}/attn/wq"), Tensor::randn(&[d, d], xavier(d, d), &mut r), true),
                bq: store.insert(format!("{p}/attn/bq"), Tensor::zeros(&[d]), true),
                wk: store.insert(format!("{p}/attn/wk"), Tensor::randn(&[d, d], xavier(d, d), &mut r), true),
                bk: store.insert(format!("{p}/attn/bk"), Tensor::zeros(&[d]), true),
                wv: store.insert(format!("{p}/attn/wv"), Tensor::randn(&[d, d], xavier(d, d), &mut r), true),
                bv: store.insert(format!("{p}/attn/bv"), Tensor::zeros(&[d]), true),
                wo: store.insert(format!("{p}/attn/wo"), Tensor::randn(&[d, d], xavier(d, d), &mut r), true),
                bo: store.insert(format!("{p}/attn/bo"), Tensor::zeros(&[d]), true),
                ln2_g: store.insert(format!("{p}/ln2/gamma"), Tensor::full(&[d], 1.0), true),
                ln2_b: store.insert(format!("{p}/ln2/beta"), Tensor::zeros(&[d]), true),
                w1: store.insert(format!("{p}/mlp/w1"), Tensor::randn(&[d, hidden], xavier(d, hidden), &mut r), true),
                b1: store.insert(format!("{p}/mlp/b1"), Tensor::zeros(&[hidden]), true),
                w2: store.insert(format!("{p}/mlp/w2"), Tensor::randn(&[hidden, d], xavier(hidden, d), &mut r), true),
                b2: store.insert(format!("{p}/mlp/b2"), Tensor::zeros(&[d]), true),
            });
        }
        let final_ln_g = store.insert("backbone/final_ln/gamma", Tensor::full(&[d], 1.0), true);
        let final_ln_b = store.insert("backbone/final_ln/beta", Tensor::zeros(&[d]), true);
        Ok(Backbone {
            cfg,
            patch_w,
            patch_b,
            cls,
            kd_token,
            pos,
            blocks,
            final_ln_g,
            final_ln_b,
        })
    }

    /// All backbone parameter ids in a stable order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.cls, self.kd_token, self.pos];
        for b in &self.blocks {
            ids.extend(b.all());
        }
        ids.push(self.final_ln_g);
        ids.push(self.final_ln_b);
        ids
    }

    pub fn last_block_ids(&self) -> Vec<ParamId> {
        self.blocks.last().expect("at least one block").all()
    }

    /// Marks every backbone array frozen (non-trainable).
    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.all_ids() {
            store.set_trainable(id, false);
        }
    }

    /// Freezes everything except the last block (the unfreeze ablation).
    pub fn freeze_except_last_block(&self, store: &mut ParamStore) {
        self.freeze(store);
        for id in self.last_block_ids() {
            store.set_trainable(id, true);
        }
    }

    pub fn unfreeze_all(&self, store: &mut ParamStore) {
        for id in self.all_ids() {
            store.set_trainable(id, true);
        }
    }

    pub fn is_fully_frozen(&self, store: &ParamStore) -> bool {
        self.all_ids().iter().all(|&id| !store.trainable(id))
    }

    /// Bitwise checksum over all backbone arrays.
    pub fn checksum(&self, store: &ParamStore) -> u64 {
        store.checksum_of(&self.all_ids())
    }

    pub fn snapshot(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        store.snapshot(&self.all_ids())
    }

    /// Flattens an image tensor (C, H, W) into a patch matrix, one row per
    /// patch in raster order, channel-major within each patch.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let want = [cfg.channels, cfg.image_size, cfg.image_size];
        if image.shape() != want {
            return Err(CdlError::Contract(format!(
                "image shape {:?} does not match config {:?}",
                image.shape(),
                want
            )));
        }
        let p = cfg.patch_size;
        let g = cfg.patch_grid();
        let hw = cfg.image_size;
        let mut rows = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..cfg.channels {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            rows.push(image.data()[c * hw * hw + y * hw + x]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(vec![cfg.num_patches(), cfg.patch_dim()], rows))
    }

    fn get(&self, tape: &mut Tape, store: &ParamStore, id: ParamId, mode: Mode) -> TensorId {
        match mode {
            Mode::Train => tape.param(store, id),
            Mode::Eval => tape.param_detached(store, id),
        }
    }

    /// Projects patches, prepends the class token and adds positional
    /// embeddings. Token count is `num_patches + 1`.
    pub fn patch_embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        mode: Mode,
    ) -> Result<TensorId> {
        let patches = self.patchify(image)?;
        let x = tape.constant(&patches);
        let w = self.get(tape, store, self.patch_w, mode);
        let b = self.get(tape, store, self.patch_b, mode);
        let proj = tape.matmul(x, w);
        let tokens = tape.add_bias(proj, b);
        let cls = self.get(tape, store, self.cls, mode);
        let seq = tape.concat_rows(&[cls, tokens]);
        let pos = self.get(tape, store, self.pos, mode);
        Ok(tape.add(seq, pos))
    }

    /// Multi-head self-attention over `h` with optional key/value prefixes.
    /// The output sequence length always equals the input length.
    pub fn attention_with_prefix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        h: TensorId,
        prefix: &BlockPrefix,
        mode: Mode,
    ) -> Result<AttnOutput> {
        let ids = &self.blocks[block];
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;

        for &(k, v) in prefix.cl.iter().chain(prefix.kd.iter()) {
            for part in [k, v] {
                let t = tape.value(part);
                if t.ncols() != d {
                    return Err(CdlError::Contract(format!(
                        "prefix width {} does not match embed dim {d}",
                        t.ncols()
                    )));
                }
            }
        }

        let wq = self.get(tape, store, ids.wq, mode);
        let bq = self.get(tape, store, ids.bq, mode);
        let wk = self.get(tape, store, ids.wk, mode);
        let bk = self.get(tape, store, ids.bk, mode);
        let wv = self.get(tape, store, ids.wv, mode);
        let bv = self.get(tape, store, ids.bv, mode);
        let q = tape.matmul(h, wq);
        let q = tape.add_bias(q, bq);
        let k = tape.matmul(h, wk);
        let k = tape.add_bias(k, bk);
        let v = tape.matmul(h, wv);
        let v = tape.add_bias(v, bv);

        // [P_cl; keys, P_kd] ordering for both keys and values.
        let mut k_parts = Vec::with_capacity(3);
        let mut v_parts = Vec::with_capacity(3);
        if let Some((pk, pv)) = prefix.cl {
            k_parts.push(pk);
            v_parts.push(pv);
        }
        k_parts.push(k);
        v_parts.push(v);
        if let Some((pk, pv)) = prefix.kd {
            k_parts.push(pk);
            v_parts.push(pv);
        }
        let k_full = tape.concat_rows(&k_parts);
        let v_full = tape.concat_rows(&v_parts);

        let core = tape.attn_core(q, k_full, v_full, heads);
        let wo = self.get(tape, store, ids.wo, mode);
        let bo = self.get(tape, store, ids.bo, mode);
        let out = tape.matmul(core, wo);
        let out = tape.add_bias(out, bo);
        Ok(AttnOutput { out, core })
    }

    fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: usize,
        x: TensorId,
        prefix: &BlockPrefix,
        mode: Mode,
    ) -> Result<(TensorId, TensorId)> {
        let ids = &self.blocks[block];
        let g1 = self.get(tape, store, ids.ln1_g, mode);
        let b1 = self.get(tape, store, ids.ln1_b, mode);
        let normed = tape.layer_norm(x, g1, b1, LN_EPS);
        let attn = self.attention_with_prefix(tape, store, block, normed, prefix, mode)?;
        let x = tape.add(x, attn.out);
        let g2 = self.get(tape, store, ids.ln2_g, mode);
        let b2 = self.get(tape, store, ids.ln2_b, mode);
        let normed = tape.layer_norm(x, g2, b2, LN_EPS);
        let w1 = self.get(tape, store, ids.w1, mode);
        let bb1 = self.get(tape, store, ids.b1, mode);
        let w2 = self.get(tape, store, ids.w2, mode);
        let bb2 = self.get(tape, store, ids.b2, mode);
        let hmid = tape.matmul(normed, w1);
        let hmid = tape.add_bias(hmid, bb1);
        let act = tape.gelu(hmid);
        let mlp = tape.matmul(act, w2);
        let mlp = tape.add_bias(mlp, bb2);
        let x = tape.add(x, mlp);
        Ok((x, attn.core))
    }

    /// Full forward pass. When `use_kd_token` is set, the distillation token
    /// is appended to the sequence after the first block's output and
    /// propagated through the remaining blocks.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        prefixes: &[BlockPrefix],
        use_kd_token: bool,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if prefixes.len() != self.cfg.blocks {
            return Err(CdlError::Contract(format!(
                "prefix coverage {} does not match {} blocks",
                prefixes.len(),
                self.cfg.blocks
            )));
        }
        let base = self.cfg.base_tokens();
        let mut x = self.patch_embed(tape, store, image, mode)?;
        let mut block_features = Vec::with_capacity(self.cfg.blocks);
        let mut attn_cores = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let (next, core) = self.block_forward(tape, store, b, x, &prefixes[b], mode)?;
            x = next;
            attn_cores.push(core);
            block_features.push(if use_kd_token && b > 0 {
                tape.slice_rows(x, 0, base)
            } else {
                x
            });
            if use_kd_token && b == 0 {
                let kd = self.get(tape, store, self.kd_token, mode);
                x = tape.concat_rows(&[x, kd]);
            }
        }
        let g = self.get(tape, store, self.final_ln_g, mode);
        let bta = self.get(tape, store, self.final_ln_b, mode);
        let final_x = tape.layer_norm(x, g, bta, LN_EPS);
        let cls_embed = tape.slice_rows(final_x, 0, 1);
        let kd_embed = if use_kd_token {
            let rows = tape.value(final_x).nrows();
            Some(tape.slice_rows(final_x, rows - 1, 1))
        } else {
            None
        };
        Ok(ForwardOutput { cls_embed, kd_embed, block_features, attn_cores })
    }

    /// Query encoding: the class-token embedding of a promptless,
    /// detached forward pass. Never propagates gradients into the backbone.
    pub fn query_encode(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let prefixes = vec![BlockPrefix::default(); self.cfg.blocks];
        let out = self.forward(&mut tape, store, image, &prefixes, false, Mode::Eval)?;
        Ok(tape.value(out.cls_embed).clone())
    }
}

/// Verifies bitwise equality of two backbone snapshots; the error names the
/// first differing array.
pub fn assert_frozen(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> Result<()> {
    let diff = snapshot_diff_checked(before, after)?;
    match diff.first() {
        None => Ok(()),
        Some(name) => Err(CdlError::Contract(format!(
            "frozen backbone changed: first differing array is {name}"
        ))),
    }
}

/// Like [`assert_frozen`] but returns the differing names so the unfreeze
/// ablation can verify that only the last block moved.
pub fn snapshot_diff_checked(
    before: &[(String, Tensor)],
    after: &[(String, Tensor)],
) -> Result<Vec<String>> {
    if before.len() != after.len()
        || before
            .iter()
            .zip(after)
            .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
    {
        return Err(CdlError::Contract(
            "architecture mismatch between snapshots".into(),
        ));
    }
    Ok(crate::params::snapshot_diff(before, after))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRole {
    Student,
    Kd,
    Teacher,
}

/// Affine classifier over an embedding; width equals the benchmark's total
/// class capacity.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub role: HeadRole,
}

impl ClassifierHead {
    pub fn init(
        prefix: &str,
        embed_dim: usize,
        classes: usize,
        role: HeadRole,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> ClassifierHead {
        let mut r = rng.split(prefix);
        ClassifierHead {
            weight: store.insert(format!("{prefix}/w"), Tensor::randn(&[embed_dim, classes], 0.02, &mut r), true),
            bias: store.insert(format!("{prefix}/b"), Tensor::zeros(&[classes]), true),
            role,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Logits for an embedding of shape (1, D). A training-time mask
    /// replaces inactive class logits with the -inf surrogate; it must keep
    /// at least one class active.
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embed: TensorId,
        mask: Option<&[bool]>,
        mode: Mode,
    ) -> Result<TensorId> {
        let w = match mode {
            Mode::Train => tape.param(store, self.weight),
            Mode::Eval => tape.param_detached(store, self.weight),
        };
        let b = match mode {
            Mode::Train => tape.param(store, self.bias),
            Mode::Eval => tape.param_detached(store, self.bias),
        };
        let d = tape.value(embed).ncols();
        if tape.value(w).nrows() != d {
            return Err(CdlError::Contract(format!(
                "embedding dim {d} does not match head input {}",
                tape.value(w).nrows()
            )));
        }
        let logits = tape.matmul(embed, w);
        let logits = tape.add_bias(logits, b);
        match mask {
            None => Ok(logits),
            Some(active) => {
                if active.iter().all(|a| !a) {
                    return Err(CdlError::Contract("class mask has no active classes".into()));
                }
                if active.len() != tape.value(logits).ncols() {
                    return Err(CdlError::Contract(format!(
                        "mask length {} does not match {} classes",
                        active.len(),
                        tape.value(logits).ncols()
                    )));
                }
                Ok(tape.mask_set(logits, active, NEG_MASK))
            }
        }
    }
}
