//! A continual learner: frozen backbone, prompt pool, classifier heads and
//! the trainable distillation extras, with the combined per-sample student
//! loss and test-time prediction.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::distill::{
    block_correspondence, combine_heads_predict, dkd_loss, fitnets_loss, kd_loss, reviewkd_loss,
    DistillConfig, DistillMethod, FeatureMapping,
};
use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::pools::{PoolCtx, PoolSpec, PromptPool};
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::vit::{Backbone, BlockPrefix, ClassifierHead, HeadRole, Mode, ViTConfig, NEG_MASK};

/// How much of the backbone stays frozen during continual training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    All,
    ExceptLastBlock,
}

/// One continual learner. The parameter store owns every array; the struct
/// fields are stable handles into it.
pub struct ContinualModel {
    pub name: String,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pool: PromptPool,
    pub head: ClassifierHead,
    pub kd_head: Option<ClassifierHead>,
    /// Globally shared distillation prompts, one per covered block.
    pub kd_prompts: Vec<ParamId>,
    /// Feature mappings for the hint/review objectives (per compared block).
    pub mappings: Vec<FeatureMapping>,
    /// Fusion gates for the review objective.
    pub gates: Vec<ParamId>,
    pub freeze_mode: FreezeMode,
    /// Block count of the paired teacher, when feature objectives need the
    /// block correspondence.
    pub teacher_blocks: Option<usize>,
    query_cache: RefCell<HashMap<u64, Tensor>>,
}

/// Frozen teacher state captured after its task training: an owned copy of
/// every parameter plus caches of the per-sample outputs the student needs.
pub struct TeacherSnapshot {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pool: PromptPool,
    pub head: ClassifierHead,
    pub task: usize,
    pub checksum: u64,
    /// Teacher blocks whose features the student's objective compares.
    pub feature_blocks: Vec<usize>,
    outputs: RefCell<HashMap<u64, Rc<TeacherOutputs>>>,
    queries: RefCell<HashMap<u64, Tensor>>,
}

/// Cached teacher outputs for one sample.
pub struct TeacherOutputs {
    /// Full-capacity class logits.
    pub logits: Vec<f64>,
    /// Block features keyed by teacher block index.
    pub features: HashMap<usize, Tensor>,
}

/// Component values of one student loss evaluation.
pub struct LossParts {
    pub total: TensorId,
    pub ce: f64,
    pub distill: f64,
    pub pool: f64,
    pub total_value: f64,
}

/// Per-sample context for the student loss.
pub struct StudentLossCtx<'a> {
    pub task: usize,
    /// CE mask over the full class capacity: the current task's classes.
    pub active: &'a [bool],
    /// Sorted class indices the distillation logits are restricted to.
    pub scope: &'a [usize],
    pub teacher: Option<&'a TeacherOutputs>,
    pub cfg: &'a DistillConfig,
}

impl Backbone {
    /// Rebuilds handles against a store that already holds backbone arrays
    /// under their canonical names (e.g. loaded from a CDLW file).
    pub fn from_store(cfg: ViTConfig, store: &ParamStore) -> Result<Backbone> {
        cfg.validate()?;
        let get = |name: &str| -> Result<ParamId> {
            store
                .find(name)
                .ok_or_else(|| CdlError::Format(format!("missing backbone array {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("backbone/block{b}");
            blocks.push(crate::vit::BlockIds {
                ln1_g: get(&format!("{p}/ln1/gamma"))?,
                ln1_b: get(&format!("{p}/ln1/beta"))?,
                wq: get(&format!("{p}/attn/wq"))?,
                bq: get(&format!("{p}/attn/bq"))?,
                wk: get(&format!("{p}/attn/wk"))?,
                bk: get(&format!("{p}/attn/bk"))?,
                wv: get(&format!("{p}/attn/wv"))?,
                bv: get(&format!("{p}/attn/bv"))?,
                wo: get(&format!("{p}/attn/wo"))?,
                bo: get(&format!("{p}/attn/bo"))?,
                ln2_g: get(&format!("{p}/ln2/gamma"))?,
                ln2_b: get(&format!("{p}/ln2/beta"))?,
                w1: get(&format!("{p}/mlp/w1"))?,
                b1: get(&format!("{p}/mlp/b1"))?,
                w2: get(&format!("{p}/mlp/w2"))?,
                b2: get(&format!("{p}/mlp/b2"))?,
            });
        }
        Ok(Backbone {
            cfg,
            patch_w: get("backbone/patch_embed/w")?,
            patch_b: get("backbone/patch_embed/b")?,
            cls: get("backbone/cls")?,
            kd_token: get("backbone/kd_token")?,
            pos: get("backbone/pos")?,
            blocks,
            final_ln_g: get("backbone/final_ln/gamma")?,
            final_ln_b: get("backbone/final_ln/beta")?,
        })
    }
}

impl ContinualModel {
    /// Assembles a continual learner around pretrained backbone arrays.
    ///
    /// The backbone is copied into a fresh store and frozen per `freeze`;
    /// the distillation token is re-derived as the pretrained class token
    /// plus seeded Gaussian noise. Pool, heads, and any distillation extras
    /// are initialized from `rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        name: &str,
        vit: ViTConfig,
        pool_spec: PoolSpec,
        pretrained: &ParamStore,
        role: HeadRole,
        distill: Option<(&DistillConfig, &ViTConfig)>,
        freeze: FreezeMode,
        rng: &mut SeededRng,
    ) -> Result<ContinualModel> {
        let mut store = ParamStore::new();
        for (_, entry) in pretrained.entries() {
            if entry.name.starts_with("backbone/") {
                store.insert(entry.name.clone(), entry.value.clone(), true);
            }
        }
        let backbone = Backbone::from_store(vit.clone(), &store)?;

        // Distillation token: pretrained class token plus sigma=0.02 noise.
        let mut kd_rng = rng.split("kd-token");
        let cls = store.value(backbone.cls).clone();
        let noisy: Vec<f64> = cls.data().iter().map(|v| v + kd_rng.normal() * 0.02).collect();
        store.set_value(backbone.kd_token, Tensor::from_vec(vec![1, vit.embed_dim], noisy));

        match freeze {
            FreezeMode::All => backbone.freeze(&mut store),
            FreezeMode::ExceptLastBlock => backbone.freeze_except_last_block(&mut store),
        }

        let pool = PromptPool::init(pool_spec, vit.key_dim, vit.embed_dim, "pool", &mut store, rng)?;
        let head = ClassifierHead::init("head/class", vit.embed_dim, vit.class_capacity, role, &mut store, rng);

        let mut kd_head = None;
        let mut kd_prompts = Vec::new();
        let mut mappings = Vec::new();
        let mut gates = Vec::new();
        let teacher_blocks = distill.map(|(_, t)| t.blocks);
        if let Some((cfg, teacher_vit)) = distill {
            cfg.validate()?;
            if cfg.method.uses_kd_head() {
                kd_head = Some(ClassifierHead::init(
                    "head/kd",
                    vit.embed_dim,
                    vit.class_capacity,
                    HeadRole::Kd,
                    &mut store,
                    rng,
                ));
            }
            let depth = cfg.prompt_depth(vit.blocks);
            let mut kp_rng = rng.split("kd-prompts");
            for b in 0..depth {
                kd_prompts.push(store.insert(
                    format!("kd_prompt/block{b}"),
                    Tensor::randn(&[cfg.kd_prompt_len, vit.embed_dim], 0.02, &mut kp_rng),
                    true,
                ));
            }
            match cfg.method {
                DistillMethod::FitNets => {
                    mappings.push(FeatureMapping::init(
                        "distill/map_last",
                        vit.embed_dim,
                        teacher_vit.embed_dim,
                        &mut store,
                        rng,
                    ));
                }
                DistillMethod::ReviewKd => {
                    for b in 0..vit.blocks {
                        mappings.push(FeatureMapping::init(
                            &format!("distill/map{b}"),
                            vit.embed_dim,
                            teacher_vit.embed_dim,
                            &mut store,
                            rng,
                        ));
                    }
                    for b in 0..vit.blocks.saturating_sub(1) {
                        gates.push(store.insert(format!("distill/gate{b}"), Tensor::scalar(0.0), true));
                    }
                }
                _ => {}
            }
        }

        Ok(ContinualModel {
            name: name.to_string(),
            store,
            backbone,
            pool,
            head,
            kd_head,
            kd_prompts,
            mappings,
            gates,
            freeze_mode: freeze,
            teacher_blocks,
            query_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Query encoding with per-sample caching; valid while the backbone is
    /// unchanged. Callers that train backbone arrays must invalidate.
    pub fn query(&self, key: u64, image: &Tensor) -> Result<Tensor> {
        if let Some(q) = self.query_cache.borrow().get(&key) {
            return Ok(q.clone());
        }
        let q = self.backbone.query_encode(&self.store, image)?;
        self.query_cache.borrow_mut().insert(key, q.clone());
        Ok(q)
    }

    pub fn invalidate_query_cache(&self) {
        self.query_cache.borrow_mut().clear();
    }

    /// Every trainable-extras id (pool, heads, prompts, mappings, gates);
    /// excludes the backbone.
    pub fn adapter_ids(&self) -> Vec<ParamId> {
        let mut ids = self.pool.all_ids();
        ids.extend(self.head.ids());
        if let Some(h) = &self.kd_head {
            ids.extend(h.ids());
        }
        ids.extend(&self.kd_prompts);
        for m in &self.mappings {
            ids.extend(m.ids());
        }
        ids.extend(&self.gates);
        ids
    }

    pub fn uses_kd_token(&self, cfg: &DistillConfig) -> Result<bool> {
        if cfg.method.uses_kd_head() && self.kd_head.is_none() {
            return Err(CdlError::Config(
                "distillation token requested but no distillation classifier is configured".into(),
            ));
        }
        Ok(cfg.method.uses_kd_head())
    }

    fn kd_prefixes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &DistillConfig,
        mode: Mode,
    ) -> Vec<Option<(TensorId, TensorId)>> {
        let depth = cfg.prompt_depth(self.backbone.cfg.blocks).min(self.kd_prompts.len());
        let half = cfg.kd_prompt_len / 2;
        let mut out = vec![None; self.backbone.cfg.blocks];
        for b in 0..depth {
            let p = match mode {
                Mode::Train => tape.param(store, self.kd_prompts[b]),
                Mode::Eval => tape.param_detached(store, self.kd_prompts[b]),
            };
            let pk = tape.slice_rows(p, 0, half);
            let pv = tape.slice_rows(p, half, half);
            out[b] = Some((pk, pv));
        }
        out
    }

    /// Combined training loss for one sample (classification, distillation
    /// and pool terms per the configured method).
    pub fn student_loss(
        &self,
        tape: &mut Tape,
        key: u64,
        image: &Tensor,
        label: usize,
        ctx: &StudentLossCtx,
    ) -> Result<LossParts> {
        let q = self.query(key, image)?;
        self.student_loss_with(tape, &self.store, &q, image, label, ctx)
    }

    /// [`Self::student_loss`] against an explicit store and precomputed
    /// query, so gradient checks can perturb a copy of the parameters.
    pub fn student_loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: &Tensor,
        image: &Tensor,
        label: usize,
        ctx: &StudentLossCtx,
    ) -> Result<LossParts> {
        let cfg = ctx.cfg;
        cfg.validate()?;
        if cfg.method.uses_teacher() && ctx.teacher.is_none() {
            return Err(CdlError::Contract(format!(
                "distillation method {} requires a teacher snapshot",
                cfg.method.as_str()
            )));
        }
        let blocks = self.backbone.cfg.blocks;
        let pf = self.pool.forward(
            tape,
            store,
            q,
            blocks,
            PoolCtx { train: true, task_id: Some(ctx.task) },
        )?;
        let kd_prefixes = self.kd_prefixes(tape, store, cfg, Mode::Train);
        let prefixes: Vec<BlockPrefix> = pf
            .prefixes
            .iter()
            .zip(&kd_prefixes)
            .map(|(&cl, &kd)| BlockPrefix { cl, kd })
            .collect();
        let use_kd_token = self.uses_kd_token(cfg)?;
        let fwd = self.backbone.forward(tape, store, image, &prefixes, use_kd_token, Mode::Train)?;

        // Classification branch, masked to the current task's classes.
        let capacity = self.backbone.cfg.class_capacity;
        let raw = self.head.classify(tape, store, fwd.cls_embed, None, Mode::Train)?;
        let flat = tape.reshape(raw, &[capacity]);
        let masked = tape.mask_set(flat, ctx.active, NEG_MASK);
        let ce = tape.cross_entropy(masked, label);

        // Distillation branch.
        let (ce_weight, distill_term): (f64, Option<TensorId>) = match cfg.method {
            DistillMethod::None => (1.0, None),
            DistillMethod::Kd | DistillMethod::Dkd => {
                let teacher = ctx.teacher.unwrap();
                let t_scoped = gather_values(&teacher.logits, ctx.scope);
                let s_scoped = tape.gather(flat, ctx.scope);
                let term = if cfg.method == DistillMethod::Kd {
                    kd_loss(tape, s_scoped, &t_scoped, cfg.tau)?
                } else {
                    let target = scope_position(ctx.scope, label)?;
                    let (tc, nc) = dkd_loss(tape, s_scoped, &t_scoped, target, cfg.tau)?;
                    tape.add(tc, nc)
                };
                (1.0 - cfg.alpha, Some(term))
            }
            DistillMethod::FitNets => {
                let teacher = ctx.teacher.unwrap();
                let hint_feature = teacher_last_feature(teacher)?;
                let hint = fitnets_loss(
                    tape,
                    store,
                    *fwd.block_features.last().expect("at least one block"),
                    hint_feature,
                    &self.mappings[0],
                    true,
                )?;
                (1.0, Some(hint))
            }
            DistillMethod::ReviewKd => {
                let teacher = ctx.teacher.unwrap();
                let mut teacher_feats = Vec::with_capacity(blocks);
                for &tb in &self.compared_teacher_blocks()? {
                    teacher_feats.push(teacher.features.get(&tb).ok_or_else(|| {
                        CdlError::Contract(format!("teacher feature for block {tb} not cached"))
                    })?);
                }
                let review = reviewkd_loss(
                    tape,
                    store,
                    &fwd.block_features,
                    &teacher_feats,
                    &self.mappings,
                    &self.gates,
                    true,
                )?;
                (1.0, Some(review))
            }
            DistillMethod::Deit | DistillMethod::Kdp => {
                let teacher = ctx.teacher.unwrap();
                let kd_embed = fwd.kd_embed.expect("distillation token enabled");
                let kd_head = self.kd_head.as_ref().expect("validated above");
                let kd_raw = kd_head.classify(tape, store, kd_embed, None, Mode::Train)?;
                let kd_flat = tape.reshape(kd_raw, &[capacity]);
                let s_scoped = tape.gather(kd_flat, ctx.scope);
                let t_scoped = gather_values(&teacher.logits, ctx.scope);
                let term = kd_loss(tape, s_scoped, &t_scoped, cfg.tau)?;
                (1.0 - cfg.alpha, Some(term))
            }
        };

        let mut total = tape.scale(ce, ce_weight);
        let mut distill_value = 0.0;
        if let Some(term) = distill_term {
            distill_value = tape.value(term).item();
            let weighted = tape.scale(term, cfg.alpha);
            total = tape.add(total, weighted);
        }
        let mut pool_value = 0.0;
        if let Some(pool_term) = pf.loss {
            pool_value = tape.value(pool_term).item();
            let weighted = tape.scale(pool_term, cfg.lambda);
            total = tape.add(total, weighted);
        }
        Ok(LossParts {
            total,
            ce: tape.value(ce).item(),
            distill: distill_value,
            pool: pool_value,
            total_value: tape.value(total).item(),
        })
    }

    /// Teacher blocks compared against this model's blocks, in student block
    /// order.
    pub fn compared_teacher_blocks(&self) -> Result<Vec<usize>> {
        let n_t = self.teacher_blocks.ok_or_else(|| {
            CdlError::Config("feature objective without a configured teacher".into())
        })?;
        Ok(block_correspondence(self.backbone.cfg.blocks, n_t))
    }

    /// Test-time prediction over the classes seen so far (global label
    /// indices). Models with a distillation classifier combine both heads.
    pub fn predict(&self, key: u64, image: &Tensor, seen: &[usize]) -> Result<usize> {
        if seen.is_empty() {
            return Err(CdlError::Contract("prediction needs a non-empty class set".into()));
        }
        let mut tape = Tape::new();
        let q = self.query(key, image)?;
        let blocks = self.backbone.cfg.blocks;
        let pf = self.pool.forward(
            &mut tape,
            &self.store,
            &q,
            blocks,
            PoolCtx { train: false, task_id: None },
        )?;
        let use_kd = self.kd_head.is_some();
        // Distillation prompts are part of the model at test time as well.
        let kd_prefixes = if self.kd_prompts.is_empty() {
            vec![None; blocks]
        } else {
            let half = self.store.value(self.kd_prompts[0]).nrows() / 2;
            let mut out = vec![None; blocks];
            for (b, &p) in self.kd_prompts.iter().enumerate() {
                let pid = tape.param_detached(&self.store, p);
                let pk = tape.slice_rows(pid, 0, half);
                let pv = tape.slice_rows(pid, half, half);
                out[b] = Some((pk, pv));
            }
            out
        };
        let prefixes: Vec<BlockPrefix> = pf
            .prefixes
            .iter()
            .zip(&kd_prefixes)
            .map(|(&cl, &kd)| BlockPrefix { cl, kd })
            .collect();
        let fwd = self.backbone.forward(&mut tape, &self.store, image, &prefixes, use_kd, Mode::Eval)?;
        let capacity = self.backbone.cfg.class_capacity;
        let raw = self.head.classify(&mut tape, &self.store, fwd.cls_embed, None, Mode::Eval)?;
        let flat = tape.reshape(raw, &[capacity]);
        let class_logits = tape.gather(flat, seen);
        let winner = if let (true, Some(kd_embed)) = (use_kd, fwd.kd_embed) {
            let kd_head = self.kd_head.as_ref().unwrap();
            let kd_raw = kd_head.classify(&mut tape, &self.store, kd_embed, None, Mode::Eval)?;
            let kd_flat = tape.reshape(kd_raw, &[capacity]);
            let kd_logits = tape.gather(kd_flat, seen);
            let (_, idx) = combine_heads_predict(
                tape.value(class_logits).data(),
                tape.value(kd_logits).data(),
            )?;
            idx
        } else {
            let v = tape.value(class_logits).data();
            let mut best = 0;
            for i in 1..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            best
        };
        Ok(seen[winner])
    }
}

fn gather_values(values: &[f64], idx: &[usize]) -> Tensor {
    Tensor::from_vec(vec![idx.len()], idx.iter().map(|&i| values[i]).collect())
}

fn scope_position(scope: &[usize], label: usize) -> Result<usize> {
    scope
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| CdlError::Contract(format!("label {label} outside distillation scope")))
}

/// The teacher's hint feature: its last cached block.
fn teacher_last_feature(teacher: &TeacherOutputs) -> Result<&Tensor> {
    let last = teacher
        .features
        .keys()
        .copied()
        .max()
        .ok_or_else(|| CdlError::Contract("teacher features not cached".into()))?;
    Ok(&teacher.features[&last])
}

impl TeacherSnapshot {
    /// Captures an immutable copy of the teacher after training `task`.
    /// `feature_blocks` lists the teacher blocks whose features the student
    /// needs (empty for logit-only methods).
    pub fn of(model: &ContinualModel, task: usize, feature_blocks: Vec<usize>) -> TeacherSnapshot {
        let store = model.store.clone();
        let checksum = store.checksum_of(&store.ids().collect::<Vec<_>>());
        TeacherSnapshot {
            backbone: model.backbone.clone(),
            pool: model.pool.clone(),
            head: model.head.clone(),
            task,
            checksum,
            feature_blocks,
            outputs: RefCell::new(HashMap::new()),
            queries: RefCell::new(HashMap::new()),
            store,
        }
    }

    pub fn verify_unchanged(&self) -> bool {
        self.store.checksum_of(&self.store.ids().collect::<Vec<_>>()) == self.checksum
    }

    /// Teacher logits (and requested block features) for a sample; computed
    /// once and cached for subsequent epochs.
    pub fn outputs(&self, key: u64, image: &Tensor) -> Result<Rc<TeacherOutputs>> {
        if let Some(out) = self.outputs.borrow().get(&key) {
            return Ok(Rc::clone(out));
        }
        let q = {
            let cached = self.queries.borrow().get(&key).cloned();
            match cached {
                Some(q) => q,
                None => {
                    let q = self.backbone.query_encode(&self.store, image)?;
                    self.queries.borrow_mut().insert(key, q.clone());
                    q
                }
            }
        };
        let mut tape = Tape::new();
        let blocks = self.backbone.cfg.blocks;
        let pf = self.pool.forward(
            &mut tape,
            &self.store,
            &q,
            blocks,
            PoolCtx { train: false, task_id: Some(self.task) },
        )?;
        let prefixes: Vec<BlockPrefix> = pf
            .prefixes
            .iter()
            .map(|&cl| BlockPrefix { cl, kd: None })
            .collect();
        let fwd = self.backbone.forward(&mut tape, &self.store, image, &prefixes, false, Mode::Eval)?;
        let raw = self.head.classify(&mut tape, &self.store, fwd.cls_embed, None, Mode::Eval)?;
        let logits = tape.value(raw).data().to_vec();
        let mut features = HashMap::new();
        for &b in &self.feature_blocks {
            if b >= blocks {
                return Err(CdlError::Contract(format!(
                    "teacher has {blocks} blocks, feature {b} requested"
                )));
            }
            features.insert(b, tape.value(fwd.block_features[b]).clone());
        }
        let out = Rc::new(TeacherOutputs { logits, features });
        self.outputs.borrow_mut().insert(key, Rc::clone(&out));
        Ok(out)
    }
}
