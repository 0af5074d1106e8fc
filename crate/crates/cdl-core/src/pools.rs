//! Prompt pools: the three continual-learning prompt mechanisms.
//!
//! - top-K selection over key/prompt pairs matched by query-key cosine
//!   similarity, with a key-pulling loss over the selected keys;
//! - a shared general prompt in shallow blocks plus per-task expert prompts
//!   routed by task id at train time and by nearest key at test time;
//! - attended weighted composition over all components with orthogonality
//!   penalties on the stacked prompts, keys and attention vectors.
//!
//! Composed prompts are inserted via prefix-tuning: each prompt of length L
//! splits into a key half and a value half of L/2 rows.

use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    L2P,
    DualPrompt,
    Coda,
}

impl PoolMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMethod::L2P => "l2p",
            PoolMethod::DualPrompt => "dualprompt",
            PoolMethod::Coda => "coda",
        }
    }
}

/// Structural description of a prompt pool.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolSpec {
    L2P {
        m: usize,
        top_k: usize,
        prompt_len: usize,
        /// 0-indexed blocks covered by the composed prompt.
        layers: Vec<usize>,
    },
    Dual {
        g_len: usize,
        g_layers: Vec<usize>,
        e_len: usize,
        e_layers: Vec<usize>,
        tasks: usize,
    },
    Coda {
        m: usize,
        prompt_len: usize,
        layers: Vec<usize>,
        tasks: usize,
    },
}

impl PoolSpec {
    pub fn method(&self) -> PoolMethod {
        match self {
            PoolSpec::L2P { .. } => PoolMethod::L2P,
            PoolSpec::Dual { .. } => PoolMethod::DualPrompt,
            PoolSpec::Coda { .. } => PoolMethod::Coda,
        }
    }

    /// Desk-scale pool: 10 components, top-2, length-20 prompt in block 1.
    pub fn desk_l2p() -> PoolSpec {
        PoolSpec::L2P { m: 10, top_k: 2, prompt_len: 20, layers: vec![0] }
    }

    /// Desk-scale general/expert placement, scaled from the full-scale
    /// 12-block layout (general in blocks 1-2, expert in 3-5) by
    /// proportional rounding.
    pub fn desk_dual(n_blocks: usize, tasks: usize) -> PoolSpec {
        let scale = |full: f64| -> usize {
            ((full * n_blocks as f64 / 12.0).round() as usize).clamp(1, n_blocks)
        };
        let g_end = scale(2.0);
        let e_end = scale(5.0).max((g_end + 1).min(n_blocks));
        PoolSpec::Dual {
            g_len: 20,
            g_layers: (0..g_end).collect(),
            e_len: 20,
            e_layers: (g_end..e_end).collect(),
            tasks,
        }
    }

    /// Desk-scale attended composition: 4 components per task, length-8
    /// prompts in the first min(5, n) blocks.
    pub fn desk_coda(n_blocks: usize, tasks: usize) -> PoolSpec {
        PoolSpec::Coda {
            m: 4 * tasks,
            prompt_len: 8,
            layers: (0..n_blocks.min(5)).collect(),
        tasks,
        }
    }

    /// Full-scale presets with the published pool sizes (30 components for
    /// top-K, one expert per task, 100 attended components).
    pub fn paper_l2p() -> PoolSpec {
        PoolSpec::L2P { m: 30, top_k: 2, prompt_len: 20, layers: vec![0] }
    }

    pub fn paper_dual(tasks: usize) -> PoolSpec {
        PoolSpec::Dual {
            g_len: 20,
            g_layers: vec![0, 1],
            e_len: 20,
            e_layers: vec![2, 3, 4],
            tasks,
        }
    }

    pub fn paper_coda(tasks: usize) -> PoolSpec {
        PoolSpec::Coda { m: 100, prompt_len: 8, layers: (0..5).collect(), tasks }
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        let check_layers = |layers: &[usize]| -> Result<()> {
            if layers.iter().any(|&l| l >= n_blocks) {
                return Err(CdlError::Config(format!(
                    "pool layer set {layers:?} exceeds {n_blocks} blocks"
                )));
            }
            Ok(())
        };
        let check_even = |len: usize| -> Result<()> {
            if len == 0 || len % 2 != 0 {
                return Err(CdlError::Config(format!(
                    "prompt length {len} must be positive and even"
                )));
            }
            Ok(())
        };
        match self {
            PoolSpec::L2P { m, top_k, prompt_len, layers } => {
                if *top_k < 1 || top_k > m {
                    return Err(CdlError::Config(format!("need m >= k >= 1, got m={m} k={top_k}")));
                }
                check_even(*prompt_len)?;
                check_layers(layers)
            }
            PoolSpec::Dual { g_len, g_layers, e_len, e_layers, tasks } => {
                check_even(*g_len)?;
                check_even(*e_len)?;
                check_layers(g_layers)?;
                check_layers(e_layers)?;
                if g_layers.iter().any(|l| e_layers.contains(l)) {
                    return Err(CdlError::Config("general/expert layers overlap".into()));
                }
                if *tasks == 0 {
                    return Err(CdlError::Config("need at least one task".into()));
                }
                Ok(())
            }
            PoolSpec::Coda { m, prompt_len, layers, tasks } => {
                check_even(*prompt_len)?;
                check_layers(layers)?;
                if *tasks == 0 || m % tasks != 0 {
                    return Err(CdlError::Config(format!(
                        "component count {m} must divide evenly into {tasks} task partitions"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// What a pool picked for one query.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Selected component indices (top-K, or the routed expert).
    pub indices: Vec<usize>,
    /// Composition weights over all components (attended method only).
    pub weights: Option<Vec<f64>>,
    /// Similarity scores; one per component considered.
    pub scores: Vec<f64>,
    /// Values of the selected keys at selection time.
    pub selected_keys: Vec<Tensor>,
}

/// Per-sample pool context.
#[derive(Debug, Clone, Copy)]
pub struct PoolCtx {
    pub train: bool,
    pub task_id: Option<usize>,
}

/// Result of composing a pool for one query on the tape.
pub struct PoolForward {
    /// Key/value prefix halves per block (None where the pool places no
    /// prompt).
    pub prefixes: Vec<Option<(TensorId, TensorId)>>,
    /// Pool loss term, present at train time (unweighted).
    pub loss: Option<TensorId>,
    pub selection: Selection,
}

#[derive(Debug, Clone)]
pub struct PromptPool {
    pub spec: PoolSpec,
    pub key_dim: usize,
    pub embed_dim: usize,
    keys: Vec<ParamId>,
    prompts: Vec<ParamId>,
    attention: Vec<ParamId>,
    g_prompt: Option<ParamId>,
}

impl PromptPool {
    /// Initializes pool parameters under `prefix` names: keys and attention
    /// vectors uniform in [-1,1]/sqrt(key_dim), prompt contents Gaussian
    /// sigma=0.02.
    pub fn init(
        spec: PoolSpec,
        key_dim: usize,
        embed_dim: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> Result<PromptPool> {
        let mut r = rng.split(prefix);
        let lim = 1.0 / (key_dim as f64).sqrt();
        let mut pool = PromptPool {
            spec: spec.clone(),
            key_dim,
            embed_dim,
            keys: Vec::new(),
            prompts: Vec::new(),
            attention: Vec::new(),
            g_prompt: None,
        };
        match &spec {
            PoolSpec::L2P { m, prompt_len, .. } => {
                for i in 0..*m {
                    pool.keys.push(store.insert(
                        format!("{prefix}/l2p/key{i}"),
                        Tensor::rand_uniform(&[key_dim], -lim, lim, &mut r),
                        true,
                    ));
                    pool.prompts.push(store.insert(
                        format!("{prefix}/l2p/prompt{i}"),
                        Tensor::randn(&[*prompt_len, embed_dim], 0.02, &mut r),
                        true,
                    ));
                }
            }
            PoolSpec::Dual { g_len, e_len, tasks, .. } => {
                pool.g_prompt = Some(store.insert(
                    format!("{prefix}/dual/g_prompt"),
                    Tensor::randn(&[*g_len, embed_dim], 0.02, &mut r),
                    true,
                ));
                for t in 0..*tasks {
                    pool.keys.push(store.insert(
                        format!("{prefix}/dual/e_key{t}"),
                        Tensor::rand_uniform(&[key_dim], -lim, lim, &mut r),
                        true,
                    ));
                    pool.prompts.push(store.insert(
                        format!("{prefix}/dual/e_prompt{t}"),
                        Tensor::randn(&[*e_len, embed_dim], 0.02, &mut r),
                        true,
                    ));
                }
            }
            PoolSpec::Coda { m, prompt_len, .. } => {
                for i in 0..*m {
                    pool.keys.push(store.insert(
                        format!("{prefix}/coda/key{i}"),
                        Tensor::rand_uniform(&[key_dim], -lim, lim, &mut r),
                        true,
                    ));
                    pool.prompts.push(store.insert(
                        format!("{prefix}/coda/prompt{i}"),
                        Tensor::randn(&[*prompt_len, embed_dim], 0.02, &mut r),
                        true,
                    ));
                    pool.attention.push(store.insert(
                        format!("{prefix}/coda/attn{i}"),
                        Tensor::rand_uniform(&[key_dim], -lim, lim, &mut r),
                        true,
                    ));
                }
            }
        }
        Ok(pool)
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(&self.keys);
        ids.extend(&self.prompts);
        ids.extend(&self.attention);
        ids.extend(self.g_prompt);
        ids
    }

    pub fn component_count(&self) -> usize {
        self.prompts.len()
    }

    /// Index range of the components owned by one task (attended method).
    pub fn coda_partition(&self, task: usize) -> std::ops::Range<usize> {
        match &self.spec {
            PoolSpec::Coda { m, tasks, .. } => {
                let per = m / tasks;
                let t = task.min(tasks - 1);
                per * t..per * (t + 1)
            }
            _ => 0..self.component_count(),
        }
    }

    /// Adjusts trainability for the given task: the attended method trains
    /// only the current partition, the general/expert method trains the
    /// shared prompt plus the current expert, top-K trains everything.
    pub fn set_task(&self, store: &mut ParamStore, task: usize) {
        match &self.spec {
            PoolSpec::L2P { .. } => {
                for id in self.all_ids() {
                    store.set_trainable(id, true);
                }
            }
            PoolSpec::Dual { .. } => {
                store.set_trainable(self.g_prompt.unwrap(), true);
                for (i, (&k, &p)) in self.keys.iter().zip(&self.prompts).enumerate() {
                    store.set_trainable(k, i == task);
                    store.set_trainable(p, i == task);
                }
            }
            PoolSpec::Coda { .. } => {
                let part = self.coda_partition(task);
                for i in 0..self.component_count() {
                    let on = part.contains(&i);
                    store.set_trainable(self.keys[i], on);
                    store.set_trainable(self.prompts[i], on);
                    store.set_trainable(self.attention[i], on);
                }
            }
        }
    }

    fn scores(&self, store: &ParamStore, query: &[f64]) -> Result<Vec<f64>> {
        self.keys
            .iter()
            .map(|&k| cosine(query, store.value(k).data()))
            .collect()
    }

    /// Top-K indices by cosine similarity, ties broken by lowest index.
    /// Returned indices are sorted ascending for composition stability.
    pub fn l2p_select(&self, store: &ParamStore, query: &[f64], k: usize) -> Result<Selection> {
        let PoolSpec::L2P { m, .. } = &self.spec else {
            return Err(CdlError::Contract("l2p_select on a non-top-K pool".into()));
        };
        if k > *m {
            return Err(CdlError::Contract(format!("top-K {k} exceeds pool size {m}")));
        }
        let scores = self.scores(store, query)?;
        let mut order: Vec<usize> = (0..*m).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut indices: Vec<usize> = order.into_iter().take(k).collect();
        indices.sort_unstable();
        let selected_keys = indices.iter().map(|&i| store.value(self.keys[i]).clone()).collect();
        Ok(Selection { indices, weights: None, scores, selected_keys })
    }

    /// Expert routing: by task id at train time, by nearest key at test time.
    pub fn dual_route(&self, store: &ParamStore, query: &[f64], ctx: PoolCtx) -> Result<Selection> {
        let PoolSpec::Dual { tasks, .. } = &self.spec else {
            return Err(CdlError::Contract("dual_route on a non-dual pool".into()));
        };
        let scores = self.scores(store, query)?;
        let idx = match ctx.task_id {
            // A known task id routes directly (teacher inference during the
            // student phase also knows the task).
            Some(t) if t < *tasks => t,
            Some(t) => {
                return Err(CdlError::Contract(format!(
                    "task id {t} out of range for {tasks} experts"
                )))
            }
            None if ctx.train => {
                return Err(CdlError::Contract(
                    "expert routing requires a task id at train time".into(),
                ))
            }
            None => {
                // test time: argmax similarity, lowest index wins ties
                let mut best = 0;
                for i in 1..scores.len() {
                    if scores[i] > scores[best] {
                        best = i;
                    }
                }
                best
            }
        };
        Ok(Selection {
            indices: vec![idx],
            weights: None,
            scores,
            selected_keys: vec![store.value(self.keys[idx]).clone()],
        })
    }

    /// Attended weights alpha_i = cosine(query ⊙ A_i, k_i), on the tape so
    /// gradients reach both the keys and the attention vectors.
    pub fn coda_weights_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: &Tensor,
        train: bool,
    ) -> Result<Vec<TensorId>> {
        if self.attention.is_empty() {
            return Err(CdlError::Contract("attended weights on a pool without attention vectors".into()));
        }
        let q = tape.constant(&Tensor::from_vec(vec![self.key_dim], query.data().to_vec()));
        let mut alphas = Vec::with_capacity(self.component_count());
        for i in 0..self.component_count() {
            let a = self.leaf(tape, store, self.attention[i], train);
            let k = self.leaf(tape, store, self.keys[i], train);
            let masked = tape.mul(q, a);
            alphas.push(tape.cosine_sim(masked, k)?);
        }
        Ok(alphas)
    }

    /// Value-level attended weights.
    pub fn coda_weights(&self, store: &ParamStore, query: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let q = Tensor::from_vec(vec![self.key_dim], query.to_vec());
        let ids = self.coda_weights_tape(&mut tape, store, &q, false)?;
        Ok(ids.into_iter().map(|id| tape.value(id).item()).collect())
    }

    /// Weighted composition sum_i alpha_i P_i on the tape.
    pub fn coda_compose_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        alphas: &[TensorId],
        train: bool,
    ) -> Result<TensorId> {
        if alphas.len() != self.component_count() {
            return Err(CdlError::Contract(format!(
                "{} weights for {} components",
                alphas.len(),
                self.component_count()
            )));
        }
        let mut acc: Option<TensorId> = None;
        for (i, &alpha) in alphas.iter().enumerate() {
            let p = self.leaf(tape, store, self.prompts[i], train);
            let scaled = tape.mul_scalar(p, alpha);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => tape.add(prev, scaled),
            });
        }
        Ok(acc.expect("pool has at least one component"))
    }

    /// Value-level weighted composition.
    pub fn coda_compose(&self, store: &ParamStore, alpha: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = alpha.iter().map(|&a| tape.scalar(a)).collect();
        let composed = self.coda_compose_tape(&mut tape, store, &ids, false)?;
        Ok(tape.value(composed).clone())
    }

    /// Key-pulling loss sum over selected keys of (1 - cosine(q, k)).
    pub fn key_loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: &Tensor,
        indices: &[usize],
        train: bool,
    ) -> Result<TensorId> {
        if indices.is_empty() {
            return Err(CdlError::Contract("key loss over an empty selection".into()));
        }
        let q = tape.constant(&Tensor::from_vec(vec![self.key_dim], query.data().to_vec()));
        let mut acc: Option<TensorId> = None;
        for &i in indices {
            let k = self.leaf(tape, store, self.keys[i], train);
            let sim = tape.cosine_sim(q, k)?;
            let dist = tape.affine(sim, -1.0, 1.0);
            acc = Some(match acc {
                None => dist,
                Some(prev) => tape.add(prev, dist),
            });
        }
        Ok(acc.unwrap())
    }

    /// Value-level key loss.
    pub fn key_loss(&self, store: &ParamStore, query: &[f64], indices: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let q = Tensor::from_vec(vec![self.key_dim], query.to_vec());
        let id = self.key_loss_tape(&mut tape, store, &q, indices, false)?;
        Ok(tape.value(id).item())
    }

    fn leaf(&self, tape: &mut Tape, store: &ParamStore, id: ParamId, train: bool) -> TensorId {
        if train {
            tape.param(store, id)
        } else {
            tape.param_detached(store, id)
        }
    }

    /// Stacks 1-D parameters as rows of a matrix on the tape.
    fn stack_rows(&self, tape: &mut Tape, store: &ParamStore, ids: &[ParamId], train: bool) -> TensorId {
        let rows: Vec<TensorId> = ids
            .iter()
            .map(|&id| {
                let v = self.leaf(tape, store, id, train);
                let n = tape.value(v).numel();
                tape.reshape(v, &[1, n])
            })
            .collect();
        tape.concat_rows(&rows)
    }

    /// Orthogonality penalty over stacked prompts, keys and attention
    /// vectors; each prompt flattens to one row.
    pub fn coda_orth_loss_tape(&self, tape: &mut Tape, store: &ParamStore, train: bool) -> Result<TensorId> {
        let prompt_rows: Vec<TensorId> = self
            .prompts
            .iter()
            .map(|&id| {
                let p = self.leaf(tape, store, id, train);
                let n = tape.value(p).numel();
                tape.reshape(p, &[1, n])
            })
            .collect();
        let p_mat = tape.concat_rows(&prompt_rows);
        let k_mat = self.stack_rows(tape, store, &self.keys, train);
        let a_mat = self.stack_rows(tape, store, &self.attention, train);
        let lp = orthogonality_loss_tape(tape, p_mat);
        let lk = orthogonality_loss_tape(tape, k_mat);
        let la = orthogonality_loss_tape(tape, a_mat);
        let s = tape.add(lp, lk);
        Ok(tape.add(s, la))
    }

    /// Composes the pool for one query: prefixes per block, the pool loss
    /// (train only), and the selection record.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: &Tensor,
        n_blocks: usize,
        ctx: PoolCtx,
    ) -> Result<PoolForward> {
        self.spec.validate(n_blocks)?;
        let qv = query.data();
        let mut prefixes: Vec<Option<(TensorId, TensorId)>> = vec![None; n_blocks];
        match &self.spec {
            PoolSpec::L2P { top_k, prompt_len, layers, .. } => {
                let selection = self.l2p_select(store, qv, *top_k)?;
                let half = prompt_len / 2;
                let mut k_parts = Vec::with_capacity(selection.indices.len());
                let mut v_parts = Vec::with_capacity(selection.indices.len());
                for &i in &selection.indices {
                    let p = self.leaf(tape, store, self.prompts[i], ctx.train);
                    k_parts.push(tape.slice_rows(p, 0, half));
                    v_parts.push(tape.slice_rows(p, half, half));
                }
                let kp = tape.concat_rows(&k_parts);
                let vp = tape.concat_rows(&v_parts);
                for &l in layers {
                    prefixes[l] = Some((kp, vp));
                }
                let loss = if ctx.train {
                    Some(self.key_loss_tape(tape, store, query, &selection.indices, true)?)
                } else {
                    None
                };
                Ok(PoolForward { prefixes, loss, selection })
            }
            PoolSpec::Dual { g_len, g_layers, e_len, e_layers, .. } => {
                let selection = self.dual_route(store, qv, ctx)?;
                let g = self.leaf(tape, store, self.g_prompt.unwrap(), ctx.train);
                let gk = tape.slice_rows(g, 0, g_len / 2);
                let gv = tape.slice_rows(g, g_len / 2, g_len / 2);
                for &l in g_layers {
                    prefixes[l] = Some((gk, gv));
                }
                let e = self.leaf(tape, store, self.prompts[selection.indices[0]], ctx.train);
                let ek = tape.slice_rows(e, 0, e_len / 2);
                let ev = tape.slice_rows(e, e_len / 2, e_len / 2);
                for &l in e_layers {
                    prefixes[l] = Some((ek, ev));
                }
                let loss = if ctx.train {
                    Some(self.key_loss_tape(tape, store, query, &selection.indices, true)?)
                } else {
                    None
                };
                Ok(PoolForward { prefixes, loss, selection })
            }
            PoolSpec::Coda { prompt_len, layers, .. } => {
                let alphas = self.coda_weights_tape(tape, store, query, ctx.train)?;
                let weights: Vec<f64> = alphas.iter().map(|&a| tape.value(a).item()).collect();
                let composed = self.coda_compose_tape(tape, store, &alphas, ctx.train)?;
                let half = prompt_len / 2;
                let kp = tape.slice_rows(composed, 0, half);
                let vp = tape.slice_rows(composed, half, half);
                for &l in layers {
                    prefixes[l] = Some((kp, vp));
                }
                let scores = weights.clone();
                let loss = if ctx.train {
                    Some(self.coda_orth_loss_tape(tape, store, true)?)
                } else {
                    None
                };
                Ok(PoolForward {
                    prefixes,
                    loss,
                    selection: Selection {
                        indices: Vec::new(),
                        weights: Some(weights),
                        scores,
                        selected_keys: Vec::new(),
                    },
                })
            }
        }
    }

    /// Dispatching pool loss with its weight, at value level.
    pub fn pool_loss(
        &self,
        store: &ParamStore,
        query: &[f64],
        selection: &Selection,
        lambda: f64,
    ) -> Result<f64> {
        let raw = match &self.spec {
            PoolSpec::L2P { .. } | PoolSpec::Dual { .. } => {
                self.key_loss(store, query, &selection.indices)?
            }
            PoolSpec::Coda { .. } => {
                let mut tape = Tape::new();
                let id = self.coda_orth_loss_tape(&mut tape, store, false)?;
                tape.value(id).item()
            }
        };
        Ok(lambda * raw)
    }
}

/// ||B B^T - I||_F on the tape.
pub fn orthogonality_loss_tape(tape: &mut Tape, b: TensorId) -> TensorId {
    let rows = tape.value(b).nrows();
    let bbt = tape.matmul_nt(b, b);
    let eye = tape.constant(&Tensor::eye(rows));
    let diff = tape.sub(bbt, eye);
    let sq = tape.mul(diff, diff);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Value-level ||B B^T - I||_F.
pub fn orthogonality_loss(b: &Tensor) -> f64 {
    let (r, c) = (b.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..r {
        for j in 0..r {
            let mut dot = 0.0;
            for k in 0..c {
                dot += b.row(i)[k] * b.row(j)[k];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (dot - target) * (dot - target);
        }
    }
    acc.sqrt()
}
