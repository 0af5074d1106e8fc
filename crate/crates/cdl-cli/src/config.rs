//! Experiment configuration: a strict JSON document with defaults for every
//! field. Unknown keys are fatal so experiment records stay trustworthy; the
//! resolved document is echoed next to the results.

use std::path::Path;

use cdl_core::data::DatasetSpec;
use cdl_core::distill::{ClassScope, DistillConfig, DistillMethod};
use cdl_core::harness::{PoolPreset, RunConfig};
use cdl_core::pools::PoolMethod;
use cdl_core::vit::ViTConfig;
use cdl_core::{CdlError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetJson {
    pub classes: usize,
    pub pretrain_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub shift_jitter: usize,
    pub contrast_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetJson {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DatasetJson {
            classes: d.classes,
            pretrain_classes: d.pretrain_classes,
            image_size: d.image_size,
            channels: d.channels,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            noise_sigma: d.noise_sigma,
            shift_jitter: d.shift_jitter,
            contrast_jitter: d.contrast_jitter,
            seed: d.seed,
        }
    }
}

impl DatasetJson {
    pub fn to_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            pretrain_classes: self.pretrain_classes,
            image_size: self.image_size,
            channels: self.channels,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            noise_sigma: self.noise_sigma,
            shift_jitter: self.shift_jitter,
            contrast_jitter: self.contrast_jitter,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ViTJson {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTJson {
    fn default() -> Self {
        ViTJson {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 32,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTJson {
    pub fn desk_teacher() -> ViTJson {
        ViTJson { embed_dim: 64, blocks: 6, ..ViTJson::default() }
    }

    pub fn to_config(&self, class_capacity: usize) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            key_dim: self.embed_dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            class_capacity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillJson {
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub kd_prompt_len: usize,
    /// Blocks 1..=depth carry distillation prompts; null means every block
    /// for the prompt-based method and none for the others.
    pub kd_prompt_depth: Option<usize>,
    /// "current-task" or "all-seen".
    pub class_scope: String,
}

impl Default for DistillJson {
    fn default() -> Self {
        DistillJson {
            alpha: 0.5,
            lambda: 1.0,
            tau: 2.0,
            kd_prompt_len: 6,
            kd_prompt_depth: None,
            class_scope: "current-task".to_string(),
        }
    }
}

impl DistillJson {
    pub fn to_config(&self, method: DistillMethod) -> Result<DistillConfig> {
        let scope = match self.class_scope.as_str() {
            "current-task" => ClassScope::CurrentTask,
            "all-seen" => ClassScope::AllSeen,
            other => {
                return Err(CdlError::Config(format!(
                    "unknown class scope {other}; expected current-task or all-seen"
                )))
            }
        };
        let cfg = DistillConfig {
            method,
            alpha: self.alpha,
            lambda: self.lambda,
            tau: self.tau,
            kd_prompt_len: self.kd_prompt_len,
            kd_prompt_depth: self.kd_prompt_depth,
            class_scope: scope,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepJson {
    pub kd_prompt_len: Option<Vec<usize>>,
    pub kd_prompt_depth: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Base seed for dataset generation and pretraining.
    pub seed: u64,
    /// Seeds of the run cells.
    pub seeds: Vec<u64>,
    pub dataset: DatasetJson,
    pub tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    /// "l2p", "dualprompt" or "coda".
    pub pool: String,
    /// "desk" or "paper".
    pub pool_preset: String,
    /// Distillation methods to run, one cell per method.
    pub methods: Vec<String>,
    pub distill: DistillJson,
    pub student: ViTJson,
    pub teacher: Option<ViTJson>,
    pub unfreeze_last_block: bool,
    pub eval_teacher: bool,
    pub sweep: Option<SweepJson>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: vec![0],
            dataset: DatasetJson::default(),
            tasks: 5,
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.001,
            pretrain_epochs: 5,
            pool: "coda".to_string(),
            pool_preset: "desk".to_string(),
            methods: vec!["none".to_string()],
            distill: DistillJson::default(),
            student: ViTJson::default(),
            teacher: Some(ViTJson::desk_teacher()),
            unfreeze_last_block: false,
            eval_teacher: true,
            sweep: None,
        }
    }
}

/// Parses a config-level method name. `kd+prompts` is plain soft-target
/// distillation with distillation prompts in every block: the grid cell
/// with prompts but no dedicated classifier.
fn parse_method(name: &str, blocks: usize) -> Result<(DistillMethod, Option<usize>)> {
    if name == "kd+prompts" {
        return Ok((DistillMethod::Kd, Some(blocks)));
    }
    Ok((DistillMethod::parse(name)?, None))
}

/// One (seed, method, sweep point) run cell.
#[derive(Debug, Clone)]
pub struct RunCell {
    pub run_id: String,
    pub seed: u64,
    pub method: DistillMethod,
    pub distill: DistillConfig,
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| CdlError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CdlError::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::parse_str(&text)
    }

    pub fn parse_opt(path: Option<&Path>) -> Result<ExperimentConfig> {
        match path {
            Some(p) => ExperimentConfig::parse_file(p),
            None => {
                let cfg = ExperimentConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn pool_method(&self) -> Result<PoolMethod> {
        Ok(match self.pool.as_str() {
            "l2p" => PoolMethod::L2P,
            "dualprompt" => PoolMethod::DualPrompt,
            "coda" => PoolMethod::Coda,
            other => {
                return Err(CdlError::Config(format!(
                    "unknown pool method {other}; expected l2p, dualprompt or coda"
                )))
            }
        })
    }

    pub fn pool_preset(&self) -> Result<PoolPreset> {
        Ok(match self.pool_preset.as_str() {
            "desk" => PoolPreset::Desk,
            "paper" => PoolPreset::Paper,
            other => {
                return Err(CdlError::Config(format!(
                    "unknown pool preset {other}; expected desk or paper"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.to_spec().validate()?;
        self.pool_method()?;
        self.pool_preset()?;
        if self.seeds.is_empty() {
            return Err(CdlError::Config("need at least one seed".into()));
        }
        if self.methods.is_empty() {
            return Err(CdlError::Config("need at least one method".into()));
        }
        let cl = self.dataset.classes - self.dataset.pretrain_classes;
        if self.tasks == 0 || cl % self.tasks != 0 {
            return Err(CdlError::Config(format!(
                "{cl} continual classes do not divide into {} tasks",
                self.tasks
            )));
        }
        for m in &self.methods {
            let (method, _) = parse_method(m, self.student.blocks)?;
            if method.uses_teacher() && self.teacher.is_none() {
                return Err(CdlError::Config(format!(
                    "method {m} needs a teacher model, but \"teacher\" is null"
                )));
            }
        }
        self.distill.to_config(DistillMethod::None)?;
        Ok(())
    }

    /// The (seed x method x sweep) cells of this experiment, in a stable
    /// order.
    pub fn cells(&self) -> Result<Vec<RunCell>> {
        let lens: Vec<Option<usize>> = match self.sweep.as_ref().and_then(|s| s.kd_prompt_len.clone()) {
            Some(v) if !v.is_empty() => v.into_iter().map(Some).collect(),
            _ => vec![None],
        };
        let depths: Vec<Option<usize>> = match self.sweep.as_ref().and_then(|s| s.kd_prompt_depth.clone()) {
            Some(v) if !v.is_empty() => v.into_iter().map(Some).collect(),
            _ => vec![None],
        };
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for m in &self.methods {
                let (method, forced_depth) = parse_method(m, self.student.blocks)?;
                for &len in &lens {
                    for &depth in &depths {
                        let mut dj = self.distill.clone();
                        if let Some(l) = len {
                            dj.kd_prompt_len = l;
                        }
                        if let Some(d) = depth.or(forced_depth) {
                            dj.kd_prompt_depth = Some(d);
                        }
                        let distill = dj.to_config(method)?;
                        let effective_depth = depth.or(forced_depth).or(self.distill.kd_prompt_depth);
                        let mut run_id = format!("{}-{}-s{seed}", self.pool, method.as_str());
                        if let Some(l) = len {
                            run_id.push_str(&format!("-plen{l}"));
                        }
                        if let Some(d) = effective_depth {
                            run_id.push_str(&format!("-pdep{d}"));
                        }
                        cells.push(RunCell { run_id, seed, method, distill });
                    }
                }
            }
        }
        Ok(cells)
    }

    /// The core run configuration for one cell.
    pub fn run_config(&self, cell: &RunCell) -> Result<RunConfig> {
        let classes = self.dataset.classes - self.dataset.pretrain_classes;
        Ok(RunConfig {
            seed: cell.seed,
            tasks: self.tasks,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            pool_method: self.pool_method()?,
            pool_preset: self.pool_preset()?,
            distill: cell.distill.clone(),
            unfreeze_last_block: self.unfreeze_last_block,
            student: self.student.to_config(classes),
            teacher: self
                .teacher
                .as_ref()
                .map(|t| t.to_config(classes)),
            eval_teacher: self.eval_teacher,
        })
    }

    pub fn echo_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
