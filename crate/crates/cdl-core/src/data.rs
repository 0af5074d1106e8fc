//! Synthetic class-incremental data.
//!
//! Each class is a fixed random prototype image; samples are the prototype
//! under a small circular shift, a contrast scale around mid-gray, and
//! per-pixel Gaussian noise, quantized to bytes. A leading block of classes
//! is reserved for backbone pretraining and never appears in the continual
//! stream.
//!
//! On disk this is the CDLD format: magic `CDLD`, version u16, little-endian
//! header (sample count u32, channels u8, height u16, width u16, class count
//! u16, pretraining class count u16), then u16 labels and raw u8 pixels per
//! sample, channel-major. Samples are stored class-major, each class's
//! training samples followed by its test samples.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CdlError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub pretrain_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-pixel Gaussian noise in [0,1] units.
    pub noise_sigma: f64,
    /// Circular shift radius in pixels.
    pub shift_jitter: usize,
    /// Contrast scale drawn from [1-j, 1+j] around mid-gray.
    pub contrast_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// Desk benchmark: 30 classes (10 pretraining + 20 continual), 200
    /// train / 50 test per class, 16x16x3 images, sigma = 0.05.
    fn default() -> DatasetSpec {
        DatasetSpec {
            classes: 30,
            pretrain_classes: 10,
            image_size: 16,
            channels: 3,
            train_per_class: 200,
            test_per_class: 50,
            noise_sigma: 0.05,
            shift_jitter: 1,
            contrast_jitter: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.pretrain_classes >= self.classes {
            return Err(CdlError::Config(format!(
                "need pretraining classes ({}) < total classes ({})",
                self.pretrain_classes, self.classes
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CdlError::Contract(format!(
                "noise sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CdlError::Config("need at least one train and test sample per class".into()));
        }
        Ok(())
    }

    pub fn cl_classes(&self) -> usize {
        self.classes - self.pretrain_classes
    }

    pub fn samples_per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub label: u16,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Deterministic generation from the spec's seed.
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        spec.validate()?;
        let root = SeededRng::new(spec.seed).split("dataset");
        let hw = spec.image_size;
        let n_px = spec.pixels_per_sample();
        let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class());
        for class in 0..spec.classes {
            let mut proto_rng = root.split(&format!("class{class}/prototype"));
            let prototype: Vec<f64> = (0..n_px).map(|_| proto_rng.next_f64()).collect();
            for s in 0..spec.samples_per_class() {
                let mut rng = root.split(&format!("class{class}/sample{s}"));
                let dx = rng.jitter_int(spec.shift_jitter);
                let dy = rng.jitter_int(spec.shift_jitter);
                let contrast = rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter);
                let mut pixels = Vec::with_capacity(n_px);
                for c in 0..spec.channels {
                    for y in 0..hw {
                        for x in 0..hw {
                            let sy = ((y as i64 - dy).rem_euclid(hw as i64)) as usize;
                            let sx = ((x as i64 - dx).rem_euclid(hw as i64)) as usize;
                            let base = prototype[c * hw * hw + sy * hw + sx];
                            let mut v = 0.5 + (base - 0.5) * contrast;
                            if spec.noise_sigma > 0.0 {
                                v += rng.normal() * spec.noise_sigma;
                            }
                            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
                samples.push(Sample { label: class as u16, pixels });
            }
        }
        Ok(Dataset { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image as a (C, H, W) tensor in [0, 1].
    pub fn image(&self, idx: usize) -> Tensor {
        let spec = &self.spec;
        let s = &self.samples[idx];
        Tensor::from_vec(
            vec![spec.channels, spec.image_size, spec.image_size],
            s.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }

    pub fn label(&self, idx: usize) -> usize {
        self.samples[idx].label as usize
    }

    fn class_offset(&self, class: usize) -> usize {
        class * self.spec.samples_per_class()
    }

    pub fn train_indices(&self, class: usize) -> std::ops::Range<usize> {
        let o = self.class_offset(class);
        o..o + self.spec.train_per_class
    }

    pub fn test_indices(&self, class: usize) -> std::ops::Range<usize> {
        let o = self.class_offset(class) + self.spec.train_per_class;
        o..o + self.spec.test_per_class
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = &self.spec;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"CDLD")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        w.write_all(&[spec.channels as u8])?;
        w.write_all(&(spec.image_size as u16).to_le_bytes())?;
        w.write_all(&(spec.image_size as u16).to_le_bytes())?;
        w.write_all(&(spec.classes as u16).to_le_bytes())?;
        w.write_all(&(spec.pretrain_classes as u16).to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&s.label.to_le_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&s.pixels)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a CDLD file. The train/test split per class is not part of the
    /// format; the caller supplies the counts (they are checked against the
    /// header).
    pub fn load(path: &Path, train_per_class: usize, test_per_class: usize) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"CDLD" {
            return Err(CdlError::Format(format!(
                "bad magic {magic:?}, expected CDLD, in {}",
                path.display()
            )));
        }
        let mut b2 = [0u8; 2];
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != 1 {
            return Err(CdlError::Format(format!("unsupported CDLD version {version}")));
        }
        r.read_exact(&mut b4)?;
        let n_samples = u32::from_le_bytes(b4) as usize;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let channels = b1[0] as usize;
        r.read_exact(&mut b2)?;
        let height = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b2)?;
        let width = u16::from_le_bytes(b2) as usize;
        if height != width {
            return Err(CdlError::Format("non-square images are not supported".into()));
        }
        r.read_exact(&mut b2)?;
        let classes = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b2)?;
        let pretrain_classes = u16::from_le_bytes(b2) as usize;
        if n_samples != classes * (train_per_class + test_per_class) {
            return Err(CdlError::Format(format!(
                "{n_samples} samples do not match {classes} classes x {} per class",
                train_per_class + test_per_class
            )));
        }
        let mut labels = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            r.read_exact(&mut b2)?;
            labels.push(u16::from_le_bytes(b2));
        }
        let n_px = channels * height * width;
        let mut samples = Vec::with_capacity(n_samples);
        for label in labels {
            let mut pixels = vec![0u8; n_px];
            r.read_exact(&mut pixels)?;
            samples.push(Sample { label, pixels });
        }
        let spec = DatasetSpec {
            classes,
            pretrain_classes,
            image_size: height,
            channels,
            train_per_class,
            test_per_class,
            // generation parameters are not recoverable from the file
            noise_sigma: 0.0,
            shift_jitter: 0,
            contrast_jitter: 0.0,
            seed: 0,
        };
        Ok(Dataset { spec, samples })
    }
}

/// One continual task: a disjoint set of classes with its train/test sample
/// indices into the dataset.
#[derive(Debug, Clone)]
pub struct Task {
    /// Global class ids of this task.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Total number of continual classes (classifier capacity).
    pub cl_classes: usize,
    /// Shuffled global class order, chunked into tasks.
    pub class_order: Vec<usize>,
}

impl TaskStream {
    /// Continual-learning label of a global class id (stable across tasks).
    pub fn cl_label(&self, data: &Dataset, class: usize) -> usize {
        class - data.spec.pretrain_classes
    }

    /// Sorted CL labels of every class in tasks 0..=t.
    pub fn seen_labels(&self, data: &Dataset, t: usize) -> Vec<usize> {
        let mut seen: Vec<usize> = self.tasks[..=t]
            .iter()
            .flat_map(|task| task.classes.iter().map(|&c| self.cl_label(data, c)))
            .collect();
        seen.sort_unstable();
        seen
    }
}

/// Shuffles the continual classes by seed and chunks them into `t` tasks of
/// equal size.
pub fn make_task_stream(data: &Dataset, t: usize, seed: u64) -> Result<TaskStream> {
    let spec = &data.spec;
    let cl = spec.cl_classes();
    if t == 0 || cl % t != 0 {
        return Err(CdlError::Config(format!(
            "{cl} continual classes do not divide into {t} tasks"
        )));
    }
    let mut order: Vec<usize> = (spec.pretrain_classes..spec.classes).collect();
    let mut rng = SeededRng::new(seed).split("task-stream");
    rng.shuffle(&mut order);
    let per = cl / t;
    let mut tasks = Vec::with_capacity(t);
    for chunk in order.chunks(per) {
        let mut classes = chunk.to_vec();
        classes.sort_unstable();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            train.extend(data.train_indices(c));
            test.extend(data.test_indices(c));
        }
        tasks.push(Task { classes, train, test });
    }
    // class-disjointness is structural; verify anyway
    let mut all = HashSet::new();
    for task in &tasks {
        for &c in &task.classes {
            if !all.insert(c) {
                return Err(CdlError::Config(format!("class {c} appears in two tasks")));
            }
        }
    }
    Ok(TaskStream { tasks, cl_classes: cl, class_order: order })
}

/// Counts dataset reads during a training phase and rejects any access
/// outside the allowed sample set.
pub struct AuditedReader<'a> {
    data: &'a Dataset,
    allowed: HashSet<usize>,
    pub reads: u64,
}

impl<'a> AuditedReader<'a> {
    pub fn new(data: &'a Dataset, allowed: &[usize]) -> AuditedReader<'a> {
        AuditedReader { data, allowed: allowed.iter().copied().collect(), reads: 0 }
    }

    pub fn image(&mut self, idx: usize) -> Result<Tensor> {
        if !self.allowed.contains(&idx) {
            return Err(CdlError::RehearsalViolation(format!(
                "sample {idx} is outside the current task's training partition"
            )));
        }
        self.reads += 1;
        Ok(self.data.image(idx))
    }

    pub fn label(&self, idx: usize) -> usize {
        self.data.label(idx)
    }
}
