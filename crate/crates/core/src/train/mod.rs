//! Single-stage classification training with AdamW.

mod adamw;
mod checkpoint;
mod config;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{
    fingerprint, load_checkpoint, load_checkpoint_matching, load_checkpoint_with_fingerprint, save_checkpoint,
    Checkpoint, CHECKPOINT_VERSION,
};
pub use config::{best_path, LrSchedule, TrainConfig};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_policy, Mode};
use crate::dataset::{load_manifest, render_split, DatasetManifest, DrawingImage, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{forward, head_loss, update_running_stats, BoundParams, ModelParams, BN_MOMENTUM};
use crate::retrieval::{embed_images, EmbeddingStore};
use crate::tensor::{Graph, Tensor};

/// RNG stream ids derived from the run seed.
const STREAM_SAMPLER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// Raises glibc's trim and mmap thresholds so the large per-iteration
/// buffers are recycled instead of being returned to the kernel.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<DrawingImage>,
    pub val: Vec<DrawingImage>,
}

impl TrainData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            train: manifest.load_images(Split::Train)?,
            val: manifest.load_images(Split::Val)?,
        })
    }

    /// Rendered in memory, split as the on-disk generator would.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        let (train, val) = render_split(cfg)?;
        Ok(Self { train, val })
    }
}

/// Shuffled passes over the training set; a pass ends once fewer than a
/// full batch of images remain.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> &[usize] {
        if self.pos + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += batch;
        &self.order[self.pos - batch..self.pos]
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamW,
    /// Class index to patent id.
    pub classes: Vec<String>,
    images: Vec<DrawingImage>,
    labels: Vec<usize>,
    sampler: EpochSampler,
    aug_rng: ChaCha8Rng,
    pub iter: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: Vec<DrawingImage>) -> Result<Self> {
        config.validate()?;
        if train.len() < config.batch_size {
            return Err(Error::invalid(format!(
                "only {} training images for batch size {}; use a smaller --batch-size",
                train.len(),
                config.batch_size
            )));
        }
        let classes: Vec<String> = train
            .iter()
            .map(|im| im.patent_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let labels = train.iter().map(|im| index[im.patent_id.as_str()]).collect();
        let params = ModelParams::init(&config.model_config(classes.len()), config.seed)?;
        let optimizer = AdamW::new(params.trainable().iter().map(|(_, t)| t.shape()));
        let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sampler_rng.set_stream(STREAM_SAMPLER);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
        aug_rng.set_stream(STREAM_AUGMENT);
        Ok(Self {
            sampler: EpochSampler::new(train.len(), sampler_rng),
            aug_rng,
            images: train,
            labels,
            classes,
            params,
            optimizer,
            config,
            iter: 0,
        })
    }

    /// Samples and augments the next training batch.
    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let bs = self.config.batch_size;
        let side = self.config.augment.crop_size;
        let idx = self.sampler.next(bs).to_vec();
        let mut data = Vec::with_capacity(bs * side * side);
        for &i in &idx {
            let t = apply_policy(&self.images[i], &self.config.augment, Mode::Train, &mut self.aug_rng)?;
            data.extend(t.into_data());
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new([bs, 1, side, side], data)?, labels))
    }

    /// Forward, backward and one optimizer update on a given batch. Returns the loss.
    pub fn step_on(&mut self, batch: Tensor, labels: &[usize]) -> Result<f32> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params, true);
        let input = g.constant(batch);
        let out = forward(&mut g, &self.params, &bound, input, Mode::Train)?;
        let loss = head_loss(&mut g, &self.params, &bound, out.head_input, labels)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .into_iter()
            .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
            .collect();
        drop(g);
        let lr = self.config.lr_schedule.lr_at(self.config.lr, self.iter);
        self.optimizer
            .step(self.params.trainable_mut(), &grads, lr, self.config.weight_decay)?;
        self.params.clamp_gem_p();
        update_running_stats(&mut self.params, &out.batch_stats, BN_MOMENTUM as f32)?;
        self.iter += 1;
        Ok(value)
    }

    pub fn step(&mut self) -> Result<f32> {
        let (batch, labels) = self.next_batch()?;
        self.step_on(batch, &labels)
    }

    /// Leave-one-out metrics of the current model on `images`.
    pub fn evaluate_on(&self, images: &[DrawingImage]) -> Result<MetricsReport> {
        let store = embed_store(&self.params, images, self.config.augment.eval_size, self.config.eval_batch_size)?;
        evaluate(&store, None)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            classes: self.classes.clone(),
            train_config: Some(self.config.clone()),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Store over in-memory images, labelled by patent id.
pub fn embed_store(params: &ModelParams, images: &[DrawingImage], eval_size: usize, batch: usize) -> Result<EmbeddingStore> {
    let feats = embed_images(params, images, eval_size, batch)?;
    EmbeddingStore::new(
        &feats,
        images.iter().map(|im| im.patent_id.clone()).collect(),
        images.iter().map(|im| format!("{}#{}", im.patent_id, im.view_index)).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub classes: Vec<String>,
    /// Loss of every iteration.
    pub losses: Vec<f32>,
    pub evals: Vec<(usize, MetricsReport)>,
    pub best: Option<(usize, MetricsReport)>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

struct CsvLog(Option<std::io::BufWriter<std::fs::File>>, std::path::PathBuf);

impl CsvLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(Self(None, Default::default()));
        };
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        let mut log = Self(Some(std::io::BufWriter::new(f)), p.to_path_buf());
        log.line("iter,loss,val_mAP,val_rank1")?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{s}").and_then(|_| w.flush()).map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

/// Trains on `config.manifest`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let path = config
        .manifest
        .as_ref()
        .ok_or_else(|| Error::invalid("training config has no manifest"))?;
    let manifest = load_manifest(path)?;
    train_with_data(config, TrainData::from_manifest(&manifest)?)
}

/// Full training run: logs, periodic validation, best and final checkpoints.
pub fn train_with_data(config: &TrainConfig, data: TrainData) -> Result<TrainOutcome> {
    tune_allocator();
    let mut trainer = Trainer::new(config.clone(), data.train)?;
    let mut log = CsvLog::open(config.log_path.as_deref())?;
    let mut losses = Vec::with_capacity(config.max_iters);
    let mut evals = Vec::new();
    let mut best: Option<(usize, MetricsReport)> = None;
    let started = Instant::now();
    log::info!(
        "training {} classes on {} images, {} parameters",
        trainer.classes.len(),
        trainer.images.len(),
        trainer.params.num_trainable()
    );
    for it in 1..=config.max_iters {
        let loss = trainer.step()?;
        losses.push(loss);
        let eval_now = !data.val.is_empty()
            && (it == config.max_iters || (config.eval_every > 0 && it % config.eval_every == 0));
        let report = if eval_now { Some(trainer.evaluate_on(&data.val)?) } else { None };
        if it % config.log_every == 0 || report.is_some() {
            let (m, r1) = report
                .as_ref()
                .map(|r| (r.map.to_string(), r.rank(1).unwrap_or(0.0).to_string()))
                .unwrap_or_default();
            log.line(&format!("{it},{loss},{m},{r1}"))?;
            log::info!("iter {it} loss {loss:.4} {:.1}s", started.elapsed().as_secs_f64());
        }
        if let Some(r) = report {
            log::info!("iter {it} val mAP {:.4} rank-1 {:.4}", r.map, r.rank(1).unwrap_or(0.0));
            if best.as_ref().is_none_or(|(_, b)| r.map > b.map) {
                if let Some(p) = config.best_checkpoint_path() {
                    save_checkpoint(&p, &trainer.checkpoint())?;
                }
                best = Some((it, r.clone()));
            }
            evals.push((it, r));
        }
    }
    if let Some(p) = &config.checkpoint_path {
        save_checkpoint(p, &trainer.checkpoint())?;
    }
    Ok(TrainOutcome {
        params: trainer.params,
        classes: trainer.classes,
        losses,
        evals,
        best,
    })
}
