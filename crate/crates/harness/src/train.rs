//! Two-stage training: augmented single-object groups first, then
//! multi-object synthetic groups, both under the full objective.

use std::path::{Path, PathBuf};

use cosal_core::{Adam, Ctx, ImageGroup, Model, Var};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{HarnessError, Result};
use crate::synth::{augment_single, derive_seed, render_single, synth_group};

/// Seed streams, so that training data never collides with held-out data.
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_POOL: u64 = 2;
pub const STREAM_TEST: u64 = 3;

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub saliency: f64,
    pub triplet: f64,
    pub contrastive: f64,
    pub total: f64,
}

enum Source {
    Fresh,
    Groups(Vec<ImageGroup>),
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    opt: Adam,
    rng: ChaCha8Rng,
    stage2: Source,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.net_config(), config.seed)?;
        let stage2 = if let Some(dir) = &config.paths.data_dir {
            let groups = dataset::read_groups(dir)?;
            if let Some(g) = groups.iter().find(|g| g.size() != config.image_size) {
                return Err(HarnessError::Data(format!(
                    "group {} has {}px images, config expects {}",
                    g.id,
                    g.size(),
                    config.image_size
                )));
            }
            Source::Groups(groups)
        } else if config.train_groups > 0 {
            let groups = (0..config.train_groups as u64)
                .map(|i| {
                    synth_group(
                        derive_seed(config.seed, STREAM_POOL, i),
                        config.group_size,
                        config.image_size,
                        config.difficulty,
                    )
                })
                .collect::<Result<_>>()?;
            Source::Groups(groups)
        } else {
            Source::Fresh
        };
        Ok(Self {
            config: config.clone(),
            model,
            opt: Adam::new(config.lr, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN, 0)),
            stage2,
        })
    }

    fn draw_group(&mut self, stage: u8) -> Result<ImageGroup> {
        let c = &self.config;
        match (stage, &self.stage2) {
            (1, _) => {
                let s: u64 = self.rng.gen();
                let (image, mask) = render_single(s, c.image_size)?;
                augment_single(&image, &mask, c.group_size, s ^ 0x5eed)
            }
            (_, Source::Fresh) => synth_group(self.rng.gen(), c.group_size, c.image_size, c.difficulty),
            (_, Source::Groups(groups)) => {
                let g = groups.choose(&mut self.rng).expect("non-empty pool");
                if g.len() <= c.group_size {
                    return Ok(g.clone());
                }
                let mut keep = sample(&mut self.rng, g.len(), c.group_size).into_vec();
                keep.sort_unstable();
                Ok(ImageGroup::new(
                    g.id.clone(),
                    keep.iter().map(|&i| g.names[i].clone()).collect(),
                    keep.iter().map(|&i| g.images[i].clone()).collect(),
                    keep.iter().map(|&i| g.masks[i].clone()).collect(),
                )?)
            }
        }
    }

    fn draw_orders(&mut self, n: usize) -> Vec<Vec<usize>> {
        (0..self.config.loss_config().orders())
            .map(|_| {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut self.rng);
                o
            })
            .collect()
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self, stage: u8, step: usize) -> Result<LogRow> {
        let mut groups = Vec::with_capacity(self.config.batch_size);
        let mut orders = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let g = self.draw_group(stage)?;
            orders.push(self.draw_orders(g.len()));
            groups.push(g);
        }
        let loss_cfg = self.config.loss_config();
        let (row, grads) = {
            let mut ctx = Ctx::train(&self.model.params);
            let batch: Vec<(Vec<Var>, Vec<Var>)> = groups
                .iter()
                .map(|g| {
                    let images = g.images.iter().map(|t| ctx.input(t.clone())).collect();
                    let masks = g.masks.iter().map(|m| ctx.input(cosal_core::model::mask_tensor(m))).collect();
                    (images, masks)
                })
                .collect();
            let (loss, parts) = self.model.net.batch_loss(&mut ctx, &batch, &orders, &loss_cfg)?;
            let grads = ctx.tape.backward(loss)?;
            let row = LogRow {
                stage,
                step,
                saliency: parts.saliency,
                triplet: parts.triplet,
                contrastive: parts.contrastive,
                total: parts.total,
            };
            (row, ctx.param_grads(&grads))
        };
        self.opt.step(&mut self.model.params, &grads)?;
        Ok(row)
    }

    /// Runs `steps` steps, handing each log row to `sink`.
    pub fn run_stage(&mut self, stage: u8, steps: usize, mut sink: impl FnMut(&LogRow) -> Result<()>) -> Result<()> {
        for s in 0..steps {
            let row = self.step(stage, s)?;
            sink(&row)?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRow>,
}

pub fn stage_checkpoint(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.json"))
}

/// Trains both stages, writing `stage1.json`, `stage2.json` (each with its
/// `.bin`) and the per-step CSV log into `out`. A non-finite loss aborts the
/// run; checkpoints of completed stages stay in place.
pub fn train(config: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let mut trainer = Trainer::new(config)?;
    let log_path = out.join(LOG_FILE);
    let mut writer = csv::Writer::from_path(&log_path)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for (stage, steps) in [(1u8, config.stage1_steps), (2u8, config.stage2_steps)] {
        trainer.run_stage(stage, steps, |row| {
            writer.serialize(row)?;
            writer.flush().map_err(HarnessError::io(&log_path))?;
            log.push(*row);
            Ok(())
        })?;
        let path = stage_checkpoint(out, stage);
        checkpoint::save(&path, config, &trainer.model.params)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoints,
        log,
    })
}
