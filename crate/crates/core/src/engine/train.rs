//! Episodic training: one episode per Adam step, halving learning rate,
//! periodic validation and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use super::config::Config;
use super::data::{synth_splits, Dataset, Splits};
use super::episode::{sample_episode, training_batch};
use super::eval::evaluate;
use super::loader::load_splits;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numeric::{adam_step, AdamState};

/// Generator streams derived from the run seed.
const MODEL_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
/// Seed offset for validation episodes, kept fixed so validation scores are comparable.
const VALIDATION_SEED: u64 = 0x7a11_da7e;

pub const LOG_FILE: &str = "train_log.csv";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub episode: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_accuracy: Option<f64>,
}

impl LogRecord {
    fn csv(&self) -> String {
        let val = self.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.episode, self.loss, self.lr, val)
    }
}

impl TrainState {
    /// Fresh weights and optimizer for `config`.
    pub fn new(config: &Config) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(MODEL_STREAM);
        let model = Model::init(config.model, &mut init)?;
        let adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t), config.train.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState {
            model,
            adam,
            episode: 0,
            rng,
            best_val: None,
        })
    }
}

/// Image splits for `config`, resized to the augmentation input size.
pub fn prepare_data(config: &Config) -> Result<Splits> {
    let need = config.episode.shot + config.episode.queries.max(config.episode.eval_queries);
    let size = config.augment.resize;
    match &config.data.root {
        Some(root) => {
            let manifest = if config.data.manifest.is_absolute() {
                config.data.manifest.clone()
            } else {
                root.join(&config.data.manifest)
            };
            load_splits(root, &manifest, Some(size), need)
        }
        None => {
            let raw = synth_splits(
                config.data.synthetic_classes,
                config.data.synthetic_per_class,
                config.data.synthetic_size,
                config.data.synthetic_seed,
            )?;
            Ok(Splits {
                auxiliary: raw.auxiliary.resized(size)?,
                validation: raw.validation.resized(size)?,
                test: raw.test.resized(size)?,
            })
        }
    }
}

pub type ProgressFn = Box<dyn FnMut(&LogRecord)>;

/// Knobs that do not change results.
#[derive(Default)]
pub struct TrainOptions {
    /// Log, checkpoints and resolved config go here when set.
    pub out_dir: Option<PathBuf>,
    /// Polled once per episode; when raised the latest checkpoint is flushed
    /// and training returns [`Error::Interrupted`].
    pub interrupt: Option<Arc<AtomicBool>>,
    /// Stop (as if finished) once this many episodes are complete.
    pub stop_at: Option<u64>,
    /// Called after every logged record.
    pub progress: Option<ProgressFn>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

struct LogSink {
    writer: Option<BufWriter<File>>,
    path: PathBuf,
}

impl LogSink {
    fn open(dir: Option<&Path>, append: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(LogSink {
                writer: None,
                path: PathBuf::new(),
            });
        };
        let path = dir.join(LOG_FILE);
        let io = |source| Error::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let fresh = !append || !path.exists();
        let file = if fresh {
            File::create(&path).map_err(io)?
        } else {
            OpenOptions::new().append(true).open(&path).map_err(io)?
        };
        let mut writer = BufWriter::new(file);
        if fresh {
            writeln!(writer, "episode,loss,lr,val_accuracy").map_err(io)?;
        }
        Ok(LogSink {
            writer: Some(writer),
            path,
        })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{}", record.csv()).map_err(|source| Error::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(|source| Error::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

fn checkpoint(dir: Option<&Path>, name: &str, config: &Config, state: &TrainState) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    let path = dir.join(name);
    save_checkpoint(
        &path,
        &Checkpoint {
            config: config.clone(),
            state: state.clone(),
        },
    )?;
    Ok(Some(path))
}

fn require_way(dataset: &Dataset, way: usize) -> Result<()> {
    if dataset.num_classes() < way {
        return Err(Error::InvalidArgument(format!(
            "{way}-way episodes need {way} classes but the {} split has {}",
            dataset.split.name(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

/// Runs episodes from `state.episode` up to `config.train.episodes`.
pub fn train(config: &Config, data: &Splits, mut state: TrainState, options: &mut TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = options.out_dir.clone();
    let dir = out_dir.as_deref();
    let mut sink = LogSink::open(dir, state.episode > 0)?;
    let shape = config.episode.train_shape();
    require_way(&data.auxiliary, shape.way)?;
    if config.train.val_episodes >= 2 {
        require_way(&data.validation, shape.way)?;
    }
    let end = options.stop_at.map_or(config.train.episodes, |s| s.min(config.train.episodes));
    let mut log = Vec::new();

    while state.episode < end {
        if options.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst)) {
            sink.flush()?;
            let path = checkpoint(dir, LATEST_CHECKPOINT, config, &state)?.unwrap_or_default();
            return Err(Error::Interrupted {
                episode: state.episode,
                checkpoint: path,
            });
        }
        let lr = config.train.lr_at(state.episode);
        state.adam.lr = lr;
        let rng_word_pos = state.rng.get_word_pos();
        let episode = sample_episode(&data.auxiliary, shape, &mut state.rng)?;
        let batch = training_batch(&data.auxiliary, &episode, &config.augment, &mut state.rng)?;
        let out = state.model.forward_backward(&batch)?;
        if !out.loss.is_finite() {
            sink.flush()?;
            return Err(Error::NonFiniteLoss {
                episode: state.episode + 1,
                loss: out.loss,
                rng_word_pos,
            });
        }
        adam_step(&mut state.model.params_mut(), &mut state.adam)?;
        state.model.clamp();
        state.episode += 1;

        let mut record = LogRecord {
            episode: state.episode,
            loss: out.loss,
            lr,
            val_accuracy: None,
        };
        if state.episode.is_multiple_of(config.train.val_interval) && config.train.val_episodes >= 2 {
            let report = evaluate(
                &mut state.model,
                &data.validation,
                config.train.val_episodes,
                config.episode.eval_shape(),
                &config.augment,
                config.seed ^ VALIDATION_SEED,
            )?;
            record.val_accuracy = Some(report.mean);
            if state.best_val.is_none_or(|b| report.mean > b) {
                state.best_val = Some(report.mean);
                checkpoint(dir, BEST_CHECKPOINT, config, &state)?;
            }
        }
        sink.write(&record)?;
        if let Some(cb) = options.progress.as_mut() {
            cb(&record);
        }
        log.push(record);
        if state.episode.is_multiple_of(config.train.checkpoint_interval) || state.episode == end {
            sink.flush()?;
            checkpoint(dir, LATEST_CHECKPOINT, config, &state)?;
        }
    }
    sink.flush()?;
    Ok(TrainOutcome { state, log })
}

/// Mean of `values[start..start + len]`, clamped to the available range.
pub fn window_mean(values: &[f64], start: usize, len: usize) -> f64 {
    let end = (start + len).min(values.len());
    let s = start.min(end);
    let w = &values[s..end];
    w.iter().sum::<f64>() / w.len().max(1) as f64
}
