//! The critic/generator alternation, checkpoints and loss history.
//!
//! Every random draw (initial weights, batch order, flips, dropout) comes from
//! a stream derived from the seed and the step counter, so a resumed run
//! replays exactly what an uninterrupted one would have done.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{composite_hints, critic_loss_grad, generator_loss_grad};
use super::optim::RmsProp;
use super::TrainConfig;
use crate::dataset::{Batch, DatasetManifest, Pair, Split};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::checkpoint::{load_discriminator, load_generator, save_discriminator, save_generator, TensorArchive};
use crate::model::{build_discriminator, build_generator, Discriminator, Generator, Noise, NoiseMode, UNetConfig};
use crate::seed::rng_for;

pub const LOSSES_FILE: &str = "losses.csv";
const LOSSES_HEADER: &str = "iter,critic,adv,l1,mask";

const STREAM_GENERATOR_INIT: u64 = 1;
const STREAM_CRITIC_INIT: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_FLIP: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Losses of one iteration; `critic` is the mean over its critic steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub critic: f32,
    pub adv: f32,
    pub l1: f32,
    pub mask: f32,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.critic, self.adv, self.l1, self.mask)
    }

    fn parse(line: &str) -> Option<Self> {
        let mut f = line.split(',');
        let rec = Self {
            iter: f.next()?.parse().ok()?,
            critic: f.next()?.parse().ok()?,
            adv: f.next()?.parse().ok()?,
            l1: f.next()?.parse().ok()?,
            mask: f.next()?.parse().ok()?,
        };
        f.next().is_none().then_some(rec)
    }
}

fn history_text(history: &[LossRecord]) -> String {
    let mut s = format!("{LOSSES_HEADER}\n");
    for r in history {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: usize,
    pub generator: Generator<f32>,
    pub critic: Discriminator<f32>,
    pub generator_opt: RmsProp<f32>,
    pub critic_opt: RmsProp<f32>,
    pub history: Vec<LossRecord>,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(gcfg: &UNetConfig, cfg: &TrainConfig) -> Result<Self> {
        let generator = build_generator(gcfg, &mut rng_for(cfg.seed, &[STREAM_GENERATOR_INIT]))?;
        let critic = build_discriminator(
            &UNetConfig::critic_for(gcfg),
            &mut rng_for(cfg.seed, &[STREAM_CRITIC_INIT]),
        )?;
        let opt = |params| RmsProp::new(params, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps);
        Ok(Self {
            iteration: 0,
            generator_opt: opt(generator.0.params()),
            critic_opt: opt(critic.0.params()),
            generator,
            critic,
            history: Vec::new(),
            config: cfg.clone(),
        })
    }

    /// Writes `generator.nck`, `critic.nck`, `optimizer.nck`, `state.txt`
    /// and `history.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_generator(&self.generator, &dir.join("generator.nck"))?;
        save_discriminator(&self.critic, &dir.join("critic.nck"))?;
        let mut opt = TensorArchive {
            kind: "rmsprop".into(),
            role: None,
            config: None,
            tensors: Vec::new(),
        };
        for (prefix, params, state) in [
            ("generator", self.generator.0.params(), &self.generator_opt.square_avg),
            ("critic", self.critic.0.params(), &self.critic_opt.square_avg),
        ] {
            for (p, v) in params.iter().zip(state) {
                opt.tensors.push((format!("{prefix}/{}", p.name), p.shape.clone(), v.clone()));
            }
        }
        opt.save(&dir.join("optimizer.nck"))?;
        let mut kv = KvFile::default();
        kv.push("iteration", self.iteration);
        kv.entries.extend(self.config.to_kv().entries);
        kv.write(&dir.join("state.txt"))?;
        let hist = dir.join("history.csv");
        fs::write(&hist, history_text(&self.history)).map_err(|e| Error::io(&hist, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let generator: Generator<f32> = load_generator(&dir.join("generator.nck"))?;
        let critic: Discriminator<f32> = load_discriminator(&dir.join("critic.nck"))?;
        let state_path = dir.join("state.txt");
        let kv = KvFile::read(&state_path)?;
        let iteration = kv
            .parsed::<usize>("iteration", &state_path)?
            .ok_or_else(|| bad("state.txt has no iteration".into()))?;
        let mut rest = kv.clone();
        rest.entries.retain(|(k, _, _)| k != "iteration");
        let mut config = TrainConfig::default();
        config.apply_kv(&rest, &state_path)?;

        let opt_path = dir.join("optimizer.nck");
        let archive = TensorArchive::load(&opt_path)?;
        let restore = |prefix: &str, params: &[crate::model::Param<f32>]| -> Result<RmsProp<f32>> {
            let mut opt = RmsProp::new(params, config.learning_rate, config.rmsprop_decay, config.rmsprop_eps);
            let state = params
                .iter()
                .map(|p| {
                    archive
                        .get(&format!("{prefix}/{}", p.name))
                        .map(|(_, _, v)| v.clone())
                        .ok_or_else(|| bad(format!("optimizer state lacks {prefix}/{}", p.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            opt.load_state(state).map_err(|e| bad(e.to_string()))?;
            Ok(opt)
        };
        let generator_opt = restore("generator", generator.0.params())?;
        let critic_opt = restore("critic", critic.0.params())?;

        let hist_path = dir.join("history.csv");
        let text = fs::read_to_string(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
        let history = text
            .lines()
            .skip(1)
            .enumerate()
            .map(|(i, l)| {
                LossRecord::parse(l).ok_or_else(|| Error::Parse {
                    path: hist_path.clone(),
                    line: i + 2,
                    reason: format!("bad loss record `{l}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if history.len() != iteration {
            return Err(bad(format!(
                "history has {} records but the state is at iteration {iteration}",
                history.len()
            )));
        }
        Ok(Self {
            iteration,
            generator,
            critic,
            generator_opt,
            critic_opt,
            history,
            config,
        })
    }
}

pub fn checkpoint_dir(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{iteration}"))
}

/// Deterministic batch order: each epoch is a seeded permutation of the
/// training pairs, and a step draws the next `batch_size` positions.
struct Sampler {
    seed: u64,
    n: usize,
    batch_size: usize,
    augment: bool,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    fn draw(&mut self, step: u64) -> Vec<(usize, bool)> {
        (0..self.batch_size as u64)
            .map(|j| {
                let pos = step * self.batch_size as u64 + j;
                let epoch = pos / self.n as u64;
                if self.epoch.as_ref().map_or(true, |(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..self.n).collect();
                    perm.shuffle(&mut rng_for(self.seed, &[STREAM_EPOCH, epoch]));
                    self.epoch = Some((epoch, perm));
                }
                let idx = self.epoch.as_ref().unwrap().1[(pos % self.n as u64) as usize];
                let flip = self.augment && rng_for(self.seed, &[STREAM_FLIP, pos]).gen_bool(0.5);
                (idx, flip)
            })
            .collect()
    }
}

fn assemble(pairs: &[Pair], flipped: &mut [Option<Pair>], picks: &[(usize, bool)]) -> Result<Batch<f32>> {
    for &(i, flip) in picks {
        if flip && flipped[i].is_none() {
            flipped[i] = Some(pairs[i].flipped());
        }
    }
    let refs: Vec<&Pair> = picks
        .iter()
        .map(|&(i, flip)| if flip { flipped[i].as_ref().unwrap() } else { &pairs[i] })
        .collect();
    Batch::from_pairs(&refs)
}

fn non_finite(run_dir: &Path, iteration: usize, ids: &[String], what: &str) -> Error {
    let path = run_dir.join(format!("nonfinite_{iteration}.txt"));
    let mut kv = KvFile::default();
    kv.push("iteration", iteration);
    kv.push("stage", what);
    kv.push("batch_ids", ids.join(","));
    // The abort is the primary report; a failed snapshot write must not hide it.
    let _ = kv.write(&path);
    Error::NonFinite {
        iteration,
        batch_ids: ids.to_vec(),
    }
}

/// Trains on the manifest's training split until `cfg.max_iterations`
/// generator updates have been made, writing `losses.csv` and checkpoints
/// under `run_dir`. With `resume`, continues from that checkpoint directory.
pub fn train(
    manifest: &DatasetManifest,
    gcfg: &UNetConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    let ids = manifest.ids(Some(Split::Train));
    if ids.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let pairs = ids
        .iter()
        .map(|id| Pair::load(manifest, id))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (pairs[0].normal.width() as usize, pairs[0].normal.height() as usize);
    if w != h || w != gcfg.input_size {
        return Err(Error::Config(format!(
            "images are {w}x{h} but the network expects {0}x{0}",
            gcfg.input_size
        )));
    }
    let mut state = match resume {
        Some(dir) => {
            let mut s = TrainState::load(dir)?;
            if s.generator.config() != gcfg {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    reason: "checkpoint architecture differs from the requested one".into(),
                });
            }
            s.config = cfg.clone();
            s
        }
        None => TrainState::new(gcfg, cfg)?,
    };

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let losses_path = run_dir.join(LOSSES_FILE);
    fs::write(&losses_path, history_text(&state.history)).map_err(|e| Error::io(&losses_path, e))?;
    let mut losses = fs::OpenOptions::new()
        .append(true)
        .open(&losses_path)
        .map_err(|e| Error::io(&losses_path, e))?;

    let mut sampler = Sampler {
        seed: cfg.seed,
        n: pairs.len(),
        batch_size: cfg.batch_size,
        augment: cfg.augment,
        epoch: None,
    };
    let mut flipped: Vec<Option<Pair>> = vec![None; pairs.len()];
    let steps = cfg.critic_steps_per_gen as u64 + 1;
    let clip = cfg.clip_c as f32;
    let noise_rng = |it: usize, s: u64| rng_for(cfg.seed, &[STREAM_NOISE, it as u64, s]);
    let mut last_saved = None;

    while state.iteration < cfg.max_iterations {
        let it = state.iteration;
        let mut critic_sum = 0.0f64;
        for s in 0..cfg.critic_steps_per_gen as u64 {
            let batch = assemble(&pairs, &mut flipped, &sampler.draw(it as u64 * steps + s))?;
            let mut rng = noise_rng(it, s);
            let noise = match cfg.noise_mode {
                NoiseMode::Off => Noise::Off,
                NoiseMode::Dropout => Noise::Dropout(&mut rng),
            };
            let y_gen = state.generator.forward(&batch.input, noise)?;
            let fake = composite_hints(&y_gen, &batch.target, &batch.mask)?;
            let (loss, grads) = critic_loss_grad(&state.critic, &batch.input, &batch.target, &fake)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(non_finite(run_dir, it + 1, &batch.ids, "critic"));
            }
            state.critic_opt.step(state.critic.0.params_mut(), &grads);
            state.critic.clip_weights(clip);
            critic_sum += loss as f64;
        }

        let s = steps - 1;
        let batch = assemble(&pairs, &mut flipped, &sampler.draw(it as u64 * steps + s))?;
        let mut rng = noise_rng(it, s);
        let noise = match cfg.noise_mode {
            NoiseMode::Off => Noise::Off,
            NoiseMode::Dropout => Noise::Dropout(&mut rng),
        };
        let (y_gen, cache) = state.generator.forward_train(&batch.input, noise)?;
        let (gl, grad) = generator_loss_grad(&state.critic, &batch.input, &batch.target, &y_gen, &batch.mask, cfg)?;
        let grads = state.generator.backward(&cache, &grad);
        if !gl.total.is_finite() || !grads.all_finite() {
            return Err(non_finite(run_dir, it + 1, &batch.ids, "generator"));
        }
        state.generator_opt.step(state.generator.0.params_mut(), &grads);

        let record = LossRecord {
            iter: it + 1,
            critic: (critic_sum / cfg.critic_steps_per_gen as f64) as f32,
            adv: gl.adv,
            l1: gl.l1,
            mask: gl.mask,
        };
        writeln!(losses, "{}", record.csv_line()).map_err(|e| Error::io(&losses_path, e))?;
        state.history.push(record);
        state.iteration += 1;
        progress(&record);
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            state.save(&checkpoint_dir(run_dir, state.iteration))?;
            last_saved = Some(state.iteration);
        }
    }
    if last_saved != Some(state.iteration) {
        state.save(&checkpoint_dir(run_dir, state.iteration))?;
    }
    Ok(state)
}
