//! Alternating discriminator/generator optimization, checkpoints, and the loss log.

mod adam;
mod checkpoint;
mod log;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secotrans_tensor::{Float, Graph, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageSet;
use crate::error::{contract, io_err, Error, Result};
use crate::networks::{DomainId, ImageBatch, Model, NetworkConfig, Trainable};
use crate::objectives::{
    finish_generator_objective, record_adversarial_disc, record_reconstruction, total_generator_loss, GanLoss,
    LossReport, LossWeights, PatchSpec, StepPatches,
};

pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use log::{read_loss_log, LossLog, LOSS_HEADER};

/// ChaCha stream of the run seed used for patch sampling (0/1 are style codes, 2 weights).
const PATCH_STREAM: u64 = 3;
/// Mixed into the run seed for the epoch permutations.
const ORDER_SALT: u64 = 0x6f72_6465_725f_7631;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Stops early after this many steps in total.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// `[width, height]` of every training image.
    pub image_size: [u32; 2],
    pub loss: LossWeights,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    pub gan_loss: GanLoss,
    /// Seeded random horizontal flips of training images.
    pub hflip: bool,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            max_steps: None,
            batch_size: 1,
            image_size: [1024, 512],
            loss: LossWeights::default(),
            patch: PatchSpec::default(),
            seed: 0,
            checkpoint_every: 1000,
            output_dir: PathBuf::from("runs/default"),
            disc_steps: 1,
            gan_loss: GanLoss::default(),
            hflip: false,
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Fields that determine the trajectory of a run; scheduling and paths are left out.
#[derive(Serialize)]
struct DigestView<'a> {
    batch_size: usize,
    image_size: [u32; 2],
    loss: &'a LossWeights,
    patch: &'a PatchSpec,
    seed: u64,
    disc_steps: usize,
    gan_loss: GanLoss,
    hflip: bool,
    network: &'a NetworkConfig,
    optimizer: &'a OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: String| Err(Error::Config { key: k.to_string(), reason: r });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        let [w, h] = self.image_size;
        if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
            return bad("image_size", format!("{w}x{h} must be non-zero and divisible by 4"));
        }
        if self.disc_steps == 0 {
            return bad("disc_steps", "must be at least 1".into());
        }
        self.network.validate().map_err(|(key, reason)| Error::Config { key, reason })?;
        let min = self.network.min_patch_side() as u32;
        if w.min(h) < min {
            return bad("image_size", format!("sides must be at least the discriminator's minimum patch {min}"));
        }
        self.loss.validate()?;
        self.patch.validate()?;
        self.optimizer.validate()
    }

    /// Hex SHA-256 of the trajectory-determining fields.
    pub fn digest(&self) -> String {
        let view = DigestView {
            batch_size: self.batch_size,
            image_size: self.image_size,
            loss: &self.loss,
            patch: &self.patch,
            seed: self.seed,
            disc_steps: self.disc_steps,
            gan_loss: self.gan_loss,
            hflip: self.hflip,
            network: &self.network,
            optimizer: &self.optimizer,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn steps_per_epoch(&self, len_a: usize, len_b: usize) -> u64 {
        len_a.max(len_b).div_ceil(self.batch_size) as u64
    }
}

/// Model, optimizers, and sampler state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer<T: Float> {
    config: TrainConfig,
    pub model: Model<T>,
    pub opt_gen: Adam<T>,
    pub opt_disc: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.network.clone(), config.seed)?;
        let opt_gen = Adam::new(
            config.optimizer.clone(),
            model.params.encoder.tensors().iter().chain(model.params.decoder.tensors()),
        );
        let opt_disc = Adam::new(
            config.optimizer.clone(),
            model.params.disc_a.tensors().iter().chain(model.params.disc_b.tensors()),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(PATCH_STREAM);
        Ok(Trainer { config, model, opt_gen, opt_disc, rng, step: 0 })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.config.validate()?;
        let rng = ckpt.rng.restore()?;
        Ok(Trainer {
            config: ckpt.config,
            model: ckpt.model,
            opt_gen: ckpt.opt_gen,
            opt_disc: ckpt.opt_disc,
            rng,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            epoch,
            model: self.model.clone(),
            opt_gen: self.opt_gen.clone(),
            opt_disc: self.opt_disc.clone(),
            rng: RngState::capture(self.config.seed, &self.rng),
        }
    }

    fn check_batches(&self, x_a: &ImageBatch<T>, x_b: &ImageBatch<T>) -> Result<(usize, usize)> {
        x_a.check_divisible_by_4()?;
        let (_, _, h, w) = x_a.shape();
        let (_, _, hb, wb) = x_b.shape();
        if (h, w) != (hb, wb) {
            return Err(contract(format!("domain batches differ in size: {h}x{w} vs {hb}x{wb}")));
        }
        if x_a.batch() != x_b.batch() {
            return Err(contract("domain batches differ in batch size"));
        }
        Ok((h, w))
    }

    fn draw_patches(&mut self, batch: usize, hw: (usize, usize)) -> Result<StepPatches> {
        let min = self.model.config().min_patch_side();
        StepPatches::draw(batch, hw, &self.config.patch, min, &mut self.rng)
    }

    /// One discriminator update on real batches and given translations.
    /// Returns `(adv_disc_a, adv_disc_b)` before the update.
    fn update_discriminators(
        &mut self,
        x_a: &Tensor<T>,
        x_b: &Tensor<T>,
        x_ab: &Tensor<T>,
        x_ba: &Tensor<T>,
        patches: &StepPatches,
    ) -> Result<(f64, f64)> {
        let m = &self.model;
        let mut g = Graph::new();
        let b = m.bind(&mut g, Trainable { generator: false, discriminators: true });
        let (xa, xb) = (g.constant(x_a.clone()), g.constant(x_b.clone()));
        let (fab, fba) = (g.constant(x_ab.clone()), g.constant(x_ba.clone()));
        let la = record_adversarial_disc(&mut g, m, &b, xa, fba, DomainId::A, &patches.a);
        let lb = record_adversarial_disc(&mut g, m, &b, xb, fab, DomainId::B, &patches.b);
        let (va, vb) = (g.value(la).item().as_f64(), g.value(lb).item().as_f64());
        for (term, v) in [("adv_disc_a", va), ("adv_disc_b", vb)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, step: self.step });
            }
        }
        let total = g.add(la, lb);
        let grads = g.backward(total);
        let vars: Vec<_> = b.disc_a.iter().chain(&b.disc_b).copied().collect();
        let grads: Vec<&Tensor<T>> = vars.iter().map(|&v| grads.get(v).expect("discriminator gradient")).collect();
        let params = &mut self.model.params;
        let mut slots: Vec<&mut Tensor<T>> =
            params.disc_a.tensors_mut().iter_mut().chain(params.disc_b.tensors_mut().iter_mut()).collect();
        self.opt_disc.step(&mut slots, &grads)?;
        Ok((va, vb))
    }

    /// Discriminator-only update: translations are computed with the generator frozen.
    pub fn discriminator_step(&mut self, x_a: &ImageBatch<T>, x_b: &ImageBatch<T>) -> Result<(f64, f64)> {
        let hw = self.check_batches(x_a, x_b)?;
        let patches = self.draw_patches(x_a.batch(), hw)?;
        let x_ab = self.model.translate(x_a, self.model.style(DomainId::B))?;
        let x_ba = self.model.translate(x_b, self.model.style(DomainId::A))?;
        self.update_discriminators(x_a.tensor(), x_b.tensor(), x_ab.tensor(), x_ba.tensor(), &patches)
    }

    /// Discriminator update(s), then a joint encoder/decoder update.
    ///
    /// On a non-finite loss the step is abandoned and every parameter and
    /// optimizer is left as it was.
    pub fn train_step(&mut self, x_a: &ImageBatch<T>, x_b: &ImageBatch<T>) -> Result<LossReport> {
        let hw = self.check_batches(x_a, x_b)?;
        let backup = (self.model.params.disc_a.clone(), self.model.params.disc_b.clone(), self.opt_disc.clone());
        let rng_backup = self.rng.clone();
        let result = self.try_train_step(x_a, x_b, hw);
        if result.is_err() {
            self.model.params.disc_a = backup.0;
            self.model.params.disc_b = backup.1;
            self.opt_disc = backup.2;
            self.rng = rng_backup;
        }
        result
    }

    fn try_train_step(&mut self, x_a: &ImageBatch<T>, x_b: &ImageBatch<T>, hw: (usize, usize)) -> Result<LossReport> {
        let patches = self.draw_patches(x_a.batch(), hw)?;

        // The generator graph is recorded once; its translations feed the
        // discriminator update as constants, and its adversarial terms are
        // added afterwards against the updated discriminators.
        let mut g = Graph::new();
        let mut bound = self.model.bind(&mut g, Trainable { generator: true, discriminators: false });
        let xa = g.constant(x_a.tensor().clone());
        let xb = g.constant(x_b.tensor().clone());
        let (ra, rb) = record_reconstruction(&mut g, &self.model, &bound, xa, xb);
        let x_ab = g.value(ra.translated).clone();
        let x_ba = g.value(rb.translated).clone();

        let (adv_disc_a, adv_disc_b) = self.update_discriminators(x_a.tensor(), x_b.tensor(), &x_ab, &x_ba, &patches)?;
        for _ in 1..self.config.disc_steps {
            let extra = StepPatches {
                a: (patches.a.0.redraw_origins(hw, &mut self.rng), patches.a.1.redraw_origins(hw, &mut self.rng)),
                b: (patches.b.0.redraw_origins(hw, &mut self.rng), patches.b.1.redraw_origins(hw, &mut self.rng)),
            };
            self.update_discriminators(x_a.tensor(), x_b.tensor(), &x_ab, &x_ba, &extra)?;
        }

        self.model.rebind_discriminators(&mut g, &mut bound);
        let vars = finish_generator_objective(
            &mut g,
            &self.model,
            &bound,
            (ra, rb),
            &patches,
            &self.config.loss,
            self.config.gan_loss,
        );
        let mut report = vars.report(&g, self.step);
        report.adv_disc_a = adv_disc_a;
        report.adv_disc_b = adv_disc_b;
        report.total_disc = adv_disc_a + adv_disc_b;
        report.total_gen = total_generator_loss(&report, &self.config.loss)?;

        let grads = g.backward(vars.total);
        let vars: Vec<_> = bound.encoder.iter().chain(&bound.decoder).copied().collect();
        let grads: Vec<&Tensor<T>> = vars.iter().map(|&v| grads.get(v).expect("generator gradient")).collect();
        let params = &mut self.model.params;
        let mut slots: Vec<&mut Tensor<T>> =
            params.encoder.tensors_mut().iter_mut().chain(params.decoder.tensors_mut().iter_mut()).collect();
        self.opt_gen.step(&mut slots, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Batch indices and flips of each domain for a global step.
    pub fn batch_plan(&self, step: u64, len_a: usize, len_b: usize) -> [(Vec<usize>, Vec<bool>); 2] {
        let spe = self.config.steps_per_epoch(len_a, len_b);
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let bs = self.config.batch_size;
        [(DomainId::A, len_a), (DomainId::B, len_b)].map(|(d, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ORDER_SALT);
            rng.set_stream(epoch.wrapping_mul(2).wrapping_add(d.index() as u64));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let flips: Vec<bool> = (0..spe as usize * bs).map(|_| self.config.hflip && rng.random()).collect();
            // the shorter pool cycles through its permutation
            let ks = (pos * bs..(pos + 1) * bs).collect::<Vec<_>>();
            (ks.iter().map(|&k| perm[k % n]).collect(), ks.iter().map(|&k| flips[k]).collect())
        })
    }

    /// Total steps the configuration schedules for the given pool sizes.
    pub fn scheduled_steps(&self, len_a: usize, len_b: usize) -> u64 {
        let total = self.config.epochs * self.config.steps_per_epoch(len_a, len_b);
        self.config.max_steps.map_or(total, |m| m.min(total))
    }

    /// Runs until the scheduled step count, logging every step and
    /// checkpointing every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, set_a: &ImageSet<T>, set_b: &ImageSet<T>, log: &mut LossLog) -> Result<Checkpoint<T>> {
        if set_a.is_empty() || set_b.is_empty() {
            return Err(Error::Dataset("both domains need at least one image".into()));
        }
        let want = (self.config.image_size[0], self.config.image_size[1]);
        for (d, set) in [(DomainId::A, set_a), (DomainId::B, set_b)] {
            if set.size() != want {
                return Err(Error::Dataset(format!(
                    "domain {d} images are {}x{}, configured size is {}x{}",
                    set.size().0,
                    set.size().1,
                    want.0,
                    want.1
                )));
            }
        }
        let (na, nb) = (set_a.len(), set_b.len());
        let spe = self.config.steps_per_epoch(na, nb);
        let total = self.scheduled_steps(na, nb);
        let ckpt_dir = self.config.output_dir.join("checkpoints");
        while self.step < total {
            let [(ia, fa), (ib, fb)] = self.batch_plan(self.step, na, nb);
            let x_a = set_a.batch(&ia, &fa)?;
            let x_b = set_b.batch(&ib, &fb)?;
            let report = self.train_step(&x_a, &x_b)?;
            log.append(&report)?;
            if self.step % 100 == 0 || self.step == total {
                ::log::info!(
                    "step {}/{total} rec {:.4} cyc {:.4} adv_gen {:.4} adv_disc {:.4}",
                    self.step,
                    report.rec_a + report.rec_b,
                    report.cyc_a + report.cyc_b,
                    report.adv_gen_a + report.adv_gen_b,
                    report.total_disc
                );
            }
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 && self.step < total {
                let ckpt = self.checkpoint(self.step / spe);
                ckpt.save(&ckpt_dir.join(format!("step_{:08}.ckpt", self.step)))?;
                ckpt.save(&self.config.output_dir.join("latest.ckpt"))?;
            }
        }
        let ckpt = self.checkpoint(self.step / spe);
        ckpt.save(&ckpt_dir.join(format!("step_{:08}.ckpt", self.step)))?;
        ckpt.save(&self.config.output_dir.join("latest.ckpt"))?;
        Ok(ckpt)
    }
}

/// Where [`train`] picks up.
#[derive(Clone, Debug, Default)]
pub enum Resume {
    #[default]
    Fresh,
    /// Continue from a checkpoint; its digest must match unless overridden.
    From { path: PathBuf, allow_config_mismatch: bool },
}

/// Trains from scratch or from a checkpoint, writing `config.json`,
/// `losses.csv`, `checkpoints/`, and `latest.ckpt` under the output directory.
pub fn train<T: Float>(
    config: TrainConfig,
    set_a: &ImageSet<T>,
    set_b: &ImageSet<T>,
    resume: &Resume,
) -> Result<Checkpoint<T>> {
    config.validate()?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let text = serde_json::to_string_pretty(&config).expect("config serializes");
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;
    let log_path = out.join("losses.csv");

    let (mut trainer, mut log) = match resume {
        Resume::Fresh => (Trainer::new(config)?, LossLog::create(&log_path)?),
        Resume::From { path, allow_config_mismatch } => {
            let ckpt = Checkpoint::<T>::load(path)?;
            if !allow_config_mismatch {
                ckpt.check_digest(&config.digest())?;
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            // scheduling fields come from the new configuration
            t.config.epochs = config.epochs;
            t.config.max_steps = config.max_steps;
            t.config.checkpoint_every = config.checkpoint_every;
            t.config.output_dir = config.output_dir.clone();
            if *allow_config_mismatch {
                ::log::warn!("resuming {} without checking its configuration digest", path.display());
            }
            let log = LossLog::resume(&log_path, t.step())?;
            (t, log)
        }
    };
    trainer.run(set_a, set_b, &mut log)
}

/// Path of the most recent checkpoint under an output directory.
pub fn latest_checkpoint(output_dir: &Path) -> PathBuf {
    output_dir.join("latest.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            image_size: [16, 16],
            network: NetworkConfig { base_channels: 2, disc_channels: 2, disc_downsamplings: 1, ..Default::default() },
            patch: PatchSpec { min_fraction: 0.25, max_fraction: 0.5, per_image: 1 },
            ..Default::default()
        }
    }

    fn batch(seed: u64) -> ImageBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn config_validation_names_keys() {
        let key = |c: TrainConfig| match c.validate() {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key(TrainConfig { epochs: 0, ..tiny_config() }), "epochs");
        assert_eq!(key(TrainConfig { image_size: [18, 16], ..tiny_config() }), "image_size");
        let mut c = tiny_config();
        c.optimizer.beta2 = 1.5;
        assert_eq!(key(c), "optimizer.beta2");
    }

    #[test]
    fn digest_ignores_scheduling() {
        let a = tiny_config();
        let b = TrainConfig { epochs: 3, max_steps: Some(9), output_dir: "elsewhere".into(), ..tiny_config() };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), TrainConfig { seed: 1, ..tiny_config() }.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn report_total_is_the_weighted_sum() {
        let mut t = Trainer::<f32>::new(tiny_config()).unwrap();
        let r = t.train_step(&batch(1), &batch(2)).unwrap();
        let w = &t.config().loss;
        let expect = w.lambda1 * (r.rec_a + r.rec_b) + w.lambda2 * (r.cyc_a + r.cyc_b) + w.lambda3 * (r.adv_gen_a + r.adv_gen_b);
        assert_eq!(r.total_gen, expect);
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut c = tiny_config();
        c.optimizer.learning_rate = 0.0;
        let mut t = Trainer::<f32>::new(c).unwrap();
        let before = t.model.params.clone();
        t.train_step(&batch(1), &batch(2)).unwrap();
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn discriminator_step_leaves_generator_untouched() {
        let mut t = Trainer::<f32>::new(tiny_config()).unwrap();
        let (enc, dec, da) =
            (t.model.params.encoder.clone(), t.model.params.decoder.clone(), t.model.params.disc_a.clone());
        t.discriminator_step(&batch(3), &batch(4)).unwrap();
        assert_eq!(t.model.params.encoder, enc);
        assert_eq!(t.model.params.decoder, dec);
        assert_ne!(t.model.params.disc_a, da);
    }

    #[test]
    fn batch_plan_cycles_the_shorter_pool() {
        let t = Trainer::<f32>::new(TrainConfig { batch_size: 3, ..tiny_config() }).unwrap();
        // 7 vs 2 images: 3 steps per epoch; each epoch covers all 7 of A
        let mut seen = Vec::new();
        for step in 0..3 {
            let [(a, _), (b, _)] = t.batch_plan(step, 7, 2);
            assert!(b.iter().all(|&i| i < 2));
            seen.extend(a);
        }
        let mut first7 = seen[..7].to_vec();
        first7.sort();
        assert_eq!(first7, (0..7).collect::<Vec<_>>());
        assert_eq!(t.batch_plan(4, 7, 2), t.batch_plan(4, 7, 2));
        assert_ne!(t.batch_plan(0, 7, 2)[0].0, t.batch_plan(3, 7, 2)[0].0);
    }
}
