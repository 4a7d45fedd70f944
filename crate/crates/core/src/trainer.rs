//! Alternating saddle-point training.
//!
//! Each outer step draws one batch, takes `inner_steps` Adam ascent steps on
//! the potential with the generator frozen, then one Adam descent step on the
//! generator. Ascent is descent on the negated loss, so both players share
//! [`adam_step`].
//!
//! Randomness: the training stream is a single [`Rng64`] whose position is
//! checkpointed. Initialization and evaluation use separately derived seeds,
//! so evaluating never perturbs training and a resumed run replays exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfgan_autodiff::{Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;

use crate::data::{sample_noise, sample_time, DataSource, Rng64};
use crate::error::{CheckpointError, Error, Result};
use crate::metrics::{moment_errors, MetricsRecord, METRICS_HEADER};
use crate::networks::{evaluate, load_checkpoint_for, save_checkpoint, Mlp, MlpSpec, ParamSet};
use crate::objective::{
    hamiltonian, loss_on_paths, mfg_gan_loss, HamiltonianSpec, LossBatch, LossBreakdown, Paths,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Generator updates.
    pub outer_steps: u64,
    /// Potential ascent steps per generator update.
    pub inner_steps: u32,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub q: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Fresh samples drawn for each evaluation.
    pub eval_samples: usize,
    /// Off by default so that metric logs are byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_steps: 20_000,
            inner_steps: 5,
            // Larger batches and lighter momentum than the usual Adam defaults
            // keep the alternating updates from oscillating.
            batch_size: 512,
            lr_gen: 1e-4,
            lr_disc: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            q: 2.0,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 5_000,
            eval_samples: 10_000,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.inner_steps == 0 || self.batch_size == 0 {
            return bad("inner_steps and batch_size must be at least 1".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2".into());
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) || !self.lr_gen.is_finite() || !self.lr_disc.is_finite() {
            return bad("learning rates must be positive and finite".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        HamiltonianSpec::new(self.q).map(|_| ())
    }

    pub fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments in parameter layout, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Gradients are checked before anything is modified; a non-finite entry
/// leaves `params` and `state` untouched and reports its layer.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: AdamParams,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.first_moment.len() != tensors.len() {
        return Err(Error::Dimension {
            context: "adam gradient count",
            expected: tensors.len(),
            found: grads.len(),
        });
    }
    for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first_moment[i].shape() != p.shape() {
            return Err(Error::Dimension {
                context: "adam gradient shape",
                expected: p.numel(),
                found: g.numel(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { layer: i / 2 });
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let c1 = 1.0 - hp.beta1.powf(t);
    let c2 = 1.0 - hp.beta2.powf(t);
    for (i, p) in tensors.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        }
        let v = state.second_moment[i].data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        }
        let (m, v) = (state.first_moment[i].data(), state.second_moment[i].data());
        for ((w, &m), &v) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = m / c1;
            let v_hat = v / c2;
            *w -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// SplitMix64 finalizer: decorrelates seeds derived from one user seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_GEN_INIT: u64 = 1;
const TAG_DISC_INIT: u64 = 2;
const TAG_EVAL: u64 = 3;

/// Mean over `z` of `|d_t phi + H(grad phi)|` at `(rho(z, t), t)`.
pub fn hjb_residual_diagnostic(
    disc_spec: &MlpSpec,
    disc: &ParamSet,
    gen_spec: &MlpSpec,
    gen: &ParamSet,
    spec: &HamiltonianSpec,
    z: &Tensor,
    t: &Tensor,
) -> Result<f64> {
    let n = z.shape()[0];
    if n == 0 {
        return Err(Error::Precondition("residual needs at least one sample".into()));
    }
    let x = evaluate(gen_spec, gen, z, Some(t))?;
    let mut tape = Tape::new();
    let net = Mlp::on_tape(disc_spec, disc, &mut tape, false);
    let xv = tape.constant(x);
    let tv = tape.constant(t.clone());
    let phi = net.forward(&mut tape, xv, Some(tv))?;
    let s = tape.sum(phi)?;
    let g = tape.grad(s, &[xv, tv], false)?;
    let h = hamiltonian(&mut tape, g[0], spec)?;
    let r = tape.add(g[1], h)?;
    let total: f64 = tape.value(r).data().iter().map(|v| v.abs()).sum();
    Ok(total / n as f64)
}

/// What happened during one outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based index of the completed outer step.
    pub step: u64,
    /// Loss on the step's batch before each potential update.
    pub inner_totals: Vec<f64>,
    /// Loss on the same batch evaluated for the generator update.
    pub generator_loss: LossBreakdown,
}

impl StepReport {
    /// Whether the potential's ascent did not decrease the loss within the step.
    pub fn ascent_non_decreasing(&self) -> bool {
        let mut seq = self.inner_totals.clone();
        seq.push(self.generator_loss.total);
        seq.windows(2).all(|w| w[1] >= w[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub metrics: Vec<MetricsRecord>,
    pub last_checkpoint: PathBuf,
}

/// Training state: both networks, their optimizers and the data stream.
pub struct Trainer<'d> {
    config: TrainConfig,
    gen_spec: MlpSpec,
    disc_spec: MlpSpec,
    hamiltonian: HamiltonianSpec,
    data: &'d dyn DataSource,
    reference: (DVector<f64>, DMatrix<f64>),
    gen: ParamSet,
    disc: ParamSet,
    adam_gen: AdamState,
    adam_disc: AdamState,
    rng: Rng64,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(
        config: TrainConfig,
        gen_spec: MlpSpec,
        disc_spec: MlpSpec,
        data: &'d dyn DataSource,
    ) -> Result<Self> {
        config.validate()?;
        let d = data.dim();
        if gen_spec.input_dim != d || gen_spec.output_dim != d || !gen_spec.time_augmented {
            return Err(Error::InvalidSpec(format!(
                "generator must map {d}-dimensional noise and time to {d} dimensions"
            )));
        }
        if disc_spec.input_dim != d || disc_spec.output_dim != 1 || !disc_spec.time_augmented {
            return Err(Error::InvalidSpec(format!(
                "potential must map {d}-dimensional points and time to a scalar"
            )));
        }
        let gen = ParamSet::init(&gen_spec, derive_seed(config.seed, TAG_GEN_INIT))?;
        let disc = ParamSet::init(&disc_spec, derive_seed(config.seed, TAG_DISC_INIT))?;
        Ok(Self {
            hamiltonian: HamiltonianSpec::new(config.q)?,
            reference: data.reference_moments()?,
            adam_gen: AdamState::new(&gen),
            adam_disc: AdamState::new(&disc),
            rng: Rng64::seed_from_u64(config.seed),
            gen,
            disc,
            config,
            gen_spec,
            disc_spec,
            data,
            step: 0,
        })
    }

    /// Restores a trainer from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(
        config: TrainConfig,
        gen_spec: MlpSpec,
        disc_spec: MlpSpec,
        data: &'d dyn DataSource,
        dir: &Path,
    ) -> Result<Self> {
        let mut tr = Self::new(config, gen_spec, disc_spec, data)?;
        tr.gen = load_checkpoint_for(&tr.gen_spec, &dir.join(GEN_FILE))?;
        tr.disc = load_checkpoint_for(&tr.disc_spec, &dir.join(DISC_FILE))?;
        let bytes = fs::read(dir.join(STATE_FILE)).map_err(|e| Error::io(dir.join(STATE_FILE), e))?;
        let state = TrainerState::decode(&bytes, &tr.gen, &tr.disc)?;
        if state.seed != tr.config.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, config says {}",
                state.seed, tr.config.seed
            )));
        }
        tr.step = state.step;
        tr.rng = state.rng;
        tr.adam_gen = state.adam_gen;
        tr.adam_disc = state.adam_disc;
        Ok(tr)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> (&MlpSpec, &ParamSet) {
        (&self.gen_spec, &self.gen)
    }

    pub fn potential(&self) -> (&MlpSpec, &ParamSet) {
        (&self.disc_spec, &self.disc)
    }

    pub fn hamiltonian_spec(&self) -> &HamiltonianSpec {
        &self.hamiltonian
    }

    fn draw_batch(&mut self) -> Result<LossBatch> {
        let (n, d) = (self.config.batch_size, self.data.dim());
        let x_data = self.data.sample(n, &mut self.rng)?;
        let z_interior = sample_noise(n, d, &mut self.rng)?;
        let t_interior = sample_time(n, &mut self.rng)?;
        let z_initial = sample_noise(n, d, &mut self.rng)?;
        Ok(LossBatch {
            z_interior,
            t_interior,
            x_data,
            z_initial,
        })
    }

    /// One iteration of the alternating scheme.
    pub fn outer_step(&mut self) -> Result<StepReport> {
        let batch = self.draw_batch()?;
        let h = |t: &mut Tape, a: &crate::objective::HamiltonianArgs| {
            hamiltonian(t, a.grad_phi, &self.hamiltonian)
        };

        // The generator is frozen during ascent, so its outputs are computed
        // once and enter the potential's tapes as constants.
        let interior = evaluate(&self.gen_spec, &self.gen, &batch.z_interior, Some(&batch.t_interior))?;
        let m = batch.z_initial.shape()[0];
        let initial = evaluate(
            &self.gen_spec,
            &self.gen,
            &batch.z_initial,
            Some(&Tensor::zeros(vec![m, 1])),
        )?;

        let mut inner_totals = Vec::with_capacity(self.config.inner_steps as usize);
        for _ in 0..self.config.inner_steps {
            let mut tape = Tape::new();
            let disc = Mlp::on_tape(&self.disc_spec, &self.disc, &mut tape, true);
            let paths = Paths {
                interior: tape.constant(interior.clone()),
                initial: tape.constant(initial.clone()),
            };
            let (total, loss) =
                loss_on_paths(&mut tape, &disc, &paths, &batch.t_interior, &batch.x_data, &h)?;
            inner_totals.push(loss.total);
            let ascent = tape.neg(total)?;
            let grads = tape.grad(ascent, &disc.params, false)?;
            let grads: Vec<Tensor> = grads.iter().map(|&g| tape.value(g).clone()).collect();
            adam_step(
                &mut self.disc,
                &grads,
                &mut self.adam_disc,
                self.config.adam(self.config.lr_disc),
            )?;
        }

        let mut tape = Tape::new();
        let gen = Mlp::on_tape(&self.gen_spec, &self.gen, &mut tape, true);
        let disc = Mlp::on_tape(&self.disc_spec, &self.disc, &mut tape, false);
        let (total, generator_loss) = mfg_gan_loss(&mut tape, &gen, &disc, &batch, &self.hamiltonian)?;
        let grads = tape.grad(total, &gen.params, false)?;
        let grads: Vec<Tensor> = grads.iter().map(|&g| tape.value(g).clone()).collect();
        adam_step(
            &mut self.gen,
            &grads,
            &mut self.adam_gen,
            self.config.adam(self.config.lr_gen),
        )?;

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            inner_totals,
            generator_loss,
        })
    }

    /// Metrics on a fresh batch whose randomness depends only on the seed and
    /// the current step.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let n = self.config.eval_samples;
        let d = self.data.dim();
        let mut rng = Rng64::seed_from_u64(derive_seed(self.config.seed, TAG_EVAL));
        rng.set_stream(self.step);

        let z1 = sample_noise(n, d, &mut rng)?;
        let ones = Tensor::ones(vec![n, 1]);
        let generated = evaluate(&self.gen_spec, &self.gen, &z1, Some(&ones))?;
        let (mean_err, cov_err, w2) = moment_errors(&generated, &self.reference.0, &self.reference.1)?;

        let batch = LossBatch {
            x_data: self.data.sample(n, &mut rng)?,
            z_interior: sample_noise(n, d, &mut rng)?,
            t_interior: sample_time(n, &mut rng)?,
            z_initial: sample_noise(n, d, &mut rng)?,
        };
        let mut tape = Tape::new();
        let gen = Mlp::on_tape(&self.gen_spec, &self.gen, &mut tape, false);
        let disc = Mlp::on_tape(&self.disc_spec, &self.disc, &mut tape, false);
        let (_, loss) = mfg_gan_loss(&mut tape, &gen, &disc, &batch, &self.hamiltonian)?;
        drop(tape);

        let hjb_residual = hjb_residual_diagnostic(
            &self.disc_spec,
            &self.disc,
            &self.gen_spec,
            &self.gen,
            &self.hamiltonian,
            &batch.z_interior,
            &batch.t_interior,
        )?;
        Ok(MetricsRecord {
            step: self.step,
            loss,
            mean_err,
            cov_err,
            w2,
            hjb_residual,
            wall_ms: 0,
        })
    }

    /// Writes `gen.ckpt`, `disc.ckpt` and `state.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&self.gen_spec, &self.gen, &dir.join(GEN_FILE))?;
        save_checkpoint(&self.disc_spec, &self.disc, &dir.join(DISC_FILE))?;
        let state = TrainerState {
            step: self.step,
            seed: self.config.seed,
            rng: self.rng.clone(),
            adam_gen: self.adam_gen.clone(),
            adam_disc: self.adam_disc.clone(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, state.encode()).map_err(|e| Error::io(path, e))
    }

    /// Trains up to `config.outer_steps`, logging to `out_dir/metrics.csv`
    /// and checkpointing under `out_dir/checkpoints/`.
    ///
    /// `observer` sees every step's report. A resumed trainer keeps the
    /// metrics rows up to its current step and appends after them.
    pub fn run(
        &mut self,
        out_dir: &Path,
        observer: &mut dyn FnMut(&StepReport),
    ) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut metrics = if self.step > 0 && metrics_path.exists() {
            let mut rows = crate::metrics::read_metrics(&metrics_path)?;
            rows.retain(|r| r.step <= self.step);
            rows
        } else {
            Vec::new()
        };
        write_metrics(&metrics_path, &metrics)?;

        let started = Instant::now();
        let mut last_good = checkpoint_dir(out_dir, self.step);
        self.save(&last_good)?;

        while self.step < self.config.outer_steps {
            let report = self.outer_step().map_err(|e| match e {
                e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient { .. }) => {
                    Error::TrainingAborted {
                        step: self.step + 1,
                        last_good: last_good.clone(),
                        source: Box::new(e),
                    }
                }
                other => other,
            })?;
            observer(&report);

            let last = self.step == self.config.outer_steps;
            if self.step % self.config.eval_every == 0 || last {
                let mut rec = self.evaluate()?;
                if self.config.record_wall_clock {
                    rec.wall_ms = started.elapsed().as_millis() as u64;
                }
                append_metrics(&metrics_path, &rec)?;
                metrics.push(rec);
            }
            if self.step % self.config.checkpoint_every == 0 || last {
                last_good = checkpoint_dir(out_dir, self.step);
                self.save(&last_good)?;
            }
        }

        for (file, src) in [(GEN_FILE, GEN_FILE), (DISC_FILE, DISC_FILE)] {
            let from = last_good.join(src);
            let to = out_dir.join(file);
            fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(TrainOutcome {
            final_step: self.step,
            metrics,
            last_checkpoint: last_good,
        })
    }
}

pub const GEN_FILE: &str = "gen.ckpt";
pub const DISC_FILE: &str = "disc.ckpt";
pub const STATE_FILE: &str = "state.bin";

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}"))
}

fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, row: &MetricsRecord) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(path, e))
}

/// Optimizer and stream state needed to continue a run exactly.
struct TrainerState {
    step: u64,
    seed: u64,
    rng: Rng64,
    adam_gen: AdamState,
    adam_disc: AdamState,
}

const STATE_MAGIC: &[u8; 8] = b"MFGSTAT1";

impl TrainerState {
    fn encode(&self) -> Vec<u8> {
        let mut b = STATE_MAGIC.to_vec();
        b.extend(self.step.to_le_bytes());
        b.extend(self.seed.to_le_bytes());
        b.extend(self.rng.get_seed());
        b.extend(self.rng.get_stream().to_le_bytes());
        b.extend(self.rng.get_word_pos().to_le_bytes());
        for adam in [&self.adam_gen, &self.adam_disc] {
            b.extend(adam.step_count.to_le_bytes());
            for t in adam.first_moment.iter().chain(&adam.second_moment) {
                for v in t.data() {
                    b.extend(v.to_le_bytes());
                }
            }
        }
        b
    }

    fn decode(bytes: &[u8], gen: &ParamSet, disc: &ParamSet) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STATE_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let step = r.u64()?;
        let seed = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = Rng64::from_seed(rng_seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut read_adam = |params: &ParamSet| -> Result<AdamState> {
            let mut state = AdamState::new(params);
            state.step_count = r.u64()?;
            for t in state.first_moment.iter_mut().chain(state.second_moment.iter_mut()) {
                for v in t.data_mut() {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                }
            }
            Ok(state)
        };
        let adam_gen = read_adam(gen)?;
        let adam_disc = read_adam(disc)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::MalformedHeader("trailing bytes in state file".into()).into());
        }
        Ok(Self {
            step,
            seed,
            rng,
            adam_gen,
            adam_disc,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (MlpSpec, ParamSet) {
        let spec = MlpSpec::discriminator(2, vec![3]);
        let p = ParamSet::init(&spec, 1).unwrap();
        (spec, p)
    }

    fn grads_like(p: &ParamSet, v: f64) -> Vec<Tensor> {
        p.tensors()
            .iter()
            .map(|t| Tensor::full(t.shape().to_vec(), v))
            .collect()
    }

    const HP: AdamParams = AdamParams {
        lr: 1e-4,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    #[test]
    fn unit_gradient_moves_by_lr() {
        let (_, mut p) = tiny();
        let before = p.flatten();
        let mut st = AdamState::new(&p);
        let g = grads_like(&p, 1.0);
        adam_step(&mut p, &g, &mut st, HP).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!(((a - b) + 1e-4).abs() < 1e-11, "{}", a - b);
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (_, mut p) = tiny();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = grads_like(&p, 0.0);
        adam_step(&mut p, &g, &mut st, HP).unwrap();
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn moments_accumulate() {
        let (_, p0) = tiny();
        let g = [0.3, -2.0, 0.7];
        let grads = |p: &ParamSet, k: usize| grads_like(p, g[k]);
        let mut two = p0.clone();
        let mut st = AdamState::new(&two);
        adam_step(&mut two, &grads(&p0, 0), &mut st, HP).unwrap();
        adam_step(&mut two, &grads(&p0, 1), &mut st, HP).unwrap();
        let mut once = p0.clone();
        let mut st1 = AdamState::new(&once);
        adam_step(&mut once, &grads(&p0, 0), &mut st1, AdamParams { lr: 2e-4, ..HP }).unwrap();
        assert!(!two.bits_eq(&once));
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let spec = MlpSpec::discriminator(2, vec![3, 3]);
        let mut p = ParamSet::init(&spec, 1).unwrap();
        let before = p.clone();
        let mut g = grads_like(&p, 0.5);
        g[3].data_mut()[1] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, HP).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { layer: 1 }));
        assert!(p.bits_eq(&before));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { inner_steps: 0, ..Default::default() },
            TrainConfig { lr_gen: 0.0, ..Default::default() },
            TrainConfig { adam_beta2: 1.0, ..Default::default() },
            TrainConfig { q: 1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }
}
