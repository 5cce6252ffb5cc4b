//! Gradient-accumulation trainer: batched forward/backward passes over
//! rasterized scenes, Adam updates, running-statistic folding for the
//! normalization layers, and checkpoint save/resume.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Record;
use crate::error::{Error, Result};
use crate::loss::{total_loss_on_tape, LossConfig};
use crate::network::{CaspNet, ParamId};
use crate::pipeline::{build_sample, prepare_scene, Sample};
use crate::raster::{KernelParams, RasterConfig};
use crate::scene::Scene;
use crate::tensor::{
    adam_step_tensor, AdamParams, AdamState, Element, GridTensor, NormMode, Tape,
};

/// Momentum used when folding per-sample statistics into the running
/// mean/variance of normalization layers.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub augment: bool,
    /// Seed for scene selection and augmentation draws. Independent of the
    /// network-initialization seed.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 16,
            lr: 1e-4,
            augment: true,
            seed: 0,
        }
    }
}

/// One optimizer step's logged losses (batch means).
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub l_class: f64,
    pub l_offset: f64,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,l_class,l_offset,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9}",
            self.step, self.l_class, self.l_offset, self.total
        )
    }
}

/// Per-sample backward results, reduced sequentially in sample order so that
/// training is independent of worker scheduling.
struct PerSample<T: Element> {
    grads: Vec<(usize, GridTensor<T>)>,
    bn: Vec<(ParamId, ParamId, Vec<T>, Vec<T>)>,
    l_class: f64,
    l_offset: f64,
    l_total: f64,
}

pub struct Trainer<T: Element> {
    pub net: CaspNet<T>,
    pub opts: TrainOptions,
    pub raster: RasterConfig,
    pub kernel: KernelParams,
    pub loss_cfg: LossConfig,
    /// Completed optimizer steps (global across resumes).
    pub step: usize,
    adam: Vec<Option<AdamState<T>>>,
}

/// RNG for one sample draw, derived from the run seed and a global sample
/// counter so batches replay identically regardless of chunking.
fn sample_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl<T: Element> Trainer<T>
where
    Record: From<GridTensor<T>>,
{
    pub fn new(
        net: CaspNet<T>,
        raster: RasterConfig,
        kernel: KernelParams,
        opts: TrainOptions,
    ) -> Result<Self> {
        if raster.u_extent != net.cfg.u_extent
            || raster.v_extent != net.cfg.v_extent
            || raster.input_steps != net.cfg.input_steps
            || raster.output_steps != net.cfg.output_steps
        {
            return Err(Error::config(format!(
                "grid config ({}x{}, {} in / {} out) does not match network ({}x{}, {} in / {} out)",
                raster.u_extent,
                raster.v_extent,
                raster.input_steps,
                raster.output_steps,
                net.cfg.u_extent,
                net.cfg.v_extent,
                net.cfg.input_steps,
                net.cfg.output_steps,
            )));
        }
        if opts.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        kernel.validate(net.cfg.output_steps)?;
        let loss_cfg = LossConfig::for_classes(net.cfg.n_classes());
        let adam = (0..net.registry.len()).map(|_| None).collect();
        Ok(Trainer {
            net,
            opts,
            raster,
            kernel,
            loss_cfg,
            step: 0,
            adam,
        })
    }

    /// Resume training state (parameters, optimizer moments, step counter)
    /// from a checkpoint written by [`Trainer::save`].
    pub fn from_checkpoint(
        path: &Path,
        raster: RasterConfig,
        kernel: KernelParams,
        opts: TrainOptions,
    ) -> Result<Self> {
        let (net, mut leftover) = CaspNet::<T>::load(path)?;
        let mut trainer = Trainer::new(net, raster, kernel, opts)?;
        trainer.step = leftover
            .remove("train.step")
            .map(|r| scalar_of(&r) as usize)
            .unwrap_or(0);
        trainer.load_adam(&mut leftover);
        Ok(trainer)
    }

    fn load_adam(&mut self, records: &mut HashMap<String, Record>) {
        for (id, p) in self.net.registry.iter() {
            if !p.trainable {
                continue;
            }
            let m = records.remove(&format!("opt.m/{}", p.name));
            let v = records.remove(&format!("opt.v/{}", p.name));
            if let (Some(m), Some(v)) = (m, v) {
                let m = crate::network::record_tensor::<T>(&m);
                let v = crate::network::record_tensor::<T>(&v);
                if m.shape() == p.value.shape() && v.shape() == p.value.shape() {
                    self.adam[id.0] = Some(AdamState { m, v });
                }
            }
        }
    }

    /// Write a checkpoint holding the network, optimizer moments, and the
    /// global step counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = Vec::new();
        for (id, p) in self.net.registry.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(st) = &self.adam[id.0] {
                extra.push((format!("opt.m/{}", p.name), Record::from(st.m.clone())));
                extra.push((format!("opt.v/{}", p.name), Record::from(st.v.clone())));
            }
        }
        extra.push((
            "train.step".into(),
            Record::F64(GridTensor::scalar(self.step as f64)),
        ));
        self.net.save(path, extra)
    }

    /// Run `steps` optimizer steps over `scenes`, returning one log row per
    /// step. Callers may invoke this repeatedly; sample draws depend only on
    /// the global step counter, so chunking does not change the trajectory.
    pub fn run(&mut self, scenes: &[Scene], steps: usize) -> Result<Vec<LogRow>> {
        if scenes.is_empty() {
            return Err(Error::input("no training scenes given"));
        }
        let mode = self.net.cfg.mode;
        let prepped: Vec<Scene> = scenes
            .iter()
            .map(|s| prepare_scene(s, mode))
            .collect::<Result<_>>()?;
        // Without augmentation every draw of a scene rasterizes identically,
        // so precompute the grids once.
        let cache: Option<Vec<Sample<T>>> = if self.opts.augment {
            None
        } else {
            Some(
                prepped
                    .iter()
                    .map(|s| {
                        build_sample::<T, ChaCha8Rng>(s, &self.raster, &self.kernel, mode, None)
                    })
                    .collect::<Result<_>>()?,
            )
        };

        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let bs = self.opts.batch_size;
            let base = (self.step as u64) * (bs as u64);
            let net = &self.net;
            let raster = &self.raster;
            let kernel = &self.kernel;
            let loss_cfg = &self.loss_cfg;
            let opts = &self.opts;
            let prepped_ref = &prepped;
            let cache_ref = &cache;

            let results: Vec<Result<PerSample<T>>> = (0..bs)
                .into_par_iter()
                .map(|j| {
                    let mut rng = sample_rng(opts.seed, base + j as u64);
                    let idx = rng.gen_range(0..prepped_ref.len());
                    let built;
                    let sample: &Sample<T> = match cache_ref {
                        Some(c) => &c[idx],
                        None => {
                            built =
                                build_sample(&prepped_ref[idx], raster, kernel, mode, Some(&mut rng))?;
                            &built
                        }
                    };
                    let mut tape = Tape::new();
                    let trace =
                        net.forward(&mut tape, &sample.inputs, &sample.map, NormMode::Train)?;
                    let nodes = total_loss_on_tape(&mut tape, &trace.steps, &sample.gt, loss_cfg)?;
                    let bn = trace
                        .bn_uses
                        .iter()
                        .map(|u| {
                            let (m, v) = tape
                                .bn_stats(u.node)
                                .expect("training-mode batch norm saves statistics");
                            (u.running_mean, u.running_var, m.to_vec(), v.to_vec())
                        })
                        .collect();
                    tape.backward(nodes.total)?;
                    let bindings: Vec<(usize, crate::tensor::NodeId)> =
                        tape.param_bindings().collect();
                    let mut grads = Vec::with_capacity(bindings.len());
                    for (slot, node) in bindings {
                        if let Some(g) = tape.take_grad(node) {
                            grads.push((slot, g));
                        }
                    }
                    Ok(PerSample {
                        grads,
                        bn,
                        l_class: nodes.l_class,
                        l_offset: nodes.l_offset,
                        l_total: nodes.l_total,
                    })
                })
                .collect();

            // Sequential reduction in sample order keeps the update
            // deterministic on any worker count.
            let mut grad_acc: Vec<Option<GridTensor<T>>> =
                (0..self.net.registry.len()).map(|_| None).collect();
            let mut l_class = 0.0;
            let mut l_offset = 0.0;
            let mut l_total = 0.0;
            for r in results {
                let s = r?;
                for (slot, g) in s.grads {
                    match &mut grad_acc[slot] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a = *a + *b;
                            }
                        }
                        None => grad_acc[slot] = Some(g),
                    }
                }
                for (mid, vid, m, v) in s.bn {
                    self.fold_bn(mid, vid, &m, &v);
                }
                l_class += s.l_class;
                l_offset += s.l_offset;
                l_total += s.l_total;
            }

            let inv_b = T::from_f64(1.0 / bs as f64);
            let adam_params = AdamParams {
                lr: self.opts.lr,
                ..AdamParams::default()
            };
            let t = (self.step + 1) as u64;
            for (slot, acc) in grad_acc.into_iter().enumerate() {
                let Some(mut g) = acc else { continue };
                let id = ParamId(slot);
                if !self.net.registry.is_trainable(id) {
                    continue;
                }
                for x in g.data_mut() {
                    *x = *x * inv_b;
                }
                let state = self.adam[slot]
                    .get_or_insert_with(|| AdamState::new(g.shape()));
                adam_step_tensor(
                    self.net.registry.get_mut(id),
                    &g,
                    state,
                    &adam_params,
                    t,
                )?;
            }

            self.step += 1;
            let row = LogRow {
                step: self.step,
                l_class: l_class / bs as f64,
                l_offset: l_offset / bs as f64,
                total: l_total / bs as f64,
            };
            log::info!(
                "step {}: class {:.6} offset {:.6} total {:.6}",
                row.step,
                row.l_class,
                row.l_offset,
                row.total
            );
            rows.push(row);
        }
        Ok(rows)
    }

    fn fold_bn(&mut self, mean_id: ParamId, var_id: ParamId, mean: &[T], var: &[T]) {
        let momentum = T::from_f64(BN_MOMENTUM);
        let keep = T::from_f64(1.0 - BN_MOMENTUM);
        let rm = self.net.registry.get_mut(mean_id);
        for (r, &x) in rm.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + momentum * x;
        }
        let rv = self.net.registry.get_mut(var_id);
        for (r, &x) in rv.data_mut().iter_mut().zip(var) {
            *r = keep * *r + momentum * x;
        }
    }

    /// Re-estimate normalization running statistics by forwarding each scene
    /// once (no augmentation, no parameter updates). Useful after heavy
    /// augmented training so inference-time statistics match clean inputs.
    pub fn refresh_bn(&mut self, scenes: &[Scene]) -> Result<()> {
        let mode = self.net.cfg.mode;
        for scene in scenes {
            let prepped = prepare_scene(scene, mode)?;
            let sample = build_sample::<T, ChaCha8Rng>(
                &prepped,
                &self.raster,
                &self.kernel,
                mode,
                None,
            )?;
            let mut tape = Tape::new();
            let trace = self
                .net
                .forward(&mut tape, &sample.inputs, &sample.map, NormMode::Train)?;
            let folds: Vec<(ParamId, ParamId, Vec<T>, Vec<T>)> = trace
                .bn_uses
                .iter()
                .map(|u| {
                    let (m, v) = tape
                        .bn_stats(u.node)
                        .expect("training-mode batch norm saves statistics");
                    (u.running_mean, u.running_var, m.to_vec(), v.to_vec())
                })
                .collect();
            drop(tape);
            for (mid, vid, m, v) in folds {
                self.fold_bn(mid, vid, &m, &v);
            }
        }
        Ok(())
    }
}

fn scalar_of(rec: &Record) -> f64 {
    match rec {
        Record::F32(t) => t.data().first().copied().unwrap_or(0.0) as f64,
        Record::F64(t) => t.data().first().copied().unwrap_or(0.0),
    }
}
