//! Training plumbing: AdamW, synthetic volumetric data, the toy training
//! loop, and argmax inference.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Tape};
use crate::error::{CoreError, Result};
use crate::metrics::{dice_eval, LabelVolume};
use crate::model::{bind, forward, init_params, Bound, ModelConfig, ParamStore};
use crate::prng::Prng;
use crate::tensor::{fs, Scalar, Tensor};

/// Smoothing constant of the soft-Dice loss term.
pub const DICE_EPS: f64 = 1e-5;
/// Additive noise level of the synthetic volumes.
const NOISE_STD: f64 = 0.2;
/// Foreground-fraction window enforced by the generator.
const FG_MIN: f64 = 0.01;
const FG_MAX: f64 = 0.40;

/// Decoupled-weight-decay Adam with bias correction. Moments are allocated
/// lazily per parameter name.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(lr: f64) -> Self {
        AdamWState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one AdamW update to every parameter in the store. Every
/// parameter must have a matching gradient; decay is applied
/// multiplicatively before the Adam term so that a zero-gradient step is
/// exactly `p * (1 - lr * wd)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamWState<T>,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let b1 = fs::<T>(state.beta1);
    let b1c = fs::<T>(1.0 - state.beta1);
    let b2 = fs::<T>(state.beta2);
    let b2c = fs::<T>(1.0 - state.beta2);
    let decay = fs::<T>(1.0 - state.lr * state.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| CoreError::Invalid(format!("parameter {name} received no gradient")))?;
        if g.shape() != p.shape() {
            return Err(CoreError::Shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i];
            md[i] = b1 * md[i] + b1c * gi;
            vd[i] = b2 * vd[i] + b2c * gi * gi;
            let mhat = md[i].to_f64() / bc1;
            let vhat = vd[i].to_f64() / bc2;
            let adam = state.lr * mhat / (vhat.sqrt() + state.eps);
            pd[i] = decay * pd[i] - fs::<T>(adam);
        }
    }
    Ok(())
}

/// Moves every bound parameter's gradient out of the backward result,
/// keyed by parameter name.
pub fn collect_grads<T: Scalar>(
    bound: &Bound,
    grads: &mut Gradients<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads.take(*var).ok_or_else(|| {
            CoreError::Invalid(format!("parameter {name} is disconnected from the loss"))
        })?;
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// One synthetic case: an intensity volume and its voxel labels.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub volume: Tensor<f32>,
    pub labels: LabelVolume,
}

fn class_mean(class: u32, channel: usize) -> f64 {
    if class == 0 {
        0.0
    } else {
        0.6 * class as f64 * (channel + 1) as f64
    }
}

/// Generates `n` seeded volumes of random ellipsoids: each foreground class
/// paints 1-3 ellipsoids and a class-specific intensity signature per
/// channel, over Gaussian noise. Volumes whose foreground fraction leaves
/// [1%, 40%] are redrawn.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    extent: usize,
    in_channels: usize,
    num_classes: usize,
) -> Result<Vec<SynthSample>> {
    if extent < 8 {
        return Err(CoreError::Config(format!(
            "synthetic extent {extent} is degenerate; need >= 8"
        )));
    }
    if num_classes < 2 || in_channels == 0 {
        return Err(CoreError::Config(
            "need >= 2 classes and >= 1 channel".into(),
        ));
    }
    let mut root = Prng::new(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.fork(i as u64);
        let voxels = extent * extent * extent;
        let e = extent as f64;

        let mut ids = vec![0u32; voxels];
        let mut accepted = false;
        for _attempt in 0..64 {
            ids.fill(0);
            for class in 1..num_classes as u32 {
                let blobs = 1 + rng.next_below(3);
                for _ in 0..blobs {
                    let center = [
                        rng.next_range(0.2 * e, 0.8 * e),
                        rng.next_range(0.2 * e, 0.8 * e),
                        rng.next_range(0.2 * e, 0.8 * e),
                    ];
                    let axes = [
                        rng.next_range(0.10 * e, 0.25 * e),
                        rng.next_range(0.10 * e, 0.25 * e),
                        rng.next_range(0.10 * e, 0.25 * e),
                    ];
                    for d in 0..extent {
                        for h in 0..extent {
                            for w in 0..extent {
                                let r = [(d, 0), (h, 1), (w, 2)]
                                    .iter()
                                    .map(|&(x, a)| {
                                        let t = (x as f64 + 0.5 - center[a]) / axes[a];
                                        t * t
                                    })
                                    .sum::<f64>();
                                if r <= 1.0 {
                                    ids[(d * extent + h) * extent + w] = class;
                                }
                            }
                        }
                    }
                }
            }
            let fg = ids.iter().filter(|&&v| v != 0).count() as f64 / voxels as f64;
            if (FG_MIN..=FG_MAX).contains(&fg) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(CoreError::Invalid(
                "synthetic generator failed to hit the foreground window".into(),
            ));
        }

        let mut data = vec![0.0f32; in_channels * voxels];
        for ch in 0..in_channels {
            for (vi, &id) in ids.iter().enumerate() {
                data[ch * voxels + vi] =
                    (class_mean(id, ch) + NOISE_STD * rng.next_normal()) as f32;
            }
        }
        out.push(SynthSample {
            volume: Tensor::new(&[in_channels, extent, extent, extent], data)?,
            labels: LabelVolume::new([extent, extent, extent], ids)?,
        });
    }
    Ok(out)
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub dice: f64,
    pub ce: f64,
}

/// Loop hyper-parameters. The optimizer defaults stay at lr 1e-4; toy runs
/// pass an explicitly calibrated rate.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iters: 500,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

fn check_sample(cfg: &ModelConfig, sample: &SynthSample) -> Result<()> {
    let e = cfg.input_extent;
    let want = [cfg.in_channels, e, e, e];
    if sample.volume.shape() != want {
        return Err(CoreError::Shape(format!(
            "sample volume shape {:?} does not match config {want:?}",
            sample.volume.shape()
        )));
    }
    if sample.labels.extent() != [e, e, e] {
        return Err(CoreError::Shape(format!(
            "sample label extent {:?} does not match config",
            sample.labels.extent()
        )));
    }
    sample.labels.validate_classes(cfg.num_classes)
}

/// Seeded single-sample-batch training loop: forward, Dice+CE, backward,
/// AdamW. Returns the trained parameters and the full loss trace. A
/// non-finite loss aborts with a divergence error.
pub fn train_toy(
    cfg: &ModelConfig,
    data: &[SynthSample],
    opts: &TrainOptions,
) -> Result<(ParamStore<f32>, Vec<TraceRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Invalid("no training samples".into()));
    }
    for s in data {
        check_sample(cfg, s)?;
    }
    let mut params = init_params::<f32>(cfg, opts.seed)?;
    let mut state = AdamWState::new(opts.lr);
    state.weight_decay = opts.weight_decay;
    let mut trace = Vec::with_capacity(opts.iters);
    for it in 0..opts.iters {
        let sample = &data[it % data.len()];
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let x = tape.leaf(sample.volume.clone());
        let logits = forward(&mut tape, &bound, cfg, x)?;
        let (loss, parts) = tape.dice_ce(logits, sample.labels.ids(), DICE_EPS)?;
        let loss_val = tape.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(CoreError::Diverged {
                iter: it,
                loss: loss_val,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grad_map = collect_grads(&bound, &mut grads)?;
        drop(tape);
        adamw_step(&mut params, &grad_map, &mut state)?;
        trace.push(TraceRow {
            iter: it,
            loss: loss_val,
            dice: parts.dice,
            ce: parts.ce,
        });
    }
    Ok((params, trace))
}

/// Forward pass plus channel argmax: logits to hard labels. Ties resolve to
/// the lowest class id.
pub fn predict_labels(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    volume: &Tensor<f32>,
) -> Result<LabelVolume> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let x = tape.leaf(volume.clone());
    let logits = forward(&mut tape, &bound, cfg, x)?;
    let t = tape.value(logits);
    let (k, d, h, w) = t.dims4()?;
    let spatial = d * h * w;
    let data = t.data();
    let mut ids = vec![0u32; spatial];
    for (vi, id) in ids.iter_mut().enumerate() {
        let mut best = 0usize;
        for c in 1..k {
            if data[c * spatial + vi] > data[best * spatial + vi] {
                best = c;
            }
        }
        *id = best as u32;
    }
    LabelVolume::new([d, h, w], ids)
}

/// Mean hard Dice over all foreground classes and all samples.
pub fn mean_foreground_dice(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    data: &[SynthSample],
) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::Invalid("no evaluation samples".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for sample in data {
        let pred = predict_labels(cfg, params, &sample.volume)?;
        for class in 1..cfg.num_classes as u32 {
            sum += dice_eval(&pred, &sample.labels, class)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
