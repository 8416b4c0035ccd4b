//! Alternating adversarial training of generator and discriminator.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::augment;
use crate::autodiff::Tape;
use crate::checkpoint::save_checkpoint;
use crate::config::Config;
use crate::dataset::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::infer::{argmax_classes, forward_logits, sliding_window_logits};
use crate::losses::{discriminator_objective, generator_objective, one_hot, LossWeights};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::models::{class_probabilities, Discriminator, Gtnet};
use crate::nn::ParamStore;
use crate::optim::{collect_grads, Adam, AdamConfig};
use crate::tensor::{set_parallel, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub weights: LossWeights,
    /// Train against the discriminator; `false` drops D entirely.
    pub adversarial: bool,
    pub augment: bool,
    /// Intra-op parallelism. Results are identical either way, but the
    /// default keeps training single-threaded.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 8,
            epochs: 30,
            seed: 0,
            d_steps_per_g_step: 1,
            weights: LossWeights::default(),
            adversarial: true,
            augment: true,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 {
            return Err(Error::Config("train.batch_size and train.d_steps_per_g_step must be positive".into()));
        }
        Ok(())
    }
}

/// Both networks with their optimizers.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: Config,
    pub g: Gtnet,
    pub g_params: ParamStore<T>,
    pub g_opt: Adam<T>,
    pub d: Discriminator,
    pub d_params: ParamStore<T>,
    pub d_opt: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (g, g_params) = Gtnet::new(config.generator_config())?;
        let (d, d_params) = Discriminator::new(config.discriminator_config())?;
        let g_opt = Adam::new(config.train.optimizer, &g_params)?;
        let d_opt = Adam::new(config.train.optimizer, &d_params)?;
        Ok(Self {
            config,
            g,
            g_params,
            g_opt,
            d,
            d_params,
            d_opt,
        })
    }
}

/// Stacked images `[N, C, H, W]` with labels `[N, H, W]`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[SegSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let shape = first.image.shape().to_vec();
        let mut data = Vec::with_capacity(samples.len() * first.image.len());
        let mut labels = Vec::with_capacity(samples.len() * first.label.len());
        for s in samples {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::shape("batch", s.image.shape(), &shape));
            }
            data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
            labels.extend_from_slice(&s.label);
        }
        Ok(Self {
            images: Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar diagnostics of one step. Discriminator fields are `None` when
/// training without the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub g_loss: f64,
    pub d_loss: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    /// The step hit a non-finite value and was rolled back.
    pub skipped: bool,
}

fn scalar<T: Real>(tape: &Tape<T>, v: crate::autodiff::Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

fn mean_sigmoid<T: Real>(tape: &Tape<T>, v: crate::autodiff::Var) -> f64 {
    let d = tape.value(v).data();
    d.iter().map(|&z| 1.0 / (1.0 + (-z.as_f64()).exp())).sum::<f64>() / d.len() as f64
}

/// One discriminator update (generator output detached) followed by one
/// generator update against the updated, frozen discriminator. The generator
/// forward pass is shared between the two. A non-finite value anywhere
/// restores the state from before the step.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &Batch<T>) -> Result<StepReport> {
    let snapshot = (
        state.g_params.clone(),
        state.g_opt.clone(),
        state.d_params.clone(),
        state.d_opt.clone(),
    );
    match step_inner(state, batch) {
        Err(Error::NonFinite { op }) => {
            log::warn!("non-finite value in {op}; step rolled back");
            (state.g_params, state.g_opt, state.d_params, state.d_opt) = snapshot;
            Ok(StepReport {
                g_loss: f64::NAN,
                d_loss: None,
                d_real: None,
                d_fake: None,
                skipped: true,
            })
        }
        other => other,
    }
}

fn step_inner<T: Real>(state: &mut TrainState<T>, batch: &Batch<T>) -> Result<StepReport> {
    let cfg = state.config.train;
    let s = batch.images.shape().to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let k = state.g.config.num_classes;

    let mut gt = Tape::new();
    let gp = state.g_params.bind(&mut gt, true)?;
    let image = gt.constant(batch.images.clone())?;
    let logits = state.g.forward(&mut gt, &gp, image)?;

    let (mut d_loss, mut d_real, mut d_fake) = (None, None, None);
    if cfg.adversarial {
        let fake = {
            let mut t = Tape::new();
            let l = t.constant(gt.value(logits).clone())?;
            let p = class_probabilities(&mut t, l)?;
            t.value(p).clone()
        };
        let real = one_hot::<T>(&batch.labels, n, k, h, w)?;
        for _ in 0..cfg.d_steps_per_g_step {
            let mut dt = Tape::new();
            let dp = state.d_params.bind(&mut dt, true)?;
            let img = dt.constant(batch.images.clone())?;
            let real_map = dt.constant(real.clone())?;
            let fake_map = dt.constant(fake.clone())?;
            let terms = discriminator_objective(&mut dt, &state.d, &dp, img, real_map, fake_map)?;
            dt.backward(terms.loss)?;
            let grads = collect_grads(&dt, &dp);
            state.d_opt.step(&mut state.d_params, &grads)?;
            d_loss = Some(scalar(&dt, terms.loss));
            d_real = Some(mean_sigmoid(&dt, terms.real_logits));
            d_fake = Some(mean_sigmoid(&dt, terms.fake_logits));
        }
    }

    let frozen_d = if cfg.adversarial {
        Some((&state.d, state.d_params.bind(&mut gt, false)?))
    } else {
        None
    };
    let terms = generator_objective(
        &mut gt,
        frozen_d.as_ref().map(|(d, p)| (*d, p)),
        image,
        logits,
        &batch.labels,
        cfg.weights,
    )?;
    gt.backward(terms.total)?;
    let grads = collect_grads(&gt, &gp);
    state.g_opt.step(&mut state.g_params, &grads)?;
    for store in [&state.g_params, &state.d_params] {
        if store.entries().iter().any(|e| !e.value.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer update".into(),
            });
        }
    }
    Ok(StepReport {
        g_loss: scalar(&gt, terms.total),
        d_loss,
        d_real,
        d_fake,
        skipped: false,
    })
}

/// Predicted label maps for a set of samples. Images whose size the
/// generator accepts directly are evaluated whole, in batches; the rest go
/// through the sliding window.
pub fn predict<T: Real>(g: &Gtnet, params: &ParamStore<T>, samples: &[SegSample], config: &Config) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut i = 0;
    while i < samples.len() {
        let s = &samples[i];
        if g.config.check_input(s.height(), s.width()).is_ok() {
            let mut j = i + 1;
            while j < samples.len() && j - i < config.train.batch_size && samples[j].image.shape() == s.image.shape() {
                j += 1;
            }
            let batch = Batch::<T>::from_samples(&samples[i..j])?;
            let logits = forward_logits(g, params, batch.images)?;
            let sh = logits.shape().to_vec();
            let per = sh[1] * sh[2] * sh[3];
            for b in 0..(j - i) {
                let part = Tensor::new(sh[1..].to_vec(), logits.data()[b * per..(b + 1) * per].to_vec())?;
                out.push(argmax_classes(&part));
            }
            i = j;
        } else {
            let img = s.image.cast::<T>();
            out.push(argmax_classes(&sliding_window_logits(g, params, &img, &config.infer)?));
            i += 1;
        }
    }
    Ok(out)
}

pub fn evaluate<T: Real>(g: &Gtnet, params: &ParamStore<T>, samples: &[SegSample], config: &Config) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(g.config.num_classes);
    for (s, p) in samples.iter().zip(predict(g, params, samples, config)?) {
        cm.update(&s.label, &p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    pub val_mean_f1: f64,
    pub val_oa: f64,
}

pub const HISTORY_HEADER: [&str; 7] = ["epoch", "g_loss", "d_loss", "d_real", "d_fake", "val_mean_f1", "val_oa"];

pub fn write_history(out: impl Write, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.g_loss.to_string(),
            opt(r.d_loss),
            opt(r.d_real),
            opt(r.d_fake),
            r.val_mean_f1.to_string(),
            r.val_oa.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<history csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Epoch of the kept checkpoint; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_mean_f1: f64,
    /// Generator and discriminator at the best epoch.
    pub best: TrainState<f32>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Full training run. With `out` set, writes `history.csv` after every epoch
/// and `checkpoint.gatr` whenever validation mean F1 improves (and once for
/// the initial weights).
pub fn train(config: &Config, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs non-empty splits, got {} train and {} val samples",
            data.train.len(),
            data.val.len()
        )));
    }
    set_parallel(config.train.parallel);
    let mut state = TrainState::<f32>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(1);
    let ckpt = out.map(|d| d.join("checkpoint.gatr"));
    let hist = out.map(|d| d.join("history.csv"));
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let save_history = |rows: &[HistoryRow]| -> Result<()> {
        if let Some(p) = &hist {
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            write_history(std::io::BufWriter::new(f), rows)?;
        }
        Ok(())
    };
    let initial = MetricReport::from_confusion(&evaluate(&state.g, &state.g_params, &data.val, config)?)?;
    let mut best = state.clone();
    let (mut best_epoch, mut best_f1) = (0, initial.mean_f1);
    if let Some(p) = &ckpt {
        save_checkpoint(p, config, &state.g_params, &state.d_params)?;
    }
    let mut history = Vec::with_capacity(config.train.epochs);
    save_history(&history)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut rng);
        let (mut g, mut dl, mut dr, mut df) = (vec![], vec![], vec![], vec![]);
        for chunk in order.chunks(config.train.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    if config.train.augment {
                        augment(&data.train[i], &mut rng)
                    } else {
                        Ok(data.train[i].clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let r = train_step(&mut state, &Batch::from_samples(&samples)?)?;
            if r.skipped {
                continue;
            }
            g.push(r.g_loss);
            dl.extend(r.d_loss);
            dr.extend(r.d_real);
            df.extend(r.d_fake);
        }
        let report = MetricReport::from_confusion(&evaluate(&state.g, &state.g_params, &data.val, config)?)?;
        log::info!(
            "epoch {epoch}: g_loss {:.4} val mean F1 {:.4} OA {:.4}",
            mean(&g).unwrap_or(f64::NAN),
            report.mean_f1,
            report.overall_accuracy
        );
        history.push(HistoryRow {
            epoch,
            g_loss: mean(&g).unwrap_or(f64::NAN),
            d_loss: mean(&dl),
            d_real: mean(&dr),
            d_fake: mean(&df),
            val_mean_f1: report.mean_f1,
            val_oa: report.overall_accuracy,
        });
        if report.mean_f1 > best_f1 {
            best_f1 = report.mean_f1;
            best_epoch = epoch;
            best = state.clone();
            if let Some(p) = &ckpt {
                save_checkpoint(p, config, &state.g_params, &state.d_params)?;
            }
        }
        save_history(&history)?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_mean_f1: best_f1,
        best,
    })
}
