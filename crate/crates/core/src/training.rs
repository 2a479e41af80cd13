//! Loss, metrics, optimiser and the training/evaluation loops.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::operator::{Component, LayerSpikes, OperatorContext, OperatorMode, Spiking, VsGnoModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            gamma: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0 && self.alpha.is_finite() && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "alpha {} and gamma {} must be finite and non-negative",
                self.alpha, self.gamma
            )));
        }
        if self.alpha == 0.0 && self.gamma == 0.0 {
            return Err(Error::Config("alpha and gamma cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Per-component spike rates; `None` marks a component the model lacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub s_m: Option<f64>,
    pub s_p: Option<f64>,
    pub s_spectral: Option<f64>,
    pub s_spatial: Option<f64>,
    pub s_f: Option<f64>,
    pub s_final: Option<f64>,
}

impl SpikeReport {
    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::M => self.s_m,
            Component::P => self.s_p,
            Component::Spectral => self.s_spectral,
            Component::Spatial => self.s_spatial,
            Component::F => self.s_f,
            Component::Final => self.s_final,
        }
    }

    pub fn set(&mut self, c: Component, v: Option<f64>) {
        let slot = match c {
            Component::M => &mut self.s_m,
            Component::P => &mut self.s_p,
            Component::Spectral => &mut self.s_spectral,
            Component::Spatial => &mut self.s_spatial,
            Component::F => &mut self.s_f,
            Component::Final => &mut self.s_final,
        };
        *slot = v;
    }

    /// Mean over the components that are present.
    pub fn mean_present(&self) -> Option<f64> {
        let vals: Vec<f64> = Component::ALL.iter().filter_map(|&c| self.get(c)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Rates from accumulated per-layer counters: total spikes over total
    /// opportunities within each component.
    pub fn from_counts(counts: &SpikeCounts) -> Self {
        let mut r = SpikeReport::default();
        for (&c, &(s, o)) in &counts.0 {
            if o > 0 {
                r.set(c, Some(s as f64 / o as f64));
            }
        }
        r
    }
}

/// Spike and opportunity totals per component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeCounts(pub BTreeMap<Component, (u64, u64)>);

impl SpikeCounts {
    pub fn add_layers(&mut self, layers: &[LayerSpikes]) {
        for l in layers {
            let e = self.0.entry(l.component).or_insert((0, 0));
            e.0 += l.spikes;
            e.1 += l.opportunities;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2_per_channel: Vec<f64>,
    pub l2_mean: f64,
    pub spikes: SpikeReport,
    pub loss: f64,
}

/// Channel-wise `||pred_c - truth_c|| / ||truth_c||` and their mean.
pub fn relative_l2(pred: &Mat, truth: &Mat) -> Result<(Vec<f64>, f64)> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let k = truth.cols();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for r in 0..truth.rows() {
        for c in 0..k {
            let t = truth.get(r, c);
            let d = pred.get(r, c) - t;
            num[c] += d * d;
            den[c] += t * t;
        }
    }
    let mut per = Vec::with_capacity(k);
    for c in 0..k {
        if den[c] == 0.0 {
            return Err(Error::ZeroNormChannel(c));
        }
        per.push((num[c] / den[c]).sqrt());
    }
    let mean = per.iter().sum::<f64>() / k.max(1) as f64;
    Ok((per, mean))
}

/// Differentiable channel-mean relative L2 of a normalised prediction.
///
/// `scale[c]` is `std_c / ||truth_phys_c||`, which turns the normalised
/// residual norm into the physical relative error.
pub fn relative_l2_var(tape: &mut Tape, pred: Var, target: &Mat, scale: &[f64]) -> Result<Var> {
    let (n, k) = tape.value(pred).dims2()?;
    if (n, k) != (target.rows(), target.cols()) || scale.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "relative L2 of {n}x{k} against {}x{} with {} scales",
            target.rows(),
            target.cols(),
            scale.len()
        )));
    }
    let t = tape.constant(Tensor::from_mat(target))?;
    let d = tape.sub(pred, t)?;
    let sq = tape.elementwise_mul(d, d)?;
    let col = tape.sum_rows(sq)?;
    let norms = tape.sqrt(col)?;
    let w = tape.constant(Tensor::new(vec![1, k], scale.to_vec())?)?;
    let rel = tape.elementwise_mul(norms, w)?;
    let total = tape.sum_all(rel)?;
    tape.scale(total, 1.0 / k as f64)
}

/// Differentiable per-component rates on a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct SpikeVars {
    pub rates: [Option<Var>; 6],
}

impl SpikeVars {
    /// Component rate as the mean of its layers' rates.
    pub fn from_layers(tape: &mut Tape, layers: &[LayerSpikes]) -> Result<Self> {
        let mut out = SpikeVars::default();
        for (i, c) in Component::ALL.iter().enumerate() {
            let vars: Vec<Var> = layers
                .iter()
                .filter(|l| l.component == *c)
                .filter_map(|l| l.rate)
                .collect();
            out.rates[i] = match vars.len() {
                0 => None,
                1 => Some(vars[0]),
                _ => Some(tape.mean_over(&vars)?),
            };
        }
        Ok(out)
    }

    pub fn get(&self, c: Component) -> Option<Var> {
        let i = Component::ALL.iter().position(|&x| x == c).expect("known component");
        self.rates[i]
    }
}

/// `alpha L2 + gamma * mean of the present component rates`.
pub fn energy_balance_loss(
    tape: &mut Tape,
    l2: Var,
    spikes: &SpikeVars,
    cfg: &LossConfig,
    mode: OperatorMode,
) -> Result<Var> {
    let mut terms = Vec::new();
    for c in Component::ALL.iter().filter(|c| c.present_in(mode)) {
        match spikes.get(*c) {
            Some(v) => terms.push(v),
            None => return Err(Error::MissingComponent(c.label())),
        }
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let spike_term = tape.scale(sum, cfg.gamma / terms.len() as f64)?;
    let rec = tape.scale(l2, cfg.alpha)?;
    tape.add(rec, spike_term)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl OptimState {
    pub fn new(shapes: &[usize], cfg: AdamConfig) -> Self {
        OptimState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            cfg,
        }
    }

    pub fn for_params(params: &[Tensor], cfg: AdamConfig) -> Self {
        let lens: Vec<usize> = params.iter().map(Tensor::len).collect();
        Self::new(&lens, cfg)
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: parameter {i} has {} values, gradient {}",
                p.len(),
                g.len()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((x, &g), (mj, vj)) in p.values_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
            *mj = beta1 * *mj + (1.0 - beta1) * g;
            *vj = beta2 * *vj + (1.0 - beta2) * g * g;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One sample ready for the loss: normalised input and target plus the
/// physical truth and per-channel scales for the relative error.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: Vec<f64>,
    pub target: Mat,
    pub truth: Mat,
    pub scale: Vec<f64>,
}

pub fn prepare_split(ds: &Dataset, split: Split) -> Result<Vec<Prepared>> {
    let norm = ds.normalization();
    ds.split(split)
        .iter()
        .map(|s| {
            let (input, target, truth) = if ds.is_normalized() {
                (s.input.clone(), s.output.clone(), norm.denormalize_output(&s.output)?)
            } else {
                (norm.normalize_input(&s.input)?, norm.normalize_output(&s.output)?, s.output.clone())
            };
            let k = truth.cols();
            let mut scale = Vec::with_capacity(k);
            for c in 0..k {
                let nrm = (0..truth.rows()).map(|r| truth.get(r, c).powi(2)).sum::<f64>().sqrt();
                if nrm == 0.0 {
                    return Err(Error::ZeroNormChannel(c));
                }
                scale.push(norm.output_std[c] / nrm);
            }
            Ok(Prepared {
                input,
                target,
                truth,
                scale,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 16,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            threads: 1,
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_l2: f64,
    pub val_l2_mean: f64,
    pub val_l2_per_channel: Vec<f64>,
    #[serde(flatten)]
    pub spikes: SpikeReport,
}

pub struct TrainOutcome {
    pub last: VsGnoModel,
    pub best: VsGnoModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct SampleResult {
    loss: f64,
    l2: f64,
    grads: Vec<Vec<f64>>,
}

/// Forward, loss and backward for one sample with fresh VSN states.
pub fn sample_loss_and_grads(
    model: &VsGnoModel,
    ctx: &OperatorContext,
    sample: &Prepared,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut session = model.session(ctx, &mut tape, true)?;
    let out = session.forward(&mut tape, &sample.input)?;
    let params = session.params().clone();
    drop(session);
    let l2 = relative_l2_var(&mut tape, out.output, &sample.target, &sample.scale)?;
    let loss = if model.config().spiking == Spiking::On {
        let spikes = SpikeVars::from_layers(&mut tape, &out.layers)?;
        energy_balance_loss(&mut tape, l2, &spikes, loss_cfg, model.config().mode)?
    } else {
        tape.scale(l2, loss_cfg.alpha)?
    };
    let (lv, l2v) = (tape.value(loss).values()[0], tape.value(l2).values()[0]);
    let mut grads = tape.backward(loss)?;
    Ok((lv, l2v, params.collect_grads(&mut grads, model.params())))
}

fn pool(threads: usize) -> Result<Arc<rayon::ThreadPool>> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map(Arc::new)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Mini-batch training with back-propagation through the spike steps.
pub fn train(
    model: VsGnoModel,
    ctx: &OperatorContext,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let train_set = prepare_split(ds, Split::Train)?;
    let val_set = prepare_split(ds, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = pool(cfg.threads)?;
    let mut model = model;
    let mut state = OptimState::for_params(model.params().tensors(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, model.clone(), 0);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut l2_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let nonfinite = || Error::NonFiniteLoss { epoch, batch: b };
            let results: Vec<Result<SampleResult>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        sample_loss_and_grads(&model, ctx, &train_set[i], &cfg.loss)
                            .map(|(loss, l2, grads)| SampleResult { loss, l2, grads })
                    })
                    .collect()
            });
            let mut total: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let r = match r {
                    Err(Error::NonFiniteValue(what)) => {
                        log::error!("non-finite value in {what} at epoch {epoch}, batch {b}");
                        return Err(nonfinite());
                    }
                    other => other?,
                };
                if !r.loss.is_finite() {
                    return Err(nonfinite());
                }
                loss_sum += r.loss;
                l2_sum += r.l2;
                match &mut total {
                    None => total = Some(r.grads),
                    Some(t) => {
                        for (a, g) in t.iter_mut().zip(&r.grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= inv);
            if grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(nonfinite());
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state)?;
        }
        let val = evaluate_prepared(&model, ctx, ds.normalization(), &val_set, &cfg.loss, cfg.threads)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_l2: l2_sum / train_set.len() as f64,
            val_l2_mean: val.l2_mean,
            val_l2_per_channel: val.l2_per_channel.clone(),
            spikes: val.spikes,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, val L2 {:.4}%",
            rec.train_loss,
            100.0 * rec.val_l2_mean
        );
        on_epoch(&rec);
        if val.l2_mean < best.0 {
            best = (val.l2_mean, model.clone(), epoch);
        }
        history.push(rec);
    }
    Ok(TrainOutcome {
        last: model,
        best: best.1,
        best_epoch: best.2,
        history,
    })
}

/// Per-sample prediction in physical units plus its spike counters.
pub type PredictFn<'a> = dyn Fn(usize, &Prepared) -> Result<(Mat, Vec<LayerSpikes>)> + Sync + 'a;

/// Metrics over prepared samples with an arbitrary predictor. Relative
/// errors are averaged over samples, spikes summed over the split.
pub fn evaluate_with(samples: &[Prepared], predict: &PredictFn<'_>, threads: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = pool(threads)?;
    let results: Vec<Result<(Vec<f64>, Vec<LayerSpikes>)>> = pool.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let (pred, layers) = predict(i, s)?;
                let (per, _) = relative_l2(&pred, &s.truth)?;
                Ok((per, layers))
            })
            .collect()
    });
    let k = samples[0].truth.cols();
    let mut per = vec![0.0; k];
    let mut counts = SpikeCounts::default();
    for r in results {
        let (p, layers) = r?;
        per.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        counts.add_layers(&layers);
    }
    per.iter_mut().for_each(|x| *x /= samples.len() as f64);
    let l2_mean = per.iter().sum::<f64>() / k as f64;
    Ok(Metrics {
        l2_per_channel: per,
        l2_mean,
        spikes: SpikeReport::from_counts(&counts),
        loss: f64::NAN,
    })
}

fn evaluate_prepared(
    model: &VsGnoModel,
    ctx: &OperatorContext,
    norm: &Normalization,
    samples: &[Prepared],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<Metrics> {
    let predict = |_: usize, s: &Prepared| -> Result<(Mat, Vec<LayerSpikes>)> {
        let p = model.predict(ctx, &s.input)?;
        Ok((norm.denormalize_output(&p.output)?, p.layers))
    };
    let mut m = evaluate_with(samples, &predict, threads)?;
    let spike_mean = match model.config().spiking {
        Spiking::On => m.spikes.mean_present().unwrap_or(0.0),
        Spiking::Bypass => 0.0,
    };
    m.loss = loss_cfg.alpha * m.l2_mean + loss_cfg.gamma * spike_mean;
    Ok(m)
}

/// Metrics of a model on one split of a dataset.
pub fn evaluate(
    model: &VsGnoModel,
    ctx: &OperatorContext,
    ds: &Dataset,
    split: Split,
    threads: usize,
) -> Result<Metrics> {
    let samples = prepare_split(ds, split)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    evaluate_prepared(model, ctx, ds.normalization(), &samples, &LossConfig::default(), threads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2_examples() {
        let t = Mat::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let p = Mat::from_vec(2, 1, vec![2.0, 0.0]).unwrap();
        assert_eq!(relative_l2(&t, &t).unwrap(), (vec![0.0], 0.0));
        assert_eq!(relative_l2(&p, &t).unwrap().1, 1.0);
        let t2 = Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let p2 = Mat::from_vec(1, 2, vec![1.1, 1.3]).unwrap();
        let (per, mean) = relative_l2(&p2, &t2).unwrap();
        assert!((per[0] - 0.1).abs() < 1e-12 && (per[1] - 0.3).abs() < 1e-12);
        assert!((mean - 0.2).abs() < 1e-12);
        let z = Mat::zeros(2, 1);
        assert!(matches!(relative_l2(&p, &z), Err(Error::ZeroNormChannel(0))));
    }

    #[test]
    fn relative_l2_var_matches_plain_metric() {
        let truth = Mat::from_vec(3, 2, vec![1.0, -2.0, 0.5, 4.0, 2.0, 1.0]).unwrap();
        let pred = Mat::from_vec(3, 2, vec![1.1, -1.5, 0.4, 4.2, 2.5, 1.0]).unwrap();
        let scale: Vec<f64> = (0..2)
            .map(|c| 1.0 / (0..3).map(|r| truth.get(r, c).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_mat(&pred)).unwrap();
        let l = relative_l2_var(&mut tape, p, &truth, &scale).unwrap();
        let v = tape.value(l).values()[0];
        assert!((v - relative_l2(&pred, &truth).unwrap().1).abs() < 1e-14);
    }

    fn rates(tape: &mut Tape, vals: &[f64]) -> SpikeVars {
        let mut s = SpikeVars::default();
        for (i, &v) in vals.iter().enumerate() {
            s.rates[i] = Some(tape.param(Tensor::scalar(v)).unwrap());
        }
        s
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let l2 = tape.param(Tensor::scalar(0.02)).unwrap();
        let s = rates(&mut tape, &[0.1; 6]);
        let zero = LossConfig { alpha: 1.0, gamma: 0.0 };
        let v = energy_balance_loss(&mut tape, l2, &s, &zero, OperatorMode::Full).unwrap();
        assert_eq!(tape.value(v).values()[0], 0.02);
        let cfg = LossConfig { alpha: 1.0, gamma: 0.5 };
        let v = energy_balance_loss(&mut tape, l2, &s, &cfg, OperatorMode::Full).unwrap();
        assert!((tape.value(v).values()[0] - 0.07).abs() < 1e-15);
    }

    #[test]
    fn spectral_only_averages_four_components() {
        let mut tape = Tape::new();
        let l2 = tape.param(Tensor::scalar(0.0)).unwrap();
        let mut s = SpikeVars::default();
        for c in [Component::M, Component::P, Component::Spectral, Component::Final] {
            let i = Component::ALL.iter().position(|&x| x == c).unwrap();
            s.rates[i] = Some(tape.param(Tensor::scalar(0.4)).unwrap());
        }
        let cfg = LossConfig { alpha: 1.0, gamma: 1.0 };
        let v = energy_balance_loss(&mut tape, l2, &s, &cfg, OperatorMode::SpectralOnly).unwrap();
        assert!((tape.value(v).values()[0] - 0.4).abs() < 1e-15);
        let err = energy_balance_loss(&mut tape, l2, &s, &cfg, OperatorMode::Full);
        assert!(matches!(err, Err(Error::MissingComponent("S_spatial"))));
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig { alpha: 0.0, gamma: 0.0 }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, gamma: 0.0 }.validate().is_err());
        assert!(LossConfig { alpha: 0.0, gamma: 0.1 }.validate().is_ok());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::for_params(&p, cfg);
        adam_step(&mut p, &[vec![0.0]], &mut st).unwrap();
        assert_eq!(p[0].values()[0], 1.0);

        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::for_params(&p, cfg);
        let st0 = st.clone();
        adam_step(&mut p, &[vec![1.0]], &mut st).unwrap();
        assert!((p[0].values()[0] - 0.9).abs() < 1e-8);

        let mut p2 = vec![Tensor::scalar(1.0)];
        let mut st2 = st0;
        adam_step(&mut p2, &[vec![1.0]], &mut st2).unwrap();
        assert_eq!(p, p2);
        assert_eq!(st, st2);

        assert!(matches!(
            adam_step(&mut p, &[vec![1.0, 2.0]], &mut st),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let cfg = AdamConfig { eps: 0.0, ..AdamConfig::default() };
        let g = vec![0.3, -1.7, 2.2];
        let run = |s: f64| {
            let mut p = vec![Tensor::new(vec![3], vec![0.0; 3]).unwrap()];
            let mut st = OptimState::for_params(&p, cfg);
            let gs: Vec<f64> = g.iter().map(|x| x * s).collect();
            adam_step(&mut p, &[gs], &mut st).unwrap();
            p[0].values().to_vec()
        };
        let (a, b) = (run(1.0), run(37.0));
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((na / nb - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn split_rates_are_ratio_of_totals() {
        let mk = |s, o| LayerSpikes {
            name: "x".into(),
            component: Component::P,
            spikes: s,
            opportunities: o,
            rate: None,
        };
        let mut c = SpikeCounts::default();
        c.add_layers(&[mk(1, 10)]);
        c.add_layers(&[mk(9, 30)]);
        let r = SpikeReport::from_counts(&c);
        assert_eq!(r.s_p, Some(10.0 / 40.0));
        assert_eq!(r.s_m, None);
        assert_eq!(r.mean_present(), Some(0.25));
    }
}
