//! Loss, optimizer, schedule, metrics and the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{config_err, invalid, Error, Result};
use crate::model::{Model, ModelOutput};
use crate::nn::{Graph, ParamStore, Real, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub freeze_epochs: usize,
    /// Loss weights for the full-resolution head and the `/2, /4, /8` heads.
    pub ds_weights: [f64; 4],
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            epochs: 60,
            freeze_epochs: 10,
            ds_weights: [8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0],
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(config_err("lr0", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(config_err("betas", "both must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.ds_weights.iter().any(|w| !(*w >= 0.0)) || (self.ds_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("ds_weights", "must be non-negative and sum to 1"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: V::Err| config_err(key, e.to_string()))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "betas" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?;
                let [b1, b2] = parts[..] else {
                    return Err(config_err(key, "expected two comma-separated numbers"));
                };
                self.betas = (b1, b2);
            }
            "epochs" => self.epochs = num(key, value)?,
            "freeze_epochs" => self.freeze_epochs = num(key, value)?,
            "ds_weights" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?;
                self.ds_weights = parts
                    .try_into()
                    .map_err(|_| config_err(key, "expected four comma-separated numbers"))?;
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("lr0".into(), self.lr0.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("betas".into(), format!("{},{}", self.betas.0, self.betas.1)),
            ("epochs".into(), self.epochs.to_string()),
            ("freeze_epochs".into(), self.freeze_epochs.to_string()),
            (
                "ds_weights".into(),
                self.ds_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

fn check_binary<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} values must be 0 or 1")))
    }
}

struct LossForward<T> {
    probs: Vec<T>,
    ce: T,
    dice: T,
    num: [T; 2],
    den: [T; 2],
    n: usize,
    hw: usize,
}

fn loss_forward<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<LossForward<T>> {
    let &[n, c, h, w] = logits.shape() else {
        return Err(invalid(format!("loss expects [N,2,H,W] logits, got {:?}", logits.shape())));
    };
    if c != 2 || target.shape() != [n, h, w] {
        return Err(invalid(format!(
            "loss needs [N,2,H,W] logits and [N,H,W] target, got {:?} and {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    check_binary(target, "target")?;
    let hw = h * w;
    let pixels = n * hw;
    let zd = logits.data();
    let td = target.data();

    let mut probs = vec![T::zero(); zd.len()];
    let mut ce = T::zero();
    let (mut inter, mut psum, mut gsum) = ([T::zero(); 2], [T::zero(); 2], [T::zero(); 2]);
    for b in 0..n {
        for i in 0..hw {
            let (i0, i1) = (b * 2 * hw + i, b * 2 * hw + hw + i);
            let (z0, z1) = (zd[i0], zd[i1]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let (p0, p1) = ((z0 - lse).exp(), (z1 - lse).exp());
            probs[i0] = p0;
            probs[i1] = p1;
            let g1 = td[b * hw + i];
            let g0 = T::one() - g1;
            ce = ce - if g1 == T::one() { z1 - lse } else { z0 - lse };
            inter[0] = inter[0] + p0 * g0;
            inter[1] = inter[1] + p1 * g1;
            psum[0] = psum[0] + p0;
            psum[1] = psum[1] + p1;
            gsum[0] = gsum[0] + g0;
            gsum[1] = gsum[1] + g1;
        }
    }
    let eps = T::c(DICE_EPS);
    let two = T::c(2.0);
    let num = [two * inter[0] + eps, two * inter[1] + eps];
    let den = [psum[0] + gsum[0] + eps, psum[1] + gsum[1] + eps];
    Ok(LossForward {
        probs,
        ce: ce / T::c(pixels as f64),
        dice: T::one() - (num[0] / den[0] + num[1] / den[1]) / two,
        num,
        den,
        n,
        hw,
    })
}

/// The cross-entropy and Dice terms of [`dice_ce_loss`], as plain values.
pub fn loss_terms<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, T)> {
    let f = loss_forward(logits, target)?;
    Ok((f.ce, f.dice))
}

/// Soft Dice plus cross-entropy of two-class `logits: [N,2,H,W]` against a
/// binary `target: [N,H,W]`.
///
/// Cross-entropy is averaged over pixels; Dice is computed over the whole
/// batch per class and averaged over both classes.
pub fn dice_ce_loss<'g, T: Real>(logits: Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
    let LossForward {
        probs,
        ce,
        dice,
        num,
        den,
        n,
        hw,
    } = loss_forward(&logits.value(), target)?;
    let pixels = n * hw;
    let two = T::c(2.0);
    let value = Tensor::scalar(ce + dice);
    let shape = logits.shape();

    let target = target.clone();
    Ok(logits.graph().op(value, &[logits], move |args| {
        let s = args.grad.data()[0];
        let td = target.data();
        let inv_p = T::one() / T::c(pixels as f64);
        let mut gz = vec![T::zero(); probs.len()];
        for b in 0..n {
            for i in 0..hw {
                let (i0, i1) = (b * 2 * hw + i, b * 2 * hw + hw + i);
                let g1 = td[b * hw + i];
                let g = [T::one() - g1, g1];
                let p = [probs[i0], probs[i1]];
                // dDice/dp_c, then through the softmax Jacobian.
                let dp: [T; 2] = std::array::from_fn(|k| -(two * g[k] * den[k] - num[k]) / (den[k] * den[k]) / two);
                let dot = p[0] * dp[0] + p[1] * dp[1];
                for (k, idx) in [i0, i1].into_iter().enumerate() {
                    gz[idx] = s * ((p[k] - g[k]) * inv_p + p[k] * (dp[k] - dot));
                }
            }
        }
        vec![Some(Tensor::new(&shape, gz).expect("shape"))]
    }))
}

/// Nearest-neighbour downsampling of `[N,H,W]` masks by an integer factor,
/// sampling the top-left pixel of each cell.
pub fn downsample_nearest<T: Real>(target: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let &[n, h, w] = target.shape() else {
        return Err(invalid(format!("expected [N,H,W] mask, got {:?}", target.shape())));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!("cannot downsample {h}x{w} by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = target.data();
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                out.push(src[b * h * w + y * factor * w + x * factor]);
            }
        }
    }
    Tensor::new(&[n, oh, ow], out)
}

/// `Σ_k weights[k] · dice_ce_loss(head_k, target_k)` over the full head and
/// the auxiliary heads (`/2, /4, /8`).
pub fn deep_supervision_loss<'g, T: Real>(
    output: &ModelOutput<'g, T>,
    target: &Tensor<T>,
    weights: &[f64; 4],
) -> Result<Var<'g, T>> {
    if output.aux_logits.len() != 3 {
        return Err(invalid(format!("expected 3 auxiliary heads, got {}", output.aux_logits.len())));
    }
    let mut total = dice_ce_loss(output.logits_full, target)?.scale(T::c(weights[0]));
    // aux_logits run coarse → fine, i.e. /8, /4, /2.
    for (k, factor) in [(1usize, 2usize), (2, 4), (3, 8)] {
        let head = output.aux_logits[3 - k];
        let t = downsample_nearest(target, factor)?;
        total = total.add(dice_ce_loss(head, &t)?.scale(T::c(weights[k])))?;
    }
    Ok(total)
}

/// First and second moment buffers, with a step count per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }
}

/// One AdamW update from the gradients accumulated in `store`: decoupled
/// weight decay first, then the bias-corrected Adam step. Frozen parameters
/// and their moments are left untouched.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) {
    let (b1, b2) = (T::c(cfg.betas.0), T::c(cfg.betas.1));
    let lr_t = T::c(lr);
    let decay = T::c(lr * cfg.weight_decay);
    let eps = T::c(ADAM_EPS);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            *x = *x - decay * *x;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x = *x - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `0.5 · lr0 · (1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(invalid(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}

/// Freezes the pretrained-analog parameters while `epoch < freeze_epochs`.
pub fn freeze_policy<T: Real>(epoch: usize, store: &mut ParamStore<T>, freeze_epochs: usize) {
    for p in store.params_mut() {
        p.frozen = p.pretrained_analog && epoch < freeze_epochs;
    }
}

/// Binary confusion counts with the crack class as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SegMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl SegMetrics {
    pub fn pixel_count(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `[background, crack]` IoU; a class absent from both masks scores 1.
    pub fn iou(&self) -> [f64; 2] {
        [
            ratio_or_one(self.tn, self.tn + self.fn_ + self.fp),
            ratio_or_one(self.tp, self.tp + self.fp + self.fn_),
        ]
    }

    pub fn miou(&self) -> f64 {
        let [a, b] = self.iou();
        (a + b) / 2.0
    }

    pub fn f1(&self) -> f64 {
        ratio_or_one(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }

    pub fn merge(&self, other: &SegMetrics) -> SegMetrics {
        SegMetrics {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

pub fn compute_metrics<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<SegMetrics> {
    if pred.shape() != gt.shape() {
        return Err(invalid(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")?;
    let mut m = SegMetrics::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == T::one(), g == T::one()) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

/// Per-pixel class decision of `[N,2,H,W]` logits; ties go to background.
pub fn argmax_mask<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, 2, h, w] = logits.shape() else {
        return Err(invalid(format!("expected [N,2,H,W] logits, got {:?}", logits.shape())));
    };
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for i in 0..hw {
            let crack = d[b * 2 * hw + hw + i] > d[b * 2 * hw + i];
            out.push(if crack { T::one() } else { T::zero() });
        }
    }
    Tensor::new(&[n, h, w], out)
}

/// Stacks samples into `[B,3,H,W]` images and `[B,H,W]` masks.
pub fn stack_batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let (ishape, mshape) = (first.image.shape().to_vec(), first.mask.shape().to_vec());
    let mut images = Vec::with_capacity(samples.len() * first.image.len());
    let mut masks = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != ishape.as_slice() || s.mask.shape() != mshape.as_slice() {
            return Err(invalid(format!("sample `{}` differs in size from `{}`", s.id, first.id)));
        }
        images.extend(s.image.data().iter().map(|&v| T::c(v as f64)));
        masks.extend(s.mask.data().iter().map(|&v| T::c(v as f64)));
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, ishape[0], ishape[1], ishape[2]], images)?,
        Tensor::new(&[b, mshape[0], mshape[1]], masks)?,
    ))
}

/// Predicted binary masks for `images: [N,3,H,W]` in evaluation mode.
pub fn predict_masks<T: Real>(model: &Model<T>, images: Tensor<T>) -> Result<Tensor<T>> {
    argmax_mask(&model.predict_logits(images)?)
}

/// Confusion counts over `samples`, one image per forward pass. With
/// `threads > 1` images are split into contiguous shards whose counts are
/// merged in shard order.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], threads: usize) -> Result<SegMetrics> {
    let eval_shard = |shard: &[Sample]| -> Result<SegMetrics> {
        let mut total = SegMetrics::default();
        for s in shard {
            let (img, mask) = stack_batch::<T>(&[s])?;
            let pred = predict_masks(model, img)?;
            total = total.merge(&compute_metrics(&pred, &mask)?);
        }
        Ok(total)
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return eval_shard(samples);
    }
    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<SegMetrics>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|shard| scope.spawn(move || eval_shard(shard)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut total = SegMetrics::default();
    for r in results {
        total = total.merge(&r?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_f1: f64,
}

impl EpochRecord {
    /// `epoch  lr  train_loss  val_miou  val_f1`, tab-separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.8}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_miou, self.val_f1
        )
    }
}

pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// Epoch with the highest validation mIoU (earliest on ties).
    pub best_epoch: usize,
    /// Parameters as they were at the end of `best_epoch`.
    pub best_params: ParamStore<T>,
}

/// Runs `cfg.epochs` epochs of minibatch AdamW with deep supervision.
///
/// Each epoch shuffles the training samples, freezes the pretrained-analog
/// parameters inside the freeze window, follows the cosine schedule and then
/// scores `val` (the training set itself when `val` is empty). One log line
/// per epoch goes to `log`. The model ends holding its last-epoch weights.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    threads: usize,
    log: &mut dyn Write,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let val = if val.is_empty() { train_set } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        freeze_policy(epoch, &mut model.params, cfg.freeze_epochs);
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack_batch::<T>(&samples)?;
            let g = Graph::new();
            let bound = model.params.bind(&g);
            let out = model.forward(g.constant(images), &bound, true, &mut rng)?;
            let loss = deep_supervision_loss(&out, &masks, &cfg.ds_weights)?;
            let value = loss.value().data()[0].to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NumericFault {
                    location: "loss".into(),
                    step: Some(step),
                });
            }
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&bound, &grads);
            adamw_step(&mut model.params, &mut state, lr, cfg);
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let metrics = evaluate(model, val, threads)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_miou: metrics.miou(),
            val_f1: metrics.f1(),
        };
        writeln!(log, "{}", record.log_line())?;
        if best.as_ref().map_or(true, |(m, _, _)| record.val_miou > *m) {
            best = Some((record.val_miou, epoch, model.params.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_params,
    })
}
