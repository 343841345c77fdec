//! Training: truncated-nowhere backpropagation through time over full
//! sequences, binary cross-entropy loss, and a hand-rolled Adam optimizer
//! with stepwise learning-rate decay.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, AssociationSample, GruModel};
use crate::error::{Error, Result};
use crate::parallel;

/// Predicted probabilities are clamped to `[EPS, 1-EPS]` inside the loss so
/// saturated outputs cannot produce infinite cross-entropy.
const LOSS_CLAMP: f64 = 1e-7;

/// Samples per accumulation chunk. Chunks are summed in index order, so the
/// result is bit-identical no matter how many threads map over them.
const GRAD_CHUNK: usize = 16;

/// Gradients with the same shapes as [`GruModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GruGradients {
    pub(crate) w_r: DMatrix<f64>,
    pub(crate) w_z: DMatrix<f64>,
    pub(crate) w_h: DMatrix<f64>,
    pub(crate) b_r: DVector<f64>,
    pub(crate) b_z: DVector<f64>,
    pub(crate) b_h: DVector<f64>,
    pub(crate) w_o: DMatrix<f64>,
    pub(crate) b_o: DVector<f64>,
}

impl GruGradients {
    pub fn zeros_like(model: &GruModel) -> Self {
        let concat = model.hidden_size + model.input_size;
        GruGradients {
            w_r: DMatrix::zeros(model.hidden_size, concat),
            w_z: DMatrix::zeros(model.hidden_size, concat),
            w_h: DMatrix::zeros(model.hidden_size, concat),
            b_r: DVector::zeros(model.hidden_size),
            b_z: DVector::zeros(model.hidden_size),
            b_h: DVector::zeros(model.hidden_size),
            w_o: DMatrix::zeros(1, model.hidden_size),
            b_o: DVector::zeros(1),
        }
    }

    /// Flat views in the same fixed order as [`GruModel::parameters`].
    pub fn parameters(&self) -> [&[f64]; 8] {
        [
            self.w_r.as_slice(),
            self.w_z.as_slice(),
            self.w_h.as_slice(),
            self.b_r.as_slice(),
            self.b_z.as_slice(),
            self.b_h.as_slice(),
            self.w_o.as_slice(),
            self.b_o.as_slice(),
        ]
    }

    fn parameters_mut(&mut self) -> [&mut [f64]; 8] {
        let GruGradients {
            w_r,
            w_z,
            w_h,
            b_r,
            b_z,
            b_h,
            w_o,
            b_o,
        } = self;
        [
            w_r.as_mut_slice(),
            w_z.as_mut_slice(),
            w_h.as_mut_slice(),
            b_r.as_mut_slice(),
            b_z.as_mut_slice(),
            b_h.as_mut_slice(),
            w_o.as_mut_slice(),
            b_o.as_mut_slice(),
        ]
    }

    fn add(&mut self, other: &GruGradients) {
        for (mine, theirs) in self.parameters_mut().into_iter().zip(other.parameters()) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for tensor in self.parameters_mut() {
            for v in tensor {
                *v *= factor;
            }
        }
    }

    /// Largest absolute gradient component.
    pub fn max_abs(&self) -> f64 {
        self.parameters()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// A sample converted to raw vectors once, so epochs don't re-concatenate
/// features.
#[derive(Debug, Clone)]
pub(crate) struct VectorSample {
    pub inputs: Vec<DVector<f64>>,
    pub target: f64,
}

pub(crate) fn prepare_samples(
    model: &GruModel,
    samples: &[AssociationSample],
) -> Result<Vec<VectorSample>> {
    samples
        .iter()
        .map(|s| {
            let inputs: Vec<DVector<f64>> =
                s.sequence.iter().map(super::PairFeature::to_vector).collect();
            for x in &inputs {
                model.check_input(x)?;
            }
            Ok(VectorSample {
                inputs,
                target: if s.label { 1.0 } else { 0.0 },
            })
        })
        .collect()
}

/// Everything the backward pass needs from one forward run.
struct Trace {
    // Per step: concatenated [h_{t-1}; x_t], gates, candidate, and h_t.
    us: Vec<DVector<f64>>,
    rs: Vec<DVector<f64>>,
    zs: Vec<DVector<f64>>,
    cs: Vec<DVector<f64>>,
    hs: Vec<DVector<f64>>,
    y: f64,
}

fn forward_trace(model: &GruModel, inputs: &[DVector<f64>]) -> Trace {
    let hidden = model.hidden_size;
    let input = model.input_size;
    let steps = inputs.len();
    let mut trace = Trace {
        us: Vec::with_capacity(steps),
        rs: Vec::with_capacity(steps),
        zs: Vec::with_capacity(steps),
        cs: Vec::with_capacity(steps),
        hs: Vec::with_capacity(steps),
        y: 0.0,
    };
    let mut h = DVector::zeros(hidden);
    for x in inputs {
        let mut u = DVector::zeros(hidden + input);
        u.rows_mut(0, hidden).copy_from(&h);
        u.rows_mut(hidden, input).copy_from(x);

        let mut r = &model.w_r * &u + &model.b_r;
        r.apply(|a| *a = sigmoid(*a));
        let mut z = &model.w_z * &u + &model.b_z;
        z.apply(|a| *a = sigmoid(*a));

        // v_t = [r * h; x] is recoverable from u and r, so it is not stored.
        let mut v = DVector::zeros(hidden + input);
        v.rows_mut(0, hidden).copy_from(&r.component_mul(&h));
        v.rows_mut(hidden, input).copy_from(x);

        let mut c = &model.w_h * &v + &model.b_h;
        c.apply(|a| *a = a.tanh());

        let mut next = DVector::zeros(hidden);
        for i in 0..hidden {
            next[i] = (1.0 - z[i]) * h[i] + z[i] * c[i];
        }

        trace.us.push(u);
        trace.rs.push(r);
        trace.zs.push(z);
        trace.cs.push(c);
        trace.hs.push(next.clone());
        h = next;
    }
    trace.y = model.output(&h);
    trace
}

/// Binary cross-entropy of one prediction against its 0/1 target.
fn bce(y: f64, target: f64) -> f64 {
    let y = y.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    -(target * y.ln() + (1.0 - target) * (1.0 - y).ln())
}

/// Backpropagation through the whole sequence, accumulating into `grads`.
/// Returns the sample loss.
fn backward(model: &GruModel, trace: &Trace, target: f64, grads: &mut GruGradients) -> f64 {
    let hidden = model.hidden_size;
    let input = model.input_size;
    let steps = trace.hs.len();
    let loss = bce(trace.y, target);

    // d loss / d a_o for y = sigmoid(a_o): zero where the clamp is active,
    // otherwise the usual y - t.
    let da_o = if trace.y <= LOSS_CLAMP || trace.y >= 1.0 - LOSS_CLAMP {
        0.0
    } else {
        trace.y - target
    };

    let h_last = &trace.hs[steps - 1];
    grads.w_o.ger(da_o, &DVector::from_element(1, 1.0), h_last, 1.0);
    grads.b_o[0] += da_o;

    let mut dh = model.w_o.tr_mul(&DVector::from_element(1, da_o));

    for t in (0..steps).rev() {
        let h_prev_owned;
        let h_prev: &DVector<f64> = if t == 0 {
            h_prev_owned = DVector::zeros(hidden);
            &h_prev_owned
        } else {
            &trace.hs[t - 1]
        };
        let (u, r, z, c) = (&trace.us[t], &trace.rs[t], &trace.zs[t], &trace.cs[t]);

        // h_t = (1 - z) * h_{t-1} + z * c
        let mut da_z = DVector::zeros(hidden);
        let mut da_h = DVector::zeros(hidden);
        for i in 0..hidden {
            let dz = dh[i] * (c[i] - h_prev[i]);
            da_z[i] = dz * z[i] * (1.0 - z[i]);
            let dc = dh[i] * z[i];
            da_h[i] = dc * (1.0 - c[i] * c[i]);
        }

        // v_t = [r * h_{t-1}; x_t]
        let mut v = DVector::zeros(hidden + input);
        v.rows_mut(0, hidden).copy_from(&r.component_mul(h_prev));
        v.rows_mut(hidden, input)
            .copy_from(&u.rows(hidden, input));

        grads.w_h.ger(1.0, &da_h, &v, 1.0);
        grads.b_h += &da_h;

        let dv = model.w_h.tr_mul(&da_h);
        let mut da_r = DVector::zeros(hidden);
        for i in 0..hidden {
            let dr = dv[i] * h_prev[i];
            da_r[i] = dr * r[i] * (1.0 - r[i]);
        }

        grads.w_r.ger(1.0, &da_r, u, 1.0);
        grads.b_r += &da_r;
        grads.w_z.ger(1.0, &da_z, u, 1.0);
        grads.b_z += &da_z;

        let du = model.w_r.tr_mul(&da_r) + model.w_z.tr_mul(&da_z);

        let mut dh_prev = DVector::zeros(hidden);
        for i in 0..hidden {
            dh_prev[i] = dh[i] * (1.0 - z[i]) + dv[i] * r[i] + du[i];
        }
        dh = dh_prev;
    }
    loss
}

/// Mean loss and mean gradients over a batch.
pub fn loss_and_grads(
    model: &GruModel,
    batch: &[AssociationSample],
) -> Result<(f64, GruGradients)> {
    if batch.is_empty() {
        return Err(Error::input("gru training", "empty batch"));
    }
    let prepared = prepare_samples(model, batch)?;
    Ok(loss_and_grads_prepared(model, &prepared))
}

pub(crate) fn loss_and_grads_prepared(
    model: &GruModel,
    batch: &[VectorSample],
) -> (f64, GruGradients) {
    let chunks: Vec<&[VectorSample]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = parallel::map_slice(&chunks, |chunk| {
        let mut grads = GruGradients::zeros_like(model);
        let mut loss = 0.0;
        for sample in *chunk {
            let trace = forward_trace(model, &sample.inputs);
            loss += backward(model, &trace, sample.target, &mut grads);
        }
        (loss, grads)
    });
    let mut total_loss = 0.0;
    let mut grads = GruGradients::zeros_like(model);
    for (loss, partial) in &partials {
        total_loss += loss;
        grads.add(partial);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    (total_loss * inv, grads)
}

/// Mean loss of a batch without gradients.
pub fn batch_loss(model: &GruModel, batch: &[AssociationSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("gru training", "empty batch"));
    }
    let prepared = prepare_samples(model, batch)?;
    Ok(batch_loss_prepared(model, &prepared))
}

fn batch_loss_prepared(model: &GruModel, batch: &[VectorSample]) -> f64 {
    let losses = parallel::map_slice(batch, |sample| {
        let trace = forward_trace(model, &sample.inputs);
        bce(trace.y, sample.target)
    });
    losses.iter().sum::<f64>() / batch.len() as f64
}

/// Scores a batch of samples; order matches the input.
pub fn batch_similarities(model: &GruModel, samples: &[AssociationSample]) -> Result<Vec<f64>> {
    let prepared = prepare_samples(model, samples)?;
    Ok(parallel::map_slice(&prepared, |sample| {
        forward_trace(model, &sample.inputs).y
    }))
}

/// Adam hyperparameters, with stepwise learning-rate decay driven by the
/// epoch counter.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiply the learning rate by `decay_rate` every
    /// `decay_every_epochs` epochs.
    pub decay_rate: f64,
    pub decay_every_epochs: u32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.1,
            decay_every_epochs: 20,
        }
    }
}

/// Optimizer state: first and second moment estimates over the flattened
/// parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    epoch: u32,
}

impl AdamState {
    pub fn new(model: &GruModel, config: AdamConfig) -> Self {
        let n = model.parameter_count();
        AdamState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            epoch: 0,
        }
    }

    /// Sets the epoch used for learning-rate decay.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate after decay:
    /// `lr * decay_rate^floor(epoch / decay_every_epochs)`.
    pub fn effective_learning_rate(&self) -> f64 {
        let periods = if self.config.decay_every_epochs == 0 {
            0
        } else {
            self.epoch / self.config.decay_every_epochs
        };
        self.config.learning_rate * self.config.decay_rate.powi(periods as i32)
    }
}

/// One Adam update with bias correction.
pub fn adam_step(model: &mut GruModel, grads: &GruGradients, state: &mut AdamState) {
    assert_eq!(
        state.m.len(),
        model.parameter_count(),
        "optimizer state does not match the model"
    );
    state.step += 1;
    let cfg = &state.config;
    let lr = state.effective_learning_rate();
    let bias1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let mut offset = 0;
    for (params, grad) in model.parameters_mut().into_iter().zip(grads.parameters()) {
        for (p, g) in params.iter_mut().zip(grad) {
            let m = &mut state.m[offset];
            let v = &mut state.v[offset];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            offset += 1;
        }
    }
}

/// Knobs for [`train`] beyond the optimizer itself.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: u32,
    pub batch_size: usize,
    /// Seed for the shuffle and the validation split.
    pub seed: u64,
    /// Fraction of samples held out for validation statistics; zero
    /// disables the split.
    pub validation_fraction: f64,
    /// Stop once the validation AUC reaches this value.
    pub early_stop_auc: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 64,
            seed: 0,
            validation_fraction: 0.1,
            early_stop_auc: None,
        }
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: u32,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Best validation AUC seen, if validation ran.
    pub fn best_auc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.validation_auc)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Minibatch training loop: shuffles with a seeded generator, walks
/// minibatches, applies Adam after each, and tracks a held-out validation
/// split. Fails if the loss stops being finite.
pub fn train(
    model: &mut GruModel,
    samples: &[AssociationSample],
    adam: &mut AdamState,
    options: &TrainOptions,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::input("gru training", "no samples"));
    }
    if options.batch_size == 0 {
        return Err(Error::input("gru training", "batch size must be positive"));
    }
    if !(0.0..1.0).contains(&options.validation_fraction) {
        return Err(Error::input(
            "gru training",
            format!("validation fraction {} outside [0, 1)", options.validation_fraction),
        ));
    }
    let prepared = prepare_samples(model, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut indices: Vec<usize> = (0..prepared.len()).collect();
    indices.shuffle(&mut rng);
    let val_count = (prepared.len() as f64 * options.validation_fraction).round() as usize;
    let (val_idx, train_idx) = indices.split_at(val_count);
    let validation: Vec<VectorSample> = val_idx.iter().map(|&i| prepared[i].clone()).collect();
    let mut training: Vec<VectorSample> = train_idx.iter().map(|&i| prepared[i].clone()).collect();
    if training.is_empty() {
        return Err(Error::input(
            "gru training",
            "validation split leaves no training samples",
        ));
    }

    let mut order: Vec<usize> = (0..training.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..options.epochs {
        adam.set_epoch(epoch);
        order.shuffle(&mut rng);
        // Reorder in place so batches are contiguous slices.
        let shuffled: Vec<VectorSample> = order.iter().map(|&i| training[i].clone()).collect();
        training = shuffled;

        let mut weighted_loss = 0.0;
        for batch in training.chunks(options.batch_size) {
            let (loss, grads) = loss_and_grads_prepared(model, batch);
            adam_step(model, &grads, adam);
            weighted_loss += loss * batch.len() as f64;
        }
        let train_loss = weighted_loss / training.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::numerical(format!(
                "training diverged at epoch {epoch}: loss {train_loss}"
            )));
        }

        let (validation_loss, validation_auc) = if validation.is_empty() {
            (None, None)
        } else {
            let scores = parallel::map_slice(&validation, |s| {
                (forward_trace(model, &s.inputs).y, s.target > 0.5)
            });
            let loss = batch_loss_prepared(model, &validation);
            (Some(loss), Some(auc(&scores)))
        };

        report.epochs.push(EpochStats {
            epoch,
            learning_rate: adam.effective_learning_rate(),
            train_loss,
            validation_loss,
            validation_auc,
        });

        if let (Some(target), Some(reached)) = (options.early_stop_auc, validation_auc) {
            if reached >= target {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Area under the ROC curve by rank statistic, with midranks for ties.
/// Returns `NaN` when either class is absent.
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let positives = scored.iter().filter(|(_, label)| *label).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scored[idx].1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::EmbeddingSynthesizer;
    use crate::gru::PairFeature;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Sequences whose history comes from one of a small pool of
    /// identities; positives end with a matching candidate moving smoothly,
    /// negatives with another pool member that jumps. Mirrors what mining
    /// produces, separably.
    fn toy_batch(count: usize, seed: u64) -> Vec<AssociationSample> {
        let synth = EmbeddingSynthesizer::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        (0..count)
            .map(|i| {
                let label = i % 2 == 0;
                let id = (i % 10) as u64;
                let stranger = (id + 1 + (i as u64 / 10) % 9) % 10;
                let len = 2 + (i % 3);
                let base_u = rng.random_range(0.2..0.8);
                let base_v = rng.random_range(0.2..0.8);
                let seq: Vec<PairFeature> = (0..len)
                    .map(|j| {
                        let mismatched = j == len - 1 && !label;
                        let emb_id = if mismatched { stranger } else { id };
                        let du = if mismatched { 0.25 } else { 0.005 };
                        let spatial = [
                            base_u + j as f64 * 0.005,
                            base_v,
                            0.05,
                            0.12,
                            du,
                            0.0,
                        ];
                        PairFeature::new(
                            synth.draw(emb_id, (i * 10 + j) as u64, 0.03),
                            spatial,
                        )
                        .unwrap()
                    })
                    .collect();
                AssociationSample::new(seq, label).unwrap()
            })
            .collect()
    }

    /// Central finite differences over every parameter of a small model.
    fn finite_difference_check(hidden: usize, input: usize, seq_len: usize, tol: f64) {
        let mut model = GruModel::new(hidden, input, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let samples: Vec<VectorSample> = (0..4)
            .map(|i| VectorSample {
                inputs: (0..seq_len)
                    .map(|_| DVector::from_fn(input, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
                target: if i % 2 == 0 { 1.0 } else { 0.0 },
            })
            .collect();
        let (_, grads) = loss_and_grads_prepared(&model, &samples);

        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for tensor_idx in 0..8 {
            for param_idx in 0..grads.parameters()[tensor_idx].len() {
                let original = model.parameters()[tensor_idx][param_idx];
                model.parameters_mut()[tensor_idx][param_idx] = original + step;
                let plus = batch_loss_prepared(&model, &samples);
                model.parameters_mut()[tensor_idx][param_idx] = original - step;
                let minus = batch_loss_prepared(&model, &samples);
                model.parameters_mut()[tensor_idx][param_idx] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads.parameters()[tensor_idx][param_idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                max_rel = max_rel.max((numeric - analytic).abs() / denom);
            }
        }
        assert!(max_rel < tol, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(4, 3, 2, 1e-4);
    }

    #[test]
    fn batch_gradients_are_mean_of_singles() {
        let model = GruModel::new(6, super::super::PAIR_FEATURE_DIM, 8);
        let batch = toy_batch(20, 9);
        let (batch_loss_val, batch_grads) = loss_and_grads(&model, &batch).unwrap();

        let mut sum_loss = 0.0;
        let mut sum = GruGradients::zeros_like(&model);
        for sample in &batch {
            let (loss, grads) = loss_and_grads(&model, std::slice::from_ref(sample)).unwrap();
            sum_loss += loss;
            sum.add(&grads);
        }
        let n = batch.len() as f64;
        assert_relative_eq!(batch_loss_val, sum_loss / n, max_relative = 1e-12);
        for (a, b) in batch_grads.parameters().into_iter().zip(sum.parameters()) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(*x, y / n, max_relative = 1e-9, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut model = GruModel::zeros(3, 2);
        let mut grads = GruGradients::zeros_like(&model);
        grads.w_r[(0, 0)] = 2.0;
        grads.w_r[(1, 1)] = -0.5;
        let mut adam = AdamState::new(&model, AdamConfig::default());
        adam_step(&mut model, &grads, &mut adam);
        // After bias correction the first step is lr * g / (|g| + eps).
        let lr = 0.002;
        assert_relative_eq!(
            model.w_r[(0, 0)],
            -lr * 2.0 / (2.0 + 1e-8),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            model.w_r[(1, 1)],
            lr * 0.5 / (0.5 + 1e-8),
            max_relative = 1e-12
        );
        // Untouched parameters stay put.
        assert_eq!(model.w_z[(0, 0)], 0.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn learning_rate_decays_every_twenty_epochs() {
        let model = GruModel::zeros(2, 2);
        let mut adam = AdamState::new(&model, AdamConfig::default());
        let expectations = [
            (0, 0.002),
            (19, 0.002),
            (20, 0.002 * 0.1),
            (39, 0.002 * 0.1),
            (40, 0.002 * 0.01),
        ];
        for (epoch, lr) in expectations {
            adam.set_epoch(epoch);
            assert_relative_eq!(adam.effective_learning_rate(), lr, max_relative = 1e-12);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_bit_reproducible() {
        let run = || {
            let mut model = GruModel::new(16, super::super::PAIR_FEATURE_DIM, 5);
            let samples = toy_batch(80, 17);
            let mut adam = AdamState::new(&model, AdamConfig::default());
            let options = TrainOptions {
                epochs: 4,
                batch_size: 16,
                seed: 3,
                validation_fraction: 0.2,
                early_stop_auc: None,
            };
            let report = train(&mut model, &samples, &mut adam, &options).unwrap();
            (model, report)
        };
        let (model_a, report_a) = run();
        let (model_b, report_b) = run();
        assert_eq!(model_a, model_b);
        let losses_a: Vec<f64> = report_a.epochs.iter().map(|e| e.train_loss).collect();
        let losses_b: Vec<f64> = report_b.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(losses_a, losses_b);
        assert!(
            losses_a.last().unwrap() < losses_a.first().unwrap(),
            "loss should drop: {losses_a:?}"
        );
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut model = GruModel::new(8, super::super::PAIR_FEATURE_DIM, 2);
        let snapshot = model.clone();
        let samples = toy_batch(10, 1);
        let mut adam = AdamState::new(&model, AdamConfig::default());
        let options = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let report = train(&mut model, &samples, &mut adam, &options).unwrap();
        assert_eq!(model, snapshot);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn corrupted_model_fails_as_divergence() {
        let mut model = GruModel::new(4, super::super::PAIR_FEATURE_DIM, 2);
        model.parameters_mut()[0][0] = f64::NAN;
        let samples = toy_batch(8, 1);
        let mut adam = AdamState::new(&model, AdamConfig::default());
        let options = TrainOptions {
            epochs: 1,
            validation_fraction: 0.0,
            ..TrainOptions::default()
        };
        let err = train(&mut model, &samples, &mut adam, &options).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn early_stopping_fires_on_separable_data() {
        let mut model = GruModel::new(16, super::super::PAIR_FEATURE_DIM, 6);
        let samples = toy_batch(120, 23);
        let mut adam = AdamState::new(&model, AdamConfig::default());
        let options = TrainOptions {
            epochs: 30,
            batch_size: 16,
            seed: 4,
            validation_fraction: 0.25,
            early_stop_auc: Some(0.9),
        };
        let report = train(&mut model, &samples, &mut adam, &options).unwrap();
        assert!(report.stopped_early);
        assert!((report.epochs.len() as u32) < 30);
        assert!(report.best_auc().unwrap() >= 0.9);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20 {
            let scored: Vec<(f64, bool)> = (0..40)
                .map(|_| {
                    // A coarse grid forces ties.
                    let score = (rng.random_range(0..8) as f64) / 8.0;
                    (score, rng.random_range(0..2) == 1)
                })
                .collect();
            let pos: Vec<f64> = scored.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
            let neg: Vec<f64> = scored.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
            if pos.is_empty() || neg.is_empty() {
                assert!(auc(&scored).is_nan());
                continue;
            }
            let mut wins = 0.0;
            for p in &pos {
                for n in &neg {
                    if p > n {
                        wins += 1.0;
                    } else if p == n {
                        wins += 0.5;
                    }
                }
            }
            let expected = wins / (pos.len() * neg.len()) as f64;
            assert_relative_eq!(auc(&scored), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn auc_extremes() {
        let perfect: Vec<(f64, bool)> = (0..10)
            .map(|i| (i as f64 / 10.0, i >= 5))
            .collect();
        assert_eq!(auc(&perfect), 1.0);
        let inverted: Vec<(f64, bool)> = (0..10)
            .map(|i| (i as f64 / 10.0, i < 5))
            .collect();
        assert_eq!(auc(&inverted), 0.0);
    }

    #[test]
    fn batch_similarities_match_forward() {
        let model = GruModel::new(12, super::super::PAIR_FEATURE_DIM, 3);
        let samples = toy_batch(15, 2);
        let scores = batch_similarities(&model, &samples).unwrap();
        for (sample, score) in samples.iter().zip(&scores) {
            assert_eq!(model.score_features(&sample.sequence).unwrap(), *score);
        }
    }
}
