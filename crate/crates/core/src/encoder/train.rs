use rand::seq::SliceRandom;

use super::model::{EncoderModel, EncoderParams};
use super::types::{DistributionGrid, ViewObservation};
use super::EncoderError;
use crate::codec::{CodecModel, TokenGrid};
use crate::geometry::TsdfGrid;
use crate::nn::{sgd_step, NodeId, OptimizerState, Tape, Tensor};
use crate::scalar::Scalar;
use crate::util::rng_stream;

/// One supervised view: the observation plus ground-truth tokens computed
/// by the frozen codecs.
#[derive(Clone, Debug)]
pub struct EncoderSample {
    pub obs: ViewObservation,
    pub tokens_hand: TokenGrid,
    pub tokens_object: TokenGrid,
}

/// Build training samples by tokenizing ground-truth grids with the
/// trained codecs.
pub fn make_samples<T: Scalar>(
    views: Vec<(ViewObservation, &TsdfGrid<T>, &TsdfGrid<T>)>,
    codec_hand: &CodecModel<T>,
    codec_object: &CodecModel<T>,
) -> Result<Vec<EncoderSample>, EncoderError> {
    let mut out = Vec::with_capacity(views.len());
    for (obs, gt_hand, gt_object) in views {
        let (_, tokens_hand) = codec_hand.encode(gt_hand)?;
        let (_, tokens_object) = codec_object.encode(gt_object)?;
        out.push(EncoderSample {
            obs,
            tokens_hand,
            tokens_object,
        });
    }
    Ok(out)
}

/// Weighted cross-entropy over one-hot ground truth, averaged over tokens:
/// -mean_v w(c_gt) ln p(c_gt). Probabilities below eps=1e-12 clamp and are
/// counted as saturations.
pub fn weighted_ce_loss(
    p: &DistributionGrid,
    gt: &TokenGrid,
    w_empty: f64,
    w_other: f64,
    empty_token: Option<u32>,
) -> Result<(f64, usize), EncoderError> {
    let n = p.tokens();
    if gt.indices().len() != n {
        return Err(EncoderError::DimensionMismatch(format!(
            "distribution has {n} tokens, ground truth {}",
            gt.indices().len()
        )));
    }
    if let Some(&bad) = gt.indices().iter().find(|&&i| i as usize >= p.classes()) {
        return Err(EncoderError::DimensionMismatch(format!(
            "gt token {bad} out of range {}",
            p.classes()
        )));
    }
    const EPS: f64 = 1e-12;
    let mut loss = 0.0;
    let mut saturations = 0usize;
    for (v, &c) in gt.indices().iter().enumerate() {
        let w = if Some(c) == empty_token { w_empty } else { w_other };
        let mut pv = p.row(v)[c as usize];
        if pv < EPS {
            pv = EPS;
            saturations += 1;
        }
        loss -= w * pv.ln();
    }
    Ok((loss / n as f64, saturations))
}

/// Fraction bookkeeping for the training-fit check: correct and total
/// counts over non-empty ground-truth tokens.
pub fn argmax_accuracy(
    pred: &DistributionGrid,
    gt: &TokenGrid,
    empty_token: Option<u32>,
) -> (usize, usize) {
    let arg = pred.argmax_tokens();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (v, &c) in gt.indices().iter().enumerate() {
        if Some(c) == empty_token {
            continue;
        }
        total += 1;
        if arg[v] == c {
            correct += 1;
        }
    }
    (correct, total)
}

#[derive(Clone, Debug)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_drop_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.5,
            momentum: 0.9,
            lr_drop_epoch: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderTrainReport {
    /// Mean weighted CE (hand + object) per epoch.
    pub epochs: Vec<f64>,
    /// Log-clamp events observed during training.
    pub saturations: usize,
}

/// Weight-mask tensor [C, n] selecting w(c_gt) at the ground-truth row of
/// each token column.
fn weight_mask<T: Scalar>(
    classes: usize,
    gt: &TokenGrid,
    w_empty: f64,
    w_other: f64,
    empty_token: Option<u32>,
) -> Tensor<T> {
    let n = gt.indices().len();
    let mut data = vec![T::zero(); classes * n];
    for (v, &c) in gt.indices().iter().enumerate() {
        let w = if Some(c) == empty_token { w_empty } else { w_other };
        data[c as usize * n + v] = T::of(w);
    }
    Tensor::new(&[classes, n], data).expect("weight mask")
}

/// Train the image-to-token encoder against frozen codecs. The codecs are
/// only read (for the empty-space indices); their parameters are never
/// registered on any tape.
pub fn train_encoder<T: Scalar>(
    samples: &[EncoderSample],
    codec_hand: &CodecModel<T>,
    codec_object: &CodecModel<T>,
    params: EncoderParams,
    cfg: &EncoderTrainConfig,
) -> Result<(EncoderModel<T>, EncoderTrainReport), EncoderError> {
    if samples.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    let d = params.token_res;
    for s in samples {
        if s.tokens_hand.resolution() != d || s.tokens_object.resolution() != d {
            return Err(EncoderError::DimensionMismatch(format!(
                "token grids must be {d}^3"
            )));
        }
    }
    let mut model = EncoderModel::init(params, &mut rng_stream(cfg.seed, 0))?;
    model.empty_token_hand = codec_hand.empty_token;
    model.empty_token_object = codec_object.empty_token;

    let shapes: Vec<Vec<usize>> = {
        let mut s = model.trunk.param_shapes();
        s.extend(model.head_hand.param_shapes());
        s.extend(model.head_object.param_shapes());
        s
    };
    let mut opt = OptimizerState::new(T::of(cfg.learning_rate), T::of(cfg.momentum), &shapes);
    let mut order_rng = rng_stream(cfg.seed, 1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut saturations = 0usize;

    let n_tokens = d * d * d;
    for epoch in 0..cfg.epochs {
        if let Some(drop) = cfg.lr_drop_epoch {
            if epoch == drop {
                opt.learning_rate = T::of(cfg.learning_rate * 0.1);
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);

        let mut epoch_loss = 0.0f64;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &si in batch {
                let sample = &samples[si];
                let mut tape = Tape::new();
                let ids = model.register(&mut tape, true);
                let (ph, po) = model.forward_on_tape(&mut tape, &ids, &sample.obs)?;

                let ce = |tape: &mut Tape<T>,
                          probs: NodeId,
                          gt: &TokenGrid,
                          empty: Option<u32>|
                 -> Result<NodeId, EncoderError> {
                    let flat = tape.reshape(probs, &[params.classes, n_tokens])?;
                    let logp = tape.log(flat, T::of(1e-12));
                    let mask = tape.constant(weight_mask(
                        params.classes,
                        gt,
                        params.w_empty,
                        params.w_other,
                        empty,
                    ));
                    let weighted = tape.mul(logp, mask)?;
                    let total = tape.sum(weighted);
                    Ok(tape.scale(total, -T::one() / T::of(n_tokens as f64)))
                };
                let ce_h = ce(&mut tape, ph, &sample.tokens_hand, model.empty_token_hand)?;
                let ce_o = ce(&mut tape, po, &sample.tokens_object, model.empty_token_object)?;
                let loss = tape.add(ce_h, ce_o)?;

                let loss_v = tape.value(loss).item()?.as_f64();
                if !loss_v.is_finite() {
                    return Err(EncoderError::NonFiniteLoss { epoch, step });
                }
                epoch_loss += loss_v;
                saturations += tape.log_saturations;

                let mut grads = tape.backward(loss)?;
                let mut ordered: Vec<NodeId> = Vec::new();
                for group in ids
                    .trunk
                    .iter()
                    .chain(ids.head_hand.iter())
                    .chain(ids.head_object.iter())
                {
                    ordered.extend(group.iter().copied());
                }
                let sample_grads: Vec<Tensor<T>> = ordered
                    .iter()
                    .map(|&id| {
                        grads
                            .take(id)
                            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
                    })
                    .collect();
                match &mut acc {
                    None => acc = Some(sample_grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(sample_grads.iter()) {
                            for (av, &gv) in a.data_mut().iter_mut().zip(g.data().iter()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut acc = acc.expect("non-empty batch");
            let scale = T::one() / T::of(batch.len() as f64);
            for g in &mut acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let mut params_mut: Vec<&mut Tensor<T>> = model.trunk.params_mut();
            params_mut.extend(model.head_hand.params_mut());
            params_mut.extend(model.head_object.params_mut());
            let grad_refs: Vec<&Tensor<T>> = acc.iter().collect();
            sgd_step(&mut params_mut, &grad_refs, &mut opt)?;
        }
        epochs.push(epoch_loss / samples.len() as f64);
    }

    Ok((
        model,
        EncoderTrainReport {
            epochs,
            saturations,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_grid(d: usize, c: usize) -> DistributionGrid {
        DistributionGrid::uniform(d, c)
    }

    fn const_tokens(d: usize, v: u32, c: usize) -> TokenGrid {
        TokenGrid::new(d, vec![v; d * d * d], c).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let d = 2;
        let c = 4;
        let gt = const_tokens(d, 1, c);
        let mut probs = vec![0.0f64; d * d * d * c];
        for row in probs.chunks_exact_mut(c) {
            row[1] = 1.0;
        }
        let p = DistributionGrid::new(d, c, probs).unwrap();
        let (loss, sat) = weighted_ce_loss(&p, &gt, 0.25, 0.75, None).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(sat, 0);
    }

    #[test]
    fn uniform_prediction_matches_closed_form() {
        let d = 2;
        let c = 16;
        let p = uniform_grid(d, c);
        let gt = const_tokens(d, 3, c);
        // all non-empty gt: loss = 0.75 ln C
        let (loss, _) = weighted_ce_loss(&p, &gt, 0.25, 0.75, Some(7)).unwrap();
        assert!((loss - 0.75 * (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixed_empty_nonempty_matches_scalar_loop() {
        use rand::Rng;
        let mut rng = rng_stream(5, 2);
        let d = 2;
        let c = 8;
        let n = d * d * d;
        let mut probs = vec![0.0f64; n * c];
        for row in probs.chunks_exact_mut(c) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = rng.gen_range(0.01..1.0);
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let p = DistributionGrid::new(d, c, probs.clone()).unwrap();
        let gt_idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let gt = TokenGrid::new(d, gt_idx.clone(), c).unwrap();
        let empty = Some(2u32);
        let (loss, _) = weighted_ce_loss(&p, &gt, 0.25, 0.75, empty).unwrap();

        let mut expect = 0.0;
        for (v, &cgt) in gt_idx.iter().enumerate() {
            let w = if cgt == 2 { 0.25 } else { 0.75 };
            expect -= w * probs[v * c + cgt as usize].ln();
        }
        expect /= n as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        use rand::Rng;
        let mut rng = rng_stream(6, 3);
        let d = 2;
        let c = 5;
        let n = d * d * d;
        let mut probs = vec![0.0f64; n * c];
        for row in probs.chunks_exact_mut(c) {
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = rng.gen_range(0.01..1.0);
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        let p = DistributionGrid::new(d, c, probs.clone()).unwrap();
        let gt_idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let gt = TokenGrid::new(d, gt_idx.clone(), c).unwrap();
        let (w1, _) = weighted_ce_loss(&p, &gt, 1.0, 1.0, Some(0)).unwrap();
        let plain: f64 = gt_idx
            .iter()
            .enumerate()
            .map(|(v, &cgt)| -probs[v * c + cgt as usize].ln())
            .sum::<f64>()
            / n as f64;
        assert!((w1 - plain).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_saturates_and_counts() {
        let d = 1;
        let c = 3;
        let probs = vec![1.0, 0.0, 0.0];
        let p = DistributionGrid::new(d, c, probs).unwrap();
        let gt = const_tokens(d, 2, c);
        let (loss, sat) = weighted_ce_loss(&p, &gt, 0.25, 0.75, None).unwrap();
        assert_eq!(sat, 1);
        assert!((loss - 0.75 * -(1e-12f64.ln())).abs() < 1e-9);
    }
}
