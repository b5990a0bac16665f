use rand::seq::SliceRandom;

use super::model::{CodecModel, CodecParams};
use super::CodecError;
use crate::geometry::TsdfGrid;
use crate::nn::{sgd_step, NodeId, OptimizerState, Tape, Tensor};
use crate::scalar::Scalar;
use crate::util::rng_stream;

#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by 0.1 from this epoch on, when set.
    pub lr_drop_epoch: Option<usize>,
    pub seed: u64,
    /// Minimum number of training shapes accepted.
    pub min_dataset: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.2,
            momentum: 0.9,
            lr_drop_epoch: None,
            seed: 0,
            min_dataset: 32,
        }
    }
}

/// Per-epoch averages of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub quant: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Token usage histogram over the training set after training.
    pub usage: Vec<usize>,
    /// Set when fewer than 10% of entries are ever selected.
    pub codebook_collapse_warning: bool,
}

struct StepOutcome<T: Scalar> {
    grads: Vec<Tensor<T>>,
    recon: T,
    quant: T,
    commit: T,
}

/// Forward + backward for one sample; returns parameter gradients in
/// registration order (encoder, decoder, codebook).
fn sample_step<T: Scalar>(
    model: &CodecModel<T>,
    grid: &TsdfGrid<T>,
) -> Result<StepOutcome<T>, CodecError> {
    let mut tape = Tape::new();
    let enc_ids = model.encoder.register(&mut tape, true);
    let dec_ids = model.decoder.register(&mut tape, true);
    let cb_id = tape.param(model.codebook.entries().clone());

    // encoder codes, [S, n]
    let z = model.encode_on_tape(&mut tape, &enc_ids, grid)?;
    let tokens = model.tokens_from_codes(tape.value(z));
    let d = tokens.resolution();
    let s = model.params.embed_size;

    // e, laid out like z
    let idx: Vec<usize> = tokens.indices().iter().map(|&i| i as usize).collect();
    let e_rows = tape.embed(cb_id, &idx)?; // [n, S]
    let e = tape.transpose2d(e_rows)?; // [S, n]

    // straight-through: decoder sees e, encoder receives its gradient
    let e_detached_delta = {
        let diff = tape.sub(e, z)?;
        tape.stop_grad(diff)
    };
    let st = tape.add(z, e_detached_delta)?;
    let st_grid = tape.reshape(st, &[s, d, d, d])?;
    let y = model.decoder.forward(&mut tape, &dec_ids, st_grid)?;

    // normalized reconstruction target
    let res = grid.resolution();
    let inv = T::one() / grid.truncation();
    let target = tape.constant(
        Tensor::new(
            &[1, res, res, res],
            grid.values().iter().map(|&v| v * inv).collect(),
        )
        .expect("target tensor"),
    );

    // term 1: mean |s - s_hat|
    let diff = tape.sub(y, target)?;
    let adiff = tape.abs(diff);
    let recon = tape.mean(adiff);
    // term 2: ||sg[z] - e||^2 (mean over code elements) -> codebook only
    let zsg = tape.stop_grad(z);
    let d2 = tape.sub(zsg, e)?;
    let d2sq = tape.mul(d2, d2)?;
    let quant = tape.mean(d2sq);
    // term 3: beta ||z - sg[e]||^2 -> encoder only
    let esg = tape.stop_grad(e);
    let d3 = tape.sub(z, esg)?;
    let d3sq = tape.mul(d3, d3)?;
    let commit_raw = tape.mean(d3sq);
    let commit = tape.scale(commit_raw, T::of(model.params.beta));

    let partial = tape.add(recon, quant)?;
    let total = tape.add(partial, commit)?;

    let recon_v = tape.value(recon).item()?;
    let quant_v = tape.value(quant).item()?;
    let commit_v = tape.value(commit).item()?;

    let mut grads_out = tape.backward(total)?;
    let mut ordered: Vec<NodeId> = Vec::new();
    for ids in enc_ids.iter().chain(dec_ids.iter()) {
        ordered.extend(ids.iter().copied());
    }
    ordered.push(cb_id);
    let grads = ordered
        .iter()
        .map(|&id| {
            grads_out
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect();
    Ok(StepOutcome {
        grads,
        recon: recon_v,
        quant: quant_v,
        commit: commit_v,
    })
}

/// Train one class codec. Deterministic for a fixed seed: data order,
/// initialization, and every floating-point reduction are fixed.
pub fn train_codec<T: Scalar>(
    dataset: &[TsdfGrid<T>],
    params: CodecParams,
    cfg: &CodecTrainConfig,
) -> Result<(CodecModel<T>, TrainReport), CodecError> {
    if dataset.len() < cfg.min_dataset {
        return Err(CodecError::DatasetTooSmall(dataset.len(), cfg.min_dataset));
    }
    let res = dataset[0].resolution();
    for g in dataset {
        if g.resolution() != res {
            return Err(CodecError::InvalidConfig(
                "all training grids must share one resolution".into(),
            ));
        }
    }

    let mut init_rng = rng_stream(cfg.seed, 0);
    let mut model = CodecModel::init(params, &mut init_rng)?;
    model.token_resolution(res)?; // validate divisibility up front

    let shapes: Vec<Vec<usize>> = {
        let mut s = model.encoder.param_shapes();
        s.extend(model.decoder.param_shapes());
        s.push(model.codebook.entries().shape().to_vec());
        s
    };
    let mut opt = OptimizerState::new(
        T::of(cfg.learning_rate),
        T::of(cfg.momentum),
        &shapes,
    );

    let mut order_rng = rng_stream(cfg.seed, 1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if let Some(drop) = cfg.lr_drop_epoch {
            if epoch == drop {
                opt.learning_rate = T::of(cfg.learning_rate * 0.1);
            }
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut order_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &si in batch {
                let out = sample_step(&model, &dataset[si])?;
                if !(out.recon.finite() && out.quant.finite() && out.commit.finite()) {
                    return Err(CodecError::NonFiniteLoss { epoch, step });
                }
                sums.0 += out.recon.as_f64();
                sums.1 += out.quant.as_f64();
                sums.2 += out.commit.as_f64();
                match &mut acc {
                    None => acc = Some(out.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(out.grads.iter()) {
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
            let mut params_mut: Vec<&mut Tensor<T>> = model.encoder.params_mut();
            params_mut.extend(model.decoder.params_mut());
            params_mut.push(model.codebook.entries_mut());
            let grad_refs: Vec<&Tensor<T>> = acc.iter().collect();
            sgd_step(&mut params_mut, &grad_refs, &mut opt)?;
        }
        let n = dataset.len() as f64;
        let log = EpochLog {
            epoch,
            recon: sums.0 / n,
            quant: sums.1 / n,
            commit: sums.2 / n,
            total: (sums.0 + sums.1 + sums.2) / n,
        };
        epochs.push(log);
    }

    // usage histogram and empty-space token over the training set
    let mut usage = vec![0usize; model.codebook.len()];
    let mut empty_hist = vec![0usize; model.codebook.len()];
    let patch = model.params.patch;
    for grid in dataset {
        let (_, tokens) = model.encode(grid)?;
        for &t in tokens.indices() {
            usage[t as usize] += 1;
        }
        let d = tokens.resolution();
        let norm_values: Vec<f64> = grid
            .values()
            .iter()
            .map(|&v| (v / grid.truncation()).as_f64())
            .collect();
        for tz in 0..d {
            for ty in 0..d {
                for tx in 0..d {
                    if patch_fully_empty(&norm_values, res, patch, tx, ty, tz) {
                        let tok = tokens.indices()[tx + d * (ty + d * tz)];
                        empty_hist[tok as usize] += 1;
                    }
                }
            }
        }
    }
    let used = usage.iter().filter(|&&u| u > 0).count();
    let collapse = used * 10 < model.codebook.len();
    if empty_hist.iter().any(|&c| c > 0) {
        let best = empty_hist
            .iter()
            .enumerate()
            .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
            .map(|(i, _)| i as u32);
        model.empty_token = best;
    }

    Ok((
        model,
        TrainReport {
            epochs,
            usage,
            codebook_collapse_warning: collapse,
        },
    ))
}

fn patch_fully_empty(
    norm_values: &[f64],
    res: usize,
    patch: usize,
    tx: usize,
    ty: usize,
    tz: usize,
) -> bool {
    for z in tz * patch..(tz + 1) * patch {
        for y in ty * patch..(ty + 1) * patch {
            for x in tx * patch..(tx + 1) * patch {
                if norm_values[x + res * (y + res * z)] < 1.0 - 1e-6 {
                    return false;
                }
            }
        }
    }
    true
}
