//! The iterative refinement loop.
//!
//! Inference seeds the interim map at 0.5, feeds (image, previous output)
//! back through the network, and stops once the summed absolute pixel
//! difference between consecutive maps falls below the threshold (or the
//! iteration cap is hit). Training runs the same loop per sample, scoring
//! each step with the ratio loss against the previous step's dice value
//! and updating the shared parameter set after every step.
//!
//! The fed-back map enters the next step as plain data: it is detached
//! from the graph (and binarized by default), and the previous dice value
//! is folded into the loss as a constant, so no gradient flows through
//! either.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{dice, dice_node, iter_loss_node, jaccard, GroundTruthMask, LossConfig};
use crate::network::{NetworkConfig, ParameterSet, SegmentationMap};
use crate::optim::{GradientMap, OptimizerConfig};
use crate::tensor::{Scalar, Tensor};
use crate::trace::{IterationRecord, IterationTrace};

/// Stopping rule and feedback policy for the refinement loop.
#[derive(Clone, Copy, Debug)]
pub struct IterationConfig {
    /// Threshold on the summed absolute pixel difference between
    /// consecutive maps; strictly-below stops the loop.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Binarize network outputs before feeding them back (the initial 0.5
    /// map is always fed as-is).
    pub binarize_feedback: bool,
    pub binarize_threshold: f64,
}

impl IterationConfig {
    /// Default policy for a given resolution: threshold scales with the
    /// pixel count (0.001 per pixel), capped at 8 iterations.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        IterationConfig {
            threshold: 0.001 * (height * width) as f64,
            max_iterations: 8,
            binarize_feedback: true,
            binarize_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threshold < 0.0 || self.threshold.is_nan() {
            return Err(Error::Config(format!(
                "iteration threshold must be non-negative, got {}",
                self.threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config(format!(
                "binarize threshold must be in [0, 1], got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// The all-0.5 segmentation map at the configured resolution, iteration 0.
pub fn initial_map<S: Scalar>(config: &NetworkConfig) -> SegmentationMap<S> {
    SegmentationMap::initial(config.input_height, config.input_width)
}

/// Stopping rule: true iff `sum_i |cur_i - prev_i| < threshold`.
pub fn converged<S: Scalar>(
    current: &SegmentationMap<S>,
    previous: &SegmentationMap<S>,
    cfg: &IterationConfig,
) -> Result<bool> {
    Ok(current.values().abs_diff_sum(previous.values())? < cfg.threshold)
}

/// The map actually fed back into the network for the next iteration.
pub fn feedback_map<S: Scalar>(
    map: &SegmentationMap<S>,
    cfg: &IterationConfig,
) -> SegmentationMap<S> {
    if cfg.binarize_feedback && map.iteration() > 0 {
        map.binarized(cfg.binarize_threshold)
    } else {
        map.clone()
    }
}

/// Runs the refinement loop on one image. Returns the final map and the
/// per-iteration trace (dice/jaccard/loss are absent: no ground truth).
pub fn infer<S: Scalar>(
    params: &ParameterSet<S>,
    image: &Tensor<S>,
    image_id: &str,
    cfg: &IterationConfig,
) -> Result<(SegmentationMap<S>, IterationTrace)> {
    cfg.validate()?;
    let mut trace = IterationTrace::new(image_id);
    let mut prev = initial_map(params.config());
    for _ in 0..cfg.max_iterations {
        let start = Instant::now();
        let out = params.forward(image, &feedback_map(&prev, cfg))?;
        let conv_sum = out.values().abs_diff_sum(prev.values())?;
        trace.records.push(IterationRecord {
            iteration: out.iteration(),
            dice: None,
            jaccard: None,
            loss: None,
            conv_sum,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        let stop = conv_sum < cfg.threshold;
        prev = out;
        if stop {
            break;
        }
    }
    Ok((prev, trace))
}

/// Metrics of one image at one (fixed) iteration step.
#[derive(Clone, Copy, Debug)]
pub struct EvalRow {
    pub iteration: usize,
    /// Dice of the binarized prediction.
    pub dice: f64,
    /// Jaccard of the binarized prediction.
    pub jaccard: f64,
    pub conv_sum: f64,
}

#[derive(Clone, Debug)]
pub struct EvalCurve {
    pub image_id: String,
    pub rows: Vec<EvalRow>,
}

/// Runs exactly `iterations` refinement steps per sample (no early stop,
/// so every image contributes the same rows) and scores each step against
/// the ground truth. Images are processed in parallel against the frozen
/// parameter set; output order follows input order.
pub fn evaluate<S: Scalar>(
    params: &ParameterSet<S>,
    samples: &[Sample<S>],
    cfg: &IterationConfig,
    iterations: usize,
) -> Result<Vec<EvalCurve>> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::Config(
            "evaluate needs at least one iteration".into(),
        ));
    }
    samples
        .par_iter()
        .map(|sample| {
            let mut prev = initial_map(params.config());
            let mut rows = Vec::with_capacity(iterations);
            for _ in 0..iterations {
                let out = params.forward(&sample.image, &feedback_map(&prev, cfg))?;
                let conv_sum = out.values().abs_diff_sum(prev.values())?;
                let binarized = out.binarized(cfg.binarize_threshold);
                let d = dice(&binarized, &sample.mask)?.value;
                let j = jaccard(
                    &GroundTruthMask::new(binarized.values().clone())?,
                    &sample.mask,
                )?
                .value;
                rows.push(EvalRow {
                    iteration: out.iteration(),
                    dice: d,
                    jaccard: j,
                    conv_sum,
                });
                prev = out;
            }
            Ok(EvalCurve {
                image_id: sample.id.clone(),
                rows,
            })
        })
        .collect()
}

/// Unweighted per-iteration means over a set of evaluation curves:
/// `(iteration, mean dice, mean jaccard)`.
pub fn mean_curve(curves: &[EvalCurve]) -> Vec<(usize, f64, f64)> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n = curves.len() as f64;
            let d = curves.iter().map(|c| c.rows[i].dice).sum::<f64>() / n;
            let j = curves.iter().map(|c| c.rows[i].jaccard).sum::<f64>() / n;
            (row.iteration, d, j)
        })
        .collect()
}

/// Mean per-iteration training statistics for one epoch.
#[derive(Clone, Debug)]
pub struct EpochIterStats {
    pub iteration: usize,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub mean_loss: f64,
    pub mean_conv_sum: f64,
    /// Samples that were still refining at this step.
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rows: Vec<EpochIterStats>,
}

struct SampleState<S: Scalar> {
    prev: SegmentationMap<S>,
    d_prev: f64,
    active: bool,
}

/// Trains the parameter set in place.
///
/// Per batch and refinement step t: every still-active sample is run
/// forward (previous output fed back as data), its soft dice `D_t` and
/// ratio loss `L_t` are formed with `D_{t-1}` held constant (`D_0` comes
/// from the all-0.5 initial map), the batch-mean loss is backpropagated
/// and one SGD step applied. Samples whose maps converge per the stopping
/// rule drop out of later steps. Batches follow dataset order, so a fixed
/// (dataset, seed, config) triple reproduces training exactly.
pub fn train<S: Scalar>(
    params: &mut ParameterSet<S>,
    dataset: &[Sample<S>],
    iter_cfg: &IterationConfig,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<Vec<EpochSummary>> {
    iter_cfg.validate()?;
    loss_cfg.validate()?;
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for sample in dataset {
        sample.check_resolution(params.config())?;
    }

    let mut summaries = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        // per-iteration accumulators: (dice, jaccard, loss, conv_sum) sums
        let mut acc: Vec<(f64, f64, f64, f64, usize)> =
            vec![(0.0, 0.0, 0.0, 0.0, 0); iter_cfg.max_iterations];

        for batch in dataset.chunks(opt.batch_size) {
            let mut states: Vec<SampleState<S>> = batch
                .iter()
                .map(|sample| {
                    let prev = initial_map(params.config());
                    let d_prev = dice(&prev, &sample.mask)?.value;
                    Ok(SampleState {
                        prev,
                        d_prev,
                        active: true,
                    })
                })
                .collect::<Result<_>>()?;

            for t in 1..=iter_cfg.max_iterations {
                let active: Vec<usize> = (0..batch.len()).filter(|&i| states[i].active).collect();
                if active.is_empty() {
                    break;
                }

                let mut graph = Graph::<S>::new();
                let binding = params.bind(&mut graph, true);
                let mut per_sample: Vec<(usize, NodeId, NodeId, NodeId)> =
                    Vec::with_capacity(active.len());
                for &i in &active {
                    let sample = &batch[i];
                    let image = graph.constant(sample.image.clone());
                    let fed = feedback_map(&states[i].prev, iter_cfg);
                    let interim = graph.constant(fed.values().clone());
                    let out = params.forward_bound(&mut graph, &binding, image, interim)?;
                    let truth = graph.constant(sample.mask.values().clone());
                    let d = dice_node(&mut graph, out, truth)?;
                    let l = iter_loss_node(&mut graph, d, states[i].d_prev, loss_cfg);
                    per_sample.push((i, out, d, l));
                }

                for &(i, _, _, l) in &per_sample {
                    let value = graph.value(l).data()[0].to_f64();
                    if !value.is_finite() {
                        return Err(Error::Diverged(format!(
                            "non-finite loss ({value}) for sample `{}` at iteration {t}",
                            batch[i].id
                        )));
                    }
                }

                let mut total = per_sample[0].3;
                for &(_, _, _, l) in &per_sample[1..] {
                    total = graph.add(total, l)?;
                }
                let mean = graph.scale(total, S::from_f64(1.0 / per_sample.len() as f64));
                graph.backward(mean)?;

                let grads: GradientMap<S> = binding
                    .layers()
                    .map(|(name, (k, b))| {
                        (
                            name.to_string(),
                            (
                                graph.grad_tensor(k).expect("trainable leaf has gradient"),
                                graph.grad_tensor(b).expect("trainable leaf has gradient"),
                            ),
                        )
                    })
                    .collect();
                opt.step(params, &grads)?;

                for &(i, out, d, l) in &per_sample {
                    let sample = &batch[i];
                    let out_map = SegmentationMap::new(graph.value(out).clone(), t)?;
                    let conv_sum = out_map.values().abs_diff_sum(states[i].prev.values())?;
                    let d_t = graph.value(d).data()[0].to_f64();
                    let l_t = graph.value(l).data()[0].to_f64();
                    let j_t = jaccard(
                        &GroundTruthMask::from_map(&out_map, iter_cfg.binarize_threshold),
                        &sample.mask,
                    )?
                    .value;

                    let slot = &mut acc[t - 1];
                    slot.0 += d_t;
                    slot.1 += j_t;
                    slot.2 += l_t;
                    slot.3 += conv_sum;
                    slot.4 += 1;

                    let state = &mut states[i];
                    if conv_sum < iter_cfg.threshold {
                        state.active = false;
                    }
                    state.prev = out_map;
                    state.d_prev = d_t;
                }
            }
        }

        let rows = acc
            .into_iter()
            .enumerate()
            .filter(|(_, slot)| slot.4 > 0)
            .map(|(i, (d, j, l, c, n))| EpochIterStats {
                iteration: i + 1,
                mean_dice: d / n as f64,
                mean_jaccard: j / n as f64,
                mean_loss: l / n as f64,
                mean_conv_sum: c / n as f64,
                samples: n,
            })
            .collect();
        summaries.push(EpochSummary { epoch, rows });
    }
    Ok(summaries)
}

/// Writes per-epoch training statistics as CSV. The schema carries no
/// wall-clock column, so identical runs produce identical bytes.
pub fn write_train_csv(
    path: impl AsRef<std::path::Path>,
    summaries: &[EpochSummary],
) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    wtr.write_record([
        "epoch",
        "iteration",
        "dice",
        "jaccard",
        "loss",
        "conv_sum",
        "samples",
    ])
    .map_err(|e| Error::Data(e.to_string()))?;
    for summary in summaries {
        for row in &summary.rows {
            wtr.write_record([
                summary.epoch.to_string(),
                row.iteration.to_string(),
                row.mean_dice.to_string(),
                row.mean_jaccard.to_string(),
                row.mean_loss.to_string(),
                row.mean_conv_sum.to_string(),
                row.samples.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}
