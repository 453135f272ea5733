//! Python bindings: tensors, the network, metrics, the refinement loop,
//! augmentation and synthetic data.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use iterseg_core::data::{self, AugmentationSpec as CoreAugmentationSpec, Flip, ShapeFamily};
use iterseg_core::engine::{self, IterationConfig as CoreIterationConfig};
use iterseg_core::metrics::{self, GroundTruthMask, LossConfig};
use iterseg_core::network::{NetworkConfig as CoreNetworkConfig, ParameterSet, SegmentationMap};
use iterseg_core::optim::OptimizerConfig;
use iterseg_core::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense float tensor (row-major, `N x C x H x W` for activations).
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: iterseg_core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: iterseg_core::Tensor::new(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: iterseg_core::Tensor::zeros(shape),
        }
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f32) -> Self {
        PyTensor {
            inner: iterseg_core::Tensor::full(shape, value),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Network topology hyperparameters.
#[pyclass(name = "NetworkConfig", from_py_object)]
#[derive(Clone)]
struct PyNetworkConfig {
    inner: CoreNetworkConfig,
}

#[pymethods]
impl PyNetworkConfig {
    #[new]
    #[pyo3(signature = (height=256, width=320, stages=4, base_channels=16, merge_points=None))]
    fn new(
        height: usize,
        width: usize,
        stages: usize,
        base_channels: usize,
        merge_points: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let inner = CoreNetworkConfig {
            input_height: height,
            input_width: width,
            stages,
            base_channels,
            merge_points: merge_points.unwrap_or_else(|| vec![1, 2]),
        };
        inner.validate().map_err(to_py)?;
        Ok(PyNetworkConfig { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.input_height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.input_width
    }

    fn __repr__(&self) -> String {
        format!(
            "NetworkConfig({}x{}, stages={}, base_channels={}, merge_points={:?})",
            self.inner.input_height,
            self.inner.input_width,
            self.inner.stages,
            self.inner.base_channels,
            self.inner.merge_points
        )
    }
}

/// Stopping rule and feedback policy of the refinement loop.
#[pyclass(name = "IterationConfig", from_py_object)]
#[derive(Clone)]
struct PyIterationConfig {
    inner: CoreIterationConfig,
}

#[pymethods]
impl PyIterationConfig {
    #[new]
    #[pyo3(signature = (threshold, max_iterations=8, binarize_feedback=true, binarize_threshold=0.5))]
    fn new(
        threshold: f64,
        max_iterations: usize,
        binarize_feedback: bool,
        binarize_threshold: f64,
    ) -> PyResult<Self> {
        let inner = CoreIterationConfig {
            threshold,
            max_iterations,
            binarize_feedback,
            binarize_threshold,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyIterationConfig { inner })
    }

    /// Default policy for a resolution: threshold 0.001 per pixel, 8 iterations.
    #[staticmethod]
    fn for_resolution(height: usize, width: usize) -> Self {
        PyIterationConfig {
            inner: CoreIterationConfig::for_resolution(height, width),
        }
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[getter]
    fn max_iterations(&self) -> usize {
        self.inner.max_iterations
    }
}

fn mask_from_tensor(t: &PyTensor) -> PyResult<GroundTruthMask<f32>> {
    GroundTruthMask::new(t.inner.clone()).map_err(to_py)
}

fn map_from_tensor(t: &PyTensor, iteration: usize) -> PyResult<SegmentationMap<f32>> {
    SegmentationMap::new(t.inner.clone(), iteration).map_err(to_py)
}

/// The two-input encoder-decoder with its parameters.
#[pyclass(name = "Network")]
struct PyNetwork {
    params: ParameterSet<f32>,
}

#[pymethods]
impl PyNetwork {
    /// Builds a freshly initialized network (seeded, reproducible).
    #[staticmethod]
    fn build(config: &PyNetworkConfig, seed: u64) -> PyResult<Self> {
        Ok(PyNetwork {
            params: ParameterSet::build(&config.inner, seed).map_err(to_py)?,
        })
    }

    /// Loads a checkpoint, validating it against the topology of `config`.
    #[staticmethod]
    fn load(path: String, config: &PyNetworkConfig) -> PyResult<Self> {
        Ok(PyNetwork {
            params: ParameterSet::load_checkpoint(path, &config.inner).map_err(to_py)?,
        })
    }

    fn save(&self, path: String) -> PyResult<()> {
        self.params.save_checkpoint(path).map_err(to_py)
    }

    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// One forward pass. `interim` defaults to the all-0.5 initial map.
    #[pyo3(signature = (image, interim=None))]
    fn forward(&self, image: &PyTensor, interim: Option<&PyTensor>) -> PyResult<PyTensor> {
        let config = self.params.config();
        let interim = match interim {
            Some(t) => map_from_tensor(t, 0)?,
            None => SegmentationMap::initial(config.input_height, config.input_width),
        };
        let out = self.params.forward(&image.inner, &interim).map_err(to_py)?;
        Ok(PyTensor {
            inner: out.values().clone(),
        })
    }

    /// Runs the refinement loop; returns the final map and the trace as
    /// `(iteration, conv_sum, ms)` tuples.
    fn infer(
        &self,
        image: &PyTensor,
        config: &PyIterationConfig,
    ) -> PyResult<(PyTensor, Vec<(usize, f64, f64)>)> {
        let (map, trace) =
            engine::infer(&self.params, &image.inner, "image", &config.inner).map_err(to_py)?;
        let rows = trace
            .records
            .iter()
            .map(|r| (r.iteration, r.conv_sum, r.millis))
            .collect();
        Ok((
            PyTensor {
                inner: map.values().clone(),
            },
            rows,
        ))
    }

    /// Trains in place on `(image, mask)` pairs; returns per-epoch rows
    /// `(epoch, iteration, mean_dice, mean_jaccard, mean_loss)`.
    #[pyo3(signature = (samples, iter_config, lr=0.01, momentum=0.9, batch_size=4, epochs=1, epsilon=1e-6, adam=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        samples: Vec<(PyTensor, PyTensor)>,
        iter_config: &PyIterationConfig,
        lr: f64,
        momentum: f64,
        batch_size: usize,
        epochs: usize,
        epsilon: f64,
        adam: bool,
    ) -> PyResult<Vec<(usize, usize, f64, f64, f64)>> {
        let dataset: Vec<data::Sample<f32>> = samples
            .iter()
            .enumerate()
            .map(|(i, (image, mask))| {
                data::Sample::new(
                    format!("sample_{i:03}"),
                    image.inner.clone(),
                    mask_from_tensor(mask)?,
                )
                .map_err(to_py)
            })
            .collect::<PyResult<_>>()?;
        let opt = OptimizerConfig {
            kind: if adam {
                iterseg_core::optim::OptimizerKind::adam()
            } else {
                iterseg_core::optim::OptimizerKind::Sgd
            },
            learning_rate: lr,
            momentum,
            batch_size,
            epochs,
        };
        let summaries = engine::train(
            &mut self.params,
            &dataset,
            &iter_config.inner,
            &LossConfig { epsilon },
            &opt,
        )
        .map_err(to_py)?;
        Ok(summaries
            .iter()
            .flat_map(|s| {
                s.rows.iter().map(move |r| {
                    (
                        s.epoch,
                        r.iteration,
                        r.mean_dice,
                        r.mean_jaccard,
                        r.mean_loss,
                    )
                })
            })
            .collect())
    }

    /// Fixed-iteration evaluation; returns `(image_index, iteration, dice,
    /// jaccard)` rows.
    fn evaluate(
        &self,
        samples: Vec<(PyTensor, PyTensor)>,
        iter_config: &PyIterationConfig,
        iterations: usize,
    ) -> PyResult<Vec<(usize, usize, f64, f64)>> {
        let dataset: Vec<data::Sample<f32>> = samples
            .iter()
            .enumerate()
            .map(|(i, (image, mask))| {
                data::Sample::new(format!("{i}"), image.inner.clone(), mask_from_tensor(mask)?)
                    .map_err(to_py)
            })
            .collect::<PyResult<_>>()?;
        let curves = engine::evaluate(&self.params, &dataset, &iter_config.inner, iterations)
            .map_err(to_py)?;
        Ok(curves
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                c.rows
                    .iter()
                    .map(move |r| (i, r.iteration, r.dice, r.jaccard))
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Network({} parameters)", self.params.num_parameters())
    }
}

/// Soft dice coefficient of a prediction in `[0, 1]` against a binary mask.
#[pyfunction]
fn dice(pred: &PyTensor, truth: &PyTensor) -> PyResult<f64> {
    let pred = map_from_tensor(pred, 0)?;
    let truth = mask_from_tensor(truth)?;
    Ok(metrics::dice(&pred, &truth).map_err(to_py)?.value)
}

/// Jaccard coefficient of two binary masks.
#[pyfunction]
fn jaccard(pred: &PyTensor, truth: &PyTensor) -> PyResult<f64> {
    let pred = mask_from_tensor(pred)?;
    let truth = mask_from_tensor(truth)?;
    Ok(metrics::jaccard(&pred, &truth).map_err(to_py)?.value)
}

/// Ratio loss `-(d_t + eps) / (d_prev + eps)`.
#[pyfunction]
#[pyo3(signature = (d_t, d_prev, epsilon=1e-6))]
fn iter_loss(d_t: f64, d_prev: f64, epsilon: f64) -> f64 {
    -(d_t + epsilon) / (d_prev + epsilon)
}

/// Augmentation grid describing flips x rotations x translations.
#[pyclass(name = "AugmentationSpec", from_py_object)]
#[derive(Clone)]
struct PyAugmentationSpec {
    inner: CoreAugmentationSpec,
}

#[pymethods]
impl PyAugmentationSpec {
    #[new]
    #[pyo3(signature = (flips, rotation_min, rotation_max, rotation_step, offsets_x, offsets_y))]
    fn new(
        flips: Vec<String>,
        rotation_min: f64,
        rotation_max: f64,
        rotation_step: f64,
        offsets_x: Vec<i64>,
        offsets_y: Vec<i64>,
    ) -> PyResult<Self> {
        let flips = flips
            .iter()
            .map(|name| match name.as_str() {
                "identity" => Ok(Flip::Identity),
                "horizontal" => Ok(Flip::Horizontal),
                "vertical" => Ok(Flip::Vertical),
                "both" => Ok(Flip::Both),
                other => Err(PyValueError::new_err(format!("unknown flip `{other}`"))),
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = CoreAugmentationSpec {
            flips,
            rotation_min_deg: rotation_min,
            rotation_max_deg: rotation_max,
            rotation_step_deg: rotation_step,
            offsets_x,
            offsets_y,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyAugmentationSpec { inner })
    }

    /// The dermoscopy grid (900 variants per image).
    #[staticmethod]
    fn ph2() -> Self {
        PyAugmentationSpec {
            inner: CoreAugmentationSpec::ph2(),
        }
    }

    /// The retina grid (1,300 variants per image).
    #[staticmethod]
    fn drive() -> Self {
        PyAugmentationSpec {
            inner: CoreAugmentationSpec::drive(),
        }
    }

    #[staticmethod]
    fn identity() -> Self {
        PyAugmentationSpec {
            inner: CoreAugmentationSpec::identity(),
        }
    }

    fn variant_count(&self) -> usize {
        self.inner.variant_count()
    }
}

/// Expands an (image, mask) pair over the augmentation grid.
#[pyfunction]
fn augment(
    image: &PyTensor,
    mask: &PyTensor,
    spec: &PyAugmentationSpec,
) -> PyResult<Vec<(PyTensor, PyTensor)>> {
    let sample =
        data::Sample::new("sample", image.inner.clone(), mask_from_tensor(mask)?).map_err(to_py)?;
    let variants = data::augment(&sample, &spec.inner).map_err(to_py)?;
    Ok(variants
        .into_iter()
        .map(|v| {
            (
                PyTensor { inner: v.image },
                PyTensor {
                    inner: v.mask.values().clone(),
                },
            )
        })
        .collect())
}

/// Deterministic synthetic corpus; returns `(id, image, mask)` triples.
#[pyfunction]
fn synth_corpus(
    n: usize,
    height: usize,
    width: usize,
    family: String,
    seed: u64,
) -> PyResult<Vec<(String, PyTensor, PyTensor)>> {
    let family = ShapeFamily::parse(&family)
        .ok_or_else(|| PyValueError::new_err(format!("unknown shape family `{family}`")))?;
    let samples = data::synth_corpus::<f32>(n, height, width, family, seed).map_err(to_py)?;
    Ok(samples
        .into_iter()
        .map(|s| {
            (
                s.id,
                PyTensor { inner: s.image },
                PyTensor {
                    inner: s.mask.values().clone(),
                },
            )
        })
        .collect())
}

#[pymodule]
fn iterseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNetworkConfig>()?;
    m.add_class::<PyIterationConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyAugmentationSpec>()?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(iter_loss, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    Ok(())
}
