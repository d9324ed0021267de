//! Python bindings: phantom data, datasets, networks, training, evaluation,
//! segmentation, metrics, mask cleanup and gradient self-checks.
//!
//! Images cross the boundary as lists of rows. 8-bit frames and 0/1 masks
//! come back as `list[bytes]` (indexing a row gives ints) and are accepted as
//! any sequence of byte rows or int lists; probability maps are
//! `list[list[float]]`.

use std::collections::HashMap;
use std::path::PathBuf;

use image::GrayImage;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyBytes, PyDict};

use angioseg::config::KvConfig;
use angioseg::data::{self, PhantomParams};
use angioseg::metrics::{self, BinaryMask};
use angioseg::model::{self, ModelConfig, NetworkParams};
use angioseg::ops::op_gradcheck_suite;
use angioseg::pipeline::{self, SegmentOptions, TrainConfig};
use angioseg::Tensor;

create_exception!(pyangioseg, AngiosegError, PyException, "Error raised by the angioseg core; `kind` prefixes the message.");

fn err(e: angioseg::Error) -> PyErr {
    AngiosegError::new_err(format!("{}: {e}", e.kind()))
}

fn usage(msg: impl Into<String>) -> PyErr {
    AngiosegError::new_err(format!("invalid-argument: {}", msg.into()))
}

fn rows<T: Copy>(data: &[T], width: usize) -> Vec<Vec<T>> {
    data.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

fn flatten<T: Copy>(rows: &[Vec<T>]) -> PyResult<(usize, usize, Vec<T>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(usage("expected a non-empty rectangular 2D list"));
    }
    Ok((h, w, rows.concat()))
}

fn mask_from_rows(rows: &[Vec<u8>]) -> PyResult<BinaryMask> {
    let (h, w, data) = flatten(rows)?;
    BinaryMask::new(h, w, data).map_err(err)
}

fn mask_rows(m: &BinaryMask) -> Vec<Vec<u8>> {
    rows(m.data(), m.width())
}

fn image_from_rows(rows: &[Vec<u8>]) -> PyResult<GrayImage> {
    let (h, w, data) = flatten(rows)?;
    GrayImage::from_raw(w as u32, h as u32, data).ok_or_else(|| usage("frame buffer size"))
}

fn to_kv(options: Option<&Bound<'_, PyDict>>) -> PyResult<KvConfig> {
    let mut kv = KvConfig::new();
    if let Some(d) = options {
        for (k, v) in d.iter() {
            let value = match v.extract::<bool>() {
                Ok(b) if v.is_instance_of::<PyBool>() => b.to_string(),
                _ => v.str()?.extract::<String>()?,
            };
            kv.set(k.extract::<String>()?, value);
        }
    }
    Ok(kv)
}

/// A labelled image sequence.
#[pyclass(name = "Clip", frozen)]
struct PyClip {
    inner: data::Clip,
}

#[pymethods]
impl PyClip {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn frame_rate(&self) -> Option<f64> {
        self.inner.frame_rate
    }

    /// `(height, width)` of every frame.
    #[getter]
    fn resolution(&self) -> Option<(usize, usize)> {
        self.inner.resolution()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frame(&self, i: usize) -> PyResult<Vec<Vec<u8>>> {
        let f = self.inner.frames.get(i).ok_or_else(|| usage(format!("frame {i} out of range")))?;
        Ok(rows(f.as_raw(), f.width() as usize))
    }

    fn label(&self, i: usize) -> PyResult<Vec<Vec<u8>>> {
        let m = self.inner.labels.get(i).ok_or_else(|| usage(format!("label {i} out of range")))?;
        Ok(mask_rows(m))
    }

    /// Writes `<root>/<id>/frames`, `labels` and `meta.txt`.
    fn save(&self, root: PathBuf) -> PyResult<()> {
        data::save_clip(&self.inner, &root).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Clip(id={:?}, frames={}, resolution={:?})", self.inner.id, self.inner.len(), self.inner.resolution())
    }
}

/// Network parameters (32-bit) with their architecture configuration.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    inner: NetworkParams<f32>,
}

#[pymethods]
impl PyNetwork {
    /// Freshly initialized network. `height` and `width` must be multiples of 32.
    #[new]
    #[pyo3(signature = (n=1, height=448, width=448, base_channels=64, seed=0))]
    fn new(n: usize, height: usize, width: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            base_channels,
            seed,
            ..ModelConfig::new(n, height, width)
        };
        Ok(PyNetwork {
            inner: model::build_network(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: model::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// Checkpoint bytes.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &model::encode_checkpoint(&self.inner))
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: model::decode_checkpoint(bytes).map_err(err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.config().n
    }

    /// Frames per input window, `2N+1`.
    #[getter]
    fn window(&self) -> usize {
        self.inner.config().window()
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        (self.inner.config().height, self.inner.config().width)
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.config().base_channels
    }

    fn parameter_count(&self) -> usize {
        self.inner.count()
    }

    /// Parameter tensor names and shapes.
    fn shapes(&self) -> HashMap<String, Vec<usize>> {
        self.inner.tensors().iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect()
    }

    /// Probability map of one window: `window` frames of `height x width`
    /// intensities in [0, 1].
    fn forward(&self, frames: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<f32>>> {
        let (h, w) = self.resolution();
        let d = frames.len();
        let mut buf = Vec::with_capacity(d * h * w);
        for f in &frames {
            let (fh, fw, data) = flatten(f)?;
            if (fh, fw) != (h, w) {
                return Err(usage(format!("frame is {fh}x{fw}, network expects {h}x{w}")));
            }
            buf.extend(data);
        }
        let x = Tensor::from_vec(&[1, 1, d, h, w], buf).map_err(err)?;
        let (prob, _) = model::forward(&x, &self.inner).map_err(err)?;
        Ok(rows(prob.data(), w))
    }

    /// One cleaned mask per frame of `clip`, at the clip's resolution.
    #[pyo3(signature = (clip, threshold=metrics::DEFAULT_THRESHOLD, tau=pipeline::DEFAULT_TAU))]
    fn segment(&self, clip: &PyClip, threshold: f64, tau: f64) -> PyResult<Vec<Vec<Vec<u8>>>> {
        let opts = SegmentOptions { threshold, tau, ..SegmentOptions::default() };
        let masks = pipeline::segment_video(&self.inner, &clip.inner, &opts).map_err(err)?;
        Ok(masks.iter().map(mask_rows).collect())
    }

    /// As `segment`, for unlabelled 8-bit frames.
    #[pyo3(signature = (frames, threshold=metrics::DEFAULT_THRESHOLD, tau=pipeline::DEFAULT_TAU))]
    fn segment_frames(&self, frames: Vec<Vec<Vec<u8>>>, threshold: f64, tau: f64) -> PyResult<Vec<Vec<Vec<u8>>>> {
        let imgs = frames.iter().map(|f| image_from_rows(f)).collect::<PyResult<Vec<_>>>()?;
        let opts = SegmentOptions { threshold, tau, ..SegmentOptions::default() };
        let masks = pipeline::segment_frames(&self.inner, "frames", &imgs, &opts).map_err(err)?;
        Ok(masks.iter().map(mask_rows).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Network(n={}, resolution={}x{}, parameters={})", c.n, c.height, c.width, self.inner.count())
    }
}

fn phantom_params(size: usize, frames: usize, seed: u64, options: Option<&Bound<'_, PyDict>>) -> PyResult<PhantomParams> {
    let mut p = PhantomParams {
        size,
        frames,
        seed,
        ..PhantomParams::default()
    };
    let kv = to_kv(options)?;
    kv.ensure_known(data::PHANTOM_KEYS).map_err(err)?;
    p.apply_config(&kv).map_err(err)?;
    Ok(p)
}

/// One synthetic clip. Extra keyword options: any phantom parameter
/// (`depth`, `radius_max`, `noise_std`, `occlusion`, ...).
#[pyfunction]
#[pyo3(signature = (size=64, frames=24, seed=0, clip_id="phantom", **options))]
fn gen_phantom(size: usize, frames: usize, seed: u64, clip_id: &str, options: Option<&Bound<'_, PyDict>>) -> PyResult<PyClip> {
    let p = phantom_params(size, frames, seed, options)?;
    Ok(PyClip {
        inner: data::gen_phantom(&p, clip_id).map_err(err)?,
    })
}

/// Writes `clips` phantom clips under `root`; per-clip seeds derive from `seed`.
#[pyfunction]
#[pyo3(signature = (root, clips=4, size=64, frames=24, seed=0, **options))]
fn gen_phantom_dataset(
    root: PathBuf,
    clips: usize,
    size: usize,
    frames: usize,
    seed: u64,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<PyClip>> {
    let p = phantom_params(size, frames, seed, options)?;
    let out = data::gen_phantom_dataset(&root, clips, &p, seed).map_err(err)?;
    Ok(out.into_iter().map(|inner| PyClip { inner }).collect())
}

#[pyfunction]
fn load_dataset(root: PathBuf) -> PyResult<Vec<PyClip>> {
    let clips = data::load_dataset(&root).map_err(err)?;
    Ok(clips.into_iter().map(|inner| PyClip { inner }).collect())
}

/// Held-out side and per-clip `(clip_index, start, end)` train and test slices.
#[pyfunction]
#[pyo3(signature = (lengths, seed=0))]
#[allow(clippy::type_complexity)]
fn partition(lengths: Vec<usize>, seed: u64) -> PyResult<(String, Vec<(usize, usize, usize)>, Vec<(usize, usize, usize)>)> {
    let p = data::partition_lengths(&lengths, seed).map_err(err)?;
    let flat = |s: &[data::ClipSlice]| s.iter().map(|c| (c.clip, c.range.start, c.range.end)).collect();
    Ok((format!("{:?}", p.side).to_lowercase(), flat(&p.train), flat(&p.test)))
}

fn summary_dict<'py>(py: Python<'py>, s: &metrics::MetricsSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("images", s.images)?;
    d.set_item("mean_iou", s.mean_iou)?;
    d.set_item("mean_sensitivity", s.mean_sensitivity)?;
    d.set_item("mean_specificity", s.mean_specificity)?;
    d.set_item("mean_dice", s.mean_dice)?;
    d.set_item("pooled_iou", s.pooled_iou)?;
    d.set_item("pooled_sensitivity", s.pooled_sensitivity)?;
    d.set_item("pooled_specificity", s.pooled_specificity)?;
    d.set_item("pooled_dice", s.pooled_dice)?;
    Ok(d)
}

/// Trains on the dataset at `data_root`. Keyword options are training keys
/// (`n`, `size`, `epochs`, `lr`, `batch_size`, `base_channels`, `max_steps`,
/// `seed`, `out_dir`, ...). Returns `(network, log)` where `log` holds the
/// per-step losses and the last evaluation summaries.
#[pyfunction]
#[pyo3(signature = (data_root, **options))]
fn train<'py>(
    py: Python<'py>,
    data_root: PathBuf,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyNetwork, Bound<'py, PyDict>)> {
    let kv = to_kv(options)?;
    kv.ensure_known(pipeline::TRAIN_KEYS).map_err(err)?;
    let mut cfg = TrainConfig::default();
    cfg.apply_config(&kv).map_err(err)?;
    let clips = data::load_dataset(&data_root).map_err(err)?;
    let out = py.detach(|| pipeline::train(&cfg, &clips)).map_err(err)?;
    let log = PyDict::new(py);
    let steps: Vec<(usize, usize, f64, f64)> = out.log.steps.iter().map(|s| (s.step, s.epoch, s.loss, s.dice_loss)).collect();
    log.set_item("steps", steps)?;
    log.set_item("epoch_losses", out.log.epoch_losses.clone())?;
    if let Some(e) = out.log.evals.last() {
        log.set_item("raw", summary_dict(py, &e.report.raw_summary)?)?;
        log.set_item("post", summary_dict(py, &e.report.post_summary)?)?;
    }
    log.set_item("best", out.best)?;
    Ok((PyNetwork { inner: out.params }, log))
}

/// Metrics on the held-out slices of `data_root` (or every frame with
/// `split="all"`). Returns a dict with `raw` and `post` summaries and the
/// delimited per-image reports.
#[pyfunction]
#[pyo3(signature = (network, data_root, split="test", split_seed=0, threshold=metrics::DEFAULT_THRESHOLD, tau=pipeline::DEFAULT_TAU))]
fn evaluate<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    data_root: PathBuf,
    split: &str,
    split_seed: u64,
    threshold: f64,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = network.inner.config();
    let clips = data::load_dataset(&data_root).map_err(err)?;
    let slices = match split {
        "test" => data::partition(&clips, split_seed).map_err(err)?.test,
        "all" => clips
            .iter()
            .enumerate()
            .map(|(clip, c)| data::ClipSlice { clip, range: 0..c.len() })
            .collect(),
        other => return Err(usage(format!("split must be \"test\" or \"all\", got {other:?}"))),
    };
    let samples = data::build_samples(&clips, &slices, cfg.n, cfg.height, cfg.width).map_err(err)?;
    let report = py
        .detach(|| pipeline::evaluate(&network.inner, &samples, threshold, tau, 4))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("raw", summary_dict(py, &report.raw_summary)?)?;
    d.set_item("post", summary_dict(py, &report.post_summary)?)?;
    d.set_item("raw_report", metrics::format_report(&report.raw))?;
    d.set_item("post_report", metrics::format_report(&report.post))?;
    Ok(d)
}

/// IOU, dice, sensitivity, specificity and confusion counts of two 0/1 masks.
#[pyfunction]
fn mask_metrics<'py>(py: Python<'py>, pred: Vec<Vec<u8>>, target: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyDict>> {
    let (p, t) = (mask_from_rows(&pred)?, mask_from_rows(&target)?);
    let c = metrics::confusion(&p, &t).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("iou", c.iou())?;
    d.set_item("dice", c.dice())?;
    d.set_item("sensitivity", metrics::sensitivity(&c))?;
    d.set_item("specificity", metrics::specificity(&c))?;
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("tn", c.tn)?;
    d.set_item("fn", c.fn_)?;
    Ok(d)
}

/// Soft dice loss of a probability map against a 0/1 mask.
#[pyfunction]
#[pyo3(signature = (prob, target, smooth=metrics::DEFAULT_SMOOTH))]
fn dice_loss(prob: Vec<Vec<f64>>, target: Vec<Vec<u8>>, smooth: f64) -> PyResult<f64> {
    let (h, w, data) = flatten(&prob)?;
    let p = Tensor::from_vec(&[h, w], data).map_err(err)?;
    let (loss, _) = metrics::dice_loss(&p, &mask_from_rows(&target)?, smooth).map_err(err)?;
    Ok(loss)
}

#[pyfunction]
#[pyo3(signature = (prob, threshold=metrics::DEFAULT_THRESHOLD))]
fn binarize(prob: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<Vec<u8>>> {
    let (h, w, data) = flatten(&prob)?;
    let p = Tensor::from_vec(&[h, w], data).map_err(err)?;
    Ok(mask_rows(&metrics::binarize(&p, threshold).map_err(err)?))
}

/// 8-connected component areas, largest first.
#[pyfunction]
fn component_areas(mask: Vec<Vec<u8>>) -> PyResult<Vec<usize>> {
    Ok(pipeline::connected_components(&mask_from_rows(&mask)?).areas)
}

/// Removes components smaller than `tau` times the largest.
#[pyfunction]
#[pyo3(signature = (mask, tau=pipeline::DEFAULT_TAU))]
fn postprocess(mask: Vec<Vec<u8>>, tau: f64) -> PyResult<Vec<Vec<u8>>> {
    Ok(mask_rows(&pipeline::postprocess(&mask_from_rows(&mask)?, tau)))
}

/// `(operator, cases, max_relative_error)` for every differentiable operator.
#[pyfunction]
#[pyo3(signature = (seed=0, cases=10))]
fn op_gradcheck(py: Python<'_>, seed: u64, cases: usize) -> PyResult<Vec<(String, usize, f64)>> {
    let checks = py.detach(|| op_gradcheck_suite(seed, cases)).map_err(err)?;
    Ok(checks.into_iter().map(|c| (c.op.to_string(), c.cases, c.report.max_rel_error)).collect())
}

#[pymodule]
fn pyangioseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AngiosegError", m.py().get_type::<AngiosegError>())?;
    m.add_class::<PyClip>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(gen_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(gen_phantom_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(mask_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(component_areas, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(op_gradcheck, m)?)?;
    Ok(())
}
