use super::format::{Dataset, MouseRecord, Split};
use super::BEHAVIOR_DIM;
use crate::config::PreprocessConfig;
use crate::error::{Error, Result};
use crate::tensorcore::ops::resize_bilinear;
use crate::tensorcore::Tensor;

/// Center crop to `round(α·h) × round(α·w)`, then bilinear resize.
pub fn preprocess_image(img: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("image must be [c, h, w], got {s:?}"))),
    };
    let ch = (cfg.alpha * h as f64).round() as usize;
    let cw = (cfg.alpha * w as f64).round() as usize;
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) || ch < 2 || cw < 2 {
        return Err(Error::Config(format!(
            "alpha={} crops {h}×{w} to {ch}×{cw}; need at least 2×2",
            cfg.alpha
        )));
    }
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    let mut crop = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in top..top + ch {
            let row = (k * h + y) * w;
            crop.extend_from_slice(&img.data()[row + left..row + left + cw]);
        }
    }
    let crop = Tensor::new(vec![c, ch, cw], crop)?;
    if ch == cfg.target_h && cw == cfg.target_w {
        return Ok(crop);
    }
    resize_bilinear(&crop, cfg.target_h, cfg.target_w)
}

/// Mean and population standard deviation per column of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StreamStats {
    /// Statistics of `columns` interleaved groups: element `k` of `data`
    /// belongs to column `(k / inner) % columns`.
    fn fit(rows: &[&[f64]], columns: usize, inner: usize) -> StreamStats {
        let mut sum = vec![0.0; columns];
        let mut count = vec![0usize; columns];
        for row in rows {
            for (k, &v) in row.iter().enumerate() {
                let c = (k / inner) % columns;
                sum[c] += v;
                count[c] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut ss = vec![0.0; columns];
        for row in rows {
            for (k, &v) in row.iter().enumerate() {
                let c = (k / inner) % columns;
                ss[c] += (v - mean[c]).powi(2);
            }
        }
        let std = ss
            .iter()
            .zip(&count)
            .map(|(s, &n)| (s / n as f64).sqrt())
            .collect();
        StreamStats { mean, std }
    }

    fn require_positive(&self, stream: &str) -> Result<()> {
        for (i, &s) in self.std.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::DegenerateStream(format!(
                    "{stream} column {i} has zero standard deviation on the training split"
                )));
            }
        }
        Ok(())
    }

    fn transform(&self, t: &Tensor, inner: usize, inverse: bool) -> Tensor {
        let cols = self.mean.len();
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = (k / inner) % cols;
            *v = if inverse {
                *v * self.std[c] + self.mean[c]
            } else {
                (*v - self.mean[c]) / self.std[c]
            };
        }
        out
    }
}

/// Per-mouse statistics measured on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    /// Per image channel.
    pub images: StreamStats,
    pub behaviors: StreamStats,
    pub pupil_center: StreamStats,
    /// Per neuron. Responses are never transformed; these only serve the
    /// mean-response bias initialisation.
    pub responses: StreamStats,
}

impl Standardizer {
    /// Mean of `r / std(r)` per neuron over the training split; neurons
    /// that never vary are scaled by one.
    pub fn mean_standardized_response(&self) -> Vec<f64> {
        self.responses
            .mean
            .iter()
            .zip(&self.responses.std)
            .map(|(&m, &s)| if s > 0.0 { m / s } else { m })
            .collect()
    }
}

pub fn fit_standardizer(rec: &MouseRecord) -> Result<Standardizer> {
    let train = rec.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::InsufficientData(format!("mouse {}: empty training split", rec.id)));
    }
    let c = rec.images.dim(1);
    let hw = rec.images.dim(2) * rec.images.dim(3);
    fn rows<'a>(t: &'a Tensor, idx: &[usize]) -> Vec<&'a [f64]> {
        idx.iter().map(|&i| t.row(i)).collect()
    }
    let images = StreamStats::fit(&rows(&rec.images, &train), c, hw);
    images.require_positive("images")?;
    let behaviors = StreamStats::fit(&rows(&rec.behaviors, &train), BEHAVIOR_DIM, 1);
    behaviors.require_positive("behaviors")?;
    let pupil_center = StreamStats::fit(&rows(&rec.pupil_center, &train), 2, 1);
    pupil_center.require_positive("pupil_center")?;
    let responses = StreamStats::fit(&rows(&rec.responses, &train), rec.n_neurons(), 1);
    Ok(Standardizer {
        images,
        behaviors,
        pupil_center,
        responses,
    })
}

fn transform_record(rec: &MouseRecord, s: &Standardizer, inverse: bool) -> MouseRecord {
    let hw = rec.images.dim(2) * rec.images.dim(3);
    MouseRecord {
        images: s.images.transform(&rec.images, hw, inverse),
        behaviors: s.behaviors.transform(&rec.behaviors, 1, inverse),
        pupil_center: s.pupil_center.transform(&rec.pupil_center, 1, inverse),
        ..rec.clone()
    }
}

/// Standardize images, behaviors and pupil centers; responses stay raw.
pub fn apply_standardizer(rec: &MouseRecord, s: &Standardizer) -> MouseRecord {
    transform_record(rec, s, false)
}

pub fn inverse_standardizer(rec: &MouseRecord, s: &Standardizer) -> MouseRecord {
    transform_record(rec, s, true)
}

/// Z-score anatomical coordinates per axis; a constant axis is only centered.
pub fn standardize_coordinates(coords: &Tensor) -> Tensor {
    let rows: Vec<&[f64]> = (0..coords.dim(0)).map(|i| coords.row(i)).collect();
    let mut st = StreamStats::fit(&rows, 2, 1);
    for s in &mut st.std {
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    st.transform(coords, 1, false)
}

#[derive(Clone, Debug)]
pub struct PreparedMouse {
    /// Cropped, resized and standardized; coordinates z-scored.
    pub record: MouseRecord,
    pub stats: Standardizer,
}

/// Model-ready data for every mouse.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mice: Vec<PreparedMouse>,
}

impl PreparedData {
    pub fn mouse_index(&self, id: &str) -> Option<usize> {
        self.mice.iter().position(|m| m.record.id == id)
    }
}

/// Crop and resize every image, then standardize with training statistics
/// of the processed images.
pub fn prepare(ds: &Dataset, cfg: &PreprocessConfig) -> Result<PreparedData> {
    let mut mice = Vec::with_capacity(ds.mice.len());
    for rec in &ds.mice {
        let n = rec.n_trials();
        let mut data = Vec::with_capacity(n * ds.channels * cfg.target_h * cfg.target_w);
        for t in 0..n {
            data.extend(preprocess_image(&rec.image(t), cfg)?.into_data());
        }
        let resized = MouseRecord {
            images: Tensor::new(vec![n, ds.channels, cfg.target_h, cfg.target_w], data)?,
            coordinates: standardize_coordinates(&rec.coordinates),
            ..rec.clone()
        };
        let stats = fit_standardizer(&resized)?;
        mice.push(PreparedMouse {
            record: apply_standardizer(&resized, &stats),
            stats,
        });
    }
    Ok(PreparedData {
        channels: ds.channels,
        height: cfg.target_h,
        width: cfg.target_w,
        mice,
    })
}
