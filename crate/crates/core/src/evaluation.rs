//! Single-trial correlation, per-mouse reports, noise ceilings and the
//! pupil-dilation split.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::CorrelationMode;
use crate::dataio::{MouseRecord, PreparedData, Split, DILATION};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensorcore::Tensor;

/// Pearson correlation, `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// Per neuron; `None` for neurons with zero variance in `r` or `o`.
    pub per_neuron: Vec<Option<f64>>,
    /// Mean over included neurons (0 when none are).
    pub mean: f64,
    pub excluded: usize,
}

fn column(t: &Tensor, i: usize) -> Vec<f64> {
    let (n, m) = (t.dim(0), t.dim(1));
    (0..n).map(|k| t.data()[k * m + i]).collect()
}

fn check_pair(r: &Tensor, o: &Tensor) -> Result<()> {
    if r.ndim() != 2 || r.shape() != o.shape() {
        return Err(Error::Dimension(format!(
            "correlation needs equal [trials × neurons] inputs, got {:?} and {:?}",
            r.shape(),
            o.shape()
        )));
    }
    if r.dim(0) < 2 {
        return Err(Error::InsufficientData("correlation needs at least 2 trials".into()));
    }
    Ok(())
}

/// Per-neuron correlation across trials, averaged over neurons.
pub fn single_trial_correlation(r: &Tensor, o: &Tensor) -> Result<Correlation> {
    check_pair(r, o)?;
    let per_neuron: Vec<Option<f64>> = (0..r.dim(1))
        .map(|i| pearson(&column(r, i), &column(o, i)))
        .collect();
    let kept: Vec<f64> = per_neuron.iter().flatten().copied().collect();
    Ok(Correlation {
        mean: if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 },
        excluded: per_neuron.len() - kept.len(),
        per_neuron,
    })
}

/// One correlation over all (trial, neuron) pairs.
pub fn pooled_correlation(r: &Tensor, o: &Tensor) -> Result<Option<f64>> {
    check_pair(r, o)?;
    Ok(pearson(r.data(), o.data()))
}

/// `mode`-dependent scalar correlation.
pub fn correlation(r: &Tensor, o: &Tensor, mode: CorrelationMode) -> Result<f64> {
    match mode {
        CorrelationMode::PerNeuron => single_trial_correlation(r, o).map(|c| c.mean),
        CorrelationMode::Pooled => pooled_correlation(r, o).map(|c| c.unwrap_or(0.0)),
    }
}

/// Anything that maps a mouse's trials to predicted responses.
pub trait Predictor {
    fn predict(&self, mouse_id: &str, rec: &MouseRecord, trials: &[usize]) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, mouse_id: &str, rec: &MouseRecord, trials: &[usize]) -> Result<Tensor> {
        Model::predict(self, mouse_id, rec, trials)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PupilSplit {
    pub small: f64,
    pub large: f64,
    /// `(large − small) / |small|`
    pub relative_improvement: f64,
    pub sizes: [usize; 3],
}

/// Thirds of `trials` by ascending dilation; sizes differ by at most one.
pub fn dilation_thirds(dilation: &[f64]) -> Result<[Vec<usize>; 3]> {
    let n = dilation.len();
    if n < 6 {
        return Err(Error::InsufficientData(format!("pupil split needs >= 6 trials, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dilation[a].total_cmp(&dilation[b]).then(a.cmp(&b)));
    let (k, rem) = (n / 3, n % 3);
    let sizes = [k + usize::from(rem > 0), k + usize::from(rem > 1), k];
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut it = order.into_iter();
    for (p, &s) in parts.iter_mut().zip(&sizes) {
        p.extend(it.by_ref().take(s));
    }
    Ok(parts)
}

/// Correlation on the smallest- and largest-dilation thirds of the trials.
pub fn pupil_split_analysis(r: &Tensor, o: &Tensor, dilation: &[f64], mode: CorrelationMode) -> Result<PupilSplit> {
    check_pair(r, o)?;
    if dilation.len() != r.dim(0) {
        return Err(Error::Dimension("one dilation value per trial required".into()));
    }
    let parts = dilation_thirds(dilation)?;
    let corr = |idx: &[usize]| -> Result<f64> {
        correlation(&r.gather_first(idx)?, &o.gather_first(idx)?, mode)
    };
    let small = corr(&parts[0])?;
    let large = corr(&parts[2])?;
    Ok(PupilSplit {
        small,
        large,
        relative_improvement: if small != 0.0 { (large - small) / small.abs() } else { 0.0 },
        sizes: [parts[0].len(), parts[1].len(), parts[2].len()],
    })
}

/// Mean correlation between responses and the generator's true rates.
pub fn noise_ceiling(rec: &MouseRecord, split: Split) -> Result<Option<f64>> {
    let Some(rates) = &rec.rates else { return Ok(None) };
    let idx = rec.indices(split);
    let c = single_trial_correlation(&rec.responses.gather_first(&idx)?, &rates.gather_first(&idx)?)?;
    Ok(Some(c.mean))
}

/// Data-only ceiling estimate: correlate each test trial with the mean of
/// the other repeats of its image.
pub fn repeat_noise_ceiling(rec: &MouseRecord) -> Result<f64> {
    let groups = rec.repeat_map();
    let m = rec.n_neurons();
    let mut obs = Vec::new();
    let mut loo = Vec::new();
    for trials in groups.values() {
        if trials.len() < 2 {
            return Err(Error::InsufficientData("repeat ceiling needs >= 2 repeats per image".into()));
        }
        for &t in trials {
            obs.extend_from_slice(rec.responses.row(t));
            for i in 0..m {
                let others: f64 = trials
                    .iter()
                    .filter(|&&u| u != t)
                    .map(|&u| rec.responses.get(&[u, i]))
                    .sum();
                loo.push(others / (trials.len() - 1) as f64);
            }
        }
    }
    let n = obs.len() / m;
    let c = single_trial_correlation(&Tensor::new(vec![n, m], obs)?, &Tensor::new(vec![n, m], loo)?)?;
    Ok(c.mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MouseMetrics {
    pub mouse_id: String,
    pub n_trials: usize,
    pub correlation: f64,
    pub per_neuron: Vec<Option<f64>>,
    pub excluded: usize,
    pub pupil_split: Option<PupilSplit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub mode: CorrelationMode,
    pub mice: Vec<MouseMetrics>,
    /// Mean of the per-mouse correlations.
    pub mean: f64,
}

/// Evaluation-mode metrics for every mouse on `split`.
pub fn evaluate(p: &dyn Predictor, data: &PreparedData, split: Split, mode: CorrelationMode) -> Result<MetricsReport> {
    let mut mice = Vec::with_capacity(data.mice.len());
    for pm in &data.mice {
        let rec = &pm.record;
        let idx = rec.indices(split);
        if idx.is_empty() {
            return Err(Error::InsufficientData(format!(
                "mouse {} has no {} trials",
                rec.id,
                split.as_str()
            )));
        }
        let o = p.predict(&rec.id, rec, &idx)?;
        let r = rec.responses.gather_first(&idx)?;
        let per = single_trial_correlation(&r, &o)?;
        let value = match mode {
            CorrelationMode::PerNeuron => per.mean,
            CorrelationMode::Pooled => pooled_correlation(&r, &o)?.unwrap_or(0.0),
        };
        let dil: Vec<f64> = idx.iter().map(|&t| rec.behaviors.get(&[t, DILATION])).collect();
        let pupil_split = if idx.len() >= 6 {
            Some(pupil_split_analysis(&r, &o, &dil, mode)?)
        } else {
            None
        };
        mice.push(MouseMetrics {
            mouse_id: rec.id.clone(),
            n_trials: idx.len(),
            correlation: value,
            per_neuron: per.per_neuron,
            excluded: per.excluded,
            pupil_split,
        });
    }
    let mean = mice.iter().map(|m| m.correlation).sum::<f64>() / mice.len() as f64;
    Ok(MetricsReport { split, mode, mice, mean })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mouse_id,split,mode,n_trials,correlation,excluded_neurons,pupil_small,pupil_large,pupil_relative_improvement\n",
        );
        for m in &self.mice {
            let (s, l, d) = m
                .pupil_split
                .as_ref()
                .map_or((f64::NAN, f64::NAN, f64::NAN), |p| (p.small, p.large, p.relative_improvement));
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                m.mouse_id,
                self.split.as_str(),
                self.mode,
                m.n_trials,
                m.correlation,
                m.excluded,
                s,
                l,
                d
            )
            .unwrap();
        }
        writeln!(out, "average,{},{},,{},,,,", self.split.as_str(), self.mode, self.mean).unwrap();
        out
    }

    pub fn per_neuron_csv(&self) -> String {
        let mut out = String::from("mouse_id,neuron_id,correlation\n");
        for m in &self.mice {
            for (i, c) in m.per_neuron.iter().enumerate() {
                match c {
                    Some(c) => writeln!(out, "{},{i},{c}", m.mouse_id).unwrap(),
                    None => writeln!(out, "{},{i},", m.mouse_id).unwrap(),
                }
            }
        }
        out
    }

    /// One row per model: mouse columns then the average.
    pub fn table(&self, model_name: &str) -> String {
        let mut head = format!("{:<12}", "Model");
        let mut row = format!("{model_name:<12}");
        for m in &self.mice {
            write!(head, " {:>9}", format!("Mouse {}", m.mouse_id)).unwrap();
            write!(row, " {:>9.3}", m.correlation).unwrap();
        }
        write!(head, " {:>9}", "Avg.").unwrap();
        write!(row, " {:>9.3}", self.mean).unwrap();
        format!("{head}\n{row}\n")
    }

    pub fn write(&self, dir: &Path, model_name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.csv", self.to_csv()),
            ("per_neuron.csv", self.per_neuron_csv()),
            ("summary.txt", self.table(model_name)),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![v.len(), 1], v.to_vec())
    }

    #[test]
    fn worked_example() {
        let c = single_trial_correlation(&col(&[1., 2., 3.]), &col(&[1., 3., 2.])).unwrap();
        assert!((c.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_anti() {
        let r = Tensor::from_vec(vec![4, 2], vec![1., 0., 2., 5., 0., 1., 4., 2.]);
        assert!((single_trial_correlation(&r, &r).unwrap().mean - 1.0).abs() < 1e-15);
        let o = r.map(|v| 7.0 - v);
        assert!((single_trial_correlation(&r, &o).unwrap().mean + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_neurons_excluded() {
        let r = Tensor::from_vec(vec![3, 2], vec![1., 0., 2., 0., 3., 0.]);
        let o = Tensor::from_vec(vec![3, 2], vec![1., 1., 2., 2., 4., 3.]);
        let c = single_trial_correlation(&r, &o).unwrap();
        assert_eq!(c.excluded, 1);
        assert!(c.per_neuron[1].is_none());
    }

    #[test]
    fn thirds_partition() {
        for n in 6..20 {
            let d: Vec<f64> = (0..n).map(|v| ((v * 7) % n) as f64 + v as f64 * 1e-3).collect();
            let parts = dilation_thirds(&d).unwrap();
            let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let max_small = parts[0].iter().map(|&i| d[i]).fold(f64::MIN, f64::max);
            let min_large = parts[2].iter().map(|&i| d[i]).fold(f64::MAX, f64::min);
            assert!(max_small < min_large);
        }
        assert!(dilation_thirds(&[1.0; 5]).is_err());
    }
}
