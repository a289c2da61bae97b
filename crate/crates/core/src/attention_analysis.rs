//! Attention rollout, map geometry and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::MouseRecord;
use crate::encoder::AttentionTrace;
use crate::error::{Error, Result};
use crate::evaluation::pearson;
use crate::model::Model;
use crate::tensorcore::ops::resize_bilinear;
use crate::tensorcore::{Rng, Tensor};
use crate::tokenizer::PatchGrid;

/// Per-stimulus relevance of each patch location.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    /// Column relevance before normalisation (sums to one for row-stochastic
    /// rollouts).
    pub raw: Vec<f64>,
    /// Min-max normalised to `[0, 1]`; a constant map is set to 0.5.
    pub values: Vec<f64>,
    pub constant: bool,
    pub trial: Option<usize>,
}

/// Min-max normalisation; constant inputs become 0.5 and are flagged.
fn min_max(v: &[f64]) -> (Vec<f64>, bool) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(1.0)) {
        return (vec![0.5; v.len()], true);
    }
    (v.iter().map(|&x| (x - lo) / range).collect(), false)
}

impl AttentionMap {
    pub fn from_raw(rows: usize, cols: usize, raw: Vec<f64>, trial: Option<usize>) -> Result<Self> {
        if raw.len() != rows * cols || raw.is_empty() {
            return Err(Error::Dimension(format!("map of {} values is not {rows}×{cols}", raw.len())));
        }
        let (values, constant) = min_max(&raw);
        Ok(AttentionMap {
            rows,
            cols,
            raw,
            values,
            constant,
            trial,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Head-averaged attention of one block.
pub fn head_mean(heads: &[Tensor]) -> Result<Tensor> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Dimension("block without attention heads".into()))?;
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::Dimension("heads disagree in shape".into()));
        }
        acc.add_assign(h);
    }
    acc.scale_assign(1.0 / heads.len() as f64);
    Ok(acc)
}

fn matmul_square(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.dim(0);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a.data()[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b.data()[k * n + j];
            }
        }
    }
    Tensor::from_vec(vec![n, n], out)
}

/// `R = Â_n ⋯ Â_1` with `Â_b = rownorm(mean_h A_b + I)`, or the plain
/// product of head means without the residual term.
pub fn rollout_matrix(trace: &AttentionTrace, residual: bool) -> Result<Tensor> {
    if trace.blocks.is_empty() {
        return Err(Error::Dimension("empty attention trace".into()));
    }
    let mut r: Option<Tensor> = None;
    for block in &trace.blocks {
        let mut a = head_mean(block)?;
        let n = a.dim(0);
        if a.ndim() != 2 || a.dim(1) != n {
            return Err(Error::Dimension(format!("attention must be square, got {:?}", a.shape())));
        }
        if residual {
            for i in 0..n {
                let row = &mut a.data_mut()[i * n..(i + 1) * n];
                row[i] += 1.0;
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        r = Some(match r {
            None => a,
            Some(prev) => matmul_square(&a, &prev),
        });
    }
    Ok(r.expect("non-empty trace"))
}

/// Rollout map over the patch grid: mean of `R`'s columns over target rows.
/// A cls token, if present, is excluded from both rows and columns.
pub fn attention_rollout(trace: &AttentionTrace, grid: PatchGrid, has_cls: bool, residual: bool) -> Result<AttentionMap> {
    let r = rollout_matrix(trace, residual)?;
    let l = r.dim(0);
    let off = usize::from(has_cls);
    if l != grid.tokens() + off {
        return Err(Error::Dimension(format!(
            "trace has {l} tokens, grid {}×{} expects {}",
            grid.rows,
            grid.cols,
            grid.tokens() + off
        )));
    }
    let n = grid.tokens();
    let mut raw = vec![0.0; n];
    for i in off..l {
        for (j, v) in raw.iter_mut().enumerate() {
            *v += r.data()[i * l + j + off];
        }
    }
    raw.iter_mut().for_each(|v| *v /= n as f64);
    AttentionMap::from_raw(grid.rows, grid.cols, raw, None)
}

/// Intensity-weighted mean `(row, col)` of `values` laid out `rows × cols`.
pub fn center_of_mass_of(values: &[f64], rows: usize, cols: usize) -> Result<(f64, f64)> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) || values.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("center of mass undefined for an all-zero or negative map".into()));
    }
    let (mut r, mut c) = (0.0, 0.0);
    for y in 0..rows {
        for x in 0..cols {
            let v = values[y * cols + x];
            r += v * y as f64;
            c += v * x as f64;
        }
    }
    Ok((r / total, c / total))
}

pub fn center_of_mass(map: &AttentionMap) -> Result<(f64, f64)> {
    center_of_mass_of(&map.values, map.rows, map.cols)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxisCorrelation {
    pub corr: f64,
    /// Two-sided p-value of the t statistic with `n − 2` degrees of freedom.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PupilAttentionCorrelation {
    pub n: usize,
    /// CoM column against pupil x; `None` if either series is constant.
    pub x: Option<AxisCorrelation>,
    /// CoM row against pupil y.
    pub y: Option<AxisCorrelation>,
    pub diagnostics: Vec<String>,
}

fn correlation_test(a: &[f64], b: &[f64]) -> Option<AxisCorrelation> {
    let r = pearson(a, b)?;
    let df = (a.len() - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Some(AxisCorrelation { corr: r, p_value })
}

/// Correlate CoM `(row, col)` with pupil `(x, y)` across trials.
pub fn pupil_attention_correlation(coms: &[(f64, f64)], pupil: &[(f64, f64)]) -> Result<PupilAttentionCorrelation> {
    if coms.len() != pupil.len() {
        return Err(Error::Dimension("one pupil center per map required".into()));
    }
    if coms.len() < 10 {
        return Err(Error::InsufficientData(format!("need >= 10 trials, got {}", coms.len())));
    }
    let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
    let (com_r, com_c) = split(coms);
    let (px, py) = split(pupil);
    let x = correlation_test(&com_c, &px);
    let y = correlation_test(&com_r, &py);
    let mut diagnostics = Vec::new();
    if x.is_none() {
        diagnostics.push("x axis excluded: zero variance in CoM column or pupil x".to_string());
    }
    if y.is_none() {
        diagnostics.push("y axis excluded: zero variance in CoM row or pupil y".to_string());
    }
    Ok(PupilAttentionCorrelation {
        n: coms.len(),
        x,
        y,
        diagnostics,
    })
}

impl PupilAttentionCorrelation {
    pub fn summary(&self) -> String {
        let fmt = |a: &Option<AxisCorrelation>| match a {
            Some(a) => format!("{:.4},{:.3e}", a.corr, a.p_value),
            None => ",".to_string(),
        };
        let mut s = String::from("n,corr_x,p_x,corr_y,p_y\n");
        writeln!(s, "{},{},{}", self.n, fmt(&self.x), fmt(&self.y)).unwrap();
        for d in &self.diagnostics {
            writeln!(s, "# {d}").unwrap();
        }
        s
    }
}

/// Rollout maps for `trials` of one mouse, in evaluation mode.
pub fn rollout_trials(model: &Model, mouse_id: &str, rec: &MouseRecord, trials: &[usize], residual: bool) -> Result<Vec<AttentionMap>> {
    let grid = model
        .grid()
        .ok_or_else(|| Error::Config("the linear baseline has no attention".into()))?;
    let has_cls = model.cfg.core.tokenizer.cls_token;
    let mut maps = Vec::with_capacity(trials.len());
    let mut rng = Rng::new(0);
    for &t in trials {
        let (_, traces) = model.forward(mouse_id, rec, &[t], &mut rng, false, true)?;
        let trace = traces
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("forward pass produced no attention trace".into()))?;
        let mut map = attention_rollout(&trace, grid, has_cls, residual)?;
        map.trial = Some(t);
        maps.push(map);
    }
    Ok(maps)
}

/// Pixel-wise mean of several maps (of their normalised values).
pub fn mean_map(maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = maps.first().ok_or_else(|| Error::InsufficientData("no maps".into()))?;
    let mut acc = vec![0.0; first.values.len()];
    for m in maps {
        if m.rows != first.rows || m.cols != first.cols {
            return Err(Error::Dimension("maps differ in size".into()));
        }
        acc.iter_mut().zip(&m.values).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= maps.len() as f64);
    AttentionMap::from_raw(first.rows, first.cols, acc, None)
}

/// CSV with columns `trial_id,com_row,com_col,pupil_x,pupil_y`.
pub fn com_csv(maps: &[AttentionMap], coms: &[(f64, f64)], pupil: &[(f64, f64)]) -> String {
    let mut s = String::from("trial_id,com_row,com_col,pupil_x,pupil_y\n");
    for ((m, c), p) in maps.iter().zip(coms).zip(pupil) {
        let id = m.trial.map(|t| t.to_string()).unwrap_or_default();
        writeln!(s, "{id},{},{},{},{}", c.0, c.1, p.0, p.1).unwrap();
    }
    s
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// The map bilinearly upsampled to `h × w` and then min-max normalised.
pub fn upsample_map(map: &AttentionMap, h: usize, w: usize) -> Result<(Vec<f64>, bool)> {
    let t = Tensor::new(vec![1, map.rows, map.cols], map.raw.clone())?;
    let up = if (map.rows, map.cols) == (h, w) { t } else { resize_bilinear(&t, h, w)? };
    Ok(min_max(up.data()))
}

/// Write `<stem>.pgm` (map) and `<stem>_overlay.ppm` (map in red over the
/// grayscale stimulus). `stimulus` is `[h × w]` in any units.
pub fn emit_heatmap(map: &AttentionMap, stimulus: &Tensor, dir: &Path, stem: &str) -> Result<()> {
    let (h, w) = match stimulus.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("stimulus must be [h, w], got {s:?}"))),
    };
    let (up, _) = upsample_map(map, h, w)?;
    let heat = to_bytes(&up);
    let gray = to_bytes(&min_max(stimulus.data()).0);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend_from_slice(&heat);
    let p = dir.join(format!("{stem}.pgm"));
    fs::write(&p, pgm).map_err(|e| Error::io(&p, e))?;

    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&m, &g) in heat.iter().zip(&gray) {
        ppm.extend_from_slice(&[m, g, g]);
    }
    let p = dir.join(format!("{stem}_overlay.ppm"));
    fs::write(&p, ppm).map_err(|e| Error::io(&p, e))
}

/// Read a binary PGM (`P5`) or PPM (`P6`) with maxval 255:
/// `(width, height, channels, bytes)`.
pub fn read_pnm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::load(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let data = bytes.get(pos..).unwrap_or_default().to_vec();
    if data.len() != w * h * channels {
        return Err(bad("pixel data size mismatch"));
    }
    Ok((w, h, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(blocks: Vec<Vec<Tensor>>) -> AttentionTrace {
        AttentionTrace { blocks }
    }

    #[test]
    fn identity_rollout_is_constant() {
        let t = trace(vec![vec![Tensor::from_vec(vec![4, 4], {
            let mut v = vec![0.0; 16];
            (0..4).for_each(|i| v[i * 5] = 1.0);
            v
        })]]);
        let m = attention_rollout(&t, PatchGrid { rows: 2, cols: 2 }, false, true).unwrap();
        assert!(m.constant);
        assert!(m.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn explicit_product_without_residual() {
        let a1 = Tensor::from_vec(vec![3, 3], vec![0.5, 0.5, 0.0, 0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let a2 = Tensor::from_vec(vec![3, 3], vec![0.1, 0.1, 0.8, 0.0, 1.0, 0.0, 0.3, 0.3, 0.4]);
        let r = rollout_matrix(&trace(vec![vec![a1.clone()], vec![a2.clone()]]), false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..3).map(|k| a2.get(&[i, k]) * a1.get(&[k, j])).sum();
                assert!((r.get(&[i, j]) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn com_examples() {
        let mut v = vec![0.0; 6 * 8];
        v[3 * 8 + 5] = 1.0;
        assert_eq!(center_of_mass_of(&v, 6, 8).unwrap(), (3.0, 5.0));
        assert_eq!(center_of_mass_of(&[1.0; 12], 3, 4).unwrap(), (1.0, 1.5));
        let mut v = vec![0.0; 25];
        v[0] = 1.0;
        v[24] = 1.0;
        assert_eq!(center_of_mass_of(&v, 5, 5).unwrap(), (2.0, 2.0));
        assert!(center_of_mass_of(&[0.0; 4], 2, 2).is_err());
    }

    #[test]
    fn equal_series_correlate_perfectly() {
        let s: Vec<(f64, f64)> = (0..12).map(|i| (i as f64, (i * i) as f64)).collect();
        let p: Vec<(f64, f64)> = s.iter().map(|&(r, c)| (c, r)).collect();
        let c = pupil_attention_correlation(&s, &p).unwrap();
        assert!((c.x.unwrap().corr - 1.0).abs() < 1e-12);
        assert!((c.y.as_ref().unwrap().corr - 1.0).abs() < 1e-12);
        assert_eq!(c.y.unwrap().p_value, 0.0);
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = AttentionMap::from_raw(2, 2, vec![0.1, 0.2, 0.3, 0.4], None).unwrap();
        let stim = Tensor::from_vec(vec![4, 4], (0..16).map(|v| v as f64).collect());
        emit_heatmap(&map, &stim, dir.path(), "m").unwrap();
        let (w, h, c, data) = read_pnm(&dir.path().join("m.pgm")).unwrap();
        assert_eq!((w, h, c), (4, 4, 1));
        let (up, _) = upsample_map(&map, 4, 4).unwrap();
        assert_eq!(data, to_bytes(&up));
        assert_eq!(*data.iter().max().unwrap(), 255);
        assert_eq!(*data.iter().min().unwrap(), 0);
        let (_, _, c, rgb) = read_pnm(&dir.path().join("m_overlay.ppm")).unwrap();
        assert_eq!((c, rgb.len()), (3, 48));
    }

    #[test]
    fn constant_map_is_gray() {
        let dir = tempfile::tempdir().unwrap();
        let map = AttentionMap::from_raw(2, 3, vec![0.25; 6], None).unwrap();
        emit_heatmap(&map, &Tensor::zeros(vec![6, 9]), dir.path(), "c").unwrap();
        let (_, _, _, data) = read_pnm(&dir.path().join("c.pgm")).unwrap();
        assert!(data.iter().all(|&b| b == 128));
    }
}
