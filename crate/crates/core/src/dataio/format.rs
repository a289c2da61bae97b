use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{BEHAVIOR_DIM, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// All recordings from one animal.
#[derive(Clone, Debug)]
pub struct MouseRecord {
    pub id: String,
    /// `[n_trials × c × h × w]`
    pub images: Tensor,
    /// `[n_trials × n_m]`, non-negative spike counts
    pub responses: Tensor,
    /// `[n_trials × 5]`: dilation, dilation derivative, pupil x, pupil y, speed
    pub behaviors: Tensor,
    /// `[n_trials × 2]` as (x, y)
    pub pupil_center: Tensor,
    /// `[n_m × 2]` anatomical positions
    pub coordinates: Tensor,
    pub splits: Vec<Split>,
    /// Image id of each test trial; repeated presentations share an id.
    pub repeat_groups: Vec<Option<u32>>,
    /// Ground-truth firing rates, when the data is synthetic.
    pub rates: Option<Tensor>,
}

impl MouseRecord {
    pub fn n_trials(&self) -> usize {
        self.splits.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.coordinates.dim(0)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_trials())
            .filter(|&t| self.splits[t] == split)
            .collect()
    }

    pub fn image(&self, t: usize) -> Tensor {
        self.images.index_first(t)
    }

    /// Test image id → trial indices.
    pub fn repeat_map(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (t, g) in self.repeat_groups.iter().enumerate() {
            if let (Some(g), Split::Test) = (g, self.splits[t]) {
                map.entry(*g).or_default().push(t);
            }
        }
        map
    }

    /// Subset of trials, in the given order.
    pub fn select(&self, trials: &[usize]) -> Result<MouseRecord> {
        Ok(MouseRecord {
            id: self.id.clone(),
            images: self.images.gather_first(trials)?,
            responses: self.responses.gather_first(trials)?,
            behaviors: self.behaviors.gather_first(trials)?,
            pupil_center: self.pupil_center.gather_first(trials)?,
            coordinates: self.coordinates.clone(),
            splits: trials.iter().map(|&t| self.splits[t]).collect(),
            repeat_groups: trials.iter().map(|&t| self.repeat_groups[t]).collect(),
            rates: match &self.rates {
                Some(r) => Some(r.gather_first(trials)?),
                None => None,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_trials();
        let bad = |m: String| Err(Error::Dimension(format!("mouse {}: {m}", self.id)));
        if n == 0 || self.n_neurons() == 0 {
            return bad("needs at least one trial and one neuron".into());
        }
        if self.images.ndim() != 4 || self.images.dim(0) != n {
            return bad(format!("images shape {:?}", self.images.shape()));
        }
        let m = self.n_neurons();
        if self.responses.shape() != [n, m] {
            return bad(format!("responses shape {:?}, want [{n}, {m}]", self.responses.shape()));
        }
        if self.behaviors.shape() != [n, BEHAVIOR_DIM] {
            return bad(format!("behaviors shape {:?}", self.behaviors.shape()));
        }
        if self.pupil_center.shape() != [n, 2] || self.coordinates.shape() != [m, 2] {
            return bad("pupil_center or coordinates shape".into());
        }
        if self.repeat_groups.len() != n {
            return bad("repeat group count".into());
        }
        if let Some(r) = &self.rates {
            if r.shape() != [n, m] {
                return bad("rates shape".into());
            }
        }
        if self.responses.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!("mouse {}: negative response", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mice: Vec<MouseRecord>,
    /// Extra manifest entries (e.g. generator parameters) kept verbatim.
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn mouse(&self, id: &str) -> Option<&MouseRecord> {
        self.mice.iter().find(|m| m.id == id)
    }
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::load(path, format!("{} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_tensor(path: &Path, shape: Vec<usize>) -> Result<Tensor> {
    let raw = read_f32(path)?;
    let want: usize = shape.iter().product();
    if raw.len() != want {
        return Err(Error::load(
            path,
            format!("expected {want} values for shape {shape:?}, found {}", raw.len()),
        ));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::load(path, format!("non-finite value at element {i}")));
    }
    Tensor::from_f32(shape, &raw)
}

pub(crate) fn parse_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::load(path, format!("line {} is not key=value", n + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn take_usize(kv: &mut BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    let v = kv
        .remove(key)
        .ok_or_else(|| Error::load(path, format!("missing key {key}")))?;
    v.parse()
        .map_err(|_| Error::load(path, format!("{key}={v} is not a non-negative integer")))
}

fn mouse_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("mouse_{id}"))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join("manifest.txt");
    if !manifest.is_file() {
        return Err(Error::load(&manifest, "manifest missing"));
    }
    let mut kv = parse_manifest(&manifest)?;
    let version = take_usize(&mut kv, "format_version", &manifest)?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::load(&manifest, format!("unsupported format_version {version}")));
    }
    let n_mice = take_usize(&mut kv, "n_mice", &manifest)?;
    let c = take_usize(&mut kv, "c", &manifest)?;
    let h = take_usize(&mut kv, "h", &manifest)?;
    let w = take_usize(&mut kv, "w", &manifest)?;
    let ids: Vec<String> = kv
        .remove("mouse_ids")
        .ok_or_else(|| Error::load(&manifest, "missing key mouse_ids"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if ids.len() != n_mice || n_mice == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::load(
            &manifest,
            format!("n_mice={n_mice} but {} mouse ids; c, h, w must be positive", ids.len()),
        ));
    }

    let mut mice = Vec::with_capacity(n_mice);
    for id in ids {
        let n_m = take_usize(&mut kv, &format!("mouse_{id}.n_m"), &manifest)?;
        let n = take_usize(&mut kv, &format!("mouse_{id}.n_trials"), &manifest)?;
        let has_rates = kv.remove(&format!("mouse_{id}.rates")).as_deref() == Some("1");
        if n == 0 || n_m == 0 {
            return Err(Error::load(&manifest, format!("mouse {id}: n_m and n_trials must be positive")));
        }
        let dir = mouse_dir(root, &id);
        let images = load_tensor(&dir.join("images.f32"), vec![n, c, h, w])?;
        let responses = load_tensor(&dir.join("responses.f32"), vec![n, n_m])?;
        if let Some(i) = responses.data().iter().position(|&v| v < 0.0) {
            return Err(Error::load(&dir.join("responses.f32"), format!("negative response at element {i}")));
        }
        let behaviors = load_tensor(&dir.join("behaviors.f32"), vec![n, BEHAVIOR_DIM])?;
        let pupil_center = load_tensor(&dir.join("pupil_center.f32"), vec![n, 2])?;
        let coordinates = load_tensor(&dir.join("coordinates.f32"), vec![n_m, 2])?;
        let rates = if has_rates {
            Some(load_tensor(&dir.join("rates.f32"), vec![n, n_m])?)
        } else {
            None
        };
        let (splits, repeat_groups) = load_splits(&dir.join("splits.txt"), n)?;
        let rec = MouseRecord {
            id,
            images,
            responses,
            behaviors,
            pupil_center,
            coordinates,
            splits,
            repeat_groups,
            rates,
        };
        rec.validate().map_err(|e| Error::load(&dir, e.to_string()))?;
        mice.push(rec);
    }
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        mice,
        meta: kv,
    })
}

fn load_splits(path: &Path, n: usize) -> Result<(Vec<Split>, Vec<Option<u32>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut splits = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(label) = parts.next() else { continue };
        let split = Split::parse(label)
            .ok_or_else(|| Error::load(path, format!("line {}: unknown split '{label}'", i + 1)))?;
        let mut group = None;
        for p in parts {
            let g = p
                .strip_prefix("repeat_group=")
                .and_then(|g| g.parse().ok())
                .ok_or_else(|| Error::load(path, format!("line {}: bad field '{p}'", i + 1)))?;
            group = Some(g);
        }
        splits.push(split);
        groups.push(group);
    }
    if splits.len() != n {
        return Err(Error::load(path, format!("expected {n} lines, found {}", splits.len())));
    }
    Ok((splits, groups))
}

pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut m = String::new();
    writeln!(m, "format_version={FORMAT_VERSION}").unwrap();
    writeln!(m, "n_mice={}", ds.mice.len()).unwrap();
    let ids: Vec<&str> = ds.mice.iter().map(|r| r.id.as_str()).collect();
    writeln!(m, "mouse_ids={}", ids.join(",")).unwrap();
    writeln!(m, "c={}\nh={}\nw={}", ds.channels, ds.height, ds.width).unwrap();
    for rec in &ds.mice {
        rec.validate()?;
        writeln!(m, "mouse_{}.n_m={}", rec.id, rec.n_neurons()).unwrap();
        writeln!(m, "mouse_{}.n_trials={}", rec.id, rec.n_trials()).unwrap();
        if rec.rates.is_some() {
            writeln!(m, "mouse_{}.rates=1", rec.id).unwrap();
        }
        let dir = mouse_dir(root, &rec.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_f32(&dir.join("images.f32"), rec.images.data())?;
        write_f32(&dir.join("responses.f32"), rec.responses.data())?;
        write_f32(&dir.join("behaviors.f32"), rec.behaviors.data())?;
        write_f32(&dir.join("pupil_center.f32"), rec.pupil_center.data())?;
        write_f32(&dir.join("coordinates.f32"), rec.coordinates.data())?;
        if let Some(r) = &rec.rates {
            write_f32(&dir.join("rates.f32"), r.data())?;
        }
        let mut s = String::new();
        for (split, g) in rec.splits.iter().zip(&rec.repeat_groups) {
            match g {
                Some(g) => writeln!(s, "{} repeat_group={g}", split.as_str()).unwrap(),
                None => writeln!(s, "{}", split.as_str()).unwrap(),
            }
        }
        let p = dir.join("splits.txt");
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    }
    for (k, v) in &ds.meta {
        writeln!(m, "{k}={v}").unwrap();
    }
    let p = root.join("manifest.txt");
    fs::write(&p, m).map_err(|e| Error::io(&p, e))
}
