//! Deterministic on-disk formats: the "AKMD" binary checkpoint, the text
//! importance report, and flat `key = value` config files. All multi-byte
//! fields are little-endian and all maps iterate in sorted order, so
//! save -> load -> save is byte-identical across platforms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::importance::{ImportanceReport, MeasureKind};
use crate::modulation::{names, KernelMode, ModulatedKernel};
use crate::nets::ArchDescriptor;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AKMD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeTag {
    pub mode: KernelMode,
    pub d_out: u32,
}

/// Serialized model state: architecture, RNG seed, iteration count, named
/// tensors, and per-kernel mode tags describing how each kernel trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub rng_seed: u64,
    pub iteration: u64,
    pub tensors: BTreeMap<String, Tensor>,
    pub modes: BTreeMap<String, ModeTag>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.arch)
            .map_err(|e| Error::Format(format!("arch serialization: {e}")))?;
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_name(&mut out, name)?;
            out.push(0u8); // dtype 0 = f64; other values reserved
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.modes.len() as u32).to_le_bytes());
        for (name, tag) in &self.modes {
            write_name(&mut out, name)?;
            out.push(tag.mode.as_u8());
            out.extend_from_slice(&tag.d_out.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let arch_len = r.u32()? as usize;
        let arch: ArchDescriptor = serde_json::from_slice(r.take(arch_len)?)
            .map_err(|e| Error::Format(format!("arch blob: {e}")))?;
        let rng_seed = r.u64()?;
        let iteration = r.u64()?;

        let n_tensors = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Format(format!("unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            let t = Tensor::new(shape, values)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
        }

        let n_modes = r.u32()?;
        let mut modes = BTreeMap::new();
        for _ in 0..n_modes {
            let name = r.name()?;
            let mode = KernelMode::from_u8(r.u8()?)?;
            let d_out = r.u32()?;
            modes.insert(name, ModeTag { mode, d_out });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { arch, rng_seed, iteration, tensors, modes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Materialize the effective weight of every conv/linear layer, applying
    /// whatever modulation parameters the checkpoint carries. Layers without
    /// modulation come back as their stored base tensor.
    pub fn effective_weights(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (weight_name, shape) in self.arch.kernels() {
            let base = self
                .tensors
                .get(&weight_name)
                .ok_or_else(|| Error::UnknownParameter(weight_name.clone()))?
                .clone();
            let m1_name = names::layer_param(&weight_name, "m1");
            let gamma_name = names::layer_param(&weight_name, "gamma");
            let eff = if let Some(m1) = self.tensors.get(&m1_name) {
                // Whole-layer rank-1 modulation.
                let m2 = self
                    .tensors
                    .get(&names::layer_param(&weight_name, "m2"))
                    .ok_or_else(|| Error::UnknownParameter(format!("{weight_name} m2")))?;
                ModulatedKernel {
                    shape,
                    base,
                    mode: KernelMode::Kml,
                    d_out: m1.len(),
                    m1: Some(m1.clone()),
                    m2: Some(m2.clone()),
                    gamma: None,
                    beta: None,
                }
                .effective_kernel()
            } else if let Some(gamma) = self.tensors.get(&gamma_name) {
                let beta = self
                    .tensors
                    .get(&names::layer_param(&weight_name, "beta"))
                    .ok_or_else(|| Error::UnknownParameter(format!("{weight_name} beta")))?;
                ModulatedKernel {
                    shape,
                    base,
                    mode: KernelMode::Adafm,
                    d_out: shape.c_out,
                    m1: None,
                    m2: None,
                    gamma: Some(gamma.clone()),
                    beta: Some(beta.clone()),
                }
                .effective_kernel()
            } else {
                // Per-filter modulation, if any; base rows already hold the
                // fine-tuned or frozen values.
                let q = shape.row_width();
                let mut eff = base;
                for i in 0..shape.c_out {
                    let kid = names::kernel_id(&weight_name, i);
                    match self.modes.get(&kid).map(|t| t.mode) {
                        Some(KernelMode::Kml) => {
                            let m1 = self.required(&names::filter_param(&weight_name, i, "m1"))?;
                            let m2 = self.required(&names::filter_param(&weight_name, i, "m2"))?;
                            for j in 0..q {
                                eff.values[i * q + j] *= 1.0 + m1.values[0] * m2.values[j];
                            }
                        }
                        Some(KernelMode::Adafm) => {
                            let gamma =
                                self.required(&names::filter_param(&weight_name, i, "gamma"))?;
                            let beta =
                                self.required(&names::filter_param(&weight_name, i, "beta"))?;
                            let kk = shape.k * shape.k;
                            for c in 0..shape.c_in {
                                for e in 0..kk {
                                    let idx = i * q + c * kk + e;
                                    eff.values[idx] =
                                        gamma.values[c] * eff.values[idx] + beta.values[c];
                                }
                            }
                        }
                        _ => {}
                    }
                }
                eff
            };
            out.insert(weight_name, eff);
        }
        Ok(out)
    }

    fn required(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Format(format!("name too long: {name}")));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 in name".into()))
    }
}

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f =
            std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Importance report text format

pub fn report_to_string(report: &ImportanceReport) -> String {
    let mut out = format!(
        "t_h={} measure={} threshold={}\n",
        report.t_h,
        report.measure.name(),
        report.threshold_value
    );
    for (id, fi) in &report.kernel_fi {
        let flag = if report.important.contains(id) { 1 } else { 0 };
        out.push_str(&format!("{id} {fi} {flag}\n"));
    }
    out
}

pub fn save_report(report: &ImportanceReport, path: &Path) -> Result<()> {
    atomic_write(path, report_to_string(report).as_bytes())
}

pub fn parse_report(text: &str) -> Result<ImportanceReport> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty importance report".into()))?;
    let mut t_h = None;
    let mut measure = None;
    let mut threshold = None;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field '{field}'")))?;
        match key {
            "t_h" => t_h = Some(value.parse::<u32>().map_err(|e| Error::Format(e.to_string()))?),
            "measure" => measure = Some(MeasureKind::parse(value)?),
            "threshold" => {
                threshold = Some(value.parse::<f64>().map_err(|e| Error::Format(e.to_string()))?)
            }
            other => return Err(Error::Format(format!("unknown header key '{other}'"))),
        }
    }
    let (Some(t_h), Some(measure), Some(threshold_value)) = (t_h, measure, threshold) else {
        return Err(Error::Format("incomplete importance report header".into()));
    };

    let mut kernel_fi = BTreeMap::new();
    let mut important = std::collections::BTreeSet::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad report line '{line}'")));
        }
        let fi: f64 = parts[1].parse().map_err(|e: std::num::ParseFloatError| {
            Error::Format(e.to_string())
        })?;
        kernel_fi.insert(parts[0].to_string(), fi);
        match parts[2] {
            "1" => {
                important.insert(parts[0].to_string());
            }
            "0" => {}
            other => return Err(Error::Format(format!("bad importance flag '{other}'"))),
        }
    }
    if kernel_fi.is_empty() {
        return Err(Error::Format("importance report has no kernels".into()));
    }
    Ok(ImportanceReport { kernel_fi, t_h, threshold_value, important, measure })
}

pub fn load_report(path: &Path) -> Result<ImportanceReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_report(&text)
}

// ---------------------------------------------------------------------------
// Config files

const CONFIG_KEYS: &[&str] = &[
    "arch",
    "latent_dim",
    "iter_probe",
    "iter_adapt",
    "lr",
    "batch_size",
    "t_h",
    "strategy",
    "k_shots",
    "seed",
    "ewc_lambda",
    "source_domain",
    "target_domain",
    "out_dir",
];

/// Flat `key = value` config with `#` comments. Unknown keys are a hard
/// error so typos never silently fall back to defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(CONFIG_KEYS.contains(&key));
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}'"))),
        }
    }

    /// Canonical text form, used for manifest hashing.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
