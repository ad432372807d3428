//! The `SQTC` tensor container and the mappings of models, plans and
//! calibration results onto it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SQTC"            4 bytes
//! version u32               currently 1
//! count   u32               number of entries
//! entry × count:
//!   name_len u16, name (UTF-8, unique within the file)
//!   dtype    u8             0 = f32, 1 = i8, 2 = i32
//!   rank     u8
//!   extents  u64 × rank     rank 0 holds one element
//!   payload  product(extents) × dtype size bytes
//! ```
//!
//! Nothing may follow the last entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::calib::{CalibResult, SiteStats};
use crate::error::{Error, Result};
use crate::graph::{BlockParams, ModelGraph};
use crate::layers::{LayerNorm, Linear};
use crate::quant::{Granularity, QuantScheme, QuantizedTensor, Timing};
use crate::smooth::{ChannelStats, SmoothingPlan};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SQTC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::I8(_) => 1,
            Payload::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }
}

fn dtype_size(tag: u8) -> Option<usize> {
    match tag {
        0 => Some(4),
        1 => Some(1),
        2 => Some(4),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn f32(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self { name: name.into(), dims, payload: Payload::F32(data) }
    }

    pub fn scalar_f32(name: impl Into<String>, v: f32) -> Self {
        Self::f32(name, vec![], vec![v])
    }

    pub fn scalar_i32(name: impl Into<String>, v: i32) -> Self {
        Self { name: name.into(), dims: vec![], payload: Payload::I32(vec![v]) }
    }

    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self::f32(name, t.dims().to_vec(), t.data().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f32]) -> Self {
        Self::f32(name, vec![v.len()], v.to_vec())
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

/// Serializes entries. Fails on duplicate names, names longer than
/// `u16::MAX` bytes, ranks above 255, or payloads that do not fill their
/// extents.
pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| format_err(8, "too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut seen = BTreeSet::new();
    for e in entries {
        let offset = out.len();
        if !seen.insert(e.name.as_str()) {
            return Err(format_err(offset, format!("duplicate entry name {:?}", e.name)));
        }
        let name_len = u16::try_from(e.name.len()).map_err(|_| format_err(offset, "entry name too long"))?;
        let rank = u8::try_from(e.dims.len()).map_err(|_| format_err(offset, "rank above 255"))?;
        if e.dims.iter().product::<usize>() != e.payload.len() {
            return Err(format_err(offset, format!("entry {:?} payload does not match {:?}", e.name, e.dims)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.payload.tag());
        out.push(rank);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(format_err(self.pos, format!("truncated {what}: need {n} bytes, {remaining} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container. Every length is checked against the bytes actually
/// present before anything is allocated.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected \"SQTC\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err(name_at, "entry name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(format_err(start, format!("duplicate entry name {name:?}")));
        }
        let tag_at = r.pos;
        let tag = r.u8("dtype")?;
        let size = dtype_size(tag).ok_or_else(|| format_err(tag_at, format!("unknown dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u64("extent")?;
            elems = elems.checked_mul(d).ok_or_else(|| format_err(at, "extent product overflows"))?;
            dims.push(usize::try_from(d).map_err(|_| format_err(at, "extent too large"))?);
        }
        let payload_at = r.pos;
        let byte_len = elems
            .checked_mul(size as u64)
            .filter(|&n| n <= (bytes.len() - r.pos) as u64)
            .ok_or_else(|| {
                format_err(payload_at, format!("payload of {elems} elements exceeds the {} bytes left", bytes.len() - payload_at))
            })? as usize;
        let raw = r.take(byte_len, "payload")?;
        let payload = match tag {
            0 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
            1 => Payload::I8(raw.iter().map(|&b| b as i8).collect()),
            _ => Payload::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
        };
        entries.push(Entry { name, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    write_atomic(path, &encode(entries)?)
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

/// Name-indexed view over decoded entries.
pub struct EntryMap<'a>(BTreeMap<&'a str, &'a Entry>);

impl<'a> EntryMap<'a> {
    pub fn new(entries: &'a [Entry]) -> Self {
        Self(entries.iter().map(|e| (e.name.as_str(), e)).collect())
    }

    pub fn get(&self, name: &str) -> Result<&'a Entry> {
        self.0.get(name).copied().ok_or_else(|| Error::Data(format!("container has no entry {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn f32s(&self, name: &str) -> Result<&'a [f32]> {
        match &self.get(name)?.payload {
            Payload::F32(v) => Ok(v),
            _ => Err(Error::Data(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn scalar_f32(&self, name: &str) -> Result<f32> {
        match self.f32s(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Data(format!("entry {name:?} is not a scalar"))),
        }
    }

    pub fn scalar_i32(&self, name: &str) -> Result<i32> {
        match &self.get(name)?.payload {
            Payload::I32(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Data(format!("entry {name:?} is not an i32 scalar"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.get(name)?;
        Tensor::new(e.dims.clone(), self.f32s(name)?.to_vec())
    }

    /// Names that start with `prefix`, with the prefix removed.
    pub fn with_prefix<'p>(&'p self, prefix: &'p str) -> impl Iterator<Item = &'a str> + 'p {
        self.0.keys().filter_map(move |k| k.strip_prefix(prefix))
    }
}

pub fn plan_to_entries(plan: &SmoothingPlan) -> Vec<Entry> {
    let mut out = vec![Entry::scalar_f32("plan.alpha", plan.alpha)];
    out.extend(plan.factors.iter().map(|(k, s)| Entry::vector(format!("plan.factors.{k}"), s)));
    out
}

pub fn plan_from_entries(entries: &[Entry]) -> Result<SmoothingPlan> {
    let map = EntryMap::new(entries);
    let mut plan = SmoothingPlan::new(map.scalar_f32("plan.alpha")?);
    for point in map.with_prefix("plan.factors.") {
        plan.insert(point, map.f32s(&format!("plan.factors.{point}"))?.to_vec())?;
    }
    plan.validate()?;
    Ok(plan)
}

pub fn calib_to_entries(calib: &CalibResult) -> Vec<Entry> {
    let mut out = vec![
        Entry::scalar_i32("calib.sample_count", calib.sample_count as i32),
        Entry::scalar_f32("calib.clip_fraction", calib.clip_fraction),
    ];
    if let Some(a) = calib.alpha_used {
        out.push(Entry::scalar_f32("calib.alpha_used", a));
    }
    out.extend(calib.stats.iter().map(|(k, s)| Entry::vector(format!("calib.stats.{k}"), &s.act_absmax)));
    out.extend(
        calib.sites.iter().map(|(k, s)| Entry::vector(format!("calib.site.{k}"), &[s.absmax, s.clipped_absmax])),
    );
    out
}

pub fn calib_from_entries(entries: &[Entry]) -> Result<CalibResult> {
    let map = EntryMap::new(entries);
    let sample_count = map.scalar_i32("calib.sample_count")?;
    let sample_count = usize::try_from(sample_count).map_err(|_| Error::Data("negative sample count".into()))?;
    let clip_fraction = map.scalar_f32("calib.clip_fraction")?;
    let alpha_used = if map.contains("calib.alpha_used") { Some(map.scalar_f32("calib.alpha_used")?) } else { None };
    let mut stats = BTreeMap::new();
    for point in map.with_prefix("calib.stats.") {
        let v = map.f32s(&format!("calib.stats.{point}"))?.to_vec();
        stats.insert(point.to_string(), ChannelStats::new(v, sample_count, clip_fraction)?);
    }
    let mut sites = BTreeMap::new();
    for key in map.with_prefix("calib.site.") {
        match map.f32s(&format!("calib.site.{key}"))? {
            &[absmax, clipped_absmax] if absmax >= 0.0 && clipped_absmax >= 0.0 => {
                sites.insert(key.to_string(), SiteStats { absmax, clipped_absmax });
            }
            _ => return Err(Error::Data(format!("calibration site {key} is malformed"))),
        }
    }
    Ok(CalibResult { stats, sites, alpha_used, sample_count, clip_fraction })
}

fn push_linear(out: &mut Vec<Entry>, prefix: &str, lin: &Linear) {
    out.push(Entry::tensor(format!("{prefix}.weight"), &lin.weight));
    out.push(Entry::vector(format!("{prefix}.bias"), &lin.bias));
}

fn push_norm(out: &mut Vec<Entry>, prefix: &str, ln: &LayerNorm) {
    out.push(Entry::vector(format!("{prefix}.gamma"), &ln.gamma));
    out.push(Entry::vector(format!("{prefix}.beta"), &ln.beta));
}

pub fn model_to_entries(model: &ModelGraph) -> Vec<Entry> {
    let mut out = vec![Entry::scalar_i32("model.blocks", model.blocks.len() as i32)];
    for (i, b) in model.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        out.push(Entry::scalar_i32(format!("{p}.heads"), b.heads as i32));
        push_norm(&mut out, &format!("{p}.ln1"), &b.ln1);
        for (name, lin) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("out", &b.out)] {
            push_linear(&mut out, &format!("{p}.{name}"), lin);
        }
        push_norm(&mut out, &format!("{p}.ln2"), &b.ln2);
        push_linear(&mut out, &format!("{p}.fc1"), &b.fc1);
        push_linear(&mut out, &format!("{p}.fc2"), &b.fc2);
        if let Some(d) = &b.attn_in_divisor {
            out.push(Entry::vector(format!("{p}.attn_in_divisor"), d));
        }
        if let Some(d) = &b.ffn_in_divisor {
            out.push(Entry::vector(format!("{p}.ffn_in_divisor"), d));
        }
    }
    out
}

pub fn model_from_entries(entries: &[Entry]) -> Result<ModelGraph> {
    let map = EntryMap::new(entries);
    let blocks = usize::try_from(map.scalar_i32("model.blocks")?).map_err(|_| Error::Data("negative block count".into()))?;
    let linear = |p: &str| Linear::new(map.tensor(&format!("{p}.weight"))?, map.f32s(&format!("{p}.bias"))?.to_vec());
    let norm = |p: &str| -> Result<LayerNorm> {
        Ok(LayerNorm { gamma: map.f32s(&format!("{p}.gamma"))?.to_vec(), beta: map.f32s(&format!("{p}.beta"))?.to_vec() })
    };
    let optional = |name: String| -> Result<Option<Vec<f32>>> {
        if map.contains(&name) {
            Ok(Some(map.f32s(&name)?.to_vec()))
        } else {
            Ok(None)
        }
    };
    let mut out = Vec::with_capacity(blocks.min(1024));
    for i in 0..blocks {
        let p = format!("blocks.{i}");
        let heads = usize::try_from(map.scalar_i32(&format!("{p}.heads"))?).map_err(|_| Error::Data("negative head count".into()))?;
        out.push(BlockParams {
            ln1: norm(&format!("{p}.ln1"))?,
            q: linear(&format!("{p}.q"))?,
            k: linear(&format!("{p}.k"))?,
            v: linear(&format!("{p}.v"))?,
            out: linear(&format!("{p}.out"))?,
            ln2: norm(&format!("{p}.ln2"))?,
            fc1: linear(&format!("{p}.fc1"))?,
            fc2: linear(&format!("{p}.fc2"))?,
            heads,
            attn_in_divisor: optional(format!("{p}.attn_in_divisor"))?,
            ffn_in_divisor: optional(format!("{p}.ffn_in_divisor"))?,
        });
    }
    ModelGraph::new(out)
}

fn scheme_code(s: &QuantScheme) -> Vec<i32> {
    let (g, size) = match s.granularity {
        Granularity::PerTensor => (0, 0),
        Granularity::PerToken => (1, 0),
        Granularity::PerChannel => (2, 0),
        Granularity::GroupWise(n) => (3, n as i32),
    };
    let t = match s.timing {
        Timing::Static => 0,
        Timing::Dynamic => 1,
    };
    vec![g, size, t, s.bits as i32]
}

fn scheme_from_code(code: &[i32]) -> Result<QuantScheme> {
    let bad = || Error::Data(format!("invalid scheme code {code:?}"));
    let [g, size, t, bits] = code else { return Err(bad()) };
    let granularity = match (g, size) {
        (0, _) => Granularity::PerTensor,
        (1, _) => Granularity::PerToken,
        (2, _) => Granularity::PerChannel,
        (3, n) if *n > 0 => Granularity::GroupWise(*n as usize),
        _ => return Err(bad()),
    };
    let timing = match t {
        0 => Timing::Static,
        1 => Timing::Dynamic,
        _ => return Err(bad()),
    };
    let bits = u8::try_from(*bits).map_err(|_| bad())?;
    QuantScheme::new(granularity, timing, bits)
}

pub fn quantized_to_entries(name: &str, q: &QuantizedTensor) -> Vec<Entry> {
    vec![
        Entry { name: format!("{name}.codes"), dims: q.dims().to_vec(), payload: Payload::I8(q.values().to_vec()) },
        Entry::vector(format!("{name}.scales"), q.scales()),
        Entry { name: format!("{name}.scheme"), dims: vec![4], payload: Payload::I32(scheme_code(&q.scheme())) },
    ]
}

pub fn quantized_from_entries(entries: &[Entry], name: &str) -> Result<QuantizedTensor> {
    let map = EntryMap::new(entries);
    let codes = map.get(&format!("{name}.codes"))?;
    let Payload::I8(values) = &codes.payload else {
        return Err(Error::Data(format!("{name}.codes is not i8")));
    };
    let scheme = match &map.get(&format!("{name}.scheme"))?.payload {
        Payload::I32(v) => scheme_from_code(v)?,
        _ => return Err(Error::Data(format!("{name}.scheme is not i32"))),
    };
    QuantizedTensor::from_parts(codes.dims.clone(), values.clone(), map.f32s(&format!("{name}.scales"))?.to_vec(), scheme)
}
