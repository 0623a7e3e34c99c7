// Binary container for a prepared `DatasetSplit`.
//
// Layout, little-endian:
//   magic b"BTFDSET\0", u32 version
//   u32 header length, header JSON (everything except the sample payloads)
//   per partition (train, validation, test), per sample:
//     u32 trip-id length, trip-id bytes, u64 start index
//     f64 × (W·F) inputs, f64 × (H·v) teacher, f64 × (H·v) targets
//
// Sample counts and sizes come from the header and are checked against the
// bytes actually present before any allocation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{DatasetSplit, NormStats};
use super::window::WindowedSample;
use super::{DataError, Result};

const MAGIC: &[u8; 8] = b"BTFDSET\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stats: NormStats,
    seed: u64,
    window: usize,
    horizon: usize,
    input_channels: Vec<String>,
    target_channels: Vec<String>,
    counts: [usize; 3],
}

fn err(msg: impl Into<String>) -> DataError {
    DataError::Cache(msg.into())
}

pub fn encode_dataset(split: &DatasetSplit) -> Vec<u8> {
    let header = Header {
        stats: split.stats.clone(),
        seed: split.seed,
        window: split.window,
        horizon: split.horizon,
        input_channels: split.input_channels.clone(),
        target_channels: split.target_channels.clone(),
        counts: [split.train.len(), split.validation.len(), split.test.len()],
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for part in [&split.train, &split.validation, &split.test] {
        for s in part {
            out.extend_from_slice(&(s.trip_id.len() as u32).to_le_bytes());
            out.extend_from_slice(s.trip_id.as_bytes());
            out.extend_from_slice(&(s.start as u64).to_le_bytes());
            for v in s.x_enc.iter().chain(&s.teacher).chain(&s.y) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(err(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| err("size overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader(bytes);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(err("not a dataset cache (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(err(format!("unsupported cache version {version} (expected {CACHE_VERSION})")));
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| err(format!("header: {e}")))?;
    let f = header.input_channels.len();
    let v = header.target_channels.len();
    if f == 0 || v == 0 || header.window == 0 || header.horizon == 0 {
        return Err(err("empty channel list or zero window/horizon"));
    }
    if header.stats.input_mean.len() != f
        || header.stats.input_std.len() != f
        || header.stats.target_mean.len() != v
        || header.stats.target_std.len() != v
    {
        return Err(err("normalization statistics do not match the channel lists"));
    }
    let x_len = header.window.checked_mul(f).ok_or_else(|| err("size overflow"))?;
    let y_len = header.horizon.checked_mul(v).ok_or_else(|| err("size overflow"))?;
    let per_sample = x_len
        .checked_add(y_len.checked_mul(2).ok_or_else(|| err("size overflow"))?)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| err("size overflow"))?;
    let total = header.counts.iter().try_fold(0usize, |a, &c| a.checked_add(c));
    match total.and_then(|t| t.checked_mul(per_sample)) {
        Some(need) if need <= r.0.len() => {}
        _ => return Err(err("sample counts exceed the data present")),
    }
    let mut parts: [Vec<WindowedSample>; 3] = Default::default();
    for (part, &count) in parts.iter_mut().zip(&header.counts) {
        part.reserve(count);
        for _ in 0..count {
            let id_len = r.u32("trip id length")? as usize;
            let trip_id = std::str::from_utf8(r.take(id_len, "trip id")?)
                .map_err(|_| err("trip id is not UTF-8"))?
                .to_string();
            let start = usize::try_from(r.u64("start")?).map_err(|_| err("start index too large"))?;
            part.push(WindowedSample {
                trip_id,
                start,
                x_enc: r.f64s(x_len, "inputs")?,
                teacher: r.f64s(y_len, "teacher")?,
                y: r.f64s(y_len, "targets")?,
            });
        }
    }
    if !r.0.is_empty() {
        return Err(err(format!("{} trailing bytes", r.0.len())));
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        stats: header.stats,
        seed: header.seed,
        window: header.window,
        horizon: header.horizon,
        input_channels: header.input_channels,
        target_channels: header.target_channels,
    })
}

pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(split)).map_err(|e| DataError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_dataset(&bytes)
}
