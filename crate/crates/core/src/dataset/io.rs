//! Binary dataset files, their text manifests and channel statistics files.
//!
//! The binary layout is little-endian: magic `GLDS`, then `u32` version, bus
//! count, channel count, sample count and class count, then per sample a
//! `u32` label followed by `n x 12` `f64` values in row-major order. The
//! manifest sits next to it with a `.manifest` suffix and records bus ids,
//! measurement masks, seed, variant ids and the generating plan.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use super::{ChannelStats, Dataset, MeasurementMask, SampleMatrix, CHANNELS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GLDS";
pub const VERSION: u32 = 1;

/// Free-form provenance stored in the manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub variants: Vec<String>,
    /// Plan description, possibly multi-line.
    pub plan: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let n = ds.n_buses();
    let mut out = Vec::with_capacity(24 + ds.len() * (4 + n * CHANNELS * 8));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, n as u32, CHANNELS as u32, ds.len() as u32, ds.classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        if s.label >= ds.classes {
            return Err(Error::Label {
                label: s.label,
                classes: ds.classes,
            });
        }
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in s.x.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(Error::Format(format!("truncated dataset at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header fields and raw `(label, matrix)` pairs.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<(usize, Array2<f64>)>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing GLDS magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    if channels != CHANNELS {
        return Err(Error::Format(format!("dataset has {channels} channels, expected {CHANNELS}")));
    }
    let count = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = cur.u32()? as usize;
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let mut values = Vec::with_capacity(n * CHANNELS);
        for _ in 0..n * CHANNELS {
            values.push(cur.f64()?);
        }
        samples.push((label, Array2::from_shape_vec((n, CHANNELS), values).unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((n, classes, samples))
}

fn mask_bits(mask: &MeasurementMask) -> String {
    mask.entries().iter().map(|&e| if e { '1' } else { '0' }).collect()
}

pub fn manifest_text(ds: &Dataset, meta: &DatasetMeta) -> String {
    let mut out = String::from("# dataset manifest\n");
    let _ = writeln!(out, "samples {}", ds.len());
    let _ = writeln!(out, "classes {}", ds.classes);
    let _ = writeln!(out, "buses {}", ds.bus_ids.join(" "));
    if let Some(seed) = meta.seed {
        let _ = writeln!(out, "seed {seed}");
    }
    if !meta.variants.is_empty() {
        let _ = writeln!(out, "variants {}", meta.variants.join(" "));
    }
    for line in meta.plan.lines() {
        let _ = writeln!(out, "plan {line}");
    }
    let mut start = 0;
    while start < ds.len() {
        let mask = &ds.samples[start].mask;
        let mut end = start + 1;
        while end < ds.len() && *ds.samples[end].mask == **mask {
            end += 1;
        }
        let _ = writeln!(out, "mask {start} {} {}", end - start, mask_bits(mask));
        start = end;
    }
    out
}

struct Manifest {
    samples: usize,
    classes: usize,
    buses: Vec<String>,
    masks: Vec<(usize, usize, Arc<MeasurementMask>)>,
    meta: DatasetMeta,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut m = Manifest {
        samples: 0,
        classes: 0,
        buses: Vec::new(),
        masks: Vec::new(),
        meta: DatasetMeta::default(),
    };
    let bad = |k: usize, what: &str| Error::Format(format!("manifest line {}: {what}", k + 1));
    let mut plan = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "samples" => m.samples = rest.trim().parse().map_err(|_| bad(k, "bad sample count"))?,
            "classes" => m.classes = rest.trim().parse().map_err(|_| bad(k, "bad class count"))?,
            "buses" => m.buses = rest.split_whitespace().map(String::from).collect(),
            "seed" => m.meta.seed = Some(rest.trim().parse().map_err(|_| bad(k, "bad seed"))?),
            "variants" => m.meta.variants = rest.split_whitespace().map(String::from).collect(),
            "plan" => plan.push(rest.to_string()),
            "mask" => {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(bad(k, "mask needs start, count and bits"));
                }
                let start = f[0].parse().map_err(|_| bad(k, "bad mask start"))?;
                let count = f[1].parse().map_err(|_| bad(k, "bad mask count"))?;
                let entries = f[2]
                    .chars()
                    .map(|ch| match ch {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(bad(k, "mask bits must be 0 or 1")),
                    })
                    .collect::<Result<Vec<bool>>>()?;
                let mask = MeasurementMask::from_entries(entries.len() / CHANNELS, entries)
                    .map_err(|_| bad(k, "mask length"))?;
                m.masks.push((start, count, Arc::new(mask)));
            }
            _ => return Err(bad(k, &format!("unknown key `{key}`"))),
        }
    }
    m.meta.plan = plan.join("\n");
    Ok(m)
}

pub fn write_dataset(path: &Path, ds: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest_text(ds, meta)).map_err(|e| Error::io(&mpath, e))
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (n, classes, raw) = decode(&bytes)?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&text)?;
    if manifest.samples != raw.len() || manifest.classes != classes || manifest.buses.len() != n {
        return Err(Error::Format(format!(
            "manifest describes {} samples / {} classes / {} buses, file has {} / {} / {}",
            manifest.samples,
            manifest.classes,
            manifest.buses.len(),
            raw.len(),
            classes,
            n
        )));
    }
    let mut masks: Vec<Option<Arc<MeasurementMask>>> = vec![None; raw.len()];
    for (start, count, mask) in &manifest.masks {
        if mask.n_buses() != n || start + count > raw.len() {
            return Err(Error::Format("manifest mask range out of bounds".into()));
        }
        for slot in &mut masks[*start..start + count] {
            *slot = Some(mask.clone());
        }
    }
    let mut ds = Dataset::new(manifest.buses, classes);
    for (k, ((label, x), mask)) in raw.into_iter().zip(masks).enumerate() {
        let mask = mask.ok_or_else(|| Error::Format(format!("sample {k} has no mask in the manifest")))?;
        ds.samples.push(SampleMatrix::new(x, label, mask)?);
    }
    Ok((ds, manifest.meta))
}

pub fn stats_text(stats: &ChannelStats) -> String {
    let mut out = String::from("# channel mean std count\n");
    for c in 0..CHANNELS {
        let _ = writeln!(out, "{c} {:e} {:e} {}", stats.mean[c], stats.std[c], stats.count[c]);
    }
    out
}

pub fn parse_stats(text: &str) -> Result<ChannelStats> {
    let mut stats = ChannelStats {
        mean: [0.0; CHANNELS],
        std: [1.0; CHANNELS],
        count: [0; CHANNELS],
    };
    let mut seen = [false; CHANNELS];
    for (k, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("stats line {}: expected `channel mean std count`", k + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let c: usize = f[0].parse().map_err(|_| bad())?;
        if c >= CHANNELS || seen[c] {
            return Err(bad());
        }
        seen[c] = true;
        stats.mean[c] = f[1].parse().map_err(|_| bad())?;
        stats.std[c] = f[2].parse().map_err(|_| bad())?;
        stats.count[c] = f[3].parse().map_err(|_| bad())?;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Format("stats file must list all 12 channels".into()));
    }
    Ok(stats)
}

pub fn write_stats(path: &Path, stats: &ChannelStats) -> Result<()> {
    fs::write(path, stats_text(stats)).map_err(|e| Error::io(path, e))
}

pub fn read_stats(path: &Path) -> Result<ChannelStats> {
    parse_stats(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sim::{generate_dataset, DatasetPlan};

    #[test]
    fn round_trip_through_files() {
        let m = fixtures::feeder25();
        let plan = DatasetPlan {
            samples_per_type: 1,
            ..Default::default()
        };
        let mut ds = generate_dataset(&m, &plan, 3).unwrap();
        super::super::mask_channels(&mut ds, super::super::ChannelScenario::VoltagePhasors);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.glds");
        let meta = DatasetMeta {
            seed: Some(3),
            variants: vec!["base".into()],
            plan: "samples_per_type = 1\nkinds = all".into(),
        };
        write_dataset(&path, &ds, &meta).unwrap();
        let (back, back_meta) = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back_meta, meta);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"GLDS");
        assert_eq!(bytes.len(), 24 + ds.len() * (4 + 25 * 12 * 8));
    }

    #[test]
    fn corrupt_files_rejected() {
        assert!(decode(b"GLDX").is_err());
        let ds = Dataset::new(vec!["a".into()], 1);
        let mut bytes = encode(&ds).unwrap();
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn stats_round_trip() {
        let mut stats = ChannelStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
            count: [3; CHANNELS],
        };
        stats.mean[4] = -0.123456789012345;
        stats.std[7] = 2.5e-7;
        assert_eq!(parse_stats(&stats_text(&stats)).unwrap(), stats);
        assert!(parse_stats("0 1 1 1\n").is_err());
    }
}
