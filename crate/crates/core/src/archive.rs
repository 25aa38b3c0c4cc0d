//! `MIEW` weight archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MIEW" | version u16 | header_len u32 | header (UTF-8 JSON)
//! | count u32 | count × (name_len u16 | name | dtype u8 | rank u8 | dims u32×rank | f32×Πdims)
//! ```
//!
//! The header carries a CRC-32 of the whole file, computed with the header's
//! eight checksum digits set to `'0'`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_file, write_file};
use crate::error::{Error, Result};
use crate::network::{Form, FusedNet, MobileIeNet, ModelConfig, TrainNet};
use crate::params::{Role, Visit};

pub const MAGIC: &[u8; 4] = b"MIEW";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
const CRC_KEY: &str = "\"crc32\":\"";
const CRC_PLACEHOLDER: &str = "00000000";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub form: Form,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Whether batch-norm running statistics hold real values.
    #[serde(default)]
    pub bn_tracked: bool,
    pub crc32: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// An archive as stored: the header is kept verbatim so a read/write cycle
/// reproduces the file byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header_json: String,
    pub entries: Vec<Entry>,
}

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        msg: msg.into(),
    })
}

fn crc_digits(header: &str) -> Option<std::ops::Range<usize>> {
    let at = header.find(CRC_KEY)? + CRC_KEY.len();
    (header.len() >= at + 8).then_some(at..at + 8)
}

impl Archive {
    pub fn new(header: &Header, entries: Vec<Entry>) -> Result<Self> {
        let mut h = header.clone();
        h.crc32 = CRC_PLACEHOLDER.to_string();
        let header_json = serde_json::to_string(&h).map_err(|e| Error::Argument(format!("header: {e}")))?;
        Ok(Self { header_json, entries })
    }

    pub fn header(&self) -> Result<Header> {
        serde_json::from_str(&self.header_json).map_err(|e| Error::Format {
            offset: 10 + e.column().saturating_sub(1),
            msg: format!("header: {e}"),
        })
    }

    /// Scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let digits = crc_digits(&self.header_json)
            .ok_or_else(|| Error::Argument("header lacks a crc32 field".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header_json.len() as u32).to_le_bytes());
        let header_at = out.len();
        out.extend_from_slice(self.header_json.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let expect: usize = e.dims.iter().product();
            if expect != e.data.len() || e.dims.is_empty() || e.dims.len() > u8::MAX as usize {
                return Err(Error::Argument(format!("entry {} has inconsistent dims", e.name)));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let span = header_at + digits.start..header_at + digits.end;
        out[span.clone()].copy_from_slice(CRC_PLACEHOLDER.as_bytes());
        let crc = crc32fast::hash(&out);
        out[span].copy_from_slice(format!("{crc:08x}").as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return fmt_err(0, "bad magic (expected MIEW)");
        }
        let version = r.u16("format version")?;
        if version != FORMAT_VERSION {
            return fmt_err(4, format!("unsupported format version {version}"));
        }
        let header_len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let raw = r.take(header_len, "header")?;
        let header_json = match std::str::from_utf8(raw) {
            Ok(s) => s.to_string(),
            Err(e) => return fmt_err(header_at + e.valid_up_to(), "header is not UTF-8"),
        };
        let header: Header = serde_json::from_str(&header_json).map_err(|e| Error::Format {
            offset: header_at + e.column().saturating_sub(1),
            msg: format!("header: {e}"),
        })?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for _ in 0..count {
            let entry_at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = match std::str::from_utf8(r.take(name_len, "entry name")?) {
                Ok(s) => s.to_string(),
                Err(e) => return fmt_err(name_at + e.valid_up_to(), "entry name is not UTF-8"),
            };
            if seen.insert(name.clone(), entry_at).is_some() {
                return fmt_err(entry_at, format!("duplicate entry {name:?}"));
            }
            let dtype_at = r.pos;
            if r.u8("dtype")? != DTYPE_F32 {
                return fmt_err(dtype_at, "unsupported dtype");
            }
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return fmt_err(rank_at, "rank 0 entry");
            }
            let mut dims = Vec::with_capacity(rank);
            let mut total = 1usize;
            for _ in 0..rank {
                let dim_at = r.pos;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return fmt_err(dim_at, "zero dimension");
                }
                total = match total.checked_mul(d) {
                    Some(t) => t,
                    None => return fmt_err(dim_at, "entry size overflows"),
                };
                dims.push(d);
            }
            let payload_at = r.pos;
            let nbytes = match total.checked_mul(4) {
                Some(n) => n,
                None => return fmt_err(payload_at, "entry size overflows"),
            };
            let payload = r.take(nbytes, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return fmt_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let Some(digits) = crc_digits(&header_json) else {
            return fmt_err(header_at, "header lacks a crc32 field");
        };
        let stored = u32::from_str_radix(&header.crc32, 16).ok().filter(|_| header.crc32.len() == 8);
        let crc_at = header_at + digits.start;
        if &header_json[digits.clone()] != header.crc32 {
            return fmt_err(crc_at, "ambiguous crc32 field");
        }
        let mut zeroed = bytes.to_vec();
        zeroed[crc_at..crc_at + 8].copy_from_slice(CRC_PLACEHOLDER.as_bytes());
        match stored {
            Some(v) if v == crc32fast::hash(&zeroed) => Ok(Self { header_json, entries }),
            Some(_) => fmt_err(crc_at, "checksum mismatch"),
            None => fmt_err(crc_at, "malformed crc32 field"),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => fmt_err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes at {}, file has {}", self.pos, self.bytes.len()),
            ),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn collect_entries<V: Visit<f32> + ?Sized>(model: &mut V) -> Vec<Entry> {
    let mut out = Vec::new();
    model.visit("", &mut |name, dims, data, _| {
        out.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: data.to_vec(),
        })
    });
    out
}

/// Snapshot a network (parameters, frozen priors and running statistics).
pub fn archive_from_net(net: &mut MobileIeNet<f32>, epoch: usize, metrics: BTreeMap<String, f64>) -> Result<Archive> {
    let bn_tracked = match net {
        MobileIeNet::Train(n) => n.is_tracked(),
        MobileIeNet::Fused(_) => false,
    };
    let header = Header {
        config: net.config().clone(),
        form: net.form(),
        epoch,
        metrics,
        bn_tracked,
        crc32: String::new(),
    };
    Archive::new(&header, collect_entries(net))
}

fn load_into<V: Visit<f32> + ?Sized>(model: &mut V, entries: &[Entry]) -> Result<()> {
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut used = 0;
    let mut err = None;
    model.visit("", &mut |name, dims, data, _| {
        if err.is_some() {
            return;
        }
        match by_name.get(name) {
            None => err = Some(format!("archive lacks {name}")),
            Some(e) if e.dims != dims => err = Some(format!("{name}: archive dims {:?}, model {:?}", e.dims, dims)),
            Some(e) => {
                data.copy_from_slice(&e.data);
                used += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(Error::Argument(e));
    }
    if used != entries.len() {
        let mut names = Vec::new();
        model.visit("", &mut |name, _, _, _| names.push(name.to_string()));
        let extra: Vec<&str> = entries
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !names.iter().any(|m| m == n))
            .collect();
        return Err(Error::Argument(format!("archive has unexpected entries {extra:?}")));
    }
    Ok(())
}

pub fn net_from_archive(archive: &Archive) -> Result<(MobileIeNet<f32>, Header)> {
    let header = archive.header()?;
    if header.config.channels == 0 {
        return Err(Error::Argument("archive declares zero channels".into()));
    }
    let net = match header.form {
        Form::Train => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let mut n = TrainNet::<f32>::new(header.config.clone(), &mut rng);
            if archive.entries.iter().any(|e| e.name.ends_with(".w_pre")) {
                n.freeze_all();
            }
            load_into(&mut n, &archive.entries)?;
            if header.bn_tracked {
                n.set_tracked();
            }
            MobileIeNet::Train(n)
        }
        Form::Fused => {
            let mut n = FusedNet::<f32>::zeros(header.config.clone());
            load_into(&mut n, &archive.entries)?;
            MobileIeNet::Fused(n)
        }
    };
    Ok((net, header))
}

/// Entries holding model parameters (running statistics excluded).
pub fn parameter_total(net: &mut MobileIeNet<f32>) -> usize {
    crate::params::count(net, &[Role::Trainable, Role::Frozen])
}
