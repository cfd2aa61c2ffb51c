//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes   "WMCK"
//! version      u32       FORMAT_VERSION
//! header_len   u32       byte length of the header text
//! header       UTF-8     sorted `key=value` lines, LF-terminated
//!                        (net.*, manifold.*, seed)
//! record_count u32
//! record × record_count:
//!   name_len   u16
//!   name       UTF-8
//!   basis      u32       basis-point index
//!   ndim       u8
//!   dims       u32 × ndim
//!   payload    f64 × product(dims)
//! ```
//!
//! Records are written parameter-major, basis-minor, in bundle order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifold::BasisBundle;
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(network: Network, seed: u64) -> Self {
        Self { network, seed }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header_kv = self.network.spec().to_kv();
        header_kv.insert("seed".into(), self.seed.to_string());
        let header: String = header_kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

        let bundle = self.network.bundle();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let count = bundle.entries().len() * bundle.n_basis();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for e in bundle.entries() {
            for (k, p) in e.points.iter().enumerate() {
                out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
                out.extend_from_slice(e.name.as_bytes());
                out.extend_from_slice(&(k as u32).to_le_bytes());
                out.push(p.ndim() as u8);
                for &d in p.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in p.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|_| Error::format("header is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(format!("bad header line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let seed = kv
            .get("seed")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("header lacks a seed"))?;
        let spec = NetworkSpec::from_kv(&kv)?;

        let count = r.u32()? as usize;
        let mut grouped: Vec<(String, Vec<Tensor>)> = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("record name is not UTF-8"))?
                .to_string();
            let basis = r.u32()? as usize;
            let ndim = r.take(1)?[0] as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let payload = r.take(numel * 8)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(&dims, data)?;
            match grouped.last_mut() {
                Some((n, pts)) if *n == name => {
                    if basis != pts.len() {
                        return Err(Error::format(format!("record {name} basis {basis} out of order")));
                    }
                    pts.push(tensor);
                }
                _ => {
                    if basis != 0 {
                        return Err(Error::format(format!("record {name} starts at basis {basis}")));
                    }
                    grouped.push((name, vec![tensor]));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after last record"));
        }
        let mut bundle = BasisBundle::new();
        for (name, pts) in grouped {
            bundle.push(name, pts)?;
        }
        let network = Network::from_parts(spec, bundle)?;
        Ok(Self { network, seed })
    }

    /// Writes to a sibling temp file, syncs, then renames over `path`, so an
    /// interrupted write never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
