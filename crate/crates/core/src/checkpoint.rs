//! Versioned binary checkpoints.
//!
//! All integers and floats are little-endian. Strings are a `u32` byte
//! length followed by UTF-8 bytes.
//!
//! ```text
//! magic            8 bytes  "AJEMCKPT"
//! format_version   u32      currently 1
//! arch             u8       0 = mlp2d, 1 = convtiny, 2 = linear
//! flags            u8       bit 0 = partial, bit 1 = mixture present
//! input_dim        u32
//! num_classes      u32
//! rng_seed         u64
//! config_count     u32, then config_count x (key string, value string)
//! param_count      u32, then per parameter in name order:
//!                    name string, ndim u32, ndim x u32 dims, prod(dims) x f64
//! [mixture]        variance_floor f64, then per class:
//!                    input_dim x f64 mean, input_dim x f64 variance
//! crc32            u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ArchTag, Classifier, Params};
use crate::trainer::MixtureStats;

pub const MAGIC: &[u8; 8] = b"AJEMCKPT";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_PARTIAL: u8 = 1;
const FLAG_MIXTURE: u8 = 2;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub classifier: Classifier,
    pub mixture: Option<MixtureStats>,
    pub rng_seed: u64,
    pub config: Vec<(String, String)>,
    pub partial: bool,
}

impl Checkpoint {
    pub fn new(
        classifier: Classifier,
        mixture: Option<MixtureStats>,
        rng_seed: u64,
        config: Vec<(String, String)>,
    ) -> Self {
        Self {
            classifier,
            mixture,
            rng_seed,
            config,
            partial: false,
        }
    }

    pub fn partial(mut self) -> Self {
        self.partial = true;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.classifier;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        out.push(c.arch().code());
        let mut flags = 0;
        if self.partial {
            flags |= FLAG_PARTIAL;
        }
        if self.mixture.is_some() {
            flags |= FLAG_MIXTURE;
        }
        out.push(flags);
        put_u32(&mut out, c.input_dim() as u32);
        put_u32(&mut out, c.num_classes() as u32);
        out.extend_from_slice(&self.rng_seed.to_le_bytes());

        put_u32(&mut out, self.config.len() as u32);
        for (k, v) in &self.config {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }

        put_u32(&mut out, c.params().len() as u32);
        for (name, t) in c.params().iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f64s(&mut out, t.data());
        }

        if let Some(m) = &self.mixture {
            out.extend_from_slice(&m.variance_floor.to_le_bytes());
            for (mean, var) in m.means.iter().zip(&m.variances) {
                put_f64s(&mut out, mean.data());
                put_f64s(&mut out, var.data());
            }
        }

        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let arch_code = r.u8()?;
        let arch = ArchTag::from_code(arch_code)
            .ok_or_else(|| CheckpointError::Malformed(format!("arch code {arch_code}")))?;
        let flags = r.u8()?;
        if flags & !(FLAG_PARTIAL | FLAG_MIXTURE) != 0 {
            return Err(CheckpointError::Malformed(format!("flags {flags:#04x}")).into());
        }
        let input_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        if input_dim == 0 || num_classes < 2 {
            return Err(CheckpointError::Malformed(format!("dims {input_dim} x {num_classes}")).into());
        }
        let rng_seed = r.u64()?;

        let n_config = r.u32()? as usize;
        let mut config = Vec::new();
        for _ in 0..n_config {
            let k = r.string()?;
            let v = r.string()?;
            config.push((k, v));
        }

        let n_params = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(CheckpointError::Malformed(format!("`{name}` has {ndim} dims")).into());
            }
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = len.ok_or_else(|| CheckpointError::Malformed(format!("`{name}` too large")))?;
            let data = r.f64s(len)?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
            params.insert(&name, t);
        }

        let mixture = if flags & FLAG_MIXTURE != 0 {
            let variance_floor = r.f64()?;
            let mut means = Vec::new();
            let mut variances = Vec::new();
            for _ in 0..num_classes {
                means.push(Tensor::vector(r.f64s(input_dim)?));
                variances.push(Tensor::vector(r.f64s(input_dim)?));
            }
            Some(MixtureStats {
                means,
                variances,
                variance_floor,
            })
        } else {
            None
        };

        let body_end = r.pos;
        let rest = bytes.len() - body_end;
        if rest < 4 {
            return Err(CheckpointError::Truncated.into());
        }
        if rest > 4 {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest - 4)).into());
        }
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed }.into());
        }

        let classifier = Classifier::from_params(arch, input_dim, num_classes, params)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self {
            classifier,
            mixture,
            rng_seed,
            config,
            partial: flags & FLAG_PARTIAL != 0,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(Error::from)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated.into());
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Malformed("non-utf8 string".into()).into())
    }
}
