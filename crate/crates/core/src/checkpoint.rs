//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"VSAMCKPT" | u32 version | u64 len | config text (key=value lines)
//! u64 tensor count | per tensor: u32 name len | name | u32 rank | u64 dims... | f64 payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VsamParameters};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VSAMCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters plus the run configuration they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: VsamParameters,
    /// Extra `key=value` pairs echoed alongside the model config.
    pub echo: Vec<(String, String)>,
}

/// Renders `key=value` lines.
pub fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl Checkpoint {
    pub fn new(params: VsamParameters, echo: Vec<(String, String)>) -> Self {
        Checkpoint { params, echo }
    }

    pub fn config_text(&self) -> String {
        let mut pairs = self.params.config().to_pairs();
        pairs.extend(self.echo.iter().cloned());
        format_pairs(&pairs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text = self.config_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let tensors: Vec<_> = self.params.iter().collect();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let text_len = read_len(&mut r)?;
        let text = String::from_utf8(take(&mut r, text_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let pairs = parse_pairs(&text)?;
        let config = ModelConfig::from_pairs(&pairs)?;
        let echo = pairs
            .into_iter()
            .filter(|(k, _)| !k.starts_with("model."))
            .collect();

        let count = read_len(&mut r)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let shape = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = take(&mut r, n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let params = VsamParameters::from_tensors(config, tensors)?;
        Ok(Checkpoint { params, echo })
    }

    /// Writes to a sibling temp file and renames it over `path`, so a failed
    /// write never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(read_array(r)?))
        .map_err(|_| Error::Checkpoint("length overflows usize".into()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};

    fn sample() -> Checkpoint {
        let p = VsamParameters::init(ModelConfig::tiny(), 3, None).unwrap();
        Checkpoint::new(p, vec![("train.seed".into(), "7".into())])
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn rejects_truncation_bad_magic_and_shape_mismatch() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

        // claim a different latent size in the config echo
        let c = sample();
        let text = c.config_text().replace("model.latent_dim=4", "model.latent_dim=5");
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        forged.extend_from_slice(&(text.len() as u64).to_le_bytes());
        forged.extend_from_slice(text.as_bytes());
        let orig_text_len = c.config_text().len();
        forged.extend_from_slice(&bytes[8 + 4 + 8 + orig_text_len..]);
        assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn baseline_checkpoints_round_trip() {
        for kind in [ModelKind::DetAttention, ModelKind::MeanEmbedding] {
            let cfg = ModelConfig { kind, ..ModelConfig::tiny() };
            let c = Checkpoint::new(VsamParameters::init(cfg, 1, None).unwrap(), vec![]);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn pairs_parse_comments_and_errors() {
        let m = parse_pairs("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(m["a"], "1");
        assert_eq!(m["b"], "x=y");
        assert!(parse_pairs("novalue\n").is_err());
    }
}
