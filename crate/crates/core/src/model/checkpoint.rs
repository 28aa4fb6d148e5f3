//! SFMB1 checkpoint files.
//!
//! Layout: magic `SFMB`, version u8, nine little-endian u32 config fields,
//! phase u8 (0 source, 1 adapted), seed u64 LE, record count u32 LE, then per
//! record a u16 LE name length, the UTF-8 name and one TNSR1 tensor (f64).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_exact_or_truncated, read_tnsr, write_tnsr, Dtype, Tensor};

const MAGIC: &[u8; 4] = b"SFMB";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Source,
    Adapted,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Source => 0,
            Phase::Adapted => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Phase::Source),
            1 => Ok(Phase::Adapted),
            _ => Err(Error::InvalidData(format!("unknown phase tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Source => "source",
            Phase::Adapted => "adapted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u8,
    pub model: Model,
    pub seed: u64,
    pub phase: Phase,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, phase: Phase) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            seed,
            phase,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.version])?;
        for f in self.model.config.fields() {
            w.write_all(&f.to_le_bytes())?;
        }
        w.write_all(&[self.phase.tag()])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.model.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.model.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::invalid("save_checkpoint", "tensor name too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tnsr(w, t, Dtype::F64)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic { expected: "SFMB" });
        }
        let mut b1 = [0u8; 1];
        read_exact_or_truncated(r, &mut b1)?;
        if b1[0] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: b1[0],
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut fields = [0u32; 9];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            read_exact_or_truncated(r, &mut b)?;
            *f = u32::from_le_bytes(b);
        }
        let config = ModelConfig::from_fields(fields);
        config
            .validate()
            .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        read_exact_or_truncated(r, &mut b1)?;
        let phase = Phase::from_tag(b1[0])?;
        let mut b8 = [0u8; 8];
        read_exact_or_truncated(r, &mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut b4 = [0u8; 4];
        read_exact_or_truncated(r, &mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            read_exact_or_truncated(r, &mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact_or_truncated(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::InvalidData("tensor name is not UTF-8".into()))?;
            let (t, _) = read_tnsr(r)?;
            tensors.insert(name, t);
        }
        check_against_config(config, &tensors)?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            model: Model { config, tensors },
            seed,
            phase,
        })
    }
}

fn check_against_config(config: ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let template = Model::template(config)?;
    for (name, shape) in &template {
        match tensors.get(name) {
            None => return Err(Error::ConfigMismatch(format!("missing tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !template.contains_key(*k)) {
        return Err(Error::ConfigMismatch(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    ckpt.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::read_from(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            grid_h: 2,
            grid_w: 2,
            patch_dim: 3,
            embed_dim: 4,
            n_encoder_blocks: 1,
            state_dim: 2,
            n_chvss: 1,
            n_classes: 3,
            chgroup_width: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Checkpoint::new(Model::new(cfg, &mut rng).unwrap(), 9, Phase::Source)
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut b = Vec::new();
        c.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let b = bytes(&c);
        let back = Checkpoint::read_from(&mut b.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn errors_are_distinct() {
        let b = bytes(&sample());
        let mut bad = b.clone();
        bad[0] = b'X';
        let e = Checkpoint::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(e.to_string().contains("bad magic"));
        let mut bad = b.clone();
        bad[4] = 7;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
        assert!(matches!(
            Checkpoint::read_from(&mut &b[..b.len() - 3]),
            Err(Error::Truncated)
        ));
        // claim embed_dim 8 while the tensors are sized for 4
        let mut bad = b;
        bad[5 + 3 * 4] = 8;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
