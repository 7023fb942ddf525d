//! Single-file binary checkpoints: a magic string, a format version, the
//! config snapshot as TOML, then named little-endian tensor blocks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnet::{AdamState, Mlp, MlpGrads};

const MAGIC: &[u8; 8] = b"POMPCCKP";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub shape: Vec<usize>,
    pub data: BlockData,
}

impl Block {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    blocks: BTreeMap<String, Block>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint {
            config,
            blocks: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(String::as_str)
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.insert(name.into(), Block { shape, data: BlockData::F64(data) });
    }

    pub fn put_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        self.blocks.insert(
            name.into(),
            Block {
                shape: vec![data.len()],
                data: BlockData::U64(data),
            },
        );
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint block `{name}` missing")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.block(name)?.data {
            BlockData::F64(v) => Ok(v),
            BlockData::U64(_) => Err(Error::Format(format!("block `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.block(name)?.data {
            BlockData::U64(v) => Ok(v),
            BlockData::F64(_) => Err(Error::Format(format!("block `{name}` is not u64"))),
        }
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.block(name)?.shape)
    }

    pub fn put_mlp(&mut self, prefix: &str, net: &Mlp) {
        for (i, l) in net.layers().iter().enumerate() {
            self.put_f64(format!("{prefix}.layer{i}.weight"), vec![l.out_dim, l.in_dim], l.weight.clone());
            self.put_f64(format!("{prefix}.layer{i}.bias"), vec![l.out_dim], l.bias.clone());
        }
    }

    /// Loads parameters into an already-shaped net.
    pub fn get_mlp(&self, prefix: &str, net: &mut Mlp) -> Result<()> {
        for (i, l) in net.layers_mut().iter_mut().enumerate() {
            let w = format!("{prefix}.layer{i}.weight");
            let b = format!("{prefix}.layer{i}.bias");
            if self.shape(&w)? != [l.out_dim, l.in_dim] || self.shape(&b)? != [l.out_dim] {
                return Err(Error::Format(format!("shape of `{prefix}` layer {i} does not match the config")));
            }
            l.weight.copy_from_slice(self.f64s(&w)?);
            l.bias.copy_from_slice(self.f64s(&b)?);
        }
        Ok(())
    }

    fn put_grads(&mut self, prefix: &str, g: &MlpGrads) {
        for (i, l) in g.layers.iter().enumerate() {
            self.put_f64(format!("{prefix}.layer{i}.weight"), vec![l.weight.len()], l.weight.clone());
            self.put_f64(format!("{prefix}.layer{i}.bias"), vec![l.bias.len()], l.bias.clone());
        }
    }

    fn get_grads(&self, prefix: &str, g: &mut MlpGrads) -> Result<()> {
        for (i, l) in g.layers.iter_mut().enumerate() {
            let w = self.f64s(&format!("{prefix}.layer{i}.weight"))?;
            let b = self.f64s(&format!("{prefix}.layer{i}.bias"))?;
            if w.len() != l.weight.len() || b.len() != l.bias.len() {
                return Err(Error::Format(format!("shape of `{prefix}` layer {i} does not match the config")));
            }
            l.weight.copy_from_slice(w);
            l.bias.copy_from_slice(b);
        }
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, s: &AdamState) {
        for (k, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
            self.put_grads(&format!("{prefix}.m{k}"), m);
            self.put_grads(&format!("{prefix}.v{k}"), v);
        }
        self.put_u64(format!("{prefix}.step"), vec![s.step]);
    }

    pub fn get_adam(&self, prefix: &str, s: &mut AdamState) -> Result<()> {
        for (k, (m, v)) in s.m.iter_mut().zip(s.v.iter_mut()).enumerate() {
            self.get_grads(&format!("{prefix}.m{k}"), m)?;
            self.get_grads(&format!("{prefix}.v{k}"), v)?;
        }
        s.step = self.u64s(&format!("{prefix}.step"))?[0];
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_bytes(w, self.config.as_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for (name, b) in &self.blocks {
            write_bytes(w, name.as_bytes())?;
            let dtype: u8 = match b.data {
                BlockData::F64(_) => 0,
                BlockData::U64(_) => 1,
            };
            w.write_all(&[dtype])?;
            w.write_all(&(b.shape.len() as u64).to_le_bytes())?;
            for d in &b.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * b.numel());
            match &b.data {
                BlockData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                BlockData::U64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u64(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Format("config is not utf-8".into()))?;
        let n = read_u64(r)?;
        let mut blocks = BTreeMap::new();
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Format("block name is not utf-8".into()))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u64(r)? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; 8 * numel];
            r.read_exact(&mut raw)?;
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
            let data = match dtype[0] {
                0 => BlockData::F64(words.map(f64::from_le_bytes).collect()),
                1 => BlockData::U64(words.map(u64::from_le_bytes).collect()),
                d => return Err(Error::Format(format!("unknown dtype {d} in block `{name}`"))),
            };
            blocks.insert(name, Block { shape, data });
        }
        Ok(Checkpoint { config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 4, 2], Activation::Mish, Activation::Identity, &mut rng);
        let mut c = Checkpoint::new("seed = 1\n".into());
        c.put_mlp("policy", &net);
        c.put_u64("counters", vec![1, u64::MAX]);
        c.put_f64("odd", vec![2, 2], vec![f64::MIN_POSITIVE, -0.0, 1e300, f64::INFINITY]);
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let d = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(c, d);
        let mut other = Mlp::new(&[3, 4, 2], Activation::Mish, Activation::Identity, &mut rng);
        d.get_mlp("policy", &mut other).unwrap();
        assert_eq!(other, net);
        let mut wrong = Mlp::new(&[3, 5, 2], Activation::Mish, Activation::Identity, &mut rng);
        assert!(d.get_mlp("policy", &mut wrong).is_err());
        assert!(d.f64s("counters").is_err());
        assert!(d.u64s("missing").is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Vec::new();
        Checkpoint::new(String::new()).write_to(&mut bytes).unwrap();
        bytes[3] ^= 1;
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
