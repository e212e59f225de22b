//! `RCKP` checkpoint container.
//!
//! Layout (little-endian): magic `RCKP`, `u32` version, `u32` entry count, then
//! per entry a `u16` name length, the UTF-8 name and an embedded `TNS1` tensor.
//! Running moments are stored as `{bn}.running_mean` / `{bn}.running_var`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::io as tns;
use crate::tensor::{RunningMoments, Tensor};

pub const RCKP_MAGIC: &[u8; 4] = b"RCKP";
pub const RCKP_VERSION: u32 = 1;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

/// Ordered name → tensor entries of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint entry `{name}` is missing")))
    }

    /// Parameters followed by running moments.
    pub fn from_store(store: &ParameterStore<f32>) -> Self {
        let mut ck = Self::new();
        ck.extend_with_store(store);
        ck
    }

    pub fn extend_with_store(&mut self, store: &ParameterStore<f32>) {
        for (name, t) in store.params() {
            self.insert(name, t.clone());
        }
        for (name, m) in store.moments() {
            self.insert(format!("{name}{MEAN_SUFFIX}"), m.mean.clone());
            self.insert(format!("{name}{VAR_SUFFIX}"), m.var.clone());
        }
    }

    /// Overwrites every parameter and moment of `store` from this checkpoint.
    /// Names and dims must match the template exactly.
    pub fn load_into(&self, store: &mut ParameterStore<f32>) -> Result<()> {
        fn fill(dst: &mut Tensor<f32>, src: &Tensor<f32>, name: &str) -> Result<()> {
            if dst.dims() != src.dims() {
                return Err(Error::Format(format!(
                    "checkpoint entry `{name}` has dims {:?}, model expects {:?}",
                    src.dims(),
                    dst.dims()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
            Ok(())
        }
        for name in store.param_names() {
            let src = self.get(&name)?;
            fill(store.param_mut(&name).expect("name from store"), src, &name)?;
        }
        let names: Vec<String> = store.moments().map(|(k, _)| k.to_string()).collect();
        for name in names {
            let mean = self.get(&format!("{name}{MEAN_SUFFIX}"))?;
            let var = self.get(&format!("{name}{VAR_SUFFIX}"))?;
            let m: &mut RunningMoments<f32> = store.moment_table_mut().get_mut(&name).expect("name from store");
            fill(&mut m.mean, mean, &name)?;
            fill(&mut m.var, var, &name)?;
        }
        Ok(())
    }

    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(RCKP_MAGIC)?;
        out.write_all(&RCKP_VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            tns::write_f32(out, t)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let trunc = |e: std::io::Error| Error::Format(format!("truncated RCKP stream: {e}"));
        let mut head = [0u8; 12];
        input.read_exact(&mut head).map_err(trunc)?;
        if &head[..4] != RCKP_MAGIC {
            return Err(Error::Format(format!("bad RCKP magic {:?}", &head[..4])));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != RCKP_VERSION {
            return Err(Error::Format(format!("unsupported RCKP version {version}")));
        }
        let count = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        let mut ck = Self::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            input.read_exact(&mut len).map_err(trunc)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut name).map_err(trunc)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?;
            let t = tns::read(input)?.into_f32()?;
            if ck.entries.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate checkpoint entry `{name}`")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = bytes.as_slice();
        let ck = Self::read(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!("{}: trailing bytes after checkpoint", path.display())));
        }
        Ok(ck)
    }
}
