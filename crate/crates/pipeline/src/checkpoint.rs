//! Binary checkpoints: `MACMDCK1`, a u32 record count, then per record a u16
//! name length, the name, a u8 rank, u32 dims and little-endian f32 data.
//! Normalization running statistics are stored as `{norm}.running_mean` and
//! `{norm}.running_var`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use macmd_core::meab::DEFAULT_REDUCTION;
use macmd_core::model::MacmdConfig;
use macmd_core::{ParamStore, Scalar};

use crate::error::{PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"MACMDCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let mut records: Vec<Record> = store
            .iter()
            .map(|(_, p)| Record {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        for (name, state) in store.norms() {
            for (suffix, stats) in [("running_mean", &state.running_mean), ("running_var", &state.running_var)] {
                records.push(Record {
                    name: format!("{name}.{suffix}"),
                    shape: vec![stats.len()],
                    data: stats.iter().map(|v| v.as_f64() as f32).collect(),
                });
            }
        }
        Self { records }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let count = u32::try_from(self.records.len()).map_err(|_| bad("too many records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let len = u16::try_from(r.name.len()).map_err(|_| bad(format!("name too long: {}", r.name)))?;
            let rank = u8::try_from(r.shape.len()).map_err(|_| bad(format!("rank too large: {}", r.name)))?;
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(bad(format!("record {} has {} values for shape {:?}", r.name, r.data.len(), r.shape)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(rank);
            for &d in &r.shape {
                let d = u32::try_from(d).map_err(|_| bad(format!("extent too large: {}", r.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic, not a checkpoint file"));
        }
        let count = rd.u32("record count")?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(rd.take(2, "name length")?.try_into().expect("2 bytes"));
            let name = std::str::from_utf8(rd.take(len as usize, "name")?)
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate record `{name}`")));
            }
            let rank = rd.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = rd.take(n.checked_mul(4).ok_or_else(|| bad("record too large"))?, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            records.push(Record { name, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after the last record", bytes.len() - rd.pos)));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| PipelineError::io(path, e))
    }

    /// Unreadable files are checkpoint errors, not data errors.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Copies every record into `store`. Any name or shape disagreement
    /// between the two is rejected, naming the first offending tensor.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut expected: Vec<(String, Vec<usize>)> =
            store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        for (name, s) in store.norms() {
            expected.push((format!("{name}.running_mean"), vec![s.channels()]));
            expected.push((format!("{name}.running_var"), vec![s.channels()]));
        }
        for (name, shape) in &expected {
            match self.get(name) {
                None => return Err(bad(format!("tensor `{name}` missing from checkpoint"))),
                Some(r) if &r.shape != shape => {
                    return Err(bad(format!("tensor `{name}` has shape {:?}, model expects {:?}", r.shape, shape)))
                }
                Some(_) => {}
            }
        }
        let known: HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(r) = self.records.iter().find(|r| !known.contains(r.name.as_str())) {
            return Err(bad(format!("checkpoint tensor `{}` does not exist in the model", r.name)));
        }
        for r in &self.records {
            let values = r.data.iter().map(|&v| T::of(v as f64));
            if let Some(stem) = r.name.strip_suffix(".running_mean").filter(|s| store.norm_by_name(s).is_some()) {
                let st = store.norm_by_name_mut(stem).expect("checked");
                st.running_mean = values.collect();
            } else if let Some(stem) = r.name.strip_suffix(".running_var").filter(|s| store.norm_by_name(s).is_some()) {
                let st = store.norm_by_name_mut(stem).expect("checked");
                st.running_var = values.collect();
            } else {
                let id = store.id(&r.name).expect("checked");
                for (dst, v) in store.get_mut(id).value.data_mut().iter_mut().zip(values) {
                    *dst = v;
                }
            }
        }
        Ok(())
    }

    /// Recovers the architecture from tensor names and shapes.
    pub fn infer_config(&self) -> Result<MacmdConfig> {
        let shape = |name: &str| {
            self.get(name).map(|r| r.shape.clone()).ok_or_else(|| bad(format!("tensor `{name}` missing from checkpoint")))
        };
        let mut channels = [0; 4];
        for (s, c) in channels.iter_mut().enumerate() {
            *c = shape(&format!("encoder.stage{}.conv0.weight", s + 1))?[0];
        }
        let in_channels = shape("encoder.stage1.conv0.weight")?[1];
        let num_classes = shape("decoder.seghead4.pred.weight")?[0];
        let has = |prefix: &str| self.records.iter().any(|r| r.name.starts_with(prefix));
        let use_meab = has("decoder.meab.");
        let reduction = if use_meab {
            let hidden = shape("decoder.meab.ca_fc1.weight")?[0];
            channels[3] / hidden.max(1)
        } else {
            DEFAULT_REDUCTION
        };
        Ok(MacmdConfig {
            in_channels,
            channels,
            num_classes,
            reduction,
            use_mcag_apm: has("decoder.mcag"),
            use_msccm: has("decoder.msccm."),
            use_meab,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use macmd_core::model::MacmdModel;

    fn tiny() -> MacmdConfig {
        MacmdConfig { reduction: 4, ..MacmdConfig::with_channels([16, 16, 32, 32], 3) }
    }

    #[test]
    fn empty_store_is_twelve_bytes() {
        let bytes = Checkpoint::from_store(&ParamStore::<f32>::new(0)).to_bytes().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..8], MAGIC);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().records.is_empty());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ps = ParamStore::<f32>::new(5);
        MacmdModel::new(&mut ps, tiny()).unwrap();
        ps.norm_by_name_mut("decoder.fusion.bn1").unwrap().running_var[3] = 0.123;
        let ck = Checkpoint::from_store(&ps);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(ck, back);
        let mut fresh = ParamStore::<f32>::new(99);
        MacmdModel::new(&mut fresh, back.infer_config().unwrap()).unwrap();
        back.apply_to(&mut fresh).unwrap();
        for ((_, a), (_, b)) in ps.iter().zip(fresh.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        assert_eq!(fresh.norm_by_name("decoder.fusion.bn1").unwrap().running_var[3], 0.123);
    }

    #[test]
    fn config_inference() {
        let cfg = MacmdConfig { use_msccm: false, ..tiny() };
        let mut ps = ParamStore::<f32>::new(0);
        MacmdModel::new(&mut ps, cfg.clone()).unwrap();
        assert_eq!(Checkpoint::from_store(&ps).infer_config().unwrap(), cfg);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut ps = ParamStore::<f32>::new(0);
        MacmdModel::new(&mut ps, tiny()).unwrap();
        let ck = Checkpoint::from_store(&ps);
        let bytes = ck.to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("magic"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut dup = ck.clone();
        dup.records.push(dup.records[0].clone());
        let err = Checkpoint::from_bytes(&dup.to_bytes().unwrap()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn renamed_tensor_is_named() {
        let mut ps = ParamStore::<f32>::new(0);
        MacmdModel::new(&mut ps, tiny()).unwrap();
        let mut ck = Checkpoint::from_store(&ps);
        let old = ck.records[7].name.clone();
        ck.records[7].name = "renamed.weight".into();
        let err = ck.apply_to(&mut ps).unwrap_err().to_string();
        assert!(err.contains(&old), "{err}");
    }
}
