//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "IRDCKPT1"
//! u32     metadata length in bytes
//! bytes   metadata (UTF-8 JSON, caller-defined)
//! u32     entry count
//! entry*  u32 name length, name bytes,
//!         u32 ndim, ndim × u64 extents,
//!         numel × f64 values
//! ```
//!
//! Entries are written sorted by name so identical weights always produce
//! identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IRDCKPT1";

pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| self.entries[a].name.cmp(&self.entries[b].name));
        for pair in order.windows(2) {
            if self.entries[pair[0]].name == self.entries[pair[1]].name {
                return Err(Error::Contract(format!(
                    "duplicate checkpoint entry '{}'",
                    self.entries[pair[0]].name
                )));
            }
        }

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for &i in &order {
            let e = &self.entries[i];
            let numel: usize = e.shape.iter().product();
            if numel != e.data.len() {
                return Err(Error::Contract(format!(
                    "entry '{}' shape {:?} does not match {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;

        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".to_string()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                let v = f64::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "checkpoint entry '{name}' contains a non-finite value"
                    )));
                }
                data.push(v);
            }
            entries.push(Entry { name, shape, data });
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let ck = Checkpoint {
            meta: serde_json::json!({"epoch": 3, "kind": "test"}),
            entries: vec![
                Entry { name: "b".into(), shape: vec![2], data: vec![-1.5, 2.25] },
                Entry { name: "a".into(), shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] },
            ],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        // entries come back sorted by name
        assert_eq!(back.entries[0].name, "a");
        assert_eq!(back.entries[1].name, "b");
        assert_eq!(back.get("a").unwrap().shape, vec![2, 2]);
        assert_eq!(back.get("b").unwrap().data, vec![-1.5, 2.25]);
    }

    #[test]
    fn save_is_byte_deterministic_regardless_of_entry_order() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        let a = Entry { name: "a".into(), shape: vec![1], data: vec![0.5] };
        let b = Entry { name: "b".into(), shape: vec![1], data: vec![7.0] };
        let meta = serde_json::json!({"v": 1});
        Checkpoint {
            meta: meta.clone(),
            entries: vec![
                Entry { name: a.name.clone(), shape: a.shape.clone(), data: a.data.clone() },
                Entry { name: b.name.clone(), shape: b.shape.clone(), data: b.data.clone() },
            ],
        }
        .save(&p1)
        .unwrap();
        Checkpoint { meta, entries: vec![b, a] }.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_garbage_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let dup = Checkpoint {
            meta: serde_json::json!({}),
            entries: vec![
                Entry { name: "x".into(), shape: vec![1], data: vec![0.0] },
                Entry { name: "x".into(), shape: vec![1], data: vec![1.0] },
            ],
        };
        assert!(dup.save(&dir.path().join("dup.ckpt")).is_err());
    }
}
