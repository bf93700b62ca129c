//! Training checkpoints: an index header followed by concatenated named
//! tensor records.
//!
//! Layout (little endian):
//!
//! ```text
//! "INOC" | version u8 | step u64 | config_len u32 | config text
//!        | count u32 | (name_len u16 | name | offset u64 | length u64)*
//!        | records
//! ```
//!
//! Offsets are relative to the start of the record area. Record names are
//! `student/<param>`, `teacher/<param>`, `teacher.center.cls`,
//! `teacher.center.patch`, `opt/m/<param>` and `opt/v/<param>`; the
//! optimizer's own step count is stored as `opt.step`, a one-element f64
//! tensor.

use std::path::Path;

use crate::encoder::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::record::{tensor_to_bytes, ByteReader};
use crate::numerics::{Real, Tensor};
use crate::objectives::TeacherState;
use crate::optimizer::OptState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"INOC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Number of training steps taken.
    pub step: u64,
    /// Echo of the run configuration text.
    pub config: String,
    pub student: ParamStore<T>,
    pub teacher: TeacherState<T>,
    pub opt: OptState<T>,
}

fn push_named(entries: &mut Vec<(String, Vec<u8>)>, prefix: &str, store: &ParamStore<impl Real>) {
    for (name, t) in store.iter() {
        entries.push((format!("{prefix}{name}"), tensor_to_bytes(t)));
    }
}

fn collect_prefixed<T: Real>(
    records: &[(String, Tensor<T>)],
    prefix: &str,
) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, t) in records {
        if let Some(rest) = name.strip_prefix(prefix) {
            store.push(rest, t.clone());
        }
    }
    store
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
        push_named(&mut entries, "student/", &self.student);
        push_named(&mut entries, "teacher/", &self.teacher.params);
        entries.push(("teacher.center.cls".into(), tensor_to_bytes(&self.teacher.center_cls)));
        entries.push((
            "teacher.center.patch".into(),
            tensor_to_bytes(&self.teacher.center_patch),
        ));
        push_named(&mut entries, "opt/m/", &self.opt.m);
        push_named(&mut entries, "opt/v/", &self.opt.v);
        entries.push((
            "opt.step".into(),
            tensor_to_bytes(&Tensor::<f64>::scalar(self.opt.step as f64)),
        ));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, bytes) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
        }
        for (_, bytes) in entries {
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("checkpoint", reason);
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let clen = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| bad("config echo is not UTF-8".into()))?
            .to_owned();
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| bad("record name is not UTF-8".into()))?
                .to_owned();
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            index.push((name, offset, len));
        }
        let area = &bytes[r.position()..];
        let mut records: Vec<(String, Tensor<T>)> = Vec::with_capacity(count);
        let mut opt_step = None;
        for (name, offset, len) in index {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= area.len())
                .ok_or_else(|| bad(format!("record {name} runs past the end of the file")))?;
            let mut rr = ByteReader::new(&area[offset..end], "checkpoint record");
            let t = rr.tensor()?;
            if name == "opt.step" {
                opt_step = Some(t.cast::<f64>().item() as u64);
                continue;
            }
            if t.dtype() != T::DTYPE {
                return Err(bad(format!("{name} stored as {}", t.dtype().name())));
            }
            records.push((name, t.cast()));
        }
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(format!("missing record {name}")))
        };
        let student = collect_prefixed(&records, "student/");
        let teacher = TeacherState {
            params: collect_prefixed(&records, "teacher/"),
            center_cls: find("teacher.center.cls")?,
            center_patch: find("teacher.center.patch")?,
        };
        let opt = OptState {
            m: collect_prefixed(&records, "opt/m/"),
            v: collect_prefixed(&records, "opt/v/"),
            step: opt_step.ok_or_else(|| bad("missing record opt.step".into()))?,
        };
        student.check_layout(&teacher.params)?;
        student.check_layout(&opt.m)?;
        student.check_layout(&opt.v)?;
        Ok(Self {
            step,
            config,
            student,
            teacher,
            opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
