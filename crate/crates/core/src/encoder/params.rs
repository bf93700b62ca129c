use crate::error::{Error, Result};
use crate::numerics::record::{write_tensor, ByteReader};
use crate::numerics::{Real, Tensor};

/// Ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Same names in the same order with the same shapes.
    pub fn check_layout<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid(format!(
                "parameter lists differ ({} vs {} entries)",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "{}: shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Appends `count | (name_len u16, name, tensor record)*` to `out`,
    /// with every name prefixed by `prefix`.
    pub fn write(&self, prefix: &str, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            let full = format!("{prefix}{name}");
            out.extend_from_slice(&(full.len() as u16).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            write_tensor(t, out);
        }
    }

    /// Inverse of [`ParamStore::write`]; the prefix is checked and stripped.
    pub fn read(prefix: &str, r: &mut ByteReader<'_>) -> Result<Self> {
        let n = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let full = std::str::from_utf8(raw)
                .map_err(|_| Error::format("parameter list", "name is not UTF-8"))?;
            let name = full.strip_prefix(prefix).ok_or_else(|| {
                Error::format("parameter list", format!("{full:?} lacks prefix {prefix:?}"))
            })?;
            let t = r.tensor()?;
            if t.dtype() != T::DTYPE {
                return Err(Error::format(
                    "parameter list",
                    format!("{full} stored as {}", t.dtype().name()),
                ));
            }
            store.push(name, t.cast());
        }
        Ok(store)
    }
}
