//! Named parameter storage and the `SQWT` checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::binio;
use crate::error::{Error, Result};

const SQWT_MAGIC: &[u8; 4] = b"SQWT";
const SQWT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the checkpoint
/// order and the order gradients are reduced in.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name; names are fixed by
    /// the model layout.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies every tensor of `other` whose name exists here, checking shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, &i) in &self.by_name {
            let Some(src) = other.id(name) else {
                return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
            };
            let src = other.get(src);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name}: {:?}", self.tensors[i].shape()),
                    found: format!("{:?}", src.shape()),
                });
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, SQWT_MAGIC, SQWT_VERSION)?;
        binio::write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            binio::write_u16(w, len)?;
            w.write_all(bytes)?;
            binio::write_u8(w, t.shape().len() as u8)?;
            for &d in t.shape() {
                binio::write_u32(w, d as u32)?;
            }
            binio::write_f32s(w, &t.to_f32_vec())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, SQWT_MAGIC, SQWT_VERSION)?;
        let count = binio::read_u32(r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = binio::read_u16(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?;
            let rank = binio::read_u8(r)? as usize;
            let dims = (0..rank)
                .map(|_| binio::read_u32(r))
                .collect::<Result<Vec<u32>>>()?;
            let n = binio::checked_len(&dims, 1 << 30)?;
            let data = binio::read_f32s(r, n)?;
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            if set.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            set.add(name, Tensor::from_f32(&shape, &data)?);
        }
        Ok(set)
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuffer<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn for_params(params: &ParamSet<T>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Adds every gradient of `other` into this buffer.
    pub fn merge(&mut self, other: &GradBuffer<T>) {
        assert_eq!(
            self.grads.len(),
            other.grads.len(),
            "buffers for different parameter sets"
        );
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sqwt_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f32>::new();
        p.add_uniform("leg.0.weight", &[2, 1, 3, 1], 0.5, &mut rng);
        p.add_uniform("gem.rho", &[1], 0.5, &mut rng);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SQWT\x01");
        let back = ParamSet::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn truncated_checkpoint_is_error() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamSet::<f32>::read_from(&mut buf.as_slice()).is_err());
    }
}
