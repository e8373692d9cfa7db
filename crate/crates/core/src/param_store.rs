//! Named parameter tensors and the in-place perturbation kernel.
//!
//! A [`ParamSet`] keeps its entries in construction order. That order is
//! load-bearing: when a perturbation is regenerated from a seed, tensor `i`
//! reads its slice of the Gaussian stream at an offset derived from the
//! shapes of tensors `0..i` (see [`crate::sampler::stream_budget`]).

use std::borrow::Cow;
use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ZoError};
use crate::rng::GaussianStream;
use crate::sampler::{self, PerturbSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ElementWidth {
    F32,
    #[default]
    F64,
}

impl ElementWidth {
    pub fn bytes(self) -> usize {
        match self {
            ElementWidth::F32 => 4,
            ElementWidth::F64 => 8,
        }
    }

    pub fn machine_epsilon(self) -> f64 {
        match self {
            ElementWidth::F32 => f64::from(f32::EPSILON),
            ElementWidth::F64 => f64::EPSILON,
        }
    }

    pub(crate) fn code(self) -> u8 {
        self.bytes() as u8
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(ElementWidth::F32),
            8 => Ok(ElementWidth::F64),
            other => Err(ZoError::Corrupt(format!("unknown element width {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    #[inline]
    fn add_scaled(&mut self, index: usize, delta: f64) {
        match self {
            Storage::F64(v) => v[index] += delta,
            Storage::F32(v) => v[index] = (f64::from(v[index]) + delta) as f32,
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(ZoError::invalid("tensor shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(ZoError::invalid(format!("zero-size dimension in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ZoError::invalid(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if data.len() != n {
            return Err(ZoError::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data: Storage::F64(data) })
    }

    pub fn from_vec_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if data.len() != n {
            return Err(ZoError::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data: Storage::F32(data) })
    }

    pub fn zeros(shape: Vec<usize>, width: ElementWidth) -> Result<Self> {
        let n = checked_numel(&shape)?;
        let data = match width {
            ElementWidth::F32 => Storage::F32(vec![0.0; n]),
            ElementWidth::F64 => Storage::F64(vec![0.0; n]),
        };
        Ok(Self { shape, data })
    }

    pub fn scalar_filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = checked_numel(&shape)?;
        Ok(Self { shape, data: Storage::F64(vec![value; n]) })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }

    pub fn width(&self) -> ElementWidth {
        match self.data {
            Storage::F32(_) => ElementWidth::F32,
            Storage::F64(_) => ElementWidth::F64,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * self.width().bytes()
    }

    /// Values widened to f64; borrows when the tensor is already 64-bit.
    pub fn values(&self) -> Cow<'_, [f64]> {
        match &self.data {
            Storage::F64(v) => Cow::Borrowed(v),
            Storage::F32(v) => Cow::Owned(v.iter().map(|&x| f64::from(x)).collect()),
        }
    }

    /// Mutable access for 64-bit tensors.
    pub fn as_f64_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        match &self.data {
            Storage::F64(v) => v[index],
            Storage::F32(v) => f64::from(v[index]),
        }
    }

    pub fn set(&mut self, index: usize, value: f64) {
        match &mut self.data {
            Storage::F64(v) => v[index] = value,
            Storage::F32(v) => v[index] = value as f32,
        }
    }


    pub fn to_width(&self, width: ElementWidth) -> Tensor {
        let data = match (width, &self.data) {
            (ElementWidth::F64, Storage::F64(v)) => Storage::F64(v.clone()),
            (ElementWidth::F32, Storage::F32(v)) => Storage::F32(v.clone()),
            (ElementWidth::F64, Storage::F32(v)) => {
                Storage::F64(v.iter().map(|&x| f64::from(x)).collect())
            }
            (ElementWidth::F32, Storage::F64(v)) => {
                Storage::F32(v.iter().map(|&x| x as f32).collect())
            }
        };
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Parameter name and shape, as declared by a model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamShape {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self { name: name.into(), shape }
    }
}

/// 64-bit digest of `(name, shape)` pairs in order plus the element width.
pub fn schema_digest<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    width: ElementWidth,
) -> u64 {
    let mut h = Sha256::new();
    h.update(b"zo-schema-v1");
    h.update([width.code()]);
    for (name, shape) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for &d in shape {
            h.update((d as u64).to_le_bytes());
        }
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Ordered, uniquely named collection of tensors sharing one element width.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    width: ElementWidth,
    schema_hash: u64,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(ZoError::invalid("a parameter set needs at least one tensor"));
        }
        let width = entries[0].1.width();
        let mut seen = HashSet::new();
        for (name, t) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(ZoError::invalid(format!("duplicate parameter name `{name}`")));
            }
            if t.width() != width {
                return Err(ZoError::invalid(format!(
                    "`{name}` has width {:?}, set uses {width:?}",
                    t.width()
                )));
            }
        }
        let schema_hash = schema_digest(
            entries.iter().map(|(n, t)| (n.as_str(), t.shape())),
            width,
        );
        Ok(Self { entries, width, schema_hash })
    }

    pub fn zeros(schema: &[ParamShape], width: ElementWidth) -> Result<Self> {
        let entries = schema
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::zeros(p.shape.clone(), width)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> ElementWidth {
        self.width
    }

    pub fn schema_hash(&self) -> u64 {
        self.schema_hash
    }

    pub fn schema(&self) -> Vec<ParamShape> {
        self.entries
            .iter()
            .map(|(n, t)| ParamShape::new(n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    /// Mutable access to one tensor's data. Shapes cannot change.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn largest_tensor_bytes(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.size_bytes()).max().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn to_width(&self, width: ElementWidth) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.to_width(width)))
            .collect();
        ParamSet::new(entries).expect("converted set keeps names and shapes")
    }

    /// Requires identical names and shapes (width may differ).
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// `‖self − other‖∞`. Panics if the layouts differ.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        assert!(self.same_layout(other), "parameter layouts differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| {
                a.values()
                    .iter()
                    .zip(b.values().iter())
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.max_abs()).fold(0.0, f64::max)
    }

    /// Copies tensor data from `src` for the selected entries.
    pub fn copy_selected_from(&mut self, src: &ParamSet, selection: &Selection) -> Result<()> {
        selection.check(self)?;
        selection.check(src)?;
        for slot in selection.slots() {
            self.entries[slot.index].1 = src.entries[slot.index].1.clone();
        }
        Ok(())
    }

    /// Flattened f64 copy of every value in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.values());
        }
        out
    }
}

/// One selected tensor and the index of its first normal in a perturbation
/// stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub index: usize,
    pub stream_offset: u64,
}

/// The subset of a [`ParamSet`] an optimizer is allowed to touch, with the
/// stream offsets of each selected tensor precomputed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    parent_hash: u64,
    schema_hash: u64,
    slots: Vec<Slot>,
    largest_bytes: usize,
}

impl Selection {
    pub fn all(params: &ParamSet) -> Self {
        Self::from_indices(params, (0..params.len()).collect()).expect("all indices are valid")
    }

    pub fn from_indices(params: &ParamSet, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(ZoError::invalid("selection resolves to no parameters"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= params.len()) {
            return Err(ZoError::invalid(format!("parameter index {bad} out of range")));
        }
        let mut offset = 0u64;
        let mut slots = Vec::with_capacity(indices.len());
        for &index in &indices {
            slots.push(Slot { index, stream_offset: offset });
            offset += sampler::stream_budget(params.tensor(index).shape());
        }
        let schema_hash = schema_digest(
            indices
                .iter()
                .map(|&i| (params.name(i), params.tensor(i).shape())),
            params.width(),
        );
        let largest_bytes = indices
            .iter()
            .map(|&i| params.tensor(i).size_bytes())
            .max()
            .unwrap_or(0);
        Ok(Self {
            parent_hash: params.schema_hash(),
            schema_hash,
            slots,
            largest_bytes,
        })
    }

    /// Selects every parameter whose name matches one of `patterns`. A pattern
    /// is either an exact name or a prefix followed by `*` (`"norm.*"`).
    pub fn from_patterns<S: AsRef<str>>(params: &ParamSet, patterns: &[S]) -> Result<Self> {
        let indices: Vec<usize> = params
            .names()
            .enumerate()
            .filter(|(_, name)| patterns.iter().any(|p| pattern_matches(p.as_ref(), name)))
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            let shown: Vec<&str> = patterns.iter().map(AsRef::as_ref).collect();
            return Err(ZoError::invalid(format!("mask {shown:?} matches no parameters")));
        }
        Self::from_indices(params, indices)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn contains(&self, index: usize) -> bool {
        self.slots.iter().any(|s| s.index == index)
    }

    /// Digest of the selected sub-schema; this is what seed logs record.
    pub fn schema_hash(&self) -> u64 {
        self.schema_hash
    }

    pub fn parent_hash(&self) -> u64 {
        self.parent_hash
    }

    pub fn largest_tensor_bytes(&self) -> usize {
        self.largest_bytes
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        if params.schema_hash() != self.parent_hash {
            return Err(ZoError::SchemaMismatch(format!(
                "selection built for schema {:#018x}, parameters have {:#018x}",
                self.parent_hash,
                params.schema_hash()
            )));
        }
        Ok(())
    }
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

/// `θ_i ← θ_i + coeff · z_i` for every selected tensor, with `z` regenerated
/// from `spec`. The only allocation is the pair of low-rank factors for one
/// matrix slice at a time (none for full-Gaussian directions).
pub fn axpy(params: &mut ParamSet, selection: &Selection, coeff: f64, spec: &PerturbSpec) -> Result<()> {
    selection.check(params)?;
    if coeff == 0.0 {
        return Ok(());
    }
    let mut stream = GaussianStream::new(spec.seed);
    for slot in &selection.slots {
        let Tensor { shape, data } = &mut params.entries[slot.index].1;
        stream.seek(slot.stream_offset);
        sampler::visit_direction(&mut stream, shape, spec.kind, |i, z| {
            data.add_scaled(i, coeff * z);
        });
    }
    Ok(())
}

/// The in-place move of the perturbation cycle: `θ ← θ + scale · z`.
pub fn perturb_inplace(
    params: &mut ParamSet,
    selection: &Selection,
    scale: f64,
    spec: &PerturbSpec,
) -> Result<()> {
    axpy(params, selection, scale, spec)
}

// ---------------------------------------------------------------------------
// Serialization
//
// magic "ZOPS" | version u16 | element width u8 | reserved u8 | entry count u32
// per entry: name length u32 | name bytes | rank u32 | dims u64 × rank | data
// All integers and floats little-endian.

const PARAMS_MAGIC: &[u8; 4] = b"ZOPS";
const PARAMS_VERSION: u16 = 1;

pub fn write_params<W: Write>(params: &ParamSet, mut w: W) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&[params.width.code(), 0])?;
    w.write_all(&(params.entries.len() as u32).to_le_bytes())?;
    for (name, t) in &params.entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &t.data {
            Storage::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Storage::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn params_to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_params(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ZoError::Truncated(what.to_string()),
        _ => ZoError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "parameter header")?;
    if &magic != PARAMS_MAGIC {
        return Err(ZoError::Corrupt(format!("bad parameter-file magic {magic:?}")));
    }
    let mut head = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut head, "parameter header")?;
    let version = u16::from_le_bytes([head[0], head[1]]);
    if version != PARAMS_VERSION {
        return Err(ZoError::Version { found: version, expected: PARAMS_VERSION });
    }
    let width = ElementWidth::from_code(head[2])?;
    let count = read_u32(&mut r, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name, "parameter name")?;
        let name = String::from_utf8(name)
            .map_err(|_| ZoError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let n = checked_numel(&shape).map_err(|e| ZoError::Corrupt(e.to_string()))?;
        let tensor = match width {
            ElementWidth::F64 => {
                let mut raw = vec![0u8; n * 8];
                read_exact_or_truncated(&mut r, &mut raw, "tensor data")?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(shape, data)?
            }
            ElementWidth::F32 => {
                let mut raw = vec![0u8; n * 4];
                read_exact_or_truncated(&mut r, &mut raw, "tensor data")?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec_f32(shape, data)?
            }
        };
        entries.push((name, tensor));
    }
    ParamSet::new(entries).map_err(|e| ZoError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerKind;

    fn sample_set() -> ParamSet {
        ParamSet::new(vec![
            ("w".into(), Tensor::from_vec(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap()),
            ("b".into(), Tensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 0.0]).unwrap()),
            ("g".into(), Tensor::from_vec(vec![1], vec![3.0]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_empty_and_zero_shapes() {
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
        assert!(Tensor::from_vec(vec![0, 3], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0]).is_err());
        assert!(Tensor::from_vec(vec![1], vec![1.0]).is_ok());
    }

    #[test]
    fn rejects_duplicate_names() {
        let t = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let err = ParamSet::new(vec![("a".into(), t.clone()), ("a".into(), t)]).unwrap_err();
        assert!(matches!(err, ZoError::InvalidArgument(_)));
    }

    #[test]
    fn schema_hash_tracks_names_shapes_and_width() {
        let a = sample_set();
        let mut b = sample_set();
        b.tensor_mut(0).set(0, 99.0);
        assert_eq!(a.schema_hash(), b.schema_hash(), "data does not enter the hash");
        assert_ne!(a.schema_hash(), a.to_width(ElementWidth::F32).schema_hash());
        let renamed = ParamSet::new(vec![
            ("w2".into(), a.tensor(0).clone()),
            ("b".into(), a.tensor(1).clone()),
            ("g".into(), a.tensor(2).clone()),
        ])
        .unwrap();
        assert_ne!(a.schema_hash(), renamed.schema_hash());
    }

    #[test]
    fn patterns_select_groups() {
        let p = ParamSet::new(vec![
            ("feat.weight".into(), Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap()),
            ("norm.gain".into(), Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap()),
            ("head.weight".into(), Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap()),
        ])
        .unwrap();
        let sel = Selection::from_patterns(&p, &["feat.*", "norm.*"]).unwrap();
        assert!(sel.contains(0) && sel.contains(1) && !sel.contains(2));
        assert!(Selection::from_patterns(&p, &["missing.*"]).is_err());
        let exact = Selection::from_patterns(&p, &["head.weight"]).unwrap();
        assert_eq!(exact.slots().len(), 1);
    }

    #[test]
    fn selection_rejects_foreign_params() {
        let p = sample_set();
        let sel = Selection::all(&p);
        let other = ParamSet::new(vec![("x".into(), Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap())]).unwrap();
        let mut other = other;
        let spec = PerturbSpec::new(1, 1e-3, SamplerKind::Full).unwrap();
        let err = axpy(&mut other, &sel, 1.0, &spec).unwrap_err();
        assert!(matches!(err, ZoError::SchemaMismatch(_)));
    }

    #[test]
    fn zero_scale_is_bit_exact_noop() {
        let mut p = sample_set();
        let before = p.clone();
        let sel = Selection::all(&p);
        let spec = PerturbSpec::new(5, 1e-3, SamplerKind::Full).unwrap();
        perturb_inplace(&mut p, &sel, 0.0, &spec).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn serialization_roundtrips_both_widths() {
        let p = sample_set();
        let back = read_params(params_to_bytes(&p).as_slice()).unwrap();
        assert_eq!(back, p);
        let p32 = p.to_width(ElementWidth::F32);
        let back = read_params(params_to_bytes(&p32).as_slice()).unwrap();
        assert_eq!(back, p32);
    }

    #[test]
    fn serialization_layout_is_fixed() {
        let p = ParamSet::new(vec![("ab".into(), Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap())]).unwrap();
        let bytes = params_to_bytes(&p);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"ZOPS");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&[8, 0]);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-1.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_and_truncated_inputs() {
        let bytes = params_to_bytes(&sample_set());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(bad.as_slice()), Err(ZoError::Corrupt(_))));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_params(short), Err(ZoError::Truncated(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(read_params(v2.as_slice()), Err(ZoError::Version { .. })));
    }
}
