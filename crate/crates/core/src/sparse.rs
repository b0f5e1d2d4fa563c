//! Compressed Sparse Column storage for pruned weight matrices, plus the
//! memory-footprint accounting used by the result tables.
//!
//! An entry is "stored" when its bit pattern is not +0.0, so a negative zero
//! survives an encode/decode round trip bit for bit. Masked weights are set
//! to exact +0.0 and therefore drop out of the encoding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ParamRegistry;
use crate::pruning::MaskSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Check the structural invariants; malformed input is a format error.
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Format("CSC matrix with zero dimension".into()));
        }
        if self.col_ptr.len() != self.n_cols + 1 || self.col_ptr[0] != 0 {
            return Err(Error::Format(format!(
                "col_ptr must have {} entries starting at 0",
                self.n_cols + 1
            )));
        }
        if self
            .col_ptr
            .windows(2)
            .any(|w| w[1] < w[0])
        {
            return Err(Error::Format("col_ptr must be non-decreasing".into()));
        }
        let nnz = self.col_ptr[self.n_cols];
        if nnz != self.row_idx.len() || nnz != self.values.len() {
            return Err(Error::Format(format!(
                "nnz {} disagrees with row_idx {} / values {}",
                nnz,
                self.row_idx.len(),
                self.values.len()
            )));
        }
        for c in 0..self.n_cols {
            let span = &self.row_idx[self.col_ptr[c]..self.col_ptr[c + 1]];
            if span.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Format(format!(
                    "row indices not strictly increasing in column {c}"
                )));
            }
            if span.iter().any(|&r| r >= self.n_rows) {
                return Err(Error::Format(format!(
                    "row index out of range in column {c}"
                )));
            }
        }
        if self.values.iter().any(|v| v.to_bits() == 0) {
            return Err(Error::Format("stored value is +0.0".into()));
        }
        Ok(())
    }
}

/// Exact sparse representation of all stored entries in column-major order.
pub fn csc_encode(dense: &Tensor) -> Result<CscMatrix> {
    if dense.rank() != 2 {
        return Err(Error::shape("csc_encode (rank-2 required)", dense.shape(), &[]));
    }
    let (m, n) = (dense.shape()[0], dense.shape()[1]);
    let v = dense.values();
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::new();
    let mut values = Vec::new();
    col_ptr.push(0);
    for c in 0..n {
        for r in 0..m {
            let x = v[r * n + c];
            if x.to_bits() != 0 {
                row_idx.push(r);
                values.push(x);
            }
        }
        col_ptr.push(values.len());
    }
    Ok(CscMatrix {
        n_rows: m,
        n_cols: n,
        col_ptr,
        row_idx,
        values,
    })
}

/// Inverse of [`csc_encode`]: decode(encode(x)) == x bitwise.
pub fn csc_decode(sparse: &CscMatrix) -> Result<Tensor> {
    sparse.validate()?;
    let (m, n) = (sparse.n_rows, sparse.n_cols);
    let mut out = vec![0.0; m * n];
    for c in 0..n {
        for k in sparse.col_ptr[c]..sparse.col_ptr[c + 1] {
            out[sparse.row_idx[k] * n + c] = sparse.values[k];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Bytes needed to store the matrix at the given value/index widths:
/// nnz * value_width + nnz * index_width + (n_cols + 1) * index_width.
pub fn memory_bytes(sparse: &CscMatrix, value_width: usize, index_width: usize) -> u64 {
    let nnz = sparse.nnz() as u64;
    nnz * value_width as u64 + (nnz + sparse.n_cols as u64 + 1) * index_width as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Dense,
    Csc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub name: String,
    pub dense_bytes: u64,
    /// None for parameters that are never CSC-encoded (biases, norms).
    pub csc_bytes: Option<u64>,
    pub chosen: Encoding,
    pub chosen_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryReport {
    pub value_width: usize,
    pub index_width: usize,
    pub entries: Vec<MemoryEntry>,
    pub dense_total: u64,
    pub chosen_total: u64,
}

impl MemoryReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "memory accounting: value_width={} index_width={}\n",
            self.value_width, self.index_width
        ));
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>8}\n",
            "parameter", "dense", "csc", "chosen"
        ));
        for e in &self.entries {
            let csc = e
                .csc_bytes
                .map(|b| b.to_string())
                .unwrap_or_else(|| "-".to_string());
            let chosen = match e.chosen {
                Encoding::Dense => "dense",
                Encoding::Csc => "csc",
            };
            out.push_str(&format!(
                "{:<16} {:>12} {:>12} {:>8}\n",
                e.name, e.dense_bytes, csc, chosen
            ));
        }
        out.push_str(&format!(
            "total: dense {} bytes, chosen {} bytes\n",
            self.dense_total, self.chosen_total
        ));
        out
    }
}

/// Per-parameter accounting with the cheaper of dense or CSC recorded for
/// every prunable matrix; biases are always dense. Expects the mask to have
/// been applied.
pub fn report_model_memory(
    reg: &ParamRegistry,
    mask: &MaskSet,
    value_width: usize,
    index_width: usize,
) -> Result<MemoryReport> {
    mask.check_covers(reg)?;
    for entry in reg.prunable_entries() {
        let m = mask.get(&entry.name).expect("coverage checked");
        if entry
            .tensor
            .values()
            .iter()
            .zip(m)
            .any(|(&v, &keep)| keep == 0.0 && v != 0.0)
        {
            return Err(Error::Contract(format!(
                "mask not applied to '{}' before memory accounting",
                entry.name
            )));
        }
    }
    let mut entries = Vec::new();
    let mut dense_total = 0u64;
    let mut chosen_total = 0u64;
    for entry in reg.entries() {
        let dense_bytes = (entry.tensor.numel() * value_width) as u64;
        let (csc_bytes, chosen) = if entry.prunable {
            let csc = csc_encode(&entry.tensor)?;
            let b = memory_bytes(&csc, value_width, index_width);
            let chosen = if b < dense_bytes {
                Encoding::Csc
            } else {
                Encoding::Dense
            };
            (Some(b), chosen)
        } else {
            (None, Encoding::Dense)
        };
        let chosen_bytes = match chosen {
            Encoding::Dense => dense_bytes,
            Encoding::Csc => csc_bytes.unwrap(),
        };
        dense_total += dense_bytes;
        chosen_total += chosen_bytes;
        entries.push(MemoryEntry {
            name: entry.name.clone(),
            dense_bytes,
            csc_bytes,
            chosen,
            chosen_bytes,
        });
    }
    Ok(MemoryReport {
        value_width,
        index_width,
        entries,
        dense_total,
        chosen_total,
    })
}

// --- Sparse model container ------------------------------------------------
//
// Layout (little endian):
//   magic "PLSM", version u32
//   count u32
//   per parameter:
//     name       u16 length + utf8 bytes
//     kind       u8 (0 dense, 1 csc)
//     rank u8, dims u32 x rank
//     dense:     numel x f64
//     csc:       index_width u8, nnz u64,
//                col_ptr (n_cols+1) x index_width,
//                row_idx nnz x index_width,
//                values nnz x f64
//   sha256 over everything above

const SPARSE_MAGIC: &[u8; 4] = b"PLSM";
const SPARSE_VERSION: u32 = 1;

fn index_width_for(max_index: usize) -> usize {
    if max_index < (1 << 16) {
        2
    } else if max_index < (1u64 << 32) as usize {
        4
    } else {
        8
    }
}

fn put_index(buf: &mut Vec<u8>, value: usize, width: usize) {
    match width {
        2 => buf.extend_from_slice(&(value as u16).to_le_bytes()),
        4 => buf.extend_from_slice(&(value as u32).to_le_bytes()),
        _ => buf.extend_from_slice(&(value as u64).to_le_bytes()),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn index(&mut self, width: usize) -> Result<usize> {
        Ok(match width {
            2 => self.u16()? as usize,
            4 => self.u32()? as usize,
            _ => self.u64()? as usize,
        })
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("invalid utf8 name".into()))
    }
}

/// Write the current registry as a sparse model container: every prunable
/// matrix as a CSC block, everything else dense. Values are stored at full
/// 64-bit width so the file round-trips bit-exactly; the narrower widths of
/// [`MemoryReport`] are an accounting model, not a storage format.
pub fn write_sparse_model(path: &Path, reg: &ParamRegistry, mask: &MaskSet) -> Result<()> {
    mask.check_covers(reg)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(SPARSE_MAGIC);
    buf.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(reg.len() as u32).to_le_bytes());
    for entry in reg.entries() {
        buf.extend_from_slice(&(entry.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        buf.push(if entry.prunable { 1 } else { 0 });
        buf.push(entry.tensor.rank() as u8);
        for &d in entry.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        if entry.prunable {
            let csc = csc_encode(&entry.tensor)?;
            let width = index_width_for(csc.n_rows.max(csc.nnz()));
            buf.push(width as u8);
            buf.extend_from_slice(&(csc.nnz() as u64).to_le_bytes());
            for &p in &csc.col_ptr {
                put_index(&mut buf, p, width);
            }
            for &r in &csc.row_idx {
                put_index(&mut buf, r, width);
            }
            for &v in &csc.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            for &v in entry.tensor.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Read a sparse model container back into (name, dense tensor) pairs,
/// verifying the checksum and all CSC invariants.
pub fn read_sparse_model(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    if buf.len() < 32 {
        return Err(Error::Format("sparse model file too short".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Format("sparse model checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != SPARSE_MAGIC {
        return Err(Error::Format("bad sparse model magic".into()));
    }
    let version = r.u32()?;
    if version != SPARSE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let tensor = if kind == 1 {
            if rank != 2 {
                return Err(Error::Format(format!("csc block '{name}' is not rank 2")));
            }
            let width = r.u8()? as usize;
            if !matches!(width, 2 | 4 | 8) {
                return Err(Error::Format(format!("bad index width {width}")));
            }
            let nnz = r.u64()? as usize;
            let mut col_ptr = Vec::with_capacity(dims[1] + 1);
            for _ in 0..=dims[1] {
                col_ptr.push(r.index(width)?);
            }
            let mut row_idx = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                row_idx.push(r.index(width)?);
            }
            let mut values = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                values.push(r.f64()?);
            }
            let csc = CscMatrix {
                n_rows: dims[0],
                n_cols: dims[1],
                col_ptr,
                row_idx,
                values,
            };
            csc_decode(&csc)?
        } else {
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f64()?);
            }
            Tensor::new(dims, values)?
        };
        out.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in sparse model".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(m: usize, n: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![m, n], v.to_vec()).unwrap()
    }

    #[test]
    fn encode_zero_matrix() {
        let csc = csc_encode(&t2(3, 3, &[0.0; 9])).unwrap();
        assert_eq!(csc.nnz(), 0);
        assert_eq!(csc.col_ptr, vec![0, 0, 0, 0]);
    }

    #[test]
    fn encode_identity() {
        let csc = csc_encode(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(csc.col_ptr, vec![0, 1, 2]);
        assert_eq!(csc.row_idx, vec![0, 1]);
        assert_eq!(csc.values, vec![1.0, 1.0]);
    }

    #[test]
    fn encode_hand_example() {
        // [[0,5],[7,0]] -> col 0 holds 7 at row 1, col 1 holds 5 at row 0
        let csc = csc_encode(&t2(2, 2, &[0.0, 5.0, 7.0, 0.0])).unwrap();
        assert_eq!(csc.col_ptr, vec![0, 1, 2]);
        assert_eq!(csc.row_idx, vec![1, 0]);
        assert_eq!(csc.values, vec![7.0, 5.0]);
    }

    #[test]
    fn encode_rejects_non_matrix() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert!(matches!(csc_encode(&t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn decode_empty_gives_zeros() {
        let csc = csc_encode(&t2(2, 3, &[0.0; 6])).unwrap();
        let back = csc_decode(&csc).unwrap();
        assert_eq!(back.values(), &[0.0; 6]);
    }

    #[test]
    fn decode_rejects_invariant_violations() {
        let mut csc = csc_encode(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        csc.col_ptr[1] = 5;
        assert!(matches!(csc_decode(&csc), Err(Error::Format(_))));
    }

    #[test]
    fn negative_zero_is_preserved_as_stored() {
        let t = t2(1, 2, &[-0.0, 0.0]);
        let csc = csc_encode(&t).unwrap();
        assert_eq!(csc.nnz(), 1, "-0.0 has a nonzero bit pattern and is stored");
        let back = csc_decode(&csc).unwrap();
        assert!(back.bitwise_eq(&t));
    }

    #[test]
    fn memory_bytes_hand_formula() {
        // 4x4 with 8 nnz at widths 4/4: 8*4 + 8*4 + 5*4 = 84
        let mut v = vec![0.0; 16];
        for (i, x) in v.iter_mut().enumerate().take(8) {
            *x = (i + 1) as f64;
        }
        let csc = csc_encode(&t2(4, 4, &v)).unwrap();
        assert_eq!(csc.nnz(), 8);
        assert_eq!(memory_bytes(&csc, 4, 4), 84);
        // empty 4-column matrix: pointer array only
        let empty = csc_encode(&t2(4, 4, &[0.0; 16])).unwrap();
        assert_eq!(memory_bytes(&empty, 4, 4), 20);
    }

    #[test]
    fn memory_bytes_linear_in_nnz() {
        let (vw, iw) = (8, 2);
        let mut prev = None;
        for nnz in [1usize, 2, 3, 5, 8] {
            let mut v = vec![0.0; 64];
            for (i, x) in v.iter_mut().enumerate().take(nnz) {
                *x = (i + 1) as f64;
            }
            let csc = csc_encode(&t2(8, 8, &v)).unwrap();
            let b = memory_bytes(&csc, vw, iw);
            assert_eq!(b, (nnz * (vw + iw)) as u64 + 9 * iw as u64);
            if let Some((pn, pb)) = prev {
                let slope = (b - pb) / (nnz - pn) as u64;
                assert_eq!(slope, (vw + iw) as u64);
            }
            prev = Some((nnz, b));
        }
    }
}
