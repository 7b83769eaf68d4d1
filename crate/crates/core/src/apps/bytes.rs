//! Little-endian packing for application state.

use super::AppError;

#[derive(Debug, Default)]
pub(crate) struct Writer(Vec<u8>);

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Writer(Vec::with_capacity(n))
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        for x in v {
            self.f64(*x);
        }
        self
    }
    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Reader { what, bytes, pos: 0 }
    }
    fn take8(&mut self) -> Result<[u8; 8], AppError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| AppError::corrupt(self.what, format!("truncated at byte {}", self.pos)))?;
        self.pos += 8;
        Ok(s.try_into().unwrap())
    }
    pub fn u64(&mut self) -> Result<u64, AppError> {
        self.take8().map(u64::from_le_bytes)
    }
    pub fn usize(&mut self) -> Result<usize, AppError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| AppError::corrupt(self.what, format!("count {v} too large")))
    }
    pub fn f64(&mut self) -> Result<f64, AppError> {
        self.take8().map(f64::from_le_bytes)
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, AppError> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn finish(self) -> Result<(), AppError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(AppError::corrupt(
                self.what,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ))
        }
    }
}

/// A `[start, len]` prefixed block of fixed-width records.
pub(crate) fn read_block_header(r: &mut Reader<'_>, total: usize) -> Result<(usize, usize), AppError> {
    let start = r.usize()?;
    let len = r.usize()?;
    if start.checked_add(len).is_none_or(|end| end > total) {
        return Err(AppError::corrupt(r.what, format!("block {start}+{len} exceeds {total}")));
    }
    Ok((start, len))
}
