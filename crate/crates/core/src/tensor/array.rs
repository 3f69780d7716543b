use std::cell::Cell;
use std::fmt;

use super::Real;

thread_local! {
    static LIVE_BYTES: Cell<i64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<i64> = const { Cell::new(0) };
}

/// Per-thread accounting of the bytes held by live [`Array2`] buffers.
///
/// Every array allocation and drop on the current thread is recorded, so the
/// peak reported here is exact and independent of the system allocator.
pub struct AllocationLedger;

impl AllocationLedger {
    pub fn live_bytes() -> i64 {
        LIVE_BYTES.with(Cell::get)
    }

    pub fn peak_bytes() -> i64 {
        PEAK_BYTES.with(Cell::get)
    }

    /// Resets the peak to the current live count and returns that baseline.
    pub fn reset_peak() -> i64 {
        let live = Self::live_bytes();
        PEAK_BYTES.with(|p| p.set(live));
        live
    }

    fn record_alloc(bytes: usize) {
        LIVE_BYTES.with(|l| {
            let live = l.get() + bytes as i64;
            l.set(live);
            PEAK_BYTES.with(|p| {
                if live > p.get() {
                    p.set(live);
                }
            });
        });
    }

    fn record_free(bytes: usize) {
        LIVE_BYTES.with(|l| l.set(l.get() - bytes as i64));
    }
}

/// Dense row-major matrix.
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match {rows}x{cols}");
        AllocationLedger::record_alloc(data.len() * std::mem::size_of::<Real>());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[Real]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(value: Real) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Value of a 1x1 array.
    pub fn item(&self) -> Real {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar array");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Array2 {
        let mut out = Array2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Array2) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: Real) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Array2) -> Real {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn into_vec(mut self) -> Vec<Real> {
        let data = std::mem::take(&mut self.data);
        AllocationLedger::record_free(data.len() * std::mem::size_of::<Real>());
        self.rows = 0;
        self.cols = 0;
        data
    }
}

impl Clone for Array2 {
    fn clone(&self) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.clone())
    }
}

impl Drop for Array2 {
    fn drop(&mut self) {
        AllocationLedger::record_free(self.data.len() * std::mem::size_of::<Real>());
    }
}

impl PartialEq for Array2 {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.data == other.data
    }
}

impl fmt::Debug for Array2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array2 {}x{} ", self.rows, self.cols)?;
        if self.len() <= 64 {
            f.debug_list().entries(self.data.iter()).finish()
        } else {
            write!(f, "[..]")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_tracks_alloc_and_free() {
        let base = AllocationLedger::reset_peak();
        {
            let _a = Array2::zeros(10, 10);
            let _b = Array2::zeros(5, 2);
            assert_eq!(
                AllocationLedger::live_bytes() - base,
                110 * std::mem::size_of::<Real>() as i64
            );
        }
        assert_eq!(AllocationLedger::live_bytes(), base);
        assert_eq!(
            AllocationLedger::peak_bytes() - base,
            110 * std::mem::size_of::<Real>() as i64
        );
    }

    #[test]
    fn transpose_round_trip() {
        let a = Array2::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let t = a.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.get(2, 1), 6.0);
        assert_eq!(t.transpose(), a);
    }
}
