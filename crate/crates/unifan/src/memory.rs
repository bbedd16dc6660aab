//! Closed-form byte costs of the output-layer storage formats.
//!
//! These model 32-bit values everywhere. `Uniform` is the fixed-fan-in
//! layout this crate trains with: one u32 source index plus one f32 weight
//! per connection and nothing else, since the uniform fan-in makes column
//! offsets implicit.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SparseFormat {
    /// Plain dense `rows x cols` f32.
    Dense,
    /// Coordinate list with 64-bit row/col indices: 8 + 8 + 4 bytes per nnz.
    Coo64,
    /// Coordinate list with 32-bit row/col indices: 4 + 4 + 4 bytes per nnz.
    Coo32,
    /// Compressed sparse column, 32-bit: 4 + 4 per nnz plus a cols+1 pointer
    /// array.
    Csc32,
    /// Uniform fixed fan-in: 4 + 4 per nnz, no pointers.
    Uniform,
}

impl SparseFormat {
    pub const ALL: [SparseFormat; 5] = [
        SparseFormat::Dense,
        SparseFormat::Coo64,
        SparseFormat::Coo32,
        SparseFormat::Csc32,
        SparseFormat::Uniform,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SparseFormat::Dense => "dense",
            SparseFormat::Coo64 => "coo64",
            SparseFormat::Coo32 => "coo32",
            SparseFormat::Csc32 => "csc32",
            SparseFormat::Uniform => "uniform",
        }
    }
}

impl fmt::Display for SparseFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of one weight matrix for costing purposes.
#[derive(Debug, Clone, Copy)]
pub struct MatrixShape {
    pub rows: u64,
    pub cols: u64,
    /// Stored non-zeros. For `Dense` the value payload is `rows * cols`
    /// regardless.
    pub nnz: u64,
}

impl MatrixShape {
    pub fn dense(rows: u64, cols: u64) -> Self {
        MatrixShape {
            rows,
            cols,
            nnz: rows * cols,
        }
    }

    pub fn uniform(rows: u64, cols: u64, fan_in: u64) -> Self {
        MatrixShape {
            rows,
            cols,
            nnz: fan_in * cols,
        }
    }

    /// f32 value payload.
    pub fn value_bytes(&self, format: SparseFormat) -> u64 {
        match format {
            SparseFormat::Dense => 4 * self.rows * self.cols,
            _ => 4 * self.nnz,
        }
    }

    /// Index / pointer overhead on top of the values.
    pub fn index_bytes(&self, format: SparseFormat) -> u64 {
        match format {
            SparseFormat::Dense => 0,
            SparseFormat::Coo64 => 16 * self.nnz,
            SparseFormat::Coo32 => 8 * self.nnz,
            SparseFormat::Csc32 => 4 * self.nnz + 4 * (self.cols + 1),
            SparseFormat::Uniform => 4 * self.nnz,
        }
    }

    /// Total storage for the matrix in the given format.
    pub fn bytes(&self, format: SparseFormat) -> u64 {
        self.value_bytes(format) + self.index_bytes(format)
    }

    /// Peak training bytes under Adam: value, gradient, and two moment
    /// arrays (4x the value payload), plus one copy of the index structure,
    /// which carries no optimizer state.
    pub fn adam_training_bytes(&self, format: SparseFormat) -> u64 {
        4 * self.value_bytes(format) + self.index_bytes(format)
    }
}

pub const BYTES_PER_GIB: f64 = 1024.0 * 1024.0 * 1024.0;

pub fn gib(bytes: u64) -> f64 {
    bytes as f64 / BYTES_PER_GIB
}
