//! Sample containers, seeded random streams, moment functions and the
//! synthetic data-generating processes.

mod dgp;
mod moments;

pub use dgp::{gen_heteroskedastic, gen_iv, HeteroskedasticDgp, IvDgp, NoiseProfile, F0, HETEROSKEDASTIC_THETA};
pub use moments::{
    HingeModel, LinearModel, MeanMoment, Model, MomentFunction, MomentTable, ResidualMoment,
};

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FgelError, Result};

/// Paired observations `x` (n × d_x) and instruments `z` (n × d_z).
///
/// Rows are stored contiguously so moment functions can borrow a sample as
/// a slice. For regression problems the target is the last column of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    dx: usize,
    dz: usize,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from row-major buffers.
    pub fn from_rows(n: usize, dx: usize, x: Vec<f64>, dz: usize, z: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(FgelError::InvalidArgument("dataset needs at least one row".into()));
        }
        if x.len() != n * dx {
            return Err(FgelError::DimensionMismatch {
                context: "x buffer",
                expected: n * dx,
                actual: x.len(),
            });
        }
        if z.len() != n * dz {
            return Err(FgelError::DimensionMismatch {
                context: "z buffer",
                expected: n * dz,
                actual: z.len(),
            });
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(FgelError::NonFinite("dataset"));
        }
        Ok(Self { n, dx, dz, x, z })
    }

    pub fn from_matrices(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() != z.nrows() {
            return Err(FgelError::DimensionMismatch {
                context: "x/z row count",
                expected: x.nrows(),
                actual: z.nrows(),
            });
        }
        let n = x.nrows();
        let xs = (0..n).flat_map(|i| x.row(i).iter().copied().collect::<Vec<_>>()).collect();
        let zs = (0..n).flat_map(|i| z.row(i).iter().copied().collect::<Vec<_>>()).collect();
        Self::from_rows(n, x.ncols(), xs, z.ncols(), zs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn dz(&self) -> usize {
        self.dz
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dx..(i + 1) * self.dx]
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    /// Last column of the x-block.
    pub fn target(&self, i: usize) -> f64 {
        self.x[(i + 1) * self.dx - 1]
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dx, &self.x)
    }

    pub fn z_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dz, &self.z)
    }

    /// Returns a copy whose row `i` is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(FgelError::DimensionMismatch {
                context: "permutation",
                expected: self.n,
                actual: perm.len(),
            });
        }
        let mut x = Vec::with_capacity(self.x.len());
        let mut z = Vec::with_capacity(self.z.len());
        for &i in perm {
            x.extend_from_slice(self.x_row(i));
            z.extend_from_slice(self.z_row(i));
        }
        Self::from_rows(self.n, self.dx, x, self.dz, z)
    }

    /// Writes the CSV form: header `x0,..,z0,..` and shortest round-trip floats.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.dx)
            .map(|j| format!("x{j}"))
            .chain((0..self.dz).map(|j| format!("z{j}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.n {
            let rec: Vec<String> = self
                .x_row(i)
                .iter()
                .chain(self.z_row(i))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let mut dx = 0;
        let mut dz = 0;
        for (k, name) in header.iter().enumerate() {
            let (prefix, idx) = name.split_at(1.min(name.len()));
            let expected = if prefix == "x" { dx } else { dz };
            if !(prefix == "x" || prefix == "z") || idx.parse::<usize>().ok() != Some(expected) {
                return Err(FgelError::InvalidArgument(format!("bad CSV header column {k}: '{name}'")));
            }
            if prefix == "x" {
                if dz > 0 {
                    return Err(FgelError::InvalidArgument("x columns must precede z columns".into()));
                }
                dx += 1;
            } else {
                dz += 1;
            }
        }
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut n = 0;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != dx + dz {
                return Err(FgelError::DimensionMismatch {
                    context: "CSV record",
                    expected: dx + dz,
                    actual: rec.len(),
                });
            }
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| FgelError::InvalidArgument(format!("bad float '{field}'")))?;
                if k < dx {
                    x.push(v);
                } else {
                    z.push(v);
                }
            }
            n += 1;
        }
        Self::from_rows(n, dx, x, dz, z)
    }
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Streams with the same pair replay identical draws; different stream ids
/// select disjoint ChaCha keystreams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
