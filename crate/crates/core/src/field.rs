//! Square field grid, per-cell amount maps and the squared-deviation cost.
//!
//! Matrices are stored row-major with row index `i` along y (north) and column
//! index `j` along x (east). Cell `(i, j)` covers
//! `[origin.x + j*h, origin.x + (j+1)*h] x [origin.y + i*h, origin.y + (i+1)*h]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpreaderError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    /// Field edge length [m].
    pub side_length: f64,
    /// Cells per axis.
    pub n_cells: usize,
    /// Lower-left corner [m].
    #[serde(default)]
    pub origin: (f64, f64),
}

impl FieldGrid {
    pub fn new(side_length: f64, n_cells: usize) -> Result<Self> {
        Self::with_origin(side_length, n_cells, (0.0, 0.0))
    }

    pub fn with_origin(side_length: f64, n_cells: usize, origin: (f64, f64)) -> Result<Self> {
        let grid = Self {
            side_length,
            n_cells,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(SpreaderError::Config("grid.n_cells must be >= 1".into()));
        }
        if !(self.side_length > 0.0 && self.side_length.is_finite()) {
            return Err(SpreaderError::Config(format!(
                "grid.side_length must be > 0, got {}",
                self.side_length
            )));
        }
        if !(self.origin.0.is_finite() && self.origin.1.is_finite()) {
            return Err(SpreaderError::Config("grid.origin must be finite".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.side_length / self.n_cells as f64
    }

    pub fn cell_area(&self) -> f64 {
        let h = self.cell_size();
        h * h
    }

    pub fn len(&self) -> usize {
        self.n_cells * self.n_cells
    }

    pub fn is_empty(&self) -> bool {
        self.n_cells == 0
    }

    /// Center of cell `(row, col)`.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let h = self.cell_size();
        (
            self.origin.0 + (col as f64 + 0.5) * h,
            self.origin.1 + (row as f64 + 0.5) * h,
        )
    }

    /// All cell centers in row-major order.
    pub fn cell_centers(&self) -> Vec<(f64, f64)> {
        let n = self.n_cells;
        (0..n)
            .flat_map(|row| (0..n).map(move |col| (row, col)))
            .map(|(row, col)| self.center(row, col))
            .collect()
    }

    /// Cell containing the point, or `None` outside the field.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let h = self.cell_size();
        let col = ((x - self.origin.0) / h).floor();
        let row = ((y - self.origin.1) / h).floor();
        let n = self.n_cells as f64;
        if col >= 0.0 && row >= 0.0 && col < n && row < n {
            Some((row as usize, col as usize))
        } else {
            None
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin.0
            && y >= self.origin.1
            && x <= self.origin.0 + self.side_length
            && y <= self.origin.1 + self.side_length
    }
}

/// N x N matrix of per-cell fertilizer amounts [g].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    n: usize,
    values: Vec<f64>,
}

/// Amount already applied to the field.
pub type AmountMap = FieldMap;
/// Target dosage per cell.
pub type PrescriptionMap = FieldMap;

impl FieldMap {
    pub fn zeros(n: usize) -> Self {
        Self::filled(n, 0.0)
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; n * n],
        }
    }

    /// Builds a map from row-major values; entries must be finite and non-negative.
    pub fn from_vec(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(SpreaderError::Config(format!(
                "expected {} values for a {n}x{n} map, got {}",
                n * n,
                values.len()
            )));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(SpreaderError::InvalidState(format!(
                "map entry ({}, {}) = {v} must be finite and >= 0",
                k / n.max(1),
                k % n.max(1)
            )));
        }
        Ok(Self { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(SpreaderError::Shape {
                expected: n,
                got: bad.len(),
            });
        }
        Self::from_vec(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    fn check_shape(&self, other: &FieldMap) -> Result<()> {
        if self.n != other.n {
            return Err(SpreaderError::Shape {
                expected: self.n,
                got: other.n,
            });
        }
        Ok(())
    }

    /// Elementwise `self += deposit`.
    pub fn accumulate_in_place(&mut self, deposit: &FieldMap) -> Result<()> {
        self.check_shape(deposit)?;
        for (a, d) in self.values.iter_mut().zip(&deposit.values) {
            *a += d;
        }
        Ok(())
    }

    /// Reads a headerless N x N CSV.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| SpreaderError::io(path, e))?;
        Self::read_csv_from(file).map_err(|e| match e {
            SpreaderError::Parse { message, .. } => SpreaderError::parse(path, message),
            other => other,
        })
    }

    pub fn read_csv_from(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| SpreaderError::parse("<csv>", e.to_string()))?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|e| {
                        SpreaderError::parse("<csv>", format!("row {i}: '{f}': {e}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Writes a headerless N x N CSV, shortest round-trip decimal formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| SpreaderError::io(path, e))?;
        self.write_csv_to(file).map_err(|e| match e {
            SpreaderError::Parse { message, .. } => SpreaderError::parse(path, message),
            other => other,
        })
    }

    pub fn write_csv_to(&self, writer: impl std::io::Write) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(writer);
        for row in self.values.chunks(self.n.max(1)) {
            wtr.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| SpreaderError::parse("<csv>", e.to_string()))?;
        }
        wtr.flush()
            .map_err(|e| SpreaderError::parse("<csv>", e.to_string()))?;
        Ok(())
    }
}

/// Squared Frobenius distance between the prescription and the applied map [g^2].
pub fn cost(applied: &AmountMap, prescribed: &PrescriptionMap) -> Result<f64> {
    applied.check_shape(prescribed)?;
    Ok(squared_deviation(&applied.values, &prescribed.values))
}

/// Sum of squared differences, accumulated in cell order.
pub(crate) fn squared_deviation(applied: &[f64], prescribed: &[f64]) -> f64 {
    applied
        .iter()
        .zip(prescribed)
        .map(|(a, p)| (p - a) * (p - a))
        .sum()
}

/// Elementwise sum of the applied map and a deposit.
pub fn accumulate(applied: &AmountMap, deposit: &AmountMap) -> Result<AmountMap> {
    let mut out = applied.clone();
    out.accumulate_in_place(deposit)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centers_of_default_field() {
        let g = FieldGrid::new(150.0, 90).unwrap();
        let c = g.cell_centers();
        assert_eq!(c.len(), 8100);
        let half = 150.0 / 90.0 / 2.0;
        assert!((c[0].0 - half).abs() < 1e-12 && (c[0].1 - half).abs() < 1e-12);
        for &(a, b) in &c {
            assert!(a > 0.0 && a < 150.0 && b > 0.0 && b < 150.0);
        }
    }

    #[test]
    fn centers_small_grids() {
        assert_eq!(FieldGrid::new(2.0, 1).unwrap().cell_centers(), vec![(1.0, 1.0)]);
        assert_eq!(
            FieldGrid::new(2.0, 2).unwrap().cell_centers(),
            vec![(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)]
        );
    }

    #[test]
    fn row_is_y_column_is_x() {
        let g = FieldGrid::with_origin(10.0, 10, (100.0, 200.0)).unwrap();
        assert_eq!(g.center(3, 7), (107.5, 203.5));
        assert_eq!(g.locate(107.5, 203.5), Some((3, 7)));
        assert_eq!(g.locate(99.0, 203.5), None);
    }

    #[test]
    fn invalid_grids() {
        assert!(FieldGrid::new(150.0, 0).is_err());
        assert!(FieldGrid::new(0.0, 5).is_err());
    }

    #[test]
    fn cost_examples() {
        let p = FieldMap::filled(90, 20.0);
        assert_eq!(cost(&p, &p).unwrap(), 0.0);
        assert_eq!(cost(&FieldMap::zeros(90), &p).unwrap(), 3_240_000.0);
        let p = FieldMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(cost(&FieldMap::zeros(2), &p).unwrap(), 30.0);
    }

    #[test]
    fn shape_mismatch() {
        let err = cost(&FieldMap::zeros(2), &FieldMap::zeros(3)).unwrap_err();
        assert!(matches!(err, SpreaderError::Shape { expected: 2, got: 3 }));
        assert!(accumulate(&FieldMap::zeros(2), &FieldMap::zeros(3)).is_err());
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(FieldMap::from_vec(1, vec![-1.0]).is_err());
        assert!(FieldMap::from_vec(1, vec![f64::NAN]).is_err());
        assert!(FieldMap::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn accumulate_identity_and_linearity() {
        let x = FieldMap::from_rows(&[vec![1.5, 0.0], vec![2.0, 3.25]]).unwrap();
        assert_eq!(accumulate(&FieldMap::zeros(2), &x).unwrap(), x);
        let mut a = FieldMap::zeros(2);
        for _ in 0..4 {
            a.accumulate_in_place(&x).unwrap();
        }
        let expected: Vec<f64> = x.values().iter().map(|v| 4.0 * v).collect();
        assert_eq!(a.values(), &expected[..]);
    }

    #[test]
    fn csv_round_trip() {
        let m = FieldMap::from_rows(&[vec![0.1, 2.0 / 3.0], vec![1e-300, 12345.678]]).unwrap();
        let mut buf = Vec::new();
        m.write_csv_to(&mut buf).unwrap();
        assert_eq!(FieldMap::read_csv_from(&buf[..]).unwrap(), m);
    }

    proptest! {
        #[test]
        fn cost_nonnegative_and_zero_iff_equal(
            a in proptest::collection::vec(0.0f64..50.0, 9),
            p in proptest::collection::vec(0.0f64..50.0, 9),
        ) {
            let am = FieldMap::from_vec(3, a.clone()).unwrap();
            let pm = FieldMap::from_vec(3, p.clone()).unwrap();
            let c = cost(&am, &pm).unwrap();
            prop_assert!(c >= 0.0);
            prop_assert_eq!(c == 0.0, a == p);
        }

        #[test]
        fn cost_permutation_invariant(
            a in proptest::collection::vec(0.0f64..50.0, 16),
            p in proptest::collection::vec(0.0f64..50.0, 16),
            seed in 0u64..1000,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let c0 = cost(&FieldMap::from_vec(4, a.clone()).unwrap(),
                          &FieldMap::from_vec(4, p.clone()).unwrap()).unwrap();
            let ap: Vec<f64> = perm.iter().map(|&k| a[k]).collect();
            let pp: Vec<f64> = perm.iter().map(|&k| p[k]).collect();
            let c1 = cost(&FieldMap::from_vec(4, ap).unwrap(),
                          &FieldMap::from_vec(4, pp).unwrap()).unwrap();
            prop_assert!((c0 - c1).abs() <= 1e-9 * c0.max(1.0));
        }

        #[test]
        fn accumulate_order_independent(
            deposits in proptest::collection::vec(proptest::collection::vec(0u32..1000, 4), 1..8),
        ) {
            // integer-valued fixtures sum exactly in any order
            let maps: Vec<FieldMap> = deposits.iter()
                .map(|d| FieldMap::from_vec(2, d.iter().map(|&v| v as f64).collect()).unwrap())
                .collect();
            let mut fwd = FieldMap::zeros(2);
            for m in &maps { fwd.accumulate_in_place(m).unwrap(); }
            let mut rev = FieldMap::zeros(2);
            for m in maps.iter().rev() { rev.accumulate_in_place(m).unwrap(); }
            prop_assert_eq!(fwd, rev);
        }
    }
}
