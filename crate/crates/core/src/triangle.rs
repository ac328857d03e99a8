//! Loss-triangle data model and ingestion.
//!
//! A [`TrianglePanel`] holds `N` aligned incremental (or cumulative) loss
//! triangles of dimension `I`, one per line of business, together with the
//! earned-premium vector of each line. Cells live on a full `I x I` grid with
//! an explicit observation mask: the usual upper triangle `i + j - 1 <= I` is
//! observed unless a cell is individually missing, and irregular shapes are
//! carried through every downstream likelihood by skipping masked cells.
//!
//! CSV layout (one file per line of business): row = accident year, first
//! column = earned premium, remaining columns = development years, blank cell
//! = unobserved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether cells are per-period payments or running row sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Incremental,
    Cumulative,
}

/// Whether cells are raw monetary amounts or loss ratios (cell / premium).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Raw,
    LossRatio,
}

/// Calendar year of cell `(i, j)` (all 1-based): `t = i + j - 1`.
#[inline]
pub fn calendar_index(i: usize, j: usize) -> usize {
    debug_assert!(i >= 1 && j >= 1);
    i + j - 1
}

/// Ingestion options for [`TrianglePanel::load`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IngestConfig {
    /// How to interpret the cell values in the files.
    pub kind: Kind,
    /// Rescale to loss ratios (divide each row by its premium) after loading.
    pub to_loss_ratios: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { kind: Kind::Incremental, to_loss_ratios: false }
    }
}

/// N aligned triangles with exposures; the observed data of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrianglePanel {
    /// Triangle dimension `I` (accident years = development years).
    pub dim: usize,
    /// `cells[n][i-1][j-1]`; `None` marks an unobserved or missing cell.
    pub cells: Vec<Vec<Vec<Option<f64>>>>,
    /// `exposures[n][i-1]`: earned premium by accident year, strictly positive.
    pub exposures: Vec<Vec<f64>>,
    pub kind: Kind,
    pub scale: Scale,
}

impl TrianglePanel {
    /// Build a panel from per-line grids of optional cells.
    pub fn new(
        cells: Vec<Vec<Vec<Option<f64>>>>,
        exposures: Vec<Vec<f64>>,
        kind: Kind,
        scale: Scale,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidData("panel has no lines".into()));
        }
        let dim = cells[0].len();
        if dim == 0 {
            return Err(Error::InvalidData("dimension mismatch/empty".into()));
        }
        if cells.len() != exposures.len() {
            return Err(Error::InvalidData(format!(
                "{} triangles but {} exposure vectors",
                cells.len(),
                exposures.len()
            )));
        }
        for (n, grid) in cells.iter().enumerate() {
            if grid.len() != dim || grid.iter().any(|row| row.len() != dim) {
                return Err(Error::InvalidData(format!(
                    "line {}: dimension mismatch across lines (expected {dim}x{dim})",
                    n + 1
                )));
            }
            for (i, row) in grid.iter().enumerate() {
                for (j, cell) in row.iter().enumerate() {
                    if let Some(v) = cell {
                        if !v.is_finite() {
                            return Err(Error::InvalidData(format!(
                                "line {} cell ({},{}) is not finite",
                                n + 1,
                                i + 1,
                                j + 1
                            )));
                        }
                    }
                }
            }
            if exposures[n].len() != dim {
                return Err(Error::InvalidData(format!(
                    "line {}: {} exposures for dimension {dim}",
                    n + 1,
                    exposures[n].len()
                )));
            }
            if let Some(e) = exposures[n].iter().find(|e| !(**e > 0.0)) {
                return Err(Error::InvalidData(format!(
                    "line {}: nonpositive exposure {e}",
                    n + 1
                )));
            }
        }
        Ok(Self { dim, cells, exposures, kind, scale })
    }

    /// Number of business lines `N`.
    pub fn n_lines(&self) -> usize {
        self.cells.len()
    }

    /// Cell value at 1-based `(i, j)` for line `n` (0-based).
    pub fn cell(&self, n: usize, i: usize, j: usize) -> Option<f64> {
        self.cells[n][i - 1][j - 1]
    }

    pub fn is_observed(&self, n: usize, i: usize, j: usize) -> bool {
        self.cells[n][i - 1][j - 1].is_some()
    }

    /// Observed cells of accident row `i` for line `n`, as `(j, value)` pairs
    /// in development order.
    pub fn observed_row(&self, n: usize, i: usize) -> Vec<(usize, f64)> {
        (1..=self.dim)
            .filter_map(|j| self.cells[n][i - 1][j - 1].map(|v| (j, v)))
            .collect()
    }

    /// All observed cells of line `n` as `(i, j, value)`.
    pub fn observed_cells(&self, n: usize) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 1..=self.dim {
            for j in 1..=self.dim {
                if let Some(v) = self.cells[n][i - 1][j - 1] {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    /// Total observed cell count across lines for accident row `i`.
    pub fn observed_in_row(&self, i: usize) -> usize {
        (0..self.n_lines()).map(|n| self.observed_row(n, i).len()).sum()
    }

    /// Load a panel from one CSV file per line of business.
    pub fn load<P: AsRef<Path>>(paths: &[P], config: IngestConfig) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::InvalidData("no input files".into()));
        }
        let mut cells = Vec::with_capacity(paths.len());
        let mut exposures = Vec::with_capacity(paths.len());
        let mut dim: Option<usize> = None;
        for path in paths {
            let (grid, expo) = read_triangle_csv(path.as_ref())?;
            match dim {
                None => dim = Some(grid.len()),
                Some(d) if d != grid.len() => {
                    return Err(Error::InvalidData(format!(
                        "dimension mismatch across lines: {} vs {}",
                        d,
                        grid.len()
                    )))
                }
                _ => {}
            }
            cells.push(grid);
            exposures.push(expo);
        }
        let panel = Self::new(cells, exposures, config.kind, Scale::Raw)?;
        if config.to_loss_ratios {
            panel.to_loss_ratios()
        } else {
            Ok(panel)
        }
    }

    /// Write the panel back out, one CSV per line, in the ingestion layout.
    pub fn save<P: AsRef<Path>>(&self, paths: &[P]) -> Result<()> {
        if paths.len() != self.n_lines() {
            return Err(Error::InvalidData(format!(
                "{} paths for {} lines",
                paths.len(),
                self.n_lines()
            )));
        }
        for (n, path) in paths.iter().enumerate() {
            write_triangle_csv(path.as_ref(), &self.cells[n], &self.exposures[n])?;
        }
        Ok(())
    }

    /// Difference a cumulative panel into per-period increments.
    pub fn to_incremental(&self) -> Result<Self> {
        if self.kind != Kind::Cumulative {
            return Err(Error::InvalidData("panel is not cumulative".into()));
        }
        let mut out = self.clone();
        for grid in &mut out.cells {
            for row in grid.iter_mut() {
                let mut prev = 0.0;
                for cell in row.iter_mut() {
                    if let Some(v) = *cell {
                        *cell = Some(v - prev);
                        prev = v;
                    }
                }
            }
        }
        out.kind = Kind::Incremental;
        Ok(out)
    }

    /// Running row sums of an incremental panel.
    pub fn to_cumulative(&self) -> Result<Self> {
        if self.kind != Kind::Incremental {
            return Err(Error::InvalidData("panel is not incremental".into()));
        }
        let mut out = self.clone();
        for grid in &mut out.cells {
            for row in grid.iter_mut() {
                let mut acc = 0.0;
                for cell in row.iter_mut() {
                    if let Some(v) = *cell {
                        acc += v;
                        *cell = Some(acc);
                    }
                }
            }
        }
        out.kind = Kind::Cumulative;
        Ok(out)
    }

    /// Divide every cell of row `i` by that row's premium.
    pub fn to_loss_ratios(&self) -> Result<Self> {
        if self.scale != Scale::Raw {
            return Err(Error::InvalidData("panel is already scaled".into()));
        }
        let mut out = self.clone();
        for (grid, expo) in out.cells.iter_mut().zip(&self.exposures) {
            for (row, e) in grid.iter_mut().zip(expo) {
                for cell in row.iter_mut() {
                    if let Some(v) = cell.as_mut() {
                        *v /= e;
                    }
                }
            }
        }
        out.scale = Scale::LossRatio;
        Ok(out)
    }

    /// Inverse of [`to_loss_ratios`](Self::to_loss_ratios).
    pub fn to_raw(&self) -> Result<Self> {
        if self.scale != Scale::LossRatio {
            return Err(Error::InvalidData("panel is not loss-ratio scaled".into()));
        }
        let mut out = self.clone();
        for (grid, expo) in out.cells.iter_mut().zip(&self.exposures) {
            for (row, e) in grid.iter_mut().zip(expo) {
                for cell in row.iter_mut() {
                    if let Some(v) = cell.as_mut() {
                        *v *= e;
                    }
                }
            }
        }
        out.scale = Scale::Raw;
        Ok(out)
    }

    /// JSON export with an explicit mask array alongside the values.
    pub fn to_json(&self) -> Result<String> {
        let mask: Vec<Vec<Vec<bool>>> = self
            .cells
            .iter()
            .map(|g| g.iter().map(|r| r.iter().map(Option::is_some).collect()).collect())
            .collect();
        let doc = PanelJson {
            n_lines: self.n_lines(),
            dim: self.dim,
            kind: self.kind,
            scale: self.scale,
            exposures: self.exposures.clone(),
            cells: self.cells.clone(),
            mask,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PanelJson = serde_json::from_str(text)?;
        Self::new(doc.cells, doc.exposures, doc.kind, doc.scale)
    }
}

#[derive(Serialize, Deserialize)]
struct PanelJson {
    n_lines: usize,
    dim: usize,
    kind: Kind,
    scale: Scale,
    exposures: Vec<Vec<f64>>,
    cells: Vec<Vec<Vec<Option<f64>>>>,
    mask: Vec<Vec<Vec<bool>>>,
}

fn read_triangle_csv(path: &Path) -> Result<(Vec<Vec<Option<f64>>>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let fields: Vec<String> = record.iter().map(|s| s.to_string()).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(fields);
    }
    let dim = rows.len();
    if dim == 0 {
        return Err(Error::InvalidData(format!(
            "dimension mismatch/empty: {} has no rows",
            path.display()
        )));
    }
    let mut grid = vec![vec![None; dim]; dim];
    let mut exposures = Vec::with_capacity(dim);
    for (i, fields) in rows.iter().enumerate() {
        if fields.len() > dim + 1 {
            return Err(Error::InvalidData(format!(
                "{} row {}: {} development columns for dimension {dim}",
                path.display(),
                i + 1,
                fields.len() - 1
            )));
        }
        let premium: f64 = parse_cell(&fields[0], path, i + 1, 0)?.ok_or_else(|| {
            Error::InvalidData(format!("{} row {}: blank premium", path.display(), i + 1))
        })?;
        exposures.push(premium);
        for (j, field) in fields.iter().enumerate().skip(1) {
            grid[i][j - 1] = parse_cell(field, path, i + 1, j)?;
        }
    }
    Ok((grid, exposures))
}

fn parse_cell(field: &str, path: &Path, row: usize, col: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    // Appendix-style tables use thousands separators.
    let cleaned = field.replace(',', "");
    cleaned.parse::<f64>().map(Some).map_err(|_| {
        Error::InvalidData(format!(
            "{} row {row} col {col}: non-numeric cell {field:?}",
            path.display()
        ))
    })
}

fn write_triangle_csv(
    path: &Path,
    grid: &[Vec<Option<f64>>],
    exposures: &[f64],
) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (row, premium) in grid.iter().zip(exposures) {
        let mut record = vec![format!("{premium}")];
        record.extend(row.iter().map(|c| c.map(|v| format!("{v}")).unwrap_or_default()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upper_panel(dim: usize, mut values: impl FnMut(usize, usize) -> f64) -> TrianglePanel {
        let grid: Vec<Vec<Option<f64>>> = (1..=dim)
            .map(|i| {
                (1..=dim)
                    .map(|j| (calendar_index(i, j) <= dim).then(|| values(i, j)))
                    .collect()
            })
            .collect();
        TrianglePanel::new(vec![grid], vec![vec![1.0; dim]], Kind::Incremental, Scale::Raw)
            .unwrap()
    }

    #[test]
    fn calendar_index_formula() {
        assert_eq!(calendar_index(1, 1), 1);
        assert_eq!(calendar_index(3, 5), 7);
        // max over the observed region of a 15x15 triangle is T = 15
        let max_t = (1..=15)
            .flat_map(|i| (1..=(15 - i + 1)).map(move |j| calendar_index(i, j)))
            .max()
            .unwrap();
        assert_eq!(max_t, 15);
    }

    #[test]
    fn two_by_two_all_ones_has_three_observed() {
        let panel = upper_panel(2, |_, _| 1.0);
        let observed = panel.observed_cells(0);
        assert_eq!(observed.len(), 3);
        assert!(!panel.is_observed(0, 2, 2));
    }

    #[test]
    fn incremental_differences_rows() {
        // AB ex-DI row 1 starts 13,714 / 24,996 cumulative
        let mut grid = vec![vec![None; 2]; 2];
        grid[0][0] = Some(13_714.0);
        grid[0][1] = Some(24_996.0);
        grid[1][0] = Some(5.0);
        let panel =
            TrianglePanel::new(vec![grid], vec![vec![1.0, 1.0]], Kind::Cumulative, Scale::Raw)
                .unwrap();
        let inc = panel.to_incremental().unwrap();
        assert_eq!(inc.cell(0, 1, 1), Some(13_714.0));
        assert_eq!(inc.cell(0, 1, 2), Some(11_282.0));
    }

    #[test]
    fn constant_row_differences_to_spike() {
        let panel = upper_panel(3, |_, _| 5.0);
        let cum = panel.to_cumulative().unwrap();
        let back = cum.to_incremental().unwrap();
        assert_eq!(cum.cell(0, 1, 3), Some(15.0));
        assert_eq!(back, panel);
    }

    #[test]
    fn loss_ratio_divides_by_row_premium() {
        let mut grid = vec![vec![None; 2]; 2];
        grid[0][0] = Some(13_714.0);
        grid[1][0] = Some(1.0);
        let panel = TrianglePanel::new(
            vec![grid],
            vec![vec![116_491.0, 2.0]],
            Kind::Incremental,
            Scale::Raw,
        )
        .unwrap();
        let lr = panel.to_loss_ratios().unwrap();
        let got = lr.cell(0, 1, 1).unwrap();
        assert!((got - 13_714.0 / 116_491.0).abs() < 1e-12);
        assert!((got - 0.11773).abs() < 1e-5);
        // unit exposure is the identity
        let unit = upper_panel(2, |i, j| (i * j) as f64);
        assert_eq!(unit.to_loss_ratios().unwrap().cells, unit.cells);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TrianglePanel::new(vec![], vec![], Kind::Incremental, Scale::Raw).is_err());
        let grid = vec![vec![Some(1.0)]];
        assert!(
            TrianglePanel::new(vec![grid], vec![vec![0.0]], Kind::Incremental, Scale::Raw)
                .is_err()
        );
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("triangle-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("line1.csv");
        std::fs::write(&path, "100,1.5,2.5\n200,3.25,\n").unwrap();
        let panel = TrianglePanel::load(&[&path], IngestConfig::default()).unwrap();
        assert_eq!(panel.dim, 2);
        assert_eq!(panel.cell(0, 1, 2), Some(2.5));
        assert_eq!(panel.cell(0, 2, 2), None);
        assert_eq!(panel.exposures[0], vec![100.0, 200.0]);

        let out = dir.join("line1-out.csv");
        panel.save(&[&out]).unwrap();
        let reread = TrianglePanel::load(&[&out], IngestConfig::default()).unwrap();
        assert_eq!(panel, reread);

        let empty = dir.join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        let err = TrianglePanel::load(&[&empty], IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch/empty"));

        let bad = dir.join("bad.csv");
        std::fs::write(&bad, "100,abc\n").unwrap();
        assert!(TrianglePanel::load(&[&bad], IngestConfig::default()).is_err());
    }

    #[test]
    fn json_export_carries_mask() {
        let panel = upper_panel(2, |i, j| (10 * i + j) as f64);
        let text = panel.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["mask"][0][1][1], serde_json::Value::Bool(false));
        let back = TrianglePanel::from_json(&text).unwrap();
        assert_eq!(panel, back);
    }

    proptest! {
        #[test]
        fn cumulative_round_trip(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let panel = upper_panel(10, |_, _| rng.random_range(0.0..100.0));
            let back = panel.to_cumulative().unwrap().to_incremental().unwrap();
            for i in 1..=10usize {
                for j in 1..=(10 - i + 1) {
                    let a = panel.cell(0, i, j).unwrap();
                    let b = back.cell(0, i, j).unwrap();
                    prop_assert!((a - b).abs() <= 1e-9_f64.max(a.abs() * 1e-12));
                }
            }
        }

        #[test]
        fn loss_ratio_round_trip(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dim = 6usize;
            let grid: Vec<Vec<Option<f64>>> = (1..=dim).map(|i| (1..=dim).map(|j| {
                (calendar_index(i, j) <= dim).then(|| rng.random_range(0.0..5000.0))
            }).collect()).collect();
            let expo: Vec<f64> = (0..dim).map(|_| rng.random_range(1.0..2e5)).collect();
            let panel = TrianglePanel::new(vec![grid], vec![expo], Kind::Incremental, Scale::Raw).unwrap();
            let back = panel.to_loss_ratios().unwrap().to_raw().unwrap();
            for i in 1..=dim {
                for j in 1..=(dim - i + 1) {
                    let a = panel.cell(0, i, j).unwrap();
                    let b = back.cell(0, i, j).unwrap();
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }

            // every observed cell sits in a valid calendar year
            for (i, j, _) in panel.observed_cells(0) {
                let t = calendar_index(i, j);
                prop_assert!((1..=dim).contains(&t));
            }
        }
    }
}
