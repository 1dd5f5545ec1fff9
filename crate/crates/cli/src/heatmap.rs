//! Grid export: full-precision CSV and plain portable graymap (P2).
//!
//! Both formats are byte-exact functions of the grid. CSV cells use Rust's
//! shortest round-trip decimal form, so parse(emit(grid)) == grid exactly.
//! PGM pixels scale cells to 0..=255 against the grid maximum and truncate.

use std::path::Path;

use crft_core::{Error, InfoGrid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(HeatmapFormat::Csv),
            "pgm" => Ok(HeatmapFormat::Pgm),
            other => Err(Error::InvalidConfig(format!("unknown heatmap format {other:?}"))),
        }
    }
}

pub fn render_csv(grid: &InfoGrid) -> String {
    let mut out = String::new();
    for i in 0..grid.n {
        for j in 0..grid.n {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", grid.at(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::InvalidConfig(format!("bad csv cell: {e}")))?);
    }
    Ok(rows)
}

pub fn render_pgm(grid: &InfoGrid) -> String {
    let max = grid.values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", grid.n, grid.n);
    for i in 0..grid.n {
        for j in 0..grid.n {
            if j > 0 {
                out.push(' ');
            }
            let px = if max > 0.0 {
                (255.0 * grid.at(i, j) / max) as u8
            } else {
                0
            };
            out.push_str(&px.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn export_heatmap(grid: &InfoGrid, path: &Path, format: HeatmapFormat) -> Result<()> {
    for v in &grid.values {
        if !v.is_finite() {
            return Err(Error::InvalidConfig("grid contains non-finite values".into()));
        }
    }
    let text = match format {
        HeatmapFormat::Csv => render_csv(grid),
        HeatmapFormat::Pgm => render_pgm(grid),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crft_core::GridKind;

    fn grid(values: Vec<f64>, n: usize) -> InfoGrid {
        InfoGrid {
            layer: 0,
            n,
            values,
            kind: GridKind::Attention,
        }
    }

    #[test]
    fn pgm_quantization_example() {
        let g = grid(vec![1.0, 0.0, 0.5, 0.5], 2);
        let pgm = render_pgm(&g);
        assert_eq!(pgm, "P2\n2 2\n255\n255 0\n127 127\n");
    }

    #[test]
    fn pgm_all_zero_grid() {
        let g = grid(vec![0.0; 4], 2);
        assert_eq!(render_pgm(&g), "P2\n2 2\n255\n0 0\n0 0\n");
    }

    #[test]
    fn csv_roundtrips_exactly() {
        let vals = vec![1.0, 0.0, 0.1 + 0.2, 1.0 / 3.0, 5e-324, 0.4999999999999999, 2.5, 0.125, 1e300];
        let g = grid(vals.clone(), 3);
        let parsed = parse_csv(&render_csv(&g)).unwrap();
        let flat: Vec<f64> = parsed.into_iter().flatten().collect();
        assert_eq!(flat, vals);
    }
}
