//! Import point for externally formatted recordings.
//!
//! External archives name and scale their columns differently from the
//! canonical schemas. A [`ColumnMap`] says which source column feeds each
//! canonical channel and how to scale it; [`import_series`] applies it and
//! [`convert_series`] writes the canonical CSV that [`crate::ingest`] reads.
//!
//! The mapping for the public rehabilitation-robot release has not been
//! checked against its actual files. [`ColumnMap::assumed_release`] only
//! records the expected column names so a conversion has a starting point;
//! confirm them before use.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::write_series_csv;
use crate::model::{EMG_LABELS, GAME_LABELS, WRENCH_LABELS};
use crate::SampledSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceColumn {
    /// Header in the source file, matched case-insensitively.
    pub name: String,
    /// Multiplier into canonical units (seconds, normalized EMG volts, newtons).
    pub scale: f64,
}

impl SourceColumn {
    pub fn new(name: impl Into<String>, scale: f64) -> Self {
        SourceColumn {
            name: name.into(),
            scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub time: SourceColumn,
    /// One source column per canonical channel, in canonical order.
    pub channels: Vec<SourceColumn>,
    pub delimiter: u8,
}

/// Which canonical schema a map targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    Emg,
    Wrench,
    Game,
}

impl SeriesKind {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            SeriesKind::Emg => &EMG_LABELS,
            SeriesKind::Wrench => &WRENCH_LABELS,
            SeriesKind::Game => &GAME_LABELS,
        }
    }
}

impl ColumnMap {
    /// Identity map: the source already uses canonical names and units.
    pub fn identity(kind: SeriesKind) -> Self {
        ColumnMap {
            time: SourceColumn::new("t", 1.0),
            channels: kind.labels().iter().map(|l| SourceColumn::new(*l, 1.0)).collect(),
            delimiter: b',',
        }
    }

    /// Unconfirmed guess at the public release: millisecond timestamps in a
    /// `time_ms` column and otherwise canonical channel names.
    pub fn assumed_release(kind: SeriesKind) -> Self {
        ColumnMap {
            time: SourceColumn::new("time_ms", 1e-3),
            ..ColumnMap::identity(kind)
        }
    }
}

/// Reads `path` through `map` into a series with the canonical labels of `kind`.
pub fn import_series(path: &Path, kind: SeriesKind, map: &ColumnMap) -> Result<SampledSeries> {
    let labels = kind.labels();
    if map.channels.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{kind:?} needs {} mapped channels, got {}",
            labels.len(),
            map.channels.len()
        )));
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(map.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let context = path.display().to_string();
    let find = |col: &SourceColumn| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(&col.name))
            .ok_or_else(|| Error::Missing {
                what: format!("source column in {context}"),
                key: col.name.clone(),
            })
    };
    let t_idx = find(&map.time)?;
    let idx = map.channels.iter().map(find).collect::<Result<Vec<_>>>()?;

    let mut timestamps = Vec::new();
    let mut channels = vec![Vec::new(); labels.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let cell = |i: usize, scale: f64| -> Result<f64> {
            record
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .map(|v| v * scale)
                .ok_or_else(|| Error::series(&context, format!("row {}: unreadable value in column {}", row + 2, header[i])))
        };
        timestamps.push(cell(t_idx, map.time.scale)?);
        for ((ch, &i), col) in channels.iter_mut().zip(&idx).zip(&map.channels) {
            ch.push(cell(i, col.scale)?);
        }
    }
    SampledSeries::new(timestamps, labels.iter().map(|l| l.to_string()).collect(), channels)
}

/// Imports `src` and writes it in canonical form to `dst`.
pub fn convert_series(src: &Path, dst: &Path, kind: SeriesKind, map: &ColumnMap) -> Result<SampledSeries> {
    let series = import_series(src, kind, map)?;
    write_series_csv(dst, &series)?;
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::read_series_csv;
    use std::fs;

    #[test]
    fn renames_reorders_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("raw.tsv");
        fs::write(&src, "Fz\tFX\ttime_ms\tfy\ttx\tty\ttz\n3\t1\t0\t2\t0\t0\t0\n6\t2\t5\t4\t0\t0\t0\n").unwrap();
        let mut map = ColumnMap::assumed_release(SeriesKind::Wrench);
        map.delimiter = b'\t';
        map.channels[0].scale = 10.0;
        let dst = dir.path().join("wrench.csv");
        let s = convert_series(&src, &dst, SeriesKind::Wrench, &map).unwrap();
        assert_eq!(s.timestamps(), &[0.0, 0.005]);
        assert_eq!(s.channel(0), &[10.0, 20.0]);
        assert_eq!(s.channel(2), &[3.0, 6.0]);
        assert_eq!(read_series_csv(&dst, &WRENCH_LABELS).unwrap(), s);
    }

    #[test]
    fn missing_column_and_bad_cells_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("g.csv");
        fs::write(&src, "t,target_x,target_y,avatar_x\n0,1,2,3\n").unwrap();
        let map = ColumnMap::identity(SeriesKind::Game);
        assert!(matches!(import_series(&src, SeriesKind::Game, &map), Err(Error::Missing { .. })));
        fs::write(&src, "t,target_x,target_y,avatar_x,avatar_y\n0,1,2,x,4\n").unwrap();
        assert!(import_series(&src, SeriesKind::Game, &map).is_err());
        let short = ColumnMap {
            channels: vec![],
            ..map
        };
        assert!(matches!(import_series(&src, SeriesKind::Game, &short), Err(Error::InvalidParameter(_))));
    }
}
