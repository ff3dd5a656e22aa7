//! Depth template types and their on-disk container.
//!
//! Binary layout (little endian), shared with the verifier model file:
//!
//! ```text
//! magic      [u8; 4]   "DPTS"
//! version    u16       1
//! kind       u8        0 single, 1 orientation, 2 distance
//! k          u32       member count
//! n_ranges   u32       then n_ranges x (lo f64, hi f64), hi may be +inf
//! members    k x { rows u32, cols u32, n_train u32,
//!                  values rows*cols f32 (NaN = no training data),
//!                  weights rows*cols f32 }
//! ```
//!
//! A JSON sidecar (`<file>.json`) carries the same header fields for humans
//! and scripts.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerKind};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthTemplate {
    /// Mean normalized depth per pixel; NaN where no sample was valid.
    pub values: Grid<f64>,
    pub n_train: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedTemplate {
    pub template: DepthTemplate,
    /// Per-pixel weights, finite and strictly positive.
    pub weights: Grid<f64>,
}

impl WeightedTemplate {
    pub fn new(template: DepthTemplate, weights: Grid<f64>) -> Result<Self> {
        if !template.values.same_shape(&weights) {
            return Err(Error::InvalidInput("template and weights differ in shape".into()));
        }
        if template.n_train == 0 {
            return Err(Error::InvalidInput("template trained on zero samples".into()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::InvalidInput("weights must be finite and positive".into()));
        }
        Ok(Self { template, weights })
    }

    /// Wraps a plain template with unit weights (the unweighted distance).
    pub fn unweighted(template: DepthTemplate) -> Self {
        let weights = Grid::filled(template.values.rows(), template.values.cols(), 1.0);
        Self { template, weights }
    }

    pub fn rows(&self) -> usize {
        self.template.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.template.values.cols()
    }

    /// Columns where at least a quarter of the rows read as foreground
    /// (mean depth at most `foreground_band` behind the reference median).
    /// Falls back to the full width.
    pub fn foreground_span(&self, foreground_band: f64) -> (usize, usize) {
        let v = &self.template.values;
        let needed = v.rows().div_ceil(4);
        let cols: Vec<usize> = (0..v.cols())
            .filter(|&c| (0..v.rows()).filter(|&r| v[(r, c)] <= foreground_band).count() >= needed)
            .collect();
        match (cols.first(), cols.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, v.cols()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Single,
    Orientation,
    Distance,
}

impl TemplateKind {
    fn code(self) -> u8 {
        match self {
            TemplateKind::Single => 0,
            TemplateKind::Orientation => 1,
            TemplateKind::Distance => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TemplateKind::Single,
            1 => TemplateKind::Orientation,
            2 => TemplateKind::Distance,
            _ => return None,
        })
    }
}

/// Half-open interval of camera distances `[lo, hi)` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRange {
    pub lo: f64,
    #[serde(with = "infinite_as_null")]
    pub hi: f64,
}

impl DistanceRange {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.lo && d < self.hi
    }
}

/// Ranges `[b0, b1), [b1, b2), ..., [bn, inf)` from ascending boundaries.
/// The first boundary must be 0.
pub fn ranges_from_boundaries(boundaries: &[f64]) -> Result<Vec<DistanceRange>> {
    if boundaries.first() != Some(&0.0) {
        return Err(Error::InvalidInput("distance ranges must start at 0".into()));
    }
    if !boundaries.windows(2).all(|w| w[0] < w[1]) || !boundaries.iter().all(|b| b.is_finite()) {
        return Err(Error::InvalidInput("range boundaries must be finite and strictly increasing".into()));
    }
    let mut out: Vec<DistanceRange> = boundaries
        .windows(2)
        .map(|w| DistanceRange { lo: w[0], hi: w[1] })
        .collect();
    out.push(DistanceRange {
        lo: *boundaries.last().unwrap(),
        hi: f64::INFINITY,
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub kind: TemplateKind,
    pub members: Vec<WeightedTemplate>,
    /// One range per member for the distance kind, empty otherwise.
    pub ranges: Vec<DistanceRange>,
}

impl TemplateSet {
    pub fn single(template: WeightedTemplate) -> Self {
        Self {
            kind: TemplateKind::Single,
            members: vec![template],
            ranges: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidInput(format!("template set: {msg}")));
        let Some(first) = self.members.first() else {
            return fail("no members");
        };
        if self.members.iter().any(|m| !m.template.values.same_shape(&first.template.values)) {
            return fail("members differ in shape");
        }
        match self.kind {
            TemplateKind::Single if self.members.len() != 1 => fail("single kind needs exactly one member"),
            TemplateKind::Orientation if self.members.len() < 2 => fail("orientation kind needs K >= 2"),
            TemplateKind::Distance => {
                if self.ranges.len() != self.members.len() {
                    return fail("distance kind needs one range per member");
                }
                let contiguous = self.ranges.windows(2).all(|w| w[0].hi == w[1].lo && w[0].lo < w[0].hi);
                let covers = self.ranges[0].lo <= 0.0 && self.ranges.last().unwrap().hi == f64::INFINITY;
                if contiguous && covers {
                    Ok(())
                } else {
                    fail("ranges must be ordered, disjoint and cover (0, inf)")
                }
            }
            _ if !self.ranges.is_empty() => fail("ranges only apply to the distance kind"),
            _ => Ok(()),
        }
    }

    /// Index of the distance-kind member whose range contains `distance_m`.
    pub fn range_index(&self, distance_m: f64) -> Option<usize> {
        if self.ranges.is_empty() {
            return None;
        }
        let idx = self.ranges.partition_point(|r| r.hi <= distance_m);
        Some(idx.min(self.ranges.len() - 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.metadata())?;
        let meta_path = sidecar_path(path);
        std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let set = Self::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))?;
        set.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(set)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        container::write_header(w, ContainerKind::Templates)?;
        w.write_u8(self.kind.code())?;
        w.write_u32::<LittleEndian>(self.members.len() as u32)?;
        w.write_u32::<LittleEndian>(self.ranges.len() as u32)?;
        for r in &self.ranges {
            w.write_f64::<LittleEndian>(r.lo)?;
            w.write_f64::<LittleEndian>(r.hi)?;
        }
        for m in &self.members {
            w.write_u32::<LittleEndian>(m.rows() as u32)?;
            w.write_u32::<LittleEndian>(m.cols() as u32)?;
            w.write_u32::<LittleEndian>(m.template.n_train as u32)?;
            container::write_f32_grid(w, &m.template.values)?;
            container::write_f32_grid(w, &m.weights)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        container::read_header(r, ContainerKind::Templates)?;
        let kind = TemplateKind::from_code(r.read_u8()?).ok_or_else(|| container::invalid("unknown template kind"))?;
        let k = r.read_u32::<LittleEndian>()? as usize;
        let n_ranges = r.read_u32::<LittleEndian>()? as usize;
        if k > 1024 || n_ranges > 1024 {
            return Err(container::invalid("implausible member count"));
        }
        let mut ranges = Vec::with_capacity(n_ranges);
        for _ in 0..n_ranges {
            let lo = r.read_f64::<LittleEndian>()?;
            let hi = r.read_f64::<LittleEndian>()?;
            ranges.push(DistanceRange { lo, hi });
        }
        let mut members = Vec::with_capacity(k);
        for _ in 0..k {
            let rows = r.read_u32::<LittleEndian>()? as usize;
            let cols = r.read_u32::<LittleEndian>()? as usize;
            let n_train = r.read_u32::<LittleEndian>()? as usize;
            let values = container::read_f32_grid(r, rows, cols)?;
            let weights = container::read_f32_grid(r, rows, cols)?;
            let member = WeightedTemplate::new(DepthTemplate { values, n_train }, weights)
                .map_err(|e| container::invalid(&e.to_string()))?;
            members.push(member);
        }
        Ok(Self { kind, members, ranges })
    }

    pub fn metadata(&self) -> TemplateMetadata {
        TemplateMetadata {
            format_version: container::VERSION,
            kind: self.kind,
            k: self.members.len(),
            ranges: self.ranges.clone(),
            rows: self.members.first().map_or(0, |m| m.rows()),
            cols: self.members.first().map_or(0, |m| m.cols()),
            n_train: self.members.iter().map(|m| m.template.n_train).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMetadata {
    pub format_version: u16,
    pub kind: TemplateKind,
    pub k: usize,
    pub ranges: Vec<DistanceRange>,
    pub rows: usize,
    pub cols: usize,
    pub n_train: Vec<usize>,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(seed: f64, rows: usize, cols: usize) -> WeightedTemplate {
        let values = Grid::from_fn(rows, cols, |r, c| {
            if r == 0 && c == 0 {
                f64::NAN
            } else {
                ((r * cols + c) as f64 * 0.37 + seed).sin()
            }
        });
        let weights = Grid::from_fn(rows, cols, |r, c| 1.0 + (r + c) as f64 * seed.abs());
        WeightedTemplate::new(DepthTemplate { values, n_train: 3 }, weights).unwrap()
    }

    #[test]
    fn boundaries_to_ranges() {
        let r = ranges_from_boundaries(&[0.0, 4.0, 7.0]).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[2].hi, f64::INFINITY);
        assert!(r[1].contains(4.0) && !r[0].contains(4.0));
        assert!(ranges_from_boundaries(&[1.0, 4.0]).is_err());
        assert!(ranges_from_boundaries(&[0.0, 4.0, 4.0]).is_err());
    }

    #[test]
    fn validate_kind_rules() {
        let single = TemplateSet::single(member(0.1, 3, 3));
        assert!(single.validate().is_ok());
        let bad = TemplateSet {
            kind: TemplateKind::Orientation,
            members: vec![member(0.1, 3, 3)],
            ranges: vec![],
        };
        assert!(bad.validate().is_err());
        let dist = TemplateSet {
            kind: TemplateKind::Distance,
            members: vec![member(0.1, 3, 3), member(0.2, 3, 3)],
            ranges: ranges_from_boundaries(&[0.0, 5.0]).unwrap(),
        };
        assert!(dist.validate().is_ok());
        assert_eq!(dist.range_index(4.999), Some(0));
        assert_eq!(dist.range_index(5.0), Some(1));
        assert_eq!(dist.range_index(1e9), Some(1));
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let t = DepthTemplate {
            values: Grid::filled(2, 2, 0.0),
            n_train: 1,
        };
        assert!(WeightedTemplate::new(t, Grid::filled(2, 2, 0.0)).is_err());
    }

    #[test]
    fn binary_reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let set = TemplateSet {
            kind: TemplateKind::Distance,
            members: vec![member(0.3, 5, 4), member(-0.7, 5, 4), member(1.1, 5, 4)],
            ranges: ranges_from_boundaries(&[0.0, 4.0, 7.0]).unwrap(),
        };
        set.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = TemplateSet::load(&path).unwrap();
        assert_eq!(loaded.kind, set.kind);
        assert_eq!(loaded.ranges, set.ranges);
        assert!(loaded.members[0].template.values[(0, 0)].is_nan());
        loaded.save(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        let meta: TemplateMetadata =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta, set.metadata());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        TemplateSet::single(member(0.5, 4, 4)).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(TemplateSet::load(&path), Err(Error::Format { .. })));
    }
}
