//! On-disk formats: frame directories, annotation directories, JSON-lines
//! records, labeled-cloud CSV and ETH idl import.
//!
//! A frame directory holds `intrinsics.txt` plus, per frame id `N`, either
//! `N.depth.pgm` (16-bit, millimeters, 0 = invalid) or `N.depth.f32` (raw
//! little-endian meters, 0 = invalid) with a `N.depth.hdr` header, and an
//! optional `N.rgb.ppm`. Ids are written zero-padded to six digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthSet, GtBox};
use crate::geometry::{CameraIntrinsics, DepthFrame};
use crate::grid::{Grid, Rect};
use crate::labeling::LabeledCloud;
use crate::roi::Roi;
use crate::training::{normalize_annotation, Annotation, NormalizeParams};

pub const INTRINSICS_FILE: &str = "intrinsics.txt";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::format(path, format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    let v = kv.get(key).ok_or_else(|| Error::format(path, format!("missing key {key}")))?;
    v.parse().map_err(|_| Error::format(path, format!("bad value for {key}: {v}")))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = parse_key_values(&text, path)?;
    let known = ["fx", "fy", "cx", "cy", "width", "height"];
    if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::format(path, format!("unknown key {k}")));
    }
    CameraIntrinsics::new(
        take(&kv, "fx", path)?,
        take(&kv, "fy", path)?,
        take(&kv, "cx", path)?,
        take(&kv, "cy", path)?,
        take(&kv, "width", path)?,
        take(&kv, "height", path)?,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let text = format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    write_bytes(path, text.as_bytes())
}

/// Next whitespace-separated header token of a binary PNM, skipping comments.
fn pnm_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Binary PGM (P5) with raw sample values; 8- or 16-bit.
pub fn read_pgm_u16(path: &Path) -> Result<Grid<u16>> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    if pnm_token(&bytes, &mut pos).as_deref() != Some("P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = || -> Result<usize> {
        pnm_token(&bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad PGM header"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad PGM dimensions or maxval"));
    }
    let data = &bytes[pos + 1..];
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    if data.len() < need {
        return Err(bad("truncated PGM data"));
    }
    let values = if wide {
        data[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data[..need].iter().map(|&v| u16::from(v)).collect()
    };
    Ok(Grid::from_vec(h, w, values).expect("sized"))
}

pub fn write_pgm_u16(path: &Path, values: &Grid<u16>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", values.cols(), values.rows()).into_bytes();
    out.reserve(values.len() * 2);
    for v in values.iter() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Grid<[u8; 3]>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(h, w, pixels).expect("sized"))
}

pub fn write_ppm(path: &Path, rgb: &Grid<[u8; 3]>) -> Result<()> {
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(rgb.cols() as u32, rgb.rows() as u32, flat).expect("sized");
    img.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Depth in meters to millimeters; invalid and out-of-range cells become 0.
pub fn depth_to_mm(depth: &Grid<Option<f32>>) -> Grid<u16> {
    depth.map(|z| match z {
        Some(z) => {
            let mm = (f64::from(*z) * 1000.0).round();
            if (1.0..=65535.0).contains(&mm) {
                mm as u16
            } else {
                0
            }
        }
        None => 0,
    })
}

fn mm_to_meters(mm: &Grid<u16>) -> Grid<f32> {
    mm.map(|&v| v as f32 / 1000.0)
}

pub fn read_raw_f32(path: &Path, header: &Path) -> Result<Grid<f32>> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let kv = parse_key_values(&text, header)?;
    let (w, h): (usize, usize) = (take(&kv, "width", header)?, take(&kv, "height", header)?);
    let bytes = read_bytes(path)?;
    if bytes.len() != w * h * 4 {
        return Err(Error::format(path, format!("expected {} bytes for {w}x{h}, got {}", w * h * 4, bytes.len())));
    }
    let mut values = vec![0f32; w * h];
    LittleEndian::read_f32_into(&bytes, &mut values);
    Ok(Grid::from_vec(h, w, values).expect("sized"))
}

pub fn write_raw_f32(path: &Path, header: &Path, depth: &Grid<Option<f32>>) -> Result<()> {
    let mut bytes = vec![0u8; depth.len() * 4];
    let values: Vec<f32> = depth.iter().map(|z| z.unwrap_or(0.0)).collect();
    LittleEndian::write_f32_into(&values, &mut bytes);
    write_bytes(path, &bytes)?;
    write_bytes(header, format!("width={}\nheight={}\n", depth.cols(), depth.rows()).as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    Pgm,
    F32,
}

#[derive(Clone, Debug)]
enum DepthSource {
    Pgm(PathBuf),
    Raw { data: PathBuf, header: PathBuf },
}

/// A directory of frames, loaded one at a time.
#[derive(Clone, Debug)]
pub struct FrameDir {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    entries: Vec<(u64, DepthSource)>,
}

impl FrameDir {
    pub fn open(root: &Path) -> Result<Self> {
        let intrinsics = read_intrinsics(&root.join(INTRINSICS_FILE))?;
        let mut entries = Vec::new();
        for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let (stem, source) = if let Some(stem) = name.strip_suffix(".depth.pgm") {
                (stem, DepthSource::Pgm(path.clone()))
            } else if let Some(stem) = name.strip_suffix(".depth.f32") {
                let header = root.join(format!("{stem}.depth.hdr"));
                (stem, DepthSource::Raw { data: path.clone(), header })
            } else {
                continue;
            };
            let id: u64 = stem
                .parse()
                .map_err(|_| Error::format(&path, "frame file name must start with a numeric id"))?;
            entries.push((id, source));
        }
        entries.sort_by_key(|(id, _)| *id);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::format(root, format!("frame {} stored twice", w[0].0)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            intrinsics,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|(id, _)| *id).collect()
    }

    pub fn load_index(&self, i: usize) -> Result<DepthFrame> {
        let (id, source) = &self.entries[i];
        let (raw, path) = match source {
            DepthSource::Pgm(p) => (mm_to_meters(&read_pgm_u16(p)?), p),
            DepthSource::Raw { data, header } => (read_raw_f32(data, header)?, data),
        };
        let rgb_path = self.root.join(format!("{id:06}.rgb.ppm"));
        let rgb = if rgb_path.exists() { Some(read_ppm(&rgb_path)?) } else { None };
        DepthFrame::from_raw_meters(&raw, rgb, self.intrinsics, *id).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(&self, id: u64) -> Result<DepthFrame> {
        let i = self
            .entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .map_err(|_| Error::FrameMismatch(format!("frame {id} not in {}", self.root.display())))?;
        self.load_index(i)
    }

    pub fn load_all(&self) -> Result<Vec<DepthFrame>> {
        (0..self.len()).map(|i| self.load_index(i)).collect()
    }
}

/// Writes one frame; the directory must already hold matching intrinsics.
pub fn write_frame(dir: &Path, frame: &DepthFrame, format: DepthFormat) -> Result<()> {
    let id = frame.frame_id;
    match format {
        DepthFormat::Pgm => write_pgm_u16(&dir.join(format!("{id:06}.depth.pgm")), &depth_to_mm(&frame.depth))?,
        DepthFormat::F32 => write_raw_f32(
            &dir.join(format!("{id:06}.depth.f32")),
            &dir.join(format!("{id:06}.depth.hdr")),
            &frame.depth,
        )?,
    }
    if let Some(rgb) = &frame.rgb {
        write_ppm(&dir.join(format!("{id:06}.rgb.ppm")), rgb)?;
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    frame_id: u64,
    boxes: Vec<GtBox>,
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    let mut gt = GroundTruthSet::default();
    for r in read_jsonl::<GtRecord>(path)? {
        gt.insert(r.frame_id, r.boxes).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(gt)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruthSet) -> Result<()> {
    write_jsonl(
        path,
        gt.frames.iter().map(|(&frame_id, boxes)| GtRecord {
            frame_id,
            boxes: boxes.clone(),
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    frame_id: u64,
    #[serde(flatten)]
    detection: Detection,
}

/// Detections keyed by frame id.
pub fn read_detections(path: &Path) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in read_jsonl::<DetectionRecord>(path)? {
        out.entry(r.frame_id).or_default().push(r.detection);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &BTreeMap<u64, Vec<Detection>>) -> Result<()> {
    write_jsonl(
        path,
        dets.iter().flat_map(|(&frame_id, ds)| {
            ds.iter().map(move |d| DetectionRecord {
                frame_id,
                detection: d.clone(),
            })
        }),
    )
}

#[derive(Serialize)]
struct RoiRecord {
    frame_id: u64,
    bbox: Rect,
    distance_m: f64,
    n_points: usize,
}

pub fn write_rois(path: &Path, rois: &BTreeMap<u64, Vec<Roi>>) -> Result<()> {
    write_jsonl(
        path,
        rois.iter().flat_map(|(&frame_id, rs)| {
            rs.iter().map(move |r| RoiRecord {
                frame_id,
                bbox: r.bbox,
                distance_m: r.distance_m,
                n_points: r.point_indices.len(),
            })
        }),
    )
}

/// `x,y,z,label` per point.
pub fn labeled_cloud_csv(cloud: &LabeledCloud) -> String {
    let mut s = String::from("x,y,z,label\n");
    for (p, l) in cloud.cloud.points.iter().zip(&cloud.labels) {
        let _ = writeln!(s, "{:.4},{:.4},{:.4},{}", p.x, p.y, p.z, l.as_str());
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationSidecar {
    distance_m: f64,
    source_id: String,
}

/// Reads `*.json` sidecars and their `*.pgm` depth patches (millimeters,
/// 0 = invalid), normalizing each patch. The sidecar distance replaces the
/// measured reference median.
pub fn read_annotations(dir: &Path, params: &NormalizeParams) -> Result<Vec<Annotation>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    sidecars.sort();
    let mut out = Vec::with_capacity(sidecars.len());
    for path in sidecars {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: AnnotationSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let patch_path = path.with_extension("pgm");
        let mm = read_pgm_u16(&patch_path)?;
        let raw = mm.map(|&v| f64::from(v) / 1000.0);
        let mask = mm.map(|&v| v > 0);
        let mut a = normalize_annotation(&raw, &mask, params).map_err(|e| Error::format(&patch_path, e.to_string()))?;
        a = Annotation::new(a.patch, a.valid, meta.distance_m, meta.source_id).map_err(|e| Error::format(&path, e.to_string()))?;
        out.push(a);
    }
    if out.is_empty() {
        return Err(Error::format(dir, "no annotations found"));
    }
    Ok(out)
}

/// Writes a normalized annotation back as absolute depth around its distance.
pub fn write_annotation(dir: &Path, name: &str, a: &Annotation) -> Result<()> {
    let mm = Grid::from_fn(a.rows(), a.cols(), |r, c| {
        if a.valid[(r, c)] {
            ((a.distance_m + a.patch[(r, c)]) * 1000.0).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        }
    });
    write_pgm_u16(&dir.join(format!("{name}.pgm")), &mm)?;
    let meta = AnnotationSidecar {
        distance_m: a.distance_m,
        source_id: a.source_id.clone(),
    };
    write_bytes(&dir.join(format!("{name}.json")), serde_json::to_string(&meta)?.as_bytes())
}

/// Parses ETH-style idl annotations:
/// `"left/image_00000001_0.png": (x1, y1, x2, y2), (...);` with the last
/// line ending in `.`. Frames get ids in file order.
pub fn parse_eth_idl(text: &str, path: &Path) -> Result<(GroundTruthSet, Vec<String>)> {
    let mut gt = GroundTruthSet::default();
    let mut names = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let rest = line.strip_prefix('"').ok_or_else(|| bad("expected a quoted image name"))?;
        let (name, rest) = rest.split_once('"').ok_or_else(|| bad("unterminated image name"))?;
        let rest = rest.trim().trim_end_matches([';', '.']).trim();
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        let mut boxes = Vec::new();
        for chunk in rest.split(')') {
            let chunk = chunk.trim().trim_start_matches(',').trim();
            if chunk.is_empty() {
                continue;
            }
            let inner = chunk.strip_prefix('(').ok_or_else(|| bad("expected a box in parentheses"))?;
            let v: Vec<f64> = inner
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("box coordinates must be numbers"))?;
            if v.len() != 4 {
                return Err(bad("box needs four coordinates"));
            }
            let (x0, x1) = (v[0].min(v[2]).round() as i64, v[0].max(v[2]).round() as i64);
            let (y0, y1) = (v[1].min(v[3]).round() as i64, v[1].max(v[3]).round() as i64);
            let rect = Rect::new(x0, y0, x1 - x0, y1 - y0);
            if !rect.is_empty() {
                boxes.push(GtBox { rect, ignore: false });
            }
        }
        gt.insert(names.len() as u64, boxes).map_err(|e| bad(&e.to_string()))?;
        names.push(name.to_string());
    }
    Ok((gt, names))
}
