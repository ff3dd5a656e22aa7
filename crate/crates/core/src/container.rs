//! Framing shared by the template and verifier model files.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::grid::Grid;

pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Templates,
    Scorer,
}

impl ContainerKind {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            ContainerKind::Templates => b"DPTS",
            ContainerKind::Scorer => b"DPSC",
        }
    }
}

pub(crate) fn invalid(msg: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
}

pub(crate) fn write_header(w: &mut impl Write, kind: ContainerKind) -> std::io::Result<()> {
    w.write_all(kind.magic())?;
    w.write_u16::<LittleEndian>(VERSION)
}

pub(crate) fn read_header(r: &mut impl Read, kind: ContainerKind) -> std::io::Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != kind.magic() {
        return Err(invalid("bad magic"));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(invalid(&format!("unsupported version {version}")));
    }
    Ok(())
}

pub(crate) fn write_f32_slice(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub(crate) fn read_f32_vec(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut raw = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut raw)?;
    Ok(raw.into_iter().map(f64::from).collect())
}

pub(crate) fn write_f32_grid(w: &mut impl Write, g: &Grid<f64>) -> std::io::Result<()> {
    write_f32_slice(w, g.as_slice())
}

pub(crate) fn read_f32_grid(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Grid<f64>> {
    let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 24).ok_or_else(|| invalid("implausible grid size"))?;
    let data = read_f32_vec(r, n)?;
    Ok(Grid::from_vec(rows, cols, data).expect("shape"))
}
