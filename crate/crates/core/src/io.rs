//! File formats: trajectory and curve CSV, report JSON and the generator
//! parameter file.
//!
//! Trajectory CSV has a header `x0..x{dx-1},y0..y{dy-1}` and one time step
//! per row, holding a single contiguous realization.
//!
//! The parameter file is `MAGIC`, a little-endian `u32` format version, a
//! little-endian `u64` byte length, that many bytes of JSON metadata, then
//! every parameter block's values as little-endian `f64` in the order listed
//! in the metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelSpec;
use crate::dine::CurvePoint;
use crate::error::{Error, Result};
use crate::ndt::{NdtArch, NdtModel, PowerNormalization};
use crate::nn::{Parameterized, RngStream};

pub const PARAM_MAGIC: &[u8; 8] = b"DCNDTPAR";
pub const PARAM_VERSION: u32 = 1;

fn csv_error(row: usize, e: impl std::fmt::Display) -> Error {
    Error::Csv { row, message: e.to_string() }
}

/// Reads a trajectory CSV into `(x, y)`, each `(rows, dim)`. Row numbers in
/// errors count the header as row 1.
pub fn read_trajectory_csv(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    read_trajectory(File::open(path)?)
}

pub fn read_trajectory(reader: impl Read) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(1, e))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(csv_error(1, "missing header"));
    }
    let (mut dx, mut dy) = (0, 0);
    for (k, h) in headers.iter().enumerate() {
        let expected_x = format!("x{dx}");
        let expected_y = format!("y{dy}");
        if dy == 0 && h == expected_x {
            dx += 1;
        } else if h == expected_y {
            dy += 1;
        } else {
            return Err(csv_error(1, format!("unexpected column `{h}` at position {k}; want x0..,y0..")));
        }
    }
    if dx == 0 || dy == 0 {
        return Err(csv_error(1, "need at least one x and one y column"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(row, e))?;
        if record.len() != dx + dy {
            return Err(csv_error(row, format!("expected {} fields, found {}", dx + dy, record.len())));
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| csv_error(row, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(csv_error(row, format!("non-finite value `{field}`")));
            }
            if k < dx {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let rows = xs.len() / dx;
    if rows == 0 {
        return Err(csv_error(2, "no data rows"));
    }
    let x = Array2::from_shape_vec((rows, dx), xs).expect("row-major fill");
    let y = Array2::from_shape_vec((rows, dy), ys).expect("row-major fill");
    Ok((x, y))
}

pub fn write_trajectory_csv(path: &Path, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    write_trajectory(File::create(path)?, x, y)
}

pub fn write_trajectory(writer: impl Write, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::LengthMismatch { context: "trajectory x/y rows", left: x.nrows(), right: y.nrows() });
    }
    let mut w = csv::Writer::from_writer(writer);
    let header: Vec<String> = (0..x.ncols()).map(|k| format!("x{k}")).chain((0..y.ncols()).map(|k| format!("y{k}"))).collect();
    w.write_record(&header).map_err(|e| csv_error(1, e))?;
    for (i, (xr, yr)) in x.rows().into_iter().zip(y.rows()).enumerate() {
        let fields: Vec<String> = xr.iter().chain(yr.iter()).map(|v| v.to_string()).collect();
        w.write_record(&fields).map_err(|e| csv_error(i + 2, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for (i, p) in curve.iter().enumerate() {
        w.serialize(p).map_err(|e| csv_error(i + 2, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(1, e))?;
    r.deserialize().enumerate().map(|(i, p)| p.map_err(|e| csv_error(i + 2, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// File stem naming a capacity run, e.g. `ma1_a0.5_p1_fb_seed7`.
pub fn run_file_stem(spec: &ChannelSpec, power: f64, feedback: bool, seed: u64) -> String {
    let channel = match *spec {
        ChannelSpec::Awgn { noise_var } => format!("awgn_n{noise_var}"),
        ChannelSpec::Ma1 { alpha } => format!("ma1_a{alpha}"),
    };
    let mode = if feedback { "fb" } else { "ff" };
    format!("{channel}_p{power}_{mode}_seed{seed}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    output_dim: usize,
    arch: NdtArch,
    power: f64,
    feedback: bool,
    normalization: PowerNormalization,
    blocks: Vec<BlockMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct BlockMeta {
    name: String,
    shape: [usize; 2],
}

/// Writes the generator's parameters and configuration.
pub fn save_ndt(path: &Path, ndt: &NdtModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ndt(&mut w, ndt)?;
    w.flush()?;
    Ok(())
}

pub fn write_ndt(mut w: impl Write, ndt: &NdtModel) -> Result<()> {
    let meta = ParamMeta {
        output_dim: ndt.output_dim,
        arch: ndt.arch(),
        power: ndt.power,
        feedback: ndt.feedback,
        normalization: ndt.normalization,
        blocks: ndt
            .params()
            .iter()
            .map(|p| BlockMeta { name: p.name.clone(), shape: [p.value.nrows(), p.value.ncols()] })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in ndt.params() {
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_ndt(path: &Path) -> Result<NdtModel> {
    read_ndt(BufReader::new(File::open(path)?))
}

pub fn read_ndt(mut r: impl Read) -> Result<NdtModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::ParamFile("truncated header".into()))?;
    if &magic != PARAM_MAGIC {
        return Err(Error::ParamFile("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::ParamFile("truncated header".into()))?;
    let version = u32::from_le_bytes(word);
    if version != PARAM_VERSION {
        return Err(Error::ParamFile(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::ParamFile("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::ParamFile("truncated metadata".into()))?;
    let meta: ParamMeta = serde_json::from_slice(&json).map_err(|e| Error::ParamFile(format!("metadata: {e}")))?;

    // Build a model of the right shape; every value is overwritten below.
    let mut ndt = NdtModel::new(meta.output_dim, meta.arch, meta.power, meta.feedback, &mut RngStream::new(0))?;
    ndt.normalization = meta.normalization;
    let expected: Vec<BlockMeta> = ndt
        .params()
        .iter()
        .map(|p| BlockMeta { name: p.name.clone(), shape: [p.value.nrows(), p.value.ncols()] })
        .collect();
    if expected != meta.blocks {
        return Err(Error::ParamFile("block layout does not match the declared architecture".into()));
    }
    let mut buf = [0u8; 8];
    for p in ndt.params_mut() {
        for v in p.value.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| Error::ParamFile(format!("truncated values in `{}`", p.name)))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::ParamFile("trailing bytes".into()));
    }
    Ok(ndt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trip() {
        let x = Array2::from_shape_fn((5, 2), |(i, j)| i as f64 * 0.1 + j as f64);
        let y = Array2::from_shape_fn((5, 1), |(i, _)| -(i as f64) / 3.0);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &x, &y).unwrap();
        assert!(buf.starts_with(b"x0,x1,y0\n"));
        let (x2, y2) = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
    }

    #[test]
    fn malformed_rows_report_row_numbers() {
        let bad = "x0,y0\n1,2\n3,oops\n";
        match read_trajectory(bad.as_bytes()) {
            Err(Error::Csv { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let short = "x0,y0\n1,2\n3\n";
        assert!(matches!(read_trajectory(short.as_bytes()), Err(Error::Csv { row: 3, .. })));
    }

    #[test]
    fn empty_and_headerless_inputs_fail() {
        assert!(matches!(read_trajectory("".as_bytes()), Err(Error::Csv { .. })));
        assert!(matches!(read_trajectory("x0,y0\n".as_bytes()), Err(Error::Csv { .. })));
        assert!(matches!(read_trajectory("a,b\n1,2\n".as_bytes()), Err(Error::Csv { row: 1, .. })));
        assert!(matches!(read_trajectory("y0,x0\n1,2\n".as_bytes()), Err(Error::Csv { row: 1, .. })));
    }

    #[test]
    fn ndt_round_trip() {
        let mut rng = RngStream::new(4);
        let mut ndt = NdtModel::new(1, NdtArch { hidden: 3, dense: 2 }, 2.0, true, &mut rng).unwrap();
        ndt.normalization = PowerNormalization::Running { decay: 0.25 };
        let mut buf = Vec::new();
        write_ndt(&mut buf, &ndt).unwrap();
        let back = read_ndt(buf.as_slice()).unwrap();
        assert_eq!(back, ndt);
    }

    #[test]
    fn corrupt_parameter_files_are_rejected() {
        let ndt = NdtModel::new(1, NdtArch { hidden: 3, dense: 2 }, 1.0, false, &mut RngStream::new(1)).unwrap();
        let mut buf = Vec::new();
        write_ndt(&mut buf, &ndt).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_ndt(bad_magic.as_slice()), Err(Error::ParamFile(_))));
        assert!(matches!(read_ndt(&buf[..buf.len() - 3]), Err(Error::ParamFile(_))));
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_ndt(trailing.as_slice()), Err(Error::ParamFile(_))));
    }

    #[test]
    fn file_stem_embeds_run_identity() {
        assert_eq!(run_file_stem(&ChannelSpec::Ma1 { alpha: 0.5 }, 1.0, true, 7), "ma1_a0.5_p1_fb_seed7");
        assert_eq!(run_file_stem(&ChannelSpec::Awgn { noise_var: 1.0 }, 2.5, false, 0), "awgn_n1_p2.5_ff_seed0");
    }
}
