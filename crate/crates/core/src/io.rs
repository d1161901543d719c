//! Binary PGM images, numeric CSV tables, model files, and parameter export.
//!
//! Every file is written once: contents go to a sibling temporary file that
//! is then renamed over the destination.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foe::FoEModel;
use crate::spline::SplineActivation2D;
use crate::tensor::{ImageTensor, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Largest accepted image, in pixels.
pub const MAX_PIXELS: usize = 1 << 26;
const ACTIVATION_SAMPLES: usize = 141;

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::at_path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::at_path(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::at_path(path, e))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(format!("PGM header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format(format!("PGM header: {what} out of range")))
    }
}

/// Decodes an 8-bit binary PGM (`P5`, maxval 255) into `[0, 1]` intensities.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("not a binary PGM (expected P5 magic)"));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("PGM has zero size"));
    }
    let pixels = width
        .checked_mul(height)
        .filter(|p| *p <= MAX_PIXELS)
        .ok_or_else(|| Error::format(format!("PGM of {width}x{height} is too large")))?;
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("PGM header: truncated after maxval")),
    }
    let raster = &bytes[cur.pos..];
    if raster.len() < pixels {
        return Err(Error::format(format!("PGM raster truncated: need {pixels} bytes, found {}", raster.len())));
    }
    let data = raster[..pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::image(height, width, data)
}

/// Encodes `[0, 1]` intensities as an 8-bit `P5` PGM (round to nearest, clamp; NaN maps to 0).
pub fn encode_pgm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("PGM needs one channel, got {}", img.channels())));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 }));
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<ImageTensor> {
    decode_pgm(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_pgm(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}

/// All `*.pgm` files of a directory, sorted by file name.
pub fn load_pgm_dir(dir: &Path) -> Result<Vec<(PathBuf, ImageTensor)>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::at_path(dir, e))? {
        let path = entry.map_err(|e| Error::at_path(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.into_iter().map(|p| load_pgm(&p).map(|img| (p, img))).collect()
}

/// Shortest rendering with 9 significant digits; integral values print without a fraction.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == v.trunc() && v.abs() < 1e15 {
        return format!("{}", v as i64);
    }
    let sci = format!("{v:.8e}");
    let parsed: f64 = sci.parse().unwrap_or(v);
    let a = v.abs();
    if (1e-4..1e9).contains(&a) {
        // fixed notation with the same 9 significant digits, trailing zeros trimmed
        let decimals = (8 - a.log10().floor() as i32).max(0) as usize;
        let fixed = format!("{parsed:.decimals$}");
        let trimmed = fixed.trim_end_matches('0').trim_end_matches('.');
        return trimmed.to_string();
    }
    sci
}

/// Writes a numeric table with a header row.
pub fn emit_csv<R: AsRef<[f64]>>(path: &Path, schema: &[&str], rows: &[R]) -> Result<()> {
    write_atomic(path, &csv_bytes(schema, rows)?)
}

pub fn csv_bytes<R: AsRef<[f64]>>(schema: &[&str], rows: &[R]) -> Result<Vec<u8>> {
    if schema.is_empty() {
        return Err(Error::invalid("CSV schema has no columns"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(schema)?;
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != schema.len() {
            return Err(Error::ShapeMismatch(format!(
                "CSV row {i} has {} fields, schema has {}",
                row.len(),
                schema.len()
            )));
        }
        w.write_record(row.iter().map(|v| format_float(*v)))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads a numeric CSV written by [`emit_csv`]: header plus rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    parse_csv(&read_file(path)?)
}

pub fn parse_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::format(format!("non-numeric CSV field {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    depth: usize,
    model: FoEModel,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format_version: u32,
    depth: usize,
    model: &'a FoEModel,
}

pub fn encode_model(model: &FoEModel) -> Result<Vec<u8>> {
    let doc = ModelFileRef { format_version: MODEL_FORMAT_VERSION, depth: model.depth(), model };
    Ok(serde_json::to_vec(&doc)?)
}

pub fn decode_model(bytes: &[u8]) -> Result<FoEModel> {
    let doc: ModelFile = serde_json::from_slice(bytes)?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::format(format!(
            "model format version {} (supported: {MODEL_FORMAT_VERSION})",
            doc.format_version
        )));
    }
    if doc.depth != doc.model.layers.len() {
        return Err(Error::format(format!(
            "model declares depth {} but stores {} layers",
            doc.depth,
            doc.model.layers.len()
        )));
    }
    doc.model.validate()?;
    Ok(doc.model)
}

pub fn save_model(path: &Path, model: &FoEModel) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<FoEModel> {
    decode_model(&read_file(path)?)
}

/// Min-max normalized copy of a kernel; constant kernels map to mid-gray.
pub fn normalize_kernel(k: &[f64], size: usize) -> Result<ImageTensor> {
    let lo = k.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo { k.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.5; k.len()] };
    Tensor::image(size, size, data)
}

/// `(x, t̂, φ)` samples of an activation on the feature range at every smoothing node.
pub fn activation_samples(act: &SplineActivation2D) -> Result<Vec<[f64; 3]>> {
    let g = act.grid;
    let mut rows = Vec::with_capacity(ACTIVATION_SAMPLES * g.n_t);
    for o in 0..g.n_t {
        let t = g.t_hat_min + o as f64 * g.gamma_t();
        let t = t.min(g.t_hat_max);
        let slice = act.slice(t, 0)?;
        for k in 0..ACTIVATION_SAMPLES {
            let x = g.x_min + (g.x_max - g.x_min) * k as f64 / (ACTIVATION_SAMPLES - 1) as f64;
            rows.push([x, t, slice.eval(x, 0)]);
        }
    }
    Ok(rows)
}

/// Writes every kernel as an 8-bit PGM and every activation as a CSV into `dir`;
/// returns the written paths.
pub fn export_params(model: &FoEModel, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    let mut written = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let conv = &layer.conv;
        for o in 0..conv.n_out {
            for c in 0..conv.n_in {
                let path = dir.join(format!("layer{}_kernel{o:02}_in{c:02}.pgm", i + 1));
                save_pgm(&path, &normalize_kernel(conv.kernel(o, c), conv.size)?)?;
                written.push(path);
            }
        }
        for (j, act) in layer.activations.iter().enumerate() {
            let path = dir.join(format!("layer{}_activation{j:02}.csv", i + 1));
            emit_csv(&path, &["x", "t_hat", "phi"], &activation_samples(act)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::SplineGrid;

    #[test]
    fn decodes_tiny_pgm() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.shape(), (1, 2, 2));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn header_comments_and_layout() {
        let bytes = b"P5 # made by hand\n# another\n3\t1 255\n\x01\x02\x03";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 3));
        assert_eq!(img.get(0, 0, 2), 3.0 / 255.0);
    }

    #[test]
    fn rejects_malformed_headers() {
        let cases: [&[u8]; 8] = [
            b"",
            b"P2\n1 1\n255\n\x00",
            b"P5\n2 2\n255\n\x00\x01\x02",
            b"P5\n2 2\n65535\n\x00\x00",
            b"P5\n2 2\n15\n\x00\x00\x00\x00",
            b"P5\n0 2\n255\n",
            b"P5\n2",
            b"P5\n99999999999999999999999 1\n255\n\x00",
        ];
        for c in cases {
            assert!(matches!(decode_pgm(c), Err(Error::Format(_))), "{c:?}");
        }
    }

    #[test]
    fn pgm_round_trip_within_half_quantum() {
        let data: Vec<f64> = (0..48).map(|k| ((k * 37) % 101) as f64 / 100.0).collect();
        let img = Tensor::image(6, 8, data).unwrap();
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
        let clamped = Tensor::image(1, 3, vec![-0.5, 1.7, f64::NAN]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&clamped).unwrap()).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn float_formatting_keeps_nine_digits() {
        assert_eq!(format_float(3.0), "3");
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(-2.5e-7), "-2.50000000e-7");
        for v in [std::f64::consts::PI, 1.234567891234e12, 9.87654321e-5, -42.123456789] {
            let back: f64 = format_float(v).parse().unwrap();
            assert!((back - v).abs() <= 1e-8 * v.abs(), "{v} -> {}", format_float(v));
        }
    }

    #[test]
    fn csv_schema_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        emit_csv::<[f64; 2]>(&path, &["a", "b"], &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n");
        emit_csv(&path, &["a", "b"], &[[1.0, 2.0 / 3.0]]).unwrap();
        let (h, rows) = read_csv(&path).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert!((rows[0][1] - 2.0 / 3.0).abs() < 1e-9 * 2.0 / 3.0);
        assert!(emit_csv(&path, &["a", "b"], &[vec![1.0]]).is_err());
        assert!(!dir.path().join(".t.csv.tmp").exists());
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let g = SplineGrid::new(9, 4, -3.0, 0.0).unwrap();
        let m = FoEModel::kaiming(&[2, 3], &[3, 1], g, 5).unwrap();
        let back = decode_model(&encode_model(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let text = String::from_utf8(encode_model(&m).unwrap()).unwrap();
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(decode_model(bumped.as_bytes()).is_err());
        let wrong_depth = text.replacen("\"depth\":2", "\"depth\":3", 1);
        assert!(decode_model(wrong_depth.as_bytes()).is_err());
        assert!(decode_model(b"{}").is_err());
    }

    #[test]
    fn export_counts_follow_model_shape() {
        let g = SplineGrid::new(9, 4, -3.0, 0.0).unwrap();
        let m = FoEModel::kaiming(&[3, 2], &[3, 3], g, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_params(&m, dir.path()).unwrap();
        let pgms = files.iter().filter(|p| p.extension().unwrap() == "pgm").count();
        let csvs = files.iter().filter(|p| p.extension().unwrap() == "csv").count();
        assert_eq!(pgms, 3 + 6);
        assert_eq!(csvs, 3 + 2);
        let k = load_pgm(&files[0]).unwrap();
        assert_eq!(k.shape(), (1, 3, 3));
        let lo = k.data().iter().copied().fold(1.0, f64::min);
        let hi = k.data().iter().copied().fold(0.0, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}
