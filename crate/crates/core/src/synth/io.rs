//! On-disk dataset: `manifest.txt`, `frames/NNNN.ppm` (P6) and one
//! `masks/NNNN_K.pgm` (P5, value `class_id + 1`) per instance.
//!
//! Manifest lines are `frame_id class_id x1 y1 x2 y2 mask_path [score]`.
//! Lines starting with `#` are comments, except `#size S` and
//! `#frame ID SIDE SEED` which carry frame metadata.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FrameSample, Side};
use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};
use crate::zoo::{Instance, Mask};

pub const MANIFEST: &str = "manifest.txt";

/// One manifest frame entry with its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub id: usize,
    pub side: Option<Side>,
    pub seed: Option<u64>,
    pub instances: Vec<Instance>,
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn create_dirs(dir: &Path) -> Result<()> {
    for sub in ["frames", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_ppm(image: &Tensor4) -> Vec<u8> {
    let s = image.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(to_byte(image.at(0, c, y, x)));
            }
        }
    }
    out
}

fn encode_pgm(mask: &Mask, value: u8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { value } else { 0 }));
    out
}

/// Parses a binary netpbm header, returning `(width, height, payload)`.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(malformed(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != magic {
        return Err(malformed(path, format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| malformed(path, format!("bad header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(malformed(path, format!("max value must be 255, got {max}")));
    }
    // exactly one whitespace byte separates the header from the payload
    Ok((w, h, bytes.get(i + 1..).unwrap_or(&[])))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_ppm(path: &Path) -> Result<Tensor4> {
    let bytes = read_bytes(path)?;
    let (w, h, payload) = parse_netpbm(path, &bytes, "P6")?;
    if payload.len() != 3 * w * h {
        return Err(malformed(path, format!("expected {} pixel bytes, found {}", 3 * w * h, payload.len())));
    }
    Ok(Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
        payload[3 * (y * w + x) + c] as f64 / 255.0
    }))
}

fn read_pgm_mask(path: &Path, class_id: usize) -> Result<Mask> {
    let bytes = read_bytes(path)?;
    let (w, h, payload) = parse_netpbm(path, &bytes, "P5")?;
    if payload.len() != w * h {
        return Err(malformed(path, format!("expected {} pixel bytes, found {}", w * h, payload.len())));
    }
    let want = (class_id + 1) as u8;
    let mut bits = Vec::with_capacity(w * h);
    for &v in payload {
        if v != 0 && v != want {
            return Err(malformed(path, format!("pixel value {v} does not match class {class_id}")));
        }
        bits.push(v == want);
    }
    Ok(Mask::from_bits(h, w, bits).expect("length checked"))
}

fn mask_name(frame: usize, k: usize) -> String {
    format!("masks/{frame:04}_{k}.pgm")
}

fn manifest_lines(frames: &[DatasetFrame], size: usize) -> String {
    let mut s = format!("# frame_id class_id x1 y1 x2 y2 mask_path score\n#size {size}\n");
    for f in frames {
        match (f.side, f.seed) {
            (Some(side), Some(seed)) => writeln!(s, "#frame {} {} {}", f.id, side.as_str(), seed),
            _ => writeln!(s, "#frame {}", f.id),
        }
        .expect("string write");
        for (k, inst) in f.instances.iter().enumerate() {
            let [x1, y1, x2, y2] = inst.bbox;
            writeln!(
                s,
                "{} {} {x1} {y1} {x2} {y2} {} {}",
                f.id,
                inst.class_id,
                mask_name(f.id, k),
                inst.score
            )
            .expect("string write");
        }
    }
    s
}

fn write_masks(dir: &Path, frames: &[DatasetFrame]) -> Result<()> {
    for f in frames {
        for (k, inst) in f.instances.iter().enumerate() {
            write_file(&dir.join(mask_name(f.id, k)), &encode_pgm(&inst.mask, (inst.class_id + 1) as u8))?;
        }
    }
    Ok(())
}

/// Writes frames, masks and manifest. Existing files are overwritten.
pub fn write_dataset(samples: &[FrameSample], dir: &Path) -> Result<()> {
    let size = samples.first().map_or(0, FrameSample::hw);
    create_dirs(dir)?;
    let frames: Vec<DatasetFrame> = samples
        .iter()
        .map(|s| DatasetFrame {
            id: s.index,
            side: Some(s.side),
            seed: Some(s.rng_seed),
            instances: s.instances.clone(),
        })
        .collect();
    for s in samples {
        write_file(&dir.join(format!("frames/{:04}.ppm", s.index)), &encode_ppm(&s.image))?;
    }
    write_masks(dir, &frames)?;
    write_file(&dir.join(MANIFEST), manifest_lines(&frames, size).as_bytes())
}

/// Writes instances only (e.g. model predictions), without frame images.
pub fn write_instances(frames: &[DatasetFrame], size: usize, dir: &Path) -> Result<()> {
    create_dirs(dir)?;
    write_masks(dir, frames)?;
    write_file(&dir.join(MANIFEST), manifest_lines(frames, size).as_bytes())
}

/// Reads the manifest and every mask it references.
pub fn read_instances(dir: &Path) -> Result<Vec<DatasetFrame>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut frames: Vec<DatasetFrame> = Vec::new();
    let mut size: Option<usize> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        };
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let Some(&head) = toks.first() else { continue };
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| parse_err(format!("bad {what} `{s}`")))
        };
        match head {
            "#size" => {
                let s = toks.get(1).ok_or_else(|| parse_err("missing size".into()))?;
                size = Some(num(s, "size")? as usize);
            }
            "#frame" => {
                let id = num(toks.get(1).ok_or_else(|| parse_err("missing frame id".into()))?, "frame id")? as usize;
                if frames.iter().any(|f| f.id == id) {
                    return Err(parse_err(format!("duplicate frame {id}")));
                }
                let (side, seed) = match toks.len() {
                    2 => (None, None),
                    4 => (
                        Some(Side::parse(toks[2]).ok_or_else(|| parse_err(format!("bad side `{}`", toks[2])))?),
                        Some(num(toks[3], "seed")?),
                    ),
                    n => return Err(parse_err(format!("#frame takes 1 or 3 fields, found {}", n - 1))),
                };
                frames.push(DatasetFrame {
                    id,
                    side,
                    seed,
                    instances: Vec::new(),
                });
            }
            h if h.starts_with('#') => {}
            _ => {
                if toks.len() != 7 && toks.len() != 8 {
                    return Err(parse_err(format!("expected 7 or 8 fields, found {}", toks.len())));
                }
                let id = num(toks[0], "frame id")? as usize;
                let class_id = num(toks[1], "class id")? as usize;
                if class_id >= NUM_CLASSES {
                    return Err(parse_err(format!("class id {class_id} out of range")));
                }
                let mut bbox = [0.0; 4];
                for (b, t) in bbox.iter_mut().zip(&toks[2..6]) {
                    *b = t.parse::<f64>().map_err(|_| parse_err(format!("bad coordinate `{t}`")))?;
                }
                let score = match toks.get(7) {
                    Some(t) => t.parse::<f64>().map_err(|_| parse_err(format!("bad score `{t}`")))?,
                    None => 1.0,
                };
                let mask_path = dir.join(toks[6]);
                let mask = read_pgm_mask(&mask_path, class_id)?;
                if let Some(s) = size {
                    if (mask.h, mask.w) != (s, s) {
                        return Err(malformed(&mask_path, format!("mask is {}x{}, dataset size is {s}", mask.h, mask.w)));
                    }
                }
                let frame = frames
                    .iter_mut()
                    .find(|f| f.id == id)
                    .ok_or_else(|| parse_err(format!("instance for undeclared frame {id}")))?;
                frame.instances.push(Instance {
                    class_id,
                    score,
                    bbox,
                    mask,
                });
            }
        }
    }
    Ok(frames)
}

/// Reads a full dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<FrameSample>> {
    let manifest: PathBuf = dir.join(MANIFEST);
    read_instances(dir)?
        .into_iter()
        .map(|f| {
            let (Some(side), Some(seed)) = (f.side, f.seed) else {
                return Err(malformed(&manifest, format!("frame {} lacks side and seed metadata", f.id)));
            };
            let image = read_ppm(&dir.join(format!("frames/{:04}.ppm", f.id)))?;
            Ok(FrameSample {
                index: f.id,
                image,
                instances: f.instances,
                side,
                rng_seed: seed,
            })
        })
        .collect()
}
