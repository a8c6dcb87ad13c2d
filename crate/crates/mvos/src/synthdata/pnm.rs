//! Binary PPM (P6) / PGM (P5) image IO and the on-disk dataset layout:
//!
//! ```text
//! <root>/<sample_id>/frame_0000.ppm      binary P6 RGB
//! <root>/<sample_id>/mask_<obj>_0000.pgm binary P5, 0 or 255
//! <root>/index.txt                       id \t frames \t h \t w \t obj,obj
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{Image, Mask};

use super::VideoSample;

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(20 + img.data.len());
    write!(out, "P6\n{} {}\n255\n", img.w, img.h)?;
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (magic, rest) = next_token(&bytes, 0)?;
    if magic != b"P6" {
        return Err(Error::Format(format!("{}: not a binary PPM (magic {:?})", path.display(), magic)));
    }
    let (w, rest) = next_int(&bytes, rest, path)?;
    let (h, rest) = next_int(&bytes, rest, path)?;
    let (maxval, rest) = next_int(&bytes, rest, path)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    // exactly one whitespace byte separates the header from the raster
    if rest + 1 > bytes.len() {
        return Err(Error::Format(format!("{}: truncated file", path.display())));
    }
    let data = &bytes[rest + 1..];
    if data.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of pixels, found {}",
            path.display(),
            w * h * 3,
            data.len()
        )));
    }
    Ok(Image {
        h,
        w,
        data: data.to_vec(),
    })
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = Vec::with_capacity(20 + mask.data.len());
    write!(out, "P5\n{} {}\n255\n", mask.w, mask.h)?;
    out.extend(mask.data.iter().map(|&v| if v { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let (magic, rest) = next_token(&bytes, 0)?;
    if magic != b"P5" {
        return Err(Error::Format(format!("{}: not a binary PGM (magic {:?})", path.display(), magic)));
    }
    let (w, rest) = next_int(&bytes, rest, path)?;
    let (h, rest) = next_int(&bytes, rest, path)?;
    let (maxval, rest) = next_int(&bytes, rest, path)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    if rest + 1 > bytes.len() {
        return Err(Error::Format(format!("{}: truncated file", path.display())));
    }
    let data = &bytes[rest + 1..];
    if data.len() != w * h {
        return Err(Error::Format(format!(
            "{}: expected {} bytes of pixels, found {}",
            path.display(),
            w * h,
            data.len()
        )));
    }
    Ok(Mask {
        h,
        w,
        data: data.iter().map(|&v| v != 0).collect(),
    })
}

/// Next whitespace-delimited header token; returns (token, index just past
/// its last byte).
fn next_token(bytes: &[u8], from: usize) -> Result<(&[u8], usize)> {
    let mut i = from;
    while i < bytes.len() && bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    let start = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    if start == i {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok((&bytes[start..i], i))
}

fn next_int(bytes: &[u8], from: usize, path: &Path) -> Result<(usize, usize)> {
    let (tok, rest) = next_token(bytes, from)?;
    let s = std::str::from_utf8(tok).map_err(|_| Error::Format(format!("{}: bad header", path.display())))?;
    let v = s
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("{}: bad header int `{s}`", path.display())))?;
    Ok((v, rest))
}

/// Write samples under `root` and record them in `index.txt`.
pub fn write_dataset(root: &Path, samples: &[(String, VideoSample)]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut index = String::new();
    for (id, sample) in samples {
        let dir = root.join(id);
        fs::create_dir_all(&dir)?;
        let (h, w) = sample.dims();
        for (t, frame) in sample.frames.iter().enumerate() {
            write_ppm(&dir.join(format!("frame_{t:04}.ppm")), frame)?;
        }
        for (oi, obj) in sample.object_ids.iter().enumerate() {
            for (t, mask) in sample.masks[oi].iter().enumerate() {
                write_pgm(&dir.join(format!("mask_{obj}_{t:04}.pgm")), mask)?;
            }
        }
        let ids: Vec<String> = sample.object_ids.iter().map(|i| i.to_string()).collect();
        index.push_str(&format!("{id}\t{}\t{h}\t{w}\t{}\n", sample.len(), ids.join(",")));
    }
    fs::write(root.join("index.txt"), index)?;
    Ok(())
}

/// Read a dataset directory back through its index.
pub fn read_dataset(root: &Path) -> Result<Vec<(String, VideoSample)>> {
    let index = fs::read_to_string(root.join("index.txt"))
        .map_err(|e| Error::Format(format!("{}: no readable index.txt: {e}", root.display())))?;
    let mut out = Vec::new();
    for (ln, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "index.txt line {}: expected 5 tab-separated fields",
                ln + 1
            )));
        }
        let id = fields[0].to_string();
        let t: usize = fields[1].parse().map_err(|_| bad_index(ln))?;
        let h: usize = fields[2].parse().map_err(|_| bad_index(ln))?;
        let w: usize = fields[3].parse().map_err(|_| bad_index(ln))?;
        let object_ids: Vec<u32> = fields[4]
            .split(',')
            .map(|s| s.parse().map_err(|_| bad_index(ln)))
            .collect::<Result<_>>()?;
        let dir = root.join(&id);
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let img = read_ppm(&dir.join(format!("frame_{ti:04}.ppm")))?;
            if img.h != h || img.w != w {
                return Err(Error::Format(format!("{id}: frame {ti} has wrong dims")));
            }
            frames.push(img);
        }
        let mut masks = Vec::with_capacity(object_ids.len());
        for obj in &object_ids {
            let mut seq = Vec::with_capacity(t);
            for ti in 0..t {
                let m = read_pgm(&dir.join(format!("mask_{obj}_{ti:04}.pgm")))?;
                if m.h != h || m.w != w {
                    return Err(Error::Format(format!("{id}: mask {obj}/{ti} has wrong dims")));
                }
                seq.push(m);
            }
            masks.push(seq);
        }
        out.push((
            id,
            VideoSample {
                frames,
                masks,
                object_ids,
            },
        ));
    }
    Ok(out)
}

fn bad_index(ln: usize) -> Error {
    Error::Format(format!("index.txt line {}: unparsable field", ln + 1))
}
