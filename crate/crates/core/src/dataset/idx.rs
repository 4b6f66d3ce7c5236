use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetError, GrayImage};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DatasetError::UnexpectedEof,
        _ => DatasetError::Io(e),
    })
}

/// Parses an IDX image stream and its matching label stream.
pub fn parse_idx<R1: Read, R2: Read>(
    mut images: R1,
    mut labels: R2,
) -> Result<Vec<GrayImage>, DatasetError> {
    let magic = read_u32_be(&mut images)?;
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::Format(format!(
            "image stream magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;

    let magic = read_u32_be(&mut labels)?;
    if magic != LABEL_MAGIC {
        return Err(DatasetError::Format(format!(
            "label stream magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(&mut labels)? as usize;
    if label_count != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let mut label_bytes = vec![0u8; count];
    read_exact(&mut labels, &mut label_bytes)?;

    let mut out = Vec::with_capacity(count);
    for &label in &label_bytes {
        let mut px = vec![0u8; rows * cols];
        read_exact(&mut images, &mut px)?;
        let img = GrayImage::new(cols, rows, px, label)
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        out.push(img);
    }
    Ok(out)
}

pub fn read_idx_files(images: &Path, labels: &Path) -> Result<Vec<GrayImage>, DatasetError> {
    let i = BufReader::new(File::open(images)?);
    let l = BufReader::new(File::open(labels)?);
    parse_idx(i, l)
}

/// Writes images and labels as an IDX pair. All images must share one size.
pub fn write_idx<W1: Write, W2: Write>(
    images: &[GrayImage],
    image_out: W1,
    label_out: W2,
) -> Result<(), DatasetError> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width(), i.height()));
    let mut io = BufWriter::new(image_out);
    let mut lo = BufWriter::new(label_out);
    io.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    io.write_all(&(images.len() as u32).to_be_bytes())?;
    io.write_all(&(h as u32).to_be_bytes())?;
    io.write_all(&(w as u32).to_be_bytes())?;
    lo.write_all(&LABEL_MAGIC.to_be_bytes())?;
    lo.write_all(&(images.len() as u32).to_be_bytes())?;
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(DatasetError::InvalidImage("mixed image sizes".into()));
        }
        io.write_all(img.pixels())?;
        lo.write_all(&[img.label()])?;
    }
    io.flush()?;
    lo.flush()?;
    Ok(())
}
