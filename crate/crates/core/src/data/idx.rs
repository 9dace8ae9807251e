use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Labels, SplitTag};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { what, expected: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &'static str) -> Result<&'a [u8], DataError> {
    let end = header + len;
    if bytes.len() < end {
        return Err(DataError::Truncated { what, expected: end, found: bytes.len() });
    }
    if bytes.len() > end {
        return Err(DataError::TrailingBytes(bytes.len() - end));
    }
    Ok(&bytes[header..])
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    const WHAT: &str = "IDX image file";
    check_magic(bytes, IDX_IMAGE_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, WHAT)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    const WHAT: &str = "IDX label file";
    check_magic(bytes, IDX_LABEL_MAGIC, WHAT)?;
    let n = be_u32(bytes, 4, WHAT)? as usize;
    Ok(payload(bytes, 8, n, WHAT)?.to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]` by 1/255 and
/// the class count is one past the largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let raw = parse_idx_labels(&fs::read(labels)?)?;
    if raw.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: raw.len() });
    }
    if n == 0 {
        return Err(DataError::NoRows);
    }
    let num_classes = raw.iter().copied().max().unwrap_or(0) as usize + 1;
    let features = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels = Labels::Classes { labels: raw.iter().map(|&l| l as usize).collect(), num_classes };
    Dataset::new(features, vec![rows, cols, 1], labels, SplitTag::Train)
}

/// Writes a single-channel classification dataset back out as an IDX pair.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let (rows, cols) = match ds.sample_shape.as_slice() {
        [r, c, 1] => (*r, *c),
        other => return Err(DataError::Invalid(format!("IDX needs single-channel images, got shape {other:?}"))),
    };
    let Labels::Classes { labels: ls, .. } = &ds.labels else {
        return Err(DataError::Invalid("IDX labels must be class indices".into()));
    };
    let mut raw = Vec::with_capacity(ls.len());
    for &l in ls {
        raw.push(u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit a byte")))?);
    }
    let pixels: Vec<u8> = ds.features.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    fs::write(images, encode_idx_images(rows, cols, &pixels))?;
    fs::write(labels, encode_idx_labels(&raw))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 23 % 256) as u8).collect();
        (encode_idx_images(2, 2, &pixels), encode_idx_labels(&[0, 2, 1]))
    }

    #[test]
    fn round_trip_is_bit_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = sample();
        let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&pi, &img).unwrap();
        fs::write(&pl, &lab).unwrap();
        let ds = load_idx(&pi, &pl).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.sample_shape, vec![2, 2, 1]);
        assert!(ds.features.iter().all(|v| (0.0..=1.0).contains(v)));
        let (qi, ql) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &qi, &ql).unwrap();
        assert_eq!(fs::read(&qi).unwrap(), img);
        assert_eq!(fs::read(&ql).unwrap(), lab);
    }

    #[test]
    fn every_byte_value_survives() {
        let pixels: Vec<u8> = (0..=255).collect();
        let ds = Dataset::new(
            pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
            vec![16, 16, 1],
            Labels::Classes { labels: vec![0], num_classes: 1 },
            SplitTag::Train,
        )
        .unwrap();
        let back: Vec<u8> = ds.features.iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
    }

    #[test]
    fn wrong_magic_rejected() {
        let (mut img, lab) = sample();
        img[3] = 0x01;
        assert!(matches!(parse_idx_images(&img), Err(DataError::BadMagic { found: 0x801, .. })));
        assert!(matches!(parse_idx_images(&lab), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let (img, lab) = sample();
        assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&lab[..6]), Err(DataError::Truncated { .. })));
        let mut long = lab.clone();
        long.push(0);
        assert!(matches!(parse_idx_labels(&long), Err(DataError::TrailingBytes(1))));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = sample();
        let (pi, pl) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&pi, img).unwrap();
        fs::write(&pl, encode_idx_labels(&[0, 1])).unwrap();
        assert!(matches!(load_idx(&pi, &pl), Err(DataError::CountMismatch { images: 3, labels: 2 })));
    }
}
