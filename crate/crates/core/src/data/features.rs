//! Binary feature files, format tag "MFV1".
//!
//! Layout (little-endian): 4 magic bytes, u32 local count M, u32 feature
//! width D, then (M+1) * D f32 values, row 0 the global feature followed
//! by the M locals. Total size is 12 + 4 * (M+1) * D bytes.

use crate::error::{Error, Result};
use crate::fvpg::VisualFeatureSet;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFV1";

pub fn write_features(path: &Path, set: &VisualFeatureSet) -> Result<()> {
    set.validate()?;
    let m = set.local_count() as u32;
    let d = set.width() as u32;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&m.to_le_bytes())?;
    file.write_all(&d.to_le_bytes())?;
    for row in std::iter::once(&set.global).chain(&set.locals) {
        for &v in row {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<VisualFeatureSet> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::format(format!("{}: shorter than the header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&magic),
            "MFV1"
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let m = u32::from_le_bytes(word) as usize;
    file.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    if m == 0 || d == 0 {
        return Err(Error::format(format!(
            "{}: zero extent (M={}, D={})",
            path.display(),
            m,
            d
        )));
    }
    let expected = (m + 1) * d * 4;
    let mut body = Vec::with_capacity(expected);
    file.read_to_end(&mut body)?;
    if body.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {} payload bytes for M={} D={}, found {}",
            path.display(),
            expected,
            m,
            d,
            body.len()
        )));
    }
    let mut values = Vec::with_capacity((m + 1) * d);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::data(format!(
                "{}: non-finite feature value",
                path.display()
            )));
        }
        values.push(v as f64);
    }
    let global = values[..d].to_vec();
    let locals = (0..m)
        .map(|i| values[(i + 1) * d..(i + 2) * d].to_vec())
        .collect();
    VisualFeatureSet::new(global, locals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvpg::make_synthetic_features;

    #[test]
    fn round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mfv");
        let set = make_synthetic_features(5, 3, 7).unwrap();
        write_features(&path, &set).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.local_count(), 3);
        assert_eq!(back.width(), 7);
        for (a, b) in
            std::iter::once((&set.global, &back.global)).chain(set.locals.iter().zip(&back.locals))
        {
            for (&x, &y) in a.iter().zip(b) {
                assert_eq!(x as f32, y as f32);
                assert_eq!(y, (x as f32) as f64);
            }
        }
        // second write of the read-back set is byte-identical
        let path2 = dir.path().join("b.mfv");
        write_features(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mfv");
        std::fs::write(
            &path,
            b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f\x00\x00\x80\x3f",
        )
        .unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{}", err);
    }

    #[test]
    fn truncated_file_is_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.mfv");
        let set = make_synthetic_features(6, 2, 4).unwrap();
        write_features(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{}", err);
    }

    #[test]
    fn file_size_matches_layout_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sized.mfv");
        let set = make_synthetic_features(7, 49, 768).unwrap();
        write_features(&path, &set).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 12 + 4 * 50 * 768);
        assert_eq!(len, 153_612);
    }
}
