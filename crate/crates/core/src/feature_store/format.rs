//! Binary container formats.
//!
//! Feature files (`MIRF`):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MIRF"
//! 4       1     format version (u8)
//! 5       1     modality code (u8: text=0, audio=1, vision=2)
//! 6       4     layers L (u32 LE)
//! 10      4     frames T (u32 LE)
//! 14      4     hidden d (u32 LE)
//! 18      4     frame rate in Hz (f32 LE)
//! 22      2*L*T*d  row-major IEEE half-precision payload (LE)
//! ```
//!
//! Response/prediction files (`MIRP`) hold one full-precision matrix:
//! magic, version, rows (u32), cols (u32), then row-major f64 LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use ndarray::{Array2, Array3};

use super::LayerResolvedFeatures;
use crate::modality::Modality;
use crate::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MIRF";
pub const MATRIX_MAGIC: [u8; 4] = *b"MIRP";
pub const FORMAT_VERSION: u8 = 1;

const FEATURE_HEADER_LEN: usize = 22;
const MATRIX_HEADER_LEN: usize = 13;

pub fn write_features(features: &LayerResolvedFeatures, path: impl AsRef<Path>) -> Result<()> {
    let data = features.data();
    let limit = f64::from(f16::MAX);
    if let Some(bad) = data.iter().find(|x| !x.is_finite() || x.abs() > limit) {
        return Err(Error::invalid(format!(
            "feature value {bad} is not representable at half precision"
        )));
    }
    let (l, t, d) = data.dim();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + 2 * l * t * d);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(features.modality().code());
    for n in [l, t, d] {
        buf.extend_from_slice(&dim_u32(n)?.to_le_bytes());
    }
    buf.extend_from_slice(&(features.frame_rate_hz() as f32).to_le_bytes());
    for x in data.iter() {
        buf.extend_from_slice(&f16::from_f64(*x).to_le_bytes());
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<LayerResolvedFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_preamble(path, &bytes, FEATURE_MAGIC, FEATURE_HEADER_LEN)?;
    let modality = Modality::from_code(bytes[5])
        .ok_or_else(|| Error::invalid(format!("{}: unknown modality code {}", path.display(), bytes[5])))?;
    let l = read_u32(&bytes, 6) as usize;
    let t = read_u32(&bytes, 10) as usize;
    let d = read_u32(&bytes, 14) as usize;
    let rate = f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes"));
    if l == 0 || t == 0 || d == 0 {
        return Err(Error::invalid(format!(
            "{}: header declares empty tensor {l}x{t}x{d}",
            path.display()
        )));
    }
    let n = l
        .checked_mul(t)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("{}: header dimensions overflow", path.display())))?;
    let expected = FEATURE_HEADER_LEN + 2 * n;
    check_payload(path, bytes.len(), expected)?;
    let values: Vec<f64> = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
        .collect();
    let data = Array3::from_shape_vec((l, t, d), values).expect("length checked");
    LayerResolvedFeatures::new(modality, data, f64::from(rate))
}

pub fn write_matrix(matrix: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("matrix contains non-finite entries"));
    }
    let (r, c) = matrix.dim();
    let mut buf = Vec::with_capacity(MATRIX_HEADER_LEN + 8 * r * c);
    buf.extend_from_slice(&MATRIX_MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&dim_u32(r)?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(c)?.to_le_bytes());
    for x in matrix.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path.as_ref(), &buf)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_preamble(path, &bytes, MATRIX_MAGIC, MATRIX_HEADER_LEN)?;
    let r = read_u32(&bytes, 5) as usize;
    let c = read_u32(&bytes, 9) as usize;
    if r == 0 || c == 0 {
        return Err(Error::invalid(format!("{}: empty matrix {r}x{c}", path.display())));
    }
    check_payload(path, bytes.len(), MATRIX_HEADER_LEN + 8 * r * c)?;
    let values: Vec<f64> = bytes[MATRIX_HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((r, c), values).expect("length checked"))
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("dimension {n} exceeds u32")))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_preamble(path: &Path, bytes: &[u8], magic: [u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < 5 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: bytes[4],
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_payload(path: &Path, found: usize, expected: usize) -> Result<()> {
    if found < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::invalid(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            found - expected
        )));
    }
    Ok(())
}

/// Writes via a temporary sibling and rename so readers never observe a
/// partially written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(l: usize, t: usize, d: usize, seed: u64) -> LayerResolvedFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((l, t, d), |_| rng.gen_range(-4.0..4.0));
        LayerResolvedFeatures::new(Modality::Audio, data, 2.0).unwrap()
    }

    #[test]
    fn scalar_zero_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mirf");
        let f = LayerResolvedFeatures::new(Modality::Text, Array3::zeros((1, 1, 1)), 2.0).unwrap();
        write_features(&f, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), FEATURE_HEADER_LEN + 2);
        assert_eq!(&bytes[..4], b"MIRF");
        let back = read_features(&path).unwrap();
        assert_eq!(back.data()[[0, 0, 0]], 0.0);
        assert_eq!(back.modality(), Modality::Text);
        assert_eq!(back.frame_rate_hz(), 2.0);
    }

    #[test]
    fn round_trip_matches_half_cast() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mirf");
        let f = feats(2, 3, 4, 7);
        write_features(&f, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.data().dim(), (2, 3, 4));
        for (x, y) in f.data().iter().zip(back.data().iter()) {
            // independent oracle: direct cast through f16
            let oracle = f16::from_f64(*x).to_f64();
            assert_eq!(*y, oracle);
            let ulp = f64::from(f16::EPSILON) * x.abs().max(f64::from(f16::MIN_POSITIVE));
            assert!((x - y).abs() <= ulp);
        }
    }

    #[test]
    fn write_rejects_unrepresentable() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::zeros((1, 1, 2));
        data[[0, 0, 1]] = 1e6;
        let f = LayerResolvedFeatures::new(Modality::Vision, data, 2.0).unwrap();
        let err = write_features(&f, dir.path().join("x.mirf")).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn distinct_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mirf");
        write_features(&feats(2, 2, 2, 1), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let trunc = dir.path().join("t.mirf");
        fs::write(&trunc, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_features(&trunc), Err(Error::Truncated { .. })));

        let magic = dir.path().join("m.mirf");
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&magic, &bad).unwrap();
        assert!(matches!(read_features(&magic), Err(Error::BadMagic { .. })));

        let ver = dir.path().join("v.mirf");
        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&ver, &bad).unwrap();
        assert!(matches!(read_features(&ver), Err(Error::VersionMismatch { found: 9, .. })));

        let empty = dir.path().join("e.mirf");
        let mut bad = good.clone();
        bad[6..10].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&empty, &bad).unwrap();
        assert!(matches!(read_features(&empty), Err(Error::Invalid(_))));
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.mirp");
        let m = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 + 0.1) / (j as f64 + 0.3));
        write_matrix(&m, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_shapes_round_trip_at_half_precision(l in 1usize..4, t in 1usize..5, d in 1usize..6, seed in 0u64..10_000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.mirf");
            let f = feats(l, t, d, seed);
            write_features(&f, &path).unwrap();
            let back = read_features(&path).unwrap();
            prop_assert_eq!(back.data().dim(), (l, t, d));
            for (x, y) in f.data().iter().zip(back.data().iter()) {
                prop_assert_eq!(*y, f16::from_f64(*x).to_f64());
            }
        }
    }
}
