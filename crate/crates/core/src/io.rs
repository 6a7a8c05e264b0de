//! Portable on-disk formats.
//!
//! Feature maps are UTF-8 text: a `h w c` header line followed by
//! `h*w*c` whitespace-separated decimal values. Values are written with
//! Rust's shortest round-trip formatting, so save/load reproduces every
//! finite f64 bit-exactly.
//!
//! Masks are plain-text PGM (`P2`, maxval 255) with pixel values
//! `round(255 * m)`, rounding halves up. Loading divides by 255, so the
//! round trip is exact only for masks whose values are multiples of 1/255
//! (binary masks in particular).
//!
//! All writes go through a temp file in the destination directory plus a
//! rename, so readers never observe a truncated file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::types::{CmeError, FeatureMap, Mask};

fn format_err(path: &Path, detail: impl Into<String>) -> CmeError {
    CmeError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Writes `contents` to `path` atomically (temp file + rename).
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), CmeError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| CmeError::Io(e.error))
        .map(|_| ())
}

pub fn save_feature_map(fm: &FeatureMap, path: &Path) -> Result<(), CmeError> {
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {}\n",
        fm.height(),
        fm.width(),
        fm.channels()
    ));
    for i in 0..fm.pixel_count() {
        let px = fm.pixel(i);
        for (ch, v) in px.iter().enumerate() {
            if ch > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap, CmeError> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    let mut dim = |name: &str| -> Result<usize, CmeError> {
        tokens
            .next()
            .ok_or_else(|| format_err(path, format!("missing header field '{name}'")))?
            .parse::<usize>()
            .map_err(|_| format_err(path, format!("header field '{name}' is not a count")))
    };
    let h = dim("h")?;
    let w = dim("w")?;
    let c = dim("c")?;
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| format_err(path, "header dimensions overflow"))?;

    let mut data = Vec::with_capacity(expected);
    for (idx, tok) in tokens.enumerate() {
        if idx >= expected {
            return Err(format_err(
                path,
                format!(
                    "expected {expected} values, found more at value {}",
                    idx + 1
                ),
            ));
        }
        let v: f64 = tok.parse().map_err(|_| {
            format_err(path, format!("value {} ('{tok}') is not a number", idx + 1))
        })?;
        if !v.is_finite() {
            return Err(format_err(
                path,
                format!("value {} ('{tok}') is not finite", idx + 1),
            ));
        }
        data.push(v);
    }
    if data.len() != expected {
        return Err(format_err(
            path,
            format!(
                "expected {expected} values, found {} (missing at value {})",
                data.len(),
                data.len() + 1
            ),
        ));
    }
    FeatureMap::new(h, w, c, data)
}

/// Saves a mask as plain-text PGM, maxval 255, `round(255 * value)`.
pub fn save_mask_pgm(mask: &Mask, path: &Path) -> Result<(), CmeError> {
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!("{} {}\n255\n", mask.width(), mask.height()));
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if x > 0 {
                out.push(' ');
            }
            let v = (255.0 * mask.value(y * mask.width() + x)).round() as u32;
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_mask_pgm(path: &Path) -> Result<Mask, CmeError> {
    let text = fs::read_to_string(path)?;
    // Strip PGM comment lines before tokenizing.
    let cleaned: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let mut tokens = cleaned.split_whitespace();
    match tokens.next() {
        Some("P2") => {}
        other => {
            return Err(format_err(
                path,
                format!("expected magic 'P2', got {other:?}"),
            ))
        }
    }
    let mut dim = |name: &str| -> Result<usize, CmeError> {
        tokens
            .next()
            .ok_or_else(|| format_err(path, format!("missing '{name}'")))?
            .parse::<usize>()
            .map_err(|_| format_err(path, format!("'{name}' is not a count")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval}, expected 255")));
    }
    let mut data = Vec::with_capacity(h * w);
    for (idx, tok) in tokens.enumerate() {
        let v: u32 = tok
            .parse()
            .map_err(|_| format_err(path, format!("pixel {} ('{tok}') is not a count", idx + 1)))?;
        if v > 255 {
            return Err(format_err(
                path,
                format!("pixel {} ({v}) exceeds maxval 255", idx + 1),
            ));
        }
        data.push(v as f64 / 255.0);
    }
    if data.len() != h * w {
        return Err(format_err(
            path,
            format!("expected {} pixels, found {}", h * w, data.len()),
        ));
    }
    Mask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn tmp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cme-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn minimal_well_formed_file() {
        let path = tmp_path("min.txt");
        fs::write(&path, "2 2 3\n1 2 3 4 5 6 7 8 9 10 11 12\n").unwrap();
        let fm = load_feature_map(&path).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.channels()), (2, 2, 3));
        assert_eq!(fm.pixel(3), &[10.0, 11.0, 12.0]);
    }

    #[test]
    fn length_mismatch_names_offset() {
        let path = tmp_path("short.txt");
        fs::write(&path, "2 2 3\n1 2 3 4 5 6 7 8 9 10 11\n").unwrap();
        let err = load_feature_map(&path).unwrap_err();
        assert!(err.to_string().contains("value 12"), "{err}");

        let path = tmp_path("long.txt");
        fs::write(&path, "1 1 2\n1 2 3\n").unwrap();
        let err = load_feature_map(&path).unwrap_err();
        assert!(err.to_string().contains("value 3"), "{err}");
    }

    #[test]
    fn pgm_loader_rejects_bad_maxval_and_range() {
        let path = tmp_path("maxval.pgm");
        fs::write(&path, "P2\n1 1\n200\n100\n").unwrap();
        assert!(load_mask_pgm(&path).is_err());

        let path = tmp_path("range.pgm");
        fs::write(&path, "P2\n1 1\n255\n300\n").unwrap();
        let err = load_mask_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("exceeds maxval"), "{err}");
    }

    #[test]
    fn non_finite_value_rejected() {
        let path = tmp_path("nan.txt");
        fs::write(&path, "1 1 2\n1.0 NaN\n").unwrap();
        let err = load_feature_map(&path).unwrap_err();
        assert!(err.to_string().contains("value 2"), "{err}");
    }

    #[test]
    fn malformed_header_rejected() {
        let path = tmp_path("hdr.txt");
        fs::write(&path, "2 x 3\n").unwrap();
        let err = load_feature_map(&path).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
    }

    #[test]
    fn feature_round_trip_is_bit_exact() {
        let mut rng = SplitMix64::new(909);
        for trial in 0..100 {
            let (h, w, c) = (
                1 + rng.next_below(4),
                1 + rng.next_below(4),
                1 + rng.next_below(6),
            );
            let data = rng.uniform_vec(h * w * c, -1e3, 1e3);
            let fm = FeatureMap::new(h, w, c, data).unwrap();
            let path = tmp_path(&format!("rt{trial}.txt"));
            save_feature_map(&fm, &path).unwrap();
            let back = load_feature_map(&path).unwrap();
            assert_eq!(fm, back, "trial {trial}");
        }
    }

    #[test]
    fn pgm_zero_and_one_masks() {
        let zero = Mask::zeros(2, 2).unwrap();
        let path = tmp_path("zero.pgm");
        save_mask_pgm(&zero, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 0\n0 0\n");

        let one = Mask::new(2, 2, vec![1.0; 4]).unwrap();
        save_mask_pgm(&one, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n255 255\n255 255\n");
    }

    #[test]
    fn pgm_rounds_half_up() {
        // 255 * 0.5 = 127.5 rounds up to 128.
        let m = Mask::new(1, 1, vec![0.5]).unwrap();
        let path = tmp_path("half.pgm");
        save_mask_pgm(&m, &path).unwrap();
        let back = load_mask_pgm(&path).unwrap();
        assert_eq!((back.value(0) * 255.0).round(), 128.0);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("128"), "{text}");
    }

    #[test]
    fn binary_mask_round_trip_exact() {
        let m = Mask::new(2, 3, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let path = tmp_path("bin.pgm");
        save_mask_pgm(&m, &path).unwrap();
        let back = load_mask_pgm(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let m = Mask::zeros(1, 1).unwrap();
        let err = save_mask_pgm(&m, Path::new("/nonexistent-dir/x/y.pgm")).unwrap_err();
        assert!(matches!(err, CmeError::Io(_)), "{err}");
    }
}
