//! Portable graymap IO (binary `P5` and plain `P2`).
//!
//! Images map gray levels to `[0, 1]` by dividing by `maxval`; label masks
//! store the class index directly as the gray level.

use std::path::Path;

use sfcl_core::field::{LabelMask, ScalarField};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

/// Splits the header into whitespace-separated tokens, skipping `#` comments.
/// Returns the tokens and the offset just past the single whitespace byte
/// that ends the last one.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err("truncated header".into()),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    Ok((tokens, i + 1))
}

impl Graymap {
    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let (head, body_at) = header_tokens(bytes, 4)?;
        let number = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
        let width = number(&head[1], "width")?;
        let height = number(&head[2], "height")?;
        let maxval = number(&head[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(format!("maxval {maxval} outside 1..=65535"));
        }
        let n = width.checked_mul(height).ok_or("image too large")?;
        let pixels: Vec<u16> = match head[0].as_str() {
            "P5" => {
                let body = bytes.get(body_at..).unwrap_or(&[]);
                let wide = maxval > 255;
                let need = if wide { 2 * n } else { n };
                if body.len() < need {
                    return Err(format!("expected {need} pixel bytes, found {}", body.len()));
                }
                if wide {
                    body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
                } else {
                    body[..n].iter().map(|&b| b as u16).collect()
                }
            }
            "P2" => {
                let text = String::from_utf8_lossy(bytes.get(body_at.min(bytes.len())..).unwrap_or(&[])).into_owned();
                let values: Result<Vec<u16>, _> = text
                    .lines()
                    .map(|l| l.split('#').next().unwrap_or(""))
                    .flat_map(|l| l.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
                    .map(|t| t.parse::<u16>())
                    .collect();
                let values = values.map_err(|_| "non-numeric pixel value".to_string())?;
                if values.len() < n {
                    return Err(format!("expected {n} pixel values, found {}", values.len()));
                }
                values[..n].to_vec()
            }
            other => return Err(format!("unsupported magic {other:?} (expected P5 or P2)")),
        };
        if let Some(&v) = pixels.iter().find(|&&v| v as usize > maxval) {
            return Err(format!("pixel value {v} exceeds maxval {maxval}"));
        }
        Ok(Self { width, height, maxval: maxval as u16, pixels })
    }

    /// Binary `P5` encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for &p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        } else {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        }
        out
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&bytes).map_err(|m| CliError::format(path, m))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn to_image(&self) -> ScalarField {
        let scale = self.maxval as f64;
        let values = self.pixels.iter().map(|&p| p as f64 / scale).collect();
        ScalarField::from_vec(self.height, self.width, values).expect("sized by header")
    }

    /// Quantizes to 8 bits after clamping to `[0, 1]`.
    pub fn from_image(image: &ScalarField) -> Self {
        let pixels = image.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect();
        Self { width: image.width(), height: image.height(), maxval: 255, pixels }
    }

    pub fn to_labels(&self, classes: u8) -> Result<LabelMask, String> {
        let values: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| if p < classes as u16 { Ok(p as u8) } else { Err(format!("gray level {p} is not a class below {classes}")) })
            .collect::<Result<_, _>>()?;
        LabelMask::new(self.height, self.width, classes, values).map_err(|e| e.to_string())
    }

    /// Class indices as gray levels with `maxval = classes - 1`.
    pub fn from_labels(label: &LabelMask) -> Self {
        Self {
            width: label.width(),
            height: label.height(),
            maxval: (label.classes().max(2) - 1) as u16,
            pixels: label.values().iter().map(|&v| v as u16).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_and_binary_agree() {
        let plain = b"P2\n# comment\n3 2\n4\n0 1 2\n3 4 0\n";
        let g = Graymap::parse(plain).unwrap();
        assert_eq!((g.width, g.height, g.maxval), (3, 2, 4));
        assert_eq!(g.pixels, vec![0, 1, 2, 3, 4, 0]);
        assert_eq!(Graymap::parse(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let g = Graymap { width: 2, height: 1, maxval: 1000, pixels: vec![999, 3] };
        assert_eq!(Graymap::parse(&g.to_bytes()).unwrap(), g);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Graymap::parse(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(Graymap::parse(b"P5\n2 2\n255\n\0").is_err());
        assert!(Graymap::parse(b"P2\n1 1\n3\n7\n").is_err());
        assert!(Graymap::parse(b"P5\n1").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let l = LabelMask::new(2, 2, 3, vec![0, 2, 1, 0]).unwrap();
        let g = Graymap::from_labels(&l);
        assert_eq!(g.maxval, 2);
        assert_eq!(g.to_labels(3).unwrap(), l);
        assert!(g.to_labels(2).is_err());
    }
}
