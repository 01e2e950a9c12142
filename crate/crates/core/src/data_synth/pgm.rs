//! Binary 8-bit greyscale PGM (P5).

use std::path::Path;

use crate::tensor_nn::Tensor;
use crate::{Error, Result};

/// Encodes a `[1×H×W]` or `[H×W]` image with values in `[0, 1]`.
pub fn save_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim(format!("PGM export needs a single-channel image, got {:?}", image.shape()))),
    };
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("PGM export needs pixels in [0, 1]".into()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
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
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Parse { offset: start, message: format!("{what} out of range") })
    }
}

/// Decodes to `[1×H×W]`. Any malformed header or short payload is an
/// error carrying the byte offset where decoding stopped.
pub fn load_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(c.fail("missing P5 magic"));
    }
    c.pos = 2;
    let w = c.number("width")?;
    let h = c.number("height")?;
    let max = c.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(c.fail("zero image extent"));
    }
    if max == 0 || max > 255 {
        return Err(c.fail(format!("maxval {max} is not an 8-bit value")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(c.fail("expected a single whitespace byte before the payload"));
    }
    c.pos += 1;
    let payload = &bytes[c.pos..];
    if payload.len() < w * h {
        c.pos = bytes.len();
        return Err(c.fail(format!("payload holds {} of {} pixels", payload.len(), w * h)));
    }
    let data = payload[..w * h].iter().map(|&b| b as f32 / max as f32).collect();
    Tensor::new([1, h, w], data)
}

pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, save_pgm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    load_pgm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_image_has_zero_payload() {
        let bytes = save_pgm(&Tensor::zeros([1, 3, 4])).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(&bytes[11..], &[0u8; 12]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = load_pgm(b"P5 # note\n2 1\n# max\n255\n\x00\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let cases: &[(&[u8], usize)] = &[
            (b"P2\n1 1\n255\n\x00", 0),
            (b"P5\nx 1\n255\n", 3),
            (b"P5\n1 1\n65535\n\x00", 12),
            (b"P5\n2 2\n255\n\x00", 12),
        ];
        for &(bytes, offset) in cases {
            match load_pgm(bytes) {
                Err(Error::Parse { offset: o, .. }) => assert_eq!(o, offset, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_quantisation(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let mut rng = crate::tensor_nn::RngState::new(seed);
            let data: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
            let img = Tensor::<f32>::from_f64([1, h, w], &data).unwrap();
            let back = load_pgm(&save_pgm(&img).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 255.0);
        }

        #[test]
        fn truncation_never_yields_an_image(cut in 0usize..27) {
            let bytes = save_pgm(&Tensor::full([1, 4, 4], 0.5)).unwrap();
            prop_assert!(cut < bytes.len());
            let truncated = matches!(load_pgm(&bytes[..cut]), Err(Error::Parse { .. }));
            prop_assert!(truncated);
        }
    }
}
