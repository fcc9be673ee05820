//! File formats: RGB PNG label rasters, grayscale PNG micrographs, the MQSS
//! score-stack container, and JSON metadata sidecars.
//!
//! MQSS layout (little-endian throughout): bytes 0–3 ASCII `MQSS`, u32
//! version (=1), u32 trials, classes, height, width, then
//! `trials·classes·height·width` f32 scores in `[trial][class][row][col]`
//! planar order. No padding, no checksum.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

use crate::raster::{
    ClassId, ImageMeta, LabelMap, Micrograph, Palette, ScoreStack, NUM_CLASSES,
};

const MQSS_MAGIC: &[u8; 4] = b"MQSS";
const MQSS_VERSION: u32 = 1;

/// Errors raised by raster construction and file I/O.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("pixel color ({},{},{}) at ({x},{y}) is not in the palette", rgb[0], rgb[1], rgb[2])]
    UnknownColor { x: u32, y: u32, rgb: [u8; 3] },
    #[error("palette color ({},{},{}) is assigned to more than one class", rgb[0], rgb[1], rgb[2])]
    PaletteNotBijective { rgb: [u8; 3] },
    #[error("expected {expected} pixels, got {got}")]
    PixelCountMismatch { expected: usize, got: usize },
    #[error("pixel size must be positive, got {pixel_size}")]
    NonPositivePixelSize { pixel_size: f64 },
    #[error("bad magic: not an MQSS file")]
    BadMagic,
    #[error("unsupported MQSS version {0}")]
    UnsupportedVersion(u32),
    #[error("MQSS dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("MQSS payload is truncated")]
    TruncatedPayload,
    #[error("score stack holds {got} classes, expected {expected}")]
    UnexpectedClassCount { expected: usize, got: usize },
    #[error(
        "scores at trial {trial}, pixel ({x},{y}) sum to {sum}, violating softmax normalization"
    )]
    NormalizationViolation { trial: u32, x: u32, y: u32, sum: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads an 8-bit RGB PNG and maps every pixel color through the palette.
///
/// Fails with [`RasterError::UnknownColor`] on the first pixel whose color is
/// not in the palette (row-major scan order).
pub fn load_label_image(
    path: &Path,
    palette: &Palette,
    pixel_size: f64,
) -> Result<LabelMap, RasterError> {
    let img = image::open(path)
        .map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })?
        .into_rgb8();
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyImage);
    }
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let rgb = img.get_pixel(x, y).0;
            let class = palette
                .class_of(rgb)
                .ok_or(RasterError::UnknownColor { x, y, rgb })?;
            pixels.push(class);
        }
    }
    LabelMap::new(width, height, pixels, pixel_size)
}

/// Writes a label map as an 8-bit RGB PNG using the palette colors.
pub fn save_label_image(
    map: &LabelMap,
    palette: &Palette,
    path: &Path,
) -> Result<(), RasterError> {
    let mut img = ImageBuffer::new(map.width(), map.height());
    for y in 0..map.height() {
        for x in 0..map.width() {
            img.put_pixel(x, y, Rgb(palette.color_of(map.get(x, y))));
        }
    }
    img.save(path).map_err(|source| RasterError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an 8-bit grayscale PNG micrograph.
pub fn load_micrograph(path: &Path) -> Result<Micrograph, RasterError> {
    let img = image::open(path)
        .map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })?
        .into_luma8();
    let (width, height) = img.dimensions();
    Micrograph::new(width, height, img.into_raw())
}

/// Writes a micrograph as an 8-bit grayscale PNG.
pub fn save_micrograph(image: &Micrograph, path: &Path) -> Result<(), RasterError> {
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(image.width(), image.height(), image.pixels().to_vec())
            .expect("dimensions validated at construction");
    img.save(path).map_err(|source| RasterError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an MQSS score stack; the round trip with [`save_score_stack`] is
/// bit-exact.
pub fn load_score_stack(path: &Path) -> Result<ScoreStack, RasterError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut reader, &mut magic, RasterError::BadMagic)?;
    if &magic != MQSS_MAGIC {
        return Err(RasterError::BadMagic);
    }
    let version = read_u32(&mut reader)?;
    if version != MQSS_VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let trials = read_u32(&mut reader)?;
    let classes = read_u32(&mut reader)?;
    let height = read_u32(&mut reader)?;
    let width = read_u32(&mut reader)?;
    if classes as usize != NUM_CLASSES {
        return Err(RasterError::UnexpectedClassCount {
            expected: NUM_CLASSES,
            got: classes as usize,
        });
    }
    let count = (trials as usize)
        .checked_mul(classes as usize)
        .and_then(|v| v.checked_mul(height as usize))
        .and_then(|v| v.checked_mul(width as usize))
        .and_then(|v| v.checked_mul(4))
        .ok_or(RasterError::DimensionOverflow)?;

    let mut payload = vec![0u8; count];
    read_exact_or(&mut reader, &mut payload, RasterError::TruncatedPayload)?;
    let scores: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ScoreStack::new(trials, height, width, scores)
}

/// Writes a score stack in the MQSS format.
pub fn save_score_stack(stack: &ScoreStack, path: &Path) -> Result<(), RasterError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>, bytes: &[u8]| {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    write(&mut w, MQSS_MAGIC)?;
    write(&mut w, &MQSS_VERSION.to_le_bytes())?;
    write(&mut w, &stack.trials().to_le_bytes())?;
    write(&mut w, &(NUM_CLASSES as u32).to_le_bytes())?;
    write(&mut w, &stack.height().to_le_bytes())?;
    write(&mut w, &stack.width().to_le_bytes())?;
    for v in stack.raw() {
        write(&mut w, &v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads an image metadata sidecar (JSON).
pub fn load_meta(path: &Path) -> Result<ImageMeta, RasterError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let meta: ImageMeta = serde_json::from_str(&text).map_err(|source| RasterError::Json {
        path: path.display().to_string(),
        source,
    })?;
    meta.validate()?;
    Ok(meta)
}

/// Writes an image metadata sidecar (JSON).
pub fn save_meta(meta: &ImageMeta, path: &Path) -> Result<(), RasterError> {
    let text = serde_json::to_string_pretty(meta).map_err(|source| RasterError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, RasterError> {
    let mut buf = [0u8; 4];
    read_exact_or(reader, &mut buf, RasterError::TruncatedPayload)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_or<R: Read>(
    reader: &mut R,
    buf: &mut [u8],
    on_eof: RasterError,
) -> Result<(), RasterError> {
    match reader.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(on_eof),
        Err(e) => Err(RasterError::Io {
            path: String::new(),
            source: e,
        }),
    }
}

#[allow(dead_code)]
fn class_for_test(index: usize) -> ClassId {
    ClassId::from_index(index % NUM_CLASSES).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn label_image_roundtrip_small() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.png");
        let palette = Palette::default();
        let map = LabelMap::new(
            2,
            1,
            vec![ClassId::Grain, ClassId::Boundary],
            0.01,
        )
        .unwrap();
        save_label_image(&map, &palette, &path).unwrap();
        let back = load_label_image(&path, &palette, 0.01).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn label_image_unknown_color() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let img = ImageBuffer::from_pixel(2, 2, Rgb([7u8, 7, 7]));
        img.save(&path).unwrap();
        let err = load_label_image(&path, &Palette::default(), 0.01).unwrap_err();
        assert!(matches!(
            err,
            RasterError::UnknownColor { x: 0, y: 0, rgb: [7, 7, 7] }
        ));
    }

    #[test]
    fn all_grain_map_saves_as_black_pixels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("grain.png");
        let map = LabelMap::filled(4, 4, ClassId::Grain, 0.01).unwrap();
        save_label_image(&map, &Palette::default(), &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!(img.pixels().count(), 16);
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn label_image_all_classes_present() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("five.png");
        let palette = Palette::default();
        let mut pixels = vec![ClassId::Grain; 16];
        for (i, c) in ClassId::ALL.iter().enumerate() {
            pixels[i] = *c;
        }
        let map = LabelMap::new(4, 4, pixels, 0.01).unwrap();
        save_label_image(&map, &palette, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        let mut colors: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 5);
    }

    #[test]
    fn label_image_roundtrip_random_maps() {
        let dir = tempdir().unwrap();
        let palette = Palette::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10 {
            let pixels: Vec<ClassId> = (0..256)
                .map(|_| ClassId::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap())
                .collect();
            let map = LabelMap::new(16, 16, pixels, 0.05).unwrap();
            let path = dir.path().join(format!("r{i}.png"));
            save_label_image(&map, &palette, &path).unwrap();
            let back = load_label_image(&path, &palette, 0.05).unwrap();
            assert_eq!(back, map);
        }
    }

    #[test]
    fn mqss_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stack.mqss");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, h, w) = (3u32, 4u32, 5u32);
        let mut scores = vec![0f32; (t * 5 * h * w) as usize];
        for trial in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut v = [0f32; NUM_CLASSES];
                    let mut sum = 0f32;
                    for slot in v.iter_mut() {
                        *slot = rng.gen_range(0.0..1.0);
                        sum += *slot;
                    }
                    for (c, val) in v.iter().enumerate() {
                        let idx = (((trial * 5 + c as u32) * h + y) * w + x) as usize;
                        scores[idx] = val / sum;
                    }
                }
            }
        }
        let stack = ScoreStack::new(t, h, w, scores).unwrap();
        save_score_stack(&stack, &path).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let back = load_score_stack(&path).unwrap();
        assert_eq!(back, stack);
        let path2 = dir.path().join("stack2.mqss");
        save_score_stack(&back, &path2).unwrap();
        let bytes2 = fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn mqss_minimal_valid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.mqss");
        let stack = ScoreStack::new(1, 1, 1, vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        save_score_stack(&stack, &path).unwrap();
        let back = load_score_stack(&path).unwrap();
        assert_eq!(back.trials(), 1);
        assert_eq!(back.score(0, ClassId::Grain, 0, 0), 1.0);
    }

    #[test]
    fn mqss_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.mqss");
        fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_score_stack(&path),
            Err(RasterError::BadMagic)
        ));
    }

    #[test]
    fn mqss_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.mqss");
        let stack = ScoreStack::new(1, 2, 2, {
            let mut s = vec![0f32; 20];
            s[..4].fill(1.0); // grain plane
            s
        })
        .unwrap();
        save_score_stack(&stack, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_score_stack(&path),
            Err(RasterError::TruncatedPayload)
        ));
    }

    #[test]
    fn mqss_normalization_violation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("badsum.mqss");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MQSS");
        for v in [1u32, 1, 5, 1, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.5f32, 0.5, 0.5, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_score_stack(&path),
            Err(RasterError::NormalizationViolation { .. })
        ));
    }

    #[test]
    fn micrograph_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = Micrograph::new(3, 2, vec![0, 50, 100, 150, 200, 250]).unwrap();
        save_micrograph(&img, &path).unwrap();
        assert_eq!(load_micrograph(&path).unwrap(), img);
    }
}
