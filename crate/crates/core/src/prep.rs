//! Input pre-processing: cropping, the width-wise train/test split rounded
//! down to the chip size, chipping of the train/validation region, the
//! eight-fold flip augmentation, and the seeded train/validation assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMap, Micrograph};

/// Default chip edge length in pixels.
pub const DEFAULT_CHIP_SIZE: u32 = 128;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("crop rect ({x},{y}) {w}x{h} exceeds raster bounds {bw}x{bh}")]
    RectOutOfBounds { x: u32, y: u32, w: u32, h: u32, bw: u32, bh: u32 },
    #[error("image width {width} leaves no train region at chip size {chip_size}")]
    NoTrainRegion { width: u32, chip_size: u32 },
    #[error("image and label rasters differ in size")]
    RasterMismatch,
    #[error("chip is not square ({w}x{h})")]
    NonSquareChip { w: u32, h: u32 },
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("no chips to assign")]
    NoChips,
    #[error("split layout does not fit the rasters")]
    LayoutMismatch,
}

/// Axis-aligned crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Width-wise train/test split: the left section is the train/validation
/// region, the remainder the test strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub trainval_width: u32,
    pub test_offset_x: u32,
    pub test_width: u32,
    pub chip_size: u32,
}

/// Train/validation tag of a chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        }
    }
}

/// One square tile cut from the train/validation region.
#[derive(Debug, Clone, PartialEq)]
pub struct Chip {
    /// Top-left corner in source pixels.
    pub origin: (u32, u32),
    pub size: u32,
    pub image: Micrograph,
    pub labels: LabelMap,
    pub split: Option<SplitTag>,
}

/// Crops image and label rasters identically.
pub fn crop(
    image: &Micrograph,
    labels: &LabelMap,
    rect: CropRect,
) -> Result<(Micrograph, LabelMap), PrepError> {
    if image.width() != labels.width() || image.height() != labels.height() {
        return Err(PrepError::RasterMismatch);
    }
    let out_of_bounds = rect.width == 0
        || rect.height == 0
        || rect.x.checked_add(rect.width).is_none_or(|e| e > image.width())
        || rect.y.checked_add(rect.height).is_none_or(|e| e > image.height());
    if out_of_bounds {
        return Err(PrepError::RectOutOfBounds {
            x: rect.x,
            y: rect.y,
            w: rect.width,
            h: rect.height,
            bw: image.width(),
            bh: image.height(),
        });
    }
    let mut img_px = Vec::with_capacity((rect.width * rect.height) as usize);
    let mut lab_px = Vec::with_capacity((rect.width * rect.height) as usize);
    for y in rect.y..rect.y + rect.height {
        for x in rect.x..rect.x + rect.width {
            img_px.push(image.get(x, y));
            lab_px.push(labels.get(x, y));
        }
    }
    let img = Micrograph::new(rect.width, rect.height, img_px).expect("non-empty rect");
    let lab = LabelMap::new(rect.width, rect.height, lab_px, labels.pixel_size())
        .expect("non-empty rect");
    Ok((img, lab))
}

/// Splits an image width into the left train/validation section (three
/// fourths of the width, rounded down to a multiple of the chip size) and
/// the remaining test strip.
pub fn compute_split(width: u32, chip_size: u32) -> Result<SplitLayout, PrepError> {
    assert!(chip_size > 0, "chip size must be positive");
    let three_quarters = (0.75 * width as f64).floor() as u32;
    let trainval_width = (three_quarters / chip_size) * chip_size;
    if trainval_width == 0 {
        return Err(PrepError::NoTrainRegion { width, chip_size });
    }
    Ok(SplitLayout {
        trainval_width,
        test_offset_x: trainval_width,
        test_width: width - trainval_width,
        chip_size,
    })
}

/// Cuts the train/validation region into a non-overlapping grid of square
/// chips in row-major order. Partial rows at the bottom edge are dropped.
pub fn chip_region(
    image: &Micrograph,
    labels: &LabelMap,
    layout: &SplitLayout,
) -> Result<Vec<Chip>, PrepError> {
    if image.width() != labels.width() || image.height() != labels.height() {
        return Err(PrepError::RasterMismatch);
    }
    if layout.trainval_width > image.width()
        || !layout.trainval_width.is_multiple_of(layout.chip_size)
        || layout.chip_size == 0
    {
        return Err(PrepError::LayoutMismatch);
    }
    let cols = layout.trainval_width / layout.chip_size;
    let rows = image.height() / layout.chip_size;
    let mut chips = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let origin = (col * layout.chip_size, row * layout.chip_size);
            let rect = CropRect {
                x: origin.0,
                y: origin.1,
                width: layout.chip_size,
                height: layout.chip_size,
            };
            let (img, lab) = crop(image, labels, rect)?;
            chips.push(Chip {
                origin,
                size: layout.chip_size,
                image: img,
                labels: lab,
                split: None,
            });
        }
    }
    Ok(chips)
}

fn flip_h_buf<T: Copy>(w: usize, h: usize, px: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            out.push(px[y * w + (w - 1 - x)]);
        }
    }
    out
}

fn flip_v_buf<T: Copy>(w: usize, h: usize, px: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            out.push(px[(h - 1 - y) * w + x]);
        }
    }
    out
}

fn transpose_buf<T: Copy>(w: usize, h: usize, px: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..w {
            out.push(px[x * w + y]); // requires w == h
        }
    }
    out
}

/// The eight dihedral variants of a square chip, identity first. Variant
/// index bits select transpose (bit 0), vertical flip (bit 1), and
/// horizontal flip (bit 2), applied in that order to both rasters.
pub fn augment_d4(chip: &Chip) -> Result<Vec<Chip>, PrepError> {
    let (w, h) = (chip.image.width(), chip.image.height());
    if w != h {
        return Err(PrepError::NonSquareChip { w, h });
    }
    let n = w as usize;
    let mut out = Vec::with_capacity(8);
    for variant in 0u8..8 {
        let mut img = chip.image.pixels().to_vec();
        let mut lab = chip.labels.pixels().to_vec();
        if variant & 1 != 0 {
            img = transpose_buf(n, n, &img);
            lab = transpose_buf(n, n, &lab);
        }
        if variant & 2 != 0 {
            img = flip_v_buf(n, n, &img);
            lab = flip_v_buf(n, n, &lab);
        }
        if variant & 4 != 0 {
            img = flip_h_buf(n, n, &img);
            lab = flip_h_buf(n, n, &lab);
        }
        out.push(Chip {
            origin: chip.origin,
            size: chip.size,
            image: Micrograph::new(w, h, img).expect("same size"),
            labels: LabelMap::new(w, h, lab, chip.labels.pixel_size()).expect("same size"),
            split: chip.split,
        });
    }
    Ok(out)
}

/// Assigns train/validation tags by a seeded uniform shuffle followed by a
/// prefix split with ⌈fraction·n⌉ train chips. Pure in (chip order,
/// fraction, seed); chips are expected in canonical row-major origin order.
pub fn assign_split(
    chips: &mut [Chip],
    train_fraction: f64,
    seed: u64,
) -> Result<(), PrepError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PrepError::BadFraction(train_fraction));
    }
    if chips.is_empty() {
        return Err(PrepError::NoChips);
    }
    let n = chips.len();
    let n_train = ((train_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        chips[idx].split = Some(if rank < n_train {
            SplitTag::Train
        } else {
            SplitTag::Val
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{class_counts, ClassId, NUM_CLASSES};
    use rand::Rng;

    fn coord_chip(n: u32) -> Chip {
        // coordinate-encoded pattern: distinct value per pixel
        let img_px: Vec<u8> = (0..n * n).map(|i| (i % 251) as u8).collect();
        let lab_px: Vec<ClassId> = (0..n * n)
            .map(|i| ClassId::from_index((i as usize) % NUM_CLASSES).unwrap())
            .collect();
        Chip {
            origin: (0, 0),
            size: n,
            image: Micrograph::new(n, n, img_px).unwrap(),
            labels: LabelMap::new(n, n, lab_px, 0.1).unwrap(),
            split: None,
        }
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let img = Micrograph::filled(8, 6, 100).unwrap();
        let lab = LabelMap::filled(8, 6, ClassId::Grain, 0.1).unwrap();
        let rect = CropRect { x: 0, y: 0, width: 8, height: 6 };
        let (ci, cl) = crop(&img, &lab, rect).unwrap();
        assert_eq!(ci, img);
        assert_eq!(cl, lab);
    }

    #[test]
    fn crop_removes_bottom_rows() {
        let img = Micrograph::filled(8, 20, 0).unwrap();
        let lab = LabelMap::filled(8, 20, ClassId::Grain, 0.1).unwrap();
        let rect = CropRect { x: 0, y: 0, width: 8, height: 10 };
        let (ci, _) = crop(&img, &lab, rect).unwrap();
        assert_eq!(ci.height(), 10);
    }

    #[test]
    fn crop_counts_match_subregion_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let px: Vec<ClassId> = (0..12 * 10)
            .map(|_| ClassId::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap())
            .collect();
        let lab = LabelMap::new(12, 10, px, 0.1).unwrap();
        let img = Micrograph::filled(12, 10, 0).unwrap();
        let rect = CropRect { x: 3, y: 2, width: 5, height: 6 };
        let (_, cl) = crop(&img, &lab, rect).unwrap();
        let counts = class_counts(&cl);
        // brute-force region count
        let mut naive = [0u64; NUM_CLASSES];
        for y in 2..8 {
            for x in 3..8 {
                naive[lab.get(x, y).index()] += 1;
            }
        }
        assert_eq!(counts.counts, naive);
    }

    #[test]
    fn crop_out_of_bounds() {
        let img = Micrograph::filled(8, 6, 0).unwrap();
        let lab = LabelMap::filled(8, 6, ClassId::Grain, 0.1).unwrap();
        let rect = CropRect { x: 4, y: 0, width: 5, height: 6 };
        assert!(matches!(
            crop(&img, &lab, rect),
            Err(PrepError::RectOutOfBounds { .. })
        ));
    }

    #[test]
    fn compute_split_known_widths() {
        let s = compute_split(640, 128).unwrap();
        assert_eq!((s.trainval_width, s.test_width), (384, 256));
        let s = compute_split(512, 128).unwrap();
        assert_eq!((s.trainval_width, s.test_width), (384, 128));
        // floor(0.75·200) = 150 rounds down to one chip, leaving 72
        let s = compute_split(200, 128).unwrap();
        assert_eq!((s.trainval_width, s.test_width), (128, 72));
        assert!(matches!(
            compute_split(128, 128),
            Err(PrepError::NoTrainRegion { .. })
        ));
    }

    #[test]
    fn compute_split_arithmetic_oracle() {
        for width in 128u32..=2048 {
            match compute_split(width, 128) {
                Ok(s) => {
                    assert_eq!(s.trainval_width % 128, 0);
                    assert_eq!(s.trainval_width + s.test_width, width);
                    assert_eq!(s.test_offset_x, s.trainval_width);
                    assert!(s.trainval_width as f64 <= 0.75 * width as f64);
                    assert!(s.trainval_width + 128 > (0.75 * width as f64).floor() as u32);
                }
                Err(_) => assert!((0.75 * width as f64).floor() < 128.0),
            }
        }
    }

    #[test]
    fn chip_region_grid_counts() {
        let img = Micrograph::filled(640, 256, 0).unwrap();
        let lab = LabelMap::filled(640, 256, ClassId::Grain, 0.1).unwrap();
        let layout = compute_split(640, 128).unwrap();
        let chips = chip_region(&img, &lab, &layout).unwrap();
        assert_eq!(chips.len(), 6); // 3 cols x 2 rows

        let img = Micrograph::filled(640, 300, 0).unwrap();
        let lab = LabelMap::filled(640, 300, ClassId::Grain, 0.1).unwrap();
        let chips = chip_region(&img, &lab, &layout).unwrap();
        assert_eq!(chips.len(), 6); // bottom 44 rows dropped
    }

    #[test]
    fn chips_tile_their_region_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = 3 * 16u32;
        let h = 2 * 16 + 5u32;
        let px: Vec<u8> = (0..(w * h) as usize).map(|_| rng.gen()).collect();
        let img = Micrograph::new(w, h, px).unwrap();
        let lab = LabelMap::filled(w, h, ClassId::Grain, 0.1).unwrap();
        let layout = SplitLayout {
            trainval_width: 48,
            test_offset_x: 48,
            test_width: 0,
            chip_size: 16,
        };
        let chips = chip_region(&img, &lab, &layout).unwrap();
        assert_eq!(chips.len(), 6);
        // reassemble and compare pixel-wise over the covered area
        for chip in &chips {
            for cy in 0..16 {
                for cx in 0..16 {
                    assert_eq!(
                        chip.image.get(cx, cy),
                        img.get(chip.origin.0 + cx, chip.origin.1 + cy)
                    );
                }
            }
        }
    }

    #[test]
    fn augment_yields_eight_distinct_closed_variants() {
        let chip = coord_chip(8);
        let variants = augment_d4(&chip).unwrap();
        assert_eq!(variants.len(), 8);
        assert_eq!(variants[0].image, chip.image); // identity first

        let mut keys: Vec<Vec<u8>> = variants
            .iter()
            .map(|c| c.image.pixels().to_vec())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 8, "variants must be distinct for a generic chip");

        // closure: flipping any variant horizontally lands back in the set
        let all: Vec<Vec<u8>> = variants.iter().map(|c| c.image.pixels().to_vec()).collect();
        for v in &variants {
            let flipped = flip_h_buf(8, 8, v.image.pixels());
            assert!(all.contains(&flipped));
        }
    }

    #[test]
    fn augment_constant_chip_is_degenerate() {
        let chip = Chip {
            origin: (0, 0),
            size: 4,
            image: Micrograph::filled(4, 4, 9).unwrap(),
            labels: LabelMap::filled(4, 4, ClassId::Void, 0.1).unwrap(),
            split: None,
        };
        let variants = augment_d4(&chip).unwrap();
        assert!(variants.iter().all(|v| v.image == chip.image));
    }

    #[test]
    fn augment_preserves_histograms_and_pairs_transforms() {
        let chip = coord_chip(6);
        let base = class_counts(&chip.labels);
        for v in augment_d4(&chip).unwrap() {
            assert_eq!(class_counts(&v.labels).counts, base.counts);
            // label and image receive the identical transform: the pixel at
            // any position must keep its (image value, label) pairing
            for i in 0..36usize {
                let img_val = v.image.pixels()[i];
                let lab_val = v.labels.pixels()[i];
                let orig_idx = chip
                    .image
                    .pixels()
                    .iter()
                    .position(|&p| p == img_val)
                    .unwrap();
                assert_eq!(chip.labels.pixels()[orig_idx], lab_val);
            }
        }
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let chip = coord_chip(8);
        let px = chip.image.pixels();
        assert_eq!(flip_h_buf(8, 8, &flip_h_buf(8, 8, px)), px);
        assert_eq!(flip_v_buf(8, 8, &flip_v_buf(8, 8, px)), px);
        assert_eq!(transpose_buf(8, 8, &transpose_buf(8, 8, px)), px);
    }

    #[test]
    fn assign_split_counts_and_determinism() {
        let mk = |n: usize| -> Vec<Chip> {
            (0..n)
                .map(|i| Chip {
                    origin: (i as u32 * 4, 0),
                    size: 4,
                    image: Micrograph::filled(4, 4, 0).unwrap(),
                    labels: LabelMap::filled(4, 4, ClassId::Grain, 0.1).unwrap(),
                    split: None,
                })
                .collect()
        };
        let mut chips = mk(10);
        assign_split(&mut chips, 0.8, 42).unwrap();
        let trains = chips
            .iter()
            .filter(|c| c.split == Some(SplitTag::Train))
            .count();
        assert_eq!(trains, 8);

        let mut again = mk(10);
        assign_split(&mut again, 0.8, 42).unwrap();
        for (a, b) in chips.iter().zip(&again) {
            assert_eq!(a.split, b.split);
        }

        let mut one = mk(1);
        assign_split(&mut one, 0.8, 7).unwrap();
        assert_eq!(one[0].split, Some(SplitTag::Train));
    }

    #[test]
    fn assign_split_ceiling_rule() {
        for n in 1..=100usize {
            let mut chips: Vec<Chip> = (0..n)
                .map(|i| Chip {
                    origin: (i as u32, 0),
                    size: 2,
                    image: Micrograph::filled(2, 2, 0).unwrap(),
                    labels: LabelMap::filled(2, 2, ClassId::Grain, 0.1).unwrap(),
                    split: None,
                })
                .collect();
            assign_split(&mut chips, 0.8, 5).unwrap();
            let trains = chips
                .iter()
                .filter(|c| c.split == Some(SplitTag::Train))
                .count();
            assert_eq!(trains, (0.8f64 * n as f64).ceil() as usize);
        }
    }

    #[test]
    fn assign_split_rejects_bad_inputs() {
        let mut empty: Vec<Chip> = Vec::new();
        assert!(matches!(
            assign_split(&mut empty, 0.8, 1),
            Err(PrepError::NoChips)
        ));
        let mut one = vec![coord_chip(4)];
        assert!(matches!(
            assign_split(&mut one, 1.0, 1),
            Err(PrepError::BadFraction(_))
        ));
    }

    #[test]
    fn augment_rejects_non_square() {
        let chip = Chip {
            origin: (0, 0),
            size: 4,
            image: Micrograph::filled(4, 2, 0).unwrap(),
            labels: LabelMap::filled(4, 2, ClassId::Grain, 0.1).unwrap(),
            split: None,
        };
        assert!(matches!(
            augment_d4(&chip),
            Err(PrepError::NonSquareChip { .. })
        ));
    }
}
