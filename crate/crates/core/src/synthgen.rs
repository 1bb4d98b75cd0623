//! Synthetic multi-sequence digit images and dataset files.
//!
//! Samples are grayscale images built from 28x28 digit glyphs laid out on a
//! 28-pixel slot grid, plus small 7x7 distractor glyphs that carry no label.
//! Two layouts exist: stacked rows (one digit string per row band) and a
//! horizontal/vertical pair on a square grid. Every sample is drawn from its
//! own counter-derived RNG stream, so generation is deterministic, order
//! independent, and safe to parallelize.
//!
//! Datasets are written as JSON lines (one [`SampleRecord`] per line) next to
//! a `manifest.json` holding the generating [`DatasetSpec`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::idx::{read_idx_images, read_idx_labels};
use crate::labels::{Alphabet, TargetSet};
use crate::{Error, Result};

/// Glyph side length in pixels; images are tiled in slots of this size.
pub const GLYPH_SIDE: usize = 28;

/// Slots per row: stacked images are `GLYPH_SIDE * SLOTS_PER_ROW` wide.
pub const SLOTS_PER_ROW: usize = 14;

/// Side length of a shrunken distractor glyph.
pub const NOISE_SIDE: usize = 7;

/// Sequence length used by the horizontal/vertical layout.
pub const HV_SEQ_LEN: usize = 5;

const IMAGE_W: usize = GLYPH_SIDE * SLOTS_PER_ROW;

/// 5x7 bitmap font for the ten digits; scaled up for the built-in glyph pool.
const FONT_5X7: [[&str; 7]; 10] = [
    [
        "01110", "10001", "10011", "10101", "11001", "10001", "01110",
    ],
    [
        "00100", "01100", "00100", "00100", "00100", "00100", "01110",
    ],
    [
        "01110", "10001", "00001", "00010", "00100", "01000", "11111",
    ],
    [
        "11111", "00010", "00100", "00010", "00001", "10001", "01110",
    ],
    [
        "00010", "00110", "01010", "10010", "11111", "00010", "00010",
    ],
    [
        "11111", "10000", "11110", "00001", "00001", "10001", "01110",
    ],
    [
        "00110", "01000", "10000", "11110", "10001", "10001", "01110",
    ],
    [
        "11111", "00001", "00010", "00100", "01000", "01000", "01000",
    ],
    [
        "01110", "10001", "10001", "01110", "10001", "10001", "01110",
    ],
    [
        "01110", "10001", "10001", "01111", "00001", "00010", "01100",
    ],
];

/// Pool of 28x28 digit bitmaps, keyed by label class (1..=10 for digits 0..9).
#[derive(Debug, Clone)]
pub struct GlyphSource {
    by_class: Vec<Vec<Vec<u8>>>,
}

impl GlyphSource {
    /// One glyph per digit, rendered from the built-in 5x7 font.
    pub fn builtin() -> GlyphSource {
        let by_class = FONT_5X7.iter().map(|rows| vec![scale_font_glyph(rows)]).collect();
        GlyphSource { by_class }
    }

    /// Loads a glyph pool from IDX image/label files.
    ///
    /// Images must be 28x28 and labels must be digits 0..9; every digit needs
    /// at least one glyph so any class can be sampled.
    pub fn from_idx<P: AsRef<Path>, Q: AsRef<Path>>(
        images_path: P,
        labels_path: Q,
    ) -> Result<GlyphSource> {
        let images = read_idx_images(images_path)?;
        let labels = read_idx_labels(labels_path)?;
        if images.rows != GLYPH_SIDE || images.cols != GLYPH_SIDE {
            return Err(Error::IdxGlyphSize {
                h: images.rows,
                w: images.cols,
            });
        }
        if images.images.len() != labels.len() {
            return Err(Error::IdxCountMismatch {
                images: images.images.len(),
                labels: labels.len(),
            });
        }
        let mut by_class: Vec<Vec<Vec<u8>>> = vec![Vec::new(); 10];
        for (image, &label) in images.images.into_iter().zip(&labels) {
            if label > 9 {
                return Err(Error::InvalidLabel(format!(
                    "glyph label {label} is not a digit"
                )));
            }
            by_class[label as usize].push(image);
        }
        for (digit, pool) in by_class.iter().enumerate() {
            if pool.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "glyph pool has no examples of digit {digit}"
                )));
            }
        }
        Ok(GlyphSource { by_class })
    }

    /// Total number of glyphs across all classes.
    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws a uniformly random bitmap for `class` (1..=10).
    fn pick(&self, rng: &mut impl Rng, class: usize) -> &[u8] {
        let pool = &self.by_class[class - 1];
        &pool[rng.random_range(0..pool.len())]
    }
}

/// Loads a glyph pool from IDX files; alias for [`GlyphSource::from_idx`].
pub fn load_idx<P: AsRef<Path>, Q: AsRef<Path>>(
    images_path: P,
    labels_path: Q,
) -> Result<GlyphSource> {
    GlyphSource::from_idx(images_path, labels_path)
}

/// Image arrangement for generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// 1..=`max_sequences` digit strings, one per 28-pixel row band.
    StackedRows,
    /// One horizontal and one vertical 5-digit string on a 14x14 slot grid.
    HorizontalVertical,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Layout> {
        match s {
            "stacked-rows" => Ok(Layout::StackedRows),
            "horizontal-vertical" => Ok(Layout::HorizontalVertical),
            other => Err(Error::InvalidConfig(format!(
                "unknown layout {other:?}; expected stacked-rows or horizontal-vertical"
            ))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::StackedRows => "stacked-rows",
            Layout::HorizontalVertical => "horizontal-vertical",
        })
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub layout: Layout,
    /// Maximum sequences per stacked image; the count is sampled per image.
    pub max_sequences: usize,
    /// Bounds for per-sequence digit counts in the stacked layout.
    pub len_min: usize,
    pub len_max: usize,
    /// Horizontal glyph offset is drawn uniformly from `[-jitter_px, jitter_px]`.
    pub jitter_px: i64,
    /// Glyph rotation is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// One distractor glyph per `noise_ratio_denom` labeled glyphs, rounded up.
    pub noise_ratio_denom: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> DatasetSpec {
        DatasetSpec {
            layout: Layout::StackedRows,
            max_sequences: 2,
            len_min: 1,
            len_max: SLOTS_PER_ROW,
            jitter_px: 3,
            rotation_deg: 10.0,
            noise_ratio_denom: 5,
            train_count: 3000,
            test_count: 300,
            seed: 17,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_sequences == 0 {
            return Err(Error::InvalidConfig("max_sequences must be at least 1".into()));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::InvalidConfig(format!(
                "sequence length bounds must satisfy 1 <= len_min <= len_max, got [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if self.len_max > SLOTS_PER_ROW {
            return Err(Error::InvalidConfig(format!(
                "len_max {} exceeds the {SLOTS_PER_ROW} slots in a row",
                self.len_max
            )));
        }
        if self.jitter_px < 0 {
            return Err(Error::InvalidConfig("jitter_px must be non-negative".into()));
        }
        if !self.rotation_deg.is_finite() || self.rotation_deg < 0.0 {
            return Err(Error::InvalidConfig(
                "rotation_deg must be finite and non-negative".into(),
            ));
        }
        if self.noise_ratio_denom == 0 {
            return Err(Error::InvalidConfig("noise_ratio_denom must be at least 1".into()));
        }
        Ok(())
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<Vec<u8>, D::Error> {
        let text = String::deserialize(de)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// One dataset sample: a grayscale image and its unordered target strings.
///
/// Pixels are row-major bytes, base64-encoded in JSON. Target order follows
/// the layout (top-to-bottom rows, or horizontal before vertical) but
/// consumers must treat the strings as an unordered set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub h: usize,
    pub w: usize,
    #[serde(with = "b64")]
    pub pixels: Vec<u8>,
    pub targets: Vec<String>,
}

impl SampleRecord {
    /// Checks the pixel buffer length against the declared dimensions.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.h * self.w {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} pixels but declares {}x{}",
                self.pixels.len(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }

    /// Parses the target strings against `alphabet`.
    pub fn target_set(&self, alphabet: &Alphabet) -> Result<TargetSet> {
        let sequences = self
            .targets
            .iter()
            .map(|t| alphabet.parse(t))
            .collect::<Result<Vec<_>>>()?;
        TargetSet::new(sequences)
    }
}

/// Where one labeled glyph landed, in slot and pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedGlyph {
    /// Label class, 1..=10.
    pub class: usize,
    pub slot_row: usize,
    pub slot_col: usize,
    pub px_x: usize,
    pub px_y: usize,
}

/// Glyph placements for one sample, one list per sequence in target order.
#[derive(Debug, Clone, Default)]
pub struct LayoutPlan {
    pub sequences: Vec<Vec<PlacedGlyph>>,
    pub noise_count: usize,
}

/// RNG for sample number `stream` of the dataset seeded with `seed`.
///
/// Streams are independent, so samples can be rendered in any order (or in
/// parallel) without changing their content.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rounded_normal(rng: &mut impl Rng, mean: f64, std: f64, lo: usize, hi: usize) -> usize {
    let normal = Normal::new(mean, std).expect("finite positive std");
    let value: f64 = normal.sample(rng);
    value.round().clamp(lo as f64, hi as f64) as usize
}

fn scale_font_glyph(rows: &[&str; 7]) -> Vec<u8> {
    let mut out = vec![0u8; GLYPH_SIDE * GLYPH_SIDE];
    for y in 0..GLYPH_SIDE {
        let sy = y * 7 / GLYPH_SIDE;
        for x in 0..GLYPH_SIDE {
            let sx = x * 5 / GLYPH_SIDE;
            if rows[sy].as_bytes()[sx] == b'1' {
                out[y * GLYPH_SIDE + x] = 255;
            }
        }
    }
    out
}

/// Rotates a 28x28 glyph about its center, nearest-neighbor resampled.
fn rotate_glyph(src: &[u8], deg: f64) -> Vec<u8> {
    if deg == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = deg.to_radians().sin_cos();
    let center = (GLYPH_SIDE as f64 - 1.0) / 2.0;
    let mut out = vec![0u8; GLYPH_SIDE * GLYPH_SIDE];
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let sx = (cos * dx + sin * dy + center).round();
            let sy = (-sin * dx + cos * dy + center).round();
            if (0.0..GLYPH_SIDE as f64).contains(&sx) && (0.0..GLYPH_SIDE as f64).contains(&sy) {
                out[y * GLYPH_SIDE + x] = src[sy as usize * GLYPH_SIDE + sx as usize];
            }
        }
    }
    out
}

/// Shrinks a 28x28 glyph to 7x7 by max-pooling 4x4 blocks, keeping thin
/// strokes visible that plain subsampling would drop.
fn shrink_glyph(src: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; NOISE_SIDE * NOISE_SIDE];
    for y in 0..NOISE_SIDE {
        for x in 0..NOISE_SIDE {
            let mut best = 0u8;
            for by in 0..4 {
                for bx in 0..4 {
                    best = best.max(src[(y * 4 + by) * GLYPH_SIDE + x * 4 + bx]);
                }
            }
            out[y * NOISE_SIDE + x] = best;
        }
    }
    out
}

/// Composites `glyph` onto `img` with per-pixel max, so overlaps never erase ink.
fn paste_max(img: &mut [u8], img_w: usize, x: usize, y: usize, glyph: &[u8], side: usize) {
    for gy in 0..side {
        let row = (y + gy) * img_w + x;
        for gx in 0..side {
            let px = &mut img[row + gx];
            *px = (*px).max(glyph[gy * side + gx]);
        }
    }
}

fn class_char(class: usize) -> char {
    char::from_digit(class as u32 - 1, 10).expect("digit class")
}

struct Canvas {
    w: usize,
    h: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Canvas {
        Canvas {
            w,
            h,
            pixels: vec![0u8; h * w],
        }
    }

    /// Draws jitter and rotation, stamps one labeled glyph, and returns its placement.
    fn stamp_labeled(
        &mut self,
        spec: &DatasetSpec,
        glyphs: &GlyphSource,
        rng: &mut impl Rng,
        class: usize,
        slot_row: usize,
        slot_col: usize,
    ) -> PlacedGlyph {
        let jitter = rng.random_range(-spec.jitter_px..=spec.jitter_px);
        let deg = rng.random_range(-spec.rotation_deg..=spec.rotation_deg);
        let bitmap = rotate_glyph(glyphs.pick(rng, class), deg);
        let max_x = (self.w - GLYPH_SIDE) as i64;
        let px_x = (GLYPH_SIDE as i64 * slot_col as i64 + jitter).clamp(0, max_x) as usize;
        let px_y = GLYPH_SIDE * slot_row;
        paste_max(&mut self.pixels, self.w, px_x, px_y, &bitmap, GLYPH_SIDE);
        PlacedGlyph {
            class,
            slot_row,
            slot_col,
            px_x,
            px_y,
        }
    }

    /// Stamps shrunken distractor glyphs at unconstrained positions.
    fn stamp_noise(&mut self, glyphs: &GlyphSource, rng: &mut impl Rng, count: usize) {
        for _ in 0..count {
            let class = rng.random_range(1..=10);
            let small = shrink_glyph(glyphs.pick(rng, class));
            let x = rng.random_range(0..=self.w - NOISE_SIDE);
            let y = rng.random_range(0..=self.h - NOISE_SIDE);
            paste_max(&mut self.pixels, self.w, x, y, &small, NOISE_SIDE);
        }
    }
}

fn noise_count(labeled: usize, denom: usize) -> usize {
    labeled.div_ceil(denom)
}

/// Renders one sample according to `spec.layout`.
pub fn render_sample(
    spec: &DatasetSpec,
    glyphs: &GlyphSource,
    rng: &mut impl Rng,
) -> Result<(SampleRecord, LayoutPlan)> {
    spec.validate()?;
    match spec.layout {
        Layout::StackedRows => render_stacked_sample(spec, glyphs, rng),
        Layout::HorizontalVertical => render_hv_sample(spec, glyphs, rng),
    }
}

fn render_stacked_sample(
    spec: &DatasetSpec,
    glyphs: &GlyphSource,
    rng: &mut impl Rng,
) -> Result<(SampleRecord, LayoutPlan)> {
    let n = spec.max_sequences;
    let rows = rounded_normal(rng, n as f64 / 2.0 + 0.5, n as f64 / 4.0, 1, n);
    let mut canvas = Canvas::new(GLYPH_SIDE * rows, IMAGE_W);
    let mut plan = LayoutPlan::default();
    let mut targets = Vec::with_capacity(rows);
    for row in 0..rows {
        let len = rounded_normal(rng, 7.0, 3.0, spec.len_min, spec.len_max);
        let mut placed = Vec::with_capacity(len);
        let mut text = String::with_capacity(len);
        for col in 0..len {
            let class = rng.random_range(1..=10);
            placed.push(canvas.stamp_labeled(spec, glyphs, rng, class, row, col));
            text.push(class_char(class));
        }
        plan.sequences.push(placed);
        targets.push(text);
    }
    let labeled: usize = plan.sequences.iter().map(Vec::len).sum();
    plan.noise_count = noise_count(labeled, spec.noise_ratio_denom);
    canvas.stamp_noise(glyphs, rng, plan.noise_count);
    let record = SampleRecord {
        h: canvas.h,
        w: canvas.w,
        pixels: canvas.pixels,
        targets,
    };
    Ok((record, plan))
}

/// Slot anchors for the horizontal/vertical layout: `(row, col)` of the first
/// glyph of each sequence.
fn place_hv(rng: &mut impl Rng, max_attempts: usize) -> Result<((usize, usize), (usize, usize))> {
    for _ in 0..max_attempts {
        let r_h = rng.random_range(0..SLOTS_PER_ROW);
        let c_h = rng.random_range(0..=SLOTS_PER_ROW - HV_SEQ_LEN);
        let r_v = rng.random_range(0..=SLOTS_PER_ROW - HV_SEQ_LEN);
        let c_v = rng.random_range(0..SLOTS_PER_ROW);
        let share_slot = (c_h..c_h + HV_SEQ_LEN).contains(&c_v)
            && (r_v..r_v + HV_SEQ_LEN).contains(&r_h);
        if !share_slot {
            return Ok(((r_h, c_h), (r_v, c_v)));
        }
    }
    Err(Error::PlacementFailed {
        attempts: max_attempts,
    })
}

/// Renders one horizontal/vertical sample: a 392x392 image holding one
/// left-to-right and one top-to-bottom 5-digit string in disjoint slots.
pub fn render_hv_sample(
    spec: &DatasetSpec,
    glyphs: &GlyphSource,
    rng: &mut impl Rng,
) -> Result<(SampleRecord, LayoutPlan)> {
    let ((r_h, c_h), (r_v, c_v)) = place_hv(rng, 100)?;
    let side = GLYPH_SIDE * SLOTS_PER_ROW;
    let mut canvas = Canvas::new(side, side);
    let mut plan = LayoutPlan::default();
    let mut targets = Vec::with_capacity(2);
    for (base, horizontal) in [((r_h, c_h), true), ((r_v, c_v), false)] {
        let mut placed = Vec::with_capacity(HV_SEQ_LEN);
        let mut text = String::with_capacity(HV_SEQ_LEN);
        for step in 0..HV_SEQ_LEN {
            let (row, col) = if horizontal {
                (base.0, base.1 + step)
            } else {
                (base.0 + step, base.1)
            };
            let class = rng.random_range(1..=10);
            placed.push(canvas.stamp_labeled(spec, glyphs, rng, class, row, col));
            text.push(class_char(class));
        }
        plan.sequences.push(placed);
        targets.push(text);
    }
    plan.noise_count = noise_count(2 * HV_SEQ_LEN, spec.noise_ratio_denom);
    canvas.stamp_noise(glyphs, rng, plan.noise_count);
    let record = SampleRecord {
        h: side,
        w: side,
        pixels: canvas.pixels,
        targets,
    };
    Ok((record, plan))
}

/// Writes one record per line as JSON.
pub fn write_jsonl<P: AsRef<Path>>(path: P, samples: &[SampleRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines dataset, validating each record's pixel buffer.
pub fn read_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        record.validate()?;
        samples.push(record);
    }
    Ok(samples)
}

/// Paths produced by [`gen_dataset`].
#[derive(Debug, Clone)]
pub struct GenReport {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub manifest_path: PathBuf,
}

fn render_split(
    spec: &DatasetSpec,
    glyphs: &GlyphSource,
    stream_offset: u64,
    count: usize,
) -> Result<Vec<SampleRecord>> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let mut rng = sample_rng(spec.seed, stream_offset + index as u64);
            render_sample(spec, glyphs, &mut rng).map(|(record, _)| record)
        })
        .collect()
}

/// Generates `train.jsonl`, `test.jsonl`, and `manifest.json` under `out_dir`.
///
/// Test samples use RNG streams offset by `train_count`, so growing the train
/// split never changes test content for a fixed seed.
pub fn gen_dataset(spec: &DatasetSpec, glyphs: &GlyphSource, out_dir: &Path) -> Result<GenReport> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let report = GenReport {
        train_path: out_dir.join("train.jsonl"),
        test_path: out_dir.join("test.jsonl"),
        manifest_path: out_dir.join("manifest.json"),
    };
    let train = render_split(spec, glyphs, 0, spec.train_count)?;
    write_jsonl(&report.train_path, &train)?;
    drop(train);
    let test = render_split(spec, glyphs, spec.train_count as u64, spec.test_count)?;
    write_jsonl(&report.test_path, &test)?;
    let mut manifest = serde_json::to_string_pretty(spec)?;
    manifest.push('\n');
    std::fs::write(&report.manifest_path, manifest)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idx::{encode_idx_images, encode_idx_labels};

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            max_sequences: 2,
            len_min: 1,
            len_max: 5,
            train_count: 4,
            test_count: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn builtin_font_has_ten_distinct_inked_glyphs() {
        let source = GlyphSource::builtin();
        assert_eq!(source.len(), 10);
        let glyphs: Vec<&[u8]> = (1..=10).map(|c| source.by_class[c - 1][0].as_slice()).collect();
        for g in &glyphs {
            assert_eq!(g.len(), 784);
            assert!(g.iter().any(|&p| p == 255), "glyph has no ink");
            assert!(g.iter().all(|&p| p == 0 || p == 255));
        }
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(glyphs[a], glyphs[b], "digits {a} and {b} render identically");
            }
        }
    }

    #[test]
    fn font_scaling_maps_cells_to_4x4_blocks() {
        // Digit 1 has row 0 = "00100": only font column 2 is inked, which
        // covers scaled columns 12..=16.
        let one = &GlyphSource::builtin().by_class[1][0];
        for y in 0..4 {
            assert_eq!(one[y * 28 + 14], 255);
            assert_eq!(one[y * 28 + 5], 0);
            assert_eq!(one[y * 28 + 27], 0);
        }
    }

    #[test]
    fn rotation_by_zero_is_identity_and_small_angles_keep_ink() {
        let glyph = &GlyphSource::builtin().by_class[7][0];
        assert_eq!(rotate_glyph(glyph, 0.0), *glyph);
        let turned = rotate_glyph(glyph, 10.0);
        assert_ne!(turned, *glyph);
        let ink: usize = turned.iter().filter(|&&p| p > 0).count();
        assert!(ink > 50, "rotation lost most ink: {ink} pixels left");
    }

    #[test]
    fn shrink_pools_blocks_by_max() {
        let mut src = vec![0u8; 784];
        src[0] = 7; // block (0,0)
        src[3 * 28 + 3] = 200; // still block (0,0)
        src[27 * 28 + 27] = 99; // block (6,6)
        let small = shrink_glyph(&src);
        assert_eq!(small[0], 200);
        assert_eq!(small[48], 99);
        assert_eq!(small.iter().filter(|&&p| p > 0).count(), 2);
    }

    #[test]
    fn stacked_sample_is_deterministic_per_stream() {
        let spec = tiny_spec();
        let glyphs = GlyphSource::builtin();
        let (rec_a, _) = render_sample(&spec, &glyphs, &mut sample_rng(17, 3)).unwrap();
        let (rec_b, _) = render_sample(&spec, &glyphs, &mut sample_rng(17, 3)).unwrap();
        assert_eq!(rec_a, rec_b);
        let (rec_c, _) = render_sample(&spec, &glyphs, &mut sample_rng(17, 4)).unwrap();
        assert_ne!(rec_a, rec_c, "distinct streams produced identical samples");
    }

    #[test]
    fn stacked_sample_shape_and_plan_agree() {
        let spec = DatasetSpec {
            max_sequences: 3,
            ..DatasetSpec::default()
        };
        let glyphs = GlyphSource::builtin();
        for stream in 0..40 {
            let (record, plan) = render_sample(&spec, &glyphs, &mut sample_rng(5, stream)).unwrap();
            record.validate().unwrap();
            let rows = plan.sequences.len();
            assert!((1..=3).contains(&rows));
            assert_eq!(record.h, 28 * rows);
            assert_eq!(record.w, 392);
            assert_eq!(record.targets.len(), rows);
            let labeled: usize = plan.sequences.iter().map(Vec::len).sum();
            assert_eq!(plan.noise_count, labeled.div_ceil(5));
            for (row, (placed, target)) in plan.sequences.iter().zip(&record.targets).enumerate() {
                assert_eq!(placed.len(), target.len());
                assert!((spec.len_min..=spec.len_max).contains(&placed.len()));
                for (col, glyph) in placed.iter().enumerate() {
                    assert_eq!(glyph.slot_row, row);
                    assert_eq!(glyph.slot_col, col);
                    assert_eq!(glyph.px_y, 28 * row);
                    // Jitter is bounded and clamped to the canvas.
                    let ideal = 28 * col;
                    assert!(glyph.px_x <= 392 - 28);
                    assert!(glyph.px_x.abs_diff(ideal) <= 3, "jitter out of range");
                    // The stamped window contains ink.
                    let window_ink = (0..28).any(|gy| {
                        (0..28).any(|gx| {
                            record.pixels[(glyph.px_y + gy) * record.w + glyph.px_x + gx] > 0
                        })
                    });
                    assert!(window_ink, "no ink where a glyph was placed");
                }
            }
        }
    }

    #[test]
    fn glyph_class_draws_are_roughly_uniform() {
        let spec = DatasetSpec {
            max_sequences: 2,
            ..DatasetSpec::default()
        };
        let glyphs = GlyphSource::builtin();
        let mut counts = [0usize; 10];
        for stream in 0..300 {
            let (_, plan) = render_sample(&spec, &glyphs, &mut sample_rng(23, stream)).unwrap();
            for seq in &plan.sequences {
                for glyph in seq {
                    counts[glyph.class - 1] += 1;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 9 degrees of freedom; anything near uniform stays far below this.
        assert!(chi2 < 50.0, "chi-squared {chi2:.1} suggests biased classes {counts:?}");
    }

    #[test]
    fn hv_sample_has_two_disjoint_five_digit_sequences() {
        let spec = DatasetSpec {
            layout: Layout::HorizontalVertical,
            ..DatasetSpec::default()
        };
        let glyphs = GlyphSource::builtin();
        for stream in 0..1000 {
            let (record, plan) = render_sample(&spec, &glyphs, &mut sample_rng(29, stream)).unwrap();
            assert_eq!((record.h, record.w), (392, 392));
            assert_eq!(record.targets.len(), 2);
            assert!(record.targets.iter().all(|t| t.len() == 5));
            assert_eq!(plan.noise_count, 2);
            let [hor, ver] = &plan.sequences[..] else {
                panic!("expected two sequences");
            };
            // Horizontal: same row, consecutive columns; vertical: transposed.
            assert!(hor.windows(2).all(|p| {
                p[1].slot_row == p[0].slot_row && p[1].slot_col == p[0].slot_col + 1
            }));
            assert!(ver.windows(2).all(|p| {
                p[1].slot_col == p[0].slot_col && p[1].slot_row == p[0].slot_row + 1
            }));
            let h_slots: Vec<(usize, usize)> =
                hor.iter().map(|p| (p.slot_row, p.slot_col)).collect();
            for p in ver {
                assert!(
                    !h_slots.contains(&(p.slot_row, p.slot_col)),
                    "sequences share slot ({}, {})",
                    p.slot_row,
                    p.slot_col
                );
            }
        }
    }

    #[test]
    fn hv_placement_gives_up_after_the_attempt_budget() {
        let mut rng = sample_rng(1, 0);
        match place_hv(&mut rng, 0) {
            Err(Error::PlacementFailed { attempts }) => assert_eq!(attempts, 0),
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn record_json_uses_base64_pixels_and_round_trips() {
        let record = SampleRecord {
            h: 1,
            w: 3,
            pixels: vec![0, 128, 255],
            targets: vec!["40".into()],
        };
        let json = serde_json::to_string(&record).unwrap();
        assert!(json.contains("\"pixels\":\"AID/\""), "unexpected encoding: {json}");
        let back: SampleRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
    }

    #[test]
    fn target_set_parses_against_digit_alphabet() {
        let record = SampleRecord {
            h: 1,
            w: 1,
            pixels: vec![0],
            targets: vec!["90".into(), "3".into()],
        };
        let set = record.target_set(&Alphabet::digits()).unwrap();
        assert_eq!(set.sequences()[0].labels(), &[10, 1]);
        assert_eq!(set.sequences()[1].labels(), &[4]);
    }

    #[test]
    fn gen_dataset_writes_deterministic_files() {
        let spec = tiny_spec();
        let glyphs = GlyphSource::builtin();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let report = gen_dataset(&spec, &glyphs, dir_a.path()).unwrap();
        gen_dataset(&spec, &glyphs, dir_b.path()).unwrap();
        for name in ["train.jsonl", "test.jsonl", "manifest.json"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
            assert!(!a.is_empty());
        }
        let train = read_jsonl(&report.train_path).unwrap();
        let test = read_jsonl(&report.test_path).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        // Test samples continue the stream numbering after the train split.
        let (expected, _) =
            render_sample(&spec, &glyphs, &mut sample_rng(spec.seed, 4)).unwrap();
        assert_eq!(test[0], expected);
        let manifest: DatasetSpec =
            serde_json::from_str(&std::fs::read_to_string(&report.manifest_path).unwrap()).unwrap();
        assert_eq!(manifest, spec);
    }

    #[test]
    fn idx_backed_source_validates_its_inputs() {
        let blob = |fill: u8| vec![fill; 784];
        let images: Vec<Vec<u8>> = (0..10).map(|d| blob(d as u8 + 1)).collect();
        let labels: Vec<u8> = (0..10).collect();
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lab_path = dir.path().join("labels.idx");
        std::fs::write(&img_path, encode_idx_images(28, 28, &images).unwrap()).unwrap();
        std::fs::write(&lab_path, encode_idx_labels(&labels)).unwrap();
        let source = GlyphSource::from_idx(&img_path, &lab_path).unwrap();
        assert_eq!(source.len(), 10);
        assert_eq!(source.by_class[3][0], blob(4));

        // Count mismatch between the two files.
        std::fs::write(&lab_path, encode_idx_labels(&labels[..9])).unwrap();
        assert!(matches!(
            GlyphSource::from_idx(&img_path, &lab_path),
            Err(Error::IdxCountMismatch { images: 10, labels: 9 })
        ));

        // Non-digit label.
        std::fs::write(&lab_path, encode_idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 10])).unwrap();
        assert!(matches!(
            GlyphSource::from_idx(&img_path, &lab_path),
            Err(Error::InvalidLabel(_))
        ));

        // A digit with no glyphs cannot be sampled.
        std::fs::write(&lab_path, encode_idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 8])).unwrap();
        assert!(matches!(
            GlyphSource::from_idx(&img_path, &lab_path),
            Err(Error::InvalidConfig(_))
        ));

        // Wrong glyph geometry.
        let small: Vec<Vec<u8>> = (0..10).map(|_| vec![0u8; 25]).collect();
        std::fs::write(&img_path, encode_idx_images(5, 5, &small).unwrap()).unwrap();
        std::fs::write(&lab_path, encode_idx_labels(&labels)).unwrap();
        assert!(matches!(
            GlyphSource::from_idx(&img_path, &lab_path),
            Err(Error::IdxGlyphSize { h: 5, w: 5 })
        ));
    }

    #[test]
    fn spec_validation_rejects_bad_bounds() {
        let mut spec = DatasetSpec::default();
        spec.len_min = 0;
        assert!(spec.validate().is_err());
        spec.len_min = 6;
        spec.len_max = 5;
        assert!(spec.validate().is_err());
        spec.len_min = 1;
        spec.len_max = 15;
        assert!(spec.validate().is_err());
        spec.len_max = 14;
        spec.max_sequences = 0;
        assert!(spec.validate().is_err());
        spec.max_sequences = 2;
        spec.noise_ratio_denom = 0;
        assert!(spec.validate().is_err());
        spec.noise_ratio_denom = 5;
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn layout_parses_and_displays() {
        for layout in [Layout::StackedRows, Layout::HorizontalVertical] {
            assert_eq!(layout.to_string().parse::<Layout>().unwrap(), layout);
        }
        assert!("diagonal".parse::<Layout>().is_err());
    }
}
