//! Deterministic toy datasets: a patterned text corpus, and image tasks over
//! 16x16 grayscale scenes of simple shapes (captions, instructions and
//! box-as-text grounding).
//!
//! Every generator is a pure function of `(seed, n)`. Sample `i` belongs to
//! the held-out split when `i` is odd.

use std::io::{BufRead, Write};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenId;
use crate::error::{Error, Result};
use crate::vocab::{self, *};

pub const IMAGE_SIDE: usize = 16;
pub const CELL: usize = 4;
pub const GRID: usize = IMAGE_SIDE / CELL;
pub const TEXT_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl GridImage {
    pub fn blank(width: usize, height: usize) -> Self {
        GridImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Text,
    Caption,
    Instruction,
    Grounding,
}

/// Normalized `[x1, y1, x2, y2]`.
pub type BoxCoords = [f32; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: SampleKind,
    pub image: Option<GridImage>,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub boxes: Option<Vec<BoxCoords>>,
}

impl Sample {
    /// Prompt followed by response.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// True exactly on response positions of [`Sample::tokens`].
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.prompt.len()];
        m.resize(self.prompt.len() + self.response.len(), true);
        m
    }
}

pub fn is_heldout(index: usize) -> bool {
    index % 2 == 1
}

pub fn train_split(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().step_by(2).collect()
}

pub fn heldout_split(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().skip(1).step_by(2).collect()
}

// ---------------------------------------------------------------------------
// text corpus

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Arithmetic progressions and repeated motifs over the grammar tokens. The
/// first content token's parity equals the split parity, so the train and
/// held-out halves never share a sequence.
pub fn gen_text_corpus(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = stream(seed, 1);
    (0..n)
        .map(|i| {
            let parity = (i % 2) as u32;
            let start = 2 * rng.random_range(0..GRAMMAR_SIZE / 2) + parity;
            let (family, body): (TokenId, Vec<TokenId>) = if rng.random_bool(0.5) {
                let step = rng.random_range(1..=7u32);
                let body = (0..TEXT_LEN as u32).map(|t| vocab::grammar(start + t * step)).collect();
                (FAM_ARITH, body)
            } else {
                let len = rng.random_range(2..=4usize);
                let mut motif = vec![start];
                motif.extend((1..len).map(|_| rng.random_range(0..GRAMMAR_SIZE)));
                let body = (0..TEXT_LEN).map(|t| vocab::grammar(motif[t % len])).collect();
                (FAM_REPEAT, body)
            };
            let mut response = body;
            response.push(EOS);
            Sample {
                kind: SampleKind::Text,
                image: None,
                prompt: vec![BOS, family],
                response,
                boxes: None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// scenes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Cross,
    Disc,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Disc];

    pub fn token(self) -> TokenId {
        SHAPE_BASE + self as u32
    }

    /// Whether pixel `(x, y)` of a 4x4 cell is lit.
    pub fn covers(self, x: usize, y: usize) -> bool {
        match self {
            Shape::Square => true,
            Shape::Cross => x == y || x + y == CELL - 1,
            Shape::Disc => !((x == 0 || x == CELL - 1) && (y == 0 || y == CELL - 1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Band {
    Dim,
    Mid,
    Bright,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Dim, Band::Mid, Band::Bright];

    pub fn token(self) -> TokenId {
        BAND_BASE + self as u32
    }

    fn range(self) -> (f32, f32) {
        match self {
            Band::Dim => (0.25, 0.40),
            Band::Mid => (0.50, 0.65),
            Band::Bright => (0.80, 1.00),
        }
    }
}

pub fn cell_token(cell: usize) -> TokenId {
    CELL_BASE + cell as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub band: Band,
    pub intensity: f32,
    /// Raster index into the 4x4 grid of 4-pixel cells.
    pub cell: usize,
}

impl SceneObject {
    pub fn bbox(&self) -> BoxCoords {
        let (col, row) = ((self.cell % GRID) as f32, (self.cell / GRID) as f32);
        let s = CELL as f32 / IMAGE_SIDE as f32;
        [col * s, row * s, (col + 1.0) * s, (row + 1.0) * s]
    }
}

/// Objects sorted by cell in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let count = rng.random_range(1..=3usize);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        cells.shuffle(rng);
        let mut combos: Vec<(Shape, Band)> = Shape::ALL
            .iter()
            .flat_map(|&s| Band::ALL.iter().map(move |&b| (s, b)))
            .collect();
        combos.shuffle(rng);
        let mut objects: Vec<SceneObject> = (0..count)
            .map(|i| {
                let (shape, band) = combos[i];
                let (lo, hi) = band.range();
                SceneObject {
                    shape,
                    band,
                    intensity: rng.random_range(lo..=hi),
                    cell: cells[i],
                }
            })
            .collect();
        objects.sort_by_key(|o| o.cell);
        Scene { objects }
    }

    pub fn render(&self) -> GridImage {
        let mut img = GridImage::blank(IMAGE_SIDE, IMAGE_SIDE);
        for o in &self.objects {
            let (cx, cy) = ((o.cell % GRID) * CELL, (o.cell / GRID) * CELL);
            for y in 0..CELL {
                for x in 0..CELL {
                    if o.shape.covers(x, y) {
                        img.set(cx + x, cy + y, o.intensity);
                    }
                }
            }
        }
        img
    }

    /// `[shape, band, cell]` per object in raster order.
    pub fn caption(&self) -> Vec<TokenId> {
        self.objects
            .iter()
            .flat_map(|o| [o.shape.token(), o.band.token(), cell_token(o.cell)])
            .collect()
    }
}

fn with_eos(mut v: Vec<TokenId>) -> Vec<TokenId> {
    v.push(EOS);
    v
}

pub fn describe_prompt() -> Vec<TokenId> {
    vec![BOS, TASK_DESCRIBE, SEP]
}

fn caption_sample(scene: &Scene, kind: SampleKind) -> Sample {
    Sample {
        kind,
        image: Some(scene.render()),
        prompt: describe_prompt(),
        response: with_eos(scene.caption()),
        boxes: None,
    }
}

pub fn gen_caption_pairs(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = stream(seed, 2);
    (0..n)
        .map(|_| caption_sample(&Scene::random(&mut rng), SampleKind::Caption))
        .collect()
}

/// Describe, count, shape-at-cell, band-at-cell and where-is questions.
pub fn gen_instruction_pairs(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = stream(seed, 3);
    (0..n)
        .map(|_| {
            let scene = Scene::random(&mut rng);
            let task = rng.random_range(0..20u32);
            if task < 8 {
                return caption_sample(&scene, SampleKind::Instruction);
            }
            let pick = scene.objects[rng.random_range(0..scene.objects.len())];
            let (prompt, answer) = match task {
                8..=10 => (
                    vec![BOS, TASK_COUNT, SEP],
                    COUNT_BASE + scene.objects.len() as u32,
                ),
                11..=13 => {
                    let cell = if rng.random_bool(0.5) {
                        pick.cell
                    } else {
                        rng.random_range(0..GRID * GRID)
                    };
                    let answer = scene
                        .objects
                        .iter()
                        .find(|o| o.cell == cell)
                        .map_or(NONE, |o| o.shape.token());
                    (vec![BOS, TASK_SHAPE_AT, cell_token(cell), SEP], answer)
                }
                14..=16 => (
                    vec![BOS, TASK_BAND_AT, cell_token(pick.cell), SEP],
                    pick.band.token(),
                ),
                _ => (
                    vec![BOS, TASK_WHERE, pick.shape.token(), pick.band.token(), SEP],
                    cell_token(pick.cell),
                ),
            };
            Sample {
                kind: SampleKind::Instruction,
                image: Some(scene.render()),
                prompt,
                response: vec![answer, EOS],
                boxes: None,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// grounding

/// Quantizes a normalized coordinate to an integer percentile in `0..=99`.
pub fn quantize(v: f32) -> u32 {
    ((v * 100.0).round().clamp(0.0, 99.0)) as u32
}

pub fn dequantize(q: u32) -> f32 {
    q as f32 / 100.0
}

/// `BOX_OPEN x1 y1 x2 y2 BOX_CLOSE` with coordinates as digit tokens.
pub fn encode_box(b: &BoxCoords) -> Vec<TokenId> {
    let mut out = vec![BOX_OPEN];
    out.extend(b.iter().map(|&v| vocab::digit(quantize(v))));
    out.push(BOX_CLOSE);
    out
}

/// Parses every well-formed box in `tokens`; malformed spans are skipped.
pub fn decode_boxes(tokens: &[TokenId]) -> Vec<BoxCoords> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 6 <= tokens.len() {
        if tokens[i] == BOX_OPEN && tokens[i + 5] == BOX_CLOSE {
            let digits: Option<Vec<u32>> = tokens[i + 1..i + 5].iter().map(|&t| vocab::as_digit(t)).collect();
            if let Some(d) = digits {
                out.push([dequantize(d[0]), dequantize(d[1]), dequantize(d[2]), dequantize(d[3])]);
                i += 6;
                continue;
            }
        }
        i += 1;
    }
    out
}

pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f32 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &BoxCoords| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Single-object "locate shape band" prompts (70%) and "locate all" prompts.
pub fn gen_grounding_pairs(seed: u64, n: usize) -> Vec<Sample> {
    let mut rng = stream(seed, 4);
    (0..n)
        .map(|_| {
            let scene = Scene::random(&mut rng);
            let (prompt, targets): (Vec<TokenId>, Vec<SceneObject>) = if rng.random_bool(0.7) {
                let o = scene.objects[rng.random_range(0..scene.objects.len())];
                (
                    vec![BOS, TASK_LOCATE, o.shape.token(), o.band.token(), SEP],
                    vec![o],
                )
            } else {
                (vec![BOS, TASK_LOCATE_ALL, SEP], scene.objects.clone())
            };
            let boxes: Vec<BoxCoords> = targets.iter().map(SceneObject::bbox).collect();
            let response = with_eos(boxes.iter().flat_map(encode_box).collect());
            Sample {
                kind: SampleKind::Grounding,
                image: Some(scene.render()),
                prompt,
                response,
                boxes: Some(boxes),
            }
        })
        .collect()
}

pub fn is_single_locate(s: &Sample) -> bool {
    s.kind == SampleKind::Grounding && s.prompt.get(1) == Some(&TASK_LOCATE)
}

// ---------------------------------------------------------------------------
// bundles and persistence

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_text: usize,
    pub n_caption: usize,
    pub n_instruction: usize,
    pub n_grounding: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_text: 4000,
            n_caption: 4000,
            n_instruction: 4000,
            n_grounding: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub text: Vec<Sample>,
    pub caption: Vec<Sample>,
    pub instruction: Vec<Sample>,
    pub grounding: Vec<Sample>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        if [cfg.n_text, cfg.n_caption, cfg.n_instruction, cfg.n_grounding].contains(&0) {
            return Err(Error::Config("every dataset needs n > 0".into()));
        }
        Ok(Datasets {
            text: gen_text_corpus(cfg.seed, cfg.n_text),
            caption: gen_caption_pairs(cfg.seed, cfg.n_caption),
            instruction: gen_instruction_pairs(cfg.seed, cfg.n_instruction),
            grounding: gen_grounding_pairs(cfg.seed, cfg.n_grounding),
        })
    }

    pub fn get(&self, kind: SampleKind) -> &[Sample] {
        match kind {
            SampleKind::Text => &self.text,
            SampleKind::Caption => &self.caption,
            SampleKind::Instruction => &self.instruction,
            SampleKind::Grounding => &self.grounding,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    bytes: String,
    width: usize,
    height: usize,
}

impl From<&GridImage> for ImageRecord {
    fn from(img: &GridImage) -> Self {
        let raw: Vec<u8> = img.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        ImageRecord {
            bytes: base64::engine::general_purpose::STANDARD.encode(raw),
            width: img.width,
            height: img.height,
        }
    }
}

impl TryFrom<ImageRecord> for GridImage {
    type Error = Error;

    fn try_from(img: ImageRecord) -> Result<Self> {
        let raw = base64::engine::general_purpose::STANDARD
            .decode(img.bytes)
            .map_err(|e| Error::Format(format!("image bytes: {e}")))?;
        if raw.len() != img.width * img.height * 4 {
            return Err(Error::Format("image byte count mismatch".into()));
        }
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(GridImage {
            width: img.width,
            height: img.height,
            pixels,
        })
    }
}

/// `{"bytes": base64 f32 LE pixels, "width", "height"}`, the image field of
/// a dataset line.
pub fn image_to_json(img: &GridImage) -> Result<String> {
    Ok(serde_json::to_string(&ImageRecord::from(img))?)
}

pub fn image_from_json(text: &str) -> Result<GridImage> {
    let rec: ImageRecord = serde_json::from_str(text).map_err(|e| Error::Format(format!("image: {e}")))?;
    GridImage::try_from(rec)
}

/// One line of a dataset file. Field order is fixed.
#[derive(Serialize, Deserialize)]
struct Record {
    kind: SampleKind,
    image: Option<ImageRecord>,
    prompt_ids: Vec<TokenId>,
    response_ids: Vec<TokenId>,
    boxes: Option<Vec<BoxCoords>>,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        let image = s.image.as_ref().map(ImageRecord::from);
        Record {
            kind: s.kind,
            image,
            prompt_ids: s.prompt.clone(),
            response_ids: s.response.clone(),
            boxes: s.boxes.clone(),
        }
    }
}

impl TryFrom<Record> for Sample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        let image = r.image.map(GridImage::try_from).transpose()?;
        Ok(Sample {
            kind: r.kind,
            image,
            prompt: r.prompt_ids,
            response: r.response_ids,
            boxes: r.boxes,
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, &Record::from(s))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        out.push(Sample::try_from(rec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_text_corpus(3, 50), gen_text_corpus(3, 50));
        assert_eq!(gen_caption_pairs(3, 50), gen_caption_pairs(3, 50));
        assert_eq!(gen_instruction_pairs(3, 50), gen_instruction_pairs(3, 50));
        assert_eq!(gen_grounding_pairs(3, 50), gen_grounding_pairs(3, 50));
        assert_ne!(gen_caption_pairs(3, 50), gen_caption_pairs(4, 50));
    }

    #[test]
    fn text_splits_are_disjoint() {
        let corpus = gen_text_corpus(5, 2000);
        let train: std::collections::HashSet<_> =
            train_split(&corpus).iter().map(|s| s.tokens()).collect();
        assert!(heldout_split(&corpus).iter().all(|s| !train.contains(&s.tokens())));
    }

    #[test]
    fn single_bright_square_top_left_caption() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Square,
                band: Band::Bright,
                intensity: 0.9,
                cell: 0,
            }],
        };
        assert_eq!(
            scene.caption(),
            vec![SHAPE_BASE, BAND_BASE + 2, CELL_BASE]
        );
        let img = scene.render();
        assert_eq!(img.get(0, 0), 0.9);
        assert_eq!(img.get(3, 3), 0.9);
        assert_eq!(img.get(4, 0), 0.0);
    }

    #[test]
    fn differing_shape_gives_differing_caption() {
        let mk = |shape| Scene {
            objects: vec![SceneObject {
                shape,
                band: Band::Mid,
                intensity: 0.6,
                cell: 5,
            }],
        };
        assert_ne!(mk(Shape::Cross).caption(), mk(Shape::Disc).caption());
        assert_ne!(mk(Shape::Cross).render(), mk(Shape::Disc).render());
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let mask = |s: Shape| -> Vec<bool> {
            (0..16).map(|i| s.covers(i % 4, i / 4)).collect()
        };
        assert_ne!(mask(Shape::Square), mask(Shape::Cross));
        assert_ne!(mask(Shape::Square), mask(Shape::Disc));
        assert_ne!(mask(Shape::Cross), mask(Shape::Disc));
    }

    #[test]
    fn caption_is_a_function_of_the_image() {
        // same rendered image always maps to the same caption
        let samples = gen_caption_pairs(11, 3000);
        let mut seen = std::collections::HashMap::new();
        for s in &samples {
            let key: Vec<u32> = s.image.as_ref().unwrap().pixels.iter().map(|p| p.to_bits()).collect();
            let prev = seen.insert(key, s.response.clone());
            if let Some(prev) = prev {
                assert_eq!(prev, s.response);
            }
        }
    }

    #[test]
    fn square_box_from_pixel_rect() {
        // cell 5 = column 1, row 1 = pixels [4,4]-[8,8]
        let o = SceneObject {
            shape: Shape::Square,
            band: Band::Dim,
            intensity: 0.3,
            cell: 5,
        };
        assert_eq!(o.bbox(), [0.25, 0.25, 0.5, 0.5]);
        assert_eq!(
            encode_box(&o.bbox()),
            vec![BOX_OPEN, DIGIT_BASE + 25, DIGIT_BASE + 25, DIGIT_BASE + 50, DIGIT_BASE + 50, BOX_CLOSE]
        );
    }

    #[test]
    fn grounding_prompts_name_present_objects() {
        for s in gen_grounding_pairs(2, 500) {
            let boxes = s.boxes.as_ref().unwrap();
            assert!(boxes.iter().all(|b| b[0] < b[2] && b[1] < b[3]));
            assert_eq!(decode_boxes(&s.response).len(), boxes.len());
            if is_single_locate(&s) {
                assert_eq!(boxes.len(), 1);
                // the named (shape, band) is lit inside the target box
                let img = s.image.as_ref().unwrap();
                let b = boxes[0];
                let (x0, y0) = ((b[0] * 16.0) as usize, (b[1] * 16.0) as usize);
                let lit = (0..4).any(|dy| (0..4).any(|dx| img.get(x0 + dx, y0 + dy) > 0.0));
                assert!(lit);
            }
        }
    }

    #[test]
    fn loss_mask_covers_response_only() {
        let s = &gen_instruction_pairs(1, 1)[0];
        let mask = s.loss_mask();
        assert_eq!(mask.len(), s.prompt.len() + s.response.len());
        assert!(mask[..s.prompt.len()].iter().all(|m| !m));
        assert!(mask[s.prompt.len()..].iter().all(|&m| m));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut all = gen_text_corpus(1, 3);
        all.extend(gen_grounding_pairs(1, 3));
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &all).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        assert!(first.lines().next().unwrap().starts_with("{\"kind\":\"text\",\"image\":null,\"prompt_ids\""));
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, all);
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 0.5, 0.5];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[0.5, 0.5, 1.0, 1.0]), 0.0);
        assert!((iou(&a, &[0.25, 0.0, 0.75, 0.5]) - 1.0 / 3.0).abs() < 1e-6);
    }
}
