//! Synthetic visual question answering data.
//!
//! Each sample is a 32×32 image split into a 2×2 grid with one colored shape
//! in one quadrant. Its attributes are read from
//! `SHA-256(seed_le ‖ split ‖ index_le)`:
//! byte 0 picks the color, byte 1 the shape, byte 2 the quadrant, byte 3 the
//! distractor shape named by "no" benchmark existence questions. Existence answers are
//! "yes" exactly when `(index / 3)` is even, which balances yes/no both
//! overall and among the existence records of the benchmark files.
//!
//! The benchmark record asks category `index mod 3`. Training records ask
//! one question each, in the same image-first layout as benchmark prompts.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conversation::{write_records, Conversation, RawRecord, RawTurn, Turn};
use super::image::write_image;
use super::tokenizer::IMAGE_LITERAL;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_SIDE: usize = 32;

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 0.8, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("purple", [0.6, 0.1, 0.9]),
    ("orange", [1.0, 0.55, 0.0]),
];

pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];

const BACKGROUND: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Color,
    Shape,
    Existence,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Color, Category::Shape, Category::Existence];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Shape => "shape",
            Category::Existence => "existence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category `{s}`")))
    }
}

/// Every answer the generator can emit.
pub fn answer_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = COLORS.iter().map(|c| c.0).collect();
    v.extend(SHAPES);
    v.extend(["yes", "no"]);
    v
}

/// One question of a training conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    Color,
    Shape,
    /// "Is there a <shape> in the image?" about the given shape index.
    Exists(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub id: String,
    pub index: usize,
    pub color: usize,
    pub shape: usize,
    pub quadrant: usize,
    /// Shape named in the benchmark's existence question.
    pub probe: usize,
}

fn attributes(seed: u64, split: Split, index: usize) -> [u8; 32] {
    Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(split.to_string().as_bytes())
        .chain_update((index as u64).to_le_bytes())
        .finalize()
        .into()
}

impl SynthSample {
    pub fn generate(seed: u64, split: Split, index: usize) -> Self {
        let h = attributes(seed, split, index);
        let shape = h[1] as usize % SHAPES.len();
        let distractor = (shape + 1 + h[3] as usize % 2) % SHAPES.len();
        let exists = (index / 3) % 2 == 0;
        Self {
            id: format!("{split}-{index:05}"),
            index,
            color: h[0] as usize % COLORS.len(),
            shape,
            quadrant: h[2] as usize % 4,
            probe: if exists { shape } else { distractor },
        }
    }

    /// Questions of the training records: color, shape, and existence of
    /// every shape.
    pub fn questions(&self) -> Vec<Question> {
        let mut qs = vec![Question::Color, Question::Shape];
        qs.extend((0..SHAPES.len()).map(Question::Exists));
        qs
    }

    fn category_question(&self, cat: Category) -> Question {
        match cat {
            Category::Color => Question::Color,
            Category::Shape => Question::Shape,
            Category::Existence => Question::Exists(self.probe),
        }
    }

    pub fn ask(&self, q: Question) -> String {
        match q {
            Question::Color => "What color is the shape?".into(),
            Question::Shape => "What shape is it?".into(),
            Question::Exists(probe) => format!("Is there a {} in the image?", SHAPES[probe]),
        }
    }

    pub fn reply(&self, q: Question) -> &'static str {
        match q {
            Question::Color => COLORS[self.color].0,
            Question::Shape => SHAPES[self.shape],
            Question::Exists(probe) if probe == self.shape => "yes",
            Question::Exists(_) => "no",
        }
    }

    pub fn question(&self, cat: Category) -> String {
        self.ask(self.category_question(cat))
    }

    pub fn answer(&self, cat: Category) -> &'static str {
        self.reply(self.category_question(cat))
    }

    /// Category asked by this sample's benchmark record.
    pub fn benchmark_category(&self) -> Category {
        Category::ALL[self.index % 3]
    }

    pub fn image_file(&self) -> String {
        format!("images/{}.ppm", self.id)
    }

    pub fn render(&self) -> Tensor<f32> {
        let side = IMAGE_SIDE;
        let half = side / 2;
        let rgb = COLORS[self.color].1;
        let (ox, oy) = ((self.quadrant % 2) * half, (self.quadrant / 2) * half);
        let mut data = vec![0.0f32; 3 * side * side];
        for y in 0..side {
            for x in 0..side {
                let (lx, ly) = (x as f64 - ox as f64, y as f64 - oy as f64);
                let inside = (0.0..half as f64).contains(&lx)
                    && (0.0..half as f64).contains(&ly)
                    && self.covers(lx, ly);
                for c in 0..3 {
                    let v = if inside { rgb[c] } else { BACKGROUND };
                    data[c * side * side + y * side + x] = v as f32;
                }
            }
        }
        Tensor::new(vec![3, side, side], data).expect("fixed image shape")
    }

    /// Whether local pixel (x, y) of the 16×16 quadrant belongs to the shape.
    fn covers(&self, x: f64, y: f64) -> bool {
        match SHAPES[self.shape] {
            "square" => (3.0..13.0).contains(&x) && (3.0..13.0).contains(&y),
            "circle" => (x - 7.5).powi(2) + (y - 7.5).powi(2) <= 5.5 * 5.5,
            _ => (3.0..13.0).contains(&y) && (x - 7.5).abs() <= (y - 2.0) / 2.0,
        }
    }

    /// One single-question conversation per entry of [`Self::questions`],
    /// each opening with the image, as benchmark prompts do.
    pub fn conversations(&self) -> Vec<Conversation> {
        self.questions()
            .into_iter()
            .enumerate()
            .map(|(k, q)| {
                let turns = vec![
                    Turn::human(format!("{IMAGE_LITERAL}\n{}", self.ask(q))),
                    Turn::assistant(self.reply(q)),
                ];
                Conversation::new(format!("{}-q{k}", self.id), Some(self.image_file()), turns)
                    .expect("generated conversations are valid")
            })
            .collect()
    }

    /// Single-question benchmark record with `gold` and `category`.
    pub fn benchmark_record(&self) -> RawRecord {
        let cat = self.benchmark_category();
        RawRecord {
            id: self.id.clone(),
            image: Some(self.image_file()),
            conversations: vec![
                RawTurn {
                    from: "human".into(),
                    value: format!("{IMAGE_LITERAL}\n{}", self.question(cat)),
                },
                RawTurn {
                    from: "gpt".into(),
                    value: self.answer(cat).into(),
                },
            ],
            gold: Some(self.answer(cat).into()),
            category: Some(cat.as_str().into()),
        }
    }
}

/// `n` samples of one split.
pub fn synth_vqa_generate(n: usize, seed: u64, split: Split) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset needs n ≥ 1".into()));
    }
    Ok((0..n).map(|i| SynthSample::generate(seed, split, i)).collect())
}

/// Paths written by [`write_synth`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthFiles {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub train_benchmark: PathBuf,
    pub heldout_benchmark: PathBuf,
}

/// Writes both splits under `dir`: `images/*.ppm`, `train.json`,
/// `heldout.json`, and the single-question `train_bench.json` /
/// `heldout_bench.json` benchmark files.
pub fn write_synth(dir: &Path, train_n: usize, heldout_n: usize, seed: u64) -> Result<SynthFiles> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut paths = Vec::new();
    for (split, n) in [(Split::Train, train_n), (Split::Heldout, heldout_n)] {
        let samples = synth_vqa_generate(n, seed, split)?;
        for s in &samples {
            write_image(&dir.join(s.image_file()), &s.render())?;
        }
        let records: Vec<RawRecord> = samples
            .iter()
            .flat_map(SynthSample::conversations)
            .map(|c| RawRecord::from_conversation(&c))
            .collect();
        let data = dir.join(format!("{split}.json"));
        write_records(&data, &records)?;
        let bench = dir.join(format!("{split}_bench.json"));
        let records: Vec<RawRecord> = samples.iter().map(SynthSample::benchmark_record).collect();
        write_records(&bench, &records)?;
        paths.push((data, bench));
    }
    let (heldout, heldout_benchmark) = paths.pop().unwrap();
    let (train, train_benchmark) = paths.pop().unwrap();
    Ok(SynthFiles {
        train,
        heldout,
        train_benchmark,
        heldout_benchmark,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_vqa_generate(1, 9, Split::Train).unwrap();
        let b = synth_vqa_generate(1, 9, Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(a[0].render().bitwise_eq(&b[0].render()));
        assert!(synth_vqa_generate(0, 9, Split::Train).is_err());
    }

    #[test]
    fn answers_in_vocabulary() {
        let vocab = answer_vocabulary();
        for s in synth_vqa_generate(300, 1, Split::Heldout).unwrap() {
            for a in s.conversations().iter().flat_map(|c| c.answers()) {
                assert!(vocab.contains(&a), "{a}");
            }
        }
    }

    #[test]
    fn yes_no_balanced() {
        let samples = synth_vqa_generate(1000, 5, Split::Train).unwrap();
        let yes = samples
            .iter()
            .filter(|s| s.answer(Category::Existence) == "yes")
            .count();
        let ratio = yes as f64 / 1000.0;
        assert!((ratio - 0.5).abs() <= 0.05, "{ratio}");
        let bench: Vec<_> = samples
            .iter()
            .filter(|s| s.benchmark_category() == Category::Existence)
            .collect();
        let yes = bench.iter().filter(|s| s.answer(Category::Existence) == "yes").count();
        assert!((2 * yes as isize - bench.len() as isize).abs() <= 1);
    }

    #[test]
    fn every_question_is_a_first_turn() {
        let s = SynthSample::generate(4, Split::Train, 7);
        let convs = s.conversations();
        assert_eq!(convs.len(), 5);
        let yes = convs.iter().filter(|c| c.answers().next() == Some("yes")).count();
        assert_eq!(yes, 1);
        for c in &convs {
            assert_eq!(c.turns.len(), 2);
            assert!(c.turns[0].text.starts_with(IMAGE_LITERAL));
        }
        let bench = s.benchmark_record().to_conversation().unwrap();
        assert!(convs.iter().any(|c| c.turns == bench.turns));
    }

    #[test]
    fn splits_differ() {
        let t = synth_vqa_generate(50, 3, Split::Train).unwrap();
        let h = synth_vqa_generate(50, 3, Split::Heldout).unwrap();
        assert!(t.iter().all(|a| h.iter().all(|b| a.id != b.id)));
        assert_ne!(
            t.iter().map(|s| (s.color, s.shape, s.quadrant)).collect::<Vec<_>>(),
            h.iter().map(|s| (s.color, s.shape, s.quadrant)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_pixels_have_the_color() {
        let s = SynthSample::generate(0, Split::Train, 0);
        let img = s.render();
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let rgb = COLORS[s.color].1;
        let (ox, oy) = ((s.quadrant % 2) * 16, (s.quadrant / 2) * 16);
        let center = (oy + 8) * IMAGE_SIDE + ox + 8;
        for c in 0..3 {
            assert_eq!(img.data()[c * plane + center], rgb[c] as f32);
        }
    }
}
