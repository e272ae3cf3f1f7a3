//! Synthetic compositional image/caption corpus.
//!
//! Every group is one image plus several captions, all describing the same
//! attribute tuple (count, color, shape, background), and every group is a
//! distinct tuple, so groups double as class labels. Held-out splits use
//! tuples never seen in training: retrieval on them measures compositional
//! generalization rather than memorization.

pub mod ppm;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::text::tokenize;

/// Geometric glyph kinds the renderer knows how to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

/// One attribute value with its caption synonyms.
#[derive(Debug, Clone)]
pub struct ColorValue {
    pub name: &'static str,
    pub synonyms: Vec<&'static str>,
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct ShapeValue {
    pub name: &'static str,
    pub synonyms: Vec<&'static str>,
    pub kind: ShapeKind,
}

#[derive(Debug, Clone)]
pub struct CountValue {
    pub n: usize,
    pub synonyms: Vec<&'static str>,
}

/// The attribute grammar: caption words and pixels for every dimension.
/// Word sets of different dimensions are disjoint so a caption can be
/// re-parsed into exactly one tuple.
#[derive(Debug, Clone)]
pub struct AttributeGrammar {
    pub colors: Vec<ColorValue>,
    pub shapes: Vec<ShapeValue>,
    pub counts: Vec<CountValue>,
    pub backgrounds: Vec<ColorValue>,
}

impl AttributeGrammar {
    pub fn desk_default() -> Self {
        AttributeGrammar {
            colors: vec![
                ColorValue { name: "red", synonyms: vec!["red", "crimson", "scarlet"], rgb: [220, 40, 40] },
                ColorValue { name: "blue", synonyms: vec!["blue", "azure", "cobalt"], rgb: [40, 70, 220] },
                ColorValue { name: "green", synonyms: vec!["green", "emerald", "jade"], rgb: [40, 180, 70] },
                ColorValue { name: "yellow", synonyms: vec!["yellow", "gold", "amber"], rgb: [230, 210, 50] },
                ColorValue { name: "purple", synonyms: vec!["purple", "violet", "mauve"], rgb: [160, 60, 200] },
                ColorValue { name: "orange", synonyms: vec!["orange", "tangerine", "apricot"], rgb: [240, 140, 40] },
            ],
            shapes: vec![
                ShapeValue { name: "circle", synonyms: vec!["circle", "disc", "dot"], kind: ShapeKind::Circle },
                ShapeValue { name: "square", synonyms: vec!["square", "box", "block"], kind: ShapeKind::Square },
                ShapeValue { name: "triangle", synonyms: vec!["triangle", "wedge"], kind: ShapeKind::Triangle },
                ShapeValue { name: "diamond", synonyms: vec!["diamond", "rhombus", "gem"], kind: ShapeKind::Diamond },
            ],
            counts: vec![
                CountValue { n: 1, synonyms: vec!["one", "single", "lone"] },
                CountValue { n: 2, synonyms: vec!["two", "pair", "couple"] },
                CountValue { n: 3, synonyms: vec!["three", "trio", "triple"] },
            ],
            backgrounds: vec![
                ColorValue { name: "gray", synonyms: vec!["gray", "grey", "slate"], rgb: [128, 128, 128] },
                ColorValue { name: "white", synonyms: vec!["white", "pale", "snowy"], rgb: [235, 235, 235] },
                ColorValue { name: "black", synonyms: vec!["black", "dark", "charcoal"], rgb: [25, 25, 25] },
            ],
        }
    }

    /// Shrink each dimension, keeping the leading values.
    pub fn truncated(mut self, colors: usize, shapes: usize, counts: usize, backgrounds: usize) -> Self {
        self.colors.truncate(colors);
        self.shapes.truncate(shapes);
        self.counts.truncate(counts);
        self.backgrounds.truncate(backgrounds);
        self
    }

    pub fn capacity(&self) -> usize {
        self.colors.len() * self.shapes.len() * self.counts.len() * self.backgrounds.len()
    }
}

/// Indices into the grammar's four dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttrTuple {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
    pub background: usize,
}

/// Re-parse a caption into its attribute tuple. Errors unless every
/// dimension is mentioned exactly once.
pub fn parse_caption(caption: &str, grammar: &AttributeGrammar) -> Result<AttrTuple> {
    let tokens = tokenize(caption);
    let match_one = |dim: &str, hits: Vec<usize>| -> Result<usize> {
        let mut distinct = hits;
        distinct.sort_unstable();
        distinct.dedup();
        match distinct.len() {
            1 => Ok(distinct[0]),
            0 => Err(Error::Data(format!("caption {caption:?} mentions no {dim}"))),
            _ => Err(Error::Data(format!("caption {caption:?} mentions several {dim}s"))),
        }
    };
    let color_hits: Vec<usize> = tokens
        .iter()
        .filter_map(|t| {
            grammar.colors.iter().position(|c| c.synonyms.iter().any(|s| s == t))
        })
        .collect();
    let shape_hits: Vec<usize> = tokens
        .iter()
        .filter_map(|t| {
            grammar.shapes.iter().position(|sh| {
                sh.synonyms.iter().any(|s| *s == t.as_str() || pluralize(s) == *t)
            })
        })
        .collect();
    let count_hits: Vec<usize> = tokens
        .iter()
        .filter_map(|t| {
            grammar.counts.iter().position(|c| c.synonyms.iter().any(|s| s == t))
        })
        .collect();
    let bg_hits: Vec<usize> = tokens
        .iter()
        .filter_map(|t| {
            grammar.backgrounds.iter().position(|b| b.synonyms.iter().any(|s| s == t))
        })
        .collect();
    Ok(AttrTuple {
        color: match_one("color", color_hits)?,
        shape: match_one("shape", shape_hits)?,
        count: match_one("count", count_hits)?,
        background: match_one("background", bg_hits)?,
    })
}

fn pluralize(word: &str) -> String {
    if word.ends_with('s') || word.ends_with('x') || word.ends_with("ch") || word.ends_with("sh") {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

const CAPTION_TEMPLATES: usize = 6;

fn realize_caption(
    grammar: &AttributeGrammar,
    tuple: AttrTuple,
    template: usize,
    color_syn: usize,
    shape_syn: usize,
    count_syn: usize,
    bg_syn: usize,
) -> String {
    let color = grammar.colors[tuple.color].synonyms[color_syn];
    let shape_word = grammar.shapes[tuple.shape].synonyms[shape_syn];
    let count = &grammar.counts[tuple.count];
    let count_word = count.synonyms[count_syn];
    let bg = grammar.backgrounds[tuple.background].synonyms[bg_syn];
    let shape = if count.n == 1 { shape_word.to_string() } else { pluralize(shape_word) };
    // Collective nouns read as "a pair of", bare numerals as "two".
    let count_phrase = match count_word {
        "pair" | "couple" | "trio" | "triple" => format!("a {count_word} of"),
        "single" | "lone" => format!("a {count_word}"),
        w => w.to_string(),
    };
    match template {
        0 => format!("{count_phrase} {color} {shape} on a {bg} background"),
        1 => format!("a photo of {count_phrase} {color} {shape} against a {bg} backdrop"),
        2 => format!("{count_phrase} {shape} in {color} over a {bg} field"),
        3 => format!("the picture shows {count_phrase} {color} {shape} on a {bg} canvas"),
        4 => format!("{count_phrase} {color} {shape} floating on a {bg} scene"),
        _ => format!("an image with {count_phrase} {color} {shape} upon a {bg} surface"),
    }
}

// Multi-glyph layouts are horizontally asymmetric so flipping produces a
// genuinely different view; a lone glyph sits centered.
fn glyph_layout(count: usize, s: f64) -> Vec<(f64, f64, f64)> {
    match count {
        1 => vec![(0.50 * s, 0.50 * s, 0.32 * s)],
        2 => vec![(0.28 * s, 0.42 * s, 0.20 * s), (0.72 * s, 0.60 * s, 0.20 * s)],
        _ => vec![
            (0.26 * s, 0.28 * s, 0.18 * s),
            (0.72 * s, 0.36 * s, 0.18 * s),
            (0.46 * s, 0.72 * s, 0.18 * s),
        ],
    }
}

fn inside(kind: ShapeKind, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Triangle => {
            let from_top = py - (cy - r);
            from_top >= 0.0 && from_top <= 2.0 * r && dx.abs() <= from_top / 2.0
        }
        ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
    }
}

/// Render a tuple as colored glyphs on a filled background. Values are
/// exact multiples of 1/255 so the PPM round trip is lossless.
pub fn render_image(grammar: &AttributeGrammar, tuple: AttrTuple, size: usize) -> Tensor {
    let color = grammar.colors[tuple.color].rgb;
    let bg = grammar.backgrounds[tuple.background].rgb;
    let kind = grammar.shapes[tuple.shape].kind;
    let count = grammar.counts[tuple.count].n;
    let layout = glyph_layout(count, size as f64);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = layout.iter().any(|&(cx, cy, r)| inside(kind, px, py, cx, cy, r));
            let rgb = if hit { color } else { bg };
            for c in 0..3 {
                data[(c * size + y) * size + x] = f64::from(rgb[c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("rendered image is finite")
}

/// One image with its captions; the whole group is one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextGroup {
    pub group_id: usize,
    pub image: Tensor,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (want train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Generation record kept alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenInfo {
    pub seed: u64,
    pub sizes: SplitSizes,
    pub captions_per_group: usize,
    pub image_size: usize,
    /// Attribute tuple per global group id (not persisted; rebuilt by
    /// regenerating with the recorded seed).
    pub tuples: Vec<AttrTuple>,
}

/// Train/val/test groups. Splits are disjoint by group id and train ids
/// form the contiguous range `[0, train.len())`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageTextGroup>,
    pub val: Vec<ImageTextGroup>,
    pub test: Vec<ImageTextGroup>,
    pub gen: Option<GenInfo>,
}

// Equality is over the data content; generation metadata is advisory and
// not fully persisted.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.train == other.train && self.val == other.val && self.test == other.test
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageTextGroup] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_train_classes(&self) -> usize {
        self.train.len()
    }

    pub fn all_groups(&self) -> impl Iterator<Item = (&ImageTextGroup, Split)> {
        self.train
            .iter()
            .map(|g| (g, Split::Train))
            .chain(self.val.iter().map(|g| (g, Split::Val)))
            .chain(self.test.iter().map(|g| (g, Split::Test)))
    }
}

/// Generate a corpus: every group gets a unique attribute tuple, a rendered
/// image and `captions_per_group` pairwise-distinct captions.
pub fn generate_corpus(
    grammar: &AttributeGrammar,
    sizes: SplitSizes,
    captions_per_group: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let total = sizes.total();
    if total == 0 {
        return Err(Error::Parameter("requested an empty dataset".into()));
    }
    if captions_per_group == 0 {
        return Err(Error::Parameter("captions_per_group must be at least 1".into()));
    }
    if total > grammar.capacity() {
        return Err(Error::Capacity(format!(
            "requested {total} groups but the grammar only has {} attribute tuples",
            grammar.capacity()
        )));
    }

    let mut tuples = Vec::with_capacity(grammar.capacity());
    for color in 0..grammar.colors.len() {
        for shape in 0..grammar.shapes.len() {
            for count in 0..grammar.counts.len() {
                for background in 0..grammar.backgrounds.len() {
                    tuples.push(AttrTuple { color, shape, count, background });
                }
            }
        }
    }
    let mut rng = stream_rng(seed, "corpus-tuples");
    tuples.shuffle(&mut rng);
    tuples.truncate(total);

    let mut groups = Vec::with_capacity(total);
    for (group_id, &tuple) in tuples.iter().enumerate() {
        let image = render_image(grammar, tuple, image_size);
        let captions = make_captions(grammar, tuple, captions_per_group, seed, group_id as u64)?;
        groups.push(ImageTextGroup { group_id, image, captions });
    }

    let val_groups = groups.split_off(sizes.train + sizes.val);
    let mid = groups.split_off(sizes.train);
    Ok(Dataset {
        train: groups,
        val: mid,
        test: val_groups,
        gen: Some(GenInfo {
            seed,
            sizes,
            captions_per_group,
            image_size,
            tuples,
        }),
    })
}

fn make_captions(
    grammar: &AttributeGrammar,
    tuple: AttrTuple,
    k: usize,
    seed: u64,
    group: u64,
) -> Result<Vec<String>> {
    let mut rng = stream_rng(seed ^ (group << 20), "corpus-captions");
    let mut captions = Vec::with_capacity(k);
    let mut attempts = 0;
    while captions.len() < k {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Capacity(format!(
                "could not realize {k} distinct captions for one group"
            )));
        }
        let caption = realize_caption(
            grammar,
            tuple,
            rng.gen_range(0..CAPTION_TEMPLATES),
            rng.gen_range(0..grammar.colors[tuple.color].synonyms.len()),
            rng.gen_range(0..grammar.shapes[tuple.shape].synonyms.len()),
            rng.gen_range(0..grammar.counts[tuple.count].synonyms.len()),
            rng.gen_range(0..grammar.backgrounds[tuple.background].synonyms.len()),
        );
        if !captions.contains(&caption) {
            captions.push(caption);
        }
    }
    Ok(captions)
}

/// Image augmentation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugMode {
    /// Horizontal flip with probability one half.
    Train,
    /// Deterministic flip.
    EvalFlip,
    /// Identity.
    EvalNoFlip,
}

/// Mirror a `[C, H, W]` image along its width axis.
pub fn hflip(image: &Tensor) -> Tensor {
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(shape, data).expect("flip preserves shape")
}

pub fn augment_image(image: &Tensor, rng: &mut ChaCha8Rng, mode: AugMode) -> Tensor {
    match mode {
        AugMode::Train => {
            if rng.gen::<f64>() < 0.5 {
                hflip(image)
            } else {
                image.clone()
            }
        }
        AugMode::EvalFlip => hflip(image),
        AugMode::EvalNoFlip => image.clone(),
    }
}

/// Write the corpus directory: `images/<group_id>.ppm`, `captions.tsv`,
/// `splits.tsv` and a `spec.txt` generation record.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;
    let mut captions = String::new();
    let mut splits = String::new();
    for (group, split) in dataset.all_groups() {
        ppm::save_ppm(&images.join(format!("{}.ppm", group.group_id)), &group.image)?;
        for caption in &group.captions {
            writeln!(captions, "{}\t{}", group.group_id, caption).expect("string write");
        }
        writeln!(splits, "{}\t{}", group.group_id, split.name()).expect("string write");
    }
    std::fs::write(root.join("captions.tsv"), captions)?;
    std::fs::write(root.join("splits.tsv"), splits)?;
    let mut spec = String::new();
    if let Some(gen) = &dataset.gen {
        writeln!(spec, "seed={}", gen.seed).expect("string write");
        writeln!(spec, "train={}", gen.sizes.train).expect("string write");
        writeln!(spec, "val={}", gen.sizes.val).expect("string write");
        writeln!(spec, "test={}", gen.sizes.test).expect("string write");
        writeln!(spec, "captions_per_group={}", gen.captions_per_group).expect("string write");
        writeln!(spec, "image_size={}", gen.image_size).expect("string write");
        writeln!(spec, "grammar=builtin-v1").expect("string write");
    }
    std::fs::write(root.join("spec.txt"), spec)?;
    Ok(())
}

/// Load a corpus directory written by [`save_dataset`] (or assembled by
/// hand in the same layout).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let splits_path = root.join("splits.tsv");
    let split_text = std::fs::read_to_string(&splits_path)?;
    let mut split_of: Vec<(usize, Split)> = Vec::new();
    for (lineno, line) in split_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, split) = line.split_once('\t').ok_or(Error::Parse {
            line: lineno + 1,
            msg: format!("splits.tsv: expected group_id<TAB>split, got {line:?}"),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("splits.tsv: bad group id {id:?}"),
        })?;
        let split = Split::parse(split).map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("splits.tsv: bad split name {split:?}"),
        })?;
        split_of.push((id, split));
    }
    if split_of.is_empty() {
        return Err(Error::Data(format!("{} lists no groups", splits_path.display())));
    }

    let captions_path = root.join("captions.tsv");
    let caption_text = std::fs::read_to_string(&captions_path)?;
    let mut captions: HashMap<usize, Vec<String>> = HashMap::new();
    let mut any_caption = false;
    for (lineno, line) in caption_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or(Error::Parse {
            line: lineno + 1,
            msg: format!("captions.tsv: expected group_id<TAB>caption, got {line:?}"),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("captions.tsv: bad group id {id:?}"),
        })?;
        captions.entry(id).or_default().push(caption.to_string());
        any_caption = true;
    }
    if !any_caption {
        return Err(Error::Data(format!("{} holds no captions", captions_path.display())));
    }

    let mut dataset = Dataset { train: Vec::new(), val: Vec::new(), test: Vec::new(), gen: None };
    split_of.sort_by_key(|(id, _)| *id);
    for (id, split) in split_of {
        let image_path = root.join("images").join(format!("{id}.ppm"));
        if !image_path.exists() {
            return Err(Error::Data(format!(
                "group {id} has captions but no image file {}",
                image_path.display()
            )));
        }
        let image = ppm::load_ppm(&image_path)?;
        let caps = captions.remove(&id).ok_or_else(|| {
            Error::Data(format!("group {id} appears in splits.tsv but has no captions"))
        })?;
        let group = ImageTextGroup { group_id: id, image, captions: caps };
        match split {
            Split::Train => dataset.train.push(group),
            Split::Val => dataset.val.push(group),
            Split::Test => dataset.test.push(group),
        }
    }
    if let Some(orphan) = captions.keys().next() {
        return Err(Error::Data(format!(
            "group {orphan} has captions but no entry in splits.tsv"
        )));
    }
    Ok(dataset)
}
