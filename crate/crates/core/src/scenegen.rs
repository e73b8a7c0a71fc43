//! Synthetic VQA-with-explanations data: grids of colored shapes, templated
//! questions about attributes, spatial relations and existence, and the
//! symbolic oracle that answers them.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 30],
            Color::Blue => [30, 30, 230],
            Color::Yellow => [230, 230, 30],
        }
    }

    fn parse(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// Order-independent identity used for split disjointness.
    pub fn canonical(&self) -> String {
        let mut objs = self.objects.clone();
        objs.sort();
        let mut s = format!("g{}", self.grid);
        for o in objs {
            s.push_str(&format!(";{},{},{},{}", o.row, o.col, o.shape.word(), o.color.word()));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::Invalid("scene needs at least two objects".into()));
        }
        let mut cells = HashSet::new();
        for o in &self.objects {
            if o.row >= self.grid || o.col >= self.grid {
                return Err(Error::Invalid(format!("object at ({}, {}) is off the grid", o.row, o.col)));
            }
            if !cells.insert((o.row, o.col)) {
                return Err(Error::Invalid(format!("two objects share cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    fn occupied(&self, row: usize, col: usize) -> bool {
        self.objects.iter().any(|o| o.row == row && o.col == col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    /// The wording used in questions.
    fn question_words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// The wording used in explanations.
    fn explanation_words(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `a` stands in this relation to `b` (strict half-planes).
    pub fn holds(self, a: &Object, b: &Object) -> bool {
        match self {
            Relation::LeftOf => a.col < b.col,
            Relation::RightOf => a.col > b.col,
            Relation::Above => a.row < b.row,
            Relation::Below => a.row > b.row,
        }
    }
}

/// The three families mixed by [`DatasetConfig::mix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Attribute,
    Spatial,
    Existence,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Attribute, QuestionType::Spatial, QuestionType::Existence];

    /// Every answer a question of this type can have.
    pub fn answers(self) -> Vec<&'static str> {
        match self {
            QuestionType::Attribute => Color::ALL
                .iter()
                .map(|c| c.word())
                .chain(Shape::ALL.iter().map(|s| s.word()))
                .collect(),
            QuestionType::Spatial => Color::ALL.iter().map(|c| c.word()).collect(),
            QuestionType::Existence => vec!["yes", "no"],
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::Attribute => "attribute",
            QuestionType::Spatial => "spatial",
            QuestionType::Existence => "existence",
        })
    }
}

/// A parsed question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Question {
    ColorOf(Shape),
    ShapeOf(Color),
    Spatial {
        subject: Shape,
        relation: Relation,
        anchor: Shape,
    },
    Exists {
        color: Option<Color>,
        shape: Shape,
    },
}

impl Question {
    pub fn question_type(&self) -> QuestionType {
        match self {
            Question::ColorOf(_) | Question::ShapeOf(_) => QuestionType::Attribute,
            Question::Spatial { .. } => QuestionType::Spatial,
            Question::Exists { .. } => QuestionType::Existence,
        }
    }

    pub fn render(&self) -> String {
        match *self {
            Question::ColorOf(s) => format!("what color is the {}?", s.word()),
            Question::ShapeOf(c) => format!("what shape is the {} object?", c.word()),
            Question::Spatial {
                subject,
                relation,
                anchor,
            } => format!(
                "what color is the {} {} the {}?",
                subject.word(),
                relation.question_words(),
                anchor.word()
            ),
            Question::Exists { color: None, shape } => format!("is there a {}?", shape.word()),
            Question::Exists {
                color: Some(c),
                shape,
            } => format!("is there a {} {}?", c.word(), shape.word()),
        }
    }

    pub fn parse(question: &str) -> Result<Self> {
        let w = text::words(question);
        let w: Vec<&str> = w.iter().map(String::as_str).collect();
        let bad = || Error::Invalid(format!("question outside the grammar: `{question}`"));
        let shape = |s: &str| Shape::parse(s).ok_or_else(bad);
        let color = |s: &str| Color::parse(s).ok_or_else(bad);
        match w.as_slice() {
            ["what", "color", "is", "the", s] => Ok(Question::ColorOf(shape(s)?)),
            ["what", "shape", "is", "the", c, "object"] => Ok(Question::ShapeOf(color(c)?)),
            ["is", "there", "a", s] => Ok(Question::Exists {
                color: None,
                shape: shape(s)?,
            }),
            ["is", "there", "a", c, s] => Ok(Question::Exists {
                color: Some(color(c)?),
                shape: shape(s)?,
            }),
            ["what", "color", "is", "the", s1, rest @ .., "the", s2] => {
                let relation = match rest {
                    ["left", "of"] => Relation::LeftOf,
                    ["right", "of"] => Relation::RightOf,
                    ["above"] => Relation::Above,
                    ["below"] => Relation::Below,
                    _ => return Err(bad()),
                };
                Ok(Question::Spatial {
                    subject: shape(s1)?,
                    relation,
                    anchor: shape(s2)?,
                })
            }
            _ => Err(bad()),
        }
    }

    /// The explanation template instantiated with `answer`, whether or not
    /// `answer` is the true one. Returns `None` for words outside the
    /// question's answer set.
    pub fn explanation_for(&self, answer: &str) -> Option<String> {
        match *self {
            Question::ColorOf(s) => Color::parse(answer).map(|c| format!("the {} is {}", s.word(), c.word())),
            Question::ShapeOf(c) => Shape::parse(answer).map(|s| format!("the {} object is a {}", c.word(), s.word())),
            Question::Spatial {
                subject,
                relation,
                anchor,
            } => Color::parse(answer).map(|c| {
                format!(
                    "the {} {} the {} is {}",
                    subject.word(),
                    relation.explanation_words(),
                    anchor.word(),
                    c.word()
                )
            }),
            Question::Exists { color, shape } => {
                let article = match answer {
                    "yes" => "a",
                    "no" => "no",
                    _ => return None,
                };
                let what = match color {
                    Some(c) => format!("{} {}", c.word(), shape.word()),
                    None => shape.word().to_string(),
                };
                Some(format!("there is {article} {what} in the image"))
            }
        }
    }

    /// Answers that are well-formed for this particular question.
    pub fn answer_set(&self) -> Vec<&'static str> {
        match self {
            Question::ColorOf(_) | Question::Spatial { .. } => Color::ALL.iter().map(|c| c.word()).collect(),
            Question::ShapeOf(_) => Shape::ALL.iter().map(|s| s.word()).collect(),
            Question::Exists { .. } => vec!["yes", "no"],
        }
    }
}

/// Computes `(answer, explanation)` symbolically. Fails when the question is
/// outside the grammar or its referring expression is not unique in `scene`.
pub fn answer_oracle(scene: &Scene, question: &str) -> Result<(String, String)> {
    let q = Question::parse(question)?;
    let ambiguous = || Error::Invalid(format!("`{question}` has no unique referent in the scene"));
    let unique = |pred: &dyn Fn(&Object) -> bool| -> Result<Object> {
        let mut it = scene.objects.iter().filter(|o| pred(o));
        match (it.next(), it.next()) {
            (Some(o), None) => Ok(*o),
            _ => Err(ambiguous()),
        }
    };
    let answer = match q {
        Question::ColorOf(s) => unique(&|o| o.shape == s)?.color.word(),
        Question::ShapeOf(c) => unique(&|o| o.color == c)?.shape.word(),
        Question::Spatial {
            subject,
            relation,
            anchor,
        } => {
            let a = unique(&|o| o.shape == anchor)?;
            unique(&|o| o.shape == subject && relation.holds(o, &a))?.color.word()
        }
        Question::Exists { color, shape } => {
            let found = scene
                .objects
                .iter()
                .any(|o| o.shape == shape && color.is_none_or(|c| o.color == c));
            if found {
                "yes"
            } else {
                "no"
            }
        }
    };
    let explanation = q.explanation_for(answer).ok_or_else(ambiguous)?;
    Ok((answer.to_string(), explanation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

mod image_b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub question: String,
    pub answer: String,
    pub explanation: String,
    /// Raw `H×W×3` bytes, row-major.
    #[serde(with = "image_b64")]
    pub image: Vec<u8>,
    pub scene: Scene,
}

impl Sample {
    pub fn question_type(&self) -> Result<QuestionType> {
        Ok(Question::parse(&self.question)?.question_type())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub grid: usize,
    pub image_size: usize,
    /// Relative weights for attribute / spatial / existence questions.
    pub mix: [f64; 3],
    pub noise_sigma: f64,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 2000,
            val: 300,
            test: 500,
            grid: 4,
            image_size: 32,
            mix: [0.4, 0.4, 0.2],
            noise_sigma: 8.0,
            min_objects: 2,
            max_objects: 5,
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return err("every split needs at least one sample".into());
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return err(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.mix.iter().any(|w| w.is_nan() || *w < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return err(format!("question mix {:?} must be non-negative and not all zero", self.mix));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return err(format!("object count range {}..={} is invalid", self.min_objects, self.max_objects));
        }
        if self.grid < 2 || self.grid * self.grid < self.max_objects {
            return err(format!(
                "a {}x{} grid cannot hold {} objects",
                self.grid, self.grid, self.max_objects
            ));
        }
        if !self.image_size.is_multiple_of(self.grid) || self.image_size / self.grid < 4 {
            return err(format!(
                "image size {} must split into {} cells of at least 4 pixels",
                self.image_size, self.grid
            ));
        }
        Ok(())
    }
}

/// Splits `total` by `weights` with the largest-remainder rule, so every
/// count is within one of its exact share.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

const MAX_ATTEMPTS: usize = 10_000;

struct Builder<'a> {
    cfg: &'a DatasetConfig,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn free_cells(&self, scene: &Scene) -> Vec<(usize, usize)> {
        let g = self.cfg.grid;
        (0..g * g)
            .map(|i| (i / g, i % g))
            .filter(|&(r, c)| !scene.occupied(r, c))
            .collect()
    }

    fn random_free_cell(&mut self, scene: &Scene) -> Option<(usize, usize)> {
        let cells = self.free_cells(scene);
        cells.choose(&mut self.rng).copied()
    }

    fn random_color(&mut self) -> Color {
        Color::ALL[self.rng.random_range(0..Color::ALL.len())]
    }

    fn random_shape(&mut self) -> Shape {
        Shape::ALL[self.rng.random_range(0..Shape::ALL.len())]
    }

    fn target_size(&mut self) -> usize {
        self.rng.random_range(self.cfg.min_objects..=self.cfg.max_objects)
    }

    /// Adds random objects accepted by `allowed` until the scene has `n`.
    fn fill(&mut self, scene: &mut Scene, n: usize, allowed: &dyn Fn(&Scene, &Object) -> bool) -> bool {
        let mut tries = 0;
        while scene.objects.len() < n {
            tries += 1;
            if tries > 200 {
                return false;
            }
            let Some((row, col)) = self.random_free_cell(scene) else { return false };
            let o = Object {
                row,
                col,
                shape: self.random_shape(),
                color: self.random_color(),
            };
            if allowed(scene, &o) {
                scene.objects.push(o);
            }
        }
        true
    }

    fn empty_scene(&self) -> Scene {
        Scene {
            grid: self.cfg.grid,
            objects: Vec::new(),
        }
    }

    fn place(&mut self, scene: &mut Scene, shape: Shape, color: Color) -> Option<Object> {
        let (row, col) = self.random_free_cell(scene)?;
        let o = Object { row, col, shape, color };
        scene.objects.push(o);
        Some(o)
    }

    /// One attempt at a scene + question with the requested answer.
    fn attempt(&mut self, qtype: QuestionType, answer: &str) -> Option<(Scene, Question)> {
        let n = self.target_size();
        let mut scene = self.empty_scene();
        let question = match qtype {
            QuestionType::Attribute => {
                if let Some(color) = Color::parse(answer) {
                    let shape = self.random_shape();
                    self.place(&mut scene, shape, color)?;
                    // Same color on other shapes keeps the shape word necessary.
                    if !self.fill(&mut scene, n, &|_, o| o.shape != shape) {
                        return None;
                    }
                    Question::ColorOf(shape)
                } else {
                    let shape = Shape::parse(answer)?;
                    let color = self.random_color();
                    self.place(&mut scene, shape, color)?;
                    if !self.fill(&mut scene, n, &|_, o| o.color != color) {
                        return None;
                    }
                    Question::ShapeOf(color)
                }
            }
            QuestionType::Spatial => {
                let color = Color::parse(answer)?;
                let anchor_shape = self.random_shape();
                let subject = loop {
                    let s = self.random_shape();
                    if s != anchor_shape {
                        break s;
                    }
                };
                let relation = Relation::ALL[self.rng.random_range(0..4)];
                let anchor_color = self.random_color();
                let anchor = self.place(&mut scene, anchor_shape, anchor_color)?;
                let fits: Vec<(usize, usize)> = self
                    .free_cells(&scene)
                    .into_iter()
                    .filter(|&(row, col)| {
                        let probe = Object {
                            row,
                            col,
                            shape: subject,
                            color,
                        };
                        relation.holds(&probe, &anchor)
                    })
                    .collect();
                let &(row, col) = fits.choose(&mut self.rng)?;
                scene.objects.push(Object {
                    row,
                    col,
                    shape: subject,
                    color,
                });
                // A same-shape distractor on the wrong side, in another color,
                // so the relation has to be grounded.
                if scene.objects.len() < n {
                    let wrong_side: Vec<(usize, usize)> = self
                        .free_cells(&scene)
                        .into_iter()
                        .filter(|&(r, c)| {
                            let probe = Object {
                                row: r,
                                col: c,
                                shape: subject,
                                color,
                            };
                            !relation.holds(&probe, &anchor)
                        })
                        .collect();
                    if let Some(&(r, c)) = wrong_side.choose(&mut self.rng) {
                        let other = loop {
                            let k = self.random_color();
                            if k != color {
                                break k;
                            }
                        };
                        scene.objects.push(Object {
                            row: r,
                            col: c,
                            shape: subject,
                            color: other,
                        });
                    }
                }
                let ok = self.fill(&mut scene, n, &|_, o| {
                    o.shape != anchor_shape && !(o.shape == subject && relation.holds(o, &anchor))
                });
                if !ok {
                    return None;
                }
                Question::Spatial {
                    subject,
                    relation,
                    anchor: anchor_shape,
                }
            }
            QuestionType::Existence => {
                let shape = self.random_shape();
                let color = if self.rng.random_bool(0.5) {
                    Some(self.random_color())
                } else {
                    None
                };
                let matches = move |o: &Object| o.shape == shape && color.is_none_or(|c| o.color == c);
                if answer == "yes" {
                    let c = color.unwrap_or_else(|| self.random_color());
                    self.place(&mut scene, shape, c)?;
                    if !self.fill(&mut scene, n, &|_, _| true) {
                        return None;
                    }
                } else {
                    // Near misses: the shape in another color when asking
                    // about a colored shape.
                    if let Some(c) = color {
                        if self.rng.random_bool(0.5) {
                            let other = Color::ALL.into_iter().find(|k| *k != c)?;
                            self.place(&mut scene, shape, other)?;
                        }
                    }
                    if !self.fill(&mut scene, n, &|_, o| !matches(o)) {
                        return None;
                    }
                }
                Question::Exists { color, shape }
            }
        };
        Some((scene, question))
    }
}

/// Draws each pixel mask of `shape` within a `cell`-sized square.
pub fn shape_mask(shape: Shape, cell: usize) -> Vec<bool> {
    let c = cell as f64;
    let centre = (c - 1.0) / 2.0;
    let mut mask = vec![false; cell * cell];
    for y in 0..cell {
        for x in 0..cell {
            let (fx, fy) = (x as f64, y as f64);
            mask[y * cell + x] = match shape {
                Shape::Square => x >= 1 && y >= 1 && x + 1 < cell && y + 1 < cell,
                Shape::Circle => {
                    let r = c / 2.0 - 0.8;
                    (fx - centre).powi(2) + (fy - centre).powi(2) <= r * r
                }
                Shape::Triangle => {
                    // Apex at the top row, base on the last interior row.
                    let top = 1.0;
                    let bottom = c - 2.0;
                    if fy < top || fy > bottom {
                        false
                    } else {
                        let half = (fy - top + 1.0) / (bottom - top + 1.0) * (c / 2.0 - 1.0);
                        (fx - centre).abs() <= half
                    }
                }
            };
        }
    }
    mask
}

pub const BACKGROUND: u8 = 128;

/// Renders `scene` to `size×size×3` bytes with Gaussian pixel noise.
pub fn render(scene: &Scene, size: usize, sigma: f64, seed: u64) -> Result<Vec<u8>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let cell = size / scene.grid;
    let mut px = vec![BACKGROUND; size * size * 3];
    for o in &scene.objects {
        let mask = shape_mask(o.shape, cell);
        let rgb = o.color.rgb();
        for y in 0..cell {
            for x in 0..cell {
                if mask[y * cell + x] {
                    let at = ((o.row * cell + y) * size + o.col * cell + x) * 3;
                    px[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for p in &mut px {
            let v = *p as f64 + noise.sample(&mut rng);
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(px)
}

/// Deterministic per-sample noise seed.
fn render_seed(dataset_seed: u64, id: u64) -> u64 {
    dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(id.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ 0x94D0_49BB_1331_11EB
}

/// Generates all three splits. Scenes are unique across the whole dataset,
/// answers cycle through each question type's answer set, and the type mix
/// follows the largest-remainder apportionment per split.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut next_id = 0u64;
    for split in Split::ALL {
        let counts = apportion(cfg.count(split), &cfg.mix);
        let mut types: Vec<QuestionType> = QuestionType::ALL
            .iter()
            .zip(&counts)
            .flat_map(|(&t, &c)| std::iter::repeat_n(t, c))
            .collect();
        types.shuffle(&mut b.rng);
        let mut cursor = [0usize; 3];
        for qtype in types {
            let answers = qtype.answers();
            let slot = QuestionType::ALL.iter().position(|&t| t == qtype).unwrap_or(0);
            let answer = answers[cursor[slot] % answers.len()];
            cursor[slot] += 1;
            let mut made = None;
            for _ in 0..MAX_ATTEMPTS {
                if let Some((scene, q)) = b.attempt(qtype, answer) {
                    if seen.insert(scene.canonical()) {
                        made = Some((scene, q));
                        break;
                    }
                }
            }
            let (scene, q) = made.ok_or_else(|| {
                Error::Config(format!(
                    "could not build a fresh {qtype} scene answering `{answer}`; the grid is too small for the requested counts"
                ))
            })?;
            let question = q.render();
            let (a, explanation) = answer_oracle(&scene, &question)?;
            debug_assert_eq!(a, answer);
            let id = next_id;
            next_id += 1;
            let image = render(&scene, cfg.image_size, cfg.noise_sigma, render_seed(cfg.seed, id))?;
            samples.push(Sample {
                id,
                split,
                question,
                answer: a,
                explanation,
                image,
                scene,
            });
        }
    }
    Ok(samples)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Base64 of the raw image bytes, as stored in the dataset file.
pub fn encode_image(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn split_of(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(row: usize, col: usize, shape: Shape, color: Color) -> Object {
        Object { row, col, shape, color }
    }

    #[test]
    fn spatial_oracle_template() {
        let scene = Scene {
            grid: 4,
            objects: vec![obj(1, 0, Shape::Square, Color::Red), obj(1, 2, Shape::Circle, Color::Blue)],
        };
        let (a, e) = answer_oracle(&scene, "what color is the square left of the circle?").unwrap();
        assert_eq!(a, "red");
        assert_eq!(e, "the square to the left of the circle is red");
    }

    #[test]
    fn existence_negative() {
        let scene = Scene {
            grid: 4,
            objects: vec![obj(0, 0, Shape::Square, Color::Red), obj(3, 3, Shape::Circle, Color::Blue)],
        };
        let (a, e) = answer_oracle(&scene, "is there a triangle?").unwrap();
        assert_eq!((a.as_str(), e.as_str()), ("no", "there is no triangle in the image"));
    }

    #[test]
    fn grammar_round_trip() {
        for q in [
            "what color is the circle?",
            "what shape is the green object?",
            "what color is the triangle below the square?",
            "is there a blue circle?",
        ] {
            assert_eq!(Question::parse(q).unwrap().render(), q);
        }
        assert!(Question::parse("how many squares?").is_err());
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(100, &[0.4, 0.4, 0.2]), vec![40, 40, 20]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn grid_too_small_is_rejected() {
        let cfg = DatasetConfig {
            grid: 2,
            max_objects: 5,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }
}
