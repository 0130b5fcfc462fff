use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocabulary::ClassVocabulary;
use crate::{rng, Error, Latent, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { top, left, height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.top..self.top + self.height).contains(&i) && (self.left..self.left + self.width).contains(&j)
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.top < o.top + o.height && o.top < self.top + self.height && self.left < o.left + o.width && o.left < self.left + self.width
    }

    fn fits(&self, (h, w): (usize, usize)) -> bool {
        self.top + self.height <= h && self.left + self.width <= w
    }
}

/// What a rectangle is painted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paint {
    Class(usize),
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub paint: Paint,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    None,
    SmallSize,
    Occlusion,
    MultiObject,
    RareClass,
}

impl BiasMode {
    pub const ALL: [BiasMode; 5] = [
        BiasMode::None,
        BiasMode::SmallSize,
        BiasMode::Occlusion,
        BiasMode::MultiObject,
        BiasMode::RareClass,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BiasMode::None => "none",
            BiasMode::SmallSize => "small-size",
            BiasMode::Occlusion => "occlusion",
            BiasMode::MultiObject => "multi-object",
            BiasMode::RareClass => "rare-class",
        }
    }

    /// Magnitude used when a bias suite is generated.
    pub fn default_magnitude(&self) -> f64 {
        match self {
            BiasMode::None => 0.0,
            BiasMode::SmallSize | BiasMode::Occlusion => 0.5,
            BiasMode::MultiObject | BiasMode::RareClass => 1.0,
        }
    }
}

impl std::fmt::Display for BiasMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BiasMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bias mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub mode: BiasMode,
    pub magnitude: f64,
}

impl BiasSpec {
    pub const NONE: BiasSpec = BiasSpec {
        mode: BiasMode::None,
        magnitude: 0.0,
    };

    pub fn new(mode: BiasMode, magnitude: f64) -> Self {
        Self { mode, magnitude }
    }

    fn is_active(&self) -> bool {
        self.mode != BiasMode::None && self.magnitude > 0.0
    }
}

/// Everything a scene is regenerated from. The first placement is the bias
/// target; the second, when present, is its companion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub grid: (usize, usize),
    pub placements: Vec<Placement>,
    pub bias: BiasSpec,
    pub seed: u64,
    pub texture_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "class")]
pub enum TokenKind {
    Filler,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionToken {
    pub text: String,
    pub kind: TokenKind,
}

/// Token sequence of a caption like `a photo of cat, hot dog`, with the token
/// positions owned by each class phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<CaptionToken>,
    pub classes: Vec<usize>,
    pub spans: Vec<Vec<usize>>,
}

impl Caption {
    pub fn for_classes(vocab: &ClassVocabulary, classes: &[usize]) -> Result<Self> {
        let mut tokens: Vec<CaptionToken> = ["a", "photo", "of"]
            .into_iter()
            .map(|t| CaptionToken {
                text: t.into(),
                kind: TokenKind::Filler,
            })
            .collect();
        let mut spans = Vec::with_capacity(classes.len());
        for &c in classes {
            let entry = vocab.entry(c)?;
            let start = tokens.len();
            tokens.extend(entry.tokens().map(|t| CaptionToken {
                text: t.into(),
                kind: TokenKind::Class(c),
            }));
            spans.push((start..tokens.len()).collect());
        }
        Ok(Self {
            tokens,
            classes: classes.to_vec(),
            spans,
        })
    }

    /// Parses `<fillers> <phrase>, <phrase>, ...`. Leading filler words are
    /// taken as such; everything after them is a comma-separated list of
    /// class phrases that must each name a vocabulary entry.
    pub fn parse(vocab: &ClassVocabulary, text: &str) -> Result<Self> {
        let mut rest = text.trim();
        let mut tokens = Vec::new();
        while let Some(word) = rest.split_whitespace().next() {
            if !vocab.is_filler(word) {
                break;
            }
            tokens.push(CaptionToken {
                text: word.into(),
                kind: TokenKind::Filler,
            });
            rest = rest[rest.find(word).expect("word taken from rest") + word.len()..].trim_start();
        }
        let mut classes = Vec::new();
        let mut spans = Vec::new();
        for phrase in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let id = vocab.lookup(phrase)?;
            let start = tokens.len();
            tokens.extend(phrase.split_whitespace().map(|t| CaptionToken {
                text: t.into(),
                kind: TokenKind::Class(id),
            }));
            classes.push(id);
            spans.push((start..tokens.len()).collect());
        }
        if classes.is_empty() {
            return Err(Error::Vocabulary(format!("caption `{text}` names no class")));
        }
        Ok(Self { tokens, classes, spans })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        let mut last: Option<TokenKind> = None;
        for tok in &self.tokens {
            if let Some(prev) = last {
                if matches!(prev, TokenKind::Class(_)) && prev != tok.kind {
                    out.push(',');
                }
                out.push(' ');
            }
            out.push_str(&tok.text);
            last = Some(tok.kind);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub latent: Latent,
    /// Candidate classes as vocabulary ids.
    pub classes: Vec<usize>,
    pub caption: Caption,
    pub gt_masks: Vec<Array2<bool>>,
    pub background_mask: Array2<bool>,
}

impl Scene {
    pub fn grid(&self) -> (usize, usize) {
        self.spec.grid
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Label map: 0 is background, `i + 1` the i-th candidate class.
    pub fn label_map(&self) -> Array2<usize> {
        let mut labels = Array2::zeros(self.background_mask.dim());
        for (i, m) in self.gt_masks.iter().enumerate() {
            labels.zip_mut_with(m, |l, &on| {
                if on {
                    *l = i + 1;
                }
            });
        }
        labels
    }
}

fn candidate_classes(placements: &[Placement]) -> Vec<usize> {
    let mut classes = Vec::new();
    for p in placements {
        if let Paint::Class(c) = p.paint {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    classes
}

/// Places `count` squares of side `side` on free cells, avoiding every existing rectangle.
fn place_distractors(grid: (usize, usize), taken: &[Rect], count: usize, side: usize, seed: u64) -> Result<Vec<Rect>> {
    let mut r = rng::rng(seed, 0x6469_7374);
    let mut taken = taken.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let free: Vec<Rect> = (0..=grid.0.saturating_sub(side))
            .flat_map(|i| (0..=grid.1.saturating_sub(side)).map(move |j| Rect::new(i, j, side, side)))
            .filter(|c| c.fits(grid) && taken.iter().all(|t| !t.intersects(c)))
            .collect();
        if free.is_empty() {
            return Err(Error::Scene(format!("no free cell for a {side}×{side} distractor")));
        }
        let pick = free[r.random_range(0..free.len())];
        taken.push(pick);
        out.push(pick);
    }
    Ok(out)
}

/// Placements after the bias operation, in paint order.
pub fn biased_placements(spec: &SceneSpec, vocab: &ClassVocabulary) -> Result<Vec<Placement>> {
    let mut placements = spec.placements.clone();
    if placements.is_empty() {
        return Err(Error::Scene(format!("scene `{}` has no placements", spec.name)));
    }
    let m = spec.bias.magnitude;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Scene(format!("bias magnitude {m} outside [0, 1]")));
    }
    if !spec.bias.is_active() {
        return Ok(placements);
    }
    let target = placements[0];
    let companion = placements.get(1).map(|p| p.paint);
    match spec.bias.mode {
        BiasMode::None => {}
        BiasMode::SmallSize => {
            let r = target.rect;
            let h = (r.height as f64 * (1.0 - m)).round() as usize;
            let w = (r.width as f64 * (1.0 - m)).round() as usize;
            if h == 0 || w == 0 {
                return Err(Error::Scene(format!(
                    "small-size magnitude {m} shrinks a {}×{} rectangle to nothing",
                    r.height, r.width
                )));
            }
            placements[0].rect = Rect::new(r.top + (r.height - h) / 2, r.left + (r.width - w) / 2, h, w);
        }
        BiasMode::Occlusion => {
            let r = target.rect;
            let cols = (r.width as f64 * m).round() as usize;
            if cols > 0 {
                placements.push(Placement {
                    paint: companion.unwrap_or(Paint::Background),
                    rect: Rect::new(r.top, r.left + r.width - cols, r.height, cols),
                });
            }
        }
        BiasMode::MultiObject => {
            let count = ((3.0 * m).round() as usize).max(1);
            let taken: Vec<Rect> = placements.iter().map(|p| p.rect).collect();
            let paint = companion.unwrap_or(target.paint);
            for rect in place_distractors(spec.grid, &taken, count, 3, spec.seed)? {
                placements.push(Placement { paint, rect });
            }
        }
        BiasMode::RareClass => {
            let Paint::Class(current) = target.paint else {
                return Err(Error::Scene("rare-class bias needs a class target".into()));
            };
            if !vocab.entry(current)?.is_rare() {
                let others = candidate_classes(&placements);
                let rare: Vec<usize> = vocab.rare_ids().into_iter().filter(|c| !others.contains(c)).collect();
                if rare.is_empty() {
                    return Err(Error::Vocabulary("vocabulary has no rare class to swap in".into()));
                }
                let pick = rare[rng::rng(spec.seed, 0x7261_7265).random_range(0..rare.len())];
                for p in placements.iter_mut() {
                    if p.paint == Paint::Class(current) {
                        p.paint = Paint::Class(pick);
                    }
                }
            }
        }
    }
    Ok(placements)
}

pub fn generate_scene(spec: &SceneSpec, vocab: &ClassVocabulary) -> Result<Scene> {
    let (h, w) = spec.grid;
    if h == 0 || w == 0 {
        return Err(Error::Scene("grid must be non-empty".into()));
    }
    if !(spec.texture_std >= 0.0 && spec.texture_std.is_finite()) {
        return Err(Error::Scene(format!("texture std {} is invalid", spec.texture_std)));
    }
    for p in &spec.placements {
        if p.rect.area() == 0 || !p.rect.fits(spec.grid) {
            return Err(Error::Scene(format!("rectangle {:?} does not lie inside the {h}×{w} grid", p.rect)));
        }
        if let Paint::Class(c) = p.paint {
            vocab.entry(c)?;
        }
    }
    let placements = biased_placements(spec, vocab)?;
    let classes = candidate_classes(&placements);
    if classes.is_empty() {
        return Err(Error::Scene(format!("scene `{}` has no classes", spec.name)));
    }

    // later placements win
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for p in &placements {
        let id = match p.paint {
            Paint::Class(c) => Some(c),
            Paint::Background => None,
        };
        for i in p.rect.top..p.rect.top + p.rect.height {
            for j in p.rect.left..p.rect.left + p.rect.width {
                owner[(i, j)] = id;
            }
        }
    }

    let d = vocab.dim;
    // texture is drawn over the whole grid so it does not depend on geometry
    let texture = rng::standard_normals(&mut rng::rng(spec.seed, 0x7465_7874), h * w * d);
    let latent = Latent::from_shape_fn((h, w, d), |(i, j, k)| {
        let base = match owner[(i, j)] {
            Some(c) => vocab.entries[c].embedding[k],
            None => vocab.background[k],
        };
        base + spec.texture_std * texture[(i * w + j) * d + k]
    });
    let gt_masks = classes.iter().map(|&c| owner.mapv(|o| o == Some(c))).collect();
    let background_mask = owner.mapv(|o| o.is_none());
    let caption = Caption::for_classes(vocab, &classes)?;
    Ok(Scene {
        spec: spec.clone(),
        latent,
        classes,
        caption,
        gt_masks,
        background_mask,
    })
}

pub const DEFAULT_GRID: (usize, usize) = (16, 16);
pub const DEFAULT_TEXTURE_STD: f64 = 0.05;

/// A random two-object base scene: two equal-size rectangles of distinct
/// common classes, one in each half of the grid.
pub fn base_scene_spec(vocab: &ClassVocabulary, index: usize, data_seed: u64) -> Result<SceneSpec> {
    let (h, w) = DEFAULT_GRID;
    let seed = rng::mix(data_seed, index as u64);
    let mut r = rng::rng(seed, 0x6261_7365);
    let common = vocab.common_ids();
    if common.len() < 2 {
        return Err(Error::Vocabulary("need at least two common classes".into()));
    }
    let a = common[r.random_range(0..common.len())];
    let b = loop {
        let c = common[r.random_range(0..common.len())];
        if c != a {
            break c;
        }
    };
    let rh = r.random_range(6..=9);
    let rw = r.random_range(5..=7);
    let half = w / 2;
    let target_left_half = r.random_bool(0.5);
    let mut rect_in = |left_half: bool| {
        let start = if left_half { 0 } else { half };
        Rect::new(r.random_range(0..=h - rh), start + r.random_range(0..=half - rw), rh, rw)
    };
    let ra = rect_in(target_left_half);
    let rb = rect_in(!target_left_half);
    Ok(SceneSpec {
        name: format!("scene{index:03}"),
        grid: DEFAULT_GRID,
        placements: vec![
            Placement {
                paint: Paint::Class(a),
                rect: ra,
            },
            Placement {
                paint: Paint::Class(b),
                rect: rb,
            },
        ],
        bias: BiasSpec::NONE,
        seed,
        texture_std: DEFAULT_TEXTURE_STD,
    })
}

/// The five variants (unbiased plus one per bias mode) of a base scene.
pub fn bias_variants(base: &SceneSpec) -> Vec<SceneSpec> {
    BiasMode::ALL
        .into_iter()
        .map(|mode| SceneSpec {
            name: format!("{}_{}", base.name, mode.name()),
            bias: BiasSpec::new(mode, mode.default_magnitude()),
            ..base.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyscene::vocabulary::{DEFAULT_DIM, DEFAULT_RARITY};

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::standard(DEFAULT_DIM, DEFAULT_RARITY, 0).unwrap()
    }

    fn single(bias: BiasSpec) -> SceneSpec {
        SceneSpec {
            name: "s".into(),
            grid: (16, 16),
            placements: vec![Placement {
                paint: Paint::Class(0),
                rect: Rect::new(2, 3, 4, 4),
            }],
            bias,
            seed: 5,
            texture_std: 0.05,
        }
    }

    #[test]
    fn single_rectangle_mask() {
        let s = generate_scene(&single(BiasSpec::NONE), &vocab()).unwrap();
        assert_eq!(s.gt_masks[0].iter().filter(|&&b| b).count(), 16);
        assert_eq!(s.background_mask.iter().filter(|&&b| b).count(), 256 - 16);
        assert_eq!(s.caption.text(), "a photo of cat");
    }

    #[test]
    fn half_occlusion_leaves_half() {
        let s = generate_scene(&single(BiasSpec::new(BiasMode::Occlusion, 0.5)), &vocab()).unwrap();
        assert_eq!(s.gt_masks[0].iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn zero_magnitude_is_unbiased() {
        let v = vocab();
        let base = base_scene_spec(&v, 3, 11).unwrap();
        let plain = generate_scene(&base, &v).unwrap();
        for mode in BiasMode::ALL {
            let spec = SceneSpec {
                bias: BiasSpec::new(mode, 0.0),
                ..base.clone()
            };
            let s = generate_scene(&spec, &v).unwrap();
            assert_eq!(s.latent, plain.latent);
            assert_eq!(s.gt_masks, plain.gt_masks);
            assert_eq!(s.classes, plain.classes);
        }
    }

    #[test]
    fn degenerate_small_size_is_rejected() {
        assert!(matches!(
            generate_scene(&single(BiasSpec::new(BiasMode::SmallSize, 1.0)), &vocab()),
            Err(Error::Scene(_))
        ));
    }

    #[test]
    fn masks_partition_the_grid() {
        let v = vocab();
        for i in 0..20 {
            for spec in bias_variants(&base_scene_spec(&v, i, 1).unwrap()) {
                let s = generate_scene(&spec, &v).unwrap();
                for (i, j) in itertools_product(16, 16) {
                    let owners = s.gt_masks.iter().filter(|m| m[(i, j)]).count() + usize::from(s.background_mask[(i, j)]);
                    assert_eq!(owners, 1);
                }
                assert_eq!(s.caption.spans.len(), s.classes.len());
                assert!(s.caption.spans.iter().all(|sp| !sp.is_empty()));
            }
        }
    }

    fn itertools_product(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..h).flat_map(move |i| (0..w).map(move |j| (i, j)))
    }

    #[test]
    fn rare_variant_swaps_target() {
        let v = vocab();
        let base = base_scene_spec(&v, 0, 2).unwrap();
        let spec = &bias_variants(&base)[4];
        let s = generate_scene(spec, &v).unwrap();
        assert!(v.entries[s.classes[0]].is_rare());
        assert!(!v.entries[s.classes[1]].is_rare());
    }

    #[test]
    fn multi_object_adds_companion_copies() {
        let v = vocab();
        let base = base_scene_spec(&v, 4, 9).unwrap();
        let plain = generate_scene(&base, &v).unwrap();
        let multi = generate_scene(&bias_variants(&base)[3], &v).unwrap();
        let count = |s: &Scene, k: usize| s.gt_masks[k].iter().filter(|&&b| b).count();
        assert_eq!(count(&multi, 0), count(&plain, 0));
        assert_eq!(count(&multi, 1), count(&plain, 1) + 27);
    }

    #[test]
    fn generation_is_deterministic() {
        let v = vocab();
        let spec = base_scene_spec(&v, 7, 3).unwrap();
        assert_eq!(generate_scene(&spec, &v).unwrap(), generate_scene(&spec, &v).unwrap());
    }

    #[test]
    fn caption_parsing() {
        let v = vocab();
        let c = Caption::parse(&v, "a photo of cat, hot dog").unwrap();
        assert_eq!(c.classes, vec![0, 4]);
        assert_eq!(c.spans, vec![vec![3], vec![4, 5]]);
        assert_eq!(c.text(), "a photo of cat, hot dog");
        assert_eq!(c, Caption::for_classes(&v, &[0, 4]).unwrap());
        assert!(matches!(Caption::parse(&v, "a photo of unicorn"), Err(Error::Vocabulary(_))));
        assert!(Caption::parse(&v, "a photo of").is_err());
    }

    #[test]
    fn out_of_grid_rectangles_rejected() {
        let mut spec = single(BiasSpec::NONE);
        spec.placements[0].rect = Rect::new(14, 14, 4, 4);
        assert!(matches!(generate_scene(&spec, &vocab()), Err(Error::Scene(_))));
    }
}
