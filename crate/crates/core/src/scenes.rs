//! Synthetic single-object scenes and the RandomCrop augmentation pipeline.
//!
//! Scenes are two-level grayscale images: a flat background with one filled
//! shape whose bounding box stays at least two pixels inside the frame at
//! generation time. Border-truncated objects can therefore only be introduced
//! by the augmentation stage, which is exactly the causal lever the crop
//! experiments pull on.

use crate::img::Image;
use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Margin (in pixels) the object bounding box must keep from the frame at
/// generation time.
pub const GENERATION_MARGIN_PX: f32 = 2.0;

pub const VOCAB: [&str; 6] = ["<pad>", "a", "disc", "square", "triangle", "ring"];
pub const TOKEN_PAD: usize = 0;
pub const TOKEN_A: usize = 1;
pub const PROMPT_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectClass {
    Disc,
    Square,
    Triangle,
    Ring,
}

pub const CLASSES: [ObjectClass; 4] =
    [ObjectClass::Disc, ObjectClass::Square, ObjectClass::Triangle, ObjectClass::Ring];

impl ObjectClass {
    pub fn token_id(self) -> usize {
        match self {
            ObjectClass::Disc => 2,
            ObjectClass::Square => 3,
            ObjectClass::Triangle => 4,
            ObjectClass::Ring => 5,
        }
    }

    pub fn name(self) -> &'static str {
        VOCAB[self.token_id()]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CLASSES
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Validation(format!("unknown object class '{name}'")))
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry and levels of one rendered scene. Coordinates are fractions of
/// the image side; `radius` is the shape's half-extent scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub object_class: ObjectClass,
    pub center: (f32, f32),
    pub radius: f32,
    pub foreground_level: f32,
    pub background_level: f32,
}

impl SceneSpec {
    /// Axis-aligned bounding box (x0, y0, x1, y1) in [0,1] coordinates.
    pub fn bounding_box(&self) -> (f32, f32, f32, f32) {
        let (cx, cy) = self.center;
        let r = self.radius;
        match self.object_class {
            ObjectClass::Disc | ObjectClass::Ring | ObjectClass::Square => {
                (cx - r, cy - r, cx + r, cy + r)
            }
            ObjectClass::Triangle => {
                let half_w = r * 3.0f32.sqrt() / 2.0;
                (cx - half_w, cy - r, cx + half_w, cy + r / 2.0)
            }
        }
    }

    /// Check the segmentability and in-frame invariants for a target size.
    pub fn validate(&self, size: usize) -> Result<()> {
        if !(0.08..=0.30).contains(&self.radius) {
            return Err(Error::Validation(format!(
                "radius {} outside [0.08, 0.30]",
                self.radius
            )));
        }
        if !(self.foreground_level > 0.5 && self.foreground_level <= 1.0) {
            return Err(Error::Validation(format!(
                "foreground level {} outside (0.5, 1.0]",
                self.foreground_level
            )));
        }
        if !(0.0..=0.3).contains(&self.background_level) {
            return Err(Error::Validation(format!(
                "background level {} outside [0.0, 0.3]",
                self.background_level
            )));
        }
        if self.foreground_level - self.background_level < 0.3 {
            return Err(Error::Validation(format!(
                "level gap {} below 0.3",
                self.foreground_level - self.background_level
            )));
        }
        let (x0, y0, x1, y1) = self.bounding_box();
        let margin = GENERATION_MARGIN_PX / size as f32;
        if x0 < margin || y0 < margin || x1 > 1.0 - margin || y1 > 1.0 - margin {
            return Err(Error::Validation(format!(
                "bounding box ({x0:.3},{y0:.3})-({x1:.3},{y1:.3}) closer than \
                 {GENERATION_MARGIN_PX} px to the frame at size {size}"
            )));
        }
        Ok(())
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let r = self.radius;
        match self.object_class {
            ObjectClass::Disc => dx * dx + dy * dy <= r * r,
            ObjectClass::Square => dx.abs() <= r && dy.abs() <= r,
            ObjectClass::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = 0.5 * r;
                d2 <= r * r && d2 >= inner * inner
            }
            ObjectClass::Triangle => {
                // Equilateral, apex up: A=(0,-r), B=(hw, r/2), C=(-hw, r/2)
                // relative to the center; inside iff all edge cross products
                // share a sign.
                let hw = r * 3.0f32.sqrt() / 2.0;
                let (ax, ay) = (0.0, -r);
                let (bx, by) = (hw, r / 2.0);
                let (cx2, cy2) = (-hw, r / 2.0);
                let edge = |px: f32, py: f32, qx: f32, qy: f32| {
                    (dx - qx) * (py - qy) - (px - qx) * (dy - qy)
                };
                let d1 = edge(ax, ay, bx, by);
                let d2 = edge(bx, by, cx2, cy2);
                let d3 = edge(cx2, cy2, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Fixed-length tokenized prompt ("a <class>" padded to 4 tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub token_ids: [usize; PROMPT_LEN],
    pub object_token_index: usize,
}

impl PromptTokens {
    pub fn for_class(class: ObjectClass) -> Self {
        PromptTokens {
            token_ids: [TOKEN_A, class.token_id(), TOKEN_PAD, TOKEN_PAD],
            object_token_index: 1,
        }
    }

    /// Indices of object tokens the guidance loss sums over. Single-object
    /// prompts yield one entry.
    pub fn object_indices(&self) -> Vec<usize> {
        vec![self.object_token_index]
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_token_index >= PROMPT_LEN {
            return Err(Error::Validation(format!(
                "object token index {} out of range",
                self.object_token_index
            )));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t >= VOCAB.len()) {
            return Err(Error::Validation(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    None,
    RandomCrop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub crop_ratio_range: (f32, f32),
    pub flip_prob: f32,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn none(seed: u64) -> Self {
        AugmentPolicy {
            mode: AugmentMode::None,
            crop_ratio_range: (1.0, 1.0),
            flip_prob: 0.0,
            seed,
        }
    }

    pub fn random_crop(lo: f32, hi: f32, seed: u64) -> Self {
        AugmentPolicy {
            mode: AugmentMode::RandomCrop,
            crop_ratio_range: (lo, hi),
            flip_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Validation(format!(
                "crop ratio range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Validation(format!("flip prob {} outside [0,1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Render a scene onto a size×size canvas; pixels are sampled at their
/// centers, so the same spec always produces the same raster.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Image> {
    if size < 16 {
        return Err(Error::Validation(format!("image size {size} below minimum 16")));
    }
    spec.validate(size)?;
    let mut pixels = vec![spec.background_level; size * size];
    let inv = 1.0 / size as f32;
    for row in 0..size {
        let y = (row as f32 + 0.5) * inv;
        for col in 0..size {
            let x = (col as f32 + 0.5) * inv;
            if spec.contains(x, y) {
                pixels[row * size + col] = spec.foreground_level;
            }
        }
    }
    Ok(Image::new(size, pixels))
}

/// Crop a `ratio`-sized square window at a uniformly random valid offset and
/// resize back to the original size with nearest-neighbor sampling.
pub fn random_crop(img: &Image, ratio: f32, rng: &mut ChaCha8Rng) -> Result<Image> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Validation(format!("crop ratio {ratio} outside (0, 1]")));
    }
    let window = ((ratio * img.size as f32).round() as usize).clamp(1, img.size);
    let max_off = img.size - window;
    let ox = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) };
    let oy = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) };
    Ok(crop_at(img, window, ox, oy))
}

/// Deterministic crop-and-resize used by `random_crop`; exposed for the
/// geometric oracle tests.
pub fn crop_at(img: &Image, window: usize, ox: usize, oy: usize) -> Image {
    let size = img.size;
    debug_assert!(window >= 1 && ox + window <= size && oy + window <= size);
    if window == size {
        return img.clone();
    }
    let mut pixels = vec![0.0f32; size * size];
    let scale = window as f32 / size as f32;
    for row in 0..size {
        let src_r = (((row as f32 + 0.5) * scale) as usize).min(window - 1);
        for col in 0..size {
            let src_c = (((col as f32 + 0.5) * scale) as usize).min(window - 1);
            pixels[row * size + col] = img.get(oy + src_r, ox + src_c);
        }
    }
    Image::new(size, pixels)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let size = img.size;
    let mut pixels = vec![0.0f32; size * size];
    for row in 0..size {
        for col in 0..size {
            pixels[row * size + col] = img.get(row, size - 1 - col);
        }
    }
    Image::new(size, pixels)
}

/// One dataset entry: the (possibly augmented) image, its prompt, and the
/// generating scene geometry.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image: Image,
    pub tokens: PromptTokens,
    pub spec: SceneSpec,
}

/// Generate `n` scene/prompt pairs. Classes cycle uniformly; geometry is
/// drawn per index from a derived stream, so the dataset is identical for a
/// given `(n, policy, size, seed)` regardless of how generation is sharded.
pub fn make_dataset(
    n: usize,
    policy: &AugmentPolicy,
    size: usize,
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    if n == 0 {
        return Err(Error::Validation("dataset size must be at least 1".into()));
    }
    policy.validate()?;
    if size < 16 {
        return Err(Error::Validation(format!("image size {size} below minimum 16")));
    }
    (0..n).map(|i| make_item(i, policy, size, seed)).collect()
}

fn make_item(index: usize, policy: &AugmentPolicy, size: usize, seed: u64) -> Result<DatasetItem> {
    let mut geo = rng::derive(seed, "scene", index as u64);
    let class = CLASSES[index % CLASSES.len()];
    let radius = geo.gen_range(0.08f32..=0.30);
    let foreground = geo.gen_range(0.6f32..=1.0);
    let background = geo.gen_range(0.0f32..=(foreground - 0.3).min(0.3));

    // Sample the center so the per-shape bounding box keeps the generation
    // margin.
    let margin = GENERATION_MARGIN_PX / size as f32;
    let (hx, hy_up, hy_down) = match class {
        ObjectClass::Triangle => (radius * 3.0f32.sqrt() / 2.0, radius, radius / 2.0),
        _ => (radius, radius, radius),
    };
    let cx = geo.gen_range((margin + hx)..=(1.0 - margin - hx));
    let cy = geo.gen_range((margin + hy_up)..=(1.0 - margin - hy_down));

    let spec = SceneSpec {
        object_class: class,
        center: (cx, cy),
        radius,
        foreground_level: foreground,
        background_level: background,
    };
    let mut image = render_scene(&spec, size)?;

    let mut aug = rng::derive(policy.seed, "augment", index as u64);
    if policy.flip_prob > 0.0 && aug.gen_bool(policy.flip_prob as f64) {
        image = flip_horizontal(&image);
    }
    if policy.mode == AugmentMode::RandomCrop {
        let (lo, hi) = policy.crop_ratio_range;
        let ratio = if lo == hi { lo } else { aug.gen_range(lo..=hi) };
        image = random_crop(&image, ratio, &mut aug)?;
    }

    Ok(DatasetItem { image, tokens: PromptTokens::for_class(class), spec })
}

/// Write the dataset as `images/NNNNNN.pgm` plus `data_manifest.csv`
/// (filename, class, center, radius, border-contact flag).
pub fn export_dataset(items: &[DatasetItem], dir: &std::path::Path) -> Result<()> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut manifest = String::from("filename,class,center_x,center_y,radius,border_contact\n");
    for (i, item) in items.iter().enumerate() {
        let filename = format!("{i:06}.pgm");
        item.image.write_pgm(&image_dir.join(&filename))?;
        let contact = matches!(
            crate::metrics::border_contact(&item.image, 0.5, 1),
            crate::metrics::BorderVerdict::Contact
        );
        manifest.push_str(&format!(
            "{filename},{},{},{},{},{}\n",
            item.spec.object_class,
            item.spec.center.0,
            item.spec.center.1,
            item.spec.radius,
            contact as u8
        ));
    }
    std::fs::write(dir.join("data_manifest.csv"), manifest)?;
    Ok(())
}
