//! Automatic object-completeness evaluation and attention diagnostics.
//!
//! The completeness oracle is geometric: an object counts as truncated when
//! thresholded foreground reaches within `margin` pixels of the frame. This
//! replaces rater-based incompleteness judgments with a machine-checkable
//! criterion on the synthetic scenes.

use crate::img::Image;
use crate::{Error, Result, GRID};

/// Default foreground threshold: scenes guarantee a level gap of at least 0.3
/// around 0.5.
pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Default contact margin in pixels: detects literal truncation at the frame.
pub const DEFAULT_MARGIN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderVerdict {
    /// Foreground within `margin` pixels of an edge.
    Contact,
    /// Foreground present, all of it clear of the margin band.
    Interior,
    /// No pixel reaches the threshold; excluded from rates.
    NoObject,
}

/// Classify one image. Contact uses the strict convention: a foreground pixel
/// at edge distance d triggers contact iff d < margin.
pub fn border_contact(img: &Image, threshold: f32, margin: usize) -> BorderVerdict {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    debug_assert!(margin >= 1);
    let size = img.size;
    let mut any = false;
    for row in 0..size {
        for col in 0..size {
            if img.get(row, col) >= threshold {
                any = true;
                let dist = row.min(col).min(size - 1 - row).min(size - 1 - col);
                if dist < margin {
                    return BorderVerdict::Contact;
                }
            }
        }
    }
    if any {
        BorderVerdict::Interior
    } else {
        BorderVerdict::NoObject
    }
}

pub fn foreground_area(img: &Image, threshold: f32) -> usize {
    img.pixels.iter().filter(|&&v| v >= threshold).count()
}

#[derive(Debug, Clone)]
pub struct ImageVerdict {
    pub id: String,
    pub verdict: BorderVerdict,
    pub foreground_area: usize,
}

/// Per-image verdicts plus the aggregate incompleteness rate.
#[derive(Debug, Clone)]
pub struct CompletenessReport {
    pub per_image: Vec<ImageVerdict>,
    /// Fraction of border-contacting images among those with an object.
    pub rate: f64,
    /// Number of images with an object (rate denominator).
    pub n: usize,
    /// Images excluded because no pixel reached the threshold.
    pub no_object: usize,
}

impl CompletenessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,verdict,foreground_area\n");
        for v in &self.per_image {
            let verdict = match v.verdict {
                BorderVerdict::Contact => "contact",
                BorderVerdict::Interior => "interior",
                BorderVerdict::NoObject => "no_object",
            };
            out.push_str(&format!("{},{},{}\n", v.id, verdict, v.foreground_area));
        }
        out
    }
}

/// Aggregate border contact over a corpus. No-object images are excluded from
/// the rate; a corpus with no objects at all is rejected.
pub fn incompleteness_rate<'a, I>(
    images: I,
    threshold: f32,
    margin: usize,
) -> Result<CompletenessReport>
where
    I: IntoIterator<Item = (String, &'a Image)>,
{
    let mut per_image = Vec::new();
    let mut contacts = 0usize;
    let mut counted = 0usize;
    let mut no_object = 0usize;
    for (id, img) in images {
        let verdict = border_contact(img, threshold, margin);
        match verdict {
            BorderVerdict::Contact => {
                contacts += 1;
                counted += 1;
            }
            BorderVerdict::Interior => counted += 1,
            BorderVerdict::NoObject => no_object += 1,
        }
        per_image.push(ImageVerdict {
            id,
            verdict,
            foreground_area: foreground_area(img, threshold),
        });
    }
    if per_image.is_empty() {
        return Err(Error::Validation("incompleteness rate over an empty corpus".into()));
    }
    if counted == 0 {
        return Err(Error::Validation(
            "incompleteness rate undefined: no image contains an object".into(),
        ));
    }
    Ok(CompletenessReport {
        per_image,
        rate: contacts as f64 / counted as f64,
        n: counted,
        no_object,
    })
}

/// Fraction of a 16×16 map's mass lying in the boundary band of the given
/// width: Σ_band / Σ_total.
pub fn boundary_attention_mass(map: &[f32], band_width: usize) -> Result<f64> {
    if map.len() != GRID * GRID {
        return Err(Error::Validation(format!(
            "attention map has {} cells, expected {}",
            map.len(),
            GRID * GRID
        )));
    }
    if band_width == 0 || 2 * band_width >= GRID {
        return Err(Error::Validation(format!("band width {band_width} infeasible")));
    }
    let mut band = 0.0f64;
    let mut total = 0.0f64;
    for row in 0..GRID {
        for col in 0..GRID {
            let v = map[row * GRID + col] as f64;
            total += v;
            let dist = row.min(col).min(GRID - 1 - row).min(GRID - 1 - col);
            if dist < band_width {
                band += v;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Validation("attention map has zero total mass".into()));
    }
    Ok(band / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendVerdict {
    Increasing,
    Decreasing,
    Neither,
}

impl std::fmt::Display for TrendVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrendVerdict::Increasing => "increasing",
            TrendVerdict::Decreasing => "decreasing",
            TrendVerdict::Neither => "neither",
        })
    }
}

/// Slack applied per step when classifying a rate sequence.
pub const TREND_SLACK: f64 = 0.02;

/// Classify a rate-vs-epoch series by pairwise majority: steps larger than
/// the slack count as rises, steps below the negative slack as falls.
pub fn trend_report(rates_by_epoch: &[(usize, f64)]) -> Result<TrendVerdict> {
    if rates_by_epoch.len() < 3 {
        return Err(Error::Validation(format!(
            "trend needs at least 3 epochs, got {}",
            rates_by_epoch.len()
        )));
    }
    let mut up = 0usize;
    let mut down = 0usize;
    for pair in rates_by_epoch.windows(2) {
        let delta = pair[1].1 - pair[0].1;
        if delta > TREND_SLACK {
            up += 1;
        } else if delta < -TREND_SLACK {
            down += 1;
        }
    }
    Ok(match up.cmp(&down) {
        std::cmp::Ordering::Greater => TrendVerdict::Increasing,
        std::cmp::Ordering::Less => TrendVerdict::Decreasing,
        std::cmp::Ordering::Equal => TrendVerdict::Neither,
    })
}
