use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, GazeAnnotation, RgbFrame, Split};
use crate::error::{GazeError, Result};
use crate::prompting::HeadBBox;
use crate::targets::GazePoint;

const PALETTE: [[f32; 3]; 4] = [[0.9, 0.15, 0.1], [0.1, 0.35, 0.95], [0.1, 0.8, 0.2], [0.95, 0.85, 0.1]];
const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Generator settings for the marker-based gaze task.
///
/// Every person is a colored disk (the head); the gaze target is a square of
/// the same color. The gaze point is the center pixel of that square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Number of images.
    pub n: usize,
    pub image_size: usize,
    pub persons_per_image: usize,
    pub seed: u64,
    pub split: Split,
    /// Minimum distance between two people's targets, normalized.
    pub min_target_separation: f64,
    /// Probability that a person's target is left unrendered (out of frame).
    pub out_of_frame: f64,
    /// Standard deviation of the per-pixel background noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 64,
            image_size: 224,
            persons_per_image: 1,
            seed: 0,
            split: Split::Train,
            min_target_separation: 0.45,
            out_of_frame: 0.0,
            noise: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n == 0 {
            problems.push("n must be at least 1".to_string());
        }
        if self.image_size < 32 {
            problems.push(format!("image_size {} below 32", self.image_size));
        }
        if !(1..=PALETTE.len()).contains(&self.persons_per_image) {
            problems.push(format!("persons_per_image must be in 1..={}", PALETTE.len()));
        }
        if !(0.0..=1.0).contains(&self.out_of_frame) {
            problems.push("out_of_frame must be a probability".to_string());
        }
        if !(0.0..0.7).contains(&self.min_target_separation) {
            problems.push("min_target_separation must be in [0, 0.7)".to_string());
        }
        if self.noise < 0.0 {
            problems.push("noise must be nonnegative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GazeError::InvalidConfig(problems.join("; ")))
        }
    }
}

struct Marker {
    row: usize,
    col: usize,
    radius: usize,
}

struct Person {
    color: [f32; 3],
    head: Marker,
    target: Marker,
    in_frame: bool,
}

fn dist(a: &Marker, b: &Marker) -> f64 {
    let dr = a.row as f64 - b.row as f64;
    let dc = a.col as f64 - b.col as f64;
    (dr * dr + dc * dc).sqrt()
}

fn place(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Person>> {
    let s = cfg.image_size;
    let head_lo = ((s as f64 * 0.04).round() as usize).max(3);
    let head_hi = ((s as f64 * 0.055).round() as usize).max(head_lo);
    let half = ((s as f64 * 0.025).round() as usize).max(2);
    let margin = head_hi + 2;
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for k in 0..cfg.persons_per_image {
        let j = rng.random_range(k..colors.len());
        colors.swap(k, j);
    }
    let pick = |radius: usize, rng: &mut ChaCha8Rng| Marker {
        row: rng.random_range(margin..s - margin),
        col: rng.random_range(margin..s - margin),
        radius,
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let people: Vec<Person> = (0..cfg.persons_per_image)
            .map(|k| {
                let r = rng.random_range(head_lo..=head_hi);
                Person {
                    color: PALETTE[colors[k]],
                    head: pick(r, rng),
                    target: pick(half, rng),
                    in_frame: !rng.random_bool(cfg.out_of_frame),
                }
            })
            .collect();
        let markers: Vec<&Marker> = people.iter().flat_map(|p| [&p.head, &p.target]).collect();
        let apart = markers.iter().enumerate().all(|(i, a)| {
            markers[i + 1..]
                .iter()
                .all(|b| dist(a, b) >= (a.radius + b.radius) as f64 * 1.5 + 4.0)
        });
        let own = people
            .iter()
            .all(|p| dist(&p.head, &p.target) >= 0.2 * s as f64);
        let separated = people.iter().enumerate().all(|(i, a)| {
            people[i + 1..]
                .iter()
                .all(|b| dist(&a.target, &b.target) >= cfg.min_target_separation * s as f64)
        });
        if apart && own && separated {
            return Ok(people);
        }
    }
    Err(GazeError::InvalidConfig(format!(
        "could not place {} people on a {s}px image",
        cfg.persons_per_image
    )))
}

fn render(cfg: &SyntheticConfig, people: &[Person], rng: &mut ChaCha8Rng) -> RgbFrame {
    let s = cfg.image_size;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.55));
    let mut frame = RgbFrame::filled(s, s, base);
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("finite noise");
        frame
            .data
            .mapv_inplace(|v| (v + normal.sample(rng) as f32).clamp(0.0, 1.0));
    }
    for p in people.iter().filter(|p| p.in_frame) {
        let t = &p.target;
        for row in t.row - t.radius..=t.row + t.radius {
            for col in t.col - t.radius..=t.col + t.radius {
                frame.set_pixel(row, col, p.color);
            }
        }
    }
    for p in people {
        let h = &p.head;
        let r2 = (h.radius * h.radius) as isize;
        for row in h.row - h.radius..=h.row + h.radius {
            for col in h.col - h.radius..=h.col + h.radius {
                let dr = row as isize - h.row as isize;
                let dc = col as isize - h.col as isize;
                if dr * dr + dc * dc <= r2 {
                    frame.set_pixel(row, col, p.color);
                }
            }
        }
    }
    frame
}

fn annotate(cfg: &SyntheticConfig, image_id: &str, p: &Person) -> GazeAnnotation {
    let s = cfg.image_size as f64;
    let h = &p.head;
    let bbox = HeadBBox {
        xmin: (h.col - h.radius) as f64 / s,
        ymin: (h.row - h.radius) as f64 / s,
        xmax: ((h.col + h.radius + 1) as f64 / s).min(1.0),
        ymax: ((h.row + h.radius + 1) as f64 / s).min(1.0),
    };
    let gaze = GazePoint {
        x: (p.target.col as f64 + 0.5) / s,
        y: (p.target.row as f64 + 0.5) / s,
    };
    GazeAnnotation {
        image_id: image_id.to_string(),
        bbox,
        gaze_points: if p.in_frame { vec![gaze] } else { Vec::new() },
        in_frame: p.in_frame,
        split: cfg.split,
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate(cfg: &SyntheticConfig, keep_images: bool) -> Result<(Vec<GazeAnnotation>, HashMap<String, RgbFrame>)> {
    cfg.validate()?;
    let mut annotations = Vec::with_capacity(cfg.n * cfg.persons_per_image);
    let mut images = HashMap::new();
    for i in 0..cfg.n {
        let mut rng = image_rng(cfg.seed, i);
        let people = place(cfg, &mut rng)?;
        let frame = render(cfg, &people, &mut rng);
        let id = format!("synthetic_{i:05}");
        annotations.extend(people.iter().map(|p| annotate(cfg, &id, p)));
        if keep_images {
            images.insert(id, frame);
        }
    }
    Ok((annotations, images))
}

pub(super) fn generate_annotations(cfg: &SyntheticConfig) -> Result<Vec<GazeAnnotation>> {
    Ok(generate(cfg, false)?.0)
}

/// Renders `cfg.n` images with their annotations, fully determined by the seed.
pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let (annotations, images) = generate(cfg, true)?;
    Ok(Dataset::in_memory(annotations, images))
}
