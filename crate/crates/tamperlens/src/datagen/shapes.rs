//! Compound-shape tamper masks.
//!
//! A mask is built from one to three basic shapes, each drawn from a library
//! of ten parametric rasterizers, then randomly sized, stretched, rotated and
//! placed. Candidates covering more than 75% of the frame (or nothing at all)
//! are rejected and redrawn. Every random draw is recorded in a [`MaskRecipe`]
//! so the exact mask can be rebuilt later from the manifest.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ForgeryMask;

/// Largest allowed tampered-area fraction for a sampled mask.
pub const MAX_AREA_FRACTION: f64 = 0.75;
/// Default number of rejection-sampling attempts before giving up.
pub const DEFAULT_MASK_TRIES: u32 = 100;
/// Smallest frame side supported by the mask sampler.
pub const MIN_MASK_DIM: usize = 128;

/// The ten basic mask shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeId {
    Rectangle,
    Circle,
    Ellipse,
    Triangle,
    Pentagon,
    Heptagon,
    Star5,
    Star8,
    Star12,
    Star18,
}

impl ShapeId {
    pub const ALL: [ShapeId; 10] = [
        ShapeId::Rectangle,
        ShapeId::Circle,
        ShapeId::Ellipse,
        ShapeId::Triangle,
        ShapeId::Pentagon,
        ShapeId::Heptagon,
        ShapeId::Star5,
        ShapeId::Star8,
        ShapeId::Star12,
        ShapeId::Star18,
    ];

    /// Canonical outline vertices on the unit circle, or `None` for the two
    /// analytically tested shapes (circle, ellipse).
    fn polygon(self) -> Option<Vec<(f64, f64)>> {
        let ngon = |n: usize| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let a = std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / n as f64;
                    (a.cos(), a.sin())
                })
                .collect()
        };
        let star = |points: usize| -> Vec<(f64, f64)> {
            let inner = 0.5;
            (0..2 * points)
                .map(|i| {
                    let a = std::f64::consts::FRAC_PI_2
                        + i as f64 * std::f64::consts::PI / points as f64;
                    let r = if i % 2 == 0 { 1.0 } else { inner };
                    (r * a.cos(), r * a.sin())
                })
                .collect()
        };
        match self {
            ShapeId::Rectangle => Some(vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]),
            ShapeId::Circle | ShapeId::Ellipse => None,
            ShapeId::Triangle => Some(ngon(3)),
            ShapeId::Pentagon => Some(ngon(5)),
            ShapeId::Heptagon => Some(ngon(7)),
            ShapeId::Star5 => Some(star(5)),
            ShapeId::Star8 => Some(star(8)),
            ShapeId::Star12 => Some(star(12)),
            ShapeId::Star18 => Some(star(18)),
        }
    }
}

/// One placed shape inside a compound mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskComponent {
    pub shape: ShapeId,
    /// Outer radius in pixels (canonical shapes fit the unit circle).
    pub radius: f64,
    /// Vertical stretch applied before rotation (≤ 1 squashes).
    pub aspect: f64,
    pub rotation_deg: f64,
    /// Component center as (row, col) in pixels.
    pub center: (f64, f64),
}

impl MaskComponent {
    /// Even-odd inside test at one pixel center (integer coordinates).
    fn contains(&self, row: f64, col: f64) -> bool {
        let (cy, cx) = self.center;
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let dx = col - cx;
        let dy = row - cy;
        // Map world → canonical: undo rotation, then undo the scaling.
        let rx = cos * dx + sin * dy;
        let ry = -sin * dx + cos * dy;
        let qx = rx / self.radius;
        let qy = ry / (self.radius * self.aspect);
        match self.shape {
            ShapeId::Circle => qx * qx + qy * qy <= 1.0,
            ShapeId::Ellipse => {
                let b = 0.6;
                qx * qx + (qy / b) * (qy / b) <= 1.0
            }
            other => {
                let poly = other.polygon().expect("non-analytic shapes have outlines");
                even_odd_inside(qx, qy, &poly)
            }
        }
    }

    /// Conservative half-extent of the component in pixels.
    fn reach(&self) -> f64 {
        self.radius * self.aspect.max(1.0) + 1.0
    }
}

/// Standard even-odd (ray crossing) polygon membership test.
fn even_odd_inside(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Full record of the random draws behind one compound mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecipe {
    /// One to three placed shapes, unioned together.
    pub components: Vec<MaskComponent>,
    /// Seed tag of the RNG stream that produced the draws (0 when sampled
    /// outside a corpus run).
    pub rng_seed: u64,
}

impl MaskRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() > 3 {
            return Err(Error::invalid(format!(
                "mask must combine 1–3 shapes, got {}",
                self.components.len()
            )));
        }
        for c in &self.components {
            if c.radius <= 0.0 || c.aspect <= 0.0 {
                return Err(Error::invalid("shape radius and aspect must be positive"));
            }
        }
        Ok(())
    }
}

/// Rasterizes a recipe into a binary frame-sized mask: union of components,
/// even-odd fill probed at integer pixel centers, no anti-aliasing. Each
/// component contributes only its dominant connected region, so shapes stay
/// whole even when sub-pixel slivers (thin star tips) fall between pixel
/// centers.
pub fn rasterize_recipe(height: usize, width: usize, recipe: &MaskRecipe) -> Result<ForgeryMask> {
    recipe.validate()?;
    let mut values = Array2::<f64>::zeros((height, width));
    for comp in &recipe.components {
        let reach = comp.reach();
        let (cy, cx) = comp.center;
        let r0 = ((cy - reach).floor().max(0.0)) as usize;
        let r1 = ((cy + reach).ceil().min(height as f64 - 1.0)) as usize;
        let c0 = ((cx - reach).floor().max(0.0)) as usize;
        let c1 = ((cx + reach).ceil().min(width as f64 - 1.0)) as usize;
        if r0 > r1 || c0 > c1 {
            continue;
        }
        let mut layer = Array2::<u8>::zeros((height, width));
        for r in r0..=r1 {
            for c in c0..=c1 {
                if comp.contains(r as f64, c as f64) {
                    layer[[r, c]] = 1;
                }
            }
        }
        keep_dominant_region(&mut layer);
        for (v, l) in values.iter_mut().zip(layer.iter()) {
            if *l == 1 {
                *v = 1.0;
            }
        }
    }
    ForgeryMask::binary(values)
}

/// Zeroes every 8-connected foreground region except the largest (first in
/// scan order on ties).
fn keep_dominant_region(layer: &mut Array2<u8>) {
    let (rows, cols) = layer.dim();
    let mut label = Array2::<u32>::zeros((rows, cols));
    let mut sizes = vec![0usize];
    for sr in 0..rows {
        for sc in 0..cols {
            if layer[[sr, sc]] != 1 || label[[sr, sc]] != 0 {
                continue;
            }
            let id = sizes.len() as u32;
            sizes.push(0);
            let mut stack = vec![(sr, sc)];
            label[[sr, sc]] = id;
            while let Some((r, c)) = stack.pop() {
                sizes[id as usize] += 1;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if layer[[nr, nc]] == 1 && label[[nr, nc]] == 0 {
                            label[[nr, nc]] = id;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
        }
    }
    if sizes.len() <= 2 {
        return; // empty or already a single region
    }
    let keep = (1..sizes.len()).max_by_key(|&i| (sizes[i], usize::MAX - i)).expect("nonempty") as u32;
    for (v, l) in layer.iter_mut().zip(label.iter()) {
        if *v == 1 && *l != keep {
            *v = 0;
        }
    }
}

fn draw_component<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> MaskComponent {
    let min_dim = height.min(width) as f64;
    MaskComponent {
        shape: ShapeId::ALL[rng.gen_range(0..ShapeId::ALL.len())],
        // Up to 0.48·min_dim: large draws (a centered circle reaches ~72%
        // alone, unions go past it) keep the 75% area cap a live constraint.
        radius: rng.gen_range(0.10..0.48) * min_dim,
        aspect: rng.gen_range(0.6..1.0),
        rotation_deg: rng.gen_range(0.0..360.0),
        center: (
            rng.gen_range(0.15..0.85) * height as f64,
            rng.gen_range(0.15..0.85) * width as f64,
        ),
    }
}

/// Draws compound masks until one covers a positive fraction of the frame no
/// larger than `max_area`, or fails after `max_tries` rejections.
///
/// Returns the accepted mask, its recipe, and the number of draws used.
pub fn sample_mask_with<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
    max_area: f64,
    max_tries: u32,
) -> Result<(ForgeryMask, MaskRecipe, u32)> {
    if height < MIN_MASK_DIM || width < MIN_MASK_DIM {
        return Err(Error::invalid(format!(
            "mask frames must be at least {MIN_MASK_DIM}px per side, got {height}×{width}"
        )));
    }
    for attempt in 1..=max_tries {
        let count = rng.gen_range(1..=3);
        let recipe = MaskRecipe {
            components: (0..count)
                .map(|_| draw_component(height, width, rng))
                .collect(),
            rng_seed: 0,
        };
        let mask = rasterize_recipe(height, width, &recipe)?;
        let area = mask.area_fraction();
        if area > 0.0 && area <= max_area {
            return Ok((mask, recipe, attempt));
        }
    }
    Err(Error::Generation(format!(
        "no mask with area in (0, {max_area}] found after {max_tries} draws"
    )))
}

/// Samples a compound tamper mask under the default 75% area cap.
pub fn sample_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<(ForgeryMask, MaskRecipe)> {
    sample_mask_with(height, width, rng, MAX_AREA_FRACTION, DEFAULT_MASK_TRIES)
        .map(|(m, r, _)| (m, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(shape: ShapeId, radius: f64, aspect: f64, rot: f64, center: (f64, f64)) -> MaskRecipe {
        MaskRecipe {
            components: vec![MaskComponent {
                shape,
                radius,
                aspect,
                rotation_deg: rot,
                center,
            }],
            rng_seed: 0,
        }
    }

    /// Count 8-connected foreground components (the standard dual of the
    /// 4-connected background used by hole filling).
    fn component_count(mask: &ForgeryMask) -> usize {
        let v = mask.values();
        let (rows, cols) = v.dim();
        let mut seen = Array2::<bool>::from_elem((rows, cols), false);
        let mut count = 0;
        for sr in 0..rows {
            for sc in 0..cols {
                if v[[sr, sc]] != 1.0 || seen[[sr, sc]] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(sr, sc)];
                seen[[sr, sc]] = true;
                while let Some((r, c)) = stack.pop() {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                                continue;
                            }
                            let (nr, nc) = (nr as usize, nc as usize);
                            if v[[nr, nc]] == 1.0 && !seen[[nr, nc]] {
                                seen[[nr, nc]] = true;
                                stack.push((nr, nc));
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn every_shape_rasterizes_to_one_connected_region() {
        for &shape in &ShapeId::ALL {
            for rot in [0.0, 33.0] {
                let recipe = single(shape, 24.0, 1.0, rot, (32.0, 32.0));
                let mask = rasterize_recipe(64, 64, &recipe).unwrap();
                assert!(mask.area_fraction() > 0.01, "{shape:?} rasterized empty");
                assert_eq!(
                    component_count(&mask),
                    1,
                    "{shape:?} rot {rot} is disconnected"
                );
            }
        }
    }

    #[test]
    fn shapes_have_distinct_footprints() {
        let mut areas = Vec::new();
        for &shape in &ShapeId::ALL {
            let mask = rasterize_recipe(64, 64, &single(shape, 24.0, 1.0, 0.0, (32.0, 32.0)))
                .unwrap();
            areas.push((shape, mask.area_fraction()));
        }
        // The square fills the most, the thin stars the least.
        let rect = areas.iter().find(|(s, _)| *s == ShapeId::Rectangle).unwrap().1;
        for (shape, a) in &areas {
            if *shape != ShapeId::Rectangle {
                assert!(*a < rect, "{shape:?} should cover less than the square");
            }
        }
        let circle = areas.iter().find(|(s, _)| *s == ShapeId::Circle).unwrap().1;
        let star18 = areas.iter().find(|(s, _)| *s == ShapeId::Star18).unwrap().1;
        assert!(star18 < circle);
        // Circle area ≈ π r² (loose tolerance for pixel quantization).
        let expect = std::f64::consts::PI * 24.0 * 24.0 / (64.0 * 64.0);
        assert!((circle - expect).abs() / expect < 0.05);
    }

    #[test]
    fn rotation_preserves_symmetric_shape_area() {
        let base = rasterize_recipe(128, 128, &single(ShapeId::Circle, 30.0, 1.0, 0.0, (64.0, 64.0)))
            .unwrap()
            .area_fraction();
        let rot = rasterize_recipe(128, 128, &single(ShapeId::Circle, 30.0, 1.0, 77.0, (64.0, 64.0)))
            .unwrap()
            .area_fraction();
        assert!((base - rot).abs() < 1e-9, "circle area changed under rotation");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(99);
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let (m1, r1) = sample_mask(128, 192, &mut rng1).unwrap();
        let (m2, r2) = sample_mask(128, 192, &mut rng2).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.values(), m2.values());

        let mut rng3 = ChaCha8Rng::seed_from_u64(100);
        let (_, r3) = sample_mask(128, 192, &mut rng3).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn recipes_rebuild_identical_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (mask, recipe) = sample_mask(128, 128, &mut rng).unwrap();
            let rebuilt = rasterize_recipe(128, 128, &recipe).unwrap();
            assert_eq!(mask.values(), rebuilt.values());
            // And survives a manifest round trip.
            let json = serde_json::to_string(&recipe).unwrap();
            let back: MaskRecipe = serde_json::from_str(&json).unwrap();
            assert_eq!(back, recipe);
        }
    }

    #[test]
    fn sampled_areas_respect_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut max_area: f64 = 0.0;
        let mut any_redraw = false;
        for _ in 0..800 {
            let (mask, recipe, tries) =
                sample_mask_with(128, 128, &mut rng, MAX_AREA_FRACTION, DEFAULT_MASK_TRIES)
                    .unwrap();
            assert!(recipe.components.len() <= 3 && !recipe.components.is_empty());
            let area = mask.area_fraction();
            assert!(area > 0.0 && area <= MAX_AREA_FRACTION, "area {area}");
            max_area = max_area.max(area);
            any_redraw |= tries > 1;
        }
        // The draw ranges must make both sides of the cap reachable: some
        // candidates get rejected, and accepted masks come close to the cap.
        assert!(any_redraw, "rejection path never exercised");
        assert!(max_area > 0.5, "draws never produce large masks ({max_area})");
    }

    #[test]
    fn exhausted_rejection_budget_is_a_generation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let err = sample_mask_with(128, 128, &mut rng, 1e-9, 25).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "got {err:?}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn oversized_recipe_exceeds_the_cap() {
        // Three frame-sized squares: far beyond 75%.
        let comp = |center: (f64, f64)| MaskComponent {
            shape: ShapeId::Rectangle,
            radius: 120.0,
            aspect: 1.0,
            rotation_deg: 0.0,
            center,
        };
        let recipe = MaskRecipe {
            components: vec![comp((64.0, 64.0)), comp((64.0, 80.0)), comp((80.0, 64.0))],
            rng_seed: 0,
        };
        let mask = rasterize_recipe(128, 128, &recipe).unwrap();
        assert!(mask.area_fraction() > MAX_AREA_FRACTION);
    }

    #[test]
    fn small_frames_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(sample_mask(64, 128, &mut rng).is_err());
        assert!(sample_mask(128, 127, &mut rng).is_err());
    }

    #[test]
    fn recipe_validation_bounds_component_count() {
        let c = MaskComponent {
            shape: ShapeId::Circle,
            radius: 10.0,
            aspect: 1.0,
            rotation_deg: 0.0,
            center: (20.0, 20.0),
        };
        let too_many = MaskRecipe {
            components: vec![c.clone(), c.clone(), c.clone(), c.clone()],
            rng_seed: 0,
        };
        assert!(rasterize_recipe(64, 64, &too_many).is_err());
        let none = MaskRecipe {
            components: vec![],
            rng_seed: 0,
        };
        assert!(rasterize_recipe(64, 64, &none).is_err());
    }
}
