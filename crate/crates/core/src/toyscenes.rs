//! Procedural "urban scene" domains: layered layouts (sky, ground, road
//! bands with rectangles for structures and objects) rendered with
//! per-domain palettes, noise and stripe textures.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{LabelRegistry, SemanticMap};
use crate::params::fnv1a64;
use crate::tensor::Tensor;

const SLOT_WIDTH: usize = 8;
const STRIPE_AMPLITUDE: f64 = 0.25;

pub const TOY_STREAM_CSV: &str = include_str!("../data/toy_stream.csv");
const DOMAIN_A: &str = include_str!("../data/domain_a.json");
const DOMAIN_B: &str = include_str!("../data/domain_b.json");
const DOMAIN_C: &str = include_str!("../data/domain_c.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sky,
    Ground,
    Road,
    /// Rectangles standing on the horizon.
    Structure,
    /// Rectangles on the road.
    Object,
    /// Dashed line along the middle of the road.
    Marking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub id: u16,
    pub name: String,
    pub role: Role,
    pub color: [f64; 3],
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub stripe_period: Option<usize>,
    /// Placement probability for rectangle and marking roles.
    #[serde(default = "one")]
    pub prob: f64,
    /// `[w_min, w_max, h_min, h_max]` for rectangle roles.
    #[serde(default)]
    pub size: Option<[usize; 4]>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub sky_fraction: [f64; 2],
    pub road_fraction: [f64; 2],
    /// Rectangles per placed structure class.
    pub building_count: [usize; 2],
    /// Rectangles per placed object class.
    pub object_count: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: String,
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub classes: Vec<ClassStyle>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mask: SemanticMap,
    /// `[1, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    pub seed: u64,
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(0.0..=1.0).contains(&r[0]) || !(0.0..=1.0).contains(&r[1]) || r[0] > r[1] {
        return Err(Error::Validation(format!(
            "{name} must be an ordered range in [0, 1]"
        )));
    }
    Ok(())
}

impl DomainSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One of the shipped domains: `domain_a`, `domain_b` or `domain_c`.
    pub fn builtin(domain: &str) -> Result<Self> {
        let text = match domain {
            "domain_a" => DOMAIN_A,
            "domain_b" => DOMAIN_B,
            "domain_c" => DOMAIN_C,
            _ => return Err(Error::Lookup(format!("no built-in toy domain `{domain}`"))),
        };
        Self::from_json(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < SLOT_WIDTH {
            return Err(Error::Validation(format!(
                "scene size {}x{} is too small",
                self.height, self.width
            )));
        }
        check_range("sky_fraction", self.layout.sky_fraction)?;
        check_range("road_fraction", self.layout.road_fraction)?;
        if self.layout.sky_fraction[1] + self.layout.road_fraction[1] > 1.0 {
            return Err(Error::Validation("sky and road bands overlap".into()));
        }
        for r in [self.layout.building_count, self.layout.object_count] {
            if r[0] > r[1] {
                return Err(Error::Validation(format!("count range {r:?} is reversed")));
            }
        }
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if !ids.insert(c.id) {
                return Err(Error::Validation(format!("class id {} listed twice", c.id)));
            }
            if !(0.0..=1.0).contains(&c.prob)
                || c.noise < 0.0
                || c.color.iter().any(|v| !v.is_finite())
            {
                return Err(Error::Validation(format!(
                    "bad style for class `{}`",
                    c.name
                )));
            }
            if c.stripe_period == Some(0) {
                return Err(Error::Validation(format!(
                    "zero stripe period for `{}`",
                    c.name
                )));
            }
            if matches!(c.role, Role::Structure | Role::Object) {
                match c.size {
                    Some([w0, w1, h0, h1]) if w0 >= 1 && w0 <= w1 && h0 >= 1 && h0 <= h1 => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "class `{}` needs size [w_min, w_max, h_min, h_max]",
                            c.name
                        )))
                    }
                }
            }
        }
        for role in [Role::Sky, Role::Ground, Role::Road] {
            if self.classes.iter().filter(|c| c.role == role).count() != 1 {
                return Err(Error::Validation(format!(
                    "exactly one class must have role {role:?}"
                )));
            }
        }
        Ok(())
    }

    /// Checks the class set against the registry's availability for this domain.
    pub fn check_registry(&self, registry: &LabelRegistry) -> Result<()> {
        let allowed = registry.sampleable_ids(&self.domain);
        if allowed.is_empty() {
            return Err(Error::Lookup(format!(
                "domain `{}` not in registry",
                self.domain
            )));
        }
        for c in &self.classes {
            if !allowed.contains(&(c.id as usize)) {
                return Err(Error::Validation(format!(
                    "class `{}` ({}) is not sampleable in `{}`",
                    c.name, c.id, self.domain
                )));
            }
        }
        Ok(())
    }

    pub fn class_ids(&self) -> BTreeSet<u16> {
        self.classes.iter().map(|c| c.id).collect()
    }

    fn style(&self, id: u16) -> Option<&ClassStyle> {
        self.classes.iter().find(|c| c.id == id)
    }

    fn band(&self, role: Role) -> u16 {
        self.classes
            .iter()
            .find(|c| c.role == role)
            .expect("validated")
            .id
    }
}

/// The shipped three-domain registry.
pub fn toy_registry() -> LabelRegistry {
    LabelRegistry::load_mapping(TOY_STREAM_CSV).expect("shipped toy table is valid")
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stateless hash noise in `[-1, 1]`.
pub fn hash_noise(seed: u64, i: usize, j: usize, ch: usize) -> f64 {
    let mut h = splitmix64(seed);
    for v in [i as u64, j as u64, ch as u64] {
        h = splitmix64(h ^ v);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fill_rect(map: &mut SemanticMap, top: usize, left: usize, h: usize, w: usize, id: u16) {
    for i in top..(top + h).min(map.height) {
        for j in left..(left + w).min(map.width) {
            map.set(i, j, id);
        }
    }
}

/// Places rectangles of `classes` into horizontal slots; every class that
/// passes its Bernoulli draw gets at least one slot while slots remain.
fn place_rects<F>(
    rng: &mut ChaCha8Rng,
    map: &mut SemanticMap,
    classes: &[&ClassStyle],
    count: [usize; 2],
    mut vertical: F,
) where
    F: FnMut(&mut ChaCha8Rng, usize) -> (usize, usize),
{
    let mut wanted: Vec<(&ClassStyle, usize)> = Vec::new();
    for c in classes {
        let placed = rng.gen_bool(c.prob);
        let n = rng.gen_range(count[0]..=count[1]);
        if placed && n > 0 {
            wanted.push((c, n));
        }
    }
    let mut slots: Vec<usize> = (0..map.width / SLOT_WIDTH).collect();
    slots.shuffle(rng);
    let mut order: Vec<&ClassStyle> = wanted.iter().map(|(c, _)| *c).collect();
    for (c, n) in &wanted {
        order.extend(std::iter::repeat_n(*c, n - 1));
    }
    for (c, slot) in order.into_iter().zip(slots) {
        let [w0, w1, h0, h1] = c.size.expect("validated");
        let w = rng.gen_range(w0..=w1).min(SLOT_WIDTH);
        let h = rng.gen_range(h0..=h1);
        let left = slot * SLOT_WIDTH + rng.gen_range(0..=SLOT_WIDTH - w);
        let (top, h) = vertical(rng, h);
        fill_rect(map, top, left, h, w, c.id);
    }
}

/// The semantic layout of scene `seed`.
pub fn generate_layout(spec: &DomainSpec, seed: u64) -> SemanticMap {
    let (hh, ww) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(spec.domain.as_bytes()));
    let l = &spec.layout;
    let sky_h =
        ((hh as f64) * rng.gen_range(l.sky_fraction[0]..=l.sky_fraction[1])).round() as usize;
    let road_h =
        ((hh as f64) * rng.gen_range(l.road_fraction[0]..=l.road_fraction[1])).round() as usize;
    let road_top = hh - road_h.min(hh);
    let sky_h = sky_h.min(road_top);

    let mut map = SemanticMap::filled(hh, ww, spec.band(Role::Ground));
    fill_rect(&mut map, 0, 0, sky_h, ww, spec.band(Role::Sky));
    fill_rect(
        &mut map,
        road_top,
        0,
        hh - road_top,
        ww,
        spec.band(Role::Road),
    );

    let structures: Vec<&ClassStyle> = spec
        .classes
        .iter()
        .filter(|c| c.role == Role::Structure)
        .collect();
    let horizon = road_top.max(1);
    place_rects(&mut rng, &mut map, &structures, l.building_count, |_, h| {
        let h = h.min(horizon);
        (horizon - h, h)
    });

    let road = spec.band(Role::Road);
    for c in spec.classes.iter().filter(|c| c.role == Role::Marking) {
        if rng.gen_bool(c.prob) && hh > road_top + 1 {
            let row = road_top + (hh - road_top) / 2;
            let phase = rng.gen_range(0..6);
            for j in 0..ww {
                if (j + phase) % 6 < 3 && map.get(row, j) == road {
                    map.set(row, j, c.id);
                }
            }
        }
    }

    let objects: Vec<&ClassStyle> = spec
        .classes
        .iter()
        .filter(|c| c.role == Role::Object)
        .collect();
    let road_h = hh - road_top;
    place_rects(&mut rng, &mut map, &objects, l.object_count, |rng, h| {
        let h = h.min(road_h.max(1));
        let bottom = road_top + rng.gen_range(h.min(road_h)..=road_h);
        (bottom.saturating_sub(h), h)
    });
    map
}

/// Colors `mask` with the domain palette.
pub fn render(mask: &SemanticMap, spec: &DomainSpec, seed: u64) -> Result<Tensor> {
    let (hh, ww) = (mask.height, mask.width);
    let mut data = vec![0.0; 3 * hh * ww];
    let noise_seed = seed ^ fnv1a64(spec.domain.as_bytes()).rotate_left(17);
    for i in 0..hh {
        for j in 0..ww {
            let id = mask.get(i, j);
            let st = spec.style(id).ok_or_else(|| {
                Error::Validation(format!("class id {id} has no style in `{}`", spec.domain))
            })?;
            let stripe = match st.stripe_period {
                Some(p) if (i / p.div_ceil(2)) % 2 == 0 => STRIPE_AMPLITUDE,
                Some(_) => -STRIPE_AMPLITUDE,
                None => 0.0,
            };
            for ch in 0..3 {
                let n = if st.noise > 0.0 {
                    st.noise * hash_noise(noise_seed, i, j, ch)
                } else {
                    0.0
                };
                data[(ch * hh + i) * ww + j] = (st.color[ch] + n + stripe).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(&[1, 3, hh, ww], data)
}

pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Scene {
    let mask = generate_layout(spec, seed);
    let image = render(&mask, spec, seed).expect("layout only uses spec classes");
    Scene { mask, image, seed }
}

/// Scenes with seeds `seed..seed + n`; a prefix of length `k` equals
/// `make_dataset(spec, k, seed)`.
pub fn make_dataset(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::Validation("dataset size must be >= 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| generate_scene(spec, seed + i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_match_registry() {
        let reg = toy_registry();
        for d in ["domain_a", "domain_b", "domain_c"] {
            DomainSpec::builtin(d)
                .unwrap()
                .check_registry(&reg)
                .unwrap();
        }
        assert_eq!(reg.total_classes(1).unwrap(), 9);
        assert_eq!(reg.total_classes(2).unwrap(), 12);
    }

    #[test]
    fn layouts_are_deterministic() {
        let spec = DomainSpec::builtin("domain_b").unwrap();
        assert_eq!(generate_scene(&spec, 9), generate_scene(&spec, 9));
        assert_ne!(generate_layout(&spec, 9), generate_layout(&spec, 10));
    }

    #[test]
    fn zero_building_range_places_no_buildings() {
        let mut spec = DomainSpec::builtin("domain_a").unwrap();
        spec.layout.building_count = [0, 0];
        for s in 0..50 {
            assert_eq!(generate_layout(&spec, s).count(3), 0);
        }
    }

    #[test]
    fn flat_style_renders_base_color() {
        let mut spec = DomainSpec::builtin("domain_a").unwrap();
        for c in &mut spec.classes {
            c.noise = 0.0;
            c.stripe_period = None;
        }
        let sc = generate_scene(&spec, 3);
        let (h, w) = (spec.height, spec.width);
        for i in 0..h {
            for j in 0..w {
                let col = spec.style(sc.mask.get(i, j)).unwrap().color;
                for (ch, &c) in col.iter().enumerate() {
                    assert_eq!(sc.image.data()[(ch * h + i) * w + j], c);
                }
            }
        }
    }

    #[test]
    fn clamp_keeps_range() {
        let mut spec = DomainSpec::builtin("domain_a").unwrap();
        spec.classes[0].color = [1.0, 1.0, 1.0];
        spec.classes[0].noise = 0.5;
        let sc = generate_scene(&spec, 1);
        assert!(sc.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unknown_class_is_rejected_by_render() {
        let spec = DomainSpec::builtin("domain_a").unwrap();
        let map = SemanticMap::filled(4, 8, 9);
        assert!(matches!(render(&map, &spec, 0), Err(Error::Validation(_))));
    }
}
