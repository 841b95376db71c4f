//! A 32×32 disc renderer whose appearance is driven by attribute values,
//! and the centroid estimator that reads the position attribute back.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::io::{save_gray, save_rgb};
use super::{Manifest, SampleRecord, SampleSource};
use crate::attribute::{normalize, AttributeRegistry, AttributeValue};
use crate::error::{Error, Result};

pub const CANVAS: usize = 32;
pub const CENTER_Y: f64 = 16.0;
/// Disc centre x at normalized position 0 and 1.
pub const X_MIN: f64 = 9.0;
pub const X_MAX: f64 = 23.0;
pub const RADIUS: f64 = 5.0;
const SUPERSAMPLE: usize = 4;
const DISC_COLOR: [f64; 3] = [0.62, 0.36, 0.16];

/// What a bound attribute controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// Horizontal disc position.
    Position,
    /// Direction of a linear shading gradient across the disc, one turn
    /// over the domain.
    Shading,
    /// Disc radius grows while background stripes tighten.
    DollyZoom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRenderer {
    /// Attribute name to binding; each binding kind appears at most once.
    pub bindings: BTreeMap<String, Binding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `[3, 32, 32]` in `[0, 1]`
    pub rgb: Array3<f64>,
    /// Sphere-like height inside the disc, 0 outside.
    pub depth: Array2<f64>,
}

struct Scene {
    cx: f64,
    radius: f64,
    light: Option<f64>,
    stripe_period: Option<f64>,
}

impl ToyRenderer {
    pub fn new(bindings: impl IntoIterator<Item = (String, Binding)>) -> Result<Self> {
        let bindings: BTreeMap<String, Binding> = bindings.into_iter().collect();
        let mut kinds: Vec<Binding> = bindings.values().copied().collect();
        kinds.sort_by_key(|b| *b as u8);
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("each renderer binding may be used once".into()));
        }
        Ok(Self { bindings })
    }

    pub fn position(name: &str) -> Self {
        Self {
            bindings: [(name.to_string(), Binding::Position)].into(),
        }
    }

    fn scene(&self, values: &AttributeValue, registry: &AttributeRegistry) -> Result<Scene> {
        let mut scene = Scene {
            cx: (X_MIN + X_MAX) / 2.0,
            radius: RADIUS,
            light: None,
            stripe_period: None,
        };
        for (name, binding) in &self.bindings {
            let spec = registry.require(name)?;
            let v = values
                .get(name)
                .ok_or_else(|| Error::MissingAttribute(name.clone()))?;
            let u = normalize(spec, v)?;
            match binding {
                Binding::Position => scene.cx = X_MIN + (X_MAX - X_MIN) * u,
                Binding::Shading => scene.light = Some(TAU * u),
                Binding::DollyZoom => {
                    scene.radius = 3.5 + 4.0 * u;
                    scene.stripe_period = Some(12.0 - 8.0 * u);
                }
            }
        }
        Ok(scene)
    }

    pub fn render(&self, values: &AttributeValue, registry: &AttributeRegistry) -> Result<RenderOutput> {
        let scene = self.scene(values, registry)?;
        let mut rgb = Array3::zeros((3, CANVAS, CANVAS));
        let mut depth = Array2::zeros((CANVAS, CANVAS));
        let n = SUPERSAMPLE as f64;
        let r2 = scene.radius * scene.radius;
        for i in 0..CANVAS {
            for j in 0..CANVAS {
                let mut acc = [0.0; 3];
                let mut height = 0.0;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let x = j as f64 + (sj as f64 + 0.5) / n;
                        let y = i as f64 + (si as f64 + 0.5) / n;
                        let (dx, dy) = (x - scene.cx, y - CENTER_Y);
                        let d2 = dx * dx + dy * dy;
                        let color = if d2 <= r2 {
                            height += (1.0 - d2 / r2).sqrt();
                            let shade = scene
                                .light
                                .map_or(1.0, |a| 0.7 + 0.3 * (dx * a.cos() + dy * a.sin()) / scene.radius);
                            DISC_COLOR.map(|c| c * shade)
                        } else {
                            let bg = scene
                                .stripe_period
                                .map_or(1.0, |p| 0.9 + 0.1 * (TAU * x / p).cos());
                            [bg; 3]
                        };
                        for c in 0..3 {
                            acc[c] += color[c];
                        }
                    }
                }
                let count = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    rgb[[c, i, j]] = acc[c] / count;
                }
                depth[[i, j]] = height / count;
            }
        }
        Ok(RenderOutput { rgb, depth })
    }
}

/// Template for a rendered record: the object slot plus one slot per
/// attribute, in registry order.
pub fn render_template(names: &[&str]) -> String {
    let slots: String = names.iter().map(|n| format!("<attr:{n}> ")).collect();
    format!("a {slots}photo of <obj>")
}

pub fn render_id(index: usize) -> String {
    format!("r{index:04}")
}

/// Renders one record per grid point into `out_dir` and writes the manifest.
pub fn render_toy(
    registry: &AttributeRegistry,
    renderer: &ToyRenderer,
    grid: &[AttributeValue],
    out_dir: &Path,
) -> Result<Manifest> {
    for name in renderer.bindings.keys() {
        registry.require(name)?;
    }
    let mut manifest = Manifest::new(registry.clone(), out_dir);
    for (index, values) in grid.iter().enumerate() {
        let values = registry.resolve(values)?;
        for name in renderer.bindings.keys() {
            if values.get(name).is_none() {
                return Err(Error::MissingAttribute(name.clone()));
            }
        }
        let out = renderer.render(&values, registry)?;
        let id = render_id(index);
        let rgb_path = PathBuf::from("images").join(format!("{id}.png"));
        let depth_path = PathBuf::from("depth").join(format!("{id}.png"));
        save_rgb(&out_dir.join(&rgb_path), &out.rgb)?;
        save_gray(&out_dir.join(&depth_path), &out.depth)?;
        let names: Vec<&str> = registry
            .specs()
            .iter()
            .map(|s| s.name.as_str())
            .filter(|n| values.get(n).is_some())
            .collect();
        manifest.records.push(SampleRecord {
            id,
            rgb_path,
            depth_path: Some(depth_path),
            lineart_path: None,
            prompt_template: render_template(&names),
            attributes: values,
            source: SampleSource::Rendered,
            parent_id: None,
        });
    }
    manifest.save()?;
    Ok(manifest)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Intensity-weighted centroid `(x, y)` in pixel units of whatever differs
/// from the background, taken as the per-channel median of the border.
/// Pixels weaker than a quarter of the strongest difference are ignored.
pub fn object_centroid(rgb: &Array3<f64>) -> Option<(f64, f64)> {
    let (_, h, w) = rgb.dim();
    let border = |c: usize| {
        let mut v = Vec::new();
        for j in 0..w {
            v.push(rgb[[c, 0, j]]);
            v.push(rgb[[c, h - 1, j]]);
        }
        for i in 1..h - 1 {
            v.push(rgb[[c, i, 0]]);
            v.push(rgb[[c, i, w - 1]]);
        }
        median(v)
    };
    let bg = [border(0), border(1), border(2)];
    let weights = Array2::from_shape_fn((h, w), |(i, j)| {
        (0..3).map(|c| (rgb[[c, i, j]] - bg[c]).powi(2)).sum::<f64>().sqrt()
    });
    let max = weights.fold(0.0f64, |m, &v| m.max(v));
    if max <= 1e-6 {
        return None;
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for ((i, j), &wt) in weights.indexed_iter() {
        if wt >= 0.25 * max {
            sw += wt;
            sx += wt * (j as f64 + 0.5);
            sy += wt * (i as f64 + 0.5);
        }
    }
    Some((sx / sw, sy / sw))
}

/// Normalized position attribute implied by a horizontal centroid.
pub fn position_from_centroid(cx: f64) -> f64 {
    (cx - X_MIN) / (X_MAX - X_MIN)
}

/// Normalized position read back from an image, if any object is visible.
pub fn estimate_position(rgb: &Array3<f64>) -> Option<f64> {
    object_centroid(rgb).map(|(cx, _)| position_from_centroid(cx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribute::AttributeSpec;
    use crate::data::{default_grid, validate_manifest};
    use crate::data::io::load_rgb;

    fn registry() -> AttributeRegistry {
        AttributeRegistry::new(vec![
            AttributeSpec::new("pose", 0.0, 90.0).unwrap(),
            AttributeSpec::new("light", 0.0, 360.0).unwrap().periodic(true),
        ])
        .unwrap()
    }

    #[test]
    fn midpoint_centres_the_disc() {
        let r = ToyRenderer::position("pose");
        let out = r.render(&AttributeValue::new().with("pose", 45.0), &registry()).unwrap();
        let (cx, cy) = object_centroid(&out.rgb).unwrap();
        assert!((cx - 16.0).abs() <= 1.0, "{cx}");
        assert!((cy - 16.0).abs() <= 1.0, "{cy}");
    }

    #[test]
    fn deterministic() {
        let r = ToyRenderer::new([("pose".to_string(), Binding::Position), ("light".to_string(), Binding::Shading)]).unwrap();
        let v = AttributeValue::new().with("pose", 10.0).with("light", 90.0);
        assert_eq!(r.render(&v, &registry()).unwrap(), r.render(&v, &registry()).unwrap());
    }

    #[test]
    fn shading_changes_with_light_only_on_disc() {
        let r = ToyRenderer::new([("pose".to_string(), Binding::Position), ("light".to_string(), Binding::Shading)]).unwrap();
        let a = r.render(&AttributeValue::new().with("pose", 45.0).with("light", 0.0), &registry()).unwrap();
        let b = r.render(&AttributeValue::new().with("pose", 45.0).with("light", 180.0), &registry()).unwrap();
        // light from the left vs right: brighter side flips
        assert!(a.rgb[[0, 16, 19]] > a.rgb[[0, 16, 13]]);
        assert!(b.rgb[[0, 16, 19]] < b.rgb[[0, 16, 13]]);
        assert_eq!(a.rgb[[0, 2, 2]], b.rgb[[0, 2, 2]]);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn duplicate_binding_rejected() {
        assert!(ToyRenderer::new([("a".to_string(), Binding::Position), ("b".to_string(), Binding::Position)]).is_err());
    }

    #[test]
    fn render_toy_writes_valid_manifest() {
        let reg = AttributeRegistry::new(vec![AttributeSpec::new("pose", 0.0, 90.0).unwrap()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fresh/sub");
        let grid = default_grid(reg.specs()).unwrap();
        let m = render_toy(&reg, &ToyRenderer::position("pose"), &grid, &out).unwrap();
        assert_eq!(m.records.len(), 18);
        assert_eq!(validate_manifest(&m), vec![]);
        assert_eq!(m.records[3].prompt_template, "a <attr:pose> photo of <obj>");

        let mut worst: f64 = 0.0;
        for r in &m.records {
            let img = load_rgb(&m.resolve(&r.rgb_path)).unwrap();
            let truth = r.attributes.get("pose").unwrap() / 90.0;
            worst = worst.max((estimate_position(&img).unwrap() - truth).abs());
        }
        assert!(worst <= 0.05, "{worst}");
    }

    #[test]
    fn depth_is_zero_outside_disc() {
        let r = ToyRenderer::position("pose");
        let out = r.render(&AttributeValue::new().with("pose", 0.0), &registry()).unwrap();
        assert_eq!(out.depth[[16, 30]], 0.0);
        assert!(out.depth[[16, 9]] > 0.9);
    }
}
