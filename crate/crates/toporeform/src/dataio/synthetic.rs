//! Deterministic synthetic fixtures: point clouds for the topology tests
//! and a procedurally rendered digit set for desk-scale training runs.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, IMAGE_SIDE};
use crate::rng::stream_rng;
use crate::topology::PointCloud;

/// Shape family for generated point clouds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudKind {
    /// Well-separated Gaussian clusters on a line of centers.
    Blobs,
    /// A noisy ring in the first two coordinates.
    Circle,
    /// Collinear points with strictly growing gaps (positions 0, 1, 3, 6, ...).
    Line,
}

/// Cluster centers used by `CloudKind::Blobs`; gaps 10, 15, 20 are the
/// inter-cluster MST edges the tests look for.
pub const BLOB_CENTERS: [f64; 4] = [0.0, 10.0, 25.0, 45.0];
pub const BLOB_SPREAD: f64 = 0.05;

/// Deterministic point-cloud generator for tests and demos.
pub fn synthetic_clouds(kind: CloudKind, n: usize, dim: usize, seed: u64) -> PointCloud {
    assert!(n >= 1 && dim >= 1, "cloud needs n >= 1, dim >= 1");
    let mut rng = stream_rng(seed, 95);
    let mut data = vec![0.0; n * dim];
    match kind {
        CloudKind::Line => {
            // Triangular positions 0, 1, 3, 6 ... along the first axis.
            for i in 0..n {
                data[i * dim] = (i * (i + 1) / 2) as f64;
            }
        }
        CloudKind::Circle => {
            for i in 0..n {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                data[i * dim] = angle.cos() + 0.02 * rng.sample::<f64, _>(StandardNormal);
                if dim > 1 {
                    data[i * dim + 1] = angle.sin() + 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        CloudKind::Blobs => {
            for i in 0..n {
                let center = BLOB_CENTERS[i % BLOB_CENTERS.len()];
                data[i * dim] = center + BLOB_SPREAD * rng.sample::<f64, _>(StandardNormal);
                for d in 1..dim {
                    data[i * dim + d] = BLOB_SPREAD * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    PointCloud::new(n, dim, data).expect("generated cloud is finite")
}

// ---- procedural digits --------------------------------------------------

/// A glyph stroke in canonical [-1, 1]^2 coordinates, y pointing up.
enum Stroke {
    Seg([f64; 2], [f64; 2]),
    /// Elliptical arc swept from `a0` to `a1` (radians, counterclockwise).
    Arc { c: [f64; 2], rx: f64, ry: f64, a0: f64, a1: f64 },
}

fn glyph(class: usize) -> Vec<Stroke> {
    use std::f64::consts::PI;
    use Stroke::*;
    let deg = PI / 180.0;
    match class {
        0 => vec![Arc { c: [0.0, 0.0], rx: 0.52, ry: 0.72, a0: 0.0, a1: 360.0 * deg }],
        1 => vec![Seg([-0.3, 0.45], [0.0, 0.75]), Seg([0.0, 0.75], [0.0, -0.75])],
        2 => vec![
            Arc { c: [0.0, 0.35], rx: 0.45, ry: 0.38, a0: 170.0 * deg, a1: -10.0 * deg },
            Seg([0.42, 0.25], [-0.45, -0.75]),
            Seg([-0.45, -0.75], [0.5, -0.75]),
        ],
        3 => vec![
            Arc { c: [-0.02, 0.37], rx: 0.42, ry: 0.38, a0: 150.0 * deg, a1: -90.0 * deg },
            Arc { c: [-0.02, -0.37], rx: 0.45, ry: 0.4, a0: 90.0 * deg, a1: -150.0 * deg },
        ],
        4 => vec![
            Seg([0.15, 0.75], [-0.5, -0.15]),
            Seg([-0.5, -0.15], [0.45, -0.15]),
            Seg([0.2, 0.4], [0.2, -0.75]),
        ],
        5 => vec![
            Seg([0.4, 0.75], [-0.35, 0.75]),
            Seg([-0.35, 0.75], [-0.38, 0.05]),
            Arc { c: [-0.05, -0.32], rx: 0.47, ry: 0.45, a0: 100.0 * deg, a1: -140.0 * deg },
        ],
        6 => vec![
            Arc { c: [-0.02, -0.3], rx: 0.42, ry: 0.42, a0: 0.0, a1: 360.0 * deg },
            Seg([-0.4, -0.05], [0.12, 0.78]),
        ],
        7 => vec![Seg([-0.45, 0.75], [0.48, 0.75]), Seg([0.48, 0.75], [-0.1, -0.75])],
        8 => vec![
            Arc { c: [0.0, 0.4], rx: 0.33, ry: 0.33, a0: 0.0, a1: 360.0 * deg },
            Arc { c: [0.0, -0.38], rx: 0.42, ry: 0.4, a0: 0.0, a1: 360.0 * deg },
        ],
        9 => vec![
            Arc { c: [0.02, 0.32], rx: 0.4, ry: 0.4, a0: 0.0, a1: 360.0 * deg },
            Seg([0.42, 0.3], [0.2, -0.75]),
        ],
        _ => unreachable!("ten digit classes"),
    }
}

/// Flattens a stroke into a polyline in transformed pixel coordinates.
fn polyline(stroke: &Stroke, xf: &dyn Fn([f64; 2]) -> [f64; 2]) -> Vec<[f64; 2]> {
    match stroke {
        Stroke::Seg(a, b) => vec![xf(*a), xf(*b)],
        Stroke::Arc { c, rx, ry, a0, a1 } => (0..=24)
            .map(|i| {
                let t = a0 + (a1 - a0) * i as f64 / 24.0;
                xf([c[0] + rx * t.cos(), c[1] + ry * t.sin()])
            })
            .collect(),
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Renders one jittered digit into a 28x28 intensity map in [0, 1].
fn render_digit(class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let theta: f64 = rng.gen_range(-0.18..0.18);
    let scale: f64 = rng.gen_range(0.82..1.05);
    let shear: f64 = rng.gen_range(-0.12..0.12);
    let tx: f64 = rng.gen_range(-0.12..0.12);
    let ty: f64 = rng.gen_range(-0.12..0.12);
    let half_width: f64 = rng.gen_range(0.07..0.13);
    let ink: f64 = rng.gen_range(0.85..1.0);

    let (s, c) = theta.sin_cos();
    let to_px = move |p: [f64; 2]| -> [f64; 2] {
        let x = scale * (c * p[0] - s * p[1] + shear * p[1]) + tx;
        let y = scale * (s * p[0] + c * p[1]) + ty;
        [(x + 1.15) / 2.3 * 24.0 + 2.0, (1.15 - y) / 2.3 * 24.0 + 2.0]
    };

    let polylines: Vec<Vec<[f64; 2]>> = glyph(class).iter().map(|st| polyline(st, &to_px)).collect();
    let w_px = half_width * 24.0 / 2.3;

    let mut img = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for (idx, v) in img.iter_mut().enumerate() {
        let p = [(idx % IMAGE_SIDE) as f64 + 0.5, (idx / IMAGE_SIDE) as f64 + 0.5];
        let mut d = f64::INFINITY;
        for line in &polylines {
            for seg in line.windows(2) {
                d = d.min(dist_to_segment(p, seg[0], seg[1]));
            }
        }
        let v0 = ((w_px + 0.6 - d) / 1.2).clamp(0.0, 1.0) * ink;
        let noisy = v0 + 0.02 * rng.sample::<f64, _>(StandardNormal);
        *v = noisy.clamp(0.0, 1.0);
    }
    img
}

/// A deterministic ten-class handwritten-style digit set: class `i % 10`,
/// one jitter stream per sample. Stands in for file-based data wherever a
/// config asks for the `synthetic` source.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let mut images = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut rng = stream_rng(seed, 0x6469_0000 + i as u64);
        images.extend(render_digit(class, &mut rng));
        labels.push(class);
    }
    Dataset::new(images, labels, 10).expect("generated dataset is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{pairwise_distances, persistence0};

    #[test]
    fn line_cloud_reproduces_the_collinear_hand_case() {
        let c = synthetic_clouds(CloudKind::Line, 3, 1, 0);
        assert_eq!(c.row(0), &[0.0]);
        assert_eq!(c.row(1), &[1.0]);
        assert_eq!(c.row(2), &[3.0]);
        let (pairing, diagram) = persistence0(&pairwise_distances(&c));
        assert_eq!(pairing.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(diagram.bars(), &[(0.0, 1.0), (0.0, 2.0)]);
    }

    #[test]
    fn blob_gaps_show_up_as_longest_mst_edges() {
        let c = synthetic_clouds(CloudKind::Blobs, 40, 3, 7);
        let (_, diagram) = persistence0(&pairwise_distances(&c));
        let mut deaths: Vec<f64> = diagram.bars().iter().map(|(_, d)| *d).collect();
        deaths.sort_by(f64::total_cmp);
        let top3 = &deaths[deaths.len() - 3..];
        // Center gaps are 10, 15, 20; cluster spread perturbs by well under 1.
        assert!((top3[0] - 10.0).abs() < 1.0, "{top3:?}");
        assert!((top3[1] - 15.0).abs() < 1.0);
        assert!((top3[2] - 20.0).abs() < 1.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synthetic_clouds(CloudKind::Circle, 24, 4, 3);
        let b = synthetic_clouds(CloudKind::Circle, 24, 4, 3);
        assert_eq!(a, b);
        let d1 = synthetic_digits(20, 11);
        let d2 = synthetic_digits(20, 11);
        assert_eq!(d1.image(7), d2.image(7));
    }

    #[test]
    fn digits_are_valid_images() {
        let d = synthetic_digits(30, 0);
        assert_eq!(d.len(), 30);
        assert_eq!(d.class_count(), 10);
        for i in 0..d.len() {
            assert_eq!(d.label(i), i % 10);
            let img = d.image(i);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Strokes must leave visible ink.
            assert!(img.iter().sum::<f64>() > 5.0, "image {i} nearly blank");
        }
    }
}
