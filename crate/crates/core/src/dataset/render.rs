//! Flat-shaded cuboid renderer used by the synthetic scene generator.
//!
//! Textures are attached to 3D surfaces, so a surface point has the same
//! color in both views and stereo correspondence is well defined. Ground
//! shading depends only on depth, which keeps the background identical
//! across a rectified pair.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::box3d::OrientedBox3D;
use crate::geometry::{ProjectionMatrix, Vec3};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shading {
    /// Direction towards the light, camera frame.
    pub light_dir: Vec3,
    pub ambient: f64,
    /// Edge length of a texture cell on object faces, meters.
    pub texture_cell_m: f64,
    /// Relative brightness swing of the face texture.
    pub texture_contrast: f64,
    pub sky: [f64; 3],
    pub ground: [f64; 3],
    /// Depth of one ground stripe, meters.
    pub ground_stripe_m: f64,
}

impl Default for Shading {
    fn default() -> Self {
        Shading {
            light_dir: [-0.4, -1.0, -0.5],
            ambient: 0.35,
            texture_cell_m: 0.2,
            texture_contrast: 0.5,
            sky: [0.70, 0.80, 0.90],
            ground: [0.38, 0.36, 0.33],
            ground_stripe_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub box3d: OrientedBox3D,
    pub albedo: [f64; 3],
    pub texture_seed: u64,
}

pub struct RenderedView {
    pub image: Tensor4,
    /// Object index owning each pixel, row-major; `-1` for background.
    pub ids: Vec<i32>,
    /// Pixels each object would cover if nothing occluded it.
    pub silhouette_px: Vec<usize>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn hash_unit(parts: &[u64]) -> f64 {
    let h = parts.iter().fold(0u64, |acc, &p| splitmix(acc ^ p));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Back-projection of a camera matrix `[M | p4]`: center and pixel rays.
struct Camera {
    center: Vec3,
    m_inv: [[f64; 3]; 3],
}

impl Camera {
    fn new(p: &ProjectionMatrix) -> Self {
        let r = p.rows();
        let m = [
            [r[0][0], r[0][1], r[0][2]],
            [r[1][0], r[1][1], r[1][2]],
            [r[2][0], r[2][1], r[2][2]],
        ];
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
            }
        }
        let p4 = [r[0][3], r[1][3], r[2][3]];
        let mut center = [0.0; 3];
        for i in 0..3 {
            center[i] = -dot(inv[i], p4);
        }
        Camera { center, m_inv: inv }
    }

    fn ray(&self, u: f64, v: f64) -> Vec3 {
        let h = [u, v, 1.0];
        [
            dot(self.m_inv[0], h),
            dot(self.m_inv[1], h),
            dot(self.m_inv[2], h),
        ]
    }
}

struct Face {
    corners: [usize; 4],
    /// Box-local axis that is constant on the face: 0 length, 1 height, 2 width.
    fixed_axis: usize,
}

const FACES: [Face; 6] = [
    Face {
        corners: [0, 1, 5, 4],
        fixed_axis: 2,
    },
    Face {
        corners: [1, 2, 6, 5],
        fixed_axis: 0,
    },
    Face {
        corners: [2, 3, 7, 6],
        fixed_axis: 2,
    },
    Face {
        corners: [3, 0, 4, 7],
        fixed_axis: 0,
    },
    Face {
        corners: [0, 1, 2, 3],
        fixed_axis: 1,
    },
    Face {
        corners: [4, 5, 6, 7],
        fixed_axis: 1,
    },
];

/// Calls `paint(pixel index, face index, surface point)` for every pixel
/// center covered by a camera-facing face of `b`.
fn rasterize<F: FnMut(usize, usize, Vec3)>(
    p: &ProjectionMatrix,
    cam: &Camera,
    size: (usize, usize),
    b: &OrientedBox3D,
    mut paint: F,
) {
    let corners = b.corners();
    let centroid = b.centroid();
    let (w, h) = size;
    for (fi, face) in FACES.iter().enumerate() {
        let pts = face.corners.map(|k| corners[k]);
        let fc = [
            0.25 * (pts[0][0] + pts[1][0] + pts[2][0] + pts[3][0]),
            0.25 * (pts[0][1] + pts[1][1] + pts[2][1] + pts[3][1]),
            0.25 * (pts[0][2] + pts[1][2] + pts[2][2] + pts[3][2]),
        ];
        let n = normalized(sub(fc, centroid));
        if dot(n, sub(cam.center, fc)) <= 0.0 {
            continue;
        }
        let mut uv = [[0.0; 2]; 4];
        let mut ok = true;
        for (k, q) in pts.iter().enumerate() {
            match p.project(q) {
                Ok(x) => uv[k] = x,
                Err(_) => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let area: f64 = (0..4)
            .map(|k| {
                let (a, c) = (uv[k], uv[(k + 1) % 4]);
                a[0] * c[1] - c[0] * a[1]
            })
            .sum();
        if area.abs() < 1e-12 {
            continue;
        }
        let sign = area.signum();
        let min_u = uv.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let max_u = uv.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_v = uv.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let max_v = uv.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        let j0 = (min_u - 0.5).ceil().max(0.0) as usize;
        let i0 = (min_v - 0.5).ceil().max(0.0) as usize;
        let j1 = ((max_u - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let i1 = ((max_v - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if j1 < 0.0 || i1 < 0.0 {
            continue;
        }
        for i in i0..=i1 as usize {
            let v = i as f64 + 0.5;
            for j in j0..=j1 as usize {
                let u = j as f64 + 0.5;
                let inside = (0..4).all(|k| {
                    let (a, c) = (uv[k], uv[(k + 1) % 4]);
                    sign * ((c[0] - a[0]) * (v - a[1]) - (c[1] - a[1]) * (u - a[0])) >= 0.0
                });
                if !inside {
                    continue;
                }
                let d = cam.ray(u, v);
                let t = dot(n, sub(fc, cam.center)) / dot(n, d);
                let x = [
                    cam.center[0] + t * d[0],
                    cam.center[1] + t * d[1],
                    cam.center[2] + t * d[2],
                ];
                paint(i * w + j, fi, x);
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Box-local `(length, height, width)` coordinates of a camera-frame point.
fn local(b: &OrientedBox3D, x: Vec3) -> [f64; 3] {
    let (s, c) = b.yaw.sin_cos();
    let dx = x[0] - b.center[0];
    let dz = x[2] - b.center[2];
    [c * dx - s * dz, x[1] - b.center[1], s * dx + c * dz]
}

/// Renders the ground plane at `ground_y` and `objects` through camera `p`.
/// Objects are painted far to near.
pub fn render_view(
    p: &ProjectionMatrix,
    size: (usize, usize),
    ground_y: f64,
    objects: &[SceneObject],
    shading: &Shading,
) -> RenderedView {
    let (w, h) = size;
    let cam = Camera::new(p);
    let plane = w * h;
    let mut rgb = vec![0.0; 3 * plane];
    let mut ids = vec![-1i32; plane];

    for i in 0..h {
        let d = cam.ray(0.5 * w as f64, i as f64 + 0.5);
        let t = (ground_y - cam.center[1]) / d[1];
        let color = if d[1] > 0.0 && t > 0.0 {
            let z = cam.center[2] + t * d[2];
            let stripe = (z / shading.ground_stripe_m).floor() as i64 as u64;
            let k = 0.85 + 0.3 * hash_unit(&[0x6772_6f75_6e64, stripe]);
            shading.ground.map(|g| g * k)
        } else {
            shading.sky
        };
        for j in 0..w {
            for c in 0..3 {
                rgb[c * plane + i * w + j] = color[c];
            }
        }
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    let dist = |k: usize| {
        let d = sub(objects[k].box3d.centroid(), cam.center);
        dot(d, d)
    };
    order.sort_by(|&a, &b| dist(b).total_cmp(&dist(a)).then(a.cmp(&b)));

    let light = normalized(shading.light_dir);
    for &k in &order {
        let obj = &objects[k];
        let b = &obj.box3d;
        let centroid = b.centroid();
        rasterize(p, &cam, size, b, |px, fi, x| {
            let f = &FACES[fi];
            let corners = b.corners();
            let fc = f.corners.map(|q| corners[q]);
            let mid = [
                0.25 * (fc[0][0] + fc[1][0] + fc[2][0] + fc[3][0]),
                0.25 * (fc[0][1] + fc[1][1] + fc[2][1] + fc[3][1]),
                0.25 * (fc[0][2] + fc[1][2] + fc[2][2] + fc[3][2]),
            ];
            let n = normalized(sub(mid, centroid));
            let lambert = shading.ambient + (1.0 - shading.ambient) * dot(n, light).max(0.0);
            let l = local(b, x);
            let (a0, a1) = match f.fixed_axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let cell = |v: f64| (v / shading.texture_cell_m).floor() as i64 as u64;
            let noise = hash_unit(&[obj.texture_seed, fi as u64, cell(l[a0]), cell(l[a1])]);
            let tex = 1.0 + shading.texture_contrast * (noise - 0.5);
            for c in 0..3 {
                rgb[c * plane + px] = obj.albedo[c] * lambert * tex;
            }
            ids[px] = k as i32;
        });
    }

    let silhouette_px = objects
        .iter()
        .map(|o| {
            let mut mask = vec![false; plane];
            rasterize(p, &cam, size, &o.box3d, |px, _, _| mask[px] = true);
            mask.iter().filter(|&&m| m).count()
        })
        .collect();

    rgb.iter_mut().for_each(|v| *v = quantize(*v));
    RenderedView {
        image: Tensor4::from_vec([1, 3, h, w], rgb).expect("image dims"),
        ids,
        silhouette_px,
    }
}
