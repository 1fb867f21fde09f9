//! Spherical range-image projection, yaw rotation, column shifts and
//! cross-frame reprojection.
//!
//! Pixel coordinates follow the usual spinning-LiDAR convention: column `u`
//! grows clockwise from the rear of the sensor so that the forward axis
//! (azimuth 0) lands in the middle column, and row `v` grows downwards.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

/// Sentinel stored in invalid range-image cells.
pub const INVALID_RANGE: f32 = -1.0;

/// Points closer than this to the sensor origin are discarded.
pub const MIN_POINT_RANGE: f64 = 1e-6;

const SQRI_MAGIC: &[u8; 4] = b"SQRI";
const SQRI_VERSION: u8 = 1;

/// A LiDAR scan in the sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    /// Per-point intensity as read from disk. Never used by the pipeline.
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Image geometry of a spinning LiDAR.
///
/// Rows are assigned with `v = floor((1 - (pitch + fov_up) / fov) * h)`
/// where `fov = fov_up + fov_down`, so the covered elevation band is
/// `[-fov_up, fov_down)`. With a symmetric field of view the two names are
/// interchangeable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub width: usize,
    pub height: usize,
    /// Radians.
    pub fov_up: f64,
    /// Radians.
    pub fov_down: f64,
}

impl SensorModel {
    pub fn new(width: usize, height: usize, fov_up: f64, fov_down: f64) -> Result<Self> {
        let s = Self {
            width,
            height,
            fov_up,
            fov_down,
        };
        s.validate()?;
        Ok(s)
    }

    /// 32 x 900 images with a symmetric 30 degree vertical field of view.
    pub fn full_scale() -> Self {
        Self {
            width: 900,
            height: 32,
            fov_up: 15f64.to_radians(),
            fov_down: 15f64.to_radians(),
        }
    }

    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSensor(format!(
                "image must be at least 1x1, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov() > 0.0) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(Error::InvalidFov {
                fov_up: self.fov_up,
                fov_down: self.fov_down,
            });
        }
        Ok(())
    }

    /// Azimuthal width of one column in radians.
    pub fn column_angle(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Continuous pixel coordinates of a point, or `None` for points too
    /// close to the origin.
    pub fn pixel_coords(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r < MIN_POINT_RANGE {
            return None;
        }
        let yaw = p[1].atan2(p[0]);
        let pitch = (p[2] / r).clamp(-1.0, 1.0).asin();
        let u = 0.5 * (1.0 - yaw / PI) * self.width as f64;
        let v = (1.0 - (pitch + self.fov_up) / self.fov()) * self.height as f64;
        Some((u, v, r))
    }

    /// Integer pixel for a point. Columns wrap (azimuth -pi is the same
    /// direction as +pi); rows outside the image yield `None`.
    pub fn pixel(&self, p: [f64; 3]) -> Option<(usize, usize, f64)> {
        let (u, v, r) = self.pixel_coords(p)?;
        let (u, v) = (u.floor(), v.floor());
        if !(v >= 0.0 && v < self.height as f64) || !u.is_finite() {
            return None;
        }
        let w = self.width as i64;
        let u = (u as i64).rem_euclid(w) as usize;
        Some((u, v as usize, r))
    }

    /// Unit ray through the centre of pixel `(u, v)`.
    pub fn pixel_direction(&self, u: usize, v: usize) -> [f64; 3] {
        let yaw = PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64);
        let pitch = (1.0 - (v as f64 + 0.5) / self.height as f64) * self.fov() - self.fov_up;
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        [cp * cy, cp * sy, sp]
    }
}

/// `h x w` grid of ranges with a validity mask. Invalid cells hold
/// [`INVALID_RANGE`].
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
    mask: Vec<bool>,
}

impl RangeImage {
    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![INVALID_RANGE; height * width],
            mask: vec![false; height * width],
        }
    }

    /// Builds an image from raw row-major values; cells `<= 0` are invalid.
    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width),
                found: format!("{} values", values.len()),
            });
        }
        let mut data = values;
        let mut mask = Vec::with_capacity(data.len());
        for v in data.iter_mut() {
            let valid = *v > 0.0 && v.is_finite();
            if !valid {
                *v = INVALID_RANGE;
            }
            mask.push(valid);
        }
        Ok(Self {
            height,
            width,
            data,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Row-major values, invalid cells are [`INVALID_RANGE`].
    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, v: usize, u: usize) -> Option<f32> {
        let i = v * self.width + u;
        self.mask[i].then_some(self.data[i])
    }

    pub fn set(&mut self, v: usize, u: usize, range: f32) {
        let i = v * self.width + u;
        if range > 0.0 {
            self.data[i] = range;
            self.mask[i] = true;
        } else {
            self.data[i] = INVALID_RANGE;
            self.mask[i] = false;
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, SQRI_MAGIC, SQRI_VERSION)?;
        binio::write_u32(w, self.height as u32)?;
        binio::write_u32(w, self.width as u32)?;
        binio::write_f32s(w, &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, SQRI_MAGIC, SQRI_VERSION)?;
        let h = binio::read_u32(r)?;
        let w = binio::read_u32(r)?;
        let n = binio::checked_len(&[h, w], 1 << 28)?;
        let values = binio::read_f32s(r, n)?;
        Self::from_values(h as usize, w as usize, values)
    }
}

/// Rigid world-from-sensor transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

const POSE_TOLERANCE: f64 = 1e-6;

impl Pose {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    /// Validates that `m` is a rigid transform: orthonormal rotation block
    /// with determinant +1 and a `(0, 0, 0, 1)` last row.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularPose("non-finite entry".into()));
        }
        let last = m.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > POSE_TOLERANCE
        {
            return Err(Error::SingularPose(format!(
                "last row must be (0, 0, 0, 1), got {last}"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > POSE_TOLERANCE || r.determinant() < 0.0 {
            return Err(Error::SingularPose(format!(
                "rotation block not orthonormal (deviation {err:.3e})"
            )));
        }
        Ok(Self(m))
    }

    /// Row-major 3x4 `[R | t]`, the KITTI pose line layout.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        Self::from_matrix(m)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Planar pose: rotation `yaw` about +z, then translation.
    pub fn from_yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let m = Matrix4::new(
            c, -s, 0.0, t[0],
            s,  c, 0.0, t[1],
            0.0, 0.0, 1.0, t[2],
            0.0, 0.0, 0.0, 1.0,
        );
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]]
    }

    /// Heading of the sensor x axis in the world xy plane.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    pub fn inverse(&self) -> Self {
        let r = self.0.fixed_view::<3, 3>(0, 0).transpose();
        let t = Vector3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]);
        let ti = -(r * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m[(0, 3)] = ti[0];
        m[(1, 3)] = ti[1];
        m[(2, 3)] = ti[2];
        Self(m)
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)] * p[2] + m[(0, 3)],
            m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)] * p[2] + m[(1, 3)],
            m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)] * p[2] + m[(2, 3)],
        ]
    }

    /// Distance between the two sensor origins.
    pub fn distance_to(&self, other: &Pose) -> f64 {
        let a = self.translation();
        let b = other.translation();
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

fn project_points<I>(points: I, sensor: &SensorModel) -> RangeImage
where
    I: IntoIterator<Item = [f64; 3]>,
{
    let (h, w) = (sensor.height, sensor.width);
    let mut img = RangeImage::invalid(h, w);
    for p in points {
        let Some((u, v, r)) = sensor.pixel(p) else {
            continue;
        };
        let i = v * w + u;
        let r = r as f32;
        if !img.mask[i] || r < img.data[i] {
            img.data[i] = r;
            img.mask[i] = true;
        }
    }
    img
}

fn widen(p: &[f32; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Spherical projection of a cloud; the nearest return wins per pixel.
pub fn project(cloud: &PointCloud, sensor: &SensorModel) -> Result<RangeImage> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    sensor.validate()?;
    Ok(project_points(cloud.points.iter().map(widen), sensor))
}

/// Rotates every point about the sensor z axis by `theta` radians.
pub fn yaw_rotate(cloud: &PointCloud, theta: f64) -> PointCloud {
    let (s, c) = theta.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y) = (p[0] as f64, p[1] as f64);
            [(c * x - s * y) as f32, (s * x + c * y) as f32, p[2]]
        })
        .collect();
    PointCloud {
        points,
        intensity: cloud.intensity.clone(),
    }
}

/// Circular column shift: output column `j` holds input column
/// `(j + s) mod w`. A yaw rotation by `s` columns (`s * 2pi / w` radians)
/// of the input cloud produces exactly this shift of its projection.
pub fn column_shift(image: &RangeImage, s: i64) -> RangeImage {
    let (h, w) = image.shape();
    let mut out = RangeImage::invalid(h, w);
    if w == 0 {
        return out;
    }
    let s = s.rem_euclid(w as i64) as usize;
    for v in 0..h {
        let row = v * w;
        for j in 0..w {
            let src = row + (j + s) % w;
            out.data[row + j] = image.data[src];
            out.mask[row + j] = image.mask[src];
        }
    }
    out
}

/// Projects `cloud_j` as seen from the sensor frame of `pose_i`.
pub fn reproject(
    cloud_j: &PointCloud,
    pose_j: &Pose,
    pose_i: &Pose,
    sensor: &SensorModel,
) -> Result<RangeImage> {
    if cloud_j.is_empty() {
        return Err(Error::EmptyCloud);
    }
    sensor.validate()?;
    // revalidate: poses built with from_yaw_translation skip the checks
    Pose::from_matrix(pose_i.0)?;
    Pose::from_matrix(pose_j.0)?;
    let rel = pose_i.inverse().compose(pose_j);
    Ok(project_points(
        cloud_j.points.iter().map(|p| rel.transform_point(widen(p))),
        sensor,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_sensor() -> SensorModel {
        SensorModel::new(4, 2, PI / 4.0, PI / 4.0).unwrap()
    }

    #[test]
    fn forward_point_lands_mid_image() {
        let img = project(&PointCloud::new(vec![[1.0, 0.0, 0.0]]), &tiny_sensor()).unwrap();
        assert_eq!(img.get(1, 2), Some(1.0));
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn left_point_lands_at_quarter_width() {
        let img = project(&PointCloud::new(vec![[0.0, 1.0, 0.0]]), &tiny_sensor()).unwrap();
        assert_eq!(img.get(1, 1), Some(1.0));
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn full_scale_shape() {
        let cloud = PointCloud::new(vec![[3.0, 1.0, 0.2], [-2.0, 0.5, -0.1]]);
        let img = project(&cloud, &SensorModel::full_scale()).unwrap();
        assert_eq!(img.shape(), (32, 900));
    }

    #[test]
    fn empty_cloud_rejected() {
        let err = project(&PointCloud::default(), &tiny_sensor()).unwrap_err();
        assert_eq!(err.to_string(), "empty point cloud");
    }

    #[test]
    fn degenerate_fov_rejected() {
        let sensor = SensorModel {
            width: 4,
            height: 2,
            fov_up: 0.1,
            fov_down: -0.1,
        };
        let err = project(&PointCloud::new(vec![[1.0, 0.0, 0.0]]), &sensor).unwrap_err();
        assert!(err.to_string().starts_with("invalid field of view"));
    }

    #[test]
    fn nearest_return_wins() {
        let cloud = PointCloud::new(vec![[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let img = project(&cloud, &tiny_sensor()).unwrap();
        assert_eq!(img.get(1, 2), Some(1.0));
    }

    #[test]
    fn near_origin_points_dropped() {
        let cloud = PointCloud::new(vec![[1e-8, 0.0, 0.0]]);
        let img = project(&cloud, &tiny_sensor()).unwrap();
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn out_of_fov_rows_dropped() {
        // 80 degrees up, outside a +-45 degree band
        let cloud = PointCloud::new(vec![[0.1, 0.0, 1.0]]);
        let img = project(&cloud, &tiny_sensor()).unwrap();
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn yaw_rotation_quarter_turn() {
        let c = yaw_rotate(&PointCloud::new(vec![[1.0, 0.0, 0.0]]), PI / 2.0);
        assert!(c.points[0][0].abs() < 1e-7);
        assert!((c.points[0][1] - 1.0).abs() < 1e-7);
        assert_eq!(c.points[0][2], 0.0);
    }

    #[test]
    fn yaw_rotation_identity_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = PointCloud::new(
            (0..100)
                .map(|_| {
                    [
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-50.0..50.0),
                        rng.gen_range(-5.0..5.0),
                    ]
                })
                .collect(),
        );
        assert_eq!(yaw_rotate(&cloud, 0.0), cloud);
        let rotated = yaw_rotate(&cloud, 1.234);
        for (a, b) in cloud.points.iter().zip(&rotated.points) {
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            assert!((na - nb).abs() <= 1e-5 * na);
        }
    }

    #[test]
    fn column_shift_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f32> = (0..6 * 10)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    -1.0
                } else {
                    rng.gen_range(0.5..9.0)
                }
            })
            .collect();
        let img = RangeImage::from_values(6, 10, vals).unwrap();
        assert_eq!(column_shift(&img, 0), img);
        assert_eq!(column_shift(&img, 10), img);
        assert_eq!(column_shift(&img, -20), img);
        assert_eq!(column_shift(&column_shift(&img, 7), -7), img);
        let s = column_shift(&img, 3);
        assert_eq!(s.get(2, 0), img.get(2, 3));
    }

    #[test]
    fn identical_poses_reproject_to_projection() {
        let cloud = PointCloud::new(vec![[4.0, 1.0, 0.3], [-3.0, -2.0, -0.4], [0.5, 6.0, 0.0]]);
        let sensor = SensorModel::new(36, 8, 0.4, 0.4).unwrap();
        let pose = Pose::from_yaw_translation(0.7, [10.0, -3.0, 1.5]);
        let a = reproject(&cloud, &pose, &pose, &sensor).unwrap();
        let b = project(&cloud, &sensor).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singular_pose_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 0.0;
        assert!(Pose::from_matrix(m).is_err());
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1.0;
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn pose_inverse_round_trip() {
        let p = Pose::from_yaw_translation(-2.1, [1.0, 2.0, 3.0]);
        let e = p.compose(&p.inverse()).matrix() - Matrix4::identity();
        assert!(e.abs().max() < 1e-12);
    }

    #[test]
    fn sqri_round_trip() {
        let img = RangeImage::from_values(2, 3, vec![1.0, -1.0, 2.5, 0.0, 7.0, 3.25]).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SQRI\x01");
        assert_eq!(buf.len(), 5 + 8 + 6 * 4);
        let back = RangeImage::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.values()[3], INVALID_RANGE);
    }

    #[test]
    fn pixel_direction_projects_into_its_pixel() {
        let sensor = SensorModel::new(90, 32, 0.26, 0.26).unwrap();
        for v in 0..32 {
            for u in 0..90 {
                let d = sensor.pixel_direction(u, v);
                let p = [d[0] * 7.0, d[1] * 7.0, d[2] * 7.0];
                let (pu, pv, _) = sensor.pixel(p).unwrap();
                assert_eq!((pu, pv), (u, v));
            }
        }
    }
}
