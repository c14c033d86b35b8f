//! Low-pass filtering, rotations, view sampling and parallel-beam projection.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mrc_io::{Patch, Volume};
use crate::spectral::{fftn, signed_index};

/// Default rolloff width as a fraction of the cutoff.
pub const DEFAULT_ROLLOFF_FRACTION: f64 = 0.1;

/// Radial Fourier low-pass with a raised-cosine edge of width
/// `rolloff_fraction * cutoff`. A cutoff at Nyquist keeps every sampled frequency.
pub fn lowpass_filter(v: &Volume, cutoff: f64, rolloff_fraction: f64) -> Result<Volume> {
    let nyquist = v.nyquist();
    if !(cutoff > 0.0) {
        return Err(Error::Parameter(format!("cutoff must be positive, got {cutoff}")));
    }
    if cutoff > nyquist * (1.0 + 1e-12) {
        return Err(Error::Frequency { cutoff, nyquist });
    }
    if rolloff_fraction < 0.0 {
        return Err(Error::Parameter("rolloff fraction must be >= 0".into()));
    }
    if cutoff >= nyquist * (1.0 - 1e-12) && rolloff_fraction == 0.0 {
        return Ok(v.clone());
    }
    let (d, h, w) = v.data.dim();
    let width = rolloff_fraction * cutoff;
    let mut f = v.data.mapv(|x| Complex64::new(x, 0.0));
    fftn(&mut f, false);
    let vs = v.voxel_size_angstrom;
    for ((k, j, i), c) in f.indexed_iter_mut() {
        let fz = signed_index(k, d) / (d as f64 * vs);
        let fy = signed_index(j, h) / (h as f64 * vs);
        let fx = signed_index(i, w) / (w as f64 * vs);
        let r = (fx * fx + fy * fy + fz * fz).sqrt();
        let gain = if r <= cutoff {
            1.0
        } else if width > 0.0 && r < cutoff + width {
            0.5 * (1.0 + (std::f64::consts::PI * (r - cutoff) / width).cos())
        } else {
            0.0
        };
        *c *= gain;
    }
    fftn(&mut f, true);
    Ok(Volume {
        data: f.mapv(|c| c.re),
        voxel_size_angstrom: vs,
    })
}

/// A proper rotation stored as a row-major 3×3 matrix acting on `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

fn rot_z(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Rotation([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

fn rot_y(a: f64) -> Rotation {
    let (s, c) = a.sin_cos();
    Rotation([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// `Rz(alpha) · Ry(beta) · Rz(gamma)`.
    pub fn from_zyz(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite Euler angles ({alpha}, {beta}, {gamma})"
            )));
        }
        Ok(rot_z(alpha).compose(&rot_y(beta)).compose(&rot_z(gamma)))
    }

    /// Rotation mapping the unit `direction` onto +z, followed by an in-plane turn.
    pub fn viewing(direction: [f64; 3], inplane: f64) -> Result<Self> {
        let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
        if !(n > 0.0 && n.is_finite() && inplane.is_finite()) {
            return Err(Error::Parameter("degenerate viewing direction".into()));
        }
        let theta = (direction[2] / n).clamp(-1.0, 1.0).acos();
        let phi = direction[1].atan2(direction[0]);
        Rotation::from_zyz(inplane, -theta, -phi)
    }

    /// Uniform random rotation (Shoemake's quaternion construction via normalized Gaussians).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for v in q.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        Rotation([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Rotation(m)
    }

    pub fn transpose(&self) -> Rotation {
        let m = self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// Quasi-uniform viewing rotations: Fibonacci-sphere directions, each with
/// `inplane` evenly spaced in-plane turns. Returns `n_views` rotations in total.
pub fn fibonacci_views(n_views: usize, inplane: usize) -> Vec<Rotation> {
    let inplane = inplane.max(1);
    let n_dirs = n_views.div_ceil(inplane);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out = Vec::with_capacity(n_views);
    'outer: for i in 0..n_dirs {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n_dirs as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = golden * i as f64;
        let dir = [r * phi.cos(), r * phi.sin(), z];
        for k in 0..inplane {
            if out.len() == n_views {
                break 'outer;
            }
            let psi = 2.0 * std::f64::consts::PI * k as f64 / inplane as f64;
            out.push(Rotation::viewing(dir, psi).expect("unit direction"));
        }
    }
    out
}

fn trilinear(data: &Array3<f64>, z: f64, y: f64, x: f64) -> f64 {
    let (d, h, w) = data.dim();
    if !(z > -1.0 && y > -1.0 && x > -1.0 && z < d as f64 && y < h as f64 && x < w as f64) {
        return 0.0;
    }
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let (z0, y0, x0) = (z0 as isize, y0 as isize, x0 as isize);
    let at = |k: isize, j: isize, i: isize| -> f64 {
        if k < 0 || j < 0 || i < 0 || k >= d as isize || j >= h as isize || i >= w as isize {
            0.0
        } else {
            data[[k as usize, j as usize, i as usize]]
        }
    };
    let mut acc = 0.0;
    for (dk, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * at(z0 + dk, y0 + dj, x0 + di);
            }
        }
    }
    acc
}

/// Rotates `v` by `rotation` (trilinear, zero outside) and integrates along z
/// onto an `out_size × out_size` image centred on the volume centre.
pub fn project_volume(v: &Volume, rotation: &Rotation, out_size: usize) -> Result<Patch> {
    if rotation.0.iter().flatten().any(|a| !a.is_finite()) {
        return Err(Error::Parameter("non-finite rotation".into()));
    }
    let (d, h, w) = v.data.dim();
    if out_size < d.max(h).max(w) {
        return Err(Error::Dimension(format!(
            "projection size {out_size} is smaller than the volume extent {}",
            d.max(h).max(w)
        )));
    }
    let inv = rotation.transpose();
    let centre = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
    let out_c = (out_size as f64 - 1.0) / 2.0;
    let half_depth = ((d * d + h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
    let nz = half_depth.ceil() as isize;
    let mut out = Array2::zeros((out_size, out_size));
    for ((row, col), px) in out.indexed_iter_mut() {
        let x = col as f64 - out_c;
        let y = row as f64 - out_c;
        let mut acc = 0.0;
        for k in -nz..=nz {
            let q = inv.apply([x, y, k as f64]);
            acc += trilinear(&v.data, q[2] + centre[2], q[1] + centre[1], q[0] + centre[0]);
        }
        *px = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::rng;

    fn blob(n: usize, sx: f64, sy: f64, sz: f64) -> Volume {
        let c = (n as f64 - 1.0) / 2.0;
        let data = Array3::from_shape_fn((n, n, n), |(k, j, i)| {
            let (x, y, z) = (i as f64 - c, j as f64 - c, k as f64 - c);
            (-(x * x / (2.0 * sx * sx) + y * y / (2.0 * sy * sy) + z * z / (2.0 * sz * sz))).exp()
        });
        Volume::new(data, 1.0).unwrap()
    }

    fn second_moments(p: &Patch) -> (f64, f64) {
        let c = (p.nrows() as f64 - 1.0) / 2.0;
        let m: f64 = p.sum();
        let (mut xx, mut yy) = (0.0, 0.0);
        for ((r, col), v) in p.indexed_iter() {
            xx += v * (col as f64 - c).powi(2);
            yy += v * (r as f64 - c).powi(2);
        }
        (xx / m, yy / m)
    }

    #[test]
    fn lowpass_keeps_dc() {
        let v = Volume::new(Array3::from_elem((8, 8, 8), 2.5), 2.0).unwrap();
        let f = lowpass_filter(&v, 0.05, 0.1).unwrap();
        assert!(f.data.iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn lowpass_removes_high_mode() {
        // 6 cycles over 16 voxels at 1 A: f = 0.375 1/A, cutoff 0.2 (+ 0.02 rolloff)
        let v = Volume::new(
            Array3::from_shape_fn((16, 16, 16), |(_, _, i)| (2.0 * std::f64::consts::PI * 6.0 * i as f64 / 16.0).cos()),
            1.0,
        )
        .unwrap();
        let f = lowpass_filter(&v, 0.2, 0.1).unwrap();
        assert!(f.data.iter().all(|x| x.abs() <= 1e-6));
        // a low mode passes unchanged
        let lo = Volume::new(
            Array3::from_shape_fn((16, 16, 16), |(k, _, _)| (2.0 * std::f64::consts::PI * 2.0 * k as f64 / 16.0).sin()),
            1.0,
        )
        .unwrap();
        let g = lowpass_filter(&lo, 0.2, 0.1).unwrap();
        assert!(g.data.iter().zip(lo.data.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn lowpass_nyquist_is_identity() {
        let mut r = rng(3);
        let v = Volume::new(Array3::from_shape_simple_fn((6, 6, 6), || r.random::<f64>()), 1.5).unwrap();
        let f = lowpass_filter(&v, v.nyquist(), 0.0).unwrap();
        assert!(f.data.iter().zip(v.data.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(lowpass_filter(&v, 0.4, 0.1), Err(Error::Frequency { .. })));
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut r = rng(8);
        for rot in fibonacci_views(20, 2).into_iter().chain((0..20).map(|_| Rotation::random(&mut r))) {
            let p = rot.compose(&rot.transpose());
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((p.0[i][j] - e).abs() < 1e-12);
                }
            }
        }
        assert!(Rotation::from_zyz(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn viewing_maps_direction_to_z() {
        let d = [0.3, -0.5, 0.81];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
        let rot = Rotation::viewing(d, 0.7).unwrap();
        let z = rot.apply([d[0] / n.sqrt(), d[1] / n.sqrt(), d[2] / n.sqrt()]);
        assert!(z[0].abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - 1.0).abs() < 1e-12);
        assert_eq!(fibonacci_views(7, 3).len(), 7);
    }

    #[test]
    fn gaussian_blob_projection_mass_and_shape() {
        let v = blob(32, 4.0, 4.0, 4.0);
        let p = project_volume(&v, &Rotation::identity(), 40).unwrap();
        let analytic = (2.0 * std::f64::consts::PI).powf(1.5) * 64.0;
        assert!((p.sum() / analytic - 1.0).abs() < 0.01, "{} vs {analytic}", p.sum());
        let (xx, yy) = second_moments(&p);
        assert!((xx - yy).abs() < 1e-9 && (xx - 16.0).abs() < 0.1);
        // spherical symmetry: every rotation gives the same image, up to the
        // extra blur trilinear sampling adds off-grid (about 1/6 voxel² per axis)
        let mut r = rng(1);
        let peak = p.iter().cloned().fold(0.0, f64::max);
        for _ in 0..5 {
            let q = project_volume(&v, &Rotation::random(&mut r), 40).unwrap();
            let diff = (&q - &p).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(diff < 0.025 * peak, "{diff}");
        }
    }

    #[test]
    fn quarter_turn_swaps_principal_axes() {
        let v = blob(24, 4.0, 2.0, 2.0);
        let p0 = project_volume(&v, &Rotation::identity(), 24).unwrap();
        let p1 = project_volume(&v, &Rotation::from_zyz(std::f64::consts::FRAC_PI_2, 0.0, 0.0).unwrap(), 24).unwrap();
        let (x0, y0) = second_moments(&p0);
        let (x1, y1) = second_moments(&p1);
        assert!(x0 > 2.0 * y0);
        assert!((x0 - y1).abs() / x0 < 0.02 && (y0 - x1).abs() / y0 < 0.02);
    }

    #[test]
    fn projection_size_is_checked() {
        let v = blob(16, 2.0, 2.0, 2.0);
        assert!(matches!(project_volume(&v, &Rotation::identity(), 12), Err(Error::Dimension(_))));
    }
}
