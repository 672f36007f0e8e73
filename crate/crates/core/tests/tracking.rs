//! Tracking against known maps: fixed points, recovery, equivariance and
//! the analytic Jacobian.

use nalgebra::{Rotation3, Vector3, Vector6};
use proptest::prelude::*;

use dynfusion::geometry::{se3_exp, Intrinsics, Pose, Twist};
use dynfusion::image::Image;
use dynfusion::raycast::{raycast, RaycastOptions, RenderModel};
use dynfusion::tracking::{residuals_and_jacobian, track, TrackingConfig};
use dynfusion::tsdf::TsdfVolume;
use dynfusion::BACKGROUND_ID;

fn intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 130.0,
        fy: 130.0,
        cx: 79.5,
        cy: 59.5,
        width: 160,
        height: 120,
        depth_scale: 5000.0,
    }
}

/// Floor and back wall with a box standing in front.
fn box_and_planes(p: &Vector3<f64>) -> f64 {
    let floor = 0.5 - p.y;
    let back = 1.9 - p.z;
    let left = p.x + 0.7;
    let b = (p - Vector3::new(0.1, 0.3, 1.3)).abs() - Vector3::new(0.2, 0.2, 0.15);
    let boxd = b.sup(&Vector3::zeros()).norm() + b.max().min(0.0);
    floor.min(back).min(left).min(boxd)
}

fn map(center: Vector3<f64>, f: impl Fn(&Vector3<f64>) -> f64 + Sync) -> TsdfVolume {
    let mut vol = TsdfVolume::cube(center, 96, 1.92, 10.0, 64.0, false).unwrap();
    vol.fill_from_fn(1.0, f);
    vol
}

fn render(vol: &TsdfVolume, pose: Pose) -> Image<f32> {
    let model = RenderModel {
        id: BACKGROUND_ID,
        volume: vol,
        pose,
        is_background: true,
        hidden: false,
    };
    raycast(&[model], &intrinsics(), &RaycastOptions::default()).depth
}

fn ones() -> Image<f32> {
    Image::filled(160, 120, 1.0)
}

fn errors(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.inverse() * *b;
    (d.translation.norm(), d.rotation_angle())
}

#[test]
fn frame_rendered_at_the_initial_pose_is_a_fixed_point() {
    let vol = map(Vector3::new(0.0, 0.0, 1.0), box_and_planes);
    let init = Pose::from_axis_angle(Vector3::new(0.02, -0.03, 0.01), Vector3::new(0.03, -0.02, 0.01));
    let depth = render(&vol, init);
    let result = track(&vol, &depth, &init, &intrinsics(), &ones(), &TrackingConfig::default()).unwrap();
    let (et, er) = errors(&init, &result.pose);
    assert!(et < 1e-4 && er < 1e-4, "{et} m, {er} rad");
    assert!(result.final_energy <= result.initial_energy);
}

#[test]
fn recovers_a_two_centimeter_one_degree_perturbation() {
    let vol = map(Vector3::new(0.0, 0.0, 1.0), box_and_planes);
    let truth = Pose::from_axis_angle(Vector3::new(0.0, 0.05, 0.0), Vector3::new(0.02, 0.0, -0.03));
    let depth = render(&vol, truth);
    let delta = Twist::new(
        Vector3::new(1.0, -1.0, 1.0).normalize() * 0.02,
        Vector3::new(-1.0, 2.0, 0.5).normalize() * 1f64.to_radians(),
    );
    let init = truth * se3_exp(&delta);
    let result = track(&vol, &depth, &init, &intrinsics(), &ones(), &TrackingConfig::default()).unwrap();
    let (et, er) = errors(&truth, &result.pose);
    assert!(et < 0.002 && er < 0.2f64.to_radians(), "{et} m, {} deg", er.to_degrees());
    assert!(result.energy_trace.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(result.energy_trace.first(), Some(&result.initial_energy));
    assert_eq!(result.energy_trace.last(), Some(&result.final_energy));
}

#[test]
fn moving_the_map_rigidly_moves_the_solution() {
    let center = Vector3::new(0.0, 0.0, 1.0);
    let vol_a = map(center, box_and_planes);
    // a quarter turn about z maps the voxel lattice onto itself
    let g = Pose::new(
        *Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).matrix(),
        Vector3::new(0.3, -0.2, 0.1),
    );
    let g_inv = g.inverse();
    let vol_b = map(g.transform_point(&center), |y| box_and_planes(&g_inv.transform_point(y)));

    let truth = Pose::from_axis_angle(Vector3::new(0.01, 0.04, -0.02), Vector3::new(-0.02, 0.01, 0.02));
    let depth = render(&vol_a, truth);
    let init = truth * se3_exp(&Twist::new(Vector3::new(0.012, -0.008, 0.01), Vector3::new(0.01, 0.005, -0.01)));
    let config = TrackingConfig::default();
    let a = track(&vol_a, &depth, &init, &intrinsics(), &ones(), &config).unwrap();
    let b = track(&vol_b, &depth, &(g * init), &intrinsics(), &ones(), &config).unwrap();
    let diff = (g * a.pose).max_abs_diff(&b.pose);
    assert!(diff < 1e-6, "equivariance violated by {diff}");
}

#[test]
fn zero_association_everywhere_is_unreliable() {
    let vol = map(Vector3::new(0.0, 0.0, 1.0), box_and_planes);
    let depth = render(&vol, Pose::identity());
    let zeros = Image::filled(160, 120, 0.0);
    assert!(track(&vol, &depth, &Pose::identity(), &intrinsics(), &zeros, &TrackingConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The analytic Jacobian of the signed-distance residual agrees with
    /// central differences wherever the interpolant is smooth.
    #[test]
    fn jacobian_matches_central_differences(
        rot in prop::array::uniform3(-0.5f64..0.5),
        shift in prop::array::uniform3(-0.05f64..0.05),
        center in prop::array::uniform3(-0.1f64..0.1),
        radius in 0.1f64..0.3,
        seed in any::<u64>(),
    ) {
        let k = Intrinsics { fx: 30.0, fy: 30.0, cx: 15.5, cy: 11.5, width: 32, height: 24, depth_scale: 5000.0 };
        let mut vol = TsdfVolume::cube(Vector3::zeros(), 40, 0.8, 10.0, 64.0, false).unwrap();
        let c = Vector3::from(center);
        vol.fill_from_fn(1.0, |p| (p - c).norm() - radius);
        let r = Pose::from_axis_angle(Vector3::from(rot), Vector3::zeros());
        let pose = Pose::new(r.rotation, -(r.rotation * Vector3::z()) + Vector3::from(shift));
        // deterministic pseudo-random depths around 1 m
        let mut state = seed | 1;
        let depth = Image::from_vec(32, 24, (0..32 * 24).map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            0.7 + 0.6 * (state % 10_000) as f32 / 10_000.0
        }).collect());
        let ones = Image::filled(32, 24, 1f32);
        let origin = vol.origin();
        let v = vol.voxel_size();
        let cell = |x: &Vector3<f64>| ((x - origin) / v - Vector3::repeat(0.5)).map(|g| g.floor() as i64);
        let h = 1e-6;
        for res in residuals_and_jacobian(&vol, &depth, &pose, &k, &ones, &ones) {
            let (x, y) = res.pixel;
            let p = k.ray(x as f64, y as f64) * depth.get(x, y) as f64;
            let base = cell(&pose.transform_point(&p));
            let mut fd = Vector6::zeros();
            let mut smooth = true;
            for i in 0..6 {
                let mut e = Vector6::zeros();
                e[i] = h;
                let xp = (pose * se3_exp(&Twist::from_vector(&e))).transform_point(&p);
                let xm = (pose * se3_exp(&Twist::from_vector(&-e))).transform_point(&p);
                match (vol.interpolate_sdf(&xp), vol.interpolate_sdf(&xm)) {
                    (Some(a), Some(b)) if cell(&xp) == base && cell(&xm) == base => fd[i] = (a - b) / (2.0 * h),
                    _ => { smooth = false; break; }
                }
            }
            if smooth {
                let err = (res.jacobian - fd).norm() / fd.norm().max(1e-6);
                prop_assert!(err < 1e-3, "relative error {err} at pixel {:?}", res.pixel);
            }
        }
    }
}
