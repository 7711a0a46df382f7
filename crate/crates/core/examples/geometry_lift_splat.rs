//! Lifts a constant feature map through a one-hot depth distribution and
//! warps the resulting BEV map into a later ego pose.

use quadbev::bevgeom::{build_frustum, lift_and_splat, warp_bev, BevGridSpec, CameraModel, EgoPose, Rigid3};
use quadbev::Tensor;

fn main() -> quadbev::Result<()> {
    let grid = BevGridSpec::default();
    let cam = CameraModel::looking_at_yaw(64.0, (128, 64), 0.0, [0.0, 0.0, 1.6]);
    let frustum = build_frustum(&cam, &grid, 8)?;
    let (h, w) = (frustum.h_feat, frustum.w_feat);
    let features = Tensor::full(&[1, h, w], 1.0);

    // every pixel puts all its mass in depth bin 5
    let bin = 5;
    let mut depth = Tensor::zeros(&[grid.n_depth_bins, h, w]);
    for v in 0..h {
        for u in 0..w {
            depth.set3(bin, v, u, 1.0);
        }
    }
    let bev = lift_and_splat(&features, &depth, &frustum, &cam, &grid)?;
    let occupied = bev.data().iter().filter(|&&x| x > 0.0).count();
    println!("depth bin {bin} at {:.2} m splats {:.1} units of mass into {occupied} cells", grid.bin_center(bin), bev.sum());

    let past = EgoPose::new(Rigid3::identity(), 0.0);
    let now = EgoPose::new(Rigid3::from_yaw(0.05, [1.0, 0.0, 0.0]), 0.5);
    let warped = warp_bev(&bev, &past, &now, &grid)?;
    println!("after moving 1 m forward and turning 0.05 rad the resampled map holds {:.2} units", warped.sum());
    Ok(())
}
