//! The depth stack against rendered scenes with analytic ground truth.

use phenosfm::epipolar::{estimate_fundamental, rectify, warp, PointPair};
use phenosfm::features::{detect_and_describe, match_descriptors};
use phenosfm::stereo::{compute_disparity, SgmParams};
use phenosfm::synth::{render_pair, RigSpec, SceneObject, SceneSpec};

fn rig_spec(focal: f64) -> RigSpec {
    RigSpec {
        focal_px: focal,
        cx: None,
        cy: None,
        height_cm: None,
        speed_cm_s: None,
        fps: None,
        frame_stride: None,
    }
}

/// A pure-translation pair is rectified by construction, so the matcher
/// alone must recover the constant plane disparity almost everywhere.
#[test]
fn sgm_recovers_constant_plane_disparity() {
    let spec = SceneSpec {
        width: 256,
        height: 256,
        rig: rig_spec(1000.0),
        objects: vec![SceneObject::Plane {
            depth_cm: 90.0,
            texture_seed: 7,
        }],
    };
    let pair = render_pair(&spec).unwrap();
    let left = pair.frame_a.to_luma();
    let right = pair.frame_b.to_luma();
    let params = SgmParams {
        d_max: 32,
        ..Default::default()
    };
    let disp = compute_disparity(&left, &right, &params).unwrap();

    let mut total = 0usize;
    let mut valid = 0usize;
    let mut good = 0usize;
    for y in 8..248 {
        // The right image lacks the left frame's first baseline-width
        // columns, so matching starts past the maximum disparity.
        for x in 32..248 {
            let gt = pair.gt_disparity.get(x, y) as f64;
            total += 1;
            let d = disp.get(x, y) as f64;
            if d.is_nan() {
                continue;
            }
            valid += 1;
            if (d - gt).abs() <= 1.0 {
                good += 1;
            }
        }
    }
    assert!(
        valid as f64 >= 0.9 * total as f64,
        "coverage {valid}/{total}"
    );
    assert!(
        good as f64 >= 0.95 * valid as f64,
        "accuracy {good}/{valid}"
    );
}

/// Full chain on a structured scene: features, fundamental matrix,
/// rectification, matching, and the map back to metric disparity.
#[test]
fn full_chain_recovers_cabbage_disparity() {
    let spec = SceneSpec {
        width: 256,
        height: 256,
        rig: rig_spec(1000.0),
        objects: vec![
            SceneObject::Plane {
                depth_cm: 90.0,
                texture_seed: 1,
            },
            SceneObject::Sphere {
                center_cm: [0.0, 0.0, 82.0],
                radius_cm: 8.0,
                texture_seed: 2,
            },
        ],
    };
    let pair = render_pair(&spec).unwrap();
    let a = pair.frame_a.to_luma();
    let b = pair.frame_b.to_luma();

    let (ka, da) = detect_and_describe(&a, 3e-4).unwrap();
    let (kb, db) = detect_and_describe(&b, 3e-4).unwrap();
    let matches = match_descriptors(&da, &db, 0.7).unwrap();
    assert!(matches.len() >= 30, "matches {}", matches.len());
    let pairs: Vec<PointPair> = matches
        .iter()
        .map(|m| {
            (
                (ka[m.index_a].x, ka[m.index_a].y),
                (kb[m.index_b].x, kb[m.index_b].y),
            )
        })
        .collect();
    let (f, inlier_idx) = estimate_fundamental(&pairs, 1.0, 2000, 11).unwrap();
    let inliers: Vec<PointPair> = inlier_idx.iter().map(|&i| pairs[i]).collect();
    let rp = rectify(&f, &inliers, (256, 256)).unwrap();

    let wa = warp(&a, &rp.h1, rp.out_dims).unwrap();
    let wb = warp(&b, &rp.h2, rp.out_dims).unwrap();
    let params = SgmParams {
        d_max: 32,
        ..Default::default()
    };
    let grid = compute_disparity(&wa.image, &wb.image, &params).unwrap();

    let mut total = 0usize;
    let mut valid = 0usize;
    let mut good = 0usize;
    for y in 8..248 {
        for x in 32..248 {
            let gt = pair.gt_disparity.get(x, y) as f64;
            total += 1;
            let (gx, gy) = rp.to_grid(x as f64, y as f64);
            let (gxi, gyi) = (gx.round(), gy.round());
            if gxi < 0.0 || gyi < 0.0 || gxi >= grid.width() as f64 || gyi >= grid.height() as f64
            {
                continue;
            }
            let d = grid.get(gxi as usize, gyi as usize) as f64;
            if d.is_nan() {
                continue;
            }
            valid += 1;
            let metric = rp.original_disparity(gx, gy, d);
            if (metric - gt).abs() <= 1.0 {
                good += 1;
            }
        }
    }
    assert!(
        valid as f64 >= 0.8 * total as f64,
        "coverage {valid}/{total}"
    );
    assert!(
        good as f64 >= 0.95 * valid as f64,
        "accuracy {good}/{valid}"
    );
}
