use rayon::prelude::*;
use vesselreg::phantom::{make_case_with, PhantomConfig};
use vesselreg::Pose64;

// Noisy, partially filled renders should still score the truth above a pose
// shifted by 10 px.
#[test]
fn truth_beats_shifted_pose_on_noisy_phantoms() {
    let cfg = PhantomConfig {
        dims: [48; 3],
        spacing_mm: 1.8,
        image_size: 64,
        noise_sigma: 0.05,
        fill_fraction: 0.7,
        ..PhantomConfig::default()
    };
    let wins = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let case = make_case_with(seed, &cfg).unwrap().case;
            let t = case.truth.unwrap();
            let shifted = Pose64::new(t.t_x + 10.0 * case.spacing(), t.t_y, t.r_z, t.r_y);
            let opts = Default::default();
            let at = case.reward_at(&t, &opts).unwrap().value;
            match case.reward_at(&shifted, &opts) {
                Ok(r) => at > r.value,
                Err(_) => true,
            }
        })
        .count();
    assert!(wins >= 95, "truth won on {wins}/100");
}
