// scratch probe: desk-config speed + early recovery trend
use xform_core::data::{generate_synthetic_dataset, select_reference_subset, GtDist, SyntheticSpec};
use xform_core::estimator::{Estimator, EstimatorConfig};
use xform_core::transforms::ParamKind;

fn main() {
    let hi = 120f64.to_radians();
    let data = generate_synthetic_dataset(&SyntheticSpec {
        classes: 4, image_size: 32, samples: 5000, seed: 1, color: false,
        params: vec![(ParamKind::Rotation, GtDist::Uniform { lo: 0.0, hi })],
    }).unwrap();
    let reference = select_reference_subset(&data, 1, 0).unwrap();
    let cfg = EstimatorConfig { seed: 11, ..EstimatorConfig::desk() };
    let mut est = Estimator::new(cfg, &data).unwrap();
    let t0 = std::time::Instant::now();
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    for it in 0..iters {
        for _ in 0..5 { est.critic_step(&data, &reference, it).unwrap(); }
        est.generator_step(&reference, it).unwrap();
        if (it + 1) % (iters / 4).max(1) == 0 {
            let hists = est.gens.estimate_histograms(20_000, 50, 3).unwrap();
            let rot = hists.iter().find(|h| h.param == ParamKind::Rotation).unwrap();
            let hi_n = ParamKind::Rotation.normalize(hi).unwrap();
            let w = rot.bin_width();
            let in_support = rot.mass_in(-w, hi_n + w);
            let tx = hists.iter().find(|h| h.param == ParamKind::Tx).unwrap();
            let sc = hists.iter().find(|h| h.param == ParamKind::Scale).unwrap();
            println!(
                "it {:5}  rot_in_support {:.3}  tx_near_id {:.3} scale_near_id {:.3}  ({:.1}s)",
                it + 1, in_support, tx.mass_in(-0.1, 0.1), sc.mass_in(-0.1, 0.1),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
