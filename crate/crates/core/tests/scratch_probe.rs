use catefuse::bounds::{self, BoundConfig};
use catefuse::gp::{self, OptimizerConfig, Z_95};
use catefuse::kernels::SeKernel;
use catefuse::runner::*;
use catefuse::simulate::{weyl_points, SimConfig, SimDesign};
use std::time::Instant;

#[test]
fn probe_sigma_ratio() {
    let variants: Vec<(&str, f64, f64, f64, u64)> = vec![
        ("ihdp ell2.0 p.5 ", 1.0, 2.0, 0.5, 13),
        ("ihdp ell1.9 p.5 ", 1.0, 1.9, 0.5, 1),
        ("ihdp ell3.0 p.5 ", 1.0, 3.0, 0.5, 13),
    ];
    for (label, s, ell, sigma0, seed) in variants {
        let mut widths = Vec::new();
        let start = Instant::now();
        for n_exp in [500usize, 1000] {
            let sim = SimConfig {
                design: SimDesign::Ihdp {
                    source: Default::default(),
                    n_obs: 2000,
                    n_exp,
                    treat_p: 0.5,
                },
                gp_prior: Some(SeKernel::new(s, ell).unwrap()),
                noise_sigma0: sigma0,
                seed,
                coefficient_seed: Some(seed),
            };
            let data = catefuse::simulate::generate(&sim).unwrap();
            let omega =
                catefuse::data::fit_observational_ridge(&data.observational, 1e-3).unwrap();
            let propensity = catefuse::data::PropensityModel::constant(0.5, 0.05).unwrap();
            let optimizer = OptimizerConfig {
                max_iters: 35,
                step_size: 0.3,
                restarts: 0,
                ..OptimizerConfig::default()
            };
            let (state, model_omega, _) =
                fit_model(ModelKind::Ours, &data, &omega, &propensity, &optimizer).unwrap();
            let in_grid = weyl_points(300, &data.truth.exp_box, 0);
            let cfg = BoundConfig {
                delta: 0.1,
                tau_radius: Some(1e-12),
                support_box: data.truth.obs_box.clone(),
                l_f: None,
            };
            let rep = bounds::uniform_band(&state, &model_omega, &cfg, &in_grid).unwrap();
            let mean_width: f64 = rep
                .per_point
                .iter()
                .map(|p| 2.0 * p.half_width)
                .sum::<f64>()
                / rep.per_point.len() as f64;
            let preds = gp::predict_batch(&state, &model_omega, &in_grid, Z_95).unwrap();
            let mean_sigma: f64 = preds.iter().map(|p| p.std).sum::<f64>() / preds.len() as f64;
            let params: Vec<f64> = state.model().params().iter().map(|p| (p * 100.0).round() / 100.0).collect();
            println!("  n{n_exp} fitted {params:?}");
            widths.push((mean_sigma, mean_width, rep.gamma, rep.beta.sqrt()));
        }
        let shrink = 1.0 - widths[1].1 / widths[0].1;
        println!(
            "{label}: n500 s={:.4} w={:7.3} g={:.3} rb={:.2} | n1000 s={:.4} w={:7.3} g={:.3} rb={:.2} | shrink {:5.1}%  ({:.0?})",
            widths[0].0,
            widths[0].1,
            widths[0].2,
            widths[0].3,
            widths[1].0,
            widths[1].1,
            widths[1].2,
            widths[1].3,
            100.0 * shrink,
            start.elapsed()
        );
        big_opt = false;
    }
}
