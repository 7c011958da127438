use pedloc::eval::{compare_losses, CompareSpec, TargetNoise};
use pedloc::locnet::LossKind;
use pedloc::synth::SceneSpec;
use std::time::Instant;

fn main() {
    let losses = [LossKind::JohnsonSu, LossKind::Laplace, LossKind::Gaussian];
    let t0 = Instant::now();
    for seed in [1u64, 2, 3] {
        for cond in ["asym", "sym"] {
            let spec = match cond {
                "asym" => CompareSpec {
                    scene: SceneSpec {
                        pixel_noise_sigma: 2.0,
                        ..SceneSpec::default()
                    },
                    target_noise: TargetNoise::Skewed {
                        gamma: -1.0,
                        delta: 1.5,
                        kappa: 0.05,
                    },
                    seed,
                    ..CompareSpec::default()
                },
                _ => CompareSpec {
                    scene: SceneSpec {
                        pixel_noise_sigma: 0.0,
                        pose_jitter: 0.0,
                        ..SceneSpec::default()
                    },
                    target_noise: TargetNoise::Gaussian { sigma: 0.5 },
                    seed,
                    ..CompareSpec::default()
                },
            };
            let runs = compare_losses(&spec, &losses).unwrap();
            for r in &runs {
                let bins: Vec<String> = r
                    .report
                    .bins
                    .iter()
                    .map(|b| match b.ale {
                        Some(a) => format!("{a:.3}"),
                        None => "-".into(),
                    })
                    .collect();
                println!(
                    "[{:7.1}s] seed{} {} {:?} overall {:.3} cov {:.3} | {}",
                    t0.elapsed().as_secs_f64(),
                    seed,
                    cond,
                    r.loss,
                    r.report.overall.unwrap_or(f64::NAN),
                    r.coverage90,
                    bins.join(" ")
                );
            }
        }
    }
}
