//! Scratch tuning harness for the toy acceptance run (removed before release).
use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multidiff_core::backbone::{DenoiserModel, ModelConfig};
use multidiff_core::codec::Codec;
use multidiff_core::derive_seed;
use multidiff_core::eval::{extract_features, fid, Extractor};
use multidiff_core::par;
use multidiff_core::sampler::{sample_conditional, sample_joint, SamplingPlan, Solver};
use multidiff_core::schedule::NoiseSchedule;
use multidiff_core::synthdata::{generate_scenes, make_dataset, Modality};
use multidiff_core::trainer::{TimestepLaw, TrainConfig, TrainState};
use multidiff_core::Scalar;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(|s| s == "probe").unwrap_or(false) {
        let t_max: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
        let beta_max: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.04);
        probe(t_max, beta_max);
        return;
    }
    let batch: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6e-4);
    let solver_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let eval_n: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(512);
    let skip_eval = args.get(6).map(|s| s == "noeval").unwrap_or(false);
    let ema_decay: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.99);
    let t_max: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let beta_max: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let mixed: bool = args.get(10).map(|s| s == "mixed").unwrap_or(false);

    let t0 = Instant::now();
    let split = make_dataset(10_240, 0.95, 0).unwrap();
    let codec = Codec::identity((1, 16, 16)).unwrap();
    let to_latents = |seeds: &[u64]| -> Vec<Vec<Array3<f32>>> {
        let scenes = generate_scenes(seeds, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        scenes
            .iter()
            .map(|sc| {
                Modality::ALL
                    .iter()
                    .map(|&m| codec.encode(&sc.grayscale_image(m), &mut rng).unwrap())
                    .collect()
            })
            .collect()
    };
    let train_latents = to_latents(&split.train_seeds);
    let test_scenes = generate_scenes(&split.test_seeds, 16).unwrap();
    println!("data ready: {} train / {} test [{:.1?}]", train_latents.len(), test_scenes.len(), t0.elapsed());

    let mut mc = ModelConfig::desk_default();
    mc.max_timestep = t_max;
    let model = DenoiserModel::<f32>::new(mc, 1).unwrap();
    println!("params: {}", model.param_count());
    let schedule = NoiseSchedule::linear(t_max, 1e-4, beta_max).unwrap();
    let config = TrainConfig {
        batch_size: batch,
        total_steps: steps,
        base_lr: lr,
        warmup_steps: 100,
        ema_decay,
        seed: 2,
        timestep_law: if mixed {
            TimestepLaw::MixedConditional { clamp_prob: 0.5 }
        } else {
            TimestepLaw::IndependentUniform
        },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model, schedule.clone(), config).unwrap();
    let t1 = Instant::now();
    let mut recent = std::collections::VecDeque::new();
    while state.step() < steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(99, state.step()));
        let b: Vec<_> = (0..batch)
            .map(|_| train_latents[rng.gen_range(0..train_latents.len())].clone())
            .collect();
        let stats = state.training_step(&b).unwrap();
        recent.push_back(stats.loss);
        if recent.len() > 25 { recent.pop_front(); }
        if stats.step % 100 == 0 || stats.step + 1 == steps {
            let avg: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
            println!("step {:>5} loss {:.4} (avg25 {:.4}) lr {:.2e} [{:.1?}]",
                stats.step, stats.loss, avg, stats.lr, t1.elapsed());
        }
    }
    println!("train time: {:.1?}", t1.elapsed());
    state.save_checkpoint(std::path::Path::new("/tmp/toy.ckpt")).unwrap();
    if skip_eval { return; }

    let ema = state.ema_model();
    let n = eval_n.min(test_scenes.len());
    let real_images: Vec<Vec<Array3<f32>>> = test_scenes[..n]
        .iter()
        .map(|sc| Modality::ALL.iter().map(|&m| sc.grayscale_image(m)).collect())
        .collect();

    let t2 = Instant::now();
    // noise floor: first vs second half of the real test set
    for t in 0..4 {
        let all: Vec<_> = real_images.iter().map(|s| s[t].clone()).collect();
        let (a, b) = all.split_at(all.len() / 2);
        let fa = extract_features(a, Extractor::PatchStats).unwrap();
        let fb = extract_features(b, Extractor::PatchStats).unwrap();
        println!("real-vs-real baseline {}: {:.4}", Modality::ALL[t].name(), fid(&fa, &fb).unwrap());
    }
    let mut fids: BTreeMap<(String, usize), f64> = BTreeMap::new();
    // unconditional
    let uncond: Vec<Vec<Array3<f32>>> = par::map_range(n, |i| {
        let plan = SamplingPlan::<f32>::joint(solver_steps, Solver::DpmSolverPp2m, derive_seed(1000, i as u64));
        sample_joint(&ema, &schedule, &plan)
            .unwrap()
            .iter()
            .map(|z| codec.decode(z).unwrap())
            .collect()
    });
    println!("uncond sampling: {:.1?}", t2.elapsed());
    for t in 0..4 {
        let real: Vec<_> = real_images.iter().map(|s| s[t].clone()).collect();
        let gen: Vec<_> = uncond.iter().map(|s| s[t].clone()).collect();
        let fr = extract_features(&real, Extractor::PatchStats).unwrap();
        let fg = extract_features(&gen, Extractor::PatchStats).unwrap();
        fids.insert(("uncond".into(), t), fid(&fr, &fg).unwrap());
    }
    // conditional per conditioning modality
    for cond in 0..4usize {
        let tc = Instant::now();
        let cond_gen: Vec<Vec<Array3<f32>>> = par::map_range(n, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(55, i as u64));
            let latent = codec.encode(&real_images[i][cond], &mut rng).unwrap();
            let mut conditions = BTreeMap::new();
            conditions.insert(cond, latent);
            let plan = SamplingPlan::conditional(conditions, solver_steps, Solver::DpmSolverPp2m, derive_seed(2000 + cond as u64, i as u64));
            sample_conditional(&ema, &schedule, &plan)
                .unwrap()
                .iter()
                .map(|z| codec.decode(z).unwrap())
                .collect()
        });
        for t in 0..4 {
            if t == cond { continue; }
            let real: Vec<_> = real_images.iter().map(|s| s[t].clone()).collect();
            let gen: Vec<_> = cond_gen.iter().map(|s| s[t].clone()).collect();
            let fr = extract_features(&real, Extractor::PatchStats).unwrap();
            let fg = extract_features(&gen, Extractor::PatchStats).unwrap();
            fids.insert((Modality::ALL[cond].name().into(), t), fid(&fr, &fg).unwrap());
        }
        for t in 0..4 {
            if t == cond { continue; }
            let mut mse_cond = 0.0;
            let mut mse_uncond = 0.0;
            for i in 0..n {
                let truth = &real_images[i][t];
                mse_cond += (&cond_gen[i][t] - truth).iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / truth.len() as f64;
                mse_uncond += (&uncond[i][t] - truth).iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / truth.len() as f64;
            }
            println!("scene-mse {} -> {}: cond {:.5} vs uncond {:.5}",
                Modality::ALL[cond].name(), Modality::ALL[t].name(), mse_cond / n as f64, mse_uncond / n as f64);
        }
        println!("cond {} sampling: {:.1?}", Modality::ALL[cond].name(), tc.elapsed());
    }
    println!("\n=== FID table (cond -> target), {} samples, {} solver steps ===", n, solver_steps);
    for ((cond, t), v) in &fids {
        println!("{:<14} -> {:<14} {:>9.4}", cond, Modality::ALL[*t].name(), v);
    }
    // criterion 5 checks
    let uncond_of = |t: usize| fids[&("uncond".to_string(), t)];
    let mut ok = true;
    for t in [0usize, 2, 3] {
        let c = fids[&("optical".to_string(), t)];
        let u = uncond_of(t);
        let pass = c < u;
        ok &= pass;
        println!("cond-optical {} : {:.4} vs uncond {:.4} -> {}", Modality::ALL[t].name(), c, u, if pass {"PASS"} else {"FAIL"});
    }
    let hazy_pair = fids[&("optical".to_string(), 3)];
    let min_pair = fids.iter().filter(|((c, _), _)| c != "uncond").map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let pass = (hazy_pair - min_pair).abs() < 1e-12;
    ok &= pass;
    println!("optical->optical_hazy {:.4}, min over pairs {:.4} -> {}", hazy_pair, min_pair, if pass {"PASS"} else {"FAIL"});
    println!("criterion 5 overall: {}", if ok {"PASS"} else {"FAIL"});
    println!("eval time: {:.1?}, total: {:.1?}", t2.elapsed(), t0.elapsed());
}

/// Teacher-forced conditioning probe on a saved toy checkpoint: how much
/// does a clean optical token reduce the hazy noise-prediction loss, and
/// does the t=0 embedding behave like its neighbours?
fn probe(t_max: usize, beta_max: f64) {
    let schedule = NoiseSchedule::linear(t_max, 1e-4, beta_max).unwrap();
    let mut mc = ModelConfig::desk_default();
    mc.max_timestep = t_max;
    let model = DenoiserModel::<f32>::new(mc, 1).unwrap();
    let config = TrainConfig { total_steps: 10_000, warmup_steps: 0, ..TrainConfig::default() };
    let state = TrainState::load_checkpoint(std::path::Path::new("/tmp/toy.ckpt"), model, schedule.clone(), config).unwrap();
    let ema = state.ema_model();
    let codec = Codec::identity((1, 16, 16)).unwrap();
    let split = make_dataset(10_240, 0.95, 0).unwrap();
    let scenes = generate_scenes(&split.test_seeds[..256], 16).unwrap();
    let (opt, hazy) = (Modality::Optical.index(), Modality::OpticalHazy.index());
    for &t_tgt in &[t_max / 10, t_max / 4, t_max / 2, 3 * t_max / 4, 9 * t_max / 10] {
        // source regimes: clean t=0, t=1, t=25, fully noised t=T
        for &t_src in &[0usize, 1, 25, t_max] {
            let losses: Vec<f64> = par::map_range(scenes.len(), |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(777, i as u64));
                let sc = &scenes[i];
                let mut latents: Vec<Array3<f32>> = Modality::ALL.iter()
                    .map(|&m| codec.encode(&sc.grayscale_image(m), &mut rng).unwrap())
                    .collect();
                let mut ts = vec![0usize; 4];
                // corrupt everything except the probe pair to full noise
                for m in 0..4 {
                    if m == opt || m == hazy { continue; }
                    let eps = Array3::from_shape_fn((1,16,16), |_| f32::std_normal(&mut rng));
                    latents[m] = multidiff_core::schedule::forward_diffuse(&latents[m], t_max, &eps, &schedule).unwrap();
                    ts[m] = t_max;
                }
                let eps_src = Array3::from_shape_fn((1,16,16), |_| f32::std_normal(&mut rng));
                latents[opt] = multidiff_core::schedule::forward_diffuse(&latents[opt], t_src, &eps_src, &schedule).unwrap();
                ts[opt] = t_src;
                let eps_tgt = Array3::from_shape_fn((1,16,16), |_| f32::std_normal(&mut rng));
                latents[hazy] = multidiff_core::schedule::forward_diffuse(&latents[hazy], t_tgt, &eps_tgt, &schedule).unwrap();
                ts[hazy] = t_tgt;
                let out = ema.forward_denoise(&latents, &ts).unwrap();
                (&out[hazy] - &eps_tgt).iter().map(|&d| (d as f64).powi(2)).sum::<f64>() / 256.0
            });
            let mean: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
            println!("t_hazy {:>4} | t_optical {:>4} -> hazy eps-loss {:.5}", t_tgt, t_src, mean);
        }
        println!();
    }
}
