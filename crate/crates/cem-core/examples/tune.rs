// Scratch harness for calibrating the end-to-end acceptance fixtures.
// Not part of the deliverable surface; driven by env vars.

use cem_core::data::*;
use cem_core::models::*;
use cem_core::objectives::*;
use cem_core::samplers::*;
use cem_core::verify::*;
use cem_core::{rng, Tensor};

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_u(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "c4".into());
    match mode.as_str() {
        "c4" => c4_grid_kl(),
        "c5" => c5_sampler_ordering(),
        "c6" => c6_maxent(),
        "c7" => c7_robustness(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn train_ring_model(sigma: f64, iters: usize, lr: f64, hidden: usize) -> (PCemModel, Dataset2D, GridDomain) {
    let mut data_rng = rng::stream(42, rng::purpose::DATA);
    let data = make_gaussian_mixture(8, 2.0, sigma, 250, &mut data_rng);
    let grid = GridDomain::default_2d();
    let mut init_rng = rng::stream(42, rng::purpose::INIT);
    let mut model = PCemModel::random(2, &[hidden], 16, 8, Activation::Tanh, &mut init_rng);
    let batch = LabeledBatch::from_dataset(&data).unwrap();
    let t0 = std::time::Instant::now();
    let hist = train_exact_ml(&mut model, &batch, &grid, iters, lr, 0.9).unwrap();
    println!(
        "exact ML: {} iters in {:.1?}; ll {:.4} -> {:.4}",
        iters,
        t0.elapsed(),
        hist[0],
        hist.last().unwrap()
    );
    let acc = pcem_accuracy(&model, &batch.inputs, &batch.labels).unwrap();
    println!("train acc {acc:.4}");
    (model, data, grid)
}

fn c4_grid_kl() {
    let sigma = env_f("SIGMA", 0.25);
    let iters = env_u("ITERS", 400);
    let lr = env_f("LR", 0.5);
    let hidden = env_u("HIDDEN", 32);
    let (model, data, grid) = train_ring_model(sigma, iters, lr, hidden);

    let alpha = env_f("ALPHA", 0.1);
    let steps = env_u("STEPS", 40);
    let anneal = env_f("ANNEAL", 1.0);
    let eta0 = env_f("ETA0", (2.0 * alpha).sqrt());
    let beta = env_f("BETA", f64::INFINITY);
    let n = env_u("N", 100_000);

    let mut seed_rng = rng::stream(43, rng::purpose::SEEDS);
    let chain = init_seeds(SeedMode::FittedNormal, Some(&data), n, 2, &mut seed_rng).unwrap();
    let mut cfg = SamplerConfig::new(Rule::Langevin, alpha, beta, eta0, steps);
    cfg.anneal = anneal;
    let t0 = std::time::Instant::now();
    let mut chain_rng = rng::stream(43, rng::purpose::SAMPLER);
    let out = run_chain(
        SamplerModel::Logit(&model),
        &cfg,
        chain,
        ChainInputs::default(),
        &mut chain_rng,
        None,
    )
    .unwrap();
    let kl = grid_kl(&out.state, &model, &grid).unwrap();
    println!(
        "langevin: alpha={alpha} steps={steps} anneal={anneal} eta0={eta0:.4} beta={beta} -> KL={kl:.4} in {:.1?}",
        t0.elapsed()
    );
}

fn c5_sampler_ordering() {
    let sigma = env_f("SIGMA", 0.25);
    let iters = env_u("ITERS", 400);
    let (model, data, _grid) = train_ring_model(sigma, iters, env_f("LR", 0.5), env_u("HIDDEN", 32));
    let centers_v = mixture_centers(8, 2.0);
    let centers: Vec<[f64; 2]> = centers_v.clone();

    let alpha = env_f("ALPHA", 0.2);
    let steps = env_u("STEPS", 20);
    let eta = env_f("ETA", 0.01);
    let beta = env_f("BETA", 6.0);
    let anneal = env_f("ANNEAL", 1.0);
    let n = env_u("N", 8000);

    for rule in [Rule::Ta, Rule::Cs, Rule::Rcs] {
        let mut seed_rng = rng::stream(44, rng::purpose::SEEDS);
        let chain = init_seeds(SeedMode::ClasswiseNormal, Some(&data), n, 2, &mut seed_rng).unwrap();
        let mut cfg = SamplerConfig::new(rule, alpha, beta, eta, steps);
        cfg.anneal = anneal;
        let mut chain_rng = rng::stream(44, rng::purpose::SAMPLER);
        let out = run_chain(
            SamplerModel::Logit(&model),
            &cfg,
            chain,
            ChainInputs::default(),
            &mut chain_rng,
            None,
        )
        .unwrap();
        let cov = mode_coverage(&out.state, &centers, sigma);
        println!(
            "{rule:?}: coverage {}/8 quality {:.4} per-mode-min {:.4}",
            cov.covered,
            cov.high_quality_fraction,
            cov.per_mode_fraction.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }
}

fn c6_maxent() {
    let sigma = env_f("SIGMA", 0.25);
    let mut data_rng = rng::stream(45, rng::purpose::DATA);
    let data = make_gaussian_mixture(8, 2.0, sigma, 200, &mut data_rng);
    let mut init_rng = rng::stream(45, rng::purpose::INIT);
    let mut model = Model::Npcem(NPCemModel::new(Encoder::mlp(
        2,
        &[32],
        8,
        Activation::Tanh,
        &mut init_rng,
    )));
    let mut cfg = TrainConfig::new(Objective::Uat, env_u("EPOCHS", 40), env_f("LR", 0.05), 45);
    cfg.batch_size = 128;
    cfg.attack = Some(SamplerConfig::new(Rule::UnsupPgd, 0.1, 0.5, 0.0, env_u("ATK_STEPS", 5)));
    let t0 = std::time::Instant::now();
    let log = train(&mut model, &data, &cfg).unwrap();
    println!(
        "UAT: {} epochs in {:.1?}, final loss {:.4} nat {:.3} rob {:.3}",
        cfg.epochs,
        t0.elapsed(),
        log.epochs.last().unwrap().loss,
        log.epochs.last().unwrap().natural_acc,
        log.epochs.last().unwrap().robust_acc,
    );
    let np = model.as_npcem().unwrap();

    let alpha = env_f("ALPHA", 0.5);
    let steps = env_u("STEPS", 50);
    let n_batches = env_u("BATCHES", 4);
    let batch_n = env_u("BATCH_N", 512);
    let centers = mixture_centers(8, 2.0);

    let mut all_maxent = Vec::new();
    let mut all_pgd = Vec::new();
    let mut h_maxent = 0.0;
    let mut h_pgd = 0.0;
    for b in 0..n_batches {
        let mut seed_rng = rng::stream(46 + b as u64, rng::purpose::SEEDS);
        let seeds = init_seeds(SeedMode::FittedNormal, Some(&data), batch_n, 2, &mut seed_rng).unwrap();

        let cfg_me = SamplerConfig::new(Rule::Maxent, alpha, f64::INFINITY, env_f("ETA", 0.0), steps);
        let mut r1 = rng::stream(47 + b as u64, rng::purpose::SAMPLER);
        let me = run_chain(
            SamplerModel::Feature(np),
            &cfg_me,
            seeds.clone(),
            ChainInputs::default(),
            &mut r1,
            None,
        )
        .unwrap();
        h_maxent += entropy_estimate(np, &me.state).unwrap();
        all_maxent.extend_from_slice(&me.state.values);

        // Unsup PGD chains: positives and pool drawn from the data.
        let mut aux_rng = rng::stream(48 + b as u64, rng::purpose::SEEDS);
        let pos_chain = init_seeds(SeedMode::DataPoint, Some(&data), batch_n, 2, &mut aux_rng).unwrap();
        let pool_chain = init_seeds(SeedMode::DataPoint, Some(&data), 256, 2, &mut aux_rng).unwrap();
        let cfg_pgd = SamplerConfig::new(Rule::UnsupPgd, alpha, f64::INFINITY, env_f("ETA", 0.0), steps);
        let mut r2 = rng::stream(47 + b as u64, rng::purpose::SAMPLER);
        let pgd = run_chain(
            SamplerModel::Feature(np),
            &cfg_pgd,
            seeds,
            ChainInputs {
                positives: Some(&pos_chain.state),
                negatives: Some(NegativePool::Data(&pool_chain.state)),
                ..Default::default()
            },
            &mut r2,
            None,
        )
        .unwrap();
        h_pgd += entropy_estimate(np, &pgd.state).unwrap();
        all_pgd.extend_from_slice(&pgd.state.values);
    }
    h_maxent /= n_batches as f64;
    h_pgd /= n_batches as f64;
    let t_me = Tensor::new(vec![all_maxent.len() / 2, 2], all_maxent).unwrap();
    let t_pgd = Tensor::new(vec![all_pgd.len() / 2, 2], all_pgd).unwrap();
    let cov_me = mode_coverage(&t_me, &centers, sigma);
    let cov_pgd = mode_coverage(&t_pgd, &centers, sigma);
    println!(
        "maxent: H={h_maxent:.4} coverage {}/8 min-frac {:.4} | pgd: H={h_pgd:.4} coverage {}/8",
        cov_me.covered,
        cov_me.per_mode_fraction.iter().cloned().fold(f64::INFINITY, f64::min),
        cov_pgd.covered
    );
}

fn c7_robustness() {
    let mu = env_f("MU", 1.5);
    let sigma = env_f("SIGMA", 0.35);
    let epochs_ce = env_u("EPOCHS_CE", 300);
    let epochs_at = env_u("EPOCHS_AT", 300);
    let lr = env_f("LR", 0.1);
    let beta_train = env_f("BETA_TRAIN", 1.5);
    let beta_eval = env_f("BETA_EVAL", 1.2);
    let eval_steps = env_u("EVAL_STEPS", 40);
    let hidden = env_u("HIDDEN", 64);

    let mut data_rng = rng::stream(50, rng::purpose::DATA);
    let data = make_gaussian_mixture(2, mu, sigma, 500, &mut data_rng);
    let batch = LabeledBatch::from_dataset(&data).unwrap();

    let make_model = |seed: u64| {
        let mut init_rng = rng::stream(seed, rng::purpose::INIT);
        Model::Pcem(PCemModel::random(2, &[hidden], 16, 2, Activation::Tanh, &mut init_rng))
    };
    let train_attack = {
        let mut a = SamplerConfig::new(Rule::Pgd, beta_train / 4.0, beta_train, 0.0, 10);
        a.normalize_grad = true;
        a
    };
    let eval_attack = {
        let mut a = SamplerConfig::new(Rule::Pgd, beta_eval / 8.0, beta_eval, 0.0, eval_steps);
        a.normalize_grad = true;
        a
    };

    let eval = |m: &PCemModel, name: &str| {
        let nat = pcem_accuracy(m, &batch.inputs, &batch.labels).unwrap();
        let mut r = rng::stream(51, rng::purpose::ATTACK);
        let adv = pgd_attack(m, &batch.inputs, &batch.labels, &eval_attack, &mut r).unwrap();
        let rob = pcem_accuracy(m, &adv, &batch.labels).unwrap();
        println!("{name}: natural {nat:.4} robust {rob:.4}");
    };

    let t0 = std::time::Instant::now();
    let mut ce_model = make_model(50);
    let mut cfg = TrainConfig::new(Objective::Ce, epochs_ce, lr, 50);
    cfg.batch_size = 64;
    train(&mut ce_model, &data, &cfg).unwrap();
    eval(ce_model.as_pcem().unwrap(), "CE ");

    let mut at_model = make_model(50);
    let mut cfg = TrainConfig::new(Objective::At, epochs_at, lr, 50);
    cfg.batch_size = 64;
    cfg.attack = Some(train_attack.clone());
    train(&mut at_model, &data, &cfg).unwrap();
    eval(at_model.as_pcem().unwrap(), "AT ");

    let mut cr_model = make_model(50);
    let mut cfg = TrainConfig::new(Objective::AtCr, epochs_at, lr, 50);
    cfg.batch_size = 64;
    cfg.attack = Some(train_attack);
    cfg.lambda = env_f("LAMBDA", 1.0);
    train(&mut cr_model, &data, &cfg).unwrap();
    eval(cr_model.as_pcem().unwrap(), "ATCR");
    println!("total {:.1?}", t0.elapsed());
}
