use std::path::{Path, PathBuf};
use std::process::ExitCode;

use molgrad::denoiser::Denoiser;
use molgrad::imaging::{
    self, add_noise, build_blur_operator, edge_density, manifest_csv, pgm_encode, pgm_read, psnr, synth_dataset,
    BlurKernel, Image, Support, SynthKind,
};
use molgrad::io::StagedOutputs;
use molgrad::network::Init;
use molgrad::pnp::{self, check_step_sizes, AffineRegionInstance, PnPParams, StepMode};
use molgrad::training::{clamp_negative_weights, train_with_checkpoints, warm_start};
use molgrad::verification::{
    beta_from_lipschitz, estimate_lipschitz, run_suite, BetaMargin, PowerIteration, SampleSpec, SuiteOptions,
};
use molgrad::{format, ActivationSpec, Network, Vector};

use crate::config::{self, FileConfig};
use crate::exit::Failure;
use crate::{Cli, Command, Global};

const EDGE_THRESHOLD: f64 = 0.05;
const SELFTEST_TOL: f64 = 1e-6;

type Outcome = Result<ExitCode, Failure>;

pub fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("MOLGRAD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::validation(format!("MOLGRAD_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::validation(e.to_string()))
}

pub fn run(cli: Cli) -> Outcome {
    let g = cli.global;
    let file = config::load(g.config.as_deref())?;
    match cli.command {
        Command::Train { epochs } => train(&g, &file, epochs),
        Command::Verify => verify(&g, &file),
        Command::Denoise { truth } => denoise(&g, truth.as_deref()),
        Command::Degrade { noise } => degrade(&g, &file, noise),
        Command::Deblur { truth, trace } => deblur(&g, &file, truth.as_deref(), trace),
        Command::SolverSelftest { dim, tau_scale } => selftest(&g, dim, tau_scale),
        Command::Synth { kind, count, size } => synth(&g, &kind, count, size),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::validation(format!("--{flag} is required")))
}

fn existing<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    let p = required(value, flag)?;
    if p.exists() {
        Ok(p)
    } else {
        Err(Failure::io(format!("{}: no such file or directory", p.display())))
    }
}

fn seed(g: &Global, file: &FileConfig) -> u64 {
    g.seed.or(file.seed).unwrap_or(0)
}

fn load_model(g: &Global) -> Result<Network, Failure> {
    Ok(format::load(existing(&g.model, "model")?)?)
}

fn suite_options(file: &FileConfig, seed: u64) -> Result<SuiteOptions, Failure> {
    let v = &file.verify;
    let mut opts = SuiteOptions::new(seed).within(v.low, v.high);
    opts.jacobian_samples.count = v.samples;
    opts.monotonicity_pairs.count = v.pairs;
    opts.mode = config::parse_jacobian(&v.jacobian)?;
    let (lo, hi, n) = v.sprox_grid;
    let m = v.sprox_points.max(1);
    // Test points in the middle half of the grid.
    let tests = (0..m)
        .map(|i| lo + (hi - lo) * (0.25 + 0.5 * i as f64 / (m.max(2) - 1) as f64))
        .collect();
    opts.sprox = Some(((lo, hi, n), tests));
    Ok(opts)
}

fn train(g: &Global, file: &FileConfig, epochs: Option<usize>) -> Outcome {
    let manifest = existing(&g.input, "input")?;
    let out_dir = required(&g.output, "output")?;
    let seed = seed(g, file);
    let mut section = file.train.clone();
    if let Some(e) = epochs {
        section.epochs = e;
        if section.learning_rates.is_some() {
            return Err(Failure::validation("--epochs cannot be combined with an explicit learning_rates schedule"));
        }
    }
    let cfg = section.to_config(seed);
    cfg.validate()?;

    let images = imaging::read_manifest(manifest)?
        .iter()
        .map(|p| pgm_read(p))
        .collect::<molgrad::Result<Vec<Image>>>()?;
    let first = images.first().ok_or_else(|| Failure::validation("dataset manifest lists no images"))?;
    let (w, h) = (first.width(), first.height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Failure::validation("dataset images must share one size"));
    }
    let d0 = w * h;
    let net = match &g.model {
        Some(_) => load_model(g)?,
        None => {
            let hidden = if section.hidden == 0 { 2 * d0 } else { section.hidden };
            let top = if section.top == 0 { (d0 / 4).max(1) } else { section.top };
            match section.init.as_str() {
                "warm" => warm_start(d0, hidden, top, seed)?,
                "random" => Network::random(&[d0, hidden, top], ActivationSpec::srelu(section.gamma)?, Init::Signed, seed)?,
                other => return Err(Failure::validation(format!("init must be warm or random, got '{other}'"))),
            }
        }
    };
    let data: Vec<Vector> = images.iter().map(Image::to_vector).collect();

    let mut staged = StagedOutputs::new();
    let outcome = train_with_checkpoints(&cfg, &data, net, |epoch, net| {
        staged.add(out_dir.join("checkpoints").join(format!("epoch-{epoch:05}.txt")), format::to_string(net));
        Ok(())
    })?;
    let net = clamp_negative_weights(outcome.net);
    let suite = run_suite(&net, &suite_options(file, seed)?)?;

    staged.add(out_dir.join("model.txt"), format::to_string(&net));
    staged.add(out_dir.join("training.csv"), outcome.log.to_csv());
    staged.add(out_dir.join("report.txt"), suite.to_text());
    staged.add(out_dir.join("report.csv"), suite.to_csv());
    staged.commit()?;

    if let Some(last) = outcome.log.epochs.last() {
        println!("epochs {} final mean loss {:.6e}", last.epoch, last.mean_loss);
    }
    println!("lipschitz estimate {:.6}", suite.lipschitz.value);
    println!("certification {}", if suite.passed() { "passed" } else { "FAILED" });
    println!("wrote {}", out_dir.display());
    if suite.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::validation("certification failed; see report.txt"))
    }
}

fn verify(g: &Global, file: &FileConfig) -> Outcome {
    let net = load_model(g)?;
    let suite = run_suite(&net, &suite_options(file, seed(g, file))?)?;
    print!("{}", suite.to_text());
    let beta = beta_from_lipschitz(suite.lipschitz.value, BetaMargin::Conservative)?;
    println!("\nbeta = {beta:.6} (sigma bound {:.6})", beta / (1.0 - beta));
    if let Some(dir) = &g.output {
        let mut staged = StagedOutputs::new();
        staged.add(dir.join("report.txt"), suite.to_text());
        staged.add(dir.join("report.csv"), suite.to_csv());
        staged.commit()?;
    }
    if suite.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::validation("certification failed"))
    }
}

fn image_input(g: &Global) -> Result<Image, Failure> {
    Ok(pgm_read(existing(&g.input, "input")?)?)
}

fn print_psnr(label: &str, img: &Image, truth: &Image) -> Result<(), Failure> {
    let p = psnr(img, truth)?;
    if p.is_infinite() {
        println!("psnr {label} inf");
    } else {
        println!("psnr {label} {p:.4}");
    }
    Ok(())
}

fn denoise(g: &Global, truth: Option<&Path>) -> Outcome {
    let net = load_model(g)?;
    let img = image_input(g)?;
    let out = required(&g.output, "output")?;
    let den = Image::from_vector(img.width(), img.height(), &net.apply(&img.to_vector())?)?;
    if let Some(t) = truth {
        let t = pgm_read(t)?;
        print_psnr("input", &img, &t)?;
        print_psnr("denoised", &den, &t)?;
    }
    let mut staged = StagedOutputs::new();
    staged.add(out, pgm_encode(&den));
    staged.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn parse_kernel(spec: &str) -> Result<BlurKernel, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    let size = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Failure::validation(format!("bad kernel size in '{spec}'")))
    };
    let k = match parts.as_slice() {
        ["box", k] => BlurKernel::uniform(size(k)?)?,
        ["motion", k] => BlurKernel::motion_diagonal(size(k)?)?,
        ["gaussian", k, std] => {
            let std = std
                .parse()
                .map_err(|_| Failure::validation(format!("bad kernel std in '{spec}'")))?;
            BlurKernel::gaussian(size(k)?, std)?
        }
        ["identity"] => BlurKernel::identity(),
        _ => {
            let p = Path::new(spec);
            if !p.exists() {
                return Err(Failure::io(format!("{spec}: not a kernel file or builtin kernel")));
            }
            BlurKernel::load(p)?
        }
    };
    Ok(k)
}

fn kernel(g: &Global) -> Result<BlurKernel, Failure> {
    parse_kernel(
        g.kernel
            .as_deref()
            .ok_or_else(|| Failure::validation("--kernel is required"))?,
    )
}

fn degrade(g: &Global, file: &FileConfig, noise: f64) -> Outcome {
    let img = image_input(g)?;
    let out = required(&g.output, "output")?;
    let a = build_blur_operator(&kernel(g)?, img.width(), img.height(), config::parse_boundary(&file.solver.boundary)?)?;
    let blurred = Image::from_vector(img.width(), img.height(), &a.apply(&img.to_vector())?)?;
    let degraded = add_noise(&blurred, noise, seed(g, file))?;
    print_psnr("degraded", &degraded, &img)?;
    let mut staged = StagedOutputs::new();
    staged.add(out, pgm_encode(&degraded));
    staged.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn deblur(g: &Global, file: &FileConfig, truth: Option<&Path>, trace: Option<PathBuf>) -> Outcome {
    let net = load_model(g)?;
    let img = image_input(g)?;
    let out = required(&g.output, "output")?;
    let s = &file.solver;
    let mu = g.mu.unwrap_or(s.mu);
    let mode = config::parse_mode(g.mode.as_deref().unwrap_or(&s.mode))?;
    let (w, h) = (img.width(), img.height());
    let a = build_blur_operator(&kernel(g)?, w, h, config::parse_boundary(&s.boundary)?)?;
    let y = img.to_vector();
    let subspace = pnp::build_subspace(&a, mu)?;

    let mut probes = vec![y.clone()];
    probes.extend(SampleSpec::new(s.lipschitz_probes, seed(g, file)).within(0.0, 1.0).draw(w * h));
    let power = PowerIteration {
        seed: seed(g, file),
        ..PowerIteration::default()
    };
    let lip = estimate_lipschitz(&net, &probes, &power)?;
    let beta = beta_from_lipschitz(lip.value, BetaMargin::Conservative)?;
    let chosen = g.sigma.or(s.sigma);
    if chosen.is_none() && lip.value <= 1.0 {
        eprintln!("note: lipschitz estimate <= 1 puts the default sigma at {:.3e}; pass --sigma for a weaker prior", beta / (1.0 - beta));
    }
    let sigma = chosen.unwrap_or(beta / (1.0 - beta));
    let mut params = PnPParams::with_sigma(sigma, subspace.kappa, mu, g.gamma_step.unwrap_or(s.gamma_step))?;
    params.max_iter = g.max_iter.unwrap_or(s.max_iter);
    params.rel_tol = g.rel_tol.unwrap_or(s.rel_tol);

    println!("lipschitz {:.6} beta {beta:.6} kappa {:.6} rank {}", lip.value, subspace.kappa, subspace.projector.rank());
    println!("sigma {:.6} tau {:.6e} mu {mu}", params.sigma, params.tau);
    let check = check_step_sizes(&params, beta, mode);
    println!(
        "step sizes ({}): sigma margin {:.6e}, tau margin {:.6e}",
        if mode == StepMode::Strict { "strict" } else { "relaxed" },
        check.sigma_margin,
        check.tau_margin
    );
    if let Some(warning) = &check.warning {
        eprintln!("warning: {warning}");
    }
    if !check.passed {
        return Err(Failure::validation(format!(
            "step sizes rejected: sigma margin {:.6e} (needs >= 0), tau margin {:.6e} (needs > 0)",
            check.sigma_margin, check.tau_margin
        )));
    }

    let zero = Vector::zeros(w * h);
    let result = pnp::pnp_solve(&net, &a, &y, &subspace.projector, &params, &zero, &zero)?;
    let restored = Image::from_vector(w, h, &result.v)?;
    println!("iterations {} termination {}", result.trace.iterations, result.trace.termination.as_str());
    if let Some(t) = truth {
        let t = pgm_read(t)?;
        print_psnr("degraded", &img, &t)?;
        print_psnr("restored", &restored, &t)?;
    }
    let trace_path = trace.unwrap_or_else(|| out.with_extension("trace.csv"));
    let mut staged = StagedOutputs::new();
    staged.add(out, pgm_encode(&restored));
    staged.add(trace_path, result.trace.to_csv());
    staged.commit()?;
    Ok(ExitCode::SUCCESS)
}

fn selftest(g: &Global, dim: usize, tau_scale: f64) -> Outcome {
    let mut inst = AffineRegionInstance::generate(dim, g.seed.unwrap_or(0))?;
    let gamma_step = g.gamma_step.unwrap_or(inst.params.gamma_step);
    let sigma = g.sigma.unwrap_or(inst.params.sigma);
    let mut params = PnPParams::with_sigma(sigma, inst.params.kappa, inst.params.mu, gamma_step)?;
    params.tau *= tau_scale;
    params.max_iter = g.max_iter.unwrap_or(params.max_iter);
    // The oracle comparison needs a tighter stop than the default rule.
    params.rel_tol = g.rel_tol.unwrap_or(1e-20);
    inst.params = params;
    let check = check_step_sizes(&params, inst.beta, StepMode::Relaxed);
    println!(
        "dim {dim} sigma {:.6} tau {:.6e} kappa {:.6} tau margin {:.6e}",
        params.sigma, params.tau, params.kappa, check.tau_margin
    );
    if !check.tau_ok {
        eprintln!("warning: tau (sigma + kappa/2) >= 1; running unchecked");
    }
    let zero = Vector::zeros(dim);
    let run = pnp::pnp_iterate(
        &inst.network,
        &inst.operator,
        &inst.observation,
        &inst.subspace.projector,
        &params,
        &zero,
        &zero,
    );
    let result = match run {
        Ok(r) => r,
        Err(molgrad::Error::Diverged { iteration, .. }) => {
            println!("diverged at iteration {iteration}");
            return Err(Failure::numerical("solver diverged"));
        }
        Err(e) => return Err(e.into()),
    };
    let oracle = inst.closed_form()?;
    let rel = (&result.v - &oracle).norm() / oracle.norm();
    println!(
        "iterations {} termination {} relative error {rel:.3e} region usage {:.3}",
        result.trace.iterations,
        result.trace.termination.as_str(),
        inst.region_usage(&(&result.u / (params.sigma + 1.0)))
    );
    if rel <= SELFTEST_TOL {
        println!("selftest passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("selftest FAILED (tolerance {SELFTEST_TOL:e})");
        Err(Failure::numerical("solver did not reach the closed-form minimiser"))
    }
}

fn synth(g: &Global, kind: &str, count: usize, size: usize) -> Outcome {
    let out_dir = required(&g.output, "output")?;
    let kind = SynthKind::from_name(kind, size).ok_or_else(|| Failure::validation(format!("unknown kind '{kind}'")))?;
    let images = synth_dataset(kind, count, size, g.seed.unwrap_or(0))?;
    let mut staged = StagedOutputs::new();
    let mut entries = Vec::with_capacity(count);
    for (i, img) in images.iter().enumerate() {
        let name = format!("img-{i:04}.pgm");
        staged.add(out_dir.join(&name), pgm_encode(img));
        entries.push((name, edge_density(img, EDGE_THRESHOLD, Support::Positive)?));
    }
    staged.add(out_dir.join("manifest.csv"), manifest_csv(&entries)?);
    staged.commit()?;
    println!("wrote {count} images to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_kernels() {
        assert_eq!(parse_kernel("box:3").unwrap().size(), 3);
        assert_eq!(parse_kernel("motion:5").unwrap().tap(2, 2), 0.2);
        assert_eq!(parse_kernel("gaussian:5:1.0").unwrap().size(), 5);
        assert_eq!(parse_kernel("identity").unwrap().taps(), &[1.0]);
        assert!(parse_kernel("box:x").is_err());
        assert!(parse_kernel("/no/such/kernel.txt").is_err());
    }
}
