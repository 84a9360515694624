//! `molgrad`: train, certify and apply gradient-network denoisers.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "molgrad", version, about = "Certified gradient-network denoisers and plug-and-play deblurring")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// TOML config file with [train], [solver] and [verify] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Network file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Input image, dataset manifest or directory, depending on the command.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Blur kernel: a text grid file, or `box:K`, `motion:K`, `gaussian:K:STD`.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    /// Solver step size σ (default: β/(1−β) from the estimated Lipschitz constant).
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Data-fidelity weight μ.
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    /// τ = gamma_step / (σ + κ/2), gamma_step in (0, 1).
    #[arg(long = "gamma-step", global = true)]
    pub gamma_step: Option<f64>,
    /// Step-size validation: strict enforces both conditions, relaxed only the τ condition.
    #[arg(long, global = true, value_parser = ["strict", "relaxed"])]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    /// Stop when ‖v_k − v_{k−1}‖² / ‖v_0‖² falls below this.
    #[arg(long = "rel-tol", global = true)]
    pub rel_tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a dataset manifest, clamp, certify, and write model, log and report.
    Train {
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the certification suite on a model.
    #[command(alias = "certify")]
    Verify,
    /// Apply the denoiser to one image.
    Denoise {
        /// Clean reference for PSNR.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Blur an image and add Gaussian noise.
    Degrade {
        /// Noise standard deviation.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Restore a blurred, noisy image with the primal-dual solver.
    Deblur {
        /// Clean reference for PSNR.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Iteration trace CSV (default: next to the output, `.trace.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare the solver against the closed-form minimiser on an affine instance.
    #[command(name = "solver-selftest", alias = "verify-solver")]
    SolverSelftest {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Multiply the recommended τ (values that break τ(σ + κ/2) < 1 probe divergence).
        #[arg(long = "tau-scale", default_value_t = 1.0)]
        tau_scale: f64,
    },
    /// Write a synthetic dataset of PGM images and a manifest.
    Synth {
        #[arg(long, value_parser = ["blocks", "stripes", "blobs"], default_value = "blocks")]
        kind: String,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = commands::init_threads() {
        eprintln!("error: {f}");
        return f.code();
    }
    match commands::run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
