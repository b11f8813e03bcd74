//! Experiment runner for label-set operations on feature banks.
//!
//! Every subcommand accepts an optional JSON config plus flag overrides
//! (flags win), writes a resolved-config JSON next to its outputs, and
//! produces deterministic artifacts per seed. Progress goes to stderr so
//! stdout stays clean for machine-readable output.

mod cmds;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "laso",
    version,
    about = "train, evaluate, and compose feature-space label-set operators"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic feature bank, or import one from CSV
    Gen(cmds::GenArgs),
    /// Train only the linear classifier; saves a checkpoint usable as --init
    PretrainClassifier(cmds::PretrainArgs),
    /// Train the set operators with the alternating schedule
    Train(cmds::TrainArgs),
    /// Classification-based evaluation of synthesized vectors
    EvalClass(cmds::EvalClassArgs),
    /// Retrieval-based evaluation of synthesized vectors
    EvalRetrieval(cmds::EvalRetrievalArgs),
    /// Learned operators vs their analytic counterparts, one table
    Ablate(cmds::AblateArgs),
    /// Few-shot augmentation benchmark over episodes
    Fewshot(cmds::FewshotArgs),
    /// Finite-difference verification of every gradient
    Gradcheck(cmds::GradcheckArgs),
    /// Evaluate a set expression like "sub(1, int(2, 3))" and list neighbors
    Compose(cmds::ComposeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => cmds::gen(a),
        Cmd::PretrainClassifier(a) => cmds::pretrain_classifier(a),
        Cmd::Train(a) => cmds::train(a),
        Cmd::EvalClass(a) => cmds::eval_class(a),
        Cmd::EvalRetrieval(a) => cmds::eval_retrieval(a),
        Cmd::Ablate(a) => cmds::ablate(a),
        Cmd::Fewshot(a) => cmds::fewshot(a),
        Cmd::Gradcheck(a) => cmds::gradcheck(a),
        Cmd::Compose(a) => cmds::compose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
