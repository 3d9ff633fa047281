mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, SurveyCommand};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let result = match &cli.command {
        Command::MakeToy(a) => commands::make_toy(a),
        Command::PrepareData(a) => commands::prepare_data(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::EvalFid(a) => commands::eval_fid(a),
        Command::EvalPfid(a) => commands::eval_pfid(a),
        Command::Augment(a) => commands::augment(a),
        Command::Survey {
            command: SurveyCommand::Serve(a),
        } => commands::survey_serve(a),
        Command::ProbeEntanglement(a) => commands::probe_entanglement(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
