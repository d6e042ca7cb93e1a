#include <iostream>

#include "CLI11.hpp"
#include "htrvt/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Handwritten text recognition with a CNN + ViT encoder trained by CTC"};
  app.require_subcommand(1);

  htr::cli::TrainArgs train;
  std::uint64_t until = 0;
  auto* cmd_train = app.add_subcommand("train", "Train from a config file, or resume from a checkpoint");
  cmd_train->add_option("--config", train.config, "Config file (key = value lines)");
  cmd_train->add_option("--resume", train.resume, "Checkpoint to continue from");
  cmd_train->add_option("--until", until, "Stop after this iteration instead of total_iters");

  std::string ckpt, manifest, image, csv;
  bool ema = false, raw = false;
  auto* cmd_eval = app.add_subcommand("evaluate", "Corpus CER/WER of a checkpoint on a manifest");
  cmd_eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  cmd_eval->add_option("--manifest", manifest, "Manifest (relpath<TAB>transcription)")->required();
  auto* ema_flag = cmd_eval->add_flag("--ema", ema, "Use the EMA shadow weights (default)");
  cmd_eval->add_flag("--raw", raw, "Use the raw optimizer weights")->excludes(ema_flag);
  cmd_eval->add_option("--csv", csv, "Per-line results (default: evaluation.csv next to the checkpoint)");

  bool predict_raw = false;
  auto* cmd_predict = app.add_subcommand("predict", "Transcribe one PGM line image");
  cmd_predict->add_option("--ckpt", ckpt, "Checkpoint")->required();
  cmd_predict->add_option("--image", image, "PGM image")->required();
  cmd_predict->add_flag("--raw", predict_raw, "Use the raw weights instead of the EMA shadow");

  htr::cli::GradcheckArgs gc;
  auto* cmd_gc = app.add_subcommand("gradcheck", "Compare every adjoint against central differences in 64-bit");
  cmd_gc->add_option("--trials", gc.trials_per_primitive, "Random trials per primitive");
  cmd_gc->add_option("--ctc-instances", gc.ctc_instances, "Random CTC instances");
  cmd_gc->add_option("--seed", gc.seed, "Seed");
  cmd_gc->add_flag("--inject-fault", gc.inject_fault, "Add a deliberately wrong adjoint (must fail)");

  htr::cli::DumpArgs dump;
  std::size_t query = 0;
  bool dump_raw = false;
  auto* cmd_dump = app.add_subcommand("dump-attention", "Write head-averaged attention maps as PGM");
  cmd_dump->add_option("--ckpt", dump.ckpt, "Checkpoint")->required();
  cmd_dump->add_option("--image", dump.image, "PGM image")->required();
  cmd_dump->add_option("--block", dump.block, "Encoder block index")->required();
  cmd_dump->add_option("--out", dump.out_dir, "Output directory")->required();
  auto* query_opt = cmd_dump->add_option("--query", query, "Query token for the 1 x L strip (default: middle)");
  cmd_dump->add_flag("--raw", dump_raw, "Use the raw weights instead of the EMA shadow");

  htr::cli::SynthArgs syn;
  bool fixed = false;
  auto* cmd_synth = app.add_subcommand("synth", "Write a synthetic stroke-glyph corpus");
  cmd_synth->add_option("--out", syn.out_dir, "Output directory")->required();
  cmd_synth->add_option("--lines", syn.train_lines, "Training lines");
  cmd_synth->add_option("--val-lines", syn.val_lines, "Held-out lines");
  cmd_synth->add_option("--seed", syn.seed, "Seed");
  cmd_synth->add_flag("--fixed", fixed, "Render without per-line jitter");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_train) {
      if (cmd_train->count("--until")) train.until = until;
      return htr::cli::train(train, std::cout);
    }
    if (*cmd_eval) return htr::cli::evaluate(ckpt, manifest, !raw, csv, std::cout);
    if (*cmd_predict) return htr::cli::predict(ckpt, image, !predict_raw, std::cout);
    if (*cmd_gc) return htr::cli::gradcheck(gc, std::cout);
    if (*cmd_dump) {
      if (*query_opt) dump.query = query;
      dump.use_ema = !dump_raw;
      return htr::cli::dump_attention(dump, std::cout);
    }
    if (*cmd_synth) {
      syn.vary = !fixed;
      return htr::cli::synth(syn, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
