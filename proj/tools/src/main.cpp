#include <CLI11.hpp>
#include <iostream>

#include "commands.hpp"
#include "groundgen/version.hpp"

namespace {

using namespace groundgen::cli;

CLI::Option* add_common(CLI::App* cmd, CommonOptions& common, const std::string& out_help) {
  cmd->add_option("--seed", common.seed, "Random seed");
  cmd->add_option("--config", common.configs, "Key-value config file (repeatable; later files win)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", common.sets, "Override a config key: key=value (repeatable)");
  return cmd->add_option("--out", common.out, out_help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Document-grounded generation with Concat, CoDR and DoHA models"};
  app.set_version_flag("--version", groundgen::kVersion);
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic fact-lookup corpora");
  add_common(synth_cmd, synth.common, "Output directory")->required();
  synth_cmd->add_option("--spec", synth.spec, "Synthetic task spec (key-value)");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  add_common(train_cmd, train.common, "Run directory")->required();
  train_cmd->add_option("--data", train.data_dir, "Directory with train.jsonl and valid.jsonl")->required();
  train_cmd->add_option("--model-config", train.model_config, "Model config file");
  train_cmd->add_option("--train-config", train.train_config, "Training config file");
  train_cmd->add_option("--mode", train.mode, "Grounding mode")->check(CLI::IsMember({"concat", "codr", "doha"}));
  train_cmd->add_option("--lr", train.learning_rate, "Learning rate (recorded verbatim)");
  train_cmd->add_option("--epochs", train.epochs, "Number of epochs");
  train_cmd->add_option("--max-steps", train.max_steps, "Stop after this many optimizer steps");
  train_cmd->add_flag("--resume", train.resume, "Continue from <out>/state");

  GenerateOptions gen;
  auto* gen_cmd = app.add_subcommand("generate", "Generate a target for every sample of a JSONL file");
  add_common(gen_cmd, gen.common, "Output JSONL file")->required();
  gen_cmd->add_option("--checkpoint", gen.checkpoint, "Checkpoint directory")->required();
  gen_cmd->add_option("--input", gen.input, "Input JSONL")->required();
  gen_cmd->add_option("--strategy", gen.strategy, "greedy or beam")->check(CLI::IsMember({"greedy", "beam"}));
  gen_cmd->add_option("--beam", gen.beam_size, "Beam size");
  gen_cmd->add_option("--max-len", gen.max_target_len, "Maximum generated tokens");
  gen_cmd->add_option("--min-len", gen.min_length, "Minimum generated tokens before EOS");
  gen_cmd->add_option("--length-penalty", gen.length_penalty, "Length normalization exponent");

  EvaluateOptions eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score outputs against references");
  add_common(eval_cmd, eval.common, "Directory for metrics.txt / metrics.json");
  eval_cmd->add_option("--outputs", eval.outputs, "Generated JSONL")->required();
  eval_cmd->add_option("--references", eval.references, "Reference JSONL")->required();
  eval_cmd->add_option("--values", eval.values, "Value vocabulary for synthetic exact match");
  eval_cmd->add_flag("--smoothing", eval.smoothing, "Add-one smoothed BLEU");

  CompareOptions cmp;
  auto* cmp_cmd = app.add_subcommand("compare", "Train, decode and score every grounding mode");
  add_common(cmp_cmd, cmp.common, "Output directory")->required();
  cmp_cmd->add_option("--data", cmp.data_dir, "Directory with train/valid/test.jsonl")->required();
  cmp_cmd->add_option("--modes", cmp.modes, "Grounding modes")->delimiter(',');
  cmp_cmd->add_flag("--context-only-ablation", cmp.context_only_ablation,
                    "Also train Concat with documents removed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::ostream& log = std::cerr;
  if (*synth_cmd) return run_guarded([&] { cmd_synth(synth, log); }, std::cerr);
  if (*train_cmd) return run_guarded([&] { cmd_train(train, log); }, std::cerr);
  if (*gen_cmd) return run_guarded([&] { cmd_generate(gen, log); }, std::cerr);
  if (*eval_cmd) return run_guarded([&] { cmd_evaluate(eval, std::cout); }, std::cerr);
  if (*cmp_cmd) return run_guarded([&] { cmd_compare(cmp, log); }, std::cerr);
  return kExitUsage;
}
