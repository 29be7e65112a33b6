// famh: synthesize, preprocess, pretrain, finetune, evaluate, embed.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "famh/commands.hpp"
#include "famh/common.hpp"
#include "famh/config.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "JSON run configuration")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", args->sets, "override a config key, e.g. --set model.embed_dim=64");
}

famh::config::RunConfig make_config(const CommonArgs& args) {
  return famh::config::load_config(args.config_path, args.sets);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"frequency-aware masked autoencoder pipeline for tri-axial accelerometry"};
  app.require_subcommand(1);

  CommonArgs synth_args, prep_args, pre_args, fine_args, eval_args, embed_args;
  std::string resume, checkpoint;
  int epochs = -1;
  int components = -1;

  auto* synth = app.add_subcommand("synth", "generate synthetic recordings + label files");
  add_common(synth, &synth_args);
  synth->add_option("--out", [&synth_args](const std::vector<std::string>& v) {
    synth_args.sets.push_back("paths.raw_dir=" + v.back());
    return true;
  }, "output directory (overrides paths.raw_dir)");

  auto* prep = app.add_subcommand(
      "preprocess", "filter, resample, calibrate, and index wear segments");
  add_common(prep, &prep_args);
  prep->add_option("--in", [&prep_args](const std::vector<std::string>& v) {
    prep_args.sets.push_back("paths.raw_dir=" + v.back());
    return true;
  }, "input directory (overrides paths.raw_dir)");
  prep->add_option("--out", [&prep_args](const std::vector<std::string>& v) {
    prep_args.sets.push_back("paths.processed_dir=" + v.back());
    return true;
  }, "output directory (overrides paths.processed_dir)");

  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  add_common(pre, &pre_args);
  pre->add_option("--epochs", epochs, "override schedule.pretrain_epochs");
  pre->add_option("--resume", resume, "resume from a checkpoint")->check(CLI::ExistingFile);
  pre->add_option("--checkpoint-out", [&pre_args](const std::vector<std::string>& v) {
    pre_args.sets.push_back("paths.checkpoint=" + v.back());
    return true;
  }, "checkpoint path (overrides paths.checkpoint)");

  auto* fine = app.add_subcommand("finetune", "train the linear classification head");
  add_common(fine, &fine_args);
  fine->add_option("--checkpoint", checkpoint, "pretrained checkpoint")->required();
  fine->add_option("--epochs", epochs, "override schedule.finetune_epochs");

  auto* eval = app.add_subcommand("evaluate", "metrics + confusion matrix on the validation split");
  add_common(eval, &eval_args);
  eval->add_option("--checkpoint", checkpoint, "finetuned checkpoint")->required();

  auto* embed = app.add_subcommand("embed", "export encoder embeddings and a PCA projection");
  add_common(embed, &embed_args);
  embed->add_option("--checkpoint", checkpoint, "checkpoint to embed with")->required();
  embed->add_option("--components", components, "override pca_components");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      famh::commands::cmd_synth(make_config(synth_args));
    } else if (prep->parsed()) {
      famh::commands::cmd_preprocess(make_config(prep_args));
    } else if (pre->parsed()) {
      if (epochs >= 0)
        pre_args.sets.push_back("schedule.pretrain_epochs=" + std::to_string(epochs));
      famh::commands::cmd_pretrain(make_config(pre_args), resume);
    } else if (fine->parsed()) {
      if (epochs >= 0)
        fine_args.sets.push_back("schedule.finetune_epochs=" + std::to_string(epochs));
      famh::commands::cmd_finetune(make_config(fine_args), checkpoint);
    } else if (eval->parsed()) {
      famh::commands::cmd_evaluate(make_config(eval_args), checkpoint);
    } else if (embed->parsed()) {
      if (components >= 1)
        embed_args.sets.push_back("pca_components=" + std::to_string(components));
      famh::commands::cmd_embed(make_config(embed_args), checkpoint);
    }
  } catch (const famh::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return famh::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
