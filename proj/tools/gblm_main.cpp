// gblm: gradient-informed pruning of linear layers from the command line.
//
// Every subcommand prints a JSON document on stdout. Exit status is 0 on
// success, 1 when verification fails and 2 on usage or input errors.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gblm/calib_stats.hpp"
#include "gblm/mask_viz.hpp"
#include "gblm/pipeline.hpp"
#include "gblm/tensor_store.hpp"
#include "gblm/toy_lm.hpp"
#include "gblm/verify.hpp"

namespace {

using nlohmann::json;

constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

void emit(const json& j, const std::optional<std::string>& path = std::nullopt) {
  if (path) {
    std::ofstream out(*path);
    if (!out) throw gblm::Error("cannot open '" + *path + "' for writing");
    out << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw gblm::InputError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw gblm::InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

struct ToyArgs {
  std::uint64_t seed = 0;
  std::string model;
  std::string metric = "gblm-l1";
  double alpha = 100.0;
  std::string group = "output,1";
  std::string sparsity = "0.5";
  int n_calib = 128;

  void add_to(CLI::App* cmd, bool with_run_settings = true) {
    cmd->add_option("--seed", seed, "Toy-model seed (ignored with --model)");
    cmd->add_option("--model", model, "Trained toy-model container instead of training from --seed");
    if (!with_run_settings) return;
    cmd->add_option("--metric", metric, "Builtin metric name");
    cmd->add_option("--alpha", alpha, "Gradient-term scale");
    cmd->add_option("--group", group, "Comparison group: layer, output,1, input,1, output,B, input,B");
    cmd->add_option("--sparsity", sparsity, "Ratio such as 0.5 or a pattern such as 2:4");
    cmd->add_option("--n-calib", n_calib, "Calibration sequences");
  }

  gblm::ToyContext context() const {
    if (model.empty()) {
      gblm::ToyConfig cfg;
      cfg.seed = seed;
      return gblm::make_toy_context(cfg);
    }
    const auto c = gblm::read_container(model);
    if (!gblm::is_toy_container(c)) throw gblm::InputError("'" + model + "' is not a toy-model container");
    gblm::ToyContext ctx{gblm::config_from_container(c), gblm::model_from_container(c), {}};
    ctx.eval = gblm::gen_corpus(ctx.cfg, gblm::Split::eval);
    return ctx;
  }

  gblm::ToyRunSettings settings() const {
    gblm::ToyRunSettings s;
    s.metric = metric;
    s.alpha = alpha;
    s.group = gblm::GroupSpec::parse(group);
    s.sparsity = gblm::SparsitySpec::parse(sparsity);
    s.n_calib = n_calib;
    return s;
  }
};

json stats_summary(const gblm::Container& c) {
  json layers = json::object();
  constexpr std::string_view suffix = ".grad_abs_sum";
  for (const auto& r : c.records()) {
    if (!r.name.ends_with(suffix)) continue;
    const auto name = r.name.substr(0, r.name.size() - suffix.size());
    const auto s = gblm::read_stats(c, name);
    layers[name] = {{"shape", {s.d_out(), s.d_in()}},
                    {"n_samples", s.n_samples()},
                    {"act_rows", s.n_act_rows()},
                    {"grad_l1_mean", s.grad_norm(gblm::GradNorm::l1).mean()},
                    {"grad_l2_mean", s.grad_norm(gblm::GradNorm::l2).mean()},
                    {"grad_acc_mean", s.grad_norm(gblm::GradNorm::acc).mean()},
                    {"act_norm_mean", s.act_norm().mean()}};
  }
  return {{"layers", layers}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-informed pruning of linear layers"};
  app.require_subcommand(1);

  // prune
  auto* prune = app.add_subcommand("prune", "Score and mask every eligible layer of a weight container");
  gblm::RunConfig run;
  std::string tensors, stats, metric_json, report;
  std::vector<std::string> skip;
  std::string group = "output,1", sparsity = "0.5", masks_out;
  prune->add_option("--tensors", tensors, "Weight container")->required();
  prune->add_option("--stats", stats, "Statistics container (defaults to --tensors)");
  prune->add_option("--metric", run.metric, "Builtin metric name");
  prune->add_option("--metric-json", metric_json, "Custom metric term list (JSON file)");
  prune->add_option("--alpha", run.alpha, "Gradient-term scale");
  prune->add_option("--group", group, "Comparison group");
  prune->add_option("--sparsity", sparsity, "Ratio or N:M pattern");
  prune->add_option("--skip", skip, "Name substrings of layers to leave dense (default: embed lm_head)");
  prune->add_option("--masks-out", masks_out, "Output mask container")->required();
  prune->add_option("--report", report, "Also write the JSON report here");
  prune->add_option("--seed", run.seed, "Recorded in the run; pruning itself is deterministic");
  prune->add_option("--workers", run.workers, "Worker threads for layer pruning")->check(CLI::PositiveNumber);

  // verify
  auto* verify = app.add_subcommand("verify", "Run the oracle checks");
  gblm::VerifyOptions vopt;
  std::string mutate = "none", verify_out;
  verify->add_option("--seed", vopt.seed, "Seed for random instances");
  verify->add_option("--mutate", mutate, "Inject a fault: none, drop-third-term")
      ->check(CLI::IsMember({"none", "drop-third-term"}));
  verify->add_option("--out", verify_out, "Also write the JSON report here");

  // toy experiments
  ToyArgs sweep_a_args, sweep_c_args, compare_args;
  auto* sweep_alpha = app.add_subcommand("sweep-alpha", "Toy perplexity across gradient-term scales");
  std::vector<double> alphas = {1e-3, 1e-2, 1e-1, 1, 10, 100, 1e3, 1e4, 1e5};
  sweep_a_args.add_to(sweep_alpha);
  sweep_alpha->add_option("--alphas", alphas, "Scales to evaluate");

  auto* sweep_calib = app.add_subcommand("sweep-calib", "Toy perplexity across calibration set sizes");
  std::vector<int> sizes = {1, 2, 4, 8, 16, 32, 64, 128, 256, 512};
  int repeats = 1;
  sweep_c_args.add_to(sweep_calib);
  sweep_calib->add_option("--sizes", sizes, "Calibration sequence counts");
  sweep_calib->add_option("--repeats", repeats, "Disjoint calibration sets per size")->check(CLI::PositiveNumber);

  auto* compare = app.add_subcommand("compare-groups", "Toy perplexity for the five comparison groups");
  gblm::Index block = 16;
  compare_args.add_to(compare);
  compare->add_option("--block", block, "Block size of the blocked groups")->check(CLI::PositiveNumber);

  // viz
  auto* viz = app.add_subcommand("viz", "Render one layer's mask as a PGM image");
  std::string viz_masks, viz_layer, viz_out, viz_report;
  viz->add_option("--mask", viz_masks, "Mask container")->required();
  viz->add_option("--layer", viz_layer, "Weight name of the layer")->required();
  viz->add_option("--out", viz_out, "Output .pgm path")->required();
  viz->add_option("--report", viz_report, "Also write the structure report here");

  // toy
  auto* toy = app.add_subcommand("toy", "Train, export and evaluate the toy model");
  toy->require_subcommand(1);
  ToyArgs train_args, export_args, eval_args;
  auto* toy_train = toy->add_subcommand("train", "Train a toy model and write its container");
  std::string train_out;
  int steps = gblm::ToyConfig{}.sgd_steps;
  toy_train->add_option("--seed", train_args.seed, "Seed");
  toy_train->add_option("--steps", steps, "SGD steps")->check(CLI::PositiveNumber);
  toy_train->add_option("--out", train_out, "Output container")->required();

  auto* toy_export = toy->add_subcommand("export", "Write calibration statistics for a toy model");
  std::string export_out;
  export_args.add_to(toy_export, false);
  toy_export->add_option("--n-calib", export_args.n_calib, "Calibration sequences")->check(CLI::PositiveNumber);
  toy_export->add_option("--out", export_out, "Output statistics container")->required();

  auto* toy_eval = toy->add_subcommand("eval", "Toy perplexity, optionally with masks applied");
  std::string eval_masks;
  eval_args.add_to(toy_eval, false);
  toy_eval->add_option("--masks", eval_masks, "Mask container");

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Summarise a statistics container");
  std::string stats_path;
  stats_cmd->add_option("path", stats_path, "Statistics container")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*prune) {
      run.tensors_path = tensors;
      run.stats_path = stats.empty() ? tensors : stats;
      if (!metric_json.empty()) run.metric_json = read_json_file(metric_json);
      run.group = gblm::GroupSpec::parse(group);
      run.sparsity = gblm::SparsitySpec::parse(sparsity);
      if (prune->count("--skip") > 0) run.selection.skip = skip;
      run.masks_out = masks_out;
      if (!report.empty()) run.report_out = report;
      std::cout << gblm::cmd_prune(run).to_json().dump(2) << "\n";
    } else if (*verify) {
      vopt.mutation = mutate == "none" ? gblm::SaliencyMutation::none : gblm::SaliencyMutation::drop_third_term;
      const auto r = gblm::run_verification(vopt);
      emit(gblm::to_json(r), verify_out.empty() ? std::nullopt : std::optional(verify_out));
      if (auto failed = r.first_failure()) {
        std::cerr << "verification failed: " << *failed << "\n";
        return kExitVerifyFailed;
      }
    } else if (*sweep_alpha) {
      emit(gblm::cmd_sweep_alpha(sweep_a_args.context(), sweep_a_args.settings(), alphas).to_json());
    } else if (*sweep_calib) {
      emit(gblm::cmd_sweep_calib(sweep_c_args.context(), sweep_c_args.settings(), sizes, repeats).to_json());
    } else if (*compare) {
      emit(gblm::cmd_compare_groups(compare_args.context(), compare_args.settings(), gblm::standard_groups(block))
               .to_json());
    } else if (*viz) {
      const auto masks = gblm::masks_from_container(gblm::read_container(viz_masks));
      const auto it = masks.find(viz_layer);
      if (it == masks.end()) throw gblm::InputError("no mask for layer '" + viz_layer + "'");
      gblm::render_mask_pgm(it->second, viz_out);
      json out = {{"layer", viz_layer}, {"image", viz_out}, {"sparsity", gblm::to_json(gblm::mask_stats(it->second), false)}};
      if (!viz_report.empty()) {
        out["structure"] = gblm::to_json(gblm::structure_report(it->second));
        emit(out, viz_report);
      } else {
        emit(out);
      }
    } else if (*toy_train) {
      gblm::ToyConfig cfg;
      cfg.seed = train_args.seed;
      cfg.sgd_steps = steps;
      const auto model = gblm::train(cfg);
      gblm::write_container(gblm::to_container(model, cfg), train_out);
      gblm::ToyContext ctx{cfg, model, gblm::gen_corpus(cfg, gblm::Split::eval)};
      emit({{"model", train_out}, {"seed", cfg.seed}, {"steps", cfg.sgd_steps}, {"perplexity", gblm::toy_perplexity(ctx)}});
    } else if (*toy_export) {
      const auto ctx = export_args.context();
      const auto layer_stats = gblm::calibrate(ctx.model, ctx.cfg, {export_args.n_calib, 0});
      gblm::Container c;
      for (const auto& [name, s] : layer_stats) gblm::write_stats(c, name, s);
      gblm::write_sample_count(c, static_cast<std::uint64_t>(export_args.n_calib));
      gblm::write_container(c, export_out);
      emit(stats_summary(c));
    } else if (*toy_eval) {
      const auto ctx = eval_args.context();
      json out = {{"dense_perplexity", gblm::toy_perplexity(ctx)}};
      if (!eval_masks.empty()) {
        const auto masks = gblm::masks_from_container(gblm::read_container(eval_masks));
        out["masked_perplexity"] = gblm::toy_perplexity(ctx, &masks);
      }
      emit(out);
    } else if (*stats_cmd) {
      emit(stats_summary(gblm::read_container(stats_path)));
    }
  } catch (const gblm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
