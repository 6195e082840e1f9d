#include "gblm/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

namespace gblm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

nlohmann::json perplexity_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

std::map<std::string, PruneMask> prune_layers(const Container& weights, const Container& stats,
                                              const MetricSpec& spec, const GroupSpec& group,
                                              const SparsitySpec& sparsity, const LayerSelection& sel,
                                              int workers) {
  spec.validate();
  std::vector<const TensorRecord*> layers;
  for (const auto& r : weights.records()) {
    if (!is_prunable_weight(r, sel)) continue;
    if (!has_stats(stats, r.name)) throw InputError("missing calibration statistics for layer '" + r.name + "'");
    layers.push_back(&r);
  }

  std::vector<std::optional<PruneMask>> results(layers.size());
  std::vector<std::exception_ptr> errors(layers.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k = next++; k < layers.size(); k = next++) {
      const auto& r = *layers[k];
      try {
        const auto layer_stats = read_stats(stats, r.name);
        const MatrixD w = r.to_matrix();
        if (w.rows() != layer_stats.d_out() || w.cols() != layer_stats.d_in()) {
          throw ShapeError("weight and statistics dimensions differ");
        }
        results[k] = build_mask(score(spec, w, layer_stats), group, sparsity);
      } catch (const Error& e) {
        errors[k] = std::make_exception_ptr(InputError("layer '" + r.name + "': " + e.what()));
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::max(1, workers));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < std::min(n_threads, layers.size()); ++t) pool.emplace_back(work);
    work();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::map<std::string, PruneMask> out;
  for (std::size_t k = 0; k < layers.size(); ++k) out.emplace(layers[k]->name, std::move(*results[k]));
  return out;
}

Container masks_to_container(const std::map<std::string, PruneMask>& masks) {
  Container c;
  for (const auto& [name, mask] : masks) {
    c.add(TensorRecord::from_mask(mask_record_name(name), mask.mask));
    c.metadata()["group:" + name] = mask.group.label();
    c.metadata()["sparsity:" + name] = mask.sparsity.label();
  }
  return c;
}

std::map<std::string, PruneMask> masks_from_container(const Container& c) {
  std::map<std::string, PruneMask> out;
  constexpr std::string_view suffix = ".mask";
  for (const auto& r : c.records()) {
    if (!r.name.ends_with(suffix)) continue;
    const auto layer = r.name.substr(0, r.name.size() - suffix.size());
    PruneMask m{r.to_mask(), GroupSpec::output_1(), SparsitySpec::unstructured(0.5)};
    if (auto it = c.metadata().find("group:" + layer); it != c.metadata().end()) m.group = GroupSpec::parse(it->second);
    if (auto it = c.metadata().find("sparsity:" + layer); it != c.metadata().end()) {
      m.sparsity = SparsitySpec::parse(it->second);
    }
    out.emplace(layer, std::move(m));
  }
  return out;
}

MetricSpec RunConfig::metric_spec() const {
  if (metric_json) return metric_from_json(*metric_json);
  return builtin_metric(metric, alpha);
}

nlohmann::json RunReport::to_json() const {
  nlohmann::json layers_json = nlohmann::json::object();
  for (const auto& [name, lr] : layers) {
    auto j = gblm::to_json(lr.sparsity, false);
    j["pruned_per_row_min"] = lr.sparsity.pruned_per_row.empty()
                                  ? 0
                                  : *std::min_element(lr.sparsity.pruned_per_row.begin(), lr.sparsity.pruned_per_row.end());
    j["pruned_per_row_max"] = lr.sparsity.pruned_per_row.empty()
                                  ? 0
                                  : *std::max_element(lr.sparsity.pruned_per_row.begin(), lr.sparsity.pruned_per_row.end());
    if (lr.structure) {
      j["excess_variance_ratio"] = lr.structure->excess_variance_ratio;
      j["chi_sq_columns"] = lr.structure->chi_sq_columns;
    }
    layers_json[name] = std::move(j);
  }
  return {{"metric", gblm::to_json(metric)},
          {"alpha", alpha},
          {"group", group.label()},
          {"sparsity", sparsity.label()},
          {"layers", layers_json},
          {"seconds", seconds},
          {"perplexity_before", perplexity_json(perplexity_before)},
          {"perplexity_after", perplexity_json(perplexity_after)}};
}

RunReport cmd_prune(const RunConfig& cfg) {
  RunReport report;
  report.metric = cfg.metric_spec();
  report.alpha = cfg.alpha;
  report.group = cfg.group;
  report.sparsity = cfg.sparsity;

  auto t0 = Clock::now();
  const Container weights = read_container(cfg.tensors_path);
  const Container stats = cfg.stats_path == cfg.tensors_path ? weights : read_container(cfg.stats_path);
  report.seconds["load"] = seconds_since(t0);

  t0 = Clock::now();
  const auto masks = prune_layers(weights, stats, report.metric, cfg.group, cfg.sparsity, cfg.selection, cfg.workers);
  report.seconds["prune"] = seconds_since(t0);

  t0 = Clock::now();
  write_container(masks_to_container(masks), cfg.masks_out);
  report.seconds["write"] = seconds_since(t0);

  for (const auto& [name, mask] : masks) {
    LayerReport lr{mask_stats(mask), std::nullopt};
    if (!cfg.sparsity.is_nm() && cfg.group.kind == GroupKind::output_1) lr.structure = structure_report(mask);
    report.layers.emplace(name, std::move(lr));
  }

  if (is_toy_container(weights)) {
    t0 = Clock::now();
    ToyContext ctx{config_from_container(weights), model_from_container(weights), {}};
    ctx.eval = gen_corpus(ctx.cfg, Split::eval);
    LayerMasks toy;
    for (const auto& [name, mask] : masks) {
      if (name == kFc1Name || name == kFc2Name) toy.emplace(name, mask);
    }
    report.perplexity_before = toy_perplexity(ctx);
    report.perplexity_after = toy_perplexity(ctx, &toy);
    report.seconds["evaluate"] = seconds_since(t0);
  }

  if (cfg.report_out) {
    std::ofstream out(*cfg.report_out);
    if (!out) throw Error("cannot open '" + cfg.report_out->string() + "' for writing");
    out << report.to_json().dump(2) << "\n";
  }
  return report;
}

ToyContext make_toy_context(const ToyConfig& cfg) {
  ToyContext ctx{cfg, train(cfg), gen_corpus(cfg, Split::eval)};
  return ctx;
}

LayerMasks toy_masks(const ToyContext& ctx, const std::map<std::string, LayerStats>& stats, const MetricSpec& spec,
                     const GroupSpec& group, const SparsitySpec& sparsity) {
  LayerMasks out;
  const std::pair<std::string_view, const MatrixD*> layers[] = {{kFc1Name, &ctx.model.w1}, {kFc2Name, &ctx.model.w2}};
  for (const auto& [name, w] : layers) {
    const std::string key(name);
    out.emplace(key, build_mask(score(spec, *w, stats.at(key)), group, sparsity));
  }
  return out;
}

LayerMasks toy_random_masks(const ToyContext& ctx, const GroupSpec& group, const SparsitySpec& sparsity,
                            std::uint64_t salt) {
  SplitMix64 rng(ctx.cfg.seed ^ stream_tag::kRandomMask ^ salt);
  LayerMasks out;
  const std::pair<std::string_view, const MatrixD*> layers[] = {{kFc1Name, &ctx.model.w1}, {kFc2Name, &ctx.model.w2}};
  for (const auto& [name, w] : layers) {
    MatrixD scores(w->rows(), w->cols());
    for (Index k = 0; k < scores.size(); ++k) scores.data()[k] = rng.uniform();
    out.emplace(std::string(name), build_mask(scores, group, sparsity));
  }
  return out;
}

double toy_perplexity(const ToyContext& ctx, const LayerMasks* masks) {
  return perplexity(ctx.model, ctx.eval, ctx.cfg.context, masks);
}

nlohmann::json AlphaSweep::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) rows_json.push_back({{"alpha", r.alpha}, {"perplexity", r.perplexity}});
  return {{"rows", rows_json}, {"best_alpha", best_alpha}, {"dense_perplexity", dense_perplexity}};
}

AlphaSweep cmd_sweep_alpha(const ToyContext& ctx, const ToyRunSettings& s, const std::vector<double>& alphas) {
  if (alphas.empty()) throw InputError("alpha sweep needs at least one alpha");
  const auto stats = calibrate(ctx.model, ctx.cfg, {s.n_calib, 0});
  AlphaSweep out;
  out.dense_perplexity = toy_perplexity(ctx);
  double best = std::numeric_limits<double>::infinity();
  for (double a : alphas) {
    const auto masks = toy_masks(ctx, stats, builtin_metric(s.metric, a), s.group, s.sparsity);
    const double ppl = toy_perplexity(ctx, &masks);
    out.rows.push_back({a, ppl});
    if (ppl < best) {
      best = ppl;
      out.best_alpha = a;
    }
  }
  return out;
}

nlohmann::json CalibSweep::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"n_samples", r.n_samples},
                         {"perplexity", r.perplexity},
                         {"mean", r.mean},
                         {"stddev", r.stddev},
                         {"repeats", r.repeats}});
  }
  return {{"rows", rows_json}, {"dense_perplexity", dense_perplexity}};
}

CalibSweep cmd_sweep_calib(const ToyContext& ctx, const ToyRunSettings& s, const std::vector<int>& sizes, int repeats) {
  if (sizes.empty()) throw InputError("calibration sweep needs at least one size");
  if (repeats < 1) throw InputError("repeats must be positive");
  const auto spec = builtin_metric(s.metric, s.alpha);
  CalibSweep out;
  out.dense_perplexity = toy_perplexity(ctx);
  for (int n : sizes) {
    if (n < 1) throw InputError("calibration size must be positive");
    CalibRow row{n, 0.0, 0.0, 0.0, {}};
    for (int r = 0; r < repeats; ++r) {
      const auto stats = calibrate(ctx.model, ctx.cfg, {n, r * n});
      const auto masks = toy_masks(ctx, stats, spec, s.group, s.sparsity);
      row.repeats.push_back(toy_perplexity(ctx, &masks));
    }
    row.perplexity = row.repeats.front();
    double sum = 0.0;
    for (double v : row.repeats) sum += v;
    row.mean = sum / static_cast<double>(repeats);
    if (repeats > 1) {
      double ss = 0.0;
      for (double v : row.repeats) ss += (v - row.mean) * (v - row.mean);
      row.stddev = std::sqrt(ss / static_cast<double>(repeats - 1));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::vector<GroupSpec> standard_groups(Index block) {
  return {GroupSpec::layer(), GroupSpec::input_1(), GroupSpec::input_block(block), GroupSpec::output_1(),
          GroupSpec::output_block(block)};
}

nlohmann::json GroupComparison::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) rows_json.push_back({{"group", r.group.label()}, {"perplexity", r.perplexity}});
  return {{"rows", rows_json}, {"winner", winner.label()}};
}

GroupComparison cmd_compare_groups(const ToyContext& ctx, const ToyRunSettings& s, const std::vector<GroupSpec>& groups) {
  if (groups.empty()) throw InputError("no comparison groups given");
  const auto stats = calibrate(ctx.model, ctx.cfg, {s.n_calib, 0});
  const auto spec = builtin_metric(s.metric, s.alpha);
  GroupComparison out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& g : groups) {
    const auto masks = toy_masks(ctx, stats, spec, g, s.sparsity);
    const double ppl = toy_perplexity(ctx, &masks);
    out.rows.push_back({g, ppl});
    if (ppl < best) {
      best = ppl;
      out.winner = g;
    }
  }
  return out;
}

}  // namespace gblm
