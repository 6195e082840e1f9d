#include "gblm/metric_engine.hpp"

#include <cmath>
#include <optional>

namespace gblm {

namespace {

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr MetricTerm act_term(int power) { return {1.0, WeightFactor::abs_w, ActFactor::act_l2, GradFactor::none, power}; }

constexpr MetricTerm grad_term(double coeff, WeightFactor wf, GradFactor gf) {
  return {coeff, wf, ActFactor::none, gf, 1};
}

GradFactor grad_factor_of(std::string_view suffix) {
  if (suffix == "acc") return GradFactor::acc;
  if (suffix == "l1") return GradFactor::l1;
  if (suffix == "l2") return GradFactor::l2;
  throw InputError("bad gradient suffix");
}

std::optional<MetricSpec> make_builtin(std::string_view name, double alpha) {
  const std::string n(name);
  auto with = [&](std::vector<MetricTerm> terms) { return MetricSpec{n, std::move(terms)}; };
  auto starts = [&](std::string_view prefix) { return name.starts_with(prefix); };
  auto tail = [&](std::string_view prefix) { return name.substr(prefix.size()); };
  auto is_norm = [](std::string_view s) { return s == "acc" || s == "l1" || s == "l2"; };

  if (name == "magnitude") return with({{1.0, WeightFactor::abs_w, ActFactor::none, GradFactor::none, 1}});
  if (name == "wanda") return with({act_term(1)});
  if (name == "sq-signed-acc-plus") return with({act_term(2), grad_term(alpha, WeightFactor::signed_w, GradFactor::sum)});
  if (name == "sq-signed-acc-minus") return with({act_term(2), grad_term(-alpha, WeightFactor::signed_w, GradFactor::sum)});

  struct Family {
    std::string_view prefix;
    int power;       // 0 = no activation term
    double sign;     // sign of the alpha-scaled gradient term
    WeightFactor wf;
    bool fused;      // single product term |W|*||X||*||G||
  };
  static constexpr Family families[] = {
      {"grad-", 0, 1.0, WeightFactor::abs_w, false},
      {"wanda-grad-", 1, 1.0, WeightFactor::abs_w, true},
      {"gblm-sq-minus-", 2, -1.0, WeightFactor::abs_w, false},
      {"gblm-sq-", 2, 1.0, WeightFactor::abs_w, false},
      {"gblm-minus-", 1, -1.0, WeightFactor::abs_w, false},
      {"gblm-", 1, 1.0, WeightFactor::abs_w, false},
      {"sq-signed-plus-", 2, 1.0, WeightFactor::signed_w, false},
      {"sq-signed-minus-", 2, -1.0, WeightFactor::signed_w, false},
  };
  for (const auto& f : families) {
    if (!starts(f.prefix) || !is_norm(tail(f.prefix))) continue;
    const auto gf = grad_factor_of(tail(f.prefix));
    if (f.prefix.starts_with("sq-signed") && gf == GradFactor::acc) continue;
    if (f.power == 0) return with({grad_term(1.0, f.wf, gf)});
    if (f.fused) return with({{1.0, WeightFactor::abs_w, ActFactor::act_l2, gf, 1}});
    return with({act_term(f.power), grad_term(f.sign * alpha, f.wf, gf)});
  }
  return std::nullopt;
}

std::string_view to_string(WeightFactor f) {
  switch (f) {
    case WeightFactor::none: return "none";
    case WeightFactor::abs_w: return "abs_w";
    case WeightFactor::signed_w: return "signed_w";
  }
  return "?";
}

std::string_view to_string(ActFactor f) { return f == ActFactor::act_l2 ? "act_l2" : "none"; }

std::string_view to_string(GradFactor f) {
  switch (f) {
    case GradFactor::none: return "none";
    case GradFactor::acc: return "acc";
    case GradFactor::l1: return "l1";
    case GradFactor::l2: return "l2";
    case GradFactor::sum: return "sum";
  }
  return "?";
}

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options,
             E fallback) {
  if (!j.contains(key)) return fallback;
  const auto s = j.at(key).get<std::string>();
  for (const auto& [label, value] : options) {
    if (s == label) return value;
  }
  throw InputError(std::string("metric term: unknown ") + key + " '" + s + "'");
}

}  // namespace

void MetricTerm::validate() const {
  if (!std::isfinite(coefficient)) throw InputError("metric term coefficient must be finite");
  if (weight == WeightFactor::none && act == ActFactor::none && grad == GradFactor::none) {
    throw InputError("metric term has no factor");
  }
  if (power != 1 && power != 2) throw InputError("metric term power must be 1 or 2");
  if (power == 2 && grad != GradFactor::none) {
    throw InputError("power 2 applies to the weight-activation product only; drop the gradient factor");
  }
}

void MetricSpec::validate() const {
  if (terms.empty()) throw InputError("metric '" + name + "' has no terms");
  for (const auto& t : terms) t.validate();
}

bool MetricSpec::uses_gradients() const {
  for (const auto& t : terms) {
    if (t.grad != GradFactor::none) return true;
  }
  return false;
}

bool MetricSpec::uses_activations() const {
  for (const auto& t : terms) {
    if (t.act != ActFactor::none) return true;
  }
  return false;
}

const std::vector<std::string>& builtin_metric_names() {
  static const std::vector<std::string> names = {
      "magnitude",         "wanda",
      "grad-acc",          "grad-l1",
      "grad-l2",           "wanda-grad-acc",
      "wanda-grad-l1",     "wanda-grad-l2",
      "gblm-acc",          "gblm-l1",
      "gblm-l2",           "gblm-minus-acc",
      "gblm-minus-l1",     "gblm-minus-l2",
      "sq-signed-acc-plus", "sq-signed-plus-l1",
      "sq-signed-plus-l2", "sq-signed-acc-minus",
      "sq-signed-minus-l1", "sq-signed-minus-l2",
      "gblm-sq-acc",       "gblm-sq-l1",
      "gblm-sq-l2",        "gblm-sq-minus-acc",
      "gblm-sq-minus-l1",  "gblm-sq-minus-l2",
  };
  return names;
}

MetricSpec builtin_metric(std::string_view name, double alpha) {
  if (!std::isfinite(alpha)) throw InputError("alpha must be finite");
  auto spec = make_builtin(name, alpha);
  if (!spec) throw InputError("unknown metric '" + std::string(name) + "'");
  spec->validate();
  return *spec;
}

ImportanceMatrix score(const MetricSpec& spec, const MatrixD& w, const LayerStats& stats) {
  spec.validate();
  if (w.rows() != stats.d_out() || w.cols() != stats.d_in()) {
    throw ShapeError("weight shape (" + std::to_string(w.rows()) + "," + std::to_string(w.cols()) +
                     ") does not match statistics (" + std::to_string(stats.d_out()) + "," +
                     std::to_string(stats.d_in()) + ")");
  }
  if (spec.uses_gradients() && stats.n_samples() == 0) {
    throw NumericError("metric '" + spec.name + "' needs gradients but no samples were accumulated");
  }
  if (spec.uses_activations() && stats.n_act_rows() == 0) {
    throw NumericError("metric '" + spec.name + "' needs activations but no rows were accumulated");
  }

  const Array wa = w.array();
  Array total = Array::Zero(w.rows(), w.cols());
  std::optional<Eigen::Array<double, 1, Eigen::Dynamic>> act;
  for (const auto& t : spec.terms) {
    Array term = Array::Ones(w.rows(), w.cols());
    if (t.weight == WeightFactor::abs_w) term = wa.abs();
    if (t.weight == WeightFactor::signed_w) term = wa;
    if (t.act == ActFactor::act_l2) {
      if (!act) act = stats.act_norm().transpose().array();
      term.rowwise() *= *act;
    }
    if (t.power == 2) term = term.square();
    switch (t.grad) {
      case GradFactor::none: break;
      case GradFactor::acc: term *= stats.grad_norm(GradNorm::acc).array(); break;
      case GradFactor::l1: term *= stats.grad_norm(GradNorm::l1).array(); break;
      case GradFactor::l2: term *= stats.grad_norm(GradNorm::l2).array(); break;
      case GradFactor::sum: term *= stats.grad_sum().array(); break;
    }
    total += t.coefficient * term;
  }
  for (Index i = 0; i < total.rows(); ++i) {
    for (Index j = 0; j < total.cols(); ++j) {
      if (!std::isfinite(total(i, j))) {
        throw NumericError("metric '" + spec.name + "' produced a non-finite score at (" + std::to_string(i) +
                           "," + std::to_string(j) + ")");
      }
    }
  }
  return {total.matrix(), spec.name};
}

bool is_prunable_weight(const TensorRecord& r, const LayerSelection& sel) {
  if (r.shape.size() != 2 || !r.name.ends_with(".weight")) return false;
  for (const auto& s : sel.skip) {
    if (!s.empty() && r.name.find(s) != std::string::npos) return false;
  }
  return true;
}

std::map<std::string, ImportanceMatrix> score_all_layers(const Container& weights, const Container& stats,
                                                         const MetricSpec& spec, const LayerSelection& sel) {
  std::map<std::string, ImportanceMatrix> out;
  for (const auto& r : weights.records()) {
    if (!is_prunable_weight(r, sel)) continue;
    if (!has_stats(stats, r.name)) throw InputError("missing calibration statistics for layer '" + r.name + "'");
    auto layer_stats = read_stats(stats, r.name);
    const MatrixD w = r.to_matrix();
    if (w.rows() != layer_stats.d_out() || w.cols() != layer_stats.d_in()) {
      throw ShapeError("layer '" + r.name + "': weight and statistics dimensions differ");
    }
    try {
      out.emplace(r.name, score(spec, w, layer_stats));
    } catch (const Error& e) {
      throw NumericError("layer '" + r.name + "': " + e.what());
    }
  }
  return out;
}

nlohmann::json to_json(const MetricSpec& spec) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& t : spec.terms) {
    terms.push_back({{"coefficient", t.coefficient},
                     {"weight_factor", to_string(t.weight)},
                     {"act_factor", to_string(t.act)},
                     {"grad_factor", to_string(t.grad)},
                     {"power", t.power}});
  }
  return {{"name", spec.name}, {"terms", terms}};
}

MetricSpec metric_from_json(const nlohmann::json& j) {
  MetricSpec spec;
  try {
    spec.name = j.value("name", std::string("custom"));
    for (const auto& jt : j.at("terms")) {
      MetricTerm t;
      t.coefficient = jt.value("coefficient", 1.0);
      t.weight = parse_enum<WeightFactor>(
          jt, "weight_factor",
          {{"none", WeightFactor::none}, {"abs_w", WeightFactor::abs_w}, {"signed_w", WeightFactor::signed_w}},
          MetricTerm{}.weight);
      t.act = parse_enum<ActFactor>(jt, "act_factor", {{"none", ActFactor::none}, {"act_l2", ActFactor::act_l2}},
                                    ActFactor::none);
      t.grad = parse_enum<GradFactor>(jt, "grad_factor",
                                      {{"none", GradFactor::none},
                                       {"acc", GradFactor::acc},
                                       {"l1", GradFactor::l1},
                                       {"l2", GradFactor::l2},
                                       {"sum", GradFactor::sum}},
                                      GradFactor::none);
      t.power = jt.value("power", 1);
      spec.terms.push_back(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed metric JSON: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace gblm
