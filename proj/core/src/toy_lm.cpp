#include "gblm/toy_lm.hpp"

#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

namespace gblm {

namespace {

struct BatchForward {
  MatrixD x;       // (B, E)
  MatrixD pre;     // (B, H)
  MatrixD h;       // (B, H)
  MatrixD probs;   // (B, V)
  VectorD nll;     // (B)
};

VectorD mean_embedding(const MatrixD& embed, std::span<const int> window) {
  VectorD x = VectorD::Zero(embed.cols());
  for (int t : window) {
    if (t < 0 || t >= embed.rows()) throw InputError("token " + std::to_string(t) + " out of vocabulary range");
    x += embed.row(t).transpose();
  }
  return x / static_cast<double>(window.size());
}

BatchForward batch_forward(const ToyModel& m, std::span<const Example> batch) {
  const auto n = static_cast<Index>(batch.size());
  BatchForward f;
  f.x.resize(n, m.embed.cols());
  for (Index r = 0; r < n; ++r) {
    const auto& ex = batch[static_cast<std::size_t>(r)];
    if (ex.window.empty()) throw InputError("empty context window");
    if (ex.target < 0 || ex.target >= m.vocab()) {
      throw InputError("target token " + std::to_string(ex.target) + " out of vocabulary range");
    }
    f.x.row(r) = mean_embedding(m.embed, ex.window).transpose();
  }
  f.pre = f.x * m.w1.transpose();
  f.pre.rowwise() += m.b1.transpose();
  f.h = f.pre.cwiseMax(0.0);
  f.probs = f.h * m.w2.transpose();
  f.probs.rowwise() += m.b2.transpose();
  f.nll.resize(n);
  for (Index r = 0; r < n; ++r) {
    auto row = f.probs.row(r);
    const double mx = row.maxCoeff();
    const double logit_target = row(batch[static_cast<std::size_t>(r)].target);
    row = (row.array() - mx).exp().matrix();
    const double z = row.sum();
    row /= z;
    f.nll(r) = std::log(z) + mx - logit_target;
  }
  return f;
}

double normal_scale(int fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

void fill_normal(MatrixD& m, SplitMix64& rng, double scale) {
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = scale * rng.normal();
}

std::uint64_t split_tag(Split s) {
  switch (s) {
    case Split::train: return stream_tag::kTrain;
    case Split::eval: return stream_tag::kEval;
    case Split::calib: return stream_tag::kCalib;
  }
  return 0;
}

}  // namespace

double SplitMix64::normal() noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void ToyConfig::validate() const {
  if (vocab < 1 || embed_dim < 1 || hidden_dim < 1 || context < 1 || train_tokens < 1 || eval_tokens < 1 ||
      sgd_steps < 0 || batch < 1 || calib_seq_len <= context || !(lr >= 0.0)) {
    throw InputError("toy configuration values must be positive (calib_seq_len > context)");
  }
  if (train_tokens <= context || eval_tokens <= context) {
    throw InputError("toy corpora must be longer than the context window");
  }
}

std::string_view split_name(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::eval: return "eval";
    case Split::calib: return "calib";
  }
  return "?";
}

MatrixD language_transition(const ToyConfig& cfg) {
  SplitMix64 rng(cfg.seed ^ stream_tag::kLanguage);
  constexpr double temperature = 0.5;
  MatrixD t(cfg.vocab, cfg.vocab);
  fill_normal(t, rng, 1.0);
  for (Index i = 0; i < t.rows(); ++i) {
    auto row = t.row(i);
    row /= temperature;
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
  return t;
}

Corpus gen_corpus(const ToyConfig& cfg, Split split, std::size_t length) {
  cfg.validate();
  if (length == 0) {
    switch (split) {
      case Split::train: length = static_cast<std::size_t>(cfg.train_tokens); break;
      case Split::eval: length = static_cast<std::size_t>(cfg.eval_tokens); break;
      case Split::calib: length = static_cast<std::size_t>(128 * cfg.calib_seq_len); break;
    }
  }
  Corpus c;
  c.transition = language_transition(cfg);
  SplitMix64 rng(cfg.seed ^ split_tag(split));
  c.tokens.resize(length);
  int prev = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab)));
  if (length > 0) c.tokens[0] = prev;
  for (std::size_t k = 1; k < length; ++k) {
    const double u = rng.uniform();
    double acc = 0.0;
    int next = cfg.vocab - 1;
    for (int j = 0; j < cfg.vocab; ++j) {
      acc += c.transition(prev, j);
      if (u < acc) {
        next = j;
        break;
      }
    }
    c.tokens[k] = next;
    prev = next;
  }
  return c;
}

ToyModel ToyModel::zeros(const ToyConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed ^ stream_tag::kInit);
  ToyModel m;
  m.embed.resize(cfg.vocab, cfg.embed_dim);
  fill_normal(m.embed, rng, 1.0);
  m.w1 = MatrixD::Zero(cfg.hidden_dim, cfg.embed_dim);
  m.b1 = VectorD::Zero(cfg.hidden_dim);
  m.w2 = MatrixD::Zero(cfg.vocab, cfg.hidden_dim);
  m.b2 = VectorD::Zero(cfg.vocab);
  return m;
}

ToyModel ToyModel::init(const ToyConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed ^ stream_tag::kInit);
  ToyModel m;
  m.embed.resize(cfg.vocab, cfg.embed_dim);
  fill_normal(m.embed, rng, 1.0);
  // The context mean shrinks embedding variance by `context`; scale W1 to
  // keep hidden pre-activations at unit order.
  m.w1.resize(cfg.hidden_dim, cfg.embed_dim);
  fill_normal(m.w1, rng, normal_scale(cfg.embed_dim) * std::sqrt(static_cast<double>(cfg.context)));
  m.b1 = VectorD::Zero(cfg.hidden_dim);
  m.w2.resize(cfg.vocab, cfg.hidden_dim);
  fill_normal(m.w2, rng, normal_scale(cfg.hidden_dim) * 0.5);
  m.b2 = VectorD::Zero(cfg.vocab);
  return m;
}

std::vector<Example> examples_of(std::span<const int> tokens, int context) {
  std::vector<Example> out;
  const auto c = static_cast<std::size_t>(context);
  if (tokens.size() <= c) return out;
  out.reserve(tokens.size() - c);
  for (std::size_t t = c; t < tokens.size(); ++t) out.push_back({tokens.subspan(t - c, c), tokens[t]});
  return out;
}

ForwardResult forward(const ToyModel& model, const Example& ex) {
  const auto f = batch_forward(model, std::span<const Example>(&ex, 1));
  return {f.x.row(0).transpose(), f.pre.row(0).transpose(), f.h.row(0).transpose(), f.probs.row(0).transpose(),
          f.nll(0)};
}

ToyGradients backward(const ToyModel& model, std::span<const Example> batch) {
  if (batch.empty()) throw InputError("backward needs a nonempty batch");
  auto f = batch_forward(model, batch);
  const auto n = static_cast<double>(batch.size());

  MatrixD d_logits = std::move(f.probs);
  for (Index r = 0; r < d_logits.rows(); ++r) d_logits(r, batch[static_cast<std::size_t>(r)].target) -= 1.0;
  d_logits /= n;

  ToyGradients g;
  g.w2 = d_logits.transpose() * f.h;
  g.b2 = d_logits.colwise().sum().transpose();
  MatrixD d_pre = d_logits * model.w2;
  d_pre.array() *= (f.pre.array() > 0.0).cast<double>();
  g.w1 = d_pre.transpose() * f.x;
  g.b1 = d_pre.colwise().sum().transpose();
  g.mean_nll = f.nll.mean();
  g.x_rows = std::move(f.x);
  g.h_rows = std::move(f.h);
  return g;
}

ToyModel train(const ToyConfig& cfg) {
  cfg.validate();
  const auto corpus = gen_corpus(cfg, Split::train);
  ToyModel m = ToyModel::init(cfg);
  SplitMix64 rng(cfg.seed ^ stream_tag::kBatch);
  const auto positions = static_cast<std::uint64_t>(corpus.tokens.size() - static_cast<std::size_t>(cfg.context));
  const std::span<const int> tokens(corpus.tokens);
  std::vector<Example> batch(static_cast<std::size_t>(cfg.batch));
  for (int step = 0; step < cfg.sgd_steps; ++step) {
    for (auto& ex : batch) {
      const auto t = static_cast<std::size_t>(cfg.context) + static_cast<std::size_t>(rng.below(positions));
      ex = {tokens.subspan(t - static_cast<std::size_t>(cfg.context), static_cast<std::size_t>(cfg.context)),
            tokens[t]};
    }
    const auto g = backward(m, batch);
    if (!std::isfinite(g.mean_nll)) throw NumericError("training diverged at step " + std::to_string(step));
    m.w1 -= cfg.lr * g.w1;
    m.b1 -= cfg.lr * g.b1;
    m.w2 -= cfg.lr * g.w2;
    m.b2 -= cfg.lr * g.b2;
  }
  return m;
}

ToyModel masked(const ToyModel& model, const LayerMasks& masks) {
  ToyModel out = model;
  for (const auto& [name, mask] : masks) {
    if (name == kFc1Name) {
      out.w1 = apply_mask(model.w1, mask);
    } else if (name == kFc2Name) {
      out.w2 = apply_mask(model.w2, mask);
    } else {
      throw InputError("toy model has no prunable layer '" + name + "'");
    }
  }
  return out;
}

double mean_nll(const ToyModel& model, std::span<const int> tokens, int context) {
  const auto ex = examples_of(tokens, context);
  if (ex.empty()) throw InputError("corpus must be longer than the context window");
  // Chunked to bound the (batch, vocab) probability buffer.
  constexpr std::size_t chunk = 2048;
  double total = 0.0;
  for (std::size_t k = 0; k < ex.size(); k += chunk) {
    const auto len = std::min(chunk, ex.size() - k);
    total += batch_forward(model, std::span<const Example>(ex).subspan(k, len)).nll.sum();
  }
  return total / static_cast<double>(ex.size());
}

double perplexity(const ToyModel& model, const Corpus& corpus, int context, const LayerMasks* masks) {
  if (masks && !masks->empty()) return std::exp(mean_nll(masked(model, *masks), corpus.tokens, context));
  return std::exp(mean_nll(model, corpus.tokens, context));
}

std::map<std::string, LayerStats> calibrate(const ToyModel& model, const ToyConfig& cfg, const CalibOptions& opt) {
  cfg.validate();
  if (opt.n_samples < 1) throw InputError("calibration needs at least one sample");
  if (opt.first_sequence < 0) throw InputError("first calibration sequence must be nonnegative");
  const auto seq = static_cast<std::size_t>(cfg.calib_seq_len);
  const auto total = static_cast<std::size_t>(opt.first_sequence + opt.n_samples) * seq;
  const auto corpus = gen_corpus(cfg, Split::calib, total);

  std::map<std::string, LayerStats> stats;
  stats.emplace(std::string(kFc1Name), LayerStats(model.w1.rows(), model.w1.cols()));
  stats.emplace(std::string(kFc2Name), LayerStats(model.w2.rows(), model.w2.cols()));
  auto& s1 = stats.at(std::string(kFc1Name));
  auto& s2 = stats.at(std::string(kFc2Name));
  const std::span<const int> tokens(corpus.tokens);
  for (int k = opt.first_sequence; k < opt.first_sequence + opt.n_samples; ++k) {
    const auto ex = examples_of(tokens.subspan(static_cast<std::size_t>(k) * seq, seq), cfg.context);
    const auto g = backward(model, ex);
    s1.accumulate_gradient(g.w1);
    s1.accumulate_activations(g.x_rows);
    s2.accumulate_gradient(g.w2);
    s2.accumulate_activations(g.h_rows);
  }
  return stats;
}

Container to_container(const ToyModel& m, const ToyConfig& cfg) {
  Container c;
  c.add(TensorRecord::from_matrix(std::string(kEmbedName), m.embed));
  c.add(TensorRecord::from_matrix(std::string(kFc1Name), m.w1));
  c.add(TensorRecord::from_f64(std::string(kFc1Bias), {static_cast<std::uint64_t>(m.b1.size())},
                               {m.b1.data(), static_cast<std::size_t>(m.b1.size())}));
  c.add(TensorRecord::from_matrix(std::string(kFc2Name), m.w2));
  c.add(TensorRecord::from_f64(std::string(kFc2Bias), {static_cast<std::uint64_t>(m.b2.size())},
                               {m.b2.data(), static_cast<std::size_t>(m.b2.size())}));
  const nlohmann::json j{{"vocab", cfg.vocab},           {"embed_dim", cfg.embed_dim},
                         {"hidden_dim", cfg.hidden_dim}, {"context", cfg.context},
                         {"seed", cfg.seed},             {"train_tokens", cfg.train_tokens},
                         {"eval_tokens", cfg.eval_tokens}, {"sgd_steps", cfg.sgd_steps},
                         {"batch", cfg.batch},           {"lr", cfg.lr},
                         {"calib_seq_len", cfg.calib_seq_len}};
  c.metadata()["toy.config"] = j.dump();
  return c;
}

bool is_toy_container(const Container& c) {
  return c.metadata().contains("toy.config") && c.contains(kEmbedName) && c.contains(kFc1Name) &&
         c.contains(kFc2Name);
}

ToyConfig config_from_container(const Container& c) {
  const auto it = c.metadata().find("toy.config");
  if (it == c.metadata().end()) throw InputError("container carries no toy.config metadata");
  ToyConfig cfg;
  try {
    const auto j = nlohmann::json::parse(it->second);
    cfg.vocab = j.at("vocab");
    cfg.embed_dim = j.at("embed_dim");
    cfg.hidden_dim = j.at("hidden_dim");
    cfg.context = j.at("context");
    cfg.seed = j.at("seed");
    cfg.train_tokens = j.at("train_tokens");
    cfg.eval_tokens = j.at("eval_tokens");
    cfg.sgd_steps = j.at("sgd_steps");
    cfg.batch = j.at("batch");
    cfg.lr = j.at("lr");
    cfg.calib_seq_len = j.value("calib_seq_len", 128);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed toy.config metadata: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ToyModel model_from_container(const Container& c) {
  ToyModel m;
  m.embed = c.at(kEmbedName).to_matrix();
  m.w1 = c.at(kFc1Name).to_matrix();
  m.w2 = c.at(kFc2Name).to_matrix();
  const auto b1 = c.at(kFc1Bias).to_f64();
  const auto b2 = c.at(kFc2Bias).to_f64();
  m.b1 = Eigen::Map<const VectorD>(b1.data(), static_cast<Index>(b1.size()));
  m.b2 = Eigen::Map<const VectorD>(b2.data(), static_cast<Index>(b2.size()));
  if (m.w1.cols() != m.embed.cols() || m.b1.size() != m.w1.rows() || m.w2.cols() != m.w1.rows() ||
      m.w2.rows() != m.embed.rows() || m.b2.size() != m.w2.rows()) {
    throw ShapeError("toy model tensors have inconsistent shapes");
  }
  return m;
}

}  // namespace gblm
