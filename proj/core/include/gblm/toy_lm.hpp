#pragma once

// A small, fully deterministic next-token model used to exercise the whole
// calibrate -> score -> mask -> evaluate pipeline with real gradients.
//
//   x      = mean of the context's embedding rows      (embed is frozen)
//   h      = relu(W1 x + b1)
//   logits = W2 h + b2
//   loss   = -log softmax(logits)[target]
//
// Only W1 and W2 are prunable. All randomness comes from SplitMix64 streams
// seeded with (seed XOR tag), one tag per consumer.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gblm/calib_stats.hpp"
#include "gblm/common.hpp"
#include "gblm/mask_builder.hpp"
#include "gblm/tensor_store.hpp"

namespace gblm {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  /// Uniform in [0, 1) with 53 bits: (x >> 11) * 2^-53.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept;
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

 private:
  std::uint64_t state_;
};

/// Stream tags; XORed into the seed so each consumer gets its own stream.
namespace stream_tag {
inline constexpr std::uint64_t kLanguage = 0x6C616E6775616765ULL;  // transition matrix
inline constexpr std::uint64_t kTrain = 0x747261696E000001ULL;
inline constexpr std::uint64_t kEval = 0x6576616C00000002ULL;
inline constexpr std::uint64_t kCalib = 0x63616C6962000003ULL;
inline constexpr std::uint64_t kInit = 0x696E697400000004ULL;
inline constexpr std::uint64_t kBatch = 0x6261746368000005ULL;
inline constexpr std::uint64_t kRandomMask = 0x726D61736B000006ULL;
}  // namespace stream_tag

struct ToyConfig {
  int vocab = 64;
  int embed_dim = 32;
  int hidden_dim = 64;
  int context = 8;
  std::uint64_t seed = 0;
  int train_tokens = 32768;
  int eval_tokens = 8192;
  int sgd_steps = 2000;
  int batch = 64;
  double lr = 0.05;
  /// Tokens per calibration sequence (one gradient sample each).
  int calib_seq_len = 128;

  void validate() const;
};

enum class Split { train, eval, calib };
std::string_view split_name(Split s) noexcept;

struct Corpus {
  std::vector<int> tokens;
  MatrixD transition;  ///< row-stochastic (vocab, vocab)
};

/// The shared Markov "language" for a seed: softmax of unit normal logits
/// at temperature 0.5.
MatrixD language_transition(const ToyConfig& cfg);

/// Token stream for a split. `length` 0 selects the split's default size
/// (calib defaults to 128 sequences).
Corpus gen_corpus(const ToyConfig& cfg, Split split, std::size_t length = 0);

inline constexpr std::string_view kEmbedName = "embed.weight";
inline constexpr std::string_view kFc1Name = "layers.0.fc1.weight";
inline constexpr std::string_view kFc1Bias = "layers.0.fc1.bias";
inline constexpr std::string_view kFc2Name = "layers.1.fc2.weight";
inline constexpr std::string_view kFc2Bias = "layers.1.fc2.bias";

struct ToyModel {
  MatrixD embed;  ///< (vocab, embed_dim)
  MatrixD w1;     ///< (hidden_dim, embed_dim)
  VectorD b1;
  MatrixD w2;     ///< (vocab, hidden_dim)
  VectorD b2;

  /// Seeded random initialisation.
  static ToyModel init(const ToyConfig& cfg);
  /// Frozen random embedding with all trainable parameters zero.
  static ToyModel zeros(const ToyConfig& cfg);

  int vocab() const noexcept { return static_cast<int>(embed.rows()); }
  bool operator==(const ToyModel&) const = default;
};

struct Example {
  std::span<const int> window;
  int target = 0;
};

/// All next-token examples with a full context window, in position order.
std::vector<Example> examples_of(std::span<const int> tokens, int context);

struct ForwardResult {
  VectorD x;       ///< mean embedding, W1 input
  VectorD pre;     ///< W1 x + b1
  VectorD h;       ///< relu(pre), W2 input
  VectorD probs;
  double nll = 0.0;
};

ForwardResult forward(const ToyModel& model, const Example& ex);

struct ToyGradients {
  MatrixD w1;
  VectorD b1;
  MatrixD w2;
  VectorD b2;
  double mean_nll = 0.0;
  MatrixD x_rows;  ///< (batch, embed_dim) inputs seen by W1
  MatrixD h_rows;  ///< (batch, hidden_dim) inputs seen by W2
};

/// Analytic gradients of the batch-mean NLL.
ToyGradients backward(const ToyModel& model, std::span<const Example> batch);

/// Plain SGD, cfg.sgd_steps steps of cfg.batch uniformly drawn positions.
ToyModel train(const ToyConfig& cfg);

using LayerMasks = std::map<std::string, PruneMask>;

/// Copy of the model with masks (keyed by kFc1Name / kFc2Name) applied.
ToyModel masked(const ToyModel& model, const LayerMasks& masks);

double mean_nll(const ToyModel& model, std::span<const int> tokens, int context);
double perplexity(const ToyModel& model, const Corpus& corpus, int context, const LayerMasks* masks = nullptr);

struct CalibOptions {
  int n_samples = 128;
  /// Index of the first calibration sequence; lets callers draw disjoint
  /// calibration sets from the same stream.
  int first_sequence = 0;
};

/// One backward pass per calibration sequence over its mean NLL; keyed by
/// kFc1Name / kFc2Name.
std::map<std::string, LayerStats> calibrate(const ToyModel& model, const ToyConfig& cfg, const CalibOptions& opt);

/// Model parameters under the container naming convention, plus the
/// configuration in metadata.
Container to_container(const ToyModel& model, const ToyConfig& cfg);
ToyModel model_from_container(const Container& c);
/// Reads the toy configuration back from container metadata.
ToyConfig config_from_container(const Container& c);
bool is_toy_container(const Container& c);

}  // namespace gblm
