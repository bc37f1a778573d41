#pragma once

// Hierarchical branching network: D layers of K parallel inference units,
// each layer mixing its units per position with routing probabilities
// produced from context embeddings.

#include "caseq/autodiff.hpp"
#include "caseq/data.hpp"

#include <string>
#include <vector>

namespace caseq {

enum class Backbone { Gru, Attention };
enum class Routing { Gumbel, Soft };
enum class BaselineMode { None, Single, Ensemble, Gated };

std::string to_string(Backbone b);
std::string to_string(Routing r);
std::string to_string(BaselineMode m);
Backbone parse_backbone(const std::string& s);
Routing parse_routing(const std::string& s);
BaselineMode parse_baseline(const std::string& s);

struct CaseqConfig {
  int num_event_types = 2;  // M
  int dim = 16;             // d
  int units = 2;            // K
  int layers = 2;           // D
  double tau = 1.0;
  Backbone backbone = Backbone::Gru;
  int max_len = 100;
  Routing routing = Routing::Gumbel;
  BaselineMode baseline = BaselineMode::None;

  int context_dim() const { return dim * (dim + 1); }
  /// K^D; throws ConfigError if it overflows.
  Index num_paths() const;
  void validate() const;
};

std::string config_to_json(const CaseqConfig& config);
CaseqConfig config_from_json(const std::string& text);

// Parameter containers are generic over the element type so the same layout
// serves stored weights (Matrix), tape bindings (ad::Tensor) and optimizer
// state.
template <typename T>
struct UnitSet {
  std::vector<T> tensors;  // see unit_tensor_names()
};

template <typename T>
struct LayerSet {
  T context_embedding;  // H_c, K x d(d+1)
  std::vector<UnitSet<T>> units;
};

template <typename T>
struct ParamSet {
  T event_embedding;  // H_x, M x d
  T positional;       // max_len x d, attention backbone only
  std::vector<LayerSet<T>> layers;
  bool has_positional = false;

  /// Canonical order: H_x, P (if any), then per layer H_c followed by each
  /// unit's tensors.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("H_x"), self.event_embedding);
    if (self.has_positional) f(std::string("P"), self.positional);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string lp = "layer" + std::to_string(l);
      f(lp + ".H_c", self.layers[l].context_embedding);
      for (std::size_t k = 0; k < self.layers[l].units.size(); ++k) {
        auto& unit = self.layers[l].units[k];
        for (std::size_t i = 0; i < unit.tensors.size(); ++i)
          f(lp + ".unit" + std::to_string(k) + "." + std::to_string(i), unit.tensors[i]);
      }
    }
  }
};

using CaseqParams = ParamSet<Matrix>;
using BoundParams = ParamSet<ad::Tensor>;

/// GRU: wx, wh, bx, bh. Attention: wq, wk, wv, wo, w1, b1, w2, b2.
const std::vector<std::string>& unit_tensor_names(Backbone backbone);
bool is_bias(Backbone backbone, std::size_t tensor_index);

/// Zero-filled parameters with the shapes the config requires.
CaseqParams zero_params(const CaseqConfig& config);
/// Throws ConfigError when shapes disagree with the config.
void check_params(const CaseqConfig& config, const CaseqParams& params);

std::vector<Matrix> flatten(const CaseqParams& params);
void unflatten(CaseqParams& params, const std::vector<Matrix>& values);

/// Registers every parameter on the tape, as leaves or constants.
BoundParams bind(ad::Tape& tape, const CaseqParams& params, bool trainable = true);
std::vector<ad::Tensor> flatten(const BoundParams& params);
/// Rebuilds the layout of `layout` from tensors in canonical order.
BoundParams assemble(const CaseqParams& layout, std::span<const ad::Tensor> flat);

// --- building blocks ----------------------------------------------------

/// h^1: rows of H_x for each (1-based) event id, plus positional rows for
/// the attention backbone.
ad::Tensor embed_events(const EventSequence& seq, const BoundParams& params,
                        const CaseqConfig& config);

/// One context-specific unit over an L x d hidden sequence. Output row m
/// depends only on input rows 1..m.
ad::Tensor inference_unit_forward(const ad::Tensor& hidden, const UnitSet<ad::Tensor>& unit,
                                  Backbone backbone);

/// s[m, k] = <a_k, tanh(W_k h_m)> with W_k the row-major reshape of the
/// first d^2 entries of context embedding k and a_k the next d entries.
ad::Tensor branching_scores(const ad::Tensor& hidden, const ad::Tensor& context_embedding,
                            int dim);

/// Row-wise softmax_temp(s, tau) (soft) or softmax_temp(s + gumbel, tau)
/// with i.i.d. noise per entry (gumbel).
ad::Tensor branch_probs(const ad::Tensor& scores, double tau, Routing routing, Rng* rng);

struct LayerOutput {
  ad::Tensor hidden;  // L x d
  ad::Tensor probs;   // L x K
};

LayerOutput layer_forward(const ad::Tensor& hidden, const LayerSet<ad::Tensor>& layer,
                          const CaseqConfig& config, Routing routing, Rng* rng);

struct ForwardResult {
  ad::Tensor logits;                    // L x M
  std::vector<ad::Tensor> layer_probs;  // D tensors, each L x K
  ad::Tensor posterior;                 // L x K^D
};

/// Full model. `routing` overrides config.routing (evaluation passes Soft);
/// rng is required for gumbel routing.
ForwardResult forward(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                      const EventSequence& seq, Routing routing, Rng* rng);

/// Bare backbone: unit 0 of every layer, no routing, tied output.
ad::Tensor backbone_forward(const BoundParams& params, const CaseqConfig& config,
                            const EventSequence& seq);

/// Row-wise Kronecker flatten of the layer probabilities (layer 0 most significant).
ad::Tensor flatten_posterior(std::span<const ad::Tensor> layer_probs);

struct Prediction {
  Matrix logits;
  std::vector<Matrix> layer_probs;
  Matrix posterior;
};

/// Tape-free evaluation with soft routing.
Prediction predict(const CaseqParams& params, const CaseqConfig& config, const EventSequence& seq);

// --- path indexing -------------------------------------------------------

struct ContextPath {
  std::vector<int> units;  // 0-based unit per layer

  /// D x K 0-1 matrix, one-hot rows.
  Matrix as_matrix(int num_units) const;
};

/// Base-K digits of i, most significant digit = layer 0.
ContextPath path_index(Index i, int num_units, int num_layers);
Index path_to_index(const ContextPath& path, int num_units);

}  // namespace caseq
