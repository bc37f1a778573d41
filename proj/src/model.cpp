#include "caseq/model.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace caseq {

using json = nlohmann::json;

std::string to_string(Backbone b) { return b == Backbone::Gru ? "gru" : "attention"; }
std::string to_string(Routing r) { return r == Routing::Gumbel ? "gumbel" : "soft"; }
std::string to_string(BaselineMode m) {
  switch (m) {
    case BaselineMode::None: return "none";
    case BaselineMode::Single: return "single";
    case BaselineMode::Ensemble: return "ensemble";
    case BaselineMode::Gated: return "gated";
  }
  return "none";
}

Backbone parse_backbone(const std::string& s) {
  if (s == "gru") return Backbone::Gru;
  if (s == "attention") return Backbone::Attention;
  throw ConfigError("backbone: unknown value '" + s + "' (expected gru|attention)");
}

Routing parse_routing(const std::string& s) {
  if (s == "gumbel") return Routing::Gumbel;
  if (s == "soft") return Routing::Soft;
  throw ConfigError("routing: unknown value '" + s + "' (expected gumbel|soft)");
}

BaselineMode parse_baseline(const std::string& s) {
  if (s == "none") return BaselineMode::None;
  if (s == "single") return BaselineMode::Single;
  if (s == "ensemble") return BaselineMode::Ensemble;
  if (s == "gated") return BaselineMode::Gated;
  throw ConfigError("baseline: unknown value '" + s + "' (expected none|single|ensemble|gated)");
}

Index CaseqConfig::num_paths() const {
  Index n = 1;
  for (int l = 0; l < layers; ++l) {
    if (n > std::numeric_limits<int>::max() / units) throw ConfigError("K^D overflows");
    n *= units;
  }
  return n;
}

void CaseqConfig::validate() const {
  if (num_event_types < 1) throw ConfigError("M: must be >= 1");
  if (dim < 1) throw ConfigError("d: must be >= 1");
  if (units < 1) throw ConfigError("K: must be >= 1");
  if (layers < 1) throw ConfigError("D: must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("tau: must be > 0");
  if (max_len < 1) throw ConfigError("max_len: must be >= 1");
  (void)num_paths();
}

std::string config_to_json(const CaseqConfig& c) {
  json j;
  j["M"] = c.num_event_types;
  j["d"] = c.dim;
  j["K"] = c.units;
  j["D"] = c.layers;
  j["tau"] = c.tau;
  j["backbone"] = to_string(c.backbone);
  j["max_len"] = c.max_len;
  j["routing"] = to_string(c.routing);
  j["baseline"] = to_string(c.baseline);
  return j.dump();
}

CaseqConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
  CaseqConfig c;
  try {
    if (j.contains("M")) c.num_event_types = j.at("M").get<int>();
    if (j.contains("d")) c.dim = j.at("d").get<int>();
    if (j.contains("K")) c.units = j.at("K").get<int>();
    if (j.contains("D")) c.layers = j.at("D").get<int>();
    if (j.contains("tau")) c.tau = j.at("tau").get<double>();
    if (j.contains("backbone")) c.backbone = parse_backbone(j.at("backbone").get<std::string>());
    if (j.contains("max_len")) c.max_len = j.at("max_len").get<int>();
    if (j.contains("routing")) c.routing = parse_routing(j.at("routing").get<std::string>());
    if (j.contains("baseline")) c.baseline = parse_baseline(j.at("baseline").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<std::string>& unit_tensor_names(Backbone backbone) {
  static const std::vector<std::string> gru = {"wx", "wh", "bx", "bh"};
  static const std::vector<std::string> attention = {"wq", "wk", "wv", "wo",
                                                     "w1", "b1", "w2", "b2"};
  return backbone == Backbone::Gru ? gru : attention;
}

bool is_bias(Backbone backbone, std::size_t i) {
  return backbone == Backbone::Gru ? (i >= 2) : (i == 5 || i == 7);
}

namespace {

std::vector<std::pair<Index, Index>> unit_shapes(Backbone backbone, Index d) {
  if (backbone == Backbone::Gru) return {{d, 3 * d}, {d, 3 * d}, {1, 3 * d}, {1, 3 * d}};
  return {{d, d}, {d, d}, {d, d}, {d, d}, {d, d}, {1, d}, {d, d}, {1, d}};
}

}  // namespace

CaseqParams zero_params(const CaseqConfig& c) {
  c.validate();
  CaseqParams p;
  p.event_embedding = Matrix::Zero(c.num_event_types, c.dim);
  p.has_positional = c.backbone == Backbone::Attention;
  if (p.has_positional) p.positional = Matrix::Zero(c.max_len, c.dim);
  for (int l = 0; l < c.layers; ++l) {
    LayerSet<Matrix> layer;
    layer.context_embedding = Matrix::Zero(c.units, c.context_dim());
    for (int k = 0; k < c.units; ++k) {
      UnitSet<Matrix> unit;
      for (auto [r, cols] : unit_shapes(c.backbone, c.dim)) unit.tensors.push_back(Matrix::Zero(r, cols));
      layer.units.push_back(std::move(unit));
    }
    p.layers.push_back(std::move(layer));
  }
  return p;
}

void check_params(const CaseqConfig& config, const CaseqParams& params) {
  const CaseqParams expected = zero_params(config);
  std::vector<std::pair<std::string, std::pair<Index, Index>>> want, got;
  expected.visit([&](const std::string& n, const Matrix& m) { want.push_back({n, {m.rows(), m.cols()}}); });
  params.visit([&](const std::string& n, const Matrix& m) { got.push_back({n, {m.rows(), m.cols()}}); });
  if (want.size() != got.size())
    throw ConfigError("params: expected " + std::to_string(want.size()) + " tensors, found " +
                      std::to_string(got.size()));
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i] != got[i])
      throw ConfigError("params: tensor " + want[i].first + " expected " +
                        shape_string(want[i].second.first, want[i].second.second) + ", found " +
                        got[i].first + " " + shape_string(got[i].second.first, got[i].second.second));
}

std::vector<Matrix> flatten(const CaseqParams& params) {
  std::vector<Matrix> out;
  params.visit([&out](const std::string&, const Matrix& m) { out.push_back(m); });
  return out;
}

void unflatten(CaseqParams& params, const std::vector<Matrix>& values) {
  std::size_t i = 0;
  params.visit([&](const std::string& name, Matrix& m) {
    if (i >= values.size()) throw DimensionError("unflatten: too few tensors");
    if (values[i].rows() != m.rows() || values[i].cols() != m.cols())
      throw DimensionError("unflatten: " + name + " shape mismatch");
    m = values[i++];
  });
  if (i != values.size()) throw DimensionError("unflatten: too many tensors");
}

BoundParams bind(ad::Tape& tape, const CaseqParams& params, bool trainable) {
  auto reg = [&tape, trainable](const Matrix& m) {
    return trainable ? tape.leaf(m) : tape.constant(m);
  };
  BoundParams b;
  b.has_positional = params.has_positional;
  b.event_embedding = reg(params.event_embedding);
  if (params.has_positional) b.positional = reg(params.positional);
  for (const auto& layer : params.layers) {
    LayerSet<ad::Tensor> bl;
    bl.context_embedding = reg(layer.context_embedding);
    for (const auto& unit : layer.units) {
      UnitSet<ad::Tensor> bu;
      for (const auto& m : unit.tensors) bu.tensors.push_back(reg(m));
      bl.units.push_back(std::move(bu));
    }
    b.layers.push_back(std::move(bl));
  }
  return b;
}

BoundParams assemble(const CaseqParams& layout, std::span<const ad::Tensor> flat) {
  BoundParams b;
  b.has_positional = layout.has_positional;
  b.layers.resize(layout.layers.size());
  for (std::size_t l = 0; l < layout.layers.size(); ++l)
    b.layers[l].units.resize(layout.layers[l].units.size());
  for (std::size_t l = 0; l < layout.layers.size(); ++l)
    for (std::size_t k = 0; k < layout.layers[l].units.size(); ++k)
      b.layers[l].units[k].tensors.resize(layout.layers[l].units[k].tensors.size());
  std::size_t i = 0;
  b.visit([&](const std::string& name, ad::Tensor& t) {
    if (i >= flat.size()) throw DimensionError("assemble: too few tensors for " + name);
    t = flat[i++];
  });
  if (i != flat.size()) throw DimensionError("assemble: too many tensors");
  return b;
}

std::vector<ad::Tensor> flatten(const BoundParams& params) {
  std::vector<ad::Tensor> out;
  params.visit([&out](const std::string&, const ad::Tensor& t) { out.push_back(t); });
  return out;
}

ad::Tensor embed_events(const EventSequence& seq, const BoundParams& params,
                        const CaseqConfig& config) {
  if (seq.empty()) throw ParameterError("embed_events: empty sequence");
  if (static_cast<int>(seq.size()) > config.max_len)
    throw ParameterError("embed_events: sequence longer than max_len; truncate first");
  std::vector<int> ids(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] < 1 || seq[i] > config.num_event_types)
      throw RangeError("embed_events: event id " + std::to_string(seq[i]) + " outside [1, " +
                       std::to_string(config.num_event_types) + "]");
    ids[i] = seq[i] - 1;
  }
  ad::Tensor h = ad::gather_rows(params.event_embedding, ids);
  if (config.backbone == Backbone::Attention) {
    const Index L = static_cast<Index>(seq.size());
    h = ad::add(h, ad::slice(params.positional, 0, 0, L, config.dim));
  }
  return h;
}

ad::Tensor inference_unit_forward(const ad::Tensor& hidden, const UnitSet<ad::Tensor>& unit,
                                  Backbone backbone) {
  if (hidden.rows() == 0) throw ParameterError("inference_unit_forward: empty input");
  const auto& w = unit.tensors;
  if (backbone == Backbone::Gru) return ad::gru_scan(hidden, w[0], w[1], w[2], w[3]);

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hidden.cols()));
  ad::Tensor q = ad::matmul(hidden, w[0]);
  ad::Tensor k = ad::matmul(hidden, w[1]);
  ad::Tensor v = ad::matmul(hidden, w[2]);
  ad::Tensor attn = ad::causal_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d));
  ad::Tensor y = ad::add(hidden, ad::matmul(ad::matmul(attn, v), w[3]));
  ad::Tensor ff = ad::matmul(ad::relu(ad::add_row(ad::matmul(y, w[4]), w[5])), w[6]);
  return ad::add(y, ad::add_row(ff, w[7]));
}

ad::Tensor branching_scores(const ad::Tensor& hidden, const ad::Tensor& context_embedding,
                            int dim) {
  const Index d = dim;
  if (context_embedding.cols() != d * (d + 1) || hidden.cols() != d)
    throw DimensionError("branching_scores: context embedding " +
                         shape_of(context_embedding.value()) + " inconsistent with hidden " +
                         shape_of(hidden.value()));
  std::vector<ad::Tensor> scores;
  for (Index k = 0; k < context_embedding.rows(); ++k) {
    ad::Tensor w = ad::reshape(ad::slice(context_embedding, k, 0, 1, d * d), d, d);
    ad::Tensor a = ad::slice(context_embedding, k, d * d, 1, d);
    ad::Tensor proj = ad::tanh(ad::matmul(hidden, ad::transpose(w)));
    scores.push_back(ad::matmul(proj, ad::transpose(a)));
  }
  return ad::concat_cols(scores);
}

ad::Tensor branch_probs(const ad::Tensor& scores, double tau, Routing routing, Rng* rng) {
  if (!(tau > 0.0)) throw ParameterError("branch_probs: temperature must be positive");
  if (routing == Routing::Soft) return ad::softmax_temp(scores, tau);
  if (!rng) throw ParameterError("branch_probs: gumbel routing needs a random stream");
  Matrix noise(scores.rows(), scores.cols());
  for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = gumbel(*rng);
  ad::Tape& tape = *scores.tape();
  return ad::softmax_temp(ad::add(scores, tape.constant(std::move(noise))), tau);
}

LayerOutput layer_forward(const ad::Tensor& hidden, const LayerSet<ad::Tensor>& layer,
                          const CaseqConfig& config, Routing routing, Rng* rng) {
  ad::Tape& tape = *hidden.tape();
  const Index L = hidden.rows();
  const Index K = static_cast<Index>(layer.units.size());
  if (config.baseline == BaselineMode::Single) {
    Matrix onehot = Matrix::Zero(L, K);
    onehot.col(0).setOnes();
    return {inference_unit_forward(hidden, layer.units[0], config.backbone),
            tape.constant(std::move(onehot))};
  }

  ad::Tensor probs;
  if (config.baseline == BaselineMode::Ensemble) {
    probs = tape.constant(Matrix::Constant(L, K, 1.0 / static_cast<double>(K)));
  } else {
    const Routing effective = config.baseline == BaselineMode::Gated ? Routing::Soft : routing;
    probs = branch_probs(branching_scores(hidden, layer.context_embedding, config.dim), config.tau,
                         effective, rng);
  }

  ad::Tensor out;
  for (Index k = 0; k < K; ++k) {
    ad::Tensor cand = inference_unit_forward(hidden, layer.units[static_cast<std::size_t>(k)],
                                             config.backbone);
    ad::Tensor weighted = ad::mul_col(ad::slice(probs, 0, k, L, 1), cand);
    out = k == 0 ? weighted : ad::add(out, weighted);
  }
  return {out, probs};
}

ad::Tensor flatten_posterior(std::span<const ad::Tensor> layer_probs) {
  if (layer_probs.empty()) throw DimensionError("flatten_posterior: no layers");
  ad::Tensor flat = layer_probs[0];
  for (std::size_t l = 1; l < layer_probs.size(); ++l) flat = ad::row_kron(flat, layer_probs[l]);
  return flat;
}

ForwardResult forward(ad::Tape& tape, const BoundParams& params, const CaseqConfig& config,
                      const EventSequence& seq, Routing routing, Rng* rng) {
  if (seq.empty()) throw ParameterError("forward: empty sequence");
  if (static_cast<int>(params.layers.size()) != config.layers ||
      params.event_embedding.rows() != config.num_event_types ||
      params.event_embedding.cols() != config.dim)
    throw ConfigError("forward: parameters do not match config");
  tape.check_owned(params.event_embedding, "forward");

  ForwardResult res;
  ad::Tensor h = embed_events(seq, params, config);
  for (const auto& layer : params.layers) {
    if (static_cast<int>(layer.units.size()) != config.units)
      throw ConfigError("forward: layer unit count does not match K");
    LayerOutput out = layer_forward(h, layer, config, routing, rng);
    h = out.hidden;
    res.layer_probs.push_back(out.probs);
  }
  res.logits = ad::matmul(h, ad::transpose(params.event_embedding));
  res.posterior = flatten_posterior(res.layer_probs);
  return res;
}

ad::Tensor backbone_forward(const BoundParams& params, const CaseqConfig& config,
                            const EventSequence& seq) {
  ad::Tensor h = embed_events(seq, params, config);
  for (const auto& layer : params.layers)
    h = inference_unit_forward(h, layer.units[0], config.backbone);
  return ad::matmul(h, ad::transpose(params.event_embedding));
}

Prediction predict(const CaseqParams& params, const CaseqConfig& config, const EventSequence& seq) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, params, false);
  const ForwardResult res = forward(tape, bound, config, seq, Routing::Soft, nullptr);
  Prediction p;
  p.logits = res.logits.value();
  for (const auto& q : res.layer_probs) p.layer_probs.push_back(q.value());
  p.posterior = res.posterior.value();
  return p;
}

Matrix ContextPath::as_matrix(int num_units) const {
  Matrix m = Matrix::Zero(static_cast<Index>(units.size()), num_units);
  for (std::size_t l = 0; l < units.size(); ++l) m(static_cast<Index>(l), units[l]) = 1.0;
  return m;
}

ContextPath path_index(Index i, int num_units, int num_layers) {
  if (num_units < 1 || num_layers < 1) throw ParameterError("path_index: K and D must be >= 1");
  Index total = 1;
  for (int l = 0; l < num_layers; ++l) total *= num_units;
  if (i < 0 || i >= total)
    throw RangeError("path_index: " + std::to_string(i) + " outside [0, " + std::to_string(total) + ")");
  ContextPath p;
  p.units.assign(static_cast<std::size_t>(num_layers), 0);
  for (int l = num_layers; l-- > 0;) {
    p.units[static_cast<std::size_t>(l)] = static_cast<int>(i % num_units);
    i /= num_units;
  }
  return p;
}

Index path_to_index(const ContextPath& path, int num_units) {
  Index i = 0;
  for (int u : path.units) i = i * num_units + u;
  return i;
}

}  // namespace caseq
