#include "caseq/scm.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace caseq::scm {

using json = nlohmann::json;

namespace {

constexpr double kStochasticTol = 1e-12;

void check_simplex(const Eigen::Ref<const RowVector>& v, const std::string& what) {
  if ((v.array() < 0.0).any() || !v.allFinite())
    throw ConfigError(what + ": negative or non-finite entry");
  if (std::abs(v.sum() - 1.0) > kStochasticTol)
    throw ConfigError(what + ": entries sum to " + std::to_string(v.sum()) + ", not 1");
}

int draw_categorical(const Eigen::Ref<const RowVector>& p, Rng& rng) {
  double u = uniform_open(rng);
  const Index n = p.size();
  for (Index i = 0; i < n; ++i) {
    u -= p(i);
    if (u <= 0.0) return static_cast<int>(i);
  }
  // Rounding residue: fall back to the last category with mass.
  for (Index i = n; i-- > 0;)
    if (p(i) > 0.0) return static_cast<int>(i);
  return static_cast<int>(n - 1);
}

void check_prefix(const ScmSpec& spec, const EventSequence& prefix, int t) {
  if (prefix.empty()) throw ParameterError("scm: prefix must be non-empty");
  if (t != static_cast<int>(prefix.size()) + 1)
    throw ParameterError("scm: target position t=" + std::to_string(t) +
                         " must equal |prefix|+1=" + std::to_string(prefix.size() + 1));
  for (int id : prefix)
    if (id < 1 || id > spec.num_event_types)
      throw RangeError("scm: event id " + std::to_string(id) + " out of range");
}

/// P(y | S, c) for all contexts and outcomes: C x M.
Matrix conditional_rows(const ScmSpec& spec, int last) {
  Matrix rows(spec.num_contexts, spec.num_event_types);
  for (int c = 0; c < spec.num_contexts; ++c) rows.row(c) = spec.kernel_row(c, last);
  return rows;
}

Matrix matrix_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) throw ConfigError(key + ": expected a non-empty 2-D array");
  const std::size_t rows = j.size();
  const std::size_t cols = j[0].size();
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(key + ": ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw ConfigError(key + ": non-numeric entry");
      m(static_cast<Index>(r), static_cast<Index>(c)) = j[r][c].get<double>();
    }
  }
  return m;
}

Vector vector_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) throw ConfigError(key + ": expected a non-empty array");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(key + ": non-numeric entry");
    v(static_cast<Index>(i)) = j[i].get<double>();
  }
  return v;
}

json matrix_to_json(const Matrix& m) {
  json out = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

template <typename T>
T required(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("key '") + key + "' has the wrong type");
  }
}

}  // namespace

void ScmSpec::validate() const {
  if (num_contexts < 1) throw ConfigError("C_true: must be >= 1");
  if (num_event_types < 2) throw ConfigError("M: must be >= 2");
  if (static_cast<int>(transitions.size()) != num_contexts)
    throw ConfigError("transitions: expected " + std::to_string(num_contexts) + " matrices");
  const Index m = num_event_types;
  auto check_kernel = [m](const Matrix& k, const std::string& what) {
    if (k.rows() != m || k.cols() != m)
      throw ConfigError(what + ": expected " + shape_string(m, m) + ", got " + shape_of(k));
    for (Index r = 0; r < m; ++r) check_simplex(k.row(r), what + " row " + std::to_string(r + 1));
  };
  for (int c = 0; c < num_contexts; ++c)
    check_kernel(transitions[static_cast<std::size_t>(c)],
                 "transitions[" + std::to_string(c + 1) + "]");
  check_kernel(invariant, "T_inv");
  if (init_dist.size() != m) throw ConfigError("init_dist: expected length " + std::to_string(m));
  check_simplex(init_dist.transpose(), "init_dist");
  if (schedule.empty()) throw ConfigError("schedule: at least one breakpoint required");
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const auto& b = schedule[i];
    if (b.probs.size() != num_contexts)
      throw ConfigError("schedule: breakpoint " + std::to_string(i) + " has wrong length");
    check_simplex(b.probs.transpose(), "schedule breakpoint " + std::to_string(i));
    if (i > 0 && b.position <= schedule[i - 1].position)
      throw ConfigError("schedule: positions must be strictly increasing");
  }
  if (!(lambda_inv >= 0.0 && lambda_inv <= 1.0)) throw ConfigError("lambda_inv: must lie in [0, 1]");
  if (!(stickiness >= 0.0 && stickiness < 1.0)) throw ConfigError("stickiness: must lie in [0, 1)");
  if (min_length < 2 || max_length < min_length)
    throw ConfigError("length: need 2 <= min <= max");
}

Vector ScmSpec::schedule_at(int t) const {
  if (t <= schedule.front().position) return schedule.front().probs;
  if (t >= schedule.back().position) return schedule.back().probs;
  auto next = std::upper_bound(schedule.begin(), schedule.end(), t,
                               [](int pos, const Breakpoint& b) { return pos < b.position; });
  const auto& hi = *next;
  const auto& lo = *(next - 1);
  if (!interpolate) return lo.probs;
  const double w = static_cast<double>(t - lo.position) / (hi.position - lo.position);
  Vector p = (1.0 - w) * lo.probs + w * hi.probs;
  return p / p.sum();
}

Vector ScmSpec::context_prior(int t) const {
  Vector m = schedule_at(2);
  for (int s = 3; s <= t; ++s) m = stickiness * m + (1.0 - stickiness) * schedule_at(s);
  return m;
}

RowVector ScmSpec::kernel_row(int context, int last) const {
  const Index a = last - 1;
  return (1.0 - lambda_inv) * transitions[static_cast<std::size_t>(context)].row(a) +
         lambda_inv * invariant.row(a);
}

ScmSpec parse_spec(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("spec is not valid JSON: ") + e.what());
  }
  ScmSpec s;
  s.num_contexts = required<int>(j, "C_true");
  s.num_event_types = required<int>(j, "M");
  if (!j.contains("transitions")) throw ConfigError("missing key 'transitions'");
  if (!j["transitions"].is_array()) throw ConfigError("transitions: expected an array of matrices");
  for (const auto& m : j["transitions"]) s.transitions.push_back(matrix_from_json(m, "transitions"));
  if (!j.contains("T_inv")) throw ConfigError("missing key 'T_inv'");
  s.invariant = matrix_from_json(j["T_inv"], "T_inv");
  if (!j.contains("init_dist")) throw ConfigError("missing key 'init_dist'");
  s.init_dist = vector_from_json(j["init_dist"], "init_dist");
  if (!j.contains("schedule") || !j["schedule"].is_array())
    throw ConfigError("missing key 'schedule'");
  for (const auto& b : j["schedule"]) {
    if (!b.is_object()) throw ConfigError("schedule: breakpoints must be objects");
    Breakpoint bp;
    bp.position = required<int>(b, "t");
    if (!b.contains("pi")) throw ConfigError("schedule: missing key 'pi'");
    bp.probs = vector_from_json(b["pi"], "schedule.pi");
    s.schedule.push_back(std::move(bp));
  }
  s.lambda_inv = required<double>(j, "lambda_inv");
  if (j.contains("interpolate")) s.interpolate = required<bool>(j, "interpolate");
  if (j.contains("stickiness")) s.stickiness = required<double>(j, "stickiness");
  if (j.contains("length")) {
    const auto& len = j["length"];
    s.min_length = required<int>(len, "min");
    s.max_length = required<int>(len, "max");
  }
  s.validate();
  return s;
}

ScmSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

std::string spec_to_json(const ScmSpec& s) {
  json j;
  j["C_true"] = s.num_contexts;
  j["M"] = s.num_event_types;
  j["transitions"] = json::array();
  for (const auto& t : s.transitions) j["transitions"].push_back(matrix_to_json(t));
  j["T_inv"] = matrix_to_json(s.invariant);
  j["init_dist"] = vector_to_json(s.init_dist);
  j["schedule"] = json::array();
  for (const auto& b : s.schedule)
    j["schedule"].push_back({{"t", b.position}, {"pi", vector_to_json(b.probs)}});
  j["interpolate"] = s.interpolate;
  j["lambda_inv"] = s.lambda_inv;
  j["stickiness"] = s.stickiness;
  j["length"] = {{"min", s.min_length}, {"max", s.max_length}};
  return j.dump(2);
}

Vector dirichlet(int n, double concentration, Rng& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  Vector v(n);
  for (;;) {
    for (int i = 0; i < n; ++i) v(i) = gamma(rng);
    const double total = v.sum();
    if (total > 0.0) {
      v /= total;
      return v;
    }
  }
}

namespace {

Matrix random_kernel(int m, double concentration, Rng& rng) {
  Matrix k(m, m);
  for (int r = 0; r < m; ++r) k.row(r) = dirichlet(m, concentration, rng).transpose();
  return k;
}

}  // namespace

ScmSpec random_spec(int num_contexts, int num_event_types, double lambda_inv,
                    double concentration, int horizon, Rng& rng) {
  ScmSpec s;
  s.num_contexts = num_contexts;
  s.num_event_types = num_event_types;
  for (int c = 0; c < num_contexts; ++c)
    s.transitions.push_back(random_kernel(num_event_types, concentration, rng));
  s.invariant = random_kernel(num_event_types, concentration, rng);
  s.init_dist = Vector::Constant(num_event_types, 1.0 / num_event_types);
  s.schedule = {{2, dirichlet(num_contexts, 1.0, rng)},
                {std::max(horizon, 3), dirichlet(num_contexts, 1.0, rng)}};
  s.interpolate = true;
  s.lambda_inv = lambda_inv;
  s.min_length = 2;
  s.max_length = std::max(horizon, 2);
  s.validate();
  return s;
}

ScmSpec drifting_spec(int num_contexts, int num_event_types, double lambda_inv,
                      double stickiness, double concentration, int horizon, std::uint64_t seed) {
  Rng rng(seed);
  ScmSpec s;
  s.num_contexts = num_contexts;
  s.num_event_types = num_event_types;
  for (int c = 0; c < num_contexts; ++c)
    s.transitions.push_back(random_kernel(num_event_types, concentration, rng));
  s.invariant = random_kernel(num_event_types, concentration, rng);
  s.init_dist = Vector::Constant(num_event_types, 1.0 / num_event_types);
  const int half = std::max(1, num_contexts / 2);
  const double minority = num_contexts > 1 ? 0.05 : 0.0;
  Vector early(num_contexts), late(num_contexts);
  for (int c = 0; c < num_contexts; ++c) {
    const bool first_half = c < half;
    early(c) = first_half ? 1.0 : minority;
    late(c) = first_half ? minority : 1.0;
  }
  if (num_contexts == 1) late = early;
  early /= early.sum();
  late /= late.sum();
  s.schedule = {{2, early}, {std::max(horizon, 3), late}};
  s.interpolate = true;
  s.lambda_inv = lambda_inv;
  s.stickiness = stickiness;
  s.min_length = std::max(2, horizon * 4 / 5);
  s.max_length = std::max(horizon, 2);
  s.validate();
  return s;
}

Dataset sample_dataset(const ScmSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw ParameterError("sample_dataset: N must be >= 1");
  Dataset data;
  data.num_event_types = spec.num_event_types;
  data.sequences.reserve(n);
  data.context_labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    std::uniform_int_distribution<int> length(spec.min_length, spec.max_length);
    const int len = length(rng);
    EventSequence seq;
    std::vector<int> labels;
    seq.push_back(draw_categorical(spec.init_dist.transpose(), rng) + 1);
    labels.push_back(0);
    int context = -1;
    for (int t = 2; t <= len; ++t) {
      const bool keep = context >= 0 && spec.stickiness > 0.0 && uniform_open(rng) < spec.stickiness;
      if (!keep) context = draw_categorical(spec.schedule_at(t).transpose(), rng);
      seq.push_back(draw_categorical(spec.kernel_row(context, seq.back()), rng) + 1);
      labels.push_back(context + 1);
    }
    data.sequences.push_back(std::move(seq));
    data.context_labels.push_back(std::move(labels));
  }
  return data;
}

void write_context_labels(std::ostream& out, const Dataset& data) {
  out << "sequence,position,context\n";
  for (std::size_t i = 0; i < data.context_labels.size(); ++i)
    for (std::size_t p = 0; p < data.context_labels[i].size(); ++p)
      if (data.context_labels[i][p] > 0)
        out << i << ',' << (p + 1) << ',' << data.context_labels[i][p] << '\n';
}

Vector interventional_dist_mutilated(const ScmSpec& spec, const EventSequence& prefix, int t,
                                     std::size_t samples, std::uint64_t seed) {
  check_prefix(spec, prefix, t);
  if (samples < 1) throw ParameterError("interventional_dist_mutilated: samples must be >= 1");
  Rng rng(seed);
  const Matrix rows = conditional_rows(spec, prefix.back());
  // Schedules are evaluated once; the chain is simulated without events.
  std::vector<RowVector> pis;
  for (int s = 2; s <= t; ++s) pis.push_back(spec.schedule_at(s).transpose());
  Vector counts = Vector::Zero(spec.num_event_types);
  for (std::size_t n = 0; n < samples; ++n) {
    int c = 0;
    if (spec.stickiness == 0.0) {
      c = draw_categorical(pis.back(), rng);
    } else {
      c = draw_categorical(pis[0], rng);
      for (int s = 3; s <= t; ++s)
        if (!(uniform_open(rng) < spec.stickiness))
          c = draw_categorical(pis[static_cast<std::size_t>(s - 2)], rng);
    }
    counts(draw_categorical(rows.row(c), rng)) += 1.0;
  }
  return counts / static_cast<double>(samples);
}

Vector backdoor_sum(const ScmSpec& spec, const EventSequence& prefix, int t) {
  check_prefix(spec, prefix, t);
  const Matrix rows = conditional_rows(spec, prefix.back());
  return rows.transpose() * spec.context_prior(t);
}

Vector context_filter(const ScmSpec& spec, const EventSequence& prefix, int t) {
  check_prefix(spec, prefix, t);
  // alpha over c_s after absorbing x_s, s = 2..t-1, then predict c_t.
  Vector belief;
  for (int s = 2; s <= t; ++s) {
    const Vector pi = spec.schedule_at(s);
    Vector predicted = (s == 2) ? pi : Vector(spec.stickiness * belief + (1.0 - spec.stickiness) * pi);
    if (s == t) return predicted;
    const int prev = prefix[static_cast<std::size_t>(s - 2)];
    const int cur = prefix[static_cast<std::size_t>(s - 1)];
    for (int c = 0; c < spec.num_contexts; ++c) predicted(c) *= spec.kernel_row(c, prev)(cur - 1);
    const double z = predicted.sum();
    if (!(z > 0.0)) throw DomainError("context_filter: prefix has zero probability");
    belief = predicted / z;
  }
  return belief;
}

Vector observational_conditional(const ScmSpec& spec, const EventSequence& prefix, int t) {
  const Vector post = context_filter(spec, prefix, t);
  const Matrix rows = conditional_rows(spec, prefix.back());
  return rows.transpose() * post;
}

Vector true_posterior(const ScmSpec& spec, const EventSequence& prefix, int t, int y) {
  check_prefix(spec, prefix, t);
  if (y < 1 || y > spec.num_event_types) throw RangeError("true_posterior: y out of range");
  const Vector prior = spec.context_prior(t);
  Vector post(spec.num_contexts);
  for (int c = 0; c < spec.num_contexts; ++c) post(c) = prior(c) * spec.kernel_row(c, prefix.back())(y - 1);
  const double z = post.sum();
  if (!(z > 0.0)) throw DomainError("true_posterior: y is impossible under every context");
  return post / z;
}

double log_marginal(const ScmSpec& spec, const EventSequence& prefix, int t, int y) {
  check_prefix(spec, prefix, t);
  if (y < 1 || y > spec.num_event_types) throw RangeError("log_marginal: y out of range");
  const Vector prior = spec.context_prior(t);
  double total = 0.0;
  for (int c = 0; c < spec.num_contexts; ++c) total += prior(c) * spec.kernel_row(c, prefix.back())(y - 1);
  return std::log(total);
}

double elbo_enumerate(const ScmSpec& spec, const EventSequence& prefix, int t, int y,
                      const Vector& q) {
  check_prefix(spec, prefix, t);
  if (y < 1 || y > spec.num_event_types) throw RangeError("elbo_enumerate: y out of range");
  if (q.size() != spec.num_contexts) throw DimensionError("elbo_enumerate: Q has wrong length");
  const Vector prior = spec.context_prior(t);
  double elbo = 0.0;
  for (int c = 0; c < spec.num_contexts; ++c) {
    if (q(c) <= 0.0) continue;
    const double lik = spec.kernel_row(c, prefix.back())(y - 1);
    if (lik <= 0.0 || prior(c) <= 0.0) return kNegInf;
    // Single log of the ratio keeps the tight case exact to rounding.
    elbo += q(c) * std::log(lik * prior(c) / q(c));
  }
  return elbo;
}

}  // namespace caseq::scm
