#include "cascade/synthetic.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_set>

#include "cascade/error.hpp"
#include "cascade/evaluation.hpp"

namespace cascade {

using nlohmann::json;

double ErrorCurve::operator()(double u) const noexcept {
  if (kind == Kind::Constant) return level;
  return 1.0 / (1.0 + std::exp(-(slope * u + intercept)));
}

std::vector<EntityProfile> photo_entity_profile() {
  // camera/lens weight a, the other four b: 2a + 4b = 1 and the weighted small
  // F1 equals 0.847.
  constexpr double a = 0.083 / 0.47;
  constexpr double b = (1.0 - 2.0 * a) / 4.0;
  return {
      {"camera", a, 0.71, 0.89},        {"lens", a, 0.68, 0.86}, {"aperture", b, 0.93, 0.96},
      {"shutter_speed", b, 0.91, 0.95}, {"iso", b, 0.92, 0.95},  {"focal_length", b, 0.96, 0.98},
  };
}

namespace {

[[noreturn]] void bad_spec(const std::string& what) { throw Error(ErrorKind::InvalidSpec, "synthetic spec: " + what); }

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

// E[f(u)] for u ~ Beta(a, b) by the midpoint rule.
template <typename F>
double beta_expectation(double a, double b, F&& f) {
  constexpr int kPoints = 20000;
  const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  double total = 0.0;
  double mass = 0.0;
  for (int i = 0; i < kPoints; ++i) {
    const double u = (i + 0.5) / kPoints;
    const double w = std::exp((a - 1.0) * std::log(u) + (b - 1.0) * std::log1p(-u) - log_beta);
    total += w * f(u);
    mass += w;
  }
  return total / mass;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 record_stream(std::uint64_t seed, std::size_t index) {
  return std::mt19937_64(mix(mix(seed) + static_cast<std::uint64_t>(index)));
}

// Ground-truth draws for one record. The order of draws from the stream is fixed.
struct Draw {
  double u = 0.0;
  double small_rate = 0.0;
  int small_error = 0;
  double large_rate = 0.0;
  int large_error = 0;
};

struct DrawContext {
  const SyntheticSpec& spec;
  double mean_error;  // only needed in difficulty-correlated mode
};

Draw draw_truth(const DrawContext& ctx, std::mt19937_64& rng) {
  const SyntheticSpec& spec = ctx.spec;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::gamma_distribution<double> ga(spec.beta_a, 1.0);
  std::gamma_distribution<double> gb(spec.beta_b, 1.0);

  Draw d;
  const double x = ga(rng);
  const double y = gb(rng);
  d.u = std::clamp(x / (x + y), 0.0, 1.0);
  const bool contaminated = spec.tail_mode == TailMode::Heavy && unit(rng) < spec.contamination;
  d.small_rate = contaminated ? spec.contaminant_error : spec.curve(d.u);
  d.small_error = unit(rng) < d.small_rate ? 1 : 0;

  const double base = 1.0 - spec.large_accuracy;
  if (spec.large_mode == LargeMode::DifficultyCorrelated) {
    const double linked = ctx.mean_error > 0.0 ? std::min(1.0, base * d.small_rate / ctx.mean_error) : base;
    d.large_rate = std::clamp(base * (1.0 - spec.correlation) + spec.correlation * linked, 0.0, 1.0);
  } else {
    d.large_rate = base;
  }
  d.large_error = unit(rng) < d.large_rate ? 1 : 0;
  return d;
}

DrawContext context_for(const SyntheticSpec& spec) {
  return {spec, spec.large_mode == LargeMode::DifficultyCorrelated ? spec.mean_small_error() : 0.0};
}

constexpr int kEntityVocabulary = 50;
constexpr int kTailTokens = 8;  // residual mass beyond the top two is spread evenly over these

double token_entropy(double p1, double p2, double rest) {
  auto term = [](double p) { return p > 0.0 ? -p * std::log(p) : 0.0; };
  double h = term(p1) + term(p2);
  if (rest > 0.0) h += -rest * std::log(rest / kTailTokens);
  return std::max(h, 0.0);
}

std::string entity_value(const std::string& type, int index) { return type + "_" + std::to_string(index); }

}  // namespace

void SyntheticSpec::validate() const {
  if (n == 0) bad_spec("n must be positive");
  if (!(beta_a > 0.0) || !(beta_b > 0.0)) bad_spec("beta parameters must be positive");
  if (curve.kind == ErrorCurve::Kind::Logistic) {
    if (!(curve.slope > 0.0) || !std::isfinite(curve.slope) || !std::isfinite(curve.intercept)) {
      bad_spec("logistic error curve needs slope > 0 and a finite intercept");
    }
  } else if (!is_probability(curve.level)) {
    bad_spec("constant error curve level must lie in [0, 1]");
  }
  if (!is_probability(large_accuracy)) bad_spec("large_accuracy must lie in [0, 1]");
  if (!is_probability(correlation)) bad_spec("correlation must lie in [0, 1]");
  if (large_mode == LargeMode::DifficultyCorrelated && (large_accuracy <= 0.0 || large_accuracy >= 1.0)) {
    bad_spec("difficulty correlation needs 0 < large_accuracy < 1");
  }
  if (large_mode == LargeMode::DifficultyCorrelated && mean_small_error() <= 0.0) {
    bad_spec("difficulty correlation needs a non-zero small error rate");
  }
  if (!is_probability(contamination) || !is_probability(contaminant_error)) {
    bad_spec("contamination and contaminant_error must lie in [0, 1]");
  }
  if (tokens_per_record < 1 || static_cast<std::size_t>(tokens_per_record) > kMaxTokens) {
    bad_spec("tokens_per_record must lie in [1, 256]");
  }
  if (entities.empty()) bad_spec("at least one entity type is required");
  for (const auto& e : entities) {
    if (e.name.empty() || !(e.weight > 0.0) || !is_probability(e.small_f1) || !is_probability(e.large_f1)) {
      bad_spec("entity profiles need a name, positive weight and F1 targets in [0, 1]");
    }
  }
  if (id_prefix.empty()) bad_spec("id_prefix must not be empty");
}

double SyntheticSpec::mean_small_error() const {
  const double body = curve.kind == ErrorCurve::Kind::Constant
                          ? curve.level
                          : beta_expectation(beta_a, beta_b, [this](double u) { return curve(u); });
  const double eps = tail_mode == TailMode::Heavy ? contamination : 0.0;
  return (1.0 - eps) * body + eps * contaminant_error;
}

double intercept_for_mean_error(double slope, double beta_a, double beta_b, double target) {
  if (!(target > 0.0 && target < 1.0)) throw Error(ErrorKind::InvalidSpec, "target mean error must lie in (0, 1)");
  auto mean_at = [&](double b) {
    return beta_expectation(beta_a, beta_b, [&](double u) { return 1.0 / (1.0 + std::exp(-(slope * u + b))); });
  };
  double lo = -60.0;
  double hi = 60.0;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mean_at(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

SyntheticSpec matched_workload_spec(std::size_t n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n = n;
  spec.seed = seed;
  spec.beta_a = 2.0;
  spec.beta_b = 5.0;
  spec.curve.kind = ErrorCurve::Kind::Logistic;
  spec.curve.slope = 2.15;
  spec.curve.intercept = intercept_for_mean_error(spec.curve.slope, spec.beta_a, spec.beta_b, 1.0 - 0.847);
  spec.large_accuracy = 0.932;
  return spec;
}

SyntheticDataset generate(const SyntheticSpec& spec) {
  spec.validate();
  const DrawContext ctx = context_for(spec);

  // Entity type given the small-model outcome, so each type's small error rate
  // hits 1 - small_f1 while the overall rate follows the error curve.
  std::vector<double> weight_if_error;
  std::vector<double> weight_if_correct;
  for (const auto& e : spec.entities) {
    weight_if_error.push_back(e.weight * (1.0 - e.small_f1));
    weight_if_correct.push_back(e.weight * e.small_f1);
  }
  auto usable = [](const std::vector<double>& w) { return std::accumulate(w.begin(), w.end(), 0.0) > 0.0; };
  std::vector<double> plain_weights;
  for (const auto& e : spec.entities) plain_weights.push_back(e.weight);
  if (!usable(weight_if_error)) weight_if_error = plain_weights;
  if (!usable(weight_if_correct)) weight_if_correct = plain_weights;

  SyntheticDataset out;
  out.records.reserve(spec.n);
  out.uncertainty.reserve(spec.n);
  out.small_error_rate.reserve(spec.n);
  out.large_error_rate.reserve(spec.n);

  for (std::size_t i = 0; i < spec.n; ++i) {
    auto rng = record_stream(spec.seed, i);
    const Draw d = draw_truth(ctx, rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> value_index(0, kEntityVocabulary - 1);
    std::uniform_int_distribution<int> wrong_offset(1, kEntityVocabulary - 1);

    // Every token carries margin 1 - u; the top-2 mass s in [m, 1] is random.
    const double margin = 1.0 - d.u;
    const double mass = margin + (1.0 - margin) * unit(rng);
    const double p1 = (mass + margin) / 2.0;
    const double p2 = (mass - margin) / 2.0;
    const double entropy = token_entropy(p1, p2, std::max(0.0, 1.0 - p1 - p2));

    const auto& weights = d.small_error != 0 ? weight_if_error : weight_if_correct;
    std::discrete_distribution<std::size_t> pick_type(weights.begin(), weights.end());
    const std::string& type = spec.entities[pick_type(rng)].name;
    const int gold_index = value_index(rng);
    const int small_index = (gold_index + wrong_offset(rng)) % kEntityVocabulary;
    const int large_index = (gold_index + wrong_offset(rng)) % kEntityVocabulary;

    InferenceRecord record;
    record.id = spec.id_prefix + std::to_string(i);
    record.small_tokens.assign(static_cast<std::size_t>(spec.tokens_per_record), TokenStats{p1, p2, entropy});
    record.gold = {{type, entity_value(type, gold_index)}};
    record.small_output = {{type, entity_value(type, d.small_error != 0 ? small_index : gold_index)}};
    record.large_output = {{type, entity_value(type, d.large_error != 0 ? large_index : gold_index)}};

    out.records.push_back(std::move(record));
    out.uncertainty.push_back(d.u);
    out.small_error_rate.push_back(d.small_rate);
    out.large_error_rate.push_back(d.large_rate);
  }
  return out;
}

std::vector<LabeledScore> draw_labeled_uncertainty(const SyntheticSpec& spec) {
  spec.validate();
  const DrawContext ctx = context_for(spec);
  std::vector<LabeledScore> out;
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    auto rng = record_stream(spec.seed, i);
    const Draw d = draw_truth(ctx, rng);
    out.push_back({d.u, d.small_error});
  }
  return out;
}

json spec_to_json(const SyntheticSpec& spec) {
  json curve = spec.curve.kind == ErrorCurve::Kind::Logistic
                   ? json{{"kind", "logistic"}, {"slope", spec.curve.slope}, {"intercept", spec.curve.intercept}}
                   : json{{"kind", "constant"}, {"level", spec.curve.level}};
  json entities = json::array();
  for (const auto& e : spec.entities) {
    entities.push_back({{"name", e.name}, {"weight", e.weight}, {"small_f1", e.small_f1}, {"large_f1", e.large_f1}});
  }
  return {{"n", spec.n},
          {"u_distribution", {{"beta_a", spec.beta_a}, {"beta_b", spec.beta_b}}},
          {"error_curve", curve},
          {"large_accuracy", spec.large_accuracy},
          {"large_mode", spec.large_mode == LargeMode::Independent ? "independent" : "difficulty_correlated"},
          {"correlation", spec.correlation},
          {"tail_mode", spec.tail_mode == TailMode::None ? "none" : "heavy"},
          {"contamination", spec.contamination},
          {"contaminant_error", spec.contaminant_error},
          {"tokens_per_record", spec.tokens_per_record},
          {"seed", spec.seed},
          {"entities", entities},
          {"id_prefix", spec.id_prefix}};
}

SyntheticSpec spec_from_json(const json& doc) {
  if (!doc.is_object()) bad_spec("expected a JSON object");
  static const std::unordered_set<std::string> known = {
      "n",           "u_distribution", "error_curve",       "large_accuracy",    "large_mode", "correlation",
      "tail_mode",   "contamination",  "contaminant_error", "tokens_per_record", "seed",       "entities",
      "id_prefix"};
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) bad_spec("unknown key '" + key + "'");
  }
  SyntheticSpec spec;
  try {
    if (doc.contains("n")) spec.n = doc.at("n").get<std::size_t>();
    if (doc.contains("u_distribution")) {
      const json& u = doc.at("u_distribution");
      spec.beta_a = u.value("beta_a", spec.beta_a);
      spec.beta_b = u.value("beta_b", spec.beta_b);
    }
    if (doc.contains("error_curve")) {
      const json& c = doc.at("error_curve");
      const std::string kind = c.value("kind", std::string("logistic"));
      if (kind == "logistic") {
        spec.curve.kind = ErrorCurve::Kind::Logistic;
        spec.curve.slope = c.value("slope", spec.curve.slope);
        if (c.contains("mean_error")) {
          spec.curve.intercept =
              intercept_for_mean_error(spec.curve.slope, spec.beta_a, spec.beta_b, c.at("mean_error").get<double>());
        } else {
          spec.curve.intercept = c.value("intercept", spec.curve.intercept);
        }
      } else if (kind == "constant") {
        spec.curve.kind = ErrorCurve::Kind::Constant;
        spec.curve.level = c.value("level", 0.0);
      } else {
        bad_spec("unknown error curve kind '" + kind + "'");
      }
    }
    if (doc.contains("large_accuracy")) spec.large_accuracy = doc.at("large_accuracy").get<double>();
    if (doc.contains("large_mode")) {
      const std::string mode = doc.at("large_mode").get<std::string>();
      if (mode == "independent") {
        spec.large_mode = LargeMode::Independent;
      } else if (mode == "difficulty_correlated") {
        spec.large_mode = LargeMode::DifficultyCorrelated;
      } else {
        bad_spec("unknown large_mode '" + mode + "'");
      }
    }
    if (doc.contains("correlation")) spec.correlation = doc.at("correlation").get<double>();
    if (doc.contains("tail_mode")) {
      const std::string mode = doc.at("tail_mode").get<std::string>();
      if (mode == "none") {
        spec.tail_mode = TailMode::None;
      } else if (mode == "heavy") {
        spec.tail_mode = TailMode::Heavy;
      } else {
        bad_spec("unknown tail_mode '" + mode + "'");
      }
    }
    if (doc.contains("contamination")) spec.contamination = doc.at("contamination").get<double>();
    if (doc.contains("contaminant_error")) spec.contaminant_error = doc.at("contaminant_error").get<double>();
    if (doc.contains("tokens_per_record")) spec.tokens_per_record = doc.at("tokens_per_record").get<int>();
    if (doc.contains("seed")) spec.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("entities")) {
      spec.entities.clear();
      for (const json& e : doc.at("entities")) {
        spec.entities.push_back({e.at("name").get<std::string>(), e.value("weight", 1.0), e.value("small_f1", 1.0),
                                 e.value("large_f1", 1.0)});
      }
    }
    if (doc.contains("id_prefix")) spec.id_prefix = doc.at("id_prefix").get<std::string>();
  } catch (const json::exception& e) {
    bad_spec(e.what());
  }
  spec.validate();
  return spec;
}

SyntheticSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open spec file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, "spec file '" + path + "': " + e.what());
  }
  return spec_from_json(doc);
}

namespace {

struct SubsetSearch {
  bool found_feasible = false;
  std::uint32_t best_mask = 0;
  int best_size = 0;
  double best_f1 = -1.0;
  std::uint32_t best_any_mask = 0;
  double best_any_f1 = -1.0;
  int best_any_size = 0;

  void offer(std::uint32_t mask, const MatchCounts& counts, double tau) {
    const double f1 = micro_f1(counts);
    const int size = std::popcount(mask);
    if (f1 > best_any_f1 || (f1 == best_any_f1 && size < best_any_size)) {
      best_any_f1 = f1;
      best_any_mask = mask;
      best_any_size = size;
    }
    if (f1 >= tau && (!found_feasible || size < best_size || (size == best_size && f1 > best_f1))) {
      found_feasible = true;
      best_mask = mask;
      best_size = size;
      best_f1 = f1;
    }
  }

  OracleResult result(std::size_t n, const CostModel& cost) const {
    OracleResult out;
    out.feasible = found_feasible;
    const std::uint32_t mask = found_feasible ? best_mask : best_any_mask;
    out.micro_f1 = found_feasible ? best_f1 : best_any_f1;
    out.escalate.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.escalate[i] = ((mask >> i) & 1U) != 0;
    out.min_cost = cost.mean_cost(static_cast<std::size_t>(std::popcount(mask)), n);
    return out;
  }
};

void check_oracle_size(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::Validation, "subset oracle: empty instance");
  if (n > kMaxOracleRecords) throw Error(ErrorKind::Validation, "subset oracle: at most 20 records");
}

MatchCounts counts_for_mask(std::span<const RecordOutcome> outcomes, std::uint32_t mask) {
  MatchCounts counts;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    counts += ((mask >> i) & 1U) != 0 ? outcomes[i].large : outcomes[i].small;
  }
  return counts;
}

}  // namespace

OracleResult brute_force_optimal_policy(std::span<const RecordOutcome> outcomes, const CostModel& cost, double tau) {
  check_oracle_size(outcomes.size());
  SubsetSearch search;
  const std::uint32_t total = 1U << outcomes.size();
  for (std::uint32_t mask = 0; mask < total; ++mask) search.offer(mask, counts_for_mask(outcomes, mask), tau);
  return search.result(outcomes.size(), cost);
}

OracleResult brute_force_upper_set_policy(std::span<const RecordOutcome> outcomes, std::span<const double> scores,
                                          const CostModel& cost, double tau) {
  check_oracle_size(outcomes.size());
  if (scores.size() != outcomes.size()) throw Error(ErrorKind::Validation, "subset oracle: size mismatch");
  const std::size_t n = outcomes.size();
  // required[i]: records that must be escalated whenever i is.
  std::vector<std::uint32_t> required(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i && scores[j] >= scores[i]) required[i] |= 1U << j;
    }
  }
  SubsetSearch search;
  const std::uint32_t total = 1U << n;
  for (std::uint32_t mask = 0; mask < total; ++mask) {
    bool closed = true;
    for (std::size_t i = 0; i < n && closed; ++i) {
      if (((mask >> i) & 1U) != 0 && (required[i] & ~mask) != 0) closed = false;
    }
    if (closed) search.offer(mask, counts_for_mask(outcomes, mask), tau);
  }
  return search.result(n, cost);
}

std::vector<double> brute_force_isotonic(std::span<const LabeledScore> pairs) {
  if (pairs.empty() || pairs.size() > kMaxOracleRecords) {
    throw Error(ErrorKind::Validation, "isotonic oracle: need 1..20 pairs");
  }
  // Distinct scores ascending, with per-score sums and counts.
  std::vector<double> levels;
  for (const auto& p : pairs) levels.push_back(p.score);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  const std::size_t m = levels.size();
  std::vector<double> sum(m, 0.0);
  std::vector<double> count(m, 0.0);
  for (const auto& p : pairs) {
    const auto k = static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), p.score) - levels.begin());
    sum[k] += p.error;
    count[k] += 1.0;
  }

  // Bit j of `cuts` set means a block boundary after level j.
  double best_sse = std::numeric_limits<double>::infinity();
  std::vector<double> best_values;
  const std::uint32_t partitions = m == 1 ? 1U : 1U << (m - 1);
  std::vector<double> values(m);
  for (std::uint32_t cuts = 0; cuts < partitions; ++cuts) {
    double previous = -1.0;
    bool monotone = true;
    std::size_t start = 0;
    for (std::size_t j = 0; j < m && monotone; ++j) {
      if (j + 1 == m || ((cuts >> j) & 1U) != 0) {
        double s = 0.0;
        double c = 0.0;
        for (std::size_t k = start; k <= j; ++k) {
          s += sum[k];
          c += count[k];
        }
        const double mean = s / c;
        if (mean < previous) monotone = false;
        previous = mean;
        for (std::size_t k = start; k <= j; ++k) values[k] = mean;
        start = j + 1;
      }
    }
    if (!monotone) continue;
    double sse = 0.0;
    for (const auto& p : pairs) {
      const auto k = static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), p.score) - levels.begin());
      sse += (p.error - values[k]) * (p.error - values[k]);
    }
    if (sse < best_sse) {
      best_sse = sse;
      best_values = values;
    }
  }

  std::vector<double> fitted;
  fitted.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto k = static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), p.score) - levels.begin());
    fitted.push_back(best_values[k]);
  }
  return fitted;
}

namespace {

double mean_of(const std::vector<double>& xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size(); }

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

RateResult rate_experiment(const RateExperimentConfig& config) {
  if (config.trials < 1) throw Error(ErrorKind::Validation, "rate_experiment: trials must be positive");
  if (config.n_grid.size() < 2) throw Error(ErrorKind::Validation, "rate_experiment: need at least two sizes");
  RateResult result;
  for (std::size_t g = 0; g < config.n_grid.size(); ++g) {
    const std::size_t n = config.n_grid[g];
    std::vector<double> eces;
    for (int t = 0; t < config.trials; ++t) {
      SyntheticSpec fit_spec = config.spec;
      fit_spec.n = n;
      fit_spec.seed = mix(config.spec.seed ^ mix(static_cast<std::uint64_t>(g) * 7919 + static_cast<std::uint64_t>(t)));
      const auto model = fit_isotonic(draw_labeled_uncertainty(fit_spec));

      SyntheticSpec eval_spec = fit_spec;
      eval_spec.n = config.eval_n;
      eval_spec.seed = mix(fit_spec.seed + 1);
      auto fresh = draw_labeled_uncertainty(eval_spec);
      for (auto& p : fresh) p.score = model.predict(p.score);
      eces.push_back(expected_calibration_error(fresh, config.bins).ece);
    }
    result.rows.push_back({n, mean_of(eces), std_of(eces)});
  }

  // Least-squares slope of log(mean ECE) against log(n).
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& row : result.rows) {
    xs.push_back(std::log(static_cast<double>(row.n)));
    ys.push_back(std::log(std::max(row.mean_ece, 1e-300)));
  }
  const double mx = mean_of(xs);
  const double my = mean_of(ys);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  result.slope = sxy / sxx;
  return result;
}

std::vector<CoverageRow> conformal_coverage_experiment(const SyntheticSpec& spec, std::size_t n_cal,
                                                       std::size_t n_test, std::span<const double> deltas,
                                                       int trials) {
  if (trials < 1) throw Error(ErrorKind::Validation, "conformal_coverage_experiment: trials must be positive");
  std::vector<double> totals(deltas.size(), 0.0);
  for (int t = 0; t < trials; ++t) {
    SyntheticSpec cal_spec = spec;
    cal_spec.n = n_cal;
    cal_spec.seed = mix(spec.seed ^ mix(static_cast<std::uint64_t>(t) * 2 + 1));
    SyntheticSpec test_spec = spec;
    test_spec.n = n_test;
    test_spec.seed = mix(spec.seed ^ mix(static_cast<std::uint64_t>(t) * 2 + 2));

    std::vector<double> correct;
    for (const auto& p : draw_labeled_uncertainty(cal_spec)) {
      if (p.error == 0) correct.push_back(p.score);
    }
    if (correct.empty()) throw Error(ErrorKind::Validation, "conformal_coverage_experiment: no correct records");
    std::sort(correct.begin(), correct.end());
    const auto fresh = draw_labeled_uncertainty(test_spec);

    for (std::size_t k = 0; k < deltas.size(); ++k) {
      const double alpha = conformal_quantile(correct, deltas[k]);
      std::size_t covered = 0;
      std::size_t total = 0;
      for (const auto& p : fresh) {
        if (p.error != 0) continue;
        ++total;
        covered += p.score <= alpha ? 1 : 0;
      }
      totals[k] += total == 0 ? 1.0 : static_cast<double>(covered) / static_cast<double>(total);
    }
  }
  std::vector<CoverageRow> rows;
  for (std::size_t k = 0; k < deltas.size(); ++k) rows.push_back({deltas[k], totals[k] / trials});
  return rows;
}

namespace {

struct Truth {
  double u;
  double keep_accuracy;
  double escalate_accuracy;
};

std::vector<Truth> draw_truths(const SyntheticSpec& spec) {
  spec.validate();
  const DrawContext ctx = context_for(spec);
  std::vector<Truth> out;
  out.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    auto rng = record_stream(spec.seed, i);
    const Draw d = draw_truth(ctx, rng);
    out.push_back({d.u, 1.0 - d.small_rate, 1.0 - d.large_rate});
  }
  return out;
}

// Fewest escalations along `order` (only cut at group boundaries) whose
// expected accuracy reaches tau; all records when none does.
std::size_t fewest_escalations(const std::vector<Truth>& truths, const std::vector<std::size_t>& order,
                               const std::vector<std::size_t>& group_end, double tau) {
  const auto n = static_cast<double>(truths.size());
  double total = 0.0;
  for (const auto& t : truths) total += t.keep_accuracy;
  const double target = tau * n - 1e-9;
  if (total >= target) return 0;
  std::size_t i = 0;
  for (std::size_t end : group_end) {
    for (; i < end; ++i) total += truths[order[i]].escalate_accuracy - truths[order[i]].keep_accuracy;
    if (total >= target) return end;
  }
  return truths.size();
}

}  // namespace

std::vector<FalsificationRow> falsification_experiment(const FalsificationConfig& config, const CostModel& cost) {
  if (config.trials < 1) throw Error(ErrorKind::Validation, "falsification_experiment: trials must be positive");
  cost.validate();
  std::vector<FalsificationRow> rows;
  for (double eps : config.contaminations) {
    std::vector<double> gaps;
    for (int t = 0; t < config.trials; ++t) {
      SyntheticSpec spec = config.spec;
      spec.tail_mode = eps > 0.0 ? TailMode::Heavy : TailMode::None;
      spec.contamination = eps;
      // Seeds depend only on the trial, so rows share their draws.
      SyntheticSpec cal_spec = spec;
      cal_spec.n = config.n_cal;
      cal_spec.seed = mix(config.spec.seed ^ mix(static_cast<std::uint64_t>(t) * 2 + 1));
      SyntheticSpec eval_spec = spec;
      eval_spec.n = config.n_eval;
      eval_spec.seed = mix(config.spec.seed ^ mix(static_cast<std::uint64_t>(t) * 2 + 2));

      const auto model = fit_isotonic(draw_labeled_uncertainty(cal_spec));
      const auto truths = draw_truths(eval_spec);
      const std::size_t n = truths.size();

      // Router: descending p-hat, level sets kept whole.
      std::vector<double> p_hat(n);
      for (std::size_t i = 0; i < n; ++i) p_hat[i] = model.predict(truths[i].u);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p_hat[a] > p_hat[b]; });
      std::vector<std::size_t> group_end;
      for (std::size_t i = 1; i <= n; ++i) {
        if (i == n || p_hat[order[i]] != p_hat[order[i - 1]]) group_end.push_back(i);
      }
      const std::size_t router_k = fewest_escalations(truths, order, group_end, config.tau);

      // Oracle: descending true accuracy gain, any prefix.
      std::vector<std::size_t> oracle_order(n);
      std::iota(oracle_order.begin(), oracle_order.end(), std::size_t{0});
      std::stable_sort(oracle_order.begin(), oracle_order.end(), [&](std::size_t a, std::size_t b) {
        return truths[a].escalate_accuracy - truths[a].keep_accuracy >
               truths[b].escalate_accuracy - truths[b].keep_accuracy;
      });
      std::vector<std::size_t> every(n);
      std::iota(every.begin(), every.end(), std::size_t{1});
      const std::size_t oracle_k = fewest_escalations(truths, oracle_order, every, config.tau);

      gaps.push_back(cost.mean_cost(router_k, n) - cost.mean_cost(oracle_k, n));
    }
    FalsificationRow row;
    row.contamination = eps;
    row.mean_gap = mean_of(gaps);
    row.std_gap = std_of(gaps);
    row.min_gap = *std::min_element(gaps.begin(), gaps.end());
    row.trials = config.trials;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cascade
