#include "cascade/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cascade/error.hpp"

namespace cascade {

using nlohmann::json;

IsotonicModel::IsotonicModel(std::vector<double> breakpoints, std::vector<double> values, std::size_t training_size)
    : breakpoints_(std::move(breakpoints)), values_(std::move(values)), training_size_(training_size) {
  if (breakpoints_.empty() || breakpoints_.size() != values_.size()) {
    throw Error(ErrorKind::Validation, "isotonic model: breakpoints and values must be non-empty and equal length");
  }
  if (training_size_ == 0) throw Error(ErrorKind::Validation, "isotonic model: n must be positive");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(breakpoints_[i])) throw Error(ErrorKind::Validation, "isotonic model: non-finite breakpoint");
    if (!(values_[i] >= 0.0 && values_[i] <= 1.0)) {
      throw Error(ErrorKind::Validation, "isotonic model: values must lie in [0, 1]");
    }
    if (i > 0 && !(breakpoints_[i] > breakpoints_[i - 1])) {
      throw Error(ErrorKind::Validation, "isotonic model: breakpoints must be strictly increasing");
    }
    if (i > 0 && values_[i] < values_[i - 1]) {
      throw Error(ErrorKind::Validation, "isotonic model: values must be non-decreasing");
    }
  }
}

std::size_t IsotonicModel::block_index(double u) const {
  if (!std::isfinite(u)) throw Error(ErrorKind::Validation, "isotonic predict: non-finite input");
  const auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), u);
  if (it == breakpoints_.begin()) return 0;
  return static_cast<std::size_t>(std::distance(breakpoints_.begin(), it)) - 1;
}

double IsotonicModel::predict(double u) const { return values_[block_index(u)]; }

IsotonicModel fit_isotonic(std::span<const LabeledScore> pairs) {
  if (pairs.size() < 2) throw Error(ErrorKind::Validation, "fit_isotonic: need at least 2 pairs");
  for (const auto& p : pairs) {
    if (!std::isfinite(p.score)) throw Error(ErrorKind::Validation, "fit_isotonic: non-finite score");
  }

  std::vector<LabeledScore> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const LabeledScore& a, const LabeledScore& b) { return a.score < b.score; });

  struct Block {
    double start;
    double sum;
    double weight;
    [[nodiscard]] double mean() const { return sum / weight; }
  };
  std::vector<Block> blocks;
  blocks.reserve(sorted.size());

  std::size_t i = 0;
  while (i < sorted.size()) {
    // Pre-pool a run of equal scores.
    Block block{sorted[i].score, 0.0, 0.0};
    while (i < sorted.size() && sorted[i].score == block.start) {
      block.sum += sorted[i].error;
      block.weight += 1.0;
      ++i;
    }
    blocks.push_back(block);
    // Merge backwards while the new block violates monotonicity.
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean() >= blocks.back().mean()) {
      const Block last = blocks.back();
      blocks.pop_back();
      blocks.back().sum += last.sum;
      blocks.back().weight += last.weight;
    }
  }

  std::vector<double> breakpoints;
  std::vector<double> values;
  breakpoints.reserve(blocks.size());
  values.reserve(blocks.size());
  for (const Block& b : blocks) {
    breakpoints.push_back(b.start);
    values.push_back(std::clamp(b.mean(), 0.0, 1.0));
  }
  return IsotonicModel(std::move(breakpoints), std::move(values), pairs.size());
}

namespace {

double logit_clamped(double u) {
  const double p = std::clamp(u, TemperatureModel::kClamp, 1.0 - TemperatureModel::kClamp);
  return std::log(p) - std::log1p(-p);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double TemperatureModel::predict(double u) const {
  if (!std::isfinite(u)) throw Error(ErrorKind::Validation, "temperature predict: non-finite input");
  return 1.0 / (1.0 + std::exp(-logit_clamped(u) / temperature));
}

double temperature_nll(std::span<const LabeledScore> pairs, double temperature) {
  double nll = 0.0;
  for (const auto& p : pairs) {
    const double z = logit_clamped(p.score) / temperature;
    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    nll += p.error != 0 ? softplus(-z) : softplus(z);
  }
  return nll;
}

TemperatureModel fit_temperature(std::span<const LabeledScore> pairs) {
  if (pairs.size() < 2) throw Error(ErrorKind::FitDegenerate, "fit_temperature: need at least 2 pairs");
  const bool has_error = std::any_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.error != 0; });
  const bool has_correct = std::any_of(pairs.begin(), pairs.end(), [](const auto& p) { return p.error == 0; });
  if (!has_error || !has_correct) {
    throw Error(ErrorKind::FitDegenerate, "fit_temperature: both outcome classes are required");
  }

  constexpr double kLogMin = -3.0;
  constexpr double kLogMax = 3.0;
  constexpr int kGrid = 121;
  const double step = (kLogMax - kLogMin) / (kGrid - 1);
  auto nll_at = [&](double log10_t) { return temperature_nll(pairs, std::pow(10.0, log10_t)); };

  int best = 0;
  double best_nll = nll_at(kLogMin);
  for (int k = 1; k < kGrid; ++k) {
    const double value = nll_at(kLogMin + step * k);
    if (value < best_nll) {
      best_nll = value;
      best = k;
    }
  }

  double lo = kLogMin + step * std::max(best - 1, 0);
  double hi = kLogMin + step * std::min(best + 1, kGrid - 1);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - phi * (hi - lo);
  double b = lo + phi * (hi - lo);
  double fa = nll_at(a);
  double fb = nll_at(b);
  for (int iter = 0; iter < 80; ++iter) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - phi * (hi - lo);
      fa = nll_at(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + phi * (hi - lo);
      fb = nll_at(b);
    }
  }
  double log_t = 0.5 * (lo + hi);
  if (nll_at(log_t) > best_nll) log_t = kLogMin + step * best;
  return TemperatureModel{std::pow(10.0, log_t)};
}

double calibrate(const Calibrator& model, double u) {
  return std::visit([u](const auto& m) { return m.predict(u); }, model);
}

json calibrator_to_json(const Calibrator& model) {
  if (const auto* iso = std::get_if<IsotonicModel>(&model)) {
    return {{"kind", "isotonic"},
            {"breakpoints", iso->breakpoints()},
            {"values", iso->values()},
            {"n", iso->training_size()}};
  }
  return {{"kind", "temperature"}, {"temperature", std::get<TemperatureModel>(model).temperature}};
}

Calibrator calibrator_from_json(const json& doc) {
  try {
    const std::string kind = doc.at("kind").get<std::string>();
    if (kind == "isotonic") {
      return IsotonicModel(doc.at("breakpoints").get<std::vector<double>>(), doc.at("values").get<std::vector<double>>(),
                           doc.at("n").get<std::size_t>());
    }
    if (kind == "temperature") {
      const double t = doc.at("temperature").get<double>();
      if (!(t > 0.0) || !std::isfinite(t)) throw Error(ErrorKind::Validation, "temperature must be positive");
      return TemperatureModel{t};
    }
    throw Error(ErrorKind::Validation, "unknown calibration model kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("calibration model: ") + e.what());
  }
}

Calibrator load_calibrator(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open model file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, "model file '" + path + "': " + e.what());
  }
  return calibrator_from_json(doc);
}

void save_calibrator(const std::string& path, const Calibrator& model) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out << calibrator_to_json(model).dump() << '\n';
}

ReliabilityTable expected_calibration_error(std::span<const LabeledScore> predictions, int bin_count) {
  if (bin_count < 2) throw Error(ErrorKind::Validation, "expected_calibration_error: bin_count must be >= 2");
  const std::size_t n = predictions.size();
  const auto bins = static_cast<std::size_t>(bin_count);
  if (n < bins) throw Error(ErrorKind::Validation, "expected_calibration_error: fewer predictions than bins");

  std::vector<LabeledScore> sorted(predictions.begin(), predictions.end());
  std::sort(sorted.begin(), sorted.end(), [](const LabeledScore& a, const LabeledScore& b) {
    return a.score < b.score || (a.score == b.score && a.error < b.error);
  });

  // Bin b spans sorted positions [edges[b], edges[b+1]).
  std::vector<std::size_t> edges(bins + 1, 0);
  const std::size_t base = n / bins;
  const std::size_t extra = n % bins;
  for (std::size_t b = 0; b < bins; ++b) edges[b + 1] = edges[b] + base + (b < extra ? 1 : 0);

  std::vector<double> predicted_sum(bins, 0.0);
  std::vector<double> observed_sum(bins, 0.0);

  std::size_t bin = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    std::size_t errors = 0;
    while (j < n && sorted[j].score == sorted[i].score) {
      errors += sorted[j].error != 0 ? 1 : 0;
      ++j;
    }
    const double rate = static_cast<double>(errors) / static_cast<double>(j - i);
    // Spread the tie run [i, j) over the bins it overlaps.
    std::size_t pos = i;
    while (pos < j) {
      while (edges[bin + 1] <= pos) ++bin;
      const std::size_t take = std::min(j, edges[bin + 1]) - pos;
      predicted_sum[bin] += static_cast<double>(take) * sorted[i].score;
      observed_sum[bin] += static_cast<double>(take) * rate;
      pos += take;
    }
    i = j;
  }

  ReliabilityTable table;
  table.total_n = n;
  table.bins.reserve(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t count = edges[b + 1] - edges[b];
    ReliabilityBin row;
    row.count = count;
    if (count > 0) {
      row.mean_predicted = predicted_sum[b] / static_cast<double>(count);
      row.observed_rate = observed_sum[b] / static_cast<double>(count);
    }
    table.ece += static_cast<double>(count) / static_cast<double>(n) * std::abs(row.observed_rate - row.mean_predicted);
    table.bins.push_back(row);
  }
  return table;
}

json reliability_to_json(const ReliabilityTable& table) {
  json bins = json::array();
  for (const auto& b : table.bins) {
    bins.push_back({{"mean_predicted", b.mean_predicted}, {"observed_rate", b.observed_rate}, {"count", b.count}});
  }
  return {{"bins", std::move(bins)}, {"scheme", "equal_mass"}, {"total_n", table.total_n}, {"ece", table.ece}};
}

std::string reliability_to_csv(const ReliabilityTable& table) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "bin,mean_predicted,observed_rate,count\n";
  for (std::size_t b = 0; b < table.bins.size(); ++b) {
    const auto& row = table.bins[b];
    out << b << ',' << row.mean_predicted << ',' << row.observed_rate << ',' << row.count << '\n';
  }
  return out.str();
}

}  // namespace cascade
