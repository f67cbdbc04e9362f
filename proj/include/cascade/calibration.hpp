#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace cascade {

// A raw score paired with the binary error event (1 = small model wrong).
struct LabeledScore {
  double score = 0.0;
  int error = 0;
};

// Non-decreasing step function from uncertainty to error probability.
// Block j covers [breakpoints[j], breakpoints[j+1]); queries left of the first
// breakpoint clamp to the first block.
class IsotonicModel {
 public:
  IsotonicModel() = default;
  // Validates strict/non-decreasing monotonicity and value range.
  IsotonicModel(std::vector<double> breakpoints, std::vector<double> values, std::size_t training_size);

  [[nodiscard]] double predict(double u) const;
  // Index of the block that `u` falls into.
  [[nodiscard]] std::size_t block_index(double u) const;

  [[nodiscard]] const std::vector<double>& breakpoints() const noexcept { return breakpoints_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t training_size() const noexcept { return training_size_; }

  bool operator==(const IsotonicModel&) const = default;

 private:
  std::vector<double> breakpoints_;
  std::vector<double> values_;
  std::size_t training_size_ = 0;
};

// Pool-adjacent-violators least-squares fit. Equal scores are pooled first so
// the result is a function of the score.
[[nodiscard]] IsotonicModel fit_isotonic(std::span<const LabeledScore> pairs);

// sigmoid(logit(clamp(u, eps, 1 - eps)) / T)
struct TemperatureModel {
  static constexpr double kClamp = 1e-6;

  double temperature = 1.0;

  [[nodiscard]] double predict(double u) const;
  bool operator==(const TemperatureModel&) const = default;
};

// Minimises the Bernoulli NLL over T: log-spaced grid on [1e-3, 1e3], then
// golden-section refinement around the best grid point.
[[nodiscard]] TemperatureModel fit_temperature(std::span<const LabeledScore> pairs);
[[nodiscard]] double temperature_nll(std::span<const LabeledScore> pairs, double temperature);

using Calibrator = std::variant<IsotonicModel, TemperatureModel>;

[[nodiscard]] double calibrate(const Calibrator& model, double u);

[[nodiscard]] nlohmann::json calibrator_to_json(const Calibrator& model);
[[nodiscard]] Calibrator calibrator_from_json(const nlohmann::json& doc);
[[nodiscard]] Calibrator load_calibrator(const std::string& path);
void save_calibrator(const std::string& path, const Calibrator& model);

struct ReliabilityBin {
  double mean_predicted = 0.0;
  double observed_rate = 0.0;
  std::size_t count = 0;

  bool operator==(const ReliabilityBin&) const = default;
};

struct ReliabilityTable {
  std::vector<ReliabilityBin> bins;
  std::size_t total_n = 0;
  double ece = 0.0;
};

// Equal-mass binning over predictions sorted by p-hat (bin sizes differ by at
// most one). A run of tied predictions straddling a bin edge contributes its
// pooled error rate to each bin it touches, so the table depends only on the
// multiset of (p-hat, e) pairs.
[[nodiscard]] ReliabilityTable expected_calibration_error(std::span<const LabeledScore> predictions,
                                                          int bin_count);

[[nodiscard]] nlohmann::json reliability_to_json(const ReliabilityTable& table);
[[nodiscard]] std::string reliability_to_csv(const ReliabilityTable& table);

}  // namespace cascade
