#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cascade/calibration.hpp"
#include "json.hpp"

namespace cascade {

struct PropertyResult {
  std::string name;
  bool passed = false;
  nlohmann::json details;
};

// Maps a fitted isotonic model and a raw u to the calibrated probability.
using Predictor = std::function<double(const IsotonicModel&, double)>;

[[nodiscard]] double step_predictor(const IsotonicModel& model, double u);
// Deliberately wrong: linear interpolation between block values. Used to show
// the level-set property detects a non-step calibrator.
[[nodiscard]] double interpolating_predictor(const IsotonicModel& model, double u);

// Each check is deterministic in `seed`.
[[nodiscard]] PropertyResult check_pava_oracle(int instances, std::size_t max_n, std::uint64_t seed);
[[nodiscard]] PropertyResult check_threshold_oracle(int instances, std::size_t max_n, std::uint64_t seed);
[[nodiscard]] PropertyResult check_rate(const std::vector<std::size_t>& n_grid, int trials, std::size_t eval_n,
                                        std::uint64_t seed);
[[nodiscard]] PropertyResult check_conformal_coverage(std::size_t n_cal, int trials, std::uint64_t seed);
[[nodiscard]] PropertyResult check_falsification(int trials, std::size_t n, std::uint64_t seed);
[[nodiscard]] PropertyResult check_level_set_ties(const Predictor& predictor, std::uint64_t seed);

struct VerifyOptions {
  std::uint64_t seed = 0;
  bool quick = false;  // smaller grids; the rate check stops at n = 10^4
  bool inject_interpolating_predictor = false;
};

[[nodiscard]] std::vector<PropertyResult> run_verify(const VerifyOptions& options);

[[nodiscard]] nlohmann::json property_to_json(const PropertyResult& result);

}  // namespace cascade
