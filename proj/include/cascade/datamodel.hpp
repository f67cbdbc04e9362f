#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cascade {

// Decoding cap on generated tokens; longer logged sequences are rejected.
inline constexpr std::size_t kMaxTokens = 256;

struct TokenStats {
  double top1_prob = 0.0;
  double top2_prob = 0.0;
  std::optional<double> entropy;  // nats

  [[nodiscard]] double margin() const noexcept { return top1_prob - top2_prob; }

  bool operator==(const TokenStats&) const = default;
};

// Entity type name -> value. A missing key means "no entity of that type".
using EntityMap = std::map<std::string, std::string>;

struct InferenceRecord {
  std::string id;
  std::vector<TokenStats> small_tokens;
  EntityMap small_output;
  EntityMap large_output;
  EntityMap gold;

  bool operator==(const InferenceRecord&) const = default;
};

enum class ModelSide { Small, Large };

[[nodiscard]] const EntityMap& output_of(const InferenceRecord& record, ModelSide side) noexcept;

struct MatchCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;

  MatchCounts& operator+=(const MatchCounts& other) noexcept {
    tp += other.tp;
    fp += other.fp;
    fn += other.fn;
    return *this;
  }
  MatchCounts& operator-=(const MatchCounts& other) noexcept {
    tp -= other.tp;
    fp -= other.fp;
    fn -= other.fn;
    return *this;
  }
  friend MatchCounts operator+(MatchCounts a, const MatchCounts& b) noexcept { return a += b; }
  friend MatchCounts operator-(MatchCounts a, const MatchCounts& b) noexcept { return a -= b; }
  bool operator==(const MatchCounts&) const = default;
};

enum class SplitName { Calibration, Validation, Test };

[[nodiscard]] std::string_view to_string(SplitName name) noexcept;

struct DatasetSplit {
  SplitName name = SplitName::Test;
  std::vector<InferenceRecord> records;
};

struct SplitFractions {
  double calibration = 0.30;
  double validation = 0.20;
  double test = 0.50;
};

struct CostModel {
  double small_cost = 1.0;
  double large_cost = 3.02;

  void validate() const;
  [[nodiscard]] double ratio() const noexcept { return large_cost / small_cost; }
  // Mean per-query cost when `escalated` of `total` queries go to the large model.
  [[nodiscard]] double mean_cost(std::size_t escalated, std::size_t total) const noexcept;

  bool operator==(const CostModel&) const = default;
};

struct RunConfig {
  std::vector<std::string> entity_schema;
  CostModel cost_model;
  double accuracy_target = 0.91;
  int ece_bins = 10;
  int bootstrap_resamples = 1000;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// camera, lens, aperture, shutter_speed, iso, focal_length
[[nodiscard]] std::vector<std::string> default_entity_schema();
[[nodiscard]] RunConfig default_config();

[[nodiscard]] RunConfig parse_config(std::string_view json_text);
[[nodiscard]] RunConfig load_config(const std::string& path);
[[nodiscard]] std::string config_to_json(const RunConfig& config);

// Throws Error(Validation) naming the record id and the violated rule.
void validate_record(const InferenceRecord& record, std::span<const std::string> schema);

[[nodiscard]] InferenceRecord parse_record(std::string_view json_line, std::span<const std::string> schema);
[[nodiscard]] std::string serialize_record(const InferenceRecord& record);

// A routing request: `{id, tokens}` with the same token rules as records.
struct TokenRequest {
  std::string id;
  std::vector<TokenStats> tokens;
};
[[nodiscard]] TokenRequest parse_token_request(std::string_view json_line);

// Line-delimited JSON. Blank lines are skipped; errors carry the 1-based line number.
[[nodiscard]] std::vector<InferenceRecord> read_records(std::istream& in, std::span<const std::string> schema);
[[nodiscard]] std::vector<InferenceRecord> load_records(const std::string& path,
                                                        std::span<const std::string> schema);
void write_records(std::ostream& out, std::span<const InferenceRecord> records);
void save_records(const std::string& path, std::span<const InferenceRecord> records);

struct Splits {
  DatasetSplit calibration{SplitName::Calibration, {}};
  DatasetSplit validation{SplitName::Validation, {}};
  DatasetSplit test{SplitName::Test, {}};
};

// Seeded shuffle, then floor-rounded calibration/validation sizes; the remainder goes to test.
[[nodiscard]] Splits split_dataset(std::span<const InferenceRecord> records, const SplitFractions& fractions,
                                   std::uint64_t seed);

// 0 when the chosen model's output equals gold on every entity type, 1 otherwise.
[[nodiscard]] int derive_correctness(const InferenceRecord& record, ModelSide side);

// Per-type rule: both present and equal -> tp; a present/present mismatch counts one fp and one fn.
[[nodiscard]] MatchCounts match_counts(const EntityMap& predicted, const EntityMap& gold);
[[nodiscard]] MatchCounts match_counts_for_type(const EntityMap& predicted, const EntityMap& gold,
                                                const std::string& entity_type);
[[nodiscard]] MatchCounts derive_match_counts(const InferenceRecord& record, ModelSide side);

}  // namespace cascade
