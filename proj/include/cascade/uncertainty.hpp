#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cascade/datamodel.hpp"

namespace cascade {

enum class SignalKind { Margin, MeanEntropy, MeanMaxProb };

// Uncertainty signals grow with doubt; confidence signals shrink with it.
enum class Orientation { Uncertainty, Confidence };

[[nodiscard]] std::string_view to_string(SignalKind kind) noexcept;
[[nodiscard]] SignalKind parse_signal_kind(std::string_view name);
[[nodiscard]] Orientation orientation_of(SignalKind kind) noexcept;

// u = 1 - mean(top1 - top2). Throws on an empty sequence.
[[nodiscard]] double margin_uncertainty(std::span<const TokenStats> tokens);

// Mean stored per-token entropy; SignalUnavailable if any token lacks one.
[[nodiscard]] double mean_entropy(std::span<const TokenStats> tokens);

[[nodiscard]] double mean_max_prob_confidence(std::span<const TokenStats> tokens);

[[nodiscard]] double signal_value(std::span<const TokenStats> tokens, SignalKind kind);

struct ScoredId {
  std::string id;
  double score = 0.0;
};

struct ScoreStream {
  SignalKind kind = SignalKind::Margin;
  Orientation orientation = Orientation::Uncertainty;
  std::vector<ScoredId> scores;
};

// Errors are rethrown with the offending record id in the message.
[[nodiscard]] ScoreStream score_records(std::span<const InferenceRecord> records, SignalKind kind);

}  // namespace cascade
