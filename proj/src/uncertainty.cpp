#include "cascade/uncertainty.hpp"

#include <algorithm>

#include "cascade/error.hpp"

namespace cascade {

std::string_view to_string(SignalKind kind) noexcept {
  switch (kind) {
    case SignalKind::Margin: return "margin";
    case SignalKind::MeanEntropy: return "entropy";
    case SignalKind::MeanMaxProb: return "maxprob";
  }
  return "unknown";
}

SignalKind parse_signal_kind(std::string_view name) {
  if (name == "margin") return SignalKind::Margin;
  if (name == "entropy") return SignalKind::MeanEntropy;
  if (name == "maxprob") return SignalKind::MeanMaxProb;
  throw Error(ErrorKind::Usage, "unknown signal '" + std::string(name) + "'");
}

Orientation orientation_of(SignalKind kind) noexcept {
  return kind == SignalKind::MeanMaxProb ? Orientation::Confidence : Orientation::Uncertainty;
}

namespace {

void require_tokens(std::span<const TokenStats> tokens, const char* what) {
  if (tokens.empty()) throw Error(ErrorKind::Validation, std::string(what) + ": empty token sequence");
}

}  // namespace

double margin_uncertainty(std::span<const TokenStats> tokens) {
  require_tokens(tokens, "margin_uncertainty");
  double total = 0.0;
  for (const auto& tok : tokens) total += tok.margin();
  const double u = 1.0 - total / static_cast<double>(tokens.size());
  return std::clamp(u, 0.0, 1.0);
}

double mean_entropy(std::span<const TokenStats> tokens) {
  require_tokens(tokens, "mean_entropy");
  double total = 0.0;
  for (const auto& tok : tokens) {
    if (!tok.entropy) throw Error(ErrorKind::SignalUnavailable, "token entropy missing");
    total += *tok.entropy;
  }
  return total / static_cast<double>(tokens.size());
}

double mean_max_prob_confidence(std::span<const TokenStats> tokens) {
  require_tokens(tokens, "mean_max_prob_confidence");
  double total = 0.0;
  for (const auto& tok : tokens) total += tok.top1_prob;
  return std::clamp(total / static_cast<double>(tokens.size()), 0.0, 1.0);
}

double signal_value(std::span<const TokenStats> tokens, SignalKind kind) {
  switch (kind) {
    case SignalKind::Margin: return margin_uncertainty(tokens);
    case SignalKind::MeanEntropy: return mean_entropy(tokens);
    case SignalKind::MeanMaxProb: return mean_max_prob_confidence(tokens);
  }
  return 0.0;
}

ScoreStream score_records(std::span<const InferenceRecord> records, SignalKind kind) {
  ScoreStream stream{kind, orientation_of(kind), {}};
  stream.scores.reserve(records.size());
  for (const auto& record : records) {
    try {
      stream.scores.push_back({record.id, signal_value(record.small_tokens, kind)});
    } catch (const Error& e) {
      throw Error(e.kind(), "record '" + record.id + "': " + e.what());
    }
  }
  return stream;
}

}  // namespace cascade
