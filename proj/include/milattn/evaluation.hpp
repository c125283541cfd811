#pragma once

// Segment-level evaluation: MAP@K_s over per-class ranked predictions,
// prediction sets, weighted ensembling and submission CSV files.

#include "milattn/dataset_io.hpp"
#include "milattn/model.hpp"

#include <charconv>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace milattn {

inline constexpr std::size_t kDefaultTopK = 100000;

struct Prediction {
  std::string segment_id;
  int class_id = 0;
  double score = 0.0;
  bool operator==(const Prediction&) const = default;
};

struct PredictionSet {
  std::vector<Prediction> entries;

  /// Rejects duplicate (segment, class) keys and non-finite scores.
  void validate() const {
    std::set<std::pair<std::string, int>> seen;
    for (const auto& p : entries) {
      if (!std::isfinite(p.score)) throw ConfigError("non-finite score for " + p.segment_id);
      if (!seen.emplace(p.segment_id, p.class_id).second)
        throw ConfigError("duplicate prediction for segment '" + p.segment_id + "' class " +
                          std::to_string(p.class_id));
    }
  }

  /// Sorts by (class asc, score desc, segment_id asc).
  void canonicalize() {
    std::sort(entries.begin(), entries.end(), [](const Prediction& a, const Prediction& b) {
      if (a.class_id != b.class_id) return a.class_id < b.class_id;
      if (a.score != b.score) return a.score > b.score;
      return a.segment_id < b.segment_id;
    });
  }

  bool operator==(const PredictionSet&) const = default;
};

struct GroundTruth {
  std::set<std::pair<std::string, int>> positives;
  std::map<int, int> positive_counts;  // N_c, classes with N_c >= 1 only

  void add(const std::string& segment_id, int class_id) {
    if (positives.emplace(segment_id, class_id).second) ++positive_counts[class_id];
  }

  bool relevant(const std::string& segment_id, int class_id) const {
    return positives.count({segment_id, class_id}) > 0;
  }

  /// Positives of localizable classes from labeled segments.
  static GroundTruth from_segments(const std::vector<Segment>& segments, const Vocabulary& vocab) {
    GroundTruth gt;
    for (const auto& s : segments)
      for (int c : s.labels)
        if (c >= 0 && c < vocab.class_count && vocab.localizable[c]) gt.add(s.id(), c);
    return gt;
  }
};

struct MetricConfig {
  std::size_t top_k = kDefaultTopK;
  /// Classes averaged over; defaults to every class with N_c >= 1.
  std::optional<ClassIds> classes;
};

struct ClassAveragePrecision {
  int class_id = 0;
  double ap = 0.0;
  int positives = 0;
};

struct MetricReport {
  double map = 0.0;
  std::vector<ClassAveragePrecision> per_class;
};

/// (sum_{k <= K_s} P(k) rel(k)) / N_c over a list already sorted by score.
inline double average_precision_at_k(const std::vector<bool>& ranked_rel, int positives, std::size_t top_k) {
  if (positives < 1) throw ConfigError("average_precision_at_k: class has no positives");
  if (top_k < 1) throw ConfigError("average_precision_at_k: K_s must be >= 1");
  const std::size_t n = std::min(top_k, ranked_rel.size());
  double sum = 0.0;
  int hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!ranked_rel[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  return sum / static_cast<double>(positives);
}

inline MetricReport map_at_k(const PredictionSet& pred, const GroundTruth& gt, const MetricConfig& cfg = {}) {
  pred.validate();
  ClassIds classes;
  if (cfg.classes) {
    for (int c : *cfg.classes)
      if (gt.positive_counts.count(c)) classes.push_back(c);
  } else {
    for (const auto& [c, n] : gt.positive_counts) classes.push_back(c);
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  std::map<int, std::vector<const Prediction*>> by_class;
  for (const auto& p : pred.entries) by_class[p.class_id].push_back(&p);

  MetricReport report;
  double total = 0.0;
  for (int c : classes) {
    auto& ranked = by_class[c];
    std::sort(ranked.begin(), ranked.end(), [](const Prediction* a, const Prediction* b) {
      if (a->score != b->score) return a->score > b->score;
      return a->segment_id < b->segment_id;
    });
    std::vector<bool> rel;
    rel.reserve(std::min(ranked.size(), cfg.top_k));
    for (std::size_t k = 0; k < ranked.size() && k < cfg.top_k; ++k) rel.push_back(gt.relevant(ranked[k]->segment_id, c));
    const int n_c = gt.positive_counts.at(c);
    const double ap = average_precision_at_k(rel, n_c, cfg.top_k);
    report.per_class.push_back({c, ap, n_c});
    total += ap;
  }
  report.map = classes.empty() ? 0.0 : total / static_cast<double>(classes.size());
  return report;
}

inline json to_json(const MetricReport& r) {
  json per_class = json::array();
  for (const auto& c : r.per_class) per_class.push_back({{"class_id", c.class_id}, {"ap", c.ap}, {"n_c", c.positives}});
  return json{{"map", r.map}, {"per_class", per_class}};
}

/// One score per (segment, localizable class), in canonical order.
inline PredictionSet predict_segments(const ModelParams& model, const std::vector<Segment>& segments,
                                      const Vocabulary& vocab) {
  require(vocab.class_count == model.config.class_count, "predict_segments: vocabulary size differs from model");
  const ClassIds classes = vocab.localizable_ids();
  std::vector<Vector> scores(segments.size());
  parallel_for(segments.size(), [&](std::size_t i) { scores[i] = forward(model, segments[i].frames).scores; });
  PredictionSet out;
  for (std::size_t i = 0; i < segments.size(); ++i)
    for (int c : classes) out.entries.push_back({segments[i].id(), c, scores[i](c)});
  out.validate();
  out.canonicalize();
  return out;
}

/// Per key: sum_j weights_j * score_j. All sets must share one key set and
/// the weights must lie on the simplex.
inline PredictionSet ensemble_blend(const std::vector<PredictionSet>& sets, const std::vector<double>& weights) {
  if (sets.empty()) throw ConfigError("ensemble_blend: no prediction sets");
  if (weights.size() != sets.size()) throw ConfigError("ensemble_blend: need one weight per prediction set");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("ensemble_blend: weights must be nonnegative");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("ensemble_blend: weights must sum to 1");

  using Key = std::pair<int, std::string>;
  struct Acc {
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    std::size_t seen = 0;
  };
  std::map<Key, Acc> acc;
  for (std::size_t j = 0; j < sets.size(); ++j) {
    sets[j].validate();
    if (j > 0 && sets[j].entries.size() != acc.size()) throw ConfigError("ensemble_blend: key sets differ");
    for (const auto& p : sets[j].entries) {
      auto it = acc.find({p.class_id, p.segment_id});
      if (j == 0) it = acc.emplace(Key{p.class_id, p.segment_id}, Acc{}).first;
      if (it == acc.end() || it->second.seen != j) throw ConfigError("ensemble_blend: key sets differ");
      auto& a = it->second;
      a.sum += weights[j] * p.score;
      a.lo = std::min(a.lo, p.score);
      a.hi = std::max(a.hi, p.score);
      ++a.seen;
    }
  }
  PredictionSet out;
  for (const auto& [key, a] : acc) out.entries.push_back({key.second, key.first, std::clamp(a.sum, a.lo, a.hi)});
  out.canonicalize();
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// CSV `class_id,segment_id,score`, canonical order, shortest round-trip scores.
inline std::string format_submission(PredictionSet pred) {
  pred.validate();
  pred.canonicalize();
  std::string out = "class_id,segment_id,score\n";
  for (const auto& p : pred.entries) {
    if (p.segment_id.find_first_of(",\n") != std::string::npos)
      throw ConfigError("segment id '" + p.segment_id + "' cannot be written to CSV");
    out += std::to_string(p.class_id) + ',' + p.segment_id + ',' + detail::format_double(p.score) + '\n';
  }
  return out;
}

inline void write_submission(const PredictionSet& pred, const std::filesystem::path& path) {
  write_file_atomic(path, format_submission(pred));
}

inline PredictionSet parse_submission(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  PredictionSet out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "class_id,segment_id,score") throw ParseError("missing submission header", 1);
      continue;
    }
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) throw ParseError("expected 3 columns", line_no);
    Prediction p;
    p.segment_id = line.substr(c1 + 1, c2 - c1 - 1);
    const char* end = line.data() + line.size();
    auto r1 = std::from_chars(line.data(), line.data() + c1, p.class_id);
    auto r2 = std::from_chars(line.data() + c2 + 1, end, p.score);
    if (r1.ec != std::errc() || r1.ptr != line.data() + c1 || r2.ec != std::errc() || r2.ptr != end ||
        !std::isfinite(p.score))
      throw ParseError("malformed class_id or score", line_no);
    out.entries.push_back(std::move(p));
  }
  if (line_no == 0) throw ParseError("empty submission file", 0);
  try {
    out.validate();
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), 0);
  }
  return out;
}

inline PredictionSet read_submission(const std::filesystem::path& path) { return parse_submission(read_file(path)); }

}  // namespace milattn
