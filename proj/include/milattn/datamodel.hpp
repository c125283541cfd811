#pragma once

#include "milattn/common.hpp"

#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace milattn {

inline constexpr int kSegmentLength = 5;
/// Frames at each end of a bag that sampling skips (titles, credits).
inline constexpr int kEdgeExclusion = 15;
/// Minimum overlap with a planted window for a segment to be positive.
inline constexpr int kSegmentPositiveOverlap = 3;

/// A video: K x D frame features plus its bag-level labels (sorted class ids).
struct Bag {
  std::string id;
  Matrix frames;
  ClassIds labels;

  int frame_count() const { return static_cast<int>(frames.rows()); }
  bool operator==(const Bag& o) const { return id == o.id && labels == o.labels && same_tensor(frames, o.frames); }
};

/// A 5-frame window of a bag with its own labels.
struct Segment {
  std::string video_id;
  int start_index = 0;
  Matrix frames;
  ClassIds labels;

  /// Stable identifier used in prediction sets: "<video_id>:<start>".
  std::string id() const { return video_id + ":" + std::to_string(start_index); }
  bool operator==(const Segment& o) const {
    return video_id == o.video_id && start_index == o.start_index && labels == o.labels && same_tensor(frames, o.frames);
  }
};

struct Vocabulary {
  int class_count = 0;
  std::vector<bool> localizable;
  Vector class_weights;

  /// Classes in `localizable_ids` get `boost`, everything else weight 1.
  static Vocabulary make(int n, const ClassIds& localizable_ids, double boost = 3.0) {
    Vocabulary v;
    v.class_count = n;
    v.localizable.assign(n, false);
    v.class_weights = Vector::Ones(n);
    for (int c : localizable_ids) {
      if (c < 0 || c >= n) throw ConfigError("localizable class " + std::to_string(c) + " out of range");
      v.localizable[c] = true;
      v.class_weights(c) = boost;
    }
    v.validate();
    return v;
  }

  ClassIds localizable_ids() const {
    ClassIds ids;
    for (int c = 0; c < class_count; ++c)
      if (localizable[c]) ids.push_back(c);
    return ids;
  }

  void validate() const {
    if (class_count < 1) throw ConfigError("vocabulary needs at least one class");
    if (static_cast<int>(localizable.size()) != class_count || class_weights.size() != class_count)
      throw ShapeError("vocabulary mask/weights length differs from class count");
    if (std::none_of(localizable.begin(), localizable.end(), [](bool b) { return b; }))
      throw ConfigError("vocabulary has no localizable class");
    for (int c = 0; c < class_count; ++c)
      if (!(class_weights(c) > 0.0) || !std::isfinite(class_weights(c)))
        throw ConfigError("class weights must be finite and strictly positive");
  }

  bool operator==(const Vocabulary& o) const {
    return class_count == o.class_count && localizable == o.localizable && same_tensor(class_weights, o.class_weights);
  }
};

struct SyntheticConfig {
  int class_count = 10;
  int feature_dim = 16;
  int bags_per_split = 200;
  int min_frames = 60;
  int max_frames = 120;
  int min_labels = 1;
  int max_labels = 3;
  double prototype_strength = 5.0;
  int planted_segment_length = kSegmentLength;
  int segments_per_bag = 5;
  /// Classes [0, localizable_classes) form the evaluation subset; 0 means 4n/5.
  int localizable_classes = 0;
  double localizable_weight = 3.0;
  std::uint64_t seed = 7;

  int resolved_localizable() const {
    return localizable_classes > 0 ? localizable_classes : std::max(1, class_count * 4 / 5);
  }

  void validate() const {
    if (feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
    if (class_count < 2) throw ConfigError("class_count must be >= 2");
    if (bags_per_split < 1 || segments_per_bag < 1 || planted_segment_length < 1)
      throw ConfigError("counts must be >= 1");
    if (min_frames < 1 || max_frames < min_frames) throw ConfigError("invalid frames_per_bag range");
    if (min_labels < 1 || max_labels < min_labels) throw ConfigError("invalid labels_per_bag range");
    if (max_labels > class_count) throw ConfigError("labels_per_bag exceeds class_count");
    if (!(prototype_strength > 0.0)) throw ConfigError("prototype_strength must be > 0");
    if (min_frames < max_labels * planted_segment_length || min_frames < kSegmentLength)
      throw ConfigError("min_frames too small to hold the planted windows");
    if (resolved_localizable() > class_count) throw ConfigError("localizable_classes exceeds class_count");
    if (!(localizable_weight > 0.0)) throw ConfigError("localizable_weight must be > 0");
  }
};

struct PlantedWindow {
  int class_id = 0;
  int start = 0;
  int length = 0;

  int overlap(int begin, int end) const {
    return std::max(0, std::min(end, start + length) - std::max(begin, start));
  }
  bool operator==(const PlantedWindow&) const = default;
};

struct Corpus {
  Vocabulary vocab;
  Matrix prototypes;  // n x D, one unit row per class
  std::vector<Bag> train_bags;
  std::vector<Bag> validation_bags;
  std::vector<Segment> labeled_segments;
  std::vector<Bag> test_bags;
  std::vector<Segment> test_segments;
  std::map<std::string, std::vector<PlantedWindow>> plants;  // keyed by bag id
};

/// Half-open frame range [begin, end) eligible for sampling. Bags of 30 frames
/// or fewer keep every frame.
inline std::pair<int, int> eligible_range(int frame_count) {
  if (frame_count > 2 * kEdgeExclusion) return {kEdgeExclusion, frame_count - kEdgeExclusion};
  return {0, frame_count};
}

struct SamplingScheme {
  enum class Kind { RandomWithReplacement, OneInFive };
  Kind kind = Kind::RandomWithReplacement;
  int count = 120;

  static SamplingScheme random(int count) { return {Kind::RandomWithReplacement, count}; }
  static SamplingScheme one_in_five() { return {Kind::OneInFive, 0}; }

  /// Accepts "random:N" or "one-in-five".
  static SamplingScheme parse(const std::string& text) {
    if (text == "one-in-five") return one_in_five();
    if (text.rfind("random:", 0) == 0) {
      int n = 0;
      try {
        std::size_t used = 0;
        n = std::stoi(text.substr(7), &used);
        if (used != text.size() - 7) n = 0;
      } catch (const std::exception&) {
        n = 0;
      }
      if (n < 1) throw ConfigError("bad sampling count in '" + text + "'");
      return random(n);
    }
    throw ConfigError("unknown sampling scheme '" + text + "' (want random:N or one-in-five)");
  }

  std::string to_string() const {
    return kind == Kind::OneInFive ? "one-in-five" : "random:" + std::to_string(count);
  }
  bool operator==(const SamplingScheme&) const = default;
};

inline std::vector<int> sample_frames(int frame_count, const SamplingScheme& scheme, std::uint64_t seed) {
  if (frame_count < 1) throw ShapeError("cannot sample from an empty bag");
  const auto [lo, hi] = eligible_range(frame_count);
  std::vector<int> idx;
  if (scheme.kind == SamplingScheme::Kind::OneInFive) {
    for (int i = lo; i < hi; i += 5) idx.push_back(i);
    return idx;
  }
  Rng rng(seed);
  idx.reserve(scheme.count);
  for (int i = 0; i < scheme.count; ++i) idx.push_back(lo + static_cast<int>(rng.index(hi - lo)));
  return idx;
}

inline std::vector<int> sample_frames(const Bag& bag, const SamplingScheme& scheme, std::uint64_t seed) {
  return sample_frames(bag.frame_count(), scheme, seed);
}

inline Matrix gather_rows(const Matrix& frames, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), frames.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = frames.row(rows[i]);
  return out;
}

inline Segment extract_segment(const Bag& bag, int start_index, ClassIds labels = {}) {
  if (start_index < 0 || start_index + kSegmentLength > bag.frame_count())
    throw ShapeError("segment [" + std::to_string(start_index) + ", " + std::to_string(start_index + kSegmentLength) +
                     ") outside bag '" + bag.id + "' of " + std::to_string(bag.frame_count()) + " frames");
  return Segment{bag.id, start_index, bag.frames.middleRows(start_index, kSegmentLength), std::move(labels)};
}

/// Classes whose planted windows overlap [start, start + 5) by at least 3 frames.
inline ClassIds segment_labels(const std::vector<PlantedWindow>& windows, int start) {
  ClassIds labels;
  for (const auto& w : windows)
    if (w.overlap(start, start + kSegmentLength) >= kSegmentPositiveOverlap) labels.push_back(w.class_id);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

namespace detail {

inline Matrix make_prototypes(int n, int d, Rng& rng) {
  Matrix p(n, d);
  for (int c = 0; c < n; ++c) {
    Vector v(d);
    for (int j = 0; j < d; ++j) v(j) = rng.normal();
    // Orthogonalize while there is room so classes stay separable.
    if (c < d)
      for (int prev = 0; prev < c; ++prev) v -= v.dot(p.row(prev).transpose()) * p.row(prev).transpose();
    p.row(c) = (v / v.norm()).transpose();
  }
  return p;
}

struct GeneratedBag {
  Bag bag;
  std::vector<PlantedWindow> windows;
};

inline GeneratedBag generate_bag(const SyntheticConfig& cfg, const Matrix& prototypes, const std::string& id,
                                 std::uint64_t seed) {
  Rng rng(seed);
  const int k = static_cast<int>(rng.integer(cfg.min_frames, cfg.max_frames));
  const int n_labels = static_cast<int>(rng.integer(cfg.min_labels, cfg.max_labels));

  std::vector<int> classes(cfg.class_count);
  std::iota(classes.begin(), classes.end(), 0);
  for (int i = 0; i < n_labels; ++i) std::swap(classes[i], classes[i + rng.index(cfg.class_count - i)]);
  classes.resize(n_labels);

  const int len = cfg.planted_segment_length;
  auto [lo, hi] = eligible_range(k);
  if (hi - lo < n_labels * len) {
    lo = 0;
    hi = k;
  }
  // Non-overlapping placement: sorted gap offsets plus cumulative window lengths.
  const int slack = (hi - lo) - n_labels * len;
  std::vector<int> offsets(n_labels);
  for (auto& o : offsets) o = static_cast<int>(rng.integer(0, slack));
  std::sort(offsets.begin(), offsets.end());

  GeneratedBag out;
  out.bag.id = id;
  out.bag.frames.resize(k, cfg.feature_dim);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < cfg.feature_dim; ++j) out.bag.frames(i, j) = rng.normal();
  for (int w = 0; w < n_labels; ++w) {
    const PlantedWindow win{classes[w], lo + offsets[w] + w * len, len};
    for (int i = win.start; i < win.start + len; ++i)
      out.bag.frames.row(i) += cfg.prototype_strength * prototypes.row(win.class_id);
    out.windows.push_back(win);
  }
  out.bag.labels = classes;
  std::sort(out.bag.labels.begin(), out.bag.labels.end());
  return out;
}

inline std::vector<Segment> sample_segments(const GeneratedBag& g, int count, std::uint64_t seed) {
  Rng rng(seed);
  const int max_start = g.bag.frame_count() - kSegmentLength;
  count = std::min(count, max_start + 1);
  std::vector<int> starts;
  while (static_cast<int>(starts.size()) < count) {
    const int s = static_cast<int>(rng.integer(0, max_start));
    if (std::find(starts.begin(), starts.end(), s) == starts.end()) starts.push_back(s);
  }
  std::sort(starts.begin(), starts.end());
  std::vector<Segment> out;
  for (int s : starts) out.push_back(extract_segment(g.bag, s, segment_labels(g.windows, s)));
  return out;
}

}  // namespace detail

/// Builds the planted-segment corpus: noisy bag-level train set, labeled
/// segments from validation bags, and test segments from held-out bags. Each
/// bag draws from its own RNG stream derived from (seed, split, index).
inline Corpus generate_synthetic_corpus(const SyntheticConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  ClassIds loc(cfg.resolved_localizable());
  std::iota(loc.begin(), loc.end(), 0);
  corpus.vocab = Vocabulary::make(cfg.class_count, loc, cfg.localizable_weight);

  Rng proto_rng(derive_seed(cfg.seed, 0xC1A55));
  corpus.prototypes = detail::make_prototypes(cfg.class_count, cfg.feature_dim, proto_rng);

  const char* prefixes[] = {"train", "val", "test"};
  for (std::uint64_t split = 0; split < 3; ++split) {
    std::vector<detail::GeneratedBag> generated(cfg.bags_per_split);
    parallel_for(generated.size(), [&](std::size_t i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s%05zu", prefixes[split], i);
      generated[i] = detail::generate_bag(cfg, corpus.prototypes, id, derive_seed(cfg.seed, split + 1, i));
    });
    for (std::size_t i = 0; i < generated.size(); ++i) {
      auto& g = generated[i];
      corpus.plants[g.bag.id] = g.windows;
      if (split == 0) {
        corpus.train_bags.push_back(std::move(g.bag));
        continue;
      }
      auto segs = detail::sample_segments(g, cfg.segments_per_bag, derive_seed(cfg.seed, split + 101, i));
      auto& dest = split == 1 ? corpus.labeled_segments : corpus.test_segments;
      dest.insert(dest.end(), segs.begin(), segs.end());
      (split == 1 ? corpus.validation_bags : corpus.test_bags).push_back(std::move(g.bag));
    }
  }
  return corpus;
}

}  // namespace milattn
