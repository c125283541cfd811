#pragma once

// Line-delimited JSON dataset files.
//
//   bag:      {"id": str, "labels": [int], "frames": [[float; D]; K]}
//   segment:  {"video_id": str, "start": int, "labels": [int], "frames": [[float; D]; 5]}
//   vocab:    {"n": int, "localizable": [int], "weights": [float; n]}

#include "milattn/datamodel.hpp"

#include <json.hpp>

#include <sstream>

namespace milattn {

using json = nlohmann::json;

namespace io {

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline double finite_number(const json& j, const std::string& what) {
  if (!j.is_number()) throw Error(what + " is not a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw Error(what + " is not finite");
  return v;
}

/// Parses a rectangular array of arrays. `cols` < 0 accepts any width.
inline Matrix matrix_from_json(const json& j, const std::string& what, Eigen::Index cols = -1) {
  if (!j.is_array()) throw Error(what + " must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows > 0 && cols < 0) {
    if (!j[0].is_array()) throw Error(what + " row 0 is not an array");
    cols = static_cast<Eigen::Index>(j[0].size());
  }
  Matrix m(rows, std::max<Eigen::Index>(cols, 0));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[i];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw Error(what + " row " + std::to_string(i) + " has wrong dimension (want " + std::to_string(cols) + ")");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = finite_number(row[c], what);
  }
  return m;
}

inline Vector vector_from_json(const json& j, const std::string& what, Eigen::Index len = -1) {
  if (!j.is_array()) throw Error(what + " must be an array");
  if (len >= 0 && static_cast<Eigen::Index>(j.size()) != len)
    throw Error(what + " has length " + std::to_string(j.size()) + ", want " + std::to_string(len));
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = finite_number(j[i], what);
  return v;
}

inline ClassIds labels_from_json(const json& j) {
  if (!j.is_array()) throw Error("labels must be an array");
  ClassIds out;
  for (const auto& v : j) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw Error("labels must be nonnegative integers");
    out.push_back(v.get<int>());
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) throw Error("duplicate label");
  return out;
}

}  // namespace io

inline json to_json(const Bag& b) {
  return json{{"id", b.id}, {"labels", b.labels}, {"frames", io::matrix_to_json(b.frames)}};
}

inline json to_json(const Segment& s) {
  return json{{"video_id", s.video_id},
              {"start", s.start_index},
              {"labels", s.labels},
              {"frames", io::matrix_to_json(s.frames)}};
}

inline json to_json(const Vocabulary& v) {
  return json{{"n", v.class_count}, {"localizable", v.localizable_ids()}, {"weights", io::vector_to_json(v.class_weights)}};
}

inline Bag bag_from_json(const json& j) {
  if (!j.is_object() || !j.contains("id") || !j.contains("frames") || !j.contains("labels"))
    throw Error("bag record needs id, labels and frames");
  if (!j["id"].is_string()) throw Error("bag id must be a string");
  Bag b;
  b.id = j["id"].get<std::string>();
  b.labels = io::labels_from_json(j["labels"]);
  b.frames = io::matrix_from_json(j["frames"], "bag '" + b.id + "' frames");
  if (b.frames.rows() < 1 || b.frames.cols() < 1) throw Error("bag '" + b.id + "' has no frames");
  return b;
}

inline Segment segment_from_json(const json& j) {
  if (!j.is_object() || !j.contains("video_id") || !j.contains("start") || !j.contains("frames") ||
      !j.contains("labels"))
    throw Error("segment record needs video_id, start, labels and frames");
  if (!j["video_id"].is_string() || !j["start"].is_number_integer()) throw Error("segment video_id/start have wrong types");
  Segment s;
  s.video_id = j["video_id"].get<std::string>();
  s.start_index = j["start"].get<int>();
  if (s.start_index < 0) throw Error("segment '" + s.id() + "' has a negative start");
  s.labels = io::labels_from_json(j["labels"]);
  s.frames = io::matrix_from_json(j["frames"], "segment '" + s.id() + "' frames");
  if (s.frames.rows() != kSegmentLength)
    throw Error("segment '" + s.id() + "' has " + std::to_string(s.frames.rows()) + " frames, want " +
                std::to_string(kSegmentLength));
  if (s.frames.cols() < 1) throw Error("segment '" + s.id() + "' has empty frames");
  return s;
}

inline Vocabulary vocabulary_from_json(const json& j) {
  if (!j.is_object() || !j.contains("n") || !j.contains("localizable") || !j.contains("weights"))
    throw ParseError("vocabulary needs n, localizable and weights", 0);
  try {
    Vocabulary v;
    v.class_count = j["n"].get<int>();
    if (v.class_count < 1) throw Error("n must be >= 1");
    v.localizable.assign(v.class_count, false);
    for (int c : io::labels_from_json(j["localizable"])) {
      if (c >= v.class_count) throw Error("localizable class out of range");
      v.localizable[c] = true;
    }
    v.class_weights = io::vector_from_json(j["weights"], "weights", v.class_count);
    v.validate();
    return v;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(std::string("vocabulary: ") + e.what(), 0);
  }
}

template <class Record>
std::string dump_dataset(const std::vector<Record>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

template <class Record>
void save_dataset(const std::filesystem::path& path, const std::vector<Record>& records) {
  write_file_atomic(path, dump_dataset(records));
}

namespace detail {

template <class Record, class Parse>
std::vector<Record> parse_lines(std::istream& in, Parse parse) {
  std::vector<Record> out;
  std::string line;
  std::size_t line_no = 0;
  Eigen::Index dim = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      Record r = parse(json::parse(line));
      if (dim >= 0 && r.frames.cols() != dim)
        throw Error("feature dimension " + std::to_string(r.frames.cols()) + " differs from " + std::to_string(dim));
      dim = r.frames.cols();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<Bag> parse_bags(const std::string& text) {
  std::istringstream in(text);
  return detail::parse_lines<Bag>(in, bag_from_json);
}

inline std::vector<Segment> parse_segments(const std::string& text) {
  std::istringstream in(text);
  return detail::parse_lines<Segment>(in, segment_from_json);
}

inline std::vector<Bag> load_bags(const std::filesystem::path& path) { return parse_bags(read_file(path)); }

inline std::vector<Segment> load_segments(const std::filesystem::path& path) {
  return parse_segments(read_file(path));
}

inline void save_vocabulary(const std::filesystem::path& path, const Vocabulary& v) {
  write_file_atomic(path, to_json(v).dump() + "\n");
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(std::string("vocabulary: ") + e.what(), 0);
  }
  return vocabulary_from_json(j);
}

/// Planted windows per bag id: {"<bag id>": [[class, start, length], ...]}.
inline json plants_to_json(const std::map<std::string, std::vector<PlantedWindow>>& plants) {
  json out = json::object();
  for (const auto& [id, windows] : plants) {
    json arr = json::array();
    for (const auto& w : windows) arr.push_back({w.class_id, w.start, w.length});
    out[id] = std::move(arr);
  }
  return out;
}

inline std::map<std::string, std::vector<PlantedWindow>> plants_from_json(const json& j) {
  std::map<std::string, std::vector<PlantedWindow>> out;
  for (const auto& [id, arr] : j.items()) {
    auto& windows = out[id];
    for (const auto& w : arr) windows.push_back({w.at(0).get<int>(), w.at(1).get<int>(), w.at(2).get<int>()});
  }
  return out;
}

}  // namespace milattn
