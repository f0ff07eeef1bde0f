#pragma once

// On-disk dataset format shared by every pipeline stage:
//
//   manifest.json            one JSON document (Manifest)
//   <split>.jsonl            one SampleRecord per line, split in {train, valid, test}
//   dynamics.<split>.jsonl   one DynamicsRecord per line (only when dynamics_epochs > 0)
//
// A missing noisy label is JSON null; an absent true label is an omitted key.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "labelcal/common.hpp"

namespace labelcal {

using json = nlohmann::json;

inline constexpr const char* kFormatVersion = "1";

enum class Split { Train, Valid, Test };

inline constexpr Split kAllSplits[] = {Split::Train, Split::Valid, Split::Test};

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

struct Manifest {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::size_t> splits;  // split name -> record count
  int dynamics_epochs = 0;
  std::string format_version = kFormatVersion;

  bool operator==(const Manifest&) const = default;
};

struct SampleRecord {
  std::string id;
  std::vector<double> features;
  std::optional<int> noisy_label;  // nullopt == MISSING
  std::optional<int> true_label;   // nullopt == ABSENT
  Split split = Split::Train;

  bool operator==(const SampleRecord&) const = default;
};

struct DynamicsRecord {
  std::string id;
  Matrix trajectory;  // epochs x classes, rows are probability vectors

  bool operator==(const DynamicsRecord& o) const {
    return id == o.id && trajectory.rows() == o.trajectory.rows() &&
           trajectory.cols() == o.trajectory.cols() && trajectory == o.trajectory;
  }
};

struct Dataset {
  Manifest manifest;
  std::vector<SampleRecord> records;
  std::optional<std::vector<DynamicsRecord>> dynamics;

  bool operator==(const Dataset&) const = default;

  int num_classes() const { return manifest.num_classes; }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == split) out.push_back(i);
    }
    return out;
  }

  /// Trajectory for every record, aligned with `records`; throws
  /// MissingDynamics if any record lacks one.
  std::vector<const Matrix*> aligned_dynamics() const {
    require(dynamics.has_value(), ErrorCode::MissingDynamics, "dataset carries no training dynamics");
    std::unordered_map<std::string, const Matrix*> by_id;
    for (const auto& d : *dynamics) by_id.emplace(d.id, &d.trajectory);
    std::vector<const Matrix*> out;
    out.reserve(records.size());
    for (const auto& r : records) {
      auto it = by_id.find(r.id);
      require(it != by_id.end(), ErrorCode::MissingDynamics, "no dynamics for record '" + r.id + "'");
      out.push_back(it->second);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Validation

namespace detail {

/// `remap` turns every violation into InvariantViolation (used by save).
inline void validate(const Dataset& ds, bool remap) {
  auto check = [remap](bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(remap ? ErrorCode::InvariantViolation : code, what);
  };
  const Manifest& m = ds.manifest;
  check(m.num_classes >= 2, ErrorCode::MalformedManifest, "num_classes must be >= 2");
  check(m.feature_dim >= 1, ErrorCode::MalformedManifest, "feature_dim must be >= 1");
  check(m.dynamics_epochs >= 0, ErrorCode::MalformedManifest, "dynamics_epochs must be >= 0");
  check(static_cast<int>(m.class_names.size()) == m.num_classes, ErrorCode::MalformedManifest,
        "class_names must have exactly num_classes entries");
  check(std::set<std::string>(m.class_names.begin(), m.class_names.end()).size() == m.class_names.size(),
        ErrorCode::MalformedManifest, "class_names must be distinct");
  for (const auto& [name, count] : m.splits) {
    check(parse_split(name).has_value(), ErrorCode::MalformedManifest, "unknown split '" + name + "'");
  }

  std::map<std::string, std::size_t> counts;
  std::set<std::string> ids;
  for (const auto& r : ds.records) {
    const std::string split = to_string(r.split);
    check(m.splits.count(split) == 1, ErrorCode::CountMismatch,
          "record '" + r.id + "' belongs to undeclared split '" + split + "'");
    ++counts[split];
    check(ids.insert(r.id).second, ErrorCode::InvariantViolation, "duplicate record id '" + r.id + "'");
    check(static_cast<int>(r.features.size()) == m.feature_dim, ErrorCode::FeatureDimMismatch,
          "record '" + r.id + "' has " + std::to_string(r.features.size()) + " features, expected " +
              std::to_string(m.feature_dim));
    for (double v : r.features) {
      check(std::isfinite(v), ErrorCode::InvariantViolation, "record '" + r.id + "' has a non-finite feature");
    }
    auto in_range = [&](const std::optional<int>& l) { return !l || (*l >= 0 && *l < m.num_classes); };
    check(in_range(r.noisy_label) && in_range(r.true_label), ErrorCode::InvariantViolation,
          "record '" + r.id + "' has a label outside [0, C)");
  }
  for (const auto& [name, count] : m.splits) {
    const std::size_t actual = counts.count(name) ? counts.at(name) : 0;
    check(actual == count, ErrorCode::CountMismatch,
          "split '" + name + "' declares " + std::to_string(count) + " records, found " + std::to_string(actual));
  }

  if (!ds.dynamics) return;
  check(m.dynamics_epochs > 0, ErrorCode::MalformedManifest, "dynamics present but dynamics_epochs is 0");
  std::set<std::string> seen;
  for (const auto& d : *ds.dynamics) {
    check(ids.count(d.id) == 1, ErrorCode::OrphanDynamics, "dynamics reference unknown id '" + d.id + "'");
    check(seen.insert(d.id).second, ErrorCode::InvariantViolation, "duplicate dynamics for id '" + d.id + "'");
    check(d.trajectory.rows() == m.dynamics_epochs && d.trajectory.cols() == m.num_classes,
          ErrorCode::InvariantViolation, "dynamics for '" + d.id + "' must be dynamics_epochs x num_classes");
    for (Eigen::Index e = 0; e < d.trajectory.rows(); ++e) {
      const auto row = d.trajectory.row(e);
      check(row.allFinite() && row.minCoeff() >= 0.0 && row.maxCoeff() <= 1.0 && std::abs(row.sum() - 1.0) <= 1e-6,
            ErrorCode::InvariantViolation, "dynamics row " + std::to_string(e) + " of '" + d.id +
                                               "' is not a probability vector");
    }
  }
}

inline json manifest_to_json(const Manifest& m) {
  json j;
  j["num_classes"] = m.num_classes;
  j["feature_dim"] = m.feature_dim;
  j["class_names"] = m.class_names;
  j["splits"] = m.splits;
  j["dynamics_epochs"] = m.dynamics_epochs;
  j["format_version"] = m.format_version;
  return j;
}

inline Manifest manifest_from_json(const json& j) {
  try {
    Manifest m;
    m.num_classes = j.at("num_classes").get<int>();
    m.feature_dim = j.at("feature_dim").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.splits = j.at("splits").get<std::map<std::string, std::size_t>>();
    m.dynamics_epochs = j.value("dynamics_epochs", 0);
    m.format_version = j.value("format_version", std::string(kFormatVersion));
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::MalformedManifest, e.what());
  }
}

inline json record_to_json(const SampleRecord& r) {
  json j;
  j["id"] = r.id;
  j["features"] = r.features;
  j["noisy_label"] = r.noisy_label ? json(*r.noisy_label) : json(nullptr);
  if (r.true_label) j["true_label"] = *r.true_label;
  j["split"] = to_string(r.split);
  return j;
}

inline SampleRecord record_from_json(const json& j) {
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.features = j.at("features").get<std::vector<double>>();
  const auto& noisy = j.at("noisy_label");
  if (!noisy.is_null()) r.noisy_label = noisy.get<int>();
  if (j.contains("true_label") && !j["true_label"].is_null()) r.true_label = j["true_label"].get<int>();
  const auto split = parse_split(j.at("split").get<std::string>());
  if (!split) throw std::invalid_argument("unknown split in record '" + r.id + "'");
  r.split = *split;
  return r;
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw std::invalid_argument("ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = rows[r][c];
  }
  return m;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& file, Fn&& fn) {
  std::ifstream in(file);
  require(static_cast<bool>(in), ErrorCode::IoFailure, "cannot open " + file.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    fn(line, lineno);
  }
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot write " + file.string());
  out << text;
  out.flush();
  require(static_cast<bool>(out), ErrorCode::IoFailure, "write failed for " + file.string());
}

inline std::string read_text(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoFailure, "cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Checks every type invariant; throws the matching load-time error code.
inline void validate(const Dataset& ds) { detail::validate(ds, false); }

// ---------------------------------------------------------------------------
// Load / save

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  {
    const fs::path manifest_path = dir / "manifest.json";
    require(fs::exists(manifest_path), ErrorCode::MalformedManifest, "missing " + manifest_path.string());
    json j;
    try {
      j = json::parse(detail::read_text(manifest_path));
    } catch (const json::exception& e) {
      fail(ErrorCode::MalformedManifest, e.what());
    }
    ds.manifest = detail::manifest_from_json(j);
  }

  for (Split split : kAllSplits) {
    const std::string name = to_string(split);
    if (!ds.manifest.splits.count(name)) continue;
    const fs::path file = dir / (name + ".jsonl");
    require(fs::exists(file), ErrorCode::CountMismatch, "declared split file missing: " + file.string());
    detail::for_each_line(file, [&](const std::string& line, std::size_t lineno) {
      SampleRecord r;
      try {
        r = detail::record_from_json(json::parse(line));
      } catch (const std::exception& e) {
        fail(ErrorCode::InvariantViolation, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      require(r.split == split, ErrorCode::InvariantViolation,
              "record '" + r.id + "' in " + file.filename().string() + " is tagged " + to_string(r.split));
      ds.records.push_back(std::move(r));
    });
  }

  if (ds.manifest.dynamics_epochs > 0) {
    std::vector<DynamicsRecord> dyn;
    bool any = false;
    for (Split split : kAllSplits) {
      const fs::path file = dir / ("dynamics." + to_string(split) + ".jsonl");
      if (!fs::exists(file)) continue;
      any = true;
      detail::for_each_line(file, [&](const std::string& line, std::size_t lineno) {
        DynamicsRecord d;
        try {
          const json j = json::parse(line);
          d.id = j.at("id").get<std::string>();
          d.trajectory = detail::matrix_from_json(j.at("trajectory"));
        } catch (const std::exception& e) {
          fail(ErrorCode::InvariantViolation, file.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        dyn.push_back(std::move(d));
      });
    }
    if (any) ds.dynamics = std::move(dyn);
  }

  validate(ds);
  return ds;
}

/// Writes `ds` under `dir` (created if needed). Records are written per split
/// in their relative order; load_dataset returns them grouped train, valid, test.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  detail::validate(ds, true);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());

  detail::write_text(dir / "manifest.json", detail::manifest_to_json(ds.manifest).dump(2) + "\n");

  std::unordered_map<std::string, Split> split_of;
  for (Split split : kAllSplits) {
    const std::string name = to_string(split);
    if (!ds.manifest.splits.count(name)) continue;
    std::string body;
    for (const auto& r : ds.records) {
      if (r.split != split) continue;
      body += detail::record_to_json(r).dump();
      body += '\n';
      split_of.emplace(r.id, split);
    }
    detail::write_text(dir / (name + ".jsonl"), body);
  }

  for (Split split : kAllSplits) {
    const fs::path file = dir / ("dynamics." + to_string(split) + ".jsonl");
    if (!ds.dynamics) {
      fs::remove(file, ec);
      continue;
    }
    if (!ds.manifest.splits.count(to_string(split))) continue;
    std::string body;
    for (const auto& d : *ds.dynamics) {
      if (split_of.at(d.id) != split) continue;
      json j;
      j["id"] = d.id;
      j["trajectory"] = detail::matrix_to_json(d.trajectory);
      body += j.dump();
      body += '\n';
    }
    detail::write_text(file, body);
  }
}

/// Canonical record order produced by load_dataset: grouped by split, stable within.
inline std::vector<SampleRecord> canonical_order(std::vector<SampleRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const SampleRecord& a, const SampleRecord& b) { return a.split < b.split; });
  return records;
}

/// Fills every MISSING train/valid noisy label with a class drawn uniformly
/// from [0, C). Test records are never touched.
inline std::vector<SampleRecord> resolve_missing_labels(std::vector<SampleRecord> records, int num_classes,
                                                        std::uint64_t seed) {
  require(num_classes >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
  Rng rng(derive_seed(seed, 0x6d697373ULL));
  for (auto& r : records) {
    if (r.split == Split::Test || r.noisy_label) continue;
    r.noisy_label = static_cast<int>(uniform_int(rng, 0, num_classes - 1));
  }
  return records;
}

}  // namespace labelcal
