#pragma once

// Labeled samples, the feedback transform (threshold, alpha), mirror
// augmentation, the train/validation split and line-delimited persistence.
//
// File layout (one JSON object per line):
//   line 1   header: {"schema_version":1,"kind":"dataset"|"demolog",...}
//   line 2.. one record per sample with fields
//            obs[], theta, c, f, regime, episode, t, pair, mirrored
//            (c and f are absent in demonstration logs).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "reneg/demonstrators.hpp"
#include "reneg/errors.hpp"
#include "reneg/sim.hpp"

namespace reneg::data {

using demo::Regime;
using sim::Observation;

inline constexpr int kSchemaVersion = 1;

struct Sample {
  Observation observation;
  double theta = 0.0;  // demonstrated steer
  double c = 0.0;      // normalized correction
  double f = 0.0;      // feedback
  Regime regime = Regime::optimal;
  std::int64_t episode = 0;
  double t = 0.0;
  std::int64_t pair = 0;  // shared by a sample and its mirror image
  bool mirrored = false;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Dataset {
  std::vector<Sample> samples;
  double normalizer = 0.0;  // max |c_raw| used when labeling
  Provenance provenance;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Optional thresholding to sign(f), then f := max(f, alpha * f).
inline double apply_feedback_transform(double f, bool threshold, double alpha) {
  const double f1 = threshold ? sign(f) : f;
  return std::max(f1, alpha * f1);
}

/// Appends a mirrored copy of every sample: observation reflected, theta and
/// c negated, feedback unchanged, left/right regime tags swapped.
inline Dataset augment_mirror(const Dataset& ds) {
  Dataset out = ds;
  out.samples.reserve(2 * ds.size());
  for (const Sample& s : ds.samples) {
    Sample m = s;
    m.observation = sim::mirror(s.observation);
    m.theta = -s.theta;
    m.c = -s.c;
    m.regime = demo::mirror(s.regime);
    m.mirrored = !s.mirrored;
    out.samples.push_back(std::move(m));
  }
  return out;
}

/// Deterministic shuffled split. Samples sharing a `pair` id always land on
/// the same side; the train side receives floor(ratio * groups) groups.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("split ratio must lie in (0, 1)");

  std::vector<std::int64_t> groups;
  groups.reserve(ds.size());
  for (const auto& s : ds.samples) groups.push_back(s.pair);
  std::sort(groups.begin(), groups.end());
  groups.erase(std::unique(groups.begin(), groups.end()), groups.end());

  std::mt19937_64 rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(groups.size())));
  std::vector<std::int64_t> train_groups(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(train_groups.begin(), train_groups.end());

  Dataset train, val;
  for (Dataset* part : {&train, &val}) {
    part->normalizer = ds.normalizer;
    part->provenance = ds.provenance;
  }
  for (const auto& s : ds.samples) {
    const bool in_train = std::binary_search(train_groups.begin(), train_groups.end(), s.pair);
    (in_train ? train : val).samples.push_back(s);
  }
  return {std::move(train), std::move(val)};
}

// -- persistence ------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline json record_json(const Observation& obs, double theta, const double* c, const double* f, Regime regime,
                        std::int64_t episode, double t, std::int64_t pair, bool mirrored, bool restart) {
  json j;
  j["obs"] = obs.to_vector();
  j["theta"] = theta;
  if (c) j["c"] = *c;
  if (f) j["f"] = *f;
  j["regime"] = demo::to_string(regime);
  j["episode"] = episode;
  j["t"] = t;
  j["pair"] = pair;
  j["mirrored"] = mirrored;
  if (restart) j["restart"] = true;
  return j;
}

template <typename T>
T field(const json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end()) throw FormatError(line, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw FormatError(line, std::string("bad field '") + key + "': " + e.what());
  }
}

struct Reader {
  std::ifstream in;
  std::size_t line_no = 0;
  std::string path;

  explicit Reader(const std::string& p) : in(p), path(p) {
    if (!in) throw IoError("cannot open " + p);
  }

  bool next(json& out) {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        out = json::parse(line);
      } catch (const json::parse_error& e) {
        throw FormatError(line_no, std::string("malformed record: ") + e.what());
      }
      if (!out.is_object()) throw FormatError(line_no, "record is not an object");
      return true;
    }
    return false;
  }
};

inline json read_header(Reader& r, const char* expected_kind) {
  json h;
  if (!r.next(h)) throw FormatError(r.line_no + 1, "missing header");
  const auto version = field<int>(h, "schema_version", r.line_no);
  if (version != kSchemaVersion) {
    throw VersionError("unsupported schema_version " + std::to_string(version) + " in " + r.path);
  }
  const auto kind = field<std::string>(h, "kind", r.line_no);
  if (kind != expected_kind) {
    throw FormatError(r.line_no, "expected kind '" + std::string(expected_kind) + "', found '" + kind + "'");
  }
  return h;
}

/// Writes to `path.tmp` then renames, so readers never observe a partial file.
inline void write_atomically(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << contents;
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline Observation read_obs(const json& j, std::size_t line) {
  const auto v = field<std::vector<double>>(j, "obs", line);
  if (v.size() < 3) throw FormatError(line, "obs needs at least 3 entries");
  return Observation::from_vector(v);
}

}  // namespace detail

inline std::string serialize(const Dataset& ds) {
  using detail::json;
  json header = {{"schema_version", kSchemaVersion},
                 {"kind", "dataset"},
                 {"count", ds.size()},
                 {"normalizer", ds.normalizer},
                 {"config_hash", ds.provenance.config_hash},
                 {"seed", ds.provenance.seed}};
  std::string out = header.dump() + "\n";
  for (const Sample& s : ds.samples) {
    out += detail::record_json(s.observation, s.theta, &s.c, &s.f, s.regime, s.episode, s.t, s.pair, s.mirrored,
                               false)
               .dump();
    out += "\n";
  }
  return out;
}

inline void save(const Dataset& ds, const std::string& path) { detail::write_atomically(path, serialize(ds)); }

inline Dataset load(const std::string& path) {
  using detail::field;
  detail::Reader r(path);
  const auto header = detail::read_header(r, "dataset");
  Dataset ds;
  const auto count = field<std::size_t>(header, "count", r.line_no);
  ds.normalizer = field<double>(header, "normalizer", r.line_no);
  ds.provenance.config_hash = field<std::string>(header, "config_hash", r.line_no);
  ds.provenance.seed = field<std::uint64_t>(header, "seed", r.line_no);
  ds.samples.reserve(count);
  detail::json j;
  while (r.next(j)) {
    const std::size_t line = r.line_no;
    if (ds.samples.size() == count) throw FormatError(line, "more records than the header count");
    Sample s;
    s.observation = detail::read_obs(j, line);
    s.theta = field<double>(j, "theta", line);
    s.c = field<double>(j, "c", line);
    s.f = field<double>(j, "f", line);
    try {
      s.regime = demo::regime_from_string(field<std::string>(j, "regime", line));
    } catch (const InvalidArgument& e) {
      throw FormatError(line, e.what());
    }
    s.episode = field<std::int64_t>(j, "episode", line);
    s.t = field<double>(j, "t", line);
    s.pair = field<std::int64_t>(j, "pair", line);
    s.mirrored = field<bool>(j, "mirrored", line);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != count) {
    throw FormatError(r.line_no + 1, "file truncated: header announces " + std::to_string(count) +
                                         " records, found " + std::to_string(ds.samples.size()));
  }
  return ds;
}

inline std::string serialize(const demo::DemoLog& log) {
  using detail::json;
  json header = {{"schema_version", kSchemaVersion},
                 {"kind", "demolog"},
                 {"count", log.entries.size()},
                 {"sample_rate", log.sample_rate},
                 {"seed", log.seed}};
  std::string out = header.dump() + "\n";
  std::int64_t index = 0;
  for (const auto& e : log.entries) {
    out += detail::record_json(e.observation, e.theta.steer, nullptr, nullptr, e.regime, e.episode, e.t, index++,
                               false, e.restart)
               .dump();
    out += "\n";
  }
  return out;
}

inline void save(const demo::DemoLog& log, const std::string& path) {
  detail::write_atomically(path, serialize(log));
}

inline demo::DemoLog load_log(const std::string& path) {
  using detail::field;
  detail::Reader r(path);
  const auto header = detail::read_header(r, "demolog");
  demo::DemoLog log;
  const auto count = field<std::size_t>(header, "count", r.line_no);
  log.sample_rate = field<double>(header, "sample_rate", r.line_no);
  log.seed = field<std::uint64_t>(header, "seed", r.line_no);
  detail::json j;
  while (r.next(j)) {
    const std::size_t line = r.line_no;
    if (log.entries.size() == count) throw FormatError(line, "more records than the header count");
    demo::DemoEntry e;
    e.observation = detail::read_obs(j, line);
    e.theta.steer = field<double>(j, "theta", line);
    try {
      e.regime = demo::regime_from_string(field<std::string>(j, "regime", line));
    } catch (const InvalidArgument& ex) {
      throw FormatError(line, ex.what());
    }
    e.episode = field<std::int64_t>(j, "episode", line);
    e.t = field<double>(j, "t", line);
    e.restart = j.value("restart", false);
    log.entries.push_back(std::move(e));
  }
  if (log.entries.size() != count) {
    throw FormatError(r.line_no + 1, "file truncated: header announces " + std::to_string(count) +
                                         " records, found " + std::to_string(log.entries.size()));
  }
  return log;
}

}  // namespace reneg::data
