#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedqif/errors.hpp"
#include "fedqif/inference.hpp"
#include "fedqif/linalg.hpp"
#include "fedqif/summary.hpp"

// Wire format of the messages exchanged between workers and the coordinator.
//
// Binary layout, all integers and doubles little-endian:
//
//   offset  size  field
//   0       4     magic "FQIF"
//   4       4     u32 format version
//   8       1     u8 round (1 = cohort summary, 2 = scores at the estimate)
//   9       ...   round payload
//   end-8   8     u64 FNV-1a 64 of every preceding byte
//
// Round 1 payload:
//   i32 cohort_id, u64 n, u32 source count, then per source
//     i32 block, u8 link, u8 basis, u8 s, u32 p,
//     f64[p] theta_hat, f64[p*s*p] S_hat (row-major),
//     f64 Q, u8 converged, i32 iterations, f64 dispersion
//   u32 dim, f64[dim*(dim+1)/2] lower triangle of V_k, row by row.
//
// Round 2 payload:
//   i32 cohort_id, u64 n, u32 label length, label bytes (UTF-8),
//   u32 source count, then per source
//     i32 block, u32 length, f64[length] psi.
namespace fedqif {

inline constexpr std::array<char, 4> kMagic{'F', 'Q', 'I', 'F'};
inline constexpr std::uint32_t kWireVersion = 1;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw.begin(), raw.end());
    }
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
  }

  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }

  void put_bytes(std::span<const char> raw) {
    for (char c : raw) bytes_.push_back(static_cast<std::uint8_t>(c));
  }

  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + at_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(raw.begin(), raw.end());
    }
    at_ += sizeof(T);
    T out;
    std::memcpy(&out, raw.data(), sizeof(T));
    return out;
  }

  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }

  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - at_; }

  void need(std::size_t count) const {
    if (bytes_.size() - at_ < count) throw FormatError("message is truncated");
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t at_ = 0;
};

inline void put_matrix(ByteWriter& w, const Mat& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) w.put_f64(m(r, c));
  }
}

inline Mat get_matrix(ByteReader& r, Index rows, Index cols) {
  r.need(static_cast<std::size_t>(rows * cols) * 8);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index c = 0; c < cols; ++c) m(i, c) = r.get_f64();
  }
  return m;
}

inline LinkKind link_from_byte(std::uint8_t b) {
  if (b > 1) throw FormatError("unknown link code " + std::to_string(b));
  return static_cast<LinkKind>(b);
}

inline BasisFamily basis_from_byte(std::uint8_t b) {
  if (b > 2) throw FormatError("unknown basis code " + std::to_string(b));
  return static_cast<BasisFamily>(b);
}

inline void put_header(ByteWriter& w, std::uint8_t round) {
  w.put_bytes(kMagic);
  w.put(kWireVersion);
  w.put(round);
}

inline std::vector<std::uint8_t> seal(ByteWriter& w) {
  auto& bytes = w.bytes();
  const std::uint64_t sum = fnv1a64(bytes);
  w.put(sum);
  return std::move(bytes);
}

// Verifies magic, version and checksum; returns the round and leaves the
// reader positioned at the payload.
inline std::uint8_t open_message(std::span<const std::uint8_t> bytes,
                                 std::span<const std::uint8_t>& body) {
  if (bytes.size() < 4 + 4 + 1 + 8) throw FormatError("message is truncated");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("not a fedqif message (bad magic)");
  }
  ByteReader tail(bytes.subspan(bytes.size() - 8));
  const std::uint64_t stored = tail.get<std::uint64_t>();
  if (stored != fnv1a64(bytes.first(bytes.size() - 8))) {
    throw FormatError("message checksum mismatch");
  }
  ByteReader head(bytes.subspan(4, 5));
  const auto version = head.get<std::uint32_t>();
  if (version != kWireVersion) {
    throw FormatError("unsupported message version " + std::to_string(version) +
                      " (supported: " + std::to_string(kWireVersion) + ")");
  }
  const auto round = head.get<std::uint8_t>();
  body = bytes.subspan(9, bytes.size() - 9 - 8);
  return round;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const CohortSummary& cs) {
  detail::ByteWriter w;
  detail::put_header(w, 1);
  w.put(static_cast<std::int32_t>(cs.cohort_id));
  w.put(cs.n);
  w.put(static_cast<std::uint32_t>(cs.fits.size()));
  for (const auto& f : cs.fits) {
    if (f.S_hat.rows() != f.moment_dim() || f.S_hat.cols() != f.p()) {
      throw DimensionError("block " + std::to_string(f.block) + " has a malformed sensitivity");
    }
    w.put(static_cast<std::int32_t>(f.block));
    w.put(static_cast<std::uint8_t>(f.link));
    w.put(static_cast<std::uint8_t>(f.family));
    w.put(static_cast<std::uint8_t>(f.s));
    w.put(static_cast<std::uint32_t>(f.p()));
    detail::put_matrix(w, f.theta_hat.transpose());
    detail::put_matrix(w, f.S_hat);
    w.put_f64(f.q_value);
    w.put(static_cast<std::uint8_t>(f.converged ? 1 : 0));
    w.put(static_cast<std::int32_t>(f.iterations));
    w.put_f64(f.dispersion);
  }
  const Index dim = cs.V.rows();
  if (cs.V.cols() != dim) throw DimensionError("V_k is not square");
  if (asymmetry(cs.V) != 0.0) throw NumericalError("V_k is not exactly symmetric");
  w.put(static_cast<std::uint32_t>(dim));
  for (Index r = 0; r < dim; ++r) {
    for (Index c = 0; c <= r; ++c) w.put_f64(cs.V(r, c));
  }
  return detail::seal(w);
}

inline std::vector<std::uint8_t> serialize(const ScoreMessage& msg) {
  detail::ByteWriter w;
  detail::put_header(w, 2);
  w.put(static_cast<std::int32_t>(msg.cohort_id));
  w.put(msg.n);
  w.put(static_cast<std::uint32_t>(msg.partition_label.size()));
  w.put_bytes(msg.partition_label);
  w.put(static_cast<std::uint32_t>(msg.scores.size()));
  for (const auto& e : msg.scores) {
    w.put(static_cast<std::int32_t>(e.block));
    w.put(static_cast<std::uint32_t>(e.psi.size()));
    detail::put_matrix(w, e.psi.transpose());
  }
  return detail::seal(w);
}

namespace detail {

inline CohortSummary read_summary(ByteReader& r) {
  CohortSummary cs;
  cs.cohort_id = r.get<std::int32_t>();
  cs.n = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    SourceEstimate f;
    f.block = r.get<std::int32_t>();
    f.link = link_from_byte(r.get<std::uint8_t>());
    f.family = basis_from_byte(r.get<std::uint8_t>());
    f.s = r.get<std::uint8_t>();
    const auto p = static_cast<Index>(r.get<std::uint32_t>());
    f.theta_hat = get_matrix(r, 1, p).transpose();
    f.S_hat = get_matrix(r, p * f.s, p);
    f.q_value = r.get_f64();
    f.converged = r.get<std::uint8_t>() != 0;
    f.iterations = r.get<std::int32_t>();
    f.dispersion = r.get_f64();
    cs.fits.push_back(std::move(f));
  }
  const auto dim = static_cast<Index>(r.get<std::uint32_t>());
  r.need(static_cast<std::size_t>(dim * (dim + 1) / 2) * 8);
  cs.V.resize(dim, dim);
  for (Index row = 0; row < dim; ++row) {
    for (Index c = 0; c <= row; ++c) {
      cs.V(row, c) = r.get_f64();
      cs.V(c, row) = cs.V(row, c);
    }
  }
  if (cs.V.rows() != cs.dim()) {
    throw FormatError("V_k dimension does not match the block fits");
  }
  return cs;
}

inline ScoreMessage read_scores(ByteReader& r) {
  ScoreMessage msg;
  msg.cohort_id = r.get<std::int32_t>();
  msg.n = r.get<std::uint64_t>();
  const auto label_len = r.get<std::uint32_t>();
  r.need(label_len);
  for (std::uint32_t i = 0; i < label_len; ++i) {
    msg.partition_label.push_back(static_cast<char>(r.get<std::uint8_t>()));
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ScoreMessage::Entry e;
    e.block = r.get<std::int32_t>();
    const auto len = static_cast<Index>(r.get<std::uint32_t>());
    e.psi = get_matrix(r, 1, len).transpose();
    msg.scores.push_back(std::move(e));
  }
  return msg;
}

}  // namespace detail

// A decoded message of either round.
using RoundMessage = std::variant<CohortSummary, ScoreMessage>;

inline RoundMessage deserialize(std::span<const std::uint8_t> bytes) {
  std::span<const std::uint8_t> body;
  const std::uint8_t round = detail::open_message(bytes, body);
  detail::ByteReader r(body);
  RoundMessage out;
  if (round == 1) {
    out = detail::read_summary(r);
  } else if (round == 2) {
    out = detail::read_scores(r);
  } else {
    throw FormatError("unknown message round " + std::to_string(round));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the payload");
  return out;
}

inline CohortSummary deserialize_summary(std::span<const std::uint8_t> bytes) {
  auto msg = deserialize(bytes);
  if (auto* cs = std::get_if<CohortSummary>(&msg)) return std::move(*cs);
  throw FormatError("expected a round-one summary, found a round-two score message");
}

inline ScoreMessage deserialize_scores(std::span<const std::uint8_t> bytes) {
  auto msg = deserialize(bytes);
  if (auto* sm = std::get_if<ScoreMessage>(&msg)) return std::move(*sm);
  throw FormatError("expected a round-two score message, found a round-one summary");
}

// JSON text mode. Doubles are written in shortest round-trip form, so
// decoding recovers the same bits.

namespace detail {

inline nlohmann::json matrix_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json vector_json(const Vec& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline Vec json_vector(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("expected a JSON array of numbers");
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
  return v;
}

inline Mat json_matrix(const nlohmann::json& j, Index cols) {
  if (!j.is_array()) throw FormatError("expected a JSON array of rows");
  Mat m(static_cast<Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || static_cast<Index>(j[r].size()) != cols) {
      throw FormatError("ragged matrix in JSON message");
    }
    for (Index c = 0; c < cols; ++c) {
      m(static_cast<Index>(r), c) = j[r][static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

inline void check_json_header(const nlohmann::json& j, int round) {
  if (j.value("format", "") != "fedqif") throw FormatError("not a fedqif JSON message");
  const auto version = j.at("format_version").get<std::uint32_t>();
  if (version != kWireVersion) {
    throw FormatError("unsupported message version " + std::to_string(version));
  }
  if (j.at("round").get<int>() != round) {
    throw FormatError("expected a round-" + std::to_string(round) + " message");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const CohortSummary& cs) {
  nlohmann::json j;
  j["format"] = "fedqif";
  j["format_version"] = kWireVersion;
  j["round"] = 1;
  j["cohort_id"] = cs.cohort_id;
  j["n"] = cs.n;
  j["fits"] = nlohmann::json::array();
  for (const auto& f : cs.fits) {
    j["fits"].push_back({{"block", f.block},
                         {"link", std::string(to_string(f.link))},
                         {"basis", std::string(to_string(f.family))},
                         {"s", f.s},
                         {"theta_hat", detail::vector_json(f.theta_hat)},
                         {"S_hat", detail::matrix_json(f.S_hat)},
                         {"q", f.q_value},
                         {"converged", f.converged},
                         {"iterations", f.iterations},
                         {"dispersion", f.dispersion}});
  }
  j["V"] = detail::matrix_json(cs.V);
  return j;
}

inline CohortSummary summary_from_json(const nlohmann::json& j) {
  try {
    detail::check_json_header(j, 1);
    CohortSummary cs;
    cs.cohort_id = j.at("cohort_id").get<int>();
    cs.n = j.at("n").get<std::uint64_t>();
    for (const auto& fj : j.at("fits")) {
      SourceEstimate f;
      f.block = fj.at("block").get<int>();
      f.link = parse_link(fj.at("link").get<std::string>());
      f.family = parse_basis(fj.at("basis").get<std::string>());
      f.s = fj.at("s").get<int>();
      f.theta_hat = detail::json_vector(fj.at("theta_hat"));
      f.S_hat = detail::json_matrix(fj.at("S_hat"), f.theta_hat.size());
      f.q_value = fj.at("q").get<double>();
      f.converged = fj.at("converged").get<bool>();
      f.iterations = fj.at("iterations").get<int>();
      f.dispersion = fj.at("dispersion").get<double>();
      cs.fits.push_back(std::move(f));
    }
    cs.V = detail::json_matrix(j.at("V"), static_cast<Index>(j.at("V").size()));
    if (cs.V.rows() != cs.dim()) throw FormatError("V_k dimension does not match the block fits");
    return cs;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed summary JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const ScoreMessage& msg) {
  nlohmann::json j;
  j["format"] = "fedqif";
  j["format_version"] = kWireVersion;
  j["round"] = 2;
  j["cohort_id"] = msg.cohort_id;
  j["n"] = msg.n;
  j["partition"] = msg.partition_label;
  j["scores"] = nlohmann::json::array();
  for (const auto& e : msg.scores) {
    j["scores"].push_back({{"block", e.block}, {"psi", detail::vector_json(e.psi)}});
  }
  return j;
}

inline ScoreMessage scores_from_json(const nlohmann::json& j) {
  try {
    detail::check_json_header(j, 2);
    ScoreMessage msg;
    msg.cohort_id = j.at("cohort_id").get<int>();
    msg.n = j.at("n").get<std::uint64_t>();
    msg.partition_label = j.at("partition").get<std::string>();
    for (const auto& ej : j.at("scores")) {
      msg.scores.push_back({ej.at("block").get<int>(), detail::json_vector(ej.at("psi"))});
    }
    return msg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed score JSON: ") + e.what());
  }
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path,
                             std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path.string());
}

// Reads a message file in either mode; JSON files start with '{'.
inline RoundMessage read_message(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t first = 0;
  while (first < bytes.size() && std::isspace(bytes[first])) ++first;
  if (first < bytes.size() && bytes[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    if (j.value("round", 0) == 2) return scores_from_json(j);
    return summary_from_json(j);
  }
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fedqif
