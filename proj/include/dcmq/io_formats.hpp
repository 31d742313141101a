#pragma once

// On-disk formats (all integers and floats little-endian; see FORMATS.md).
//
//   DCMQ-EMB v1  "DCMQEMB1" | N u32 | D u32 | N*D f32
//   DCMQ-LBL v1  "DCMQLBL1" | N u32 | L u32 | N * ceil(L/8) bytes, LSB-first
//   DCMQ-CBK v1  "DCMQCBK1" | ver u8 | M u32 | K u32 | d u32 | M*K*d f32
//   DCMQ-MDL v1  "DCMQMDL1" | ver u8 | settings | image head | text head |
//                codebooks | loss trace
//   DCMQ-IDX v1  "DCMQIDX1" | ver u8 | N_g u32 | M u32 | K u32 | has_labels u8 |
//                d u32 | M*K*d f32 | N_g packed codes | [L u32 | label rows]
//
// Decoders are total: any byte string yields a value or a FormatError.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcmq/index_search.hpp"
#include "dcmq/labels.hpp"
#include "dcmq/student.hpp"

namespace dcmq {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::string_view kEmbMagic = "DCMQEMB1";
inline constexpr std::string_view kLblMagic = "DCMQLBL1";
inline constexpr std::string_view kCbkMagic = "DCMQCBK1";
inline constexpr std::string_view kMdlMagic = "DCMQMDL1";
inline constexpr std::string_view kIdxMagic = "DCMQIDX1";
inline constexpr std::uint8_t kFormatVersion = 1;

namespace detail {

/// Product that saturates at UINT64_MAX, for size checks on untrusted headers.
inline std::uint64_t mul_sat(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  return __builtin_mul_overflow(a, b, &out) ? ~std::uint64_t{0} : out;
}

class ByteWriter {
 public:
  void magic(std::string_view m) { out_.insert(out_.end(), m.begin(), m.end()); }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }

  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string_view format)
      : data_(data), format_(format) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void magic(std::string_view m) {
    if (data_.size() < m.size() || std::memcmp(data_.data(), m.data(), m.size()) != 0) {
      throw UnsupportedFormatError("not a " + std::string(format_) + " file (bad magic)");
    }
    pos_ = m.size();
  }

  void version() {
    const std::uint8_t v = u8();
    if (v != kFormatVersion) {
      throw UnsupportedFormatError(std::string(format_) + " version " + std::to_string(v) +
                                   " is not supported");
    }
  }

  std::uint8_t u8() {
    need(1, "header");
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  /// Throws unless at least n more bytes exist.
  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw CorruptFileError(std::string(format_) + " truncated in " + what + ": expected " +
                                 std::to_string(n) + " more bytes, found " + std::to_string(remaining()),
                             pos_);
    }
  }

  /// Payload that must fill the rest of the file exactly.
  void expect_exact_payload(std::uint64_t n, const char* what) const {
    if (n != remaining()) {
      throw CorruptFileError(std::string(format_) + " " + what + " size mismatch: header implies " +
                                 std::to_string(n) + " bytes, file has " + std::to_string(remaining()),
                             pos_);
    }
  }

  void expect_end() const {
    if (remaining() != 0) {
      throw CorruptFileError(std::string(format_) + " has " + std::to_string(remaining()) +
                                 " trailing bytes",
                             pos_);
    }
  }

 private:
  std::span<const std::uint8_t> data_;
  std::string_view format_;
  std::size_t pos_ = 0;
};

inline void write_float_rows(ByteWriter& w, const Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(m(r, c));
  }
}

inline Matrix read_float_rows(ByteReader& r, std::uint64_t rows, std::uint64_t cols, const char* what) {
  r.need(mul_sat(mul_sat(rows, cols), 4), what);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      m(i, j) = r.f32();
      if (!std::isfinite(m(i, j))) {
        throw CorruptFileError(std::string(what) + " holds a non-finite value", r.offset() - 4);
      }
    }
  }
  return m;
}

inline std::uint32_t checked_u32(std::uint64_t v, const char* what) {
  if (v > 0xFFFFFFFFULL) throw FormatError(std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

inline void write_label_rows(ByteWriter& w, const MultiHotLabels& labels) {
  const std::size_t row_bytes = (labels.classes() + 7) / 8;
  for (std::size_t r = 0; r < labels.rows(); ++r) {
    Bytes row(row_bytes, 0);
    for (std::size_t c = 0; c < labels.classes(); ++c) {
      if (labels.test(r, c)) row[c / 8] |= static_cast<std::uint8_t>(1U << (c % 8));
    }
    w.raw(row);
  }
}

inline MultiHotLabels read_label_rows(ByteReader& r, std::uint64_t rows, std::uint64_t classes) {
  const std::uint64_t row_bytes = (classes + 7) / 8;
  r.need(mul_sat(rows, row_bytes), "label payload");
  MultiHotLabels labels(static_cast<std::size_t>(rows), static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t row_start = r.offset();
    const auto row = r.raw(static_cast<std::size_t>(row_bytes), "label payload");
    for (std::size_t c = 0; c < row_bytes * 8; ++c) {
      const bool on = (row[c / 8] >> (c % 8)) & 1U;
      if (c < classes) {
        labels.set(i, c, on);
      } else if (on) {
        throw CorruptFileError("label row " + std::to_string(i) + " has padding bits set", row_start);
      }
    }
  }
  return labels;
}

inline void write_codebook_payload(ByteWriter& w, const Codebooks& cb) {
  w.u32(cb.sub_dim());
  write_float_rows(w, cb.words());
}

inline Codebooks read_codebook_payload(ByteReader& r, std::uint32_t books, std::uint32_t codewords) {
  const std::uint32_t d = r.u32();
  if (books == 0 || d == 0) throw CorruptFileError("codebook dimensions must be positive", r.offset());
  if (!std::has_single_bit(codewords)) {
    throw CorruptFileError("codebook K must be a power of two", r.offset());
  }
  if (codewords > (1U << 16)) throw CorruptFileError("codebook K too large", r.offset());
  Matrix words = read_float_rows(r, static_cast<std::uint64_t>(books) * codewords, d, "codewords");
  return Codebooks(books, codewords, std::move(words));
}

inline void write_head(ByteWriter& w, const MLPHead& head) {
  const auto dims = head.dims();
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (std::uint32_t d : dims) w.u32(d);
  for (std::size_t l = 0; l < head.layers(); ++l) {
    write_float_rows(w, head.weights[l]);
    write_float_rows(w, head.biases[l].transpose());
  }
}

inline MLPHead read_head(ByteReader& r) {
  const std::uint32_t count = r.u32();
  if (count < 2 || count > 64) throw CorruptFileError("head layer count out of range", r.offset() - 4);
  std::vector<std::uint32_t> dims(count);
  for (auto& d : dims) {
    d = r.u32();
    if (d == 0) throw CorruptFileError("zero layer width", r.offset() - 4);
  }
  MLPHead head;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    head.weights.push_back(read_float_rows(r, dims[l + 1], dims[l], "layer weights"));
    head.biases.push_back(read_float_rows(r, 1, dims[l + 1], "layer biases").row(0).transpose());
  }
  return head;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Byte-level codecs

inline Bytes encode_embeddings(const Matrix& m) {
  detail::ByteWriter w;
  w.magic(kEmbMagic);
  w.u32(detail::checked_u32(static_cast<std::uint64_t>(m.rows()), "N"));
  w.u32(detail::checked_u32(static_cast<std::uint64_t>(m.cols()), "D"));
  detail::write_float_rows(w, m);
  return w.take();
}

inline Matrix decode_embeddings(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "DCMQ-EMB");
  r.magic(kEmbMagic);
  const std::uint64_t n = r.u32();
  const std::uint64_t d = r.u32();
  r.expect_exact_payload(detail::mul_sat(4 * n, d), "payload");
  return detail::read_float_rows(r, n, d, "embedding payload");
}

inline Bytes encode_labels(const MultiHotLabels& labels) {
  detail::ByteWriter w;
  w.magic(kLblMagic);
  w.u32(detail::checked_u32(labels.rows(), "N"));
  w.u32(detail::checked_u32(labels.classes(), "L"));
  detail::write_label_rows(w, labels);
  return w.take();
}

inline MultiHotLabels decode_labels(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "DCMQ-LBL");
  r.magic(kLblMagic);
  const std::uint64_t n = r.u32();
  const std::uint64_t l = r.u32();
  r.expect_exact_payload(n * ((l + 7) / 8), "payload");
  return detail::read_label_rows(r, n, l);
}

inline Bytes encode_codebooks(const Codebooks& cb) {
  detail::ByteWriter w;
  w.magic(kCbkMagic);
  w.u8(kFormatVersion);
  w.u32(cb.books());
  w.u32(cb.codewords());
  detail::write_codebook_payload(w, cb);
  return w.take();
}

inline Codebooks decode_codebooks(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "DCMQ-CBK");
  r.magic(kCbkMagic);
  r.version();
  const std::uint32_t m = r.u32();
  const std::uint32_t k = r.u32();
  Codebooks cb = detail::read_codebook_payload(r, m, k);
  r.expect_end();
  return cb;
}

inline Bytes encode_model(const TrainedModel& model) {
  detail::ByteWriter w;
  w.magic(kMdlMagic);
  w.u8(kFormatVersion);
  std::string settings;
  for (const auto& [key, value] : to_settings(model.config)) settings += key + "=" + value + "\n";
  w.u32(static_cast<std::uint32_t>(settings.size()));
  w.raw({reinterpret_cast<const std::uint8_t*>(settings.data()), settings.size()});
  detail::write_head(w, model.student.image_head);
  detail::write_head(w, model.student.text_head);
  w.u32(model.student.codebooks.books());
  w.u32(model.student.codebooks.codewords());
  detail::write_codebook_payload(w, model.student.codebooks);
  w.u32(detail::checked_u32(model.trace.size(), "trace length"));
  for (const LossRecord& rec : model.trace) {
    w.u32(rec.epoch);
    w.u32(rec.batch);
    w.f64(rec.loss);
  }
  return w.take();
}

inline TrainedModel decode_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "DCMQ-MDL");
  r.magic(kMdlMagic);
  r.version();
  TrainedModel model;
  const std::uint32_t settings_len = r.u32();
  const std::size_t settings_at = r.offset();
  const auto raw = r.raw(settings_len, "settings");
  const std::string settings(raw.begin(), raw.end());
  std::size_t start = 0;
  while (start < settings.size()) {
    const std::size_t end = settings.find('\n', start);
    if (end == std::string::npos) throw CorruptFileError("unterminated settings line", settings_at + start);
    const std::string line = settings.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw CorruptFileError("settings line without '='", settings_at + start);
    try {
      if (!apply_setting(model.config, line.substr(0, eq), line.substr(eq + 1))) {
        throw CorruptFileError("unknown setting '" + line.substr(0, eq) + "'", settings_at + start);
      }
    } catch (const ParameterError& e) {
      throw CorruptFileError(e.what(), settings_at + start);
    }
    start = end + 1;
  }
  model.student.image_head = detail::read_head(r);
  model.student.text_head = detail::read_head(r);
  const std::uint32_t m = r.u32();
  const std::uint32_t k = r.u32();
  model.student.codebooks = detail::read_codebook_payload(r, m, k);
  const std::uint32_t trace_len = r.u32();
  r.need(static_cast<std::uint64_t>(trace_len) * 16, "loss trace");
  model.trace.resize(trace_len);
  for (LossRecord& rec : model.trace) {
    rec.epoch = r.u32();
    rec.batch = r.u32();
    rec.loss = r.f64();
  }
  r.expect_end();
  const StudentModel& s = model.student;
  if (s.image_head.output_dim() != static_cast<Eigen::Index>(s.codebooks.dim()) ||
      s.text_head.output_dim() != static_cast<Eigen::Index>(s.codebooks.dim())) {
    throw CorruptFileError("head output dims do not match codebook dim", r.offset());
  }
  return model;
}

inline Bytes encode_index(const Index& index) {
  detail::ByteWriter w;
  w.magic(kIdxMagic);
  w.u8(kFormatVersion);
  w.u32(detail::checked_u32(index.size(), "N_g"));
  w.u32(index.books());
  w.u32(index.codewords());
  w.u8(index.labels() ? 1 : 0);
  detail::write_codebook_payload(w, index.codebooks());
  for (const PQCode& c : index.codes()) w.raw(c.bytes);
  if (index.labels()) {
    w.u32(detail::checked_u32(index.labels()->classes(), "L"));
    detail::write_label_rows(w, *index.labels());
  }
  return w.take();
}

inline Index decode_index(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "DCMQ-IDX");
  r.magic(kIdxMagic);
  r.version();
  const std::uint32_t n = r.u32();
  const std::uint32_t m = r.u32();
  const std::uint32_t k = r.u32();
  const std::uint8_t has_labels = r.u8();
  if (has_labels > 1) throw CorruptFileError("labels flag must be 0 or 1", r.offset() - 1);
  Codebooks cb = detail::read_codebook_payload(r, m, k);
  const std::size_t per_code = code_bytes(m, k);
  r.need(detail::mul_sat(n, per_code), "codes");
  std::vector<PQCode> codes(n);
  for (PQCode& c : codes) {
    const std::size_t at = r.offset();
    const auto raw = r.raw(per_code, "codes");
    c.bytes.assign(raw.begin(), raw.end());
    try {
      unpack_code(c, m, k);
    } catch (const FormatError& e) {
      throw CorruptFileError(e.what(), at);
    }
  }
  std::optional<MultiHotLabels> labels;
  if (has_labels) {
    const std::uint32_t l = r.u32();
    labels = detail::read_label_rows(r, n, l);
  }
  r.expect_end();
  return Index(std::move(cb), std::move(codes), std::move(labels));
}

// ---------------------------------------------------------------------------
// Files

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading '" + path.string() + "'");
  return data;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error while writing '" + path.string() + "'");
}

namespace detail {
template <typename Fn>
auto decode_file(const std::filesystem::path& path, Fn decode) {
  return decode(read_file(path));
}
}  // namespace detail

inline Matrix read_embeddings(const std::filesystem::path& p) {
  return detail::decode_file(p, [](const Bytes& b) { return decode_embeddings(b); });
}
inline void write_embeddings(const std::filesystem::path& p, const Matrix& m) { write_file(p, encode_embeddings(m)); }

inline MultiHotLabels read_labels(const std::filesystem::path& p) {
  return detail::decode_file(p, [](const Bytes& b) { return decode_labels(b); });
}
inline void write_labels(const std::filesystem::path& p, const MultiHotLabels& l) { write_file(p, encode_labels(l)); }

inline Codebooks read_codebooks(const std::filesystem::path& p) {
  return detail::decode_file(p, [](const Bytes& b) { return decode_codebooks(b); });
}
inline void write_codebooks(const std::filesystem::path& p, const Codebooks& c) { write_file(p, encode_codebooks(c)); }

inline TrainedModel read_model(const std::filesystem::path& p) {
  return detail::decode_file(p, [](const Bytes& b) { return decode_model(b); });
}
inline void write_model(const std::filesystem::path& p, const TrainedModel& m) { write_file(p, encode_model(m)); }

inline Index read_index(const std::filesystem::path& p) {
  return detail::decode_file(p, [](const Bytes& b) { return decode_index(b); });
}
inline void write_index(const std::filesystem::path& p, const Index& i) { write_file(p, encode_index(i)); }

}  // namespace dcmq
