#include "emprobe/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "emprobe/error.hpp"

namespace emprobe::store {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void reals(const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) f64(data[i]);
  }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void reals(double* data, std::uint64_t n) {
    need(n, 8);
    for (std::uint64_t i = 0; i < n; ++i) data[i] = f64();
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  /// Rejects element counts whose payload cannot fit in the remaining bytes.
  void need(std::uint64_t count, std::uint64_t width = 1) const {
    if (width != 0 && count > (in_.size() - pos_) / width) throw StoreError("truncated payload");
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::uint64_t le(int width) {
    need(static_cast<std::uint64_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void put_matrix(Writer& w, const RowMatrix& m) {
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  w.reals(m.data(), static_cast<std::size_t>(m.size()));
}

RowMatrix get_matrix(Reader& r) {
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (cols != 0 && rows > std::numeric_limits<std::uint64_t>::max() / cols) throw StoreError("truncated payload");
  r.need(rows * cols, 8);
  RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  r.reals(m.data(), rows * cols);
  return m;
}

void put_config(Writer& w, const MicroConfig& c) {
  w.u64(c.vocab_size);
  w.u64(c.d_model);
  w.u64(c.n_layers);
  w.u64(c.n_heads);
  w.u64(c.d_ff);
  w.u64(c.context);
  w.u8(c.tied ? 1 : 0);
  w.u8(c.head_bias ? 1 : 0);
  w.u64(c.seed);
}

MicroConfig get_config(Reader& r) {
  MicroConfig c;
  c.vocab_size = r.u64();
  c.d_model = r.u64();
  c.n_layers = r.u64();
  c.n_heads = r.u64();
  c.d_ff = r.u64();
  c.context = r.u64();
  c.tied = r.u8() != 0;
  c.head_bias = r.u8() != 0;
  c.seed = r.u64();
  return c;
}

void encode_payload(Writer& w, const EmbeddingMatrix& m) {
  put_matrix(w, m.data);
  w.u8(m.tied ? 1 : 0);
  w.u64(m.vocab_labels.size());
  for (const auto& label : m.vocab_labels) w.bytes(label);
}

void encode_payload(Writer& w, const ProbStats& s) {
  w.u64(s.vocab_size());
  w.u64(s.positions);
  w.reals(s.sum.data(), s.vocab_size());
}

void encode_payload(Writer& w, const CorpusFreq& f) {
  w.u64(f.vocab_size());
  w.u64(f.total);
  for (auto c : f.counts) w.u64(c);
}

void encode_payload(Writer& w, const EncodingFit& f) {
  w.u64(f.dims());
  w.u64(f.dof);
  w.f64(f.intercept);
  w.f64(f.adj_r2);
  w.f64(f.r2);
  w.f64(f.residual_variance);
  w.f64(f.floor);
  w.reals(f.direction.data(), f.dims());
  w.reals(f.p_values.data(), f.dims());
}

void encode_payload(Writer& w, const Checkpoint& c) {
  w.u64(c.step);
  put_config(w, c.config);
  w.u64(c.params.size());
  for (const auto& [name, value] : c.params) {
    w.bytes(name);
    put_matrix(w, value);
  }
  w.bytes(c.rng_state);
  w.bytes(c.metadata);
}

void encode_payload(Writer& w, const SyntheticCorpus& c) {
  w.u64(c.vocab_size);
  w.u64(c.tokens.size());
  w.u8(static_cast<std::uint8_t>(c.generator));
  w.u64(c.seed);
  w.f64(c.zipf_exponent);
  for (TokenId t : c.tokens) w.u32(t);
}

EmbeddingMatrix decode_matrix(Reader& r) {
  EmbeddingMatrix m;
  m.data = get_matrix(r);
  m.tied = r.u8() != 0;
  const std::uint64_t labels = r.u64();
  r.need(labels, 8);
  m.vocab_labels.reserve(labels);
  for (std::uint64_t i = 0; i < labels; ++i) m.vocab_labels.push_back(r.bytes());
  return m;
}

ProbStats decode_probstats(Reader& r) {
  const std::uint64_t vocab = r.u64();
  ProbStats s;
  s.positions = r.u64();
  r.need(vocab, 8);
  s.sum.resize(static_cast<Eigen::Index>(vocab));
  r.reals(s.sum.data(), vocab);
  return s;
}

CorpusFreq decode_corpusfreq(Reader& r) {
  const std::uint64_t vocab = r.u64();
  CorpusFreq f;
  f.total = r.u64();
  r.need(vocab, 8);
  f.counts.resize(vocab);
  for (auto& c : f.counts) c = r.u64();
  return f;
}

EncodingFit decode_fit(Reader& r) {
  const std::uint64_t d = r.u64();
  EncodingFit f;
  f.dof = r.u64();
  f.intercept = r.f64();
  f.adj_r2 = r.f64();
  f.r2 = r.f64();
  f.residual_variance = r.f64();
  f.floor = r.f64();
  r.need(d, 16);
  f.direction.resize(static_cast<Eigen::Index>(d));
  f.p_values.resize(static_cast<Eigen::Index>(d));
  r.reals(f.direction.data(), d);
  r.reals(f.p_values.data(), d);
  return f;
}

Checkpoint decode_checkpoint(Reader& r) {
  Checkpoint c;
  c.step = r.u64();
  c.config = get_config(r);
  const std::uint64_t n = r.u64();
  r.need(n, 24);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.bytes();
    c.params.emplace_back(std::move(name), get_matrix(r));
  }
  c.rng_state = r.bytes();
  c.metadata = r.bytes();
  return c;
}

SyntheticCorpus decode_tokens(Reader& r) {
  SyntheticCorpus c;
  c.vocab_size = r.u64();
  const std::uint64_t length = r.u64();
  const std::uint8_t generator = r.u8();
  if (generator > 1) throw StoreError("unknown corpus generator");
  c.generator = static_cast<CorpusGenerator>(generator);
  c.seed = r.u64();
  c.zipf_exponent = r.f64();
  r.need(length, 4);
  c.tokens.resize(length);
  for (auto& t : c.tokens) t = r.u32();
  return c;
}

}  // namespace

RecordKind kind_of(const Record& record) {
  switch (record.index()) {
    case 0: return RecordKind::matrix;
    case 1: return RecordKind::probstats;
    case 2: return RecordKind::corpusfreq;
    case 3: return RecordKind::fit;
    case 4: return RecordKind::checkpoint;
    default: return RecordKind::tokens;
  }
}

std::string_view kind_name(RecordKind kind) {
  switch (kind) {
    case RecordKind::matrix: return "matrix";
    case RecordKind::probstats: return "probstats";
    case RecordKind::corpusfreq: return "corpusfreq";
    case RecordKind::fit: return "fit";
    case RecordKind::checkpoint: return "checkpoint";
    case RecordKind::tokens: return "tokens";
  }
  return "unknown";
}

std::string encode(const Record& record) {
  std::visit([](const auto& r) { r.validate(); }, record);
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u8(static_cast<std::uint8_t>(kind_of(record)));
  w.u16(kStoreVersion);
  std::visit([&w](const auto& r) { encode_payload(w, r); }, record);
  return w.take();
}

Record decode(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.raw(kMagic.size()) != kMagic) throw StoreError("not a store file");
  const std::uint8_t kind = r.u8();
  const std::uint16_t version = r.u16();
  if (version != kStoreVersion) throw StoreError("unsupported store version " + std::to_string(version));
  Record record;
  switch (static_cast<RecordKind>(kind)) {
    case RecordKind::matrix: record = decode_matrix(r); break;
    case RecordKind::probstats: record = decode_probstats(r); break;
    case RecordKind::corpusfreq: record = decode_corpusfreq(r); break;
    case RecordKind::fit: record = decode_fit(r); break;
    case RecordKind::checkpoint: record = decode_checkpoint(r); break;
    case RecordKind::tokens: record = decode_tokens(r); break;
    default: throw StoreError("unknown record kind " + std::to_string(kind));
  }
  if (!r.done()) throw StoreError("trailing bytes after payload");
  std::visit([](const auto& rec) { rec.validate(); }, record);
  return record;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StoreError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw StoreError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw StoreError("cannot rename into " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void write_record(const std::filesystem::path& path, const Record& record) {
  write_file_atomic(path, encode(record));
}

Record read_record(const std::filesystem::path& path) { return decode(read_file(path)); }

}  // namespace emprobe::store
