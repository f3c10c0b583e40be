#include "gmlfm/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gmlfm::io {

namespace {

constexpr char kMagic[8] = {'G', 'M', 'L', 'F', 'M', 'M', 'D', 'L'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }
  std::string str() {
    const std::uint32_t len = u32();
    const auto* p = take(len);
    return {reinterpret_cast<const char*>(p), len};
  }
  const std::uint8_t* take(std::size_t n) {
    if (pos_ + n > size_) throw ModelFileError("model file truncated");
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc(const std::uint8_t* data, std::size_t size) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(size)));
}

}  // namespace

std::vector<std::uint8_t> encode_model(const ModelBundle& b) {
  b.params.validate(b.spec);
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(b.params.k()));
  w.u64(b.params.n());
  w.u32(static_cast<std::uint32_t>(b.spec.layers));
  w.u8(static_cast<std::uint8_t>(b.spec.kind));
  w.u8(b.spec.use_weight ? 1 : 0);
  w.str(b.metadata);

  w.u32(static_cast<std::uint32_t>(b.layout.num_fields()));
  for (const auto& f : b.layout.fields()) {
    w.str(f.name);
    w.u64(f.cardinality);
  }
  w.u8(b.layout.reserves_unknown() ? 1 : 0);

  w.u32(static_cast<std::uint32_t>(b.vocab.num_fields()));
  for (std::size_t f = 0; f < b.vocab.num_fields(); ++f) {
    const auto& cats = b.vocab.categories(f);
    w.u64(cats.size());
    for (const auto& c : cats) w.str(c);
  }

  w.u8(b.catalog ? 1 : 0);
  if (b.catalog) {
    w.u64(b.catalog->item_field);
    w.u64(b.catalog->num_items);
    w.u32(static_cast<std::uint32_t>(b.catalog->item_side_fields.size()));
    for (auto f : b.catalog->item_side_fields) w.u64(f);
    for (const auto& row : b.catalog->item_side_indices)
      for (auto idx : row) w.u32(idx);
  }

  w.f64(b.params.w0);
  w.f64s(b.params.w);
  w.f64s(b.params.V.data());
  w.f64s(b.params.h);
  w.f64s(b.params.L.data());
  for (const auto& layer : b.params.mlp) {
    w.f64s(layer.weight.data());
    w.f64s(layer.bias);
  }
  auto& bytes = w.bytes();
  const std::uint32_t sum = crc(bytes.data(), bytes.size());
  w.u32(sum);
  return std::move(bytes);
}

ModelBundle decode_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4) throw ModelFileError("model file truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ModelFileError("not a model file (bad magic)");
  const std::size_t body = bytes.size() - 4;
  Reader trailer(bytes.data() + body, 4);
  const std::uint32_t stored = trailer.u32();
  const std::uint32_t actual = crc(bytes.data(), body);
  if (stored != actual)
    throw ModelFileError("checksum mismatch: expected " + std::to_string(stored) + ", found " +
                         std::to_string(actual));

  Reader r(bytes.data() + sizeof(kMagic), body - sizeof(kMagic));
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw ModelFileError("unsupported model format version " + std::to_string(version));
  ModelBundle b;
  const std::size_t k = r.u32();
  const std::size_t n = r.u64();
  b.spec.layers = static_cast<int>(r.u32());
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(model::DistanceKind::Cosine))
    throw ModelFileError("unknown distance kind " + std::to_string(kind));
  b.spec.kind = static_cast<model::DistanceKind>(kind);
  b.spec.use_weight = r.u8() != 0;
  b.metadata = r.str();

  std::vector<data::Field> fields(r.u32());
  for (auto& f : fields) {
    f.name = r.str();
    f.cardinality = r.u64();
  }
  const bool reserve = r.u8() != 0;
  b.layout = data::FieldLayout(std::move(fields), reserve);

  b.vocab = data::Vocabulary(r.u32());
  for (std::size_t f = 0; f < b.vocab.num_fields(); ++f) {
    const std::uint64_t count = r.u64();
    for (std::uint64_t c = 0; c < count; ++c) b.vocab.add(f, r.str());
  }

  if (r.u8()) {
    data::ItemCatalog cat;
    cat.item_field = r.u64();
    cat.num_items = r.u64();
    cat.item_side_fields.resize(r.u32());
    for (auto& f : cat.item_side_fields) f = r.u64();
    cat.item_side_indices.assign(cat.num_items, std::vector<std::uint32_t>(cat.item_side_fields.size()));
    for (auto& row : cat.item_side_indices)
      for (auto& idx : row) idx = r.u32();
    b.catalog = std::move(cat);
  }

  try {
    b.params = model::ModelParams::zeros(n, k, b.spec);
  } catch (const model::ModelError& e) {
    throw ModelFileError(std::string("invalid model header: ") + e.what());
  }
  b.params.w0 = r.f64();
  r.f64s(b.params.w);
  r.f64s(b.params.V.data());
  r.f64s(b.params.h);
  r.f64s(b.params.L.data());
  for (auto& layer : b.params.mlp) {
    r.f64s(layer.weight.data());
    r.f64s(layer.bias);
  }
  if (!r.done()) throw ModelFileError("trailing bytes in model file");
  return b;
}

void save_model(const std::filesystem::path& path, const ModelBundle& bundle) {
  const auto bytes = encode_model(bundle);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelFileError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelFileError("write failed: " + path.string());
}

ModelBundle load_model(const std::filesystem::path& path, std::optional<std::size_t> expected_n,
                       std::optional<std::size_t> expected_k) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFileError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  ModelBundle b = decode_model(bytes);
  if (expected_n && *expected_n != b.params.n())
    throw ModelFileError("attribute dimension mismatch: expected n=" + std::to_string(*expected_n) +
                         ", found n=" + std::to_string(b.params.n()));
  if (expected_k && *expected_k != b.params.k())
    throw ModelFileError("embedding size mismatch: expected k=" + std::to_string(*expected_k) +
                         ", found k=" + std::to_string(b.params.k()));
  return b;
}

}  // namespace gmlfm::io
