#include "terse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "terse/util.hpp"

namespace terse::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'T', 'E', 'R', 'S', 'E', 'C', 'K', 'P'};

class Writer {
 public:
  template <class T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf.insert(buf.end(), p, p + n);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) { bytes(v.data(), v.size() * sizeof(double)); }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  template <class T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(std::size_t n) {
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw std::runtime_error("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kCheckpointVersion);
  w.str(to_json(model.config()).dump());
  w.pod(step);
  w.str(rng_state);
  const auto params = model.named_parameters();
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(t.ndim()));
    for (auto e : t.shape()) w.pod(static_cast<std::uint64_t>(e));
    w.bytes(t.data().data(), t.size() * sizeof(double));
  }
  w.pod(optimizer.step);
  const bool has_opt = !optimizer.m.empty();
  if (has_opt && (optimizer.m.size() != params.size() || optimizer.v.size() != params.size()))
    throw ContractError("checkpoint: optimiser state does not match parameter list");
  w.pod(static_cast<std::uint32_t>(has_opt ? params.size() : 0));
  if (has_opt)
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.doubles(optimizer.m[i]);
      w.doubles(optimizer.v[i]);
    }
  return std::move(w.buf);
}

Checkpoint Checkpoint::from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  const auto cfg = model_config_from_json(nlohmann::json::parse(r.str()));
  ck.model = Transformer(cfg, 0);
  ck.step = r.pod<std::uint64_t>();
  ck.rng_state = r.str();
  const auto n = r.pod<std::uint32_t>();
  const auto expected = ck.model.named_parameters();
  if (n != expected.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  std::vector<std::size_t> sizes;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.str();
    const auto ndim = r.pod<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    const auto numel = shape_numel(shape);
    ck.model.assign(name, shape, r.doubles(numel));
    sizes.push_back(numel);
  }
  ck.optimizer.step = r.pod<std::uint64_t>();
  const auto slots = r.pod<std::uint32_t>();
  if (slots != 0 && slots != n) throw std::runtime_error("checkpoint optimiser slot count mismatch");
  for (std::uint32_t i = 0; i < slots; ++i) {
    ck.optimizer.m.push_back(r.doubles(sizes[i]));
    ck.optimizer.v.push_back(r.doubles(sizes[i]));
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = to_bytes();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

std::string model_hash(const Transformer& model) {
  Writer w;
  w.str(to_json(model.config()).dump());
  for (const auto& [name, t] : model.named_parameters()) {
    w.str(name);
    w.bytes(t.data().data(), t.size() * sizeof(double));
  }
  return sha256_hex(w.buf.data(), w.buf.size());
}

}  // namespace terse::model
