#include "fontctl/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "fontctl/dataset.hpp"
#include "fontctl/error.hpp"

namespace fontctl {

namespace {

constexpr char kMagic[8] = {'F', 'C', 'T', 'L', 'C', 'K', 'P', 'T'};

template <typename T>
void put_raw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void read_doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw InputError(origin_ + ": truncated file");
  }
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

bool TensorArchive::has_prefix(const std::string& prefix) const {
  for (const auto& [n, t] : tensors)
    if (n.compare(0, prefix.size(), prefix) == 0) return true;
  return false;
}

void TensorArchive::put_params(const std::string& prefix, const nn::ParamStore& store) {
  for (const auto& [name, v] : store.items()) put(prefix + name, v.value());
}

void TensorArchive::get_params(const std::string& prefix, nn::ParamStore& store) const {
  for (const auto& [name, v] : store.items()) {
    const Tensor* t = find(prefix + name);
    if (!t) throw InputError("checkpoint lacks parameter " + prefix + name);
    if (t->shape() != v.shape()) {
      throw InputError("checkpoint parameter " + prefix + name + " has shape " + shape_str(t->shape()) + ", model expects " +
                       shape_str(v.shape()));
    }
    ag::Var handle = v;
    handle.mutable_value() = *t;
  }
}

std::string TensorArchive::serialize() const {
  std::string out(kMagic, sizeof kMagic);
  put_raw(out, kVersion);
  const std::string m = meta.dump();
  put_raw(out, static_cast<std::uint64_t>(m.size()));
  out += m;
  put_raw(out, static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_raw(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_raw(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_raw(out, static_cast<std::int32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  return out;
}

TensorArchive TensorArchive::deserialize(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw InputError(origin + ": not a fontctl checkpoint");
  }
  Reader r(bytes, origin);
  r.get_string(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw InputError(origin + ": unsupported checkpoint version " + std::to_string(version));
  TensorArchive a;
  try {
    a.meta = nlohmann::json::parse(r.get_string(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(origin + ": corrupt metadata: " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (int& d : shape) d = r.get<std::int32_t>();
    Tensor t(shape);
    r.read_doubles(t.data(), t.size());
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw InputError(origin + ": trailing bytes");
  return a;
}

void TensorArchive::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str(), path.string());
}

}  // namespace fontctl
