#include "xmpr/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace xmpr {

ad::Parameter& ParamStore::create(const std::string& name, Tensor init) {
  if (index_.count(name) > 0)
    throw std::invalid_argument("param store: duplicate parameter '" + name + "'");
  index_[name] = params_.size();
  params_.push_back(std::make_unique<ad::Parameter>(name, std::move(init)));
  return *params_.back();
}

ad::Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::invalid_argument("param store: unknown parameter '" + name + "'");
  return *params_[it->second];
}

const ad::Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::invalid_argument("param store: unknown parameter '" + name + "'");
  return *params_[it->second];
}

std::vector<ad::Parameter*> ParamStore::all() {
  std::vector<ad::Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

Index ParamStore::total_scalars() const {
  Index n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

namespace {

constexpr char kMagic[8] = {'X', 'M', 'P', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<ad::Parameter*>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u64(os, params.size());
  for (const ad::Parameter* p : params) {
    put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u32(os, static_cast<std::uint32_t>(p->value.rank()));
    for (Index e : p->value.shape()) put_u64(os, static_cast<std::uint64_t>(e));
    for (Index i = 0; i < p->value.numel(); ++i) put_f64(os, p->value.data()[i]);
  }
  if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' has a bad magic header");
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t count = get_u64(is);
  std::map<std::string, Tensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const std::uint32_t rank = get_u32(is);
    Shape shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<Index>(get_u64(is));
    Tensor t(shape);
    for (Index i = 0; i < t.numel(); ++i) t.data()[i] = get_f64(is);
    if (!is) throw std::runtime_error("checkpoint: '" + path + "' truncated");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, ParamStore& store) {
  auto tensors = load_checkpoint(path);
  if (tensors.size() != store.size())
    throw std::runtime_error("checkpoint: '" + path + "' holds " +
                             std::to_string(tensors.size()) + " tensors, model has " +
                             std::to_string(store.size()));
  for (auto& [name, t] : tensors) {
    ad::Parameter& p = store.get(name);
    if (!p.value.same_shape(t))
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               shape_string(t.shape()) + " vs model " +
                               shape_string(p.value.shape()));
    p.value = t;
  }
}

}  // namespace xmpr
