#include "selfshot/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "selfshot/common.hpp"

namespace selfshot {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'C', 'K', 'P', 'T', '0', '\n'};
constexpr std::uint32_t kVersion = 1;

static_assert(sizeof(float) == 4 && sizeof(double) == 8, "unexpected float sizes");

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

std::map<std::string, Tensor> Checkpoint::tensor_map() const {
  std::map<std::string, Tensor> m;
  for (const auto& [name, t] : tensors) m.emplace(name, t);
  return m;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  fail_validation("checkpoint tensor not found: " + name);
}

void save_checkpoint(const std::string& path, const std::string& arch_json,
                     const std::vector<std::pair<std::string, Tensor>>& tensors, CkptDtype dtype) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SS_REQUIRE(f.good(), "cannot write checkpoint: " + path);
  f.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(arch_json.size()));
  f.write(arch_json.data(), static_cast<std::streamsize>(arch_json.size()));
  put<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint16_t>(f, static_cast<std::uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(f, static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(f, static_cast<std::uint8_t>(t.rank()));
    for (std::int64_t i = 0; i < t.rank(); ++i) put<std::int64_t>(f, t.dim(i));
    if (dtype == CkptDtype::F32) {
      std::vector<float> buf(static_cast<std::size_t>(t.numel()));
      for (std::int64_t i = 0; i < t.numel(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
      f.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
  }
  SS_REQUIRE(f.good(), "short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SS_CHECK(f.good(), "cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  SS_CHECK(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
           "not a checkpoint file: " + path);
  std::uint32_t version = take<std::uint32_t>(f);
  SS_CHECK(version == kVersion, "unsupported checkpoint version in " + path);
  std::uint32_t desc_len = take<std::uint32_t>(f);
  Checkpoint ck;
  ck.arch_json.resize(desc_len);
  f.read(ck.arch_json.data(), desc_len);
  std::uint32_t count = take<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = take<std::uint16_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    auto dtype = static_cast<CkptDtype>(take<std::uint8_t>(f));
    std::uint8_t rank = take<std::uint8_t>(f);
    Tensor::Shape shape(rank);
    for (std::uint8_t d = 0; d < rank; ++d) shape[d] = take<std::int64_t>(f);
    Tensor t(shape);
    if (dtype == CkptDtype::F32) {
      std::vector<float> buf(static_cast<std::size_t>(t.numel()));
      f.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (std::int64_t j = 0; j < t.numel(); ++j) t[j] = static_cast<double>(buf[static_cast<std::size_t>(j)]);
    } else if (dtype == CkptDtype::F64) {
      f.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
    } else {
      fail_validation("unknown dtype tag in checkpoint: " + path);
    }
    SS_CHECK(f.good(), "truncated checkpoint: " + path);
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace selfshot
