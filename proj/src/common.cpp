#include "selfshot/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace selfshot {

void fail_validation(const std::string& msg) { throw ValidationError(msg); }
void fail_runtime(const std::string& msg) { throw RuntimeFailure(msg); }

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed) {
  return fnv1a64(s.data(), s.size(), seed);
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

std::string fingerprint_file(const std::string& path) {
  auto bytes = read_binary_file(path);
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

namespace {

std::uint64_t splitmix_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

SeedStream::SeedStream(std::uint64_t root_seed, std::string_view name) {
  // Stream identity = hash of (root seed bytes, stream name).
  std::uint64_t h = fnv1a64(&root_seed, sizeof(root_seed));
  h = fnv1a64(name, h);
  state_ = h;
}

std::uint64_t SeedStream::next_u64() { return splitmix_next(state_); }

double SeedStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::int64_t SeedStream::next_int(std::int64_t lo, std::int64_t hi) {
  SS_CHECK(lo <= hi, "SeedStream::next_int: empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());  // full 64-bit range
  // rejection sampling keeps the distribution exactly uniform
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % span);
}

double SeedStream::next_normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = next_double();
  } while (u1 <= 0.0);
  u2 = next_double();
  double mag = std::sqrt(-2.0 * std::log(u1));
  spare_ = mag * std::sin(2.0 * M_PI * u2);
  have_spare_ = true;
  return mag * std::cos(2.0 * M_PI * u2);
}

namespace {
std::atomic<int> g_workers{0};  // 0 = auto
}

int worker_count() {
  int w = g_workers.load();
  if (w > 0) return w;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void set_worker_count(int n) { g_workers.store(n); }

void parallel_chunks(std::int64_t n, std::int64_t chunk,
                     const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  if (chunk <= 0) chunk = 1;
  std::int64_t num_chunks = (n + chunk - 1) / chunk;
  int workers = worker_count();
  if (workers <= 1 || num_chunks <= 1) {
    for (std::int64_t c = 0; c < num_chunks; ++c)
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto body = [&]() {
    for (;;) {
      std::int64_t c = next.fetch_add(1);
      if (c >= num_chunks) break;
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    }
  };
  std::vector<std::thread> pool;
  int t_count = static_cast<int>(std::min<std::int64_t>(workers, num_chunks));
  pool.reserve(static_cast<std::size_t>(t_count - 1));
  for (int t = 1; t < t_count; ++t) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SS_CHECK(f.good(), "cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SS_REQUIRE(f.good(), "cannot write file: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  SS_REQUIRE(f.good(), "short write: " + path);
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  SS_CHECK(f.good(), "cannot open file: " + path);
  auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> out(size);
  if (size > 0) f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  SS_CHECK(f.good(), "short read: " + path);
  return out;
}

void write_binary_file(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  SS_REQUIRE(f.good(), "cannot write file: " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  SS_REQUIRE(f.good(), "short write: " + path);
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  SS_REQUIRE(!ec, "cannot create directory: " + path);
}

}  // namespace selfshot
